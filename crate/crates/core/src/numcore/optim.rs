use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor with its pending gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Tensor<S>) -> Self {
        Param { value, grad: None }
    }

    /// Add `g` into the pending gradient.
    pub fn accumulate(&mut self, g: Tensor<S>) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(Error::contract(
                "accumulate_grad",
                format!("gradient {:?} for parameter {:?}", g.shape(), self.value.shape()),
            ));
        }
        match &mut self.grad {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with momentum and L2 weight decay.
///
/// The update follows the usual convention: `d = g + wd * p`,
/// `buf = momentum * buf + d` (with `buf = d` on the first step),
/// `p -= lr * buf`.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    pub config: SgdConfig,
    buffers: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd { config, buffers: Vec::new() }
    }

    pub fn buffer(&self, i: usize) -> Option<&Tensor<S>> {
        self.buffers.get(i).and_then(Option::as_ref)
    }

    /// Apply one update to `params`, consuming their gradients.
    ///
    /// Every parameter must carry a gradient; none is modified otherwise.
    pub fn step(&mut self, params: &mut [&mut Param<S>]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(Error::contract("optimizer_step", format!("parameter {i} has no gradient")));
        }
        if self.buffers.len() < params.len() {
            self.buffers.resize(params.len(), None);
        }
        let lr = S::from_f64(self.config.lr);
        let mu = S::from_f64(self.config.momentum);
        let wd = S::from_f64(self.config.weight_decay);
        for (p, slot) in params.iter_mut().zip(self.buffers.iter_mut()) {
            let grad = p.grad.take().expect("checked above");
            let mut d = grad;
            if wd != S::zero() {
                for (dv, &pv) in d.data_mut().iter_mut().zip(p.value.data()) {
                    *dv += wd * pv;
                }
            }
            let update = if mu != S::zero() {
                let buf = match slot {
                    Some(buf) => {
                        for (b, &dv) in buf.data_mut().iter_mut().zip(d.data()) {
                            *b = mu * *b + dv;
                        }
                        buf
                    }
                    None => slot.insert(d),
                };
                &*buf
            } else {
                *slot = Some(d);
                slot.as_ref().expect("just set")
            };
            for (pv, &u) in p.value.data_mut().iter_mut().zip(update.data()) {
                *pv = *pv - lr * u;
            }
        }
        Ok(())
    }
}
