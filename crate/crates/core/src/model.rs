//! The four learnable networks: feature extractor `F`, classifier `C`,
//! factor-aware feature mappings `M_k` and the effect-to-weight network `W`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops::Image;
use crate::numcore::{Conv2dGeometry, Gradients, Graph, Param, Scalar, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub feature_dim: usize,
    /// Number of factor-aware mappings (catalog size K).
    pub factors: usize,
    pub conv_channels: [usize; 2],
    pub weight_hidden: usize,
}

impl NetworkSpec {
    /// Desk-scale defaults for an `h x w x c` input.
    pub fn new(height: usize, width: usize, channels: usize, classes: usize, factors: usize) -> Self {
        NetworkSpec {
            height,
            width,
            channels,
            classes,
            feature_dim: 128,
            factors,
            conv_channels: [32, 64],
            weight_hidden: 32,
        }
    }

    fn flat_len(&self) -> usize {
        self.conv_channels[1] * (self.height / 4) * (self.width / 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::contract("network", format!("input {}x{} smaller than 4x4", self.height, self.width)));
        }
        if self.classes < 2 || self.factors == 0 || self.feature_dim == 0 || self.weight_hidden == 0 {
            return Err(Error::contract("network", format!("degenerate spec {self:?}")));
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::contract("network", "zero convolution width"));
        }
        Ok(())
    }
}

fn kaiming_uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Param<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(rng.gen_range(-bound..bound))).collect();
    Param::new(Tensor::new(shape.to_vec(), data).expect("shape matches data"))
}

fn zeros<S: Scalar>(shape: &[usize]) -> Param<S> {
    Param::new(Tensor::zeros(shape))
}

/// conv(3x3)-relu-pool(2)-conv(3x3)-relu-pool(2)-flatten-linear(d)-relu.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<S> {
    pub conv1_w: Param<S>,
    pub conv1_b: Param<S>,
    pub conv2_w: Param<S>,
    pub conv2_b: Param<S>,
    pub fc_w: Param<S>,
    pub fc_b: Param<S>,
}

/// Affine map to class logits; probabilities come from a softmax on top.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<S> {
    pub w: Param<S>,
    pub b: Param<S>,
}

/// Residual affine map `f + (A f + b)`; zero branch means identity.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapping<S> {
    pub w: Param<S>,
    pub b: Param<S>,
}

/// Shared two-layer perceptron scoring one effect vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectToWeight<S> {
    pub fc1_w: Param<S>,
    pub fc1_b: Param<S>,
    pub fc2_w: Param<S>,
    pub fc2_b: Param<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<S> {
    pub spec: NetworkSpec,
    pub feature: FeatureExtractor<S>,
    pub classifier: Classifier<S>,
    pub mappings: Vec<FeatureMapping<S>>,
    pub weigher: EffectToWeight<S>,
}

impl<S: Scalar> Network<S> {
    /// Kaiming-uniform weights, zero biases, zero mapping branches and a
    /// zero output layer for `W`.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2] = spec.conv_channels;
        let d = spec.feature_dim;
        let feature = FeatureExtractor {
            conv1_w: kaiming_uniform(&mut rng, &[c1, spec.channels, 3, 3], spec.channels * 9),
            conv1_b: zeros(&[c1]),
            conv2_w: kaiming_uniform(&mut rng, &[c2, c1, 3, 3], c1 * 9),
            conv2_b: zeros(&[c2]),
            fc_w: kaiming_uniform(&mut rng, &[d, spec.flat_len()], spec.flat_len()),
            fc_b: zeros(&[d]),
        };
        let classifier = Classifier {
            w: kaiming_uniform(&mut rng, &[spec.classes, d], d),
            b: zeros(&[spec.classes]),
        };
        let mappings = (0..spec.factors)
            .map(|_| FeatureMapping { w: zeros(&[d, d]), b: zeros(&[d]) })
            .collect();
        let h = spec.weight_hidden;
        let weigher = EffectToWeight {
            fc1_w: kaiming_uniform(&mut rng, &[h, spec.classes], spec.classes),
            fc1_b: zeros(&[h]),
            fc2_w: zeros(&[1, h]),
            fc2_b: zeros(&[1]),
        };
        Ok(Network { spec, feature, classifier, mappings, weigher })
    }

    /// Parameters with canonical names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Param<S>)> {
        let f = &self.feature;
        let w = &self.weigher;
        let mut out: Vec<(String, &Param<S>)> = vec![
            ("F.conv1.weight".into(), &f.conv1_w),
            ("F.conv1.bias".into(), &f.conv1_b),
            ("F.conv2.weight".into(), &f.conv2_w),
            ("F.conv2.bias".into(), &f.conv2_b),
            ("F.fc.weight".into(), &f.fc_w),
            ("F.fc.bias".into(), &f.fc_b),
            ("C.weight".into(), &self.classifier.w),
            ("C.bias".into(), &self.classifier.b),
        ];
        for (k, m) in self.mappings.iter().enumerate() {
            out.push((format!("M.{k}.weight"), &m.w));
            out.push((format!("M.{k}.bias"), &m.b));
        }
        out.extend([
            ("W.fc1.weight".into(), &w.fc1_w),
            ("W.fc1.bias".into(), &w.fc1_b),
            ("W.fc2.weight".into(), &w.fc2_w),
            ("W.fc2.bias".into(), &w.fc2_b),
        ]);
        out
    }

    /// Same order as [`Network::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let f = &mut self.feature;
        let mut out = vec![
            &mut f.conv1_w,
            &mut f.conv1_b,
            &mut f.conv2_w,
            &mut f.conv2_b,
            &mut f.fc_w,
            &mut f.fc_b,
            &mut self.classifier.w,
            &mut self.classifier.b,
        ];
        for m in &mut self.mappings {
            out.push(&mut m.w);
            out.push(&mut m.b);
        }
        let w = &mut self.weigher;
        out.extend([&mut w.fc1_w, &mut w.fc1_b, &mut w.fc2_w, &mut w.fc2_b]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.numel()).sum()
    }

    /// Place every parameter on `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph<S>, requires_grad: bool) -> Bound {
        let vars = self
            .named_params()
            .into_iter()
            .map(|(_, p)| graph.leaf(p.value.clone(), requires_grad))
            .collect();
        Bound { vars, factors: self.spec.factors }
    }

    /// Move gradients for bound parameters into their `grad` slots.
    pub fn collect_grads(&mut self, bound: &Bound, grads: &mut Gradients<S>) -> Result<()> {
        for (p, &var) in self.params_mut().into_iter().zip(&bound.vars) {
            if let Some(g) = grads.take(var) {
                p.accumulate(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad = None;
        }
    }

    /// Stack images into an `[n, c, h, w]` tensor, checking their shape.
    pub fn image_batch(&self, images: &[&Image]) -> Result<Tensor<S>> {
        let s = &self.spec;
        if images.is_empty() {
            return Err(Error::contract("extract_features", "empty image batch"));
        }
        let mut data = Vec::with_capacity(images.len() * s.channels * s.height * s.width);
        let mut chw = Vec::with_capacity(s.channels * s.height * s.width);
        for img in images {
            if img.shape() != (s.height, s.width, s.channels) {
                return Err(Error::contract(
                    "extract_features",
                    format!(
                        "image {:?} does not match network input {}x{}x{}",
                        img.shape(),
                        s.height,
                        s.width,
                        s.channels
                    ),
                ));
            }
            chw.clear();
            img.write_chw(&mut chw);
            data.extend(chw.iter().map(|&v| S::from_f64(v as f64)));
        }
        Tensor::new(vec![images.len(), s.channels, s.height, s.width], data)
    }

    /// Features `F(x)` without recording a tape.
    pub fn extract_features(&self, images: &[&Image]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(self.image_batch(images)?);
        let f = bound.features(&mut g, x)?;
        Ok(g.value(f).clone())
    }

    /// `softmax(C(f))` rows for a feature batch.
    pub fn classify(&self, features: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let f = g.constant(features.clone());
        let logits = bound.logits(&mut g, f)?;
        let p = g.softmax(logits)?;
        Ok(g.value(p).clone())
    }

    /// `M_k(f)` for a feature batch.
    pub fn map_features(&self, k: usize, features: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let f = g.constant(features.clone());
        let out = bound.map(&mut g, k, f)?;
        Ok(g.value(out).clone())
    }

    /// Scalar score `W(e)` of one effect vector.
    pub fn score_effect(&self, effect: &[S]) -> Result<S> {
        if effect.len() != self.spec.classes {
            return Err(Error::contract(
                "score_effect",
                format!("effect of length {} for {} classes", effect.len(), self.spec.classes),
            ));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let e = g.constant(Tensor::new(vec![1, effect.len()], effect.to_vec())?);
        let s = bound.scores(&mut g, e)?;
        g.value(s).item()
    }

    /// Class probabilities `C(F(x))` for a batch, without a tape.
    pub fn predict(&self, images: &[&Image]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(self.image_batch(images)?);
        let f = bound.features(&mut g, x)?;
        let logits = bound.logits(&mut g, f)?;
        let p = g.softmax(logits)?;
        Ok(g.value(p).clone())
    }

    pub fn cast<T: Scalar>(&self) -> Network<T> {
        fn c<S: Scalar, T: Scalar>(p: &Param<S>) -> Param<T> {
            Param::new(p.value.cast())
        }
        let f = &self.feature;
        let w = &self.weigher;
        Network {
            spec: self.spec.clone(),
            feature: FeatureExtractor {
                conv1_w: c(&f.conv1_w),
                conv1_b: c(&f.conv1_b),
                conv2_w: c(&f.conv2_w),
                conv2_b: c(&f.conv2_b),
                fc_w: c(&f.fc_w),
                fc_b: c(&f.fc_b),
            },
            classifier: Classifier { w: c(&self.classifier.w), b: c(&self.classifier.b) },
            mappings: self.mappings.iter().map(|m| FeatureMapping { w: c(&m.w), b: c(&m.b) }).collect(),
            weigher: EffectToWeight { fc1_w: c(&w.fc1_w), fc1_b: c(&w.fc1_b), fc2_w: c(&w.fc2_w), fc2_b: c(&w.fc2_b) },
        }
    }
}

/// Graph handles for every parameter of a [`Network`], in canonical order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    factors: usize,
}

const CONV: Conv2dGeometry = Conv2dGeometry { stride: 1, padding: 1 };

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// `F` on an `[n, c, h, w]` batch, giving `[n, d]`.
    pub fn features<S: Scalar>(&self, g: &mut Graph<S>, images: Var) -> Result<Var> {
        let v = &self.vars;
        let x = g.conv2d(images, v[0], v[1], CONV)?;
        let x = g.relu(x)?;
        let x = g.max_pool2d(x, 2)?;
        let x = g.conv2d(x, v[2], v[3], CONV)?;
        let x = g.relu(x)?;
        let x = g.max_pool2d(x, 2)?;
        let x = g.flatten(x)?;
        let x = g.linear(x, v[4], v[5])?;
        g.relu(x)
    }

    /// Class logits `[n, |Y|]`; `C` is the softmax of these.
    pub fn logits<S: Scalar>(&self, g: &mut Graph<S>, features: Var) -> Result<Var> {
        g.linear(features, self.vars[6], self.vars[7])
    }

    /// `M_k(f) = f + (f A_k^T + b_k)`.
    pub fn map<S: Scalar>(&self, g: &mut Graph<S>, k: usize, features: Var) -> Result<Var> {
        if k >= self.factors {
            return Err(Error::contract("map_features", format!("mapping {k} of {}", self.factors)));
        }
        let branch = g.linear(features, self.vars[8 + 2 * k], self.vars[9 + 2 * k])?;
        g.add(features, branch)
    }

    /// `W` applied row-wise to `[m, |Y|]` effects, giving `[m, 1]` scores.
    pub fn scores<S: Scalar>(&self, g: &mut Graph<S>, effects: Var) -> Result<Var> {
        let base = 8 + 2 * self.factors;
        let v = &self.vars;
        let h = g.linear(effects, v[base], v[base + 1])?;
        let h = g.relu(h)?;
        g.linear(h, v[base + 2], v[base + 3])
    }
}
