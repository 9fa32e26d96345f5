//! Counterfactual inference of per-factor causal effects.
//!
//! For an image `x`, the factual category is `C(F(x))`. Intervening on
//! factor `v_k` replaces `x` by `G_k(x; theta)` for every `theta` in a
//! uniform degree grid and averages the resulting predictions. The
//! effect of `v_k` is the factual minus the counterfactual distribution.
//! Nothing here records a tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops::{apply_factor, degree_grid, Factor, Image, TransformSpec};
use crate::model::Network;
use crate::numcore::Scalar;
use crate::parallel;
use crate::seed;

/// Effect of one factor on the class distribution; coordinates sum to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalEffect<S> {
    pub factor: Factor,
    pub effect: Vec<S>,
}

impl<S: Scalar> CausalEffect<S> {
    pub fn l1_norm(&self) -> f64 {
        self.effect.iter().map(|v| v.as_f64().abs()).sum()
    }
}

/// One effect per catalog factor, in catalog order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectProfile<S> {
    pub sample_id: u64,
    pub effects: Vec<CausalEffect<S>>,
}

impl<S: Scalar> EffectProfile<S> {
    pub fn len(&self) -> usize {
        self.effects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.effects.is_empty()
    }
}

/// Noise seed for the counterfactual of `factor` at grid position `degree_index`.
pub fn noise_seed(sample_id: u64, factor: Factor, degree_index: usize) -> u64 {
    seed::derive(&[sample_id, factor.index() as u64, degree_index as u64])
}

/// `C(F(x))`.
pub fn factual_category<S: Scalar>(net: &Network<S>, x: &Image) -> Result<Vec<S>> {
    Ok(net.predict(&[x])?.into_data())
}

/// The intervened images for one factor, in grid order.
fn intervened(
    x: &Image,
    factor: Factor,
    degrees: &[Option<f64>],
    sample_id: u64,
) -> Result<Vec<Image>> {
    degrees
        .iter()
        .enumerate()
        .map(|(j, &d)| {
            let spec = TransformSpec { factor, degree: d, noise_seed: Some(noise_seed(sample_id, factor, j)) };
            apply_factor(x, &spec)
        })
        .collect()
}

fn average_rows<S: Scalar>(probs: &[S], classes: usize, rows: std::ops::Range<usize>) -> Vec<S> {
    let count = S::from_f64(rows.len() as f64);
    let mut acc = vec![S::zero(); classes];
    for r in rows {
        for (a, &p) in acc.iter_mut().zip(&probs[r * classes..(r + 1) * classes]) {
            *a += p;
        }
    }
    acc.into_iter().map(|v| v / count).collect()
}

/// Mean of `C(F(G_k(x; theta)))` over `theta` in `degrees`.
pub fn counterfactual_category<S: Scalar>(
    net: &Network<S>,
    x: &Image,
    factor: Factor,
    degrees: &[Option<f64>],
    sample_id: u64,
) -> Result<Vec<S>> {
    if degrees.is_empty() {
        return Err(Error::contract("counterfactual_category", "empty degree set"));
    }
    let images = intervened(x, factor, degrees, sample_id)?;
    let refs: Vec<&Image> = images.iter().collect();
    let probs = net.predict(&refs)?;
    Ok(average_rows(probs.data(), net.spec.classes, 0..images.len()))
}

/// `e = y - y_hat`.
pub fn causal_effect<S: Scalar>(factor: Factor, factual: &[S], counterfactual: &[S]) -> Result<CausalEffect<S>> {
    if factual.len() != counterfactual.len() {
        return Err(Error::contract(
            "causal_effect",
            format!("factual has {} classes, counterfactual {}", factual.len(), counterfactual.len()),
        ));
    }
    let effect = factual.iter().zip(counterfactual).map(|(&a, &b)| a - b).collect();
    Ok(CausalEffect { factor, effect })
}

/// Effects of every catalog factor on `x`, with `m` degrees per
/// parameterized factor. All interventions share one forward batch.
pub fn effect_profile<S: Scalar>(
    net: &Network<S>,
    x: &Image,
    catalog: &[Factor],
    m: usize,
    sample_id: u64,
) -> Result<EffectProfile<S>> {
    if catalog.is_empty() {
        return Err(Error::contract("effect_profile", "empty catalog"));
    }
    let mut images = vec![x.clone()];
    let mut spans = Vec::with_capacity(catalog.len());
    for &factor in catalog {
        let degrees = degree_grid(factor, m)?;
        let start = images.len();
        images.extend(intervened(x, factor, &degrees, sample_id)?);
        spans.push(start..images.len());
    }
    let refs: Vec<&Image> = images.iter().collect();
    let probs = net.predict(&refs)?;
    let classes = net.spec.classes;
    let factual = &probs.data()[..classes];
    let effects = catalog
        .iter()
        .zip(spans)
        .map(|(&factor, span)| causal_effect(factor, factual, &average_rows(probs.data(), classes, span)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EffectProfile { sample_id, effects })
}

/// [`effect_profile`] for many images; fans out across `MCL_THREADS` workers.
pub fn effect_profiles<S: Scalar>(
    net: &Network<S>,
    images: &[&Image],
    catalog: &[Factor],
    m: usize,
    sample_ids: &[u64],
) -> Result<Vec<EffectProfile<S>>> {
    if images.len() != sample_ids.len() {
        return Err(Error::contract("effect_profiles", "one sample id per image required"));
    }
    let jobs: Vec<(&Image, u64)> = images.iter().copied().zip(sample_ids.iter().copied()).collect();
    parallel::map_ordered(&jobs, |&(x, id)| effect_profile(net, x, catalog, m, id))
        .into_iter()
        .collect()
}
