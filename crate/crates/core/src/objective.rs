//! Training losses.
//!
//! * classification: mean cross-entropy of `C(F(x_s))`;
//! * causal alignment: distance between `F(x_s)` and the weighted
//!   projection `sum_k w_k M_k(F(x_a))`, plus cross-entropy of that projection;
//! * marginal alignment: the same per factor, with `x^k = G_k(x_s)` and `M_k` alone;
//! * total: the (optionally scaled) sum of the three.
//!
//! Graph-level builders take already-extracted features so the caller can
//! run `F` once over a concatenated batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::causal::EffectProfile;
use crate::error::{Error, Result};
use crate::imgops::{apply_factor, Factor, Image, TransformSpec};
use crate::model::{Bound, Network};
use crate::numcore::{softmax_row, Graph, Scalar, Tensor, Var};

/// A point on the K-simplex: one weight per feature mapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingWeights(pub Vec<f64>);

impl MappingWeights {
    pub fn uniform(k: usize) -> Self {
        MappingWeights(vec![1.0 / k as f64; k])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        crate::numcore::argmax(&self.0)
    }
}

/// Loss values for one step or one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_ac: f64,
    pub l_am: f64,
    pub total: f64,
}

/// Optional multipliers on the three terms. All 1 by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub classification: f64,
    pub causal_alignment: f64,
    pub marginal_alignment: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { classification: 1.0, causal_alignment: 1.0, marginal_alignment: 1.0 }
    }
}

/// Sum of the three terms with unit coefficients.
pub fn loss_total(l_c: f64, l_ac: f64, l_am: f64) -> Result<LossBreakdown> {
    if ![l_c, l_ac, l_am].iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("loss_total", format!("non-finite component ({l_c}, {l_ac}, {l_am})")));
    }
    Ok(LossBreakdown { l_c, l_ac, l_am, total: l_c + l_ac + l_am })
}

/// Stack profiles into an `[n * K, |Y|]` tensor, sample-major.
pub fn effects_tensor<S: Scalar>(profiles: &[EffectProfile<S>], factors: usize) -> Result<Tensor<S>> {
    let mut data = Vec::new();
    let mut classes = None;
    for p in profiles {
        if p.len() != factors {
            return Err(Error::contract(
                "mapping_weights",
                format!("profile with {} effects for {factors} mappings", p.len()),
            ));
        }
        for e in &p.effects {
            if *classes.get_or_insert(e.effect.len()) != e.effect.len() {
                return Err(Error::contract("mapping_weights", "effects of unequal length"));
            }
            data.extend_from_slice(&e.effect);
        }
    }
    let classes = classes.ok_or_else(|| Error::contract("mapping_weights", "no profiles"))?;
    Tensor::new(vec![profiles.len() * factors, classes], data)
}

/// `softmax_k W(e_k)` on the graph: `[n * K, |Y|]` effects to `[n, K]` weights.
pub fn mapping_weights_on<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    effects: Var,
    n: usize,
    factors: usize,
) -> Result<Var> {
    let scores = bound.scores(g, effects)?;
    let scores = g.reshape(scores, &[n, factors])?;
    g.softmax(scores)
}

/// Mapping weights for one effect profile, without a tape.
pub fn mapping_weights<S: Scalar>(net: &Network<S>, profile: &EffectProfile<S>) -> Result<MappingWeights> {
    let k = net.spec.factors;
    let effects = effects_tensor(std::slice::from_ref(profile), k)?;
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let e = g.constant(effects);
    let w = mapping_weights_on(&mut g, &bound, e, 1, k)?;
    Ok(MappingWeights(g.value(w).data().iter().map(|v| v.as_f64()).collect()))
}

/// Softmax of raw scores; the host-side twin of the on-graph softmax.
pub fn weights_from_scores(scores: &[f64]) -> MappingWeights {
    let mut out = Vec::with_capacity(scores.len());
    softmax_row(scores, &mut out);
    MappingWeights(out)
}

/// Uniform `[n, K]` weights as a constant.
pub fn uniform_weights_on<S: Scalar>(g: &mut Graph<S>, n: usize, factors: usize) -> Var {
    g.constant(Tensor::full(&[n, factors], S::from_f64(1.0 / factors as f64)))
}

/// Mean cross-entropy of `C(features)` against `labels`.
pub fn loss_classification_on<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    features: Var,
    labels: &[usize],
) -> Result<Var> {
    let logits = bound.logits(g, features)?;
    let ce = g.cross_entropy(logits, labels)?;
    g.mean(ce)
}

/// Weighted projection `sum_k w_ik M_k(f_i)` of a `[n, d]` feature batch.
pub fn project_on<S: Scalar>(g: &mut Graph<S>, bound: &Bound, features: Var, weights: Var, factors: usize) -> Result<Var> {
    let mapped = (0..factors).map(|k| bound.map(g, k, features)).collect::<Result<Vec<_>>>()?;
    g.mix(weights, &mapped)
}

/// `mean ||F(x_s) - proj(F(x_a))|| + mean H(C(proj(F(x_a))), y_s)`.
pub fn loss_alignment_causal_on<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    source_features: Var,
    aux_features: Var,
    weights: Var,
    labels: &[usize],
    factors: usize,
) -> Result<Var> {
    let projected = project_on(g, bound, aux_features, weights, factors)?;
    alignment_terms(g, bound, source_features, &[projected], labels)
}

/// Per-factor alignment: `parts[j] = (k, F(x^k))` for the factors in use.
/// Averages over samples and factors.
pub fn loss_alignment_marginal_on<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    source_features: Var,
    parts: &[(usize, Var)],
    labels: &[usize],
) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::contract("loss_alignment_marginal", "no factors"));
    }
    let mapped = parts
        .iter()
        .map(|&(k, f)| bound.map(g, k, f))
        .collect::<Result<Vec<_>>>()?;
    alignment_terms(g, bound, source_features, &mapped, labels)
}

fn alignment_terms<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    source_features: Var,
    projected: &[Var],
    labels: &[usize],
) -> Result<Var> {
    let mut dists = Vec::with_capacity(projected.len());
    let mut ces = Vec::with_capacity(projected.len());
    for &p in projected {
        dists.push(g.row_l2_dist(source_features, p)?);
        let logits = bound.logits(g, p)?;
        ces.push(g.cross_entropy(logits, labels)?);
    }
    let dist = if dists.len() == 1 { dists[0] } else { g.concat(&dists)? };
    let ce = if ces.len() == 1 { ces[0] } else { g.concat(&ces)? };
    let dist = g.mean(dist)?;
    let ce = g.mean(ce)?;
    g.add(dist, ce)
}

/// `G_k(x; theta)` for each factor, `theta` uniform over the factor's range.
pub fn marginal_samples<R: Rng + ?Sized>(x: &Image, factors: &[Factor], rng: &mut R) -> Result<Vec<Image>> {
    factors
        .iter()
        .map(|&f| {
            let mut spec = TransformSpec::new(f, f.sample_degree(rng));
            if f.is_stochastic() {
                spec.noise_seed = Some(rng.gen());
            }
            apply_factor(x, &spec)
        })
        .collect()
}

/// Stand-alone evaluation of the causal alignment loss for a batch,
/// used by tests and tools.
pub fn loss_alignment_causal<S: Scalar>(
    net: &Network<S>,
    sources: &[&Image],
    labels: &[usize],
    auxiliaries: &[&Image],
    profiles: &[EffectProfile<S>],
) -> Result<S> {
    if sources.is_empty() || sources.len() != auxiliaries.len() || sources.len() != profiles.len() {
        return Err(Error::contract("loss_alignment_causal", "batch parts differ in length"));
    }
    let k = net.spec.factors;
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let xs = g.constant(net.image_batch(sources)?);
    let xa = g.constant(net.image_batch(auxiliaries)?);
    let fs = bound.features(&mut g, xs)?;
    let fa = bound.features(&mut g, xa)?;
    let e = g.constant(effects_tensor(profiles, k)?);
    let w = mapping_weights_on(&mut g, &bound, e, sources.len(), k)?;
    let loss = loss_alignment_causal_on(&mut g, &bound, fs, fa, w, labels, k)?;
    g.value(loss).item()
}

/// Stand-alone marginal alignment loss with pre-generated `x^k` images,
/// `transformed[i][k]` for sample `i` and mapping `k`.
pub fn loss_alignment_marginal<S: Scalar>(
    net: &Network<S>,
    sources: &[&Image],
    labels: &[usize],
    transformed: &[Vec<Image>],
) -> Result<S> {
    let k = net.spec.factors;
    if sources.is_empty() || transformed.len() != sources.len() || transformed.iter().any(|t| t.len() != k) {
        return Err(Error::contract("loss_alignment_marginal", "need K transformed images per sample"));
    }
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let xs = g.constant(net.image_batch(sources)?);
    let fs = bound.features(&mut g, xs)?;
    let mut parts = Vec::with_capacity(k);
    for j in 0..k {
        let imgs: Vec<&Image> = transformed.iter().map(|t| &t[j]).collect();
        let x = g.constant(net.image_batch(&imgs)?);
        parts.push((j, bound.features(&mut g, x)?));
    }
    let loss = loss_alignment_marginal_on(&mut g, &bound, fs, &parts, labels)?;
    g.value(loss).item()
}

/// Stand-alone classification loss.
pub fn loss_classification<S: Scalar>(net: &Network<S>, sources: &[&Image], labels: &[usize]) -> Result<S> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let x = g.constant(net.image_batch(sources)?);
    let f = bound.features(&mut g, x)?;
    let loss = loss_classification_on(&mut g, &bound, f, labels)?;
    g.value(loss).item()
}
