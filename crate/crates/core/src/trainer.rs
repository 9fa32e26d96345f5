//! Training loop, test-time inference and evaluation.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::causal::{effect_profile, effect_profiles, EffectProfile};
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::imgops::{generate_auxiliary, sample_factor_subset, Factor, FactorMode, Image};
use crate::model::{Network, NetworkSpec};
use crate::numcore::{argmax, Graph, Param, Sgd, SgdConfig, Tensor};
use crate::objective::{
    effects_tensor, loss_alignment_causal_on, loss_alignment_marginal_on, marginal_samples, mapping_weights_on,
    project_on, uniform_weights_on, LossWeights, MappingWeights,
};
use crate::parallel;
use crate::seed;

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_SAMPLE: u64 = 3;
const TAG_STEP: u64 = 4;
const TAG_EVAL: u64 = 5;

/// Which losses a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Everything: classification plus both alignment terms with learned weights.
    Full,
    /// Classification on the source only.
    Base,
    /// Classification on source and auxiliary samples.
    Dt,
    /// Classification plus alignment with uniform weights.
    Dta,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Base => "base",
            Variant::Dt => "dt",
            Variant::Dta => "dta",
        }
    }

    fn uses_auxiliary(self) -> bool {
        self != Variant::Base
    }

    fn uses_alignment(self) -> bool {
        matches!(self, Variant::Full | Variant::Dta)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Variant::Full),
            "base" => Ok(Variant::Base),
            "dt" => Ok(Variant::Dt),
            "dta" => Ok(Variant::Dta),
            _ => Err(Error::Config(format!("unknown variant `{s}` (expected full, base, dt or dta)"))),
        }
    }
}

fn d_batch() -> usize {
    32
}
fn d_lr() -> f64 {
    0.01
}
fn d_momentum() -> f64 {
    0.9
}
fn d_weight_decay() -> f64 {
    5e-4
}
fn d_m() -> usize {
    5
}
fn d_n_min() -> usize {
    1
}
fn d_n_max() -> usize {
    3
}
fn d_feature_dim() -> usize {
    128
}
fn d_limit() -> Option<usize> {
    Some(1000)
}
fn d_classes() -> usize {
    10
}
fn d_conv() -> [usize; 2] {
    [32, 64]
}

/// Run configuration. `seed`, `epochs`, `variant` and `source_train`
/// are required; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    /// Degrees per parameterized factor in the counterfactual grid.
    #[serde(default = "d_m")]
    pub m: usize,
    #[serde(default = "d_n_min")]
    pub n_min: usize,
    #[serde(default = "d_n_max")]
    pub n_max: usize,
    #[serde(default)]
    pub factor_mode: FactorMode,
    pub variant: Variant,
    #[serde(default = "d_feature_dim")]
    pub feature_dim: usize,
    pub source_train: PathBuf,
    #[serde(default)]
    pub source_test: Option<PathBuf>,
    #[serde(default)]
    pub targets: Vec<PathBuf>,
    /// Keep only the first N training images (`null` for all).
    #[serde(default = "d_limit")]
    pub train_limit: Option<usize>,
    #[serde(default = "d_limit")]
    pub test_limit: Option<usize>,
    #[serde(default = "d_classes")]
    pub classes: usize,
    /// Factors removed from the training catalog.
    #[serde(default)]
    pub holdout_factors: Vec<Factor>,
    /// Evaluate the marginal alignment on this many random factors per step
    /// instead of all K.
    #[serde(default)]
    pub am_factors: Option<usize>,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default = "d_conv")]
    pub conv_channels: [usize; 2],
}

impl TrainConfig {
    /// Config with every optional key at its default.
    pub fn new(seed: u64, epochs: usize, variant: Variant, source_train: impl Into<PathBuf>) -> Self {
        TrainConfig {
            seed,
            epochs,
            batch_size: d_batch(),
            lr: d_lr(),
            momentum: d_momentum(),
            weight_decay: d_weight_decay(),
            m: d_m(),
            n_min: d_n_min(),
            n_max: d_n_max(),
            factor_mode: FactorMode::default(),
            variant,
            feature_dim: d_feature_dim(),
            source_train: source_train.into(),
            source_test: None,
            targets: Vec::new(),
            train_limit: d_limit(),
            test_limit: d_limit(),
            classes: d_classes(),
            holdout_factors: Vec::new(),
            am_factors: None,
            loss_weights: LossWeights::default(),
            conv_channels: d_conv(),
        }
    }

    /// Strict parse: unknown or missing required keys are config errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pretty JSON with every key spelled out.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Training catalog: the factor mode minus held-out factors.
    pub fn catalog(&self) -> Result<Vec<Factor>> {
        let catalog: Vec<Factor> = self
            .factor_mode
            .catalog()?
            .into_iter()
            .filter(|f| !self.holdout_factors.contains(f))
            .collect();
        if catalog.is_empty() {
            return Err(Error::Config("factor catalog is empty after holdout".into()));
        }
        Ok(catalog)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be finite and non-negative", self.weight_decay));
        }
        if self.m == 0 || self.feature_dim == 0 || self.classes < 2 {
            return bad("m and feature_dim must be at least 1, classes at least 2".into());
        }
        let k = self.catalog()?.len();
        if self.n_min == 0 || self.n_min > self.n_max || self.n_max > k {
            return bad(format!("need 1 <= n_min <= n_max <= K = {k}, got [{}, {}]", self.n_min, self.n_max));
        }
        if self.am_factors == Some(0) {
            return bad("am_factors must be at least 1".into());
        }
        let w = &self.loss_weights;
        if ![w.classification, w.causal_alignment, w.marginal_alignment].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if self.conv_channels.contains(&0) {
            return bad("conv_channels must be positive".into());
        }
        Ok(())
    }

    pub fn network_spec(&self, shape: (usize, usize, usize)) -> Result<NetworkSpec> {
        let mut spec = NetworkSpec::new(shape.0, shape.1, shape.2, self.classes, self.catalog()?.len());
        spec.feature_dim = self.feature_dim;
        spec.conv_channels = self.conv_channels;
        spec.validate()?;
        Ok(spec)
    }
}

/// One metrics CSV row. Alignment losses are empty on evaluation rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss_c: f64,
    pub loss_ac: Option<f64>,
    pub loss_am: Option<f64>,
    /// Percent.
    pub accuracy: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,loss_c,loss_ac,loss_am,accuracy";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{},{},{:.2}",
            self.epoch,
            self.split,
            self.loss_c,
            opt(self.loss_ac),
            opt(self.loss_am),
            self.accuracy
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

struct Prepared {
    aux: Option<Image>,
    marginal: Vec<Image>,
    profile: Option<EffectProfile<f32>>,
}

struct StepStats {
    l_c: f64,
    l_ac: f64,
    l_am: f64,
    correct: usize,
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    catalog: Vec<Factor>,
    net: Network<f32>,
    sgd: Sgd<f32>,
    source: &'a Dataset,
}

impl Trainer<'_> {
    /// Number of leading parameters (in canonical order) the variant updates.
    fn trainable(&self) -> usize {
        let fc = 8;
        let k = 2 * self.net.spec.factors;
        match self.config.variant {
            Variant::Base | Variant::Dt => fc,
            Variant::Dta => fc + k,
            Variant::Full => fc + k + 4,
        }
    }

    fn prepare(&self, index: usize, sample_id: u64, am: &[usize]) -> Result<Prepared> {
        let cfg = self.config;
        let x = &self.source.images[index];
        let mut rng = ChaCha8Rng::seed_from_u64(sample_id);
        let mut out = Prepared { aux: None, marginal: Vec::new(), profile: None };
        if cfg.variant.uses_auxiliary() {
            let subset = sample_factor_subset(&mut rng, &self.catalog, cfg.n_min, cfg.n_max)?;
            out.aux = Some(generate_auxiliary(x, &subset, &mut rng)?.0);
        }
        if cfg.variant.uses_alignment() {
            let factors: Vec<Factor> = am.iter().map(|&k| self.catalog[k]).collect();
            out.marginal = marginal_samples(x, &factors, &mut rng)?;
        }
        if cfg.variant == Variant::Full {
            let aux = out.aux.as_ref().expect("full variant generates auxiliaries");
            out.profile = Some(effect_profile(&self.net, aux, &self.catalog, cfg.m, sample_id)?);
        }
        Ok(out)
    }

    fn step(&mut self, batch: &[usize], epoch: usize, step: usize) -> Result<StepStats> {
        let cfg = self.config;
        let k = self.catalog.len();
        let b = batch.len();
        let am: Vec<usize> = match cfg.am_factors {
            Some(j) if j < k => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[cfg.seed, TAG_STEP, epoch as u64, step as u64]));
                let mut picks = rand::seq::index::sample(&mut rng, k, j).into_vec();
                picks.sort_unstable();
                picks
            }
            _ => (0..k).collect(),
        };
        let jobs: Vec<(usize, u64)> = batch
            .iter()
            .map(|&i| (i, seed::derive(&[cfg.seed, TAG_SAMPLE, epoch as u64, i as u64])))
            .collect();
        let prepared = parallel::map_ordered(&jobs, |&(i, id)| self.prepare(i, id, &am))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

        let labels: Vec<usize> = batch.iter().map(|&i| self.source.labels[i] as usize).collect();
        let mut images: Vec<&Image> = batch.iter().map(|&i| &self.source.images[i]).collect();
        if cfg.variant.uses_auxiliary() {
            images.extend(prepared.iter().map(|p| p.aux.as_ref().expect("auxiliary present")));
        }
        if cfg.variant.uses_alignment() {
            for j in 0..am.len() {
                images.extend(prepared.iter().map(|p| &p.marginal[j]));
            }
        }

        let mut g = Graph::new();
        let bound = self.net.bind(&mut g, true);
        let x = g.constant(self.net.image_batch(&images)?);
        let feats = bound.features(&mut g, x)?;
        let fs = g.slice_rows(feats, 0, b)?;

        let source_logits;
        let l_c = if cfg.variant == Variant::Dt {
            let both = g.slice_rows(feats, 0, 2 * b)?;
            let logits = bound.logits(&mut g, both)?;
            source_logits = g.slice_rows(logits, 0, b)?;
            let doubled: Vec<usize> = labels.iter().chain(&labels).copied().collect();
            let ce = g.cross_entropy(logits, &doubled)?;
            g.mean(ce)?
        } else {
            source_logits = bound.logits(&mut g, fs)?;
            let ce = g.cross_entropy(source_logits, &labels)?;
            g.mean(ce)?
        };
        let lw = cfg.loss_weights;
        let mut total = g.scale(l_c, lw.classification)?;
        let mut l_ac = None;
        let mut l_am = None;
        if cfg.variant.uses_alignment() {
            let fa = g.slice_rows(feats, b, b)?;
            let weights = if cfg.variant == Variant::Full {
                let profiles: Vec<EffectProfile<f32>> =
                    prepared.into_iter().map(|p| p.profile.expect("profile present")).collect();
                let e = g.constant(effects_tensor(&profiles, k)?);
                mapping_weights_on(&mut g, &bound, e, b, k)?
            } else {
                uniform_weights_on(&mut g, b, k)
            };
            let ac = loss_alignment_causal_on(&mut g, &bound, fs, fa, weights, &labels, k)?;
            let parts = am
                .iter()
                .enumerate()
                .map(|(j, &k)| Ok((k, g.slice_rows(feats, (2 + j) * b, b)?)))
                .collect::<Result<Vec<_>>>()?;
            let am_loss = loss_alignment_marginal_on(&mut g, &bound, fs, &parts, &labels)?;
            let t = g.scale(ac, lw.causal_alignment)?;
            total = g.add(total, t)?;
            let t = g.scale(am_loss, lw.marginal_alignment)?;
            total = g.add(total, t)?;
            l_ac = Some(ac);
            l_am = Some(am_loss);
        }

        let logits = g.value(source_logits);
        let correct = (0..b).filter(|&i| argmax(logits.row(i)) == labels[i]).count();
        let stats = StepStats {
            l_c: g.value(l_c).item()? as f64,
            l_ac: l_ac.map_or(Ok(0.0), |v| g.value(v).item())? as f64,
            l_am: l_am.map_or(Ok(0.0), |v| g.value(v).item())? as f64,
            correct,
        };
        let mut grads = g.backward(total)?;
        self.net.collect_grads(&bound, &mut grads)?;
        let n = self.trainable();
        let mut params: Vec<&mut Param<f32>> = self.net.params_mut().into_iter().take(n).collect();
        self.sgd.step(&mut params)?;
        self.net.zero_grads();
        Ok(stats)
    }
}

fn with_position(err: Error, epoch: usize, step: usize) -> Error {
    match err {
        Error::Numeric { op, detail } => Error::numeric(op, format!("diverged at epoch {epoch}, step {step}: {detail}")),
        other => other,
    }
}

/// Train on `source`; `on_epoch` sees each training row as it is produced.
pub fn train_with(
    config: &TrainConfig,
    source: &Dataset,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::contract("train", "empty source dataset"));
    }
    if let Some(&bad) = source.labels.iter().find(|&&l| l as usize >= config.classes) {
        return Err(Error::contract("train", format!("label {bad} outside [0, {})", config.classes)));
    }
    let catalog = config.catalog()?;
    let spec = config.network_spec(source.image_shape().expect("nonempty"))?;
    let net = Network::init(spec, seed::derive(&[config.seed, TAG_INIT]))?;
    let sgd = Sgd::new(SgdConfig { lr: config.lr, momentum: config.momentum, weight_decay: config.weight_decay });
    let mut trainer = Trainer { config, catalog: catalog.clone(), net, sgd, source };
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(&[config.seed, TAG_SHUFFLE, epoch as u64])));
        let (mut lc, mut lac, mut lam, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let s = trainer.step(batch, epoch, step).map_err(|e| with_position(e, epoch, step))?;
            let w = batch.len() as f64;
            lc += s.l_c * w;
            lac += s.l_ac * w;
            lam += s.l_am * w;
            correct += s.correct;
        }
        let n = source.len() as f64;
        let row = MetricsRow {
            epoch,
            split: "train".into(),
            loss_c: lc / n,
            loss_ac: Some(lac / n),
            loss_am: Some(lam / n),
            accuracy: 100.0 * correct as f64 / n,
        };
        on_epoch(&row);
        metrics.push(row);
    }
    let checkpoint = Checkpoint { network: trainer.net, config: config.clone(), catalog, seed: config.seed };
    Ok(TrainOutcome { checkpoint, metrics })
}

pub fn train(config: &TrainConfig, source: &Dataset) -> Result<TrainOutcome> {
    train_with(config, source, |_| {})
}

/// Result of classifying one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub label: usize,
    pub probs: Vec<f64>,
    pub weights: MappingWeights,
    /// L1 norm of each factor's effect; only on the causal path.
    pub effect_norms: Option<Vec<f64>>,
}

/// Sample id used for the noise streams of the `index`-th evaluated image.
pub fn eval_sample_id(checkpoint: &Checkpoint, index: usize) -> u64 {
    seed::derive(&[checkpoint.seed, TAG_EVAL, index as u64])
}

fn check_shape(checkpoint: &Checkpoint, images: &[&Image]) -> Result<()> {
    let s = &checkpoint.network.spec;
    if let Some(bad) = images.iter().find(|i| i.shape() != (s.height, s.width, s.channels)) {
        return Err(Error::contract(
            "infer",
            format!(
                "image {:?} does not match the model's {}x{}x{} input",
                bad.shape(),
                s.height,
                s.width,
                s.channels
            ),
        ));
    }
    Ok(())
}

/// Classify a batch. With `causal` set (always for the full variant) each
/// image goes through counterfactual analysis, learned weights and the
/// weighted projection. Otherwise base/dt use `C(F(x))` and dta uses
/// uniform weights over the mappings.
pub fn infer_batch(checkpoint: &Checkpoint, images: &[&Image], sample_ids: &[u64], causal: bool) -> Result<Vec<Inference>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    check_shape(checkpoint, images)?;
    let net = &checkpoint.network;
    let k = net.spec.factors;
    let n = images.len();
    let causal = causal || checkpoint.config.variant == Variant::Full;
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let x = g.constant(net.image_batch(images)?);
    let f = bound.features(&mut g, x)?;
    let mut norms = None;
    let (weights, feats) = if causal {
        let profiles = effect_profiles(net, images, &checkpoint.catalog, checkpoint.config.m, sample_ids)?;
        norms = Some(
            profiles
                .iter()
                .map(|p| p.effects.iter().map(|e| e.l1_norm()).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        );
        let e = g.constant(effects_tensor(&profiles, k)?);
        let w = mapping_weights_on(&mut g, &bound, e, n, k)?;
        (Some(w), project_on(&mut g, &bound, f, w, k)?)
    } else if checkpoint.config.variant == Variant::Dta {
        let w = uniform_weights_on(&mut g, n, k);
        (Some(w), project_on(&mut g, &bound, f, w, k)?)
    } else {
        (None, f)
    };
    let logits = bound.logits(&mut g, feats)?;
    let probs = g.softmax(logits)?;
    let probs = g.value(probs);
    let uniform = Tensor::full(&[n, k], 1.0f32 / k as f32);
    let weights = weights.map_or(&uniform, |w| g.value(w));
    Ok((0..n)
        .map(|i| Inference {
            label: argmax(probs.row(i)),
            probs: probs.row(i).iter().map(|&v| v as f64).collect(),
            weights: MappingWeights(weights.row(i).iter().map(|&v| v as f64).collect()),
            effect_norms: norms.as_ref().map(|n| n[i].clone()),
        })
        .collect())
}

/// Predicted label and mapping weights for one image.
pub fn infer(checkpoint: &Checkpoint, x: &Image) -> Result<(usize, MappingWeights)> {
    let out = infer_batch(checkpoint, &[x], &[eval_sample_id(checkpoint, 0)], false)?;
    let first = out.into_iter().next().expect("one image in, one out");
    Ok((first.label, first.weights))
}

const EVAL_CHUNK: usize = 64;

/// Accuracy (percent) and mean cross-entropy over a labeled dataset.
pub fn evaluate(checkpoint: &Checkpoint, target: &Dataset) -> Result<MetricsRow> {
    if target.is_empty() {
        return Err(Error::contract("evaluate", "empty dataset"));
    }
    let mut correct = 0usize;
    let mut ce = 0.0;
    let indices: Vec<usize> = (0..target.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let images: Vec<&Image> = chunk.iter().map(|&i| &target.images[i]).collect();
        let ids: Vec<u64> = chunk.iter().map(|&i| eval_sample_id(checkpoint, i)).collect();
        for (inf, &i) in infer_batch(checkpoint, &images, &ids, false)?.iter().zip(chunk) {
            let y = target.labels[i] as usize;
            if y >= inf.probs.len() {
                return Err(Error::contract("evaluate", format!("label {y} outside the model's classes")));
            }
            correct += (inf.label == y) as usize;
            ce -= inf.probs[y].max(f64::MIN_POSITIVE).ln();
        }
    }
    let n = target.len() as f64;
    Ok(MetricsRow {
        epoch: checkpoint.config.epochs,
        split: target.name.clone(),
        loss_c: ce / n,
        loss_ac: None,
        loss_am: None,
        accuracy: 100.0 * correct as f64 / n,
    })
}
