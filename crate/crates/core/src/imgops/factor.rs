use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The extrinsic attributes that can be varied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Factor {
    Brightness,
    Contrast,
    Color,
    Sharpness,
    AutoContrast,
    Invert,
    Equalize,
    Solarize,
    SolarizeAdd,
    Posterize,
    NoiseSalt,
    NoiseGaussian,
    ShearX,
    ShearY,
    Rotate,
    Flip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorKind {
    Photometric,
    Geometric,
}

impl Factor {
    /// All sixteen factors in canonical order.
    pub const ALL: [Factor; 16] = [
        Factor::Brightness,
        Factor::Contrast,
        Factor::Color,
        Factor::Sharpness,
        Factor::AutoContrast,
        Factor::Invert,
        Factor::Equalize,
        Factor::Solarize,
        Factor::SolarizeAdd,
        Factor::Posterize,
        Factor::NoiseSalt,
        Factor::NoiseGaussian,
        Factor::ShearX,
        Factor::ShearY,
        Factor::Rotate,
        Factor::Flip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Brightness => "Brightness",
            Factor::Contrast => "Contrast",
            Factor::Color => "Color",
            Factor::Sharpness => "Sharpness",
            Factor::AutoContrast => "AutoContrast",
            Factor::Invert => "Invert",
            Factor::Equalize => "Equalize",
            Factor::Solarize => "Solarize",
            Factor::SolarizeAdd => "SolarizeAdd",
            Factor::Posterize => "Posterize",
            Factor::NoiseSalt => "NoiseSalt",
            Factor::NoiseGaussian => "NoiseGaussian",
            Factor::ShearX => "ShearX",
            Factor::ShearY => "ShearY",
            Factor::Rotate => "Rotate",
            Factor::Flip => "Flip",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn kind(self) -> FactorKind {
        match self {
            Factor::ShearX | Factor::ShearY | Factor::Rotate | Factor::Flip => FactorKind::Geometric,
            _ => FactorKind::Photometric,
        }
    }

    /// Factors without a continuous magnitude.
    pub fn is_degree_free(self) -> bool {
        matches!(self, Factor::Invert | Factor::Equalize | Factor::AutoContrast | Factor::Flip)
    }

    /// Factors that draw random noise and therefore need a seed.
    pub fn is_stochastic(self) -> bool {
        matches!(self, Factor::NoiseSalt | Factor::NoiseGaussian)
    }

    /// `[g_min, g_max]` in the factor's native unit; `None` for degree-free factors.
    pub fn degree_range(self) -> Option<(f64, f64)> {
        match self {
            Factor::Brightness | Factor::Contrast | Factor::Color | Factor::Sharpness => Some((0.3, 1.7)),
            Factor::Solarize => Some((0.0, 1.0)),
            Factor::SolarizeAdd => Some((0.0, 0.43)),
            Factor::Posterize => Some((4.0, 8.0)),
            Factor::NoiseSalt => Some((0.0, 0.10)),
            Factor::NoiseGaussian => Some((0.0, 0.20)),
            Factor::ShearX | Factor::ShearY => Some((-0.3, 0.3)),
            Factor::Rotate => Some((-30.0, 30.0)),
            Factor::AutoContrast | Factor::Invert | Factor::Equalize | Factor::Flip => None,
        }
    }

    /// Degree at which the transform leaves the image unchanged.
    pub fn identity_degree(self) -> Option<f64> {
        match self {
            Factor::Brightness | Factor::Contrast | Factor::Color | Factor::Sharpness => Some(1.0),
            Factor::Solarize => Some(1.0),
            Factor::Posterize => Some(8.0),
            Factor::SolarizeAdd | Factor::NoiseSalt | Factor::NoiseGaussian => Some(0.0),
            Factor::ShearX | Factor::ShearY | Factor::Rotate => Some(0.0),
            Factor::AutoContrast | Factor::Invert | Factor::Equalize | Factor::Flip => None,
        }
    }

    /// Draw a degree uniformly from the factor's range.
    pub fn sample_degree<R: Rng + ?Sized>(self, rng: &mut R) -> Option<f64> {
        self.degree_range().map(|(lo, hi)| rng.gen_range(lo..=hi))
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.replace(['-', '_'], "").to_ascii_lowercase();
        Factor::ALL
            .into_iter()
            .find(|f| f.name().to_ascii_lowercase() == wanted)
            .ok_or_else(|| Error::Config(format!("unknown factor {s:?}")))
    }
}

/// One concrete transformation: a factor at a degree.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub factor: Factor,
    /// Absent for degree-free factors.
    pub degree: Option<f64>,
    /// Required by the stochastic factors.
    pub noise_seed: Option<u64>,
}

impl TransformSpec {
    pub fn new(factor: Factor, degree: Option<f64>) -> Self {
        TransformSpec { factor, degree, noise_seed: None }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.noise_seed = Some(seed);
        self
    }

    /// The spec leaving the image unchanged, if the factor has one.
    pub fn identity(factor: Factor) -> Option<Self> {
        factor
            .identity_degree()
            .map(|d| TransformSpec { factor, degree: Some(d), noise_seed: Some(0) })
    }

    pub fn validate(&self) -> Result<()> {
        let Some((lo, hi)) = self.factor.degree_range() else {
            return Ok(());
        };
        match self.degree {
            None => Err(Error::contract(
                "apply_factor",
                format!("{} needs a degree in [{lo}, {hi}]", self.factor),
            )),
            Some(d) if !(lo..=hi).contains(&d) => Err(Error::contract(
                "apply_factor",
                format!("{} degree {d} outside [{lo}, {hi}]", self.factor),
            )),
            Some(_) if self.factor.is_stochastic() && self.noise_seed.is_none() => Err(Error::contract(
                "apply_factor",
                format!("{} needs a noise seed", self.factor),
            )),
            Some(_) => Ok(()),
        }
    }
}

/// `m` degrees evenly spaced over the factor's range, both ends included.
///
/// Degree-free factors yield a single `None` entry (the transform itself);
/// `m = 1` yields the midpoint of the range.
pub fn degree_grid(factor: Factor, m: usize) -> Result<Vec<Option<f64>>> {
    if m == 0 {
        return Err(Error::contract("degree_grid", "m must be at least 1"));
    }
    let Some((lo, hi)) = factor.degree_range() else {
        return Ok(vec![None]);
    };
    if m == 1 {
        return Ok(vec![Some(lo + 0.5 * (hi - lo))]);
    }
    let last = (m - 1) as f64;
    Ok((0..m)
        .map(|i| {
            if i == m - 1 {
                Some(hi)
            } else {
                Some(lo + (hi - lo) * (i as f64 / last))
            }
        })
        .collect())
}

/// Which factors make up the catalog.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorMode {
    #[default]
    All,
    Photometric,
    Geometric,
    /// Everything except Rotate and Flip, which change digit identity.
    Digits,
    #[serde(untagged)]
    Explicit(Vec<Factor>),
}

impl FactorMode {
    pub fn catalog(&self) -> Result<Vec<Factor>> {
        let list: Vec<Factor> = match self {
            FactorMode::All => Factor::ALL.to_vec(),
            FactorMode::Photometric => {
                Factor::ALL.into_iter().filter(|f| f.kind() == FactorKind::Photometric).collect()
            }
            FactorMode::Geometric => {
                Factor::ALL.into_iter().filter(|f| f.kind() == FactorKind::Geometric).collect()
            }
            FactorMode::Digits => Factor::ALL
                .into_iter()
                .filter(|f| !matches!(f, Factor::Rotate | Factor::Flip))
                .collect(),
            FactorMode::Explicit(list) => {
                for (i, f) in list.iter().enumerate() {
                    if list[..i].contains(f) {
                        return Err(Error::Config(format!("factor {f} listed twice")));
                    }
                }
                list.clone()
            }
        };
        if list.is_empty() {
            return Err(Error::Config("factor catalog is empty".into()));
        }
        Ok(list)
    }
}

/// Ordered, duplicate-free selection of factors used to build one auxiliary sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorSubset(Vec<Factor>);

impl FactorSubset {
    pub fn new(factors: Vec<Factor>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::contract("factor_subset", "empty subset"));
        }
        for (i, f) in factors.iter().enumerate() {
            if factors[..i].contains(f) {
                return Err(Error::contract("factor_subset", format!("duplicate factor {f}")));
            }
        }
        Ok(FactorSubset(factors))
    }

    /// Bypass the duplicate check; for composing arbitrary chains.
    pub fn unchecked(factors: Vec<Factor>) -> Self {
        FactorSubset(factors)
    }

    pub fn factors(&self) -> &[Factor] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Draw a subset size uniformly from `[n_min, n_max]`, then that many
/// distinct factors in random order.
pub fn sample_factor_subset<R: Rng + ?Sized>(
    rng: &mut R,
    catalog: &[Factor],
    n_min: usize,
    n_max: usize,
) -> Result<FactorSubset> {
    if catalog.is_empty() {
        return Err(Error::contract("sample_factor_subset", "empty catalog"));
    }
    if n_min == 0 || n_min > n_max || n_max > catalog.len() {
        return Err(Error::contract(
            "sample_factor_subset",
            format!("bounds [{n_min}, {n_max}] invalid for a catalog of {}", catalog.len()),
        ));
    }
    let n = rng.gen_range(n_min..=n_max);
    let picks = index::sample(rng, catalog.len(), n);
    Ok(FactorSubset(picks.into_iter().map(|i| catalog[i]).collect()))
}
