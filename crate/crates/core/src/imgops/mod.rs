//! Variant-factor catalog and image transformations.

mod factor;
mod image;
mod transform;

pub use factor::{
    degree_grid, sample_factor_subset, Factor, FactorKind, FactorMode, FactorSubset, TransformSpec,
};
pub use image::Image;
pub use transform::{apply_chain, apply_factor, generate_auxiliary};
