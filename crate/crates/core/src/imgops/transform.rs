use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::factor::{Factor, FactorSubset, TransformSpec};
use super::image::Image;
use crate::error::Result;

/// Apply one factor transformation. Pure in `(image, spec)`.
pub fn apply_factor(image: &Image, spec: &TransformSpec) -> Result<Image> {
    spec.validate()?;
    let degree = spec.degree.unwrap_or(0.0);
    let seed = spec.noise_seed.unwrap_or(0);
    let out = match spec.factor {
        Factor::Brightness => map_pixels(image, |v| v * degree as f32),
        Factor::Contrast => {
            let lum = image.luminance();
            let mean = (lum.iter().map(|&v| v as f64).sum::<f64>() / lum.len() as f64) as f32;
            blend_const(image, mean, degree as f32)
        }
        Factor::Color => color(image, degree as f32),
        Factor::Sharpness => sharpness(image, degree as f32),
        Factor::AutoContrast => autocontrast(image),
        Factor::Invert => map_pixels(image, |v| 1.0 - v),
        Factor::Equalize => equalize(image),
        Factor::Solarize => {
            let t = degree as f32;
            map_pixels(image, |v| if v > t { 1.0 - v } else { v })
        }
        Factor::SolarizeAdd => {
            let a = degree as f32;
            map_pixels(image, |v| if v < 0.5 { v + a } else { v })
        }
        Factor::Posterize => posterize(image, degree.round() as u32),
        Factor::NoiseSalt => salt(image, degree, seed),
        Factor::NoiseGaussian => gaussian(image, degree as f32, seed),
        Factor::ShearX => {
            let cy = (image.height() as f64 - 1.0) / 2.0;
            resample(image, |x, y| (x + degree * (y - cy), y))
        }
        Factor::ShearY => {
            let cx = (image.width() as f64 - 1.0) / 2.0;
            resample(image, |x, y| (x, y + degree * (x - cx)))
        }
        Factor::Rotate => rotate(image, degree),
        Factor::Flip => flip(image),
    };
    Ok(out)
}

/// Compose `subset` left to right with degrees drawn uniformly from each
/// factor's range. Returns the auxiliary image and the specs used.
pub fn generate_auxiliary<R: Rng + ?Sized>(
    image: &Image,
    subset: &FactorSubset,
    rng: &mut R,
) -> Result<(Image, Vec<TransformSpec>)> {
    let specs: Vec<TransformSpec> = subset
        .factors()
        .iter()
        .map(|&f| {
            let mut spec = TransformSpec::new(f, f.sample_degree(rng));
            if f.is_stochastic() {
                spec.noise_seed = Some(rng.gen());
            }
            spec
        })
        .collect();
    let out = apply_chain(image, &specs)?;
    Ok((out, specs))
}

/// Apply specs in order.
pub fn apply_chain(image: &Image, specs: &[TransformSpec]) -> Result<Image> {
    let mut current = image.clone();
    for spec in specs {
        current = apply_factor(&current, spec)?;
    }
    Ok(current)
}

fn map_pixels(image: &Image, f: impl Fn(f32) -> f32) -> Image {
    Image::from_raw(image, image.pixels().iter().map(|&v| f(v)).collect())
}

/// `degenerate * (1 - f) + x * f`; exact at `f = 1`.
#[inline]
fn blend(degenerate: f32, x: f32, f: f32) -> f32 {
    degenerate * (1.0 - f) + x * f
}

fn blend_const(image: &Image, degenerate: f32, f: f32) -> Image {
    map_pixels(image, |v| blend(degenerate, v, f))
}

fn color(image: &Image, f: f32) -> Image {
    if image.channels() == 1 {
        return image.clone();
    }
    let lum = image.luminance();
    let data = image
        .pixels()
        .chunks(3)
        .zip(&lum)
        .flat_map(|(p, &g)| p.iter().map(move |&v| blend(g, v, f)))
        .collect();
    Image::from_raw(image, data)
}

/// Blend with a 3x3 smoothing of the image (weights 1, centre 5, over 13);
/// the one-pixel border keeps its original values in the smoothed copy.
fn sharpness(image: &Image, f: f32) -> Image {
    let (h, w, c) = image.shape();
    let src = image.pixels();
    let mut smooth = src.to_vec();
    if h >= 3 && w >= 3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for ch in 0..c {
                    let mut acc = 0.0f32;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let weight = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                            acc += weight * src[((y + dy - 1) * w + x + dx - 1) * c + ch];
                        }
                    }
                    smooth[(y * w + x) * c + ch] = acc / 13.0;
                }
            }
        }
    }
    let data = smooth.iter().zip(src).map(|(&d, &v)| blend(d, v, f)).collect();
    Image::from_raw(image, data)
}

fn per_channel(image: &Image, mut f: impl FnMut(&[f32]) -> Vec<f32>) -> Image {
    let c = image.channels();
    let mut data = vec![0.0; image.pixels().len()];
    for ch in 0..c {
        let plane: Vec<f32> = image.pixels().iter().skip(ch).step_by(c).copied().collect();
        for (i, v) in f(&plane).into_iter().enumerate() {
            data[i * c + ch] = v;
        }
    }
    Image::from_raw(image, data)
}

fn autocontrast(image: &Image) -> Image {
    per_channel(image, |plane| {
        let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if hi > lo {
            plane.iter().map(|&v| (v - lo) / (hi - lo)).collect()
        } else {
            plane.to_vec()
        }
    })
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Histogram equalization on 256 levels per channel.
fn equalize(image: &Image) -> Image {
    per_channel(image, |plane| {
        let mut hist = [0usize; 256];
        for &v in plane {
            hist[to_u8(v) as usize] += 1;
        }
        let last = hist.iter().rposition(|&n| n > 0).unwrap_or(0);
        let step = (plane.len() - hist[last]) / 255;
        if step == 0 {
            return plane.to_vec();
        }
        let mut lut = [0u8; 256];
        let mut acc = step / 2;
        for (slot, &count) in lut.iter_mut().zip(&hist) {
            *slot = (acc / step).min(255) as u8;
            acc += count;
        }
        plane.iter().map(|&v| lut[to_u8(v) as usize] as f32 / 255.0).collect()
    })
}

fn posterize(image: &Image, bits: u32) -> Image {
    if bits >= 8 {
        return image.clone();
    }
    let mask = 0xFFu8 << (8 - bits);
    map_pixels(image, |v| (to_u8(v) & mask) as f32 / 255.0)
}

/// Set a `proportion` of pixel locations to white in every channel.
fn salt(image: &Image, proportion: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = image.channels();
    let mut data = image.pixels().to_vec();
    for px in data.chunks_mut(c) {
        if rng.gen::<f64>() < proportion {
            px.iter_mut().for_each(|v| *v = 1.0);
        }
    }
    Image::from_raw(image, data)
}

fn gaussian(image: &Image, sigma: f32, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = image
        .pixels()
        .iter()
        .map(|&v| {
            let z: f32 = rng.sample(StandardNormal);
            v + sigma * z
        })
        .collect();
    Image::from_raw(image, data)
}

fn flip(image: &Image) -> Image {
    let (h, w, c) = image.shape();
    let src = image.pixels();
    let mut data = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            data.extend_from_slice(&src[(y * w + x) * c..(y * w + x + 1) * c]);
        }
    }
    Image::from_raw(image, data)
}

fn rotate(image: &Image, degrees: f64) -> Image {
    let (cx, cy) = ((image.width() as f64 - 1.0) / 2.0, (image.height() as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    resample(image, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + (cos * dx + sin * dy), cy + (cos * dy - sin * dx))
    })
}

/// Inverse-mapped bilinear resampling on a fixed canvas. Source
/// coordinates outside the image are clamped to the border (edge fill).
fn resample(image: &Image, source_of: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let (h, w, c) = image.shape();
    let src = image.pixels();
    let mut data = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source_of(x as f64, y as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Image::from_raw(image, data)
}
