//! Baseline sampling patterns: uniform random (VDS) and low-frequency (LF).

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::types::{seeded_rng, ImageGrid, SamplingPattern};

/// Sample budget `M = round(N / factor)`.
pub fn budget_from_factor(grid: &ImageGrid, factor: f64) -> Result<usize> {
    if !(factor >= 1.0) || !factor.is_finite() {
        return Err(Error::InvalidArgument(format!("subsampling factor must be >= 1, got {factor}")));
    }
    Ok(((grid.len() as f64 / factor).round() as usize).max(1))
}

/// `M` points i.i.d. uniform on `[-pi, pi)^d`.
pub fn vds_uniform(grid: &ImageGrid, m: usize, seed: u64) -> Result<SamplingPattern> {
    if m == 0 {
        return Err(Error::InvalidArgument("pattern needs at least one point".into()));
    }
    let mut rng = seeded_rng(seed);
    let d = grid.ndim();
    SamplingPattern::new(d, (0..m * d).map(|_| rng.gen_range(-PI..PI)).collect())
}

/// Radius of the centred disk (half-width of the interval in 1-D) whose
/// area is the fraction `M/N` of the k-space box `[-pi, pi)^d`.
pub fn lf_radius(grid: &ImageGrid, m: usize) -> f64 {
    let frac = m as f64 / grid.len() as f64;
    match grid.ndim() {
        1 => PI * frac,
        _ => 2.0 * PI * (frac / PI).sqrt(),
    }
}

/// `M` points i.i.d. uniform in the centred low-frequency disk of
/// [`lf_radius`].
pub fn lf_pattern(grid: &ImageGrid, m: usize, seed: u64) -> Result<SamplingPattern> {
    if m == 0 {
        return Err(Error::InvalidArgument("pattern needs at least one point".into()));
    }
    let r = lf_radius(grid, m);
    let mut rng = seeded_rng(seed);
    let coords = match grid.ndim() {
        1 => (0..m).map(|_| rng.gen_range(-r..r)).collect(),
        _ => (0..m)
            .flat_map(|_| {
                let rho = r * rng.gen::<f64>().sqrt();
                let (s, c) = rng.gen_range(-PI..PI).sin_cos();
                [rho * c, rho * s]
            })
            .collect(),
    };
    SamplingPattern::new(grid.ndim(), coords)
}
