//! Value types shared by every module: the image grid, complex images,
//! k-space sampling patterns and measurement vectors.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Seeded generator used everywhere randomness is needed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Cartesian pixel grid. Axis `j` holds integer positions
/// `-dims[j]/2 ..= dims[j]/2 - 1`; pixels are enumerated row-major
/// (last axis fastest).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ImageGrid {
    dims: Vec<usize>,
}

impl ImageGrid {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 2 {
            return Err(Error::InvalidArgument(format!(
                "grid dimension must be 1 or 2, got {}",
                dims.len()
            )));
        }
        if let Some(&bad) = dims.iter().find(|&&n| n == 0 || n % 2 != 0) {
            return Err(Error::InvalidArgument(format!(
                "grid side lengths must be positive and even, got {bad}"
            )));
        }
        Ok(Self { dims: dims.to_vec() })
    }

    /// Square 2-D grid of side `n`.
    pub fn square(n: usize) -> Result<Self> {
        Self::new(&[n, n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Total pixel count N.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Rows and columns of the grid viewed as 2-D; a 1-D grid is a single row.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("grid dimension validated at construction"),
        }
    }

    /// Integer grid position `p_n` of pixel `n`.
    pub fn position(&self, n: usize) -> Result<Vec<i64>> {
        let len = self.len();
        if n >= len {
            return Err(Error::IndexOutOfRange { index: n, len });
        }
        let mut pos = vec![0i64; self.dims.len()];
        let mut rest = n;
        for j in (0..self.dims.len()).rev() {
            let nj = self.dims[j];
            pos[j] = (rest % nj) as i64 - (nj / 2) as i64;
            rest /= nj;
        }
        Ok(pos)
    }

    /// Positions along axis `j` in index order.
    pub fn axis_positions(&self, j: usize) -> Vec<f64> {
        let n = self.dims[j] as i64;
        (0..n).map(|k| (k - n / 2) as f64).collect()
    }
}

/// Complex image on a grid, stored in pixel order.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    grid: ImageGrid,
    data: Vec<C64>,
}

impl ComplexImage {
    pub fn new(grid: ImageGrid, data: Vec<C64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::LengthMismatch { expected: grid.len(), found: data.len() });
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("image data".into()));
        }
        Ok(Self { grid, data })
    }

    /// Skips the finiteness scan; callers guarantee the length.
    pub(crate) fn from_parts(grid: ImageGrid, data: Vec<C64>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        Self { grid, data }
    }

    pub fn zeros(grid: ImageGrid) -> Self {
        let n = grid.len();
        Self { grid, data: vec![C64::new(0.0, 0.0); n] }
    }

    pub fn from_real(grid: ImageGrid, values: &[f64]) -> Result<Self> {
        Self::new(grid, values.iter().map(|&v| C64::new(v, 0.0)).collect())
    }

    /// Image with i.i.d. standard normal real and imaginary parts.
    pub fn random(grid: ImageGrid, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let data = (0..grid.len())
            .map(|_| C64::new(rng.sample(rand_distr::StandardNormal), rng.sample(rand_distr::StandardNormal)))
            .collect();
        Self { grid, data }
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub(crate) fn check_grid(&self, grid: &ImageGrid) -> Result<()> {
        if &self.grid != grid {
            return Err(Error::GridMismatch {
                expected: grid.dims().to_vec(),
                found: self.grid.dims().to_vec(),
            });
        }
        Ok(())
    }
}

/// M off-grid k-space locations in radians per pixel, stored point-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPattern {
    ndim: usize,
    coords: Vec<f64>,
}

impl SamplingPattern {
    /// `coords` holds `M * ndim` values, point after point.
    pub fn new(ndim: usize, coords: Vec<f64>) -> Result<Self> {
        if ndim == 0 || ndim > 2 {
            return Err(Error::InvalidArgument(format!("pattern dimension must be 1 or 2, got {ndim}")));
        }
        if coords.is_empty() || coords.len() % ndim != 0 {
            return Err(Error::InvalidArgument(format!(
                "pattern needs a positive multiple of {ndim} coordinates, got {}",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("pattern coordinates".into()));
        }
        Ok(Self { ndim, coords })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let ndim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != ndim) {
            return Err(Error::InvalidArgument("ragged point list".into()));
        }
        Self::new(ndim, points.concat())
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    /// Number of points M.
    pub fn len(&self) -> usize {
        self.coords.len() / self.ndim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, m: usize) -> &[f64] {
        &self.coords[m * self.ndim..(m + 1) * self.ndim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.ndim)
    }

    /// Flat coordinate vector, the optimization variable.
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Canonical representative with every coordinate in `[-pi, pi)`.
    pub fn wrapped(&self) -> Self {
        Self { ndim: self.ndim, coords: self.coords.iter().map(|&c| wrap_angle(c)).collect() }
    }
}

/// Wrap every coordinate of `pattern` into `[-pi, pi)`.
pub fn wrap_pattern(pattern: &SamplingPattern) -> Result<SamplingPattern> {
    if pattern.coords.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("pattern coordinates".into()));
    }
    Ok(pattern.wrapped())
}

fn wrap_angle(c: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut w = c - two_pi * ((c + PI) / two_pi).floor();
    if w >= PI {
        w -= two_pi;
    }
    if w < -PI {
        w += two_pi;
    }
    w
}

/// One complex measurement per pattern point.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceVector {
    data: Vec<C64>,
}

impl KSpaceVector {
    pub fn new(data: Vec<C64>) -> Result<Self> {
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("k-space data".into()));
        }
        Ok(Self { data })
    }

    pub(crate) fn from_vec(data: Vec<C64>) -> Self {
        Self { data }
    }

    pub fn zeros(m: usize) -> Self {
        Self { data: vec![C64::new(0.0, 0.0); m] }
    }

    pub fn random(m: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let data = (0..m)
            .map(|_| C64::new(rng.sample(rand_distr::StandardNormal), rng.sample(rand_distr::StandardNormal)))
            .collect();
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }
}

/// `sum conj(a_i) b_i`
pub fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).fold(C64::new(0.0, 0.0), |acc, (x, y)| acc + x.conj() * y)
}

pub fn norm_sqr(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

pub fn norm(a: &[C64]) -> f64 {
    norm_sqr(a).sqrt()
}
