//! Undecimated Haar wavelet frame with periodic boundaries.
//!
//! Each level splits the current approximation along every axis with the
//! filters `(1/2, 1/2)` and `(1/2, -1/2)` at dilation `2^(j-1)`. Every split is
//! an isometry, so analysis `Psi^H` is an isometry and `Psi Psi^H = I`.
//!
//! Coefficient layout: the coarsest approximation band first, then the detail
//! bands of level 1, 2, ... (three per level in 2-D, one in 1-D), each band
//! holding N values in pixel order.

use crate::error::{Error, Result};
use crate::types::{ComplexImage, ImageGrid, C64};

#[derive(Clone, Debug, PartialEq)]
pub struct WaveletFrame {
    grid: ImageGrid,
    levels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientVector {
    data: Vec<C64>,
}

impl CoefficientVector {
    pub fn new(frame: &WaveletFrame, data: Vec<C64>) -> Result<Self> {
        if data.len() != frame.num_coeffs() {
            return Err(Error::LengthMismatch { expected: frame.num_coeffs(), found: data.len() });
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("wavelet coefficients".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }
}

impl WaveletFrame {
    pub fn new(grid: ImageGrid, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidArgument("wavelet frame needs at least one level".into()));
        }
        Ok(Self { grid, levels })
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Detail bands per level: 3 in 2-D, 1 in 1-D.
    fn details_per_level(&self) -> usize {
        (1 << self.grid.ndim()) - 1
    }

    pub fn num_bands(&self) -> usize {
        1 + self.levels * self.details_per_level()
    }

    /// Coefficient count P.
    pub fn num_coeffs(&self) -> usize {
        self.grid.len() * self.num_bands()
    }

    /// Applies `Psi^H`.
    pub fn analyze(&self, x: &ComplexImage) -> Result<CoefficientVector> {
        x.check_grid(&self.grid)?;
        Ok(CoefficientVector { data: self.analyze_raw(x.data()) })
    }

    /// Applies `Psi`.
    pub fn synthesize(&self, z: &CoefficientVector) -> Result<ComplexImage> {
        if z.data.len() != self.num_coeffs() {
            return Err(Error::LengthMismatch { expected: self.num_coeffs(), found: z.data.len() });
        }
        Ok(ComplexImage::from_parts(self.grid.clone(), self.synthesize_raw(&z.data)))
    }

    pub(crate) fn analyze_raw(&self, x: &[C64]) -> Vec<C64> {
        let n = self.grid.len();
        let (rows, cols) = self.grid.rows_cols();
        let per = self.details_per_level();
        let mut out = vec![C64::new(0.0, 0.0); self.num_coeffs()];
        let mut approx = x.to_vec();
        for level in 1..=self.levels {
            let shift = 1usize << (level - 1);
            let lo = filter(&approx, rows, cols, Axis::Col, shift, 1.0);
            let hi = filter(&approx, rows, cols, Axis::Col, shift, -1.0);
            let base = n * (1 + (level - 1) * per);
            if self.grid.ndim() == 1 {
                out[base..base + n].copy_from_slice(&hi);
                approx = lo;
            } else {
                let bands = [
                    filter(&lo, rows, cols, Axis::Row, shift, -1.0),
                    filter(&hi, rows, cols, Axis::Row, shift, 1.0),
                    filter(&hi, rows, cols, Axis::Row, shift, -1.0),
                ];
                for (k, band) in bands.iter().enumerate() {
                    out[base + k * n..base + (k + 1) * n].copy_from_slice(band);
                }
                approx = filter(&lo, rows, cols, Axis::Row, shift, 1.0);
            }
        }
        out[..n].copy_from_slice(&approx);
        out
    }

    pub(crate) fn synthesize_raw(&self, z: &[C64]) -> Vec<C64> {
        let n = self.grid.len();
        let (rows, cols) = self.grid.rows_cols();
        let per = self.details_per_level();
        let mut approx = z[..n].to_vec();
        for level in (1..=self.levels).rev() {
            let shift = 1usize << (level - 1);
            let base = n * (1 + (level - 1) * per);
            let band = |k: usize| &z[base + k * n..base + (k + 1) * n];
            let (lo, hi) = if self.grid.ndim() == 1 {
                (approx, band(0).to_vec())
            } else {
                let lo = add(
                    &filter_adjoint(&approx, rows, cols, Axis::Row, shift, 1.0),
                    &filter_adjoint(band(0), rows, cols, Axis::Row, shift, -1.0),
                );
                let hi = add(
                    &filter_adjoint(band(1), rows, cols, Axis::Row, shift, 1.0),
                    &filter_adjoint(band(2), rows, cols, Axis::Row, shift, -1.0),
                );
                (lo, hi)
            };
            approx = add(
                &filter_adjoint(&lo, rows, cols, Axis::Col, shift, 1.0),
                &filter_adjoint(&hi, rows, cols, Axis::Col, shift, -1.0),
            );
        }
        approx
    }
}

#[derive(Clone, Copy)]
enum Axis {
    Row,
    Col,
}

fn neighbour(r: usize, c: usize, rows: usize, cols: usize, axis: Axis, shift: usize, forward: bool) -> usize {
    match (axis, forward) {
        (Axis::Col, true) => r * cols + (c + shift) % cols,
        (Axis::Col, false) => r * cols + (c + cols - shift % cols) % cols,
        (Axis::Row, true) => ((r + shift) % rows) * cols + c,
        (Axis::Row, false) => ((r + rows - shift % rows) % rows) * cols + c,
    }
}

/// `out[i] = (x[i] + sign * x[i + shift]) / 2` along `axis`, periodic.
fn filter(x: &[C64], rows: usize, cols: usize, axis: Axis, shift: usize, sign: f64) -> Vec<C64> {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        for c in 0..cols {
            let j = neighbour(r, c, rows, cols, axis, shift, true);
            out.push((x[r * cols + c] + x[j] * sign) * 0.5);
        }
    }
    out
}

/// Adjoint of [`filter`]: `out[i] = (x[i] + sign * x[i - shift]) / 2`.
fn filter_adjoint(x: &[C64], rows: usize, cols: usize, axis: Axis, shift: usize, sign: f64) -> Vec<C64> {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        for c in 0..cols {
            let j = neighbour(r, c, rows, cols, axis, shift, false);
            out.push((x[r * cols + c] + x[j] * sign) * 0.5);
        }
    }
    out
}

fn add(a: &[C64], b: &[C64]) -> Vec<C64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}
