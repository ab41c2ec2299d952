//! Direct non-uniform Fourier transform
//!
//! `[A(xi) x]_m = sum_n x_n exp(-i <p_n, xi_m>)`, evaluated exactly in
//! O(M N) work. The exponential factorizes over the two axes, so each
//! operator keeps per-axis tables `exp(-i p xi)` (every entry computed
//! directly with `sin_cos`, no phase recurrences) and forms the 2-D term as
//! the product of the row and column factors.
//!
//! Reductions run in a fixed order inside each output entry and outputs are
//! distributed whole to workers, so results do not depend on the thread count.

use crate::error::{Error, Result};
use crate::frame::WaveletFrame;
use crate::parallel::{for_each_chunk, Threading};
use crate::types::{ComplexImage, ImageGrid, KSpaceVector, SamplingPattern, C64};

const POINT_CHUNK: usize = 8;

#[derive(Clone, Debug)]
pub struct NuftOperator {
    pattern: SamplingPattern,
    grid: ImageGrid,
    rows: usize,
    cols: usize,
    row_pos: Vec<f64>,
    col_pos: Vec<f64>,
    // exp(-i p_a xi_m) for the row axis, point-major, split re/im
    row_re: Vec<f64>,
    row_im: Vec<f64>,
    // same for the column axis
    col_re: Vec<f64>,
    col_im: Vec<f64>,
    threading: Threading,
}

/// Split a complex slice into separate real and imaginary buffers.
fn split(z: &[C64]) -> (Vec<f64>, Vec<f64>) {
    (z.iter().map(|c| c.re).collect(), z.iter().map(|c| c.im).collect())
}

/// `sum_k (xr + i xi)_k (er + i ei)_k` with four fixed accumulator lanes.
#[inline]
fn cdot(xr: &[f64], xi: &[f64], er: &[f64], ei: &[f64]) -> (f64, f64) {
    let mut sr = [0.0f64; 4];
    let mut si = [0.0f64; 4];
    let quads = xr.chunks_exact(4).zip(xi.chunks_exact(4)).zip(er.chunks_exact(4).zip(ei.chunks_exact(4)));
    for ((a, b), (c, d)) in quads {
        for l in 0..4 {
            sr[l] += a[l] * c[l] - b[l] * d[l];
            si[l] += a[l] * d[l] + b[l] * c[l];
        }
    }
    let body = xr.len() / 4 * 4;
    for k in body..xr.len() {
        sr[0] += xr[k] * er[k] - xi[k] * ei[k];
        si[0] += xr[k] * ei[k] + xi[k] * er[k];
    }
    ((sr[0] + sr[1]) + (sr[2] + sr[3]), (si[0] + si[1]) + (si[2] + si[3]))
}

fn phase_table(pattern: &SamplingPattern, coord: Option<usize>, positions: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = pattern.len();
    let n = positions.len();
    let mut re = vec![0.0; m * n];
    let mut im = vec![0.0; m * n];
    for (k, point) in pattern.points().enumerate() {
        let xi = coord.map_or(0.0, |j| point[j]);
        for (a, &p) in positions.iter().enumerate() {
            let (s, c) = (p * xi).sin_cos();
            re[k * n + a] = c;
            im[k * n + a] = -s;
        }
    }
    (re, im)
}

impl NuftOperator {
    pub fn new(pattern: SamplingPattern, grid: ImageGrid) -> Result<Self> {
        if pattern.ndim() != grid.ndim() {
            return Err(Error::DimensionMismatch { expected: grid.ndim(), found: pattern.ndim() });
        }
        let (rows, cols) = grid.rows_cols();
        let (row_pos, row_coord, col_coord) = if grid.ndim() == 1 {
            (vec![0.0], None, 0)
        } else {
            (grid.axis_positions(0), Some(0), 1)
        };
        let col_pos = grid.axis_positions(grid.ndim() - 1);
        let (row_re, row_im) = phase_table(&pattern, row_coord, &row_pos);
        let (col_re, col_im) = phase_table(&pattern, Some(col_coord), &col_pos);
        Ok(Self {
            pattern,
            grid,
            rows,
            cols,
            row_pos,
            col_pos,
            row_re,
            row_im,
            col_re,
            col_im,
            threading: Threading::default(),
        })
    }

    pub fn with_threading(mut self, threading: Threading) -> Self {
        self.threading = threading;
        self
    }

    pub fn threading(&self) -> Threading {
        self.threading
    }

    pub fn pattern(&self) -> &SamplingPattern {
        &self.pattern
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    /// Number of samples M.
    pub fn num_samples(&self) -> usize {
        self.pattern.len()
    }

    pub fn forward(&self, x: &ComplexImage) -> Result<KSpaceVector> {
        x.check_grid(&self.grid)?;
        Ok(KSpaceVector::from_vec(self.forward_raw(x.data())))
    }

    pub fn adjoint(&self, y: &KSpaceVector) -> Result<ComplexImage> {
        self.check_samples(y.len())?;
        Ok(ComplexImage::from_parts(self.grid.clone(), self.adjoint_raw(y.data())))
    }

    /// Gradient of `Re <cotangent, A(xi) x>` with respect to the pattern
    /// coordinates, laid out like [`SamplingPattern::coords`].
    pub fn vjp_pattern(&self, x: &ComplexImage, cotangent: &KSpaceVector) -> Result<Vec<f64>> {
        x.check_grid(&self.grid)?;
        self.check_samples(cotangent.len())?;
        Ok(self.forward_vjp_raw(x.data(), cotangent.data()).1)
    }

    fn check_samples(&self, len: usize) -> Result<()> {
        if len != self.num_samples() {
            return Err(Error::LengthMismatch { expected: self.num_samples(), found: len });
        }
        Ok(())
    }

    pub(crate) fn forward_raw(&self, x: &[C64]) -> Vec<C64> {
        let (xr, xi) = split(x);
        let (rows, cols) = (self.rows, self.cols);
        let mut out = vec![C64::new(0.0, 0.0); self.num_samples()];
        for_each_chunk(self.threading, &mut out, POINT_CHUNK, |chunk, ys| {
            for (k, y) in ys.iter_mut().enumerate() {
                let m = chunk * POINT_CHUNK + k;
                let cre = &self.col_re[m * cols..(m + 1) * cols];
                let cim = &self.col_im[m * cols..(m + 1) * cols];
                let (mut acc_re, mut acc_im) = (0.0, 0.0);
                for a in 0..rows {
                    let (wr, wi) = cdot(&xr[a * cols..(a + 1) * cols], &xi[a * cols..(a + 1) * cols], cre, cim);
                    let (er, ei) = (self.row_re[m * rows + a], self.row_im[m * rows + a]);
                    acc_re += er * wr - ei * wi;
                    acc_im += er * wi + ei * wr;
                }
                *y = C64::new(acc_re, acc_im);
            }
        });
        out
    }

    pub(crate) fn adjoint_raw(&self, y: &[C64]) -> Vec<C64> {
        let (rows, cols) = (self.rows, self.cols);
        let m_total = self.num_samples();
        let mut out = vec![C64::new(0.0, 0.0); rows * cols];
        for_each_chunk(self.threading, &mut out, cols, |a, row| {
            let mut acc_re = vec![0.0; cols];
            let mut acc_im = vec![0.0; cols];
            for m in 0..m_total {
                // c = conj(e_row) * y_m
                let (er, ei) = (self.row_re[m * rows + a], -self.row_im[m * rows + a]);
                let (cr, ci) = (er * y[m].re - ei * y[m].im, er * y[m].im + ei * y[m].re);
                let cre = &self.col_re[m * cols..(m + 1) * cols];
                let cim = &self.col_im[m * cols..(m + 1) * cols];
                for b in 0..cols {
                    // c * conj(e_col)
                    acc_re[b] += cr * cre[b] + ci * cim[b];
                    acc_im[b] += ci * cre[b] - cr * cim[b];
                }
            }
            for (b, z) in row.iter_mut().enumerate() {
                *z = C64::new(acc_re[b], acc_im[b]);
            }
        });
        out
    }

    /// `A x` together with the pattern gradient of `Re <c, A x>`.
    pub(crate) fn forward_vjp_raw(&self, x: &[C64], c: &[C64]) -> (Vec<C64>, Vec<f64>) {
        let (xr, xi) = split(x);
        let (rows, cols) = (self.rows, self.cols);
        // x_ab * p_b for the column derivative
        let xpr: Vec<f64> = xr.iter().enumerate().map(|(n, v)| v * self.col_pos[n % cols]).collect();
        let xpi: Vec<f64> = xi.iter().enumerate().map(|(n, v)| v * self.col_pos[n % cols]).collect();
        let mut out = vec![[0.0f64; 4]; self.num_samples()];
        for_each_chunk(self.threading, &mut out, POINT_CHUNK, |chunk, slots| {
            for (k, slot) in slots.iter_mut().enumerate() {
                let m = chunk * POINT_CHUNK + k;
                let cre = &self.col_re[m * cols..(m + 1) * cols];
                let cim = &self.col_im[m * cols..(m + 1) * cols];
                let (mut y_re, mut y_im) = (0.0, 0.0);
                let (mut dr_re, mut dr_im) = (0.0, 0.0);
                let (mut dc_re, mut dc_im) = (0.0, 0.0);
                for a in 0..rows {
                    let span = a * cols..(a + 1) * cols;
                    let (wr, wi) = cdot(&xr[span.clone()], &xi[span.clone()], cre, cim);
                    let (vr, vi) = cdot(&xpr[span.clone()], &xpi[span], cre, cim);
                    let (er, ei) = (self.row_re[m * rows + a], self.row_im[m * rows + a]);
                    let (tr, ti) = (er * wr - ei * wi, er * wi + ei * wr);
                    y_re += tr;
                    y_im += ti;
                    let p = self.row_pos[a];
                    dr_re += p * tr;
                    dr_im += p * ti;
                    dc_re += er * vr - ei * vi;
                    dc_im += er * vi + ei * vr;
                }
                // d/dxi of exp(-i p xi) brings -i p: Re(conj(c) * (-i) s) = Re(conj(c) s) rotated
                let cm = c[m];
                let g = |sr: f64, si: f64| cm.re * si - cm.im * sr;
                *slot = [y_re, y_im, g(dr_re, dr_im), g(dc_re, dc_im)];
            }
        });
        let d = self.pattern.ndim();
        let mut grad = Vec::with_capacity(out.len() * d);
        for s in &out {
            if d == 2 {
                grad.push(s[2]);
            }
            grad.push(s[3]);
        }
        (out.iter().map(|s| C64::new(s[0], s[1])).collect(), grad)
    }
}

/// Power-iteration estimate of `||A Psi||_2` (or `||A||_2` without a frame),
/// started from a seeded random vector.
pub fn estimate_opnorm(op: &NuftOperator, frame: Option<&WaveletFrame>, iters: usize, seed: u64) -> Result<f64> {
    if iters == 0 {
        return Err(Error::InvalidArgument("power iteration needs at least one step".into()));
    }
    if let Some(f) = frame {
        if f.grid() != op.grid() {
            return Err(Error::GridMismatch { expected: op.grid().dims().to_vec(), found: f.grid().dims().to_vec() });
        }
    }
    let mut engine = crate::engine::Plain::new(op, frame);
    let sq = crate::recon::power_iteration(&mut engine, frame.is_some(), iters, seed);
    Ok(sq.max(0.0).sqrt())
}
