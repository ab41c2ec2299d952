//! Image quality metrics.

use std::f64::consts::PI;

use crate::error::Result;
use crate::types::{ComplexImage, C64};

/// `1/2 ||xhat - x||^2`
pub fn eta(xhat: &ComplexImage, x: &ComplexImage) -> Result<f64> {
    xhat.check_grid(x.grid())?;
    Ok(0.5 * xhat.data().iter().zip(x.data()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>())
}

/// Mean of `|xhat - x|^2`.
pub fn mse(xhat: &ComplexImage, x: &ComplexImage) -> Result<f64> {
    Ok(2.0 * eta(xhat, x)? / x.data().len() as f64)
}

/// Largest magnitude in the image, the default PSNR peak.
pub fn peak_magnitude(x: &ComplexImage) -> f64 {
    x.data().iter().fold(0.0f64, |m, z| m.max(z.norm()))
}

/// `10 log10(peak^2 / MSE)` in dB, with `peak` defaulting to the reference
/// maximum magnitude. Identical images give `f64::INFINITY`.
pub fn psnr(xhat: &ComplexImage, x: &ComplexImage, peak: Option<f64>) -> Result<f64> {
    let peak = peak.unwrap_or_else(|| peak_magnitude(x));
    let err = mse(xhat, x)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

/// Error energy split between low and high spatial frequencies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandErrors {
    pub low: f64,
    pub high: f64,
}

/// On-grid DFT of `xhat - x`, with the low band being the frequencies whose
/// centred index satisfies `|k_j| < n_j / 4` on every axis (a quarter of the
/// coefficients in 2-D). Energies are divided by N so they sum to
/// `||xhat - x||^2`.
pub fn band_errors(xhat: &ComplexImage, x: &ComplexImage) -> Result<BandErrors> {
    xhat.check_grid(x.grid())?;
    let diff: Vec<C64> = xhat.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
    let (rows, cols) = x.grid().rows_cols();
    let spectrum = dft2(&diff, rows, cols);
    let centred = |k: usize, n: usize| -> i64 {
        if k < n / 2 {
            k as i64
        } else {
            k as i64 - n as i64
        }
    };
    let is_low = |k: usize, n: usize| n == 1 || centred(k, n).unsigned_abs() < (n / 4) as u64;
    let mut out = BandErrors { low: 0.0, high: 0.0 };
    for r in 0..rows {
        for c in 0..cols {
            let e = spectrum[r * cols + c].norm_sqr();
            if is_low(r, rows) && is_low(c, cols) {
                out.low += e;
            } else {
                out.high += e;
            }
        }
    }
    let n = diff.len() as f64;
    out.low /= n;
    out.high /= n;
    Ok(out)
}

/// Direct separable DFT, `X[k] = sum_n x[n] exp(-2 pi i k n / N)` per axis.
pub fn dft2(x: &[C64], rows: usize, cols: usize) -> Vec<C64> {
    let twiddles = |n: usize| -> Vec<C64> {
        (0..n).map(|k| C64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64)).collect()
    };
    let tr = twiddles(rows);
    let tc = twiddles(cols);
    let mut tmp = vec![C64::new(0.0, 0.0); rows * cols];
    for r in 0..rows {
        for k in 0..cols {
            tmp[r * cols + k] = (0..cols).map(|c| x[r * cols + c] * tc[(k * c) % cols]).sum();
        }
    }
    let mut out = vec![C64::new(0.0, 0.0); rows * cols];
    for k in 0..rows {
        for c in 0..cols {
            out[k * cols + c] = (0..rows).map(|r| tmp[r * cols + c] * tr[(k * r) % rows]).sum();
        }
    }
    out
}
