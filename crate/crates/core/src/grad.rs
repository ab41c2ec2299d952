//! Pattern gradients of the reconstruction loss.
//!
//! The loss `1/2 ||R(xi, A(xi) x) - x||^2` is differentiated through the
//! fixed-iteration reconstructor itself, not through its limit minimizer.
//! Finite differences and an implicit-function gradient of the exact
//! Tikhonov minimizer are provided as independent checks.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::nuft::NuftOperator;
use crate::recon::{self, ReconConfig, ReconKind, ReconTrace};
use crate::tape::{Tape, TapeScalar};
use crate::types::{seeded_rng, ComplexImage, SamplingPattern, C64};

/// Loss and pattern gradient for one training image.
pub fn loss_and_grad_single(pattern: &SamplingPattern, image: &ComplexImage, cfg: &ReconConfig) -> Result<(f64, Vec<f64>)> {
    let op = NuftOperator::new(pattern.clone(), image.grid().clone())?;
    loss_and_grad_with_op(&op, image, cfg, None)
}

/// Same as [`loss_and_grad_single`] on a prepared operator, optionally adding
/// a fixed noise vector to the simulated measurements.
pub fn loss_and_grad_with_op(
    op: &NuftOperator,
    image: &ComplexImage,
    cfg: &ReconConfig,
    noise: Option<&[C64]>,
) -> Result<(f64, Vec<f64>)> {
    image.check_grid(op.grid())?;
    cfg.validate()?;
    if let Some(b) = noise {
        if b.len() != op.num_samples() {
            return Err(Error::LengthMismatch { expected: op.num_samples(), found: b.len() });
        }
    }
    let mut tape = Tape::new(op, cfg.frame.as_ref());
    let loss = record_loss(&mut tape, image, cfg, noise)?;
    let grad = tape.backward(&loss);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok((loss.value(), grad))
}

/// Record the loss computation on `tape`; inputs are assumed validated.
fn record_loss(tape: &mut Tape<'_>, image: &ComplexImage, cfg: &ReconConfig, noise: Option<&[C64]>) -> Result<TapeScalar> {
    let truth = tape.constant(image.data().to_vec());
    let clean = tape.forward(&truth);
    let y = match noise {
        Some(b) => {
            let b = tape.constant(b.to_vec());
            tape.combine(&[(1.0, &clean), (1.0, &b)])
        }
        None => clean,
    };
    let mut trace = ReconTrace::default();
    let estimate = match cfg.kind {
        ReconKind::Tikhonov => recon::conjugate_gradient(tape, &y, cfg.lambda, cfg.iters, &mut trace),
        ReconKind::L1Wavelet => {
            let p = cfg.frame.as_ref().expect("validated").num_coeffs();
            recon::proximal_gradient(tape, &y, p, cfg, &mut trace)?
        }
    };
    let err = tape.combine(&[(1.0, &estimate), (-1.0, &truth)]);
    let sq = tape.dot(&err, &err);
    let loss = tape.scale_scalar(0.5, &sq);
    if let Some(name) = tape.first_non_finite() {
        return Err(Error::NonFiniteLoss(name));
    }
    Ok(loss)
}

/// Loss together with the soft-threshold active sets of the run.
fn loss_and_active_sets(pattern: &SamplingPattern, image: &ComplexImage, cfg: &ReconConfig) -> Result<(f64, Vec<bool>)> {
    let op = NuftOperator::new(pattern.clone(), image.grid().clone())?;
    let mut tape = Tape::new(&op, cfg.frame.as_ref());
    let loss = record_loss(&mut tape, image, cfg, None)?;
    Ok((loss.value(), tape.active_sets()))
}

/// Loss only, without recording a tape.
pub fn loss_single(pattern: &SamplingPattern, image: &ComplexImage, cfg: &ReconConfig) -> Result<f64> {
    let op = NuftOperator::new(pattern.clone(), image.grid().clone())?;
    let y = op.forward(image)?;
    let (estimate, _) = recon::reconstruct(&op, &y, cfg)?;
    Ok(crate::metrics::eta(&estimate, image)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdEntry {
    pub coord: usize,
    pub analytic: f64,
    pub finite_difference: f64,
    /// Some soft-threshold active set differs between `xi - h`, `xi` and
    /// `xi + h`: the difference quotient straddles a kink.
    pub straddles_kink: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    /// `max |analytic - fd| / max |fd|` over the checked coordinates that do
    /// not straddle a kink.
    pub max_rel_error: f64,
    /// Coordinates passed over because their difference quotient straddles
    /// a kink.
    pub skipped_kinks: usize,
}

/// Compare the unrolled gradient with central differences of step `h` on
/// `num_coords` coordinates, visited in a seeded random order. Coordinates
/// whose difference quotient straddles a soft-threshold kink are passed over.
pub fn grad_fd_check(
    pattern: &SamplingPattern,
    image: &ComplexImage,
    cfg: &ReconConfig,
    h: f64,
    num_coords: usize,
    seed: u64,
) -> Result<FdReport> {
    let total = pattern.coords().len();
    let mut rng = seeded_rng(seed);
    let order = sample(&mut rng, total, total).into_vec();
    let mut checker = FdChecker::new(pattern, image, cfg, h)?;
    let mut entries = Vec::with_capacity(num_coords);
    let mut skipped_kinks = 0;
    for i in order {
        if entries.len() == num_coords {
            break;
        }
        let entry = checker.entry(i)?;
        if entry.straddles_kink {
            skipped_kinks += 1;
        } else {
            entries.push(entry);
        }
    }
    entries.sort_by_key(|e| e.coord);
    Ok(FdReport { max_rel_error: relative_error(&entries), entries, skipped_kinks })
}

/// Same comparison on explicit coordinates; kink-straddling entries are
/// kept but excluded from the error.
pub fn grad_fd_check_coords(
    pattern: &SamplingPattern,
    image: &ComplexImage,
    cfg: &ReconConfig,
    h: f64,
    coords: &[usize],
) -> Result<FdReport> {
    let mut checker = FdChecker::new(pattern, image, cfg, h)?;
    let entries = coords.iter().map(|&i| checker.entry(i)).collect::<Result<Vec<_>>>()?;
    let skipped_kinks = entries.iter().filter(|e| e.straddles_kink).count();
    Ok(FdReport { max_rel_error: relative_error(&entries), entries, skipped_kinks })
}

struct FdChecker<'a> {
    pattern: &'a SamplingPattern,
    image: &'a ComplexImage,
    cfg: &'a ReconConfig,
    h: f64,
    grad: Vec<f64>,
    active: Vec<bool>,
}

impl<'a> FdChecker<'a> {
    fn new(pattern: &'a SamplingPattern, image: &'a ComplexImage, cfg: &'a ReconConfig, h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
        }
        let (_, grad) = loss_and_grad_single(pattern, image, cfg)?;
        let (_, active) = loss_and_active_sets(pattern, image, cfg)?;
        Ok(Self { pattern, image, cfg, h, grad, active })
    }

    fn shifted(&self, i: usize, delta: f64) -> Result<(f64, Vec<bool>)> {
        let mut c = self.pattern.coords().to_vec();
        c[i] += delta;
        loss_and_active_sets(&SamplingPattern::new(self.pattern.ndim(), c)?, self.image, self.cfg)
    }

    fn entry(&mut self, i: usize) -> Result<FdEntry> {
        if i >= self.grad.len() {
            return Err(Error::IndexOutOfRange { index: i, len: self.grad.len() });
        }
        let (up, active_up) = self.shifted(i, self.h)?;
        let (down, active_down) = self.shifted(i, -self.h)?;
        Ok(FdEntry {
            coord: i,
            analytic: self.grad[i],
            finite_difference: (up - down) / (2.0 * self.h),
            straddles_kink: active_up != self.active || active_down != self.active,
        })
    }
}

fn relative_error(entries: &[FdEntry]) -> f64 {
    let entries: Vec<&FdEntry> = entries.iter().filter(|e| !e.straddles_kink).collect();
    let scale = entries.iter().fold(0.0f64, |m, e| m.max(e.finite_difference.abs()));
    let worst = entries.iter().fold(0.0f64, |m, e| m.max((e.analytic - e.finite_difference).abs()));
    if worst == 0.0 {
        0.0
    } else {
        worst / scale
    }
}

const DENSE_LIMIT: usize = 4096;

/// Dense `A(xi)` built directly from the exponential formula.
fn dense_operator(pattern: &SamplingPattern, image: &ComplexImage) -> Result<(DMatrix<C64>, Vec<Vec<i64>>)> {
    let grid = image.grid();
    if pattern.ndim() != grid.ndim() {
        return Err(Error::DimensionMismatch { expected: grid.ndim(), found: pattern.ndim() });
    }
    let positions: Vec<Vec<i64>> = (0..grid.len()).map(|n| grid.position(n)).collect::<Result<_>>()?;
    let a = DMatrix::from_fn(pattern.len(), grid.len(), |m, n| {
        let phase: f64 = positions[n].iter().zip(pattern.point(m)).map(|(&p, &x)| p as f64 * x).sum();
        C64::new(0.0, -phase).exp()
    });
    Ok((a, positions))
}

/// Loss and gradient of `1/2 ||x*(xi) - x||^2` where `x*` solves the Tikhonov
/// normal equations exactly (dense Cholesky), differentiated with the
/// implicit function theorem. Refuses instances with N > 4096.
pub fn tikhonov_implicit(pattern: &SamplingPattern, image: &ComplexImage, lambda: f64) -> Result<(f64, Vec<f64>)> {
    let n = image.grid().len();
    if n > DENSE_LIMIT {
        return Err(Error::TooLarge(n));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    let (a, positions) = dense_operator(pattern, image)?;
    let x = DVector::from_column_slice(image.data());
    let ah = a.adjoint();
    let h = &ah * &a + DMatrix::<C64>::identity(n, n) * C64::new(lambda, 0.0);
    let chol = h.cholesky().ok_or_else(|| Error::InvalidArgument("normal matrix not positive definite".into()))?;
    let y = &a * &x;
    let x_star = chol.solve(&(&ah * &y));
    let g = &x_star - &x;
    let loss = 0.5 * g.norm_squared();
    let mu = chol.solve(&g);
    let e = &x - &x_star;
    let r = &a * &e;
    let a_mu = &a * &mu;
    let d = pattern.ndim();
    let mut grad = vec![0.0; pattern.len() * d];
    for m in 0..pattern.len() {
        for j in 0..d {
            // (dA v)_m = sum_n -i p_nj A_mn v_n
            let mut d_mu = C64::new(0.0, 0.0);
            let mut d_e = C64::new(0.0, 0.0);
            for nn in 0..n {
                let w = a[(m, nn)] * C64::new(0.0, -(positions[nn][j] as f64));
                d_mu += w * mu[nn];
                d_e += w * e[nn];
            }
            grad[m * d + j] = (d_mu.conj() * r[m]).re + (a_mu[m].conj() * d_e).re;
        }
    }
    Ok((loss, grad))
}

/// Implicit-differentiation gradient for a Tikhonov config.
pub fn grad_tikhonov_implicit(pattern: &SamplingPattern, image: &ComplexImage, cfg: &ReconConfig) -> Result<Vec<f64>> {
    if cfg.kind != ReconKind::Tikhonov {
        return Err(Error::InvalidArgument("implicit gradient is defined for the tikhonov reconstructor".into()));
    }
    Ok(tikhonov_implicit(pattern, image, cfg.lambda)?.1)
}
