//! Fixed-iteration reconstructors.
//!
//! * Tikhonov: conjugate residual (the minimum-residual member of the CG
//!   family) on `(A^H A + lambda I) x = A^H y` from zero.
//! * l1-wavelet: FISTA (or ISTA) on `1/2 ||A Psi z - y||^2 + lambda ||z||_1`
//!   from zero, returning `Psi z`.
//!
//! Iteration counts are fixed so that the unrolled computation has a static
//! shape. Both algorithms are written once against [`Engine`] and shared by
//! plain evaluation and the reverse-mode tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, Plain};
use crate::error::{Error, Result};
use crate::frame::{CoefficientVector, WaveletFrame};
use crate::nuft::NuftOperator;
use crate::types::{norm, seeded_rng, ComplexImage, KSpaceVector, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconKind {
    Tikhonov,
    L1Wavelet,
}

impl ReconKind {
    pub fn label(self) -> &'static str {
        match self {
            ReconKind::Tikhonov => "tikhonov",
            ReconKind::L1Wavelet => "l1",
        }
    }
}

/// Step size rule for the proximal gradient iterations:
/// `tau = safety / L`, with `L` a power-iteration estimate of `||A||^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRule {
    pub power_iters: usize,
    pub safety: f64,
    pub seed: u64,
}

impl Default for StepRule {
    fn default() -> Self {
        Self { power_iters: 20, safety: 0.9, seed: 0x5eed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconConfig {
    pub kind: ReconKind,
    pub lambda: f64,
    pub iters: usize,
    pub frame: Option<WaveletFrame>,
    pub step: StepRule,
    /// FISTA momentum; plain ISTA when false.
    pub accelerated: bool,
}

pub const DEFAULT_CG_ITERS: usize = 30;
pub const DEFAULT_FISTA_ITERS: usize = 60;

impl ReconConfig {
    pub fn tikhonov(lambda: f64, iters: usize) -> Self {
        Self { kind: ReconKind::Tikhonov, lambda, iters, frame: None, step: StepRule::default(), accelerated: true }
    }

    pub fn l1_wavelet(frame: WaveletFrame, lambda: f64, iters: usize) -> Self {
        Self {
            kind: ReconKind::L1Wavelet,
            lambda,
            iters,
            frame: Some(frame),
            step: StepRule::default(),
            accelerated: true,
        }
    }

    pub fn with_ista(mut self) -> Self {
        self.accelerated = false;
        self
    }

    pub fn with_step(mut self, step: StepRule) -> Self {
        self.step = step;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.iters == 0 {
            return Err(Error::InvalidArgument("iteration count must be at least 1".into()));
        }
        match (self.kind, &self.frame) {
            (ReconKind::Tikhonov, Some(_)) => {
                return Err(Error::InvalidArgument("tikhonov reconstructor takes no wavelet frame".into()))
            }
            (ReconKind::L1Wavelet, None) => {
                return Err(Error::InvalidArgument("l1 reconstructor needs a wavelet frame".into()))
            }
            _ => {}
        }
        if self.kind == ReconKind::L1Wavelet {
            let StepRule { power_iters, safety, .. } = self.step;
            if power_iters == 0 || !(safety > 0.0 && safety <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "step rule needs power_iters >= 1 and safety in (0, 1], got {power_iters} and {safety}"
                )));
            }
        }
        Ok(())
    }
}

/// Default Tikhonov weight, `1e-3 * N`.
pub fn default_tikhonov_lambda(num_pixels: usize) -> f64 {
    1e-3 * num_pixels as f64
}

/// Default l1 weight, `1e-3 * ||Psi^H A^H y||_inf`.
pub fn default_l1_lambda(op: &NuftOperator, frame: &WaveletFrame, y: &KSpaceVector) -> Result<f64> {
    let back = op.adjoint(y)?;
    let coeffs = frame.analyze(&back)?;
    Ok(1e-3 * coeffs.data().iter().fold(0.0f64, |m, z| m.max(z.norm())))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TraceEntry {
    Cg {
        alpha: f64,
        beta: f64,
        residual_norm: f64,
        /// false once the iteration has broken down; the iterate is frozen
        active: bool,
    },
    Fista {
        momentum: f64,
        /// `||A Psi v - y||` at the extrapolated point
        residual_norm: f64,
        /// `||z||_1` of the new iterate
        l1_norm: f64,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReconTrace {
    pub entries: Vec<TraceEntry>,
    /// Proximal step size (l1 only).
    pub step: Option<f64>,
}

impl ReconTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Complex soft-thresholding `z max(1 - t/|z|, 0)`.
pub fn soft_threshold(z: C64, t: f64) -> Result<C64> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be nonnegative, got {t}")));
    }
    Ok(crate::engine::soft_threshold_raw(&[z], t)[0])
}

pub fn reconstruct(op: &NuftOperator, y: &KSpaceVector, cfg: &ReconConfig) -> Result<(ComplexImage, ReconTrace)> {
    match cfg.kind {
        ReconKind::Tikhonov => reconstruct_tikhonov(op, y, cfg),
        ReconKind::L1Wavelet => reconstruct_l1(op, y, cfg),
    }
}

fn check_inputs(op: &NuftOperator, y: &KSpaceVector, cfg: &ReconConfig, kind: ReconKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(Error::InvalidArgument(format!("expected a {} config", kind.label())));
    }
    cfg.validate()?;
    if y.len() != op.num_samples() {
        return Err(Error::LengthMismatch { expected: op.num_samples(), found: y.len() });
    }
    if let Some(frame) = &cfg.frame {
        if frame.grid() != op.grid() {
            return Err(Error::GridMismatch { expected: op.grid().dims().to_vec(), found: frame.grid().dims().to_vec() });
        }
    }
    Ok(())
}

pub fn reconstruct_tikhonov(op: &NuftOperator, y: &KSpaceVector, cfg: &ReconConfig) -> Result<(ComplexImage, ReconTrace)> {
    check_inputs(op, y, cfg, ReconKind::Tikhonov)?;
    let mut engine = Plain::new(op, None);
    let mut trace = ReconTrace::default();
    let yv = y.data().to_vec();
    let x = conjugate_gradient(&mut engine, &yv, cfg.lambda, cfg.iters, &mut trace);
    Ok((ComplexImage::from_parts(op.grid().clone(), x), trace))
}

pub fn reconstruct_l1(op: &NuftOperator, y: &KSpaceVector, cfg: &ReconConfig) -> Result<(ComplexImage, ReconTrace)> {
    check_inputs(op, y, cfg, ReconKind::L1Wavelet)?;
    let frame = cfg.frame.as_ref().expect("validated");
    let mut engine = Plain::new(op, Some(frame));
    let mut trace = ReconTrace::default();
    let yv = y.data().to_vec();
    let x = proximal_gradient(&mut engine, &yv, frame.num_coeffs(), cfg, &mut trace)?;
    Ok((ComplexImage::from_parts(op.grid().clone(), x), trace))
}

/// Final FISTA (or ISTA) coefficient iterate `z`, so that the image returned
/// by [`reconstruct_l1`] is `Psi z`.
pub fn l1_coefficients(op: &NuftOperator, y: &KSpaceVector, cfg: &ReconConfig) -> Result<CoefficientVector> {
    check_inputs(op, y, cfg, ReconKind::L1Wavelet)?;
    let frame = cfg.frame.as_ref().expect("validated");
    let mut engine = Plain::new(op, Some(frame));
    let z = proximal_coefficients(&mut engine, &y.data().to_vec(), frame.num_coeffs(), cfg, &mut ReconTrace::default())?;
    CoefficientVector::new(frame, z)
}

/// Objective `1/2 ||A Psi z - y||^2 + lambda ||z||_1`.
pub fn l1_objective(op: &NuftOperator, frame: &WaveletFrame, y: &KSpaceVector, z: &[C64], lambda: f64) -> f64 {
    let r: Vec<C64> = op.forward_raw(&frame.synthesize_raw(z)).iter().zip(y.data()).map(|(a, b)| a - b).collect();
    0.5 * crate::types::norm_sqr(&r) + lambda * z.iter().map(|c| c.norm()).sum::<f64>()
}

/// Iteration stops once `<r, H r>` falls this far below its initial value.
const CR_STOP_REL: f64 = 1e-28;

/// Conjugate residual iterations on `H x = A^H y`, `H = A^H A + lambda I`.
/// Each step minimizes `||H x - A^H y||` over the Krylov space, so the
/// residual norm never increases.
///
/// Residuals are kept `H`-orthogonal by explicit reorthogonalization. In
/// exact arithmetic the correction vanishes; in floating point it stops the
/// loss of orthogonality that otherwise makes the iterates (and so the loss)
/// a noisy function of the pattern once Ritz values start to converge.
pub(crate) fn conjugate_gradient<E: Engine>(
    e: &mut E,
    y: &E::Vector,
    lambda: f64,
    iters: usize,
    trace: &mut ReconTrace,
) -> E::Vector {
    let apply = |e: &mut E, v: &E::Vector| -> E::Vector {
        let av = e.forward(v);
        let ahav = e.adjoint(&av);
        e.combine(&[(1.0, &ahav), (lambda, v)])
    };
    let rhs = e.adjoint(y);
    let n = e.vector_value(&rhs).len();
    let mut x = e.constant(vec![C64::new(0.0, 0.0); n]);
    let mut r = rhs;
    let mut hr = apply(e, &r);
    let mut p = r.clone();
    let mut hp = hr.clone();
    let mut rhr = e.dot(&r, &hr);
    let mut residual_norm = norm(e.vector_value(&r));
    let mut basis: Vec<[E::Vector; 4]> = Vec::with_capacity(iters);
    let mut norms: Vec<E::Scalar> = Vec::with_capacity(iters);
    // residual at rounding level: freeze rather than divide by underflowing norms
    let floor = e.scalar_value(&rhr) * CR_STOP_REL;
    let mut active = true;
    for _ in 0..iters {
        let mut step = None;
        if active && e.scalar_value(&rhr) > floor {
            let hphp = e.dot(&hp, &hp);
            if e.scalar_value(&hphp) > 0.0 {
                step = Some(hphp);
            }
        }
        let Some(hphp) = step else {
            active = false;
            trace.entries.push(TraceEntry::Cg { alpha: 0.0, beta: 0.0, residual_norm, active });
            continue;
        };
        let alpha = e.div(&rhr, &hphp);
        let (r_prev, hr_prev) = (r.clone(), hr.clone());
        norms.push(rhr.clone());
        let ap = e.scale(&alpha, &p);
        x = e.combine(&[(1.0, &x), (1.0, &ap)]);
        let ahp = e.scale(&alpha, &hp);
        r = e.combine(&[(1.0, &r), (-1.0, &ahp)]);
        let (ir_prev, ihr_prev) = (e.rotate(&r_prev), e.rotate(&hr_prev));
        basis.push([r_prev, ir_prev, hr_prev, ihr_prev]);
        for ([rj, irj, hrj, ihrj], rhrj) in basis.iter().zip(&norms) {
            // complex coefficient <H r_j, r> / <H r_j, r_j>
            let re = e.dot(hrj, &r);
            let im = e.dot(ihrj, &r);
            let re = e.div(&re, rhrj);
            let im = e.div(&im, rhrj);
            let pre = e.scale(&re, rj);
            let pim = e.scale(&im, irj);
            r = e.combine(&[(1.0, &r), (-1.0, &pre), (-1.0, &pim)]);
        }
        hr = apply(e, &r);
        let rhr_next = e.dot(&r, &hr);
        let beta = e.div(&rhr_next, &rhr);
        let bp = e.scale(&beta, &p);
        p = e.combine(&[(1.0, &r), (1.0, &bp)]);
        let bhp = e.scale(&beta, &hp);
        hp = e.combine(&[(1.0, &hr), (1.0, &bhp)]);
        residual_norm = norm(e.vector_value(&r));
        trace.entries.push(TraceEntry::Cg {
            alpha: e.scalar_value(&alpha),
            beta: e.scalar_value(&beta),
            residual_norm,
            active,
        });
        rhr = rhr_next;
    }
    x
}

/// Power iteration on `A^H A` (or `Psi^H A^H A Psi`); returns the Rayleigh
/// quotient `||A v||^2` of the final unit vector, an estimate of `||A||^2`.
pub(crate) fn power_iteration<E: Engine>(e: &mut E, with_frame: bool, iters: usize, seed: u64) -> E::Scalar {
    let len = e.domain_len(with_frame);
    let mut rng = seeded_rng(seed);
    let start: Vec<C64> = (0..len)
        .map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
        .collect();
    let scale = 1.0 / norm(&start);
    let mut v = e.constant(start.iter().map(|z| z * scale).collect());
    let apply = |e: &mut E, v: &E::Vector| -> E::Vector {
        if with_frame {
            let img = e.synthesize(v);
            e.forward(&img)
        } else {
            e.forward(v)
        }
    };
    for _ in 0..iters {
        let av = apply(e, &v);
        let back = e.adjoint(&av);
        let w = if with_frame { e.analyze(&back) } else { back };
        v = e.normalize(&w);
    }
    let av = apply(e, &v);
    e.dot(&av, &av)
}

pub(crate) fn proximal_gradient<E: Engine>(
    e: &mut E,
    y: &E::Vector,
    num_coeffs: usize,
    cfg: &ReconConfig,
    trace: &mut ReconTrace,
) -> Result<E::Vector> {
    let z = proximal_coefficients(e, y, num_coeffs, cfg, trace)?;
    Ok(e.synthesize(&z))
}

fn proximal_coefficients<E: Engine>(
    e: &mut E,
    y: &E::Vector,
    num_coeffs: usize,
    cfg: &ReconConfig,
    trace: &mut ReconTrace,
) -> Result<E::Vector> {
    let lipschitz = power_iteration(e, false, cfg.step.power_iters, cfg.step.seed);
    if !(e.scalar_value(&lipschitz) > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "nonpositive step estimate (operator norm estimate {})",
            e.scalar_value(&lipschitz)
        )));
    }
    let safety = e.constant_scalar(cfg.step.safety);
    let tau = e.div(&safety, &lipschitz);
    let threshold = e.scale_scalar(cfg.lambda, &tau);
    trace.step = Some(e.scalar_value(&tau));

    let mut z = e.constant(vec![C64::new(0.0, 0.0); num_coeffs]);
    let mut v = z.clone();
    let mut t = 1.0f64;
    for _ in 0..cfg.iters {
        let img = e.synthesize(&v);
        let pred = e.forward(&img);
        let resid = e.combine(&[(1.0, &pred), (-1.0, y)]);
        let back = e.adjoint(&resid);
        let grad = e.analyze(&back);
        let step = e.scale(&tau, &grad);
        let u = e.combine(&[(1.0, &v), (-1.0, &step)]);
        let z_next = e.soft_threshold(&u, &threshold);
        let momentum = if cfg.accelerated {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            t = t_next;
            beta
        } else {
            0.0
        };
        v = if momentum != 0.0 {
            e.combine(&[(1.0 + momentum, &z_next), (-momentum, &z)])
        } else {
            z_next.clone()
        };
        trace.entries.push(TraceEntry::Fista {
            momentum,
            residual_norm: norm(e.vector_value(&resid)),
            l1_norm: e.vector_value(&z_next).iter().map(|c| c.norm()).sum(),
        });
        z = z_next;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ImageGrid, SamplingPattern};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn random_pattern(grid: &ImageGrid, m: usize, seed: u64) -> SamplingPattern {
        let mut rng = seeded_rng(seed);
        let coords = (0..m * grid.ndim()).map(|_| rng.gen_range(-PI..PI)).collect();
        SamplingPattern::new(grid.ndim(), coords).unwrap()
    }

    fn cartesian(grid: &ImageGrid) -> SamplingPattern {
        let (rows, cols) = (grid.dims()[0], grid.dims()[1]);
        let mut coords = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                coords.push(2.0 * PI * (r as f64 - (rows / 2) as f64) / rows as f64);
                coords.push(2.0 * PI * (c as f64 - (cols / 2) as f64) / cols as f64);
            }
        }
        SamplingPattern::new(2, coords).unwrap()
    }

    fn dense_a(grid: &ImageGrid, pattern: &SamplingPattern) -> DMatrix<C64> {
        DMatrix::from_fn(pattern.len(), grid.len(), |m, n| {
            let p = grid.position(n).unwrap();
            let phase: f64 = p.iter().zip(pattern.point(m)).map(|(&a, &b)| a as f64 * b).sum();
            C64::from_polar(1.0, -phase)
        })
    }

    fn max_abs_diff(a: &[C64], b: &[C64]) -> f64 {
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).norm()))
    }

    fn instance(n: usize, m: usize, seed: u64) -> (NuftOperator, ComplexImage, KSpaceVector) {
        let grid = ImageGrid::square(n).unwrap();
        let op = NuftOperator::new(random_pattern(&grid, m, seed), grid.clone()).unwrap();
        let x = ComplexImage::random(grid, seed + 1000);
        let y = op.forward(&x).unwrap();
        (op, x, y)
    }

    #[test]
    fn zero_data_gives_zero() {
        let (op, _, _) = instance(4, 7, 1);
        let y = KSpaceVector::zeros(7);
        let (x, trace) = reconstruct(&op, &y, &ReconConfig::tikhonov(0.1, 5)).unwrap();
        assert!(x.data().iter().all(|z| z.norm() == 0.0));
        assert_eq!(trace.len(), 5);
        let frame = WaveletFrame::new(op.grid().clone(), 1).unwrap();
        let (x, trace) = reconstruct(&op, &y, &ReconConfig::l1_wavelet(frame, 0.1, 5)).unwrap();
        assert!(x.data().iter().all(|z| z.norm() == 0.0));
        assert_eq!(trace.len(), 5);
    }

    #[test]
    fn cartesian_tikhonov_converges_in_one_step() {
        let grid = ImageGrid::square(8).unwrap();
        let op = NuftOperator::new(cartesian(&grid), grid.clone()).unwrap();
        let x = ComplexImage::random(grid.clone(), 3);
        let y = op.forward(&x).unwrap();
        let lambda = 0.5;
        let (xhat, _) = reconstruct(&op, &y, &ReconConfig::tikhonov(lambda, 1)).unwrap();
        let expected: Vec<C64> = op.adjoint(&y).unwrap().data().iter().map(|z| z / (64.0 + lambda)).collect();
        assert!(max_abs_diff(xhat.data(), &expected) < 1e-12);
    }

    #[test]
    fn cg_matches_dense_solve() {
        for seed in 0..10 {
            let (op, _, y) = instance(4, 10, seed);
            let lambda = default_tikhonov_lambda(16);
            let a = dense_a(op.grid(), op.pattern());
            let ah = a.adjoint();
            let h = &ah * &a + DMatrix::<C64>::identity(16, 16) * C64::new(lambda, 0.0);
            let rhs = &ah * DVector::from_column_slice(y.data());
            let exact = h.lu().solve(&rhs).unwrap();
            let (xhat, _) = reconstruct(&op, &y, &ReconConfig::tikhonov(lambda, 32)).unwrap();
            let scale = exact.iter().fold(0.0f64, |m, z| m.max(z.norm()));
            assert!(max_abs_diff(xhat.data(), exact.as_slice()) <= 1e-8 * scale, "seed {seed}");
        }
    }

    fn normal_residual(op: &NuftOperator, y: &KSpaceVector, x: &[C64], lambda: f64) -> f64 {
        let hx = op.adjoint_raw(&op.forward_raw(x));
        let b = op.adjoint_raw(y.data());
        norm(&hx.iter().zip(x).zip(&b).map(|((h, xi), bi)| h + xi * lambda - bi).collect::<Vec<_>>())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn normal_residual_nonincreasing(seed in 0u64..10_000, m in 4usize..40, lrel in -4.0f64..0.0) {
            let (op, _, y) = instance(4, m, seed);
            let lambda = 16.0 * 10f64.powf(lrel);
            let mut prev = f64::INFINITY;
            for t in 1..=12 {
                let (x, _) = reconstruct(&op, &y, &ReconConfig::tikhonov(lambda, t)).unwrap();
                let r = normal_residual(&op, &y, x.data(), lambda);
                prop_assert!(r <= prev * (1.0 + 1e-10) + 1e-12, "t {} r {} prev {}", t, r, prev);
                prev = r;
            }
        }
    }

    #[test]
    fn trace_records_every_iteration() {
        let (op, _, y) = instance(4, 16, 2);
        let (_, trace) = reconstruct(&op, &y, &ReconConfig::tikhonov(1e-3, 40)).unwrap();
        assert_eq!(trace.len(), 40);
        let frame = WaveletFrame::new(op.grid().clone(), 1).unwrap();
        let (_, trace) = reconstruct(&op, &y, &ReconConfig::l1_wavelet(frame, 1e-2, 9)).unwrap();
        assert_eq!(trace.len(), 9);
        assert!(trace.step.unwrap() > 0.0);
    }

    #[test]
    fn soft_threshold_examples() {
        let st = |re: f64, im: f64, t: f64| soft_threshold(C64::new(re, im), t).unwrap();
        assert!((st(3.0, 4.0, 1.0) - C64::new(2.4, 3.2)).norm() < 1e-15);
        assert_eq!(st(3.0, 4.0, 5.0), C64::new(0.0, 0.0));
        assert_eq!(st(3.0, 4.0, 6.0), C64::new(0.0, 0.0));
        assert_eq!(st(-2.0, 0.0, 0.5), C64::new(-1.5, 0.0));
        assert_eq!(st(1.0, 1.0, 0.0), C64::new(1.0, 1.0));
        assert!(soft_threshold(C64::new(1.0, 0.0), -1.0).is_err());
    }

    #[test]
    fn large_lambda_gives_zero() {
        let (op, _, y) = instance(8, 20, 4);
        let frame = WaveletFrame::new(op.grid().clone(), 2).unwrap();
        let lmax = default_l1_lambda(&op, &frame, &y).unwrap() * 1e3;
        let cfg = ReconConfig::l1_wavelet(frame, lmax * 1.0001, 30);
        let (x, _) = reconstruct(&op, &y, &cfg).unwrap();
        assert!(x.data().iter().all(|z| z.norm() == 0.0));
    }

    /// Dense ISTA from a random start with step `1/||B||^2` from an SVD.
    fn ista_oracle(b: &DMatrix<C64>, y: &DVector<C64>, lambda: f64, iters: usize, seed: u64) -> DVector<C64> {
        let l = b.clone().svd(false, false).singular_values.max().powi(2);
        let tau = 1.0 / l;
        let mut rng = seeded_rng(seed);
        let mut z = DVector::from_fn(b.ncols(), |_, _| C64::new(rng.gen(), rng.gen()));
        let bh = b.adjoint();
        for _ in 0..iters {
            let u = &z - (&bh * (b * &z - y)) * C64::new(tau, 0.0);
            z = u.map(|c| {
                let m = c.norm();
                if m > lambda * tau {
                    c * (1.0 - lambda * tau / m)
                } else {
                    C64::new(0.0, 0.0)
                }
            });
        }
        z
    }

    fn objective_dense(b: &DMatrix<C64>, y: &DVector<C64>, z: &DVector<C64>, lambda: f64) -> f64 {
        0.5 * (b * z - y).norm_squared() + lambda * z.iter().map(|c| c.norm()).sum::<f64>()
    }

    fn synthesis_matrix(frame: &WaveletFrame) -> DMatrix<C64> {
        let p = frame.num_coeffs();
        let n = frame.grid().len();
        let mut psi = DMatrix::zeros(n, p);
        for k in 0..p {
            let mut e = vec![C64::new(0.0, 0.0); p];
            e[k] = C64::new(1.0, 0.0);
            for (i, v) in frame.synthesize_raw(&e).into_iter().enumerate() {
                psi[(i, k)] = v;
            }
        }
        psi
    }

    fn fista_coeffs(op: &NuftOperator, _frame: &WaveletFrame, y: &KSpaceVector, cfg: &ReconConfig) -> Vec<C64> {
        l1_coefficients(op, y, cfg).unwrap().into_data()
    }

    #[test]
    fn fista_matches_ista_oracle_and_kkt() {
        for seed in [11u64, 12] {
            let (op, _, y) = instance(4, 8, seed);
            let frame = WaveletFrame::new(op.grid().clone(), 1).unwrap();
            let lambda = 0.05 * default_l1_lambda(&op, &frame, &y).unwrap() * 1e3;
            let cfg = ReconConfig::l1_wavelet(frame.clone(), lambda, 5000);
            let z = fista_coeffs(&op, &frame, &y, &cfg);

            let b = dense_a(op.grid(), op.pattern()) * synthesis_matrix(&frame);
            let yd = DVector::from_column_slice(y.data());
            let zo = ista_oracle(&b, &yd, lambda, 200_000, seed);
            let f_fista = objective_dense(&b, &yd, &DVector::from_column_slice(&z), lambda);
            let f_oracle = objective_dense(&b, &yd, &zo, lambda);
            assert!((f_fista - f_oracle).abs() <= 1e-6 * f_oracle, "{f_fista} vs {f_oracle}");
            assert!((l1_objective(&op, &frame, &y, &z, lambda) - f_fista).abs() <= 1e-10 * f_fista);

            let g = b.adjoint() * (&b * DVector::from_column_slice(&z) - &yd);
            let kkt = g.iter().fold(0.0f64, |m, c| m.max(c.norm() - lambda));
            assert!(kkt <= 1e-5, "kkt residual {kkt}");
        }
    }

    #[test]
    fn fista_objective_below_start() {
        for seed in 0..5 {
            let (op, _, y) = instance(8, 30, seed);
            let frame = WaveletFrame::new(op.grid().clone(), 2).unwrap();
            let lambda = default_l1_lambda(&op, &frame, &y).unwrap() * 10.0;
            for iters in [1, 3, 10, 40] {
                let cfg = ReconConfig::l1_wavelet(frame.clone(), lambda, iters);
                let z = fista_coeffs(&op, &frame, &y, &cfg);
                assert!(l1_objective(&op, &frame, &y, &z, lambda) <= 0.5 * y.data().iter().map(|c| c.norm_sqr()).sum::<f64>());
            }
        }
    }

    #[test]
    fn ista_objective_nonincreasing() {
        let (op, _, y) = instance(8, 30, 5);
        let frame = WaveletFrame::new(op.grid().clone(), 2).unwrap();
        let lambda = default_l1_lambda(&op, &frame, &y).unwrap() * 10.0;
        let mut prev = f64::INFINITY;
        for iters in 1..25 {
            let cfg = ReconConfig::l1_wavelet(frame.clone(), lambda, iters).with_ista();
            let f = l1_objective(&op, &frame, &y, &fista_coeffs(&op, &frame, &y, &cfg), lambda);
            assert!(f <= prev * (1.0 + 1e-12), "iter {iters}: {f} > {prev}");
            prev = f;
        }
    }

    #[test]
    fn reconstruction_is_reproducible() {
        let (op, _, y) = instance(8, 25, 6);
        let frame = WaveletFrame::new(op.grid().clone(), 2).unwrap();
        for cfg in [ReconConfig::tikhonov(0.064, 30), ReconConfig::l1_wavelet(frame, 0.01, 60)] {
            let (a, ta) = reconstruct(&op, &y, &cfg).unwrap();
            let (b, tb) = reconstruct(&op, &y, &cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn coefficients_synthesize_to_image() {
        let (op, _, y) = instance(8, 25, 7);
        let frame = WaveletFrame::new(op.grid().clone(), 2).unwrap();
        let cfg = ReconConfig::l1_wavelet(frame.clone(), 0.01, 20);
        let z = l1_coefficients(&op, &y, &cfg).unwrap();
        assert_eq!(frame.synthesize(&z).unwrap(), reconstruct(&op, &y, &cfg).unwrap().0);
        assert!(l1_coefficients(&op, &y, &ReconConfig::tikhonov(1.0, 3)).is_err());
    }

    #[test]
    fn wrapped_pattern_reconstructs_alike() {
        let grid = ImageGrid::square(8).unwrap();
        let mut rng = seeded_rng(8);
        let coords: Vec<f64> = (0..50).map(|_| rng.gen_range(-9.0..9.0)).collect();
        let pattern = SamplingPattern::new(2, coords).unwrap();
        let x = ComplexImage::random(grid.clone(), 9);
        let frame = WaveletFrame::new(grid.clone(), 2).unwrap();
        for cfg in [ReconConfig::tikhonov(0.064, 30), ReconConfig::l1_wavelet(frame, 0.01, 60)] {
            let run = |p: &SamplingPattern| {
                let op = NuftOperator::new(p.clone(), grid.clone()).unwrap();
                reconstruct(&op, &op.forward(&x).unwrap(), &cfg).unwrap().0
            };
            let a = run(&pattern);
            let b = run(&pattern.wrapped());
            assert!(max_abs_diff(a.data(), b.data()) <= 1e-9 * a.norm());
        }
    }

    #[test]
    fn rejects_bad_config() {
        let (op, _, y) = instance(4, 6, 0);
        assert!(reconstruct(&op, &y, &ReconConfig::tikhonov(0.0, 3)).is_err());
        assert!(reconstruct(&op, &y, &ReconConfig::tikhonov(1.0, 0)).is_err());
        assert!(reconstruct(&op, &KSpaceVector::zeros(5), &ReconConfig::tikhonov(1.0, 3)).is_err());
        let other = WaveletFrame::new(ImageGrid::square(8).unwrap(), 1).unwrap();
        assert!(reconstruct(&op, &y, &ReconConfig::l1_wavelet(other, 1.0, 3)).is_err());
    }
}
