//! Outer minimization of the sampling loss over unconstrained pattern
//! coordinates with L-BFGS and Armijo backtracking.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::loss_and_grad_with_op;
use crate::nuft::NuftOperator;
use crate::parallel::{map_collect, Threading};
use crate::recon::ReconConfig;
use crate::types::{seeded_rng, ComplexImage, SamplingPattern, C64};

/// Training set and reconstructor defining `F(xi)`.
#[derive(Clone, Debug)]
pub struct OptimProblem {
    pub training_images: Vec<ComplexImage>,
    pub recon: ReconConfig,
    /// Standard deviation of the complex measurement noise; 0 disables it.
    pub noise_sigma: f64,
    /// Noise draws averaged per evaluation when `noise_sigma > 0`.
    pub noise_samples: usize,
    pub noise_seed: u64,
    pub threading: Threading,
}

impl OptimProblem {
    pub fn new(training_images: Vec<ComplexImage>, recon: ReconConfig) -> Result<Self> {
        let problem = Self {
            training_images,
            recon,
            noise_sigma: 0.0,
            noise_samples: 1,
            noise_seed: 0,
            threading: Threading::default(),
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn with_noise(mut self, sigma: f64, samples: usize, seed: u64) -> Result<Self> {
        self.noise_sigma = sigma;
        self.noise_samples = samples;
        self.noise_seed = seed;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .training_images
            .first()
            .ok_or_else(|| Error::InvalidArgument("training set must contain at least one image".into()))?;
        for img in &self.training_images[1..] {
            img.check_grid(first.grid())?;
        }
        if !(self.noise_sigma >= 0.0) || self.noise_samples == 0 {
            return Err(Error::InvalidArgument("noise sigma must be >= 0 and noise samples >= 1".into()));
        }
        self.recon.validate()
    }
}

/// Complex Gaussian noise with `E|b_m|^2 = sigma^2`.
fn noise_draw(m: usize, sigma: f64, seed: u64) -> Vec<C64> {
    let mut rng = seeded_rng(seed);
    let s = sigma / std::f64::consts::SQRT_2;
    (0..m)
        .map(|_| {
            C64::new(
                s * rng.sample::<f64, _>(rand_distr::StandardNormal),
                s * rng.sample::<f64, _>(rand_distr::StandardNormal),
            )
        })
        .collect()
}

/// `F(xi)` and its gradient: the sum of per-image losses (averaged over the
/// fixed noise draws when noise is enabled), reduced in training-set order.
pub fn evaluate_objective(problem: &OptimProblem, pattern: &SamplingPattern) -> Result<(f64, Vec<f64>)> {
    let grid = problem.training_images[0].grid().clone();
    let op = NuftOperator::new(pattern.clone(), grid)?.with_threading(problem.threading);
    let samples = if problem.noise_sigma > 0.0 { problem.noise_samples } else { 1 };
    let jobs: Vec<(usize, usize)> = (0..samples)
        .flat_map(|s| (0..problem.training_images.len()).map(move |k| (s, k)))
        .collect();
    let parts = map_collect(problem.threading, &jobs, |&(s, k)| {
        let noise = (problem.noise_sigma > 0.0).then(|| {
            let seed = problem.noise_seed ^ ((s as u64) << 32) ^ k as u64;
            noise_draw(op.num_samples(), problem.noise_sigma, seed)
        });
        loss_and_grad_with_op(&op, &problem.training_images[k], &problem.recon, noise.as_deref())
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; pattern.coords().len()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    if samples > 1 {
        let w = 1.0 / samples as f64;
        loss *= w;
        grad.iter_mut().for_each(|g| *g *= w);
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when `||grad||_inf <= grad_tol`.
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub shrink: f64,
    pub max_trials: usize,
    /// Largest coordinate move of the first (steepest-descent) trial step.
    pub initial_step: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { memory: 10, max_iters: 300, grad_tol: 1e-8, armijo: 1e-4, shrink: 0.5, max_trials: 30, initial_step: 0.05 }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::InvalidArgument("L-BFGS memory must be at least 1".into()));
        }
        if !(self.grad_tol > 0.0 && self.armijo > 0.0 && self.armijo < 1.0 && self.initial_step > 0.0) {
            return Err(Error::InvalidArgument("L-BFGS tolerances must be positive".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) || self.max_trials == 0 {
            return Err(Error::InvalidArgument("line search needs shrink in (0,1) and at least one trial".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    pub iter: usize,
    pub loss: f64,
    pub grad_inf_norm: f64,
    pub step_size: f64,
    pub ls_trials: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    /// No Armijo step within the trial budget; the best point so far is returned.
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub loss: f64,
    pub history: Vec<HistoryEntry>,
    pub termination: Termination,
}

impl LbfgsResult {
    pub fn line_search_failed(&self) -> bool {
        self.termination == Termination::LineSearchFailed
    }
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub pattern: SamplingPattern,
    pub loss: f64,
    pub history: Vec<HistoryEntry>,
    pub termination: Termination,
}

/// Optimization log as CSV.
pub fn history_csv(history: &[HistoryEntry]) -> String {
    let mut out = String::from("iter,loss,grad_inf_norm,step_size,ls_trials\n");
    for h in history {
        let _ = writeln!(out, "{},{:.16e},{:.16e},{:.16e},{}", h.iter, h.loss, h.grad_inf_norm, h.step_size, h.ls_trials);
    }
    out
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two-loop recursion: returns `-H g`.
fn lbfgs_direction(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|qi| *qi *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|qi| *qi = -*qi);
    q
}

/// L-BFGS on an arbitrary smooth objective returning `(f, grad)`.
///
/// An evaluation that fails with [`Error::NonFiniteLoss`] during the line
/// search counts as a rejected trial.
pub fn minimize_lbfgs_fn<F>(mut objective: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial point".into()));
    }
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective(&x)?;
    if !f.is_finite() {
        return Err(Error::NonFinite("initial objective".into()));
    }
    let mut history = vec![HistoryEntry { iter: 0, loss: f, grad_inf_norm: inf_norm(&g), step_size: 0.0, ls_trials: 0 }];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut termination = Termination::MaxIterations;

    let steepest = |g: &[f64]| -> Vec<f64> {
        let scale = cfg.initial_step / inf_norm(g);
        g.iter().map(|v| -v * scale).collect()
    };

    for iter in 1..=cfg.max_iters {
        if inf_norm(&g) <= cfg.grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        let mut dir = if pairs.is_empty() { steepest(&g) } else { lbfgs_direction(&g, &pairs) };
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            pairs.clear();
            dir = steepest(&g);
            slope = dot(&g, &dir);
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for trial in 1..=cfg.max_trials {
            let candidate: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + alpha * di).collect();
            match objective(&candidate) {
                Ok((fc, gc)) if fc.is_finite() && fc <= f + cfg.armijo * alpha * slope => {
                    accepted = Some((candidate, fc, gc, trial));
                    break;
                }
                Ok(_) | Err(Error::NonFiniteLoss(_)) => alpha *= cfg.shrink,
                Err(e) => return Err(e),
            }
        }
        let Some((x_next, f_next, g_next, trials)) = accepted else {
            log::warn!("line search failed at iteration {iter}; returning best point");
            termination = Termination::LineSearchFailed;
            break;
        };

        let s: Vec<f64> = x_next.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_next.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = x_next;
        f = f_next;
        g = g_next;
        history.push(HistoryEntry { iter, loss: f, grad_inf_norm: inf_norm(&g), step_size: alpha, ls_trials: trials });
        log::debug!("lbfgs iter {iter}: loss {f:.6e} |g|inf {:.3e} step {alpha}", inf_norm(&g));
        if iter == cfg.max_iters && inf_norm(&g) <= cfg.grad_tol {
            termination = Termination::GradientTolerance;
        }
    }
    Ok(LbfgsResult { x, loss: f, history, termination })
}

/// Minimize `F` over the pattern coordinates starting from `init`.
pub fn minimize_lbfgs(problem: &OptimProblem, init: &SamplingPattern, cfg: &LbfgsConfig) -> Result<OptimResult> {
    let ndim = init.ndim();
    let result = minimize_lbfgs_fn(
        |coords| evaluate_objective(problem, &SamplingPattern::new(ndim, coords.to_vec())?),
        init.coords(),
        cfg,
    )?;
    Ok(OptimResult {
        pattern: SamplingPattern::new(ndim, result.x)?,
        loss: result.loss,
        history: result.history,
        termination: result.termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::WaveletFrame;
    use crate::grad::loss_and_grad_single;
    use crate::patterns::vds_uniform;
    use crate::types::ImageGrid;
    use std::f64::consts::PI;

    fn small_problem(images: usize) -> (OptimProblem, SamplingPattern) {
        let grid = ImageGrid::square(8).unwrap();
        let imgs = (0..images).map(|k| ComplexImage::random(grid.clone(), 40 + k as u64)).collect();
        let problem = OptimProblem::new(imgs, ReconConfig::tikhonov(0.064, 10)).unwrap();
        (problem, vds_uniform(&grid, 20, 3).unwrap())
    }

    #[test]
    fn quadratic_converges() {
        let target: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let weights: Vec<f64> = (0..20).map(|i| 1.0 + (i % 7) as f64).collect();
        let cfg = LbfgsConfig { max_iters: 50, grad_tol: 1e-10, ..Default::default() };
        let res = minimize_lbfgs_fn(
            |x| {
                let d: Vec<f64> = x.iter().zip(&target).map(|(a, b)| a - b).collect();
                let f = 0.5 * d.iter().zip(&weights).map(|(v, w)| w * v * v).sum::<f64>();
                Ok((f, d.iter().zip(&weights).map(|(v, w)| w * v).collect()))
            },
            &vec![0.0; 20],
            &cfg,
        )
        .unwrap();
        assert_eq!(res.termination, Termination::GradientTolerance);
        let err: f64 = res.x.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(err <= 1e-8, "{err}");
        assert!(res.history.len() <= 51);
    }

    #[test]
    fn stationary_start_returns_immediately() {
        let x0 = vec![1.0, -2.0, 0.5];
        let res = minimize_lbfgs_fn(
            |x| Ok((0.5 * x.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>() + 3.0, vec![0.0; 3])),
            &x0,
            &LbfgsConfig::default(),
        )
        .unwrap();
        assert_eq!(res.x, x0);
        assert_eq!(res.history.len(), 1);
        assert_eq!(res.termination, Termination::GradientTolerance);
    }

    #[test]
    fn rosenbrock_descends_monotonically() {
        let cfg = LbfgsConfig { max_iters: 200, grad_tol: 1e-9, initial_step: 0.1, ..Default::default() };
        let res = minimize_lbfgs_fn(
            |x| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                Ok((f, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]))
            },
            &[-1.2, 1.0],
            &cfg,
        )
        .unwrap();
        for w in res.history.windows(2) {
            assert!(w[1].loss < w[0].loss);
        }
        assert!((res.x[0] - 1.0).abs() < 1e-6 && (res.x[1] - 1.0).abs() < 1e-6, "{:?}", res.x);
    }

    #[test]
    fn line_search_failure_keeps_best_point() {
        // gradient points the wrong way, so no trial can satisfy Armijo
        let res = minimize_lbfgs_fn(|x| Ok((x[0] * x[0], vec![-2.0 * x[0] - 1.0])), &[1.0], &LbfgsConfig::default())
            .unwrap();
        assert!(res.line_search_failed());
        assert_eq!(res.x, vec![1.0]);
        assert_eq!(res.loss, 1.0);
    }

    #[test]
    fn non_finite_trials_are_rejected() {
        let res = minimize_lbfgs_fn(
            |x| {
                if x[0] < 0.5 {
                    return Err(Error::NonFiniteLoss("nuft_forward"));
                }
                Ok(((x[0] - 0.6).powi(2), vec![2.0 * (x[0] - 0.6)]))
            },
            &[2.0],
            &LbfgsConfig { initial_step: 10.0, max_iters: 30, ..Default::default() },
        )
        .unwrap();
        assert!(res.loss < 1.96);
        assert!(res.x[0] >= 0.5);
    }

    #[test]
    fn objective_sums_images() {
        let (problem, pattern) = small_problem(2);
        let (f, g) = evaluate_objective(&problem, &pattern).unwrap();
        let (f0, g0) = loss_and_grad_single(&pattern, &problem.training_images[0], &problem.recon).unwrap();
        let (f1, g1) = loss_and_grad_single(&pattern, &problem.training_images[1], &problem.recon).unwrap();
        assert_eq!(f, f0 + f1);
        for i in 0..g.len() {
            assert_eq!(g[i], g0[i] + g1[i]);
        }
        let single = OptimProblem::new(vec![problem.training_images[0].clone()], problem.recon.clone()).unwrap();
        assert_eq!(evaluate_objective(&single, &pattern).unwrap(), (f0, g0.clone()));

        let dup = OptimProblem::new(vec![problem.training_images[0].clone(); 2], problem.recon.clone()).unwrap();
        let (fd, gd) = evaluate_objective(&dup, &pattern).unwrap();
        assert_eq!(fd, 2.0 * f0);
        assert!(gd.iter().zip(&g0).all(|(a, b)| *a == 2.0 * b));
    }

    #[test]
    fn objective_independent_of_threading() {
        let (mut problem, pattern) = small_problem(3);
        problem.threading = Threading::Sequential;
        let a = evaluate_objective(&problem, &pattern).unwrap();
        problem.threading = Threading::Parallel;
        assert_eq!(evaluate_objective(&problem, &pattern).unwrap(), a);
    }

    #[test]
    fn noise_is_fixed_per_call() {
        let (problem, pattern) = small_problem(1);
        let noisy = problem.clone().with_noise(0.5, 3, 9).unwrap();
        let a = evaluate_objective(&noisy, &pattern).unwrap();
        assert_eq!(evaluate_objective(&noisy, &pattern).unwrap(), a);
        assert_ne!(a.0, evaluate_objective(&problem, &pattern).unwrap().0);
        let b = noise_draw(20000, 2.0, 1);
        let power = b.iter().map(|z| z.norm_sqr()).sum::<f64>() / b.len() as f64;
        assert!((power - 4.0).abs() < 0.15, "{power}");
        assert!(problem.clone().with_noise(-1.0, 1, 0).is_err());
    }

    #[test]
    fn runs_are_reproducible() {
        let (problem, init) = small_problem(1);
        let cfg = LbfgsConfig { max_iters: 8, ..Default::default() };
        let a = minimize_lbfgs(&problem, &init, &cfg).unwrap();
        let b = minimize_lbfgs(&problem, &init, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.pattern, b.pattern);
        assert!(a.loss < a.history[0].loss);
        for w in a.history.windows(2) {
            assert!(w[1].loss < w[0].loss);
        }
    }

    #[test]
    fn shifting_by_two_pi_gives_same_trajectory() {
        let (problem, init) = small_problem(1);
        let shifted = SamplingPattern::new(2, init.coords().iter().map(|c| c + 2.0 * PI).collect()).unwrap();
        let cfg = LbfgsConfig { max_iters: 8, ..Default::default() };
        let a = minimize_lbfgs(&problem, &init, &cfg).unwrap();
        let b = minimize_lbfgs(&problem, &shifted, &cfg).unwrap();
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert!((x.loss - y.loss).abs() <= 1e-10 * x.loss);
        }
        for (x, y) in a.pattern.coords().iter().zip(b.pattern.coords()) {
            assert!((y - x - 2.0 * PI).abs() <= 1e-10);
        }
    }

    #[test]
    fn l1_problem_descends() {
        let grid = ImageGrid::square(8).unwrap();
        let image = ComplexImage::random(grid.clone(), 5);
        let frame = WaveletFrame::new(grid.clone(), 2).unwrap();
        let problem = OptimProblem::new(vec![image], ReconConfig::l1_wavelet(frame, 0.05, 20)).unwrap();
        let init = vds_uniform(&grid, 20, 4).unwrap();
        let res = minimize_lbfgs(&problem, &init, &LbfgsConfig { max_iters: 5, ..Default::default() }).unwrap();
        assert!(res.loss < res.history[0].loss);
        let csv = history_csv(&res.history);
        assert!(csv.starts_with("iter,loss,grad_inf_norm,step_size,ls_trials\n0,"));
        assert_eq!(csv.lines().count(), res.history.len() + 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(OptimProblem::new(vec![], ReconConfig::tikhonov(1.0, 2)).is_err());
        let a = ComplexImage::zeros(ImageGrid::square(4).unwrap());
        let b = ComplexImage::zeros(ImageGrid::square(8).unwrap());
        assert!(OptimProblem::new(vec![a, b], ReconConfig::tikhonov(1.0, 2)).is_err());
        assert!(LbfgsConfig { memory: 0, ..Default::default() }.validate().is_err());
        assert!(LbfgsConfig { shrink: 1.0, ..Default::default() }.validate().is_err());
        assert!(minimize_lbfgs_fn(|_| Ok((0.0, vec![0.0])), &[f64::NAN], &LbfgsConfig::default()).is_err());
    }
}
