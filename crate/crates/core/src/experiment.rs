//! Experiment harness behind the command-line tool: baseline generation,
//! pattern optimization, reconstruction and the PSNR comparison matrix.
//!
//! Every command writes the resolved configuration first and a manifest of
//! content hashes last. Outputs depend only on the configuration, so reruns
//! reproduce the output tree byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frame::WaveletFrame;
use crate::grad::{grad_fd_check, grad_tikhonov_implicit, loss_and_grad_single};
use crate::io;
use crate::metrics::{peak_magnitude, psnr};
use crate::nuft::NuftOperator;
use crate::optim::{history_csv, minimize_lbfgs, LbfgsConfig, OptimProblem};
use crate::parallel::{map_collect, Threading};
use crate::patterns::{budget_from_factor, lf_pattern, vds_uniform};
use crate::phantoms::{phantom_shepp_logan, phantom_square};
use crate::recon::{self, default_l1_lambda, default_tikhonov_lambda, ReconConfig, ReconKind, StepRule};
use crate::types::{ComplexImage, ImageGrid, SamplingPattern};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    Square,
    SheppLogan,
}

impl PhantomKind {
    pub fn label(self) -> &'static str {
        match self {
            PhantomKind::Square => "square",
            PhantomKind::SheppLogan => "shepp-logan",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingSet {
    /// One pattern per evaluation image, trained on that image alone.
    Single,
    /// One pattern per reconstructor, trained on every configured phantom.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TikhonovSettings {
    pub iters: usize,
    /// Fixed weight; `1e-3 * N` when absent.
    pub lambda: Option<f64>,
}

impl Default for TikhonovSettings {
    fn default() -> Self {
        Self { iters: recon::DEFAULT_CG_ITERS, lambda: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L1Settings {
    pub iters: usize,
    /// Fixed weight; otherwise `lambda_rel * ||Psi^H A^H y||_inf`, evaluated
    /// on the VDS baseline for each image.
    pub lambda: Option<f64>,
    pub lambda_rel: f64,
    pub levels: usize,
    pub power_iters: usize,
    pub safety: f64,
    pub accelerated: bool,
}

impl Default for L1Settings {
    fn default() -> Self {
        let step = StepRule::default();
        Self {
            iters: recon::DEFAULT_FISTA_ITERS,
            lambda: None,
            lambda_rel: 1e-3,
            levels: 3,
            power_iters: step.power_iters,
            safety: step.safety,
            accelerated: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdCheckSettings {
    pub grid: usize,
    pub samples: usize,
    pub seeds: usize,
    pub coords: usize,
    pub step: f64,
    pub l1_step: f64,
}

impl Default for FdCheckSettings {
    fn default() -> Self {
        Self { grid: 16, samples: 77, seeds: 10, coords: 20, step: 1e-4, l1_step: 1e-7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: Vec<usize>,
    pub subsampling_factor: f64,
    pub phantoms: Vec<PhantomKind>,
    pub square_fraction: f64,
    pub reconstructors: Vec<ReconKind>,
    pub tikhonov: TikhonovSettings,
    pub l1: L1Settings,
    /// Base seed; the LF, VDS, power-iteration and noise seeds derive from it.
    pub seed: u64,
    pub training: TrainingSet,
    pub noise_sigma: f64,
    pub noise_samples: usize,
    pub lbfgs: LbfgsConfig,
    pub fdcheck: FdCheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: vec![64, 64],
            subsampling_factor: 3.3,
            phantoms: vec![PhantomKind::Square, PhantomKind::SheppLogan],
            square_fraction: 0.5,
            reconstructors: vec![ReconKind::Tikhonov, ReconKind::L1Wavelet],
            tikhonov: TikhonovSettings::default(),
            l1: L1Settings::default(),
            seed: 0,
            training: TrainingSet::Single,
            noise_sigma: 0.0,
            noise_samples: 1,
            lbfgs: LbfgsConfig::default(),
            fdcheck: FdCheckSettings::default(),
        }
    }
}

fn field_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config { field: field.into(), reason: reason.into() }
}

/// splitmix64 step, used to derive independent seeds from the base seed.
fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map_or_else(String::new, |s| text.get(s).unwrap_or("").trim().to_string());
            field_err(if field.is_empty() { "<document>" } else { &field }, e.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::InvalidArgument(format!("config file {} does not exist", path.display())));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.image_grid()?;
        if !(self.subsampling_factor >= 1.0) {
            return Err(field_err("subsampling_factor", "must be >= 1"));
        }
        if self.phantoms.is_empty() {
            return Err(field_err("phantoms", "needs at least one phantom"));
        }
        if self.phantoms.contains(&PhantomKind::SheppLogan) && grid.ndim() != 2 {
            return Err(field_err("phantoms", "shepp-logan needs a 2-D grid"));
        }
        if !(self.square_fraction > 0.0 && self.square_fraction <= 1.0) {
            return Err(field_err("square_fraction", "must be in (0, 1]"));
        }
        if self.reconstructors.is_empty() {
            return Err(field_err("reconstructors", "needs at least one reconstructor"));
        }
        if self.tikhonov.iters == 0 {
            return Err(field_err("tikhonov.iters", "must be >= 1"));
        }
        if self.tikhonov.lambda.is_some_and(|l| !(l > 0.0)) {
            return Err(field_err("tikhonov.lambda", "must be > 0"));
        }
        if self.l1.iters == 0 {
            return Err(field_err("l1.iters", "must be >= 1"));
        }
        if self.l1.lambda.is_some_and(|l| !(l > 0.0)) {
            return Err(field_err("l1.lambda", "must be > 0"));
        }
        if !(self.l1.lambda_rel > 0.0) {
            return Err(field_err("l1.lambda_rel", "must be > 0"));
        }
        if self.l1.levels == 0 {
            return Err(field_err("l1.levels", "must be >= 1"));
        }
        if self.l1.power_iters == 0 {
            return Err(field_err("l1.power_iters", "must be >= 1"));
        }
        if !(self.l1.safety > 0.0 && self.l1.safety <= 1.0) {
            return Err(field_err("l1.safety", "must be in (0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(field_err("noise_sigma", "must be >= 0"));
        }
        if self.noise_samples == 0 {
            return Err(field_err("noise_samples", "must be >= 1"));
        }
        self.lbfgs.validate().map_err(|e| field_err("lbfgs", e.to_string()))?;
        let fd = &self.fdcheck;
        if fd.grid == 0 || fd.grid % 2 != 0 || fd.samples == 0 || fd.seeds == 0 || fd.coords == 0 || !(fd.step > 0.0) || !(fd.l1_step > 0.0) {
            return Err(field_err("fdcheck", "grid must be even and every count and the step positive"));
        }
        Ok(())
    }

    pub fn image_grid(&self) -> Result<ImageGrid> {
        ImageGrid::new(&self.grid).map_err(|e| field_err("grid", e.to_string()))
    }

    pub fn lf_seed(&self) -> u64 {
        derive_seed(self.seed, 1)
    }

    pub fn vds_seed(&self) -> u64 {
        derive_seed(self.seed, 2)
    }

    pub fn power_seed(&self) -> u64 {
        derive_seed(self.seed, 3)
    }

    pub fn noise_seed(&self) -> u64 {
        derive_seed(self.seed, 4)
    }

    pub fn budget(&self) -> Result<usize> {
        budget_from_factor(&self.image_grid()?, self.subsampling_factor)
    }

    pub fn phantom(&self, kind: PhantomKind) -> Result<ComplexImage> {
        let grid = self.image_grid()?;
        match kind {
            PhantomKind::Square => phantom_square(&grid, self.square_fraction),
            PhantomKind::SheppLogan => phantom_shepp_logan(&grid),
        }
    }

    fn step_rule(&self) -> StepRule {
        StepRule { power_iters: self.l1.power_iters, safety: self.l1.safety, seed: self.power_seed() }
    }

    /// Reconstructor configuration for `kind`, with the weight resolved
    /// against `image` measured on `reference` when not fixed in the config.
    pub fn recon_config(&self, kind: ReconKind, image: &ComplexImage, reference: &SamplingPattern) -> Result<ReconConfig> {
        let grid = self.image_grid()?;
        match kind {
            ReconKind::Tikhonov => {
                let lambda = self.tikhonov.lambda.unwrap_or_else(|| default_tikhonov_lambda(grid.len()));
                Ok(ReconConfig::tikhonov(lambda, self.tikhonov.iters))
            }
            ReconKind::L1Wavelet => {
                let frame = WaveletFrame::new(grid.clone(), self.l1.levels)?;
                let lambda = match self.l1.lambda {
                    Some(l) => l,
                    None => {
                        let op = NuftOperator::new(reference.clone(), grid)?;
                        let y = op.forward(image)?;
                        self.l1.lambda_rel / 1e-3 * default_l1_lambda(&op, &frame, &y)?
                    }
                };
                let mut cfg = ReconConfig::l1_wavelet(frame, lambda, self.l1.iters).with_step(self.step_rule());
                cfg.accelerated = self.l1.accelerated;
                Ok(cfg)
            }
        }
    }
}

/// Output tree under construction; tracks nothing beyond the root, the
/// manifest is built from the directory contents.
struct Outputs {
    root: PathBuf,
}

impl Outputs {
    fn create(root: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(root)?;
        let out = Self { root: root.to_path_buf() };
        out.write("config.toml", cfg.to_toml())?;
        Ok(out)
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.path(rel)?, contents)?;
        Ok(())
    }

    fn pattern(&self, name: &str, pattern: &SamplingPattern) -> Result<()> {
        io::save_pattern(self.path(&format!("patterns/{name}.csv"))?, pattern)?;
        io::save_pattern(self.path(&format!("scatter/{name}.csv"))?, &pattern.wrapped())
    }

    fn image(&self, stem: &str, image: &ComplexImage, peak: f64) -> Result<()> {
        io::save_image(self.path(&format!("{stem}.ksimg"))?, image)?;
        io::save_pgm(self.path(&format!("{stem}.pgm"))?, image, peak)
    }

    fn finish(self) -> Result<PathBuf> {
        write_manifest(&self.root)
    }
}

pub const MANIFEST: &str = "manifest.txt";

fn collect_files(dir: &Path, root: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, root, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
            if rel != MANIFEST {
                out.push(rel);
            }
        }
    }
    Ok(())
}

/// Write `manifest.txt` with one `sha256  path` line per file under `root`.
pub fn write_manifest(root: &Path) -> Result<PathBuf> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut text = String::new();
    for rel in files {
        let digest = Sha256::digest(fs::read(root.join(&rel))?);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(text, "{hex}  {rel}");
    }
    let path = root.join(MANIFEST);
    fs::write(&path, text)?;
    Ok(path)
}

/// LF and VDS baselines at the configured budget.
pub fn baselines(cfg: &RunConfig) -> Result<(SamplingPattern, SamplingPattern)> {
    let grid = cfg.image_grid()?;
    let m = cfg.budget()?;
    Ok((lf_pattern(&grid, m, cfg.lf_seed())?, vds_uniform(&grid, m, cfg.vds_seed())?))
}

pub fn cmd_generate(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let out = Outputs::create(out_dir, cfg)?;
    let (lf, vds) = baselines(cfg)?;
    out.pattern("lf", &lf)?;
    out.pattern("vds", &vds)?;
    out.finish()
}

/// One trained pattern with its log.
pub struct TrainedPattern {
    pub name: String,
    pub recon: ReconKind,
    /// Phantom the pattern was trained on; `None` when trained on all.
    pub phantom: Option<PhantomKind>,
    pub pattern: SamplingPattern,
    pub log: String,
    pub recon_config: ReconConfig,
}

fn osp_name(recon: ReconKind, phantom: Option<PhantomKind>) -> String {
    match phantom {
        Some(p) => format!("osp_{}_{}", recon.label(), p.label()),
        None => format!("osp_{}", recon.label()),
    }
}

/// Train every OSP pattern the configuration asks for, starting from the
/// VDS baseline. Jobs run concurrently; results keep configuration order.
pub fn train_patterns(cfg: &RunConfig, threading: Threading) -> Result<Vec<TrainedPattern>> {
    let (_, vds) = baselines(cfg)?;
    let mut jobs: Vec<(ReconKind, Option<PhantomKind>)> = Vec::new();
    for &recon in &cfg.reconstructors {
        match cfg.training {
            TrainingSet::Single => jobs.extend(cfg.phantoms.iter().map(|&p| (recon, Some(p)))),
            TrainingSet::All => jobs.push((recon, None)),
        }
    }
    let results = map_collect(threading, &jobs, |&(recon, phantom)| -> Result<TrainedPattern> {
        let images: Vec<ComplexImage> = match phantom {
            Some(p) => vec![cfg.phantom(p)?],
            None => cfg.phantoms.iter().map(|&p| cfg.phantom(p)).collect::<Result<_>>()?,
        };
        let recon_config = training_recon_config(cfg, recon, &images, &vds)?;
        let problem = OptimProblem::new(images, recon_config.clone())?
            .with_noise(cfg.noise_sigma, cfg.noise_samples, cfg.noise_seed())?;
        let result = minimize_lbfgs(&problem, &vds, &cfg.lbfgs)?;
        log::info!(
            "{}: loss {:.6e} -> {:.6e} in {} iterations ({:?})",
            osp_name(recon, phantom),
            result.history[0].loss,
            result.loss,
            result.history.len() - 1,
            result.termination
        );
        Ok(TrainedPattern {
            name: osp_name(recon, phantom),
            recon,
            phantom,
            pattern: result.pattern,
            log: history_csv(&result.history),
            recon_config,
        })
    });
    results.into_iter().collect()
}

/// Reconstructor used for training; with several images the l1 weight is
/// the mean of the per-image weights.
fn training_recon_config(cfg: &RunConfig, recon: ReconKind, images: &[ComplexImage], vds: &SamplingPattern) -> Result<ReconConfig> {
    let configs: Vec<ReconConfig> = images.iter().map(|img| cfg.recon_config(recon, img, vds)).collect::<Result<_>>()?;
    let mut out = configs[0].clone();
    out.lambda = configs.iter().map(|c| c.lambda).sum::<f64>() / configs.len() as f64;
    Ok(out)
}

pub fn cmd_optimize(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let out = Outputs::create(out_dir, cfg)?;
    let trained = train_patterns(cfg, Threading::default())?;
    let mut lambdas = String::from("pattern,recon,lambda\n");
    for t in &trained {
        out.pattern(&t.name, &t.pattern)?;
        out.write(&format!("logs/{}.csv", t.name), &t.log)?;
        let _ = writeln!(lambdas, "{},{},{:.16e}", t.name, t.recon.label(), t.recon_config.lambda);
    }
    out.write("lambdas.csv", lambdas)?;
    out.finish()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsnrRow {
    pub pattern: String,
    pub recon: ReconKind,
    pub phantom: PhantomKind,
    pub psnr_db: f64,
}

pub fn psnr_csv(rows: &[PsnrRow]) -> String {
    let mut out = String::from("pattern,recon,phantom,psnr_db\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:.6}", r.pattern, r.recon.label(), r.phantom.label(), r.psnr_db);
    }
    out
}

/// Reconstruct `image` from noiseless samples on `pattern`.
pub fn reconstruct_image(pattern: &SamplingPattern, image: &ComplexImage, recon: &ReconConfig) -> Result<ComplexImage> {
    let op = NuftOperator::new(pattern.clone(), image.grid().clone())?;
    let y = op.forward(image)?;
    Ok(recon::reconstruct(&op, &y, recon)?.0)
}

pub fn cmd_reconstruct(cfg: &RunConfig, pattern_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    if !pattern_path.exists() {
        return Err(Error::InvalidArgument(format!("pattern file {} does not exist", pattern_path.display())));
    }
    let pattern = io::load_pattern(pattern_path)?;
    let stem = pattern_path.file_stem().map_or("pattern".into(), |s| s.to_string_lossy().into_owned());
    let out = Outputs::create(out_dir, cfg)?;
    let (_, vds) = baselines(cfg)?;
    let mut rows = Vec::new();
    let mut lambdas = String::from("phantom,recon,lambda\n");
    for &phantom in &cfg.phantoms {
        let image = cfg.phantom(phantom)?;
        let peak = peak_magnitude(&image);
        for &kind in &cfg.reconstructors {
            let rc = cfg.recon_config(kind, &image, &vds)?;
            let _ = writeln!(lambdas, "{},{},{:.16e}", phantom.label(), kind.label(), rc.lambda);
            let xhat = reconstruct_image(&pattern, &image, &rc)?;
            out.image(&format!("images/{}/{}_{}", phantom.label(), stem, kind.label()), &xhat, peak)?;
            rows.push(PsnrRow { pattern: stem.clone(), recon: kind, phantom, psnr_db: psnr(&xhat, &image, Some(peak))? });
        }
    }
    out.write("lambdas.csv", lambdas)?;
    out.write("psnr.csv", psnr_csv(&rows))?;
    out.finish()
}

/// Full comparison: LF, VDS and OSP patterns under every configured
/// reconstructor and phantom.
pub fn evaluate(cfg: &RunConfig, threading: Threading) -> Result<(Vec<PsnrRow>, Vec<TrainedPattern>)> {
    let (lf, vds) = baselines(cfg)?;
    let trained = train_patterns(cfg, threading)?;
    let mut rows = Vec::new();
    for &phantom in &cfg.phantoms {
        let image = cfg.phantom(phantom)?;
        let peak = peak_magnitude(&image);
        for &kind in &cfg.reconstructors {
            let osp = trained
                .iter()
                .find(|t| t.recon == kind && t.phantom.map_or(true, |p| p == phantom))
                .expect("one trained pattern per reconstructor and phantom");
            let rc = match osp.phantom {
                Some(_) => osp.recon_config.clone(),
                None => cfg.recon_config(kind, &image, &vds)?,
            };
            for (label, pattern) in [("LF", &lf), ("VDS", &vds), ("OSP", &osp.pattern)] {
                let xhat = reconstruct_image(pattern, &image, &rc)?;
                rows.push(PsnrRow { pattern: label.into(), recon: kind, phantom, psnr_db: psnr(&xhat, &image, Some(peak))? });
            }
        }
    }
    Ok((rows, trained))
}

pub fn cmd_evaluate(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let out = Outputs::create(out_dir, cfg)?;
    let (lf, vds) = baselines(cfg)?;
    out.pattern("lf", &lf)?;
    out.pattern("vds", &vds)?;
    let (rows, trained) = evaluate(cfg, Threading::default())?;
    let mut lambdas = String::from("pattern,recon,lambda\n");
    for t in &trained {
        out.pattern(&t.name, &t.pattern)?;
        out.write(&format!("logs/{}.csv", t.name), &t.log)?;
        let _ = writeln!(lambdas, "{},{},{:.16e}", t.name, t.recon.label(), t.recon_config.lambda);
    }
    out.write("lambdas.csv", lambdas)?;
    for &phantom in &cfg.phantoms {
        let image = cfg.phantom(phantom)?;
        let peak = peak_magnitude(&image);
        out.image(&format!("images/{}/original", phantom.label()), &image, peak)?;
        for &kind in &cfg.reconstructors {
            let osp = trained
                .iter()
                .find(|t| t.recon == kind && t.phantom.map_or(true, |p| p == phantom))
                .expect("trained pattern present");
            let rc = match osp.phantom {
                Some(_) => osp.recon_config.clone(),
                None => cfg.recon_config(kind, &image, &vds)?,
            };
            for (label, pattern) in [("lf", &lf), ("vds", &vds), ("osp", &osp.pattern)] {
                let xhat = reconstruct_image(pattern, &image, &rc)?;
                out.image(&format!("images/{}/{}_{}", phantom.label(), label, kind.label()), &xhat, peak)?;
            }
        }
    }
    out.write("psnr.csv", psnr_csv(&rows))?;
    out.finish()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdCheckRow {
    pub recon: ReconKind,
    pub seed: u64,
    pub max_rel_error: f64,
    pub skipped_kinks: usize,
}

/// Gradient validation suite: unrolled gradient vs central differences for
/// each reconstructor on small random instances.
pub fn fdcheck(cfg: &RunConfig) -> Result<Vec<FdCheckRow>> {
    let s = &cfg.fdcheck;
    let grid = ImageGrid::square(s.grid)?;
    let mut rows = Vec::new();
    for &kind in &cfg.reconstructors {
        for k in 0..s.seeds as u64 {
            let seed = derive_seed(cfg.seed, 100 + k);
            let pattern = vds_uniform(&grid, s.samples, seed)?;
            let image = ComplexImage::random(grid.clone(), seed ^ 1);
            let (rc, h) = match kind {
                ReconKind::Tikhonov => (ReconConfig::tikhonov(
                    cfg.tikhonov.lambda.unwrap_or_else(|| default_tikhonov_lambda(grid.len())),
                    cfg.tikhonov.iters,
                ), s.step),
                ReconKind::L1Wavelet => {
                    let frame = WaveletFrame::new(grid.clone(), cfg.l1.levels)?;
                    let op = NuftOperator::new(pattern.clone(), grid.clone())?;
                    let y = op.forward(&image)?;
                    let lambda = cfg.l1.lambda_rel / 1e-3 * default_l1_lambda(&op, &frame, &y)?;
                    (ReconConfig::l1_wavelet(frame, lambda, cfg.l1.iters).with_step(cfg.step_rule()), s.l1_step)
                }
            };
            let report = grad_fd_check(&pattern, &image, &rc, h, s.coords, seed ^ 2)?;
            rows.push(FdCheckRow { recon: kind, seed, max_rel_error: report.max_rel_error, skipped_kinks: report.skipped_kinks });
        }
    }
    Ok(rows)
}

pub fn cmd_fdcheck(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let out = Outputs::create(out_dir, cfg)?;
    let rows = fdcheck(cfg)?;
    let mut text = String::from("check,recon,seed,max_rel_error,skipped_kinks\n");
    for r in &rows {
        let _ = writeln!(text, "fd,{},{},{:.6e},{}", r.recon.label(), r.seed, r.max_rel_error, r.skipped_kinks);
    }
    // unrolled vs implicit Tikhonov gradient on an 8x8 instance
    let grid = ImageGrid::square(8)?;
    let pattern = vds_uniform(&grid, 24, derive_seed(cfg.seed, 200))?;
    let image = ComplexImage::random(grid.clone(), derive_seed(cfg.seed, 201));
    let rc = ReconConfig::tikhonov(default_tikhonov_lambda(grid.len()) * 10.0, 200);
    let (_, unrolled) = loss_and_grad_single(&pattern, &image, &rc)?;
    let implicit = grad_tikhonov_implicit(&pattern, &image, &rc)?;
    let scale = implicit.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = unrolled.iter().zip(&implicit).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
    let _ = writeln!(text, "implicit,tikhonov,{},{:.6e},", derive_seed(cfg.seed, 200), err);
    out.write("fdcheck.csv", text)?;
    out.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig { grid: vec![8, 8], seed: 11, ..Default::default() };
        cfg.tikhonov.iters = 6;
        cfg.l1.iters = 10;
        cfg.l1.levels = 2;
        cfg.lbfgs.max_iters = 2;
        cfg.fdcheck = FdCheckSettings { grid: 8, samples: 20, seeds: 2, coords: 4, ..Default::default() };
        cfg
    }

    #[test]
    fn toml_round_trip() {
        let cfg = tiny();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::from_toml("grid = [16, 16]\nseed = 4\n[l1]\niters = 7\n").unwrap();
        assert_eq!(partial.grid, vec![16, 16]);
        assert_eq!(partial.l1.iters, 7);
        assert_eq!(partial.l1.levels, L1Settings::default().levels);
        assert_eq!(partial.phantoms, RunConfig::default().phantoms);
    }

    #[test]
    fn unknown_and_invalid_fields_rejected() {
        assert!(matches!(RunConfig::from_toml("gird = [8, 8]"), Err(Error::Config { .. })));
        assert!(matches!(RunConfig::from_toml("[l1]\nlevel = 2"), Err(Error::Config { .. })));
        let bad = |f: fn(&mut RunConfig)| {
            let mut c = tiny();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.grid = vec![7, 8]));
        assert!(bad(|c| c.subsampling_factor = 0.5));
        assert!(bad(|c| c.phantoms.clear()));
        assert!(bad(|c| c.reconstructors.clear()));
        assert!(bad(|c| c.noise_sigma = -1.0));
        assert!(bad(|c| c.fdcheck.l1_step = 0.0));
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let cfg = tiny();
        let s = [cfg.lf_seed(), cfg.vds_seed(), cfg.power_seed(), cfg.noise_seed()];
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_eq!(derive_seed(11, 2), cfg.vds_seed());
        assert_eq!(cfg.budget().unwrap(), 19);
        let full = RunConfig::default();
        assert_eq!(full.budget().unwrap(), 1241);
    }

    #[test]
    fn generate_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = cmd_generate(&tiny(), dir.path()).unwrap();
        let text = fs::read_to_string(&manifest).unwrap();
        let paths: Vec<&str> = text.lines().map(|l| l.split_once("  ").unwrap().1).collect();
        assert_eq!(paths, ["config.toml", "patterns/lf.csv", "patterns/vds.csv", "scatter/lf.csv", "scatter/vds.csv"]);
        assert!(text.lines().all(|l| l.split_once("  ").unwrap().0.len() == 64));
        let lf = io::load_pattern(dir.path().join("patterns/lf.csv")).unwrap();
        assert_eq!(lf.len(), 19);
        let cfg = RunConfig::load(dir.path().join("config.toml")).unwrap();
        assert_eq!(cfg, tiny());
    }

    #[test]
    fn reconstruct_requires_pattern_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_reconstruct(&tiny(), &dir.path().join("missing.csv"), dir.path()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn evaluate_is_byte_identical() {
        let mut cfg = tiny();
        cfg.phantoms = vec![PhantomKind::SheppLogan];
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = fs::read(cmd_evaluate(&cfg, a.path()).unwrap()).unwrap();
        let mb = fs::read(cmd_evaluate(&cfg, b.path()).unwrap()).unwrap();
        assert_eq!(ma, mb);
        let psnr = fs::read_to_string(a.path().join("psnr.csv")).unwrap();
        assert_eq!(psnr.lines().count(), 1 + 2 * 3);
        assert!(psnr.starts_with("pattern,recon,phantom,psnr_db\n"));

        let out = tempfile::tempdir().unwrap();
        cmd_reconstruct(&cfg, &a.path().join("patterns/vds.csv"), out.path()).unwrap();
        let again = fs::read_to_string(out.path().join("psnr.csv")).unwrap();
        let tail = |l: &str| l.split_once(',').unwrap().1.to_string();
        let vds_rows: Vec<String> = psnr.lines().filter(|l| l.starts_with("VDS,")).map(tail).collect();
        assert_eq!(again.lines().skip(1).map(tail).collect::<Vec<_>>(), vds_rows);
    }

    #[test]
    fn fdcheck_reports_small_errors() {
        let rows = fdcheck(&tiny()).unwrap();
        assert_eq!(rows.len(), 4);
        for r in rows {
            assert!(r.max_rel_error <= 1e-4, "{:?} {}", r.recon, r.max_rel_error);
        }
    }
}
