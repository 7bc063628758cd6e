//! Four-stage training driver: warm-up, bit-bound contraction, joint pruning
//! and quantization under a PSNR floor, and cool-down. Also the sequential
//! threshold-prune + INT8 baseline and the single-substitution ablations.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::image::{mean_psnr, psnr, Image};
use crate::optimizer::{linear_prune_targets, prune_event, schedule_prune_mask, OptimConfig, OptimState};
use crate::qadg::{build_qadg, DependencyGraph};
use crate::quantizer::{BitBounds, BitRangePreset, QuantizerBank};
use crate::render::{self, backward, backward_quantized, LossConfig};
use crate::saliency::{compute_saliency, SaliencyConfig, SaliencyMode, SaliencyWeights};
use crate::scene::{load_cameras, row_dim, save_cameras, AttributeClass, Camera, GaussianScene};
use crate::synth::{synthesize_scene_with, Layout, SynthOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    None,
    TaylorSaliency,
    SharedBits,
    NoCooldown,
    NoProjection,
    Uniform6,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::TaylorSaliency,
        Ablation::SharedBits,
        Ablation::NoCooldown,
        Ablation::NoProjection,
        Ablation::Uniform6,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::TaylorSaliency => "taylor-saliency",
            Ablation::SharedBits => "shared-bits",
            Ablation::NoCooldown => "no-cooldown",
            Ablation::NoProjection => "no-projection",
            Ablation::Uniform6 => "uniform6",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name).ok_or_else(|| Error::UnknownAblation(name.to_string()))
    }
}

/// How the PSNR floor is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FloorMode {
    Off,
    Absolute { db: f64 },
    /// Warm-up PSNR minus `db`.
    VanillaMinus { db: f64 },
}

impl FloorMode {
    pub fn resolve(self, vanilla_psnr: f64) -> f64 {
        match self {
            FloorMode::Off => f64::NEG_INFINITY,
            FloorMode::Absolute { db } => db,
            FloorMode::VanillaMinus { db } => vanilla_psnr - db,
        }
    }
}

/// Synthetic scene the run trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub layout: String,
    pub n_gaussians: usize,
    pub n_cameras: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self { layout: "random-blob".into(), n_gaussians: 64, n_cameras: 8, width: 64, height: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Ends of warm-up, projection, joint and cool-down, in iterations.
    pub boundaries: [usize; 4],
    pub preset: String,
    /// Gaussians to keep; defaults to the budget-derived count, else all.
    pub k_target: Option<usize>,
    /// Nominal storage budget in bytes; only used to derive `k_target`.
    pub budget_bytes: Option<f64>,
    pub floor: FloorMode,
    pub saliency_period: usize,
    pub k_views: usize,
    pub saliency_weights: SaliencyWeights,
    pub prune_events: usize,
    pub relax_factor: f64,
    pub retry_budget: usize,
    /// Upper-bound contraction strength per attribute class.
    pub aggressiveness: [f64; 6],
    /// Opacity cut of the sequential baseline.
    pub opacity_threshold: f64,
    pub ssim_weight: f64,
    pub optim: OptimConfig,
    pub seed: u64,
    pub ablation: Ablation,
    pub fixture: FixtureConfig,
    /// Period of full training-view PSNR evaluations in the run log (0: off).
    pub eval_every: usize,
    /// Cool-down checkpoints are compared every this many iterations.
    pub cooldown_eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            boundaries: [500, 900, 1400, 1600],
            preset: "compressive".into(),
            k_target: None,
            budget_bytes: None,
            floor: FloorMode::VanillaMinus { db: 0.5 },
            saliency_period: 500,
            k_views: 8,
            saliency_weights: SaliencyWeights::default(),
            prune_events: 5,
            relax_factor: 1.25,
            retry_budget: 3,
            aggressiveness: [1.0, 0.9, 0.9, 0.7, 0.9, 0.6],
            opacity_threshold: 0.05,
            ssim_weight: 0.2,
            optim: OptimConfig::default(),
            seed: 0,
            ablation: Ablation::None,
            fixture: FixtureConfig::default(),
            eval_every: 0,
            cooldown_eval_every: 10,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let [t1, t2, t3, t4] = self.boundaries;
        if !(t1 < t2 && t2 < t3 && t3 < t4) {
            return Err(Error::InvalidConfig(format!("stage boundaries {:?} must increase strictly", self.boundaries)));
        }
        if !(self.relax_factor > 1.0 && self.relax_factor <= 2.0) {
            return Err(Error::InvalidConfig(format!("relax_factor {} outside (1, 2]", self.relax_factor)));
        }
        if self.saliency_period == 0 || self.k_views == 0 || self.prune_events == 0 || self.cooldown_eval_every == 0 {
            return Err(Error::InvalidConfig(
                "saliency_period, k_views, prune_events and cooldown_eval_every must be positive".into(),
            ));
        }
        if self.aggressiveness.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidConfig(format!("aggressiveness {:?} outside [0, 1]", self.aggressiveness)));
        }
        if !(0.0..=1.0).contains(&self.ssim_weight) {
            return Err(Error::InvalidConfig(format!("ssim_weight {} outside [0, 1]", self.ssim_weight)));
        }
        if self.k_target == Some(0) {
            return Err(Error::InvalidConfig("k_target must be at least 1".into()));
        }
        self.saliency_weights.validate()?;
        self.initial_bank()?;
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { ssim_weight: self.ssim_weight }
    }

    /// Quantizer bank enabled at the end of warm-up.
    pub fn initial_bank(&self) -> Result<QuantizerBank> {
        Ok(match self.ablation {
            Ablation::Uniform6 => QuantizerBank::new(&BitRangePreset::uniform(6)),
            Ablation::SharedBits => QuantizerBank::shared(BitBounds::new(7, 8)),
            _ => QuantizerBank::new(&BitRangePreset::by_name(&self.preset)?),
        })
    }

    fn uses_projection(&self) -> bool {
        self.ablation != Ablation::NoProjection
    }

    fn end(&self) -> usize {
        if self.ablation == Ablation::NoCooldown {
            self.boundaries[2]
        } else {
            self.boundaries[3]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Projection,
    Joint,
    Cooldown,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Projection => "projection",
            Stage::Joint => "joint",
            Stage::Cooldown => "cooldown",
        }
    }

    pub fn at(boundaries: &[usize; 4], t: usize) -> Stage {
        if t < boundaries[0] {
            Stage::Warmup
        } else if t < boundaries[1] {
            Stage::Projection
        } else if t < boundaries[2] {
            Stage::Joint
        } else {
            Stage::Cooldown
        }
    }
}

/// Linearly contracted upper bounds, `b_hi - rho * frac * (b_hi - b_lo)`.
fn contracted(bounds: &[BitBounds; 6], aggressiveness: &[f64; 6], frac: f64) -> [f64; 6] {
    std::array::from_fn(|a| {
        let (lo, hi) = (bounds[a].lo as f64, bounds[a].hi as f64);
        hi - aggressiveness[a] * frac * (hi - lo)
    })
}

/// Upper bounds during the projection stage, rounded to the integer grid.
pub fn contract_bit_bounds(cfg: &RunConfig, initial: &[BitBounds; 6], t: usize) -> Result<[u32; 6]> {
    let [t1, t2, _, _] = cfg.boundaries;
    if t < t1 || t >= t2 {
        return Err(Error::InvalidArgument(format!("iteration {t} outside the projection stage [{t1}, {t2})")));
    }
    let frac = (t - t1) as f64 / (t2 - t1) as f64;
    Ok(contracted(initial, &cfg.aggressiveness, frac).map(|b| b.round() as u32))
}

/// Upper bounds once the projection stage is over.
pub fn final_bit_bounds(cfg: &RunConfig, initial: &[BitBounds; 6]) -> [u32; 6] {
    contracted(initial, &cfg.aggressiveness, 1.0).map(|b| b.round() as u32)
}

fn bank_bounds(bank: &QuantizerBank) -> [BitBounds; 6] {
    std::array::from_fn(|a| bank.states[a].bounds)
}

/// Ground-truth views and the scene to train.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub scene: GaussianScene,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
}

impl TrainingData {
    pub fn synthetic(fixture: &FixtureConfig) -> Result<Self> {
        let opts = SynthOptions {
            n_cameras: fixture.n_cameras,
            width: fixture.width,
            height: fixture.height,
            ..SynthOptions::default()
        };
        let s = synthesize_scene_with(fixture.seed, fixture.n_gaussians, Layout::from_name(&fixture.layout)?, &opts)?;
        Ok(Self { scene: s.initial, cameras: s.cameras, images: s.images })
    }

    /// Writes `scene.g3d`, `cameras.json` and one `view_NNN.raw` per camera.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.scene.save(dir.join("scene.g3d"))?;
        save_cameras(&self.cameras, dir.join("cameras.json"))?;
        for (k, img) in self.images.iter().enumerate() {
            img.save_raw(dir.join(format!("view_{k:03}.raw")))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let scene = GaussianScene::load(dir.join("scene.g3d"))?;
        let cameras = load_cameras(dir.join("cameras.json"))?;
        let images = (0..cameras.len())
            .map(|k| Image::load_raw(dir.join(format!("view_{k:03}.raw"))))
            .collect::<Result<Vec<_>>>()?;
        let data = Self { scene, cameras, images };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() || self.cameras.len() != self.images.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} cameras and {} ground-truth views",
                self.cameras.len(),
                self.images.len()
            )));
        }
        for (c, img) in self.cameras.iter().zip(&self.images) {
            c.validate()?;
            if (c.width, c.height) != (img.width, img.height) {
                return Err(Error::DimensionMismatch(format!(
                    "camera is {}x{} but its view is {}x{}",
                    c.width, c.height, img.width, img.height
                )));
            }
        }
        self.scene.validate()
    }
}

/// Mean PSNR over all training views, through the quantizers when given.
pub fn training_psnr(
    scene: &GaussianScene,
    bank: Option<&QuantizerBank>,
    cameras: &[Camera],
    images: &[Image],
) -> Result<f64> {
    let q = bank.map(|b| b.quantize_scene(scene));
    let s = q.as_ref().unwrap_or(scene);
    let renders = cameras.iter().map(|c| render::render(s, c).map(|o| o.image)).collect::<Result<Vec<_>>>()?;
    mean_psnr(renders.iter().zip(images))
}

/// Stored size of a compacted scene under the bank's grids.
pub fn storage_bytes(k: usize, sh_degree: usize, bank: &QuantizerBank) -> usize {
    codec::file_len(k, sh_degree, &bank.grid_bits())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneAttempt {
    pub k: usize,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneEventRecord {
    pub iteration: usize,
    pub requested: usize,
    /// Gaussian count after the event.
    pub achieved: usize,
    pub attempts: Vec<PruneAttempt>,
    /// No attempt met the floor; the count stayed where it was and pruning
    /// stopped for the rest of the run.
    pub aborted: bool,
}

#[derive(Debug, Clone)]
pub struct FeasibilityOutcome {
    pub scene: GaussianScene,
    pub mask: Vec<bool>,
    pub record: PruneEventRecord,
}

/// Tentatively prunes to `k_t` and measures the training-view PSNR through
/// the quantizers; on a floor violation relaxes `k_t` by `relax` (capped at
/// the alive count) up to `retries` more times, then gives up.
#[allow(clippy::too_many_arguments)]
pub fn feasibility_check(
    scene: &GaussianScene,
    bank: &QuantizerBank,
    cameras: &[Camera],
    images: &[Image],
    saliency: &[f64],
    tau: f64,
    k_t: usize,
    relax: f64,
    retries: usize,
) -> Result<FeasibilityOutcome> {
    let alive = scene.alive_count();
    let mut k = k_t.clamp(1, alive);
    let mut attempts = Vec::new();
    for _ in 0..=retries {
        let mask = schedule_prune_mask(saliency, &scene.alive, k)?;
        let mut trial = scene.clone();
        for (a, m) in trial.alive.iter_mut().zip(&mask) {
            *a &= !m;
        }
        let trial = trial.compact();
        let p = training_psnr(&trial, Some(bank), cameras, images)?;
        attempts.push(PruneAttempt { k, psnr: p });
        if p >= tau {
            let record =
                PruneEventRecord { iteration: 0, requested: k_t, achieved: k, attempts, aborted: false };
            return Ok(FeasibilityOutcome { scene: trial, mask, record });
        }
        k = ((relax * k as f64).ceil() as usize).min(alive);
    }
    let record = PruneEventRecord { iteration: 0, requested: k_t, achieved: alive, attempts, aborted: true };
    Ok(FeasibilityOutcome { scene: scene.compact(), mask: vec![false; scene.len()], record })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub iter: usize,
    pub stage: Stage,
    pub loss: f64,
    /// PSNR of the view trained on at this iteration.
    pub psnr_train: f64,
    pub alive_count: usize,
    /// Clamped per-class bit-widths once the quantizers are on.
    pub bits: Option<[f64; 6]>,
}

pub fn write_metrics_csv(rows: &[MetricRow], path: impl AsRef<Path>, provenance: &str) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# {provenance}")?;
    let bit_cols: Vec<String> = AttributeClass::ALL.iter().map(|a| format!("b_{}", a.name())).collect();
    writeln!(f, "iter,stage,loss,psnr_train,alive_count,{}", bit_cols.join(","))?;
    for r in rows {
        let bits = match r.bits {
            Some(b) => b.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
            None => ",,,,,".to_string(),
        };
        writeln!(f, "{},{},{},{},{},{}", r.iter, r.stage.name(), r.loss, r.psnr_train, r.alive_count, bits)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleState {
    pub stage: Stage,
    pub iteration: usize,
    pub initial_count: usize,
    pub k_target: usize,
    pub tau: f64,
    pub vanilla_psnr: f64,
    /// `(iteration, alive count)` after every change.
    pub k_history: Vec<(usize, usize)>,
    pub prune_events: Vec<PruneEventRecord>,
    pub pruning_aborted: bool,
    pub psnr_end_joint: f64,
    pub storage_end_joint: usize,
    pub psnr_final: f64,
    pub storage_final: usize,
    pub converged_bits: [f64; 6],
    pub grid_bits: [u32; 6],
    pub graph_nodes: usize,
    pub graph_order_edges: usize,
    /// `(iteration, training-view PSNR)` every `eval_every` iterations.
    pub psnr_trace: Vec<(usize, f64)>,
}

impl ScheduleState {
    /// Final PSNR meets the floor, or some prune event recorded an abort.
    pub fn floor_respected(&self) -> bool {
        self.psnr_final >= self.tau || self.prune_events.iter().any(|e| e.aborted)
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// Compacted full-precision scene at the end of the run.
    pub scene: GaussianScene,
    pub bank: QuantizerBank,
    /// Scene at the end of warm-up.
    pub vanilla: GaussianScene,
    pub state: ScheduleState,
    pub metrics: Vec<MetricRow>,
}

impl RunResult {
    pub fn write_summary_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.state)? + "\n")?;
        Ok(())
    }
}

/// Gaussian count that `budget` bytes buy at the projection-stage bounds.
pub fn k_for_budget(cfg: &RunConfig, n: usize, sh_degree: usize, budget: f64) -> Result<usize> {
    let bank = cfg.initial_bank()?;
    let hi = if cfg.uses_projection() {
        final_bit_bounds(cfg, &bank_bounds(&bank))
    } else {
        bank.grid_bits()
    };
    let bits: u32 = AttributeClass::ALL.iter().map(|a| a.dim(sh_degree) as u32 * hi[a.index()]).sum();
    Ok(((budget * 8.0 / bits as f64).floor() as usize).clamp(1, n))
}

#[allow(clippy::too_many_arguments)]
fn record_row(
    metrics: &mut Vec<MetricRow>,
    t: usize,
    stage: Stage,
    loss: f64,
    image: &Image,
    target: &Image,
    alive: usize,
    bank: Option<&QuantizerBank>,
) -> Result<()> {
    metrics.push(MetricRow {
        iter: t,
        stage,
        loss,
        psnr_train: psnr(image, target)?,
        alive_count: alive,
        bits: bank.map(|b| b.bitwidths()),
    });
    Ok(())
}

fn warmup_stage(
    cfg: &RunConfig,
    data: &TrainingData,
    rng: &mut ChaCha8Rng,
    opt: &mut OptimState,
    scene: &mut GaussianScene,
    metrics: &mut Vec<MetricRow>,
) -> Result<()> {
    let loss_cfg = cfg.loss();
    for t in 0..cfg.boundaries[0] {
        opt.lr_scale = cfg.optim.decay(t, cfg.boundaries[3]);
        let v = rng.random_range(0..data.cameras.len());
        let out = backward(scene, &data.cameras[v], &data.images[v], &loss_cfg)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss(t));
        }
        opt.masked_step(scene, &out.grads, None, false)?;
        record_row(metrics, t, Stage::Warmup, out.loss, &out.image, &data.images[v], scene.len(), None)?;
    }
    Ok(())
}

/// Plain full-precision training up to the end of warm-up; the same
/// trajectory [`run`] follows before its quantizers are enabled.
pub fn warmup(cfg: &RunConfig, data: &TrainingData) -> Result<(GaussianScene, Vec<MetricRow>)> {
    cfg.validate()?;
    data.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scene = data.scene.compact();
    let mut opt = OptimState::new(&scene, cfg.optim);
    let mut metrics = Vec::new();
    warmup_stage(cfg, data, &mut rng, &mut opt, &mut scene, &mut metrics)?;
    Ok((scene, metrics))
}

pub fn run(cfg: &RunConfig, data: &TrainingData) -> Result<RunResult> {
    cfg.validate()?;
    data.validate()?;
    let [t1, t2, t3, _] = cfg.boundaries;
    let t_end = cfg.end();
    let loss_cfg = cfg.loss();
    let (cams, imgs) = (&data.cameras, &data.images);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scene = data.scene.compact();
    let n = scene.len();
    let k_target = match (cfg.k_target, cfg.budget_bytes) {
        (Some(k), _) => k.min(n),
        (None, Some(b)) => k_for_budget(cfg, n, scene.sh_degree, b)?,
        (None, None) => n,
    };
    let mut opt = OptimState::new(&scene, cfg.optim);
    let mut metrics = Vec::with_capacity(t_end);
    warmup_stage(cfg, data, &mut rng, &mut opt, &mut scene, &mut metrics)?;

    let vanilla = scene.clone();
    let vanilla_psnr = training_psnr(&scene, None, cams, imgs)?;
    let tau = cfg.floor.resolve(vanilla_psnr);
    let mut graph: DependencyGraph = build_qadg(&scene, cams, cfg.k_views.min(cams.len()), cfg.seed)?;
    let (graph_nodes, graph_order_edges) = (graph.node_count(), graph.order_edges.len());
    let mut bank = cfg.initial_bank()?;
    let initial_bounds = bank_bounds(&bank);
    bank.update_ranges(&scene)?;

    let targets = linear_prune_targets(n, k_target, cfg.prune_events)?;
    let event_iters: Vec<usize> =
        (1..=cfg.prune_events).map(|e| t2 + e * (t3 - t2) / (cfg.prune_events + 1)).collect();
    let sal_cfg = SaliencyConfig {
        k_views: cfg.k_views.min(cams.len()),
        weights: cfg.saliency_weights,
        mode: if cfg.ablation == Ablation::TaylorSaliency { SaliencyMode::Taylor } else { SaliencyMode::RenderAware },
        ..SaliencyConfig::default()
    };
    let mut saliency: Vec<f64> = Vec::new();
    let mut next_event = 0;
    let mut prune_events = Vec::new();
    let mut pruning_aborted = false;
    let mut k_history = vec![(0, n)];
    let (mut psnr_end_joint, mut storage_end_joint) = (f64::NAN, 0);
    let mut psnr_trace = Vec::new();
    // Cool-down keeps the best training-view checkpoint; quantizers and the
    // Gaussian count are frozen there, so storage does not change.
    let mut best: Option<(f64, GaussianScene)> = None;

    for t in t1..t_end {
        let stage = Stage::at(&cfg.boundaries, t);
        if stage == Stage::Projection && cfg.uses_projection() {
            bank.set_upper_bounds(contract_bit_bounds(cfg, &initial_bounds, t)?);
            bank.sync_shared();
            bank.project()?;
        }
        if t == t2 && cfg.uses_projection() {
            bank.set_upper_bounds(final_bit_bounds(cfg, &initial_bounds));
            bank.sync_shared();
            bank.project()?;
        }
        if stage == Stage::Joint && !pruning_aborted && next_event < targets.len() {
            if (t - t2) % cfg.saliency_period == 0 {
                let seed = cfg.seed.wrapping_add(t as u64);
                saliency = compute_saliency(&scene, cams, imgs, &sal_cfg, seed)?.s_fused;
                opt.prune_mask = schedule_prune_mask(&saliency, &scene.alive, targets[next_event].min(scene.len()))?;
            }
            if t == event_iters[next_event] {
                let out = feasibility_check(
                    &scene,
                    &bank,
                    cams,
                    imgs,
                    &saliency,
                    tau,
                    targets[next_event],
                    cfg.relax_factor,
                    cfg.retry_budget,
                )?;
                let mut record = out.record;
                record.iteration = t;
                if record.aborted {
                    pruning_aborted = true;
                    opt.prune_mask = vec![false; scene.len()];
                } else {
                    let keep: Vec<bool> = out.mask.iter().map(|m| !m).collect();
                    let (next, g) = prune_event(&scene, &graph, &mut opt, &out.mask)?;
                    debug_assert_eq!(next, out.scene);
                    saliency = saliency.iter().zip(&keep).filter(|(_, k)| **k).map(|(s, _)| *s).collect();
                    scene = next;
                    graph = g;
                    if scene.len() != k_history.last().map_or(0, |h| h.1) {
                        k_history.push((t, scene.len()));
                    }
                    next_event += 1;
                    if next_event < targets.len() {
                        opt.prune_mask = schedule_prune_mask(&saliency, &scene.alive, targets[next_event].min(scene.len()))?;
                    }
                }
                prune_events.push(record);
            }
        }
        if t == t3 {
            opt.prune_mask = vec![false; scene.len()];
            psnr_end_joint = training_psnr(&scene, Some(&bank), cams, imgs)?;
            storage_end_joint = storage_bytes(scene.len(), scene.sh_degree, &bank);
            best = Some((psnr_end_joint, scene.clone()));
        } else if stage == Stage::Cooldown && (t - t3) % cfg.cooldown_eval_every == 0 {
            keep_best(&mut best, training_psnr(&scene, Some(&bank), cams, imgs)?, &scene);
        }
        if cfg.eval_every > 0 && t % cfg.eval_every == 0 {
            psnr_trace.push((t, training_psnr(&scene, Some(&bank), cams, imgs)?));
        }
        let learn_bits = stage != Stage::Cooldown;
        if learn_bits {
            bank.update_ranges(&scene)?;
        }
        opt.lr_scale = cfg.optim.decay(t, cfg.boundaries[3]);
        let v = rng.random_range(0..cams.len());
        let out = backward_quantized(&scene, &cams[v], &imgs[v], &loss_cfg, &bank)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss(t));
        }
        let quant = learn_bits.then_some((&mut bank, &out.quant_grads));
        opt.masked_step(&mut scene, &out.scene_grads, quant, cfg.uses_projection())?;
        record_row(&mut metrics, t, stage, out.loss, &out.image, &imgs[v], scene.len(), Some(&bank))?;
    }

    if best.is_some() {
        keep_best(&mut best, training_psnr(&scene, Some(&bank), cams, imgs)?, &scene);
    }
    if let Some((_, s)) = best {
        scene = s;
    }
    let psnr_final = training_psnr(&scene, Some(&bank), cams, imgs)?;
    let storage_final = storage_bytes(scene.len(), scene.sh_degree, &bank);
    if t_end == t3 {
        psnr_end_joint = psnr_final;
        storage_end_joint = storage_final;
    }
    let state = ScheduleState {
        stage: Stage::at(&cfg.boundaries, t_end.saturating_sub(1)),
        iteration: t_end,
        initial_count: n,
        k_target,
        tau,
        vanilla_psnr,
        k_history,
        prune_events,
        pruning_aborted,
        psnr_end_joint,
        storage_end_joint,
        psnr_final,
        storage_final,
        converged_bits: bank.bitwidths(),
        grid_bits: bank.grid_bits(),
        graph_nodes,
        graph_order_edges,
        psnr_trace,
    };
    Ok(RunResult { scene, bank, vanilla, state, metrics })
}

fn keep_best(best: &mut Option<(f64, GaussianScene)>, psnr: f64, scene: &GaussianScene) {
    if best.as_ref().is_none_or(|(p, _)| psnr > *p) {
        *best = Some((psnr, scene.clone()));
    }
}

/// Runs the configuration with one component swapped.
pub fn ablation_mode(cfg: &RunConfig, variant: &str, data: &TrainingData) -> Result<RunResult> {
    let mut cfg = cfg.clone();
    cfg.ablation = Ablation::from_name(variant)?;
    run(&cfg, data)
}

/// Uniform post-training quantization with each class's range set to the
/// largest magnitude of its alive values.
pub fn naive_ptq(scene: &GaussianScene, bits: [u32; 6]) -> Result<QuantizerBank> {
    let bounds = std::array::from_fn(|a| BitBounds::new(bits[a], bits[a]));
    let mut bank = QuantizerBank::new(&BitRangePreset { bounds });
    for st in &mut bank.states {
        st.ema_momentum = 0.0;
    }
    bank.update_ranges(scene)?;
    Ok(bank)
}

#[derive(Debug, Clone)]
pub struct SequentialResult {
    pub scene: GaussianScene,
    pub bank: QuantizerBank,
    pub k: usize,
    pub psnr: f64,
    pub storage_bytes: usize,
}

/// Opacity-threshold pruning followed by INT8 post-training quantization.
pub fn sequential_baseline(
    cfg: &RunConfig,
    scene: &GaussianScene,
    cameras: &[Camera],
    images: &[Image],
) -> Result<SequentialResult> {
    let mut pruned = scene.compact();
    for (a, logit) in pruned.alive.iter_mut().zip(&pruned.opacity_logits) {
        *a = render::sigmoid(*logit) >= cfg.opacity_threshold;
    }
    if pruned.alive_count() == 0 {
        return Err(Error::InvalidArgument("opacity threshold removes every gaussian".into()));
    }
    let pruned = pruned.compact();
    let bank = naive_ptq(&pruned, [8; 6])?;
    let psnr = training_psnr(&pruned, Some(&bank), cameras, images)?;
    let storage_bytes = storage_bytes(pruned.len(), pruned.sh_degree, &bank);
    Ok(SequentialResult { k: pruned.len(), scene: pruned, bank, psnr, storage_bytes })
}

/// Largest Gaussian count the joint pipeline may keep without using more
/// payload than the sequential baseline at `k_seq` Gaussians.
pub fn matched_k(cfg: &RunConfig, k_seq: usize, n: usize, sh_degree: usize) -> Result<usize> {
    let seq_bits = 8 * row_dim(sh_degree);
    let budget = (k_seq * seq_bits) as f64 / 8.0;
    k_for_budget(cfg, n, sh_degree, budget)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contraction_endpoints() {
        let cfg = RunConfig { boundaries: [100, 200, 300, 400], ..RunConfig::default() };
        let init = BitRangePreset::COMPRESSIVE.bounds;
        assert_eq!(contract_bit_bounds(&cfg, &init, 100).unwrap(), init.map(|b| b.hi));
        assert_eq!(contract_bit_bounds(&cfg, &init, 150).unwrap()[0], 14);
        assert_eq!(final_bit_bounds(&cfg, &init)[0], 12);
        assert!(contract_bit_bounds(&cfg, &init, 200).is_err());
        assert!(contract_bit_bounds(&cfg, &init, 99).is_err());
    }

    #[test]
    fn compressive_preset_contracts_to_437_bits() {
        let cfg = RunConfig::default();
        let hi = final_bit_bounds(&cfg, &BitRangePreset::COMPRESSIVE.bounds);
        let bits: u32 = AttributeClass::ALL.iter().map(|a| a.dim(3) as u32 * hi[a.index()]).sum();
        assert_eq!(bits, 437);
        assert_eq!(matched_k(&cfg, 437, 10_000, 3).unwrap(), 472);
    }

    #[test]
    fn config_validation() {
        let mut cfg = RunConfig { boundaries: [5, 5, 6, 7], ..RunConfig::default() };
        assert!(cfg.validate().is_err());
        cfg.boundaries = [1, 2, 3, 4];
        cfg.relax_factor = 2.5;
        assert!(cfg.validate().is_err());
        cfg.relax_factor = 1.25;
        assert!(cfg.validate().is_ok());
        assert!(matches!(Ablation::from_name("nope"), Err(Error::UnknownAblation(_))));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig { floor: FloorMode::Absolute { db: 30.0 }, ..RunConfig::default() };
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 4, "ablation": "uniform6"}"#).unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.ablation, Ablation::Uniform6);
    }
}
