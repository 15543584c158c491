use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::LossConfig;
use crate::error::{dim_err, Error, Result};
use crate::synthesis::RecordLayers;
use crate::tensor::{
    sgd_step, ArchDescriptor, ModelKind, OptimizerState, ParamGrads, ParamStore, SgdConfig, Tensor,
};

/// One training example: a `1 x 3 x H x W` input and spatially matching targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub targets: Vec<Tensor>,
}

impl Sample {
    /// Hazy input; targets are the glow-free image, summed streaks, and mask.
    pub fn deglow(layers: &RecordLayers) -> Self {
        Self {
            input: layers.hazy.to_tensor(),
            targets: vec![
                layers.haze.to_tensor(),
                layers.streak.to_tensor(),
                layers.mask.to_tensor(),
            ],
        }
    }

    /// Glow-free haze image as input, transmission as target.
    pub fn dehaze(layers: &RecordLayers) -> Self {
        Self {
            input: layers.haze.to_tensor(),
            targets: vec![layers.transmission.to_tensor()],
        }
    }

    pub fn height(&self) -> usize {
        self.input.shape().h
    }

    pub fn width(&self) -> usize {
        self.input.shape().w
    }

    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> Result<Self> {
        Ok(Self {
            input: self.input.crop(y0, x0, size, size)?,
            targets: self
                .targets
                .iter()
                .map(|t| t.crop(y0, x0, size, size))
                .collect::<Result<_>>()?,
        })
    }

    fn center_crop(&self, size: Option<usize>) -> Result<Self> {
        match size {
            Some(s) if s < self.height() || s < self.width() => {
                let s = s.min(self.height()).min(self.width());
                self.crop((self.height() - s) / 2, (self.width() - s) / 2, s)
            }
            _ => Ok(self.clone()),
        }
    }
}

/// A model the training loop can drive.
pub trait Network: Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn arch(&self) -> ArchDescriptor;
    /// Loss of one sample and, when `grads` is set, its parameter gradients.
    fn sample_loss(
        &self,
        sample: &Sample,
        loss: &LossConfig,
        grads: bool,
    ) -> Result<(f64, Option<ParamGrads>)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub batch_size: usize,
    pub max_iterations: usize,
    /// Initial step size; [`default_learning_rate`] of the model kind when unset.
    pub learning_rate: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations without a relative validation improvement above
    /// `plateau_threshold` before the learning rate is divided by 10.
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub validation_every: usize,
    /// Write a checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Train on random square crops of this size.
    pub crop_size: Option<usize>,
    /// Worker threads for per-sample gradients. Results do not depend on it.
    pub threads: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Rescales each batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        Self {
            batch_size: 8,
            max_iterations: 200,
            learning_rate: None,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            plateau_patience: 50,
            plateau_threshold: 0.001,
            validation_every: 10,
            checkpoint_every: 0,
            crop_size: None,
            threads: 1,
            seed: 0,
            loss: LossConfig::default(),
            clip_norm: None,
        }
    }
}

/// DeGlow's residual head sums three recurrences and diverges with momentum
/// 0.9 at 0.01; the single-pass DeHaze head is stable there.
pub fn default_learning_rate(kind: ModelKind) -> f64 {
    match kind {
        ModelKind::DeGlow => 0.001,
        ModelKind::DeHaze => 0.01,
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        let lr = self.learning_rate.unwrap_or(0.0);
        if !(lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rate, momentum and weight decay must be >= 0".into(),
            ));
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        if self.crop_size == Some(0) {
            return Err(Error::Config("crop_size must be >= 1".into()));
        }
        self.loss.validate()
    }

    pub fn sgd(&self, kind: ModelKind) -> SgdConfig {
        SgdConfig {
            learning_rate: self
                .learning_rate
                .unwrap_or_else(|| default_learning_rate(kind)),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Divides the learning rate by 10 once the watched loss has not improved by
/// more than `threshold` (relative) for `patience` iterations.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    patience: usize,
    threshold: f64,
    best: f64,
    since_best: usize,
}

impl PlateauSchedule {
    pub fn new(patience: usize, threshold: f64) -> Self {
        Self {
            patience,
            threshold,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Records `loss` observed `elapsed` iterations after the previous one.
    /// Returns true when the learning rate should drop.
    pub fn observe(&mut self, elapsed: usize, loss: f64) -> bool {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.since_best = 0;
            return false;
        }
        self.since_best += elapsed;
        if self.patience > 0 && self.since_best >= self.patience {
            self.since_best = 0;
            self.best = self.best.min(loss);
            return true;
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossLogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub validation: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub log: Vec<LossLogEntry>,
    pub checkpoints: Vec<PathBuf>,
    /// Iterations after which the learning rate was divided by 10.
    pub lr_drops: Vec<usize>,
    pub final_learning_rate: f64,
}

impl TrainReport {
    /// Trailing moving average of the batch loss over `window` iterations.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let window = window.max(1);
        let losses: Vec<f64> = self.log.iter().map(|e| e.loss).collect();
        (0..losses.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window);
                losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    /// Mean loss of the first and of the last `window` iterations.
    pub fn initial_and_final(&self, window: usize) -> (f64, f64) {
        let n = self.log.len();
        let w = window.clamp(1, n.max(1));
        let mean =
            |s: &[LossLogEntry]| s.iter().map(|e| e.loss).sum::<f64>() / s.len().max(1) as f64;
        (
            mean(&self.log[..w.min(n)]),
            mean(&self.log[n.saturating_sub(w)..]),
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.log {
            let _ = write!(
                out,
                "iter={} loss={} lr={}",
                e.iteration, e.loss, e.learning_rate
            );
            if let Some(v) = e.validation {
                let _ = write!(out, " val={v}");
            }
            out.push('\n');
        }
        out
    }
}

fn kind_name(arch: &ArchDescriptor) -> &'static str {
    match arch.kind {
        ModelKind::DeGlow => "deglow",
        ModelKind::DeHaze => "dehaze",
    }
}

fn batch_gradient<M: Network>(
    model: &M,
    batch: &[Sample],
    loss: &LossConfig,
    pool: &rayon::ThreadPool,
) -> Result<(f64, ParamGrads)> {
    let parts: Vec<(f64, Option<ParamGrads>)> = pool.install(|| {
        batch
            .par_iter()
            .map(|s| model.sample_loss(s, loss, true))
            .collect::<Result<_>>()
    })?;
    let scale = 1.0 / batch.len() as f32;
    let mut total = 0.0;
    let mut acc = ParamGrads::zeros(model.store());
    // fixed reduction order keeps results independent of the thread count
    for (l, g) in parts {
        total += l;
        let g = g.expect("gradients requested");
        for (a, b) in acc.iter_mut().zip(g.iter()) {
            a.data_mut()
                .iter_mut()
                .zip(b.data())
                .for_each(|(x, y)| *x += y);
        }
    }
    for t in acc.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total / batch.len() as f64, acc))
}

/// Scales `grads` down so their global L2 norm is at most `max`; returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut ParamGrads, max: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = (max / norm) as f32;
        grads
            .iter_mut()
            .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}

fn mean_loss<M: Network>(
    model: &M,
    samples: &[Sample],
    loss: &LossConfig,
    pool: &rayon::ThreadPool,
) -> Result<f64> {
    let losses: Vec<f64> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| model.sample_loss(s, loss, false).map(|r| r.0))
            .collect::<Result<_>>()
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Momentum SGD over random (optionally cropped) mini-batches with the
/// plateau learning-rate rule. Writes `<kind>-<iter>.nckp` checkpoints, a
/// final `<kind>.nckp`, and `<kind>.loss.log` into `out_dir` when given.
///
/// With `validation` empty, a fixed center-cropped subset of the training
/// samples serves as the validation set.
pub fn train<M: Network>(
    model: &mut M,
    samples: &[Sample],
    validation: &[Sample],
    schedule: &TrainSchedule,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    schedule.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for s in samples {
        if s.input.shape().n != 1 {
            return Err(dim_err!(
                "samples must hold one image, got {}",
                s.input.shape()
            ));
        }
        if let Some(c) = schedule.crop_size {
            if c > s.height() || c > s.width() {
                return Err(dim_err!(
                    "crop {c} exceeds sample {}x{}",
                    s.height(),
                    s.width()
                ));
            }
        }
    }
    let validation: Vec<Sample> = if validation.is_empty() {
        samples
            .iter()
            .take(4)
            .map(|s| s.center_crop(schedule.crop_size))
            .collect::<Result<_>>()?
    } else {
        validation.to_vec()
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(schedule.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let arch = model.arch();
    let name = kind_name(&arch);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut state = OptimizerState::new(schedule.sgd(arch.kind), model.store())?;
    let mut plateau = PlateauSchedule::new(schedule.plateau_patience, schedule.plateau_threshold);
    let mut report = TrainReport::default();
    let mut since_validation = 0;

    for it in 1..=schedule.max_iterations {
        let batch: Vec<Sample> = (0..schedule.batch_size)
            .map(|_| {
                let s = &samples[rng.random_range(0..samples.len())];
                match schedule.crop_size {
                    Some(c) => {
                        let y = rng.random_range(0..=s.height() - c);
                        let x = rng.random_range(0..=s.width() - c);
                        s.crop(y, x, c)
                    }
                    None => Ok(s.clone()),
                }
            })
            .collect::<Result<_>>()?;
        let (loss, mut grads) = batch_gradient(model, &batch, &schedule.loss, &pool)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Divergence { step: it, loss });
        }
        if let Some(c) = schedule.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        let lr = state.config.learning_rate;
        sgd_step(model.store_mut(), &grads, &mut state)?;
        since_validation += 1;

        let mut val = None;
        if schedule.validation_every > 0 && it % schedule.validation_every == 0 {
            let v = mean_loss(model, &validation, &schedule.loss, &pool)?;
            if !v.is_finite() {
                return Err(Error::Divergence { step: it, loss: v });
            }
            if plateau.observe(since_validation, v) {
                state.config.learning_rate /= 10.0;
                report.lr_drops.push(it);
            }
            since_validation = 0;
            val = Some(v);
        }
        report.log.push(LossLogEntry {
            iteration: it,
            loss,
            learning_rate: lr,
            validation: val,
        });

        if let Some(dir) = out_dir {
            if schedule.checkpoint_every > 0 && it % schedule.checkpoint_every == 0 {
                let path = dir.join(format!("{name}-{it:06}.nckp"));
                crate::tensor::Checkpoint::from_store(arch, model.store()).save(&path)?;
                report.checkpoints.push(path);
            }
        }
    }
    report.final_learning_rate = state.config.learning_rate;
    if let Some(dir) = out_dir {
        let path = dir.join(format!("{name}.nckp"));
        crate::tensor::Checkpoint::from_store(arch, model.store()).save(&path)?;
        report.checkpoints.push(path);
        let log = dir.join(format!("{name}.loss.log"));
        std::fs::write(&log, report.to_text()).map_err(|e| Error::io(log, e))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{DeGlowModel, DeHazeModel, NetworkConfig};
    use crate::synthesis::{generate_records, PairSource, SynthesisConfig};

    fn records(n: usize, size: usize) -> Vec<RecordLayers> {
        let cfg = SynthesisConfig {
            beta_samples_per_image: 1,
            q_samples_per_image: 1,
            ..SynthesisConfig::desk(size, 5)
        };
        let pairs = PairSource::Procedural { count: n }.load(&cfg).unwrap();
        generate_records(&pairs, &cfg)
            .unwrap()
            .iter()
            .map(|g| g.layers())
            .collect()
    }

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            features: 4,
            recurrences: 2,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn flat_validation_curve_drops_lr_exactly_tenfold() {
        let mut p = PlateauSchedule::new(50, 0.001);
        let mut lr: f64 = 0.01;
        let mut drops = Vec::new();
        for it in (10..=120).step_by(10) {
            if p.observe(10, 1.0) {
                lr /= 10.0;
                drops.push(it);
            }
        }
        // first observation sets the baseline
        assert_eq!(drops, vec![60, 110]);
        assert!((lr - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn improving_curve_never_drops() {
        let mut p = PlateauSchedule::new(20, 0.001);
        assert!((0..100).all(|i| !p.observe(1, 1.0 / (1.0 + i as f64))));
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let data: Vec<Sample> = records(2, 16).iter().map(Sample::deglow).collect();
        let mut m = DeGlowModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = m.store.clone();
        let sched = TrainSchedule {
            learning_rate: Some(0.0),
            max_iterations: 5,
            batch_size: 2,
            validation_every: 2,
            ..TrainSchedule::default()
        };
        let r = train(&mut m, &data, &[], &sched, None).unwrap();
        assert_eq!(m.store, before);
        assert_eq!(r.log.len(), 5);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let data: Vec<Sample> = records(3, 16).iter().map(Sample::dehaze).collect();
        let run = |threads| {
            let mut m = DeHazeModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let sched = TrainSchedule {
                max_iterations: 4,
                batch_size: 3,
                crop_size: Some(12),
                threads,
                ..TrainSchedule::default()
            };
            train(&mut m, &data, &[], &sched, None).unwrap();
            m.store
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn divergence_names_the_step() {
        let data: Vec<Sample> = records(1, 16).iter().map(Sample::dehaze).collect();
        let mut m = DeHazeModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let sched = TrainSchedule {
            learning_rate: Some(1e30),
            max_iterations: 50,
            batch_size: 1,
            ..TrainSchedule::default()
        };
        match train(&mut m, &data, &[], &sched, None) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn writes_checkpoint_trail_and_log() {
        let data: Vec<Sample> = records(1, 16).iter().map(Sample::dehaze).collect();
        let mut m = DeHazeModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let sched = TrainSchedule {
            max_iterations: 4,
            batch_size: 1,
            checkpoint_every: 2,
            ..TrainSchedule::default()
        };
        let r = train(&mut m, &data, &[], &sched, Some(dir.path())).unwrap();
        let names: Vec<String> = r
            .checkpoints
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            names,
            ["dehaze-000002.nckp", "dehaze-000004.nckp", "dehaze.nckp"]
        );
        let log = std::fs::read_to_string(dir.path().join("dehaze.loss.log")).unwrap();
        assert_eq!(log.lines().count(), 4);
        assert_eq!(DeHazeModel::load(&r.checkpoints[2]).unwrap().store, m.store);
    }

    #[test]
    fn smoothing_is_a_trailing_mean() {
        let r = TrainReport {
            log: [4.0, 2.0, 6.0]
                .iter()
                .enumerate()
                .map(|(i, &l)| LossLogEntry {
                    iteration: i + 1,
                    loss: l,
                    learning_rate: 0.1,
                    validation: None,
                })
                .collect(),
            ..TrainReport::default()
        };
        assert_eq!(r.smoothed(2), vec![4.0, 3.0, 4.0]);
        assert_eq!(r.initial_and_final(1), (4.0, 6.0));
    }
}
