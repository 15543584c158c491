//! DeGlow, DeHaze, atmospheric light, recovery; plus the file-level
//! workflows and the command line built on them.

mod config;
mod files;
mod training;

pub mod cli;

use std::time::Instant;

use crate::atmospherics::{estimate_atmospheric_light, recover_radiance, AtmosphericLight};
use crate::error::{dim_err, Result};
use crate::image::{RadianceImage, TransmissionMap};
use crate::networks::{DeGlowModel, DeHazeModel};
use crate::pnm;
use crate::tensor::{Shape, Tensor};

pub use config::{DatasetConfig, InferenceConfig, ModelPaths, PipelineConfig};
pub use files::{
    evaluate_dirs, list_images, read_light, recover_from_dumps, run_dir, run_file, write_light,
    DumpPaths,
};
pub use training::{holdout_split, load_training_set, train_deglow, train_dehaze, TrainingSet};

pub const STAGES: [&str; 4] = ["deglow", "dehaze", "airlight", "recover"];

#[derive(Debug, Clone)]
pub struct Models {
    pub deglow: DeGlowModel,
    pub dehaze: DeHazeModel,
}

impl Models {
    pub fn load(paths: &ModelPaths) -> Result<Self> {
        Ok(Self {
            deglow: DeGlowModel::load(&paths.deglow)?,
            dehaze: DeHazeModel::load(&paths.dehaze)?,
        })
    }

    pub fn save(&self, paths: &ModelPaths) -> Result<()> {
        self.deglow.save(&paths.deglow)?;
        self.dehaze.save(&paths.dehaze)
    }
}

/// Replacements for estimated quantities, for experiments and tests.
#[derive(Debug, Clone, Default)]
pub struct StageHooks {
    pub transmission: Option<TransmissionMap>,
    pub light: Option<AtmosphericLight>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub stage: &'static str,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub output: RadianceImage,
    pub deglowed: RadianceImage,
    pub transmission: TransmissionMap,
    pub light: AtmosphericLight,
    /// One entry per stage, in [`STAGES`] order.
    pub timings: Vec<StageTiming>,
}

impl RunArtifacts {
    pub fn timing_report(&self) -> String {
        self.timings
            .iter()
            .map(|t| format!("{} {:.6}\n", t.stage, t.seconds))
            .collect()
    }
}

/// Applies `f` to `input` in `tile x tile` cores, each evaluated with `halo`
/// extra pixels of context, and stitches the cores. With `halo` at least the
/// receptive radius of `f` this equals `f(input)` up to summation order.
pub fn infer_tiled(
    input: &Tensor,
    tile: usize,
    halo: usize,
    f: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let s = input.shape();
    if tile == 0 {
        return Err(dim_err!("tile size must be >= 1"));
    }
    if tile >= s.h && tile >= s.w {
        return f(input);
    }
    let mut rows = Vec::new();
    for y0 in (0..s.h).step_by(tile) {
        let y1 = (y0 + tile).min(s.h);
        let (ty0, ty1) = (y0.saturating_sub(halo), (y1 + halo).min(s.h));
        let mut row: Vec<Tensor> = Vec::new();
        for x0 in (0..s.w).step_by(tile) {
            let x1 = (x0 + tile).min(s.w);
            let (tx0, tx1) = (x0.saturating_sub(halo), (x1 + halo).min(s.w));
            let out = f(&input.crop(ty0, tx0, ty1 - ty0, tx1 - tx0)?)?;
            row.push(out.crop(y0 - ty0, x0 - tx0, y1 - y0, x1 - x0)?);
        }
        rows.push(row);
    }
    stitch(&rows)
}

fn stitch(rows: &[Vec<Tensor>]) -> Result<Tensor> {
    let first = rows[0][0].shape();
    let h: usize = rows.iter().map(|r| r[0].shape().h).sum();
    let w: usize = rows[0].iter().map(|t| t.shape().w).sum();
    let mut out = Tensor::zeros(Shape::new(first.n, first.c, h, w));
    let mut y0 = 0;
    for row in rows {
        let mut x0 = 0;
        for t in row {
            let ts = t.shape();
            for n in 0..ts.n {
                for c in 0..ts.c {
                    for y in 0..ts.h {
                        for x in 0..ts.w {
                            out.set(n, c, y0 + y, x0 + x, t.at(n, c, y, x));
                        }
                    }
                }
            }
            x0 += ts.w;
        }
        y0 += row[0].shape().h;
    }
    Ok(out)
}

fn timed<T>(
    timings: &mut Vec<StageTiming>,
    stage: &'static str,
    f: impl FnOnce() -> Result<T>,
) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage))?;
    timings.push(StageTiming {
        stage,
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(out)
}

fn run_network(
    input: &Tensor,
    tile: Option<usize>,
    halo: usize,
    f: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    match tile {
        Some(t) => infer_tiled(input, t, halo, f),
        None => f(input),
    }
}

/// `I -> J -> t -> L -> R`.
pub fn run_pipeline(
    input: &RadianceImage,
    models: &Models,
    config: &InferenceConfig,
    hooks: &StageHooks,
) -> Result<RunArtifacts> {
    config.validate()?;
    let mut timings = Vec::with_capacity(4);
    let tau = config.tau.unwrap_or(models.deglow.config.recurrences);

    let deglowed = timed(&mut timings, "deglow", || {
        let halo = DeGlowModel::receptive_radius(tau);
        let j = run_network(&input.to_tensor(), config.tile_size, halo, |x| {
            models.deglow.infer(x, tau)
        })?;
        let mut j = RadianceImage::from_tensor(&j, 0)?;
        j.clamp01();
        Ok(if config.quantize_stages {
            pnm::quantize_ppm16(&j)
        } else {
            j
        })
    })?;

    let transmission = timed(&mut timings, "dehaze", || {
        if let Some(t) = &hooks.transmission {
            if !t.plane().same_size(input.height(), input.width()) {
                return Err(dim_err!(
                    "injected transmission is {}x{}",
                    t.height(),
                    t.width()
                ));
            }
            return Ok(t.clone());
        }
        let halo = DeHazeModel::receptive_radius();
        let t = run_network(&deglowed.to_tensor(), config.tile_size, halo, |x| {
            models.dehaze.infer(x, config.t_min)
        })?;
        let t = TransmissionMap::from_tensor_clamped(&t, 0, config.t_min)?;
        if config.quantize_stages {
            let mut q = pnm::quantize_pgm16(t.plane());
            q.data_mut()
                .iter_mut()
                .for_each(|v| *v = v.max(1.0 / 65535.0));
            TransmissionMap::new(q)
        } else {
            Ok(t)
        }
    })?;

    let light = timed(&mut timings, "airlight", || match hooks.light {
        Some(l) => Ok(l),
        None => estimate_atmospheric_light(&transmission, &deglowed),
    })?;

    let output = timed(&mut timings, "recover", || {
        recover_radiance(&deglowed, &transmission, light, config.t_min)
    })?;

    Ok(RunArtifacts {
        output,
        deglowed,
        transmission,
        light,
        timings,
    })
}
