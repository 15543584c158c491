//! Central finite-difference checks of every differentiable operation and of
//! the two model losses.
//!
//! Each check writes a scalar function once against [`Graph`], takes its
//! 32-bit analytic gradients from a [`Tape`], and compares them against
//! `(f(x + h) - f(x - h)) / 2h` evaluated by the 64-bit [`Wide`] executor at
//! a random subset of coordinates of every parameter and input tensor. The
//! error of one coordinate is
//!
//! ```text
//! |analytic - numeric| / max(|analytic|, |numeric|, 0.01 * max_abs(analytic over the tensor))
//! ```
//!
//! so coordinates whose true gradient is orders of magnitude below the rest
//! of their tensor are judged against the tensor's scale.
//!
//! A coordinate whose `+h` and `-h` evaluations disagree on the sign of any
//! ReLU input straddles a kink, where the central difference does not
//! estimate the derivative; it is counted as skipped and another one is
//! drawn.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::networks::{
    deglow_loss, deglow_step, deglow_unroll, dehaze_forward, dehaze_loss, DeGlowModel,
    DeGlowTargets, DeHazeModel, LossConfig, NetworkConfig,
};
use crate::tensor::{Conv, Graph, ParamId, ParamStore, Shape, Tape, Tensor, Var, WeightInit, Wide};

pub const GRADCHECK_STEP: f64 = 1e-3;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
/// Coordinates probed per tensor.
pub const GRADCHECK_SAMPLES: usize = 24;
const MAX_DRAWS_PER_SAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates dropped because a ReLU changed sign within the step.
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.entries.iter().all(|e| e.max_rel_error <= tolerance)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:<28} max_rel_error={:.3e} coords={} kink_skips={}",
                e.name, e.max_rel_error, e.checked, e.skipped
            );
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(0.01 * scale);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// A scalar function of some input tensors and the parameters of a store,
/// written once against [`Graph`].
pub trait Objective {
    fn build<G: Graph>(&self, g: &mut G, inputs: &[G::Var]) -> Result<G::Var>;
}

/// Where the numeric side perturbs.
#[derive(Clone, Copy)]
enum Coord {
    Param(ParamId, usize),
    Input(usize, usize),
}

fn evaluate_wide<O: Objective>(
    store: &ParamStore,
    inputs: &[Tensor],
    objective: &O,
    at: Coord,
    delta: f64,
) -> Result<(f64, Vec<bool>)> {
    let mut g = match at {
        Coord::Param(pid, i) => Wide::new(store).with_offset(pid, i, delta),
        Coord::Input(..) => Wide::new(store),
    };
    let mut vars = Vec::with_capacity(inputs.len());
    for (k, t) in inputs.iter().enumerate() {
        let mut data: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
        if let Coord::Input(ki, i) = at {
            if ki == k {
                data[i] += delta;
            }
        }
        vars.push(g.input_wide(t.shape(), data)?);
    }
    let l = objective.build(&mut g, &vars)?;
    Ok((g.scalar(&l), g.relu_signs().to_vec()))
}

/// Compares the reverse-mode gradients of `objective` with respect to every
/// parameter in `store` and every tensor in `inputs` against central
/// differences evaluated by the 64-bit executor.
pub fn check_function<O: Objective>(
    name: &str,
    store: &ParamStore,
    inputs: &[Tensor],
    objective: &O,
    rng: &mut ChaCha8Rng,
) -> Result<GradcheckEntry> {
    let (pgrads, ngrads, input_vars) = {
        let mut g = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let l = objective.build(&mut g, &vars)?;
        let (pg, ng) = g.backward(l)?;
        (pg, ng, vars)
    };
    let h = GRADCHECK_STEP;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    // Probes up to GRADCHECK_SAMPLES coordinates of one tensor whose +h and
    // -h evaluations share every ReLU sign.
    let mut probe_tensor = |analytic: &Tensor, at: &dyn Fn(usize) -> Coord| -> Result<()> {
        let len = analytic.len();
        let order: Vec<usize> = if len <= GRADCHECK_SAMPLES {
            (0..len).collect()
        } else {
            (0..GRADCHECK_SAMPLES * MAX_DRAWS_PER_SAMPLE)
                .map(|_| rng.random_range(0..len))
                .collect()
        };
        let scale = analytic.data().iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
        let mut taken = 0;
        for idx in order {
            if taken == GRADCHECK_SAMPLES {
                break;
            }
            let (plus, plus_signs) = evaluate_wide(store, inputs, objective, at(idx), h)?;
            let (minus, minus_signs) = evaluate_wide(store, inputs, objective, at(idx), -h)?;
            if plus_signs != minus_signs {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[idx] as f64, numeric, scale));
            taken += 1;
        }
        checked += taken;
        Ok(())
    };

    for pid in store.ids() {
        probe_tensor(pgrads.get(pid), &|i| Coord::Param(pid, i))?;
    }
    for (k, var) in input_vars.iter().enumerate() {
        let analytic = ngrads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        probe_tensor(&analytic, &|i| Coord::Input(k, i))?;
    }
    Ok(GradcheckEntry {
        name: name.to_string(),
        max_rel_error: worst,
        checked,
        skipped,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

/// Values with `0.1 <= |v| < 1`, away from the ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.random_range(0.1f32..1.0);
        if rng.random() {
            m
        } else {
            -m
        }
    })
}

fn binary(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::from_fn(
        shape,
        |_, _, _, _| if rng.random_bool(0.3) { 1.0 } else { 0.0 },
    )
}

/// Zero biases leave whole regions of pre-activations exactly on the ReLU
/// kink.
fn jitter_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        if p.name.ends_with(".bias") {
            let s = p.value.shape();
            p.value = uniform(rng, s, -0.1, 0.1);
        }
    }
}

fn gradcheck_config() -> NetworkConfig {
    NetworkConfig {
        features: 4,
        recurrences: 2,
        tied: true,
        harden_glow: false,
        init: WeightInit::Gaussian { std: 0.2 },
    }
}

enum Case<'a> {
    Conv {
        conv: Conv,
        target: Tensor,
    },
    Relu {
        target: Tensor,
    },
    Concat {
        target: Tensor,
    },
    GlowMix {
        target: Tensor,
    },
    GlowBce {
        mask: Tensor,
    },
    DeGlowStep {
        model: &'a DeGlowModel,
        targets: &'a DeGlowTargets,
    },
    DeGlowLoss {
        model: &'a DeGlowModel,
        targets: &'a DeGlowTargets,
        loss: LossConfig,
    },
    DeHaze {
        model: &'a DeHazeModel,
        target: Tensor,
    },
}

impl Objective for Case<'_> {
    fn build<G: Graph>(&self, g: &mut G, v: &[G::Var]) -> Result<G::Var> {
        match self {
            Case::Conv { conv, target } => {
                let y = g.conv(&v[0], *conv)?;
                g.mse(&y, target)
            }
            Case::Relu { target } => {
                let y = g.relu(&v[0]);
                g.mse(&y, target)
            }
            Case::Concat { target } => {
                let y = g.concat(&[&v[0], &v[1]])?;
                g.mse(&y, target)
            }
            Case::GlowMix { target } => {
                let p = g.glow_prob(&v[0])?;
                let q = g.sigmoid(&v[1]);
                let m = g.mul_mask(&p, &q)?;
                let s = g.sub(&v[2], &m)?;
                let y = g.add(&s, &q)?;
                g.mse(&y, target)
            }
            Case::GlowBce { mask } => g.logit_bce(&v[0], mask),
            Case::DeGlowStep { model, targets } => {
                let s = deglow_step(g, model, 0, &v[0], None)?;
                let j = g.sub(&v[0], &s.epsilon)?;
                let a = g.mse(&j, &targets.haze)?;
                let b = g.mse(&s.streak, &targets.streak)?;
                let c = g.logit_bce(&s.glow_logits, &targets.mask)?;
                g.weighted_sum(&[(&a, 1.0), (&b, 1.0), (&c, 1.0)])
            }
            Case::DeGlowLoss {
                model,
                targets,
                loss,
            } => {
                let trace = deglow_unroll(g, model, &v[0], model.config.recurrences)?;
                deglow_loss(g, &trace, targets, loss)
            }
            Case::DeHaze { model, target } => {
                let t = dehaze_forward(g, model, &v[0])?;
                dehaze_loss(g, &t, target)
            }
        }
    }
}

/// Runs every check. Deterministic for a given seed.
pub fn run_suite(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();

    for d in [1, 2, 3] {
        let mut store = ParamStore::new();
        let conv = store.add_conv("c", 4, 4, 3, d, 0.3, &mut rng);
        *store.get_mut(conv.bias) = uniform(&mut rng, Shape::new(1, 4, 1, 1), -0.5, 0.5);
        let x = uniform(&mut rng, Shape::new(2, 4, 16, 16), -1.0, 1.0);
        let target = uniform(&mut rng, Shape::new(2, 4, 16, 16), -1.0, 1.0);
        let case = Case::Conv { conv, target };
        entries.push(check_function(
            &format!("dilated_conv2d df={d}"),
            &store,
            &[x],
            &case,
            &mut rng,
        )?);
    }

    let empty = ParamStore::new();
    let shape = Shape::new(2, 4, 16, 16);
    let case = Case::Relu {
        target: uniform(&mut rng, shape, -1.0, 1.0),
    };
    let x = off_kink(&mut rng, shape);
    entries.push(check_function("relu", &empty, &[x], &case, &mut rng)?);

    let case = Case::Concat {
        target: uniform(&mut rng, Shape::new(1, 5, 6, 6), -1.0, 1.0),
    };
    let a = uniform(&mut rng, Shape::new(1, 2, 6, 6), -1.0, 1.0);
    let b = uniform(&mut rng, Shape::new(1, 3, 6, 6), -1.0, 1.0);
    entries.push(check_function(
        "concat_channels",
        &empty,
        &[a, b],
        &case,
        &mut rng,
    )?);

    let s3 = Shape::new(1, 3, 6, 6);
    let case = Case::GlowMix {
        target: uniform(&mut rng, s3, 0.0, 1.0),
    };
    let inputs = [
        uniform(&mut rng, Shape::new(1, 2, 6, 6), -2.0, 2.0),
        uniform(&mut rng, s3, -2.0, 2.0),
        uniform(&mut rng, s3, -1.0, 1.0),
    ];
    entries.push(check_function(
        "glow_prob/sigmoid/mask",
        &empty,
        &inputs,
        &case,
        &mut rng,
    )?);

    let case = Case::GlowBce {
        mask: binary(&mut rng, Shape::new(2, 1, 6, 6)),
    };
    let logits = uniform(&mut rng, Shape::new(2, 2, 6, 6), -3.0, 3.0);
    entries.push(check_function(
        "glow_bce",
        &empty,
        &[logits],
        &case,
        &mut rng,
    )?);

    let cfg = gradcheck_config();
    let img = Shape::new(1, 3, 8, 8);
    let targets = DeGlowTargets {
        haze: uniform(&mut rng, img, 0.0, 1.0),
        streak: uniform(&mut rng, img, 0.0, 0.5),
        mask: binary(&mut rng, Shape::new(1, 1, 8, 8)),
    };
    let mut model = DeGlowModel::new(cfg, &mut rng)?;
    jitter_biases(&mut model.store, &mut rng);
    let x = uniform(&mut rng, img, 0.0, 1.0);
    let case = Case::DeGlowStep {
        model: &model,
        targets: &targets,
    };
    entries.push(check_function(
        "deglow_step 1x3x8x8",
        &model.store,
        std::slice::from_ref(&x),
        &case,
        &mut rng,
    )?);
    let case = Case::DeGlowLoss {
        model: &model,
        targets: &targets,
        loss: LossConfig::default(),
    };
    entries.push(check_function(
        "deglow_loss",
        &model.store,
        std::slice::from_ref(&x),
        &case,
        &mut rng,
    )?);

    let mut dehaze = DeHazeModel::new(cfg, &mut rng)?;
    jitter_biases(&mut dehaze.store, &mut rng);
    let case = Case::DeHaze {
        model: &dehaze,
        target: uniform(&mut rng, Shape::new(1, 1, 8, 8), 0.1, 1.0),
    };
    entries.push(check_function(
        "dehaze_loss",
        &dehaze.store,
        &[x],
        &case,
        &mut rng,
    )?);
    Ok(GradcheckReport { entries })
}
