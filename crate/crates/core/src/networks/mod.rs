//! The contextual dilated block, the recurrent DeGlow model, the DeHaze
//! transmission estimator, their losses, and the training loop.

mod train;

pub use train::{
    default_learning_rate, train, LossLogEntry, Network, PlateauSchedule, Sample, TrainReport,
    TrainSchedule,
};

use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    ArchDescriptor, Checkpoint, Conv, Eval, Graph, ModelKind, ParamGrads, ParamStore, Tape, Tensor,
    WeightInit,
};

/// Dilations of the three context paths.
pub const PATH_DILATIONS: [usize; 3] = [1, 2, 3];
/// Convolutions per path.
pub const PATH_DEPTH: usize = 3;
/// Farthest input pixel, in pixels along one axis, read by an output of
/// [`ContextualDilatedBlock::forward`]: two entry convs, the widest path, fusion.
pub const BLOCK_RADIUS: usize = 2 + PATH_DEPTH * PATH_DILATIONS[2] + 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub features: usize,
    pub recurrences: usize,
    /// One parameter set reused by every recurrence.
    pub tied: bool,
    /// Feed a thresholded glow map, instead of the probability, to the
    /// streak head.
    pub harden_glow: bool,
    pub init: WeightInit,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            features: 16,
            recurrences: 3,
            tied: true,
            harden_glow: false,
            init: WeightInit::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.features == 0 {
            return Err(Error::Config("features must be >= 1".into()));
        }
        if self.recurrences == 0 {
            return Err(Error::Config("recurrences must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    dilation: usize,
    head: bool,
    init: WeightInit,
    rng: &mut R,
) -> Conv {
    let std = init.std_for(cin * kernel * kernel, head);
    store.add_conv(name, cin, cout, kernel, dilation, std, rng)
}

/// Entry convolutions, three dilated paths, sum, fusion convolution.
#[derive(Debug, Clone)]
pub struct ContextualDilatedBlock {
    entry: [Conv; 2],
    paths: [[Conv; PATH_DEPTH]; 3],
    fusion: Conv,
}

impl ContextualDilatedBlock {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        features: usize,
        init: WeightInit,
        rng: &mut R,
    ) -> Self {
        let f = features;
        let entry = [
            conv(
                store,
                &format!("{prefix}.entry0"),
                in_channels,
                f,
                3,
                1,
                false,
                init,
                rng,
            ),
            conv(
                store,
                &format!("{prefix}.entry1"),
                f,
                f,
                3,
                1,
                false,
                init,
                rng,
            ),
        ];
        let paths = PATH_DILATIONS.map(|d| {
            std::array::from_fn(|i| {
                conv(
                    store,
                    &format!("{prefix}.path{d}.conv{i}"),
                    f,
                    f,
                    3,
                    d,
                    false,
                    init,
                    rng,
                )
            })
        });
        let fusion = conv(
            store,
            &format!("{prefix}.fusion"),
            f,
            f,
            3,
            1,
            false,
            init,
            rng,
        );
        Self {
            entry,
            paths,
            fusion,
        }
    }

    /// Aggregated features `X`. `feedback` is added to the entry output.
    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        x: &G::Var,
        feedback: Option<&G::Var>,
    ) -> Result<G::Var> {
        let mut h = x.clone();
        for c in self.entry {
            h = g.conv(&h, c)?;
            h = g.relu(&h);
        }
        if let Some(fb) = feedback {
            h = g.add(&h, fb)?;
        }
        let mut sum: Option<G::Var> = None;
        for path in &self.paths {
            let mut p = h.clone();
            for &c in path {
                p = g.conv(&p, c)?;
                p = g.relu(&p);
            }
            sum = Some(match sum {
                None => p,
                Some(s) => g.add(&s, &p)?,
            });
        }
        let x = g.conv(&sum.expect("three paths"), self.fusion)?;
        Ok(g.relu(&x))
    }
}

fn build_store<R: Rng + ?Sized, T>(
    rng: &mut R,
    f: impl FnOnce(&mut ParamStore, &mut R) -> T,
) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let t = f(&mut store, rng);
    (store, t)
}

fn check_arch(ckpt: &Checkpoint, kind: ModelKind) -> Result<()> {
    if ckpt.arch.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind:?} checkpoint, found {:?}",
            ckpt.arch.kind
        )));
    }
    if ckpt.arch.features == 0 || ckpt.arch.recurrences == 0 {
        return Err(Error::Checkpoint("zero-sized architecture".into()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct DeGlowParams {
    block: ContextualDilatedBlock,
    feedback: Conv,
    head_glow: Conv,
    head_streak: [Conv; 2],
    head_residual: Conv,
}

impl DeGlowParams {
    fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        f: usize,
        init: WeightInit,
        rng: &mut R,
    ) -> Self {
        Self {
            block: ContextualDilatedBlock::register(
                store,
                &format!("{prefix}.block"),
                3,
                f,
                init,
                rng,
            ),
            feedback: conv(
                store,
                &format!("{prefix}.feedback"),
                f,
                f,
                1,
                1,
                true,
                init,
                rng,
            ),
            head_glow: conv(
                store,
                &format!("{prefix}.head_glow"),
                f,
                2,
                3,
                1,
                true,
                init,
                rng,
            ),
            head_streak: [
                conv(
                    store,
                    &format!("{prefix}.head_streak0"),
                    f + 1,
                    f,
                    3,
                    1,
                    false,
                    init,
                    rng,
                ),
                conv(
                    store,
                    &format!("{prefix}.head_streak1"),
                    f,
                    3,
                    3,
                    1,
                    true,
                    init,
                    rng,
                ),
            ],
            head_residual: conv(
                store,
                &format!("{prefix}.head_residual"),
                f + 7,
                3,
                3,
                1,
                true,
                init,
                rng,
            ),
        }
    }
}

/// Recurrent glow remover: each step predicts a glow map, streaks, and a
/// residual that is subtracted from its input.
#[derive(Debug, Clone)]
pub struct DeGlowModel {
    pub config: NetworkConfig,
    pub store: ParamStore,
    sets: Vec<DeGlowParams>,
}

impl DeGlowModel {
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let count = if config.tied { 1 } else { config.recurrences };
        let (store, sets) = build_store(rng, |store, rng| {
            (0..count)
                .map(|r| {
                    DeGlowParams::register(
                        store,
                        &format!("deglow.r{r}"),
                        config.features,
                        config.init,
                        rng,
                    )
                })
                .collect()
        });
        Ok(Self {
            config,
            store,
            sets,
        })
    }

    /// Every weight and bias zero: the identity on its input.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::new(config, &mut rng)?;
        m.store.zero_all();
        Ok(m)
    }

    fn params_for(&self, step: usize) -> Result<&DeGlowParams> {
        if self.config.tied {
            Ok(&self.sets[0])
        } else {
            self.sets.get(step).ok_or_else(|| {
                Error::Parameter(format!(
                    "untied model has {} recurrences, step {step} requested",
                    self.sets.len()
                ))
            })
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.arch(), &self.store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        check_arch(ckpt, ModelKind::DeGlow)?;
        let config = NetworkConfig {
            features: ckpt.arch.features as usize,
            recurrences: ckpt.arch.recurrences as usize,
            tied: ckpt.arch.tied,
            ..NetworkConfig::default()
        };
        let mut m = Self::zeros(config)?;
        ckpt.load_into(&mut m.store)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Reach of the output after `tau` recurrences. Each step adds the block,
    /// the glow head, two streak convs and the residual head.
    pub fn receptive_radius(tau: usize) -> usize {
        tau * (BLOCK_RADIUS + 4)
    }

    /// Removes glow from a `N x 3 x H x W` batch with `tau` recurrences.
    pub fn infer(&self, input: &Tensor, tau: usize) -> Result<Tensor> {
        let mut g = Eval::new(&self.store);
        let x = g.input(input.clone());
        let mut trace = deglow_unroll(&mut g, self, &x, tau)?;
        let out = trace.outputs.pop().expect("tau >= 1");
        drop(trace);
        Ok(Eval::take(out))
    }
}

impl Network for DeGlowModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn arch(&self) -> ArchDescriptor {
        ArchDescriptor {
            kind: ModelKind::DeGlow,
            features: self.config.features as u32,
            recurrences: self.config.recurrences as u32,
            tied: self.config.tied,
        }
    }

    fn sample_loss(
        &self,
        sample: &Sample,
        loss: &LossConfig,
        grads: bool,
    ) -> Result<(f64, Option<ParamGrads>)> {
        let targets = DeGlowTargets::from_sample(sample)?;
        let mut g = Tape::new(&self.store);
        let x = g.input(sample.input.clone());
        let trace = deglow_unroll(&mut g, self, &x, self.config.recurrences)?;
        let l = deglow_loss(&mut g, &trace, &targets, loss)?;
        let value = g.scalar(&l);
        let pg = if grads { Some(g.backward(l)?.0) } else { None };
        Ok((value, pg))
    }
}

/// Outputs of one recurrence.
#[derive(Debug, Clone)]
pub struct DeGlowStep<V> {
    /// Aggregated block features, fed back into the next recurrence.
    pub features: V,
    pub glow_logits: V,
    /// Glow probability `G_t`, one channel.
    pub glow: V,
    /// Streak estimate `S_t`, nonnegative.
    pub streak: V,
    /// Residual `eps_t`.
    pub epsilon: V,
}

/// One recurrence: `[eps_t, G_t, S_t] = f(I_t)`.
pub fn deglow_step<G: Graph>(
    g: &mut G,
    model: &DeGlowModel,
    step: usize,
    input: &G::Var,
    prev_features: Option<&G::Var>,
) -> Result<DeGlowStep<G::Var>> {
    let s = g.shape(input);
    if s.c != 3 {
        return Err(crate::error::dim_err!(
            "deglow input must have 3 channels, got {s}"
        ));
    }
    let p = model.params_for(step)?;
    let feedback = match prev_features {
        Some(f) => Some(g.conv(f, p.feedback)?),
        None => None,
    };
    let features = p.block.forward(g, input, feedback.as_ref())?;
    let glow_logits = g.conv(&features, p.head_glow)?;
    let glow = g.glow_prob(&glow_logits)?;
    let glow_in = if model.config.harden_glow {
        g.harden(&glow)
    } else {
        glow.clone()
    };
    let h = g.concat(&[&features, &glow_in])?;
    let h = g.conv(&h, p.head_streak[0])?;
    let h = g.relu(&h);
    let h = g.conv(&h, p.head_streak[1])?;
    let streak = g.relu(&h);
    let glow_streak = g.mul_mask(&glow, &streak)?;
    let deglowed = g.sub(input, &glow_streak)?;
    let h = g.concat(&[&features, &glow, &streak, &deglowed])?;
    let epsilon = g.conv(&h, p.head_residual)?;
    Ok(DeGlowStep {
        features,
        glow_logits,
        glow,
        streak,
        epsilon,
    })
}

#[derive(Debug, Clone)]
pub struct DeGlowTrace<V> {
    pub steps: Vec<DeGlowStep<V>>,
    /// `J_t` for every step; the last entry is `J_tau`.
    pub outputs: Vec<V>,
}

/// `J_t = I_t - eps_t`, `I_{t+1} = J_t`, for `tau` steps.
pub fn deglow_unroll<G: Graph>(
    g: &mut G,
    model: &DeGlowModel,
    input: &G::Var,
    tau: usize,
) -> Result<DeGlowTrace<G::Var>> {
    if tau == 0 {
        return Err(Error::Parameter("tau must be >= 1".into()));
    }
    let mut steps: Vec<DeGlowStep<G::Var>> = Vec::with_capacity(tau);
    let mut outputs = Vec::with_capacity(tau);
    let mut current = input.clone();
    for t in 0..tau {
        let step = deglow_step(g, model, t, &current, steps.last().map(|s| &s.features))?;
        current = g.sub(&current, &step.epsilon)?;
        outputs.push(current.clone());
        steps.push(step);
    }
    Ok(DeGlowTrace { steps, outputs })
}

/// Ground-truth layers for the DeGlow loss.
#[derive(Debug, Clone)]
pub struct DeGlowTargets {
    /// Glow-free haze image `J*`.
    pub haze: Tensor,
    /// Summed streaks `S*`.
    pub streak: Tensor,
    /// Binary glow region `G*`.
    pub mask: Tensor,
}

impl DeGlowTargets {
    pub fn from_sample(sample: &Sample) -> Result<Self> {
        match sample.targets.as_slice() {
            [haze, streak, mask] => Ok(Self {
                haze: haze.clone(),
                streak: streak.clone(),
                mask: mask.clone(),
            }),
            other => Err(Error::Data(format!(
                "deglow sample needs 3 targets, found {}",
                other.len()
            ))),
        }
    }
}

/// Sum over recurrences of
/// `mse(J_t, J*) + lambda1 (mse(S_t, S*) + mse(J_t, J*)) + lambda2 bce(G_t, G*)`.
pub fn deglow_loss<G: Graph>(
    g: &mut G,
    trace: &DeGlowTrace<G::Var>,
    targets: &DeGlowTargets,
    config: &LossConfig,
) -> Result<G::Var> {
    config.validate()?;
    let mut terms = Vec::with_capacity(trace.steps.len() * 3);
    for (step, out) in trace.steps.iter().zip(&trace.outputs) {
        let j = g.mse(out, &targets.haze)?;
        let s = g.mse(&step.streak, &targets.streak)?;
        let b = g.logit_bce(&step.glow_logits, &targets.mask)?;
        terms.push((j, 1.0 + config.lambda1));
        terms.push((s, config.lambda1));
        terms.push((b, config.lambda2));
    }
    let refs: Vec<(&G::Var, f64)> = terms.iter().map(|(v, w)| (v, *w)).collect();
    g.weighted_sum(&refs)
}

/// Single-pass transmission estimator.
#[derive(Debug, Clone)]
pub struct DeHazeModel {
    pub config: NetworkConfig,
    pub store: ParamStore,
    block: ContextualDilatedBlock,
    head: Conv,
}

impl DeHazeModel {
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        let config = NetworkConfig {
            recurrences: 1,
            tied: true,
            ..config
        };
        config.validate()?;
        let f = config.features;
        let (store, (block, head)) = build_store(rng, |store, rng| {
            let block =
                ContextualDilatedBlock::register(store, "dehaze.block", 3, f, config.init, rng);
            let head = conv(store, "dehaze.head", f, 1, 3, 1, true, config.init, rng);
            (block, head)
        });
        Ok(Self {
            config,
            store,
            block,
            head,
        })
    }

    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::new(config, &mut rng)?;
        m.store.zero_all();
        Ok(m)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.arch(), &self.store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        check_arch(ckpt, ModelKind::DeHaze)?;
        let config = NetworkConfig {
            features: ckpt.arch.features as usize,
            ..NetworkConfig::default()
        };
        let mut m = Self::zeros(config)?;
        ckpt.load_into(&mut m.store)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn receptive_radius() -> usize {
        BLOCK_RADIUS + 1
    }

    /// Transmission of a `N x 3 x H x W` batch, floored at `t_min`.
    pub fn infer(&self, input: &Tensor, t_min: f64) -> Result<Tensor> {
        let mut g = Eval::new(&self.store);
        let x = g.input(input.clone());
        let t = dehaze_forward(&mut g, self, &x)?;
        let mut t = Eval::take(t);
        let floor = t_min as f32;
        t.data_mut().iter_mut().for_each(|v| *v = v.max(floor));
        Ok(t)
    }
}

impl Network for DeHazeModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn arch(&self) -> ArchDescriptor {
        ArchDescriptor {
            kind: ModelKind::DeHaze,
            features: self.config.features as u32,
            recurrences: 1,
            tied: true,
        }
    }

    fn sample_loss(
        &self,
        sample: &Sample,
        _loss: &LossConfig,
        grads: bool,
    ) -> Result<(f64, Option<ParamGrads>)> {
        let [target] = sample.targets.as_slice() else {
            return Err(Error::Data(format!(
                "dehaze sample needs 1 target, found {}",
                sample.targets.len()
            )));
        };
        let mut g = Tape::new(&self.store);
        let x = g.input(sample.input.clone());
        let t = dehaze_forward(&mut g, self, &x)?;
        let l = dehaze_loss(&mut g, &t, target)?;
        let value = g.scalar(&l);
        let pg = if grads { Some(g.backward(l)?.0) } else { None };
        Ok((value, pg))
    }
}

/// `sigmoid(head(block(J)))`, one channel in `(0, 1)`.
pub fn dehaze_forward<G: Graph>(g: &mut G, model: &DeHazeModel, input: &G::Var) -> Result<G::Var> {
    let s = g.shape(input);
    if s.c != 3 {
        return Err(crate::error::dim_err!(
            "dehaze input must have 3 channels, got {s}"
        ));
    }
    let x = model.block.forward(g, input, None)?;
    let t = g.conv(&x, model.head)?;
    Ok(g.sigmoid(&t))
}

/// Mean squared error between predicted and true transmission.
pub fn dehaze_loss<G: Graph>(g: &mut G, pred: &G::Var, target: &Tensor) -> Result<G::Var> {
    g.mse(pred, target)
}
