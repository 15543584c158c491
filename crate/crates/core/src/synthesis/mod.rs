//! Synthetic training data: hazy, glowing observations composed from clean
//! images and depth maps with randomly drawn medium and light parameters.

mod dataset;
mod scene;

pub use dataset::{
    build_dataset, generate_records, load_pairs_dir, DatasetRecord, GeneratedRecord, Manifest,
    PairSource, RecordLayers, ScenePair,
};
pub use scene::{procedural_clean, procedural_depth, procedural_pair};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::atmospherics::{
    compose_glow, compose_haze, transmission_from_depth, AtmosphericLight, GlowField, GlowSource,
};
use crate::error::{dim_err, Error, Result};
use crate::image::{DepthMap, Plane, RadianceImage, TransmissionMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub beta_range: (f64, f64),
    pub beta_samples_per_image: usize,
    pub q_range: (f64, f64),
    pub q_samples_per_image: usize,
    pub light_range: (f64, f64),
    pub width: usize,
    pub height: usize,
    pub use_taylor_glow: bool,
    /// Inclusive range for the number of light sources per image.
    pub sources_per_image: (usize, usize),
    /// Pixel distance equal to one unit of normalized glow distance.
    pub glow_radius_range: (f64, f64),
    /// Summed streak intensity above which a pixel belongs to the glow region.
    pub mask_threshold: f64,
    pub rng_seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            beta_range: (0.5, 1.5),
            beta_samples_per_image: 3,
            q_range: (0.2, 0.9),
            q_samples_per_image: 3,
            light_range: (0.5, 1.0),
            width: 320,
            height: 240,
            use_taylor_glow: false,
            sources_per_image: (1, 5),
            glow_radius_range: (2.0, 6.0),
            mask_threshold: 0.02,
            rng_seed: 0,
        }
    }
}

impl SynthesisConfig {
    /// Small images for tests and quick experiments.
    pub fn desk(size: usize, seed: u64) -> Self {
        Self {
            width: size,
            height: size,
            sources_per_image: (1, 3),
            glow_radius_range: (0.5, 1.5),
            rng_seed: seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, (lo, hi): (f64, f64)| {
            if lo < hi && lo.is_finite() && hi.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name}: lower bound must be < upper bound, got ({lo}, {hi})"
                )))
            }
        };
        ordered("beta_range", self.beta_range)?;
        ordered("q_range", self.q_range)?;
        ordered("light_range", self.light_range)?;
        ordered("glow_radius_range", self.glow_radius_range)?;
        if self.beta_range.0 <= 0.0 {
            return Err(Error::Config("beta_range must be positive".into()));
        }
        if self.q_range.0 <= 0.0 || self.q_range.1 >= 1.0 {
            return Err(Error::Config("q_range must lie inside (0, 1)".into()));
        }
        if self.light_range.0 < 0.0 || self.light_range.1 > 1.0 {
            return Err(Error::Config("light_range must lie inside [0, 1]".into()));
        }
        if self.glow_radius_range.0 <= 0.0 {
            return Err(Error::Config("glow radius must be positive".into()));
        }
        if self.beta_samples_per_image == 0 || self.q_samples_per_image == 0 {
            return Err(Error::Config("samples per image must be >= 1".into()));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config(format!(
                "target size {}x{} below the 16 pixel minimum",
                self.width, self.height
            )));
        }
        if self.sources_per_image.0 > self.sources_per_image.1 {
            return Err(Error::Config("sources_per_image range is inverted".into()));
        }
        Ok(())
    }

    pub fn records_per_pair(&self) -> usize {
        self.beta_samples_per_image * self.q_samples_per_image
    }
}

/// Medium and illumination of one synthesized observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub beta: f64,
    pub q: f64,
    pub light: AtmosphericLight,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..hi)
}

pub fn sample_beta<R: Rng + ?Sized>(rng: &mut R, config: &SynthesisConfig) -> f64 {
    uniform(rng, config.beta_range)
}

pub fn sample_q<R: Rng + ?Sized>(rng: &mut R, config: &SynthesisConfig) -> f64 {
    uniform(rng, config.q_range)
}

/// Gray airlight `[t, t, t]`.
pub fn sample_light<R: Rng + ?Sized>(rng: &mut R, config: &SynthesisConfig) -> AtmosphericLight {
    AtmosphericLight::gray(uniform(rng, config.light_range)).expect("light_range within [0, 1]")
}

/// Draws `beta`, `q`, and the light, in that order.
pub fn sample_scene_params<R: Rng + ?Sized>(rng: &mut R, config: &SynthesisConfig) -> SceneParams {
    let beta = sample_beta(rng, config);
    let q = sample_q(rng, config);
    let light = sample_light(rng, config);
    SceneParams { beta, q, light }
}

/// Glow falloff with normalized distance: `exp(-q d)`, or its first-order
/// expansion `1 - q d` floored at zero.
pub fn glow_attenuation(q: f64, d: f64, use_taylor: bool) -> f64 {
    if use_taylor {
        (1.0 - q * d).max(0.0)
    } else {
        (-q * d).exp()
    }
}

const PALETTE: [([f64; 3], u32); 5] = [
    ([1.0, 1.0, 1.0], 3),  // white
    ([1.0, 0.85, 0.6], 3), // warm
    ([1.0, 0.65, 0.3], 2), // sodium
    ([0.8, 0.9, 1.0], 1),  // cool
    ([0.0, 0.0, 0.0], 1),  // random hue (sentinel)
];

/// Random light sources with positions inside `height x width`.
pub fn sample_glow_sources<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    q: f64,
    config: &SynthesisConfig,
) -> Vec<GlowSource> {
    let (lo, hi) = config.sources_per_image;
    let count = rng.random_range(lo..=hi);
    let total: u32 = PALETTE.iter().map(|p| p.1).sum();
    (0..count)
        .map(|_| {
            let y = rng.random_range(0..height);
            let x = rng.random_range(0..width);
            let mut pick = rng.random_range(0..total);
            let mut base = PALETTE[0].0;
            for (color, w) in PALETTE {
                if pick < w {
                    base = color;
                    break;
                }
                pick -= w;
            }
            if base == [0.0; 3] {
                base = [
                    rng.random_range(0.3..1.0),
                    rng.random_range(0.3..1.0),
                    rng.random_range(0.3..1.0),
                ];
            }
            let brightness = rng.random_range(0.6..1.0);
            GlowSource {
                y,
                x,
                color: base.map(|c| c * brightness),
                radius: uniform(rng, config.glow_radius_range),
                q,
            }
        })
        .collect()
}

/// Renders one radial streak layer per source and thresholds their sum into
/// the glow mask.
pub fn render_glow_field(
    height: usize,
    width: usize,
    sources: &[GlowSource],
    use_taylor: bool,
    mask_threshold: f64,
) -> Result<GlowField> {
    let mut streaks = Vec::with_capacity(sources.len());
    for s in sources {
        if s.y >= height || s.x >= width {
            return Err(Error::Parameter(format!(
                "glow source at ({}, {}) outside {height}x{width}",
                s.y, s.x
            )));
        }
        let valid = s.radius > 0.0 && s.q > 0.0 && s.q < 1.0;
        if !valid {
            return Err(Error::Parameter(format!(
                "glow source needs radius > 0 and q in (0, 1), got {} and {}",
                s.radius, s.q
            )));
        }
        if s.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Parameter(format!(
                "glow color {:?} outside [0, 1]",
                s.color
            )));
        }
        let layer = RadianceImage::from_fn(height, width, |y, x| {
            let dy = y as f64 - s.y as f64;
            let dx = x as f64 - s.x as f64;
            let a = glow_attenuation(s.q, (dy * dy + dx * dx).sqrt() / s.radius, use_taylor);
            s.color.map(|c| c * a)
        })?;
        streaks.push(layer);
    }
    let mut mask = Plane::filled(height, width, 0.0)?;
    if !streaks.is_empty() {
        for (i, m) in mask.data_mut().iter_mut().enumerate() {
            let intensity: f64 = streaks
                .iter()
                .map(|s| s.data()[i * 3..i * 3 + 3].iter().sum::<f64>() / 3.0)
                .sum();
            if intensity > mask_threshold {
                *m = 1.0;
            }
        }
    }
    GlowField::new(sources.to_vec(), streaks, mask)
}

/// The four layers of one synthesized observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedExample {
    /// Glow-contaminated observation `I`.
    pub hazy: RadianceImage,
    /// Glow-free haze image `J`.
    pub haze: RadianceImage,
    pub transmission: TransmissionMap,
    pub glow: GlowField,
}

pub fn synthesize_example(
    clean: &RadianceImage,
    depth: &DepthMap,
    params: &SceneParams,
    glow_sources: &[GlowSource],
    config: &SynthesisConfig,
) -> Result<SynthesizedExample> {
    if !clean.same_size(depth.height(), depth.width()) {
        return Err(dim_err!(
            "clean image {}x{} vs depth {}x{}",
            clean.height(),
            clean.width(),
            depth.height(),
            depth.width()
        ));
    }
    let transmission = transmission_from_depth(depth, params.beta)?;
    let haze = compose_haze(clean, &transmission, params.light)?;
    let glow = render_glow_field(
        clean.height(),
        clean.width(),
        glow_sources,
        config.use_taylor_glow,
        config.mask_threshold,
    )?;
    let hazy = compose_glow(&haze, &glow)?;
    Ok(SynthesizedExample {
        hazy,
        haze,
        transmission,
        glow,
    })
}
