//! The nighttime scattering model and its inversion.
//!
//! An observation is the classic haze blend plus masked glow:
//!
//! ```text
//! J(x) = R(x) t(x) + L (1 - t(x))
//! I(x) = J(x) + G(x) * sum_k S_k(x)
//! ```
//!
//! with `t(x) = exp(-beta d(x))`. All functions here are pure.

use crate::error::{dim_err, Error, Result};
use crate::image::{DepthMap, Plane, RadianceImage, TransmissionMap};

/// Transmission floor used by [`recover_radiance`] unless configured otherwise.
pub const DEFAULT_T_MIN: f64 = 0.05;

/// Fraction of the lowest-transmission pixels searched for the airlight.
pub const AIRLIGHT_CANDIDATE_FRACTION: f64 = 0.001;

/// Global atmospheric light.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtmosphericLight {
    rgb: [f64; 3],
}

impl AtmosphericLight {
    pub fn new(rgb: [f64; 3]) -> Result<Self> {
        if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter(format!(
                "atmospheric light {rgb:?} outside [0, 1]"
            )));
        }
        Ok(Self { rgb })
    }

    pub fn gray(v: f64) -> Result<Self> {
        Self::new([v; 3])
    }

    pub fn rgb(&self) -> [f64; 3] {
        self.rgb
    }
}

/// Medium parameters for one synthesized observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatteringParams {
    pub beta: f64,
    pub q: f64,
    pub t_min: f64,
}

impl ScatteringParams {
    pub fn new(beta: f64, q: f64, t_min: f64) -> Result<Self> {
        let p = Self { beta, q, t_min };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Parameter(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::Parameter(format!(
                "q must be in (0, 1), got {}",
                self.q
            )));
        }
        check_t_min(self.t_min)
    }
}

fn check_t_min(t_min: f64) -> Result<()> {
    if !(t_min > 0.0 && t_min < 1.0) {
        return Err(Error::Parameter(format!(
            "t_min must be in (0, 1), got {t_min}"
        )));
    }
    Ok(())
}

/// One light source and the halo it casts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlowSource {
    pub y: usize,
    pub x: usize,
    /// Streak color at the source pixel.
    pub color: [f64; 3],
    /// Distance (in pixels) that counts as one unit of normalized distance.
    pub radius: f64,
    /// Forward scattering parameter.
    pub q: f64,
}

/// Streak layers `S_k` and the binary glow-region mask `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlowField {
    sources: Vec<GlowSource>,
    streaks: Vec<RadianceImage>,
    mask: Plane,
}

impl GlowField {
    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            sources: Vec::new(),
            streaks: Vec::new(),
            mask: Plane::filled(height, width, 0.0)?,
        })
    }

    pub fn new(sources: Vec<GlowSource>, streaks: Vec<RadianceImage>, mask: Plane) -> Result<Self> {
        if sources.len() != streaks.len() {
            return Err(dim_err!(
                "{} glow sources but {} streak layers",
                sources.len(),
                streaks.len()
            ));
        }
        for s in &streaks {
            if !s.same_size(mask.height(), mask.width()) {
                return Err(dim_err!(
                    "streak {}x{} does not match mask {}x{}",
                    s.height(),
                    s.width(),
                    mask.height(),
                    mask.width()
                ));
            }
            if s.data().iter().any(|&v| v < 0.0) {
                return Err(Error::Data("streak layers must be nonnegative".into()));
            }
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("glow mask must be binary".into()));
        }
        Ok(Self {
            sources,
            streaks,
            mask,
        })
    }

    pub fn sources(&self) -> &[GlowSource] {
        &self.sources
    }

    pub fn streaks(&self) -> &[RadianceImage] {
        &self.streaks
    }

    pub fn mask(&self) -> &Plane {
        &self.mask
    }

    pub fn source_count(&self) -> usize {
        self.sources.len()
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    /// `sum_k S_k(x)`, interleaved RGB, not clamped.
    pub fn streak_sum(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.mask.len() * 3];
        for s in &self.streaks {
            for (acc, v) in sum.iter_mut().zip(s.data()) {
                *acc += v;
            }
        }
        sum
    }

    /// The streak target layer: the summed streaks clamped into `[0, 1]`.
    pub fn streak_target(&self) -> RadianceImage {
        let data = self.streak_sum().into_iter().map(|v| v.min(1.0)).collect();
        RadianceImage::from_vec(self.height(), self.width(), data).expect("size matches mask")
    }
}

/// `t(x) = exp(-beta d(x))`.
pub fn transmission_from_depth(depth: &DepthMap, beta: f64) -> Result<TransmissionMap> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Parameter(format!("beta must be > 0, got {beta}")));
    }
    let plane = depth.plane();
    if let Some(d) = plane.data().iter().find(|d| !d.is_finite()) {
        return Err(Error::Data(format!("non-finite depth value {d}")));
    }
    if let Some(d) = plane.data().iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::Data(format!("depth value {d} outside [0, 1]")));
    }
    let data = plane.data().iter().map(|&d| (-beta * d).exp()).collect();
    TransmissionMap::new(Plane::from_vec(plane.height(), plane.width(), data)?)
}

/// `J = R t + L (1 - t)`, clamped into `[0, 1]`.
pub fn compose_haze(
    reflection: &RadianceImage,
    t: &TransmissionMap,
    light: AtmosphericLight,
) -> Result<RadianceImage> {
    check_same(reflection, t)?;
    let l = light.rgb();
    let mut out = reflection.clone();
    for (px, &tv) in out.data_mut().chunks_exact_mut(3).zip(t.data()) {
        for c in 0..3 {
            px[c] = (px[c] * tv + l[c] * (1.0 - tv)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// `I = J + G * sum_k S_k`, clamped into `[0, 1]`.
pub fn compose_glow(haze: &RadianceImage, glow: &GlowField) -> Result<RadianceImage> {
    if !haze.same_size(glow.height(), glow.width()) {
        return Err(dim_err!(
            "glow field {}x{} does not match image {}x{}",
            glow.height(),
            glow.width(),
            haze.height(),
            haze.width()
        ));
    }
    if glow.source_count() == 0 {
        return Ok(haze.clone());
    }
    let sum = glow.streak_sum();
    let mut out = haze.clone();
    for (i, (px, &m)) in out
        .data_mut()
        .chunks_exact_mut(3)
        .zip(glow.mask().data())
        .enumerate()
    {
        if m == 0.0 {
            continue;
        }
        for c in 0..3 {
            px[c] = (px[c] + m * sum[i * 3 + c]).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Number of candidate pixels searched by [`estimate_atmospheric_light`].
pub fn airlight_candidate_count(pixels: usize) -> usize {
    ((AIRLIGHT_CANDIDATE_FRACTION * pixels as f64).floor() as usize).max(1)
}

/// Linear indices of the lowest-transmission pixels, ties broken by index.
pub fn airlight_candidates(t: &TransmissionMap) -> Vec<usize> {
    let data = t.data();
    let k = airlight_candidate_count(data.len());
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let cmp = |a: &usize, b: &usize| data[*a].total_cmp(&data[*b]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Among the darkest-transmission candidates, the haze color of the
/// brightest pixel (intensity = channel mean, ties to the lowest index).
pub fn estimate_atmospheric_light(
    t: &TransmissionMap,
    haze: &RadianceImage,
) -> Result<AtmosphericLight> {
    check_same(haze, t)?;
    let w = haze.width();
    let mut best: Option<(f64, usize)> = None;
    for i in airlight_candidates(t) {
        let v = haze.intensity(i / w, i % w);
        match best {
            Some((bv, bi)) if v < bv || (v == bv && i > bi) => {}
            _ => best = Some((v, i)),
        }
    }
    let (_, i) = best.ok_or_else(|| dim_err!("empty image"))?;
    AtmosphericLight::new(haze.pixel(i / w, i % w).map(|v| v.clamp(0.0, 1.0)))
}

/// Inverts the haze blend with the transmission floored at `t_min`:
/// `R = (J - L (1 - t')) / t'`, `t' = max(t, t_min)`, clamped into `[0, 1]`.
pub fn recover_radiance(
    haze: &RadianceImage,
    t: &TransmissionMap,
    light: AtmosphericLight,
    t_min: f64,
) -> Result<RadianceImage> {
    check_t_min(t_min)?;
    check_same(haze, t)?;
    let l = light.rgb();
    let mut out = haze.clone();
    for (px, &tv) in out.data_mut().chunks_exact_mut(3).zip(t.data()) {
        let tf = tv.max(t_min);
        for c in 0..3 {
            px[c] = ((px[c] - l[c] * (1.0 - tf)) / tf).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

fn check_same(img: &RadianceImage, t: &TransmissionMap) -> Result<()> {
    if !img.same_size(t.height(), t.width()) {
        return Err(dim_err!(
            "image {}x{} vs transmission {}x{}",
            img.height(),
            img.width(),
            t.height(),
            t.width()
        ));
    }
    Ok(())
}
