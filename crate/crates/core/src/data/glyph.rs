//! Procedural class glyphs and the covariate shift applied to the target
//! domain.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::image;
use crate::error::{Error, Result};

/// Number of built-in glyph classes.
pub const GLYPH_CLASSES: usize = 5;

pub const GLYPH_NAMES: [&str; GLYPH_CLASSES] = ["bar", "cross", "disk", "ring", "wedge"];

/// Placement of one glyph on the canvas, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphPose {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub degrees: f64,
}

impl GlyphPose {
    pub fn centered(side: usize) -> Self {
        let mid = side as f64 / 2.0;
        GlyphPose { cx: mid, cy: mid, scale: 1.0, degrees: 0.0 }
    }

    /// Random position, scale and a small orientation jitter.
    pub fn sample(side: usize, rng: &mut impl Rng) -> Self {
        let mid = side as f64 / 2.0;
        let unit = side as f64 / 16.0;
        GlyphPose {
            cx: mid + rng.random_range(-2.0..2.0) * unit,
            cy: mid + rng.random_range(-2.0..2.0) * unit,
            scale: rng.random_range(0.85..1.15),
            degrees: rng.random_range(-10.0..10.0),
        }
    }
}

fn box_sdf(u: f64, v: f64, hu: f64, hv: f64) -> f64 {
    let (qu, qv) = (u.abs() - hu, v.abs() - hv);
    let outside = (qu.max(0.0).powi(2) + qv.max(0.0).powi(2)).sqrt();
    outside + qu.max(qv).min(0.0)
}

/// Signed distance (negative inside) of glyph `class` in glyph-local units,
/// where the glyph spans roughly `[-5, 5]^2`.
fn glyph_sdf(class: usize, u: f64, v: f64) -> f64 {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => box_sdf(u, v, 1.3, 5.0),
        1 => box_sdf(u, v, 1.2, 5.0).min(box_sdf(u, v, 5.0, 1.2)),
        2 => r - 4.0,
        3 => (r - 3.9).abs() - 1.1,
        _ => (-(u + 4.5)).max(-(v + 4.5)).max((u + v) * std::f64::consts::FRAC_1_SQRT_2),
    }
}

/// Render one glyph as a single-channel `side x side` image in `[0, 1]`,
/// with a one-pixel soft edge.
pub fn render_glyph(class: usize, pose: &GlyphPose, side: usize) -> Vec<f64> {
    let unit = side as f64 / 16.0;
    let (s, c) = pose.degrees.to_radians().sin_cos();
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let (dx, dy) = (j as f64 + 0.5 - pose.cx, i as f64 + 0.5 - pose.cy);
            let k = pose.scale * unit;
            let (u, v) = ((c * dx + s * dy) / k, (-s * dx + c * dy) / k);
            let d = glyph_sdf(class, u, v) * k;
            out.push((0.5 - d).clamp(0.0, 1.0));
        }
    }
    out
}

/// The source-to-target covariate shift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub rotation: f64,
    pub intensity_gain: f64,
    pub noise_std: f64,
    pub background_level: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec { rotation: 25.0, intensity_gain: 0.7, noise_std: 0.08, background_level: 0.15 }
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec { rotation: 0.0, intensity_gain: 1.0, noise_std: 0.0, background_level: 0.0 }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(ShiftSpec::default()),
            "identity" => Ok(ShiftSpec::identity()),
            other => Err(Error::Config(format!("unknown shift preset {other:?} (expected default or identity)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation.abs() <= 180.0
            && (0.0..=2.0).contains(&self.intensity_gain)
            && self.intensity_gain > 0.0
            && (0.0..=0.5).contains(&self.noise_std)
            && (0.0..1.0).contains(&self.background_level);
        if !ok {
            return Err(Error::Config(format!("shift {self:?} out of range")));
        }
        Ok(())
    }

    /// Apply the shift to a rendered image in place, then clamp to `[0, 1]`.
    pub fn apply(&self, img: &mut Vec<f64>, channels: usize, side: usize, rng: &mut impl Rng) {
        if self.rotation != 0.0 {
            *img = image::rotate(img, channels, side, self.rotation);
        }
        for v in img.iter_mut() {
            *v = self.intensity_gain * *v + self.background_level;
            if self.noise_std > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                *v += self.noise_std * z;
            }
        }
        image::clamp01(img);
    }
}
