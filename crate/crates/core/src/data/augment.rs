//! The weak (flip + crop) and strong (two random transforms) views.
//!
//! Each augmentation is split into drawing its random parameters and
//! applying them, so tests can pin the parameters and check exact behaviour.

use rand::Rng;

use super::image;
use crate::autodiff::Tensor;

/// Fraction of the side kept by the weak random crop.
pub const CROP_RATIO: f64 = 0.875;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeakParams {
    pub flip: bool,
    pub crop_y: usize,
    pub crop_x: usize,
    pub crop_size: usize,
}

impl WeakParams {
    pub fn identity(side: usize) -> Self {
        WeakParams { flip: false, crop_y: 0, crop_x: 0, crop_size: side }
    }

    pub fn sample(side: usize, rng: &mut impl Rng) -> Self {
        let crop_size = ((side as f64 * CROP_RATIO).round() as usize).clamp(1, side);
        let slack = side - crop_size;
        WeakParams {
            flip: rng.random_bool(0.5),
            crop_y: rng.random_range(0..=slack),
            crop_x: rng.random_range(0..=slack),
            crop_size,
        }
    }
}

/// Optional horizontal flip, then crop and nearest-neighbour resize back to
/// the full side.
pub fn apply_weak(img: &Tensor, p: &WeakParams) -> Tensor {
    let (c, side) = dims(img);
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    let plane = side * side;
    for ch in 0..c {
        for i in 0..side {
            let si = p.crop_y + (2 * i + 1) * p.crop_size / (2 * side);
            for j in 0..side {
                let mut sj = p.crop_x + (2 * j + 1) * p.crop_size / (2 * side);
                if p.flip {
                    sj = side - 1 - sj;
                }
                out[ch * plane + i * side + j] = src[ch * plane + si * side + sj];
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

pub fn weak(img: &Tensor, rng: &mut impl Rng) -> Tensor {
    let p = WeakParams::sample(dims(img).1, rng);
    apply_weak(img, &p)
}

/// The reduced strong-augmentation pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StrongOp {
    Rotate,
    Translate,
    Invert,
    Contrast,
    Brightness,
    SharpenBlur,
    Cutout,
    Shear,
}

impl StrongOp {
    pub const ALL: [StrongOp; 8] = [
        StrongOp::Rotate,
        StrongOp::Translate,
        StrongOp::Invert,
        StrongOp::Contrast,
        StrongOp::Brightness,
        StrongOp::SharpenBlur,
        StrongOp::Cutout,
        StrongOp::Shear,
    ];
}

/// Transforms composed per strong view.
pub const STRONG_OPS_PER_VIEW: usize = 2;

/// One sampled transform. `magnitude` in `[0, 1]` scales its strength and
/// zero is always the identity. `sign` picks the direction of signed
/// transforms; `anchor` positions cutouts and picks the translate axis mix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrongDraw {
    pub op: StrongOp,
    pub magnitude: f64,
    pub sign: f64,
    pub anchor: (f64, f64),
}

impl StrongDraw {
    pub fn new(op: StrongOp, magnitude: f64) -> Self {
        StrongDraw { op, magnitude, sign: 1.0, anchor: (0.5, 0.5) }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        StrongDraw {
            op: StrongOp::ALL[rng.random_range(0..StrongOp::ALL.len())],
            magnitude: rng.random_range(0.0..=1.0),
            sign: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            anchor: (rng.random(), rng.random()),
        }
    }
}

pub fn sample_strong(rng: &mut impl Rng) -> [StrongDraw; STRONG_OPS_PER_VIEW] {
    std::array::from_fn(|_| StrongDraw::sample(rng))
}

/// Apply `draws` in order, clamping to `[0, 1]` after each.
pub fn apply_strong(img: &Tensor, draws: &[StrongDraw]) -> Tensor {
    let (c, side) = dims(img);
    let mut x = img.data().to_vec();
    for d in draws {
        x = apply_one(&x, c, side, d);
        image::clamp01(&mut x);
    }
    Tensor::new(img.shape().to_vec(), x).expect("same shape")
}

pub fn strong(img: &Tensor, rng: &mut impl Rng) -> Tensor {
    apply_strong(img, &sample_strong(rng))
}

fn apply_one(x: &[f64], c: usize, side: usize, d: &StrongDraw) -> Vec<f64> {
    let m = d.magnitude;
    let s = side as f64;
    let mid = s / 2.0;
    match d.op {
        StrongOp::Rotate => image::rotate(x, c, side, d.sign * 30.0 * m),
        StrongOp::Translate => {
            // direction spread over both axes by the anchor
            let angle = d.anchor.0 * std::f64::consts::TAU;
            let dist = d.sign * 0.25 * s * m;
            let (tx, ty) = (dist * angle.cos(), dist * angle.sin());
            image::warp(x, c, side, 0.0, |px, py| (px - tx, py - ty))
        }
        StrongOp::Shear => {
            let k = d.sign * 0.3 * m;
            image::warp(x, c, side, 0.0, |px, py| (px - k * (py - mid), py))
        }
        StrongOp::Invert => x.iter().map(|&v| v + m * (1.0 - 2.0 * v)).collect(),
        StrongOp::Contrast => {
            let plane = side * side;
            let factor = 1.0 + d.sign * 0.9 * m;
            let mut out = x.to_vec();
            for ch in out.chunks_mut(plane) {
                let mean = ch.iter().sum::<f64>() / plane as f64;
                ch.iter_mut().for_each(|v| *v = mean + (*v - mean) * factor);
            }
            out
        }
        StrongOp::Brightness => x.iter().map(|&v| v + d.sign * 0.5 * m).collect(),
        StrongOp::SharpenBlur => {
            let blur = image::box_blur(x, c, side);
            x.iter().zip(&blur).map(|(&v, &b)| v + d.sign * m * (v - b)).collect()
        }
        StrongOp::Cutout => {
            let len = (m * 0.25 * s).round() as usize;
            let mut out = x.to_vec();
            if len == 0 {
                return out;
            }
            let y0 = ((d.anchor.1 * (side - len + 1) as f64) as usize).min(side - len);
            let x0 = ((d.anchor.0 * (side - len + 1) as f64) as usize).min(side - len);
            for ch in out.chunks_mut(side * side) {
                for i in y0..y0 + len {
                    ch[i * side + x0..i * side + x0 + len].fill(0.0);
                }
            }
            out
        }
    }
}

fn dims(img: &Tensor) -> (usize, usize) {
    let s = img.shape();
    assert!(s.len() == 3 && s[1] == s[2], "augmentations expect square [c, h, w] images, got {s:?}");
    (s[0], s[1])
}
