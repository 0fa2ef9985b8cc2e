//! Pixel-level helpers on `[c, h, w]` images stored row-major.

/// Resample every channel through the inverse map `(x, y) -> source (x, y)`,
/// in continuous pixel coordinates where pixel `(i, j)` is centred at
/// `(j + 0.5, i + 0.5)`. Bilinear; samples outside the image read `fill`.
pub(crate) fn warp(img: &[f64], channels: usize, side: usize, fill: f64, inv: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f64> {
    let plane = side * side;
    let mut out = vec![0.0; img.len()];
    for i in 0..side {
        for j in 0..side {
            let (sx, sy) = inv(j as f64 + 0.5, i as f64 + 0.5);
            // back to index space
            let (fx, fy) = (sx - 0.5, sy - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (tx, ty) = (fx - x0, fy - y0);
            let corners = [(x0, y0, (1.0 - tx) * (1.0 - ty)), (x0 + 1.0, y0, tx * (1.0 - ty)), (x0, y0 + 1.0, (1.0 - tx) * ty), (x0 + 1.0, y0 + 1.0, tx * ty)];
            for c in 0..channels {
                let src = &img[c * plane..(c + 1) * plane];
                let mut acc = 0.0;
                for &(cx, cy, w) in &corners {
                    if w == 0.0 {
                        continue;
                    }
                    let inside = cx >= 0.0 && cy >= 0.0 && cx < side as f64 && cy < side as f64;
                    acc += w * if inside { src[cy as usize * side + cx as usize] } else { fill };
                }
                out[c * plane + i * side + j] = acc;
            }
        }
    }
    out
}

/// Rotate by `degrees` (counter-clockwise on screen) about the image centre.
pub(crate) fn rotate(img: &[f64], channels: usize, side: usize, degrees: f64) -> Vec<f64> {
    if degrees == 0.0 {
        return img.to_vec();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let mid = side as f64 / 2.0;
    warp(img, channels, side, 0.0, |x, y| {
        let (dx, dy) = (x - mid, y - mid);
        // y grows downward, so a screen-CCW rotation is the inverse of the
        // usual matrix in these coordinates
        (mid + c * dx - s * dy, mid + s * dx + c * dy)
    })
}

pub(crate) fn clamp01(img: &mut [f64]) {
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// 3x3 box blur with edge replication.
pub(crate) fn box_blur(img: &[f64], channels: usize, side: usize) -> Vec<f64> {
    let plane = side * side;
    let mut out = vec![0.0; img.len()];
    let at = |i: isize| i.clamp(0, side as isize - 1) as usize;
    for c in 0..channels {
        let src = &img[c * plane..(c + 1) * plane];
        for i in 0..side as isize {
            for j in 0..side as isize {
                let mut acc = 0.0;
                for di in -1..=1 {
                    for dj in -1..=1 {
                        acc += src[at(i + di) * side + at(j + dj)];
                    }
                }
                out[c * plane + i as usize * side + j as usize] = acc / 9.0;
            }
        }
    }
    out
}
