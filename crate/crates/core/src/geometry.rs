//! Per-plane resampling used by the attacks and by the detector's alignment
//! search. Planes are row-major `h×w` slices; rotations pivot on pixel
//! `(h/2, w/2)`, the same point the spectrum phases are referenced to.

#[inline]
fn sample_zero(src: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = (y - y0) as f32;
    let fx = (x - x0) as f32;
    let (y0, x0) = (y0 as i64, x0 as i64);
    let at = |yy: i64, xx: i64| -> f32 {
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            src[yy as usize * w + xx as usize]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

#[inline]
fn sample_clamped(src: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = (y - y0 as f64) as f32;
    let fx = (x - x0 as f64) as f32;
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Counter-clockwise bilinear rotation about `(h/2, w/2)`, zero fill.
pub fn rotate_plane(src: &[f32], h: usize, w: usize, degrees: f64) -> Vec<f32> {
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (h / 2) as f64;
    let cx = (w / 2) as f64;
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            // inverse of (dx, dy) -> (c·dx + s·dy, -s·dx + c·dy)
            let sx = c * dx - s * dy + cx;
            let sy = s * dx + c * dy + cy;
            out[y * w + x] = sample_zero(src, h, w, sy, sx);
        }
    }
    out
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
pub fn resize_plane(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let ry = sh as f64 / dh as f64;
    let rx = sw as f64 / dw as f64;
    let mut out = vec![0f32; dh * dw];
    for y in 0..dh {
        let sy = (y as f64 + 0.5) * ry - 0.5;
        for x in 0..dw {
            let sx = (x as f64 + 0.5) * rx - 0.5;
            out[y * dw + x] = sample_clamped(src, sh, sw, sy, sx);
        }
    }
    out
}

pub fn crop_plane(src: &[f32], w: usize, top: usize, left: usize, ch: usize, cw: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(ch * cw);
    for y in top..top + ch {
        out.extend_from_slice(&src[y * w + left..y * w + left + cw]);
    }
    out
}

/// Writes `patch` (`ph×pw`) into `dst` (`_×w`) at `(top, left)`.
pub fn paste_plane(dst: &mut [f32], w: usize, patch: &[f32], ph: usize, pw: usize, top: usize, left: usize) {
    for y in 0..ph {
        dst[(top + y) * w + left..(top + y) * w + left + pw].copy_from_slice(&patch[y * pw..(y + 1) * pw]);
    }
}

/// Mirror index without edge repetition (`-1 → 1`, `n → n-2`).
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as i64 {
        k = period - k;
    }
    k as usize
}

/// Normalised `k×k` box filter with reflect padding. Even kernels cover
/// offsets `-k/2 ..= k/2 - 1`.
pub fn box_blur_plane(src: &[f32], h: usize, w: usize, k: usize) -> Vec<f32> {
    let lo = -((k / 2) as i64);
    let hi = lo + k as i64;
    let pass = |input: &[f32], along_rows: bool| -> Vec<f32> {
        let mut out = vec![0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f64;
                for d in lo..hi {
                    let v = if along_rows {
                        input[y * w + reflect(x as i64 + d, w)]
                    } else {
                        input[reflect(y as i64 + d, h) * w + x]
                    };
                    acc += v as f64;
                }
                out[y * w + x] = (acc / k as f64) as f32;
            }
        }
        out
    };
    let horizontal = pass(src, true);
    pass(&horizontal, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth(h: usize, w: usize) -> Vec<f32> {
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f32, (i % w) as f32);
                (0.2 * y).sin() + (0.15 * x).cos()
            })
            .collect()
    }

    #[test]
    fn full_turn_is_identity() {
        let p = smooth(32, 32);
        let r = rotate_plane(&p, 32, 32, 360.0);
        let max = p.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(max < 1e-3, "max deviation {max}");
    }

    #[test]
    fn quarter_turn_moves_pixels_exactly() {
        let (h, w) = (8, 8);
        let mut p = vec![0f32; h * w];
        p[4 * w + 6] = 1.0; // two right of centre
        let r = rotate_plane(&p, h, w, 90.0);
        // counter-clockwise in (row-down) image coordinates: right -> up
        assert!((r[2 * w + 4] - 1.0).abs() < 1e-6);
        assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn resize_same_size_is_identity() {
        let p = smooth(16, 16);
        assert_eq!(resize_plane(&p, 16, 16, 16, 16), p);
    }

    #[test]
    fn blur_preserves_constants() {
        let p = vec![2.5f32; 64];
        for k in [1, 3, 8] {
            let b = box_blur_plane(&p, 8, 8, k);
            assert!(b.iter().all(|v| (v - 2.5).abs() < 1e-6));
        }
        let q = smooth(8, 8);
        assert_eq!(box_blur_plane(&q, 8, 8, 1), q);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
    }

    #[test]
    fn crop_then_paste_restores_region() {
        let p = smooth(10, 10);
        let c = crop_plane(&p, 10, 2, 3, 4, 5);
        let mut canvas = vec![0f32; 100];
        paste_plane(&mut canvas, 10, &c, 4, 5, 2, 3);
        for y in 2..6 {
            for x in 3..8 {
                assert_eq!(canvas[y * 10 + x], p[y * 10 + x]);
            }
        }
    }
}
