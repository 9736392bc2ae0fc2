//! 2-D DFTs of single H×W planes, with phases referenced to the plane's
//! centre pixel `(H/2, W/2)` so a real, radially symmetric spectrum maps to a
//! pattern that is symmetric about the centre (and hence survives rotations
//! about it).

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::TAU;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub type C64 = Complex<f64>;

pub(crate) struct Plan2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    phase_y: Vec<C64>,
    phase_x: Vec<C64>,
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, usize), Arc<Plan2>>> = RefCell::new(HashMap::new());
}

pub(crate) fn plan(h: usize, w: usize) -> Arc<Plan2> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry((h, w))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                let phase = |n: usize| -> Vec<C64> {
                    (0..n)
                        .map(|k| C64::from_polar(1.0, TAU * (k * (n / 2)) as f64 / n as f64))
                        .collect()
                };
                Arc::new(Plan2 {
                    h,
                    w,
                    row_fwd: planner.plan_fft_forward(w),
                    row_inv: planner.plan_fft_inverse(w),
                    col_fwd: planner.plan_fft_forward(h),
                    col_inv: planner.plan_fft_inverse(h),
                    phase_y: phase(h),
                    phase_x: phase(w),
                })
            })
            .clone()
    })
}

impl Plan2 {
    fn transform(&self, buf: &mut [C64], inverse: bool) {
        let (rows, cols) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        rows.process(buf);
        let mut t = transpose(buf, self.h, self.w);
        cols.process(&mut t);
        let back = transpose(&t, self.w, self.h);
        buf.copy_from_slice(&back);
    }
}

fn transpose(src: &[C64], rows: usize, cols: usize) -> Vec<C64> {
    let mut out = vec![C64::default(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Centre-referenced spectrum of one plane.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub h: usize,
    pub w: usize,
    pub coeffs: Vec<C64>,
}

impl Spectrum {
    pub fn forward(plane: &[f32], h: usize, w: usize) -> Self {
        debug_assert_eq!(plane.len(), h * w);
        let p = plan(h, w);
        let mut buf: Vec<C64> = plane.iter().map(|&v| C64::new(v as f64, 0.0)).collect();
        p.transform(&mut buf, false);
        for ky in 0..h {
            for kx in 0..w {
                buf[ky * w + kx] *= p.phase_y[ky] * p.phase_x[kx];
            }
        }
        Self { h, w, coeffs: buf }
    }

    /// Real part of the inverse transform.
    pub fn inverse(&self) -> Vec<f32> {
        let p = plan(self.h, self.w);
        let mut buf = self.coeffs.clone();
        for ky in 0..self.h {
            for kx in 0..self.w {
                buf[ky * self.w + kx] *= (p.phase_y[ky] * p.phase_x[kx]).conj();
            }
        }
        p.transform(&mut buf, true);
        let scale = 1.0 / (self.h * self.w) as f64;
        buf.iter().map(|c| (c.re * scale) as f32).collect()
    }
}

/// Unshifted, unnormalised 2-D DFT in place (`inverse` flips the sign of
/// the exponent without scaling).
pub fn fft2_in_place(buf: &mut [C64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), h * w);
    plan(h, w).transform(buf, inverse);
}

/// Signed frequency of DFT bin `k` in an `n`-point transform.
pub fn signed_freq(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Radius of every bin, row-major.
pub fn radius_map(h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for ky in 0..h {
        let fy = signed_freq(ky, h) as f64;
        for kx in 0..w {
            let fx = signed_freq(kx, w) as f64;
            out.push((fy * fy + fx * fx).sqrt());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let (h, w) = (16, 12);
        let plane: Vec<f32> = (0..h * w).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.3).collect();
        let back = Spectrum::forward(&plane, h, w).inverse();
        for (a, b) in plane.iter().zip(&back) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn centred_impulse_has_flat_real_spectrum() {
        let (h, w) = (8, 8);
        let mut plane = vec![0f32; h * w];
        plane[(h / 2) * w + w / 2] = 1.0;
        let s = Spectrum::forward(&plane, h, w);
        for c in &s.coeffs {
            assert!((c.re - 1.0).abs() < 1e-12 && c.im.abs() < 1e-12);
        }
    }

    #[test]
    fn signed_frequencies() {
        assert_eq!(signed_freq(0, 8), 0);
        assert_eq!(signed_freq(4, 8), 4);
        assert_eq!(signed_freq(5, 8), -3);
    }
}
