//! Centered unitary 2-D FFT.
//!
//! All spectra in this crate follow one convention: the DC bin sits at
//! index N/2 (floor) on each axis, and both transform directions carry a
//! 1/sqrt(H*W) factor so the transform is unitary. Under this convention
//! Parseval's identity holds exactly and a flat field maps to a single
//! centered bin.

use ndarray::{Array1, ArrayD};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

thread_local! {
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let mut map = cell.borrow_mut();
        map.entry((len, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

/// Transforms the last two axes of `x`; leading axes are batch dimensions.
/// Forward direction with `inverse = false`.
fn transform2(x: &ArrayD<Complex64>, inverse: bool) -> ArrayD<Complex64> {
    let ndim = x.ndim();
    assert!(ndim >= 2, "fft2 needs at least 2 axes, got {ndim}");
    let h = x.shape()[ndim - 2];
    let w = x.shape()[ndim - 1];
    let batch: usize = x.shape()[..ndim - 2].iter().product();
    let scale = 1.0 / ((h * w) as f64).sqrt();

    let src = x.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = vec![Complex64::new(0.0, 0.0); src.len()];

    let row_plan = plan(w, inverse);
    let col_plan = plan(h, inverse);
    // ifftshift offset (input) and fftshift offset (output) per axis.
    let (in_h, in_w) = (h / 2, w / 2);
    let (out_h, out_w) = (h.div_ceil(2), w.div_ceil(2));

    let mut slab = vec![Complex64::new(0.0, 0.0); h * w];
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for b in 0..batch {
        let base = b * h * w;
        // Copy with ifftshift so the centered DC bin moves to index 0.
        for r in 0..h {
            let sr = (r + in_h) % h;
            for c in 0..w {
                slab[r * w + c] = src[base + sr * w + (c + in_w) % w];
            }
        }
        for r in 0..h {
            row_plan.process(&mut slab[r * w..(r + 1) * w]);
        }
        for c in 0..w {
            for r in 0..h {
                col[r] = slab[r * w + c];
            }
            col_plan.process(&mut col);
            for r in 0..h {
                slab[r * w + c] = col[r];
            }
        }
        // Copy out with fftshift so bin 0 returns to the center.
        for r in 0..h {
            let sr = (r + out_h) % h;
            for c in 0..w {
                out[base + r * w + c] = slab[sr * w + (c + out_w) % w] * scale;
            }
        }
    }
    ArrayD::from_shape_vec(x.raw_dim(), out).expect("shape preserved")
}

/// Centered unitary forward FFT over the last two axes.
pub fn fft2_centered(x: &ArrayD<Complex64>) -> ArrayD<Complex64> {
    transform2(x, false)
}

/// Centered unitary inverse FFT over the last two axes. Exact inverse of
/// [`fft2_centered`] and also its adjoint, since the transform is unitary.
pub fn ifft2_centered(x: &ArrayD<Complex64>) -> ArrayD<Complex64> {
    transform2(x, true)
}

fn transform1(x: &Array1<Complex64>, inverse: bool) -> Array1<Complex64> {
    let n = x.len();
    assert!(n > 0, "fft1 needs a nonempty input");
    let scale = 1.0 / (n as f64).sqrt();
    let p = plan(n, inverse);
    let in_off = n / 2;
    let out_off = n.div_ceil(2);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (i, slot) in buf.iter_mut().enumerate() {
        *slot = x[(i + in_off) % n];
    }
    p.process(&mut buf);
    Array1::from_shape_fn(n, |i| buf[(i + out_off) % n] * scale)
}

/// Centered unitary forward FFT of a 1-D signal, same convention as the
/// 2-D pair.
pub fn fft1_centered(x: &Array1<Complex64>) -> Array1<Complex64> {
    transform1(x, false)
}

/// Centered unitary inverse FFT of a 1-D signal.
pub fn ifft1_centered(x: &Array1<Complex64>) -> Array1<Complex64> {
    transform1(x, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(shape: &[usize], seed: u64) -> ArrayD<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    #[test]
    fn round_trip_identity() {
        for &(h, w) in &[(8, 8), (7, 5), (16, 4)] {
            let x = random_field(&[h, w], 3);
            let y = ifft2_centered(&fft2_centered(&x));
            for (a, b) in x.iter().zip(y.iter()) {
                assert!((a - b).norm() < 1e-12, "{h}x{w} round trip");
            }
        }
    }

    #[test]
    fn parseval_energy_match() {
        let x = random_field(&[32, 32], 11);
        let y = fft2_centered(&x);
        let ex: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let ey: f64 = y.iter().map(|v| v.norm_sqr()).sum();
        assert!((ex - ey).abs() / ex < 1e-10, "energy {ex} vs {ey}");
    }

    #[test]
    fn flat_field_maps_to_center_bin() {
        let n = 16;
        let x = ArrayD::from_elem(IxDyn(&[n, n]), Complex64::new(1.0, 0.0));
        let y = fft2_centered(&x);
        for ((r, c), v) in y
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .indexed_iter()
        {
            if (r, c) == (n / 2, n / 2) {
                assert!((v - Complex64::new(n as f64, 0.0)).norm() < 1e-12);
            } else {
                assert!(v.norm() < 1e-12, "leakage at ({r},{c})");
            }
        }
    }

    #[test]
    fn single_offset_bin_is_plane_wave() {
        let n = 8;
        let mut spec = ArrayD::from_elem(IxDyn(&[n, n]), Complex64::new(0.0, 0.0));
        spec[[n / 2 + 1, n / 2]] = Complex64::new(1.0, 0.0);
        let x = ifft2_centered(&spec);
        // one cycle per n samples along axis 0, unit amplitude / sqrt(n^2)
        for ((r, _c), v) in x
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .indexed_iter()
        {
            let phase = 2.0 * std::f64::consts::PI * (r as f64 - (n / 2) as f64) / n as f64;
            let want = Complex64::from_polar(1.0 / n as f64, phase);
            assert!((v - want).norm() < 1e-12);
        }
    }

    #[test]
    fn batched_matches_per_slab() {
        let x = random_field(&[3, 8, 8], 17);
        let y = fft2_centered(&x);
        for b in 0..3 {
            let slab = x.index_axis(ndarray::Axis(0), b).to_owned().into_dyn();
            let ys = fft2_centered(&slab);
            let yb = y.index_axis(ndarray::Axis(0), b);
            for (a, bv) in ys.iter().zip(yb.iter()) {
                assert_eq!(a, bv, "batch slab {b} must match exactly");
            }
        }
    }

    #[test]
    fn adjoint_property() {
        // <F x, y> == <x, F^-1 y> for the unitary pair
        let x = random_field(&[8, 8], 5);
        let y = random_field(&[8, 8], 6);
        let fx = fft2_centered(&x);
        let fiy = ifft2_centered(&y);
        let lhs: Complex64 = fx.iter().zip(y.iter()).map(|(a, b)| a * b.conj()).sum();
        let rhs: Complex64 = x.iter().zip(fiy.iter()).map(|(a, b)| a * b.conj()).sum();
        assert!((lhs - rhs).norm() < 1e-10);
    }
}
