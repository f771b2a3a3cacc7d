//! Quality metrics for reconstructions: passband-restricted spectral
//! error, pupil phase error, and amplitude dip depth along a line cut.

use ndarray::{Array1, Array2, IxDyn};
use num_complex::Complex64;

use crate::error::{FpmError, Result};
use crate::fft::{fft1_centered, fft2_centered, ifft1_centered};
use crate::optics::{ComplexField, Pupil};

/// Relative spectral error between a reconstruction and the truth over a
/// frequency mask, after a global complex scale alignment.
///
/// The forward model fixes the object only up to a complex factor inside
/// the measured band, so the error is computed against beta * recon with
/// beta the least-squares fit of truth onto recon: invariant under that
/// gauge, zero for a perfect reconstruction.
pub fn passband_spectral_error(
    recon: &ComplexField,
    truth: &ComplexField,
    mask: &Array2<bool>,
) -> Result<f64> {
    if recon.shape() != truth.shape() {
        return Err(FpmError::Size(format!(
            "fields disagree: {:?} vs {:?}",
            recon.shape(),
            truth.shape()
        )));
    }
    if mask.dim() != recon.shape() {
        return Err(FpmError::Size(format!(
            "mask {:?} for fields {:?}",
            mask.dim(),
            recon.shape()
        )));
    }
    let a = fft2_centered(&recon.values.to_owned().into_dyn());
    let b = fft2_centered(&truth.values.to_owned().into_dyn());
    let (h, w) = mask.dim();
    let mut num = Complex64::new(0.0, 0.0);
    let mut den = 0.0;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                let av = a[IxDyn(&[y, x])];
                let bv = b[IxDyn(&[y, x])];
                num += av.conj() * bv;
                den += av.norm_sqr();
            }
        }
    }
    if den == 0.0 {
        return Err(FpmError::Domain(
            "reconstruction has no energy inside the mask".into(),
        ));
    }
    let beta = num / den;
    let mut err = 0.0;
    let mut norm = 0.0;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                let av = a[IxDyn(&[y, x])];
                let bv = b[IxDyn(&[y, x])];
                err += (beta * av - bv).norm_sqr();
                norm += bv.norm_sqr();
            }
        }
    }
    if norm == 0.0 {
        return Err(FpmError::Domain("truth has no energy inside the mask".into()));
    }
    Ok((err / norm).sqrt())
}

/// Mean absolute phase difference between two pupils inside the
/// amplitude support of the reference.
pub fn pupil_phase_error(recovered: &Pupil, reference: &Pupil) -> Result<f64> {
    if recovered.phase.dim() != reference.phase.dim() {
        return Err(FpmError::Size(format!(
            "pupils disagree: {:?} vs {:?}",
            recovered.phase.dim(),
            reference.phase.dim()
        )));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for ((&p, &q), &a) in recovered
        .phase
        .iter()
        .zip(reference.phase.iter())
        .zip(reference.amplitude.iter())
    {
        if a != 0.0 {
            let mut d = p - q;
            while d > std::f64::consts::PI {
                d -= 2.0 * std::f64::consts::PI;
            }
            while d < -std::f64::consts::PI {
                d += 2.0 * std::f64::consts::PI;
            }
            acc += d.abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(FpmError::Domain("reference pupil has empty support".into()));
    }
    Ok(acc / count as f64)
}

/// Sinc-interpolates one row of a field by zero-padding its spectrum,
/// returning the upsampled amplitude profile. `factor` of 1 returns the
/// row's own amplitudes.
pub fn amplitude_profile(field: &Array2<f64>, row: usize, factor: usize) -> Result<Array1<f64>> {
    let (h, w) = field.dim();
    if row >= h {
        return Err(FpmError::Size(format!("row {row} outside {h}x{w}")));
    }
    if factor == 0 {
        return Err(FpmError::Config("upsample factor must be positive".into()));
    }
    let amps = field.row(row).mapv(|v| v.max(0.0).sqrt());
    if factor == 1 {
        return Ok(amps);
    }
    let line = amps.mapv(|v| Complex64::new(v, 0.0));
    let spec = fft1_centered(&line);
    let n = w * factor;
    let mut padded = Array1::from_elem(n, Complex64::new(0.0, 0.0));
    let start = n / 2 - w / 2;
    for i in 0..w {
        padded[start + i] = spec[i];
    }
    let up = ifft1_centered(&padded);
    Ok(up.mapv(|v| v.norm() * (factor as f64).sqrt()))
}

/// Relative dip depth between two peaks of a profile: finds the maxima
/// nearest the two expected positions and the minimum strictly between
/// them, returning 1 - valley / min(peaks). Positive when the profile
/// actually dips; 0 or negative when the features have merged.
pub fn dip_depth(profile: &Array1<f64>, near_a: usize, near_b: usize, search: usize) -> Result<f64> {
    let n = profile.len();
    if near_a >= n || near_b >= n || near_a == near_b {
        return Err(FpmError::Size(format!(
            "peak positions {near_a}, {near_b} in a {n}-sample profile"
        )));
    }
    let (lo, hi) = if near_a < near_b {
        (near_a, near_b)
    } else {
        (near_b, near_a)
    };
    let peak_at = |center: usize| -> (usize, f64) {
        let s = center.saturating_sub(search);
        let e = (center + search + 1).min(n);
        let mut best = (center, profile[center]);
        for i in s..e {
            if profile[i] > best.1 {
                best = (i, profile[i]);
            }
        }
        best
    };
    let (ia, pa) = peak_at(lo);
    let (ib, pb) = peak_at(hi);
    if ib <= ia + 1 {
        return Err(FpmError::Domain(format!(
            "peaks collapsed to neighbors at {ia}, {ib}"
        )));
    }
    let mut valley = f64::INFINITY;
    for i in ia + 1..ib {
        valley = valley.min(profile[i]);
    }
    let ref_peak = pa.min(pb);
    if ref_peak <= 0.0 {
        return Err(FpmError::Domain("peaks have no amplitude".into()));
    }
    Ok(1.0 - valley / ref_peak)
}

/// Complex field from an intensity image at zero phase; convenience for
/// profiling raw camera frames with the field-based metrics.
pub fn intensity_as_field(image: &Array2<f64>, pitch_um: f64) -> ComplexField {
    ComplexField {
        values: image.mapv(|v| Complex64::new(v.max(0.0).sqrt(), 0.0)),
        pitch_um,
    }
}

/// Root-mean-square difference between two real images.
pub fn rms_difference(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(FpmError::Size(format!(
            "images disagree: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += (x - y) * (x - y);
    }
    Ok((acc / a.len() as f64).sqrt())
}

/// Mean relative intensity error |pred - truth| / mean(truth), the
/// noise-robustness figure reported alongside training runs.
pub fn mean_relative_error(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(FpmError::Size(format!(
            "images disagree: {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let mean: f64 = truth.iter().sum::<f64>() / truth.len() as f64;
    if mean <= 0.0 {
        return Err(FpmError::Domain("truth image has no energy".into()));
    }
    let mut acc = 0.0;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        acc += (p - t).abs();
    }
    Ok(acc / truth.len() as f64 / mean)
}
