//! Sensor noise emulation and calibration.
//!
//! Intensities are modeled in camera counts. Shot noise uses a Gaussian
//! approximation of the Poisson distribution whose variance is the signal
//! divided by a fixed scale factor m, and quantization adds the uniform
//! sub-count dither of an ideal ADC. Calibration recovers m from repeated
//! exposures of a static scene by fitting the per-pixel noise curve
//! sigma = s * sqrt(mu) through the origin.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{FpmError, Result};

/// Default slope of the sigma vs sqrt(mean) noise curve.
pub const DEFAULT_NOISE_SLOPE: f64 = 0.41;

/// Sensor noise parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    /// Poisson scale factor: noise variance is signal / m.
    pub m: f64,
    /// ADC bit depth; saturation sits at 2^bit_depth - 1.
    pub bit_depth: u32,
    /// Base seed for the emulation streams.
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            m: 1.0 / (DEFAULT_NOISE_SLOPE * DEFAULT_NOISE_SLOPE),
            bit_depth: 16,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(FpmError::Config(format!(
                "noise scale m must be positive and finite, got {}",
                self.m
            )));
        }
        if !(8..=16).contains(&self.bit_depth) {
            return Err(FpmError::Config(format!(
                "bit depth must be within 8..=16, got {}",
                self.bit_depth
            )));
        }
        Ok(())
    }

    pub fn saturation(&self) -> f64 {
        ((1u64 << self.bit_depth) - 1) as f64
    }
}

/// Adds signal-dependent shot noise: per pixel
/// max((sqrt(I*m)*g + I*m) / m, 0) with g standard normal, which is
/// I + sqrt(I/m)*g clamped at zero.
pub fn apply_poisson_approx<R: Rng>(
    intensity: &Array2<f64>,
    model: &NoiseModel,
    rng: &mut R,
) -> Result<Array2<f64>> {
    model.validate()?;
    if let Some(bad) = intensity.iter().find(|v| !(**v >= 0.0)) {
        return Err(FpmError::Domain(format!(
            "shot noise input must be nonnegative, found {bad}"
        )));
    }
    let m = model.m;
    Ok(intensity.mapv(|i| {
        let g: f64 = StandardNormal.sample(rng);
        (((i * m).sqrt() * g + i * m) / m).max(0.0)
    }))
}

/// Clamps to the sensor range [0, 2^bits - 1] and adds uniform [0,1)
/// sub-count noise per pixel.
pub fn apply_quantization<R: Rng>(
    intensity: &Array2<f64>,
    model: &NoiseModel,
    rng: &mut R,
) -> Result<Array2<f64>> {
    model.validate()?;
    let hi = model.saturation();
    Ok(intensity.mapv(|i| i.clamp(0.0, hi) + rng.random::<f64>()))
}

/// Fits sigma = s * sqrt(mu) through the origin over the per-pixel sample
/// means and standard deviations of `repeats` (R, H, W) and returns
/// (s, m = 1/s^2). Noiseless input gives s = 0 and m = infinity.
pub fn calibrate_noise(repeats: &ndarray::Array3<f64>) -> Result<(f64, f64)> {
    let r = repeats.shape()[0];
    if r < 2 {
        return Err(FpmError::Size(format!(
            "calibration needs at least 2 repeats, got {r}"
        )));
    }
    let (h, w) = (repeats.shape()[1], repeats.shape()[2]);
    let mut num = 0.0;
    let mut den = 0.0;
    for y in 0..h {
        for x in 0..w {
            let mut mean = 0.0;
            for k in 0..r {
                mean += repeats[[k, y, x]];
            }
            mean /= r as f64;
            let mut ss = 0.0;
            for k in 0..r {
                let d = repeats[[k, y, x]] - mean;
                ss += d * d;
            }
            let sigma = (ss / (r - 1) as f64).sqrt();
            let root_mu = mean.max(0.0).sqrt();
            num += root_mu * sigma;
            den += root_mu * root_mu;
        }
    }
    if den == 0.0 {
        return Err(FpmError::Domain(
            "calibration fit is degenerate: every pixel mean is zero".into(),
        ));
    }
    let s = num / den;
    let m = if s == 0.0 { f64::INFINITY } else { 1.0 / (s * s) };
    Ok((s, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_intensity_stays_zero() {
        let model = NoiseModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let i = Array2::zeros((4, 4));
        let out = apply_poisson_approx(&i, &model, &mut rng).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shot_noise_std_matches_model() {
        let model = NoiseModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let i = Array2::from_elem((n / 100, 100), 1000.0);
        let out = apply_poisson_approx(&i, &model, &mut rng).unwrap();
        let mean = out.sum() / n as f64;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let expected = (1000.0 / model.m).sqrt();
        let got = var.sqrt();
        assert!(
            (got - expected).abs() / expected < 0.03,
            "std {got} vs expected {expected}"
        );
    }

    #[test]
    fn negative_input_rejected() {
        let model = NoiseModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut i = Array2::zeros((2, 2));
        i[[0, 1]] = -5.0;
        assert!(apply_poisson_approx(&i, &model, &mut rng).is_err());
    }

    #[test]
    fn quantization_bounds() {
        let model = NoiseModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut i = Array2::zeros((1, 3));
        i[[0, 0]] = 70_000.0;
        i[[0, 1]] = -5.0;
        i[[0, 2]] = 100.0;
        let out = apply_quantization(&i, &model, &mut rng).unwrap();
        assert!(out[[0, 0]] >= 65_535.0 && out[[0, 0]] < 65_536.0);
        assert!(out[[0, 1]] >= 0.0 && out[[0, 1]] < 1.0);
        assert!(out[[0, 2]] >= 100.0 && out[[0, 2]] < 101.0);
    }

    #[test]
    fn calibration_recovers_default_slope() {
        let model = NoiseModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (h, w, r) = (16, 16, 100);
        let scene = Array2::from_shape_fn((h, w), |(y, x)| 200.0 + (y * w + x) as f64 * 40.0);
        let mut repeats = Array3::zeros((r, h, w));
        for k in 0..r {
            let noisy = apply_poisson_approx(&scene, &model, &mut rng).unwrap();
            repeats.index_axis_mut(ndarray::Axis(0), k).assign(&noisy);
        }
        let (s, m) = calibrate_noise(&repeats).unwrap();
        assert!((s - DEFAULT_NOISE_SLOPE).abs() / DEFAULT_NOISE_SLOPE < 0.05, "s = {s}");
        assert!((m - model.m).abs() / model.m < 0.11, "m = {m}");
    }

    #[test]
    fn calibration_recovers_unit_slope() {
        let model = NoiseModel {
            m: 1.0,
            ..NoiseModel::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (h, w, r) = (16, 16, 100);
        let scene = Array2::from_elem((h, w), 500.0);
        let mut repeats = Array3::zeros((r, h, w));
        for k in 0..r {
            let noisy = apply_poisson_approx(&scene, &model, &mut rng).unwrap();
            repeats.index_axis_mut(ndarray::Axis(0), k).assign(&noisy);
        }
        let (s, _) = calibrate_noise(&repeats).unwrap();
        assert!((s - 1.0).abs() < 0.05, "s = {s}");
    }

    #[test]
    fn noiseless_repeats_give_zero_slope() {
        let scene = Array2::from_elem((4, 4), 123.0);
        let mut repeats = Array3::zeros((3, 4, 4));
        for k in 0..3 {
            repeats.index_axis_mut(ndarray::Axis(0), k).assign(&scene);
        }
        let (s, m) = calibrate_noise(&repeats).unwrap();
        assert_eq!(s, 0.0);
        assert!(m.is_infinite());
    }
}
