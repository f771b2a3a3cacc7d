//! Synthetic complex objects and dataset rendering.
//!
//! Three families cover the test needs: square-wave amplitude gratings
//! (optionally restricted to a few bars), a two-point pair for resolution
//! probes, and smooth random blob fields standing in for cell-like
//! samples. All generation is deterministic in the seed.

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::OpticsConfig;
use crate::error::{FpmError, Result};
use crate::noise::{apply_poisson_approx, apply_quantization, NoiseModel};
use crate::optics::{build_pupil, simulate_stack, ComplexField, ImageStack, LedSet};
use crate::recon::{reconstruct, ReconSettings};

/// What the generated field looks like.
#[derive(Clone, Debug, PartialEq)]
pub enum PhantomKind {
    /// Square-wave amplitude grating with one period per `feature_scale_um`.
    /// `count` limits rendering to that many bright bars around the center;
    /// `None` fills the field.
    Bars { count: Option<usize> },
    /// Two points at `feature_scale_um` spacing on the center row.
    TwoPoint,
    /// Smooth random amplitude/phase features.
    Blobs { count: usize },
}

/// Recipe for a deterministic synthetic object.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    /// High-res grid size (square).
    pub size: usize,
    /// Amplitude bounds, within [0, 1].
    pub amplitude_range: (f64, f64),
    /// Phase bounds in radians, within [-pi, pi].
    pub phase_range: (f64, f64),
    /// Bars: grating period; two-point: spacing; blobs: feature radius. In microns.
    pub feature_scale_um: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self, pitch_um: f64) -> Result<()> {
        if self.size < 2 {
            return Err(FpmError::Config(format!(
                "phantom size must be at least 2, got {}",
                self.size
            )));
        }
        let (alo, ahi) = self.amplitude_range;
        if !(0.0 <= alo && alo <= ahi && ahi <= 1.0) {
            return Err(FpmError::Config(format!(
                "amplitude range [{alo}, {ahi}] must sit inside [0, 1]"
            )));
        }
        let (plo, phi) = self.phase_range;
        let pi = std::f64::consts::PI;
        if !(-pi <= plo && plo <= phi && phi <= pi) {
            return Err(FpmError::Config(format!(
                "phase range [{plo}, {phi}] must sit inside [-pi, pi]"
            )));
        }
        if !(self.feature_scale_um.is_finite() && self.feature_scale_um >= 0.0) {
            return Err(FpmError::Config(format!(
                "feature scale {} must be finite and nonnegative",
                self.feature_scale_um
            )));
        }
        let zero_ok = matches!(self.kind, PhantomKind::TwoPoint) && self.feature_scale_um == 0.0;
        if self.feature_scale_um < pitch_um && !zero_ok {
            return Err(FpmError::Config(format!(
                "feature scale {} um is below the {} um grid pixel",
                self.feature_scale_um, pitch_um
            )));
        }
        if let PhantomKind::Blobs { count } = self.kind {
            if count == 0 {
                return Err(FpmError::Config("blob phantom needs at least 1 blob".into()));
            }
        }
        if let PhantomKind::Bars { count: Some(0) } = self.kind {
            return Err(FpmError::Config("bar phantom needs at least 1 bar".into()));
        }
        Ok(())
    }
}

fn phase_for_bar(range: (f64, f64), index: usize, total: usize) -> f64 {
    if total <= 1 {
        return range.0;
    }
    range.0 + (range.1 - range.0) * index as f64 / (total - 1) as f64
}

/// Renders the spec on a grid with the given pixel pitch.
pub fn generate_phantom(spec: &PhantomSpec, pitch_um: f64) -> Result<ComplexField> {
    spec.validate(pitch_um)?;
    let n = spec.size;
    let (alo, ahi) = spec.amplitude_range;
    let (plo, phi) = spec.phase_range;
    let mut amp = Array2::<f64>::from_elem((n, n), alo);
    let mut ph = Array2::<f64>::zeros((n, n));

    match spec.kind {
        PhantomKind::Bars { count } => {
            let period_px = spec.feature_scale_um / pitch_um;
            match count {
                None => {
                    // full-field square wave along x; bright half-period first
                    let total = (n as f64 / period_px).ceil() as usize;
                    for x in 0..n {
                        let t = x as f64 / period_px;
                        if t.fract() < 0.5 {
                            let bar = t.floor() as usize;
                            for y in 0..n {
                                amp[[y, x]] = ahi;
                                ph[[y, x]] = phase_for_bar((plo, phi), bar, total.max(1));
                            }
                        }
                    }
                }
                Some(k) => {
                    // k bright bars centered on the grid, one per period
                    let width = ((period_px / 2.0).floor() as usize).max(1);
                    let step = period_px.round() as usize;
                    let len = ((period_px * 3.0).round() as usize).max(3).min(n);
                    let r0 = n / 2 - len / 2;
                    let span = (k - 1) * step + width;
                    if span > n {
                        return Err(FpmError::Config(format!(
                            "{k} bars at period {period_px:.1} px exceed the {n} px grid"
                        )));
                    }
                    let c0 = n / 2 - span / 2;
                    for b in 0..k {
                        let phase = phase_for_bar((plo, phi), b, k);
                        for x in c0 + b * step..c0 + b * step + width {
                            for y in r0..r0 + len {
                                amp[[y, x]] = ahi;
                                ph[[y, x]] = phase;
                            }
                        }
                    }
                }
            }
        }
        PhantomKind::TwoPoint => {
            let d = (spec.feature_scale_um / pitch_um).round() as usize;
            let y = n / 2;
            let c1 = n / 2 - (d + 1) / 2;
            let c2 = c1 + d;
            if c2 >= n {
                return Err(FpmError::Size(format!(
                    "two-point spacing {d} px exceeds the {n} px grid"
                )));
            }
            if d == 0 {
                // both points land on one pixel: amplitudes add, then clip
                amp[[y, c1]] = (alo + 2.0 * (ahi - alo)).min(ahi);
                ph[[y, c1]] = 0.5 * (plo + phi);
            } else {
                amp[[y, c1]] = ahi;
                amp[[y, c2]] = ahi;
                ph[[y, c1]] = plo;
                ph[[y, c2]] = phi;
            }
        }
        PhantomKind::Blobs { count } => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let sigma_px = spec.feature_scale_um / pitch_um;
            let mut araw = Array2::<f64>::zeros((n, n));
            let mut praw = Array2::<f64>::zeros((n, n));
            for _ in 0..count {
                let cy = (0.15 + 0.7 * rng.random::<f64>()) * n as f64;
                let cx = (0.15 + 0.7 * rng.random::<f64>()) * n as f64;
                let s = (0.7 + 0.9 * rng.random::<f64>()) * sigma_px;
                let wa = 0.3 + 0.7 * rng.random::<f64>();
                let wp = 2.0 * rng.random::<f64>() - 1.0;
                for y in 0..n {
                    for x in 0..n {
                        let dy = y as f64 - cy;
                        let dx = x as f64 - cx;
                        let g = (-(dy * dy + dx * dx) / (2.0 * s * s)).exp();
                        araw[[y, x]] += wa * g;
                        praw[[y, x]] += wp * g;
                    }
                }
            }
            let remap = |src: &Array2<f64>, lo: f64, hi: f64| {
                let mn = src.iter().cloned().fold(f64::INFINITY, f64::min);
                let mx = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let scale = (hi - lo) / (mx - mn).max(1e-12);
                src.mapv(|v| lo + scale * (v - mn))
            };
            amp = remap(&araw, alo, ahi);
            ph = remap(&praw, plo, phi);
        }
    }

    let values = ndarray::Zip::from(&amp)
        .and(&ph)
        .map_collect(|&a, &p| Complex64::from_polar(a, p));
    Ok(ComplexField {
        values,
        pitch_um,
    })
}

/// How the supervision target of a rendered example is produced.
#[derive(Clone, Debug)]
pub enum TargetMode {
    /// Target is the generating phantom itself.
    Oracle,
    /// Target is the iterative reconstruction of the rendered stack.
    Pipeline(ReconSettings),
}

/// One supervised example: a full measurement stack and its target field.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub stack: ImageStack,
    pub target: ComplexField,
}

/// Renders one stack per phantom and pairs it with a target. `gain`
/// scales intensities to camera counts before optional noise; noise uses
/// one deterministic substream per (phantom, image).
pub fn render_training_set(
    phantoms: &[ComplexField],
    cfg: &OpticsConfig,
    leds: &LedSet,
    noise: Option<&NoiseModel>,
    gain: f64,
    mode: &TargetMode,
) -> Result<Vec<TrainingExample>> {
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(FpmError::Config(format!("render gain {gain} must be positive")));
    }
    let mut out = Vec::with_capacity(phantoms.len());
    for (pi, phantom) in phantoms.iter().enumerate() {
        let n_lo = phantom.values.shape()[0] / cfg.upsample_factor;
        let w_lo = phantom.values.shape()[1] / cfg.upsample_factor;
        let pupil = build_pupil(cfg, (n_lo, w_lo))?;
        let mut stack = simulate_stack(phantom, &pupil, cfg, leds)?.scaled(gain);
        if let Some(model) = noise {
            for (li, mut img) in stack.images.outer_iter_mut().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
                rng.set_stream((pi * leds.offsets.len() + li) as u64 + 1);
                let noisy = apply_poisson_approx(&img.to_owned(), model, &mut rng)?;
                let quant = apply_quantization(&noisy, model, &mut rng)?;
                img.assign(&quant);
            }
        }
        let target = match mode {
            TargetMode::Oracle => phantom.clone(),
            TargetMode::Pipeline(settings) => reconstruct(&stack, cfg, leds, settings)?.object,
        };
        out.push(TrainingExample { stack, target });
    }
    Ok(out)
}
