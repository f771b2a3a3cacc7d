//! Forward imaging model: LED geometry, pupil construction, and the
//! intensity image formation for single and multiplexed illumination.
//!
//! A thin transparency o(x, y) illuminated by the tilted plane wave of an
//! off-axis LED has exit-wave spectrum O(u - u_l). The objective passes a
//! pupil disk of radius NA/lambda, and the sensor records the intensity
//! of the inverse transform. On the discrete grids used here that becomes:
//! crop an H_lo x W_lo window of the high-res spectrum centered on the
//! LED's frequency bin, multiply by the pupil, inverse-transform, take
//! the squared magnitude.

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;

use crate::config::OpticsConfig;
use crate::error::{FpmError, Result};
use crate::fft::{fft2_centered, ifft2_centered};

/// A complex object or reconstruction field with its pixel pitch.
#[derive(Clone, Debug)]
pub struct ComplexField {
    pub values: Array2<Complex64>,
    pub pitch_um: f64,
}

impl ComplexField {
    pub fn new(values: Array2<Complex64>, pitch_um: f64) -> Self {
        ComplexField { values, pitch_um }
    }

    pub fn shape(&self) -> (usize, usize) {
        let d = self.values.dim();
        (d.0, d.1)
    }
}

/// LED lattice offsets in pitch units from the matrix center.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedSet {
    pub offsets: Vec<(i32, i32)>,
}

impl LedSet {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Objective pupil: binary amplitude disk plus a phase surface, both on
/// the low-res frequency grid.
#[derive(Clone, Debug)]
pub struct Pupil {
    pub amplitude: Array2<f64>,
    pub phase: Array2<f64>,
}

impl Pupil {
    /// amplitude * exp(i * phase) as one complex array.
    pub fn complex(&self) -> Array2<Complex64> {
        let mut out = Array2::from_elem(self.amplitude.dim(), Complex64::new(0.0, 0.0));
        for ((o, &a), &p) in out
            .iter_mut()
            .zip(self.amplitude.iter())
            .zip(self.phase.iter())
        {
            *o = Complex64::from_polar(a, p);
        }
        out
    }
}

/// Per-LED brightness weights plus a shared exposure time.
#[derive(Clone, Debug, PartialEq)]
pub struct IlluminationPattern {
    pub weights: Vec<f64>,
    pub exposure_ms: f64,
}

/// Full exposure in milliseconds; the emulation scale is exposure_ms / 2000.
pub const FULL_EXPOSURE_MS: f64 = 2000.0;

impl IlluminationPattern {
    /// Dimensionless exposure scale epsilon = exposure_ms / 2000.
    pub fn epsilon(&self) -> f64 {
        self.exposure_ms / FULL_EXPOSURE_MS
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(FpmError::Domain(
                "pattern weights must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..=FULL_EXPOSURE_MS).contains(&self.exposure_ms) {
            return Err(FpmError::Domain(format!(
                "exposure must lie in [0, {FULL_EXPOSURE_MS}] ms, got {}",
                self.exposure_ms
            )));
        }
        Ok(())
    }
}

/// A stack of low-res intensity images, one per LED of a [`LedSet`].
#[derive(Clone, Debug)]
pub struct ImageStack {
    /// n x H_lo x W_lo intensities.
    pub images: Array3<f64>,
    /// Index into the LedSet for each image.
    pub led_indices: Vec<usize>,
    /// Exposure each image was recorded at, in milliseconds.
    pub exposure_ms: Vec<f64>,
}

impl ImageStack {
    pub fn len(&self) -> usize {
        self.images.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> (usize, usize) {
        let d = self.images.dim();
        (d.1, d.2)
    }

    /// Multiplies every image by `gain`, e.g. to express a unit-intensity
    /// simulation in sensor counts.
    pub fn scaled(&self, gain: f64) -> ImageStack {
        ImageStack {
            images: &self.images * gain,
            led_indices: self.led_indices.clone(),
            exposure_ms: self.exposure_ms.clone(),
        }
    }
}

/// Returns the `n` lattice offsets closest to the matrix center, ties
/// broken by ascending (i, j). For n = 69 at the default geometry this is
/// exactly the set { (i, j) : i^2 + j^2 <= 20 }, all brightfield.
pub fn select_centermost(cfg: &OpticsConfig, n: usize) -> Result<LedSet> {
    let (gh, gw) = cfg.led_grid;
    let half_i = (gh as i32) / 2;
    let half_j = (gw as i32) / 2;
    let mut cands: Vec<(i32, i32)> = Vec::new();
    for i in -(half_i - 1)..=(half_i - 1) {
        for j in -(half_j - 1)..=(half_j - 1) {
            cands.push((i, j));
        }
    }
    if n == 0 || n > cands.len() {
        return Err(FpmError::Size(format!(
            "requested {n} LEDs from a grid holding {}",
            cands.len()
        )));
    }
    cands.sort_by_key(|&(i, j)| (i * i + j * j, i, j));
    cands.truncate(n);
    Ok(LedSet { offsets: cands })
}

/// Transverse spatial frequency (u_x, u_y) in 1/um of the plane wave from
/// LED (i, j): u = sin(theta) / lambda resolved along each axis, signed by
/// the lattice offset. The forward model shifts the object spectrum by
/// MINUS this value (an LED on the +x side admits object frequencies on
/// the +x side of the pupil).
pub fn led_spatial_frequency(cfg: &OpticsConfig, led: (i32, i32)) -> (f64, f64) {
    let x = led.0 as f64 * cfg.led_pitch_mm * 1000.0;
    let y = led.1 as f64 * cfg.led_pitch_mm * 1000.0;
    let z = cfg.led_z_mm * 1000.0;
    let hyp = (x * x + y * y + z * z).sqrt();
    (
        x / (cfg.wavelength_um * hyp),
        y / (cfg.wavelength_um * hyp),
    )
}

/// Largest illumination NA over a LED set.
pub fn max_illumination_na(cfg: &OpticsConfig, leds: &LedSet) -> f64 {
    leds.offsets
        .iter()
        .map(|&led| {
            let (ux, uy) = led_spatial_frequency(cfg, led);
            (ux * ux + uy * uy).sqrt() * cfg.wavelength_um
        })
        .fold(0.0, f64::max)
}

/// Rounds a frequency pair to whole bins of the shared spectrum grid,
/// returned as (row, col) = (u_y, u_x) offsets.
pub fn frequency_to_bins(cfg: &OpticsConfig, n_lo: usize, u: (f64, f64)) -> (i64, i64) {
    let bin = cfg.bin_spacing(n_lo);
    ((u.1 / bin).round() as i64, (u.0 / bin).round() as i64)
}

/// Builds the aberration-free pupil on an `grid` = (H_lo, W_lo) frequency
/// grid: amplitude 1 inside |u| <= NA/lambda, 0 outside, phase 0.
pub fn build_pupil(cfg: &OpticsConfig, grid: (usize, usize)) -> Result<Pupil> {
    let (h, w) = grid;
    if h == 0 || w == 0 {
        return Err(FpmError::Config("pupil grid must be nonempty".into()));
    }
    let cutoff = cfg.cutoff_frequency();
    let bin_y = cfg.bin_spacing(h);
    let bin_x = cfg.bin_spacing(w);
    if cutoff > bin_y * (h as f64) / 2.0 || cutoff > bin_x * (w as f64) / 2.0 {
        return Err(FpmError::Config(format!(
            "pupil cutoff {cutoff:.4} /um exceeds the Nyquist extent of a {h}x{w} grid"
        )));
    }
    let mut amplitude = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let uy = (r as f64 - (h / 2) as f64) * bin_y;
            let ux = (c as f64 - (w / 2) as f64) * bin_x;
            if ux * ux + uy * uy <= cutoff * cutoff {
                amplitude[[r, c]] = 1.0;
            }
        }
    }
    Ok(Pupil {
        amplitude,
        phase: Array2::zeros((h, w)),
    })
}

/// Checks that an H_lo x W_lo window at bin offset `delta` fits inside an
/// H_hi x W_hi spectrum, returning the window's top-left corner.
pub fn window_corner(
    hi: (usize, usize),
    lo: (usize, usize),
    delta: (i64, i64),
) -> Result<(usize, usize)> {
    let r0 = hi.0 as i64 / 2 - lo.0 as i64 / 2 + delta.0;
    let c0 = hi.1 as i64 / 2 - lo.1 as i64 / 2 + delta.1;
    if r0 < 0 || c0 < 0 || r0 + lo.0 as i64 > hi.0 as i64 || c0 + lo.1 as i64 > hi.1 as i64 {
        return Err(FpmError::Config(format!(
            "frequency shift {delta:?} pushes the pupil window outside the {}x{} high-res grid",
            hi.0, hi.1
        )));
    }
    Ok((r0 as usize, c0 as usize))
}

fn check_object_shape(object: &ComplexField, pupil: &Pupil, f: usize) -> Result<()> {
    let (oh, ow) = object.shape();
    let (ph, pw) = pupil.amplitude.dim();
    if oh != ph * f || ow != pw * f {
        return Err(FpmError::Size(format!(
            "object {oh}x{ow} is not {f}x the pupil grid {ph}x{pw}"
        )));
    }
    Ok(())
}

/// Intensity image of `object` under a single LED with transverse
/// frequency `u`. The 1/f window scale makes this the ideal band-limited
/// downsampling: a unit flat field images to a unit flat field.
pub fn forward_single(
    object: &ComplexField,
    pupil: &Pupil,
    cfg: &OpticsConfig,
    u: (f64, f64),
) -> Result<Array2<f64>> {
    let f = cfg.upsample_factor;
    check_object_shape(object, pupil, f)?;
    let (h, w) = pupil.amplitude.dim();
    let delta = frequency_to_bins(cfg, h, u);
    let spectrum = fft2_centered(&object.values.to_owned().into_dyn());
    let spectrum = spectrum.into_dimensionality::<ndarray::Ix2>().expect("2d");
    windowed_intensity(&spectrum, pupil, (h, w), delta, f)
}

/// Shared kernel: crop, apply pupil, inverse-transform, square.
fn windowed_intensity(
    spectrum: &Array2<Complex64>,
    pupil: &Pupil,
    lo: (usize, usize),
    delta: (i64, i64),
    f: usize,
) -> Result<Array2<f64>> {
    let hi = spectrum.dim();
    let (r0, c0) = window_corner((hi.0, hi.1), lo, delta)?;
    let scale = 1.0 / f as f64;
    let p = pupil.complex();
    let mut window = Array2::from_elem(lo, Complex64::new(0.0, 0.0));
    for r in 0..lo.0 {
        for c in 0..lo.1 {
            window[[r, c]] = spectrum[[r0 + r, c0 + c]] * scale * p[[r, c]];
        }
    }
    let field = ifft2_centered(&window.into_dyn());
    let mut out = Array2::zeros(lo);
    for (o, v) in out.iter_mut().zip(field.iter()) {
        *o = v.norm_sqr();
    }
    Ok(out)
}

/// Incoherent multiplexed image: sum of c_l * forward_single over the set.
pub fn forward_multiplexed(
    object: &ComplexField,
    pupil: &Pupil,
    cfg: &OpticsConfig,
    pattern: &IlluminationPattern,
    leds: &LedSet,
) -> Result<Array2<f64>> {
    if pattern.weights.len() != leds.len() {
        return Err(FpmError::Size(format!(
            "pattern has {} weights for {} LEDs",
            pattern.weights.len(),
            leds.len()
        )));
    }
    let f = cfg.upsample_factor;
    check_object_shape(object, pupil, f)?;
    let (h, w) = pupil.amplitude.dim();
    let spectrum = fft2_centered(&object.values.to_owned().into_dyn());
    let spectrum = spectrum.into_dimensionality::<ndarray::Ix2>().expect("2d");
    let mut acc = Array2::<f64>::zeros((h, w));
    for (&led, &c) in leds.offsets.iter().zip(&pattern.weights) {
        let u = led_spatial_frequency(cfg, led);
        let delta = frequency_to_bins(cfg, h, u);
        let img = windowed_intensity(&spectrum, pupil, (h, w), delta, f)?;
        acc.zip_mut_with(&img, |a, &b| *a += c * b);
    }
    Ok(acc)
}

/// Simulates the full per-LED stack for a LED set (unit brightness each,
/// recorded at full exposure).
pub fn simulate_stack(
    object: &ComplexField,
    pupil: &Pupil,
    cfg: &OpticsConfig,
    leds: &LedSet,
) -> Result<ImageStack> {
    let f = cfg.upsample_factor;
    check_object_shape(object, pupil, f)?;
    let (h, w) = pupil.amplitude.dim();
    let spectrum = fft2_centered(&object.values.to_owned().into_dyn());
    let spectrum = spectrum.into_dimensionality::<ndarray::Ix2>().expect("2d");
    let mut images = Array3::zeros((leds.len(), h, w));
    for (l, &led) in leds.offsets.iter().enumerate() {
        let u = led_spatial_frequency(cfg, led);
        let delta = frequency_to_bins(cfg, h, u);
        let img = windowed_intensity(&spectrum, pupil, (h, w), delta, f)?;
        images.index_axis_mut(Axis(0), l).assign(&img);
    }
    Ok(ImageStack {
        images,
        led_indices: (0..leds.len()).collect(),
        exposure_ms: vec![FULL_EXPOSURE_MS; leds.len()],
    })
}

/// Emulates the single multiplexed exposure of Eq-style pattern imaging:
/// I_s = epsilon * sum_l c_l * I_l over a full-brightness full-exposure
/// stack, with epsilon = exposure_ms / 2000.
pub fn emulate_pattern_image(
    stack: &ImageStack,
    pattern: &IlluminationPattern,
) -> Result<Array2<f64>> {
    if pattern.weights.len() != stack.len() {
        return Err(FpmError::Size(format!(
            "pattern has {} weights for a stack of {}",
            pattern.weights.len(),
            stack.len()
        )));
    }
    let (h, w) = stack.image_shape();
    let eps = pattern.epsilon();
    let mut acc = Array2::<f64>::zeros((h, w));
    for (l, &c) in pattern.weights.iter().enumerate() {
        let img = stack.images.index_axis(Axis(0), l);
        acc.zip_mut_with(&img, |a, &b| *a += c * b);
    }
    acc.mapv_inplace(|v| v * eps);
    Ok(acc)
}

/// Per-LED window offsets in bins for a whole LED set.
pub fn led_bin_offsets(cfg: &OpticsConfig, n_lo: usize, leds: &LedSet) -> Vec<(i64, i64)> {
    led_bin_offsets_rect(cfg, (n_lo, n_lo), leds)
}

/// Per-LED window offsets for a possibly non-square (H_lo, W_lo) grid,
/// where each axis has its own bin spacing.
pub fn led_bin_offsets_rect(
    cfg: &OpticsConfig,
    grid: (usize, usize),
    leds: &LedSet,
) -> Vec<(i64, i64)> {
    let bin_y = cfg.bin_spacing(grid.0);
    let bin_x = cfg.bin_spacing(grid.1);
    leds.offsets
        .iter()
        .map(|&led| {
            let (ux, uy) = led_spatial_frequency(cfg, led);
            ((uy / bin_y).round() as i64, (ux / bin_x).round() as i64)
        })
        .collect()
}

/// Boolean mask of the synthetic passband on the high-res frequency grid:
/// the union of the pupil disk shifted to every LED's frequency bin. This
/// is the set of object frequencies some image in the stack actually
/// measures.
pub fn synthetic_passband(cfg: &OpticsConfig, n_hi: usize, leds: &LedSet) -> Array2<bool> {
    let n_lo = n_hi / cfg.upsample_factor;
    let bin = cfg.bin_spacing(n_lo);
    let cutoff = cfg.cutoff_frequency();
    let offsets = led_bin_offsets(cfg, n_lo, leds);
    let mut mask = Array2::from_elem((n_hi, n_hi), false);
    for r in 0..n_hi {
        for c in 0..n_hi {
            for &(dy, dx) in &offsets {
                let uy = (r as f64 - (n_hi / 2) as f64 - dy as f64) * bin;
                let ux = (c as f64 - (n_hi / 2) as f64 - dx as f64) * bin;
                if ux * ux + uy * uy <= cutoff * cutoff {
                    mask[[r, c]] = true;
                    break;
                }
            }
        }
    }
    mask
}
