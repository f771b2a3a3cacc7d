//! Iterative reconstruction: amplitude-loss gradient descent over the
//! complex object (and optionally the pupil phase) with Adam, plus the
//! patch split/merge machinery for large fields.
//!
//! The forward/backward pipeline is expressed on the differentiation
//! tape, so the solver and the gradient checker exercise the same code.
//!
//! The model has an exact gauge freedom: multiplying the pupil by
//! exp(i(a + b.u)) and the object spectrum by its conjugate leaves every
//! simulated intensity unchanged (window offsets are whole bins, so the
//! linear term is a shared plane). Reconstruction therefore ends with a
//! normalization that moves the fitted constant-plus-linear pupil phase
//! component into the object, making the returned pair canonical.

use ndarray::{Array2, Array3, Axis, IxDyn};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::autodiff::{AdamState, DiffGraph, NodeId, Tensor};
use crate::config::OpticsConfig;
use crate::error::{FpmError, Result};
use crate::fft::{fft2_centered, ifft2_centered};
use crate::optics::{build_pupil, led_bin_offsets_rect, ComplexField, ImageStack, LedSet, Pupil};

/// Solver parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconSettings {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Patch grid (rows, cols); (1, 1) reconstructs the field whole.
    pub patch_grid: (usize, usize),
    /// Pixels shared between neighboring patches, on the low-res grid.
    pub overlap: usize,
    pub pupil_phase_learning: bool,
}

impl Default for ReconSettings {
    fn default() -> Self {
        ReconSettings {
            learning_rate: 0.2,
            iterations: 3000,
            patch_grid: (4, 4),
            overlap: 8,
            pupil_phase_learning: true,
        }
    }
}

impl ReconSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FpmError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.iterations < 1 {
            return Err(FpmError::Config("iterations must be at least 1".into()));
        }
        if self.patch_grid.0 == 0 || self.patch_grid.1 == 0 {
            return Err(FpmError::Config("patch grid must be nonzero".into()));
        }
        Ok(())
    }
}

/// Background to remove from a measured stack.
pub enum Background {
    /// One scalar per image.
    Scalars(Vec<f64>),
    /// One image shared by the whole stack.
    Image(Array2<f64>),
}

/// Elementwise max(I - background, 0).
pub fn subtract_background(stack: &ImageStack, background: &Background) -> Result<ImageStack> {
    let (h, w) = stack.image_shape();
    let mut images = stack.images.clone();
    match background {
        Background::Scalars(bs) => {
            if bs.len() != stack.len() {
                return Err(FpmError::Size(format!(
                    "{} backgrounds for {} images",
                    bs.len(),
                    stack.len()
                )));
            }
            if let Some(b) = bs.iter().find(|b| !(**b >= 0.0)) {
                return Err(FpmError::Domain(format!("negative background {b}")));
            }
            for (l, &b) in bs.iter().enumerate() {
                images
                    .index_axis_mut(Axis(0), l)
                    .mapv_inplace(|v| (v - b).max(0.0));
            }
        }
        Background::Image(bg) => {
            if bg.dim() != (h, w) {
                return Err(FpmError::Size(format!(
                    "background {:?} for {h}x{w} images",
                    bg.dim()
                )));
            }
            if let Some(b) = bg.iter().find(|b| !(**b >= 0.0)) {
                return Err(FpmError::Domain(format!("negative background {b}")));
            }
            for mut img in images.outer_iter_mut() {
                img.zip_mut_with(bg, |v, &b| *v = (*v - b).max(0.0));
            }
        }
    }
    Ok(ImageStack {
        images,
        led_indices: stack.led_indices.clone(),
        exposure_ms: stack.exposure_ms.clone(),
    })
}

/// Per-image mean over a corner window of the given side length, a cheap
/// background estimate when that corner is known to be dark.
pub fn estimate_background(stack: &ImageStack, corner: usize) -> Result<Vec<f64>> {
    let (h, w) = stack.image_shape();
    if corner == 0 || corner > h || corner > w {
        return Err(FpmError::Config(format!(
            "corner window {corner} for {h}x{w} images"
        )));
    }
    Ok(stack
        .images
        .outer_iter()
        .map(|img| {
            let mut acc = 0.0;
            for y in 0..corner {
                for x in 0..corner {
                    acc += img[[y, x]];
                }
            }
            acc / (corner * corner) as f64
        })
        .collect())
}

/// Mean image over the stack, square-rooted, replicated f times per axis:
/// the standard zero-phase starting object.
pub fn init_object(stack: &ImageStack, cfg: &OpticsConfig) -> Result<ComplexField> {
    if stack.is_empty() {
        return Err(FpmError::Size("cannot initialize from an empty stack".into()));
    }
    let f = cfg.upsample_factor;
    let (h, w) = stack.image_shape();
    let inv = 1.0 / stack.len() as f64;
    let mut mean = Array2::<f64>::zeros((h, w));
    for img in stack.images.outer_iter() {
        mean.zip_mut_with(&img, |a, &b| *a += b * inv);
    }
    let mut values = Array2::from_elem((h * f, w * f), Complex64::new(0.0, 0.0));
    for y in 0..h * f {
        for x in 0..w * f {
            let v = mean[[y / f, x / f]].max(0.0).sqrt();
            values[[y, x]] = Complex64::new(v, 0.0);
        }
    }
    Ok(ComplexField {
        values,
        pitch_um: cfg.high_res_pitch_um(),
    })
}

/// Sum of squared amplitude differences between two stacks.
pub fn amplitude_loss(measured: &ImageStack, simulated: &ImageStack) -> Result<f64> {
    if measured.images.dim() != simulated.images.dim() {
        return Err(FpmError::Size(format!(
            "stacks disagree: {:?} vs {:?}",
            measured.images.dim(),
            simulated.images.dim()
        )));
    }
    let mut loss = 0.0;
    for (&a, &b) in measured.images.iter().zip(simulated.images.iter()) {
        if !(a >= 0.0) || !(b >= 0.0) {
            return Err(FpmError::Domain(format!(
                "intensities must be nonnegative, got {a} and {b}"
            )));
        }
        let d = a.sqrt() - b.sqrt();
        loss += d * d;
    }
    Ok(loss)
}

/// Output of a reconstruction.
#[derive(Clone, Debug)]
pub struct ReconResult {
    pub object: ComplexField,
    pub pupil: Pupil,
    pub loss_history: Vec<f64>,
}

struct ReconGraph {
    graph: DiffGraph,
    o_re: NodeId,
    o_im: NodeId,
    theta: NodeId,
    loss: NodeId,
}

fn stack_offsets(
    stack: &ImageStack,
    cfg: &OpticsConfig,
    leds: &LedSet,
) -> Result<Vec<(i64, i64)>> {
    let all = led_bin_offsets_rect(cfg, stack.image_shape(), leds);
    stack
        .led_indices
        .iter()
        .map(|&i| {
            all.get(i).copied().ok_or_else(|| {
                FpmError::Size(format!(
                    "stack references LED {i} but the set has {}",
                    leds.len()
                ))
            })
        })
        .collect()
}

/// Wires the amplitude-loss pipeline onto existing leaves: object parts,
/// pupil phase, fixed pupil amplitude, and fixed measured amplitudes.
fn wire_recon_loss(
    g: &mut DiffGraph,
    o_re: NodeId,
    o_im: NodeId,
    theta: NodeId,
    amask: NodeId,
    a_meas: NodeId,
    offsets: Vec<(i64, i64)>,
    lo: (usize, usize),
    f: usize,
) -> Result<NodeId> {
    let n_images = offsets.len();
    let o = g.complex_from_parts(o_re, o_im)?;
    let spectrum = g.fft2(o)?;
    let windows = g.crop_windows(spectrum, offsets, lo, 1.0 / f as f64)?;
    let unit = g.polar_unit(theta)?;
    let pupil_c = g.mul(unit, amask)?;
    let pupil_rep = g.repeat(pupil_c, n_images)?;
    let filtered = g.mul(windows, pupil_rep)?;
    let field = g.ifft2(filtered)?;
    let intensity = g.abs_sq(field)?;
    let amp = g.sqrt_guard(intensity)?;
    let resid = g.sub(amp, a_meas)?;
    let sq = g.abs_sq(resid)?;
    g.sum_all(sq)
}

fn build_recon_graph(
    stack: &ImageStack,
    cfg: &OpticsConfig,
    leds: &LedSet,
    init: &ComplexField,
    pupil: &Pupil,
) -> Result<ReconGraph> {
    let f = cfg.upsample_factor;
    let (h, w) = stack.image_shape();
    let offsets = stack_offsets(stack, cfg, leds)?;

    let mut g = DiffGraph::new();
    let o_re = g.leaf(Tensor::Real(init.values.mapv(|v| v.re).into_dyn()));
    let o_im = g.leaf(Tensor::Real(init.values.mapv(|v| v.im).into_dyn()));
    let theta = g.leaf(Tensor::Real(pupil.phase.clone().into_dyn()));
    let amask = g.leaf(Tensor::Complex(
        pupil.amplitude.mapv(|a| Complex64::new(a, 0.0)).into_dyn(),
    ));
    let a_meas = {
        let amps = stack.images.mapv(|v| v.max(0.0).sqrt());
        g.leaf(Tensor::Real(amps.into_dyn()))
    };
    let loss = wire_recon_loss(&mut g, o_re, o_im, theta, amask, a_meas, offsets, (h, w), f)?;

    Ok(ReconGraph {
        graph: g,
        o_re,
        o_im,
        theta,
        loss,
    })
}

/// Least-squares constant-plus-linear fit of the pupil phase inside the
/// amplitude mask, in bin coordinates relative to the grid center.
fn fit_phase_plane(theta: &Array2<f64>, amplitude: &Array2<f64>) -> (f64, f64, f64) {
    let (h, w) = theta.dim();
    let mut m = [[0.0f64; 3]; 3];
    let mut rhs = [0.0f64; 3];
    for y in 0..h {
        for x in 0..w {
            if amplitude[[y, x]] == 0.0 {
                continue;
            }
            let dy = y as f64 - (h / 2) as f64;
            let dx = x as f64 - (w / 2) as f64;
            let basis = [1.0, dy, dx];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += basis[i] * basis[j];
                }
                rhs[i] += basis[i] * theta[[y, x]];
            }
        }
    }
    solve3(&mut m, &mut rhs);
    (rhs[0], rhs[1], rhs[2])
}

fn solve3(m: &mut [[f64; 3]; 3], rhs: &mut [f64; 3]) {
    for col in 0..3 {
        let mut piv = col;
        for r in col + 1..3 {
            if m[r][col].abs() > m[piv][col].abs() {
                piv = r;
            }
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        let d = m[col][col];
        if d.abs() < 1e-30 {
            continue;
        }
        for r in 0..3 {
            if r == col {
                continue;
            }
            let factor = m[r][col] / d;
            for c in 0..3 {
                m[r][c] -= factor * m[col][c];
            }
            rhs[r] -= factor * rhs[col];
        }
    }
    for i in 0..3 {
        if m[i][i].abs() >= 1e-30 {
            rhs[i] /= m[i][i];
        } else {
            rhs[i] = 0.0;
        }
    }
}

/// Moves the constant-plus-linear component of the pupil phase into the
/// object, the canonical representative under the model's gauge freedom.
/// Both fields keep every simulated intensity bit-identical in exact
/// arithmetic.
pub fn gauge_normalize(object: &mut ComplexField, pupil: &mut Pupil) {
    let (a, by, bx) = fit_phase_plane(&pupil.phase, &pupil.amplitude);
    let (h, w) = pupil.phase.dim();
    for y in 0..h {
        for x in 0..w {
            if pupil.amplitude[[y, x]] != 0.0 {
                let dy = y as f64 - (h / 2) as f64;
                let dx = x as f64 - (w / 2) as f64;
                pupil.phase[[y, x]] -= a + by * dy + bx * dx;
            } else {
                pupil.phase[[y, x]] = 0.0;
            }
        }
    }
    let (nh, nw) = object.values.dim();
    let mut spectrum = fft2_centered(&object.values.to_owned().into_dyn());
    for y in 0..nh {
        for x in 0..nw {
            let dy = y as f64 - (nh / 2) as f64;
            let dx = x as f64 - (nw / 2) as f64;
            let rot = Complex64::from_polar(1.0, a + by * dy + bx * dx);
            spectrum[IxDyn(&[y, x])] *= rot;
        }
    }
    let values = ifft2_centered(&spectrum)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2d");
    object.values = values;
}

/// Reconstructs one patch-sized stack into an f-upsampled complex field
/// with the matched pupil and the per-iteration loss curve.
pub fn reconstruct_patch(
    stack: &ImageStack,
    cfg: &OpticsConfig,
    settings: &ReconSettings,
    leds: &LedSet,
) -> Result<ReconResult> {
    settings.validate()?;
    cfg.validate()?;
    if stack.is_empty() {
        return Err(FpmError::Size("cannot reconstruct an empty stack".into()));
    }
    let (h, w) = stack.image_shape();
    let init = init_object(stack, cfg)?;
    let pupil0 = build_pupil(cfg, (h, w))?;
    let mut rg = build_recon_graph(stack, cfg, leds, &init, &pupil0)?;

    let params: Vec<NodeId> = if settings.pupil_phase_learning {
        vec![rg.o_re, rg.o_im, rg.theta]
    } else {
        vec![rg.o_re, rg.o_im]
    };
    let mut opt = AdamState::new(&rg.graph, &params, settings.learning_rate);
    let mut history = Vec::with_capacity(settings.iterations);

    for it in 0..settings.iterations {
        let step = |e: FpmError| match e {
            FpmError::Numeric(msg) => {
                FpmError::Numeric(format!("{msg} at iteration {}", it + 1))
            }
            other => other,
        };
        if it > 0 {
            rg.graph.recompute().map_err(step)?;
        }
        history.push(rg.graph.value(rg.loss).as_real()[IxDyn(&[])]);
        rg.graph.backward(rg.loss).map_err(step)?;
        opt.step(&mut rg.graph).map_err(step)?;
    }

    let o_re = rg.graph.value(rg.o_re).as_real();
    let o_im = rg.graph.value(rg.o_im).as_real();
    let mut values = Array2::from_elem(
        (h * cfg.upsample_factor, w * cfg.upsample_factor),
        Complex64::new(0.0, 0.0),
    );
    for ((v, &re), &im) in values.iter_mut().zip(o_re.iter()).zip(o_im.iter()) {
        *v = Complex64::new(re, im);
    }
    let mut object = ComplexField {
        values,
        pitch_um: cfg.high_res_pitch_um(),
    };
    let theta = rg
        .graph
        .value(rg.theta)
        .as_real()
        .to_owned()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2d");
    let mut pupil = Pupil {
        amplitude: pupil0.amplitude,
        phase: theta,
    };
    if settings.pupil_phase_learning {
        gauge_normalize(&mut object, &mut pupil);
    }
    Ok(ReconResult {
        object,
        pupil,
        loss_history: history,
    })
}

/// Where each patch sits in the full low-res frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    pub grid: (usize, usize),
    /// Per-patch (y0, y1, x0, x1) spans on the low-res grid, row-major.
    pub spans: Vec<(usize, usize, usize, usize)>,
    pub full: (usize, usize),
}

fn axis_spans(n: usize, tiles: usize, overlap: usize) -> Result<Vec<(usize, usize)>> {
    if n % tiles != 0 {
        return Err(FpmError::Config(format!(
            "{n} pixels do not split into {tiles} equal tiles"
        )));
    }
    let t = n / tiles;
    if tiles > 1 && overlap >= t {
        return Err(FpmError::Config(format!(
            "overlap {overlap} must be smaller than the {t} px tile"
        )));
    }
    let left = overlap / 2;
    let right = overlap - left;
    Ok((0..tiles)
        .map(|k| {
            let s = (k * t).saturating_sub(left);
            let e = ((k + 1) * t + right).min(n);
            (s, e)
        })
        .collect())
}

/// Splits a stack into overlapping patch stacks.
pub fn split_patches(
    stack: &ImageStack,
    settings: &ReconSettings,
) -> Result<(Vec<ImageStack>, PatchLayout)> {
    let (h, w) = stack.image_shape();
    let (gy, gx) = settings.patch_grid;
    let ys = axis_spans(h, gy, settings.overlap)?;
    let xs = axis_spans(w, gx, settings.overlap)?;
    let mut patches = Vec::with_capacity(gy * gx);
    let mut spans = Vec::with_capacity(gy * gx);
    for &(y0, y1) in &ys {
        for &(x0, x1) in &xs {
            let mut images = Array3::zeros((stack.len(), y1 - y0, x1 - x0));
            for (l, img) in stack.images.outer_iter().enumerate() {
                images
                    .index_axis_mut(Axis(0), l)
                    .assign(&img.slice(ndarray::s![y0..y1, x0..x1]));
            }
            patches.push(ImageStack {
                images,
                led_indices: stack.led_indices.clone(),
                exposure_ms: stack.exposure_ms.clone(),
            });
            spans.push((y0, y1, x0, x1));
        }
    }
    Ok((
        patches,
        PatchLayout {
            grid: (gy, gx),
            spans,
            full: (h, w),
        },
    ))
}

/// Ramp weights along one axis of a patch: 1 in the core, a linear taper
/// across the shared region toward each neighbor, built so contributions
/// sum exactly to 1.
fn axis_weights(spans: &[(usize, usize)], index: usize) -> Vec<f64> {
    let (s, e) = spans[index];
    let mut wts = vec![1.0; e - s];
    if index > 0 {
        let prev_end = spans[index - 1].1;
        let v = prev_end.saturating_sub(s);
        for t in 0..v {
            wts[t] = (t + 1) as f64 / (v + 1) as f64;
        }
    }
    if index + 1 < spans.len() {
        let next_start = spans[index + 1].0;
        let v = e.saturating_sub(next_start);
        for t in 0..v {
            wts[e - s - 1 - t] = (t + 1) as f64 / (v + 1) as f64;
        }
    }
    wts
}

/// Blends f-upsampled patch fields back into one frame with separable
/// linear ramps that form a partition of unity.
pub fn merge_patches(
    patches: &[ComplexField],
    layout: &PatchLayout,
    f: usize,
) -> Result<ComplexField> {
    let (gy, gx) = layout.grid;
    if patches.len() != gy * gx {
        return Err(FpmError::Size(format!(
            "{} patches for a {gy}x{gx} layout",
            patches.len()
        )));
    }
    let ys: Vec<(usize, usize)> = (0..gy).map(|r| {
        let (y0, y1, _, _) = layout.spans[r * gx];
        (y0, y1)
    }).collect();
    let xs: Vec<(usize, usize)> = (0..gx).map(|c| {
        let (_, _, x0, x1) = layout.spans[c];
        (x0, x1)
    }).collect();

    let (h, w) = layout.full;
    let mut acc = Array2::from_elem((h * f, w * f), Complex64::new(0.0, 0.0));
    let mut wsum = Array2::<f64>::zeros((h * f, w * f));
    let pitch = patches[0].pitch_um;

    for r in 0..gy {
        let wy = upsample_weights(&axis_weights(&ys, r), f);
        for c in 0..gx {
            let wx = upsample_weights(&axis_weights(&xs, c), f);
            let patch = &patches[r * gx + c];
            let (y0, y1, x0, x1) = layout.spans[r * gx + c];
            let (ph, pw) = patch.shape();
            if ph != (y1 - y0) * f || pw != (x1 - x0) * f {
                return Err(FpmError::Size(format!(
                    "patch ({r}, {c}) is {ph}x{pw}, layout wants {}x{}",
                    (y1 - y0) * f,
                    (x1 - x0) * f
                )));
            }
            for py in 0..ph {
                for px in 0..pw {
                    let wgt = wy[py] * wx[px];
                    let gy_ = y0 * f + py;
                    let gx_ = x0 * f + px;
                    acc[[gy_, gx_]] += patch.values[[py, px]] * wgt;
                    wsum[[gy_, gx_]] += wgt;
                }
            }
        }
    }
    for (v, &s) in acc.iter_mut().zip(wsum.iter()) {
        if s > 0.0 {
            *v /= s;
        }
    }
    Ok(ComplexField {
        values: acc,
        pitch_um: pitch,
    })
}

/// Expands low-res axis weights to the f-upsampled grid by replication.
fn upsample_weights(wts: &[f64], f: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(wts.len() * f);
    for &v in wts {
        for _ in 0..f {
            out.push(v);
        }
    }
    out
}

/// Pixel-space sum of blend weights across all patches; exposed for the
/// partition-of-unity property test.
pub fn blend_weight_sum(layout: &PatchLayout, f: usize) -> Array2<f64> {
    let (gy, gx) = layout.grid;
    let ys: Vec<(usize, usize)> = (0..gy).map(|r| {
        let (y0, y1, _, _) = layout.spans[r * gx];
        (y0, y1)
    }).collect();
    let xs: Vec<(usize, usize)> = (0..gx).map(|c| {
        let (_, _, x0, x1) = layout.spans[c];
        (x0, x1)
    }).collect();
    let (h, w) = layout.full;
    let mut wsum = Array2::<f64>::zeros((h * f, w * f));
    for r in 0..gy {
        let wy = upsample_weights(&axis_weights(&ys, r), f);
        for c in 0..gx {
            let wx = upsample_weights(&axis_weights(&xs, c), f);
            let (y0, _, x0, _) = layout.spans[r * gx + c];
            for (py, &a) in wy.iter().enumerate() {
                for (px, &b) in wx.iter().enumerate() {
                    wsum[[y0 * f + py, x0 * f + px]] += a * b;
                }
            }
        }
    }
    wsum
}

/// Full-field reconstruction: split into patches, solve each
/// independently (in parallel), and blend. A (1, 1) grid runs the single
/// whole-field solve. The returned pupil phase is the mean over patches.
pub fn reconstruct(
    stack: &ImageStack,
    cfg: &OpticsConfig,
    leds: &LedSet,
    settings: &ReconSettings,
) -> Result<ReconResult> {
    settings.validate()?;
    if settings.patch_grid == (1, 1) {
        return reconstruct_patch(stack, cfg, settings, leds);
    }
    let (patch_stacks, layout) = split_patches(stack, settings)?;
    let results: Vec<Result<ReconResult>> = patch_stacks
        .par_iter()
        .map(|ps| reconstruct_patch(ps, cfg, settings, leds))
        .collect();
    let full = stack.image_shape();
    let mut patches = Vec::with_capacity(results.len());
    let mut losses: Option<Vec<f64>> = None;
    let mut phase_sum = Array2::<f64>::zeros(full);
    for r in results {
        let r = r?;
        match &mut losses {
            None => losses = Some(r.loss_history.clone()),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&r.loss_history) {
                    *a += b;
                }
            }
        }
        phase_sum += &resample_phase(&r.pupil.phase, full);
        patches.push(r.object);
    }
    let object = merge_patches(&patches, &layout, cfg.upsample_factor)?;
    let n = patches.len() as f64;
    Ok(ReconResult {
        object,
        pupil: Pupil {
            amplitude: build_pupil(cfg, full)?.amplitude,
            phase: phase_sum / n,
        },
        loss_history: losses.expect("at least one patch"),
    })
}

/// Bilinearly resamples a pupil-phase surface onto another grid size.
///
/// Patch pupils sample one physical aberration surface at their own
/// frequency-bin spacing 1/(n * pitch); matching bins by physical
/// frequency maps target index K to source index (K - N/2) * n/N + n/2.
/// Identity when the shapes already agree.
fn resample_phase(phase: &Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let (sh, sw) = phase.dim();
    let (th, tw) = target;
    if (sh, sw) == (th, tw) {
        return phase.clone();
    }
    let coord = |k: usize, n_t: usize, n_s: usize| -> f64 {
        (k as f64 - (n_t / 2) as f64) * n_s as f64 / n_t as f64 + (n_s / 2) as f64
    };
    Array2::from_shape_fn((th, tw), |(y, x)| {
        let sy = coord(y, th, sh).clamp(0.0, (sh - 1) as f64);
        let sx = coord(x, tw, sw).clamp(0.0, (sw - 1) as f64);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let x1 = (x0 + 1).min(sw - 1);
        let fy = sy - y0 as f64;
        let fx = sx - x0 as f64;
        let top = phase[[y0, x0]] * (1.0 - fx) + phase[[y0, x1]] * fx;
        let bottom = phase[[y1, x0]] * (1.0 - fx) + phase[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Builds the tape for one amplitude-loss evaluation and returns the
/// leaf/loss handles; shared by the gradient tests.
pub fn recon_loss_graph(
    stack: &ImageStack,
    cfg: &OpticsConfig,
    leds: &LedSet,
    init: &ComplexField,
    pupil: &Pupil,
) -> Result<(DiffGraph, [NodeId; 3], NodeId)> {
    let rg = build_recon_graph(stack, cfg, leds, init, pupil)?;
    Ok((rg.graph, [rg.o_re, rg.o_im, rg.theta], rg.loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{select_centermost, simulate_stack};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> OpticsConfig {
        OpticsConfig::default()
    }

    fn random_object(n: usize, pitch: f64, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = Array2::from_shape_simple_fn((n, n), || {
            Complex64::from_polar(
                0.6 + 0.4 * rng.random::<f64>(),
                0.4 * (rng.random::<f64>() - 0.5),
            )
        });
        ComplexField { values, pitch_um: pitch }
    }

    #[test]
    fn settings_validation() {
        assert!(ReconSettings::default().validate().is_ok());
        let mut s = ReconSettings::default();
        s.learning_rate = 0.0;
        assert!(s.validate().is_err());
        let mut s = ReconSettings::default();
        s.iterations = 0;
        assert!(s.validate().is_err());
        let mut s = ReconSettings::default();
        s.patch_grid = (0, 2);
        assert!(s.validate().is_err());
    }

    #[test]
    fn background_subtraction_clamps_at_zero() {
        let images = Array3::from_shape_vec(
            (1, 2, 2),
            vec![5.0, 1.0, 0.5, 3.0],
        )
        .unwrap();
        let stack = ImageStack {
            images,
            led_indices: vec![0],
            exposure_ms: vec![2000.0],
        };
        let out = subtract_background(&stack, &Background::Scalars(vec![1.0])).unwrap();
        assert_eq!(
            out.images.iter().copied().collect::<Vec<_>>(),
            vec![4.0, 0.0, 0.0, 2.0]
        );
        let bg = Array2::from_elem((2, 2), 0.5);
        let out = subtract_background(&stack, &Background::Image(bg)).unwrap();
        assert_eq!(out.images[[0, 0, 0]], 4.5);

        assert!(subtract_background(&stack, &Background::Scalars(vec![-1.0])).is_err());
        assert!(subtract_background(&stack, &Background::Scalars(vec![1.0, 1.0])).is_err());
        let bad = Array2::from_elem((3, 3), 0.1);
        assert!(subtract_background(&stack, &Background::Image(bad)).is_err());
    }

    #[test]
    fn background_estimate_uses_corner_window() {
        let mut images = Array3::zeros((2, 4, 4));
        images[[0, 0, 0]] = 8.0;
        images[[1, 0, 1]] = 4.0;
        let stack = ImageStack {
            images,
            led_indices: vec![0, 1],
            exposure_ms: vec![2000.0; 2],
        };
        let bg = estimate_background(&stack, 2).unwrap();
        assert_eq!(bg, vec![2.0, 1.0]);
        assert!(estimate_background(&stack, 0).is_err());
        assert!(estimate_background(&stack, 5).is_err());
    }

    #[test]
    fn init_object_replicates_sqrt_mean() {
        let mut images = Array3::zeros((2, 2, 2));
        images.index_axis_mut(Axis(0), 0).fill(4.0);
        images.index_axis_mut(Axis(0), 1).fill(16.0);
        let stack = ImageStack {
            images,
            led_indices: vec![0, 1],
            exposure_ms: vec![2000.0; 2],
        };
        let cfg = small_cfg();
        let obj = init_object(&stack, &cfg).unwrap();
        assert_eq!(obj.shape(), (4, 4));
        for v in obj.values.iter() {
            assert!((v.re - 10.0f64.sqrt()).abs() < 1e-12);
            assert_eq!(v.im, 0.0);
        }
        assert!((obj.pitch_um - cfg.high_res_pitch_um()).abs() < 1e-15);
    }

    #[test]
    fn amplitude_loss_known_value_and_domain() {
        let a = ImageStack {
            images: Array3::from_shape_vec((1, 1, 2), vec![4.0, 9.0]).unwrap(),
            led_indices: vec![0],
            exposure_ms: vec![2000.0],
        };
        let b = ImageStack {
            images: Array3::from_shape_vec((1, 1, 2), vec![1.0, 1.0]).unwrap(),
            led_indices: vec![0],
            exposure_ms: vec![2000.0],
        };
        let loss = amplitude_loss(&a, &b).unwrap();
        assert!((loss - (1.0 + 4.0)).abs() < 1e-12);
        let bad = ImageStack {
            images: Array3::from_shape_vec((1, 1, 2), vec![-1.0, 1.0]).unwrap(),
            led_indices: vec![0],
            exposure_ms: vec![2000.0],
        };
        assert!(amplitude_loss(&bad, &b).is_err());
    }

    #[test]
    fn patch_spans_match_expected_widths() {
        let spans = axis_spans(64, 4, 8).unwrap();
        assert_eq!(spans, vec![(0, 20), (12, 36), (28, 52), (44, 64)]);
        for pair in spans.windows(2) {
            assert_eq!(pair[0].1 - pair[1].0, 8);
        }
        assert!(axis_spans(64, 4, 16).is_err());
        assert!(axis_spans(63, 4, 8).is_err());
        assert_eq!(axis_spans(64, 1, 8).unwrap(), vec![(0, 64)]);
    }

    #[test]
    fn blend_weights_form_partition_of_unity() {
        let stack = ImageStack {
            images: Array3::zeros((1, 64, 48)),
            led_indices: vec![0],
            exposure_ms: vec![2000.0],
        };
        let settings = ReconSettings {
            patch_grid: (4, 3),
            overlap: 7,
            ..ReconSettings::default()
        };
        let (patches, layout) = split_patches(&stack, &settings).unwrap();
        assert_eq!(patches.len(), 12);
        let wsum = blend_weight_sum(&layout, 2);
        for &v in wsum.iter() {
            assert!((v - 1.0).abs() < 1e-12, "weight sum {v}");
        }
    }

    #[test]
    fn constant_patches_merge_exactly() {
        let stack = ImageStack {
            images: Array3::zeros((1, 32, 32)),
            led_indices: vec![0],
            exposure_ms: vec![2000.0],
        };
        let settings = ReconSettings {
            patch_grid: (2, 2),
            overlap: 4,
            ..ReconSettings::default()
        };
        let (patch_stacks, layout) = split_patches(&stack, &settings).unwrap();
        let c = Complex64::new(0.7, -0.3);
        let f = 2;
        let patches: Vec<ComplexField> = patch_stacks
            .iter()
            .map(|ps| {
                let (h, w) = ps.image_shape();
                ComplexField {
                    values: Array2::from_elem((h * f, w * f), c),
                    pitch_um: 0.1625,
                }
            })
            .collect();
        let merged = merge_patches(&patches, &layout, f).unwrap();
        assert_eq!(merged.shape(), (64, 64));
        for v in merged.values.iter() {
            assert!((v - c).norm() < 1e-12);
        }

        let wrong = vec![patches[0].clone(); 3];
        assert!(merge_patches(&wrong, &layout, f).is_err());
    }

    #[test]
    fn split_rejects_oversized_overlap() {
        let stack = ImageStack {
            images: Array3::zeros((1, 32, 32)),
            led_indices: vec![0],
            exposure_ms: vec![2000.0],
        };
        let settings = ReconSettings {
            patch_grid: (4, 4),
            overlap: 8,
            ..ReconSettings::default()
        };
        assert!(split_patches(&stack, &settings).is_err());
    }

    #[test]
    fn gauge_normalization_flattens_pupil_and_keeps_images() {
        let cfg = small_cfg();
        let n = 16;
        let leds = select_centermost(&cfg, 9).unwrap();
        let object = random_object(n * cfg.upsample_factor, cfg.high_res_pitch_um(), 5);
        let mut pupil = build_pupil(&cfg, (n, n)).unwrap();
        for y in 0..n {
            for x in 0..n {
                if pupil.amplitude[[y, x]] != 0.0 {
                    let dy = y as f64 - (n / 2) as f64;
                    let dx = x as f64 - (n / 2) as f64;
                    pupil.phase[[y, x]] = 0.2 + 0.05 * dy - 0.03 * dx;
                }
            }
        }
        let before = simulate_stack(&object, &pupil, &cfg, &leds).unwrap();
        let mut obj2 = object.clone();
        let mut pup2 = pupil.clone();
        gauge_normalize(&mut obj2, &mut pup2);
        for (&v, &a) in pup2.phase.iter().zip(pup2.amplitude.iter()) {
            if a != 0.0 {
                assert!(v.abs() < 1e-9, "residual pupil phase {v}");
            }
        }
        let after = simulate_stack(&obj2, &pup2, &cfg, &leds).unwrap();
        for (x, y) in before.images.iter().zip(after.images.iter()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn recon_loss_gradients_pass_finite_differences() {
        use crate::autodiff::check_gradient;
        let cfg = small_cfg();
        let n = 4;
        let leds = select_centermost(&cfg, 5).unwrap();
        let truth = random_object(n * cfg.upsample_factor, cfg.high_res_pitch_um(), 11);
        let pupil = build_pupil(&cfg, (n, n)).unwrap();
        let stack = simulate_stack(&truth, &pupil, &cfg, &leds).unwrap();
        let init = random_object(n * cfg.upsample_factor, cfg.high_res_pitch_um(), 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut aber_phase = pupil.phase.clone();
        for v in aber_phase.iter_mut() {
            *v = 0.6 * (rng.random::<f64>() - 0.5);
        }

        let offsets = stack_offsets(&stack, &cfg, &leds).unwrap();
        let f = cfg.upsample_factor;
        let lo = stack.image_shape();
        let amask_t = Tensor::Complex(
            pupil.amplitude.mapv(|a| Complex64::new(a, 0.0)).into_dyn(),
        );
        let a_meas_t = Tensor::Real(stack.images.mapv(|v| v.max(0.0).sqrt()).into_dyn());
        let re_t = Tensor::Real(init.values.mapv(|v| v.re).into_dyn());
        let im_t = Tensor::Real(init.values.mapv(|v| v.im).into_dyn());
        let th_t = Tensor::Real(aber_phase.into_dyn());

        for idx in 0..3 {
            let probe = [&re_t, &im_t, &th_t][idx].clone();
            let fixed: Vec<Tensor> = (0..3)
                .filter(|i| *i != idx)
                .map(|i| [&re_t, &im_t, &th_t][i].clone())
                .collect();
            let (amask_t, a_meas_t, offsets) =
                (amask_t.clone(), a_meas_t.clone(), offsets.clone());
            let worst = check_gradient(
                move |g, x| {
                    let (o_re, o_im, th) = match idx {
                        0 => {
                            let b = g.leaf(fixed[0].clone());
                            let c = g.leaf(fixed[1].clone());
                            (x, b, c)
                        }
                        1 => {
                            let a = g.leaf(fixed[0].clone());
                            let c = g.leaf(fixed[1].clone());
                            (a, x, c)
                        }
                        _ => {
                            let a = g.leaf(fixed[0].clone());
                            let b = g.leaf(fixed[1].clone());
                            (a, b, x)
                        }
                    };
                    let amask = g.leaf(amask_t.clone());
                    let a_meas = g.leaf(a_meas_t.clone());
                    wire_recon_loss(g, o_re, o_im, th, amask, a_meas, offsets.clone(), lo, f)
                },
                &probe,
            )
            .unwrap();
            assert!(worst < 1e-5, "leaf {idx} worst fd error {worst}");
        }
    }

    #[test]
    fn tiny_reconstruction_drives_loss_down() {
        let cfg = small_cfg();
        let n = 16;
        let leds = select_centermost(&cfg, 9).unwrap();
        let truth = random_object(n * cfg.upsample_factor, cfg.high_res_pitch_um(), 21);
        let pupil = build_pupil(&cfg, (n, n)).unwrap();
        let stack = simulate_stack(&truth, &pupil, &cfg, &leds).unwrap();
        let settings = ReconSettings {
            iterations: 150,
            patch_grid: (1, 1),
            pupil_phase_learning: false,
            ..ReconSettings::default()
        };
        let out = reconstruct(&stack, &cfg, &leds, &settings).unwrap();
        assert_eq!(out.loss_history.len(), 150);
        assert_eq!(out.object.shape(), (32, 32));
        let first = out.loss_history[0];
        let last = *out.loss_history.last().unwrap();
        assert!(
            last < 0.2 * first,
            "loss went {first} -> {last} in 150 iterations"
        );
    }

    #[test]
    fn patched_reconstruction_runs_and_matches_layout() {
        let cfg = small_cfg();
        let n = 24;
        let leds = select_centermost(&cfg, 5).unwrap();
        let truth = random_object(n * cfg.upsample_factor, cfg.high_res_pitch_um(), 31);
        let pupil = build_pupil(&cfg, (n, n)).unwrap();
        let stack = simulate_stack(&truth, &pupil, &cfg, &leds).unwrap();
        let settings = ReconSettings {
            iterations: 80,
            patch_grid: (2, 2),
            overlap: 4,
            pupil_phase_learning: false,
            ..ReconSettings::default()
        };
        let out = reconstruct(&stack, &cfg, &leds, &settings).unwrap();
        assert_eq!(out.object.shape(), (48, 48));
        assert_eq!(out.loss_history.len(), 80);
        assert!(out.loss_history.last().unwrap() < &out.loss_history[0]);
    }

    #[test]
    fn patched_reconstruction_handles_unequal_patch_sizes() {
        let cfg = small_cfg();
        let n = 32;
        let leds = select_centermost(&cfg, 5).unwrap();
        let truth = random_object(n * cfg.upsample_factor, cfg.high_res_pitch_um(), 33);
        let pupil = build_pupil(&cfg, (n, n)).unwrap();
        let stack = simulate_stack(&truth, &pupil, &cfg, &leds).unwrap();
        let settings = ReconSettings {
            iterations: 5,
            patch_grid: (4, 4),
            overlap: 4,
            pupil_phase_learning: true,
            ..ReconSettings::default()
        };
        // corner patches are 10 px wide, interior ones 12 px
        let (_, layout) = split_patches(&stack, &settings).unwrap();
        let widths: Vec<usize> = layout.spans.iter().map(|s| s.3 - s.2).collect();
        assert!(widths.iter().any(|&w| w != widths[0]));
        let out = reconstruct(&stack, &cfg, &leds, &settings).unwrap();
        assert_eq!(out.object.shape(), (64, 64));
        assert_eq!(out.pupil.phase.dim(), (32, 32));
        assert_eq!(out.pupil.amplitude.dim(), (32, 32));
        assert!(out.pupil.phase.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pupil_phase_resampling_is_identity_at_matching_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phase = Array2::from_shape_simple_fn((12, 12), || rng.random::<f64>());
        let same = resample_phase(&phase, (12, 12));
        assert_eq!(same, phase);
        // a planar surface survives resampling exactly away from borders
        let plane = Array2::from_shape_fn((8, 8), |(y, x)| {
            0.1 * (y as f64 - 4.0) + 0.05 * (x as f64 - 4.0)
        });
        let up = resample_phase(&plane, (16, 16));
        for y in 2..14 {
            for x in 2..14 {
                let expect = 0.1 * ((y as f64 - 8.0) * 0.5) + 0.05 * ((x as f64 - 8.0) * 0.5);
                assert!(
                    (up[[y, x]] - expect).abs() < 1e-12,
                    "({y},{x}): {} vs {expect}",
                    up[[y, x]]
                );
            }
        }
    }

    #[test]
    fn loss_history_is_per_iteration_amplitude_loss() {
        let cfg = small_cfg();
        let n = 8;
        let leds = select_centermost(&cfg, 5).unwrap();
        let truth = random_object(n * cfg.upsample_factor, cfg.high_res_pitch_um(), 41);
        let pupil = build_pupil(&cfg, (n, n)).unwrap();
        let stack = simulate_stack(&truth, &pupil, &cfg, &leds).unwrap();
        let settings = ReconSettings {
            iterations: 1,
            patch_grid: (1, 1),
            pupil_phase_learning: false,
            ..ReconSettings::default()
        };
        let out = reconstruct(&stack, &cfg, &leds, &settings).unwrap();
        let init = init_object(&stack, &cfg).unwrap();
        let sim = simulate_stack(&init, &pupil, &cfg, &leds).unwrap();
        let expect = amplitude_loss(&stack, &sim).unwrap();
        assert!(
            (out.loss_history[0] - expect).abs() < 1e-9 * expect.max(1.0),
            "{} vs {expect}",
            out.loss_history[0]
        );
    }

    #[test]
    fn empty_stack_is_rejected() {
        let cfg = small_cfg();
        let leds = select_centermost(&cfg, 5).unwrap();
        let stack = ImageStack {
            images: Array3::zeros((0, 8, 8)),
            led_indices: vec![],
            exposure_ms: vec![],
        };
        let settings = ReconSettings {
            patch_grid: (1, 1),
            ..ReconSettings::default()
        };
        assert!(reconstruct(&stack, &cfg, &leds, &settings).is_err());
    }

}
