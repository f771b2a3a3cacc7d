//! Joint optimization of the illumination pattern and the reconstruction
//! network for single-shot imaging, plus network-only finetuning on
//! captured images and the single-shot prediction entry point.
//!
//! Training runs on the differentiation tape end to end: the multiplexed
//! exposure, the sensor noise, and the network all sit in one graph, so
//! the pattern weights and exposure receive gradients through the same
//! noise the camera would add. The noise draws themselves are held in
//! leaves and refreshed from seeded substreams every step, which keeps
//! the loss differentiable while still sampling.
//!
//! The shot-noise term uses the guarded square root of the tape, so a
//! pixel at exactly zero signal picks up a vanishing bias instead of a
//! non-differentiable kink; the plain emulation in [`crate::noise`] keeps
//! the exact max(0, .) form and is what evaluation uses.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{AdamState, DiffGraph, NodeId, Tensor};
use crate::cnn::{forward_graph, CnnArch, CnnLeaves, CnnModel};
use crate::config::OpticsConfig;
use crate::error::{FpmError, Result};
use crate::noise::{apply_poisson_approx, apply_quantization, NoiseModel};
use crate::optics::{
    emulate_pattern_image, ComplexField, IlluminationPattern, FULL_EXPOSURE_MS,
};
use crate::phantom::TrainingExample;

/// Exposure every pattern starts from, in milliseconds.
pub const INITIAL_EXPOSURE_MS: f64 = 200.0;

/// The network init key is offset from the master seed so it never shares
/// a ChaCha keystream with the pattern draws.
const NETWORK_SEED_OFFSET: u64 = 1;

/// Per-step noise substreams start here; stream 0 of the master seed
/// belongs to the pattern initialization.
const NOISE_STREAM_BASE: u64 = 1;

/// Optimization parameters shared by joint training and finetuning.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Weight of the error-gradient terms in the objective.
    pub weight_gradient: f64,
    pub seed: u64,
    /// Network-only training: [`train_joint`] leaves the illumination
    /// pattern at its initialization and updates just the network, and
    /// the CLI uses the flag to select its finetune path.
    pub finetune: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 40,
            batch: 4,
            learning_rate: 1e-3,
            weight_gradient: 1.0,
            seed: 0,
            finetune: false,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(FpmError::Config("epochs must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(FpmError::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FpmError::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_gradient > 0.0 && self.weight_gradient.is_finite()) {
            return Err(FpmError::Config(format!(
                "gradient-term weight must be positive and finite, got {}",
                self.weight_gradient
            )));
        }
        Ok(())
    }
}

/// One single-shot supervision pair: a multiplexed low-res image and the
/// complex field it should map to.
#[derive(Clone, Debug)]
pub struct PatternExample {
    pub image: Array2<f64>,
    pub target: ComplexField,
}

/// Draws per-LED weights i.i.d. uniform in [0, 1) and starts the shared
/// exposure at [`INITIAL_EXPOSURE_MS`]; fully determined by the seed.
pub fn init_pattern(n_leds: usize, seed: u64) -> IlluminationPattern {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..n_leds).map(|_| rng.random::<f64>()).collect();
    IlluminationPattern {
        weights,
        exposure_ms: INITIAL_EXPOSURE_MS,
    }
}

/// Clamps the pattern into its feasible box: weights to [0, 1], exposure
/// to [0, 2000] ms. Training applies this after every optimizer step.
pub fn project_pattern(pattern: &mut IlluminationPattern) {
    for w in &mut pattern.weights {
        *w = w.clamp(0.0, 1.0);
    }
    pattern.exposure_ms = pattern.exposure_ms.clamp(0.0, FULL_EXPOSURE_MS);
}

/// Mean squared complex error plus `weight_gradient` times the mean
/// squared forward difference of the error along each image axis. The
/// difference arrays keep a zero trailing slice, so every mean divides by
/// the full pixel count. Zero exactly when the fields agree; a constant
/// offset leaves the difference terms at zero.
pub fn training_objective(
    pred: &Array2<Complex64>,
    truth: &Array2<Complex64>,
    weight_gradient: f64,
) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(FpmError::Size(format!(
            "objective fields disagree: {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let (h, w) = pred.dim();
    if h == 0 || w == 0 {
        return Err(FpmError::Size("objective fields are empty".into()));
    }
    let pixels = (h * w) as f64;
    let mut mse = 0.0;
    for (p, t) in pred.iter().zip(truth.iter()) {
        mse += (p - t).norm_sqr();
    }
    mse /= pixels;
    let mut gy = 0.0;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            let d = (pred[[y + 1, x]] - truth[[y + 1, x]]) - (pred[[y, x]] - truth[[y, x]]);
            gy += d.norm_sqr();
        }
    }
    let mut gx = 0.0;
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            let d = (pred[[y, x + 1]] - truth[[y, x + 1]]) - (pred[[y, x]] - truth[[y, x]]);
            gx += d.norm_sqr();
        }
    }
    Ok(mse + weight_gradient * (gy + gx) / pixels)
}

/// Splits a complex field into the (2, H, W) real/imaginary channel stack
/// the network trains against.
pub fn pack_complex_channels(field: &Array2<Complex64>) -> ArrayD<f64> {
    let (h, w) = field.dim();
    let mut out = ArrayD::zeros(IxDyn(&[2, h, w]));
    for ((y, x), v) in field.indexed_iter() {
        out[IxDyn(&[0, y, x])] = v.re;
        out[IxDyn(&[1, y, x])] = v.im;
    }
    out
}

fn unpack_complex_channels(stack: &ArrayD<f64>) -> Array2<Complex64> {
    let (h, w) = (stack.shape()[1], stack.shape()[2]);
    Array2::from_shape_fn((h, w), |(y, x)| {
        Complex64::new(stack[IxDyn(&[0, y, x])], stack[IxDyn(&[1, y, x])])
    })
}

/// Wires the camera model for one slot: mix the stack with the pattern
/// weights, scale by exposure/2000, add sqrt(I/m) times the frozen shot
/// draw, clamp to the sensor range, and add the frozen sub-count dither.
pub fn wire_emulation(
    g: &mut DiffGraph,
    stack: NodeId,
    weights: NodeId,
    exposure_ms: NodeId,
    saturation: f64,
    m: f64,
    shot: NodeId,
    dither: NodeId,
) -> Result<NodeId> {
    let mixed = g.weighted_sum(stack, weights)?;
    let eps = g.scale(exposure_ms, 1.0 / FULL_EXPOSURE_MS)?;
    let image = g.mul_scalar(mixed, eps)?;
    let variance = g.scale(image, 1.0 / m)?;
    let sigma = g.sqrt_guard(variance)?;
    let bump = g.mul(sigma, shot)?;
    let noisy = g.add(image, bump)?;
    let clamped = g.clamp(noisy, 0.0, saturation)?;
    g.add(clamped, dither)
}

/// Wires [`training_objective`] on (2, H, W) real channel stacks.
pub fn wire_objective(
    g: &mut DiffGraph,
    pred: NodeId,
    target: NodeId,
    weight_gradient: f64,
) -> Result<NodeId> {
    let resid = g.sub(pred, target)?;
    let sq = g.abs_sq(resid)?;
    let half_mse = g.mean_all(sq)?;
    let mse = g.scale(half_mse, 2.0)?;
    let dy = g.forward_diff(resid, 1)?;
    let dx = g.forward_diff(resid, 2)?;
    let sq_y = g.abs_sq(dy)?;
    let sq_x = g.abs_sq(dx)?;
    let mean_y = g.mean_all(sq_y)?;
    let mean_x = g.mean_all(sq_x)?;
    let diff_sum = g.add(mean_y, mean_x)?;
    let diff_term = g.scale(diff_sum, 2.0 * weight_gradient)?;
    g.add(mse, diff_term)
}

#[derive(Clone, Copy)]
struct SlotIds {
    stack: NodeId,
    shot: NodeId,
    dither: NodeId,
    target: NodeId,
}

struct JointGraph {
    graph: DiffGraph,
    weights: NodeId,
    exposure: NodeId,
    net: CnnLeaves,
    slots: Vec<SlotIds>,
    loss: NodeId,
}

fn build_joint_graph(
    model: &CnnModel,
    pattern: &IlluminationPattern,
    batch: usize,
    n_leds: usize,
    lo: (usize, usize),
    hi: (usize, usize),
    saturation: f64,
    m: f64,
    weight_gradient: f64,
) -> Result<JointGraph> {
    let mut g = DiffGraph::new();
    let weights = g.leaf(Tensor::Real(
        ArrayD::from_shape_vec(IxDyn(&[n_leds]), pattern.weights.clone())
            .expect("weights shape"),
    ));
    let exposure = g.leaf(Tensor::scalar(pattern.exposure_ms));
    let net = CnnLeaves::register(&mut g, model);
    let mut slots = Vec::with_capacity(batch);
    let mut objectives = Vec::with_capacity(batch);
    for _ in 0..batch {
        let stack = g.leaf(Tensor::Real(ArrayD::zeros(IxDyn(&[n_leds, lo.0, lo.1]))));
        let shot = g.leaf(Tensor::Real(ArrayD::zeros(IxDyn(&[lo.0, lo.1]))));
        let dither = g.leaf(Tensor::Real(ArrayD::zeros(IxDyn(&[lo.0, lo.1]))));
        let target = g.leaf(Tensor::Real(ArrayD::zeros(IxDyn(&[2, hi.0, hi.1]))));
        let image = wire_emulation(&mut g, stack, weights, exposure, saturation, m, shot, dither)?;
        let input = g.reshape(image, &[1, lo.0, lo.1])?;
        let pred = forward_graph(&mut g, model, &net, input)?;
        let objective = wire_objective(&mut g, pred, target, weight_gradient)?;
        slots.push(SlotIds {
            stack,
            shot,
            dither,
            target,
        });
        objectives.push(objective);
    }
    let mut total = objectives[0];
    for &o in &objectives[1..] {
        total = g.add(total, o)?;
    }
    let loss = g.scale(total, 1.0 / batch as f64)?;
    Ok(JointGraph {
        graph: g,
        weights,
        exposure,
        net,
        slots,
        loss,
    })
}

fn check_training_set(
    dataset: &[TrainingExample],
    f: usize,
) -> Result<(usize, (usize, usize), (usize, usize))> {
    let first = dataset
        .first()
        .ok_or_else(|| FpmError::Size("training set is empty".into()))?;
    let n_leds = first.stack.len();
    if n_leds == 0 {
        return Err(FpmError::Size("training stacks hold no images".into()));
    }
    let lo = first.stack.image_shape();
    let hi = (lo.0 * f, lo.1 * f);
    for (i, ex) in dataset.iter().enumerate() {
        if ex.stack.len() != n_leds || ex.stack.image_shape() != lo {
            return Err(FpmError::Size(format!(
                "example {i} stack is {} x {:?}, expected {n_leds} x {lo:?}",
                ex.stack.len(),
                ex.stack.image_shape()
            )));
        }
        if ex.target.shape() != hi {
            return Err(FpmError::Size(format!(
                "example {i} target is {:?}, expected {hi:?} at upsample factor {f}",
                ex.target.shape()
            )));
        }
    }
    Ok((n_leds, lo, hi))
}

fn at_step(e: FpmError, step: u64) -> FpmError {
    match e {
        FpmError::Numeric(msg) => {
            FpmError::Numeric(format!("{msg} at training step {}", step + 1))
        }
        other => other,
    }
}

fn load_batch(
    jg: &mut JointGraph,
    dataset: &[TrainingExample],
    lo: (usize, usize),
    seed: u64,
    step: u64,
) -> Result<()> {
    let n = dataset.len();
    let batch = jg.slots.len();
    for s in 0..batch {
        let slot = jg.slots[s];
        let ex = &dataset[(step as usize * batch + s) % n];
        jg.graph
            .set_leaf(slot.stack, Tensor::Real(ex.stack.images.clone().into_dyn()))?;
        jg.graph.set_leaf(
            slot.target,
            Tensor::Real(pack_complex_channels(&ex.target.values)),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(NOISE_STREAM_BASE + step * batch as u64 + s as u64);
        let shot = ArrayD::from_shape_simple_fn(IxDyn(&[lo.0, lo.1]), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let dither =
            ArrayD::from_shape_simple_fn(IxDyn(&[lo.0, lo.1]), || rng.random::<f64>());
        jg.graph.set_leaf(slot.shot, Tensor::Real(shot))?;
        jg.graph.set_leaf(slot.dither, Tensor::Real(dither))?;
    }
    Ok(())
}

fn project_leaves(jg: &mut JointGraph) -> Result<()> {
    let weights = jg
        .graph
        .value(jg.weights)
        .as_real()
        .mapv(|c| c.clamp(0.0, 1.0));
    jg.graph.set_leaf(jg.weights, Tensor::Real(weights))?;
    let exposure = jg.graph.value(jg.exposure).as_real()[IxDyn(&[])]
        .clamp(0.0, FULL_EXPOSURE_MS);
    jg.graph.set_leaf(jg.exposure, Tensor::scalar(exposure))
}

/// Trains the illumination pattern and the network together with Adam.
///
/// Every step draws fresh shot and dither noise from substreams of the
/// seed, then projects the pattern back into its feasible box, so the
/// returned pattern always satisfies [`IlluminationPattern::validate`].
/// With `settings.finetune` set, the pattern stays frozen at its
/// initialization and only the network updates; everything else,
/// including the noise draws, is identical, which makes the two modes
/// directly comparable at a fixed seed.
/// Returns the pattern, the network, and the mean loss per epoch. A
/// non-finite loss aborts with a numeric error naming the step.
pub fn train_joint(
    dataset: &[TrainingExample],
    cfg: &OpticsConfig,
    noise: &NoiseModel,
    arch: &CnnArch,
    settings: &TrainSettings,
) -> Result<(IlluminationPattern, CnnModel, Vec<f64>)> {
    settings.validate()?;
    noise.validate()?;
    let f = cfg.upsample_factor;
    let (n_leds, lo, hi) = check_training_set(dataset, f)?;
    let pattern = init_pattern(n_leds, settings.seed);
    let mut model = CnnModel::init(arch, f, settings.seed.wrapping_add(NETWORK_SEED_OFFSET))?;
    let mut jg = build_joint_graph(
        &model,
        &pattern,
        settings.batch,
        n_leds,
        lo,
        hi,
        noise.saturation(),
        noise.m,
        settings.weight_gradient,
    )?;
    let mut params = if settings.finetune {
        Vec::new()
    } else {
        vec![jg.weights, jg.exposure]
    };
    params.extend_from_slice(&jg.net.ids);
    let mut opt = AdamState::new(&jg.graph, &params, settings.learning_rate);
    let steps_per_epoch = dataset.len().div_ceil(settings.batch);
    let mut history = Vec::with_capacity(settings.epochs);
    let mut step: u64 = 0;
    for _ in 0..settings.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            load_batch(&mut jg, dataset, lo, settings.seed, step)?;
            jg.graph.recompute().map_err(|e| at_step(e, step))?;
            let loss = jg.graph.value(jg.loss).as_real()[IxDyn(&[])];
            if !loss.is_finite() {
                return Err(FpmError::Numeric(format!(
                    "training loss became {loss} at step {}",
                    step + 1
                )));
            }
            epoch_loss += loss;
            jg.graph.backward(jg.loss).map_err(|e| at_step(e, step))?;
            opt.step(&mut jg.graph).map_err(|e| at_step(e, step))?;
            project_leaves(&mut jg)?;
            step += 1;
        }
        history.push(epoch_loss / steps_per_epoch as f64);
    }
    jg.net.write_back(&jg.graph, &mut model)?;
    let weights = jg.graph.value(jg.weights).as_real().iter().copied().collect();
    let exposure_ms = jg.graph.value(jg.exposure).as_real()[IxDyn(&[])];
    let trained = IlluminationPattern {
        weights,
        exposure_ms,
    };
    trained.validate()?;
    Ok((trained, model, history))
}

/// Renders the single multiplexed exposure of every example under a fixed
/// pattern, optionally through the sensor noise model with one substream
/// per example, and pairs it with the example's target.
pub fn render_pattern_examples(
    dataset: &[TrainingExample],
    pattern: &IlluminationPattern,
    noise: Option<(&NoiseModel, u64)>,
) -> Result<Vec<PatternExample>> {
    pattern.validate()?;
    let mut out = Vec::with_capacity(dataset.len());
    for (i, ex) in dataset.iter().enumerate() {
        let mut image = emulate_pattern_image(&ex.stack, pattern)?;
        if let Some((model, seed)) = noise {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            image = apply_poisson_approx(&image, model, &mut rng)?;
            image = apply_quantization(&image, model, &mut rng)?;
        }
        out.push(PatternExample {
            image,
            target: ex.target.clone(),
        });
    }
    Ok(out)
}

/// Mean [`training_objective`] of the model's predictions over a labeled
/// set, with the stacks multiplexed by `pattern` and noised per example
/// when a noise model and seed are given.
pub fn evaluate_pattern(
    dataset: &[TrainingExample],
    pattern: &IlluminationPattern,
    model: &CnnModel,
    cfg: &OpticsConfig,
    noise: Option<(&NoiseModel, u64)>,
    weight_gradient: f64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(FpmError::Size("evaluation set is empty".into()));
    }
    let rendered = render_pattern_examples(dataset, pattern, noise)?;
    let mut total = 0.0;
    for ex in &rendered {
        let pred = predict_single_shot(&ex.image, model, cfg)?;
        total += training_objective(&pred.values, &ex.target.values, weight_gradient)?;
    }
    Ok(total / dataset.len() as f64)
}

/// Continues training the network alone on captured single-shot images.
/// The images go straight into the network input, no noise is added, and
/// the pattern is not touched. Returns the updated network and the mean
/// loss per epoch.
pub fn finetune(
    dataset: &[PatternExample],
    pattern: &IlluminationPattern,
    model: &CnnModel,
    cfg: &OpticsConfig,
    settings: &TrainSettings,
) -> Result<(CnnModel, Vec<f64>)> {
    settings.validate()?;
    pattern.validate()?;
    let f = cfg.upsample_factor;
    let first = dataset
        .first()
        .ok_or_else(|| FpmError::Size("finetune set is empty".into()))?;
    let lo = first.image.dim();
    if lo.0 == 0 || lo.1 == 0 {
        return Err(FpmError::Size("finetune images are empty".into()));
    }
    let hi = (lo.0 * f, lo.1 * f);
    for (i, ex) in dataset.iter().enumerate() {
        if ex.image.dim() != lo {
            return Err(FpmError::Size(format!(
                "finetune image {i} is {:?}, expected {lo:?}",
                ex.image.dim()
            )));
        }
        if ex.target.shape() != hi {
            return Err(FpmError::Size(format!(
                "finetune target {i} is {:?}, expected {hi:?} at upsample factor {f}",
                ex.target.shape()
            )));
        }
    }

    let mut out_model = model.clone();
    let mut g = DiffGraph::new();
    let net = CnnLeaves::register(&mut g, &out_model);
    let batch = settings.batch;
    let mut image_slots = Vec::with_capacity(batch);
    let mut target_slots = Vec::with_capacity(batch);
    let mut objectives = Vec::with_capacity(batch);
    for _ in 0..batch {
        let image = g.leaf(Tensor::Real(ArrayD::zeros(IxDyn(&[1, lo.0, lo.1]))));
        let target = g.leaf(Tensor::Real(ArrayD::zeros(IxDyn(&[2, hi.0, hi.1]))));
        let pred = forward_graph(&mut g, &out_model, &net, image)?;
        let objective = wire_objective(&mut g, pred, target, settings.weight_gradient)?;
        image_slots.push(image);
        target_slots.push(target);
        objectives.push(objective);
    }
    let mut total = objectives[0];
    for &o in &objectives[1..] {
        total = g.add(total, o)?;
    }
    let loss = g.scale(total, 1.0 / batch as f64)?;

    let mut opt = AdamState::new(&g, &net.ids, settings.learning_rate);
    let steps_per_epoch = dataset.len().div_ceil(batch);
    let mut history = Vec::with_capacity(settings.epochs);
    let mut step: u64 = 0;
    for _ in 0..settings.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            for s in 0..batch {
                let ex = &dataset[(step as usize * batch + s) % dataset.len()];
                let input = ex.image.to_owned().insert_axis(Axis(0)).into_dyn();
                g.set_leaf(image_slots[s], Tensor::Real(input))?;
                g.set_leaf(
                    target_slots[s],
                    Tensor::Real(pack_complex_channels(&ex.target.values)),
                )?;
            }
            g.recompute().map_err(|e| at_step(e, step))?;
            let loss_value = g.value(loss).as_real()[IxDyn(&[])];
            if !loss_value.is_finite() {
                return Err(FpmError::Numeric(format!(
                    "finetune loss became {loss_value} at step {}",
                    step + 1
                )));
            }
            epoch_loss += loss_value;
            g.backward(loss).map_err(|e| at_step(e, step))?;
            opt.step(&mut g).map_err(|e| at_step(e, step))?;
            step += 1;
        }
        history.push(epoch_loss / steps_per_epoch as f64);
    }
    net.write_back(&g, &mut out_model)?;
    Ok((out_model, history))
}

/// Runs the network once on a single multiplexed image and returns the
/// complex field at the high-res pitch. One forward pass, no iterations.
pub fn predict_single_shot(
    image: &Array2<f64>,
    model: &CnnModel,
    cfg: &OpticsConfig,
) -> Result<ComplexField> {
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(FpmError::Size("prediction input image is empty".into()));
    }
    if model.upsample != cfg.upsample_factor {
        return Err(FpmError::Size(format!(
            "network upsamples by {}, optics config expects {}",
            model.upsample, cfg.upsample_factor
        )));
    }
    let mut g = DiffGraph::new();
    let net = CnnLeaves::register(&mut g, model);
    let input = g.leaf(Tensor::Real(
        image.to_owned().insert_axis(Axis(0)).into_dyn(),
    ));
    let pred = forward_graph(&mut g, model, &net, input)?;
    let values = unpack_complex_channels(g.value(pred).as_real());
    Ok(ComplexField {
        values,
        pitch_um: cfg.high_res_pitch_um(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradient;
    use crate::optics::ImageStack;
    use ndarray::Array3;

    fn tiny_cfg() -> OpticsConfig {
        OpticsConfig::default()
    }

    fn small_arch() -> CnnArch {
        CnnArch {
            blocks: 1,
            channels: 4,
            kernel: 3,
            leaky_slope: 0.1,
        }
    }

    fn rand_complex_field(rng: &mut ChaCha8Rng, h: usize, w: usize, pitch: f64) -> ComplexField {
        let values = Array2::from_shape_fn((h, w), |_| {
            Complex64::new(rng.random::<f64>(), rng.random::<f64>() - 0.5)
        });
        ComplexField { values, pitch_um: pitch }
    }

    fn toy_dataset(
        rng: &mut ChaCha8Rng,
        count: usize,
        n_leds: usize,
        lo: (usize, usize),
        f: usize,
    ) -> Vec<TrainingExample> {
        (0..count)
            .map(|_| {
                let images = Array3::from_shape_fn((n_leds, lo.0, lo.1), |_| {
                    5.0 + rng.random::<f64>()
                });
                let stack = ImageStack {
                    images,
                    led_indices: (0..n_leds).collect(),
                    exposure_ms: vec![FULL_EXPOSURE_MS; n_leds],
                };
                let target = rand_complex_field(rng, lo.0 * f, lo.1 * f, 0.1625);
                TrainingExample { stack, target }
            })
            .collect()
    }

    #[test]
    fn objective_matches_graph_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pred = rand_complex_field(&mut rng, 5, 4, 1.0).values;
        let truth = rand_complex_field(&mut rng, 5, 4, 1.0).values;
        let w_g = 0.7;
        let direct = training_objective(&pred, &truth, w_g).unwrap();
        let mut g = DiffGraph::new();
        let p = g.leaf(Tensor::Real(pack_complex_channels(&pred)));
        let t = g.leaf(Tensor::Real(pack_complex_channels(&truth)));
        let obj = wire_objective(&mut g, p, t, w_g).unwrap();
        let wired = g.value(obj).as_real()[IxDyn(&[])];
        assert!(
            (direct - wired).abs() <= 1e-12 * direct.abs().max(1.0),
            "direct {direct} vs wired {wired}"
        );
    }

    #[test]
    fn objective_constant_offset_keeps_only_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let truth = rand_complex_field(&mut rng, 6, 6, 1.0).values;
        let offset = Complex64::new(0.3, -0.2);
        let pred = truth.mapv(|v| v + offset);
        let with_small = training_objective(&pred, &truth, 1.0).unwrap();
        let with_large = training_objective(&pred, &truth, 1e6).unwrap();
        assert!((with_small - offset.norm_sqr()).abs() < 1e-12);
        assert!((with_large - offset.norm_sqr()).abs() < 1e-6);
        assert_eq!(training_objective(&truth, &truth, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn objective_rejects_mismatched_shapes() {
        let a = Array2::from_elem((3, 3), Complex64::new(1.0, 0.0));
        let b = Array2::from_elem((3, 4), Complex64::new(1.0, 0.0));
        assert!(matches!(
            training_objective(&a, &b, 1.0),
            Err(FpmError::Size(_))
        ));
    }

    #[test]
    fn pattern_init_is_seeded_and_bounded() {
        let p1 = init_pattern(69, 5);
        let p2 = init_pattern(69, 5);
        let p3 = init_pattern(69, 6);
        assert_eq!(p1.weights, p2.weights);
        assert_ne!(p1.weights, p3.weights);
        assert_eq!(p1.exposure_ms, INITIAL_EXPOSURE_MS);
        assert!(p1.weights.iter().all(|c| (0.0..1.0).contains(c)));
        assert!(p1.validate().is_ok());
    }

    #[test]
    fn projection_clamps_into_the_feasible_box() {
        let mut p = IlluminationPattern {
            weights: vec![-0.5, 0.25, 1.5],
            exposure_ms: 2500.0,
        };
        project_pattern(&mut p);
        assert_eq!(p.weights, vec![0.0, 0.25, 1.0]);
        assert_eq!(p.exposure_ms, FULL_EXPOSURE_MS);
        assert!(p.validate().is_ok());
    }

    enum FdRole {
        Weights,
        Exposure,
        NetParam(usize),
    }

    struct FdFixture {
        model: CnnModel,
        pattern: IlluminationPattern,
        stack: ArrayD<f64>,
        shot: ArrayD<f64>,
        dither: ArrayD<f64>,
        target: ArrayD<f64>,
        saturation: f64,
        m: f64,
        w_g: f64,
        lo: (usize, usize),
    }

    impl FdFixture {
        fn new(seed: u64) -> FdFixture {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n_leds, lo, f) = (3, (6, 5), 2);
            let model = CnnModel::init(&small_arch(), f, seed + 100).unwrap();
            let pattern = IlluminationPattern {
                weights: (0..n_leds).map(|_| 0.2 + 0.6 * rng.random::<f64>()).collect(),
                exposure_ms: 300.0,
            };
            let stack = ArrayD::from_shape_simple_fn(IxDyn(&[n_leds, lo.0, lo.1]), || {
                5.0 + rng.random::<f64>()
            });
            let shot = ArrayD::from_shape_simple_fn(IxDyn(&[lo.0, lo.1]), || {
                let v: f64 = StandardNormal.sample(&mut rng);
                0.2 * v
            });
            let dither =
                ArrayD::from_shape_simple_fn(IxDyn(&[lo.0, lo.1]), || rng.random::<f64>());
            let target = ArrayD::from_shape_simple_fn(IxDyn(&[2, lo.0 * f, lo.1 * f]), || {
                rng.random::<f64>() - 0.5
            });
            FdFixture {
                model,
                pattern,
                stack,
                shot,
                dither,
                target,
                saturation: 65535.0,
                m: NoiseModel::default().m,
                w_g: 1.0,
                lo,
            }
        }

        fn wire(&self, g: &mut DiffGraph, role: &FdRole, x: NodeId) -> Result<NodeId> {
            let weights = match role {
                FdRole::Weights => x,
                _ => g.leaf(Tensor::Real(
                    ArrayD::from_shape_vec(
                        IxDyn(&[self.pattern.weights.len()]),
                        self.pattern.weights.clone(),
                    )
                    .unwrap(),
                )),
            };
            let exposure = match role {
                FdRole::Exposure => x,
                _ => g.leaf(Tensor::scalar(self.pattern.exposure_ms)),
            };
            let mut net = CnnLeaves::register(g, &self.model);
            if let FdRole::NetParam(k) = role {
                net.ids[*k] = x;
            }
            let stack = g.leaf(Tensor::Real(self.stack.clone()));
            let shot = g.leaf(Tensor::Real(self.shot.clone()));
            let dither = g.leaf(Tensor::Real(self.dither.clone()));
            let target = g.leaf(Tensor::Real(self.target.clone()));
            let image = wire_emulation(
                g, stack, weights, exposure, self.saturation, self.m, shot, dither,
            )?;
            let input = g.reshape(image, &[1, self.lo.0, self.lo.1])?;
            let pred = forward_graph(g, &self.model, &net, input)?;
            wire_objective(g, pred, target, self.w_g)
        }
    }

    #[test]
    fn joint_graph_gradients_pass_finite_differences() {
        let fx = FdFixture::new(77);
        let weight_x = Tensor::Real(
            ArrayD::from_shape_vec(
                IxDyn(&[fx.pattern.weights.len()]),
                fx.pattern.weights.clone(),
            )
            .unwrap(),
        );
        let err = check_gradient(|g, x| fx.wire(g, &FdRole::Weights, x), &weight_x).unwrap();
        assert!(err < 1e-4, "pattern weights: {err}");

        let err = check_gradient(
            |g, x| fx.wire(g, &FdRole::Exposure, x),
            &Tensor::scalar(fx.pattern.exposure_ms),
        )
        .unwrap();
        assert!(err < 1e-4, "exposure: {err}");

        let params = fx.model.named_params();
        for &k in &[0usize, 1, 2, params.len() - 2, params.len() - 1] {
            let x = Tensor::Real(params[k].1.clone());
            let err = check_gradient(|g, xid| fx.wire(g, &FdRole::NetParam(k), xid), &x).unwrap();
            assert!(err < 1e-4, "network param {}: {err}", params[k].0);
        }
    }

    #[test]
    fn joint_training_descends_and_is_deterministic() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dataset = toy_dataset(&mut rng, 6, 3, (8, 8), cfg.upsample_factor);
        let noise = NoiseModel::default();
        let settings = TrainSettings {
            epochs: 20,
            batch: 2,
            learning_rate: 1e-2,
            seed: 11,
            ..TrainSettings::default()
        };
        let (p1, m1, h1) = train_joint(&dataset, &cfg, &noise, &small_arch(), &settings).unwrap();
        let (p2, m2, h2) = train_joint(&dataset, &cfg, &noise, &small_arch(), &settings).unwrap();
        assert_eq!(h1.len(), settings.epochs);
        assert!(
            h1.last().unwrap() < h1.first().unwrap(),
            "loss went {} -> {}",
            h1.first().unwrap(),
            h1.last().unwrap()
        );
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
        for ((_, a), (_, b)) in m1.named_params().iter().zip(m2.named_params().iter()) {
            assert_eq!(a, b);
        }
        assert!(p1.validate().is_ok());
    }

    #[test]
    fn frozen_pattern_training_updates_only_the_network() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dataset = toy_dataset(&mut rng, 6, 3, (8, 8), cfg.upsample_factor);
        let noise = NoiseModel::default();
        let settings = TrainSettings {
            epochs: 10,
            batch: 2,
            learning_rate: 1e-2,
            seed: 11,
            finetune: true,
            ..TrainSettings::default()
        };
        let (pattern, model, history) =
            train_joint(&dataset, &cfg, &noise, &small_arch(), &settings).unwrap();
        let init = init_pattern(3, settings.seed);
        assert_eq!(pattern, init);
        let fresh = CnnModel::init(
            &small_arch(),
            cfg.upsample_factor,
            settings.seed.wrapping_add(NETWORK_SEED_OFFSET),
        )
        .unwrap();
        let moved = model
            .named_params()
            .iter()
            .zip(fresh.named_params().iter())
            .any(|((_, a), (_, b))| a != b);
        assert!(moved, "network never moved");
        assert!(history.last().unwrap() < history.first().unwrap());
    }

    #[test]
    fn aggressive_steps_stay_inside_the_feasible_box() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dataset = toy_dataset(&mut rng, 2, 3, (8, 8), cfg.upsample_factor);
        let noise = NoiseModel::default();
        let settings = TrainSettings {
            epochs: 8,
            batch: 1,
            learning_rate: 150.0,
            seed: 3,
            ..TrainSettings::default()
        };
        let (pattern, _, _) =
            train_joint(&dataset, &cfg, &noise, &small_arch(), &settings).unwrap();
        assert!(pattern.weights.iter().all(|c| (0.0..=1.0).contains(c)));
        assert!((0.0..=FULL_EXPOSURE_MS).contains(&pattern.exposure_ms));
    }

    #[test]
    fn finetune_touches_network_but_not_pattern() {
        let cfg = tiny_cfg();
        let f = cfg.upsample_factor;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dataset = toy_dataset(&mut rng, 4, 3, (8, 8), f);
        let pattern = init_pattern(3, 4);
        let before = pattern.clone();
        let model = CnnModel::init(&small_arch(), f, 40).unwrap();
        let rendered = render_pattern_examples(&dataset, &pattern, None).unwrap();
        let settings = TrainSettings {
            epochs: 15,
            batch: 2,
            learning_rate: 1e-2,
            seed: 0,
            ..TrainSettings::default()
        };
        let (tuned, history) = finetune(&rendered, &pattern, &model, &cfg, &settings).unwrap();
        assert_eq!(pattern, before);
        assert!(history.last().unwrap() < history.first().unwrap());
        let changed = model
            .named_params()
            .iter()
            .zip(tuned.named_params().iter())
            .any(|((_, a), (_, b))| a != b);
        assert!(changed, "finetune left every parameter untouched");

        let mut bad = rendered.clone();
        bad[0].target.values = Array2::from_elem((3, 3), Complex64::new(0.0, 0.0));
        assert!(matches!(
            finetune(&bad, &pattern, &model, &cfg, &settings),
            Err(FpmError::Size(_))
        ));
    }

    #[test]
    fn prediction_is_single_pass_and_shaped() {
        let cfg = tiny_cfg();
        let f = cfg.upsample_factor;
        let model = CnnModel::init(&small_arch(), f, 8).unwrap();
        let image = Array2::from_shape_fn((8, 6), |(y, x)| (y * 6 + x) as f64 * 0.1);
        let a = predict_single_shot(&image, &model, &cfg).unwrap();
        let b = predict_single_shot(&image, &model, &cfg).unwrap();
        assert_eq!(a.shape(), (8 * f, 6 * f));
        assert_eq!(a.pitch_um, cfg.high_res_pitch_um());
        assert_eq!(a.values, b.values);
        let empty = Array2::<f64>::zeros((0, 4));
        assert!(predict_single_shot(&empty, &model, &cfg).is_err());
    }

    #[test]
    fn evaluation_noise_is_reproducible_per_seed() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let dataset = toy_dataset(&mut rng, 3, 3, (8, 8), cfg.upsample_factor);
        let pattern = init_pattern(3, 12);
        let model = CnnModel::init(&small_arch(), cfg.upsample_factor, 13).unwrap();
        let noise = NoiseModel::default();
        let a = evaluate_pattern(&dataset, &pattern, &model, &cfg, Some((&noise, 7)), 1.0)
            .unwrap();
        let b = evaluate_pattern(&dataset, &pattern, &model, &cfg, Some((&noise, 7)), 1.0)
            .unwrap();
        let c = evaluate_pattern(&dataset, &pattern, &model, &cfg, Some((&noise, 8)), 1.0)
            .unwrap();
        let clean = evaluate_pattern(&dataset, &pattern, &model, &cfg, None, 1.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, clean);
        assert!(a.is_finite() && clean.is_finite());
    }
}
