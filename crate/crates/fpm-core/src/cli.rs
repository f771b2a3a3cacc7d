//! Command-line entry points. Each subcommand is a thin wrapper over one
//! library operation: it loads the flat config, applies the optional
//! master seed override, runs the stage, and persists the results as
//! FPMA arrays, PNG images, and metric text files.
//!
//! Exit codes by error category: 2 for config/size/domain problems, 3
//! for numeric failures, 4 for I/O and format failures. Errors print as
//! one `error[<category>]: <message>` line on stderr. Output directories
//! are only created after the config loads, so a bad config leaves no
//! partial outputs.

use clap::{Args, Parser, Subcommand};
use ndarray::{Array3, Axis, Ix1, Ix2, Ix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

use crate::arrayfile::{load_checkpoint, read_array, save_checkpoint, write_array, ArrayData};
use crate::cnn::CnnArch;
use crate::error::{FpmError, Result};
use crate::metrics::passband_spectral_error;
use crate::noise::{apply_poisson_approx, calibrate_noise};
use crate::optics::{
    select_centermost, simulate_stack, synthetic_passband, ComplexField, ImageStack,
    FULL_EXPOSURE_MS,
};
use crate::phantom::{generate_phantom, render_training_set, PhantomSpec, TargetMode};
use crate::recon::reconstruct;
use crate::report::{
    amplitude_image, export_intensity, phase_image, save_gray16, save_loss_plot, write_metrics,
};
use crate::runconfig::{load_config, save_config, RunConfig};
use crate::train::{finetune, predict_single_shot, train_joint, PatternExample};

#[derive(Parser)]
#[command(
    name = "fpm",
    version,
    about = "Simulation-backed Fourier ptychography: phantoms, stacks, reconstruction, and illumination-pattern training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (flat key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the phantom, noise, and training seeds in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created once the config has loaded.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured phantom and write it as a complex array.
    Phantom {
        #[command(flatten)]
        common: Common,
    },
    /// Render the per-LED measurement stack of an object.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Object array to image; defaults to the configured phantom.
        #[arg(long)]
        object: Option<PathBuf>,
    },
    /// Fit the shot-noise curve from repeated exposures of one scene.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Number of repeated exposures.
        #[arg(long, default_value_t = 100)]
        repeats: usize,
    },
    /// Iteratively reconstruct a high-res field from a measurement stack.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Measurement stack array (L, H, W).
        #[arg(long)]
        stack: PathBuf,
        /// Ground-truth field for passband error metrics.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Jointly train the illumination pattern and the network.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Continue training the network on captured single-shot images.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory to start from.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Captured images array (N, H, W).
        #[arg(long)]
        images: PathBuf,
        /// Target fields array (N, f*H, f*W).
        #[arg(long)]
        targets: PathBuf,
    },
    /// Reconstruct one multiplexed image with the trained network.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory holding the network.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Single multiplexed image array (H, W).
        #[arg(long)]
        image: PathBuf,
    },
    /// Emit amplitude/phase images, loss plots, and a metrics summary.
    Report {
        #[command(flatten)]
        common: Common,
        /// Reconstructed or predicted field array.
        #[arg(long)]
        object: PathBuf,
        /// Ground-truth field for error metrics.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Loss history array to plot.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Raw intensity array to export as 16-bit grayscale.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Scale applied to the raw intensity export; without it,
        /// out-of-range intensities are an error instead of clipping.
        #[arg(long)]
        scale: Option<f64>,
    },
}

/// Parses argv and runs one subcommand, returning the process exit code.
pub fn run_cli<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        report_error(&e);
        return e.exit_code();
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            report_error(&e);
            e.exit_code()
        }
    }
}

fn report_error(e: &FpmError) {
    let text = e.to_string().replace('\n', " ");
    let prefix = format!("{}: ", e.category());
    let msg = text.strip_prefix(&prefix).unwrap_or(&text);
    eprintln!("error[{}]: {}", e.category(), msg);
}

/// Honors the FPM_THREADS env var for the rayon pool size.
fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FPM_THREADS") {
        let n: usize = v.parse().map_err(|_| {
            FpmError::Config(format!("FPM_THREADS must be a thread count, got {v:?}"))
        })?;
        if n == 0 {
            return Err(FpmError::Config("FPM_THREADS must be at least 1".into()));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Phantom { common } => cmd_phantom(&common),
        Command::Simulate { common, object } => cmd_simulate(&common, object.as_deref()),
        Command::Calibrate { common, repeats } => cmd_calibrate(&common, repeats),
        Command::Reconstruct {
            common,
            stack,
            truth,
        } => cmd_reconstruct(&common, &stack, truth.as_deref()),
        Command::Train { common } => cmd_train(&common),
        Command::Finetune {
            common,
            checkpoint,
            images,
            targets,
        } => cmd_finetune(&common, &checkpoint, &images, &targets),
        Command::Predict {
            common,
            checkpoint,
            image,
        } => cmd_predict(&common, &checkpoint, &image),
        Command::Report {
            common,
            object,
            truth,
            history,
            image,
            scale,
        } => cmd_report(
            &common,
            &object,
            truth.as_deref(),
            history.as_deref(),
            image.as_deref(),
            scale,
        ),
    }
}

/// Loads and validates the config, applies the seed override, and only
/// then creates the output directory.
fn prepare(common: &Common) -> Result<RunConfig> {
    let mut cfg = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    std::fs::create_dir_all(&common.out_dir)?;
    save_config(&common.out_dir.join("config.txt"), &cfg)?;
    Ok(cfg)
}

fn wrote(path: &Path) {
    println!("wrote {}", path.display());
}

fn load_field(path: &Path, pitch_um: f64) -> Result<ComplexField> {
    let array = read_array(path)?.into_c128()?;
    let values = array.into_dimensionality::<Ix2>().map_err(|_| {
        FpmError::Size(format!("{}: field array must be 2-D", path.display()))
    })?;
    Ok(ComplexField { values, pitch_um })
}

fn load_stack(path: &Path, cfg: &RunConfig) -> Result<ImageStack> {
    let array = read_array(path)?.into_f64()?;
    let images = array.into_dimensionality::<Ix3>().map_err(|_| {
        FpmError::Size(format!(
            "{}: stack array must be 3-D (images, rows, cols)",
            path.display()
        ))
    })?;
    let n = images.len_of(Axis(0));
    if n != cfg.optics.num_leds {
        return Err(FpmError::Size(format!(
            "{}: stack has {n} images, config expects {}",
            path.display(),
            cfg.optics.num_leds
        )));
    }
    Ok(ImageStack {
        images,
        led_indices: (0..n).collect(),
        exposure_ms: vec![FULL_EXPOSURE_MS; n],
    })
}

fn write_field(path: &Path, field: &ComplexField) -> Result<()> {
    write_array(path, &ArrayData::C128(field.values.clone().into_dyn()))?;
    wrote(path);
    Ok(())
}

fn cmd_phantom(common: &Common) -> Result<()> {
    let cfg = prepare(common)?;
    let field = generate_phantom(&cfg.phantom, cfg.optics.high_res_pitch_um())?;
    write_field(&common.out_dir.join("object.fpma"), &field)
}

fn cmd_simulate(common: &Common, object: Option<&Path>) -> Result<()> {
    let cfg = prepare(common)?;
    let field = match object {
        Some(path) => load_field(path, cfg.optics.high_res_pitch_um())?,
        None => generate_phantom(&cfg.phantom, cfg.optics.high_res_pitch_um())?,
    };
    let leds = select_centermost(&cfg.optics, cfg.optics.num_leds)?;
    let noise = cfg.apply_noise.then_some(&cfg.noise);
    let examples = render_training_set(
        std::slice::from_ref(&field),
        &cfg.optics,
        &leds,
        noise,
        cfg.gain,
        &TargetMode::Oracle,
    )?;
    let stack = &examples[0].stack;
    let stack_path = common.out_dir.join("stack.fpma");
    write_array(&stack_path, &ArrayData::F64(stack.images.clone().into_dyn()))?;
    wrote(&stack_path);
    write_field(&common.out_dir.join("object.fpma"), &field)
}

fn cmd_calibrate(common: &Common, repeats: usize) -> Result<()> {
    let cfg = prepare(common)?;
    if repeats < 2 {
        return Err(FpmError::Config(format!(
            "calibration needs at least 2 repeats, got {repeats}"
        )));
    }
    let field = generate_phantom(&cfg.phantom, cfg.optics.high_res_pitch_um())?;
    let leds = select_centermost(&cfg.optics, cfg.optics.num_leds)?;
    let n_lo = field.values.dim().0 / cfg.optics.upsample_factor;
    let w_lo = field.values.dim().1 / cfg.optics.upsample_factor;
    let pupil = crate::optics::build_pupil(&cfg.optics, (n_lo, w_lo))?;
    let stack = simulate_stack(&field, &pupil, &cfg.optics, &leds)?.scaled(cfg.gain);
    let scene = stack.images.index_axis(Axis(0), 0).to_owned();
    let (h, w) = scene.dim();
    let mut repeated = Array3::<f64>::zeros((repeats, h, w));
    for k in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise.seed);
        rng.set_stream(k as u64 + 1);
        let noisy = apply_poisson_approx(&scene, &cfg.noise, &mut rng)?;
        repeated.index_axis_mut(Axis(0), k).assign(&noisy);
    }
    let (s, m) = calibrate_noise(&repeated)?;
    let repeats_path = common.out_dir.join("repeats.fpma");
    write_array(&repeats_path, &ArrayData::F64(repeated.into_dyn()))?;
    wrote(&repeats_path);
    let metrics_path = common.out_dir.join("metrics.txt");
    write_metrics(
        &metrics_path,
        &[
            ("noise_slope_s", s),
            ("noise_scale_m", m),
            ("repeats", repeats as f64),
        ],
    )?;
    wrote(&metrics_path);
    println!("calibrated slope s = {s:.4}, scale m = {m:.4}");
    Ok(())
}

fn cmd_reconstruct(common: &Common, stack_path: &Path, truth: Option<&Path>) -> Result<()> {
    let cfg = prepare(common)?;
    let stack = load_stack(stack_path, &cfg)?;
    let leds = select_centermost(&cfg.optics, cfg.optics.num_leds)?;
    let result = reconstruct(&stack, &cfg.optics, &leds, &cfg.recon)?;
    write_field(&common.out_dir.join("object.fpma"), &result.object)?;
    let amp_path = common.out_dir.join("pupil_amplitude.fpma");
    write_array(
        &amp_path,
        &ArrayData::F64(result.pupil.amplitude.clone().into_dyn()),
    )?;
    wrote(&amp_path);
    let phase_path = common.out_dir.join("pupil_phase.fpma");
    write_array(
        &phase_path,
        &ArrayData::F64(result.pupil.phase.clone().into_dyn()),
    )?;
    wrote(&phase_path);
    let history_path = common.out_dir.join("loss_history.fpma");
    write_array(
        &history_path,
        &ArrayData::F64(
            ndarray::Array1::from(result.loss_history.clone()).into_dyn(),
        ),
    )?;
    wrote(&history_path);

    let first = *result.loss_history.first().unwrap_or(&f64::NAN);
    let last = *result.loss_history.last().unwrap_or(&f64::NAN);
    let mut metrics: Vec<(&str, f64)> = vec![
        ("initial_loss", first),
        ("final_loss", last),
        ("loss_ratio", last / first),
    ];
    let passband;
    if let Some(truth_path) = truth {
        let truth_field = load_field(truth_path, cfg.optics.high_res_pitch_um())?;
        let n_hi = truth_field.values.dim().0;
        let mask = synthetic_passband(&cfg.optics, n_hi, &leds);
        passband = passband_spectral_error(&result.object, &truth_field, &mask)?;
        metrics.push(("passband_error", passband));
        println!("passband error {passband:.4}");
    }
    let metrics_path = common.out_dir.join("metrics.txt");
    write_metrics(&metrics_path, &metrics)?;
    wrote(&metrics_path);
    Ok(())
}

fn training_phantoms(cfg: &RunConfig) -> Result<Vec<ComplexField>> {
    let pitch = cfg.optics.high_res_pitch_um();
    (0..cfg.dataset_size)
        .map(|i| {
            let spec = PhantomSpec {
                seed: cfg.phantom.seed.wrapping_add(i as u64),
                ..cfg.phantom.clone()
            };
            generate_phantom(&spec, pitch)
        })
        .collect()
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = prepare(common)?;
    let leds = select_centermost(&cfg.optics, cfg.optics.num_leds)?;
    let phantoms = training_phantoms(&cfg)?;
    let noise = cfg.apply_noise.then_some(&cfg.noise);
    let dataset = render_training_set(
        &phantoms,
        &cfg.optics,
        &leds,
        noise,
        cfg.gain,
        &TargetMode::Oracle,
    )?;
    let (pattern, model, history) = train_joint(
        &dataset,
        &cfg.optics,
        &cfg.noise,
        &CnnArch::default(),
        &cfg.train,
    )?;
    let ckpt_dir = common.out_dir.join("checkpoint");
    save_checkpoint(&ckpt_dir, &pattern, &model)?;
    wrote(&ckpt_dir);
    let history_path = common.out_dir.join("history.fpma");
    write_array(
        &history_path,
        &ArrayData::F64(ndarray::Array1::from(history.clone()).into_dyn()),
    )?;
    wrote(&history_path);
    let metrics_path = common.out_dir.join("metrics.txt");
    write_metrics(
        &metrics_path,
        &[
            ("first_epoch_loss", history[0]),
            ("last_epoch_loss", *history.last().unwrap()),
            ("exposure_ms", pattern.exposure_ms),
        ],
    )?;
    wrote(&metrics_path);
    println!(
        "trained {} epochs, loss {:.4e} -> {:.4e}",
        history.len(),
        history[0],
        history.last().unwrap()
    );
    Ok(())
}

fn cmd_finetune(
    common: &Common,
    checkpoint: &Path,
    images_path: &Path,
    targets_path: &Path,
) -> Result<()> {
    let cfg = prepare(common)?;
    let (pattern, model) = load_checkpoint(checkpoint)?;
    let images = read_array(images_path)?
        .into_f64()?
        .into_dimensionality::<Ix3>()
        .map_err(|_| {
            FpmError::Size(format!(
                "{}: images array must be 3-D",
                images_path.display()
            ))
        })?;
    let targets = read_array(targets_path)?
        .into_c128()?
        .into_dimensionality::<Ix3>()
        .map_err(|_| {
            FpmError::Size(format!(
                "{}: targets array must be 3-D",
                targets_path.display()
            ))
        })?;
    if images.len_of(Axis(0)) != targets.len_of(Axis(0)) {
        return Err(FpmError::Size(format!(
            "{} images but {} targets",
            images.len_of(Axis(0)),
            targets.len_of(Axis(0))
        )));
    }
    let pitch = cfg.optics.high_res_pitch_um();
    let dataset: Vec<PatternExample> = images
        .outer_iter()
        .zip(targets.outer_iter())
        .map(|(img, tgt)| PatternExample {
            image: img.to_owned(),
            target: ComplexField {
                values: tgt.to_owned(),
                pitch_um: pitch,
            },
        })
        .collect();
    let (tuned, history) = finetune(&dataset, &pattern, &model, &cfg.optics, &cfg.train)?;
    let ckpt_dir = common.out_dir.join("checkpoint");
    save_checkpoint(&ckpt_dir, &pattern, &tuned)?;
    wrote(&ckpt_dir);
    let history_path = common.out_dir.join("history.fpma");
    write_array(
        &history_path,
        &ArrayData::F64(ndarray::Array1::from(history.clone()).into_dyn()),
    )?;
    wrote(&history_path);
    let metrics_path = common.out_dir.join("metrics.txt");
    write_metrics(
        &metrics_path,
        &[
            ("first_epoch_loss", history[0]),
            ("last_epoch_loss", *history.last().unwrap()),
        ],
    )?;
    wrote(&metrics_path);
    Ok(())
}

fn cmd_predict(common: &Common, checkpoint: &Path, image_path: &Path) -> Result<()> {
    let cfg = prepare(common)?;
    let (_, model) = load_checkpoint(checkpoint)?;
    let image = read_array(image_path)?
        .into_f64()?
        .into_dimensionality::<Ix2>()
        .map_err(|_| {
            FpmError::Size(format!("{}: image array must be 2-D", image_path.display()))
        })?;
    let field = predict_single_shot(&image, &model, &cfg.optics)?;
    write_field(&common.out_dir.join("prediction.fpma"), &field)?;
    let (h, w) = field.shape();
    println!("predicted {h} x {w} complex field from one image");
    Ok(())
}

fn cmd_report(
    common: &Common,
    object_path: &Path,
    truth: Option<&Path>,
    history: Option<&Path>,
    image: Option<&Path>,
    scale: Option<f64>,
) -> Result<()> {
    let cfg = prepare(common)?;
    let field = load_field(object_path, cfg.optics.high_res_pitch_um())?;
    let amp_path = common.out_dir.join("amplitude.png");
    save_gray16(&amp_path, &amplitude_image(&field.values))?;
    wrote(&amp_path);
    let phase_path = common.out_dir.join("phase.png");
    save_gray16(&phase_path, &phase_image(&field.values))?;
    wrote(&phase_path);

    let mean_amp = field.values.iter().map(|v| v.norm()).sum::<f64>()
        / field.values.len() as f64;
    let mut metrics: Vec<(&str, f64)> = vec![("mean_amplitude", mean_amp)];

    let passband;
    if let Some(truth_path) = truth {
        let truth_field = load_field(truth_path, cfg.optics.high_res_pitch_um())?;
        let leds = select_centermost(&cfg.optics, cfg.optics.num_leds)?;
        let n_hi = truth_field.values.dim().0;
        let mask = synthetic_passband(&cfg.optics, n_hi, &leds);
        passband = passband_spectral_error(&field, &truth_field, &mask)?;
        metrics.push(("passband_error", passband));
    }
    if let Some(history_path) = history {
        let losses = read_array(history_path)?
            .into_f64()?
            .into_dimensionality::<Ix1>()
            .map_err(|_| {
                FpmError::Size(format!(
                    "{}: loss history must be 1-D",
                    history_path.display()
                ))
            })?;
        let plot_path = common.out_dir.join("loss.png");
        save_loss_plot(&plot_path, losses.as_slice().expect("contiguous"))?;
        wrote(&plot_path);
        metrics.push(("final_loss", *losses.last().unwrap_or(&f64::NAN)));
    }
    if let Some(intensity_path) = image {
        let data = read_array(intensity_path)?
            .into_f64()?
            .into_dimensionality::<Ix2>()
            .map_err(|_| {
                FpmError::Size(format!(
                    "{}: intensity array must be 2-D",
                    intensity_path.display()
                ))
            })?;
        let png_path = common.out_dir.join("intensity.png");
        export_intensity(&png_path, &data, scale)?;
        wrote(&png_path);
    }
    let metrics_path = common.out_dir.join("metrics.txt");
    write_metrics(&metrics_path, &metrics)?;
    wrote(&metrics_path);
    Ok(())
}
