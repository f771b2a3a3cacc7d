//! Python bindings for the simulation and reconstruction pipeline.
//!
//! Builds as a `fpm` extension module exposing the forward model,
//! phantom generation, iterative reconstruction, noise calibration,
//! and the pattern-image emulation on NumPy arrays.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use numpy::{
    IntoPyArray, PyArray1, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3,
};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fpm_core::config::OpticsConfig;
use fpm_core::error::FpmError;
use fpm_core::noise::{apply_poisson_approx, apply_quantization, NoiseModel};
use fpm_core::optics::{
    build_pupil, emulate_pattern_image, max_illumination_na, select_centermost, simulate_stack,
    synthetic_passband, ComplexField, IlluminationPattern, ImageStack, FULL_EXPOSURE_MS,
};
use fpm_core::phantom::{generate_phantom, PhantomKind, PhantomSpec};
use fpm_core::recon::{reconstruct, ReconSettings};

fn to_py(e: FpmError) -> PyErr {
    match e {
        FpmError::Config(_) | FpmError::Size(_) | FpmError::Domain(_) | FpmError::Format(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Instrument geometry and sampling parameters.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Optics {
    inner: OpticsConfig,
}

#[pymethods]
impl Optics {
    #[new]
    #[pyo3(signature = (
        wavelength_um = 0.518,
        objective_na = 0.5,
        magnification = 20.0,
        sensor_pixel_um = 6.5,
        bit_depth = 16,
        led_pitch_mm = 4.0,
        led_z_mm = 69.5,
        led_grid = (32, 32),
        num_leds = 69,
        upsample_factor = 2,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        wavelength_um: f64,
        objective_na: f64,
        magnification: f64,
        sensor_pixel_um: f64,
        bit_depth: u32,
        led_pitch_mm: f64,
        led_z_mm: f64,
        led_grid: (u32, u32),
        num_leds: usize,
        upsample_factor: usize,
    ) -> PyResult<Self> {
        let inner = OpticsConfig {
            wavelength_um,
            objective_na,
            magnification,
            sensor_pixel_um,
            bit_depth,
            led_pitch_mm,
            led_z_mm,
            led_grid,
            num_leds,
            upsample_factor,
        };
        inner.validate().map_err(to_py)?;
        Ok(Optics { inner })
    }

    #[getter]
    fn wavelength_um(&self) -> f64 {
        self.inner.wavelength_um
    }

    #[getter]
    fn objective_na(&self) -> f64 {
        self.inner.objective_na
    }

    #[getter]
    fn num_leds(&self) -> usize {
        self.inner.num_leds
    }

    #[getter]
    fn upsample_factor(&self) -> usize {
        self.inner.upsample_factor
    }

    fn low_res_pitch_um(&self) -> f64 {
        self.inner.low_res_pitch_um()
    }

    fn high_res_pitch_um(&self) -> f64 {
        self.inner.high_res_pitch_um()
    }

    fn __repr__(&self) -> String {
        format!(
            "Optics(wavelength_um={}, objective_na={}, num_leds={}, upsample_factor={})",
            self.inner.wavelength_um,
            self.inner.objective_na,
            self.inner.num_leds,
            self.inner.upsample_factor
        )
    }
}

fn resolve(optics: Option<&Optics>) -> OpticsConfig {
    optics.map(|o| o.inner.clone()).unwrap_or_default()
}

/// LED lattice offsets (i, j) of the centermost brightfield set.
#[pyfunction]
#[pyo3(signature = (count = 69, optics = None))]
fn led_offsets(count: usize, optics: Option<&Optics>) -> PyResult<Vec<(i32, i32)>> {
    let cfg = resolve(optics);
    let leds = select_centermost(&cfg, count).map_err(to_py)?;
    Ok(leds.offsets)
}

/// Largest illumination NA over the centermost `count` LEDs.
#[pyfunction]
#[pyo3(signature = (count = 69, optics = None))]
fn illumination_na(count: usize, optics: Option<&Optics>) -> PyResult<f64> {
    let cfg = resolve(optics);
    let leds = select_centermost(&cfg, count).map_err(to_py)?;
    Ok(max_illumination_na(&cfg, &leds))
}

/// Deterministic synthetic object on the high-resolution grid.
///
/// `kind` is one of "blobs", "bars", or "two_point"; `count` is the blob
/// or bar count (ignored for two_point, fills the field for bars when
/// omitted).
#[pyfunction]
#[pyo3(signature = (
    kind,
    size,
    count = None,
    amplitude = (0.6, 1.0),
    phase = (-0.15, 0.15),
    feature_scale_um = 3.25,
    seed = 0,
    optics = None,
))]
#[allow(clippy::too_many_arguments)]
fn phantom<'py>(
    py: Python<'py>,
    kind: &str,
    size: usize,
    count: Option<usize>,
    amplitude: (f64, f64),
    phase: (f64, f64),
    feature_scale_um: f64,
    seed: u64,
    optics: Option<&Optics>,
) -> PyResult<Bound<'py, PyArray2<Complex64>>> {
    let cfg = resolve(optics);
    let kind = match kind {
        "blobs" => PhantomKind::Blobs {
            count: count.unwrap_or(8),
        },
        "bars" => PhantomKind::Bars { count },
        "two_point" => PhantomKind::TwoPoint,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown phantom kind {other:?}; expected blobs, bars, or two_point"
            )))
        }
    };
    let spec = PhantomSpec {
        kind,
        size,
        amplitude_range: amplitude,
        phase_range: phase,
        feature_scale_um,
        seed,
    };
    let field = generate_phantom(&spec, cfg.high_res_pitch_um()).map_err(to_py)?;
    Ok(field.values.into_pyarray(py))
}

fn stack_from_array(images: Array3<f64>) -> ImageStack {
    let n = images.shape()[0];
    ImageStack {
        images,
        led_indices: (0..n).collect(),
        exposure_ms: vec![FULL_EXPOSURE_MS; n],
    }
}

/// Noiseless single-LED intensity stack simulated from a complex object.
///
/// The object lives on the high-resolution grid; images come out on the
/// grid downsampled by the configured factor, one per centermost LED.
#[pyfunction]
#[pyo3(signature = (object, optics = None))]
fn simulate<'py>(
    py: Python<'py>,
    object: PyReadonlyArray2<'py, Complex64>,
    optics: Option<&Optics>,
) -> PyResult<Bound<'py, PyArray3<f64>>> {
    let cfg = resolve(optics);
    let values = object.as_array().to_owned();
    let images = py.detach(move || {
        let f = cfg.upsample_factor;
        let (h, w) = values.dim();
        if h % f != 0 || w % f != 0 {
            return Err(FpmError::Size(format!(
                "object {h}x{w} does not divide by the upsample factor {f}"
            )));
        }
        let field = ComplexField {
            values,
            pitch_um: cfg.high_res_pitch_um(),
        };
        let leds = select_centermost(&cfg, cfg.num_leds)?;
        let pupil = build_pupil(&cfg, (h / f, w / f))?;
        let stack = simulate_stack(&field, &pupil, &cfg, &leds)?;
        Ok(stack.images)
    });
    Ok(images.map_err(to_py)?.into_pyarray(py))
}

/// Iterative reconstruction of the high-resolution complex object.
///
/// Returns (object, pupil_phase, loss_history).
#[pyfunction]
#[pyo3(signature = (
    stack,
    optics = None,
    learning_rate = 0.2,
    iterations = 3000,
    patch_grid = (4, 4),
    overlap = 8,
    pupil_phase_learning = true,
))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn reconstruct_stack<'py>(
    py: Python<'py>,
    stack: PyReadonlyArray3<'py, f64>,
    optics: Option<&Optics>,
    learning_rate: f64,
    iterations: usize,
    patch_grid: (usize, usize),
    overlap: usize,
    pupil_phase_learning: bool,
) -> PyResult<(
    Bound<'py, PyArray2<Complex64>>,
    Bound<'py, PyArray2<f64>>,
    Bound<'py, PyArray1<f64>>,
)> {
    let cfg = resolve(optics);
    let images = stack.as_array().to_owned();
    let settings = ReconSettings {
        learning_rate,
        iterations,
        patch_grid,
        overlap,
        pupil_phase_learning,
    };
    let out = py.detach(move || {
        let leds = select_centermost(&cfg, cfg.num_leds)?;
        let stack = stack_from_array(images);
        reconstruct(&stack, &cfg, &leds, &settings)
    });
    let out = out.map_err(to_py)?;
    Ok((
        out.object.values.into_pyarray(py),
        out.pupil.phase.into_pyarray(py),
        ndarray::Array1::from_vec(out.loss_history).into_pyarray(py),
    ))
}

/// Emulated multiplexed image for per-LED weights and an exposure.
#[pyfunction]
#[pyo3(signature = (stack, weights, exposure_ms = 2000.0))]
fn pattern_image<'py>(
    py: Python<'py>,
    stack: PyReadonlyArray3<'py, f64>,
    weights: Vec<f64>,
    exposure_ms: f64,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let stack = stack_from_array(stack.as_array().to_owned());
    let pattern = IlluminationPattern {
        weights,
        exposure_ms,
    };
    let image = emulate_pattern_image(&stack, &pattern).map_err(to_py)?;
    Ok(image.into_pyarray(py))
}

/// Signal-dependent noise plus optional quantization applied to one image.
#[pyfunction]
#[pyo3(signature = (image, m = 5.948839976204639, bit_depth = 16, seed = 0, quantize = true))]
fn add_noise<'py>(
    py: Python<'py>,
    image: PyReadonlyArray2<'py, f64>,
    m: f64,
    bit_depth: u32,
    seed: u64,
    quantize: bool,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let model = NoiseModel { m, bit_depth, seed };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = apply_poisson_approx(&image.as_array().to_owned(), &model, &mut rng)
        .map_err(to_py)?;
    let out = if quantize {
        apply_quantization(&noisy, &model, &mut rng).map_err(to_py)?
    } else {
        noisy
    };
    Ok(out.into_pyarray(py))
}

/// Least-squares slope s and scale m = 1/s^2 from repeated noisy frames.
#[pyfunction]
fn calibrate<'py>(repeats: PyReadonlyArray3<'py, f64>) -> PyResult<(f64, f64)> {
    fpm_core::noise::calibrate_noise(&repeats.as_array().to_owned()).map_err(to_py)
}

/// Boolean mask of the synthetic passband on an n x n high-res grid.
#[pyfunction]
#[pyo3(signature = (n_hi, optics = None))]
fn passband<'py>(
    py: Python<'py>,
    n_hi: usize,
    optics: Option<&Optics>,
) -> PyResult<Bound<'py, PyArray2<bool>>> {
    let cfg = resolve(optics);
    let leds = select_centermost(&cfg, cfg.num_leds).map_err(to_py)?;
    Ok(synthetic_passband(&cfg, n_hi, &leds).into_pyarray(py))
}

/// Scale-aligned relative spectral error between two fields inside a mask.
#[pyfunction]
#[pyo3(signature = (recon, truth, mask, pitch_um = 0.1625))]
fn spectral_error<'py>(
    recon: PyReadonlyArray2<'py, Complex64>,
    truth: PyReadonlyArray2<'py, Complex64>,
    mask: PyReadonlyArray2<'py, bool>,
    pitch_um: f64,
) -> PyResult<f64> {
    let a = ComplexField {
        values: recon.as_array().to_owned(),
        pitch_um,
    };
    let b = ComplexField {
        values: truth.as_array().to_owned(),
        pitch_um,
    };
    let mask: Array2<bool> = mask.as_array().to_owned();
    fpm_core::metrics::passband_spectral_error(&a, &b, &mask).map_err(to_py)
}

#[pymodule]
fn fpm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Optics>()?;
    m.add_function(wrap_pyfunction!(led_offsets, m)?)?;
    m.add_function(wrap_pyfunction!(illumination_na, m)?)?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct_stack, m)?)?;
    m.add_function(wrap_pyfunction!(pattern_image, m)?)?;
    m.add_function(wrap_pyfunction!(add_noise, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(passband, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_error, m)?)?;
    Ok(())
}
