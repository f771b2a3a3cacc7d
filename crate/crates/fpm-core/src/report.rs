//! Visual and text artifacts: 16-bit grayscale PNG export for fields and
//! intensities, a self-rendered loss-history plot, and metric summaries.
//!
//! Exports never clip silently: intensities outside the 16-bit range are
//! an error unless the caller passes an explicit scale, which is the
//! documented opt-in to clamping.

use image::{ImageBuffer, Luma};
use ndarray::Array2;
use num_complex::Complex64;
use std::path::Path;

use crate::error::{FpmError, Result};

const GRAY_MAX: f64 = 65535.0;

fn image_error(path: &Path, e: image::ImageError) -> FpmError {
    FpmError::Format(format!("{}: {e}", path.display()))
}

/// Saves a (H, W) u16 array as 16-bit grayscale PNG.
pub fn save_gray16(path: &Path, image: &Array2<u16>) -> Result<()> {
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(FpmError::Size("cannot export an empty image".into()));
    }
    let raw: Vec<u16> = image.iter().copied().collect();
    let buf = ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, raw)
        .expect("raw length matches dims");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Reads a 16-bit grayscale PNG back into a (H, W) u16 array.
pub fn load_gray16(path: &Path) -> Result<Array2<u16>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let buf = img.into_luma16();
    let (w, h) = buf.dimensions();
    let raw = buf.into_raw();
    Ok(Array2::from_shape_vec((h as usize, w as usize), raw).expect("raw length matches dims"))
}

/// Exports an intensity image to 16-bit grayscale. Without a scale, any
/// value outside [0, 65535] is an error; with one, values are multiplied
/// by it and then clamped, which is the explicit opt-in to clipping.
pub fn export_intensity(path: &Path, data: &Array2<f64>, scale: Option<f64>) -> Result<()> {
    if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
        return Err(FpmError::Domain(format!(
            "intensity export hit a non-finite value {bad}"
        )));
    }
    let pixels = match scale {
        None => {
            if let Some(bad) = data.iter().find(|v| **v < 0.0 || **v > GRAY_MAX) {
                return Err(FpmError::Domain(format!(
                    "intensity {bad} is outside [0, {GRAY_MAX}]; pass a scale to clamp"
                )));
            }
            data.mapv(|v| v.round() as u16)
        }
        Some(s) => {
            if !(s > 0.0 && s.is_finite()) {
                return Err(FpmError::Config(format!(
                    "export scale must be positive and finite, got {s}"
                )));
            }
            data.mapv(|v| (v * s).clamp(0.0, GRAY_MAX).round() as u16)
        }
    };
    save_gray16(path, &pixels)
}

/// Maps amplitudes linearly onto [0, 65535] with the maximum at full
/// scale; an all-zero field stays black.
pub fn amplitude_image(field: &Array2<Complex64>) -> Array2<u16> {
    let max = field.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
    if max == 0.0 {
        return Array2::zeros(field.dim());
    }
    field.mapv(|v| ((v.norm() / max) * GRAY_MAX).round() as u16)
}

/// Maps phases linearly from [-pi, pi] onto [0, 65535].
pub fn phase_image(field: &Array2<Complex64>) -> Array2<u16> {
    let pi = std::f64::consts::PI;
    field.mapv(|v| (((v.arg() + pi) / (2.0 * pi)) * GRAY_MAX).round() as u16)
}

const PLOT_W: usize = 800;
const PLOT_H: usize = 400;
const PLOT_MARGIN: usize = 40;

fn draw_line(canvas: &mut Array2<u8>, a: (i64, i64), b: (i64, i64), shade: u8) {
    let (h, w) = canvas.dim();
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            canvas[[y as usize, x as usize]] = shade;
        }
        if x == b.0 && y == b.1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Renders the loss history as a polyline plot and saves it as 8-bit
/// grayscale PNG. The vertical axis is log10 when every loss is positive,
/// linear otherwise.
pub fn save_loss_plot(path: &Path, history: &[f64]) -> Result<()> {
    if history.is_empty() {
        return Err(FpmError::Size("loss history is empty".into()));
    }
    if let Some(bad) = history.iter().find(|v| !v.is_finite()) {
        return Err(FpmError::Domain(format!(
            "loss history holds a non-finite value {bad}"
        )));
    }
    let log_scale = history.iter().all(|&v| v > 0.0);
    let values: Vec<f64> = if log_scale {
        history.iter().map(|v| v.log10()).collect()
    } else {
        history.to_vec()
    };
    let mut lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        lo -= 1.0;
        hi += 1.0;
    }

    let mut canvas = Array2::<u8>::from_elem((PLOT_H, PLOT_W), 255);
    let x0 = PLOT_MARGIN as i64;
    let x1 = (PLOT_W - PLOT_MARGIN) as i64;
    let y0 = PLOT_MARGIN as i64;
    let y1 = (PLOT_H - PLOT_MARGIN) as i64;
    for frac in [0.25, 0.5, 0.75] {
        let y = y0 + ((y1 - y0) as f64 * frac).round() as i64;
        draw_line(&mut canvas, (x0, y), (x1, y), 220);
    }
    draw_line(&mut canvas, (x0, y0), (x0, y1), 0);
    draw_line(&mut canvas, (x0, y1), (x1, y1), 0);

    let n = values.len();
    let to_px = |i: usize, v: f64| -> (i64, i64) {
        let fx = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
        let fy = (v - lo) / (hi - lo);
        (
            x0 + ((x1 - x0) as f64 * fx).round() as i64,
            y1 - ((y1 - y0) as f64 * fy).round() as i64,
        )
    };
    if n == 1 {
        let (x, y) = to_px(0, values[0]);
        draw_line(&mut canvas, (x - 2, y), (x + 2, y), 0);
        draw_line(&mut canvas, (x, y - 2), (x, y + 2), 0);
    } else {
        for i in 1..n {
            let a = to_px(i - 1, values[i - 1]);
            let b = to_px(i, values[i]);
            draw_line(&mut canvas, a, b, 0);
        }
    }

    let raw: Vec<u8> = canvas.iter().copied().collect();
    let buf =
        ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(PLOT_W as u32, PLOT_H as u32, raw)
            .expect("raw length matches dims");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Formats metric name/value pairs as `name = value` lines.
pub fn metrics_text(pairs: &[(&str, f64)]) -> String {
    let mut s = String::new();
    for (name, value) in pairs {
        s.push_str(&format!("{name} = {value:.9e}\n"));
    }
    s
}

/// Writes [`metrics_text`] to a file.
pub fn write_metrics(path: &Path, pairs: &[(&str, f64)]) -> Result<()> {
    std::fs::write(path, metrics_text(pairs))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gray16_png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let image = Array2::from_shape_fn((48, 64), |_| rng.random::<u16>());
        save_gray16(&path, &image).unwrap();
        let back = load_gray16(&path).unwrap();
        assert_eq!(back, image);
    }

    #[test]
    fn intensity_export_refuses_silent_clipping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.png");
        let mut data = Array2::from_elem((4, 4), 1000.0);
        data[[0, 0]] = 70_000.0;
        assert!(matches!(
            export_intensity(&path, &data, None),
            Err(FpmError::Domain(_))
        ));
        export_intensity(&path, &data, Some(0.5)).unwrap();
        let back = load_gray16(&path).unwrap();
        assert_eq!(back[[0, 0]], 35_000);
        assert_eq!(back[[1, 1]], 500);

        let mut negative = Array2::from_elem((2, 2), 5.0);
        negative[[0, 1]] = -1.0;
        assert!(export_intensity(&path, &negative, None).is_err());
    }

    #[test]
    fn amplitude_and_phase_maps_hit_their_endpoints() {
        let pi = std::f64::consts::PI;
        let mut field = Array2::from_elem((1, 4), Complex64::new(0.0, 0.0));
        field[[0, 0]] = Complex64::from_polar(2.0, 0.0);
        field[[0, 1]] = Complex64::from_polar(1.0, pi / 2.0);
        field[[0, 2]] = Complex64::from_polar(0.5, -pi);
        let amp = amplitude_image(&field);
        assert_eq!(amp[[0, 0]], 65535);
        assert_eq!(amp[[0, 1]], 32768);
        assert_eq!(amp[[0, 3]], 0);
        let ph = phase_image(&field);
        assert_eq!(ph[[0, 0]], 32768);
        assert_eq!(ph[[0, 1]], 49151);
        assert_eq!(ph[[0, 2]], 0);

        let dark = Array2::from_elem((2, 2), Complex64::new(0.0, 0.0));
        assert!(amplitude_image(&dark).iter().all(|&v| v == 0));
    }

    #[test]
    fn loss_plot_renders_and_rejects_empty_history() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.png");
        let history: Vec<f64> = (0..100).map(|i| 100.0 * 0.95f64.powi(i)).collect();
        save_loss_plot(&path, &history).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!(img.width() as usize, PLOT_W);
        assert_eq!(img.height() as usize, PLOT_H);
        assert!(matches!(
            save_loss_plot(&path, &[]),
            Err(FpmError::Size(_))
        ));
        save_loss_plot(&path, &[1.0]).unwrap();
        save_loss_plot(&path, &[0.0, -1.0, 2.0]).unwrap();
    }

    #[test]
    fn metrics_lines_are_parsable() {
        let text = metrics_text(&[("passband_error", 0.0123), ("final_loss", 1e-9)]);
        for line in text.lines() {
            let (k, v) = line.split_once(" = ").unwrap();
            assert!(!k.is_empty());
            v.trim().parse::<f64>().unwrap();
        }
    }
}
