//! The flat key=value run configuration.
//!
//! One text document controls every pipeline stage. Lines are
//! `key = value`, `#` starts a comment, keys are dotted but the document
//! has no nesting, unknown and duplicate keys are rejected, and every key
//! has a documented default, so [`render_config`] of the defaults doubles
//! as the reference for the format. Rendering and parsing round-trip
//! exactly.

use std::collections::HashSet;
use std::path::Path;

use crate::config::OpticsConfig;
use crate::error::{FpmError, Result};
use crate::noise::NoiseModel;
use crate::phantom::{PhantomKind, PhantomSpec};
use crate::recon::ReconSettings;
use crate::train::TrainSettings;

/// Everything a CLI run needs, assembled from one flat document.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub optics: OpticsConfig,
    pub noise: NoiseModel,
    pub recon: ReconSettings,
    pub train: TrainSettings,
    pub phantom: PhantomSpec,
    /// Intensity scale from unit-brightness simulation to camera counts.
    pub gain: f64,
    /// Whether `simulate` and dataset rendering add sensor noise.
    pub apply_noise: bool,
    /// Number of phantoms rendered for the training dataset.
    pub dataset_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            optics: OpticsConfig::default(),
            noise: NoiseModel::default(),
            recon: ReconSettings::default(),
            train: TrainSettings::default(),
            phantom: PhantomSpec {
                kind: PhantomKind::Blobs { count: 8 },
                size: 128,
                amplitude_range: (0.6, 1.0),
                phase_range: (-0.15, 0.15),
                feature_scale_um: 3.25,
                seed: 1,
            },
            gain: 100.0,
            apply_noise: true,
            dataset_size: 20,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.optics.validate()?;
        self.noise.validate()?;
        self.recon.validate()?;
        self.train.validate()?;
        self.phantom.validate(self.optics.high_res_pitch_um())?;
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(FpmError::Config(format!(
                "run.gain must be positive and finite, got {}",
                self.gain
            )));
        }
        if self.dataset_size == 0 {
            return Err(FpmError::Config(
                "run.dataset_size must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Applies the CLI `--seed` override: one master seed for phantom
    /// generation, noise emulation, and training.
    pub fn override_seed(&mut self, seed: u64) {
        self.phantom.seed = seed;
        self.noise.seed = seed;
        self.train.seed = seed;
    }
}

fn kind_fields(kind: &PhantomKind) -> (&'static str, usize, usize) {
    match kind {
        PhantomKind::Bars { count } => ("bars", count.unwrap_or(0), 8),
        PhantomKind::TwoPoint => ("two-point", 0, 8),
        PhantomKind::Blobs { count } => ("blobs", 0, *count),
    }
}

/// Writes every key with its current value, in a stable order.
pub fn render_config(cfg: &RunConfig) -> String {
    let o = &cfg.optics;
    let (kind, bar_count, blob_count) = kind_fields(&cfg.phantom.kind);
    let mut s = String::new();
    s.push_str("# instrument geometry and sampling\n");
    s.push_str(&format!("optics.wavelength_um = {}\n", o.wavelength_um));
    s.push_str(&format!("optics.objective_na = {}\n", o.objective_na));
    s.push_str(&format!("optics.magnification = {}\n", o.magnification));
    s.push_str(&format!("optics.sensor_pixel_um = {}\n", o.sensor_pixel_um));
    s.push_str(&format!("optics.bit_depth = {}\n", o.bit_depth));
    s.push_str(&format!("optics.led_pitch_mm = {}\n", o.led_pitch_mm));
    s.push_str(&format!("optics.led_z_mm = {}\n", o.led_z_mm));
    s.push_str(&format!("optics.led_grid_rows = {}\n", o.led_grid.0));
    s.push_str(&format!("optics.led_grid_cols = {}\n", o.led_grid.1));
    s.push_str(&format!("optics.num_leds = {}\n", o.num_leds));
    s.push_str(&format!("optics.upsample_factor = {}\n", o.upsample_factor));
    s.push_str("\n# sensor noise model\n");
    s.push_str(&format!("noise.m = {}\n", cfg.noise.m));
    s.push_str(&format!("noise.bit_depth = {}\n", cfg.noise.bit_depth));
    s.push_str(&format!("noise.seed = {}\n", cfg.noise.seed));
    s.push_str("\n# iterative reconstruction\n");
    s.push_str(&format!("recon.learning_rate = {}\n", cfg.recon.learning_rate));
    s.push_str(&format!("recon.iterations = {}\n", cfg.recon.iterations));
    s.push_str(&format!("recon.patch_rows = {}\n", cfg.recon.patch_grid.0));
    s.push_str(&format!("recon.patch_cols = {}\n", cfg.recon.patch_grid.1));
    s.push_str(&format!("recon.overlap = {}\n", cfg.recon.overlap));
    s.push_str(&format!(
        "recon.pupil_phase_learning = {}\n",
        cfg.recon.pupil_phase_learning
    ));
    s.push_str("\n# joint pattern/network training\n");
    s.push_str(&format!("train.epochs = {}\n", cfg.train.epochs));
    s.push_str(&format!("train.batch = {}\n", cfg.train.batch));
    s.push_str(&format!("train.learning_rate = {}\n", cfg.train.learning_rate));
    s.push_str(&format!(
        "train.weight_gradient = {}\n",
        cfg.train.weight_gradient
    ));
    s.push_str(&format!("train.seed = {}\n", cfg.train.seed));
    s.push_str(&format!("train.finetune = {}\n", cfg.train.finetune));
    s.push_str("\n# synthetic object\n");
    s.push_str(&format!("phantom.kind = {kind}\n"));
    s.push_str(&format!("phantom.bar_count = {bar_count}\n"));
    s.push_str(&format!("phantom.blob_count = {blob_count}\n"));
    s.push_str(&format!("phantom.size = {}\n", cfg.phantom.size));
    s.push_str(&format!(
        "phantom.amplitude_lo = {}\n",
        cfg.phantom.amplitude_range.0
    ));
    s.push_str(&format!(
        "phantom.amplitude_hi = {}\n",
        cfg.phantom.amplitude_range.1
    ));
    s.push_str(&format!("phantom.phase_lo = {}\n", cfg.phantom.phase_range.0));
    s.push_str(&format!("phantom.phase_hi = {}\n", cfg.phantom.phase_range.1));
    s.push_str(&format!(
        "phantom.feature_scale_um = {}\n",
        cfg.phantom.feature_scale_um
    ));
    s.push_str(&format!("phantom.seed = {}\n", cfg.phantom.seed));
    s.push_str("\n# run-level switches\n");
    s.push_str(&format!("run.gain = {}\n", cfg.gain));
    s.push_str(&format!("run.apply_noise = {}\n", cfg.apply_noise));
    s.push_str(&format!("run.dataset_size = {}\n", cfg.dataset_size));
    s
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| FpmError::Config(format!("key {key} has unparsable value {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(FpmError::Config(format!(
            "key {key} must be true or false, got {other:?}"
        ))),
    }
}

/// Parses a document produced by hand or by [`render_config`]: defaults
/// first, then one override per line. Unknown and repeated keys fail.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let (mut kind, mut bar_count, mut blob_count) = kind_fields(&cfg.phantom.kind);
    let mut kind_owned = kind.to_string();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            FpmError::Config(format!("line {} has no '=': {raw:?}", i + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(FpmError::Config(format!(
                "key {key} appears twice (line {})",
                i + 1
            )));
        }
        match key {
            "optics.wavelength_um" => cfg.optics.wavelength_um = parse_num(key, value)?,
            "optics.objective_na" => cfg.optics.objective_na = parse_num(key, value)?,
            "optics.magnification" => cfg.optics.magnification = parse_num(key, value)?,
            "optics.sensor_pixel_um" => cfg.optics.sensor_pixel_um = parse_num(key, value)?,
            "optics.bit_depth" => cfg.optics.bit_depth = parse_num(key, value)?,
            "optics.led_pitch_mm" => cfg.optics.led_pitch_mm = parse_num(key, value)?,
            "optics.led_z_mm" => cfg.optics.led_z_mm = parse_num(key, value)?,
            "optics.led_grid_rows" => cfg.optics.led_grid.0 = parse_num(key, value)?,
            "optics.led_grid_cols" => cfg.optics.led_grid.1 = parse_num(key, value)?,
            "optics.num_leds" => cfg.optics.num_leds = parse_num(key, value)?,
            "optics.upsample_factor" => cfg.optics.upsample_factor = parse_num(key, value)?,
            "noise.m" => cfg.noise.m = parse_num(key, value)?,
            "noise.bit_depth" => cfg.noise.bit_depth = parse_num(key, value)?,
            "noise.seed" => cfg.noise.seed = parse_num(key, value)?,
            "recon.learning_rate" => cfg.recon.learning_rate = parse_num(key, value)?,
            "recon.iterations" => cfg.recon.iterations = parse_num(key, value)?,
            "recon.patch_rows" => cfg.recon.patch_grid.0 = parse_num(key, value)?,
            "recon.patch_cols" => cfg.recon.patch_grid.1 = parse_num(key, value)?,
            "recon.overlap" => cfg.recon.overlap = parse_num(key, value)?,
            "recon.pupil_phase_learning" => {
                cfg.recon.pupil_phase_learning = parse_bool(key, value)?
            }
            "train.epochs" => cfg.train.epochs = parse_num(key, value)?,
            "train.batch" => cfg.train.batch = parse_num(key, value)?,
            "train.learning_rate" => cfg.train.learning_rate = parse_num(key, value)?,
            "train.weight_gradient" => cfg.train.weight_gradient = parse_num(key, value)?,
            "train.seed" => cfg.train.seed = parse_num(key, value)?,
            "train.finetune" => cfg.train.finetune = parse_bool(key, value)?,
            "phantom.kind" => kind_owned = value.to_string(),
            "phantom.bar_count" => bar_count = parse_num(key, value)?,
            "phantom.blob_count" => blob_count = parse_num(key, value)?,
            "phantom.size" => cfg.phantom.size = parse_num(key, value)?,
            "phantom.amplitude_lo" => cfg.phantom.amplitude_range.0 = parse_num(key, value)?,
            "phantom.amplitude_hi" => cfg.phantom.amplitude_range.1 = parse_num(key, value)?,
            "phantom.phase_lo" => cfg.phantom.phase_range.0 = parse_num(key, value)?,
            "phantom.phase_hi" => cfg.phantom.phase_range.1 = parse_num(key, value)?,
            "phantom.feature_scale_um" => {
                cfg.phantom.feature_scale_um = parse_num(key, value)?
            }
            "phantom.seed" => cfg.phantom.seed = parse_num(key, value)?,
            "run.gain" => cfg.gain = parse_num(key, value)?,
            "run.apply_noise" => cfg.apply_noise = parse_bool(key, value)?,
            "run.dataset_size" => cfg.dataset_size = parse_num(key, value)?,
            other => {
                return Err(FpmError::Config(format!(
                    "unknown key {other} (line {})",
                    i + 1
                )))
            }
        }
    }
    kind = kind_owned.as_str();
    cfg.phantom.kind = match kind {
        "bars" => PhantomKind::Bars {
            count: if bar_count == 0 { None } else { Some(bar_count) },
        },
        "two-point" => PhantomKind::TwoPoint,
        "blobs" => PhantomKind::Blobs { count: blob_count },
        other => {
            return Err(FpmError::Config(format!(
                "phantom.kind must be bars, two-point, or blobs, got {other:?}"
            )))
        }
    };
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        FpmError::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    let cfg = parse_config(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::write(path, render_config(cfg))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_render_and_parse_back_exactly() {
        let cfg = RunConfig::default();
        let text = render_config(&cfg);
        let back = parse_config(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn overrides_apply_and_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.optics.upsample_factor = 4;
        cfg.recon.patch_grid = (2, 3);
        cfg.train.learning_rate = 5e-4;
        cfg.phantom.kind = PhantomKind::Bars { count: Some(2) };
        cfg.phantom.feature_scale_um = 0.4875;
        cfg.gain = 400.0;
        cfg.apply_noise = false;
        let back = parse_config(&render_config(&cfg)).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_duplicate_and_malformed_keys_fail() {
        assert!(matches!(
            parse_config("optics.coffee = 3"),
            Err(FpmError::Config(_))
        ));
        assert!(matches!(
            parse_config("noise.m = 2\nnoise.m = 3"),
            Err(FpmError::Config(_))
        ));
        assert!(matches!(
            parse_config("noise.m"),
            Err(FpmError::Config(_))
        ));
        assert!(matches!(
            parse_config("noise.m = pretzel"),
            Err(FpmError::Config(_))
        ));
        assert!(matches!(
            parse_config("phantom.kind = squiggle"),
            Err(FpmError::Config(_))
        ));
        assert!(matches!(
            parse_config("run.apply_noise = yes"),
            Err(FpmError::Config(_))
        ));
    }

    #[test]
    fn comments_blanks_and_kind_order_are_tolerated() {
        let text = "\n# leading comment\nphantom.bar_count = 3 # trailing\n\nphantom.kind = bars\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.phantom.kind, PhantomKind::Bars { count: Some(3) });
    }

    #[test]
    fn master_seed_override_reaches_all_stages() {
        let mut cfg = RunConfig::default();
        cfg.override_seed(99);
        assert_eq!(cfg.phantom.seed, 99);
        assert_eq!(cfg.noise.seed, 99);
        assert_eq!(cfg.train.seed, 99);
    }

    #[test]
    fn validation_rejects_bad_sections() {
        let mut cfg = RunConfig::default();
        cfg.optics.objective_na = 1.5;
        assert!(matches!(cfg.validate(), Err(FpmError::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.gain = 0.0;
        assert!(matches!(cfg.validate(), Err(FpmError::Config(_))));
    }
}
