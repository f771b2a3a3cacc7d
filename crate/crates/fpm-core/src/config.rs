use crate::error::{FpmError, Result};

/// Instrument geometry and sampling parameters.
///
/// Defaults describe the reference setup: 20x objective of NA 0.5 at
/// 518 nm, a 6.5 um sensor pixel (0.325 um at the object plane), and a
/// 32x32 LED matrix with 4 mm pitch placed 69.5 mm below the sample.
#[derive(Clone, Debug, PartialEq)]
pub struct OpticsConfig {
    /// Illumination wavelength in micrometers.
    pub wavelength_um: f64,
    /// Objective numerical aperture.
    pub objective_na: f64,
    /// Objective magnification.
    pub magnification: f64,
    /// Sensor pixel size in micrometers.
    pub sensor_pixel_um: f64,
    /// Sensor bit depth.
    pub bit_depth: u32,
    /// LED lattice pitch in millimeters.
    pub led_pitch_mm: f64,
    /// Distance from the LED matrix to the sample in millimeters.
    pub led_z_mm: f64,
    /// LED matrix dimensions (rows, cols).
    pub led_grid: (u32, u32),
    /// Number of LEDs used by the default brightfield set.
    pub num_leds: usize,
    /// Upsampling factor f between the low-res and high-res grids.
    pub upsample_factor: usize,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        OpticsConfig {
            wavelength_um: 0.518,
            objective_na: 0.5,
            magnification: 20.0,
            sensor_pixel_um: 6.5,
            bit_depth: 16,
            led_pitch_mm: 4.0,
            led_z_mm: 69.5,
            led_grid: (32, 32),
            num_leds: 69,
            upsample_factor: 2,
        }
    }
}

impl OpticsConfig {
    /// Object-plane pixel pitch of the sensor grid, in micrometers.
    pub fn low_res_pitch_um(&self) -> f64 {
        self.sensor_pixel_um / self.magnification
    }

    /// Pixel pitch of the upsampled reconstruction grid, in micrometers.
    pub fn high_res_pitch_um(&self) -> f64 {
        self.low_res_pitch_um() / self.upsample_factor as f64
    }

    /// Coherent frequency cutoff NA/lambda of the objective, in 1/um.
    pub fn cutoff_frequency(&self) -> f64 {
        self.objective_na / self.wavelength_um
    }

    /// Frequency bin spacing 1/(N * pitch) for an N-sample axis on the
    /// low-res grid. The high-res grid of f*N samples at pitch/f has the
    /// same spacing, which is what makes integer-bin spectrum cropping
    /// exact.
    pub fn bin_spacing(&self, n_lo: usize) -> f64 {
        1.0 / (n_lo as f64 * self.low_res_pitch_um())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength_um > 0.0) {
            return Err(FpmError::Config(format!(
                "wavelength must be positive, got {}",
                self.wavelength_um
            )));
        }
        if !(self.objective_na > 0.0 && self.objective_na < 1.0) {
            return Err(FpmError::Config(format!(
                "objective NA must lie in (0, 1), got {}",
                self.objective_na
            )));
        }
        if !(self.magnification > 0.0) {
            return Err(FpmError::Config(format!(
                "magnification must be positive, got {}",
                self.magnification
            )));
        }
        if !(self.sensor_pixel_um > 0.0) {
            return Err(FpmError::Config(format!(
                "sensor pixel must be positive, got {}",
                self.sensor_pixel_um
            )));
        }
        if !(self.led_z_mm > 0.0) {
            return Err(FpmError::Config(format!(
                "LED distance must be positive, got {}",
                self.led_z_mm
            )));
        }
        if !(self.led_pitch_mm > 0.0) {
            return Err(FpmError::Config(format!(
                "LED pitch must be positive, got {}",
                self.led_pitch_mm
            )));
        }
        if self.upsample_factor < 1 {
            return Err(FpmError::Config(
                "upsample factor must be at least 1".into(),
            ));
        }
        if !(8..=16).contains(&self.bit_depth) {
            return Err(FpmError::Config(format!(
                "bit depth must lie in 8..=16, got {}",
                self.bit_depth
            )));
        }
        if self.led_grid.0 == 0 || self.led_grid.1 == 0 {
            return Err(FpmError::Config("LED grid must be nonempty".into()));
        }
        if self.num_leds == 0 {
            return Err(FpmError::Config("num_leds must be positive".into()));
        }
        Ok(())
    }

    /// Checks that `upsample_factor` is large enough for the synthetic
    /// passband of `max_illum_na`: f >= ceil((NA_obj + NA_ill) / NA_obj).
    pub fn validate_upsampling(&self, max_illum_na: f64) -> Result<()> {
        let needed = ((self.objective_na + max_illum_na) / self.objective_na).ceil() as usize;
        if self.upsample_factor < needed {
            return Err(FpmError::Config(format!(
                "upsample factor {} cannot hold the synthetic passband; need at least {}",
                self.upsample_factor, needed
            )));
        }
        Ok(())
    }
}
