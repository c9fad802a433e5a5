//! Beer-Lambert photon counting with Poisson statistics.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::projection::Sinogram;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoseModel {
    /// Incident photons per detector bin at full dose.
    pub incident_photons: f64,
    /// 1.0 is full dose, 0.25 quarter dose.
    pub dose_fraction: f64,
}

impl DoseModel {
    pub const DEFAULT_INCIDENT_PHOTONS: f64 = 1e5;

    pub fn new(incident_photons: f64, dose_fraction: f64) -> Result<Self> {
        let model = Self {
            incident_photons,
            dose_fraction,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.incident_photons >= 1.0) || !self.incident_photons.is_finite() {
            return Err(Error::param(format!(
                "incident photon count must be at least 1, got {}",
                self.incident_photons
            )));
        }
        if !(self.dose_fraction > 0.0 && self.dose_fraction <= 1.0) {
            return Err(Error::param(format!(
                "dose fraction must lie in (0, 1], got {}",
                self.dose_fraction
            )));
        }
        Ok(())
    }

    /// Expected photons per bin before attenuation.
    pub fn blank_scan(&self) -> f64 {
        self.incident_photons * self.dose_fraction
    }
}

/// Draws one photon count for a bin with line integral `p` and converts it
/// back to a noisy line integral, clamping starved bins at one count.
pub fn noisy_line_integral<R: Rng + ?Sized>(p: f64, blank: f64, rng: &mut R) -> f64 {
    let lambda = blank * (-p).exp();
    let counts = if lambda > 0.0 && lambda.is_finite() {
        // Poisson::new only fails for non-positive or non-finite rates
        Poisson::new(lambda).map(|d| d.sample(rng)).unwrap_or(0.0)
    } else {
        0.0
    };
    (blank / counts.max(1.0)).ln()
}

pub fn apply_poisson_dose<R: Rng + ?Sized>(
    sinogram: &Sinogram,
    dose: &DoseModel,
    rng: &mut R,
) -> Result<Sinogram> {
    dose.validate()?;
    if let Some(v) = sinogram.values.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sinogram contains {v}")));
    }
    let blank = dose.blank_scan();
    let mut noisy = sinogram.clone();
    for v in noisy.values.data.iter_mut() {
        *v = noisy_line_integral(*v, blank, rng);
    }
    Ok(noisy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctsim::Grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn draws(p: f64, dose: DoseModel, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| noisy_line_integral(p, dose.blank_scan(), &mut rng)).collect()
    }

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn huge_flux_is_near_identity() {
        let dose = DoseModel::new(1e9, 1.0).unwrap();
        let mut values = Grid::zeros(8, 16);
        for (i, v) in values.data.iter_mut().enumerate() {
            *v = 5.0 * i as f64 / 127.0;
        }
        let sino = Sinogram {
            values,
            angles: (0..8).map(|a| a as f64).collect(),
            detector_spacing_mm: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy = apply_poisson_dose(&sino, &dose, &mut rng).unwrap();
        let mae = noisy
            .values
            .data
            .iter()
            .zip(&sino.values.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 128.0;
        assert!(mae < 1e-3, "mean abs error {mae}");
    }

    #[test]
    fn quarter_dose_quadruples_variance() {
        let p = 2.0;
        let (_, full) = mean_var(&draws(p, DoseModel::new(1e4, 1.0).unwrap(), 10_000, 1));
        let (_, quarter) = mean_var(&draws(p, DoseModel::new(1e4, 0.25).unwrap(), 10_000, 2));
        let ratio = quarter / full;
        assert!((ratio - 4.0).abs() <= 0.8, "variance ratio {ratio}");
    }

    #[test]
    fn unattenuated_bins_average_to_zero() {
        let dose = DoseModel::new(1e4, 1.0).unwrap();
        let v = draws(0.0, dose, 10_000, 5);
        let (m, var) = mean_var(&v);
        let sigma_of_mean = (var / v.len() as f64).sqrt();
        // the log transform carries a small positive bias of 1/(2 lambda)
        assert!(m.abs() <= 3.0 * sigma_of_mean + 0.5 / dose.blank_scan(), "mean {m}");
    }

    #[test]
    fn starved_bins_are_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = noisy_line_integral(1e4, 10.0, &mut rng);
        assert_eq!(v, 10f64.ln());
    }

    #[test]
    fn invalid_dose_rejected() {
        assert!(DoseModel::new(1e5, 0.0).is_err());
        assert!(DoseModel::new(1e5, 1.5).is_err());
        assert!(DoseModel::new(0.5, 1.0).is_err());
    }
}
