//! Synthetic CT data factory: ellipse phantoms, parallel-beam projection,
//! Beer-Lambert Poisson dose noise, filtered backprojection and HU scaling.

mod dataset;
mod dose;
mod phantom;
mod projection;

pub use dataset::{generate_dataset, SimConfig};
pub use dose::{apply_poisson_dose, DoseModel};
pub use phantom::{head_interior_mask, head_phantom, make_phantom, Anatomy, Ellipse, Phantom, PhantomSpec};
pub use projection::{default_detectors, fbp, masked_nrmse, radon, Sinogram};

use crate::error::Result;
use crate::tensor::Tensor;

/// Linear attenuation of water in 1/mm.
pub const MU_WATER: f64 = 0.02;

/// Row-major 2-D array of f64 samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        Tensor::image(self.rows, self.cols, self.data.iter().map(|&v| v as f32).collect())
    }
}

/// HU = 1000 (mu - mu_water) / mu_water.
pub fn mu_to_hu(image: &Grid, mu_water: f64) -> Grid {
    image.map(|mu| 1000.0 * (mu - mu_water) / mu_water)
}

pub fn hu_to_mu(image: &Grid, mu_water: f64) -> Grid {
    image.map(|hu| mu_water * (1.0 + hu / 1000.0))
}
