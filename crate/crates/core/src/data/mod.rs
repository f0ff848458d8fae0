//! Synthetic target distributions and their independent oracles.

mod benchmarks;
mod csv;
mod toy_mel;

pub use benchmarks::{make_distribution, Benchmark, Empirical, BENCHMARK_NAMES};
pub use csv::{read_matrix_csv, write_matrix_csv};
pub use toy_mel::{ToyMel, ToyMelConfig, ToySpeakerSpec, ToyUtterance};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::solvers::gaussian_noise;
use crate::Rng;

/// An unlimited i.i.d. sampler over `R^dim`.
pub trait DataSource: Send + Sync {
    fn dim(&self) -> usize;

    /// `n x dim` fresh draws.
    fn sample(&self, n: usize, rng: &mut Rng) -> Result<Array2<f64>>;

    fn name(&self) -> String;
}

/// The standard Gaussian on `R^dim`, the flow's starting distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSource {
    pub dim: usize,
}

pub fn noise_source(dim: usize) -> Result<NoiseSource> {
    if dim == 0 {
        return Err(Error::Config("noise dimension must be >= 1".into()));
    }
    Ok(NoiseSource { dim })
}

impl DataSource for NoiseSource {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, n: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        Ok(gaussian_noise(n, self.dim, rng))
    }

    fn name(&self) -> String {
        "noise".into()
    }
}
