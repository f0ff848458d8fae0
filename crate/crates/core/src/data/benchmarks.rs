use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::DataSource;
use crate::error::{Error, Result};
use crate::Rng;

pub const BENCHMARK_NAMES: [&str; 3] = ["two_gaussians", "two_moons", "checkerboard"];

/// Closed-form 2-D targets.
///
/// * `TwoGaussians`: equal mixture of `N((-4, 0), I)` and `N((4, 0), I)`.
/// * `TwoMoons`: radius-2 half circles, the upper one centred at `(-1, -0.5)`
///   and the lower one at `(1, 0.5)`, plus isotropic noise of std `noise`.
/// * `Checkerboard`: uniform on the "even" cells of a 4x4 board of side-2
///   squares covering `[-4, 4]²`.
/// * `Gaussian`: `N(mean, std² I)` in any dimension.
#[derive(Debug, Clone, PartialEq)]
pub enum Benchmark {
    TwoGaussians,
    TwoMoons { noise: f64 },
    Checkerboard,
    Gaussian { mean: Vec<f64>, std: f64 },
}

pub const MOON_RADIUS: f64 = 2.0;
pub const MOON_CENTERS: [[f64; 2]; 2] = [[-1.0, -0.5], [1.0, 0.5]];

pub fn make_distribution(name: &str) -> Result<Benchmark> {
    match name {
        "two_gaussians" => Ok(Benchmark::TwoGaussians),
        "two_moons" => Ok(Benchmark::TwoMoons { noise: 0.1 }),
        "checkerboard" => Ok(Benchmark::Checkerboard),
        other => Err(Error::Config(format!(
            "unknown distribution {other:?}; expected one of {}",
            BENCHMARK_NAMES.join(", ")
        ))),
    }
}

impl Benchmark {
    fn draw(&self, rng: &mut Rng, out: &mut [f64]) {
        match self {
            Benchmark::TwoGaussians => {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                out[0] = 4.0 * sign + Distribution::<f64>::sample(&StandardNormal, rng);
                out[1] = StandardNormal.sample(rng);
            }
            Benchmark::TwoMoons { noise } => {
                let theta = rng.random_range(0.0..PI);
                let (cx, cy, dir) = if rng.random_bool(0.5) {
                    (MOON_CENTERS[0][0], MOON_CENTERS[0][1], 1.0)
                } else {
                    (MOON_CENTERS[1][0], MOON_CENTERS[1][1], -1.0)
                };
                let nx: f64 = StandardNormal.sample(rng);
                let ny: f64 = StandardNormal.sample(rng);
                out[0] = cx + dir * MOON_RADIUS * theta.cos() + noise * nx;
                out[1] = cy + dir * MOON_RADIUS * theta.sin() + noise * ny;
            }
            Benchmark::Checkerboard => {
                let x: f64 = rng.random_range(-4.0..4.0);
                let cx = (((x + 4.0) / 2.0).floor() as i64).clamp(0, 3);
                let cy = 2 * rng.random_range(0..2i64) + cx % 2;
                out[0] = x;
                out[1] = -4.0 + 2.0 * cy as f64 + rng.random_range(0.0..2.0);
            }
            Benchmark::Gaussian { mean, std } => {
                for (o, m) in out.iter_mut().zip(mean) {
                    *o = m + std * Distribution::<f64>::sample(&StandardNormal, rng);
                }
            }
        }
    }

    /// Distance from a point to the nearer moon arc's circle.
    pub fn moon_residual(x: ArrayView1<'_, f64>) -> f64 {
        MOON_CENTERS
            .iter()
            .map(|c| (((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt() - MOON_RADIUS).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Support check: checkerboard cells exactly, moons within three noise
    /// standard deviations of an arc's circle. Gaussians have full support.
    pub fn contains(&self, x: ArrayView1<'_, f64>) -> bool {
        match self {
            Benchmark::TwoGaussians | Benchmark::Gaussian { .. } => x.iter().all(|v| v.is_finite()),
            Benchmark::TwoMoons { noise } => Self::moon_residual(x) <= 3.0 * noise,
            Benchmark::Checkerboard => {
                if !(-4.0..4.0).contains(&x[0]) || !(-4.0..4.0).contains(&x[1]) {
                    return false;
                }
                let cx = ((x[0] + 4.0) / 2.0).floor() as i64;
                let cy = ((x[1] + 4.0) / 2.0).floor() as i64;
                (cx + cy) % 2 == 0
            }
        }
    }

    /// Density for the Gaussian targets, `None` otherwise.
    pub fn density(&self, x: ArrayView1<'_, f64>) -> Option<f64> {
        let gauss2 = |dx: f64, dy: f64| (-(dx * dx + dy * dy) / 2.0).exp() / (2.0 * PI);
        match self {
            Benchmark::TwoGaussians => {
                Some(0.5 * gauss2(x[0] - 4.0, x[1]) + 0.5 * gauss2(x[0] + 4.0, x[1]))
            }
            Benchmark::Gaussian { mean, std } => {
                let d = mean.len() as f64;
                let sq: f64 = x.iter().zip(mean).map(|(a, m)| (a - m).powi(2)).sum();
                Some((-sq / (2.0 * std * std)).exp() / (2.0 * PI * std * std).powf(d / 2.0))
            }
            _ => None,
        }
    }
}

impl DataSource for Benchmark {
    fn dim(&self) -> usize {
        match self {
            Benchmark::Gaussian { mean, .. } => mean.len(),
            _ => 2,
        }
    }

    fn sample(&self, n: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        let dim = self.dim();
        let mut out = Array2::zeros((n, dim));
        for mut row in out.rows_mut() {
            self.draw(rng, row.as_slice_mut().expect("contiguous row"));
        }
        Ok(out)
    }

    fn name(&self) -> String {
        match self {
            Benchmark::TwoGaussians => "two_gaussians".into(),
            Benchmark::TwoMoons { .. } => "two_moons".into(),
            Benchmark::Checkerboard => "checkerboard".into(),
            Benchmark::Gaussian { .. } => "gaussian".into(),
        }
    }
}

/// Uniform resampling (with replacement) of a fixed set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Empirical {
    rows: Array2<f64>,
    label: String,
}

impl Empirical {
    pub fn new(rows: Array2<f64>, label: impl Into<String>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::Config("empirical data source has no rows".into()));
        }
        Ok(Self {
            rows,
            label: label.into(),
        })
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }
}

impl DataSource for Empirical {
    fn dim(&self) -> usize {
        self.rows.ncols()
    }

    fn sample(&self, n: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.rows.nrows())).collect();
        Ok(self.rows.select(ndarray::Axis(0), &idx))
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}
