//! Resolving `--data NAME|PATH` into something trainable.

use std::path::Path;

use ndarray::Array2;
use rectiflow::data::{
    make_distribution, read_matrix_csv, Benchmark, DataSource, Empirical, ToyMel, ToyMelConfig,
    BENCHMARK_NAMES,
};
use rectiflow::flow::{IndependentCoupling, OffsetCoupling, PairSource};
use rectiflow::solvers::ConditionSource;
use rectiflow::{Error, Result, Rng};

pub enum Dataset {
    Plain(Box<dyn DataSource>),
    Toy(Box<ToyMel>),
    /// `x1 = x0 + shift`; its data marginal is `N(shift, I)`.
    Offset(OffsetCoupling, Benchmark),
}

impl Dataset {
    /// Accepts a benchmark name, `toy_mel`, `offset:a,b,...` or a CSV path.
    pub fn resolve(spec: &str, toy: &ToyMelConfig) -> Result<Self> {
        let spec = spec.trim();
        if BENCHMARK_NAMES.contains(&spec) {
            return Ok(Dataset::Plain(Box::new(make_distribution(spec)?)));
        }
        if spec == "toy_mel" {
            return Ok(Dataset::Toy(Box::new(ToyMel::new(toy.clone())?)));
        }
        if let Some(values) = spec.strip_prefix("offset:") {
            let shift = values
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Config(format!("bad offset {values:?}")))?;
            if shift.is_empty() || shift.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("bad offset {values:?}")));
            }
            let marginal = Benchmark::Gaussian {
                mean: shift.clone(),
                std: 1.0,
            };
            return Ok(Dataset::Offset(OffsetCoupling { shift }, marginal));
        }
        if Path::new(spec).is_file() {
            let (_, rows) = read_matrix_csv(spec)?;
            return Ok(Dataset::Plain(Box::new(Empirical::new(rows, spec)?)));
        }
        Err(Error::Config(format!(
            "unknown data {spec:?}; expected one of {}, toy_mel, offset:a,b or a CSV file",
            BENCHMARK_NAMES.join(", ")
        )))
    }

    /// The data label a model trained on reflow pairs of `spec` records.
    pub fn base_spec(label: &str) -> &str {
        let mut s = label;
        while let Some(inner) = s.strip_prefix("reflow[").and_then(|r| r.strip_suffix(']')) {
            s = inner;
        }
        s
    }

    pub fn pair_source(&self) -> Box<dyn PairSource + '_> {
        match self {
            Dataset::Plain(data) => Box::new(IndependentCoupling { data: data.as_ref() }),
            Dataset::Toy(toy) => Box::new(ToyPairs(toy.as_ref())),
            Dataset::Offset(coupling, _) => Box::new(coupling.clone()),
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        match self {
            Dataset::Plain(data) => data.sample(n, rng),
            Dataset::Toy(toy) => toy.sample(n, rng),
            Dataset::Offset(_, marginal) => marginal.sample(n, rng),
        }
    }

    pub fn conditions(&self) -> Option<&dyn ConditionSource> {
        match self {
            Dataset::Toy(toy) => Some(toy.as_ref()),
            _ => None,
        }
    }

    pub fn toy(&self) -> Option<&ToyMel> {
        match self {
            Dataset::Toy(toy) => Some(toy.as_ref()),
            _ => None,
        }
    }
}

/// Borrowing adapter so a `ToyMel` can be boxed as a pair source.
struct ToyPairs<'a>(&'a ToyMel);

impl PairSource for ToyPairs<'_> {
    fn dim(&self) -> usize {
        PairSource::dim(self.0)
    }

    fn draw(&self, n: usize, rng: &mut Rng) -> Result<rectiflow::flow::PairBatch> {
        self.0.draw(n, rng)
    }

    fn is_conditional(&self) -> bool {
        self.0.is_conditional()
    }

    fn rectification_round(&self) -> u32 {
        self.0.rectification_round()
    }

    fn describe(&self) -> String {
        self.0.describe()
    }
}
