use rectiflow::data::{make_distribution, Benchmark, DataSource};
use rectiflow::flow::{
    build_reflow_dataset, sample_times, train_step, CoupledDataset, IndependentCoupling, PairSource, TrainConfig,
};
use rectiflow::metrics::model_straightness;
use rectiflow::nn::{Adam, AdamConfig};
use rectiflow::solvers::{gaussian_noise, integrate_model, SolverConfig};
use rectiflow::{seeded_rng, FlowModel, Result, Rng};

/// Points used for the straightness readout and its time grid.
const STRAIGHTNESS_ROWS: usize = 256;
const STRAIGHTNESS_STEPS: usize = 32;

/// A 2-D flow that is trained a few steps at a time so a page can redraw
/// between chunks.
pub struct Demo {
    data: Benchmark,
    config: TrainConfig,
    model: FlowModel,
    optimizer: Adam,
    rng: Rng,
    /// `None` until the first reflow, then the pairs the current model
    /// is regressed on.
    coupling: Option<CoupledDataset>,
    step: u64,
}

impl Demo {
    pub fn new(dataset: &str, seed: u64) -> Result<Self> {
        let data = make_distribution(dataset)?;
        let config = TrainConfig {
            batch_size: 256,
            steps: 0,
            adam: AdamConfig {
                learning_rate: 2e-3,
                ..AdamConfig::default()
            },
            seed,
            hidden: vec![64, 64],
            ..TrainConfig::default()
        };
        let mut rng = seeded_rng(seed);
        let (model, optimizer) = config.init(data.dim(), &mut rng)?;
        let mut demo = Self {
            data,
            config,
            model,
            optimizer,
            rng,
            coupling: None,
            step: 0,
        };
        demo.stamp();
        Ok(demo)
    }

    fn stamp(&mut self) {
        let (round, label) = with_source(&self.data, &self.coupling, |s| (s.rectification_round(), s.describe()));
        self.model.meta.rectification_round = round;
        self.model.meta.train_steps = self.step;
        self.model.meta.extra.insert("data".into(), label);
    }

    /// Runs `steps` optimizer steps and returns their mean loss.
    pub fn train(&mut self, steps: u32) -> Result<f64> {
        let Self { data, config, model, optimizer, rng, coupling, step } = self;
        let n = config.batch_size;
        let total = with_source(data, coupling, |source| -> Result<f64> {
            let mut total = 0.0;
            for _ in 0..steps {
                let batch = source.draw(n, rng)?;
                let t = sample_times(n, rng);
                total += train_step(model, optimizer, &batch, &t, *step)?;
                *step += 1;
            }
            Ok(total)
        })?;
        self.model.field.clear_cache();
        self.stamp();
        Ok(if steps == 0 { 0.0 } else { total / steps as f64 })
    }

    /// Euler paths of `n` noise points, flattened time-major as
    /// `[step][row][x, y]` with `steps + 1` states.
    pub fn trajectories(&mut self, n: usize, steps: usize) -> Result<Vec<f64>> {
        let z0 = gaussian_noise(n, self.data.dim(), &mut self.rng);
        let out = integrate_model(&self.model, z0.view(), None, &SolverConfig::euler(steps).recording(), 1)?;
        let (_, path) = &out.trajectories[0];
        Ok(path.states.iter().flat_map(|s| s.iter().copied()).collect())
    }

    /// `n` draws from the target, flattened as `[row][x, y]`.
    pub fn target(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.data.sample(n, &mut self.rng)?.into_iter().collect())
    }

    /// Couples `pairs` noise points with their RK45 endpoints under the
    /// current model and restarts training from a fresh model on them.
    pub fn reflow(&mut self, pairs: usize) -> Result<u32> {
        let dataset = build_reflow_dataset(
            &self.model,
            pairs,
            &SolverConfig::rk45_default(),
            None,
            &mut self.rng,
            1,
        )?;
        let (model, optimizer) = self.config.init(self.data.dim(), &mut self.rng)?;
        self.model = model;
        self.optimizer = optimizer;
        self.coupling = Some(dataset);
        self.step = 0;
        self.stamp();
        Ok(self.round())
    }

    pub fn straightness(&mut self) -> Result<f64> {
        model_straightness(&self.model, STRAIGHTNESS_ROWS, STRAIGHTNESS_STEPS, &mut self.rng, None)
    }

    pub fn round(&self) -> u32 {
        self.model.meta.rectification_round
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &FlowModel {
        &self.model
    }
}

/// Lends out whichever coupling the current round trains on.
fn with_source<R>(data: &Benchmark, coupling: &Option<CoupledDataset>, f: impl FnOnce(&dyn PairSource) -> R) -> R {
    match coupling {
        Some(pairs) => f(pairs),
        None => f(&IndependentCoupling { data }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_dataset_is_rejected() {
        assert!(Demo::new("spiral", 0).is_err());
    }

    #[test]
    fn trajectory_layout() {
        let mut demo = Demo::new("two_moons", 1).unwrap();
        let flat = demo.trajectories(5, 3).unwrap();
        assert_eq!(flat.len(), 4 * 5 * 2);
        // A fresh model has a zero output layer, so nothing moves.
        assert_eq!(flat[..10], flat[30..]);
        assert_eq!(demo.target(7).unwrap().len(), 14);
    }

    #[test]
    fn training_then_reflow_straightens() {
        let mut demo = Demo::new("two_gaussians", 2).unwrap();
        let first = demo.train(20).unwrap();
        let last = demo.train(400).unwrap();
        assert!(last < first, "{first} -> {last}");
        assert_eq!((demo.round(), demo.steps()), (1, 420));
        let before = demo.straightness().unwrap();

        assert_eq!(demo.reflow(1000).unwrap(), 2);
        assert_eq!(demo.steps(), 0);
        assert_eq!(demo.model().meta.extra["data"], "reflow[two_gaussians]");
        demo.train(400).unwrap();
        let after = demo.straightness().unwrap();
        assert!(after < before / 2.0, "{before} -> {after}");
    }

    #[test]
    fn same_seed_same_run() {
        let run = |seed| {
            let mut demo = Demo::new("checkerboard", seed).unwrap();
            demo.train(10).unwrap();
            demo.trajectories(4, 2).unwrap()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
