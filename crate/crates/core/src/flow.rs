//! The regression objective, couplings, the training loop and reflow.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::batch::{ensure_finite, ensure_same_shape, SampleBatch, SourceTag};
use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::fusion::{ConditionBundle, FusionConfig};
use crate::model::{CondBatch, FlowModel};
use crate::nn::{Adam, AdamConfig, Parameterized};
use crate::solvers::{gaussian_noise, sample, ConditionSource, SolverConfig};
use crate::vectorfield::{VectorFieldConfig, DEFAULT_TIME_SCALE};
use crate::{seeded_rng, Rng};

/// `x_t = t x1 + (1 - t) x0`, one `t` per row.
pub fn interpolate(
    x0: ArrayView2<'_, f64>,
    x1: ArrayView2<'_, f64>,
    t: &[f64],
) -> Result<Array2<f64>> {
    ensure_same_shape(x0, x1, "interpolation endpoints")?;
    if t.len() != x0.nrows() {
        return Err(Error::Dimension(format!(
            "{} times for {} rows",
            t.len(),
            x0.nrows()
        )));
    }
    if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Domain(format!("time {bad} outside [0, 1]")));
    }
    let mut out = Array2::zeros(x0.raw_dim());
    for (i, &ti) in t.iter().enumerate() {
        for j in 0..x0.ncols() {
            out[[i, j]] = ti * x1[[i, j]] + (1.0 - ti) * x0[[i, j]];
        }
    }
    Ok(out)
}

/// Mean over rows of `‖(x1 - x0) - v‖²`.
pub fn flow_loss(
    v_pred: ArrayView2<'_, f64>,
    x0: ArrayView2<'_, f64>,
    x1: ArrayView2<'_, f64>,
) -> Result<f64> {
    ensure_same_shape(x0, x1, "loss endpoints")?;
    ensure_same_shape(v_pred, x0, "predicted velocity")?;
    if x0.nrows() == 0 {
        return Err(Error::Dimension("loss over an empty batch".into()));
    }
    ensure_finite(v_pred, "predicted velocity")?;
    let mut total = 0.0;
    for i in 0..x0.nrows() {
        let mut row = 0.0;
        for j in 0..x0.ncols() {
            let r = (x1[[i, j]] - x0[[i, j]]) - v_pred[[i, j]];
            row += r * r;
        }
        total += row;
    }
    Ok(total / x0.nrows() as f64)
}

/// `dL/dv` for [`flow_loss`].
fn flow_loss_grad(
    v_pred: ArrayView2<'_, f64>,
    x0: ArrayView2<'_, f64>,
    x1: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let scale = 2.0 / x0.nrows() as f64;
    let mut g = v_pred.to_owned();
    g -= &x1;
    g += &x0;
    g * scale
}

/// Coupled endpoints for one training batch.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    pub cond: Option<CondBatch>,
}

/// Anything that can hand out coupled `(x0, x1[, c])` batches.
pub trait PairSource {
    fn dim(&self) -> usize;

    fn draw(&self, n: usize, rng: &mut Rng) -> Result<PairBatch>;

    fn is_conditional(&self) -> bool {
        false
    }

    /// Round of a model trained on these pairs: 1 for the independent
    /// coupling, `k + 1` for pairs generated by a round-`k` model.
    fn rectification_round(&self) -> u32 {
        1
    }

    fn describe(&self) -> String;
}

/// Independent draws: noise first, then data.
pub fn draw_pair(
    data: &dyn DataSource,
    n: usize,
    rng: &mut Rng,
) -> Result<(SampleBatch, SampleBatch)> {
    if n == 0 {
        return Err(Error::Config("pair batch size must be >= 1".into()));
    }
    let x0 = gaussian_noise(n, data.dim(), rng);
    let x1 = data.sample(n, rng)?;
    if x1.nrows() != n {
        return Err(Error::Config(format!(
            "data source {} returned {} rows, wanted {n}",
            data.name(),
            x1.nrows()
        )));
    }
    Ok((
        SampleBatch::new(x0, SourceTag::Noise)?,
        SampleBatch::new(x1, SourceTag::Data)?,
    ))
}

/// The round-0 coupling: noise and data drawn independently.
pub struct IndependentCoupling<'a> {
    pub data: &'a dyn DataSource,
}

impl PairSource for IndependentCoupling<'_> {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn draw(&self, n: usize, rng: &mut Rng) -> Result<PairBatch> {
        let (x0, x1) = draw_pair(self.data, n, rng)?;
        Ok(PairBatch {
            x0: x0.into_data(),
            x1: x1.into_data(),
            cond: None,
        })
    }

    fn describe(&self) -> String {
        self.data.name()
    }
}

/// Deterministic coupling `x1 = x0 + shift`. The optimal drift is the
/// constant `shift`, which makes it a closed-form check of training.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetCoupling {
    pub shift: Vec<f64>,
}

impl PairSource for OffsetCoupling {
    fn dim(&self) -> usize {
        self.shift.len()
    }

    fn draw(&self, n: usize, rng: &mut Rng) -> Result<PairBatch> {
        if n == 0 || self.shift.is_empty() {
            return Err(Error::Config("offset coupling needs n >= 1 and a shift".into()));
        }
        let x0 = gaussian_noise(n, self.shift.len(), rng);
        let x1 = &x0 + &ndarray::ArrayView1::from(&self.shift);
        Ok(PairBatch { x0, x1, cond: None })
    }

    fn describe(&self) -> String {
        let parts: Vec<String> = self.shift.iter().map(|v| v.to_string()).collect();
        format!("offset:{}", parts.join(","))
    }
}

/// `n` i.i.d. draws from Uniform[0, 1].
pub fn sample_times(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..=1.0)).collect()
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub time_scale: f64,
    /// `Some` trains a conditional model with this encoder.
    pub fusion: Option<FusionConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            steps: 2000,
            adam: AdamConfig::default(),
            seed: 0,
            hidden: vec![256, 256],
            time_embed_dim: 16,
            time_scale: DEFAULT_TIME_SCALE,
            fusion: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.adam.validate()?;
        if self.adam.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if let Some(f) = &self.fusion {
            f.validate()?;
        }
        Ok(())
    }

    pub fn field_config(&self, dim: usize) -> VectorFieldConfig {
        VectorFieldConfig {
            dim,
            hidden: self.hidden.clone(),
            time_embed_dim: self.time_embed_dim,
            time_scale: self.time_scale,
            cond_dim: self.fusion.as_ref().map_or(0, |f| f.cond_dim),
        }
    }

    /// Fresh model and optimizer for `dim`, drawn from `rng`.
    pub fn init(&self, dim: usize, rng: &mut Rng) -> Result<(FlowModel, Adam)> {
        let mut model = FlowModel::new(self.field_config(dim), self.fusion.clone(), rng)?;
        model.meta.seed = self.seed;
        Ok((model, Adam::new(self.adam)))
    }
}

/// One optimizer step on a fixed batch and fixed times. Returns the loss
/// measured before the update.
pub fn train_step(
    model: &mut FlowModel,
    optimizer: &mut Adam,
    batch: &PairBatch,
    t: &[f64],
    step: u64,
) -> Result<f64> {
    model.zero_grad();
    let xt = interpolate(batch.x0.view(), batch.x1.view(), t)?;
    let (v, trace) = match model.forward_train(xt.view(), t, batch.cond.as_ref()) {
        Ok(out) => out,
        Err(Error::Numeric(detail)) => return Err(diverged(model, step, &detail)),
        Err(e) => return Err(e),
    };
    let loss = match flow_loss(v.view(), batch.x0.view(), batch.x1.view()) {
        Ok(l) if l.is_finite() => l,
        Ok(l) => return Err(diverged(model, step, &format!("loss {l}"))),
        Err(Error::Numeric(detail)) => return Err(diverged(model, step, &detail)),
        Err(e) => return Err(e),
    };
    let grad = flow_loss_grad(v.view(), batch.x0.view(), batch.x1.view());
    model.backward(grad.view(), trace)?;
    optimizer
        .update(model)
        .map_err(|e| diverged(model, step, &e.to_string()))?;
    Ok(loss)
}

fn diverged(model: &FlowModel, step: u64, detail: &str) -> Error {
    let norms: Vec<String> = model
        .param_norms()
        .into_iter()
        .map(|(name, n)| format!("{name}={n:.3e}"))
        .collect();
    Error::Diverged {
        step,
        detail: format!("{detail}; parameter norms: {}", norms.join(" ")),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FlowModel,
    pub optimizer: Adam,
    /// Pre-update loss at every step.
    pub losses: Vec<f64>,
}

/// Trains a fresh model on `source`.
///
/// The model is initialised from `seeded_rng(config.seed)` and the same
/// generator then supplies every batch and every `t`, so a run is a pure
/// function of its config and source. With `steps = 0` the initial model
/// is returned untouched.
pub fn train(config: &TrainConfig, source: &dyn PairSource) -> Result<TrainOutcome> {
    config.validate()?;
    if source.is_conditional() != config.fusion.is_some() {
        return Err(Error::Config(format!(
            "source {} is {}conditional but the config {} a fusion encoder",
            source.describe(),
            if source.is_conditional() { "" } else { "un" },
            if config.fusion.is_some() { "has" } else { "lacks" }
        )));
    }
    let mut rng = seeded_rng(config.seed);
    let (mut model, mut optimizer) = config.init(source.dim(), &mut rng)?;
    let mut losses = Vec::with_capacity(config.steps as usize);
    for step in 0..config.steps {
        let batch = source.draw(config.batch_size, &mut rng)?;
        let t = sample_times(config.batch_size, &mut rng);
        losses.push(train_step(&mut model, &mut optimizer, &batch, &t, step)?);
    }
    model.field.clear_cache();
    model.meta.train_steps = config.steps;
    model.meta.rectification_round = source.rectification_round();
    model
        .meta
        .extra
        .insert("data".into(), source.describe());
    Ok(TrainOutcome {
        model,
        optimizer,
        losses,
    })
}

/// Writes a loss history as `step,loss`.
pub fn write_loss_csv(losses: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "step,loss").map_err(io)?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Noise points paired with where a flow sends them.
#[derive(Debug, Clone)]
pub struct CoupledDataset {
    pub z0: SampleBatch,
    pub z1: SampleBatch,
    /// One more than the round of the model that produced `z1`.
    pub rectification_round: u32,
    pub conditions: Option<Vec<ConditionBundle>>,
    pub label: String,
}

impl CoupledDataset {
    pub fn len(&self) -> usize {
        self.z0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z0.is_empty()
    }

    /// Stacks `[z0 | z1]` for export.
    pub fn to_matrix(&self) -> Array2<f64> {
        ndarray::concatenate(Axis(1), &[self.z0.view(), self.z1.view()]).expect("equal row counts")
    }

    pub fn column_names(&self) -> Vec<String> {
        let d = self.z0.dim();
        (0..d)
            .map(|j| format!("z0_{j}"))
            .chain((0..d).map(|j| format!("z1_{j}")))
            .collect()
    }
}

impl PairSource for CoupledDataset {
    fn dim(&self) -> usize {
        self.z0.dim()
    }

    /// Resamples stored pairs uniformly with replacement.
    fn draw(&self, n: usize, rng: &mut Rng) -> Result<PairBatch> {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        let cond = self.conditions.as_ref().map(|c| CondBatch {
            bundles: idx.iter().map(|&i| c[i].clone()).collect(),
            rows: (0..n).collect(),
        });
        Ok(PairBatch {
            x0: self.z0.view().select(Axis(0), &idx),
            x1: self.z1.view().select(Axis(0), &idx),
            cond,
        })
    }

    fn is_conditional(&self) -> bool {
        self.conditions.is_some()
    }

    fn rectification_round(&self) -> u32 {
        self.rectification_round
    }

    fn describe(&self) -> String {
        self.label.clone()
    }
}

/// Pushes `n` fresh noise points (with conditions, if any) through `model`
/// and keeps the `(z0, z1)` pairs.
pub fn build_reflow_dataset(
    model: &FlowModel,
    n: usize,
    solver: &SolverConfig,
    conditions: Option<&dyn ConditionSource>,
    rng: &mut Rng,
    threads: usize,
) -> Result<CoupledDataset> {
    let out = sample(model, n, solver, rng, conditions, threads)?;
    let label = match model.meta.extra.get("data") {
        Some(d) => format!("reflow[{d}]"),
        None => "reflow".into(),
    };
    Ok(CoupledDataset {
        z0: out.z0,
        z1: out.samples,
        rectification_round: model.meta.rectification_round + 1,
        conditions: out.conditions,
        label,
    })
}

/// How to build the coupled dataset for one reflow round.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflowConfig {
    pub pairs: usize,
    pub solver: SolverConfig,
    pub seed: u64,
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct RectifyOutcome {
    pub model: FlowModel,
    pub optimizer: Adam,
    pub losses: Vec<f64>,
    pub dataset: CoupledDataset,
}

/// One reflow round: couple with `model`, then train a fresh model on the
/// coupling. The result is `model`'s round plus one.
pub fn rectify(
    model: &FlowModel,
    train_config: &TrainConfig,
    reflow: &ReflowConfig,
    conditions: Option<&dyn ConditionSource>,
) -> Result<RectifyOutcome> {
    let mut rng = seeded_rng(reflow.seed);
    let dataset = build_reflow_dataset(
        model,
        reflow.pairs,
        &reflow.solver,
        conditions,
        &mut rng,
        reflow.threads,
    )?;
    let outcome = train(train_config, &dataset)?;
    let mut new = outcome.model;
    for (k, v) in &model.meta.extra {
        new.meta.extra.entry(k.clone()).or_insert_with(|| v.clone());
    }
    Ok(RectifyOutcome {
        model: new,
        optimizer: outcome.optimizer,
        losses: outcome.losses,
        dataset,
    })
}
