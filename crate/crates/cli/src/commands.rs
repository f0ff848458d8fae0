use std::io::Write as _;
use std::path::{Path, PathBuf};

use rectiflow::data::write_matrix_csv;
use rectiflow::flow::{rectify, train as train_model, write_loss_csv, ReflowConfig};
use rectiflow::fusion::read_bundle;
use rectiflow::metrics::{
    append_metric_csv, bench as bench_solvers, config_hash, energy_distance,
    model_conversion_accuracy, model_straightness, one_step_gap, write_bench_csv, MetricReport,
};
use rectiflow::persistence::{load_checkpoint, save_checkpoint};
use rectiflow::solvers::{
    gaussian_noise, sample as sample_model, write_trajectories, ConditionSource, FixedCondition,
    SolverConfig,
};
use rectiflow::{seeded_rng, Error, FlowModel};
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::manifest::RunManifest;
use crate::recipe::{parse_solver_spec, solver_from_parts, Recipe};
use crate::{BenchArgs, CliError, CliResult, EvalArgs, ReflowArgs, SampleArgs, SolverArgs, TrainArgs};

pub const METRICS: [&str; 4] = ["straightness", "energy", "onestep-gap", "conversion"];

/// Rows and Euler steps of the straightness report written by `reflow`.
const STRAIGHTNESS_ROWS: usize = 1000;
const STRAIGHTNESS_STEPS: usize = 100;

fn solver(args: &SolverArgs) -> CliResult<Option<SolverConfig>> {
    solver_from_parts(args.solver.as_deref(), args.steps, args.atol, args.rtol).map_err(CliError::Usage)
}

fn describe_solver(s: &SolverConfig) -> String {
    match s.kind {
        rectiflow::solvers::SolverKind::Euler { steps } => format!("euler steps={steps}"),
        rectiflow::solvers::SolverKind::Rk45 { atol, rtol, .. } => format!("rk45 atol={atol} rtol={rtol}"),
    }
}

fn with_ext(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

/// Data the model was trained on, or `spec` when given.
fn model_dataset(model: &FlowModel, recipe: Option<&Recipe>, spec: Option<&str>) -> CliResult<Dataset> {
    let label = match spec {
        Some(s) => s.to_string(),
        None => model
            .meta
            .extra
            .get("data")
            .map(|d| Dataset::base_spec(d).to_string())
            .ok_or_else(|| Error::Config("checkpoint does not record its data; pass --data".into()))?,
    };
    let toy = recipe.map(|r| r.toy.clone()).unwrap_or_default();
    Ok(Dataset::resolve(&label, &toy)?)
}

/// Condition source for a model: a fixed bundle from `--cond`, else the
/// toy generator it was trained on.
fn conditions(
    model: &FlowModel,
    cond: Option<&Path>,
    dataset: Option<&Dataset>,
) -> CliResult<Option<Box<dyn ConditionSource>>> {
    if !model.is_conditional() {
        if cond.is_some() {
            return Err(CliError::Usage("--cond given for an unconditional model".into()));
        }
        return Ok(None);
    }
    if let Some(path) = cond {
        let bundle = read_bundle(path)?;
        bundle.validate(model.fusion.as_ref().map_or(0, |f| f.config().d_model))?;
        return Ok(Some(Box::new(FixedCondition(bundle))));
    }
    match dataset.and_then(Dataset::toy) {
        Some(toy) => Ok(Some(Box::new(toy.clone()))),
        None => Err(CliError::Usage(
            "conditional model needs --cond or a toy_mel training source".into(),
        )),
    }
}

pub fn train(args: &TrainArgs) -> CliResult<String> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::Io {
        path: args.config.clone(),
        source: e,
    })?;
    let mut recipe = Recipe::parse(&text)?;
    if let Some(seed) = args.seed {
        recipe.set_seed(seed);
    }
    if let Some(data) = &args.data {
        recipe.set_data(data);
    }
    let spec = recipe
        .data
        .clone()
        .ok_or_else(|| CliError::Usage("no data: pass --data or set `data` in the recipe".into()))?;
    let dataset = Dataset::resolve(&spec, &recipe.toy)?;
    let mut run = RunManifest::start("train", recipe.train.seed);
    for (k, v) in recipe.entries() {
        run.set(k, v);
    }

    let outcome = train_model(&recipe.train, dataset.pair_source().as_ref())?;
    let mut model = outcome.model;
    recipe.store(&mut model);
    save_checkpoint(&model, Some(&outcome.optimizer), &args.out)?;
    let loss_path = with_ext(&args.out, "loss.csv");
    write_loss_csv(&outcome.losses, &loss_path)?;
    run.output(&args.out);
    run.output(&loss_path);
    run.finish(&with_ext(&args.out, "manifest"))?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "trained round {} on {spec} for {} steps, final loss {last:.6}: {}",
        model.meta.rectification_round,
        model.meta.train_steps,
        args.out.display()
    ))
}

pub fn reflow(args: &ReflowArgs, threads: usize) -> CliResult<String> {
    let parent = load_checkpoint(&args.ckpt)?.model;
    let recipe = Recipe::from_model(&parent)?;
    let dataset = model_dataset(&parent, Some(&recipe), None).ok();
    let conds = conditions(&parent, args.cond.as_deref(), dataset.as_ref())?;
    let solver = solver(&args.solver)?.unwrap_or(recipe.reflow_solver);
    let seed = args.seed.unwrap_or(recipe.train.seed);
    let pairs = args.n.unwrap_or(recipe.reflow_pairs);
    let mut run = RunManifest::start("reflow", seed);
    run.set("parent", args.ckpt.display());
    run.set("parent_round", parent.meta.rectification_round);
    run.set("pairs", pairs);
    run.set("solver", describe_solver(&solver));
    run.set("threads", threads);

    let config = ReflowConfig {
        pairs,
        solver,
        seed,
        threads,
    };
    let outcome = rectify(&parent, &recipe.train, &config, conds.as_deref())?;
    save_checkpoint(&outcome.model, Some(&outcome.optimizer), &args.out)?;
    run.output(&args.out);
    let loss_path = with_ext(&args.out, "loss.csv");
    write_loss_csv(&outcome.losses, &loss_path)?;
    run.output(&loss_path);
    if let Some(path) = &args.pairs_out {
        write_matrix_csv(path, &outcome.dataset.column_names(), outcome.dataset.to_matrix().view())?;
        run.output(path);
    }

    // Both models see the same noise and conditions.
    let before = model_straightness(&parent, STRAIGHTNESS_ROWS, STRAIGHTNESS_STEPS, &mut seeded_rng(seed), conds.as_deref())?;
    let after = model_straightness(&outcome.model, STRAIGHTNESS_ROWS, STRAIGHTNESS_STEPS, &mut seeded_rng(seed), conds.as_deref())?;
    let report = with_ext(&args.out, "straightness.csv");
    let io = |e| Error::Io {
        path: report.clone(),
        source: e,
    };
    let mut w = std::fs::File::create(&report).map_err(io)?;
    writeln!(w, "round,straightness,n,m").map_err(io)?;
    writeln!(w, "{},{before},{STRAIGHTNESS_ROWS},{STRAIGHTNESS_STEPS}", parent.meta.rectification_round).map_err(io)?;
    writeln!(w, "{},{after},{STRAIGHTNESS_ROWS},{STRAIGHTNESS_STEPS}", outcome.model.meta.rectification_round).map_err(io)?;
    run.output(&report);
    run.finish(&with_ext(&args.out, "manifest"))?;
    Ok(format!(
        "round {} -> {}: straightness {before:.6} -> {after:.6}: {}",
        parent.meta.rectification_round,
        outcome.model.meta.rectification_round,
        args.out.display()
    ))
}

pub fn sample(args: &SampleArgs, threads: usize) -> CliResult<String> {
    let model = load_checkpoint(&args.ckpt)?.model;
    let recipe = Recipe::from_model(&model).ok();
    let dataset = model_dataset(&model, recipe.as_ref(), None).ok();
    let conds = conditions(&model, args.cond.as_deref(), dataset.as_ref())?;
    let mut solver = solver(&args.solver)?.unwrap_or_else(SolverConfig::rk45_default);
    if args.dump_traj.is_some() {
        solver = solver.recording();
    }
    let mut run = RunManifest::start("sample", args.seed);
    run.set("ckpt", args.ckpt.display());
    run.set("n", args.n);
    run.set("solver", describe_solver(&solver));
    if let Some(c) = &args.cond {
        run.set("cond", c.display());
    }

    let out = sample_model(&model, args.n, &solver, &mut seeded_rng(args.seed), conds.as_deref(), threads)?;
    let names: Vec<String> = (0..out.samples.dim()).map(|d| format!("dim{d}")).collect();
    write_matrix_csv(&args.out, &names, out.samples.view())?;
    run.output(&args.out);
    if let Some(path) = &args.dump_traj {
        write_trajectories(&out, path)?;
        run.output(path);
    }
    run.set("mean_nfe", out.mean_nfe);
    run.finish(&with_ext(&args.out, "manifest"))?;
    Ok(format!(
        "{} samples with {}, mean NFE {:.1}: {}",
        args.n,
        solver.label(),
        out.mean_nfe,
        args.out.display()
    ))
}

pub fn eval(args: &EvalArgs, threads: usize) -> CliResult<String> {
    if !METRICS.contains(&args.metric.as_str()) {
        return Err(CliError::Usage(format!(
            "unknown metric {:?}; valid metrics: {}",
            args.metric,
            METRICS.join(", ")
        )));
    }
    let bytes = std::fs::read(&args.ckpt).map_err(|e| Error::Io {
        path: args.ckpt.clone(),
        source: e,
    })?;
    let model = rectiflow::persistence::from_bytes(&bytes)?.model;
    let recipe = Recipe::from_model(&model).ok();
    let dataset = model_dataset(&model, recipe.as_ref(), args.data.as_deref());
    let conds = conditions(&model, args.cond.as_deref(), dataset.as_ref().ok())?;
    let solver = solver(&args.solver)?.unwrap_or_else(SolverConfig::rk45_default);
    let mut rng = seeded_rng(args.seed);

    let value = match args.metric.as_str() {
        "straightness" => model_straightness(&model, args.n, STRAIGHTNESS_STEPS, &mut rng, conds.as_deref())?,
        "energy" => {
            let dataset = dataset?;
            let out = sample_model(&model, args.n, &solver, &mut rng, conds.as_deref(), threads)?;
            let reference = dataset.sample(args.n, &mut rng)?;
            energy_distance(out.samples.view(), reference.view(), threads)?
        }
        "onestep-gap" => {
            let dataset = dataset?;
            let z0 = gaussian_noise(args.n, model.dim(), &mut rng);
            let bundles = match &conds {
                Some(c) => Some(c.draw_conditions(args.n, &mut rng)?),
                None => None,
            };
            let reference = dataset.sample(args.n, &mut rng)?;
            one_step_gap(&model, z0.view(), bundles.as_deref(), reference.view(), &solver, threads)?.gap
        }
        _ => {
            let dataset = dataset?;
            let toy = dataset
                .toy()
                .ok_or_else(|| Error::Config("conversion needs a model trained on toy_mel".into()))?;
            model_conversion_accuracy(&model, toy, args.n, &solver, &mut rng, threads)?.accuracy
        }
    };

    let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let settings = format!(
        "ckpt={digest}\nmetric={}\nn={}\nseed={}\nsolver={}\ndata={}\ncond={}\n",
        args.metric,
        args.n,
        args.seed,
        describe_solver(&solver),
        args.data.as_deref().unwrap_or("-"),
        args.cond.as_ref().map_or("-".into(), |c| c.display().to_string()),
    );
    let report = MetricReport {
        metric: args.metric.clone(),
        value,
        n: args.n,
        seed: args.seed,
        config_hash: config_hash(&settings),
    };
    append_metric_csv(std::slice::from_ref(&report), &args.out)?;
    let mut run = RunManifest::start("eval", args.seed);
    run.set("ckpt", args.ckpt.display());
    run.set("metric", &args.metric);
    run.set("n", args.n);
    run.set("solver", describe_solver(&solver));
    run.set("config_hash", &report.config_hash);
    run.output(&args.out);
    run.finish(&with_ext(&args.out, "manifest"))?;
    Ok(format!("{} = {value}: {}", args.metric, args.out.display()))
}

pub fn bench(args: &BenchArgs) -> CliResult<String> {
    let model = load_checkpoint(&args.ckpt)?.model;
    let recipe = Recipe::from_model(&model).ok();
    let dataset = model_dataset(&model, recipe.as_ref(), None).ok();
    let conds = conditions(&model, args.cond.as_deref(), dataset.as_ref())?;
    let solvers = args
        .solvers
        .split(',')
        .map(|spec| parse_solver_spec(spec).map(|s| (s.label(), s)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::Usage)?;
    let mut rng = seeded_rng(args.seed);
    let z0 = gaussian_noise(args.n, model.dim(), &mut rng);
    let bundles = match &conds {
        Some(c) => Some(c.draw_conditions(args.n, &mut rng)?),
        None => None,
    };
    let rows = bench_solvers(&model, &solvers, z0.view(), bundles.as_deref(), args.repeats)?;
    write_bench_csv(&rows, &args.out)?;
    let mut run = RunManifest::start("bench", args.seed);
    run.set("ckpt", args.ckpt.display());
    run.set("solvers", &args.solvers);
    run.set("n", args.n);
    run.set("repeats", args.repeats);
    run.set("warmup", "one untimed run per solver");
    run.output(&args.out);
    run.finish(&with_ext(&args.out, "manifest"))?;
    Ok(format!("{} solvers timed: {}", rows.len(), args.out.display()))
}
