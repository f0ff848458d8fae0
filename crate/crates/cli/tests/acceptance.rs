//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (no libtest harness) so the lines always reach
//! the terminal. The experiment criteria drive the real `rectiflow`
//! executable with the checked-in recipes under `configs/`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::{array, Array2, ArrayView2, Axis};
use rectiflow::data::{make_distribution, DataSource, ToyMel, ToyMelConfig, ToyUtterance};
use rectiflow::flow::{OffsetCoupling, PairSource};
use rectiflow::fusion::{
    scaled_dot_attention, ConditionBundle, FusionConfig, GatedFusion, SelfAttentionRefine,
};
use rectiflow::gradcheck::{check_gradients, FlowProblem};
use rectiflow::metrics::{conversion_accuracy, energy_distance};
use rectiflow::model::{CondBatch, FlowModel};
use rectiflow::nn::{Param, Parameterized};
use rectiflow::persistence::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
use rectiflow::solvers::{
    euler_integrate, gaussian_noise, integrate_model, rk45_integrate, sample, SolverConfig,
};
use rectiflow::vectorfield::VectorFieldConfig;
use rectiflow::{seeded_rng, Rng};

type Check = Result<(bool, String), String>;
/// Id, name and check of one criterion.
type Criterion = (&'static str, &'static str, fn(&Ctx) -> Check);

struct Ctx {
    dir: tempfile::TempDir,
    threads: usize,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Runs the CLI and returns stdout, or the stderr line on failure.
fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_rectiflow"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
    } else {
        Err(format!("rectiflow {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn load(path: &Path) -> Result<FlowModel, String> {
    load_checkpoint(path).map(|c| c.model).map_err(|e| e.to_string())
}

/// Trains a recipe once and reuses the checkpoint afterwards.
fn trained(ctx: &Ctx, recipe: &str, out: &str) -> Result<PathBuf, String> {
    let path = ctx.path(out);
    if !path.exists() {
        cli(&["train", "--config", s(&config(recipe)), "--out", s(&path)])?;
    }
    Ok(path)
}

fn bundle(d: usize, len: usize, rng: &mut Rng) -> ConditionBundle {
    let u = |rng: &mut Rng, n: usize| gaussian_noise(1, n, rng).into_raw_vec_and_offset().0;
    ConditionBundle::new(
        u(rng, d).into(),
        gaussian_noise(len, d, rng),
        u(rng, len).into_iter().map(|p| p.clamp(-2.5, 2.5)).collect(),
    )
}

fn jitter(mut model: FlowModel, seed: u64) -> FlowModel {
    let mut rng = seeded_rng(seed);
    model.visit_params_mut(&mut |_, p: &mut Param| {
        let noise = gaussian_noise(p.value.nrows(), p.value.ncols(), &mut rng);
        p.value += &(noise * 0.2);
    });
    model
}

fn c1_gradients(_: &Ctx) -> Check {
    const EPS: f64 = 1e-5;
    const MAX_REL: f64 = 1e-5;
    const FLOOR: f64 = 1e-4;
    let mut worst = (0.0f64, String::new());
    let mut entries = 0;
    for depth in 1..=3 {
        for conditional in [false, true] {
            let mut rng = seeded_rng(depth as u64 * 10 + conditional as u64);
            let dim = 3;
            let mut cfg = VectorFieldConfig::new(dim);
            cfg.hidden = vec![6; depth];
            cfg.time_embed_dim = 4;
            let (fusion, cond) = if conditional {
                let f = FusionConfig {
                    n_self_attn_iters: 2,
                    codebook_size: 16,
                    ..FusionConfig::small(4, 2, 3)
                };
                let cond = CondBatch {
                    bundles: vec![bundle(4, 3, &mut rng), bundle(4, 5, &mut rng)],
                    rows: vec![1, 0, 1, 1],
                };
                (Some(f), Some(cond))
            } else {
                (None, None)
            };
            let model = FlowModel::new(cfg, fusion, &mut rng).map_err(|e| e.to_string())?;
            let model = jitter(model, depth as u64);
            let problem = FlowProblem {
                x0: gaussian_noise(4, dim, &mut rng),
                x1: gaussian_noise(4, dim, &mut rng) + 1.5,
                t: vec![0.1, 0.4, 0.7, 0.95],
                cond,
            };
            let report = check_gradients(&model, &problem, EPS, FLOOR).map_err(|e| e.to_string())?;
            entries += report.entries;
            if report.max_rel_error >= worst.0 {
                worst = (report.max_rel_error, report.worst);
            }
        }
    }
    Ok((
        worst.0 < MAX_REL,
        format!("max relative error {:.2e} over {entries} entries, 6 architectures (worst: {})", worst.0, worst.1),
    ))
}

fn c2_solvers(_: &Ctx) -> Check {
    // (a) Euler on constant fields.
    let mut rng = seeded_rng(2);
    let mut euler_err = 0.0f64;
    for steps in [1, 2, 7, 30, 100] {
        let u = gaussian_noise(1, 3, &mut rng);
        let z0 = gaussian_noise(16, 3, &mut rng);
        let field = |z: ArrayView2<'_, f64>, _t: f64| {
            let mut out = Array2::zeros(z.raw_dim());
            out.rows_mut().into_iter().for_each(|mut r| r.assign(&u.row(0)));
            out
        };
        let end = euler_integrate(&field, z0.view(), steps, false).map_err(|e| e.to_string())?;
        let exact = &z0 + &u;
        euler_err = euler_err.max((end.endpoint() - &exact).mapv(f64::abs).fold(0.0, |a, &b| a.max(b)));
    }
    // (b) and (c) on dz/dt = z.
    let growth = |z: ArrayView2<'_, f64>, _t: f64| z.to_owned();
    let z0 = array![[1.0]];
    let err_at = |tol: f64| -> Result<f64, String> {
        let tr = rk45_integrate(&growth, z0.view(), tol, tol, 100_000, false).map_err(|e| e.to_string())?;
        Ok((tr.endpoint()[[0, 0]] - std::f64::consts::E).abs())
    };
    let exp_err = err_at(1e-8)?;
    let decades: Vec<f64> = (4..=10).map(|k| err_at(10f64.powi(-k))).collect::<Result<_, _>>()?;
    let monotone = decades.windows(2).all(|w| w[1] <= w[0]);

    // Informational: literal halving from 1e-4 down to 1e-10.
    let mut tol = 1e-4;
    let mut prev = err_at(tol)?;
    let mut rises = Vec::new();
    while tol / 2.0 >= 1e-10 {
        let next = err_at(tol / 2.0)?;
        if next > prev {
            rises.push(format!("{tol:.3e}->{:.3e}: {prev:.2e}->{next:.2e}", tol / 2.0));
        }
        prev = next;
        tol /= 2.0;
    }
    println!(
        "note  [2] literal tolerance halving 1e-4 .. 1e-10: {} error increase(s){}{}",
        rises.len(),
        if rises.is_empty() { "" } else { " at " },
        rises.join("; ")
    );

    let errs: Vec<String> = decades.iter().map(|e| format!("{e:.1e}")).collect();
    Ok((
        euler_err <= 1e-12 && exp_err <= 1e-6 && monotone,
        format!(
            "(a) euler constant-field error {euler_err:.1e} <= 1e-12; (b) |z(1)-e| = {exp_err:.2e} <= 1e-6; (c) errors over atol=rtol 1e-4..1e-10: [{}] non-increasing: {monotone}",
            errs.join(", ")
        ),
    ))
}

fn c3_offset(ctx: &Ctx) -> Check {
    let start = Instant::now();
    let path = trained(ctx, "offset.cfg", "offset.ckpt")?;
    let model = load(&path)?;
    let shift = vec![3.0, -2.0];
    let coupling = OffsetCoupling { shift: shift.clone() };
    let mut rng = seeded_rng(33);
    let batch = coupling.draw(4096, &mut rng).map_err(|e| e.to_string())?;
    let t: Vec<f64> = (0..4096).map(|i| i as f64 / 4095.0).collect();
    let loss = FlowProblem {
        x0: batch.x0,
        x1: batch.x1,
        t,
        cond: None,
    }
    .loss(&model)
    .map_err(|e| e.to_string())?;
    // The grid follows x_t ~ N(t * shift, I): offsets of -2..2 standard
    // deviations around its mean at five times.
    let mut grid_err = 0.0f64;
    for ti in 0..=4 {
        let t = ti as f64 / 4.0;
        let (cx, cy) = (t * shift[0], t * shift[1]);
        let xs: Vec<f64> = (-2..=2)
            .flat_map(|a| (-2..=2).flat_map(move |b| [cx + a as f64, cy + b as f64]))
            .collect();
        let x = Array2::from_shape_vec((25, 2), xs).unwrap();
        let v = model.velocity(x.view(), &[t; 25], None).map_err(|e| e.to_string())?;
        for row in v.rows() {
            let e = ((row[0] - shift[0]).powi(2) + (row[1] - shift[1]).powi(2)).sqrt();
            grid_err = grid_err.max(e);
        }
    }
    let steps = model.meta.train_steps;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        loss < 1e-4 && grid_err < 0.05 && steps <= 5000 && secs < 60.0,
        format!("held-out loss {loss:.2e} < 1e-4, max |v-(3,-2)| on a 125-point grid over ±2σ of x_t {grid_err:.4} < 0.05, {steps} steps, {secs:.1}s < 60s"),
    ))
}

fn c4_two_gaussians(ctx: &Ctx) -> Check {
    const REPLICATES: usize = 16;
    const N: usize = 2000;
    let start = Instant::now();
    let path = trained(ctx, "two_gaussians.cfg", "gauss1.ckpt")?;
    let model = load(&path)?;
    let data = make_distribution("two_gaussians").map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(2024);
    let (mut base, mut dist, mut nfe) = (0.0, 0.0, 0.0);
    for _ in 0..REPLICATES {
        let a = data.sample(N, &mut rng).map_err(|e| e.to_string())?;
        let b = data.sample(N, &mut rng).map_err(|e| e.to_string())?;
        let held = data.sample(N, &mut rng).map_err(|e| e.to_string())?;
        let out = sample(&model, N, &SolverConfig::rk45_default(), &mut rng, None, ctx.threads)
            .map_err(|e| e.to_string())?;
        base += energy_distance(a.view(), b.view(), ctx.threads).map_err(|e| e.to_string())?;
        dist += energy_distance(out.samples.view(), held.view(), ctx.threads).map_err(|e| e.to_string())?;
        nfe += out.mean_nfe;
    }
    let (base, dist) = (base / REPLICATES as f64, dist / REPLICATES as f64);
    let secs = start.elapsed().as_secs_f64();
    Ok((
        dist <= 2.0 * base && secs < 300.0,
        format!(
            "RK45 samples vs held-out E = {dist:.5}, data-vs-data baseline {base:.5}, ratio {:.2} <= 2 (mean of {REPLICATES} replicates, n={N}, mean NFE {:.1}); {secs:.1}s < 300s",
            dist / base,
            nfe / REPLICATES as f64
        ),
    ))
}

fn c5_reflow(ctx: &Ctx) -> Check {
    const N: usize = 2000;
    let start = Instant::now();
    let round1 = trained(ctx, "two_gaussians.cfg", "gauss1.ckpt")?;
    let round2 = ctx.path("gauss2.ckpt");
    cli(&["reflow", "--ckpt", s(&round1), "--out", s(&round2)])?;
    let report = std::fs::read_to_string(round2.with_extension("straightness.csv")).map_err(|e| e.to_string())?;
    let straight: Vec<f64> = report
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let (m1, m2) = (load(&round1)?, load(&round2)?);
    let data = make_distribution("two_gaussians").map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(55);
    let z0 = gaussian_noise(N, 2, &mut rng);
    let reference = data.sample(N, &mut rng).map_err(|e| e.to_string())?;
    let one_step = |m: &FlowModel| -> Result<f64, String> {
        let out = integrate_model(m, z0.view(), None, &SolverConfig::euler(1), ctx.threads).map_err(|e| e.to_string())?;
        energy_distance(out.samples.view(), reference.view(), ctx.threads).map_err(|e| e.to_string())
    };
    let (e1, e2) = (one_step(&m1)?, one_step(&m2)?);
    let (ds, de) = (1.0 - straight[1] / straight[0], 1.0 - e2 / e1);
    let secs = start.elapsed().as_secs_f64();
    Ok((
        m2.meta.rectification_round == 2 && ds >= 0.2 && de >= 0.2 && secs < 600.0,
        format!(
            "round {} -> {}: straightness {:.4} -> {:.4} (-{:.0}%), 1-step Euler E {e1:.4} -> {e2:.4} (-{:.0}%); {secs:.1}s < 600s",
            m1.meta.rectification_round,
            m2.meta.rectification_round,
            straight[0],
            straight[1],
            100.0 * ds,
            100.0 * de
        ),
    ))
}

fn c6_conversion(ctx: &Ctx) -> Check {
    let start = Instant::now();
    let path = trained(ctx, "toy_mel.cfg", "toy.ckpt")?;
    let metrics = ctx.path("conversion.csv");
    cli(&["eval", "--ckpt", s(&path), "--metric", "conversion", "--n", "200", "--seed", "2024", "--out", s(&metrics)])?;
    let text = std::fs::read_to_string(&metrics).map_err(|e| e.to_string())?;
    let accuracy: f64 = text.lines().nth(1).and_then(|l| l.split(',').nth(1)).and_then(|v| v.parse().ok()).ok_or("no metric row")?;

    // The generator itself, asked for the target speaker, is always right.
    let toy = ToyMel::new(ToyMelConfig::default()).map_err(|e| e.to_string())?;
    let oracle = conversion_accuracy(&toy, 200, &mut seeded_rng(2024), &mut |trials, rng| {
        let mut out = Array2::zeros((trials.len(), toy.config().bands));
        for (i, t) in trials.iter().enumerate() {
            let utt = ToyUtterance {
                speaker: t.target_speaker,
                content: t.content.clone(),
                pitch: t.pitch.clone(),
            };
            out.row_mut(i).assign(&toy.observe(&utt, rng));
        }
        Ok(out)
    })
    .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        accuracy >= 0.9 && oracle.accuracy == 1.0 && secs < 600.0,
        format!(
            "K=4 model accuracy {accuracy:.3} >= 0.90 over 200 trials; generator self-test {:.3} == 1.0; {secs:.1}s < 600s",
            oracle.accuracy
        ),
    ))
}

fn c7_bench(ctx: &Ctx) -> Check {
    let path = trained(ctx, "two_gaussians.cfg", "gauss1.ckpt")?;
    let table = ctx.path("bench.csv");
    cli(&["bench", "--ckpt", s(&path), "--solvers", "euler:1,euler:30,rk45", "--n", "256", "--out", s(&table)])?;
    let text = std::fs::read_to_string(&table).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let find = |m: &str| rows.iter().find(|r| r[0] == m).cloned();
    let (Some(e1), Some(e30), Some(rk)) = (find("euler-1"), find("euler-30"), find("rk45")) else {
        return Ok((false, format!("missing rows in {text:?}")));
    };
    let secs = |r: &[&str]| r[3].parse::<f64>().unwrap_or(f64::NAN);
    let rk_nfe: f64 = rk[2].parse().unwrap_or(f64::NAN);
    Ok((
        header == "method,iter,nfe,seconds_median" && secs(&e1) < secs(&e30) && rk_nfe.is_finite() && rk_nfe > 0.0,
        format!(
            "columns {header}; euler-1 {:.2e}s < euler-30 {:.2e}s; rk45 NFE {rk_nfe:.1} in {:.2e}s",
            secs(&e1),
            secs(&e30),
            secs(&rk)
        ),
    ))
}

fn c8_persistence(ctx: &Ctx) -> Check {
    let path = trained(ctx, "two_gaussians.cfg", "gauss1.ckpt")?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let ckpt = from_bytes(&bytes).map_err(|e| e.to_string())?;
    let again = to_bytes(&ckpt.model, ckpt.adam.as_ref()).map_err(|e| e.to_string())?;
    let (a, b) = (ctx.path("save_a.ckpt"), ctx.path("save_b.ckpt"));
    save_checkpoint(&ckpt.model, ckpt.adam.as_ref(), &a).map_err(|e| e.to_string())?;
    save_checkpoint(&ckpt.model, ckpt.adam.as_ref(), &b).map_err(|e| e.to_string())?;
    let same_saves = std::fs::read(&a).ok() == std::fs::read(&b).ok();
    let reloaded = load(&a)? == ckpt.model;
    Ok((
        again == bytes && same_saves && reloaded,
        format!(
            "{} bytes: reserialised identical {}, two saves identical {same_saves}, reload equal {reloaded}",
            bytes.len(),
            again == bytes
        ),
    ))
}

fn c9_fusion(_: &Ctx) -> Check {
    let mut rng = seeded_rng(9);
    let mut softmax_err = 0.0f64;
    let mut gate_err = 0.0f64;
    let mut equivariant = true;
    for case in 0..50 {
        let heads = [1, 2, 4][case % 3];
        let q = gaussian_noise(3, 8, &mut rng) * 3.0;
        let k = gaussian_noise(6, 8, &mut rng) * 3.0;
        let v = gaussian_noise(6, 8, &mut rng);
        let (_, weights) = scaled_dot_attention(q.view(), k.view(), v.view(), heads).map_err(|e| e.to_string())?;
        for w in &weights {
            for row in w.rows() {
                softmax_err = softmax_err.max((row.sum() - 1.0).abs());
            }
        }

        let a = gaussian_noise(1, 4, &mut rng);
        let b = gaussian_noise(1, 4, &mut rng);
        let mut gate = GatedFusion::new(4, &mut rng);
        gate.gate.weight.value.fill(0.0);
        for (bias, expect) in [(40.0, &a), (-40.0, &b)] {
            gate.gate.bias.as_mut().unwrap().value.fill(bias);
            let (out, _) = gate.forward(a.view(), b.view()).map_err(|e| e.to_string())?;
            gate_err = gate_err.max((&out - expect).mapv(f64::abs).fold(0.0, |m, &x| m.max(x)));
        }

        let refine = SelfAttentionRefine::new(8, &mut rng).map_err(|e| e.to_string())?;
        let x = gaussian_noise(5, 8, &mut rng);
        let perm: Vec<usize> = (0..5).map(|i| (i * 2 + case) % 5).collect();
        let (h, _) = refine.forward(x.view(), 2).map_err(|e| e.to_string())?;
        let (hp, _) = refine.forward(x.select(Axis(0), &perm).view(), 2).map_err(|e| e.to_string())?;
        equivariant &= hp == h.select(Axis(0), &perm);
    }
    Ok((
        softmax_err < 1e-12 && gate_err < 1e-12 && equivariant,
        format!("softmax row-sum error {softmax_err:.1e} < 1e-12; saturated gate error {gate_err:.1e} < 1e-12; self-attention permutation-equivariant exactly: {equivariant} (50 cases)"),
    ))
}

fn main() {
    // libtest flags such as --list or a name filter are accepted and ignored.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let ctx = Ctx {
        dir: tempfile::tempdir().expect("temporary directory"),
        threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let criteria: [Criterion; 9] = [
        ("1", "gradient correctness", c1_gradients),
        ("2", "solver correctness", c2_solvers),
        ("3", "deterministic-coupling optimum", c3_offset),
        ("4", "two-Gaussian sample quality", c4_two_gaussians),
        ("5", "reflow effect", c5_reflow),
        ("6", "conditional conversion", c6_conversion),
        ("7", "benchmark table", c7_bench),
        ("8", "persistence", c8_persistence),
        ("9", "fusion algebra", c9_fusion),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let start = Instant::now();
        let (passed, detail) = check(&ctx).unwrap_or_else(|e| (false, format!("error: {e}")));
        if !passed {
            failed += 1;
        }
        println!(
            "{} [{id}] {name}: {detail} [{:.1}s]",
            if passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
