//! Path straightness, sample quality and conversion scores.

use std::cmp::Ordering;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::batch::ensure_finite;
use crate::data::ToyMel;
use crate::error::{Error, Result};
use crate::fusion::ConditionBundle;
use crate::model::{CondBatch, FlowModel};
use crate::solvers::{
    gaussian_noise, integrate_model, ConditionSource, ConditionedField, SolverConfig,
    SolverKind, Stopwatch, VelocityField,
};
use crate::Rng;

/// Mean squared deviation of Euler velocities from the net displacement.
///
/// With an `m`-step Euler discretisation, `Z1 - Z0 = (1/m) Σ_k v_k`, and
/// per row `S = (1/m) Σ_k ‖(Z1 - Z0) - v_k‖²`; the result is the mean over
/// rows. Deviations are formed relative to `v_0`, which is algebraically
/// the same but makes a constant field score exactly zero.
pub fn straightness(field: &dyn VelocityField, z0: ArrayView2<'_, f64>, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::Config("straightness needs m >= 1 steps".into()));
    }
    if z0.nrows() == 0 {
        return Err(Error::Dimension("straightness over an empty batch".into()));
    }
    let h = 1.0 / m as f64;
    let mut z = z0.to_owned();
    let mut deltas = Vec::with_capacity(m);
    let mut v0: Option<Array2<f64>> = None;
    for k in 0..m {
        let v = field.velocity(z.view(), k as f64 * h)?;
        ensure_finite(v.view(), "velocity")?;
        z.scaled_add(h, &v);
        match &v0 {
            None => {
                deltas.push(Array2::zeros(v.raw_dim()));
                v0 = Some(v);
            }
            Some(first) => deltas.push(&v - first),
        }
    }
    let mut mean_delta = Array2::<f64>::zeros(z0.raw_dim());
    for d in &deltas {
        mean_delta.scaled_add(h, d);
    }
    let mut total = 0.0;
    for d in &deltas {
        let r = &mean_delta - d;
        total += r.iter().map(|x| x * x).sum::<f64>();
    }
    Ok(total * h / z0.nrows() as f64)
}

/// [`straightness`] of a model on `n` fresh noise points (and conditions).
pub fn model_straightness(
    model: &FlowModel,
    n: usize,
    m: usize,
    rng: &mut Rng,
    conditions: Option<&dyn ConditionSource>,
) -> Result<f64> {
    let z0 = gaussian_noise(n, model.dim(), rng);
    let cond = draw_model_conditions(model, n, rng, conditions)?;
    let c = model.condition_rows(cond.map(CondBatch::per_row).as_ref())?;
    let field = ConditionedField {
        field: &model.field,
        cond: c.as_ref().map(|c| c.view()),
    };
    straightness(&field, z0.view(), m)
}

fn draw_model_conditions(
    model: &FlowModel,
    n: usize,
    rng: &mut Rng,
    conditions: Option<&dyn ConditionSource>,
) -> Result<Option<Vec<ConditionBundle>>> {
    match (model.is_conditional(), conditions) {
        (false, _) => Ok(None),
        (true, Some(src)) => Ok(Some(src.draw_conditions(n, rng)?)),
        (true, None) => Err(Error::Config(
            "conditional model needs a condition source".into(),
        )),
    }
}

fn row_distance(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `Σ_i Σ_j ‖a_i - b_j‖`, outer rows split over threads, partial sums
/// combined in row order.
fn pair_sum(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, threads: usize) -> f64 {
    let row_sum = |i: usize| -> f64 { b.rows().into_iter().map(|bj| row_distance(a.row(i), bj)).sum() };
    let n = a.nrows();
    let threads = threads.clamp(1, n.max(1));
    let partial: Vec<f64> = if threads == 1 {
        (0..n).map(row_sum).collect()
    } else {
        let chunk = n.div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|start| {
                    let row_sum = &row_sum;
                    s.spawn(move || (start..(start + chunk).min(n)).map(row_sum).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("energy worker panicked"))
                .collect()
        })
    };
    partial.iter().sum()
}

/// Lexicographic order on whole batches, so arguments can be put in a
/// canonical order before summing.
fn batch_cmp(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Ordering {
    a.nrows().cmp(&b.nrows()).then_with(|| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Squared energy distance (V-statistic) between two samples:
/// `2 E‖X - Y‖ - E‖X - X'‖ - E‖Y - Y'‖`, all pairs, exact.
///
/// Symmetric bit-for-bit and independent of `threads`.
pub fn energy_distance(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    threads: usize,
) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Dimension("energy distance needs non-empty samples".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!(
            "energy distance between widths {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    ensure_finite(a, "energy distance sample")?;
    ensure_finite(b, "energy distance sample")?;
    let (a, b) = match batch_cmp(a, b) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let (n, m) = (a.nrows() as f64, b.nrows() as f64);
    let cross = pair_sum(a, b, threads) / (n * m);
    let within_a = pair_sum(a, a, threads) / (n * n);
    let within_b = pair_sum(b, b, threads) / (m * m);
    Ok(2.0 * cross - (within_a + within_b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneStepGap {
    pub one_step: f64,
    pub adaptive: f64,
    /// `one_step - adaptive`.
    pub gap: f64,
    pub adaptive_mean_nfe: f64,
}

/// Energy distance to `reference` of one-Euler-step samples versus RK45
/// samples, both from the same `z0` and conditions.
pub fn one_step_gap(
    model: &FlowModel,
    z0: ArrayView2<'_, f64>,
    conditions: Option<&[ConditionBundle]>,
    reference: ArrayView2<'_, f64>,
    adaptive: &SolverConfig,
    threads: usize,
) -> Result<OneStepGap> {
    let euler = integrate_model(model, z0, conditions, &SolverConfig::euler(1), threads)?;
    let rk = integrate_model(model, z0, conditions, adaptive, threads)?;
    let one_step = energy_distance(euler.samples.view(), reference, threads)?;
    let adaptive_ed = energy_distance(rk.samples.view(), reference, threads)?;
    Ok(OneStepGap {
        one_step,
        adaptive: adaptive_ed,
        gap: one_step - adaptive_ed,
        adaptive_mean_nfe: rk.mean_nfe,
    })
}

/// One speaker-swap probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversionTrial {
    pub source_speaker: usize,
    pub target_speaker: usize,
    pub content: Vec<usize>,
    pub pitch: Vec<f64>,
    /// Encoder input: the target speaker with the source's content and pitch.
    pub bundle: ConditionBundle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConversionReport {
    pub accuracy: f64,
    pub trials: usize,
    /// Probes skipped because source and target envelopes coincide.
    pub excluded: usize,
}

/// Fraction of conversions whose output envelope is nearer the target
/// speaker's than the source speaker's.
///
/// Produces one converted patch per trial.
pub type Converter<'a> = dyn FnMut(&[ConversionTrial], &mut Rng) -> Result<Array2<f64>> + 'a;

/// Each trial takes a source utterance and asks `generate` for a patch
/// conditioned on a different target speaker with the same content and
/// pitch. The envelope is recovered by least squares after removing the
/// known content and pitch part.
pub fn conversion_accuracy(
    toy: &ToyMel,
    trials: usize,
    rng: &mut Rng,
    generate: &mut Converter<'_>,
) -> Result<ConversionReport> {
    if trials == 0 {
        return Err(Error::Config("conversion needs >= 1 trial".into()));
    }
    let k = toy.config().n_speakers;
    let mut probes = Vec::with_capacity(trials);
    let mut excluded = 0;
    for _ in 0..trials {
        let source = rng.random_range(0..k);
        let target = (source + rng.random_range(1..k)) % k;
        let utt = toy.draw_utterance(source, rng);
        if toy.speakers()[source].envelope == toy.speakers()[target].envelope {
            log::warn!("speakers {source} and {target} share an envelope; trial skipped");
            excluded += 1;
            continue;
        }
        probes.push(ConversionTrial {
            source_speaker: source,
            target_speaker: target,
            bundle: toy.bundle(target, &utt.content, &utt.pitch),
            content: utt.content,
            pitch: utt.pitch,
        });
    }
    if probes.is_empty() {
        return Err(Error::Config("every conversion trial was excluded".into()));
    }
    let patches = generate(&probes, rng)?;
    if patches.nrows() != probes.len() {
        return Err(Error::Dimension(format!(
            "generator returned {} patches for {} trials",
            patches.nrows(),
            probes.len()
        )));
    }
    let dist = |coefs: &[f64], s: usize| -> f64 {
        toy.speakers()[s]
            .envelope
            .iter()
            .zip(coefs)
            .map(|(a, b)| (a - b).powi(2))
            .sum()
    };
    let mut hits = 0;
    for (p, trial) in probes.iter().enumerate() {
        let coefs = toy.regress_envelope(patches.row(p), &trial.content, &trial.pitch)?;
        if dist(&coefs, trial.target_speaker) < dist(&coefs, trial.source_speaker) {
            hits += 1;
        }
    }
    Ok(ConversionReport {
        accuracy: hits as f64 / probes.len() as f64,
        trials: probes.len(),
        excluded,
    })
}

/// [`conversion_accuracy`] with a trained conditional model as generator.
pub fn model_conversion_accuracy(
    model: &FlowModel,
    toy: &ToyMel,
    trials: usize,
    solver: &SolverConfig,
    rng: &mut Rng,
    threads: usize,
) -> Result<ConversionReport> {
    conversion_accuracy(toy, trials, rng, &mut |probes, rng| {
        let z0 = gaussian_noise(probes.len(), model.dim(), rng);
        let bundles: Vec<ConditionBundle> = probes.iter().map(|p| p.bundle.clone()).collect();
        let out = integrate_model(model, z0.view(), Some(&bundles), solver, threads)?;
        Ok(out.samples.into_data())
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    /// Solver steps per row: the Euler step count, or RK45's mean number
    /// of accepted steps.
    pub iter: usize,
    /// Mean evaluations of the field per row.
    pub nfe: f64,
    pub seconds_median: f64,
}

/// Times each solver on one fixed batch: one untimed warm-up, then
/// `repeats` timed runs whose median is reported.
pub fn bench(
    model: &FlowModel,
    solvers: &[(String, SolverConfig)],
    z0: ArrayView2<'_, f64>,
    conditions: Option<&[ConditionBundle]>,
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    if repeats < 3 {
        return Err(Error::Config(format!(
            "bench needs at least 3 repeats, got {repeats}"
        )));
    }
    let mut rows = Vec::with_capacity(solvers.len());
    for (method, solver) in solvers {
        let warm = integrate_model(model, z0, conditions, solver, 1)?;
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let clock = Stopwatch::start();
            integrate_model(model, z0, conditions, solver, 1)?;
            times.push(clock.seconds());
        }
        times.sort_by(f64::total_cmp);
        let mid = times.len() / 2;
        let median = if times.len() % 2 == 1 {
            times[mid]
        } else {
            0.5 * (times[mid - 1] + times[mid])
        };
        let iter = match solver.kind {
            SolverKind::Euler { steps } => steps,
            SolverKind::Rk45 { .. } => (warm.accepted as f64 / z0.nrows() as f64).round() as usize,
        };
        rows.push(BenchRow {
            method: method.clone(),
            iter,
            nfe: warm.mean_nfe,
            seconds_median: median,
        });
    }
    Ok(rows)
}

pub fn write_bench_csv(rows: &[BenchRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "method,iter,nfe,seconds_median").map_err(io)?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.method, r.iter, r.nfe, r.seconds_median).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
}

pub const METRIC_HEADER: &str = "metric,value,n,seed,config_hash";

/// Appends reports to `path`, writing the header only when the file is new
/// or empty.
pub fn append_metric_csv(reports: &[MetricReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    if fresh {
        writeln!(w, "{METRIC_HEADER}").map_err(io)?;
    }
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.metric, r.value, r.n, r.seed, r.config_hash
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Short stable fingerprint of a configuration text.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
