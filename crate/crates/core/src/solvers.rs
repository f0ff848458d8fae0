//! Integration of `dz/dt = v(z, t)` from `t = 0` (noise) to `t = 1` (data).

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};

use crate::batch::{SampleBatch, SourceTag};
use crate::error::{Error, Result};
use crate::fusion::ConditionBundle;
use crate::model::{CondBatch, FlowModel};
use crate::vectorfield::VectorField;
use crate::Rng;

/// Smallest step the adaptive solver will take before giving up.
pub const MIN_STEP: f64 = 1e-12;

/// A time-dependent velocity over row batches.
pub trait VelocityField {
    fn velocity(&self, z: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>>;
}

impl<F> VelocityField for F
where
    F: Fn(ArrayView2<'_, f64>, f64) -> Array2<f64>,
{
    fn velocity(&self, z: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
        Ok(self(z, t))
    }
}

/// A drift network with its condition rows already fused.
pub struct ConditionedField<'a> {
    pub field: &'a VectorField,
    pub cond: Option<ArrayView2<'a, f64>>,
}

impl VelocityField for ConditionedField<'_> {
    fn velocity(&self, z: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
        self.field.velocity_at(z, t, self.cond)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverKind {
    Euler { steps: usize },
    Rk45 { atol: f64, rtol: f64, max_steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub record_trajectory: bool,
}

impl SolverConfig {
    pub fn euler(steps: usize) -> Self {
        Self {
            kind: SolverKind::Euler { steps },
            record_trajectory: false,
        }
    }

    pub fn rk45(atol: f64, rtol: f64) -> Self {
        Self {
            kind: SolverKind::Rk45 {
                atol,
                rtol,
                max_steps: 100_000,
            },
            record_trajectory: false,
        }
    }

    /// RK45 at the default tolerances `atol = rtol = 1e-5`.
    pub fn rk45_default() -> Self {
        Self::rk45(1e-5, 1e-5)
    }

    pub fn recording(mut self) -> Self {
        self.record_trajectory = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SolverKind::Euler { steps: 0 } => {
                Err(Error::Config("euler needs at least one step".into()))
            }
            SolverKind::Rk45 { atol, rtol, max_steps } => {
                if !(atol >= 1e-12 && rtol >= 1e-12) || !atol.is_finite() || !rtol.is_finite() {
                    return Err(Error::Config(format!(
                        "rk45 tolerances must be finite and >= 1e-12, got atol={atol} rtol={rtol}"
                    )));
                }
                if max_steps == 0 {
                    return Err(Error::Config("rk45 max_steps must be >= 1".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Short label such as `euler-30` or `rk45`.
    pub fn label(&self) -> String {
        match self.kind {
            SolverKind::Euler { steps } => format!("euler-{steps}"),
            SolverKind::Rk45 { .. } => "rk45".into(),
        }
    }
}

/// States visited by one integration, plus cost counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Strictly increasing, `0` first and `1` last.
    pub times: Vec<f64>,
    /// One batch per time. Without recording only the endpoints are kept.
    pub states: Vec<Array2<f64>>,
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

impl Trajectory {
    pub fn endpoint(&self) -> &Array2<f64> {
        self.states.last().expect("trajectory has at least two states")
    }
}

fn check_finite(z: &Array2<f64>, step: usize) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration {
            row: None,
            reason: format!("state became non-finite at step {step}"),
        })
    }
}

/// Explicit Euler with `n_steps` uniform steps; the field is evaluated at
/// each step's left endpoint. `nfe == n_steps`.
pub fn euler_integrate(
    field: &dyn VelocityField,
    z0: ArrayView2<'_, f64>,
    n_steps: usize,
    record: bool,
) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::Config("euler needs at least one step".into()));
    }
    let h = 1.0 / n_steps as f64;
    let mut z = z0.to_owned();
    let mut times = vec![0.0];
    let mut states = vec![z.clone()];
    for k in 0..n_steps {
        let t = k as f64 / n_steps as f64;
        let v = field.velocity(z.view(), t)?;
        z.scaled_add(h, &v);
        check_finite(&z, k)?;
        if record && k + 1 < n_steps {
            times.push((k + 1) as f64 / n_steps as f64);
            states.push(z.clone());
        }
    }
    times.push(1.0);
    states.push(z);
    Ok(Trajectory {
        times,
        states,
        nfe: n_steps,
        accepted: n_steps,
        rejected: 0,
    })
}

/// Dormand–Prince 5(4) tableau.
pub mod dopri5 {
    pub const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

    pub const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];

    /// Fifth-order weights (equal to the last row of `A`: first same as last).
    pub const B: [f64; 7] = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ];

    /// Embedded fourth-order weights.
    pub const B_HAT: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
}

fn rms_scaled(x: &Array2<f64>, scale: &Array2<f64>) -> f64 {
    let n = x.len() as f64;
    let sum: f64 = x
        .iter()
        .zip(scale.iter())
        .map(|(v, s)| (v / s) * (v / s))
        .sum();
    (sum / n).sqrt()
}

/// Hairer's starting-step heuristic; costs one extra field evaluation.
fn initial_step(
    field: &dyn VelocityField,
    z0: &Array2<f64>,
    f0: &Array2<f64>,
    atol: f64,
    rtol: f64,
    span: f64,
) -> Result<f64> {
    let scale = z0.mapv(|v| atol + rtol * v.abs());
    let d0 = rms_scaled(z0, &scale);
    let d1 = rms_scaled(f0, &scale);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    }
    .min(span);
    let mut z1 = z0.clone();
    z1.scaled_add(h0, f0);
    let f1 = field.velocity(z1.view(), h0)?;
    let d2 = rms_scaled(&(&f1 - f0), &scale) / h0;
    let dmax = d1.max(d2);
    let h1 = if !dmax.is_finite() {
        h0
    } else if dmax <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dmax).powf(1.0 / 5.0)
    };
    Ok((100.0 * h0).min(h1).min(span))
}

/// Adaptive Dormand–Prince 5(4) with first-same-as-last reuse.
///
/// The error norm is the RMS over all components of the embedded error
/// estimate divided by `atol + rtol * max(|z|, |z_new|)`; a step is accepted
/// when the norm is at most 1. The next step is scaled by
/// `0.9 * norm^(-1/5)` clamped to `[0.2, 5]`.
///
/// Evaluation count: one for the initial slope, one for the starting-step
/// probe, then six per attempted step because the seventh stage of an
/// accepted step is reused as the next first stage. Hence
/// `nfe == 2 + 6 * (accepted + rejected)`.
pub fn rk45_integrate(
    field: &dyn VelocityField,
    z0: ArrayView2<'_, f64>,
    atol: f64,
    rtol: f64,
    max_steps: usize,
    record: bool,
) -> Result<Trajectory> {
    SolverConfig {
        kind: SolverKind::Rk45 {
            atol,
            rtol,
            max_steps,
        },
        record_trajectory: record,
    }
    .validate()?;
    use dopri5::{A, B, B_HAT, C};

    let mut t = 0.0_f64;
    let mut z = z0.to_owned();
    let mut k1 = field.velocity(z.view(), t)?;
    let mut nfe = 1;
    let mut h = initial_step(field, &z, &k1, atol, rtol, 1.0)?;
    nfe += 1;

    let mut times = vec![0.0];
    let mut states = vec![z.clone()];
    let (mut accepted, mut rejected) = (0usize, 0usize);
    let mut stages: Vec<Array2<f64>> = Vec::with_capacity(7);

    while t < 1.0 {
        if accepted + rejected >= max_steps {
            return Err(Error::Integration {
                row: None,
                reason: format!("exceeded {max_steps} steps at t={t}"),
            });
        }
        if h < MIN_STEP {
            return Err(Error::Integration {
                row: None,
                reason: format!("step size underflow ({h:e}) at t={t}"),
            });
        }
        let last = t + h >= 1.0;
        if last {
            h = 1.0 - t;
        }

        stages.clear();
        stages.push(k1.clone());
        for i in 1..7 {
            let mut zi = z.clone();
            for (j, kj) in stages.iter().enumerate().take(i) {
                if A[i][j] != 0.0 {
                    zi.scaled_add(h * A[i][j], kj);
                }
            }
            let ti = if i == 6 { t + h } else { t + C[i] * h };
            stages.push(field.velocity(zi.view(), ti)?);
        }
        nfe += 6;

        let mut z_new = z.clone();
        let mut err = Array2::<f64>::zeros(z.raw_dim());
        for (i, ki) in stages.iter().enumerate() {
            if B[i] != 0.0 {
                z_new.scaled_add(h * B[i], ki);
            }
            let e = B[i] - B_HAT[i];
            if e != 0.0 {
                err.scaled_add(h * e, ki);
            }
        }
        let mut scale = Array2::zeros(z.raw_dim());
        ndarray::Zip::from(&mut scale)
            .and(&z)
            .and(&z_new)
            .for_each(|s, &a, &b| *s = atol + rtol * a.abs().max(b.abs()));
        let norm = rms_scaled(&err, &scale);
        let norm = if norm.is_finite() && z_new.iter().all(|v| v.is_finite()) {
            norm
        } else {
            f64::INFINITY
        };

        let factor = if norm == 0.0 {
            5.0
        } else {
            (0.9 * norm.powf(-0.2)).clamp(0.2, 5.0)
        };
        if norm <= 1.0 {
            accepted += 1;
            t = if last { 1.0 } else { t + h };
            z = z_new;
            k1 = stages.pop().expect("seven stages");
            if record || t >= 1.0 {
                times.push(t);
                states.push(z.clone());
            }
        } else {
            rejected += 1;
        }
        h *= factor;
    }

    Ok(Trajectory {
        times,
        states,
        nfe,
        accepted,
        rejected,
    })
}

/// Dispatches on the solver kind.
pub fn integrate(
    field: &dyn VelocityField,
    z0: ArrayView2<'_, f64>,
    config: &SolverConfig,
) -> Result<Trajectory> {
    config.validate()?;
    match config.kind {
        SolverKind::Euler { steps } => euler_integrate(field, z0, steps, config.record_trajectory),
        SolverKind::Rk45 {
            atol,
            rtol,
            max_steps,
        } => rk45_integrate(field, z0, atol, rtol, max_steps, config.record_trajectory),
    }
}

/// Source of condition bundles for sampling.
pub trait ConditionSource {
    fn draw_conditions(&self, n: usize, rng: &mut Rng) -> Result<Vec<ConditionBundle>>;
}

/// The same bundle for every row.
pub struct FixedCondition(pub ConditionBundle);

impl ConditionSource for FixedCondition {
    fn draw_conditions(&self, n: usize, _rng: &mut Rng) -> Result<Vec<ConditionBundle>> {
        Ok(vec![self.0.clone(); n])
    }
}

/// `n x dim` standard Gaussian draws, row-major.
pub fn gaussian_noise(n: usize, dim: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, dim), || StandardNormal.sample(rng))
}

/// Result of pushing a batch of starting points through the flow.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub z0: SampleBatch,
    pub samples: SampleBatch,
    pub conditions: Option<Vec<ConditionBundle>>,
    pub mean_nfe: f64,
    pub total_nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub wall_seconds: f64,
    /// Recorded paths, each tagged with the index of its first row.
    pub trajectories: Vec<(usize, Trajectory)>,
}

/// Wall clock that degrades to zero where no monotonic clock exists.
pub(crate) struct Stopwatch {
    #[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
    start: std::time::Instant,
}

impl Stopwatch {
    pub(crate) fn start() -> Self {
        Self {
            #[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
            start: std::time::Instant::now(),
        }
    }

    pub(crate) fn seconds(&self) -> f64 {
        #[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
        {
            self.start.elapsed().as_secs_f64()
        }
        #[cfg(all(target_arch = "wasm32", target_os = "unknown"))]
        {
            0.0
        }
    }
}

/// Integrates given starting points (and their conditions) through `model`.
///
/// Euler integrates the whole batch at once. RK45 integrates every row on
/// its own, so step sizes never depend on batch composition; rows are split
/// over up to `threads` workers and the result does not depend on the
/// thread count.
pub fn integrate_model(
    model: &FlowModel,
    z0: ArrayView2<'_, f64>,
    conditions: Option<&[ConditionBundle]>,
    solver: &SolverConfig,
    threads: usize,
) -> Result<SampleOutput> {
    solver.validate()?;
    let clock = Stopwatch::start();
    let n = z0.nrows();
    let cond_batch = conditions.map(|c| CondBatch::per_row(c.to_vec()));
    if let Some(c) = &cond_batch {
        if c.len() != n {
            return Err(Error::Dimension(format!(
                "{} conditions for {n} starting points",
                c.len()
            )));
        }
    }
    let cond_rows = model.condition_rows(cond_batch.as_ref())?;

    let mut out = Array2::zeros(z0.raw_dim());
    let mut trajectories = Vec::new();
    let (mut total_nfe, mut accepted, mut rejected) = (0, 0, 0);

    match solver.kind {
        SolverKind::Euler { .. } => {
            let field = ConditionedField {
                field: &model.field,
                cond: cond_rows.as_ref().map(|c| c.view()),
            };
            let traj = integrate(&field, z0, solver)?;
            out.assign(traj.endpoint());
            total_nfe = traj.nfe * n;
            accepted = traj.accepted * n;
            if solver.record_trajectory {
                trajectories.push((0, traj));
            }
        }
        SolverKind::Rk45 { .. } => {
            let per_row = |row: usize| -> Result<Trajectory> {
                let field = ConditionedField {
                    field: &model.field,
                    cond: cond_rows.as_ref().map(|c| c.slice(s![row..row + 1, ..])),
                };
                integrate(&field, z0.slice(s![row..row + 1, ..]), solver).map_err(|e| match e {
                    Error::Integration { reason, .. } => Error::Integration {
                        row: Some(row),
                        reason,
                    },
                    other => other,
                })
            };
            let results = run_rows(n, threads, &per_row)?;
            for (row, traj) in results.into_iter().enumerate() {
                out.row_mut(row).assign(&traj.endpoint().row(0));
                total_nfe += traj.nfe;
                accepted += traj.accepted;
                rejected += traj.rejected;
                if solver.record_trajectory {
                    trajectories.push((row, traj));
                }
            }
        }
    }

    Ok(SampleOutput {
        z0: SampleBatch::new(z0.to_owned(), SourceTag::Noise)?,
        samples: SampleBatch::new(out, SourceTag::Generated)?,
        conditions: conditions.map(|c| c.to_vec()),
        mean_nfe: total_nfe as f64 / n as f64,
        total_nfe,
        accepted,
        rejected,
        wall_seconds: clock.seconds(),
        trajectories,
    })
}

/// Runs `job` for every row index, in contiguous chunks over `threads`
/// workers, returning results in row order.
fn run_rows<T: Send>(
    n: usize,
    threads: usize,
    job: &(dyn Fn(usize) -> Result<T> + Sync),
) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(job).collect();
    }
    let chunk = n.div_ceil(threads);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                let end = (start + chunk).min(n);
                scope.spawn(move || (start..end).map(job).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampling worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Draws `n` starting points from the standard Gaussian (and, for
/// conditional models, `n` condition bundles, drawn after the noise) and
/// integrates them to `t = 1`.
pub fn sample(
    model: &FlowModel,
    n: usize,
    solver: &SolverConfig,
    rng: &mut Rng,
    conditions: Option<&dyn ConditionSource>,
    threads: usize,
) -> Result<SampleOutput> {
    if n == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    let z0 = gaussian_noise(n, model.dim(), rng);
    let bundles = match (model.is_conditional(), conditions) {
        (true, Some(src)) => Some(src.draw_conditions(n, rng)?),
        (true, None) => {
            return Err(Error::Config(
                "conditional model needs a condition source".into(),
            ))
        }
        (false, _) => None,
    };
    integrate_model(model, z0.view(), bundles.as_deref(), solver, threads)
}

/// Writes recorded paths as `row,t,dim0,dim1,...`.
pub fn write_trajectories(output: &SampleOutput, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let dim = output.samples.dim();
    let header: Vec<String> = (0..dim).map(|d| format!("dim{d}")).collect();
    let io = |e| Error::io(path, e);
    writeln!(w, "row,t,{}", header.join(",")).map_err(io)?;
    for (first, traj) in &output.trajectories {
        let rows = traj.states[0].nrows();
        for r in 0..rows {
            for (t, state) in traj.times.iter().zip(&traj.states) {
                let vals: Vec<String> = state.row(r).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{},{t},{}", first + r, vals.join(",")).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}
