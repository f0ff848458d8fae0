//! Central finite-difference check of the hand-written backward passes.

use ndarray::Array2;

use crate::error::Result;
use crate::flow::{flow_loss, interpolate};
use crate::model::{CondBatch, FlowModel};
use crate::nn::{Param, Parameterized};

/// One fixed training batch whose loss is differentiated.
#[derive(Debug, Clone)]
pub struct FlowProblem {
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    pub t: Vec<f64>,
    pub cond: Option<CondBatch>,
}

impl FlowProblem {
    pub fn loss(&self, model: &FlowModel) -> Result<f64> {
        let xt = interpolate(self.x0.view(), self.x1.view(), &self.t)?;
        let v = model.velocity(xt.view(), &self.t, self.cond.as_ref())?;
        flow_loss(v.view(), self.x0.view(), self.x1.view())
    }

    /// Leaves the analytic gradient of [`Self::loss`] in `model`'s params.
    pub fn backprop(&self, model: &mut FlowModel) -> Result<()> {
        model.zero_grad();
        let xt = interpolate(self.x0.view(), self.x1.view(), &self.t)?;
        let (v, trace) = model.forward_train(xt.view(), &self.t, self.cond.as_ref())?;
        let n = self.x0.nrows() as f64;
        let grad = (&v - &(&self.x1 - &self.x0)) * (2.0 / n);
        model.backward(grad.view(), trace)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Where the worst entry sits, with both values.
    pub worst: String,
    pub entries: usize,
}

/// Compares the analytic gradient with central differences of step `eps`
/// for every parameter entry.
///
/// A central difference carries rounding noise of about `u |L| / eps`, so
/// derivatives smaller than `floor` are graded on absolute error instead
/// of on noise over noise.
pub fn check_gradients(model: &FlowModel, problem: &FlowProblem, eps: f64, floor: f64) -> Result<GradCheck> {
    let mut model = model.clone();
    problem.backprop(&mut model)?;
    let mut grads = Vec::new();
    model.visit_params(&mut |name, p| grads.push((name.to_string(), p.grad.clone())));

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        entries: 0,
    };
    for (k, (name, grad)) in grads.iter().enumerate() {
        for idx in 0..grad.len() {
            let (r, c) = (idx / grad.ncols(), idx % grad.ncols());
            let probe = |delta: f64| {
                let mut m = model.clone();
                let mut i = 0;
                m.visit_params_mut(&mut |_, p: &mut Param| {
                    if i == k {
                        p.value[[r, c]] += delta;
                    }
                    i += 1;
                });
                problem.loss(&m)
            };
            let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            let analytic = grad[[r, c]];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            report.entries += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{r},{c}] analytic {analytic:e} numeric {numeric:e}");
            }
        }
    }
    Ok(report)
}
