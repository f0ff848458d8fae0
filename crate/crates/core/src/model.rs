use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::fusion::{ConditionBundle, FusionConfig, FusionEncoder, FusionTrace};
use crate::nn::{Param, Parameterized};
use crate::vectorfield::{VectorField, VectorFieldConfig};
use crate::Rng;

/// Bookkeeping carried alongside the parameters and into checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelMeta {
    /// 0 for an untrained model, `k` for the k-rectified flow.
    pub rectification_round: u32,
    pub train_steps: u64,
    pub seed: u64,
    /// Free-form `key=value` pairs (data source, training recipe, ...).
    pub extra: BTreeMap<String, String>,
}

/// Conditions for a batch: distinct bundles plus, for every row, the index
/// of the bundle it uses. Rows sharing a bundle share one encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CondBatch {
    pub bundles: Vec<ConditionBundle>,
    pub rows: Vec<usize>,
}

impl CondBatch {
    /// One bundle per row.
    pub fn per_row(bundles: Vec<ConditionBundle>) -> Self {
        let rows = (0..bundles.len()).collect();
        Self { bundles, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Bundles in row order (cloned where shared).
    pub fn row_bundles(&self) -> Vec<ConditionBundle> {
        self.rows.iter().map(|&i| self.bundles[i].clone()).collect()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            bundles: self.bundles.clone(),
            rows: rows.iter().map(|&r| self.rows[r]).collect(),
        }
    }
}

/// The trainable generator: drift network plus, for conditional models,
/// the condition encoder whose output is the network's `c` input.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub field: VectorField,
    pub fusion: Option<FusionEncoder>,
    pub meta: ModelMeta,
}

/// Saved encoder passes for one training batch.
pub struct ConditionTrace {
    traces: Vec<FusionTrace>,
    rows: Vec<usize>,
}

impl FlowModel {
    pub fn new(
        field_config: VectorFieldConfig,
        fusion_config: Option<FusionConfig>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut field_config = field_config;
        if let Some(fc) = &fusion_config {
            field_config.cond_dim = fc.cond_dim;
        } else if field_config.cond_dim != 0 {
            return Err(Error::Config(
                "a conditioned field needs a fusion encoder".into(),
            ));
        }
        let field = VectorField::new(field_config, rng)?;
        let fusion = fusion_config
            .map(|fc| FusionEncoder::new(fc, rng))
            .transpose()?;
        Ok(Self {
            field,
            fusion,
            meta: ModelMeta::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.field.config().dim
    }

    pub fn is_conditional(&self) -> bool {
        self.fusion.is_some()
    }

    /// Fused condition rows for a batch, or `None` for unconditional models.
    pub fn condition_rows(&self, cond: Option<&CondBatch>) -> Result<Option<Array2<f64>>> {
        match (&self.fusion, cond) {
            (None, None) => Ok(None),
            (None, Some(_)) => Err(Error::Config(
                "unconditional model was given conditions".into(),
            )),
            (Some(_), None) => Err(Error::Config(
                "conditional model needs condition bundles".into(),
            )),
            (Some(fusion), Some(cond)) => {
                let fused = fusion.fuse_all(&cond.bundles)?;
                Ok(Some(fused.select(ndarray::Axis(0), &cond.rows)))
            }
        }
    }

    /// `v(x_i, t_i, c_i)` for a batch.
    pub fn velocity(
        &self,
        x: ArrayView2<'_, f64>,
        t: &[f64],
        cond: Option<&CondBatch>,
    ) -> Result<Array2<f64>> {
        let c = self.condition_rows(cond)?;
        self.field.forward(x, t, c.as_ref().map(|c| c.view()))
    }

    /// Forward pass that caches everything needed by [`backward`].
    ///
    /// [`backward`]: FlowModel::backward
    pub fn forward_train(
        &mut self,
        x: ArrayView2<'_, f64>,
        t: &[f64],
        cond: Option<&CondBatch>,
    ) -> Result<(Array2<f64>, Option<ConditionTrace>)> {
        let (c, trace) = match (&self.fusion, cond) {
            (None, None) => (None, None),
            (Some(fusion), Some(cond)) => {
                if cond.rows.len() != x.nrows() {
                    return Err(Error::Dimension(format!(
                        "{} condition rows for {} samples",
                        cond.rows.len(),
                        x.nrows()
                    )));
                }
                let mut traces = Vec::with_capacity(cond.bundles.len());
                let mut fused = Array2::zeros((cond.bundles.len(), fusion.config().cond_dim));
                for (i, bundle) in cond.bundles.iter().enumerate() {
                    let (c, trace) = fusion.forward(bundle)?;
                    fused.row_mut(i).assign(&c);
                    traces.push(trace);
                }
                let rows = fused.select(ndarray::Axis(0), &cond.rows);
                (
                    Some(rows),
                    Some(ConditionTrace {
                        traces,
                        rows: cond.rows.clone(),
                    }),
                )
            }
            _ => {
                return Err(Error::Config(
                    "condition bundles must be given exactly for conditional models".into(),
                ))
            }
        };
        let v = self
            .field
            .forward_train(x, t, c.as_ref().map(|c| c.view()))?;
        Ok((v, trace))
    }

    /// Backpropagates `dL/dv` through the field and, if present, the encoder.
    pub fn backward(
        &mut self,
        grad_v: ArrayView2<'_, f64>,
        trace: Option<ConditionTrace>,
    ) -> Result<()> {
        let input_grad = self.field.backward(grad_v)?;
        if let (Some(fusion), Some(trace)) = (&mut self.fusion, trace) {
            let grad_c = self.field.condition_grad(&input_grad);
            let mut per_bundle = Array2::zeros((trace.traces.len(), grad_c.ncols()));
            for (row, &b) in trace.rows.iter().enumerate() {
                let mut acc = per_bundle.row_mut(b);
                acc += &grad_c.row(row);
            }
            for (b, t) in trace.traces.iter().enumerate() {
                fusion.backward(t, per_bundle.row(b))?;
            }
        }
        Ok(())
    }
}

impl Parameterized for FlowModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.field
            .visit_params(&mut |name, p| f(&format!("field.{name}"), p));
        if let Some(fusion) = &self.fusion {
            fusion.visit_params(&mut |name, p| f(&format!("fusion.{name}"), p));
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.field
            .visit_params_mut(&mut |name, p| f(&format!("field.{name}"), p));
        if let Some(fusion) = &mut self.fusion {
            fusion.visit_params_mut(&mut |name, p| f(&format!("fusion.{name}"), p));
        }
    }
}
