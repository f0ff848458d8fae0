use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Linear, Param};
use crate::Rng;

/// 1-D convolution from a scalar contour to `d_model` channels; kernel 3,
/// zero "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchConv {
    /// `3 x d_model`, row `k` multiplies `pitch[i + k - 1]`.
    pub weight: Param,
    pub bias: Param,
}

impl PitchConv {
    pub fn new(d_model: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Param::uniform(3, d_model, 1.0 / 3f64.sqrt(), rng),
            bias: Param::zeros(1, d_model),
        }
    }

    pub fn d_model(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, pitch: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
        let len = pitch.len();
        if len == 0 {
            return Err(Error::EmptySequence("pitch contour".into()));
        }
        let d = self.d_model();
        let mut out = Array2::zeros((len, d));
        for i in 0..len {
            for c in 0..d {
                let mut acc = self.bias.value[[0, c]];
                for k in 0..3 {
                    if let Some(j) = (i + k).checked_sub(1).filter(|&j| j < len) {
                        acc += self.weight.value[[k, c]] * pitch[j];
                    }
                }
                out[[i, c]] = acc;
            }
        }
        Ok(out)
    }

    /// The contour is an input, not a parameter, so only weights get gradients.
    pub fn backward(&mut self, pitch: ArrayView1<'_, f64>, d_out: ArrayView2<'_, f64>) {
        let len = pitch.len();
        for i in 0..len {
            for k in 0..3 {
                if let Some(j) = (i + k).checked_sub(1).filter(|&j| j < len) {
                    let p = pitch[j];
                    for c in 0..self.d_model() {
                        self.weight.grad[[k, c]] += d_out[[i, c]] * p;
                    }
                }
            }
        }
        self.bias.grad += &d_out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
}

/// Elementwise sigmoid gate over two feature rows:
/// `g = σ([a; b] W + β)`, `out = g ⊙ a + (1 − g) ⊙ b`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedFusion {
    pub gate: Linear,
}

#[derive(Debug, Clone)]
pub struct GateCache {
    joined: Array2<f64>,
    a: Array2<f64>,
    b: Array2<f64>,
    g: Array2<f64>,
}

impl GatedFusion {
    pub fn new(d_model: usize, rng: &mut Rng) -> Self {
        Self {
            gate: Linear::new(2 * d_model, d_model, true, rng),
        }
    }

    pub fn forward(
        &self,
        a: ArrayView2<'_, f64>,
        b: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, GateCache)> {
        let d = self.gate.output_dim();
        if a.dim() != b.dim() || a.ncols() != d {
            return Err(Error::Dimension(format!(
                "gated fusion inputs {:?} and {:?}, width {d}",
                a.dim(),
                b.dim()
            )));
        }
        let joined = ndarray::concatenate(Axis(1), &[a, b]).expect("row counts checked");
        let g = self.gate.forward(joined.view()).mapv(sigmoid);
        let out = &g * &a + &(1.0 - &g) * &b;
        Ok((
            out,
            GateCache {
                joined,
                a: a.to_owned(),
                b: b.to_owned(),
                g,
            },
        ))
    }

    /// Returns `(da, db)`.
    pub fn backward(
        &mut self,
        cache: &GateCache,
        d_out: ArrayView2<'_, f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let g = &cache.g;
        let dg = &d_out * &(&cache.a - &cache.b);
        let dz = dg * &(g * &(1.0 - g));
        let d_joined = self.gate.backward(cache.joined.view(), dz.view());
        let d = g.ncols();
        let mut da = d_joined.slice(ndarray::s![.., ..d]).to_owned();
        let mut db = d_joined.slice(ndarray::s![.., d..]).to_owned();
        da += &(&d_out * g);
        db += &(&d_out * &(1.0 - g));
        (da, db)
    }
}
