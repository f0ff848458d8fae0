//! The drift network `v(x, t, c)`: an MLP over `[x, embed(t), c]`.

use std::f64::consts::TAU;

use ndarray::{s, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::{silu, silu_grad, Linear, Param, Parameterized};
use crate::Rng;

/// Highest embedding frequency, as a multiple of `2π`, used by [`time_embed`].
pub const FULL_TIME_SCALE: f64 = 1e4;

/// Highest embedding frequency used by trained fields unless configured.
pub const DEFAULT_TIME_SCALE: f64 = 4.0;

/// Sinusoidal embedding of `t` with frequencies geometric from `2π` to
/// `2π·10⁴`, laid out as `[sin(ω_0 t) .. sin(ω_{h-1} t), cos(ω_0 t) .. ]`.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    time_embed_scaled(t, dim, FULL_TIME_SCALE)
}

/// As [`time_embed`] with the top frequency `2π·max_scale`.
pub fn time_embed_scaled(t: f64, dim: usize, max_scale: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; dim];
    write_time_embedding(t, dim, max_scale, &mut out)?;
    Ok(out)
}

fn write_time_embedding(t: f64, dim: usize, max_scale: f64, out: &mut [f64]) -> Result<()> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "time embedding dimension must be even and >= 2, got {dim}"
        )));
    }
    if max_scale.is_nan() || max_scale < 1.0 {
        return Err(Error::Config(format!(
            "time embedding scale must be >= 1, got {max_scale}"
        )));
    }
    let half = dim / 2;
    for j in 0..half {
        let frac = if half == 1 {
            0.0
        } else {
            j as f64 / (half - 1) as f64
        };
        let omega = TAU * max_scale.powf(frac);
        out[j] = (omega * t).sin();
        out[half + j] = (omega * t).cos();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldConfig {
    /// Data dimension `D`.
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub time_scale: f64,
    /// Width of the condition vector; 0 for an unconditional field.
    pub cond_dim: usize,
}

impl VectorFieldConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            hidden: vec![256, 256],
            time_embed_dim: 16,
            time_scale: DEFAULT_TIME_SCALE,
            cond_dim: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dim + self.time_embed_dim + self.cond_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("data dimension must be >= 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        write_time_embedding(0.0, self.time_embed_dim, self.time_scale, &mut vec![
            0.0;
            self.time_embed_dim
        ])
    }
}

#[derive(Debug, Clone)]
struct Activations {
    /// Input to each layer; entry `i + 1` is the activated output of layer `i`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

/// MLP drift network. Hidden layers use SiLU; the output layer is affine
/// and starts at zero, so a fresh field is identically zero.
#[derive(Debug, Clone)]
pub struct VectorField {
    config: VectorFieldConfig,
    layers: Vec<Linear>,
    cache: Option<Activations>,
}

impl PartialEq for VectorField {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.layers == other.layers
    }
}

impl VectorField {
    pub fn new(config: VectorFieldConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![config.input_dim()];
        widths.extend(&config.hidden);
        let mut layers = Vec::with_capacity(widths.len());
        for pair in widths.windows(2) {
            layers.push(Linear::new(pair[0], pair[1], true, rng));
        }
        layers.push(Linear::zeros(*widths.last().unwrap(), config.dim, true));
        Ok(Self {
            config,
            layers,
            cache: None,
        })
    }

    pub fn config(&self) -> &VectorFieldConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn is_conditional(&self) -> bool {
        self.config.cond_dim > 0
    }

    /// Assembles the network input `[x, embed(t_i), c_i]` row by row.
    pub fn build_input(
        &self,
        x: ArrayView2<'_, f64>,
        t: &[f64],
        cond: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array2<f64>> {
        let cfg = &self.config;
        let n = x.nrows();
        if x.ncols() != cfg.dim {
            return Err(Error::Dimension(format!(
                "field expects {} columns, got {}",
                cfg.dim,
                x.ncols()
            )));
        }
        if t.len() != n {
            return Err(Error::Dimension(format!("{} times for {n} rows", t.len())));
        }
        match (cond, cfg.cond_dim) {
            (None, 0) => {}
            (Some(c), k) if k > 0 => {
                if c.dim() != (n, k) {
                    return Err(Error::Dimension(format!(
                        "condition must be {n}x{k}, got {:?}",
                        c.dim()
                    )));
                }
            }
            (None, k) => {
                return Err(Error::Dimension(format!(
                    "conditional field needs a {k}-wide condition"
                )))
            }
            (Some(_), _) => {
                return Err(Error::Dimension(
                    "unconditional field was given a condition".into(),
                ))
            }
        }

        let te = cfg.time_embed_dim;
        let mut input = Array2::zeros((n, cfg.input_dim()));
        input.slice_mut(s![.., ..cfg.dim]).assign(&x);
        for (i, &ti) in t.iter().enumerate() {
            let mut row = input.row_mut(i);
            let slot = row
                .as_slice_mut()
                .expect("freshly allocated rows are contiguous");
            write_time_embedding(ti, te, cfg.time_scale, &mut slot[cfg.dim..cfg.dim + te])?;
        }
        if let Some(c) = cond {
            input.slice_mut(s![.., cfg.dim + te..]).assign(&c);
        }
        Ok(input)
    }

    /// Velocity for each row of `x` at its own time `t[i]`.
    pub fn forward(
        &self,
        x: ArrayView2<'_, f64>,
        t: &[f64],
        cond: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array2<f64>> {
        let input = self.build_input(x, t, cond)?;
        Ok(self.forward_input(input))
    }

    /// Velocity for every row at a shared time.
    pub fn velocity_at(
        &self,
        x: ArrayView2<'_, f64>,
        t: f64,
        cond: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array2<f64>> {
        let times = vec![t; x.nrows()];
        self.forward(x, &times, cond)
    }

    fn forward_input(&self, mut h: Array2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(h.view());
            if i < last {
                h.mapv_inplace(silu);
            }
        }
        h
    }

    /// Forward pass that keeps activations for a following [`backward`].
    ///
    /// [`backward`]: VectorField::backward
    pub fn forward_train(
        &mut self,
        x: ArrayView2<'_, f64>,
        t: &[f64],
        cond: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array2<f64>> {
        let input = self.build_input(x, t, cond)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(h.view());
            inputs.push(h);
            if i < last {
                h = z.mapv(silu);
                pre.push(z);
            } else {
                h = z;
            }
        }
        self.cache = Some(Activations { inputs, pre });
        Ok(h)
    }

    /// Accumulates `dL/dθ` for the cached forward pass and returns the
    /// gradient with respect to the full input `[x, embed(t), c]`.
    pub fn backward(&mut self, grad_out: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a cached forward pass".into()))?;
        let n = cache.inputs[0].nrows();
        if grad_out.dim() != (n, self.config.dim) {
            return Err(Error::Dimension(format!(
                "upstream gradient must be {n}x{}, got {:?}",
                self.config.dim,
                grad_out.dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut grad = grad_out.to_owned();
        for i in (0..=last).rev() {
            if i < last {
                grad.zip_mut_with(&cache.pre[i], |g, &z| *g *= silu_grad(z));
            }
            grad = self.layers[i].backward(cache.inputs[i].view(), grad.view());
        }
        Ok(grad)
    }

    /// Columns of the input gradient that belong to the condition vector.
    pub fn condition_grad<'a>(&self, input_grad: &'a Array2<f64>) -> ArrayView2<'a, f64> {
        let start = self.config.dim + self.config.time_embed_dim;
        input_grad.slice(s![.., start..])
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl Parameterized for VectorField {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("layer{i}"), f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("layer{i}"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use ndarray::array;

    fn small(cond_dim: usize, hidden: Vec<usize>) -> VectorField {
        let mut cfg = VectorFieldConfig::new(2);
        cfg.hidden = hidden;
        cfg.time_embed_dim = 4;
        cfg.cond_dim = cond_dim;
        VectorField::new(cfg, &mut seeded_rng(3)).unwrap()
    }

    #[test]
    fn time_embedding_at_zero() {
        let e = time_embed(0.0, 8).unwrap();
        assert!(e[..4].iter().all(|&v| v == 0.0));
        assert!(e[4..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn time_embedding_in_unit_range_and_aperiodic() {
        for k in 0..=100 {
            let t = k as f64 / 100.0;
            assert!(time_embed(t, 16).unwrap().iter().all(|v| v.abs() <= 1.0));
        }
        let a = time_embed(0.3, 16).unwrap();
        let b = time_embed(1.3, 16).unwrap();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-3, "t=0.3 and t=1.3 embed identically");
    }

    #[test]
    fn time_embedding_rejects_odd_dim() {
        assert!(matches!(time_embed(0.5, 3), Err(Error::Config(_))));
        assert!(matches!(time_embed(0.5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn fresh_field_is_zero() {
        let field = small(0, vec![8, 8]);
        let x = array![[1.0, -2.0], [0.3, 7.0]];
        let v = field.forward(x.view(), &[0.1, 0.9], None).unwrap();
        assert!(v.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut field = small(0, vec![8]);
        for p in field.layers_mut().last_mut().unwrap().weight.value.iter_mut() {
            *p = 0.3;
        }
        let x = array![[0.5, 0.5], [0.5, 0.5]];
        let v = field.forward(x.view(), &[0.4, 0.4], None).unwrap();
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn hand_computed_forward() {
        // One hidden unit: h = silu(w·[x, sin(2πt), cos(2πt)] + b), v = u h + c.
        let mut cfg = VectorFieldConfig::new(2);
        cfg.hidden = vec![1];
        cfg.time_embed_dim = 2;
        let mut field = VectorField::new(cfg, &mut seeded_rng(0)).unwrap();
        field.layers_mut()[0].weight.value = array![[1.0], [-0.5], [0.0], [2.0]];
        field.layers_mut()[0].bias.as_mut().unwrap().value = array![[0.25]];
        field.layers_mut()[1].weight.value = array![[3.0, -1.0]];
        field.layers_mut()[1].bias.as_mut().unwrap().value = array![[0.1, 0.2]];

        let x = array![[0.6, 0.8]];
        let v = field.forward(x.view(), &[0.0], None).unwrap();
        // pre = 0.6 - 0.4 + 0*0 + 2*1 + 0.25 = 2.45
        let pre: f64 = 2.45;
        let h = pre / (1.0 + (-pre).exp());
        assert!((v[[0, 0]] - (3.0 * h + 0.1)).abs() < 1e-14);
        assert!((v[[0, 1]] - (-h + 0.2)).abs() < 1e-14);
    }

    #[test]
    fn backward_requires_forward() {
        let mut field = small(0, vec![4]);
        let err = field.backward(Array2::zeros((1, 2)).view()).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients_and_doubling_doubles() {
        let mut field = small(3, vec![6, 5]);
        for p in field.layers_mut().last_mut().unwrap().weight.value.iter_mut() {
            *p = 0.2;
        }
        let x = array![[0.1, -0.4], [1.2, 0.3]];
        let c = array![[0.5, 0.0, -1.0], [0.2, 0.2, 0.2]];
        let t = [0.2, 0.7];

        field.forward_train(x.view(), &t, Some(c.view())).unwrap();
        field.backward(Array2::zeros((2, 2)).view()).unwrap();
        let mut all_zero = true;
        field.visit_params(&mut |_, p| all_zero &= p.grad.iter().all(|&g| g == 0.0));
        assert!(all_zero);

        let upstream = array![[0.3, -1.0], [0.7, 0.2]];
        field.zero_grad();
        field.forward_train(x.view(), &t, Some(c.view())).unwrap();
        field.backward(upstream.view()).unwrap();
        let mut single = Vec::new();
        field.visit_params(&mut |_, p| single.push(p.grad.clone()));

        field.zero_grad();
        field.forward_train(x.view(), &t, Some(c.view())).unwrap();
        field.backward((&upstream * 2.0).view()).unwrap();
        let mut idx = 0;
        field.visit_params(&mut |_, p| {
            for (a, b) in p.grad.iter().zip(single[idx].iter()) {
                assert!((a - 2.0 * b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
            idx += 1;
        });
    }

    #[test]
    fn condition_shape_is_checked() {
        let field = small(3, vec![4]);
        let x = array![[0.0, 0.0]];
        assert!(field.forward(x.view(), &[0.5], None).is_err());
        let c = Array2::zeros((1, 2));
        assert!(matches!(
            field.forward(x.view(), &[0.5], Some(c.view())),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn parameter_count_sums_tensor_sizes() {
        let field = small(3, vec![6, 5]);
        // input 2 + 4 + 3 = 9
        let expected = 9 * 6 + 6 + 6 * 5 + 5 + 5 * 2 + 2;
        assert_eq!(field.param_count(), expected);
    }
}
