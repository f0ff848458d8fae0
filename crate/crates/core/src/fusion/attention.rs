//! Scaled dot-product attention and the three attention blocks the fusion
//! encoder is assembled from, each with an explicit backward pass.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::{Linear, Param};
use crate::Rng;

/// Sum whose result depends only on the multiset of terms, not their order.
fn order_free_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// Row-wise softmax with max subtraction. Normalizers are summed in sorted
/// order so permuting a row permutes the result exactly.
pub fn softmax_rows(scores: &mut Array2<f64>) {
    let mut buf = Vec::with_capacity(scores.ncols());
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        buf.clear();
        buf.extend(row.iter().copied());
        let sum = order_free_sum(&mut buf);
        row.mapv_inplace(|v| v / sum);
    }
}

/// `softmax(Q_h K_hᵀ / √d_h) V_h` for each head `h` over column blocks,
/// heads concatenated back in order. Returns the output and the per-head
/// attention weights (`Lq x Lk` each).
///
/// Reductions over the key axis are order-free, which makes the result
/// exactly invariant to key/value row order.
pub fn scaled_dot_attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    n_heads: usize,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let d = q.ncols();
    if k.nrows() == 0 {
        return Err(Error::EmptySequence("attention keys".into()));
    }
    if q.nrows() == 0 {
        return Err(Error::EmptySequence("attention queries".into()));
    }
    if k.ncols() != d || v.ncols() != d || k.nrows() != v.nrows() {
        return Err(Error::Dimension(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::Config(format!(
            "width {d} is not divisible into {n_heads} heads"
        )));
    }
    let (lq, lk) = (q.nrows(), k.nrows());
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Array2::zeros((lq, d));
    let mut weights = Vec::with_capacity(n_heads);
    let mut terms = Vec::with_capacity(lk);
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        let mut scores = Array2::zeros((lq, lk));
        for i in 0..lq {
            for j in 0..lk {
                let dot: f64 = cols.clone().map(|c| q[[i, c]] * k[[j, c]]).sum();
                scores[[i, j]] = dot * scale;
            }
        }
        softmax_rows(&mut scores);
        for i in 0..lq {
            for c in cols.clone() {
                terms.clear();
                terms.extend((0..lk).map(|j| scores[[i, j]] * v[[j, c]]));
                out[[i, c]] = order_free_sum(&mut terms);
            }
        }
        weights.push(scores);
    }
    Ok((out, weights))
}

/// Gradients of [`scaled_dot_attention`] with respect to `q`, `k`, `v`.
pub fn scaled_dot_attention_backward(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    weights: &[Array2<f64>],
    d_out: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let n_heads = weights.len();
    let d = q.ncols();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for (h, a) in weights.iter().enumerate() {
        let cols = s![.., h * hd..(h + 1) * hd];
        let d_head = d_out.slice(cols);
        dv.slice_mut(cols).assign(&a.t().dot(&d_head));
        let da = d_head.dot(&v.slice(cols).t());
        // softmax Jacobian: dS = A ⊙ (dA − rowsum(dA ⊙ A))
        let inner = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = a * &(&da - &inner) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&q.slice(cols)));
    }
    (dq, dk, dv)
}

/// Projected attention `Attn(q Wq, k Wk, v Wv)`, optionally followed by an
/// output projection. Projections carry no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Option<Linear>,
    pub n_heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q_in: Array2<f64>,
    k_in: Array2<f64>,
    v_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    weights: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl AttentionCache {
    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }
}

impl Attention {
    pub fn new(
        d_model: usize,
        n_heads: usize,
        output_projection: bool,
        value_gain: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible into {n_heads} heads"
            )));
        }
        Ok(Self {
            wq: Linear::new(d_model, d_model, false, rng),
            wk: Linear::new(d_model, d_model, false, rng),
            wv: Linear::scaled(d_model, d_model, false, value_gain, rng),
            wo: output_projection.then(|| Linear::new(d_model, d_model, false, rng)),
            n_heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.input_dim()
    }

    pub fn forward(
        &self,
        q_in: ArrayView2<'_, f64>,
        k_in: ArrayView2<'_, f64>,
        v_in: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, AttentionCache)> {
        let d = self.d_model();
        for (name, x) in [("query", &q_in), ("key", &k_in), ("value", &v_in)] {
            if x.ncols() != d {
                return Err(Error::Dimension(format!(
                    "{name} sequence width {} != d_model {d}",
                    x.ncols()
                )));
            }
        }
        let q = self.wq.forward(q_in);
        let k = self.wk.forward(k_in);
        let v = self.wv.forward(v_in);
        let (concat, weights) = scaled_dot_attention(q.view(), k.view(), v.view(), self.n_heads)?;
        let out = match &self.wo {
            Some(wo) => wo.forward(concat.view()),
            None => concat.clone(),
        };
        let cache = AttentionCache {
            q_in: q_in.to_owned(),
            k_in: k_in.to_owned(),
            v_in: v_in.to_owned(),
            q,
            k,
            v,
            weights,
            concat,
        };
        Ok((out, cache))
    }

    /// Returns `(dq_in, dk_in, dv_in)`, accumulating projection gradients.
    pub fn backward(
        &mut self,
        cache: &AttentionCache,
        d_out: ArrayView2<'_, f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let d_concat = match &mut self.wo {
            Some(wo) => wo.backward(cache.concat.view(), d_out),
            None => d_out.to_owned(),
        };
        let (dq, dk, dv) = scaled_dot_attention_backward(
            cache.q.view(),
            cache.k.view(),
            cache.v.view(),
            &cache.weights,
            d_concat.view(),
        );
        let dq_in = self.wq.backward(cache.q_in.view(), dq.view());
        let dk_in = self.wk.backward(cache.k_in.view(), dk.view());
        let dv_in = self.wv.backward(cache.v_in.view(), dv.view());
        (dq_in, dk_in, dv_in)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        if let Some(wo) = &self.wo {
            wo.visit(&format!("{prefix}.wo"), f);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        if let Some(wo) = &mut self.wo {
            wo.visit_mut(&format!("{prefix}.wo"), f);
        }
    }
}

/// Single-head cross-attention with a residual: `q + Attn(q Wq, kv Wk, kv Wv)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub attn: Attention,
}

impl CrossAttention {
    pub fn new(d_model: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(d_model, 1, false, 1.0, rng)?,
        })
    }

    pub fn forward(
        &self,
        q_seq: ArrayView2<'_, f64>,
        kv_seq: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, AttentionCache)> {
        if kv_seq.nrows() == 0 {
            return Err(Error::EmptySequence("cross-attention key/value sequence".into()));
        }
        let (attended, cache) = self.attn.forward(q_seq, kv_seq, kv_seq)?;
        Ok((&q_seq + &attended, cache))
    }

    /// Returns `(d_q_seq, d_kv_seq)`.
    pub fn backward(
        &mut self,
        cache: &AttentionCache,
        d_out: ArrayView2<'_, f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let (dq, dk, dv) = self.attn.backward(cache, d_out);
        (dq + d_out, dk + &dv)
    }
}

/// One residual self-attention block applied repeatedly with shared weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionRefine {
    pub attn: Attention,
}

impl SelfAttentionRefine {
    pub fn new(d_model: usize, rng: &mut Rng) -> Result<Self> {
        // Damped value projection keeps repeated residual updates bounded.
        Ok(Self {
            attn: Attention::new(d_model, 1, false, 0.5, rng)?,
        })
    }

    pub fn forward(
        &self,
        x: ArrayView2<'_, f64>,
        n_iters: usize,
    ) -> Result<(Array2<f64>, Vec<AttentionCache>)> {
        let mut h = x.to_owned();
        let mut caches = Vec::with_capacity(n_iters);
        for _ in 0..n_iters {
            let (update, cache) = self.attn.forward(h.view(), h.view(), h.view())?;
            h += &update;
            caches.push(cache);
        }
        Ok((h, caches))
    }

    pub fn backward(&mut self, caches: &[AttentionCache], d_out: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut grad = d_out.to_owned();
        for cache in caches.iter().rev() {
            let (dq, dk, dv) = self.attn.backward(cache, grad.view());
            grad = grad + dq + dk + dv;
        }
        grad
    }
}

/// Multi-head attention with an output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub attn: Attention,
}

impl MultiHeadAttention {
    pub fn new(d_model: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(d_model, n_heads, true, 1.0, rng)?,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.attn.n_heads
    }

    pub fn forward(
        &self,
        q: ArrayView2<'_, f64>,
        k: ArrayView2<'_, f64>,
        v: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, AttentionCache)> {
        self.attn.forward(q, k, v)
    }

    pub fn backward(
        &mut self,
        cache: &AttentionCache,
        d_out: ArrayView2<'_, f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        self.attn.backward(cache, d_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use ndarray::{array, Array2};
    use rand::Rng as _;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let mut rng = seeded_rng(11);
        let (q, k, v) = (random(5, 8, &mut rng), random(7, 8, &mut rng), random(7, 8, &mut rng));
        let (_, weights) = scaled_dot_attention(q.view(), k.view(), v.view(), 4).unwrap();
        assert_eq!(weights.len(), 4);
        for w in &weights {
            for row in w.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_passes_value_through() {
        let mut rng = seeded_rng(2);
        let layer = CrossAttention::new(6, &mut rng).unwrap();
        let q = random(3, 6, &mut rng);
        let kv = random(1, 6, &mut rng);
        let (out, cache) = layer.forward(q.view(), kv.view()).unwrap();
        assert!(cache.weights()[0].iter().all(|&w| w == 1.0));
        let value = layer.attn.wv.forward(kv.view());
        for i in 0..3 {
            for j in 0..6 {
                assert!((out[[i, j]] - (q[[i, j]] + value[[0, j]])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cross_attention_rejects_empty_keys() {
        let mut rng = seeded_rng(2);
        let layer = CrossAttention::new(4, &mut rng).unwrap();
        let q = random(1, 4, &mut rng);
        let err = layer.forward(q.view(), Array2::zeros((0, 4)).view()).unwrap_err();
        assert!(matches!(err, Error::EmptySequence(_)));
    }

    #[test]
    fn head_divisibility_is_enforced() {
        let mut rng = seeded_rng(0);
        assert!(matches!(
            MultiHeadAttention::new(10, 3, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn one_head_equals_plain_attention() {
        let mut rng = seeded_rng(5);
        let mha = MultiHeadAttention::new(4, 1, &mut rng).unwrap();
        let x = random(3, 4, &mut rng);
        let (out, _) = mha.forward(x.view(), x.view(), x.view()).unwrap();

        let q = x.dot(&mha.attn.wq.weight.value);
        let k = x.dot(&mha.attn.wk.weight.value);
        let v = x.dot(&mha.attn.wv.weight.value);
        let mut scores = q.dot(&k.t()) / 2.0;
        softmax_rows(&mut scores);
        let expected = scores.dot(&v).dot(&mha.attn.wo.as_ref().unwrap().weight.value);
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn two_heads_hand_computation() {
        // d_model = 4, head_dim = 2, identity projections.
        let mut rng = seeded_rng(0);
        let mut mha = MultiHeadAttention::new(4, 2, &mut rng).unwrap();
        let eye = Array2::eye(4);
        mha.attn.wq.weight.value = eye.clone();
        mha.attn.wk.weight.value = eye.clone();
        mha.attn.wv.weight.value = eye.clone();
        mha.attn.wo.as_mut().unwrap().weight.value = eye;

        let x = array![[1.0, 0.0, 0.0, 2.0], [0.0, 1.0, 1.0, 0.0]];
        let (out, _) = mha.forward(x.view(), x.view(), x.view()).unwrap();

        let r = 1.0 / 2f64.sqrt();
        // Head 0 uses columns 0..2: keys (1,0), (0,1).
        // row 0 scores (1, 0)·r, row 1 scores (0, 1)·r.
        let w_hi = (r).exp() / ((r).exp() + 1.0);
        let w_lo = 1.0 - w_hi;
        // Head 1 uses columns 2..4: keys (0,2), (1,0).
        // row 0 query (0,2): scores (4, 0)·r; row 1 query (1,0): scores (0, 1)·r.
        let a0 = (4.0 * r).exp() / ((4.0 * r).exp() + 1.0);
        let expected = array![
            [w_hi * 1.0, w_lo * 1.0, a0 * 0.0 + (1.0 - a0) * 1.0, a0 * 2.0],
            [w_lo * 1.0, w_hi * 1.0, w_lo * 0.0 + w_hi * 1.0, w_lo * 2.0]
        ];
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-14, "{out:?} vs {expected:?}");
        }
    }

    #[test]
    fn cross_attention_is_key_permutation_invariant() {
        let mut rng = seeded_rng(9);
        let layer = CrossAttention::new(8, &mut rng).unwrap();
        let q = random(2, 8, &mut rng);
        let kv = random(6, 8, &mut rng);
        let (base, _) = layer.forward(q.view(), kv.view()).unwrap();
        for _ in 0..5 {
            let mut order: Vec<usize> = (0..6).collect();
            for i in (1..6).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let permuted = kv.select(Axis(0), &order);
            let (out, _) = layer.forward(q.view(), permuted.view()).unwrap();
            for (a, b) in out.iter().zip(base.iter()) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn refine_zero_iterations_is_identity_and_stays_finite() {
        let mut rng = seeded_rng(4);
        let block = SelfAttentionRefine::new(16, &mut rng).unwrap();
        let x = random(9, 16, &mut rng);
        let (same, caches) = block.forward(x.view(), 0).unwrap();
        assert_eq!(same, x);
        assert!(caches.is_empty());
        let (deep, _) = block.forward(x.view(), 8).unwrap();
        assert!(deep.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn refine_is_permutation_equivariant() {
        let mut rng = seeded_rng(8);
        let block = SelfAttentionRefine::new(8, &mut rng).unwrap();
        let x = random(5, 8, &mut rng);
        let order = [3, 0, 4, 1, 2];
        let (out, _) = block.forward(x.view(), 3).unwrap();
        let (out_perm, _) = block.forward(x.select(Axis(0), &order).view(), 3).unwrap();
        assert_eq!(out_perm, out.select(Axis(0), &order));
    }
}
