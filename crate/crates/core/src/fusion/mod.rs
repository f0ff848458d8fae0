//! Condition encoder: turns (speaker vector, content sequence, pitch
//! contour) into the condition vector `c` fed to the drift network.
//!
//! Dataflow, in order:
//!
//! 1. the quantized pitch contour is projected to `d_model` channels;
//! 2. the speaker vector, as a length-1 query, cross-attends to the content
//!    sequence and, in a parallel branch, to the projected pitch;
//! 3. the two attended speaker rows are merged by a sigmoid gate;
//! 4. the merged row is prepended to `content + pitch` and the sequence is
//!    refined by a shared residual self-attention block, `n_self_attn_iters`
//!    times;
//! 5. residual multi-head self-attention, mean-pool over positions, and a
//!    linear map to `cond_dim`.
//!
//! No positional encodings are used, so every sequence stage is
//! permutation-equivariant.

mod attention;
mod io;
mod layers;
mod quantize;

pub use attention::{
    scaled_dot_attention, scaled_dot_attention_backward, softmax_rows, Attention, AttentionCache,
    CrossAttention, MultiHeadAttention, SelfAttentionRefine,
};
pub use io::{format_bundle, parse_bundle, read_bundle, write_bundle};
pub use layers::{GateCache, GatedFusion, PitchConv};
pub use quantize::{vq_quantize, Codebook};

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::nn::{Linear, Param, Parameterized};
use crate::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_self_attn_iters: usize,
    pub codebook_size: usize,
    pub cond_dim: usize,
}

impl Default for FusionConfig {
    /// Full-size encoder: width 256, 8 heads of 32, 128-wide output.
    fn default() -> Self {
        Self {
            d_model: 256,
            n_heads: 8,
            head_dim: 32,
            n_self_attn_iters: 2,
            codebook_size: 64,
            cond_dim: 128,
        }
    }
}

impl FusionConfig {
    /// Narrow encoder for desk-scale experiments and tests.
    pub fn small(d_model: usize, n_heads: usize, cond_dim: usize) -> Self {
        Self {
            d_model,
            n_heads,
            head_dim: d_model / n_heads.max(1),
            cond_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "d_model {} must equal n_heads {} x head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.n_self_attn_iters == 0 {
            return Err(Error::Config("n_self_attn_iters must be >= 1".into()));
        }
        if self.codebook_size == 0 || self.cond_dim == 0 {
            return Err(Error::Config(
                "codebook_size and cond_dim must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Raw conditioning factors for one utterance plus, once computed, the
/// fused vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub speaker: Array1<f64>,
    /// `L x d_model`.
    pub content: Array2<f64>,
    /// Normalized log-F0, length `L`.
    pub pitch_raw: Array1<f64>,
    /// Codebook indices of `pitch_raw`; filled on demand when absent.
    pub pitch_quantized: Option<Vec<usize>>,
    pub fused: Option<Array1<f64>>,
}

impl ConditionBundle {
    pub fn new(speaker: Array1<f64>, content: Array2<f64>, pitch_raw: Array1<f64>) -> Self {
        Self {
            speaker,
            content,
            pitch_raw,
            pitch_quantized: None,
            fused: None,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.content.nrows()
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        let len = self.content.nrows();
        if len == 0 {
            return Err(Error::EmptySequence("condition content".into()));
        }
        if self.speaker.len() != d_model || self.content.ncols() != d_model {
            return Err(Error::Dimension(format!(
                "bundle widths speaker {} / content {} do not match d_model {d_model}",
                self.speaker.len(),
                self.content.ncols()
            )));
        }
        if self.pitch_raw.len() != len {
            return Err(Error::Dimension(format!(
                "pitch length {} != content length {len}",
                self.pitch_raw.len()
            )));
        }
        if let Some(q) = &self.pitch_quantized {
            if q.len() != len {
                return Err(Error::Dimension(format!(
                    "quantized pitch length {} != content length {len}",
                    q.len()
                )));
            }
        }
        let finite = self.speaker.iter().all(|v| v.is_finite())
            && self.content.iter().all(|v| v.is_finite())
            && self.pitch_raw.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("condition bundle has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn quantize(&mut self, codebook: &Codebook) {
        let (idx, _) = vq_quantize(&self.pitch_raw.to_vec(), codebook);
        self.pitch_quantized = Some(idx);
    }
}

/// Intermediate values of one bundle's forward pass, consumed by
/// [`FusionEncoder::backward`].
#[derive(Debug, Clone)]
pub struct FusionTrace {
    pitch: Array1<f64>,
    cross_content: AttentionCache,
    cross_pitch: AttentionCache,
    gate: GateCache,
    refine: Vec<AttentionCache>,
    mha: AttentionCache,
    pooled: Array2<f64>,
    seq_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionEncoder {
    config: FusionConfig,
    codebook: Codebook,
    pub pitch: PitchConv,
    pub cross_content: CrossAttention,
    pub cross_pitch: CrossAttention,
    pub gate: GatedFusion,
    pub refine: SelfAttentionRefine,
    pub mha: MultiHeadAttention,
    pub output: Linear,
}

impl FusionEncoder {
    pub fn new(config: FusionConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            codebook: Codebook::pitch_default(config.codebook_size)?,
            pitch: PitchConv::new(d, rng),
            cross_content: CrossAttention::new(d, rng)?,
            cross_pitch: CrossAttention::new(d, rng)?,
            gate: GatedFusion::new(d, rng),
            refine: SelfAttentionRefine::new(d, rng)?,
            mha: MultiHeadAttention::new(d, config.n_heads, rng)?,
            output: Linear::new(d, config.cond_dim, true, rng),
            config,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    /// Quantized pitch values for a bundle, computing indices if needed.
    fn quantized_pitch(&self, bundle: &ConditionBundle) -> Result<Array1<f64>> {
        match &bundle.pitch_quantized {
            Some(idx) => idx
                .iter()
                .map(|&i| {
                    self.codebook.value(i).ok_or_else(|| {
                        Error::Config(format!(
                            "pitch code {i} outside codebook of {}",
                            self.codebook.len()
                        ))
                    })
                })
                .collect(),
            None => Ok(bundle
                .pitch_raw
                .iter()
                .map(|&p| self.codebook.entries()[self.codebook.nearest(p)])
                .collect()),
        }
    }

    pub fn forward(&self, bundle: &ConditionBundle) -> Result<(Array1<f64>, FusionTrace)> {
        bundle.validate(self.config.d_model)?;
        let pitch = self.quantized_pitch(bundle)?;
        let len = bundle.seq_len();
        let projected = self.pitch.forward(pitch.view())?;
        let speaker = bundle.speaker.view().insert_axis(Axis(0));

        let (a, cross_content) = self
            .cross_content
            .forward(speaker, bundle.content.view())?;
        let (b, cross_pitch) = self.cross_pitch.forward(speaker, projected.view())?;
        let (merged, gate) = self.gate.forward(a.view(), b.view())?;

        let body = &bundle.content + &projected;
        let seq = concatenate(Axis(0), &[merged.view(), body.view()]).expect("equal widths");
        let (refined, refine) = self
            .refine
            .forward(seq.view(), self.config.n_self_attn_iters)?;
        let (attended, mha) = self
            .mha
            .forward(refined.view(), refined.view(), refined.view())?;
        let mixed = refined + attended;
        let pooled = mixed
            .mean_axis(Axis(0))
            .expect("sequence is non-empty")
            .insert_axis(Axis(0));
        let c = self.output.forward(pooled.view()).row(0).to_owned();
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("fused condition is not finite".into()));
        }
        Ok((
            c,
            FusionTrace {
                pitch,
                cross_content,
                cross_pitch,
                gate,
                refine,
                mha,
                pooled,
                seq_len: len,
            },
        ))
    }

    pub fn fuse(&self, bundle: &ConditionBundle) -> Result<Array1<f64>> {
        self.forward(bundle).map(|(c, _)| c)
    }

    /// Fuses and stores the result in `bundle.fused`.
    pub fn fuse_into(&self, bundle: &mut ConditionBundle) -> Result<()> {
        if bundle.pitch_quantized.is_none() {
            bundle.quantize(&self.codebook);
        }
        bundle.fused = Some(self.fuse(bundle)?);
        Ok(())
    }

    /// Fused vectors of many bundles as rows.
    pub fn fuse_all(&self, bundles: &[ConditionBundle]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((bundles.len(), self.config.cond_dim));
        for (i, b) in bundles.iter().enumerate() {
            out.row_mut(i).assign(&self.fuse(b)?);
        }
        Ok(out)
    }

    /// Accumulates parameter gradients for `dL/dc`.
    pub fn backward(&mut self, trace: &FusionTrace, d_c: ArrayView1<'_, f64>) -> Result<()> {
        if d_c.len() != self.config.cond_dim {
            return Err(Error::Dimension(format!(
                "condition gradient has {} entries, expected {}",
                d_c.len(),
                self.config.cond_dim
            )));
        }
        let d_pooled = self
            .output
            .backward(trace.pooled.view(), d_c.insert_axis(Axis(0)));
        let rows = trace.seq_len + 1;
        let d_mixed = Array2::from_shape_fn((rows, self.config.d_model), |(_, c)| {
            d_pooled[[0, c]] / rows as f64
        });
        let (dq, dk, dv) = self.mha.backward(&trace.mha, d_mixed.view());
        let d_refined = d_mixed + dq + dk + dv;
        let d_seq = self.refine.backward(&trace.refine, d_refined.view());

        let d_merged = d_seq.slice(s![0..1, ..]);
        let mut d_projected = d_seq.slice(s![1.., ..]).to_owned();
        let (da, db) = self.gate.backward(&trace.gate, d_merged);
        let (_, d_pitch_branch) = self.cross_pitch.backward(&trace.cross_pitch, db.view());
        d_projected += &d_pitch_branch;
        self.cross_content.backward(&trace.cross_content, da.view());
        self.pitch.backward(trace.pitch.view(), d_projected.view());
        Ok(())
    }
}

impl Parameterized for FusionEncoder {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("pitch.weight", &self.pitch.weight);
        f("pitch.bias", &self.pitch.bias);
        self.cross_content.attn.visit("cross_content", f);
        self.cross_pitch.attn.visit("cross_pitch", f);
        self.gate.gate.visit("gate", f);
        self.refine.attn.visit("refine", f);
        self.mha.attn.visit("mha", f);
        self.output.visit("output", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("pitch.weight", &mut self.pitch.weight);
        f("pitch.bias", &mut self.pitch.bias);
        self.cross_content.attn.visit_mut("cross_content", f);
        self.cross_pitch.attn.visit_mut("cross_pitch", f);
        self.gate.gate.visit_mut("gate", f);
        self.refine.attn.visit_mut("refine", f);
        self.mha.attn.visit_mut("mha", f);
        self.output.visit_mut("output", f);
    }
}
