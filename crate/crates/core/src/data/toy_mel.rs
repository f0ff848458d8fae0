//! Synthetic "mel patches" with a known generative structure.
//!
//! A patch is one `D`-band column averaged over an utterance of `L` frames:
//!
//! ```text
//! patch[b] = Σ_e a_e(speaker) φ_e(b)
//!          + (1/L) Σ_j [ bump(b; pitch_j) + offset(code_j, b) ]
//!          + noise_std · ε_b
//! ```
//!
//! with `φ_e(b) = cos(π e (b + ½) / D)`. Only the first term depends on
//! the speaker, so a patch generated for `(speaker', content, pitch)` can be
//! attributed to a speaker by subtracting the known second term and
//! regressing the remainder on the basis.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::DataSource;
use crate::error::{Error, Result};
use crate::flow::{PairBatch, PairSource};
use crate::fusion::ConditionBundle;
use crate::model::CondBatch;
use crate::solvers::{gaussian_noise, ConditionSource};
use crate::{seeded_rng, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyMelConfig {
    /// Patch width `D`.
    pub bands: usize,
    pub n_speakers: usize,
    /// Number of cosine basis terms in a speaker envelope.
    pub envelope_terms: usize,
    /// Frames per utterance `L`.
    pub seq_len: usize,
    /// Size of the discrete content alphabet.
    pub content_codes: usize,
    /// Width of speaker and content embeddings; must equal the encoder's.
    pub d_model: usize,
    pub noise_std: f64,
    /// Std of a per-utterance shift of the pitch contour around the
    /// speaker's base pitch. Nonzero spread makes speakers' pitch ranges
    /// overlap, so pitch alone does not identify the speaker.
    pub pitch_spread: f64,
    /// Training rows drawn per utterance, sharing one encoder pass.
    pub rows_per_bundle: usize,
    /// Seeds the speaker specs and embedding tables.
    pub seed: u64,
}

impl Default for ToyMelConfig {
    fn default() -> Self {
        Self {
            bands: 16,
            n_speakers: 4,
            envelope_terms: 4,
            seq_len: 8,
            content_codes: 8,
            d_model: 16,
            noise_std: 0.05,
            pitch_spread: 1.0,
            rows_per_bundle: 8,
            seed: 0,
        }
    }
}

impl ToyMelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bands", self.bands),
            ("n_speakers", self.n_speakers),
            ("envelope_terms", self.envelope_terms),
            ("seq_len", self.seq_len),
            ("content_codes", self.content_codes),
            ("d_model", self.d_model),
            ("rows_per_bundle", self.rows_per_bundle),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("toy mel {name} must be >= 1")));
        }
        if self.bands > 80 {
            return Err(Error::Config("toy mel supports at most 80 bands".into()));
        }
        if self.envelope_terms > self.bands {
            return Err(Error::Config(
                "envelope_terms cannot exceed the number of bands".into(),
            ));
        }
        if self.n_speakers < 2 {
            return Err(Error::Config("toy mel needs at least 2 speakers".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        if !(self.pitch_spread >= 0.0 && self.pitch_spread.is_finite()) {
            return Err(Error::Config("pitch_spread must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpeakerSpec {
    /// Envelope coefficients `a_e`.
    pub envelope: Vec<f64>,
    /// Centre of the speaker's pitch contours.
    pub base_pitch: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyUtterance {
    pub speaker: usize,
    pub content: Vec<usize>,
    pub pitch: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyMel {
    config: ToyMelConfig,
    speakers: Vec<ToySpeakerSpec>,
    /// `D x E`.
    basis: Array2<f64>,
    /// `E x d_model`: envelope coefficients to speaker embedding.
    speaker_proj: Array2<f64>,
    /// `content_codes x d_model`.
    content_table: Array2<f64>,
    /// `content_codes x D`.
    content_offsets: Array2<f64>,
}

const BUMP_WIDTH: f64 = 1.0;

impl ToyMel {
    pub fn new(config: ToyMelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let (d, e, k) = (config.bands, config.envelope_terms, config.n_speakers);
        let speakers = (0..k)
            .map(|_| ToySpeakerSpec {
                envelope: (0..e).map(|_| StandardNormal.sample(&mut rng)).collect(),
                base_pitch: rng.random_range(-1.5..1.5),
            })
            .collect();
        let basis = Array2::from_shape_fn((d, e), |(b, j)| {
            (PI * j as f64 * (b as f64 + 0.5) / d as f64).cos()
        });
        let scale = 1.0 / (e as f64).sqrt();
        let speaker_proj = Array2::from_shape_simple_fn((e, config.d_model), || {
            scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)
        });
        let content_table = Array2::from_shape_simple_fn((config.content_codes, config.d_model), || {
            StandardNormal.sample(&mut rng)
        });
        let content_offsets = Array2::from_shape_fn((config.content_codes, d), |(c, b)| {
            0.5 * (PI * (c + 1) as f64 * (b as f64 + 0.5) / d as f64 + c as f64).sin()
        });
        Ok(Self {
            config,
            speakers,
            basis,
            speaker_proj,
            content_table,
            content_offsets,
        })
    }

    pub fn config(&self) -> &ToyMelConfig {
        &self.config
    }

    pub fn speakers(&self) -> &[ToySpeakerSpec] {
        &self.speakers
    }

    /// Replaces a speaker's spec, e.g. to probe what depends on it.
    pub fn set_speaker(&mut self, index: usize, spec: ToySpeakerSpec) -> Result<()> {
        if spec.envelope.len() != self.config.envelope_terms {
            return Err(Error::Dimension(format!(
                "envelope has {} terms, expected {}",
                spec.envelope.len(),
                self.config.envelope_terms
            )));
        }
        let slot = self
            .speakers
            .get_mut(index)
            .ok_or_else(|| Error::Config(format!("no speaker {index}")))?;
        *slot = spec;
        Ok(())
    }

    pub fn envelope(&self, speaker: usize) -> Array1<f64> {
        self.basis
            .dot(&Array1::from(self.speakers[speaker].envelope.clone()))
    }

    fn bump(&self, band: usize, pitch: f64) -> f64 {
        let centre = (self.config.bands - 1) as f64 * (pitch + 3.0) / 6.0;
        let z = (band as f64 - centre) / BUMP_WIDTH;
        (-0.5 * z * z).exp()
    }

    /// The speaker-independent part of a patch.
    pub fn known_component(&self, content: &[usize], pitch: &[f64]) -> Array1<f64> {
        let d = self.config.bands;
        let len = content.len() as f64;
        let mut out = Array1::zeros(d);
        for (&code, &p) in content.iter().zip(pitch) {
            for b in 0..d {
                out[b] += self.bump(b, p) + self.content_offsets[[code, b]];
            }
        }
        out / len
    }

    /// Noise-free patch.
    pub fn clean_patch(&self, utt: &ToyUtterance) -> Array1<f64> {
        self.envelope(utt.speaker) + self.known_component(&utt.content, &utt.pitch)
    }

    pub fn draw_utterance(&self, speaker: usize, rng: &mut Rng) -> ToyUtterance {
        let len = self.config.seq_len;
        let content = (0..len)
            .map(|_| rng.random_range(0..self.config.content_codes))
            .collect();
        let freq = rng.random_range(0.5..1.5);
        let phase = rng.random_range(0.0..2.0 * PI);
        let shift: f64 = Distribution::<f64>::sample(&StandardNormal, rng);
        let base = self.speakers[speaker].base_pitch + self.config.pitch_spread * shift;
        let pitch = (0..len)
            .map(|j| {
                let p = base + 0.5 * (2.0 * PI * freq * j as f64 / len as f64 + phase).sin();
                p.clamp(-3.0, 3.0)
            })
            .collect();
        ToyUtterance {
            speaker,
            content,
            pitch,
        }
    }

    /// Noisy patch for an utterance.
    pub fn observe(&self, utt: &ToyUtterance, rng: &mut Rng) -> Array1<f64> {
        let sigma = self.config.noise_std;
        self.clean_patch(utt)
            .mapv(|v| v + sigma * Distribution::<f64>::sample(&StandardNormal, rng))
    }

    /// Encoder input for speaker identity plus content/pitch of an utterance.
    pub fn bundle(&self, speaker: usize, content: &[usize], pitch: &[f64]) -> ConditionBundle {
        let coefs = Array1::from(self.speakers[speaker].envelope.clone());
        let spk = coefs.dot(&self.speaker_proj);
        let content = self.content_table.select(ndarray::Axis(0), content);
        ConditionBundle::new(spk, content, Array1::from(pitch.to_vec()))
    }

    pub fn utterance_bundle(&self, utt: &ToyUtterance) -> ConditionBundle {
        self.bundle(utt.speaker, &utt.content, &utt.pitch)
    }

    /// Least-squares envelope coefficients of a patch, after removing the
    /// known content and pitch contribution.
    pub fn regress_envelope(
        &self,
        patch: ArrayView1<'_, f64>,
        content: &[usize],
        pitch: &[f64],
    ) -> Result<Vec<f64>> {
        if patch.len() != self.config.bands {
            return Err(Error::Dimension(format!(
                "patch has {} bands, expected {}",
                patch.len(),
                self.config.bands
            )));
        }
        let residual = &patch - &self.known_component(content, pitch);
        let gram = self.basis.t().dot(&self.basis);
        let rhs = self.basis.t().dot(&residual);
        solve_spd(gram, rhs)
    }

    /// Speaker whose envelope coefficients are nearest in Euclidean norm.
    pub fn nearest_speaker(&self, coefs: &[f64]) -> usize {
        let dist = |s: &ToySpeakerSpec| -> f64 {
            s.envelope
                .iter()
                .zip(coefs)
                .map(|(a, b)| (a - b).powi(2))
                .sum()
        };
        (0..self.speakers.len())
            .min_by(|&a, &b| dist(&self.speakers[a]).total_cmp(&dist(&self.speakers[b])))
            .expect("at least two speakers")
    }

    /// `n` noisy patches with their bundles, one utterance per row.
    pub fn draw_conditioned(
        &self,
        n: usize,
        rng: &mut Rng,
    ) -> (Array2<f64>, Vec<ToyUtterance>, Vec<ConditionBundle>) {
        let mut patches = Array2::zeros((n, self.config.bands));
        let mut utts = Vec::with_capacity(n);
        let mut bundles = Vec::with_capacity(n);
        for i in 0..n {
            let speaker = rng.random_range(0..self.config.n_speakers);
            let utt = self.draw_utterance(speaker, rng);
            patches.row_mut(i).assign(&self.observe(&utt, rng));
            bundles.push(self.utterance_bundle(&utt));
            utts.push(utt);
        }
        (patches, utts, bundles)
    }
}

/// Solves `A x = b` for a small symmetric positive definite `A` (Cholesky).
fn solve_spd(a: Array2<f64>, b: Array1<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            if i == j {
                let d = a[[i, i]] - s;
                if d <= 0.0 {
                    return Err(Error::Numeric("basis Gram matrix is not positive definite".into()));
                }
                l[[i, i]] = d.sqrt();
            } else {
                l[[i, j]] = (a[[i, j]] - s) / l[[j, j]];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[[i, k]] * y[k]).sum();
        y[i] = (b[i] - s) / l[[i, i]];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[[k, i]] * x[k]).sum();
        x[i] = (y[i] - s) / l[[i, i]];
    }
    Ok(x)
}

impl ConditionSource for ToyMel {
    fn draw_conditions(&self, n: usize, rng: &mut Rng) -> Result<Vec<ConditionBundle>> {
        Ok((0..n)
            .map(|_| {
                let speaker = rng.random_range(0..self.config.n_speakers);
                self.utterance_bundle(&self.draw_utterance(speaker, rng))
            })
            .collect())
    }
}

impl DataSource for ToyMel {
    fn dim(&self) -> usize {
        self.config.bands
    }

    fn sample(&self, n: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        Ok(self.draw_conditioned(n, rng).0)
    }

    fn name(&self) -> String {
        "toy_mel".into()
    }
}

impl PairSource for ToyMel {
    fn dim(&self) -> usize {
        self.config.bands
    }

    /// Noise first, then `ceil(n / rows_per_bundle)` utterances whose fresh
    /// noisy observations fill consecutive rows.
    fn draw(&self, n: usize, rng: &mut Rng) -> Result<PairBatch> {
        let x0 = gaussian_noise(n, self.config.bands, rng);
        let per = self.config.rows_per_bundle;
        let mut x1 = Array2::zeros((n, self.config.bands));
        let mut bundles = Vec::with_capacity(n.div_ceil(per));
        let mut rows = Vec::with_capacity(n);
        for start in (0..n).step_by(per) {
            let speaker = rng.random_range(0..self.config.n_speakers);
            let utt = self.draw_utterance(speaker, rng);
            for r in start..(start + per).min(n) {
                x1.row_mut(r).assign(&self.observe(&utt, rng));
                rows.push(bundles.len());
            }
            bundles.push(self.utterance_bundle(&utt));
        }
        Ok(PairBatch {
            x0,
            x1,
            cond: Some(CondBatch { bundles, rows }),
        })
    }

    fn is_conditional(&self) -> bool {
        true
    }

    fn describe(&self) -> String {
        "toy_mel".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ToyMel {
        ToyMel::new(ToyMelConfig::default()).unwrap()
    }

    #[test]
    fn regression_recovers_envelope_from_clean_patch() {
        let t = toy();
        let mut rng = seeded_rng(3);
        for s in 0..t.config().n_speakers {
            let utt = t.draw_utterance(s, &mut rng);
            let coefs = t
                .regress_envelope(t.clean_patch(&utt).view(), &utt.content, &utt.pitch)
                .unwrap();
            for (a, b) in coefs.iter().zip(&t.speakers()[s].envelope) {
                assert!((a - b).abs() < 1e-10);
            }
            assert_eq!(t.nearest_speaker(&coefs), s);
        }
    }

    #[test]
    fn noisy_patches_are_attributed_to_their_speaker() {
        let t = toy();
        let mut rng = seeded_rng(4);
        let (patches, utts, _) = t.draw_conditioned(400, &mut rng);
        let hits = utts
            .iter()
            .enumerate()
            .filter(|(i, u)| {
                let c = t
                    .regress_envelope(patches.row(*i), &u.content, &u.pitch)
                    .unwrap();
                t.nearest_speaker(&c) == u.speaker
            })
            .count();
        assert!(hits >= 396, "{hits}");
    }

    #[test]
    fn swapping_speaker_changes_only_the_envelope() {
        let mut t = toy();
        let utt = t.draw_utterance(0, &mut seeded_rng(5));
        let known = t.known_component(&utt.content, &utt.pitch);
        let new_env = vec![0.3, -1.0, 2.0, 0.1];
        t.set_speaker(0, ToySpeakerSpec {
            envelope: new_env.clone(),
            base_pitch: 0.0,
        })
        .unwrap();
        let after = t.clean_patch(&utt);
        let expected = t.basis.dot(&Array1::from(new_env));
        assert_eq!(t.known_component(&utt.content, &utt.pitch), known);
        for b in 0..t.config().bands {
            assert!((after[b] - known[b] - expected[b]).abs() < 1e-12);
        }
    }

    #[test]
    fn pitch_stays_in_range_and_bundles_are_valid() {
        let t = toy();
        let mut rng = seeded_rng(6);
        for s in 0..t.config().n_speakers {
            let u = t.draw_utterance(s, &mut rng);
            assert!(u.pitch.iter().all(|p| (-3.0..=3.0).contains(p)));
            t.utterance_bundle(&u).validate(t.config().d_model).unwrap();
        }
    }

    #[test]
    fn pair_batches_share_bundles() {
        let t = toy();
        let batch = t.draw(20, &mut seeded_rng(7)).unwrap();
        let cond = batch.cond.unwrap();
        assert_eq!(cond.bundles.len(), 3);
        assert_eq!(cond.rows[..9], [0, 0, 0, 0, 0, 0, 0, 0, 1]);
        assert_eq!(batch.x1.nrows(), 20);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ToyMelConfig {
            bands: 81,
            ..Default::default()
        };
        assert!(ToyMel::new(bad).is_err());
        let bad = ToyMelConfig {
            n_speakers: 1,
            ..Default::default()
        };
        assert!(ToyMel::new(bad).is_err());
    }
}
