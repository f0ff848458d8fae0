//! Binary checkpoints and `key=value` configuration files.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "RFVC"                    magic
//! u32                       format version (1)
//! u32 + bytes               metadata: UTF-8 `key=value` lines
//! u32                       tensor count
//! per tensor:
//!   u32 + bytes             name
//!   u32                     rank
//!   u64 * rank              shape
//!   f64 * prod(shape)       values, row-major
//! ```
//!
//! Model tensors are named as in [`Parameterized`] with a `model.` prefix;
//! optimizer moments, when saved, are `adam.m.<i>` and `adam.v.<i>`.
//! Nothing time-dependent is written, so saving the same state twice gives
//! identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::{FlowModel, ModelMeta};
use crate::nn::{Adam, AdamConfig, Parameterized};
use crate::vectorfield::VectorFieldConfig;
use crate::{seeded_rng, Rng};

pub const MAGIC: &[u8; 4] = b"RFVC";
pub const FORMAT_VERSION: u32 = 1;
pub const ARCHITECTURE: &str = "mlp-silu";

/// Metadata keys written by this module; free-form keys may not reuse them.
const RESERVED: &[&str] = &[
    "architecture",
    "dim",
    "hidden",
    "time_embed_dim",
    "time_scale",
    "condition",
    "fusion.d_model",
    "fusion.n_heads",
    "fusion.head_dim",
    "fusion.n_self_attn_iters",
    "fusion.codebook_size",
    "fusion.cond_dim",
    "seed",
    "rectification_round",
    "train_steps",
    "adam.learning_rate",
    "adam.beta1",
    "adam.beta2",
    "adam.eps",
    "adam.step",
];

fn metadata(model: &FlowModel, adam: Option<&Adam>) -> Result<String> {
    let cfg = model.field.config();
    let mut kv: Vec<(String, String)> = vec![
        ("architecture".into(), ARCHITECTURE.into()),
        ("dim".into(), cfg.dim.to_string()),
        ("hidden".into(), join(&cfg.hidden)),
        ("time_embed_dim".into(), cfg.time_embed_dim.to_string()),
        ("time_scale".into(), cfg.time_scale.to_string()),
    ];
    match &model.fusion {
        None => kv.push(("condition".into(), "none".into())),
        Some(f) => {
            let fc = f.config();
            kv.push(("condition".into(), "fusion".into()));
            for (k, v) in [
                ("d_model", fc.d_model),
                ("n_heads", fc.n_heads),
                ("head_dim", fc.head_dim),
                ("n_self_attn_iters", fc.n_self_attn_iters),
                ("codebook_size", fc.codebook_size),
                ("cond_dim", fc.cond_dim),
            ] {
                kv.push((format!("fusion.{k}"), v.to_string()));
            }
        }
    }
    let meta = &model.meta;
    kv.push(("seed".into(), meta.seed.to_string()));
    kv.push(("rectification_round".into(), meta.rectification_round.to_string()));
    kv.push(("train_steps".into(), meta.train_steps.to_string()));
    if let Some(a) = adam {
        kv.push(("adam.learning_rate".into(), a.config.learning_rate.to_string()));
        kv.push(("adam.beta1".into(), a.config.beta1.to_string()));
        kv.push(("adam.beta2".into(), a.config.beta2.to_string()));
        kv.push(("adam.eps".into(), a.config.eps.to_string()));
        kv.push(("adam.step".into(), a.step.to_string()));
    }
    for (k, v) in &meta.extra {
        if RESERVED.contains(&k.as_str()) {
            return Err(Error::Config(format!("metadata key {k} is reserved")));
        }
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Config(format!("metadata entry {k:?} cannot be stored")));
        }
        kv.push((k.clone(), v.clone()));
    }
    let mut text = String::new();
    for (k, v) in kv {
        text.push_str(&k);
        text.push('=');
        text.push_str(&v);
        text.push('\n');
    }
    Ok(text)
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, value: &Array2<f64>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, 2);
    for d in value.shape() {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in value.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises a model and, optionally, its optimizer state.
pub fn to_bytes(model: &FlowModel, adam: Option<&Adam>) -> Result<Vec<u8>> {
    let meta = metadata(model, adam)?;
    let mut tensors: Vec<(String, Array2<f64>)> = Vec::new();
    model.visit_params(&mut |name, p| tensors.push((format!("model.{name}"), p.value.clone())));
    if let Some(a) = adam {
        for (i, (m, v)) in a.moments.iter().enumerate() {
            tensors.push((format!("adam.m.{i}"), m.clone()));
            tensors.push((format!("adam.v.{i}"), v.clone()));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, meta.len() as u32);
    out.extend_from_slice(meta.as_bytes());
    put_u32(&mut out, tensors.len() as u32);
    for (name, value) in &tensors {
        put_tensor(&mut out, name, value);
    }
    Ok(out)
}

pub fn save_checkpoint(model: &FlowModel, adam: Option<&Adam>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model, adam)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                section,
                detail: format!(
                    "truncated: needed {n} bytes at offset {}, {} left",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }
}

fn meta_err(detail: String) -> Error {
    Error::Format {
        section: "metadata",
        detail,
    }
}

fn get<'m>(kv: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    kv.get(key)
        .map(String::as_str)
        .ok_or_else(|| meta_err(format!("missing key {key}")))
}

fn get_parsed<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = get(kv, key)?;
    raw.parse()
        .map_err(|_| meta_err(format!("bad value {raw:?} for {key}")))
}

fn parse_metadata(text: &str) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| meta_err(format!("line {} is not key=value", i + 1)))?;
        if kv.insert(k.to_string(), v.to_string()).is_some() {
            return Err(meta_err(format!("duplicate key {k}")));
        }
    }
    Ok(kv)
}

/// A checkpoint's contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: FlowModel,
    pub adam: Option<Adam>,
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "header")? != MAGIC {
        return Err(Error::Format {
            section: "header",
            detail: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32("header")?;
    if version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let meta_len = r.u32("metadata")? as usize;
    let text = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|_| meta_err("not UTF-8".into()))?;
    let kv = parse_metadata(text)?;

    let arch = get(&kv, "architecture")?;
    if arch != ARCHITECTURE {
        return Err(Error::Incompatible(format!("architecture {arch}, expected {ARCHITECTURE}")));
    }
    let hidden_raw = get(&kv, "hidden")?;
    let hidden = if hidden_raw.is_empty() {
        Vec::new()
    } else {
        hidden_raw
            .split(',')
            .map(|h| h.parse().map_err(|_| meta_err(format!("bad hidden width {h:?}"))))
            .collect::<Result<Vec<usize>>>()?
    };
    let fusion = match get(&kv, "condition")? {
        "none" => None,
        "fusion" => Some(FusionConfig {
            d_model: get_parsed(&kv, "fusion.d_model")?,
            n_heads: get_parsed(&kv, "fusion.n_heads")?,
            head_dim: get_parsed(&kv, "fusion.head_dim")?,
            n_self_attn_iters: get_parsed(&kv, "fusion.n_self_attn_iters")?,
            codebook_size: get_parsed(&kv, "fusion.codebook_size")?,
            cond_dim: get_parsed(&kv, "fusion.cond_dim")?,
        }),
        other => return Err(meta_err(format!("unknown condition mode {other:?}"))),
    };
    let field_cfg = VectorFieldConfig {
        dim: get_parsed(&kv, "dim")?,
        hidden,
        time_embed_dim: get_parsed(&kv, "time_embed_dim")?,
        time_scale: get_parsed(&kv, "time_scale")?,
        cond_dim: 0,
    };
    // Values are overwritten below; the generator only fixes shapes.
    let mut scratch: Rng = seeded_rng(0);
    let mut model = FlowModel::new(field_cfg, fusion, &mut scratch).map_err(|e| match e {
        Error::Config(m) => meta_err(m),
        other => other,
    })?;
    model.meta = ModelMeta {
        rectification_round: get_parsed(&kv, "rectification_round")?,
        train_steps: get_parsed(&kv, "train_steps")?,
        seed: get_parsed(&kv, "seed")?,
        extra: kv
            .iter()
            .filter(|(k, _)| !RESERVED.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    };

    let count = r.u32("tensors")? as usize;
    let mut tensors: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("tensors")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensors")?)
            .map_err(|_| Error::Format {
                section: "tensors",
                detail: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("tensors")?;
        if rank != 2 {
            return Err(Error::Format {
                section: "tensors",
                detail: format!("{name}: rank {rank}, expected 2"),
            });
        }
        let rows = r.u64("tensors")? as usize;
        let cols = r.u64("tensors")? as usize;
        let n = rows.checked_mul(cols).filter(|n| *n <= bytes.len() / 8).ok_or_else(|| {
            Error::Format {
                section: "tensors",
                detail: format!("{name}: implausible shape {rows}x{cols}"),
            }
        })?;
        let raw = r.take(n * 8, "tensors")?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Array2::from_shape_vec((rows, cols), values).expect("length checked");
        if tensors.insert(name.clone(), value).is_some() {
            return Err(Error::Format {
                section: "tensors",
                detail: format!("duplicate tensor {name}"),
            });
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            section: "tensors",
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }

    let mut failure = None;
    model.visit_params_mut(&mut |name, p| {
        if failure.is_some() {
            return;
        }
        let key = format!("model.{name}");
        match tensors.remove(&key) {
            None => failure = Some(format!("missing tensor {key}")),
            Some(v) if v.shape() != p.value.shape() => {
                failure = Some(format!(
                    "{key}: shape {:?}, metadata implies {:?}",
                    v.shape(),
                    p.value.shape()
                ))
            }
            Some(v) => {
                p.grad = Array2::zeros(v.raw_dim());
                p.value = v;
            }
        }
    });
    if let Some(detail) = failure {
        return Err(Error::Format {
            section: "tensors",
            detail,
        });
    }

    let adam = if kv.contains_key("adam.step") {
        let config = AdamConfig {
            learning_rate: get_parsed(&kv, "adam.learning_rate")?,
            beta1: get_parsed(&kv, "adam.beta1")?,
            beta2: get_parsed(&kv, "adam.beta2")?,
            eps: get_parsed(&kv, "adam.eps")?,
        };
        let mut adam = Adam::new(config);
        adam.step = get_parsed(&kv, "adam.step")?;
        let mut i = 0;
        while let Some(m) = tensors.remove(&format!("adam.m.{i}")) {
            let v = tensors.remove(&format!("adam.v.{i}")).ok_or_else(|| Error::Format {
                section: "adam",
                detail: format!("adam.m.{i} has no matching adam.v.{i}"),
            })?;
            adam.moments.push((m, v));
            i += 1;
        }
        Some(adam)
    } else {
        None
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format {
            section: "tensors",
            detail: format!("unexpected tensor {extra}"),
        });
    }
    Ok(Checkpoint { model, adam })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Parses `key=value` lines (`#` starts a comment line) into a map,
/// rejecting keys outside `allowed` and duplicates. Errors carry the line.
pub fn parse_key_values(text: &str, allowed: &[&str]) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("expected key=value, got {line:?}"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !allowed.contains(&k) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("unknown key {k:?}; valid keys: {}", allowed.join(", ")),
            });
        }
        if out.insert(k.to_string(), (line_no, v.to_string())).is_some() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate key {k:?}"),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    fn model(conditional: bool) -> FlowModel {
        let mut cfg = VectorFieldConfig::new(3);
        cfg.hidden = vec![8, 5];
        let fusion = conditional.then(|| FusionConfig::small(8, 2, 4));
        let mut m = FlowModel::new(cfg, fusion, &mut seeded_rng(1)).unwrap();
        // Perturb the zero-initialised output layer so it is not trivially 0.
        m.visit_params_mut(&mut |_, p: &mut Param| p.value.mapv_inplace(|v| v + 0.125));
        m.meta.seed = 42;
        m.meta.rectification_round = 2;
        m.meta.train_steps = 900;
        m.meta.extra.insert("data".into(), "two_moons".into());
        m
    }

    #[test]
    fn round_trip_is_exact_and_deterministic() {
        for conditional in [false, true] {
            let m = model(conditional);
            let a = to_bytes(&m, None).unwrap();
            assert_eq!(a, to_bytes(&m, None).unwrap());
            let back = from_bytes(&a).unwrap();
            assert_eq!(back.model, m);
            assert!(back.adam.is_none());
            assert_eq!(to_bytes(&back.model, None).unwrap(), a);
        }
    }

    #[test]
    fn optimizer_state_round_trips() {
        let m = model(false);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step = 7;
        m.visit_params(&mut |_, p| {
            adam.moments
                .push((p.value.mapv(|v| v * 0.5), p.value.mapv(|v| v * v)))
        });
        let back = from_bytes(&to_bytes(&m, Some(&adam)).unwrap()).unwrap();
        assert_eq!(back.adam.unwrap(), adam);
    }

    #[test]
    fn structured_errors() {
        let good = to_bytes(&model(false), None).unwrap();
        assert!(matches!(
            from_bytes(b"NOPE\x01\0\0\0"),
            Err(Error::Format { section: "header", .. })
        ));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(from_bytes(&v2), Err(Error::Incompatible(_))));
        for cut in [6, 20, good.len() - 3] {
            assert!(matches!(from_bytes(&good[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::Format { section: "tensors", .. })));
    }

    #[test]
    fn reserved_extra_keys_are_refused() {
        let mut m = model(false);
        m.meta.extra.insert("dim".into(), "9".into());
        assert!(matches!(to_bytes(&m, None), Err(Error::Config(_))));
    }

    #[test]
    fn key_values_report_lines() {
        let ok = parse_key_values("# c\nsteps = 10\n\nseed=1\n", &["steps", "seed"]).unwrap();
        assert_eq!(ok["steps"], (2, "10".to_string()));
        match parse_key_values("steps=1\nbogus=2\n", &["steps"]).unwrap_err() {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("bogus"));
            }
            e => panic!("{e}"),
        }
        assert!(matches!(
            parse_key_values("steps=1\nsteps=2\n", &["steps"]),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
