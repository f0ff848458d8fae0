//! Training recipes: plain `key = value` files with `#` comments.
//!
//! ```text
//! steps = 6000
//! batch_size = 256
//! learning_rate = 1e-3
//! hidden = 64,64
//! data = two_gaussians
//! ```
//!
//! `steps`, `batch_size` and `learning_rate` are required; everything else
//! has a default. A trained checkpoint keeps the resolved recipe under
//! `recipe.*` metadata keys so `reflow` can retrain with the same settings.

use std::collections::BTreeMap;
use std::str::FromStr;

use rectiflow::data::ToyMelConfig;
use rectiflow::flow::TrainConfig;
use rectiflow::fusion::FusionConfig;
use rectiflow::persistence::parse_key_values;
use rectiflow::solvers::SolverConfig;
use rectiflow::{Error, FlowModel, Result};

pub const REQUIRED_KEYS: [&str; 3] = ["steps", "batch_size", "learning_rate"];

pub const KEYS: &[&str] = &[
    "steps",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "data",
    "hidden",
    "time_embed_dim",
    "time_scale",
    "condition",
    "fusion.d_model",
    "fusion.heads",
    "fusion.iters",
    "fusion.codebook",
    "fusion.cond_dim",
    "toy.bands",
    "toy.speakers",
    "toy.envelope_terms",
    "toy.seq_len",
    "toy.content_codes",
    "toy.noise_std",
    "toy.pitch_spread",
    "toy.rows_per_bundle",
    "toy.seed",
    "reflow.pairs",
    "reflow.solver",
    "reflow.steps",
    "reflow.atol",
    "reflow.rtol",
];

const META_PREFIX: &str = "recipe.";

#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    pub train: TrainConfig,
    /// Default data source when `--data` is not given.
    pub data: Option<String>,
    pub toy: ToyMelConfig,
    pub reflow_pairs: usize,
    pub reflow_solver: SolverConfig,
    /// The key/value pairs this recipe was built from, with overrides
    /// applied.
    entries: BTreeMap<String, String>,
}

impl Recipe {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_entries(parse_key_values(text, KEYS)?)
    }

    /// Rebuilds the recipe a checkpoint was trained with.
    pub fn from_model(model: &FlowModel) -> Result<Self> {
        let entries: BTreeMap<String, (usize, String)> = model
            .meta
            .extra
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(META_PREFIX)
                    .map(|key| (key.to_string(), (0, v.clone())))
            })
            .collect();
        if entries.is_empty() {
            return Err(Error::Config(
                "checkpoint carries no training recipe; train it with this tool first".into(),
            ));
        }
        if let Some(key) = entries.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("checkpoint recipe has unknown key {key:?}")));
        }
        Self::from_entries(entries)
    }

    fn from_entries(entries: BTreeMap<String, (usize, String)>) -> Result<Self> {
        if let Some(key) = REQUIRED_KEYS.iter().find(|k| !entries.contains_key(**k)) {
            return Err(Error::Config(format!("missing required key `{key}`")));
        }
        let get = |key: &str| entries.get(key);
        let mut train = TrainConfig {
            steps: value(get("steps").unwrap(), "steps")?,
            batch_size: value(get("batch_size").unwrap(), "batch_size")?,
            ..TrainConfig::default()
        };
        train.adam.learning_rate = value(get("learning_rate").unwrap(), "learning_rate")?;
        macro_rules! optional {
            ($key:literal, $slot:expr) => {
                if let Some(entry) = get($key) {
                    $slot = value(entry, $key)?;
                }
            };
        }
        optional!("beta1", train.adam.beta1);
        optional!("beta2", train.adam.beta2);
        optional!("eps", train.adam.eps);
        optional!("seed", train.seed);
        optional!("time_embed_dim", train.time_embed_dim);
        optional!("time_scale", train.time_scale);
        if let Some(entry) = get("hidden") {
            train.hidden = list(entry, "hidden")?;
        }

        let conditional = match get("condition").map(|(line, v)| (*line, v.as_str())) {
            None | Some((_, "none")) => false,
            Some((_, "fusion")) => true,
            Some((line, other)) => {
                return Err(Error::Parse {
                    line,
                    message: format!("condition must be none or fusion, got {other:?}"),
                })
            }
        };
        let mut toy = ToyMelConfig::default();
        if conditional {
            let mut fusion = FusionConfig::small(16, 2, 16);
            let mut heads = fusion.n_heads;
            optional!("fusion.d_model", fusion.d_model);
            optional!("fusion.heads", heads);
            optional!("fusion.iters", fusion.n_self_attn_iters);
            optional!("fusion.codebook", fusion.codebook_size);
            optional!("fusion.cond_dim", fusion.cond_dim);
            fusion.n_heads = heads;
            fusion.head_dim = fusion.d_model / heads.max(1);
            fusion.validate()?;
            toy.d_model = fusion.d_model;
            train.fusion = Some(fusion);
        } else if let Some(key) = entries.keys().find(|k| k.starts_with("fusion.")) {
            return Err(Error::Parse {
                line: entries[key].0,
                message: format!("`{key}` needs `condition = fusion`"),
            });
        }
        optional!("toy.bands", toy.bands);
        optional!("toy.speakers", toy.n_speakers);
        optional!("toy.envelope_terms", toy.envelope_terms);
        optional!("toy.seq_len", toy.seq_len);
        optional!("toy.content_codes", toy.content_codes);
        optional!("toy.noise_std", toy.noise_std);
        optional!("toy.pitch_spread", toy.pitch_spread);
        optional!("toy.rows_per_bundle", toy.rows_per_bundle);
        optional!("toy.seed", toy.seed);
        toy.validate()?;
        train.validate()?;

        let mut reflow_pairs = 10_000;
        optional!("reflow.pairs", reflow_pairs);
        let mut steps = None;
        let mut atol = None;
        let mut rtol = None;
        if let Some(entry) = get("reflow.steps") {
            steps = Some(value(entry, "reflow.steps")?);
        }
        if let Some(entry) = get("reflow.atol") {
            atol = Some(value(entry, "reflow.atol")?);
        }
        if let Some(entry) = get("reflow.rtol") {
            rtol = Some(value(entry, "reflow.rtol")?);
        }
        let solver_name = get("reflow.solver").map(|(_, v)| v.as_str());
        let reflow_solver = solver_from_parts(solver_name, steps, atol, rtol)
            .map_err(|message| Error::Parse {
                line: get("reflow.solver").map_or(0, |e| e.0),
                message,
            })?
            .unwrap_or_else(SolverConfig::rk45_default);

        Ok(Self {
            train,
            data: get("data").map(|(_, v)| v.clone()),
            toy,
            reflow_pairs,
            reflow_solver,
            entries: entries.into_iter().map(|(k, (_, v))| (k, v)).collect(),
        })
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.entries.insert("seed".into(), seed.to_string());
    }

    pub fn set_data(&mut self, data: &str) {
        self.data = Some(data.to_string());
        self.entries.insert("data".into(), data.to_string());
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    /// Records the recipe in the model's metadata.
    pub fn store(&self, model: &mut FlowModel) {
        for (k, v) in &self.entries {
            model.meta.extra.insert(format!("{META_PREFIX}{k}"), v.clone());
        }
    }
}

fn value<T: FromStr>((line, raw): &(usize, String), key: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        line: *line,
        message: format!("invalid value {raw:?} for `{key}`"),
    })
}

fn list<T: FromStr>((line, raw): &(usize, String), key: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|part| value(&(*line, part.trim().to_string()), key))
        .collect()
}

/// Combines solver flags. Euler takes only a step count, RK45 only both
/// tolerances. `None` means no solver was asked for at all.
pub fn solver_from_parts(
    name: Option<&str>,
    steps: Option<usize>,
    atol: Option<f64>,
    rtol: Option<f64>,
) -> std::result::Result<Option<SolverConfig>, String> {
    let config = match (name, steps, atol, rtol) {
        (None, None, None, None) => return Ok(None),
        (None, ..) => return Err("--steps/--atol/--rtol need --solver".into()),
        (Some("euler"), Some(steps), None, None) => SolverConfig::euler(steps),
        (Some("euler"), None, _, _) => return Err("euler needs --steps".into()),
        (Some("euler"), ..) => return Err("euler takes --steps only; --atol/--rtol are for rk45".into()),
        (Some("rk45"), None, Some(atol), Some(rtol)) => SolverConfig::rk45(atol, rtol),
        (Some("rk45"), Some(_), _, _) => return Err("rk45 is adaptive; --steps is for euler".into()),
        (Some("rk45"), ..) => return Err("rk45 needs both --atol and --rtol".into()),
        (Some(other), ..) => return Err(format!("unknown solver {other:?}; expected euler or rk45")),
    };
    config.validate().map_err(|e| e.to_string())?;
    Ok(Some(config))
}

/// Parses one bench entry: `euler:N`, `rk45` or `rk45:ATOL:RTOL`.
pub fn parse_solver_spec(spec: &str) -> std::result::Result<SolverConfig, String> {
    let parts: Vec<&str> = spec.trim().split(':').collect();
    let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number {s:?} in solver {spec:?}"));
    let config = match parts.as_slice() {
        ["euler", steps] => SolverConfig::euler(
            steps
                .parse()
                .map_err(|_| format!("bad step count in solver {spec:?}"))?,
        ),
        ["rk45"] => SolverConfig::rk45_default(),
        ["rk45", atol, rtol] => SolverConfig::rk45(num(atol)?, num(rtol)?),
        _ => {
            return Err(format!(
                "bad solver {spec:?}; expected euler:N, rk45 or rk45:ATOL:RTOL"
            ))
        }
    };
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rectiflow::solvers::SolverKind;

    const MINIMAL: &str = "steps = 10\nbatch_size = 4\nlearning_rate = 0.01\n";

    #[test]
    fn minimal_recipe_uses_defaults() {
        let r = Recipe::parse(MINIMAL).unwrap();
        assert_eq!(r.train.steps, 10);
        assert_eq!(r.train.hidden, TrainConfig::default().hidden);
        assert!(r.train.fusion.is_none());
        assert_eq!(r.data, None);
    }

    #[test]
    fn missing_key_is_named() {
        let err = Recipe::parse("steps = 10\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
    }

    #[test]
    fn bad_values_carry_line_numbers() {
        let text = format!("{MINIMAL}# hidden sizes\nhidden = 8,x\n");
        match Recipe::parse(&text).unwrap_err() {
            Error::Parse { line, message } => {
                assert_eq!(line, 5);
                assert!(message.contains("hidden"));
            }
            other => panic!("unexpected {other:?}"),
        }
        match Recipe::parse(&format!("{MINIMAL}widht = 3\n")).unwrap_err() {
            Error::Parse { line: 4, message } => assert!(message.contains("hidden")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fusion_keys_need_a_conditional_recipe() {
        let err = Recipe::parse(&format!("{MINIMAL}fusion.d_model = 8\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }));
        let r = Recipe::parse(&format!("{MINIMAL}condition = fusion\nfusion.d_model = 8\nfusion.heads = 4\n")).unwrap();
        let f = r.train.fusion.unwrap();
        assert_eq!((f.d_model, f.n_heads, f.head_dim), (8, 4, 2));
        assert_eq!(r.toy.d_model, 8);
    }

    #[test]
    fn recipe_survives_the_checkpoint() {
        let mut r = Recipe::parse(&format!("{MINIMAL}hidden = 5\nreflow.solver = euler\nreflow.steps = 3\n")).unwrap();
        r.set_seed(42);
        r.set_data("two_moons");
        let (mut model, _) = r.train.init(2, &mut rectiflow::seeded_rng(0)).unwrap();
        r.store(&mut model);
        let back = Recipe::from_model(&model).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.reflow_solver.kind, SolverKind::Euler { steps: 3 });
    }

    #[test]
    fn solver_flag_rules() {
        assert_eq!(solver_from_parts(None, None, None, None), Ok(None));
        assert!(solver_from_parts(Some("euler"), Some(1), None, None).unwrap().is_some());
        assert!(solver_from_parts(Some("euler"), None, None, None).is_err());
        assert!(solver_from_parts(Some("euler"), Some(2), Some(1e-5), None).is_err());
        assert!(solver_from_parts(Some("rk45"), None, Some(1e-5), Some(1e-5)).unwrap().is_some());
        assert!(solver_from_parts(Some("rk45"), Some(3), Some(1e-5), Some(1e-5)).is_err());
        assert!(solver_from_parts(Some("rk45"), None, Some(1e-5), None).is_err());
        assert!(solver_from_parts(Some("heun"), Some(3), None, None).is_err());
        assert!(solver_from_parts(None, Some(3), None, None).is_err());
    }

    #[test]
    fn bench_specs() {
        assert_eq!(parse_solver_spec("euler:30").unwrap(), SolverConfig::euler(30));
        assert_eq!(parse_solver_spec("rk45").unwrap(), SolverConfig::rk45_default());
        assert_eq!(parse_solver_spec("rk45:1e-6:1e-4").unwrap(), SolverConfig::rk45(1e-6, 1e-4));
        for bad in ["euler", "euler:0", "rk4", "rk45:1e-5"] {
            assert!(parse_solver_spec(bad).is_err(), "{bad}");
        }
    }
}
