//! Experiment configuration: one JSON document, dotted-path overrides, and
//! strict key validation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{
    generate_synthetic_domains, load_domains_root, split_train_test, DomainDataset, SplitSpec,
    SyntheticFamily,
};
use crate::episodes::MixRatioSchedule;
use crate::error::{Error, Result};
use crate::eval::{MethodKind, MethodSpec, SplitDomain};
use crate::metatrain::TrainConfig;
use crate::model::Backbone;

/// Environment variable naming the output root when the config has none.
pub const OUT_DIR_ENV: &str = "ETTA_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub family: SyntheticFamily,
    pub num_domains: usize,
    pub samples_per_domain: usize,
    pub domain_params: Vec<f64>,
    pub seed: u64,
    /// Directory of on-disk domains; replaces generation when set.
    pub dir: Option<PathBuf>,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            family: SyntheticFamily::RotatedTwoMoons,
            num_domains: 4,
            samples_per_domain: 400,
            domain_params: vec![0.0, 30.0, 60.0, 90.0],
            seed: 7,
            dir: None,
            train_fraction: 0.7,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Mlp,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub backbone: BackboneKind,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            backbone: BackboneKind::Mlp,
            hidden: 64,
            embed_dim: 32,
        }
    }
}

impl ModelSection {
    pub fn backbone(&self, d_in: usize) -> Backbone {
        match self.backbone {
            BackboneKind::Mlp => Backbone::Mlp {
                d_in,
                hidden: self.hidden,
                d_z: self.embed_dim,
            },
            BackboneKind::Identity => Backbone::Identity { dim: d_in },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub name: String,
    pub kind: MethodKind,
    /// Dotted-path overrides applied on top of the experiment config.
    #[serde(default)]
    pub overrides: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodEntry>,
    pub output_dir: Option<PathBuf>,
    /// Target domain index for `train`, `deepall` and `gap-area`.
    pub held_out: Option<usize>,
    pub burn_in: usize,
    pub smoothing_window: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub jobs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            seeds: vec![0, 1, 2],
            methods: vec![
                MethodEntry {
                    name: "DeepAll".into(),
                    kind: MethodKind::DeepAll,
                    overrides: BTreeMap::new(),
                },
                MethodEntry {
                    name: "ETTA-SE".into(),
                    kind: MethodKind::Episodic,
                    overrides: BTreeMap::new(),
                },
            ],
            output_dir: None,
            held_out: None,
            burn_in: 0,
            smoothing_window: None,
            checkpoint: None,
            jobs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub mts: MixRatioSchedule,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::desk_scale(),
            mts: MixRatioSchedule::default(),
            eval: EvalSection::default(),
        }
    }
}

fn default_tree() -> Value {
    serde_json::to_value(ExperimentConfig::default()).expect("serializable default")
}

/// Rejects any key of `user` that does not exist in `reference`. Arrays,
/// free-form maps and optional (null) slots are not descended into.
fn check_keys(user: &Value, reference: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(u), Value::Object(r)) = (user, reference) else {
        return Ok(());
    };
    for (k, v) in u {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match r.get(k) {
            None => return Err(Error::UnknownKey(path)),
            Some(rv) => check_keys(v, rv, &path)?,
        }
    }
    Ok(())
}

fn lookup<'a>(tree: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(tree, |node, seg| node.get(seg))
}

/// Sets `path` (dotted) in `tree`, creating intermediate objects.
fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let segs: Vec<&str> = path.split('.').collect();
    for seg in &segs[..segs.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        node = node
            .as_object_mut()
            .expect("object")
            .entry(seg.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match node {
        Value::Object(map) => {
            map.insert(segs[segs.len() - 1].to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!(
            "cannot set {path}: parent is not an object"
        ))),
    }
}

/// Parses an override value: JSON when it parses, a bare string otherwise.
pub fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `key=value` overrides, validating each key against the schema.
pub fn apply_overrides(tree: &mut Value, overrides: &[(String, Value)]) -> Result<()> {
    let reference = default_tree();
    for (key, value) in overrides {
        if key.is_empty() || lookup(&reference, key).is_none() {
            return Err(Error::UnknownKey(key.clone()));
        }
        set_path(tree, key, value.clone())?;
    }
    Ok(())
}

pub fn parse_set_arg(arg: &str) -> Result<(String, Value)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{arg}` is not key=value")))?;
    Ok((k.trim().to_string(), parse_override_value(v.trim())))
}

impl ExperimentConfig {
    pub fn from_value(tree: Value) -> Result<Self> {
        check_keys(&tree, &default_tree(), "")?;
        let cfg: ExperimentConfig =
            serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies overrides on top of it.
    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tree: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        check_keys(&tree, &default_tree(), "")?;
        apply_overrides(&mut tree, overrides)?;
        Self::from_value(tree)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.mts.validate()?;
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds is empty".into()));
        }
        let mut names: Vec<&str> = self.eval.methods.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate method names".into()));
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("serializable config")
    }

    /// SHA-256 over the canonical (key-sorted) JSON, ignoring the output
    /// directory so relocated reruns hash identically.
    pub fn content_hash(&self) -> String {
        let mut v = self.to_value();
        if let Some(eval) = v.get_mut("eval").and_then(Value::as_object_mut) {
            eval.remove("output_dir");
        }
        let canonical = serde_json::to_string(&v).expect("serializable");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.eval
            .output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn domains(&self) -> Result<Vec<DomainDataset>> {
        match &self.data.dir {
            Some(dir) => load_domains_root(dir),
            None => generate_synthetic_domains(
                self.data.family,
                self.data.num_domains,
                self.data.samples_per_domain,
                &self.data.domain_params,
                self.data.seed,
            ),
        }
    }

    pub fn split_domains(&self) -> Result<Vec<SplitDomain>> {
        self.domains()?
            .iter()
            .enumerate()
            .map(|(k, d)| {
                let spec = SplitSpec {
                    train_fraction: self.data.train_fraction,
                    seed: self.data.split_seed.wrapping_add(k as u64),
                };
                let (train, test) = split_train_test(d, spec)?;
                Ok(SplitDomain { train, test })
            })
            .collect()
    }

    /// Resolves the method list: each entry's overrides applied to a copy of
    /// this config.
    pub fn methods(&self) -> Result<Vec<MethodSpec>> {
        self.eval
            .methods
            .iter()
            .map(|m| {
                let mut tree = self.to_value();
                let ov: Vec<(String, Value)> = m
                    .overrides
                    .iter()
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                apply_overrides(&mut tree, &ov)?;
                let resolved = ExperimentConfig::from_value(tree)?;
                Ok(MethodSpec {
                    name: m.name.clone(),
                    kind: m.kind,
                    train: resolved.train,
                    schedule: resolved.mts,
                })
            })
            .collect()
    }
}
