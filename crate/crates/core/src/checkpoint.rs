//! Parameter checkpoints: a JSON file mapping parameter names to shapes and
//! flat value arrays, plus the hash of the config that produced them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::model::{Backbone, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    config_hash: String,
    iteration: Option<usize>,
    backbone: Backbone,
    params: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config_hash: String,
    pub iteration: Option<usize>,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    config_hash: &str,
    iteration: Option<usize>,
) -> Result<()> {
    let entry = |name: &str, m: &Matrix| Entry {
        name: name.to_string(),
        shape: [m.rows(), m.cols()],
        data: m.data().to_vec(),
    };
    let mut entries: Vec<Entry> = params.phi.iter().map(|(n, m)| entry(n, m)).collect();
    entries.push(entry("theta", &params.theta));
    let file = CheckpointFile {
        config_hash: config_hash.to_string(),
        iteration,
        backbone: params.backbone,
        params: entries,
    };
    fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::load(path, e.to_string()))?;
    let mut phi = Vec::new();
    let mut theta = None;
    for e in file.params {
        let m = Matrix::from_vec(e.shape[0], e.shape[1], e.data)
            .map_err(|err| Error::load(path, format!("{}: {err}", e.name)))?;
        if e.name == "theta" {
            theta = Some(m);
        } else {
            phi.push((e.name, m));
        }
    }
    let theta = theta.ok_or_else(|| Error::load(path, "missing theta"))?;
    let params = ModelParams {
        backbone: file.backbone,
        phi,
        theta,
    };
    params
        .validate()
        .map_err(|e| Error::load(path, e.to_string()))?;
    Ok(Checkpoint {
        params,
        config_hash: file.config_hash,
        iteration: file.iteration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let p = ModelParams::init(
            Backbone::Mlp {
                d_in: 2,
                hidden: 7,
                d_z: 3,
            },
            3,
            42,
        )
        .unwrap();
        // Values without short decimal forms.
        let p = p
            .with_flat(
                &p.flatten()
                    .iter()
                    .map(|v| v / 3.0 + 1e-17)
                    .collect::<Vec<_>>(),
            )
            .unwrap();
        save_checkpoint(&path, &p, "abc", Some(9)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.params, p);
        assert_eq!(ck.config_hash, "abc");
        assert_eq!(ck.iteration, Some(9));
    }
}
