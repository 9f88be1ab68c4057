//! Checkpoint directories: one `VGT1` file per parameter plus a
//! `manifest.json` grouping them into generator, discriminator, shared
//! layer and task heads.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::BatchNorm;
use crate::scalar::Scalar;
use crate::tensor::{read_snapshot, write_snapshot, ParamStore};

pub const MANIFEST: &str = "manifest.json";
pub const GROUPS: [&str; 5] = ["gen", "disc", "shared", "val_head", "act_head"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub epoch: usize,
    pub step: u64,
    /// Group name to the parameter files it owns.
    pub groups: BTreeMap<String, Vec<String>>,
    /// Generator batch-norm running statistics by layer name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub batch_norm: BTreeMap<String, RunningStats>,
}

fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn generator_norms(model: &Model) -> Vec<&BatchNorm> {
    model
        .gen
        .iter()
        .flat_map(|g| std::iter::once(&g.project_bn).chain(g.ups.iter().map(|(_, bn)| bn)))
        .collect()
}

fn norm_name(i: usize) -> String {
    if i == 0 {
        "gen.project_bn".into()
    } else {
        format!("gen.bn{i}")
    }
}

pub fn save<T: Scalar>(dir: &Path, model: &Model, store: &ParamStore<T>, epoch: usize, step: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (_, name, tensor) in store.iter() {
        let file = format!("{name}.vgt");
        let path = dir.join(&file);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_snapshot(tensor, BufWriter::new(f))?;
        let group = group_of(name);
        if !GROUPS.contains(&group) {
            return Err(Error::contract(format!("parameter {name} outside the checkpoint groups")));
        }
        groups.entry(group.to_string()).or_default().push(file);
    }
    let batch_norm = generator_norms(model)
        .into_iter()
        .enumerate()
        .map(|(i, bn)| {
            (
                norm_name(i),
                RunningStats {
                    mean: bn.running_mean.clone(),
                    var: bn.running_var.clone(),
                },
            )
        })
        .collect();
    let manifest = CheckpointManifest {
        format: "VGT1".into(),
        config: model.config.clone(),
        epoch,
        step,
        groups,
        batch_norm,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Rebuilds the model described by the manifest and fills in its weights.
pub fn load<T: Scalar>(dir: &Path) -> Result<(Model, ParamStore<T>, CheckpointManifest)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let (mut model, mut store) = Model::build_unchecked::<T, _>(&manifest.config, &mut ChaCha8Rng::seed_from_u64(0));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let path = dir.join(format!("{name}.vgt"));
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let t = read_snapshot::<T, _>(BufReader::new(f))?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::Format {
                format: "VGT1",
                reason: format!("{name}: shape {:?}, model expects {:?}", t.shape(), store.get(id).shape()),
            });
        }
        *store.get_mut(id) = t;
    }
    if let Some(gen) = &mut model.gen {
        let norms = std::iter::once(&mut gen.project_bn).chain(gen.ups.iter_mut().map(|(_, bn)| bn));
        for (i, bn) in norms.enumerate() {
            let stats = manifest.batch_norm.get(&norm_name(i)).ok_or_else(|| Error::Format {
                format: "checkpoint",
                reason: format!("missing running statistics for {}", norm_name(i)),
            })?;
            bn.running_mean = stats.mean.clone();
            bn.running_var = stats.var.clone();
        }
    }
    Ok((model, store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;

    #[test]
    fn round_trip_restores_every_group() {
        let cfg = ModelConfig {
            num_filters: 4,
            latent_dim: 8,
            shared_dense_dim: 8,
            ..ModelConfig::desk(ModelKind::MultitaskDcgan)
        };
        let (mut model, store) = Model::build_unchecked::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        model.gen.as_mut().unwrap().project_bn.running_mean[1] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model, &store, 4, 12).unwrap();
        let (m2, s2, man) = load::<f32>(dir.path()).unwrap();
        assert_eq!(m2, model);
        for id in store.ids() {
            assert_eq!(store.get(id).data(), s2.get(id).data());
        }
        assert_eq!((man.epoch, man.step), (4, 12));
        let names: Vec<_> = man.groups.keys().map(String::as_str).collect();
        assert_eq!(names, ["act_head", "disc", "gen", "shared", "val_head"]);
    }

    #[test]
    fn cnn_checkpoint_has_no_generator_group() {
        let cfg = ModelConfig::desk(ModelKind::BasicCnn);
        let (model, store) = Model::build::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model, &store, 1, 1).unwrap();
        let (_, _, man) = load::<f32>(dir.path()).unwrap();
        assert!(!man.groups.contains_key("gen") && !man.groups.contains_key("act_head"));
        assert!(man.batch_norm.is_empty());
    }

    #[test]
    fn shape_mismatch_is_a_format_error() {
        let cfg = ModelConfig::desk(ModelKind::BasicCnn);
        let (model, store) = Model::build::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model, &store, 1, 1).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replace("\"num_filters\": 32", "\"num_filters\": 36");
        fs::write(&path, text).unwrap();
        assert!(matches!(load::<f32>(dir.path()), Err(Error::Format { .. })));
    }
}
