//! Snapshot directory layout: `descriptor.json`, `vocab.json`, and one
//! array archive `<group>.cfda` per parameter group.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::group_names;
use super::{ArchitectureDescriptor, ModelSnapshot, ParamGroup, Params, Tensor, Vocabulary};
use crate::archive::{Archive, ArrayData, ArrayEntry};
use crate::error::{CfdError, Result};
use crate::scalar::Scalar;

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    descriptor: ArchitectureDescriptor,
    classes: Vec<String>,
    task_index: usize,
    seed: u64,
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| CfdError::io(path, e))
}

impl<T: Scalar> ModelSnapshot<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CfdError::io(dir, e))?;
        write_json(
            &dir.join("descriptor.json"),
            &SnapshotHeader {
                descriptor: self.descriptor.clone(),
                classes: self.classes.clone(),
                task_index: self.task_index,
                seed: self.seed,
            },
        )?;
        write_json(&dir.join("vocab.json"), &self.vocab)?;
        for g in &self.params.groups {
            let mut archive = Archive::default();
            for t in &g.tensors {
                archive.push(ArrayEntry::new(&t.name, t.shape.clone(), ArrayData::from_scalars(&t.data))?);
            }
            archive.write(&dir.join(format!("{}.cfda", g.name)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|_| CfdError::CorruptSnapshot(format!("missing {name}")))
        };
        let header: SnapshotHeader = serde_json::from_str(&read("descriptor.json")?)
            .map_err(|e| CfdError::CorruptSnapshot(format!("descriptor.json: {e}")))?;
        let vocab: Vocabulary = serde_json::from_str(&read("vocab.json")?)
            .map_err(|e| CfdError::CorruptSnapshot(format!("vocab.json: {e}")))?;
        let mut groups = Vec::new();
        for name in group_names(header.descriptor.block_count()) {
            let path = dir.join(format!("{name}.cfda"));
            if !path.exists() {
                return Err(CfdError::CorruptSnapshot(format!("missing parameter group {name}")));
            }
            let archive = Archive::read(&path)
                .map_err(|e| CfdError::CorruptSnapshot(format!("parameter group {name}: {e}")))?;
            let tensors = archive
                .entries
                .iter()
                .map(|e| Tensor {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: e.data.to_scalars(),
                })
                .collect();
            groups.push(ParamGroup { name, tensors });
        }
        let snap = ModelSnapshot {
            descriptor: header.descriptor,
            params: Params { groups },
            vocab,
            classes: header.classes,
            task_index: header.task_index,
            seed: header.seed,
        };
        snap.validate()?;
        Ok(snap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snapshot<T: Scalar>(seed: u64) -> ModelSnapshot<T> {
        let d = ArchitectureDescriptor {
            block_channels: vec![3, 5],
            input_size: 8,
            embed_size: 4,
            hidden_size: 6,
            class_count: 2,
            vocab_size: 7,
        };
        ModelSnapshot::build_two_head(d, seed).unwrap()
    }

    #[test]
    fn save_load_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = snapshot::<f64>(3).expand_vocabulary(&["w".into()]).unwrap();
        m.save(dir.path()).unwrap();
        let back = ModelSnapshot::<f64>::load(dir.path()).unwrap();
        assert_eq!(back.content_hash(), m.content_hash());
        assert_eq!(back, m);

        let m32 = snapshot::<f32>(3);
        let dir32 = tempfile::tempdir().unwrap();
        m32.save(dir32.path()).unwrap();
        assert_eq!(ModelSnapshot::<f32>::load(dir32.path()).unwrap(), m32);
    }

    #[test]
    fn missing_group_is_named() {
        let dir = tempfile::tempdir().unwrap();
        snapshot::<f32>(1).save(dir.path()).unwrap();
        fs::remove_file(dir.path().join("block_2.cfda")).unwrap();
        match ModelSnapshot::<f32>::load(dir.path()) {
            Err(CfdError::CorruptSnapshot(msg)) => assert!(msg.contains("block_2"), "{msg}"),
            other => panic!("expected CorruptSnapshot, got {other:?}"),
        }
    }

    #[test]
    fn different_seeds_differ() {
        assert_ne!(snapshot::<f32>(1).content_hash(), snapshot::<f32>(2).content_hash());
    }
}
