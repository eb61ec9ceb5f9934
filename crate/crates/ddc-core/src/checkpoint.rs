//! Self-describing checkpoint archives for codec and task models.
//!
//! A codec archive carries its full [`CodecConfig`], the completed training
//! phase, and every parameter group by name; loading against a different
//! config is an error. Task archives use the same format keyed by task id.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, CodecState};
use crate::error::{Error, Result};
use crate::tasks::{TaskId, TaskModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecCheckpoint {
    pub config: CodecConfig,
    pub phase: u8,
    pub groups: BTreeMap<String, Vec<f64>>,
}

/// Persist a codec's configuration and parameters.
pub fn save_codec(state: &CodecState, path: &Path) -> Result<()> {
    let mut groups = BTreeMap::new();
    for name in state.group_names() {
        groups.insert(name.clone(), state.export_group(&name)?);
    }
    let archive = CodecCheckpoint {
        config: state.config.clone(),
        phase: state.phase,
        groups,
    };
    let f = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(f), &archive)?;
    Ok(())
}

/// Load a codec checkpoint. When `expected` is given, the stored config must
/// match it exactly.
pub fn load_codec(path: &Path, expected: Option<&CodecConfig>) -> Result<CodecState> {
    let f = std::fs::File::open(path)?;
    let archive: CodecCheckpoint = serde_json::from_reader(std::io::BufReader::new(f))?;
    if let Some(expected) = expected {
        if archive.config != *expected {
            return Err(Error::CheckpointMismatch(
                "checkpoint config differs from the expected codec config".into(),
            ));
        }
    }
    let mut state = CodecState::init(archive.config, 0)?;
    let names = state.group_names();
    for name in &names {
        let params = archive
            .groups
            .get(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing group {name}")))?;
        state.import_group(name, params)?;
    }
    for name in archive.groups.keys() {
        if !names.contains(name) {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has unknown group {name}"
            )));
        }
    }
    state.phase = archive.phase;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCheckpoint {
    pub task_id: String,
    pub frozen: bool,
    pub params: Vec<f64>,
}

pub fn save_task(model: &TaskModel, path: &Path) -> Result<()> {
    let archive = TaskCheckpoint {
        task_id: model.task_id.as_str().to_string(),
        frozen: model.frozen,
        params: model.export_params(),
    };
    let f = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(f), &archive)?;
    Ok(())
}

pub fn load_task(path: &Path) -> Result<TaskModel> {
    let f = std::fs::File::open(path)?;
    let archive: TaskCheckpoint = serde_json::from_reader(std::io::BufReader::new(f))?;
    let mut model = match TaskId::parse(&archive.task_id)? {
        TaskId::HrClassify => TaskModel::new_classifier(0),
        TaskId::RrPeaks => TaskModel::new_peaks(0),
    };
    model.import_params(&archive.params)?;
    if archive.frozen {
        model.freeze();
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;

    fn tiny_state(seed: u64) -> CodecState {
        let cfg = CodecConfig::new(64, &[16, 8, 1], vec![4, 6, 8], vec![5, 3, 3]).unwrap();
        CodecState::init(cfg, seed).unwrap()
    }

    #[test]
    fn codec_checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.json");
        let mut state = tiny_state(5);
        state.phase = 2;
        save_codec(&state, &path).unwrap();
        let loaded = load_codec(&path, Some(&state.config)).unwrap();
        assert_eq!(loaded, state);
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.json");
        let state = tiny_state(5);
        save_codec(&state, &path).unwrap();
        let other = CodecConfig::new(128, &[16, 8, 1], vec![4, 6, 8], vec![5, 3, 3]).unwrap();
        assert!(matches!(
            load_codec(&path, Some(&other)),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn task_checkpoint_round_trips_and_freezes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.json");
        let mut model = TaskModel::new_classifier(9);
        model.freeze();
        save_task(&model, &path).unwrap();
        let loaded = load_task(&path).unwrap();
        assert_eq!(loaded, model);
        assert!(loaded.frozen);
        assert_eq!(loaded.checksum(), model.checksum());
    }
}
