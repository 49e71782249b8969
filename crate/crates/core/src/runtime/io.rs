//! Line-delimited trajectory files: a header record followed by one
//! trajectory per line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{validate_trajectory, PedagogicalAction, Trajectory, FEATURE_NAMES, N_ITEMS, SCHEMA_VERSION};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryHeader {
    pub record: String,
    pub schema_version: u32,
    pub feature_order: Vec<String>,
    pub action_order: Vec<PedagogicalAction>,
    pub n_items: usize,
}

impl Default for TrajectoryHeader {
    fn default() -> Self {
        Self {
            record: "header".into(),
            schema_version: SCHEMA_VERSION,
            feature_order: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            action_order: PedagogicalAction::ALL.to_vec(),
            n_items: N_ITEMS,
        }
    }
}

pub fn trajectories_to_string(data: &[Trajectory]) -> String {
    let mut out = serde_json::to_string(&TrajectoryHeader::default()).expect("header serializes");
    out.push('\n');
    for t in data {
        out.push_str(&serde_json::to_string(t).expect("trajectory serializes"));
        out.push('\n');
    }
    out
}

pub fn write_trajectories(path: &Path, data: &[Trajectory]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(trajectories_to_string(data).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Parses and validates a trajectory file. Every malformed or
/// inconsistent record is a data error naming its line.
pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let bad = |line: usize, msg: String| Error::Data(format!("{}:{}: {msg}", path.display(), line + 1));

    let (_, first) = lines.next().ok_or_else(|| bad(0, "missing header record".into()))?;
    let first = first.map_err(|e| Error::io(path, e))?;
    let header: TrajectoryHeader =
        serde_json::from_str(&first).map_err(|e| bad(0, format!("malformed header: {e}")))?;
    if header != TrajectoryHeader::default() {
        return Err(bad(
            0,
            "header schema, feature order or action order differs from this build".into(),
        ));
    }

    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line).map_err(|e| bad(i, format!("malformed trajectory: {e}")))?;
        if t.schema_version != SCHEMA_VERSION {
            return Err(bad(i, format!("schema_version {} unsupported", t.schema_version)));
        }
        if let Some(v) = validate_trajectory(&t).first() {
            return Err(bad(i, v.to_string()));
        }
        out.push(t);
    }
    Ok(out)
}
