//! On-disk formats.
//!
//! Dataset directory layout:
//!
//! ```text
//! meta.json              DatasetMeta
//! traj_0000.csv ...      noisy trajectories
//! clean/traj_0000.csv    ground truth, same names
//! ```
//!
//! Each trajectory CSV has a header `x0,..,x{n-1},u0,..,u{m-1}` and one row
//! per snapshot. The final snapshot has no input, so its input cells are
//! empty. Floats are written in Rust's shortest round-trip form, so a
//! write/read cycle reproduces every value bit for bit.
//!
//! Model checkpoints are JSON ([`Checkpoint`]); matrices are stored as
//! `{rows, cols, data}` with `data` row-major.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Excitation, NoiseSpec};
use crate::error::{Error, Result};
use crate::operator::KoopmanModel;
use crate::systems::{SystemSpec, Trajectory};
use crate::training::EpochLoss;

pub const DATASET_SCHEMA: u32 = 1;
pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub system: SystemSpec,
    pub dt: f64,
    pub n_traj: usize,
    pub n_snap: usize,
    pub excitation: Excitation,
    pub noise: NoiseSpec,
    pub seed: u64,
    pub state_sigma: Vec<f64>,
    pub input_sigma: Vec<f64>,
    pub files: Vec<String>,
}

fn traj_file(i: usize) -> String {
    format!("traj_{i:04}.csv")
}

/// Writes `s` to `path`, creating parent directories.
pub fn write_text(path: &Path, s: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::Io(format!("{}: {e}", parent.display())))?;
        }
    }
    fs::write(path, s).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn trajectory_to_csv(t: &Trajectory) -> String {
    let (n, m) = (t.state_dim(), t.input_dim());
    let mut out = String::new();
    let header: Vec<String> = (0..n).map(|i| format!("x{i}")).chain((0..m).map(|i| format!("u{i}"))).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (k, x) in t.states.iter().enumerate() {
        let mut cells: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        match t.inputs.get(k) {
            Some(u) => cells.extend(u.iter().map(|v| v.to_string())),
            None => cells.extend(std::iter::repeat(String::new()).take(m)),
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn trajectory_from_csv(s: &str, dt: f64) -> Result<Trajectory> {
    let mut lines = s.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty trajectory file".into()))?;
    let names: Vec<&str> = header.split(',').collect();
    let n = names.iter().filter(|c| c.starts_with('x')).count();
    let m = names.iter().filter(|c| c.starts_with('u')).count();
    if n + m != names.len() || n == 0 {
        return Err(Error::Format(format!("bad trajectory header '{header}'")));
    }
    let parse = |c: &str| c.parse::<f64>().map_err(|e| Error::Format(format!("'{c}': {e}")));
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    let mut ended = false;
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n + m {
            return Err(Error::Format(format!("row {row}: expected {} cells, got {}", n + m, cells.len())));
        }
        if ended {
            return Err(Error::Format(format!("row {row} follows the input-free final row")));
        }
        states.push(cells[..n].iter().map(|c| parse(c)).collect::<Result<Vec<_>>>()?);
        if m > 0 && cells[n..].iter().all(|c| c.is_empty()) {
            ended = true;
        } else {
            inputs.push(cells[n..].iter().map(|c| parse(c)).collect::<Result<Vec<_>>>()?);
        }
    }
    if m == 0 {
        // inputs carry no columns; keep the length contract
        inputs = vec![Vec::new(); states.len().saturating_sub(1)];
    }
    Trajectory::new(dt, states, inputs).map_err(|e| Error::Format(format!("trajectory file: {e}")))
}

/// Writes a dataset directory. The directory is created if missing.
pub fn write_dataset(
    dir: &Path,
    system: &SystemSpec,
    excitation: &Excitation,
    noise: &NoiseSpec,
    seed: u64,
    data: &Dataset,
) -> Result<DatasetMeta> {
    let first = data.clean.first().ok_or(Error::Empty)?;
    let files: Vec<String> = (0..data.clean.len()).map(traj_file).collect();
    let meta = DatasetMeta {
        schema_version: DATASET_SCHEMA,
        system: system.clone(),
        dt: first.dt,
        n_traj: data.clean.len(),
        n_snap: first.len(),
        excitation: excitation.clone(),
        noise: noise.clone(),
        seed,
        state_sigma: data.state_sigma.clone(),
        input_sigma: data.input_sigma.clone(),
        files: files.clone(),
    };
    for (i, f) in files.iter().enumerate() {
        write_text(&dir.join(f), &trajectory_to_csv(&data.noisy[i]))?;
        write_text(&dir.join("clean").join(f), &trajectory_to_csv(&data.clean[i]))?;
    }
    write_text(&dir.join("meta.json"), &(serde_json::to_string_pretty(&meta)? + "\n"))?;
    Ok(meta)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetMeta, Dataset)> {
    let meta: DatasetMeta = serde_json::from_str(&read_text(&dir.join("meta.json"))?)?;
    if meta.schema_version != DATASET_SCHEMA {
        return Err(Error::Format(format!("dataset schema {} (expected {DATASET_SCHEMA})", meta.schema_version)));
    }
    meta.system.validate()?;
    if meta.files.len() != meta.n_traj {
        return Err(Error::Format(format!("meta lists {} files for {} trajectories", meta.files.len(), meta.n_traj)));
    }
    let load = |p: &Path| -> Result<Trajectory> {
        let t = trajectory_from_csv(&read_text(p)?, meta.dt).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        if t.state_dim() != meta.system.state_dim() || t.input_dim() != meta.system.input_dim() || t.len() != meta.n_snap {
            return Err(Error::Format(format!("{}: shape does not match meta.json", p.display())));
        }
        Ok(t)
    };
    let mut noisy = Vec::with_capacity(meta.n_traj);
    let mut clean = Vec::with_capacity(meta.n_traj);
    for f in &meta.files {
        noisy.push(load(&dir.join(f))?);
        clean.push(load(&dir.join("clean").join(f))?);
    }
    let data = Dataset { noisy, clean, state_sigma: meta.state_sigma.clone(), input_sigma: meta.input_sigma.clone() };
    Ok((meta, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub state: usize,
    pub lifted: usize,
    pub input: usize,
}

/// Versioned model file. `dims` is redundant with the model and checked
/// against it on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub dims: Dims,
    pub model: KoopmanModel,
}

impl Checkpoint {
    pub fn new(model: KoopmanModel) -> Self {
        let dims = Dims { state: model.state_dim(), lifted: model.lifted_dim(), input: model.input_dim() };
        Checkpoint { schema_version: CHECKPOINT_SCHEMA, dims, model }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CHECKPOINT_SCHEMA {
            return Err(Error::Format(format!("checkpoint schema {} (expected {CHECKPOINT_SCHEMA})", self.schema_version)));
        }
        self.model.validate()?;
        let m = &self.model;
        if self.dims != (Dims { state: m.state_dim(), lifted: m.lifted_dim(), input: m.input_dim() }) {
            return Err(Error::DimensionMismatch(format!("checkpoint dims {:?} disagree with the stored model", self.dims)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

pub fn save_model(path: &Path, model: &KoopmanModel) -> Result<()> {
    write_text(path, &Checkpoint::new(model.clone()).to_json()?)
}

pub fn load_model(path: &Path) -> Result<KoopmanModel> {
    Ok(Checkpoint::from_json(&read_text(path)?)?.model)
}

/// Rows `epoch,fpred,flift,bpred,blift,con,reg,total`.
pub fn loss_history_csv(history: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,fpred,flift,bpred,blift,con,reg,total\n");
    for h in history {
        let t = &h.terms;
        let _ = writeln!(out, "{},{},{},{},{},{},{},{}", h.epoch, t.fpred, t.flift, t.bpred, t.blift, t.con, t.reg, h.total);
    }
    out
}
