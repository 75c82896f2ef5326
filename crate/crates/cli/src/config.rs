//! Run configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use koopman_core::bench::{BiasMcConfig, NoiseLevel, SinusoidRef};
use koopman_core::datagen::{Excitation, NoiseSpec};
use koopman_core::mpc::{MpcConfig, StateBox};
use koopman_core::operator::Synthesis;
use koopman_core::seed::derive_seed;
use koopman_core::systems::SystemSpec;
use koopman_core::training::{LossWeights, TrainConfig};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Root of every random stream in the run.
    pub seed: u64,
    /// Output directory; relative paths resolve against the working directory.
    pub out: PathBuf,
    pub system: SystemSpec,
    pub dataset: DatasetSection,
    pub training: TrainingSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub mpc: Option<MpcSection>,
    #[serde(default)]
    pub bias_mc: Option<BiasMcSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub n_traj: usize,
    pub n_snap: usize,
    pub dt: f64,
    /// Defaults to the system's standard sampling boxes.
    #[serde(default)]
    pub excitation: Option<Excitation>,
    /// One dataset per entry. An empty list means a single noise-free set.
    pub snr_db: Vec<f64>,
    #[serde(default = "yes")]
    pub corrupt_inputs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    /// Widths after the input: hidden layers, then the encoder output.
    pub encoder: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    #[serde(default)]
    pub weights: LossWeights,
    pub clip: Option<f64>,
    #[serde(default)]
    pub synthesis: Synthesis,
    /// Total degree of the monomial dictionary used by the fixed-dictionary
    /// forward-backward baseline.
    #[serde(default = "two")]
    pub dictionary_degree: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub rollouts: usize,
    pub steps: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection { rollouts: koopman_core::bench::EVAL_ROLLOUTS, steps: koopman_core::bench::EVAL_STEPS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSection {
    pub horizon: usize,
    /// Per-state weights; defaults to 1 on the position channels.
    #[serde(default)]
    pub q_x: Option<Vec<f64>>,
    pub r_u: Vec<f64>,
    pub u_bound: f64,
    #[serde(default)]
    pub state_box: Option<StateBox>,
    /// Measurement noise on the fed-back state; `None` is noise-free.
    #[serde(default)]
    pub feedback_snr_db: Option<f64>,
    pub reference: SinusoidRef,
    /// Seconds of closed loop.
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasMcSection {
    pub snr_db: f64,
    pub columns: usize,
    pub draws: usize,
    #[serde(default = "yes")]
    pub corrupt_inputs: bool,
}

fn yes() -> bool {
    true
}

fn two() -> u32 {
    2
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        self.system.validate().map_err(|e| bad(format!("system: {e}")))?;
        let d = &self.dataset;
        if d.n_traj < 3 || d.n_snap < 3 || !(d.dt.is_finite() && d.dt > 0.0) {
            return Err(bad("dataset needs n_traj >= 3, n_snap >= 3 and dt > 0"));
        }
        if d.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(bad("dataset.snr_db entries must be finite"));
        }
        let ex = self.excitation();
        if ex.state_box.len() != self.system.state_dim() || ex.input_box.len() != self.system.input_dim() {
            return Err(bad("dataset.excitation boxes do not match the system dimensions"));
        }
        self.train_config(0).validate().map_err(|e| bad(format!("training: {e}")))?;
        if self.training.encoder.is_empty() || self.training.encoder.contains(&0) {
            return Err(bad("training.encoder needs nonzero widths"));
        }
        if self.evaluation.rollouts == 0 || self.evaluation.steps == 0 {
            return Err(bad("evaluation needs rollouts and steps > 0"));
        }
        if let Some(m) = &self.mpc {
            self.mpc_config(0).map_err(|e| bad(format!("mpc: {e}")))?;
            if !(m.duration.is_finite() && m.duration >= d.dt) {
                return Err(bad("mpc.duration must cover at least one step"));
            }
            self.reference().map_err(|e| bad(format!("mpc.reference: {e}")))?;
        }
        if let Some(b) = &self.bias_mc {
            if !b.snr_db.is_finite() || b.columns == 0 || b.draws < 100 {
                return Err(bad("bias_mc needs a finite snr_db, columns > 0 and at least 100 draws"));
            }
        }
        Ok(())
    }

    pub fn excitation(&self) -> Excitation {
        self.dataset.excitation.clone().unwrap_or_else(|| Excitation::default_for(&self.system))
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, "dataset", 0)
    }

    /// Keyed by the SNR value so that editing the list leaves other sets alone.
    pub fn noise(&self, snr_db: Option<f64>) -> NoiseSpec {
        let key = snr_db.map_or(u64::MAX, f64::to_bits);
        NoiseSpec { snr_db, seed: derive_seed(self.seed, "noise", key), corrupt_inputs: self.dataset.corrupt_inputs }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            encoder: t.encoder.clone(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_decay: t.lr_decay,
            decay_every: t.decay_every,
            weights: t.weights,
            clip: t.clip,
            seed,
        }
    }

    pub fn train_seed(&self) -> u64 {
        derive_seed(self.seed, "training", 0)
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, "evaluation", 0)
    }

    pub fn feedback_seed(&self) -> u64 {
        derive_seed(self.seed, "feedback", 0)
    }

    pub fn mpc_config(&self, seed: u64) -> koopman_core::Result<MpcConfig> {
        let s = self.mpc.as_ref().ok_or_else(|| koopman_core::Error::Precondition("config has no mpc section".into()))?;
        let (n, m) = (self.system.state_dim(), self.system.input_dim());
        let mut cfg = MpcConfig::new(n, &self.system.position_channels(), m, s.u_bound);
        cfg.horizon = s.horizon;
        if let Some(q) = &s.q_x {
            cfg.q_x = q.clone();
        }
        cfg.r_u = s.r_u.clone();
        cfg.state_box = s.state_box.clone();
        cfg.feedback = NoiseSpec { snr_db: s.feedback_snr_db, seed, corrupt_inputs: false };
        cfg.validate(n, m)?;
        Ok(cfg)
    }

    /// Channels scored by the tracking error: those with nonzero weight.
    pub fn tracked_channels(&self) -> Vec<usize> {
        match self.mpc.as_ref().and_then(|s| s.q_x.as_ref()) {
            Some(q) => (0..q.len()).filter(|&i| q[i] > 0.0).collect(),
            None => self.system.position_channels(),
        }
    }

    pub fn reference(&self) -> koopman_core::Result<Vec<Vec<f64>>> {
        let s = self.mpc.as_ref().ok_or_else(|| koopman_core::Error::Precondition("config has no mpc section".into()))?;
        let steps = (s.duration / self.dataset.dt).round() as usize;
        koopman_core::bench::sinusoid_reference(&self.system, &s.reference, self.dataset.dt, steps)
    }

    /// The configured Monte-Carlo run, or the two-state oracle at 40 dB.
    pub fn bias_mc_config(&self) -> BiasMcConfig {
        let seed = derive_seed(self.seed, "bias-mc", 0);
        match &self.bias_mc {
            Some(b) => {
                let mut c = BiasMcConfig::oracle(NoiseLevel::SnrDb(b.snr_db), seed);
                c.columns = b.columns;
                c.draws = b.draws;
                c.corrupt_inputs = b.corrupt_inputs;
                c
            }
            None => BiasMcConfig::oracle(NoiseLevel::SnrDb(40.0), seed),
        }
    }
}
