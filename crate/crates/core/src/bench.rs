//! Error metrics, the Monte-Carlo bias experiment and comparison reports.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::datagen::{excite, Excitation};
use crate::error::{Error, Result};
use crate::lifting::Lift;
use crate::mpc::{track, MpcConfig, TrackResult};
use crate::numerics::{frob, inv, norm2_est, Mat};
use crate::operator::{fit_forward_backward, reduced_bias, rollout, BlockOp, KoopmanModel};
use crate::seed::{derive_seed, stream};
use crate::systems::{SystemSpec, Trajectory};

/// Mean Euclidean distance between corresponding states.
pub fn pred_error(truth: &Trajectory, pred: &Trajectory) -> Result<f64> {
    if truth.states.len() != pred.states.len() {
        return Err(Error::LengthMismatch(truth.states.len(), pred.states.len()));
    }
    if truth.states.is_empty() {
        return Err(Error::Empty);
    }
    let total: f64 = truth.states.iter().zip(&pred.states).map(|(a, b)| dist(a, b, None)).sum();
    Ok(total / truth.states.len() as f64)
}

/// Mean distance to the reference over the given channels.
pub fn track_error(result: &TrackResult, channels: &[usize]) -> Result<f64> {
    if result.actual.len() != result.reference.len() {
        return Err(Error::LengthMismatch(result.reference.len(), result.actual.len()));
    }
    if result.actual.is_empty() {
        return Err(Error::Empty);
    }
    let total: f64 = result.actual.iter().zip(&result.reference).map(|(a, r)| dist(a, r, Some(channels))).sum();
    Ok(total / result.actual.len() as f64)
}

fn dist(a: &[f64], b: &[f64], channels: Option<&[usize]>) -> f64 {
    match channels {
        Some(ch) => ch.iter().map(|&i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt(),
        None => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
    }
}

/// Held-out clean trajectories for open-loop evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub trajectories: Vec<Trajectory>,
}

pub const EVAL_ROLLOUTS: usize = 20;
pub const EVAL_STEPS: usize = 200;

impl EvalSet {
    pub fn generate(spec: &SystemSpec, dt: f64, excitation: &Excitation, seed: u64, rollouts: usize, steps: usize) -> Result<Self> {
        let root = derive_seed(seed, "evaluation", 0);
        let trajectories = (0..rollouts as u64).map(|i| excite(spec, steps + 1, dt, excitation, root, i)).collect::<Result<_>>()?;
        Ok(EvalSet { trajectories })
    }

    /// Mean over rollouts of the open-loop prediction error.
    pub fn mean_pred_error(&self, model: &KoopmanModel) -> Result<f64> {
        if self.trajectories.is_empty() {
            return Err(Error::Empty);
        }
        let mut total = 0.0;
        for t in &self.trajectories {
            let pred = rollout(model, &t.states[0], &t.inputs);
            let e = pred_error(t, &pred)?;
            if !e.is_finite() {
                return Err(Error::NonFinite("prediction"));
            }
            total += e;
        }
        Ok(total / self.trajectories.len() as f64)
    }
}

/// One row of a comparison; `None` entries were not measured or failed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub e_pred: Option<f64>,
    pub e_track: Option<f64>,
    pub effort_mean: Option<f64>,
    pub effort_integral: Option<f64>,
    pub solve_time: Option<f64>,
    pub train_time: Option<f64>,
}

/// Tracking experiment shared by all methods of a comparison.
#[derive(Debug, Clone)]
pub struct TrackingSetup<'a> {
    pub system: &'a SystemSpec,
    pub reference: &'a [Vec<f64>],
    pub cfg: &'a MpcConfig,
    pub channels: &'a [usize],
    pub seed: u64,
}

/// Prediction and (optionally) tracking metrics of one model.
pub fn evaluate(model: &KoopmanModel, eval: Option<&EvalSet>, tracking: Option<&TrackingSetup>) -> Metrics {
    let mut m = Metrics::default();
    if let Some(e) = eval {
        match e.mean_pred_error(model) {
            Ok(v) => m.e_pred = Some(v),
            Err(err) => log::warn!("{} prediction failed: {err}", model.provenance),
        }
    }
    if let Some(t) = tracking {
        match track(t.system, model, t.reference, t.cfg, t.seed) {
            Ok(r) if r.diverged_at.is_none() => {
                m.e_track = track_error(&r, t.channels).ok();
                m.effort_mean = Some(r.effort_mean());
                m.effort_integral = Some(r.effort_integral());
                m.solve_time = Some(r.mean_solve_seconds());
            }
            Ok(r) => log::warn!("{} closed loop diverged at step {:?}", model.provenance, r.diverged_at),
            Err(err) => log::warn!("{} tracking failed: {err}", model.provenance),
        }
    }
    m
}

/// Sinusoidal targets on the position channels of a system; velocity
/// channels follow analytically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinusoidRef {
    /// One entry per position channel.
    pub amplitude: Vec<f64>,
    /// rad/s
    pub omega: Vec<f64>,
    pub phase: Vec<f64>,
}

impl SinusoidRef {
    fn check(&self, channels: usize) -> Result<()> {
        if self.amplitude.len() != channels || self.omega.len() != channels || self.phase.len() != channels {
            return Err(Error::DimensionMismatch(format!("sinusoid reference needs {channels} entries per field")));
        }
        if self.amplitude.iter().chain(&self.omega).chain(&self.phase).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sinusoid reference"));
        }
        Ok(())
    }
}

/// `steps + 1` full-state targets at spacing `dt`. For the arm the
/// positions are the joint angles and the velocities their derivatives. For
/// Van der Pol the position is `x1` and `x2 = -x1'`. Other systems take one
/// sinusoid per state.
pub fn sinusoid_reference(system: &SystemSpec, r: &SinusoidRef, dt: f64, steps: usize) -> Result<Vec<Vec<f64>>> {
    let n = system.state_dim();
    let positions = match system {
        SystemSpec::PlanarArm(p) => p.links(),
        SystemSpec::VanDerPol { .. } => 1,
        _ => n,
    };
    r.check(positions)?;
    let out = (0..=steps)
        .map(|k| {
            let t = k as f64 * dt;
            let pos = |i: usize| r.amplitude[i] * (r.omega[i] * t + r.phase[i]).sin();
            let vel = |i: usize| r.amplitude[i] * r.omega[i] * (r.omega[i] * t + r.phase[i]).cos();
            match system {
                SystemSpec::PlanarArm(_) => (0..positions).map(pos).chain((0..positions).map(vel)).collect(),
                SystemSpec::VanDerPol { .. } => vec![pos(0), -vel(0)],
                _ => (0..n).map(pos).collect(),
            }
        })
        .collect();
    Ok(out)
}

/// Column order of the comparison tables.
pub const METHOD_ORDER: [&str; 3] = ["Proposed", "NominalLS", "FBEDMD-fixed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `None` for noise-free data.
    pub snr_db: Option<f64>,
    pub method: String,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

fn method_rank(m: &str) -> usize {
    METHOD_ORDER.iter().position(|x| *x == m).unwrap_or(METHOD_ORDER.len())
}

fn snr_key(s: Option<f64>) -> f64 {
    s.unwrap_or(f64::INFINITY)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "—".to_string(), |x| format!("{x:.4}"))
}

impl Report {
    pub fn push(&mut self, snr_db: Option<f64>, method: &str, metrics: Metrics) {
        self.rows.push(ReportRow { snr_db, method: method.to_string(), metrics });
        self.sort();
    }

    /// SNR descending (noise-free first), then the fixed method order.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            snr_key(b.snr_db)
                .total_cmp(&snr_key(a.snr_db))
                .then(method_rank(&a.method).cmp(&method_rank(&b.method)))
                .then(a.method.cmp(&b.method))
        });
    }

    fn snrs(&self) -> Vec<Option<f64>> {
        let mut out: Vec<Option<f64>> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.snr_db) {
                out.push(r.snr_db);
            }
        }
        out
    }

    fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out.sort_by(|a, b| method_rank(a).cmp(&method_rank(b)).then(a.cmp(b)));
        out
    }

    /// Deterministic metrics only; timings go to [`Report::timing_csv`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from("snr_db,method,e_pred,e_track,effort_mean,effort_integral\n");
        let f = |v: Option<f64>| v.map_or_else(|| "—".to_string(), |x| format!("{x}"));
        for r in &self.rows {
            let m = &r.metrics;
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.snr_db.map_or_else(|| "clean".to_string(), |s| format!("{s}")),
                r.method,
                f(m.e_pred),
                f(m.e_track),
                f(m.effort_mean),
                f(m.effort_integral)
            ));
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("snr_db,method,solve_seconds,train_seconds\n");
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.snr_db.map_or_else(|| "clean".to_string(), |s| format!("{s}")),
                r.method,
                f(r.metrics.solve_time),
                f(r.metrics.train_time)
            ));
        }
        out
    }

    /// One block per measured metric: SNR rows by method columns.
    pub fn to_text(&self) -> String {
        let methods = self.methods();
        let snrs = self.snrs();
        let metrics: [(&str, fn(&Metrics) -> Option<f64>); 4] = [
            ("Mean prediction error", |m| m.e_pred),
            ("Mean tracking error", |m| m.e_track),
            ("Control effort (mean |u| per step)", |m| m.effort_mean),
            ("Control effort (integral of |u| dt)", |m| m.effort_integral),
        ];
        let width = methods.iter().map(|m| m.chars().count()).max().unwrap_or(8).max(10);
        let mut out = String::new();
        for (title, get) in metrics {
            if !self.rows.iter().any(|r| get(&r.metrics).is_some()) {
                continue;
            }
            out.push_str(title);
            out.push('\n');
            out.push_str(&format!("{:>8}", "SNR"));
            for m in &methods {
                out.push_str(&format!("  {m:>width$}"));
            }
            out.push('\n');
            for s in &snrs {
                out.push_str(&format!("{:>8}", s.map_or_else(|| "clean".to_string(), |v| format!("{v} dB"))));
                for m in &methods {
                    let v = self.rows.iter().find(|r| r.snr_db == *s && &r.method == m).and_then(|r| get(&r.metrics));
                    out.push_str(&format!("  {:>width$}", cell(v)));
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

/// Noise level of a Monte-Carlo run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel {
    SnrDb(f64),
    /// Same std on every channel.
    Sigma(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasMcConfig {
    /// Discrete-time ground truth `x+ = A x + B u`.
    pub a: Mat,
    pub b: Mat,
    pub noise: NoiseLevel,
    pub columns: usize,
    pub draws: usize,
    pub corrupt_inputs: bool,
    pub seed: u64,
}

impl BiasMcConfig {
    /// Two states, one input: `A = 0.95 R(0.1)`, `B = (0, 0.5)`.
    pub fn oracle(noise: NoiseLevel, seed: u64) -> Self {
        let th: f64 = 0.1;
        let a = Mat::from_rows(&[vec![th.cos(), -th.sin()], vec![th.sin(), th.cos()]]).expect("2x2").scale(0.95);
        let b = Mat::from_rows(&[vec![0.0], vec![0.5]]).expect("2x1");
        BiasMcConfig { a, b, noise, columns: 2000, draws: 500, corrupt_inputs: true, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasDiagnostics {
    pub n_draws: usize,
    /// Noise std per channel, states then inputs.
    pub sigma: Vec<f64>,
    /// `|mean(K_fm^2) - K_f^2|_F`
    pub dev_nominal: f64,
    /// `|mean(K_prop^2) - K_f^2|_F`
    pub dev_proposed: f64,
    /// `dev_proposed / dev_nominal`; NaN when both vanish.
    pub ratio: f64,
    pub ratio_defined: bool,
    /// Draws where the proposed square was closer to `K_f^2`.
    pub wins: usize,
    /// One-sided sign-test p-value for `wins`.
    pub sign_test_p: f64,
    /// Draws violating the small-noise bound.
    pub violations: usize,
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    if wins == 0 {
        return 1.0;
    }
    Binomial::new(0.5, n as u64).expect("valid binomial").sf(wins as u64 - 1)
}

/// Fits forward, backward and reduced-bias operators on many independent
/// noise draws over fixed clean data from a known linear system, and
/// compares the average operator squares against the truth.
pub fn bias_mc(cfg: &BiasMcConfig) -> Result<BiasDiagnostics> {
    let (n, m) = (cfg.a.rows(), cfg.b.cols());
    if !cfg.a.is_square() || cfg.b.rows() != n {
        return Err(Error::DimensionMismatch("bias_mc system matrices".into()));
    }
    if cfg.draws < 100 {
        return Err(Error::Precondition(format!("bias_mc needs at least 100 draws, got {}", cfg.draws)));
    }
    if cfg.columns <= n + m {
        return Err(Error::Precondition("bias_mc needs more columns than regressors".into()));
    }
    let truth = BlockOp::new(cfg.a.clone(), cfg.b.clone())?;
    let kf_full = truth.to_full();
    let kf_sq = kf_full.matmul(&kf_full);

    // fixed clean triplets with independent columns
    let mut rng = stream(cfg.seed, "bias-clean", 0);
    let s = cfg.columns;
    let mut sample = |rows: usize| Mat::from_fn(rows, s, |_, _| rng.gen_range(-1.0..1.0));
    let x_minus = sample(n);
    let u_minus = sample(m);
    let u = sample(m);
    let x = &cfg.a.matmul(&x_minus) + &cfg.b.matmul(&u_minus);
    let x_plus = &cfg.a.matmul(&x) + &cfg.b.matmul(&u);

    let rms = |mats: &[&Mat], r: usize| {
        let (sum, cnt) = mats.iter().fold((0.0, 0usize), |(acc, c), mm| (acc + mm.row(r).iter().map(|v| v * v).sum::<f64>(), c + mm.cols()));
        (sum / cnt as f64).sqrt()
    };
    let sigma: Vec<f64> = match cfg.noise {
        NoiseLevel::Sigma(sg) => vec![sg; n + m],
        NoiseLevel::SnrDb(db) => {
            let f = 10f64.powf(-db / 20.0);
            let mut v: Vec<f64> = (0..n).map(|r| rms(&[&x_minus, &x, &x_plus], r) * f).collect();
            v.extend((0..m).map(|r| rms(&[&u_minus, &u], r) * f));
            v
        }
    };
    if sigma.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Precondition("noise level must be finite and >= 0".into()));
    }
    let (sx, su) = sigma.split_at(n);
    let su: Vec<f64> = if cfg.corrupt_inputs { su.to_vec() } else { vec![0.0; m] };

    let psi = Mat::vstack(&x, &u);
    let psi_gram_inv_norm = norm2_est(&inv(&psi.matmul_t(&psi))?);
    let lift = Lift::Identity { n };

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut sum_nom = Mat::zeros(n + m, n + m);
    let mut sum_prop = Mat::zeros(n + m, n + m);
    let mut wins = 0;
    let mut violations = 0;
    for d in 0..cfg.draws {
        let mut rng = stream(cfg.seed, "bias-noise", d as u64);
        let mut noise = |rows: usize, sg: &[f64]| Mat::from_fn(rows, s, |r, _| if sg[r] > 0.0 { sg[r] * normal.sample(&mut rng) } else { 0.0 });
        let nx_minus = noise(n, sx);
        let nx = noise(n, sx);
        let nx_plus = noise(n, sx);
        let nu_minus = noise(m, &su);
        let nu = noise(m, &su);

        let n_psi = Mat::vstack(&nx, &nu);
        let cross = &(&n_psi.matmul_t(&psi) + &psi.matmul_t(&n_psi)) + &n_psi.matmul_t(&n_psi);
        if psi_gram_inv_norm * norm2_est(&cross) >= 0.1 {
            violations += 1;
        }

        let batch = crate::datagen::TripletBatch {
            xm_minus: &x_minus + &nx_minus,
            xm: &x + &nx,
            xm_plus: &x_plus + &nx_plus,
            um_minus: &u_minus + &nu_minus,
            um: &u + &nu,
            dt: 1.0,
            origin: vec![(0, 0); s],
        };
        let (kfm, kbm) = fit_forward_backward(&batch, &lift)?;
        let kp = reduced_bias(&kfm, &kbm)?;
        let nom_sq = kfm.to_full().matmul(&kfm.to_full());
        let prop_sq = kp.to_full().matmul(&kp.to_full());
        if frob(&(&prop_sq - &kf_sq)) < frob(&(&nom_sq - &kf_sq)) {
            wins += 1;
        }
        sum_nom += &nom_sq;
        sum_prop += &prop_sq;
    }
    if violations * 10 > cfg.draws {
        return Err(Error::AssumptionViolated { violations, draws: cfg.draws });
    }
    let k = 1.0 / cfg.draws as f64;
    let dev_nominal = frob(&(&sum_nom.scale(k) - &kf_sq));
    let dev_proposed = frob(&(&sum_prop.scale(k) - &kf_sq));
    let ratio_defined = dev_nominal > 1e-10;
    Ok(BiasDiagnostics {
        n_draws: cfg.draws,
        sigma,
        dev_nominal,
        dev_proposed,
        ratio: if ratio_defined { dev_proposed / dev_nominal } else { f64::NAN },
        ratio_defined,
        wins,
        sign_test_p: sign_test_p(wins, cfg.draws),
        violations,
    })
}
