//! Receding-horizon tracking on a lifted linear model.
//!
//! The stage cost is `1/2 (C z_k - r_k)' Q (C z_k - r_k) + 1/2 u_k' R u_k`
//! summed over `k = 1..H` for states and `k = 0..H-1` for inputs. States
//! are eliminated, leaving a box-constrained program in the inputs.

use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::datagen::NoiseSpec;
use crate::error::{Error, Result};
use crate::numerics::{cholesky, cholesky_solve, sym_eigvals, Mat};
use crate::operator::KoopmanModel;
use crate::seed::stream;
use crate::systems::{rk4_step, SystemSpec, DIVERGENCE_NORM};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 20_000;

/// Soft state box `lo <= x <= hi` with quadratic penalty weight `rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_rho() -> f64 {
    1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub q_x: Vec<f64>,
    pub r_u: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    #[serde(default)]
    pub state_box: Option<StateBox>,
    /// Measurement noise on the fed-back state; its scale is set from the
    /// reference signal's rms per channel.
    pub feedback: NoiseSpec,
}

impl MpcConfig {
    /// `H = 20`, unit weight on `tracked`, `R = 0.01`, noise-free feedback.
    pub fn new(n: usize, tracked: &[usize], m: usize, u_bound: f64) -> Self {
        let mut q_x = vec![0.0; n];
        tracked.iter().for_each(|&i| q_x[i] = 1.0);
        MpcConfig {
            horizon: 20,
            q_x,
            r_u: vec![0.01; m],
            u_min: vec![-u_bound; m],
            u_max: vec![u_bound; m],
            state_box: None,
            feedback: NoiseSpec::clean(),
        }
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Precondition("MPC horizon must be >= 1".into()));
        }
        if self.q_x.len() != n || self.r_u.len() != m || self.u_min.len() != m || self.u_max.len() != m {
            return Err(Error::DimensionMismatch(format!("MPC weights/bounds do not match n = {n}, m = {m}")));
        }
        if self.q_x.iter().any(|q| !(q.is_finite() && *q >= 0.0)) {
            return Err(Error::Precondition("state weights must be >= 0".into()));
        }
        if self.r_u.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Precondition("input weights must be > 0".into()));
        }
        if self.u_min.iter().zip(&self.u_max).any(|(a, b)| !(a < b)) {
            return Err(Error::Precondition("input box needs u_min < u_max".into()));
        }
        if let Some(sb) = &self.state_box {
            if sb.lo.len() != n || sb.hi.len() != n || sb.lo.iter().zip(&sb.hi).any(|(a, b)| !(a <= b)) || !(sb.rho > 0.0) {
                return Err(Error::Precondition("invalid soft state box".into()));
            }
        }
        self.feedback.validate()
    }
}

/// Penalty `rho/2 * sum dist(G u + s, [lo, hi])^2` on predicted states.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftRows {
    pub g: Mat,
    pub offset: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub rho: f64,
}

impl SoftRows {
    fn excess(&self, u: &[f64]) -> Vec<f64> {
        let x = self.g.matvec(u);
        (0..x.len())
            .map(|r| {
                let v = x[r] + self.offset[r];
                if v > self.hi[r] {
                    v - self.hi[r]
                } else if v < self.lo[r] {
                    v - self.lo[r]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// `min 1/2 u'Hu + g'u + c (+ soft penalty)` subject to `lo <= u <= hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct Qp {
    pub hessian: Mat,
    pub gradient: Vec<f64>,
    pub constant: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub soft: Option<SoftRows>,
}

impl Qp {
    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn objective(&self, u: &[f64]) -> f64 {
        let hu = self.hessian.matvec(u);
        let mut f = self.constant + u.iter().zip(&hu).map(|(a, b)| 0.5 * a * b).sum::<f64>();
        f += u.iter().zip(&self.gradient).map(|(a, b)| a * b).sum::<f64>();
        if let Some(s) = &self.soft {
            f += 0.5 * s.rho * s.excess(u).iter().map(|e| e * e).sum::<f64>();
        }
        f
    }

    pub fn grad(&self, u: &[f64]) -> Vec<f64> {
        let mut g = self.hessian.matvec(u);
        g.iter_mut().zip(&self.gradient).for_each(|(a, b)| *a += b);
        if let Some(s) = &self.soft {
            let pen = s.g.t_matvec(&s.excess(u));
            g.iter_mut().zip(pen).for_each(|(a, p)| *a += s.rho * p);
        }
        g
    }

    pub fn project(&self, u: &mut [f64]) {
        for i in 0..u.len() {
            u[i] = u[i].clamp(self.lo[i], self.hi[i]);
        }
    }

    /// `max |u - P(u - grad f(u))|`, zero exactly at a box-KKT point.
    pub fn kkt_residual(&self, u: &[f64]) -> f64 {
        let g = self.grad(u);
        (0..u.len()).map(|i| (u[i] - (u[i] - g[i]).clamp(self.lo[i], self.hi[i])).abs()).fold(0.0, f64::max)
    }
}

/// Prediction matrices: `C z_k = s_k + sum_j G_kj u_j` for `k = 1..H`.
fn prediction(model: &KoopmanModel, z0: &[f64], horizon: usize) -> (Mat, Vec<f64>) {
    let n = model.state_dim();
    let m = model.input_dim();
    // markov[i] = C A^i B
    let mut power_b = model.b.clone();
    let mut markov = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        markov.push(power_b.block(0, n, 0, m));
        power_b = model.a.matmul(&power_b);
    }
    let mut gmat = Mat::zeros(horizon * n, horizon * m);
    let mut free = Vec::with_capacity(horizon * n);
    let mut z = z0.to_vec();
    for k in 1..=horizon {
        z = model.a.matvec(&z);
        free.extend_from_slice(&z[..n]);
        for j in 0..k {
            gmat.set_block((k - 1) * n, j * m, &markov[k - 1 - j]);
        }
    }
    (gmat, free)
}

/// Eliminates states from the horizon problem. `refs` holds the `H`
/// targets for `x_1..x_H`.
pub fn condense(model: &KoopmanModel, z0: &[f64], refs: &[Vec<f64>], cfg: &MpcConfig) -> Result<Qp> {
    let (n, m, h) = (model.state_dim(), model.input_dim(), cfg.horizon);
    cfg.validate(n, m)?;
    if z0.len() != model.lifted_dim() || refs.len() != h || refs.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch("condense: lifted state or reference window".into()));
    }
    let (gmat, free) = prediction(model, z0, h);
    let q: Vec<f64> = (0..h * n).map(|i| cfg.q_x[i % n]).collect();
    let err: Vec<f64> = (0..h * n).map(|i| free[i] - refs[i / n][i % n]).collect();
    // H = G'QG + R, g = G'Q e, c = e'Qe / 2
    let qg = Mat::from_fn(h * n, h * m, |r, c| q[r] * gmat[(r, c)]);
    let mut hess = gmat.t_matmul(&qg);
    for i in 0..h * m {
        hess[(i, i)] += cfg.r_u[i % m];
    }
    // symmetrize against round-off
    let hess = Mat::from_fn(h * m, h * m, |i, j| 0.5 * (hess[(i, j)] + hess[(j, i)]));
    let qe: Vec<f64> = q.iter().zip(&err).map(|(a, b)| a * b).collect();
    let gradient = gmat.t_matvec(&qe);
    let constant = 0.5 * qe.iter().zip(&err).map(|(a, b)| a * b).sum::<f64>();
    let soft = cfg.state_box.as_ref().map(|sb| SoftRows {
        g: gmat.clone(),
        offset: free.clone(),
        lo: (0..h * n).map(|i| sb.lo[i % n]).collect(),
        hi: (0..h * n).map(|i| sb.hi[i % n]).collect(),
        rho: sb.rho,
    });
    Ok(Qp {
        hessian: hess,
        gradient,
        constant,
        lo: (0..h * m).map(|i| cfg.u_min[i % m]).collect(),
        hi: (0..h * m).map(|i| cfg.u_max[i % m]).collect(),
        soft,
    })
}

/// Horizon cost by explicit propagation, the reference path for [`condense`].
pub fn rollout_cost(model: &KoopmanModel, z0: &[f64], refs: &[Vec<f64>], u: &[f64], cfg: &MpcConfig) -> f64 {
    let (n, m) = (model.state_dim(), model.input_dim());
    let mut z = z0.to_vec();
    let mut cost = 0.0;
    for (k, r) in refs.iter().enumerate() {
        let uk = &u[k * m..(k + 1) * m];
        cost += 0.5 * uk.iter().zip(&cfg.r_u).map(|(v, w)| w * v * v).sum::<f64>();
        z = model.step(&z, uk);
        for i in 0..n {
            let e = z[i] - r[i];
            cost += 0.5 * cfg.q_x[i] * e * e;
            if let Some(sb) = &cfg.state_box {
                let d = if z[i] > sb.hi[i] {
                    z[i] - sb.hi[i]
                } else if z[i] < sb.lo[i] {
                    z[i] - sb.lo[i]
                } else {
                    0.0
                };
                cost += 0.5 * sb.rho * d * d;
            }
        }
    }
    cost
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: Vec<f64>,
    pub iterations: usize,
    pub kkt: f64,
    /// False when the iteration cap was hit; `u` is then the best iterate.
    pub converged: bool,
}

#[derive(Clone, Copy, PartialEq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

/// Primal active-set method for the smooth box QP.
fn active_set(qp: &Qp, max_iter: usize) -> Result<(Vec<f64>, usize)> {
    let d = qp.dim();
    let mut u = vec![0.0; d];
    qp.project(&mut u);
    let mut state: Vec<Bound> = (0..d)
        .map(|i| if u[i] == qp.lo[i] && qp.lo[i] > 0.0 {
            Bound::Lower
        } else if u[i] == qp.hi[i] && qp.hi[i] < 0.0 {
            Bound::Upper
        } else {
            Bound::Free
        })
        .collect();
    let scale = qp.hessian.max_abs().max(qp.gradient.iter().fold(0.0, |a: f64, b| a.max(b.abs()))).max(1.0);
    for it in 0..max_iter {
        let free: Vec<usize> = (0..d).filter(|&i| state[i] == Bound::Free).collect();
        let mut target = u.clone();
        if !free.is_empty() {
            let hff = Mat::from_fn(free.len(), free.len(), |a, b| qp.hessian[(free[a], free[b])]);
            let rhs: Vec<f64> = free
                .iter()
                .map(|&i| {
                    -qp.gradient[i] - (0..d).filter(|&j| state[j] != Bound::Free).map(|j| qp.hessian[(i, j)] * u[j]).sum::<f64>()
                })
                .collect();
            let l = cholesky(&hff)?;
            for (&i, v) in free.iter().zip(cholesky_solve(&l, &rhs)) {
                target[i] = v;
            }
        }
        // largest feasible step toward the subspace minimizer
        let mut alpha = 1.0;
        let mut blocking = None;
        for &i in &free {
            let delta = target[i] - u[i];
            if target[i] > qp.hi[i] && delta > 0.0 {
                let a = (qp.hi[i] - u[i]) / delta;
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, Bound::Upper));
                }
            } else if target[i] < qp.lo[i] && delta < 0.0 {
                let a = (qp.lo[i] - u[i]) / delta;
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, Bound::Lower));
                }
            }
        }
        if let Some((j, b)) = blocking {
            for &i in &free {
                u[i] += alpha * (target[i] - u[i]);
            }
            qp.project(&mut u);
            u[j] = if b == Bound::Upper { qp.hi[j] } else { qp.lo[j] };
            state[j] = b;
            continue;
        }
        for &i in &free {
            u[i] = target[i];
        }
        let g = qp.grad(&u);
        let mut worst = 0.0;
        let mut release = None;
        for i in 0..d {
            let violation = match state[i] {
                Bound::Lower => -g[i],
                Bound::Upper => g[i],
                Bound::Free => continue,
            };
            if violation > worst {
                worst = violation;
                release = Some(i);
            }
        }
        match release {
            Some(i) if worst > 1e-13 * scale => state[i] = Bound::Free,
            _ => return Ok((u, it + 1)),
        }
    }
    Ok((u, max_iter))
}

/// Accelerated projected gradient with adaptive restart, from `u0`.
fn fista(qp: &Qp, mut u: Vec<f64>, tol: f64, max_iter: usize) -> (Vec<f64>, usize, bool) {
    let mut lip = *sym_eigvals(&qp.hessian).last().unwrap_or(&1.0);
    if let Some(s) = &qp.soft {
        lip += s.rho * sym_eigvals(&s.g.t_matmul(&s.g)).last().copied().unwrap_or(0.0);
    }
    let step = 1.0 / lip.max(f64::MIN_POSITIVE);
    let mut y = u.clone();
    let mut t: f64 = 1.0;
    for it in 0..max_iter {
        if qp.kkt_residual(&u) < tol {
            return (u, it, true);
        }
        let g = qp.grad(&y);
        let mut next: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        qp.project(&mut next);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        // restart momentum when it points uphill
        let uphill: f64 = g.iter().zip(next.iter().zip(&u)).map(|(gi, (n, o))| gi * (n - o)).sum();
        if uphill > 0.0 {
            y = next.clone();
            t = 1.0;
        } else {
            let beta = (t - 1.0) / t_next;
            y = next.iter().zip(&u).map(|(n, o)| n + beta * (n - o)).collect();
            t = t_next;
        }
        u = next;
    }
    let ok = qp.kkt_residual(&u) < tol;
    (u, max_iter, ok)
}

/// Solves the box-constrained program to KKT residual `tol`.
pub fn solve_box_qp(qp: &Qp, tol: f64, max_iter: usize) -> Result<QpSolution> {
    let d = qp.dim();
    if qp.hessian.shape() != (d, d) || qp.lo.len() != d || qp.hi.len() != d {
        return Err(Error::DimensionMismatch("box QP dimensions".into()));
    }
    if qp.lo.iter().zip(&qp.hi).any(|(a, b)| !(a <= b)) {
        return Err(Error::Precondition("empty box".into()));
    }
    let (u, mut iterations) = active_set(qp, max_iter)?;
    let mut u = u;
    let mut converged = qp.kkt_residual(&u) < tol;
    if !converged {
        let (v, it, ok) = fista(qp, u, tol, max_iter);
        u = v;
        iterations += it;
        converged = ok;
    }
    let kkt = qp.kkt_residual(&u);
    if !converged {
        warn!("box QP stopped after {iterations} iterations with KKT residual {kkt:.3e}");
    }
    Ok(QpSolution { u, iterations, kkt, converged })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcStep {
    pub u: Vec<f64>,
    /// Optimal horizon cost.
    pub cost: f64,
    pub converged: bool,
}

/// First input of the horizon plan from a measured state.
pub fn mpc_step(model: &KoopmanModel, x: &[f64], refs: &[Vec<f64>], cfg: &MpcConfig) -> Result<MpcStep> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("measured state"));
    }
    if x.len() != model.state_dim() {
        return Err(Error::DimensionMismatch("measured state".into()));
    }
    let z0 = model.lift_state(x);
    let qp = condense(model, &z0, refs, cfg)?;
    let sol = solve_box_qp(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let m = model.input_dim();
    Ok(MpcStep { cost: qp.objective(&sol.u), u: sol.u[..m].to_vec(), converged: sol.converged })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub dt: f64,
    /// `reference[k]` is the target for `actual[k]`.
    pub reference: Vec<Vec<f64>>,
    pub actual: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub solve_seconds: Vec<f64>,
    pub cost: Vec<f64>,
    /// Steps whose QP hit the iteration cap.
    pub unconverged: usize,
    /// Step at which the true state left the divergence ball, if any.
    pub diverged_at: Option<usize>,
}

impl TrackResult {
    /// Mean per-step input norm.
    pub fn effort_mean(&self) -> f64 {
        if self.inputs.is_empty() {
            return 0.0;
        }
        self.inputs.iter().map(|u| norm(u)).sum::<f64>() / self.inputs.len() as f64
    }

    /// Time integral of the input norm.
    pub fn effort_integral(&self) -> f64 {
        self.inputs.iter().map(|u| norm(u)).sum::<f64>() * self.dt
    }

    pub fn mean_solve_seconds(&self) -> f64 {
        if self.solve_seconds.is_empty() {
            return 0.0;
        }
        self.solve_seconds.iter().sum::<f64>() / self.solve_seconds.len() as f64
    }

    /// Rows `t, ref.., actual.., u.., cost`; the last row has empty inputs.
    pub fn to_csv(&self) -> String {
        let n = self.reference.first().map_or(0, Vec::len);
        let m = self.inputs.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        (0..n).for_each(|i| out.push_str(&format!(",ref{i}")));
        (0..n).for_each(|i| out.push_str(&format!(",x{i}")));
        (0..m).for_each(|i| out.push_str(&format!(",u{i}")));
        out.push_str(",cost\n");
        for k in 0..self.actual.len() {
            out.push_str(&format!("{}", k as f64 * self.dt));
            for v in self.reference[k].iter().chain(&self.actual[k]) {
                out.push_str(&format!(",{v}"));
            }
            match self.inputs.get(k) {
                Some(u) => u.iter().for_each(|v| out.push_str(&format!(",{v}"))),
                None => (0..m).for_each(|_| out.push(',')),
            }
            match self.cost.get(k) {
                Some(c) => out.push_str(&format!(",{c}\n")),
                None => out.push_str(",\n"),
            }
        }
        out
    }

    /// Rows `t, solve_ms`.
    pub fn timing_csv(&self) -> String {
        let mut out = String::from("t,solve_ms\n");
        for (k, s) in self.solve_seconds.iter().enumerate() {
            out.push_str(&format!("{},{}\n", k as f64 * self.dt, s * 1e3));
        }
        out
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Closed loop from `reference[0]`: measure, corrupt, plan, apply through
/// the true dynamics. Runs `reference.len() - 1` steps.
pub fn track(system: &SystemSpec, model: &KoopmanModel, reference: &[Vec<f64>], cfg: &MpcConfig, seed: u64) -> Result<TrackResult> {
    if reference.len() < 2 {
        return Err(Error::Precondition("reference needs at least two samples".into()));
    }
    let n = system.state_dim();
    if model.state_dim() != n || model.input_dim() != system.input_dim() || reference.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch("tracking: system, model and reference dimensions".into()));
    }
    cfg.validate(n, model.input_dim())?;
    let sigma: Vec<f64> = match cfg.feedback.snr_db {
        Some(snr) => {
            let traj = crate::systems::Trajectory { dt: model.dt, states: reference.to_vec(), inputs: vec![vec![]; reference.len() - 1] };
            crate::datagen::channel_sigmas(std::slice::from_ref(&traj), snr).0
        }
        None => vec![0.0; n],
    };
    let mut rng = stream(seed, "feedback-noise", 0);
    let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
    let steps = reference.len() - 1;
    let mut res = TrackResult {
        dt: model.dt,
        reference: vec![reference[0].clone()],
        actual: vec![reference[0].clone()],
        inputs: Vec::with_capacity(steps),
        solve_seconds: Vec::with_capacity(steps),
        cost: Vec::with_capacity(steps),
        unconverged: 0,
        diverged_at: None,
    };
    let mut x = reference[0].clone();
    for k in 0..steps {
        let measured: Vec<f64> = x
            .iter()
            .zip(&sigma)
            .map(|(v, s)| if *s > 0.0 { v + s * rand_distr::Distribution::sample(&normal, &mut rng) } else { *v })
            .collect();
        let window: Vec<Vec<f64>> = (1..=cfg.horizon).map(|j| reference[(k + j).min(steps)].clone()).collect();
        let start = Instant::now();
        let step = mpc_step(model, &measured, &window, cfg)?;
        res.solve_seconds.push(start.elapsed().as_secs_f64());
        if !step.converged {
            res.unconverged += 1;
        }
        x = rk4_step(|s, u| system.deriv(s, u), &x, &step.u, model.dt);
        res.inputs.push(step.u);
        res.cost.push(step.cost);
        res.reference.push(reference[k + 1].clone());
        let nx = norm(&x);
        if !(nx <= DIVERGENCE_NORM) {
            warn!("closed loop diverged at step {} (|x| = {nx:.3e})", k + 1);
            res.diverged_at = Some(k + 1);
            res.reference.pop();
            break;
        }
        res.actual.push(x.clone());
    }
    if res.diverged_at.is_some() {
        // keep the logs aligned: one input fewer than states
        res.inputs.truncate(res.actual.len() - 1);
        res.cost.truncate(res.actual.len() - 1);
        res.solve_seconds.truncate(res.actual.len() - 1);
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::Lift;
    use crate::numerics::solve;
    use crate::operator::{BlockOp, Provenance};
    use crate::systems::rk4_linear_discretization;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_model(nn: usize, n: usize, m: usize, seed: u64) -> KoopmanModel {
        let mut rng = stream(seed, "mpc-model", 0);
        let a = Mat::from_fn(nn, nn, |i, j| if i == j { 0.9 } else { 0.0 } + rng.gen_range(-0.1..0.1));
        let b = Mat::from_fn(nn, m, |_, _| rng.gen_range(-1.0..1.0));
        let lift = if nn == n {
            Lift::Identity { n }
        } else {
            Lift::Dictionary(crate::lifting::Dictionary { n, exponents: (0..nn - n).map(|k| { let mut e = vec![0; n]; e[k % n] = 2 + (k / n) as u32; e }).collect() })
        };
        KoopmanModel::new(BlockOp { a, b }, lift, 0.1, Provenance::GroundTruthLinear).unwrap()
    }

    fn cfg(n: usize, m: usize, h: usize, bound: f64) -> MpcConfig {
        let mut c = MpcConfig::new(n, &(0..n).collect::<Vec<_>>(), m, bound);
        c.horizon = h;
        c.q_x = (0..n).map(|i| 1.0 + i as f64).collect();
        c.r_u = (0..m).map(|i| 0.1 + 0.05 * i as f64).collect();
        c
    }

    #[test]
    fn one_step_expansion() {
        let model = random_model(3, 2, 1, 0);
        let c = cfg(2, 1, 1, 10.0);
        let z0 = [0.3, -0.2, 0.5];
        let r = vec![vec![1.0, -1.0]];
        let qp = condense(&model, &z0, &r, &c).unwrap();
        let cb = model.c().matmul(&model.b);
        let q = Mat::diag(&c.q_x);
        let expected_h = &cb.t_matmul(&q.matmul(&cb)) + &Mat::diag(&c.r_u);
        let caz: Vec<f64> = model.c().matvec(&model.a.matvec(&z0)).iter().zip(&r[0]).map(|(a, b)| a - b).collect();
        let expected_g = cb.t_matvec(&q.matvec(&caz));
        assert!((&qp.hessian - &expected_h).max_abs() < 1e-14);
        assert!(qp.gradient.iter().zip(&expected_g).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn zero_reference_at_origin_gives_zero_input() {
        let model = random_model(2, 2, 1, 1);
        let step = mpc_step(&model, &[0.0, 0.0], &vec![vec![0.0, 0.0]; 20], &cfg(2, 1, 20, 1.0)).unwrap();
        assert!(step.u.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn condensed_cost_matches_rollout_with_soft_bounds() {
        let model = random_model(4, 2, 2, 2);
        let mut c = cfg(2, 2, 6, 1.0);
        c.state_box = Some(StateBox { lo: vec![-0.1, -0.2], hi: vec![0.1, 0.3], rho: 50.0 });
        let z0 = model.lift_state(&[0.4, -0.3]);
        let refs: Vec<Vec<f64>> = (0..6).map(|k| vec![0.1 * k as f64, -0.05 * k as f64]).collect();
        let qp = condense(&model, &z0, &refs, &c).unwrap();
        let mut rng = stream(3, "u", 0);
        for _ in 0..20 {
            let u: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = qp.objective(&u);
            let b = rollout_cost(&model, &z0, &refs, &u, &c);
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn qp_trivial_cases() {
        let qp = Qp {
            hessian: Mat::identity(1).scale(2.0),
            gradient: vec![-10.0],
            constant: 25.0,
            lo: vec![-1.0],
            hi: vec![1.0],
            soft: None,
        };
        let s = solve_box_qp(&qp, DEFAULT_TOL, 100).unwrap();
        assert_eq!(s.u, vec![1.0]);
        assert!(s.converged);
        let qp = Qp { hessian: Mat::identity(3), gradient: vec![0.0; 3], constant: 0.0, lo: vec![-1.0; 3], hi: vec![1.0; 3], soft: None };
        assert_eq!(solve_box_qp(&qp, DEFAULT_TOL, 100).unwrap().u, vec![0.0; 3]);
    }

    #[test]
    fn interior_optimum_matches_closed_form() {
        let model = random_model(3, 2, 2, 4);
        let c = cfg(2, 2, 8, 1e6);
        let z0 = model.lift_state(&[0.5, 0.1]);
        let refs = vec![vec![0.2, -0.1]; 8];
        let qp = condense(&model, &z0, &refs, &c).unwrap();
        let s = solve_box_qp(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let closed = solve(&qp.hessian, &Mat::col_vec(&qp.gradient)).unwrap().scale(-1.0).into_data();
        assert!(s.u.iter().zip(&closed).all(|(a, b)| (a - b).abs() < 1e-7));
    }

    #[test]
    fn saturating_step_hits_box() {
        let model = random_model(2, 2, 1, 5);
        let c = cfg(2, 1, 10, 0.05);
        let step = mpc_step(&model, &[0.0, 0.0], &vec![vec![50.0, 50.0]; 10], &c).unwrap();
        assert!(step.u[0] == 0.05 || step.u[0] == -0.05, "{:?}", step.u);
        let again = mpc_step(&model, &[0.0, 0.0], &vec![vec![50.0, 50.0]; 10], &c).unwrap();
        assert_eq!(step, again);
    }

    fn linear_plant() -> (SystemSpec, KoopmanModel) {
        let a = Mat::from_rows(&[vec![0.0, 1.0], vec![-1.0, -0.5]]).unwrap();
        let b = Mat::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let (ad, bd) = rk4_linear_discretization(&a, &b, 0.05);
        let model = KoopmanModel::new(BlockOp { a: ad, b: bd }, Lift::Identity { n: 2 }, 0.05, Provenance::GroundTruthLinear).unwrap();
        (SystemSpec::Linear { a, b }, model)
    }

    #[test]
    fn equilibrium_reference_is_held() {
        let (sys, model) = linear_plant();
        let c = MpcConfig::new(2, &[0, 1], 1, 10.0);
        let step = mpc_step(&model, &[0.0, 0.0], &vec![vec![0.0, 0.0]; 20], &c).unwrap();
        assert!(step.u[0].abs() < 1e-6);
        let reference = vec![vec![0.0, 0.0]; 60];
        let res = track(&sys, &model, &reference, &c, 0).unwrap();
        let err = crate::bench::track_error(&res, &[0, 1]).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn tracking_error_decreases_with_horizon() {
        let (sys, model) = linear_plant();
        let reference: Vec<Vec<f64>> = (0..200).map(|k| {
            let t = 0.05 * k as f64;
            vec![0.5 * (0.5 * t).sin(), 0.25 * (0.5 * t).cos()]
        }).collect();
        let mut errs = Vec::new();
        for h in [1, 5, 20] {
            let mut c = MpcConfig::new(2, &[0], 1, 100.0);
            c.horizon = h;
            let res = track(&sys, &model, &reference, &c, 0).unwrap();
            errs.push(crate::bench::track_error(&res, &[0]).unwrap());
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn unstable_model_records_divergence() {
        let (sys, _) = linear_plant();
        // model believes the input pushes the wrong way
        let (ad, bd) = rk4_linear_discretization(
            &Mat::from_rows(&[vec![0.0, 1.0], vec![-1.0, -0.5]]).unwrap(),
            &Mat::from_rows(&[vec![0.0], vec![-1.0]]).unwrap(),
            0.05,
        );
        let wrong = KoopmanModel::new(BlockOp { a: ad, b: bd }, Lift::Identity { n: 2 }, 0.05, Provenance::NominalLs).unwrap();
        let unstable = SystemSpec::Linear { a: Mat::from_rows(&[vec![3.0, 1.0], vec![0.0, 3.0]]).unwrap(), b: Mat::from_rows(&[vec![0.0], vec![1.0]]).unwrap() };
        let _ = sys;
        let mut c = MpcConfig::new(2, &[0, 1], 1, 1e3);
        c.horizon = 5;
        let reference = vec![vec![1.0, 0.0]; 400];
        let res = track(&unstable, &wrong, &reference, &c, 0).unwrap();
        assert!(res.diverged_at.is_some());
        assert_eq!(res.inputs.len() + 1, res.actual.len());
    }

    #[test]
    fn soft_bounds_are_solved_to_kkt() {
        let model = random_model(3, 2, 1, 6);
        let mut c = cfg(2, 1, 10, 2.0);
        c.state_box = Some(StateBox { lo: vec![-0.2, -0.2], hi: vec![0.2, 0.2], rho: 1e3 });
        let z0 = model.lift_state(&[0.1, 0.1]);
        let qp = condense(&model, &z0, &vec![vec![1.0, 1.0]; 10], &c).unwrap();
        let s = solve_box_qp(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(s.converged, "kkt {}", s.kkt);
        assert!(s.u.iter().all(|v| v.abs() <= 2.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn condensed_cost_equals_rollout(seed in 0u64..10_000, h in 1usize..8) {
            let model = random_model(4, 2, 2, seed);
            let c = cfg(2, 2, h, 1.0);
            let mut rng = stream(seed, "prop-u", 0);
            let z0: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let refs: Vec<Vec<f64>> = (0..h).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
            let u: Vec<f64> = (0..2 * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let qp = condense(&model, &z0, &refs, &c).unwrap();
            let a = qp.objective(&u);
            let b = rollout_cost(&model, &z0, &refs, &u, &c);
            prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }

        #[test]
        fn box_qp_solution_is_feasible_and_stationary(seed in 0u64..10_000, d in 1usize..12) {
            let mut rng = stream(seed, "prop-qp", 0);
            let f = Mat::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
            let mut h = f.t_matmul(&f);
            for i in 0..d { h[(i, i)] += 0.1; }
            let g: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let lo: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..0.0)).collect();
            let hi: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
            let qp = Qp { hessian: h, gradient: g, constant: 0.0, lo: lo.clone(), hi: hi.clone(), soft: None };
            let s = solve_box_qp(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            prop_assert!(s.converged);
            prop_assert!(s.kkt < DEFAULT_TOL);
            for i in 0..d { prop_assert!(s.u[i] >= lo[i] && s.u[i] <= hi[i]); }
        }
    }
}
