//! Ground-truth continuous dynamics and a fixed-step RK4 flow map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cholesky, cholesky_solve, Mat};

/// State norm beyond which a simulation is declared diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// Physical parameters of a planar serial arm with revolute joints.
///
/// Joint angles are measured from the horizontal x-axis (first joint) or
/// relative to the previous link. Gravity acts along -y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmParams {
    /// kg
    pub mass: Vec<f64>,
    /// m
    pub length: Vec<f64>,
    /// distance from the joint to the link's center of mass, m
    pub com: Vec<f64>,
    /// rotational inertia about the center of mass, kg m^2
    pub inertia: Vec<f64>,
    /// m/s^2
    pub gravity: f64,
}

impl ArmParams {
    pub fn uniform(links: usize, mass: f64, length: f64, com: f64, inertia: f64, gravity: f64) -> Self {
        ArmParams {
            mass: vec![mass; links],
            length: vec![length; links],
            com: vec![com; links],
            inertia: vec![inertia; links],
            gravity,
        }
    }

    /// m = 0.1 kg, l = 0.33 m, a = l/2, in-plane inertia 1.5 kg m^2, g = 9.81.
    pub fn benchmark(links: usize) -> Self {
        ArmParams::uniform(links, 0.1, 0.33, 0.165, 1.5, 9.81)
    }

    pub fn links(&self) -> usize {
        self.mass.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.links();
        if n == 0 {
            return Err(Error::Precondition("arm needs at least one link".into()));
        }
        if [self.length.len(), self.com.len(), self.inertia.len()].iter().any(|&l| l != n) {
            return Err(Error::DimensionMismatch("arm parameter vectors differ in length".into()));
        }
        let positive = self.mass.iter().chain(&self.length).chain(&self.com).chain(&self.inertia);
        if positive.clone().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Precondition("arm masses, lengths, com offsets and inertias must be > 0".into()));
        }
        if !(self.gravity.is_finite() && self.gravity >= 0.0) {
            return Err(Error::Precondition("gravity must be >= 0".into()));
        }
        Ok(())
    }
}

/// A benchmark system with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    /// `x1' = -x2`, `x2' = mu (x1^2 - 1) x2 + x1 + u`.
    VanDerPol { mu: f64 },
    PlanarArm(ArmParams),
    /// Continuous linear system `x' = A x + B u`.
    Linear { a: Mat, b: Mat },
    /// `x1' = mu x1`, `x2' = lambda (x2 - x1^2) + u`; exactly linear in
    /// the observables `(x1, x2, x1^2)`, also under RK4 discretization.
    SlowManifold { mu: f64, lambda: f64 },
}

impl SystemSpec {
    pub fn van_der_pol() -> Self {
        SystemSpec::VanDerPol { mu: 1.0 }
    }

    pub fn planar_arm(links: usize) -> Self {
        SystemSpec::PlanarArm(ArmParams::benchmark(links))
    }

    pub fn state_dim(&self) -> usize {
        match self {
            SystemSpec::VanDerPol { .. } | SystemSpec::SlowManifold { .. } => 2,
            SystemSpec::PlanarArm(p) => 2 * p.links(),
            SystemSpec::Linear { a, .. } => a.rows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            SystemSpec::VanDerPol { .. } | SystemSpec::SlowManifold { .. } => 1,
            SystemSpec::PlanarArm(p) => p.links(),
            SystemSpec::Linear { b, .. } => b.cols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SystemSpec::VanDerPol { mu } => {
                if !(mu.is_finite() && *mu > 0.0) {
                    return Err(Error::Precondition("Van der Pol mu must be > 0".into()));
                }
            }
            SystemSpec::PlanarArm(p) => p.validate()?,
            SystemSpec::Linear { a, b } => {
                if !a.is_square() || a.rows() != b.rows() || a.rows() == 0 {
                    return Err(Error::DimensionMismatch(format!(
                        "linear system A {:?}, B {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
            }
            SystemSpec::SlowManifold { mu, lambda } => {
                if !(mu.is_finite() && lambda.is_finite()) {
                    return Err(Error::NonFinite("slow manifold parameters"));
                }
            }
        }
        Ok(())
    }

    /// Continuous-time vector field.
    pub fn deriv(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match self {
            SystemSpec::VanDerPol { mu } => vdp_deriv(x, u[0], *mu).to_vec(),
            SystemSpec::PlanarArm(p) => {
                let k = p.links();
                arm_deriv(&x[..k], &x[k..], u, p)
            }
            SystemSpec::Linear { a, b } => {
                let mut dx = a.matvec(x);
                for (d, bu) in dx.iter_mut().zip(b.matvec(u)) {
                    *d += bu;
                }
                dx
            }
            SystemSpec::SlowManifold { mu, lambda } => {
                vec![mu * x[0], lambda * (x[1] - x[0] * x[0]) + u[0]]
            }
        }
    }

    /// Indices of the position coordinates (all states for the non-arm systems).
    pub fn position_channels(&self) -> Vec<usize> {
        match self {
            SystemSpec::PlanarArm(p) => (0..p.links()).collect(),
            _ => (0..self.state_dim()).collect(),
        }
    }
}

/// A sampled trajectory; `inputs[k]` is held on `[t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(dt: f64, states: Vec<Vec<f64>>, inputs: Vec<Vec<f64>>) -> Result<Self> {
        let t = Trajectory { dt, states, inputs };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Precondition(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.states.is_empty() {
            return Err(Error::Precondition("trajectory has no states".into()));
        }
        if self.inputs.len() + 1 != self.states.len() {
            return Err(Error::LengthMismatch(self.states.len(), self.inputs.len() + 1));
        }
        let n = self.states[0].len();
        if self.states.iter().any(|s| s.len() != n) {
            return Err(Error::DimensionMismatch("ragged states".into()));
        }
        if let Some(m) = self.inputs.first().map(Vec::len) {
            if self.inputs.iter().any(|u| u.len() != m) {
                return Err(Error::DimensionMismatch("ragged inputs".into()));
            }
        }
        if self.states.iter().chain(&self.inputs).flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }
}

pub fn vdp_deriv(x: &[f64], u: f64, mu: f64) -> [f64; 2] {
    [-x[1], mu * (-1.0 + x[0] * x[0]) * x[1] + x[0] + u]
}

/// Inverse dynamics of the planar arm by a recursive Newton-Euler pass.
///
/// Returns the joint torques that produce `qdd` at `(q, qd)`; gravity is
/// included when `with_gravity` is set.
pub fn arm_inverse_dynamics(p: &ArmParams, q: &[f64], qd: &[f64], qdd: &[f64], with_gravity: bool) -> Vec<f64> {
    let n = p.links();
    let cross = |a: [f64; 2], b: [f64; 2]| a[0] * b[1] - a[1] * b[0];

    let mut theta = 0.0;
    let mut omega = 0.0;
    let mut alpha = 0.0;
    // gravity enters as an upward acceleration of the base
    let mut acc_joint = [0.0, if with_gravity { p.gravity } else { 0.0 }];
    let mut acc_com = vec![[0.0; 2]; n];
    let mut dirs = vec![[0.0; 2]; n];
    let mut alphas = vec![0.0; n];
    for i in 0..n {
        theta += q[i];
        omega += qd[i];
        alpha += qdd[i];
        let e = [theta.cos(), theta.sin()];
        let ep = [-theta.sin(), theta.cos()];
        let w2 = omega * omega;
        acc_com[i] = [
            acc_joint[0] + p.com[i] * (alpha * ep[0] - w2 * e[0]),
            acc_joint[1] + p.com[i] * (alpha * ep[1] - w2 * e[1]),
        ];
        acc_joint = [
            acc_joint[0] + p.length[i] * (alpha * ep[0] - w2 * e[0]),
            acc_joint[1] + p.length[i] * (alpha * ep[1] - w2 * e[1]),
        ];
        dirs[i] = e;
        alphas[i] = alpha;
    }

    let mut tau = vec![0.0; n];
    let mut f_next = [0.0; 2];
    let mut n_next = 0.0;
    for i in (0..n).rev() {
        let fc = [p.mass[i] * acc_com[i][0], p.mass[i] * acc_com[i][1]];
        let e = dirs[i];
        let moment = p.inertia[i] * alphas[i]
            + cross([p.com[i] * e[0], p.com[i] * e[1]], fc)
            + cross([p.length[i] * e[0], p.length[i] * e[1]], f_next)
            + n_next;
        tau[i] = moment;
        f_next = [fc[0] + f_next[0], fc[1] + f_next[1]];
        n_next = moment;
    }
    tau
}

/// Joint-space mass matrix, one Newton-Euler pass per column.
pub fn arm_mass_matrix(p: &ArmParams, q: &[f64]) -> Mat {
    let n = p.links();
    let zeros = vec![0.0; n];
    let mut m = Mat::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        m.set_col(j, &arm_inverse_dynamics(p, q, &zeros, &e, false));
    }
    m
}

/// Coriolis, centrifugal and gravity torques `C(q, qd) qd + g(q)`.
pub fn arm_bias(p: &ArmParams, q: &[f64], qd: &[f64]) -> Vec<f64> {
    arm_inverse_dynamics(p, q, qd, &vec![0.0; p.links()], true)
}

/// Returns `(qd, M(q)^-1 (tau - C(q, qd) qd - g(q)))`.
pub fn arm_deriv(q: &[f64], qd: &[f64], tau: &[f64], p: &ArmParams) -> Vec<f64> {
    let m = arm_mass_matrix(p, q);
    let h = arm_bias(p, q, qd);
    let rhs: Vec<f64> = tau.iter().zip(&h).map(|(t, b)| t - b).collect();
    let l = cholesky(&m).expect("arm mass matrix is positive definite for positive parameters");
    let qdd = cholesky_solve(&l, &rhs);
    let mut out = qd.to_vec();
    out.extend(qdd);
    out
}

/// Kinetic plus potential energy of the arm.
pub fn arm_energy(p: &ArmParams, q: &[f64], qd: &[f64]) -> f64 {
    let m = arm_mass_matrix(p, q);
    let kinetic = 0.5 * qd.iter().zip(m.matvec(qd)).map(|(a, b)| a * b).sum::<f64>();
    let mut theta = 0.0;
    let mut y_joint = 0.0;
    let mut potential = 0.0;
    for i in 0..p.links() {
        theta += q[i];
        potential += p.mass[i] * p.gravity * (y_joint + p.com[i] * theta.sin());
        y_joint += p.length[i] * theta.sin();
    }
    kinetic + potential
}

/// One classical Runge-Kutta step with the input held constant.
pub fn rk4_step<F>(deriv: F, x: &[f64], u: &[f64], dt: f64) -> Vec<f64>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let shifted = |k: &[f64], h: f64| -> Vec<f64> { x.iter().zip(k).map(|(a, b)| a + h * b).collect() };
    let k1 = deriv(x, u);
    let k2 = deriv(&shifted(&k1, 0.5 * dt), u);
    let k3 = deriv(&shifted(&k2, 0.5 * dt), u);
    let k4 = deriv(&shifted(&k3, dt), u);
    (0..x.len()).map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
}

/// Integrates `spec` from `x0` under the input sequence.
pub fn simulate(spec: &SystemSpec, x0: &[f64], inputs: &[Vec<f64>], dt: f64) -> Result<Trajectory> {
    spec.validate()?;
    if x0.len() != spec.state_dim() {
        return Err(Error::DimensionMismatch(format!("x0 has {} entries, system needs {}", x0.len(), spec.state_dim())));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state"));
    }
    if inputs.is_empty() {
        return Err(Error::Precondition("simulate needs at least one input".into()));
    }
    if inputs.iter().any(|u| u.len() != spec.input_dim()) {
        return Err(Error::DimensionMismatch("input dimension".into()));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Precondition(format!("dt must be > 0, got {dt}")));
    }
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.to_vec());
    for (k, u) in inputs.iter().enumerate() {
        let next = rk4_step(|x, u| spec.deriv(x, u), &states[k], u, dt);
        let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::Diverged { step: k + 1, norm });
        }
        states.push(next);
    }
    Ok(Trajectory { dt, states, inputs: inputs.to_vec() })
}

/// Exact discrete `(A_d, B_d)` of the RK4 map of a linear system.
pub fn rk4_linear_discretization(a: &Mat, b: &Mat, dt: f64) -> (Mat, Mat) {
    let n = a.rows();
    let m = b.cols();
    let spec = SystemSpec::Linear { a: a.clone(), b: b.clone() };
    let zero_u = vec![0.0; m];
    let zero_x = vec![0.0; n];
    let mut ad = Mat::zeros(n, n);
    let mut bd = Mat::zeros(n, m);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        ad.set_col(j, &rk4_step(|x, u| spec.deriv(x, u), &e, &zero_u, dt));
    }
    for j in 0..m {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        bd.set_col(j, &rk4_step(|x, u| spec.deriv(x, u), &zero_x, &e, dt));
    }
    (ad, bd)
}
