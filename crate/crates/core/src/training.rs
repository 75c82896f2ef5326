//! Joint encoder and forward/backward operator training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::TripletBatch;
use crate::error::{Error, Result};
use crate::lifting::{EncoderParams, Standardizer};
use crate::numerics::{frob, Mat};
use crate::seed::stream;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// prediction, lifted-state, consistency
    pub alpha: [f64; 3],
    /// L1 and squared-L2 penalties on encoder parameters
    pub gamma: [f64; 2],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: [1.0, 0.5, 0.01], gamma: [0.0, 0.0] }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().chain(&self.gamma).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Precondition("loss weights must be finite and >= 0".into()));
        }
        if self.alpha[0] == 0.0 && self.alpha[1] == 0.0 {
            return Err(Error::Precondition("one of the prediction or lifted-state weights must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub fpred: f64,
    pub flift: f64,
    pub bpred: f64,
    pub blift: f64,
    pub con: f64,
    pub reg: f64,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.alpha[0] * (self.fpred + self.bpred) + w.alpha[1] * (self.flift + self.blift) + w.alpha[2] * self.con + self.reg
    }

    fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.fpred += s * o.fpred;
        self.flift += s * o.flift;
        self.bpred += s * o.bpred;
        self.blift += s * o.blift;
        self.con += s * o.con;
        self.reg += s * o.reg;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Trainable parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub encoder: EncoderParams,
    pub a_f: Mat,
    pub b_f: Mat,
    pub a_b: Mat,
    pub b_b: Mat,
    pub adam: Adam,
}

impl TrainState {
    /// Operators start at `A = I`, `B = 0`.
    pub fn new(encoder: EncoderParams, m: usize) -> Self {
        let big_n = encoder.input_dim() + encoder.output_dim();
        let n_params = encoder.num_params() + 2 * big_n * (big_n + m);
        TrainState {
            encoder,
            a_f: Mat::identity(big_n),
            b_f: Mat::zeros(big_n, m),
            a_b: Mat::identity(big_n),
            b_b: Mat::zeros(big_n, m),
            adam: Adam::new(n_params),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn lifted_dim(&self) -> usize {
        self.a_f.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.b_f.cols()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.adam.m.len());
        self.encoder.params_to_vec(&mut v);
        for m in [&self.a_f, &self.b_f, &self.a_b, &self.b_b] {
            v.extend_from_slice(m.data());
        }
        v
    }

    pub fn set_params(&mut self, v: &[f64]) {
        let mut at = self.encoder.params_from_slice(v);
        for m in [&mut self.a_f, &mut self.b_f, &mut self.a_b, &mut self.b_b] {
            let k = m.data().len();
            m.data_mut().copy_from_slice(&v[at..at + k]);
            at += k;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let (nn, m) = (self.lifted_dim(), self.input_dim());
        if self.encoder.input_dim() + self.encoder.output_dim() != nn
            || self.a_f.shape() != (nn, nn)
            || self.a_b.shape() != (nn, nn)
            || self.b_b.shape() != (nn, m)
        {
            return Err(Error::DimensionMismatch("train state blocks disagree on lifted size".into()));
        }
        Ok(())
    }
}

/// `sum |w|` and `sum w^2` over the encoder parameters.
fn encoder_norms(p: &EncoderParams) -> (f64, f64) {
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for l in &p.layers {
        for v in l.w.data().iter().chain(&l.b) {
            l1 += v.abs();
            l2 += v * v;
        }
    }
    (l1, l2)
}

fn check_batch(b: &TripletBatch, st: &TrainState) -> Result<()> {
    if b.is_empty() {
        return Err(Error::Empty);
    }
    if b.xm.rows() != st.state_dim() || b.um.rows() != st.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "batch has {} states / {} inputs, model expects {} / {}",
            b.xm.rows(),
            b.um.rows(),
            st.state_dim(),
            st.input_dim()
        )));
    }
    Ok(())
}

/// Loss terms and, when `want_grad`, the flat gradient of the total loss in
/// [`TrainState::params`] order.
fn evaluate(b: &TripletBatch, st: &TrainState, w: &LossWeights, want_grad: bool) -> (LossTerms, Option<Vec<f64>>) {
    let s = b.len();
    let n = st.state_dim();
    let nn = st.lifted_dim();
    let inv = 1.0 / s as f64;

    // one encoder pass over [X- | X | X+]
    let x_all = Mat::hstack(&Mat::hstack(&b.xm_minus, &b.xm), &b.xm_plus);
    let cache = st.encoder.forward(&x_all);
    let zeta = if st.encoder.layers.is_empty() { Mat::zeros(0, 3 * s) } else { cache.output().clone() };
    let z_all = Mat::vstack(&x_all, &zeta);
    let z_minus = z_all.block(0, nn, 0, s);
    let z = z_all.block(0, nn, s, 2 * s);
    let z_plus = z_all.block(0, nn, 2 * s, 3 * s);

    let r_f = &(&z_plus - &st.a_f.matmul(&z)) - &st.b_f.matmul(&b.um);
    let r_b = &(&z_minus - &st.a_b.matmul(&z)) - &st.b_b.matmul(&b.um_minus);
    let top_sq = |r: &Mat| r.data()[..n * s].iter().map(|v| v * v).sum::<f64>();
    let e1 = &st.a_f.matmul(&st.a_b) - &Mat::identity(nn);
    let e2 = &st.a_f.matmul(&st.b_b) + &st.b_f;
    let (l1, l2) = encoder_norms(&st.encoder);
    let terms = LossTerms {
        fpred: top_sq(&r_f) * inv,
        flift: r_f.sum_sq() * inv,
        bpred: top_sq(&r_b) * inv,
        blift: r_b.sum_sq() * inv,
        con: e1.sum_sq() + e2.sum_sq(),
        reg: w.gamma[0] * l1 + w.gamma[1] * l2,
    };
    if !want_grad {
        return (terms, None);
    }

    let [a1, a2, a3] = w.alpha;
    // dL/dR = (2/s) (a2 R + a1 C^T C R)
    let weight_residual = |r: &Mat| {
        let mut g = r.scale(2.0 * a2 * inv);
        for (i, v) in g.data_mut()[..n * s].iter_mut().enumerate() {
            *v += 2.0 * a1 * inv * r.data()[i];
        }
        g
    };
    let g_f = weight_residual(&r_f);
    let g_b = weight_residual(&r_b);

    let mut d_af = g_f.matmul_t(&z).scale(-1.0);
    d_af.axpy(2.0 * a3, &e1.matmul_t(&st.a_b));
    d_af.axpy(2.0 * a3, &e2.matmul_t(&st.b_b));
    let mut d_bf = g_f.matmul_t(&b.um).scale(-1.0);
    d_bf.axpy(2.0 * a3, &e2);
    let mut d_ab = g_b.matmul_t(&z).scale(-1.0);
    d_ab.axpy(2.0 * a3, &st.a_f.t_matmul(&e1));
    let mut d_bb = g_b.matmul_t(&b.um_minus).scale(-1.0);
    d_bb.axpy(2.0 * a3, &st.a_f.t_matmul(&e2));

    let mut grad = Vec::with_capacity(st.adam.m.len());
    if !st.encoder.layers.is_empty() {
        let d_z = &st.a_f.t_matmul(&g_f).scale(-1.0) - &st.a_b.t_matmul(&g_b);
        let mut d_zeta_all = Mat::zeros(nn - n, 3 * s);
        d_zeta_all.set_block(0, 0, &g_b.block(n, nn, 0, s));
        d_zeta_all.set_block(0, s, &d_z.block(n, nn, 0, s));
        d_zeta_all.set_block(0, 2 * s, &g_f.block(n, nn, 0, s));
        let (mut layer_grads, _) = st.encoder.backward(&cache, &d_zeta_all, false);
        for (lg, l) in layer_grads.iter_mut().zip(&st.encoder.layers) {
            for (g, p) in lg.w.data_mut().iter_mut().zip(l.w.data()).chain(lg.b.iter_mut().zip(&l.b)) {
                *g += w.gamma[0] * p.signum() * (*p != 0.0) as u8 as f64 + 2.0 * w.gamma[1] * p;
            }
        }
        EncoderParams { norm: Standardizer::identity(n), layers: layer_grads }.params_to_vec(&mut grad);
    }
    for m in [&d_af, &d_bf, &d_ab, &d_bb] {
        grad.extend_from_slice(m.data());
    }
    (terms, Some(grad))
}

pub fn loss_terms(b: &TripletBatch, st: &TrainState, w: &LossWeights) -> Result<LossTerms> {
    check_batch(b, st)?;
    Ok(evaluate(b, st, w, false).0)
}

pub fn total_loss(b: &TripletBatch, st: &TrainState, w: &LossWeights) -> Result<f64> {
    Ok(loss_terms(b, st, w)?.total(w))
}

/// Exact gradient of [`total_loss`] in [`TrainState::params`] order.
pub fn gradient(b: &TripletBatch, st: &TrainState, w: &LossWeights) -> Result<(LossTerms, Vec<f64>)> {
    check_batch(b, st)?;
    let (t, g) = evaluate(b, st, w, true);
    let g = g.expect("gradient requested");
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        let enc = st.encoder.num_params();
        let nn = st.lifted_dim();
        let m = st.input_dim();
        let sizes = [("encoder", enc), ("A_f", nn * nn), ("B_f", nn * m), ("A_b", nn * nn), ("B_b", nn * m)];
        let mut at = 0;
        let mut name = "?";
        for (label, k) in sizes {
            if i < at + k {
                name = label;
                break;
            }
            at += k;
        }
        return Err(Error::NonFiniteGradient(format!("{name} entry {} = {}", i - at, g[i])));
    }
    Ok((t, g))
}

/// One Adam update; `clip` rescales the gradient to that global norm.
pub fn grad_step(b: &TripletBatch, st: &mut TrainState, w: &LossWeights, lr: f64, clip: Option<f64>) -> Result<LossTerms> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Precondition(format!("learning rate must be > 0, got {lr}")));
    }
    let (terms, mut g) = gradient(b, st, w)?;
    if let Some(c) = clip {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > c {
            g.iter_mut().for_each(|v| *v *= c / norm);
        }
    }
    let mut theta = st.params();
    st.adam.step(&mut theta, &g, lr);
    st.set_params(&theta);
    Ok(terms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Encoder widths after the input: hidden layers then the output size.
    pub encoder: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub weights: LossWeights,
    /// Global gradient-norm clip; `None` disables.
    pub clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: vec![20, 20, 20, 10],
            epochs: 600,
            batch_size: 256,
            lr: 1e-3,
            lr_decay: 0.5,
            decay_every: 200,
            weights: LossWeights::default(),
            clip: Some(10.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Precondition("batch_size and decay_every must be > 0".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0 && self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(Error::Precondition("lr and lr_decay must be > 0".into()));
        }
        if matches!(self.clip, Some(c) if !(c.is_finite() && c > 0.0)) {
            return Err(Error::Precondition("clip must be > 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Epoch-mean losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub terms: LossTerms,
    pub total: f64,
}

/// Fresh state: standardizer fitted on `data.xm`, seeded Xavier encoder.
pub fn init_state(data: &TripletBatch, cfg: &TrainConfig) -> Result<TrainState> {
    let n = data.xm.rows();
    let mut dims = vec![n];
    dims.extend(&cfg.encoder);
    let mut encoder = EncoderParams::init(&dims, &mut stream(cfg.seed, "encoder-init", 0))?;
    encoder.norm = Standardizer::fit(&data.xm);
    Ok(TrainState::new(encoder, data.um.rows()))
}

/// Shuffled mini-batch Adam over `data`; deterministic for a given seed.
pub fn train(data: &TripletBatch, cfg: &TrainConfig) -> Result<(TrainState, Vec<EpochLoss>)> {
    let st = init_state(data, cfg)?;
    train_from(data, cfg, st)
}

pub fn train_from(data: &TripletBatch, cfg: &TrainConfig, mut st: TrainState) -> Result<(TrainState, Vec<EpochLoss>)> {
    cfg.validate()?;
    st.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::Precondition(format!("{} triplets, fewer than batch size {}", data.len(), cfg.batch_size)));
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, "shuffle", epoch as u64));
        let lr = cfg.lr_at(epoch);
        let mut acc = LossTerms::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(chunk);
            let t = grad_step(&batch, &mut st, &cfg.weights, lr, cfg.clip)?;
            acc.add_scaled(&t, chunk.len() as f64 / data.len() as f64);
        }
        let total = acc.total(&cfg.weights);
        log::debug!("epoch {epoch}: total {total:.6e}");
        history.push(EpochLoss { epoch, terms: acc, total });
    }
    Ok((st, history))
}

/// Frobenius norm of the consistency residual `A_f A_b - I`.
pub fn consistency_gap(st: &TrainState) -> f64 {
    frob(&(&st.a_f.matmul(&st.a_b) - &Mat::identity(st.lifted_dim())))
}
