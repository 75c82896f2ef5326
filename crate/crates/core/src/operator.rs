//! Block Koopman operators, the reduced-bias synthesis, least-squares
//! baselines and linear rollouts.

use serde::{Deserialize, Serialize};

use crate::datagen::TripletBatch;
use crate::error::{Error, Result};
use crate::lifting::Lift;
use crate::numerics::{inv, lstsq_right, solve, sqrtm_principal, Mat};
use crate::systems::Trajectory;
use crate::training::TrainState;

/// The `(N+m) x (N+m)` matrix `[[A, B], [0, I]]`, stored as its top blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockOp {
    pub a: Mat,
    pub b: Mat,
}

impl BlockOp {
    pub fn new(a: Mat, b: Mat) -> Result<Self> {
        if !a.is_square() || a.rows() != b.rows() {
            return Err(Error::DimensionMismatch(format!("block operator A {:?}, B {:?}", a.shape(), b.shape())));
        }
        Ok(BlockOp { a, b })
    }

    pub fn identity(nn: usize, m: usize) -> Self {
        BlockOp { a: Mat::identity(nn), b: Mat::zeros(nn, m) }
    }

    pub fn lifted_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.cols()
    }

    /// `self * other`.
    pub fn mul(&self, other: &BlockOp) -> BlockOp {
        BlockOp { a: self.a.matmul(&other.a), b: &self.a.matmul(&other.b) + &self.b }
    }

    /// Inverse `[[A^-1, -A^-1 B], [0, I]]`.
    pub fn inverse(&self) -> Result<BlockOp> {
        let ai = inv(&self.a)?;
        let b = ai.matmul(&self.b).scale(-1.0);
        Ok(BlockOp { a: ai, b })
    }

    pub fn to_full(&self) -> Mat {
        let (nn, m) = (self.lifted_dim(), self.input_dim());
        let mut k = Mat::identity(nn + m);
        k.set_block(0, 0, &self.a);
        k.set_block(0, nn, &self.b);
        k
    }

    /// Applies the operator to the stacked vector `[z; u]`.
    pub fn apply(&self, z: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut out = self.a.matvec(z);
        for (o, bu) in out.iter_mut().zip(self.b.matvec(u)) {
            *o += bu;
        }
        (out, u.to_vec())
    }
}

/// Forward and backward operators of a training state.
pub fn assemble(st: &TrainState) -> (BlockOp, BlockOp) {
    (BlockOp { a: st.a_f.clone(), b: st.b_f.clone() }, BlockOp { a: st.a_b.clone(), b: st.b_b.clone() })
}

/// Principal square root of `K_f K_b^-1` in block form.
///
/// With `M = A_f A_b^-1` and `N' = B_f - M B_b`, the root is
/// `[[sqrt(M), B_p], [0, I]]` where `(sqrt(M) + I) B_p = N'`.
pub fn reduced_bias(kf: &BlockOp, kb: &BlockOp) -> Result<BlockOp> {
    if kf.a.shape() != kb.a.shape() || kf.b.shape() != kb.b.shape() {
        return Err(Error::DimensionMismatch("forward and backward operators differ in shape".into()));
    }
    let ratio = kf.mul(&kb.inverse()?);
    let a_p = sqrtm_principal(&ratio.a)?;
    let shifted = &a_p + &Mat::identity(a_p.rows());
    let b_p = solve(&shifted, &ratio.b)?;
    Ok(BlockOp { a: a_p, b: b_p })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "DRKN")]
    Drkn,
    #[serde(rename = "NominalLS")]
    NominalLs,
    #[serde(rename = "FBEDMD")]
    FbEdmd,
    GroundTruthLinear,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Drkn => "DRKN",
            Provenance::NominalLs => "NominalLS",
            Provenance::FbEdmd => "FBEDMD",
            Provenance::GroundTruthLinear => "GroundTruthLinear",
        })
    }
}

/// Lifted linear model `z+ = A z + B u`, `x = C z` with `C = [I 0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KoopmanModel {
    pub a: Mat,
    pub b: Mat,
    pub lift: Lift,
    pub dt: f64,
    pub provenance: Provenance,
}

impl KoopmanModel {
    pub fn new(op: BlockOp, lift: Lift, dt: f64, provenance: Provenance) -> Result<Self> {
        let model = KoopmanModel { a: op.a, b: op.b, lift, dt, provenance };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.lift.validate()?;
        let nn = self.lift.lifted_dim();
        if self.a.shape() != (nn, nn) || self.b.rows() != nn {
            return Err(Error::DimensionMismatch(format!(
                "model A {:?}, B {:?} for lifted size {nn}",
                self.a.shape(),
                self.b.shape()
            )));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Precondition("model dt must be > 0".into()));
        }
        if !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::NonFinite("model operators"));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.lift.state_dim()
    }

    pub fn lifted_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn c(&self) -> Mat {
        let n = self.state_dim();
        let mut c = Mat::zeros(n, self.lifted_dim());
        c.set_block(0, 0, &Mat::identity(n));
        c
    }

    pub fn op(&self) -> BlockOp {
        BlockOp { a: self.a.clone(), b: self.b.clone() }
    }

    pub fn lift_state(&self, x: &[f64]) -> Vec<f64> {
        self.lift.lift(x)
    }

    pub fn step(&self, z: &[f64], u: &[f64]) -> Vec<f64> {
        self.op().apply(z, u).0
    }
}

fn stacked_regressor(z: &Mat, u: &Mat) -> Mat {
    Mat::vstack(z, u)
}

fn check_fit_size(batch: &TripletBatch, lift: &Lift) -> Result<()> {
    if batch.xm.rows() != lift.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "batch state dimension {} vs lifting {}",
            batch.xm.rows(),
            lift.state_dim()
        )));
    }
    let q = lift.lifted_dim() + batch.um.rows();
    if batch.len() <= q {
        return Err(Error::Precondition(format!("least squares needs more than {q} columns, got {}", batch.len())));
    }
    Ok(())
}

/// Least-squares forward and backward operators on lifted data.
pub fn fit_forward_backward(batch: &TripletBatch, lift: &Lift) -> Result<(BlockOp, BlockOp)> {
    check_fit_size(batch, lift)?;
    let nn = lift.lifted_dim();
    let z = lift.lift_batch(&batch.xm);
    let kf = lstsq_right(&lift.lift_batch(&batch.xm_plus), &stacked_regressor(&z, &batch.um))?;
    let kb = lstsq_right(&lift.lift_batch(&batch.xm_minus), &stacked_regressor(&z, &batch.um_minus))?;
    let split = |k: &Mat| BlockOp { a: k.block(0, nn, 0, nn), b: k.block(0, nn, nn, k.cols()) };
    Ok((split(&kf), split(&kb)))
}

/// Forward-only least squares, no bias correction.
pub fn nominal_fit(batch: &TripletBatch, lift: &Lift) -> Result<KoopmanModel> {
    check_fit_size(batch, lift)?;
    let nn = lift.lifted_dim();
    let z = lift.lift_batch(&batch.xm);
    let k = lstsq_right(&lift.lift_batch(&batch.xm_plus), &stacked_regressor(&z, &batch.um))?;
    let op = BlockOp { a: k.block(0, nn, 0, nn), b: k.block(0, nn, nn, k.cols()) };
    KoopmanModel::new(op, lift.clone(), batch.dt, Provenance::NominalLs)
}

/// Forward and backward least squares on a fixed lifting, then the
/// reduced-bias root.
pub fn fb_edmd_fit(batch: &TripletBatch, lift: &Lift) -> Result<KoopmanModel> {
    let (kf, kb) = fit_forward_backward(batch, lift)?;
    KoopmanModel::new(reduced_bias(&kf, &kb)?, lift.clone(), batch.dt, Provenance::FbEdmd)
}

/// Where the forward and backward operators of a trained model come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Synthesis {
    /// The linear layers as left by the optimizer.
    Trained,
    /// Exact least-squares operators on the trained encoder, falling back to
    /// the trained layers when the encoder outputs are collinear. The optimizer
    /// leaves the operator entries with step-size noise of order `lr`, which
    /// is larger than the input gains at `dt = 0.01`.
    #[default]
    Refit,
}

/// Reduced-bias model from a trained state, using the trained linear layers.
pub fn drkn_model(st: &TrainState, dt: f64) -> Result<KoopmanModel> {
    let (kf, kb) = assemble(st);
    KoopmanModel::new(reduced_bias(&kf, &kb)?, Lift::Neural(st.encoder.clone()), dt, Provenance::Drkn)
}

/// Reduced-bias model from a trained state; `batch` is the training data.
pub fn drkn_synthesize(st: &TrainState, batch: &TripletBatch, how: Synthesis) -> Result<KoopmanModel> {
    match how {
        Synthesis::Trained => drkn_model(st, batch.dt),
        Synthesis::Refit => {
            let lift = Lift::Neural(st.encoder.clone());
            match fit_forward_backward(batch, &lift) {
                Ok((kf, kb)) => KoopmanModel::new(reduced_bias(&kf, &kb)?, lift, batch.dt, Provenance::Drkn),
                Err(Error::RankDeficient { cond }) => {
                    // collinear encoder outputs; the trained layers are still usable
                    log::warn!("operator refit is rank deficient (cond {cond:.2e}); using the trained layers");
                    drkn_model(st, batch.dt)
                }
                Err(e) => Err(e),
            }
        }
    }
}

/// Lifts `x0` once and propagates linearly.
pub fn rollout(model: &KoopmanModel, x0: &[f64], inputs: &[Vec<f64>]) -> Trajectory {
    let n = model.state_dim();
    let mut z = model.lift_state(x0);
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.to_vec());
    for u in inputs {
        z = model.step(&z, u);
        states.push(z[..n].to_vec());
    }
    Trajectory { dt: model.dt, states, inputs: inputs.to_vec() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_triplets, gen_dataset, Excitation, NoiseSpec};
    use crate::lifting::Dictionary;
    use crate::numerics::frob;
    use crate::seed::stream;
    use crate::systems::{rk4_linear_discretization, simulate, SystemSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_op(nn: usize, m: usize, rng: &mut impl Rng) -> BlockOp {
        // near-identity keeps the spectrum clear of the negative axis
        let a = Mat::from_fn(nn, nn, |i, j| if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.25..0.25) / nn as f64);
        let b = Mat::from_fn(nn, m, |_, _| rng.gen_range(-1.0..1.0));
        BlockOp { a, b }
    }

    #[test]
    fn block_algebra() {
        let mut rng = stream(0, "ops", 0);
        let k1 = random_op(3, 2, &mut rng);
        let k2 = random_op(3, 2, &mut rng);
        let prod = k1.mul(&k2);
        assert_eq!(prod.a, k1.a.matmul(&k2.a));
        assert_eq!(prod.b, &k1.a.matmul(&k2.b) + &k1.b);
        assert!((&prod.to_full() - &k1.to_full().matmul(&k2.to_full())).max_abs() < 1e-14);
        let id = BlockOp::identity(3, 2);
        let (z, u) = id.apply(&[1.0, 2.0, 3.0], &[4.0, 5.0]);
        assert_eq!((z, u), (vec![1.0, 2.0, 3.0], vec![4.0, 5.0]));
        let full = k1.to_full();
        assert_eq!(full.block(3, 5, 0, 3), Mat::zeros(2, 3));
        assert_eq!(full.block(3, 5, 3, 5), Mat::identity(2));
    }

    #[test]
    fn assemble_reads_back_training_weights() {
        let enc = crate::lifting::EncoderParams::zeros(&[2, 3]).unwrap();
        let mut st = TrainState::new(enc, 1);
        st.a_f[(0, 1)] = 0.25;
        st.b_b[(2, 0)] = -1.5;
        let (kf, kb) = assemble(&st);
        assert_eq!((kf.a, kf.b, kb.a, kb.b), (st.a_f, st.b_f, st.a_b, st.b_b));
    }

    #[test]
    fn reduced_bias_examples() {
        let id = BlockOp::identity(4, 2);
        assert_eq!(reduced_bias(&id, &id).unwrap(), id);
        let mut rng = stream(1, "ops", 0);
        for _ in 0..20 {
            let kf = random_op(4, 2, &mut rng);
            let kb = kf.inverse().unwrap();
            let kp = reduced_bias(&kf, &kb).unwrap();
            assert!(frob(&(&kp.a - &kf.a)) <= 1e-10 * frob(&kf.a));
            assert!(frob(&(&kp.b - &kf.b)) <= 1e-10 * frob(&kf.b));
        }
    }

    #[test]
    fn reduced_bias_squares_to_ratio() {
        let mut rng = stream(2, "ops", 0);
        for _ in 0..50 {
            let kf = random_op(5, 2, &mut rng);
            let kb = random_op(5, 2, &mut rng);
            let kp = reduced_bias(&kf, &kb).unwrap();
            let full_sq = kp.to_full().matmul(&kp.to_full());
            let target = kf.to_full().matmul(&inv(&kb.to_full()).unwrap());
            assert!(frob(&(&full_sq - &target)) <= 1e-8 * frob(&target));
        }
    }

    #[test]
    fn reduced_bias_surfaces_missing_root() {
        let kf = BlockOp { a: Mat::diag(&[-1.0, 1.0]), b: Mat::zeros(2, 1) };
        let r = reduced_bias(&kf, &BlockOp::identity(2, 1));
        assert!(matches!(r, Err(Error::NoPrincipalRoot { .. })), "{r:?}");
        let singular = BlockOp { a: Mat::diag(&[0.0, 1.0]), b: Mat::zeros(2, 1) };
        assert!(matches!(reduced_bias(&BlockOp::identity(2, 1), &singular), Err(Error::Singular { .. })));
    }

    fn linear_batch(noise: &NoiseSpec, seed: u64) -> (Mat, Mat, TripletBatch, Vec<Trajectory>) {
        let a = Mat::from_rows(&[vec![0.0, 1.0], vec![-1.0, -0.3]]).unwrap();
        let b = Mat::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let dt = 0.05;
        let (ad, bd) = rk4_linear_discretization(&a, &b, dt);
        let spec = SystemSpec::Linear { a, b };
        let ex = Excitation::uniform(2, [-1.0, 1.0], 1, [-1.0, 1.0]);
        let d = gen_dataset(&spec, 10, 30, dt, &ex, noise, seed).unwrap();
        (ad, bd, build_triplets(&d.noisy).unwrap(), d.clean)
    }

    #[test]
    fn nominal_and_fb_recover_exact_linear_operator() {
        let (ad, bd, batch, _) = linear_batch(&NoiseSpec::clean(), 0);
        let lift = Lift::Identity { n: 2 };
        for model in [nominal_fit(&batch, &lift).unwrap(), fb_edmd_fit(&batch, &lift).unwrap()] {
            assert!((&model.a - &ad).max_abs() < 1e-8, "{:?}", model.provenance);
            assert!((&model.b - &bd).max_abs() < 1e-8, "{:?}", model.provenance);
        }
    }

    #[test]
    fn nominal_fit_preconditions() {
        let (_, _, batch, _) = linear_batch(&NoiseSpec::clean(), 0);
        let mut zero_u = batch.clone();
        zero_u.um = Mat::zeros(1, batch.len());
        assert!(matches!(nominal_fit(&zero_u, &Lift::Identity { n: 2 }), Err(Error::RankDeficient { .. })));
        let short = batch.select(&[0, 1]);
        assert!(matches!(nominal_fit(&short, &Lift::Identity { n: 2 }), Err(Error::Precondition(_))));
    }

    #[test]
    fn synthesis_modes() {
        let (_, _, batch, _) = linear_batch(&NoiseSpec::clean(), 0);
        let mut rng = stream(2, "encoder", 0);
        let enc = crate::lifting::EncoderParams::init(&[2, 5, 2], &mut rng).unwrap();
        let mut st = TrainState::new(enc.clone(), 1);
        let trained = drkn_synthesize(&st, &batch, Synthesis::Trained).unwrap();
        assert_eq!(trained.op(), BlockOp::identity(4, 1));
        let refit = drkn_synthesize(&st, &batch, Synthesis::Refit).unwrap();
        let fb = fb_edmd_fit(&batch, &Lift::Neural(enc)).unwrap();
        assert_eq!((refit.op(), refit.provenance), (fb.op(), Provenance::Drkn));
        // the refit ignores whatever the optimizer left in the layers
        st.a_f = st.a_f.scale(2.0);
        assert_eq!(drkn_synthesize(&st, &batch, Synthesis::Refit).unwrap(), refit);
    }

    #[test]
    fn monomial_dictionary_dimension() {
        let (_, _, batch, _) = linear_batch(&NoiseSpec::clean(), 0);
        let m = fb_edmd_fit(&batch, &Lift::Dictionary(Dictionary::monomials(2, 2))).unwrap();
        assert_eq!(m.lifted_dim(), 5);
        assert_eq!(m.c(), Mat::from_rows(&[vec![1.0, 0.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0, 0.0]]).unwrap());
    }

    #[test]
    fn fb_beats_nominal_on_noisy_linear_data() {
        // near-identity rotation, moderate input gain, i.i.d. columns
        let theta: f64 = 0.1;
        let a = Mat::from_rows(&[vec![theta.cos(), -theta.sin()], vec![theta.sin(), theta.cos()]]).unwrap().scale(0.95);
        let b = Mat::from_rows(&[vec![0.0], vec![0.5]]).unwrap();
        let truth = BlockOp { a: a.clone(), b: b.clone() };
        let mut wins = 0;
        for draw in 0..100u64 {
            let mut rng = stream(draw, "fb-vs-nominal", 0);
            let s = 2000;
            let mut cols = Vec::new();
            for _ in 0..s {
                let xm: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let um = vec![rng.gen_range(-1.0..1.0)];
                let u = vec![rng.gen_range(-1.0..1.0)];
                let x = truth.apply(&xm, &um).0;
                let xp = truth.apply(&x, &u).0;
                cols.push(Trajectory { dt: 0.1, states: vec![xm, x, xp], inputs: vec![um, u] });
            }
            let clean = build_triplets(&cols).unwrap();
            let noise = crate::datagen::corrupt_dataset(cols, &NoiseSpec::at(30.0, draw)).unwrap();
            let noisy = build_triplets(&noise.noisy).unwrap();
            assert_eq!(clean.len(), noisy.len());
            let lift = Lift::Identity { n: 2 };
            let nom = nominal_fit(&noisy, &lift).unwrap();
            let fb = fb_edmd_fit(&noisy, &lift).unwrap();
            let err = |m: &KoopmanModel| frob(&(&m.op().to_full() - &truth.to_full()));
            if err(&fb) < err(&nom) {
                wins += 1;
            }
        }
        assert!(wins >= 80, "fb closer in {wins} of 100 draws");
    }

    #[test]
    fn rollout_examples() {
        let m = KoopmanModel::new(BlockOp::identity(2, 1), Lift::Identity { n: 2 }, 0.1, Provenance::GroundTruthLinear).unwrap();
        let t = rollout(&m, &[0.5, -0.5], &vec![vec![3.0]; 10]);
        assert!(t.states.iter().all(|s| s == &vec![0.5, -0.5]));
        assert_eq!(rollout(&m, &[1.0, 2.0], &[]).states, vec![vec![1.0, 2.0]]);

        let a = Mat::from_rows(&[vec![0.0, 1.0], vec![-2.0, -0.1]]).unwrap();
        let b = Mat::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let (ad, bd) = rk4_linear_discretization(&a, &b, 0.02);
        let exact = KoopmanModel::new(BlockOp { a: ad, b: bd }, Lift::Identity { n: 2 }, 0.02, Provenance::GroundTruthLinear).unwrap();
        let inputs: Vec<Vec<f64>> = (0..100).map(|k| vec![(0.1 * k as f64).sin()]).collect();
        let sim = simulate(&SystemSpec::Linear { a, b }, &[1.0, 0.0], &inputs, 0.02).unwrap();
        let pred = rollout(&exact, &[1.0, 0.0], &inputs);
        for (p, q) in sim.states.iter().zip(&pred.states) {
            assert!(p.iter().zip(q).all(|(x, y)| (x - y).abs() < 1e-8));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn reduced_bias_keeps_block_structure(seed in 0u64..10_000) {
            let mut rng = stream(seed, "prop-ops", 0);
            let kf = random_op(3, 2, &mut rng);
            let kb = random_op(3, 2, &mut rng);
            let full = reduced_bias(&kf, &kb).unwrap().to_full();
            prop_assert_eq!(full.block(3, 5, 0, 3), Mat::zeros(2, 3));
            prop_assert_eq!(full.block(3, 5, 3, 5), Mat::identity(2));
        }
    }
}
