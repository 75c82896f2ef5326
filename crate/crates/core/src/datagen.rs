//! Random excitation datasets, measurement noise and snapshot triplets.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::seed::{derive_seed, stream};
use crate::systems::{simulate, SystemSpec, Trajectory};

const MAX_RETRIES: u64 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// `None` means noise-free.
    pub snr_db: Option<f64>,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub corrupt_inputs: bool,
}

fn default_true() -> bool {
    true
}

impl NoiseSpec {
    pub fn clean() -> Self {
        NoiseSpec { snr_db: None, seed: 0, corrupt_inputs: true }
    }

    pub fn at(snr_db: f64, seed: u64) -> Self {
        NoiseSpec { snr_db: Some(snr_db), seed, corrupt_inputs: true }
    }

    pub fn validate(&self) -> Result<()> {
        match self.snr_db {
            Some(v) if !v.is_finite() => Err(Error::NonFinite("snr_db")),
            _ => Ok(()),
        }
    }
}

/// Sampling boxes for initial states and inputs, one `[lo, hi]` per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Excitation {
    pub state_box: Vec<[f64; 2]>,
    pub input_box: Vec<[f64; 2]>,
}

impl Excitation {
    pub fn uniform(n: usize, state: [f64; 2], m: usize, input: [f64; 2]) -> Self {
        Excitation { state_box: vec![state; n], input_box: vec![input; m] }
    }

    /// Defaults for a system. The Van der Pol origin is stable and its limit
    /// cycle unstable; starting states in `[-1, 1]^2` stay inside the basin
    /// under the default inputs, while a `[-1.5, 1.5]^2` box already lets
    /// some 2 s rollouts escape.
    pub fn default_for(spec: &SystemSpec) -> Self {
        let (n, m) = (spec.state_dim(), spec.input_dim());
        match spec {
            SystemSpec::VanDerPol { .. } => Excitation::uniform(n, [-1.0, 1.0], m, [-1.0, 1.0]),
            SystemSpec::PlanarArm(p) => {
                let k = p.links();
                let mut state_box = vec![[-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2]; k];
                state_box.extend(vec![[-1.0, 1.0]; k]);
                Excitation { state_box, input_box: vec![[-2.0, 2.0]; m] }
            }
            _ => Excitation::uniform(n, [-1.0, 1.0], m, [-1.0, 1.0]),
        }
    }

    fn validate(&self, spec: &SystemSpec) -> Result<()> {
        if self.state_box.len() != spec.state_dim() || self.input_box.len() != spec.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "excitation boxes have {} state / {} input channels, system has {} / {}",
                self.state_box.len(),
                self.input_box.len(),
                spec.state_dim(),
                spec.input_dim()
            )));
        }
        for b in self.state_box.iter().chain(&self.input_box) {
            if !(b[0].is_finite() && b[1].is_finite() && b[0] <= b[1]) {
                return Err(Error::Precondition(format!("bad sampling interval {b:?}")));
            }
        }
        Ok(())
    }

    fn sample(bx: &[[f64; 2]], rng: &mut impl Rng) -> Vec<f64> {
        bx.iter().map(|b| if b[0] == b[1] { b[0] } else { rng.gen_range(b[0]..b[1]) }).collect()
    }
}

/// Per-channel noise std for a target SNR: `rms(signal) * 10^(-snr/20)`.
pub fn snr_sigma(signal: &[f64], snr_db: f64) -> Result<f64> {
    if signal.is_empty() {
        return Err(Error::DegenerateChannel { channel: 0 });
    }
    let rms = (signal.iter().map(|v| v * v).sum::<f64>() / signal.len() as f64).sqrt();
    if rms == 0.0 {
        return Err(Error::DegenerateChannel { channel: 0 });
    }
    Ok(rms * 10f64.powf(-snr_db / 20.0))
}

/// Noise std of every state and input channel, measured over all given
/// trajectories. Channels with zero rms get zero noise.
pub fn channel_sigmas(trajs: &[Trajectory], snr_db: f64) -> (Vec<f64>, Vec<f64>) {
    let n = trajs.first().map_or(0, Trajectory::state_dim);
    let m = trajs.first().map_or(0, Trajectory::input_dim);
    let per_channel = |rows: &dyn Fn(&Trajectory) -> &Vec<Vec<f64>>, dim: usize, offset: usize| -> Vec<f64> {
        (0..dim)
            .map(|c| {
                let signal: Vec<f64> = trajs.iter().flat_map(|t| rows(t).iter().map(move |r| r[c])).collect();
                snr_sigma(&signal, snr_db).unwrap_or_else(|_| {
                    warn!("channel {} has zero rms; its noise scale is 0", c + offset);
                    0.0
                })
            })
            .collect()
    };
    (per_channel(&|t| &t.states, n, 0), per_channel(&|t| &t.inputs, m, n))
}

/// Adds zero-mean Gaussian noise with the given per-channel std.
pub fn add_noise(traj: &Trajectory, state_sigma: &[f64], input_sigma: Option<&[f64]>, rng: &mut impl Rng) -> Trajectory {
    let jitter = |rows: &[Vec<f64>], sigma: &[f64], rng: &mut dyn rand::RngCore| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                r.iter()
                    .zip(sigma)
                    .map(|(v, &s)| if s > 0.0 { v + s * Normal::new(0.0, 1.0).unwrap().sample(rng) } else { *v })
                    .collect()
            })
            .collect()
    };
    let states = jitter(&traj.states, state_sigma, rng);
    let inputs = match input_sigma {
        Some(s) => jitter(&traj.inputs, s, rng),
        None => traj.inputs.clone(),
    };
    Trajectory { dt: traj.dt, states, inputs }
}

/// Corrupts one trajectory at the SNR of `spec`, measured on that trajectory.
pub fn corrupt(traj: &Trajectory, spec: &NoiseSpec) -> Trajectory {
    let Some(snr) = spec.snr_db else {
        return traj.clone();
    };
    let (sx, su) = channel_sigmas(std::slice::from_ref(traj), snr);
    let mut rng = stream(spec.seed, "noise", 0);
    add_noise(traj, &sx, spec.corrupt_inputs.then_some(su.as_slice()), &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub noisy: Vec<Trajectory>,
    /// Ground truth, reserved for evaluation.
    pub clean: Vec<Trajectory>,
    pub state_sigma: Vec<f64>,
    pub input_sigma: Vec<f64>,
}

/// Clean and corrupted copies of a set of trajectories; noise scale is set
/// per channel from the rms over the whole set.
pub fn corrupt_dataset(clean: Vec<Trajectory>, noise: &NoiseSpec) -> Result<Dataset> {
    noise.validate()?;
    let Some(snr) = noise.snr_db else {
        let n = clean.first().map_or(0, Trajectory::state_dim);
        let m = clean.first().map_or(0, Trajectory::input_dim);
        return Ok(Dataset { noisy: clean.clone(), clean, state_sigma: vec![0.0; n], input_sigma: vec![0.0; m] });
    };
    let (sx, su) = channel_sigmas(&clean, snr);
    let noisy = clean
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = stream(noise.seed, "noise", i as u64);
            add_noise(t, &sx, noise.corrupt_inputs.then_some(su.as_slice()), &mut rng)
        })
        .collect();
    let input_sigma = if noise.corrupt_inputs { su } else { vec![0.0; su.len()] };
    Ok(Dataset { noisy, clean, state_sigma: sx, input_sigma })
}

/// One randomly excited trajectory, resampled if the simulation diverges.
pub fn excite(spec: &SystemSpec, n_snap: usize, dt: f64, excitation: &Excitation, seed: u64, index: u64) -> Result<Trajectory> {
    let root = derive_seed(seed, "trajectory", index);
    let mut last = None;
    for attempt in 0..=MAX_RETRIES {
        let mut rng = stream(root, "attempt", attempt);
        let x0 = Excitation::sample(&excitation.state_box, &mut rng);
        let inputs: Vec<Vec<f64>> = (0..n_snap - 1).map(|_| Excitation::sample(&excitation.input_box, &mut rng)).collect();
        match simulate(spec, &x0, &inputs, dt) {
            Ok(t) => return Ok(t),
            Err(e @ Error::Diverged { .. }) => {
                warn!("trajectory {index} diverged on attempt {attempt}; resampling");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt was made"))
}

pub fn gen_dataset(
    spec: &SystemSpec,
    n_traj: usize,
    n_snap: usize,
    dt: f64,
    excitation: &Excitation,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Dataset> {
    if n_traj < 3 || n_snap < 3 {
        return Err(Error::Precondition(format!("need n_traj, n_snap >= 3, got ({n_traj}, {n_snap})")));
    }
    spec.validate()?;
    excitation.validate(spec)?;
    let clean = (0..n_traj as u64).map(|i| excite(spec, n_snap, dt, excitation, seed, i)).collect::<Result<Vec<_>>>()?;
    corrupt_dataset(clean, noise)
}

/// Aligned windows `(x_{k-1}, x_k, x_{k+1})` with inputs `(u_{k-1}, u_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub xm_minus: Mat,
    pub xm: Mat,
    pub xm_plus: Mat,
    pub um_minus: Mat,
    pub um: Mat,
    pub dt: f64,
    /// `(trajectory index, k)` of each column's center snapshot.
    pub origin: Vec<(usize, usize)>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    pub fn select(&self, cols: &[usize]) -> TripletBatch {
        TripletBatch {
            xm_minus: self.xm_minus.select_cols(cols),
            xm: self.xm.select_cols(cols),
            xm_plus: self.xm_plus.select_cols(cols),
            um_minus: self.um_minus.select_cols(cols),
            um: self.um.select_cols(cols),
            dt: self.dt,
            origin: cols.iter().map(|&c| self.origin[c]).collect(),
        }
    }
}

pub fn build_triplets(trajs: &[Trajectory]) -> Result<TripletBatch> {
    let usable: Vec<usize> = (0..trajs.len()).filter(|&i| trajs[i].len() >= 3).collect();
    let Some(&first) = usable.first() else {
        return Err(Error::Empty);
    };
    let (n, m, dt) = (trajs[first].state_dim(), trajs[first].input_dim(), trajs[first].dt);
    if usable.iter().any(|&i| trajs[i].state_dim() != n || trajs[i].input_dim() != m) {
        return Err(Error::DimensionMismatch("trajectories differ in dimension".into()));
    }
    let s: usize = usable.iter().map(|&i| trajs[i].len() - 2).sum();
    let mut b = TripletBatch {
        xm_minus: Mat::zeros(n, s),
        xm: Mat::zeros(n, s),
        xm_plus: Mat::zeros(n, s),
        um_minus: Mat::zeros(m, s),
        um: Mat::zeros(m, s),
        dt,
        origin: Vec::with_capacity(s),
    };
    let mut col = 0;
    for &i in &usable {
        let t = &trajs[i];
        for k in 1..t.len() - 1 {
            b.xm_minus.set_col(col, &t.states[k - 1]);
            b.xm.set_col(col, &t.states[k]);
            b.xm_plus.set_col(col, &t.states[k + 1]);
            b.um_minus.set_col(col, &t.inputs[k - 1]);
            b.um.set_col(col, &t.inputs[k]);
            b.origin.push((i, k));
            col += 1;
        }
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn vdp_data(noise: &NoiseSpec, seed: u64) -> Dataset {
        let spec = SystemSpec::van_der_pol();
        gen_dataset(&spec, 10, 20, 0.01, &Excitation::default_for(&spec), noise, seed).unwrap()
    }

    #[test]
    fn snr_sigma_examples() {
        assert!((snr_sigma(&[1.0, -1.0, 1.0], 20.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((snr_sigma(&[2.0, -2.0], 40.0).unwrap() - 0.02).abs() < 1e-15);
        assert!(matches!(snr_sigma(&[0.0, 0.0], 20.0), Err(Error::DegenerateChannel { .. })));
    }

    #[test]
    fn empirical_snr_matches_target() {
        let mut rng = stream(5, "signal", 0);
        let states: Vec<Vec<f64>> = (0..10_001).map(|_| vec![rng.gen_range(-2.0..2.0), (rng.gen::<f64>() * 6.0).sin()]).collect();
        let inputs = states[1..].iter().map(|s| vec![s[0] * 0.5]).collect();
        let t = Trajectory::new(0.01, states, inputs).unwrap();
        for snr in [10.0, 20.0, 30.0] {
            let noisy = corrupt(&t, &NoiseSpec::at(snr, 9));
            for c in 0..2 {
                let p_sig: f64 = t.states.iter().map(|s| s[c] * s[c]).sum();
                let p_noise: f64 = t.states.iter().zip(&noisy.states).map(|(a, b)| (b[c] - a[c]).powi(2)).sum();
                let measured = 10.0 * (p_sig / p_noise).log10();
                assert!((measured - snr).abs() < 0.5, "channel {c}: {measured} dB vs {snr}");
            }
        }
    }

    #[test]
    fn injected_noise_has_zero_mean() {
        let states = vec![vec![1.0, -3.0]; 100_001];
        let inputs = vec![vec![2.0]; 100_000];
        let t = Trajectory::new(0.01, states, inputs).unwrap();
        let noisy = corrupt(&t, &NoiseSpec::at(20.0, 1));
        let s = t.len() as f64;
        for c in 0..2 {
            let sigma = t.states[0][c].abs() * 0.1;
            let mean: f64 = t.states.iter().zip(&noisy.states).map(|(a, b)| b[c] - a[c]).sum::<f64>() / s;
            assert!(mean.abs() < 3.0 * sigma / s.sqrt(), "channel {c} mean {mean}");
        }
    }

    #[test]
    fn corrupt_trivial_cases() {
        let d = vdp_data(&NoiseSpec::clean(), 1);
        assert_eq!(corrupt(&d.clean[0], &NoiseSpec::clean()), d.clean[0]);
        assert_eq!(corrupt(&d.clean[0], &NoiseSpec::at(20.0, 4)), corrupt(&d.clean[0], &NoiseSpec::at(20.0, 4)));
        assert_ne!(corrupt(&d.clean[0], &NoiseSpec::at(20.0, 4)), corrupt(&d.clean[0], &NoiseSpec::at(20.0, 5)));
        let mut keep = NoiseSpec::at(20.0, 4);
        keep.corrupt_inputs = false;
        assert_eq!(corrupt(&d.clean[0], &keep).inputs, d.clean[0].inputs);
    }

    #[test]
    fn gen_dataset_shape() {
        let spec = SystemSpec::van_der_pol();
        let d = gen_dataset(&spec, 100, 100, 0.01, &Excitation::default_for(&spec), &NoiseSpec::at(30.0, 2), 3).unwrap();
        assert_eq!(d.noisy.len(), 100);
        assert!(d.noisy.iter().chain(&d.clean).all(|t| t.states.len() == 100 && t.inputs.len() == 99));
        assert_eq!(build_triplets(&d.noisy).unwrap().len(), 9800);
    }

    #[test]
    fn gen_dataset_seeds_and_noise_free() {
        let d = vdp_data(&NoiseSpec::clean(), 1);
        assert_eq!(d.clean, d.noisy);
        let e = vdp_data(&NoiseSpec::clean(), 2);
        assert_ne!(d.clean[0].states[0], e.clean[0].states[0]);
        assert_eq!(vdp_data(&NoiseSpec::at(20.0, 3), 1), vdp_data(&NoiseSpec::at(20.0, 3), 1));
    }

    #[test]
    fn gen_dataset_rejects_short_requests() {
        let spec = SystemSpec::van_der_pol();
        let ex = Excitation::default_for(&spec);
        assert!(gen_dataset(&spec, 2, 10, 0.01, &ex, &NoiseSpec::clean(), 0).is_err());
        assert!(gen_dataset(&spec, 10, 2, 0.01, &ex, &NoiseSpec::clean(), 0).is_err());
    }

    #[test]
    fn diverging_system_is_resampled_then_reported() {
        let spec = SystemSpec::Linear { a: Mat::from_rows(&[vec![100.0]]).unwrap(), b: Mat::zeros(1, 1) };
        let ex = Excitation::uniform(1, [0.5, 1.0], 1, [0.0, 0.0]);
        let r = gen_dataset(&spec, 3, 200, 0.1, &ex, &NoiseSpec::clean(), 0);
        assert!(matches!(r, Err(Error::Diverged { .. })));
    }

    #[test]
    fn triplet_examples() {
        let t = Trajectory::new(0.1, vec![vec![1.0], vec![2.0], vec![3.0]], vec![vec![10.0], vec![20.0]]).unwrap();
        let b = build_triplets(&[t.clone()]).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!((b.xm_minus[(0, 0)], b.xm[(0, 0)], b.xm_plus[(0, 0)]), (1.0, 2.0, 3.0));
        assert_eq!((b.um_minus[(0, 0)], b.um[(0, 0)]), (10.0, 20.0));
        let short = Trajectory::new(0.1, vec![vec![1.0], vec![2.0]], vec![vec![0.0]]).unwrap();
        assert_eq!(build_triplets(&[short]), Err(Error::Empty));
        assert_eq!(build_triplets(&[]), Err(Error::Empty));
    }

    #[test]
    fn triplets_are_aligned_with_their_source() {
        let d = vdp_data(&NoiseSpec::at(20.0, 7), 7);
        let b = build_triplets(&d.noisy).unwrap();
        for j in 0..b.len() {
            let (i, k) = b.origin[j];
            let t = &d.noisy[i];
            assert_eq!(b.xm_minus.col(j), t.states[k - 1]);
            assert_eq!(b.xm.col(j), t.states[k]);
            assert_eq!(b.xm_plus.col(j), t.states[k + 1]);
            assert_eq!(b.um_minus.col(j), t.inputs[k - 1]);
            assert_eq!(b.um.col(j), t.inputs[k]);
            if j + 1 < b.len() && b.origin[j + 1].0 == i {
                assert_eq!(b.xm.col(j), b.xm_minus.col(j + 1));
                assert_eq!(b.xm_plus.col(j), b.xm.col(j + 1));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn triplet_count_is_sum_of_interiors(lens in proptest::collection::vec(1usize..12, 1..6)) {
            let trajs: Vec<Trajectory> = lens.iter().map(|&l| {
                let states = (0..l).map(|k| vec![k as f64]).collect();
                let inputs = (0..l - 1).map(|k| vec![k as f64]).collect();
                Trajectory::new(0.1, states, inputs).unwrap()
            }).collect();
            let expected: usize = lens.iter().map(|&l| l.saturating_sub(2)).sum();
            match build_triplets(&trajs) {
                Ok(b) => prop_assert_eq!(b.len(), expected),
                Err(e) => { prop_assert_eq!(expected, 0); prop_assert_eq!(e, Error::Empty); }
            }
        }
    }
}
