use koopman_core::bench::EvalSet;
use koopman_core::datagen::{build_triplets, gen_dataset, Excitation, NoiseSpec};
use koopman_core::lifting::{Dictionary, Lift};
use koopman_core::numerics::frob;
use koopman_core::operator::{fb_edmd_fit, nominal_fit, reduced_bias, BlockOp};
use koopman_core::persist::{trajectory_from_csv, trajectory_to_csv};
use koopman_core::seed::stream;
use koopman_core::systems::{rk4_linear_discretization, SystemSpec, Trajectory};
use koopman_core::Mat;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn slow_manifold_is_exact_in_the_quadratic_dictionary() {
    // x1^2 closes the dynamics, so both dictionary estimators are exact up to
    // the RK4 discretization of the lifted linear system
    let spec = SystemSpec::SlowManifold { mu: -0.05, lambda: -1.0 };
    let ex = Excitation::default_for(&spec);
    let data = gen_dataset(&spec, 50, 60, 0.01, &ex, &NoiseSpec::clean(), 3).unwrap();
    let batch = build_triplets(&data.noisy).unwrap();
    let eval = EvalSet::generate(&spec, 0.01, &ex, 9, 10, 200).unwrap();
    let dict = Lift::Dictionary(Dictionary::monomials(2, 2));
    for model in [nominal_fit(&batch, &dict).unwrap(), fb_edmd_fit(&batch, &dict).unwrap()] {
        let e = eval.mean_pred_error(&model).unwrap();
        assert!(e < 1e-8, "{:?}: {e}", model.provenance);
    }
}

#[test]
fn identity_lift_recovers_the_discretized_linear_plant() {
    let a = Mat::from_rows(&[vec![0.0, 1.0], vec![-2.0, -0.4]]).unwrap();
    let b = Mat::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
    let (ad, bd) = rk4_linear_discretization(&a, &b, 0.02);
    let spec = SystemSpec::Linear { a, b };
    let ex = Excitation::uniform(2, [-1.0, 1.0], 1, [-1.0, 1.0]);
    let data = gen_dataset(&spec, 20, 40, 0.02, &ex, &NoiseSpec::clean(), 5).unwrap();
    let batch = build_triplets(&data.noisy).unwrap();
    let truth = BlockOp { a: ad, b: bd };
    for model in [nominal_fit(&batch, &Lift::Identity { n: 2 }).unwrap(), fb_edmd_fit(&batch, &Lift::Identity { n: 2 }).unwrap()] {
        assert!((&model.a - &truth.a).max_abs() < 1e-10);
        assert!((&model.b - &truth.b).max_abs() < 1e-10);
    }
}

#[test]
fn noisy_data_keeps_clean_copy() {
    let spec = SystemSpec::van_der_pol();
    let ex = Excitation::default_for(&spec);
    let d = gen_dataset(&spec, 5, 30, 0.01, &ex, &NoiseSpec::at(20.0, 4), 4).unwrap();
    let clean = gen_dataset(&spec, 5, 30, 0.01, &ex, &NoiseSpec::clean(), 4).unwrap();
    assert_eq!(d.clean, clean.clean);
    assert_ne!(d.noisy, d.clean);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn trajectory_csv_round_trip(seed in 0u64..10_000, len in 2usize..30, n in 1usize..4, m in 1usize..3) {
        let mut rng = stream(seed, "csv", 0);
        let mut v = |k: usize| (0..k).map(|_| rng.gen_range(-1e3..1e3) * 10f64.powi(rng.gen_range(-8..3))).collect::<Vec<f64>>();
        let states = (0..len).map(|_| v(n)).collect();
        let inputs = (0..len - 1).map(|_| v(m)).collect();
        let t = Trajectory::new(0.01, states, inputs).unwrap();
        let back = trajectory_from_csv(&trajectory_to_csv(&t), 0.01).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn reduced_bias_fixes_consistent_pairs(seed in 0u64..10_000, nn in 1usize..7, m in 1usize..3) {
        let mut rng = stream(seed, "ops", 0);
        let a = Mat::from_fn(nn, nn, |i, j| if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.3..0.3) / nn as f64);
        let b = Mat::from_fn(nn, m, |_, _| rng.gen_range(-1.0..1.0));
        let kf = BlockOp { a, b };
        let kp = reduced_bias(&kf, &kf.inverse().unwrap()).unwrap();
        prop_assert!(frob(&(&kp.to_full() - &kf.to_full())) <= 1e-10 * frob(&kf.to_full()));
    }
}
