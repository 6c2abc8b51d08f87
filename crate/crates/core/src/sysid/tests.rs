use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dynamics::{rollout, LinearModel};
use crate::numerics::lstsq_right;

fn scalar_markov(n: usize) -> MarkovParamSet {
    MarkovParamSet::from_fn(n, 1, 1, |k, j| Matrix::from_element(1, 1, 0.5f64.powi((k - 1 - j) as i32))).unwrap()
}

fn zero_nominal(n_x: usize, n_u: usize, n: usize) -> Trajectory {
    Trajectory::new(vec![Vector::zeros(n_x); n + 1], vec![Vector::zeros(n_u); n]).unwrap()
}

struct Ltv {
    a: Vec<Matrix>,
    b: Vec<Matrix>,
    c: Vec<Matrix>,
}

impl Ltv {
    fn random(rng: &mut ChaCha8Rng, n_x: usize, n_u: usize, n_y: usize, n: usize) -> Self {
        let mut gauss = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let a = (0..n)
            .map(|_| {
                let m = gauss(n_x, n_x);
                let norm = m.norm();
                m * (1.2 / norm)
            })
            .collect();
        let b = (0..n).map(|_| gauss(n_x, n_u)).collect();
        let c = (0..=n).map(|_| gauss(n_y, n_x)).collect();
        Self { a, b, c }
    }

    /// `C_k A_{k-1} ... A_{j+1} B_j` by direct products.
    fn markov(&self, k: usize, j: usize) -> Matrix {
        let mut m = self.b[j].clone();
        for i in j + 1..k {
            m = &self.a[i] * m;
        }
        &self.c[k] * m
    }

    fn markov_set(&self, n: usize) -> MarkovParamSet {
        let (n_y, n_u) = (self.c[0].nrows(), self.b[0].ncols());
        MarkovParamSet::from_fn(n, n_y, n_u, |k, j| self.markov(k, j)).unwrap()
    }

    /// Outputs by direct state simulation from zero.
    fn simulate(&self, inputs: &[Vector]) -> Vec<Vector> {
        let mut x = Vector::zeros(self.a[0].nrows());
        let mut out = vec![&self.c[0] * &x];
        for (k, u) in inputs.iter().enumerate() {
            x = &self.a[k] * &x + &self.b[k] * u;
            out.push(&self.c[k + 1] * &x);
        }
        out
    }

    fn dataset(&self, rng: &mut ChaCha8Rng, n: usize, m: usize) -> RolloutDataset {
        let n_u = self.b[0].ncols();
        let runs: Vec<(Vec<Vector>, Vec<Vector>)> = (0..m)
            .map(|_| {
                let du: Vec<Vector> = (0..n)
                    .map(|_| Vector::from_fn(n_u, |_, _| rng.random_range(-1.0..1.0)))
                    .collect();
                let dy = self.simulate(&du);
                (du, dy)
            })
            .collect();
        let n_y = self.c[0].nrows();
        RolloutDataset::new(
            (0..n).map(|k| Matrix::from_fn(n_u, m, |r, i| runs[i].0[k][r])).collect(),
            (0..=n).map(|k| Matrix::from_fn(n_y, m, |r, i| runs[i].1[k][r])).collect(),
            1.0,
        )
        .unwrap()
    }
}

#[test]
fn scalar_lti_markov_from_rollouts() {
    let model = LinearModel::time_invariant(Matrix::from_element(1, 1, 0.5), Matrix::from_element(1, 1, 1.0), 0.1).unwrap();
    let n = 6;
    let data = collect_rollouts(&model, &zero_nominal(1, 1, n), n + 10, 0.3, 7).unwrap();
    let h = estimate_markov(&data).unwrap();
    for k in 3..=n {
        assert_abs_diff_eq!(h.get(k, k as i64 - 1).unwrap()[(0, 0)], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(h.get(k, k as i64 - 2).unwrap()[(0, 0)], 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(h.get(k, k as i64 - 3).unwrap()[(0, 0)], 0.25, epsilon = 1e-8);
    }
    assert!(h.get(2, 2).is_none() && h.get(2, -1).is_none());
}

#[test]
fn zero_outputs_give_zero_markov() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 5;
    let m = 12;
    let inputs = (0..n).map(|_| Matrix::from_fn(1, m, |_, _| rng.random_range(-1.0..1.0))).collect();
    let outputs = vec![Matrix::zeros(2, m); n + 1];
    let h = estimate_markov(&RolloutDataset::new(inputs, outputs, 1.0).unwrap()).unwrap();
    assert_eq!(h.max_norm(), 0.0);
}

#[test]
fn rank_deficient_inputs_name_the_step() {
    let n = 4;
    let m = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut inputs: Vec<Matrix> = (0..n).map(|_| Matrix::from_fn(1, m, |_, _| rng.random_range(-1.0..1.0))).collect();
    inputs[2] = inputs[1].clone() * 2.0;
    let data = RolloutDataset::new(inputs, vec![Matrix::zeros(1, m); n + 1], 1.0).unwrap();
    match estimate_markov(&data) {
        Err(Error::Identification { k, .. }) => assert_eq!(k, 2),
        other => panic!("expected identification error, got {other:?}"),
    }
}

#[test]
fn qr_estimate_matches_per_step_pseudo_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 8;
    let sys = Ltv::random(&mut rng, 3, 2, 2, n);
    let mut data = sys.dataset(&mut rng, n, 2 * n + 5);
    for y in data.outputs.iter_mut().skip(1) {
        y.iter_mut().for_each(|v| *v += rng.random_range(-1e-3..1e-3));
    }
    let h = estimate_markov(&data).unwrap();
    let m = data.experiments();
    for k in 1..=n {
        // [0, h_{k,k-1}, ..., h_{k,0}] against the stack [du_k; du_{k-1}; ...; du_0].
        let top = k.min(n - 1);
        let stacked = Matrix::from_fn((top + 1) * 2, m, |r, i| data.inputs[top - r / 2][(r % 2, i)]);
        let coeffs = lstsq_right(&data.outputs[k], &stacked, 1e-12).unwrap();
        for j in 0..k {
            let col = (top - j) * 2;
            let oracle = coeffs.columns(col, 2);
            assert!((h.get(k, j as i64).unwrap() - oracle).norm() < 1e-9, "k={k} j={j}");
        }
    }
}

#[test]
fn causal_block_vanishes_on_linear_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10;
    let sys = Ltv::random(&mut rng, 4, 1, 4, n);
    let h = estimate_markov(&sys.dataset(&mut rng, n, n + 20)).unwrap();
    let worst = h.causal_residual.iter().copied().fold(0.0, f64::max);
    assert!(worst < 1e-6 * h.max_norm(), "{worst}");
    assert!(h.max_difference(&sys.markov_set(n)) < 1e-8);
}

#[test]
fn hankel_blocks() {
    let h = scalar_markov(6);
    assert_eq!(build_hankel(&h, 3, 1, 1).unwrap(), Matrix::from_element(1, 1, 1.0));
    let h2 = build_hankel(&h, 2, 2, 2).unwrap();
    assert_eq!(h2, Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 0.25]));
    let h1 = build_hankel(&h, 1, 3, 2).unwrap();
    assert_eq!(h1.column(1).amax(), 0.0);
    assert_eq!(h1.column(0).as_slice(), &[1.0, 0.5, 0.25]);
    assert!(matches!(build_hankel(&h, 5, 3, 2), Err(Error::Window(_))));
    assert!(matches!(build_hankel(&h, 0, 2, 2), Err(Error::Window(_))));
}

#[test]
fn era_step_rank_one_scalar() {
    let h = scalar_markov(8);
    let hk = |k| build_hankel(&h, k, 2, 2).unwrap();
    for k in 3..6 {
        let prev = era_step(&hk(k - 1), &hk(k), 1, 1, 1).unwrap();
        let here = era_step(&hk(k), &hk(k + 1), 1, 1, 1).unwrap();
        assert_abs_diff_eq!((&here.c * &prev.b)[(0, 0)], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!((&here.c * &here.a * &prev.b)[(0, 0)], 0.5, epsilon = 1e-10);
        assert!(here.warning.is_none());
    }
}

#[test]
fn era_step_rejects_zero_hankel_and_bad_order() {
    let z = Matrix::zeros(4, 4);
    assert!(era_step(&z, &z, 1, 2, 2).is_err());
    let h = build_hankel(&scalar_markov(8), 3, 2, 2).unwrap();
    assert!(matches!(era_step(&h, &h, 2, 1, 1), Err(Error::Config(_))));
    let wide = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
    let step = era_step(&wide, &wide, 1, 1, 1).unwrap();
    assert!(step.warning.is_none());
}

#[test]
fn era_step_warns_on_deficient_rank() {
    let h = build_hankel(&scalar_markov(8), 3, 3, 2).unwrap();
    let step = era_step(&h, &h, 2, 1, 1).unwrap();
    assert!(step.warning.is_some());
}

#[test]
fn realization_reproduces_ltv_markov_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 30;
    let sys = Ltv::random(&mut rng, 3, 1, 2, n);
    let truth = sys.markov_set(n);
    let (p, q) = default_block_sizes(3, 2, 1);
    let rom = realize(&truth, p, q, ModelOrder::Auto).unwrap();
    assert_eq!(rom.order, 3);
    assert_eq!((rom.k_lo, rom.k_hi), (1, n - p));
    let scale = truth.max_norm();
    for k in 1..=rom.k_hi + 1 {
        for j in 0..k {
            let err = (rom.markov(k, j) - truth.get(k, j as i64).unwrap()).norm();
            assert!(err < 1e-8 * scale, "k={k} j={j} err={err}");
        }
    }
}

#[test]
fn window_must_be_non_empty() {
    let h = scalar_markov(2);
    assert!(matches!(realize(&h, 2, 2, ModelOrder::Fixed(1)), Err(Error::Window(_))));
    assert!(matches!(realize(&scalar_markov(6), 1, 2, ModelOrder::Fixed(1)), Err(Error::Config(_))));
}

#[test]
fn identified_full_state_model_predicts_held_out_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 20;
    let sys = Ltv::random(&mut rng, 3, 2, 3, n);
    let model = LinearModel::time_varying(sys.a.clone(), sys.b.clone(), 0.1).unwrap();
    let data = collect_rollouts(&model, &zero_nominal(3, 2, n), default_experiments(n, 2), 0.5, 11).unwrap();
    let (p, q) = default_block_sizes(3, 3, 2);
    let rom = identify_ltv(&data, p, q, ModelOrder::Auto).unwrap();
    assert_eq!(rom.order, 3);
    let du: Vec<Vector> = (0..n).map(|_| Vector::from_fn(2, |_, _| rng.random_range(-1.0..1.0))).collect();
    let truth = rollout(&model, &Vector::zeros(3), &du, None).unwrap();
    let predicted = rom.predict(&du);
    for k in 0..=rom.k_hi + 1 {
        assert!((&predicted[k] - &truth.states[k]).norm() < 1e-8, "k={k}");
    }
}

#[test]
fn different_data_same_markov_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 15;
    let sys = Ltv::random(&mut rng, 2, 1, 2, n);
    let model = LinearModel::time_varying(sys.a.clone(), sys.b.clone(), 0.1).unwrap();
    let nominal = zero_nominal(2, 1, n);
    let r1 = identify_ltv(&collect_rollouts(&model, &nominal, 30, 0.1, 1).unwrap(), 2, 4, ModelOrder::Fixed(2)).unwrap();
    let r2 = identify_ltv(&collect_rollouts(&model, &nominal, 40, 0.7, 2).unwrap(), 2, 4, ModelOrder::Fixed(2)).unwrap();
    assert!(r1.markov_set(r1.k_hi + 1).max_difference(&r2.markov_set(r2.k_hi + 1)) < 1e-8);
}

#[test]
fn rollouts_are_seeded() {
    let model = LinearModel::time_invariant(Matrix::identity(2, 2), Matrix::from_column_slice(2, 1, &[0.0, 1.0]), 0.1).unwrap();
    let nominal = zero_nominal(2, 1, 5);
    let a = collect_rollouts(&model, &nominal, 8, 0.1, 42).unwrap();
    let b = collect_rollouts(&model, &nominal, 8, 0.1, 42).unwrap();
    let c = collect_rollouts(&model, &nominal, 8, 0.1, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(matches!(collect_rollouts(&model, &nominal, 4, 0.1, 1), Err(Error::Config(_))));
    assert!(matches!(collect_rollouts(&model, &nominal, 8, 0.0, 1), Err(Error::Config(_))));
}

#[test]
fn vanishing_perturbation_vanishing_outputs() {
    let model = crate::dynamics::make_model("cartpole", 0.05, 0.0, &Matrix::identity(1, 1)).unwrap();
    let x0 = Vector::from_column_slice(&[0.0, 0.3, 0.0, 0.0]);
    let nominal = rollout(&model, &x0, &vec![Vector::from_element(1, 0.5); 10], None).unwrap();
    let data = collect_rollouts(&model, &nominal, 12, 1e-12, 3).unwrap();
    assert!(data.outputs.iter().all(|y| y.amax() < 1e-9));
}

#[test]
fn defaults() {
    assert_eq!(default_block_sizes(4, 4, 1), (2, 8));
    assert_eq!(default_block_sizes(3, 1, 2), (6, 3));
    assert_eq!(default_experiments(70, 1), 120);
    assert_eq!(default_sigma_pert(&[Vector::zeros(1)]), 1e-3);
    assert_abs_diff_eq!(default_sigma_pert(&[Vector::from_element(1, 3.0), Vector::from_element(1, -3.0)]), 0.03, epsilon = 1e-15);
    assert_eq!(energy_order(&[1.0, 1e-3, 1e-9]), 1);
    assert_eq!(energy_order(&[1.0, 0.5, 0.1, 1e-6]), 3);
    assert_eq!(energy_order(&[0.0, 0.0]), 0);
}

#[test]
fn linearize_fd_recovers_linear_matrices() {
    let a = Matrix::from_row_slice(2, 2, &[1.0, 0.1, -0.3, 0.9]);
    let b = Matrix::from_row_slice(2, 1, &[0.0, 0.1]);
    let model = LinearModel::time_invariant(a.clone(), b.clone(), 0.1).unwrap();
    let nominal = rollout(&model, &Vector::from_column_slice(&[1.0, 2.0]), &vec![Vector::from_element(1, 0.7); 4], None).unwrap();
    for (ak, bk) in linearize_fd(&model, &nominal, 1e-3).unwrap() {
        assert!((ak - &a).amax() < 1e-9);
        assert!((bk - &b).amax() < 1e-9);
    }
}

#[test]
fn linearize_fd_is_second_order() {
    let model = crate::dynamics::make_model("acrobot", 0.05, 0.0, &Matrix::identity(1, 1)).unwrap();
    let x0 = Vector::from_column_slice(&[0.4, -0.2, 0.3, 0.1]);
    let nominal = rollout(&model, &x0, &vec![Vector::from_element(1, 0.3); 3], None).unwrap();
    let jac = |h| linearize_fd(&model, &nominal, h).unwrap();
    let (coarse, mid, fine) = (jac(4e-3), jac(2e-3), jac(1e-3));
    for k in 0..3 {
        let d1 = (&coarse[k].0 - &mid[k].0).norm();
        let d2 = (&mid[k].0 - &fine[k].0).norm();
        let ratio = d1 / d2;
        assert!((3.0..5.0).contains(&ratio), "k={k} ratio={ratio}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn more_experiments_never_hurt_on_linear_data(seed in 0u64..1000, extra in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let sys = Ltv::random(&mut rng, 2, 1, 2, n);
        let full = sys.dataset(&mut rng, n, n + 1 + extra);
        let truth = sys.markov_set(n);
        let few = RolloutDataset::new(
            full.inputs.iter().map(|u| u.columns(0, n + 1).into_owned()).collect(),
            full.outputs.iter().map(|y| y.columns(0, n + 1).into_owned()).collect(),
            1.0,
        ).unwrap();
        let e_few = estimate_markov(&few).unwrap().max_difference(&truth);
        let e_full = estimate_markov(&full).unwrap().max_difference(&truth);
        prop_assert!(e_full <= e_few.max(1e-10));
        prop_assert!(e_full < 1e-8);
    }

    #[test]
    fn retained_singular_values_are_sorted(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 12;
        let sys = Ltv::random(&mut rng, 3, 1, 3, n);
        let rom = realize(&sys.markov_set(n), 2, 6, ModelOrder::Auto).unwrap();
        for k in rom.k_lo..=rom.k_hi + 1 {
            let s = rom.retained(k);
            prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(s.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
        prop_assert!(rom.a.iter().chain(&rom.b).chain(&rom.c).all(|m| m.iter().all(|v| v.is_finite())));
    }
}
