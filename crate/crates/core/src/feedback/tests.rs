use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dynamics::{rollout, LinearModel};

fn m1(v: f64) -> Matrix {
    Matrix::from_element(1, 1, v)
}

fn random_system(rng: &mut ChaCha8Rng, n: usize, m: usize, horizon: usize) -> (Vec<Matrix>, Vec<Matrix>, Vec<Matrix>, Vec<Matrix>, Matrix) {
    let mut gauss = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let mut psd = |k: usize, shift: f64| {
        let g = gauss(k, k);
        &g * g.transpose() + Matrix::identity(k, k) * shift
    };
    let q: Vec<Matrix> = (0..horizon).map(|_| psd(n, 0.0)).collect();
    let r: Vec<Matrix> = (0..horizon).map(|_| psd(m, 0.5)).collect();
    let qn = psd(n, 0.0);
    let a = (0..horizon).map(|_| gauss(n, n)).collect();
    let b = (0..horizon).map(|_| gauss(n, m)).collect();
    (a, b, q, r, qn)
}

#[test]
fn costate_of_zero_data_is_zero() {
    let l = vec![Matrix::zeros(1, 2); 4];
    let a = vec![Matrix::identity(2, 2); 4];
    let g = costate_recursion(&l, &a, &Matrix::zeros(1, 2)).unwrap();
    assert_eq!(g.g.len(), 5);
    assert!(g.g.iter().all(|gk| gk.amax() == 0.0));
}

#[test]
fn scalar_costate_counts_down() {
    let g = costate_recursion(&vec![m1(1.0); 3], &vec![m1(1.0); 3], &m1(0.0)).unwrap();
    let values: Vec<f64> = g.g.iter().map(|gk| gk[(0, 0)]).collect();
    assert_eq!(values, vec![3.0, 2.0, 1.0, 0.0]);
}

#[test]
fn costate_rejects_mismatched_sequences() {
    assert!(matches!(
        costate_recursion(&vec![m1(1.0); 3], &vec![m1(1.0); 2], &m1(0.0)),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(
        costate_recursion(&[m1(1.0)], &[Matrix::identity(2, 2)], &m1(0.0)),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn terminal_gradient_vanishes_at_target() {
    let cost = CostSpec::diagonal(&[1.0, 1.0], &[1.0], &[5.0, 7.0], Vector::from_vec(vec![0.3, -0.2])).unwrap();
    assert_eq!(cost.terminal_gradient(&cost.target.clone()).amax(), 0.0);
}

struct Lq {
    model: LinearModel,
    cost: CostSpec,
    x0: Vector,
    horizon: usize,
}

fn double_integrator() -> Lq {
    let dt = 0.1;
    let a = Matrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
    let b = Matrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]);
    Lq {
        model: LinearModel::time_invariant(a, b, dt).unwrap(),
        cost: CostSpec::diagonal(&[1.0, 0.5], &[0.2], &[10.0, 10.0], Vector::zeros(2)).unwrap(),
        x0: Vector::from_vec(vec![1.0, -0.5]),
        horizon: 30,
    }
}

/// Optimal open-loop controls from the LQR closed loop, with `1/2 R` as the
/// standard control weight.
fn lq_optimum(p: &Lq) -> Trajectory {
    let a = vec![p.model.a(0).clone(); p.horizon];
    let b = vec![p.model.b(0).clone(); p.horizon];
    let lqr = lqr_tv(&a, &b, std::slice::from_ref(&p.cost.q_inc), &[&p.cost.r * 0.5], &p.cost.q_terminal).unwrap();
    let mut x = p.x0.clone();
    let mut controls = Vec::new();
    for gain in &lqr.gains {
        let u = -(gain * &x);
        x = p.model.transition(0, &x, &u).unwrap();
        controls.push(u);
    }
    rollout(&p.model, &p.x0, &controls, None).unwrap()
}

fn linear_jacobians(p: &Lq) -> Vec<(Matrix, Matrix)> {
    vec![(p.model.a(0).clone(), p.model.b(0).clone()); p.horizon]
}

#[test]
fn lq_optimum_is_stationary() {
    let p = double_integrator();
    let nominal = lq_optimum(&p);
    let st = check_stationarity(&nominal, &p.cost, &linear_jacobians(&p)).unwrap();
    assert_eq!(st.residuals.len(), p.horizon);
    assert!(st.control_scale > 0.1);
    assert!(st.max_residual < 1e-8, "residual {}", st.max_residual);
}

#[test]
fn perturbed_optimum_is_not_stationary() {
    let p = double_integrator();
    let optimum = lq_optimum(&p);
    let controls: Vec<Vector> = optimum.controls.iter().map(|u| u.add_scalar(0.1)).collect();
    let nominal = rollout(&p.model, &p.x0, &controls, None).unwrap();
    let st = check_stationarity(&nominal, &p.cost, &linear_jacobians(&p)).unwrap();
    assert!(st.max_residual > 1e-2, "residual {}", st.max_residual);
}

#[test]
fn zero_cost_is_stationary_at_rest() {
    let p = double_integrator();
    let cost = CostSpec::diagonal(&[0.0, 0.0], &[1.0], &[0.0, 0.0], Vector::zeros(2)).unwrap();
    let nominal = rollout(&p.model, &p.x0, &vec![Vector::zeros(1); p.horizon], None).unwrap();
    let st = check_stationarity(&nominal, &cost, &linear_jacobians(&p)).unwrap();
    assert_eq!(st.max_residual, 0.0);
}

#[test]
fn scalar_theorem1_step() {
    let sol = riccati_theorem1(&[m1(1.0)], &[m1(1.0)], &[m1(1.0)], &[m1(2.0)], None, &m1(1.0), GainForm::Derived).unwrap();
    assert_abs_diff_eq!(sol.s[0][(0, 0)], 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(sol.k[0][(0, 0)], -0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(sol.p[0][(0, 0)], 1.5, epsilon = 1e-15);
    let lqr = lqr_tv(&[m1(1.0)], &[m1(1.0)], &[m1(1.0)], &[m1(1.0)], &m1(1.0)).unwrap();
    assert_abs_diff_eq!(lqr.p[0][(0, 0)], sol.p[0][(0, 0)], epsilon = 1e-15);
}

#[test]
fn verbatim_gain_doubles_the_derived_gain() {
    let d = riccati_theorem1(&[m1(1.0)], &[m1(1.0)], &[m1(1.0)], &[m1(2.0)], None, &m1(1.0), GainForm::Derived).unwrap();
    let v = riccati_theorem1(&[m1(1.0)], &[m1(1.0)], &[m1(1.0)], &[m1(2.0)], None, &m1(1.0), GainForm::Verbatim).unwrap();
    assert_abs_diff_eq!(v.k[0][(0, 0)], 2.0 * d.k[0][(0, 0)], epsilon = 1e-15);
    // Q-function at du = -dx: 1 + 1/2 * 2 + (1 - 1)^2 = 2.
    assert_abs_diff_eq!(v.p[0][(0, 0)], 2.0, epsilon = 1e-15);
}

#[test]
fn uncontrollable_channel_has_zero_gain() {
    let a = Matrix::from_row_slice(2, 2, &[1.0, 0.1, -0.2, 0.9]);
    let l_xx = Matrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 1.0]);
    let pn = Matrix::identity(2, 2) * 3.0;
    let g = CostateSequence {
        g: vec![Matrix::from_row_slice(1, 2, &[0.5, -1.0]); 2],
    };
    let hessians = vec![vec![Matrix::identity(2, 2), Matrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])]];
    let sol = riccati_theorem1(
        std::slice::from_ref(&a),
        &[Matrix::zeros(2, 1)],
        std::slice::from_ref(&l_xx),
        &[m1(1.0)],
        Some(SecondOrder {
            costate: &g,
            hessians: &hessians,
        }),
        &pn,
        GainForm::Derived,
    )
    .unwrap();
    assert_eq!(sol.k[0].amax(), 0.0);
    let rtilde = Matrix::from_row_slice(2, 2, &[0.5, -1.0, -1.0, 0.5]);
    let expected = l_xx + a.transpose() * &pn * &a + rtilde;
    assert_abs_diff_eq!(sol.p[0], expected, epsilon = 1e-14);
}

#[test]
fn indefinite_s_is_a_design_failure() {
    let err = riccati_theorem1(&vec![m1(1.0); 3], &vec![m1(1.0); 3], &vec![m1(0.0); 3], &vec![m1(-4.0); 3], None, &m1(1.0), GainForm::Derived)
        .unwrap_err();
    assert!(matches!(err, Error::Design { k: 2, .. }));
}

#[test]
fn scalar_lqr_step() {
    let sol = lqr_tv(&[m1(1.0)], &[m1(1.0)], &[m1(1.0)], &[m1(1.0)], &m1(1.0)).unwrap();
    assert_abs_diff_eq!(sol.gains[0][(0, 0)], 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(sol.p[0][(0, 0)], 1.5, epsilon = 1e-15);
}

#[test]
fn huge_control_penalty_kills_gains() {
    let a = Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
    let b = Matrix::from_row_slice(2, 1, &[0.0, 0.1]);
    let sol = lqr_tv(&vec![a; 20], &vec![b; 20], &[Matrix::identity(2, 2)], &[m1(1e8)], &Matrix::identity(2, 2)).unwrap();
    assert!(sol.gains.iter().all(|g| g.amax() < 1e-5));
}

/// Fixed point of `P = Q + A'PA - A'PB (R + B'PB)^{-1} B'PA` by iteration.
fn are_fixed_point(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Matrix {
    let mut p = q.clone();
    for _ in 0..5000 {
        let inner = (r + b.transpose() * &p * b).try_inverse().unwrap();
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * inner * b.transpose() * &p * a;
        if (&next - &p).amax() < 1e-14 {
            return next;
        }
        p = next;
    }
    p
}

#[test]
fn long_horizon_lqr_reaches_the_algebraic_fixed_point() {
    let a = Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
    let b = Matrix::from_row_slice(2, 1, &[0.005, 0.1]);
    let q = Matrix::identity(2, 2);
    let r = m1(0.5);
    let oracle = are_fixed_point(&a, &b, &q, &r);
    let sol = lqr_tv(&vec![a; 2000], &vec![b; 2000], std::slice::from_ref(&q), &[r], &Matrix::zeros(2, 2)).unwrap();
    assert!((&sol.p[0] - &oracle).amax() < 1e-8 * oracle.amax());
}

#[test]
fn lqr_reports_non_pd_inner_matrix() {
    let err = lqr_tv(&[m1(1.0)], &[m1(1.0)], &[m1(1.0)], &[m1(-2.0)], &m1(1.0)).unwrap_err();
    assert!(matches!(err, Error::Design { k: 0, .. }));
}

#[test]
fn huge_measurement_noise_ignores_measurements() {
    let n = 10;
    let sol = kalman_gains(&vec![m1(1.0); 10], &vec![m1(1.0); 10], &vec![m1(1.0); 11], &m1(1.0), &m1(1e12), &m1(1.0)).unwrap();
    assert_eq!(sol.gains.len(), n + 1);
    assert!(sol.gains.iter().all(|g| g.amax() < 1e-10));
}

#[test]
fn certain_state_has_zero_gain() {
    let sol = kalman_gains(&vec![m1(1.0); 5], &vec![m1(1.0); 5], &vec![m1(1.0); 6], &m1(0.0), &m1(1.0), &m1(0.0)).unwrap();
    assert!(sol.gains.iter().all(|g| g.amax() == 0.0));
    assert!(sol.predicted.iter().chain(&sol.filtered).all(|p| p.amax() == 0.0));
}

#[test]
fn scalar_kalman_converges_to_golden_ratio() {
    let sol = kalman_gains(&vec![m1(1.0); 60], &vec![m1(1.0); 60], &vec![m1(1.0); 61], &m1(1.0), &m1(1.0), &m1(0.0)).unwrap();
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    assert_abs_diff_eq!(sol.predicted[60][(0, 0)], golden, epsilon = 1e-12);
    assert_abs_diff_eq!(sol.gains[60][(0, 0)], golden / (golden + 1.0), epsilon = 1e-12);
}

#[test]
fn kalman_checks_lengths() {
    assert!(matches!(
        kalman_gains(&vec![m1(1.0); 5], &vec![m1(1.0); 5], &vec![m1(1.0); 5], &m1(1.0), &m1(1.0), &m1(0.0)),
        Err(Error::Dimension(_))
    ));
}

/// `x+ = [x0 + dt x1, x1 + dt (sin x0 + x0 x1 + u)]`.
struct Pendulum;

impl SimModel for Pendulum {
    fn name(&self) -> &str {
        "pendulum"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn dt(&self) -> f64 {
        0.1
    }
    fn noise_scale(&self) -> f64 {
        0.0
    }
    fn transition(&self, _k: usize, x: &Vector, u: &Vector) -> Result<Vector> {
        let dt = 0.1;
        Ok(Vector::from_vec(vec![
            x[0] + dt * x[1],
            x[1] + dt * (x[0].sin() + x[0] * x[1] + u[0]),
        ]))
    }
}

#[test]
fn transition_hessians_match_analytic_second_derivatives() {
    let x0 = Vector::from_vec(vec![0.7, -0.3]);
    let nominal = rollout(&Pendulum, &x0, &vec![Vector::from_element(1, 0.2); 4], None).unwrap();
    let h = transition_hessians(&Pendulum, &nominal, 1e-4).unwrap();
    assert_eq!(h.len(), 4);
    for (k, hk) in h.iter().enumerate() {
        let x = &nominal.states[k];
        assert!(hk[0].amax() < 1e-6);
        let expected = Matrix::from_row_slice(2, 2, &[-0.1 * x[0].sin(), 0.1, 0.1, 0.0]);
        assert_abs_diff_eq!(hk[1], expected, epsilon = 1e-6);
    }
    assert!(matches!(transition_hessians(&Pendulum, &nominal, 0.0), Err(Error::Config(_))));
}

fn rom_from(a: Matrix, b: Matrix, c: Matrix, horizon: usize) -> LtvRom {
    LtvRom {
        order: a.nrows(),
        output_dim: c.nrows(),
        input_dim: b.ncols(),
        horizon,
        k_lo: 0,
        k_hi: horizon - 1,
        a: vec![a; horizon],
        b: vec![b; horizon],
        c: vec![c; horizon + 1],
        singular_values: vec![Vec::new(); horizon + 1],
        deficient_steps: Vec::new(),
    }
}

#[test]
fn zero_rom_gives_open_loop_policy() {
    let p = double_integrator();
    let nominal = lq_optimum(&p);
    let rom = rom_from(Matrix::zeros(2, 2), Matrix::zeros(2, 1), Matrix::zeros(2, 2), p.horizon);
    let policy = build_policy(&nominal, &rom, &FeedbackConfig::new(2, 1)).unwrap();
    assert_eq!(policy.lqr_gains.len(), p.horizon);
    assert_eq!(policy.horizon(), p.horizon);
    assert!(policy.lqr_gains.iter().all(|g| g.amax() == 0.0));
    assert!(policy.kalman.gains.iter().all(|g| g.amax() == 0.0));
    let estimate = Vector::from_vec(vec![3.0, -1.0]);
    assert_eq!(policy.control(4, &estimate), nominal.controls[4]);
}

#[test]
fn identity_output_rom_matches_plant_design() {
    let p = double_integrator();
    let nominal = lq_optimum(&p);
    let rom = rom_from(p.model.a(0).clone(), p.model.b(0).clone(), Matrix::identity(2, 2), p.horizon);
    let config = FeedbackConfig::new(2, 1);
    let policy = build_policy(&nominal, &rom, &config).unwrap();
    let direct = lqr_tv(
        &vec![p.model.a(0).clone(); p.horizon],
        &vec![p.model.b(0).clone(); p.horizon],
        std::slice::from_ref(&config.q),
        std::slice::from_ref(&config.r),
        &config.q_terminal,
    )
    .unwrap();
    for (g, d) in policy.lqr_gains.iter().zip(&direct.gains) {
        assert_abs_diff_eq!(g, d, epsilon = 1e-12);
    }
}

#[test]
fn policy_rejects_mismatched_model() {
    let p = double_integrator();
    let nominal = lq_optimum(&p);
    let rom = rom_from(Matrix::zeros(2, 2), Matrix::zeros(2, 1), Matrix::zeros(2, 2), p.horizon - 1);
    assert!(matches!(
        build_policy(&nominal, &rom, &FeedbackConfig::new(2, 1)),
        Err(Error::Dimension(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn theorem1_matches_lqr_with_half_control_weight(seed in any::<u64>(), n in 1usize..=6, m in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizon = 50;
        let (a, b, q, r, qn) = random_system(&mut rng, n, m, horizon);
        let t1 = riccati_theorem1(&a, &b, &q, &r, None, &qn, GainForm::Derived).unwrap();
        let half: Vec<Matrix> = r.iter().map(|rk| rk * 0.5).collect();
        let lqr = lqr_tv(&a, &b, &q, &half, &qn).unwrap();
        for k in 0..horizon {
            let scale = lqr.gains[k].amax().max(1.0);
            prop_assert!((&t1.k[k] + &lqr.gains[k]).amax() <= 1e-10 * scale);
            let pscale = lqr.p[k].amax().max(1.0);
            prop_assert!((&t1.p[k] - &lqr.p[k]).amax() <= 1e-10 * pscale);
            prop_assert!((&t1.p[k] - t1.p[k].transpose()).amax() == 0.0);
        }
    }

    #[test]
    fn costate_is_linear(seed in any::<u64>(), n in 1usize..=5, alpha in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizon = 12;
        let mut gauss = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let a: Vec<Matrix> = (0..horizon).map(|_| gauss(n, n)).collect();
        let l1: Vec<Matrix> = (0..horizon).map(|_| gauss(1, n)).collect();
        let l2: Vec<Matrix> = (0..horizon).map(|_| gauss(1, n)).collect();
        let (g1n, g2n) = (gauss(1, n), gauss(1, n));
        let g1 = costate_recursion(&l1, &a, &g1n).unwrap();
        let g2 = costate_recursion(&l2, &a, &g2n).unwrap();
        let l: Vec<Matrix> = l1.iter().zip(&l2).map(|(x, y)| x + y * alpha).collect();
        let g = costate_recursion(&l, &a, &(&g1n + &g2n * alpha)).unwrap();
        for k in 0..=horizon {
            let expected = &g1.g[k] + &g2.g[k] * alpha;
            prop_assert!((&g.g[k] - &expected).amax() <= 1e-9 * expected.amax().max(1.0));
        }
    }

    #[test]
    fn lqr_values_are_psd_and_grow_with_horizon(seed in any::<u64>(), n in 1usize..=5, m in 1usize..=2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizon = 25;
        let (a, b, q, r, _) = random_system(&mut rng, n, m, 1);
        let a = vec![a[0].clone() * 0.6; horizon];
        let b = vec![b[0].clone(); horizon];
        let sol = lqr_tv(&a, &b, &q, &r, &Matrix::zeros(n, n)).unwrap();
        for k in 0..horizon {
            let scale = sol.p[k].amax().max(1.0);
            prop_assert!(min_eigenvalue(&sol.p[k]) >= -1e-10 * scale);
            // P_k has more steps to go than P_{k+1}.
            prop_assert!(min_eigenvalue(&(&sol.p[k] - &sol.p[k + 1])) >= -1e-9 * scale);
        }
    }
}
