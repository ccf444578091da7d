use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::lti::{split_past_future, StateSpaceModel};

struct LtiPlant {
    model: StateSpaceModel,
    x: DVector<f64>,
}

impl StepPlant for LtiPlant {
    fn apply(&mut self, lambda: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let y = &self.model.c * &self.x + &self.model.d * lambda;
        self.x = &self.model.a * &self.x + &self.model.b * lambda;
        (lambda.clone(), y)
    }
}

fn scalar_model() -> StateSpaceModel {
    StateSpaceModel::new(dmatrix![0.5], dmatrix![1.0], dmatrix![1.0], dmatrix![0.0]).unwrap()
}

fn config(m: usize, p: usize, l: usize, t_ini: usize, t_f: usize) -> DeePCConfig {
    DeePCConfig {
        t_ini,
        t_f,
        lambda1: 0.0,
        lambda2: 0.0,
        lambda_y: 0.0,
        q: DMatrix::identity(p, p),
        r: DMatrix::identity(m, m) * 0.1,
        lambda_lb: vec![0.0; l],
        lambda_ub: vec![0.99; l],
        duty_cycle_steps: 1,
        apply_steps: 1,
        rho_max: vec![100.0; p],
    }
}

/// Random-input data from `model`, plus the final state.
fn lti_data(model: &StateSpaceModel, t: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = DMatrix::from_fn(model.inputs(), t, |_, _| rng.gen_range(0.0..0.99));
    let x0 = DVector::zeros(model.order());
    let y = model.simulate(&x0, &u).unwrap();
    let mut x = x0;
    for k in 0..t {
        x = &model.a * &x + &model.b * u.column(k);
    }
    (u, y, x)
}

#[test]
fn projection_of_identity_and_zero() {
    assert!((projection_of(&DMatrix::identity(4, 4)) - DMatrix::identity(4, 4)).amax() < 1e-12);
    assert_eq!(projection_of(&DMatrix::zeros(3, 5)), DMatrix::zeros(5, 5));
}

#[test]
fn projection_identities_on_random_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = DMatrix::from_fn(6, 10, |_, _| rng.gen_range(-1.0..1.0));
    let pi = projection_of(&z);
    assert!((&pi * &pi - &pi).amax() < 1e-10);
    assert!((&pi - pi.transpose()).amax() < 1e-12);
    assert!((&pi * z.transpose() - z.transpose()).amax() < 1e-10);
}

#[test]
fn hold_matrix_structure() {
    let mut c = config(3, 1, 1, 2, 4);
    c.duty_cycle_steps = 2;
    let set = InputConstraintSet::new(&c, &DVector::from_element(8, 1.0)).unwrap();
    assert_eq!(set.m.shape(), (12, 12));
    assert_eq!(set.d.shape(), (8, 12));
    let hold = set.hold_rows();
    assert_eq!(hold.nrows(), 2);
    // lambda(1) = lambda(2) and lambda(3) = lambda(4)
    assert_eq!(hold[(0, 0)], 1.0);
    assert_eq!(hold[(0, 3)], -1.0);
    assert_eq!(hold[(1, 6)], 1.0);
    assert_eq!(hold[(1, 9)], -1.0);
    for r in 0..8 {
        assert_eq!(set.d.row(r).sum(), 1.0);
        let col = (0..12).find(|&k| set.d[(r, k)] == 1.0).unwrap();
        assert_ne!(col % 3, 0, "demand selector must skip the split fraction");
    }
}

#[test]
fn config_validation() {
    let c = config(1, 1, 1, 2, 4);
    assert!(c.validate(6).is_ok());
    assert!(matches!(c.validate(5), Err(Error::Dimension(_))));
    let bad = DeePCConfig { duty_cycle_steps: 3, ..c.clone() };
    assert!(matches!(bad.validate(20), Err(Error::Argument(_))));
    let bad = DeePCConfig { lambda_ub: vec![1.0], ..c.clone() };
    assert!(bad.validate(20).is_err());
    let bad = DeePCConfig { apply_steps: 5, ..c };
    assert!(bad.validate(20).is_err());
}

#[test]
fn window_shifts_oldest_out() {
    let mut w = RecentWindow::new(dvector![1.0, 2.0, 3.0, 4.0], dvector![10.0, 20.0], 2, 1, 2).unwrap();
    w.push(&dvector![5.0, 6.0], &dvector![30.0]);
    assert_eq!(w.u_ini, dvector![3.0, 4.0, 5.0, 6.0]);
    assert_eq!(w.y_ini, dvector![20.0, 30.0]);
    assert!(RecentWindow::new(dvector![1.0], dvector![1.0], 1, 1, 2).is_err());
}

fn scalar_controller(t_f: usize, apply: usize) -> (DeePCController, LtiPlant) {
    let model = scalar_model();
    let (u, y, x) = lti_data(&model, 60, 5);
    let mut c = config(1, 1, 1, 2, t_f);
    c.apply_steps = apply;
    let blocks = split_past_future(&u, &y, c.t_ini, c.t_f).unwrap();
    let window = RecentWindow::from_history(&u, &y, c.t_ini).unwrap();
    let ctrl = DeePCController::new(c, blocks, window, dvector![1.0], dvector![0.5], QpSettings::default()).unwrap();
    (ctrl, LtiPlant { model, x })
}

#[test]
fn exact_data_tracks_reachable_reference() {
    // steady state y = 1 under u = 0.5 is reachable and costs nothing
    let model = scalar_model();
    let (u, y, _) = lti_data(&model, 60, 7);
    let c = config(1, 1, 1, 2, 4);
    let blocks = split_past_future(&u, &y, 2, 4).unwrap();
    let window = RecentWindow::new(dvector![0.5, 0.5], dvector![1.0, 1.0], 1, 1, 2).unwrap();
    let set = InputConstraintSet::new(&c, &DVector::zeros(0)).unwrap();
    let pi = build_projection(&blocks);
    let prob = assemble(&c, &blocks, &pi, &window, &DVector::from_element(4, 1.0), &DVector::from_element(4, 0.5), &set).unwrap();
    let sol = qp::solve(prob.qp(), &QpSettings::default());
    assert_eq!(sol.status, QpStatus::Optimal);
    let (_, sigma, u_opt, y_opt) = prob.split(&sol.x);
    assert!((y_opt.add_scalar(-1.0)).amax() <= 1e-6);
    assert!((u_opt.add_scalar(-0.5)).amax() <= 1e-6);
    assert!(sigma.amax() < 1e-9);
}

#[test]
fn demand_coordinates_follow_forecast() {
    // input col(lambda, d); the demand channel is an exogenous input
    let model = StateSpaceModel::new(dmatrix![0.6], dmatrix![1.0, 0.5], dmatrix![1.0], dmatrix![0.0, 0.0]).unwrap();
    let (u, y, _) = lti_data(&model, 80, 9);
    let mut c = config(2, 1, 1, 2, 4);
    c.lambda1 = 1.0;
    c.lambda2 = 0.1;
    c.lambda_y = 10.0;
    let blocks = split_past_future(&u, &y, 2, 4).unwrap();
    let window = RecentWindow::from_history(&u, &y, 2).unwrap();
    let d_bar = dvector![0.3, 0.7, 0.1, 0.9];
    let set = InputConstraintSet::new(&c, &d_bar).unwrap();
    let ctrl = DeePCController::new(c, blocks, window, dvector![1.0], dvector![0.5], QpSettings::default()).unwrap();
    let plan = ctrl.plan(&d_bar).unwrap();
    assert!(!plan.degraded);
    for k in 0..4 {
        assert!((plan.inputs[(1, k)] - d_bar[k]).abs() < 1e-6);
        assert!(plan.inputs[(0, k)] >= set.lb[0] && plan.inputs[(0, k)] <= set.ub[0]);
    }
}

#[test]
fn duty_cycle_hold_is_respected() {
    let model = scalar_model();
    let (u, y, _) = lti_data(&model, 60, 11);
    let mut c = config(1, 1, 1, 2, 4);
    c.duty_cycle_steps = 2;
    c.apply_steps = 2;
    let blocks = split_past_future(&u, &y, 2, 4).unwrap();
    let window = RecentWindow::from_history(&u, &y, 2).unwrap();
    let ctrl = DeePCController::new(c, blocks, window, dvector![1.7], dvector![0.5], QpSettings::default()).unwrap();
    let plan = ctrl.plan(&DVector::zeros(0)).unwrap();
    assert!(!plan.degraded);
    assert!((plan.inputs[(0, 0)] - plan.inputs[(0, 1)]).abs() < 1e-9);
    assert!((plan.inputs[(0, 2)] - plan.inputs[(0, 3)]).abs() < 1e-9);
}

#[test]
fn full_horizon_application_replaces_window() {
    let (mut ctrl, mut plant) = scalar_controller(2, 2);
    let before = ctrl.window().clone();
    let (_, applied) = ctrl.receding_horizon_step(&mut plant, &DVector::zeros(0)).unwrap();
    assert_eq!(applied.len(), 2);
    assert_eq!(ctrl.window().u_ini[0], applied[0][0]);
    assert_eq!(ctrl.window().u_ini[1], applied[1][0]);
    assert_ne!(ctrl.window().y_ini, before.y_ini);
}

#[test]
fn reruns_are_identical() {
    let (mut a, mut pa) = scalar_controller(4, 1);
    let (mut b, mut pb) = scalar_controller(4, 1);
    for _ in 0..3 {
        let (plan_a, ua) = a.receding_horizon_step(&mut pa, &DVector::zeros(0)).unwrap();
        let (plan_b, ub) = b.receding_horizon_step(&mut pb, &DVector::zeros(0)).unwrap();
        assert_eq!(ua, ub);
        assert_eq!(plan_a, plan_b);
    }
}

#[test]
fn solver_failure_falls_back_to_reference() {
    let (mut ctrl, mut plant) = scalar_controller(4, 1);
    ctrl.settings = QpSettings { max_iter: 1, polish: false, ..QpSettings::default() };
    let (plan, applied) = ctrl.receding_horizon_step(&mut plant, &DVector::zeros(0)).unwrap();
    assert!(plan.degraded);
    assert_eq!(applied[0][0], 0.5);
    assert_eq!(ctrl.degraded_steps(), 1);
}

#[test]
fn mismatched_blocks_are_rejected() {
    let model = scalar_model();
    let (u, y, _) = lti_data(&model, 30, 1);
    let c = config(1, 1, 1, 2, 4);
    let blocks = split_past_future(&u, &y, 3, 4).unwrap();
    let window = RecentWindow::from_history(&u, &y, 2).unwrap();
    let set = InputConstraintSet::new(&c, &DVector::zeros(0)).unwrap();
    let pi = build_projection(&blocks);
    let r = assemble(&c, &blocks, &pi, &window, &DVector::zeros(4), &DVector::zeros(4), &set);
    assert!(matches!(r, Err(Error::Dimension(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn slack_keeps_problem_feasible_and_inputs_boxed(seed in 0u64..10_000) {
        // nonlinear data and an arbitrary window: only the slack can reconcile them
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = 40;
        let u = DMatrix::from_fn(2, t, |_, _| rng.gen_range(0.0..1.0));
        let mut y = DMatrix::zeros(1, t);
        let mut s = 0.3;
        for k in 0..t {
            s = 0.8 * s + 0.5 * u[(0, k)] * (1.0 - s) + 0.1 * u[(1, k)] * u[(1, k)];
            y[(0, k)] = s;
        }
        let mut c = config(2, 1, 1, 3, 4);
        c.lambda1 = 1.0;
        c.lambda2 = 0.5;
        c.lambda_y = 5.0;
        c.lambda_lb = vec![0.2];
        c.lambda_ub = vec![0.8];
        c.duty_cycle_steps = 2;
        c.apply_steps = 2;
        let blocks = split_past_future(&u, &y, 3, 4).unwrap();
        let window = RecentWindow::new(
            DVector::from_fn(6, |_, _| rng.gen_range(0.0..1.0)),
            DVector::from_fn(3, |_, _| rng.gen_range(0.0..50.0)),
            2, 1, 3,
        ).unwrap();
        let ctrl = DeePCController::new(c, blocks, window, dvector![0.4], dvector![0.5], QpSettings::default()).unwrap();
        let d_bar = DVector::from_fn(4, |_, _| rng.gen_range(0.0..1.0));
        let plan = ctrl.plan(&d_bar).unwrap();
        prop_assert!(!plan.degraded, "status {:?}", plan.status);
        for k in 0..4 {
            prop_assert!(plan.inputs[(0, k)] >= 0.2 && plan.inputs[(0, k)] <= 0.8);
        }
        prop_assert!((plan.inputs[(0, 0)] - plan.inputs[(0, 1)]).abs() < 1e-9);
        prop_assert!((plan.inputs[(0, 2)] - plan.inputs[(0, 3)]).abs() < 1e-9);
    }
}
