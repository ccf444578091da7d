use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urbanflow_core::deepc::{DeePCConfig, DeePCController, RecentWindow, StepPlant};
use urbanflow_core::lti::{split_past_future, StateSpaceModel};
use urbanflow_core::qp::QpSettings;

const LB: f64 = 0.0;
const UB: f64 = 0.9;

struct Truth {
    model: StateSpaceModel,
    x: DVector<f64>,
}

impl Truth {
    fn output(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.model.c * &self.x + &self.model.d * u
    }
}

impl StepPlant for Truth {
    fn apply(&mut self, lambda: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let y = self.output(lambda);
        self.x = &self.model.a * &self.x + &self.model.b * lambda;
        (lambda.clone(), y)
    }
}

/// Nonnegative stable system, so outputs stay inside `[0, rho_max]` for
/// nonnegative inputs and the output box never binds.
fn positive_system(rng: &mut ChaCha8Rng, n: usize, m: usize, p: usize) -> StateSpaceModel {
    let mut a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.0..1.0));
    let radius = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    a *= 0.8 / radius;
    let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(0.2..1.0));
    let c = DMatrix::from_fn(p, n, |_, _| rng.gen_range(0.2..1.0));
    let d = DMatrix::zeros(p, m);
    StateSpaceModel::new(a, b, c, d).unwrap()
}

/// Minimizes `0.5 u'Hu + f'u` over the box by enumerating which coordinates
/// sit at a bound and solving the reduced stationarity system.
fn box_qp(h: &DMatrix<f64>, f: &DVector<f64>, lb: f64, ub: f64) -> DVector<f64> {
    let n = f.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut x = DVector::zeros(n);
        let mut free = Vec::new();
        let mut c = code;
        for i in 0..n {
            match c % 3 {
                0 => free.push(i),
                1 => x[i] = lb,
                _ => x[i] = ub,
            }
            c /= 3;
        }
        if !free.is_empty() {
            let k = DMatrix::from_fn(free.len(), free.len(), |r, s| h[(free[r], free[s])]);
            let hx = h * &x;
            let rhs = DVector::from_fn(free.len(), |r, _| -f[free[r]] - hx[free[r]]);
            let Some(sol) = k.cholesky().map(|ch| ch.solve(&rhs)) else { continue };
            for (r, &i) in free.iter().enumerate() {
                x[i] = sol[r];
            }
        }
        if x.iter().any(|v| *v < lb - 1e-12 || *v > ub + 1e-12) {
            continue;
        }
        let obj = 0.5 * x.dot(&(h * &x)) + f.dot(&x);
        if best.as_ref().map_or(true, |(b, _)| obj < *b) {
            best = Some((obj, x));
        }
    }
    best.unwrap().1
}

/// Finite-horizon controller using the true model: reconstructs the current
/// state from the last `t_ini` samples and solves the box-constrained tracking
/// problem with the same weights as the data-driven controller.
struct ModelBased {
    model: StateSpaceModel,
    t_ini: usize,
    t_f: usize,
    q: f64,
    r: f64,
    y_ref: f64,
    u_ref: f64,
}

impl ModelBased {
    fn current_state(&self, u_ini: &DMatrix<f64>, y_ini: &DMatrix<f64>) -> DVector<f64> {
        let (n, p) = (self.model.order(), self.model.outputs());
        let obs = self.model.observability(self.t_ini);
        let zero = DVector::zeros(n);
        let forced = self.model.simulate(&zero, u_ini).unwrap();
        let free = DVector::from_fn(p * self.t_ini, |i, _| y_ini[(i % p, i / p)] - forced[(i % p, i / p)]);
        let mut x = obs.svd(true, true).solve(&free, 1e-12).unwrap();
        for k in 0..self.t_ini {
            x = &self.model.a * &x + &self.model.b * u_ini.column(k);
        }
        x
    }

    fn first_input(&self, x: &DVector<f64>) -> DVector<f64> {
        let (n, m, p, tf) = (self.model.order(), self.model.inputs(), self.model.outputs(), self.t_f);
        let free = self.model.observability(tf) * x;
        // forced response matrix: column j is the output to a unit impulse in input coordinate j
        let mut g = DMatrix::zeros(p * tf, m * tf);
        for j in 0..m * tf {
            let mut u = DMatrix::zeros(m, tf);
            u[(j % m, j / m)] = 1.0;
            let y = self.model.simulate(&DVector::zeros(n), &u).unwrap();
            for i in 0..p * tf {
                g[(i, j)] = y[(i % p, i / p)];
            }
        }
        let h = (g.transpose() * &g * self.q + DMatrix::identity(m * tf, m * tf) * self.r) * 2.0;
        let e = free.add_scalar(-self.y_ref);
        let f = (g.transpose() * e * self.q) * 2.0 - DVector::from_element(m * tf, 2.0 * self.r * self.u_ref);
        let u = box_qp(&h, &f, LB, UB);
        u.rows(0, m).into_owned()
    }
}

fn compare(seed: u64, n: usize, m: usize, p: usize, t_ini: usize, t_f: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = positive_system(&mut rng, n, m, p);
    let len = (m + 1) * (t_ini + t_f + n) + 40;
    let u_data = DMatrix::from_fn(m, len, |_, _| rng.gen_range(LB..UB));
    let y_data = model.simulate(&DVector::zeros(n), &u_data).unwrap();
    let mut x_end = DVector::zeros(n);
    for k in 0..len {
        x_end = &model.a * &x_end + &model.b * u_data.column(k);
    }

    let (q, r, y_ref, u_ref) = (1.0, 0.1, 1.5, 0.4);
    let config = DeePCConfig {
        t_ini,
        t_f,
        lambda1: 0.0,
        lambda2: 0.0,
        lambda_y: 0.0,
        q: DMatrix::identity(p, p) * q,
        r: DMatrix::identity(m, m) * r,
        lambda_lb: vec![LB; m],
        lambda_ub: vec![UB; m],
        duty_cycle_steps: 1,
        apply_steps: 1,
        rho_max: vec![1e6; p],
    };
    let blocks = split_past_future(&u_data, &y_data, t_ini, t_f).unwrap();
    let window = RecentWindow::from_history(&u_data, &y_data, t_ini).unwrap();
    let mut deepc = DeePCController::new(
        config,
        blocks,
        window,
        DVector::from_element(p, y_ref),
        DVector::from_element(m, u_ref),
        QpSettings::default(),
    )
    .unwrap();
    let oracle = ModelBased { model: model.clone(), t_ini, t_f, q, r, y_ref, u_ref };

    let mut data_plant = Truth { model: model.clone(), x: x_end.clone() };
    let mut model_plant = Truth { model: model.clone(), x: x_end };
    let mut u_hist = u_data.columns(len - t_ini, t_ini).into_owned();
    let mut y_hist = y_data.columns(len - t_ini, t_ini).into_owned();
    let mut worst: f64 = 0.0;
    for step in 0..50 {
        let (plan, _) = deepc.receding_horizon_step(&mut data_plant, &DVector::zeros(0)).unwrap();
        assert!(!plan.degraded, "seed {seed} step {step}: {:?}", plan.status);
        let y_data_driven = &model.c * &data_plant.x;

        let x = oracle.current_state(&u_hist, &y_hist);
        let u = oracle.first_input(&x);
        let (_, y) = model_plant.apply(&u);
        u_hist = DMatrix::from_fn(m, t_ini, |i, k| if k + 1 < t_ini { u_hist[(i, k + 1)] } else { u[i] });
        y_hist = DMatrix::from_fn(p, t_ini, |i, k| if k + 1 < t_ini { y_hist[(i, k + 1)] } else { y[i] });
        let y_model = &model.c * &model_plant.x;

        let dev = (y_data_driven - y_model).amax();
        worst = worst.max(dev);
        assert!(dev <= 1e-4, "seed {seed} step {step}: output deviation {dev:e}");
    }
    worst
}

#[test]
fn single_channel_system_matches_true_model_controller() {
    for seed in 0..3 {
        let worst = compare(seed, 3, 1, 1, 3, 6);
        eprintln!("seed {seed}: worst deviation {worst:e}");
    }
}

#[test]
fn two_channel_system_matches_true_model_controller() {
    for seed in 10..12 {
        let worst = compare(seed, 2, 2, 2, 2, 3);
        eprintln!("seed {seed}: worst deviation {worst:e}");
    }
}
