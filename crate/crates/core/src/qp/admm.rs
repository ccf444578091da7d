use nalgebra::{Cholesky, DMatrix, DVector};

use super::{KktResiduals, QpSettings, QpSolution, QpStatus, QuadraticProgram};
use crate::linalg::inf_norm;

const SCALE_MIN: f64 = 1e-4;
const SCALE_MAX: f64 = 1e4;
/// Penalty for bound rows of variables without any finite bound.
const RHO_FREE: f64 = 1e-6;
/// Polishing is attempted at this iteration count and its doublings.
const EARLY_POLISH_START: usize = 100;
const POLISH_DELTA: f64 = 1e-10;
const POLISH_REFINE: usize = 5;
const POLISH_SWEEPS: usize = 25;

/// Problem data after Ruiz equilibration: `x = D x_hat`, equality rows
/// scaled by `E`, cost scaled by `c`.
struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    lb: DVector<f64>,
    ub: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn clamp_scale(v: f64) -> f64 {
    if v < SCALE_MIN {
        1.0
    } else {
        v.min(SCALE_MAX)
    }
}

fn equilibrate(qp: &QuadraticProgram, iters: usize) -> Scaled {
    let n = qp.num_vars();
    let me = qp.num_eq();
    let mut p = qp.p().clone();
    let mut q = qp.q().clone();
    let mut a = qp.a_eq().clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(me, 1.0);
    let mut c = 1.0;

    for _ in 0..iters {
        let mut dd = DVector::from_element(n, 1.0);
        for j in 0..n {
            let mut norm = p.column(j).amax();
            if me > 0 {
                norm = norm.max(a.column(j).amax());
            }
            dd[j] = 1.0 / clamp_scale(norm).sqrt();
        }
        let mut de = DVector::from_element(me, 1.0);
        for i in 0..me {
            de[i] = 1.0 / clamp_scale(a.row(i).amax()).sqrt();
        }
        for j in 0..n {
            for i in 0..n {
                p[(i, j)] *= dd[i] * dd[j];
            }
            for i in 0..me {
                a[(i, j)] *= de[i] * dd[j];
            }
        }
        q.component_mul_assign(&dd);
        d.component_mul_assign(&dd);
        e.component_mul_assign(&de);

        let mean_col = if n > 0 {
            (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64
        } else {
            0.0
        };
        let gamma = 1.0 / clamp_scale(mean_col.max(inf_norm(&q)));
        p *= gamma;
        q *= gamma;
        c *= gamma;
    }

    let b = qp.b_eq().component_mul(&e);
    let lb = qp.lb().component_div(&d);
    let ub = qp.ub().component_div(&d);
    Scaled { p, q, a, b, lb, ub, d, e, c }
}

struct Unscaled {
    x: DVector<f64>,
    y_eq: DVector<f64>,
    y_bound: DVector<f64>,
}

impl Scaled {
    fn unscale(&self, x: &DVector<f64>, y_e: &DVector<f64>, y_b: &DVector<f64>) -> Unscaled {
        Unscaled {
            x: x.component_mul(&self.d),
            y_eq: y_e.component_mul(&self.e) / self.c,
            y_bound: y_b.component_div(&self.d) / self.c,
        }
    }
}

/// Runs the splitting iteration, optionally starting from a primal guess.
pub fn solve_with_initial(
    qp: &QuadraticProgram,
    settings: &QpSettings,
    initial: Option<&DVector<f64>>,
) -> QpSolution {
    let n = qp.num_vars();
    let me = qp.num_eq();
    let s = equilibrate(qp, settings.scaling_iters);

    let rho_eq = settings.rho * settings.eq_rho_scale;
    let rho_b = DVector::from_fn(n, |i, _| {
        if s.lb[i].is_finite() || s.ub[i].is_finite() {
            settings.rho
        } else {
            RHO_FREE
        }
    });

    let mut kmat = s.p.clone();
    if me > 0 {
        kmat += s.a.transpose() * &s.a * rho_eq;
    }
    for i in 0..n {
        kmat[(i, i)] += settings.sigma + rho_b[i];
    }
    let chol = Cholesky::new(kmat).expect("ADMM system is positive definite by construction");

    let mut x = match initial {
        Some(x0) if x0.len() == n => x0.component_div(&s.d),
        _ => DVector::zeros(n),
    };
    let mut z_b = DVector::from_fn(n, |i, _| x[i].clamp(s.lb[i], s.ub[i]));
    let mut y_e = DVector::zeros(me);
    let mut y_b = DVector::zeros(n);
    let a_t = s.a.transpose();
    let a_t_b = if me > 0 { &a_t * &s.b * rho_eq } else { DVector::zeros(n) };

    let alpha = settings.alpha;
    let check_every = settings.check_every.max(1);
    let mut status = QpStatus::MaxIter;
    let mut iterations = settings.max_iter;
    let mut diagnostic = None;
    let mut prev_y_e = y_e.clone();
    let mut prev_y_b = y_b.clone();
    let mut early: Option<Candidate> = None;

    for k in 1..=settings.max_iter {
        let check = k % check_every == 0 || k == settings.max_iter;
        if check {
            prev_y_e.copy_from(&y_e);
            prev_y_b.copy_from(&y_b);
        }

        let mut rhs = &x * settings.sigma - &s.q + rho_b.component_mul(&z_b) - &y_b;
        if me > 0 {
            rhs += &a_t_b - &a_t * &y_e;
        }
        let x_tilde = chol.solve(&rhs);

        if me > 0 {
            let z_tilde = &s.a * &x_tilde;
            // equality rows project back onto b, so only the dual moves
            y_e += (z_tilde - &s.b) * (alpha * rho_eq);
        }
        x = &x_tilde * alpha + &x * (1.0 - alpha);
        for i in 0..n {
            let relaxed = alpha * x_tilde[i] + (1.0 - alpha) * z_b[i];
            let z_new = (relaxed + y_b[i] / rho_b[i]).clamp(s.lb[i], s.ub[i]);
            y_b[i] += rho_b[i] * (relaxed - z_new);
            z_b[i] = z_new;
        }

        if !check {
            continue;
        }

        let (r_prim, r_dual, eps_prim, eps_dual) = residuals(qp, &s, &x, &z_b, &y_e, &y_b, settings);
        if r_prim <= eps_prim && r_dual <= eps_dual {
            status = QpStatus::Optimal;
            iterations = k;
            break;
        }
        if primal_infeasible(qp, &s, &(&y_e - &prev_y_e), &(&y_b - &prev_y_b), settings.eps_infeasible) {
            status = QpStatus::Infeasible;
            iterations = k;
            diagnostic = Some("dual iterates diverge along a separating direction".to_string());
            break;
        }
        if settings.polish && k >= EARLY_POLISH_START && (k / EARLY_POLISH_START).is_power_of_two() && k % EARLY_POLISH_START == 0 {
            if let Some(cand) = polish(qp, &s, &z_b, &y_b) {
                if cand.accepted(qp, settings) {
                    early = Some(cand);
                    status = QpStatus::Optimal;
                    iterations = k;
                    break;
                }
            }
        }
    }

    let un = s.unscale(&x, &y_e, &y_b);
    let mut best = Candidate::new(qp, un);
    let mut polished = false;
    if let Some(cand) = early {
        best = cand;
        polished = true;
    } else if settings.polish && status != QpStatus::Infeasible {
        if let Some(cand) = polish(qp, &s, &z_b, &y_b) {
            let ok = cand.kkt.max() <= best.kkt.max() || cand.accepted(qp, settings);
            if ok {
                best = cand;
                polished = true;
            }
        }
    }
    if status == QpStatus::MaxIter {
        if polished && best.accepted(qp, settings) {
            status = QpStatus::Optimal;
        } else {
            diagnostic = Some(format!(
                "iteration limit reached (primal {:.3e}, dual {:.3e})",
                best.kkt.primal, best.kkt.stationarity
            ));
        }
    }

    let objective = qp.objective(&best.sol.x);
    QpSolution {
        objective,
        primal_residual: best.kkt.primal,
        dual_residual: best.kkt.stationarity,
        x: best.sol.x,
        y_eq: best.sol.y_eq,
        y_bound: best.sol.y_bound,
        iterations,
        status,
        polished,
        diagnostic,
    }
}

struct Candidate {
    sol: Unscaled,
    kkt: KktResiduals,
}

impl Candidate {
    fn new(qp: &QuadraticProgram, sol: Unscaled) -> Self {
        let kkt = qp.kkt_residuals(&sol.x, &sol.y_eq, &sol.y_bound);
        Self { sol, kkt }
    }

    /// Residuals within `eps_abs` plus `eps_rel` times the magnitude of the
    /// primal or dual terms they are built from.
    fn accepted(&self, qp: &QuadraticProgram, settings: &QpSettings) -> bool {
        let x = &self.sol.x;
        let ax = qp.a_eq() * x;
        let primal_scale = inf_norm(x).max(inf_norm(&ax)).max(inf_norm(qp.b_eq()));
        let dual_scale = inf_norm(qp.q())
            .max(inf_norm(&(qp.p() * x)))
            .max(inf_norm(&(qp.a_eq().transpose() * &self.sol.y_eq)))
            .max(inf_norm(&self.sol.y_bound));
        let k = &self.kkt;
        k.primal <= settings.eps_abs + settings.eps_rel * primal_scale
            && k.stationarity <= settings.eps_abs + settings.eps_rel * dual_scale
            && k.complementarity <= settings.eps_abs
    }
}


fn residuals(
    qp: &QuadraticProgram,
    s: &Scaled,
    x: &DVector<f64>,
    z_b: &DVector<f64>,
    y_e: &DVector<f64>,
    y_b: &DVector<f64>,
    settings: &QpSettings,
) -> (f64, f64, f64, f64) {
    let un = s.unscale(x, y_e, y_b);
    let ax = if qp.num_eq() > 0 { qp.a_eq() * &un.x } else { DVector::zeros(0) };
    let eq_res = if qp.num_eq() > 0 { inf_norm(&(&ax - qp.b_eq())) } else { 0.0 };
    let zb = z_b.component_mul(&s.d);
    let r_prim = eq_res.max(inf_norm(&(&un.x - &zb)));

    let px = qp.p() * &un.x;
    let aty = qp.a_eq().transpose() * &un.y_eq;
    let r_dual = inf_norm(&(&px + qp.q() + &aty + &un.y_bound));

    let eps_prim = settings.eps_abs
        + settings.eps_rel * inf_norm(&ax).max(inf_norm(qp.b_eq())).max(inf_norm(&un.x)).max(inf_norm(&zb));
    let eps_dual = settings.eps_abs
        + settings.eps_rel
            * inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&un.y_bound)).max(inf_norm(qp.q()));
    (r_prim, r_dual, eps_prim, eps_dual)
}

fn primal_infeasible(
    qp: &QuadraticProgram,
    s: &Scaled,
    dy_e: &DVector<f64>,
    dy_b: &DVector<f64>,
    eps: f64,
) -> bool {
    let dy_e = dy_e.component_mul(&s.e);
    let dy_b = dy_b.component_div(&s.d);
    let norm = inf_norm(&dy_e).max(inf_norm(&dy_b));
    if norm < 1e-12 {
        return false;
    }
    let lhs = qp.a_eq().transpose() * &dy_e + &dy_b;
    if inf_norm(&lhs) > eps * norm {
        return false;
    }
    let mut support = qp.b_eq().dot(&dy_e);
    for i in 0..qp.num_vars() {
        let v = dy_b[i];
        if v > eps * norm {
            if !qp.ub()[i].is_finite() {
                return false;
            }
            support += qp.ub()[i] * v;
        } else if v < -eps * norm {
            if !qp.lb()[i].is_finite() {
                return false;
            }
            support += qp.lb()[i] * v;
        }
    }
    support < -eps * norm
}

#[derive(Clone, Copy, PartialEq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

/// Solves the equality-constrained problem on the active set guessed from the
/// ADMM iterate, then corrects the guess with primal-dual active-set sweeps:
/// free variables leaving their box are fixed, fixed variables with a
/// multiplier of the wrong sign are released.
fn polish(qp: &QuadraticProgram, s: &Scaled, z_b: &DVector<f64>, y_b: &DVector<f64>) -> Option<Candidate> {
    let n = qp.num_vars();
    let mut set: Vec<Bound> = (0..n)
        .map(|i| {
            if s.lb[i].is_finite() && z_b[i] - s.lb[i] < -y_b[i] {
                Bound::Lower
            } else if s.ub[i].is_finite() && s.ub[i] - z_b[i] < y_b[i] {
                Bound::Upper
            } else {
                Bound::Free
            }
        })
        .collect();
    let mut best: Option<Candidate> = None;
    for _ in 0..POLISH_SWEEPS {
        let Some(cand) = solve_reduced(qp, &set) else { break };
        let mut changed = false;
        for i in 0..n {
            let xi = cand.sol.x[i];
            let yi = cand.sol.y_bound[i];
            let next = match set[i] {
                Bound::Free if xi < qp.lb()[i] => Bound::Lower,
                Bound::Free if xi > qp.ub()[i] => Bound::Upper,
                Bound::Lower if yi > 0.0 => Bound::Free,
                Bound::Upper if yi < 0.0 => Bound::Free,
                b => b,
            };
            changed |= next != set[i];
            set[i] = next;
        }
        if best.as_ref().map_or(true, |b| cand.kkt.max() < b.kkt.max()) {
            best = Some(cand);
        }
        if !changed {
            break;
        }
    }
    best
}

fn solve_reduced(qp: &QuadraticProgram, set: &[Bound]) -> Option<Candidate> {
    let n = qp.num_vars();
    let me = qp.num_eq();
    let fixed: Vec<Option<f64>> = set
        .iter()
        .enumerate()
        .map(|(i, b)| match b {
            Bound::Free => None,
            Bound::Lower => Some(qp.lb()[i]),
            Bound::Upper => Some(qp.ub()[i]),
        })
        .collect();
    let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
    let nf = free.len();
    let mut x = DVector::from_fn(n, |i, _| fixed[i].unwrap_or(0.0));

    // Reduced KKT in the free variables:
    // [P_ff  A_f'] [x_f]   [-q_f - P_fa x_a]
    // [A_f   0   ] [y  ] = [b - A_a x_a     ]
    let dim = nf + me;
    let mut kkt = DMatrix::zeros(dim, dim);
    for (r, &i) in free.iter().enumerate() {
        for (c, &j) in free.iter().enumerate() {
            kkt[(r, c)] = qp.p()[(i, j)];
        }
        for k in 0..me {
            kkt[(r, nf + k)] = qp.a_eq()[(k, i)];
            kkt[(nf + k, r)] = qp.a_eq()[(k, i)];
        }
    }
    let px_a = qp.p() * &x;
    let ax_a = if me > 0 { qp.a_eq() * &x } else { DVector::zeros(0) };
    let mut rhs = DVector::zeros(dim);
    for (r, &i) in free.iter().enumerate() {
        rhs[r] = -qp.q()[i] - px_a[i];
    }
    for k in 0..me {
        rhs[nf + k] = qp.b_eq()[k] - ax_a[k];
    }

    let mut reg = kkt.clone();
    for r in 0..nf {
        reg[(r, r)] += POLISH_DELTA;
    }
    for r in nf..dim {
        reg[(r, r)] -= POLISH_DELTA;
    }
    let mut sol = DVector::zeros(dim);
    if dim > 0 {
        let lu = reg.lu();
        sol = lu.solve(&rhs)?;
        for _ in 0..POLISH_REFINE {
            let resid = &rhs - &kkt * &sol;
            sol += lu.solve(&resid)?;
        }
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }

    for (r, &i) in free.iter().enumerate() {
        x[i] = sol[r];
    }
    let y_eq = DVector::from_iterator(me, sol.rows(nf, me).iter().copied());
    let grad = qp.p() * &x + qp.q() + qp.a_eq().transpose() * &y_eq;
    let y_bound = DVector::from_fn(n, |i, _| if fixed[i].is_some() { -grad[i] } else { 0.0 });
    Some(Candidate::new(qp, Unscaled { x, y_eq, y_bound }))
}
