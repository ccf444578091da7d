#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use urbanflow_core::qp::QuadraticProgram;

/// Exhaustive active-set enumeration: every variable is free, at its lower
/// bound or at its upper bound. Each pattern's equality-constrained KKT system
/// is solved; the feasible candidate with the smallest objective is returned.
pub fn active_set_oracle(qp: &QuadraticProgram) -> Option<(DVector<f64>, f64)> {
    let n = qp.num_vars();
    let me = qp.num_eq();
    let mut best: Option<(DVector<f64>, f64)> = None;
    let patterns = 3usize.pow(n as u32);
    for code in 0..patterns {
        let mut c = code;
        let mut fixed = vec![None; n];
        let mut skip = false;
        for (i, f) in fixed.iter_mut().enumerate() {
            match c % 3 {
                1 if qp.lb()[i].is_finite() => *f = Some(qp.lb()[i]),
                2 if qp.ub()[i].is_finite() => *f = Some(qp.ub()[i]),
                0 => {}
                _ => skip = true,
            }
            c /= 3;
        }
        if skip {
            continue;
        }
        let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
        let nf = free.len();
        let mut x = DVector::from_fn(n, |i, _| fixed[i].unwrap_or(0.0));
        let dim = nf + me;
        let mut k = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        let px = qp.p() * &x;
        let ax = qp.a_eq() * &x;
        for (r, &i) in free.iter().enumerate() {
            for (s, &j) in free.iter().enumerate() {
                k[(r, s)] = qp.p()[(i, j)];
            }
            for e in 0..me {
                k[(r, nf + e)] = qp.a_eq()[(e, i)];
                k[(nf + e, r)] = qp.a_eq()[(e, i)];
            }
            rhs[r] = -qp.q()[i] - px[i];
        }
        for e in 0..me {
            rhs[nf + e] = qp.b_eq()[e] - ax[e];
        }
        let sol = if dim == 0 {
            DVector::zeros(0)
        } else {
            let svd = k.clone().svd(true, true);
            match svd.solve(&rhs, 1e-12) {
                Ok(s) => s,
                Err(_) => continue,
            }
        };
        if dim > 0 && (&k * &sol - &rhs).amax() > 1e-9 {
            continue;
        }
        for (r, &i) in free.iter().enumerate() {
            x[i] = sol[r];
        }
        let feasible = (0..n).all(|i| x[i] >= qp.lb()[i] - 1e-9 && x[i] <= qp.ub()[i] + 1e-9)
            && (me == 0 || (qp.a_eq() * &x - qp.b_eq()).amax() <= 1e-9);
        if !feasible {
            continue;
        }
        let obj = qp.objective(&x);
        if best.as_ref().map_or(true, |(_, b)| obj < *b) {
            best = Some((x, obj));
        }
    }
    best
}

/// Random strictly convex QP with finite boxes and a feasible equality set.
pub fn random_qp<R: Rng>(rng: &mut R, max_vars: usize, max_eq: usize) -> QuadraticProgram {
    let n = rng.gen_range(1..=max_vars);
    let me = rng.gen_range(0..=max_eq.min(n.saturating_sub(1)));
    let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let p = &b * b.transpose() + DMatrix::identity(n, n) * 0.1;
    let q = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
    let lb = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..0.0));
    let ub = DVector::from_fn(n, |i, _| lb[i] + rng.gen_range(0.5..3.0));
    let x0 = DVector::from_fn(n, |i, _| rng.gen_range(lb[i]..ub[i]));
    let a = DMatrix::from_fn(me, n, |_, _| rng.gen_range(-1.0..1.0));
    let beq = &a * &x0;
    QuadraticProgram::new(p, q, a, beq, lb, ub).expect("valid random instance")
}
