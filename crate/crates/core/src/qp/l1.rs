use nalgebra::{DMatrix, DVector};

use super::QuadraticProgram;
use crate::error::{Error, Result};

/// A weighted `weight * ||S x||_1` term on the original variables.
#[derive(Debug, Clone, PartialEq)]
pub struct L1Term {
    pub weight: f64,
    pub selector: DMatrix<f64>,
}

impl L1Term {
    pub fn new(weight: f64, selector: DMatrix<f64>) -> Self {
        Self { weight, selector }
    }

    /// Selects the contiguous variable range `start..start + len` out of `n`.
    pub fn range(weight: f64, n: usize, start: usize, len: usize) -> Self {
        let mut s = DMatrix::zeros(len, n);
        for k in 0..len {
            s[(k, start + k)] = 1.0;
        }
        Self::new(weight, s)
    }
}

/// A QP whose first `original_vars` variables are the variables of the
/// problem before the l1 terms were lifted, except that a substituted variable
/// holds only its positive part.
#[derive(Debug, Clone, PartialEq)]
pub struct L1Reformulation {
    pub qp: QuadraticProgram,
    pub original_vars: usize,
    /// `(variable, column of its negative part)` for substituted variables.
    pub substituted: Vec<(usize, usize)>,
    terms: Vec<L1Term>,
    base: QuadraticProgram,
}

impl L1Reformulation {
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x.rows(0, self.original_vars).into_owned();
        for &(i, c) in &self.substituted {
            out[i] -= x[c];
        }
        out
    }

    /// Objective of the original problem including the l1 terms, evaluated
    /// directly at `x` (original variables).
    pub fn l1_objective(&self, x: &DVector<f64>) -> f64 {
        let l1: f64 = self
            .terms
            .iter()
            .map(|t| t.weight * (&t.selector * x).iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        self.base.objective(x) + l1
    }
}

/// Index of the single unit entry of a selector row, if it has that form.
fn unit_row(s: &DMatrix<f64>, r: usize) -> Option<usize> {
    let mut hit = None;
    for j in 0..s.ncols() {
        let v = s[(r, j)];
        if v == 0.0 {
            continue;
        }
        if v != 1.0 || hit.is_some() {
            return None;
        }
        hit = Some(j);
    }
    hit
}

/// Replaces each `w ||S x||_1` by `w * 1'(s_pos + s_neg)` with
/// `S x - s_pos + s_neg = 0` and `s_pos, s_neg >= 0`. At an optimum with
/// `w > 0` the pair satisfies `s_pos + s_neg = |S x|`; terms with zero weight
/// contribute nothing and are dropped.
///
/// A row of `S` that picks out a single free variable selected by no other
/// row is handled by writing that variable as `x_pos - x_neg` instead, which
/// needs one new column and no new constraint.
pub fn reformulate_l1(qp: &QuadraticProgram, terms: &[L1Term]) -> Result<L1Reformulation> {
    let n = qp.num_vars();
    for (k, t) in terms.iter().enumerate() {
        if !(t.weight >= 0.0) || !t.weight.is_finite() {
            return Err(Error::arg(format!("l1 term {k} has invalid weight {}", t.weight)));
        }
        if t.selector.ncols() != n {
            return Err(Error::dim(format!(
                "l1 term {k}: selector has {} columns, problem has {n} variables",
                t.selector.ncols()
            )));
        }
    }
    let active: Vec<&L1Term> = terms.iter().filter(|t| t.weight > 0.0).collect();

    let mut uses = vec![0usize; n];
    for t in &active {
        for r in 0..t.selector.nrows() {
            for j in 0..n {
                if t.selector[(r, j)] != 0.0 {
                    uses[j] += 1;
                }
            }
        }
    }
    // (term, row, variable) for substitutable rows
    let mut subs = Vec::new();
    let mut split_rows = Vec::new();
    for (ti, t) in active.iter().enumerate() {
        for r in 0..t.selector.nrows() {
            match unit_row(&t.selector, r) {
                Some(i) if uses[i] == 1 && qp.lb()[i] == f64::NEG_INFINITY && qp.ub()[i] == f64::INFINITY => {
                    subs.push((ti, i))
                }
                _ => split_rows.push((ti, r)),
            }
        }
    }

    let ns = subs.len();
    let nsplit = split_rows.len();
    let nn = n + ns + 2 * nsplit;
    let me = qp.num_eq();

    let mut p = DMatrix::zeros(nn, nn);
    p.view_mut((0, 0), (n, n)).copy_from(qp.p());
    let mut q = DVector::zeros(nn);
    q.rows_mut(0, n).copy_from(qp.q());
    let mut a = DMatrix::zeros(me + nsplit, nn);
    a.view_mut((0, 0), (me, n)).copy_from(qp.a_eq());
    let mut b = DVector::zeros(me + nsplit);
    b.rows_mut(0, me).copy_from(qp.b_eq());
    let mut lb = DVector::zeros(nn);
    let mut ub = DVector::from_element(nn, f64::INFINITY);
    lb.rows_mut(0, n).copy_from(qp.lb());
    ub.rows_mut(0, n).copy_from(qp.ub());

    let mut substituted = Vec::with_capacity(ns);
    for (k, &(ti, i)) in subs.iter().enumerate() {
        let c = n + k;
        let w = active[ti].weight;
        for j in 0..n {
            p[(c, j)] = -qp.p()[(i, j)];
            p[(j, c)] = -qp.p()[(j, i)];
        }
        for (k2, &(_, i2)) in subs[..k].iter().enumerate() {
            let c2 = n + k2;
            p[(c, c2)] = qp.p()[(i, i2)];
            p[(c2, c)] = qp.p()[(i2, i)];
        }
        p[(c, c)] = qp.p()[(i, i)];
        q[c] = -qp.q()[i] + w;
        q[i] += w;
        for r in 0..me {
            a[(r, c)] = -qp.a_eq()[(r, i)];
        }
        lb[i] = 0.0;
        substituted.push((i, c));
    }

    let mut col = n + ns;
    for (row, &(ti, r)) in (me..).zip(&split_rows) {
        let t = active[ti];
        a.view_mut((row, 0), (1, n)).copy_from(&t.selector.row(r));
        a[(row, col)] = -1.0;
        a[(row, col + 1)] = 1.0;
        q[col] = t.weight;
        q[col + 1] = t.weight;
        col += 2;
    }

    Ok(L1Reformulation {
        qp: QuadraticProgram::new(p, q, a, b, lb, ub)?,
        original_vars: n,
        substituted,
        terms: terms.to_vec(),
        base: qp.clone(),
    })
}
