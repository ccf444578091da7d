//! Linear perimeter-flow MPC on piecewise-affine production functions.
//!
//! Each step solves a linear program over flow variables with frozen
//! destination shares, then converts the first flows into gate values and
//! split fractions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::plant::{ActuatorMap, PlantState, RegionNetwork};
use crate::qp::{self, QpSettings, QpStatus, QuadraticProgram};

const LP_REGULARIZATION: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffinePiece {
    pub slope: f64,
    pub intercept: f64,
}

impl AffinePiece {
    pub fn eval(&self, n: f64) -> f64 {
        self.slope * n + self.intercept
    }
}

/// Concave envelope `G(n) = min_l (s_l n + b_l)` of a production function on
/// `[0, n_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PwaMfd {
    pub pieces: Vec<AffinePiece>,
    /// Abscissae of the retained breakpoints, ascending.
    pub breakpoints: Vec<f64>,
    pub n_max: f64,
    /// Breakpoints were dropped to make the envelope concave.
    pub concavified: bool,
}

impl PwaMfd {
    pub fn eval(&self, n: f64) -> f64 {
        self.pieces.iter().map(|p| p.eval(n)).fold(f64::INFINITY, f64::min)
    }
}

/// Chords of `mfd` over `pieces` uniform intervals of `[0, n_max]`, replaced
/// by their upper concave hull when the chords are not concave.
pub fn fit_pwa(mfd: impl Fn(f64) -> f64, n_max: f64, pieces: usize) -> Result<PwaMfd> {
    if pieces == 0 {
        return Err(Error::arg("need at least one affine piece"));
    }
    if !(n_max > 0.0) {
        return Err(Error::arg("n_max must be positive"));
    }
    let pts: Vec<(f64, f64)> = (0..=pieces)
        .map(|k| {
            let n = n_max * k as f64 / pieces as f64;
            (n, mfd(n))
        })
        .collect();
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for &p in &pts {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let concavified = hull.len() < pts.len();
    if concavified {
        log::info!(
            "PWA fit: dropped {} of {} breakpoints to obtain a concave envelope",
            pts.len() - hull.len(),
            pts.len()
        );
    }
    let pieces = hull
        .windows(2)
        .map(|w| {
            let slope = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
            AffinePiece { slope, intercept: w[0].1 - slope * w[0].0 }
        })
        .collect();
    Ok(PwaMfd { pieces, breakpoints: hull.iter().map(|p| p.0).collect(), n_max, concavified })
}

/// PWA envelopes of the network's own production functions.
pub fn network_pwa(network: &RegionNetwork, pieces: usize) -> Result<Vec<PwaMfd>> {
    (0..network.len())
        .map(|i| fit_pwa(|n| network.production(i, n), network.region(i).n_max_veh, pieces))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearMpcConfig {
    /// Prediction horizon `N_p` in controller steps.
    pub horizon: usize,
    /// Controller step length in seconds.
    pub step_s: f64,
    pub pwa: Vec<PwaMfd>,
    /// Flow `(from, to)` each actuator is assigned to.
    pub assignment: Vec<(usize, usize)>,
    /// Optional bound on the change of each transfer flow between
    /// consecutive predicted steps (veh/s).
    pub rate_limit: Option<f64>,
    pub settings: QpSettings,
}

impl LinearMpcConfig {
    /// Assigns each actuator to the flow carrying its largest weight, lowest
    /// `(from, to)` first on ties.
    pub fn new(
        network: &RegionNetwork,
        actuators: &ActuatorMap,
        pwa: Vec<PwaMfd>,
        horizon: usize,
        step_s: f64,
    ) -> Result<Self> {
        if horizon == 0 || !(step_s > 0.0) {
            return Err(Error::arg("horizon and step length must be positive"));
        }
        if pwa.len() != network.len() {
            return Err(Error::dim("one PWA envelope per region"));
        }
        let assignment = actuators
            .actuators()
            .iter()
            .map(|a| {
                let mut best = &a.flows[0];
                for f in &a.flows[1..] {
                    if f.weight > best.weight || (f.weight == best.weight && (f.from, f.to) < (best.from, best.to)) {
                        best = f;
                    }
                }
                (best.from, best.to)
            })
            .collect();
        // LP iterates converge slowly under a small penalty
        let settings = QpSettings { rho: 10.0, max_iter: 100_000, ..QpSettings::default() };
        Ok(Self { horizon, step_s, pwa, assignment, rate_limit: None, settings })
    }
}

/// Result of one MPC step.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcDecision {
    /// Planned completion flows of the first step (veh/s).
    pub internal: DVector<f64>,
    /// Planned transfer flows `(i, h)` of the first step (veh/s).
    pub transfers: DMatrix<f64>,
    /// Predicted accumulations, regions by horizon.
    pub predicted: DMatrix<f64>,
    pub gates: DMatrix<f64>,
    pub lambda: Vec<f64>,
    /// Maximized weighted production over the horizon.
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
}

/// Destination shares `alpha_ij = n_ij / n_i`, zero for empty regions.
pub fn destination_shares(state: &PlantState) -> DMatrix<f64> {
    let acc = state.accumulation();
    DMatrix::from_fn(state.n.nrows(), state.n.ncols(), |i, j| {
        if acc[i] > 0.0 { state.n[(i, j)] / acc[i] } else { 0.0 }
    })
}

/// Share of region `i`'s production that may leave towards `h`, divided by
/// the trip length.
fn sending_share(network: &RegionNetwork, alpha: &DMatrix<f64>, i: usize, h: usize) -> f64 {
    let mut s = 0.0;
    for j in 0..network.len() {
        if j == i {
            continue;
        }
        for &(hop, theta) in network.routing(i, j) {
            if hop == h {
                s += theta * alpha[(i, j)];
            }
        }
    }
    s / network.region(i).trip_length_m
}

/// Growable sparse-by-row builder for equality constraints.
struct Rows {
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
}

impl Rows {
    fn push(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64) {
        self.rows.push(coeffs);
        self.rhs.push(rhs);
    }
}

/// Solves one receding-horizon LP. `demand` holds per-step OD rates (veh/s)
/// for at least `horizon` steps; the last entry is repeated if shorter.
pub fn solve_step(
    state: &PlantState,
    network: &RegionNetwork,
    actuators: &ActuatorMap,
    config: &LinearMpcConfig,
    demand: &[DMatrix<f64>],
) -> Result<MpcDecision> {
    let r = network.len();
    if demand.is_empty() {
        return Err(Error::arg("demand forecast is empty"));
    }
    if config.assignment.len() != actuators.len() {
        return Err(Error::dim("assignment must list one flow per actuator"));
    }
    let np = config.horizon;
    let dt = config.step_s;
    let acc = state.accumulation();
    let alpha = destination_shares(state);
    let edges: Vec<(usize, usize)> =
        (0..r).flat_map(|i| (0..r).map(move |h| (i, h))).filter(|&(i, h)| network.is_adjacent(i, h)).collect();
    let ne = edges.len();
    let per_step = r + ne + r;
    let fii = |k: usize, i: usize| k * per_step + i;
    let fih = |k: usize, e: usize| k * per_step + r + e;
    let nx = |k: usize, i: usize| k * per_step + r + ne + i;

    let mut lb = vec![0.0; np * per_step];
    let mut ub = vec![f64::INFINITY; np * per_step];
    for k in 0..np {
        for i in 0..r {
            ub[nx(k, i)] = network.region(i).n_max_veh;
        }
    }
    let mut eq = Rows { rows: Vec::new(), rhs: Vec::new() };
    let mut slack_rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();

    let internal_share = |i: usize| network.region(i).completion_share * alpha[(i, i)] / network.region(i).trip_length_m;
    let cap = |i: usize, h: usize| {
        network.links().iter().find(|l| l.from == i && l.to == h).map_or(0.0, |l| l.capacity_veh_per_s)
    };

    for k in 0..np {
        let d = &demand[k.min(demand.len() - 1)];
        for i in 0..r {
            // n(k+1) - n(k) - dt (q + in - out) = 0
            let mut row = vec![(nx(k, i), 1.0), (fii(k, i), dt)];
            for (e, &(a, b)) in edges.iter().enumerate() {
                if a == i {
                    row.push((fih(k, e), dt));
                }
                if b == i {
                    row.push((fih(k, e), -dt));
                }
            }
            let q: f64 = d.row(i).sum();
            let mut rhs = dt * q;
            if k == 0 {
                rhs += acc[i];
            } else {
                row.push((nx(k - 1, i), -1.0));
            }
            eq.push(row, rhs);
        }
        for i in 0..r {
            let c = internal_share(i);
            if k == 0 {
                ub[fii(0, i)] = (c * config.pwa[i].eval(acc[i])).max(0.0);
            } else {
                for p in &config.pwa[i].pieces {
                    slack_rows.push((vec![(fii(k, i), 1.0), (nx(k - 1, i), -c * p.slope)], c * p.intercept));
                }
            }
        }
        for (e, &(i, h)) in edges.iter().enumerate() {
            let c = sending_share(network, &alpha, i, h);
            let cap_ih = cap(i, h);
            let nmax_h = network.region(h).n_max_veh;
            if k == 0 {
                let send = (c * config.pwa[i].eval(acc[i])).max(0.0);
                let recv = network.receiving_capacity(i, h, acc[h]);
                ub[fih(0, e)] = send.min(recv).max(0.0);
            } else {
                for p in &config.pwa[i].pieces {
                    slack_rows.push((vec![(fih(k, e), 1.0), (nx(k - 1, i), -c * p.slope)], c * p.intercept));
                }
                slack_rows.push((vec![(fih(k, e), 1.0), (nx(k - 1, h), cap_ih / nmax_h)], cap_ih));
                if let Some(rate) = config.rate_limit {
                    slack_rows.push((vec![(fih(k, e), 1.0), (fih(k - 1, e), -1.0)], rate));
                    slack_rows.push((vec![(fih(k, e), -1.0), (fih(k - 1, e), 1.0)], rate));
                }
            }
        }
    }

    let n_main = np * per_step;
    let n = n_main + slack_rows.len();
    for (s, (mut row, rhs)) in slack_rows.into_iter().enumerate() {
        row.push((n_main + s, 1.0));
        eq.push(row, rhs);
    }
    lb.resize(n, 0.0);
    ub.resize(n, f64::INFINITY);

    let mut a_eq = DMatrix::zeros(eq.rows.len(), n);
    for (row, coeffs) in eq.rows.iter().enumerate() {
        for &(col, v) in coeffs {
            a_eq[(row, col)] += v;
        }
    }
    let l_mean = network.regions().iter().map(|g| g.trip_length_m).sum::<f64>() / r as f64;
    let mut q = DVector::zeros(n);
    for k in 0..np {
        for i in 0..r {
            q[fii(k, i)] = -network.region(i).trip_length_m / l_mean;
        }
        for (e, &(i, _)) in edges.iter().enumerate() {
            q[fih(k, e)] = -network.region(i).trip_length_m / l_mean;
        }
    }
    let p = DMatrix::identity(n, n) * LP_REGULARIZATION;
    let lp = QuadraticProgram::new(p, q, a_eq, DVector::from_vec(eq.rhs), DVector::from_vec(lb), DVector::from_vec(ub))?;
    let sol = qp::solve(&lp, &config.settings);
    let objective = -lp.q().dot(&sol.x) * l_mean;

    let mut internal = DVector::zeros(r);
    let mut transfers = DMatrix::zeros(r, r);
    let mut predicted = DMatrix::zeros(r, np);
    if sol.status == QpStatus::Optimal {
        for i in 0..r {
            internal[i] = sol.x[fii(0, i)].max(0.0);
            for k in 0..np {
                predicted[(i, k)] = sol.x[nx(k, i)];
            }
        }
        for (e, &(i, h)) in edges.iter().enumerate() {
            transfers[(i, h)] = sol.x[fih(0, e)].max(0.0);
        }
    } else {
        log::warn!("MPC LP ended with {:?}: {}", sol.status, sol.diagnostic.as_deref().unwrap_or(""));
    }

    let mut gates = DMatrix::from_element(r, r, 1.0);
    let mut capacity = DMatrix::zeros(r, r);
    for &(i, h) in &edges {
        let c = sending_share(network, &alpha, i, h) * config.pwa[i].eval(acc[i]);
        capacity[(i, h)] = c;
        gates[(i, h)] = if c > 0.0 { (transfers[(i, h)] / c).clamp(0.0, 1.0) } else { 0.0 };
    }
    let lambda = actuators
        .actuators()
        .iter()
        .zip(&config.assignment)
        .map(|(a, &(i, h))| {
            if sol.status != QpStatus::Optimal || capacity[(i, h)] <= 0.0 {
                return a.default_lambda;
            }
            let w: f64 = a.flows.iter().filter(|f| (f.from, f.to) == (i, h)).map(|f| f.weight).sum();
            (1.0 - (1.0 - gates[(i, h)]) / w).clamp(a.lambda_min, a.lambda_max)
        })
        .collect();
    Ok(MpcDecision {
        internal,
        transfers,
        predicted,
        gates,
        lambda,
        objective,
        status: sol.status,
        iterations: sol.iterations,
    })
}
