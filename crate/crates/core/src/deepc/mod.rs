//! Regularized data-enabled predictive control.
//!
//! The controller predicts with the Hankel data blocks instead of a model:
//! any `g` with `col(U_p, Y_p, U_f, Y_f) g = col(u_ini, y_ini + sigma_y, u, y)`
//! is a candidate future trajectory. Inputs are split into `l` controllable
//! split fractions followed by demand coordinates fixed to their forecast.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{pseudo_inverse, vstack};
use crate::lti::HankelBlocks;
use crate::qp::{self, reformulate_l1, L1Reformulation, L1Term, QpSettings, QpStatus, QuadraticProgram};

#[derive(Debug, Clone, PartialEq)]
pub struct DeePCConfig {
    pub t_ini: usize,
    pub t_f: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_y: f64,
    /// Output weight, `p x p`.
    pub q: DMatrix<f64>,
    /// Input weight, `m x m`; entries on demand coordinates have no effect.
    pub r: DMatrix<f64>,
    pub lambda_lb: Vec<f64>,
    pub lambda_ub: Vec<f64>,
    pub duty_cycle_steps: usize,
    pub apply_steps: usize,
    pub rho_max: Vec<f64>,
}

impl DeePCConfig {
    pub fn inputs(&self) -> usize {
        self.r.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.q.nrows()
    }

    pub fn controllable(&self) -> usize {
        self.lambda_lb.len()
    }

    /// Checks the configuration against data of length `data_len`.
    pub fn validate(&self, data_len: usize) -> Result<()> {
        let (m, p, l) = (self.inputs(), self.outputs(), self.controllable());
        if self.t_ini == 0 || self.t_f == 0 {
            return Err(Error::arg("T_ini and T_f must be positive"));
        }
        if self.t_ini + self.t_f > data_len {
            return Err(Error::dim(format!(
                "T_ini + T_f = {} exceeds data length {data_len}",
                self.t_ini + self.t_f
            )));
        }
        if self.q.ncols() != p || self.r.ncols() != m || self.rho_max.len() != p {
            return Err(Error::dim("Q must be p x p, R m x m and rho_max of length p"));
        }
        if self.lambda_ub.len() != l || l > m {
            return Err(Error::dim("split-fraction bounds must have one entry per actuator"));
        }
        for k in 0..l {
            let (lo, hi) = (self.lambda_lb[k], self.lambda_ub[k]);
            if !(0.0 <= lo && lo <= hi && hi < 1.0) {
                return Err(Error::arg(format!("actuator {k}: need 0 <= lower <= upper < 1")));
            }
        }
        if [self.lambda1, self.lambda2, self.lambda_y].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::arg("regularization weights must be nonnegative"));
        }
        if self.duty_cycle_steps == 0 || self.t_f % self.duty_cycle_steps != 0 {
            return Err(Error::arg("T_f must be a positive multiple of duty_cycle_steps"));
        }
        if self.apply_steps == 0 || self.apply_steps > self.t_f || self.apply_steps % self.duty_cycle_steps != 0 {
            return Err(Error::arg("apply_steps must be a multiple of duty_cycle_steps and at most T_f"));
        }
        if self.rho_max.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::arg("rho_max must be positive"));
        }
        Ok(())
    }
}

/// Input set `U`: split-fraction bounds, hold constraint `M u = 0` and demand
/// constraint `D u = d_bar`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputConstraintSet {
    pub m: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub d_bar: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl InputConstraintSet {
    /// Builds `U` for the forecast `d_bar`, stacked over the horizon with the
    /// `m - l` demand coordinates of each step.
    pub fn new(config: &DeePCConfig, d_bar: &DVector<f64>) -> Result<Self> {
        let (m, l, tf) = (config.inputs(), config.controllable(), config.t_f);
        let nd = m - l;
        if d_bar.len() != nd * tf {
            return Err(Error::dim(format!("demand forecast has {} entries, expected {}", d_bar.len(), nd * tf)));
        }
        if config.duty_cycle_steps == 0 || tf % config.duty_cycle_steps != 0 {
            return Err(Error::arg("T_f must be a positive multiple of duty_cycle_steps"));
        }
        let dc = config.duty_cycle_steps;
        let mut hold = DMatrix::zeros(m * tf, m * tf);
        let mut row = 0;
        for a in 0..l {
            for k in 0..tf {
                if (k + 1) % dc != 0 {
                    hold[(row, k * m + a)] = 1.0;
                    hold[(row, (k + 1) * m + a)] = -1.0;
                    row += 1;
                }
            }
        }
        let mut d = DMatrix::zeros(nd * tf, m * tf);
        for k in 0..tf {
            for c in 0..nd {
                d[(k * nd + c, k * m + l + c)] = 1.0;
            }
        }
        let lb = DVector::from_fn(m * tf, |i, _| if i % m < l { config.lambda_lb[i % m] } else { 0.0 });
        let ub = DVector::from_fn(m * tf, |i, _| if i % m < l { config.lambda_ub[i % m] } else { f64::INFINITY });
        Ok(Self { m: hold, d, d_bar: d_bar.clone(), lb, ub })
    }

    /// Nonzero rows of `M`.
    fn hold_rows(&self) -> DMatrix<f64> {
        let rows: Vec<usize> = (0..self.m.nrows()).filter(|&r| self.m.row(r).amax() > 0.0).collect();
        self.m.select_rows(rows.iter())
    }
}

/// Most recent `T_ini` inputs and outputs, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct RecentWindow {
    pub u_ini: DVector<f64>,
    pub y_ini: DVector<f64>,
    inputs: usize,
    outputs: usize,
}

impl RecentWindow {
    pub fn new(u_ini: DVector<f64>, y_ini: DVector<f64>, inputs: usize, outputs: usize, t_ini: usize) -> Result<Self> {
        if u_ini.len() != inputs * t_ini || y_ini.len() != outputs * t_ini {
            return Err(Error::dim("window length must match T_ini"));
        }
        Ok(Self { u_ini, y_ini, inputs, outputs })
    }

    /// Builds the window from the last `t_ini` columns of `u` (`m x T`) and `y`.
    pub fn from_history(u: &DMatrix<f64>, y: &DMatrix<f64>, t_ini: usize) -> Result<Self> {
        let t = u.ncols();
        if y.ncols() != t || t < t_ini {
            return Err(Error::dim("history shorter than T_ini"));
        }
        let cols = t - t_ini..t;
        let u_ini = DVector::from_iterator(u.nrows() * t_ini, cols.clone().flat_map(|c| u.column(c).iter().copied().collect::<Vec<_>>()));
        let y_ini = DVector::from_iterator(y.nrows() * t_ini, cols.flat_map(|c| y.column(c).iter().copied().collect::<Vec<_>>()));
        Self::new(u_ini, y_ini, u.nrows(), y.nrows(), t_ini)
    }

    /// Drops the oldest sample and appends `(u, y)`.
    pub fn push(&mut self, u: &DVector<f64>, y: &DVector<f64>) {
        shift_in(&mut self.u_ini, u, self.inputs);
        shift_in(&mut self.y_ini, y, self.outputs);
    }
}

fn shift_in(buf: &mut DVector<f64>, v: &DVector<f64>, width: usize) {
    assert_eq!(v.len(), width, "sample dimension mismatch");
    let len = buf.len();
    if len == 0 {
        return;
    }
    buf.as_mut_slice().copy_within(width.., 0);
    buf.rows_mut(len - width, width).copy_from(v);
}

/// `Pi = Z^+ Z` with `Z = col(U_p, Y_p, U_f)`.
pub fn build_projection(blocks: &HankelBlocks) -> DMatrix<f64> {
    projection_of(&vstack(&[&blocks.u_past, &blocks.y_past, &blocks.u_future]))
}

pub(crate) fn projection_of(z: &DMatrix<f64>) -> DMatrix<f64> {
    let pi = pseudo_inverse(z) * z;
    (&pi + pi.transpose()) * 0.5
}

/// Column ranges of the decision vector `(g, sigma_y, u, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariableLayout {
    pub g: usize,
    pub sigma_y: usize,
    pub u: usize,
    pub y: usize,
}

impl VariableLayout {
    fn new(blocks: &HankelBlocks) -> Self {
        let n = blocks.columns();
        Self {
            g: n,
            sigma_y: blocks.y_past.nrows(),
            u: blocks.u_future.nrows(),
            y: blocks.y_future.nrows(),
        }
    }

    pub fn total(&self) -> usize {
        self.g + self.sigma_y + self.u + self.y
    }

    pub fn g_offset(&self) -> usize {
        0
    }

    pub fn sigma_offset(&self) -> usize {
        self.g
    }

    pub fn u_offset(&self) -> usize {
        self.g + self.sigma_y
    }

    pub fn y_offset(&self) -> usize {
        self.g + self.sigma_y + self.u
    }
}

/// Assembled problem: the QP after l1 lifting and the layout of the original
/// decision vector inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct DeePCProblem {
    pub reformulated: L1Reformulation,
    pub layout: VariableLayout,
}

impl DeePCProblem {
    pub fn qp(&self) -> &QuadraticProgram {
        &self.reformulated.qp
    }

    /// Extracts `(g, sigma_y, u, y)` from a solution of the lifted QP.
    pub fn split(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
        let l = &self.layout;
        let x = self.reformulated.project(x);
        (
            x.rows(l.g_offset(), l.g).into_owned(),
            x.rows(l.sigma_offset(), l.sigma_y).into_owned(),
            x.rows(l.u_offset(), l.u).into_owned(),
            x.rows(l.y_offset(), l.y).into_owned(),
        )
    }
}

/// Assembles the regularized tracking problem over `(g, sigma_y, u, y)`.
pub fn assemble(
    config: &DeePCConfig,
    blocks: &HankelBlocks,
    projection: &DMatrix<f64>,
    window: &RecentWindow,
    y_ref: &DVector<f64>,
    u_ref: &DVector<f64>,
    constraints: &InputConstraintSet,
) -> Result<DeePCProblem> {
    let (m, p, tf, ti) = (config.inputs(), config.outputs(), config.t_f, config.t_ini);
    if blocks.t_ini != ti || blocks.t_f != tf || blocks.inputs != m || blocks.outputs != p {
        return Err(Error::dim("data blocks do not match the controller dimensions"));
    }
    if config.duty_cycle_steps == 0 || tf % config.duty_cycle_steps != 0 {
        return Err(Error::arg("T_f must be a positive multiple of duty_cycle_steps"));
    }
    if y_ref.len() != p * tf || u_ref.len() != m * tf {
        return Err(Error::dim("references must span the prediction horizon"));
    }
    if window.u_ini.len() != m * ti || window.y_ini.len() != p * ti {
        return Err(Error::dim("window length must match T_ini"));
    }
    let lay = VariableLayout::new(blocks);
    let ng = lay.g;
    if projection.shape() != (ng, ng) {
        return Err(Error::dim("projection must be N x N"));
    }
    if constraints.lb.len() != m * tf {
        return Err(Error::dim("input constraint set does not match the horizon"));
    }
    let nv = lay.total();
    let (og, os, ou, oy) = (lay.g_offset(), lay.sigma_offset(), lay.u_offset(), lay.y_offset());

    let mut pm = DMatrix::zeros(nv, nv);
    let mut qv = DVector::zeros(nv);
    for k in 0..tf {
        let ys = oy + k * p;
        pm.view_mut((ys, ys), (p, p)).copy_from(&(&config.q * 2.0));
        let qy = -(&config.q * y_ref.rows(k * p, p)) * 2.0;
        qv.rows_mut(ys, p).copy_from(&qy);
        let us = ou + k * m;
        pm.view_mut((us, us), (m, m)).copy_from(&(&config.r * 2.0));
        let qu = -(&config.r * u_ref.rows(k * m, m)) * 2.0;
        qv.rows_mut(us, m).copy_from(&qu);
    }
    if config.lambda1 > 0.0 {
        let null = DMatrix::identity(ng, ng) - projection;
        let reg = null.transpose() * &null * (2.0 * config.lambda1);
        pm.view_mut((og, og), (ng, ng)).copy_from(&reg);
    }

    let hold = constraints.hold_rows();
    let nd = constraints.d.nrows();
    let rows = [m * ti, p * ti, m * tf, p * tf, hold.nrows(), nd];
    let me: usize = rows.iter().sum();
    let mut a = DMatrix::zeros(me, nv);
    let mut b = DVector::zeros(me);
    let mut r = 0;
    a.view_mut((r, og), (m * ti, ng)).copy_from(&blocks.u_past);
    b.rows_mut(r, m * ti).copy_from(&window.u_ini);
    r += m * ti;
    a.view_mut((r, og), (p * ti, ng)).copy_from(&blocks.y_past);
    for k in 0..p * ti {
        a[(r + k, os + k)] = -1.0;
    }
    b.rows_mut(r, p * ti).copy_from(&window.y_ini);
    r += p * ti;
    a.view_mut((r, og), (m * tf, ng)).copy_from(&blocks.u_future);
    for k in 0..m * tf {
        a[(r + k, ou + k)] = -1.0;
    }
    r += m * tf;
    a.view_mut((r, og), (p * tf, ng)).copy_from(&blocks.y_future);
    for k in 0..p * tf {
        a[(r + k, oy + k)] = -1.0;
    }
    r += p * tf;
    a.view_mut((r, ou), (hold.nrows(), m * tf)).copy_from(&hold);
    r += hold.nrows();
    a.view_mut((r, ou), (nd, m * tf)).copy_from(&constraints.d);
    b.rows_mut(r, nd).copy_from(&constraints.d_bar);

    let mut lb = DVector::from_element(nv, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(nv, f64::INFINITY);
    if config.lambda_y == 0.0 {
        // without a slack penalty the initial-output equation is enforced exactly
        lb.rows_mut(os, lay.sigma_y).fill(0.0);
        ub.rows_mut(os, lay.sigma_y).fill(0.0);
    }
    lb.rows_mut(ou, m * tf).copy_from(&constraints.lb);
    ub.rows_mut(ou, m * tf).copy_from(&constraints.ub);
    for k in 0..tf {
        for i in 0..p {
            lb[oy + k * p + i] = 0.0;
            ub[oy + k * p + i] = config.rho_max[i];
        }
    }

    let base = QuadraticProgram::new(pm, qv, a, b, lb, ub)?;
    let terms = [
        L1Term::range(config.lambda2, nv, og, ng),
        L1Term::range(config.lambda_y, nv, os, lay.sigma_y),
    ];
    let reformulated = reformulate_l1(&base, &terms)?;
    Ok(DeePCProblem { reformulated, layout: lay })
}

/// Outcome of one optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    /// Planned inputs, one column per step of the horizon.
    pub inputs: DMatrix<f64>,
    /// Predicted outputs, one column per step.
    pub outputs: DMatrix<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// The solver did not return an optimal point and the reference input
    /// was substituted.
    pub degraded: bool,
}

/// A plant advancing by one controller step.
pub trait StepPlant {
    /// Applies split fractions `lambda` for one step and returns the realized
    /// input `col(lambda, d)` together with the measured output.
    fn apply(&mut self, lambda: &DVector<f64>) -> (DVector<f64>, DVector<f64>);
}

#[derive(Debug, Clone)]
pub struct DeePCController {
    config: DeePCConfig,
    blocks: HankelBlocks,
    projection: DMatrix<f64>,
    window: RecentWindow,
    y_ref: DVector<f64>,
    lambda_ref: DVector<f64>,
    settings: QpSettings,
    degraded_steps: usize,
}

impl DeePCController {
    /// `y_ref` is the constant per-step output reference and `lambda_ref` the
    /// default split fractions.
    pub fn new(
        config: DeePCConfig,
        blocks: HankelBlocks,
        window: RecentWindow,
        y_ref: DVector<f64>,
        lambda_ref: DVector<f64>,
        settings: QpSettings,
    ) -> Result<Self> {
        config.validate(blocks.columns() + config.t_ini + config.t_f - 1)?;
        if y_ref.len() != config.outputs() || lambda_ref.len() != config.controllable() {
            return Err(Error::dim("references must match the output and actuator counts"));
        }
        for k in 0..config.controllable() {
            if lambda_ref[k] < config.lambda_lb[k] || lambda_ref[k] > config.lambda_ub[k] {
                return Err(Error::arg(format!("default split fraction {k} violates its bounds")));
            }
        }
        if window.u_ini.len() != config.inputs() * config.t_ini || window.y_ini.len() != config.outputs() * config.t_ini {
            return Err(Error::dim("window length must match T_ini"));
        }
        let projection = build_projection(&blocks);
        Ok(Self { config, blocks, projection, window, y_ref, lambda_ref, settings, degraded_steps: 0 })
    }

    pub fn config(&self) -> &DeePCConfig {
        &self.config
    }

    pub fn window(&self) -> &RecentWindow {
        &self.window
    }

    pub fn degraded_steps(&self) -> usize {
        self.degraded_steps
    }

    /// Reference input `col(lambda_ref, d_k)` stacked over the horizon.
    pub fn reference_input(&self, d_bar: &DVector<f64>) -> DVector<f64> {
        let (m, l) = (self.config.inputs(), self.config.controllable());
        let nd = m - l;
        DVector::from_fn(m * self.config.t_f, |i, _| {
            let (k, c) = (i / m, i % m);
            if c < l { self.lambda_ref[c] } else { d_bar[k * nd + c - l] }
        })
    }

    /// Solves the problem for the current window and demand forecast.
    pub fn plan(&self, d_bar: &DVector<f64>) -> Result<Plan> {
        let cfg = &self.config;
        let (m, p, tf) = (cfg.inputs(), cfg.outputs(), cfg.t_f);
        let constraints = InputConstraintSet::new(cfg, d_bar)?;
        let u_ref = self.reference_input(d_bar);
        let y_ref = DVector::from_fn(p * tf, |i, _| self.y_ref[i % p]);
        let problem = assemble(cfg, &self.blocks, &self.projection, &self.window, &y_ref, &u_ref, &constraints)?;
        let sol = qp::solve(problem.qp(), &self.settings);
        let degraded = sol.status != QpStatus::Optimal;
        let (u, y) = if degraded {
            log::warn!(
                "DeePC solve ended with {:?}; applying the reference input",
                sol.status
            );
            (u_ref, DVector::from_element(p * tf, f64::NAN))
        } else {
            let (_, _, mut u, y) = problem.split(&sol.x);
            for i in 0..u.len() {
                u[i] = u[i].clamp(constraints.lb[i], constraints.ub[i]);
            }
            (u, y)
        };
        Ok(Plan {
            inputs: DMatrix::from_column_slice(m, tf, u.as_slice()),
            outputs: DMatrix::from_column_slice(p, tf, y.as_slice()),
            status: sol.status,
            iterations: sol.iterations,
            objective: sol.objective,
            primal_residual: sol.primal_residual,
            dual_residual: sol.dual_residual,
            degraded,
        })
    }

    /// Records a realized input/output pair in the window.
    pub fn observe(&mut self, u: &DVector<f64>, y: &DVector<f64>) {
        self.window.push(u, y);
    }

    /// Plans, applies the first `apply_steps` split fractions to `plant` and
    /// shifts the window with the resulting measurements.
    pub fn receding_horizon_step<P: StepPlant + ?Sized>(
        &mut self,
        plant: &mut P,
        d_bar: &DVector<f64>,
    ) -> Result<(Plan, Vec<DVector<f64>>)> {
        let plan = self.plan(d_bar)?;
        if plan.degraded {
            self.degraded_steps += 1;
        }
        let l = self.config.controllable();
        let mut applied = Vec::with_capacity(self.config.apply_steps);
        for k in 0..self.config.apply_steps {
            let lambda = plan.inputs.column(k).rows(0, l).into_owned();
            let (u, y) = plant.apply(&lambda);
            self.observe(&u, &y);
            applied.push(lambda);
        }
        Ok((plan, applied))
    }
}

#[cfg(test)]
mod tests;
