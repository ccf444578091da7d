//! Post-processing of closed-loop runs: principal components of the applied
//! split fractions, run metrics and MFD comparisons.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::harness::RunRecord;
use crate::lti::format_float;
use crate::mfd_fit::{self, MfdEstimate};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// All covariance eigenvalues, descending.
    pub eigenvalues: DVector<f64>,
    /// Explained-variance ratios of the retained components, normalized over
    /// the retained eigenvalues.
    pub evr: DVector<f64>,
    /// Unit principal directions as columns (actuators by components); the
    /// entries are the loadings.
    pub components: DMatrix<f64>,
    /// Projections of the centered steps (steps by components).
    pub scores: DMatrix<f64>,
    /// Per-actuator mean removed before the decomposition.
    pub mean: DVector<f64>,
}

/// PCA of `lambda` (actuators by steps) with steps as observations.
pub fn pca(lambda: &DMatrix<f64>, k: usize) -> Result<PcaResult> {
    let (l, t) = lambda.shape();
    if t < 2 {
        return Err(Error::arg("PCA needs at least two steps"));
    }
    if k == 0 || k > l.min(t) {
        return Err(Error::arg(format!("component count {k} must lie in 1..={}", l.min(t))));
    }
    let mean = lambda.column_mean();
    let mut x = lambda.transpose();
    for mut row in x.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = x.transpose() * &x / (t as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues = DVector::from_iterator(l, order.iter().map(|&i| eig.eigenvalues[i].max(0.0)));
    let retained: f64 = eigenvalues.rows(0, k).sum();
    // rounding in the mean leaves eigenvalues near eps^2 for constant data
    if retained <= 1e-24 * (1.0 + lambda.amax().powi(2)) {
        return Err(Error::Degenerate("split fractions never vary; explained variance is undefined".into()));
    }
    let mut components = DMatrix::zeros(l, k);
    for (c, &i) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        // sign convention: the largest-magnitude entry is positive
        let mut pivot = 0;
        for a in 1..l {
            if v[a].abs() > v[pivot].abs() {
                pivot = a;
            }
        }
        if v[pivot] < 0.0 {
            v = -v;
        }
        components.set_column(c, &v);
    }
    let evr = eigenvalues.rows(0, k) / retained;
    let scores = &x * &components;
    Ok(PcaResult { eigenvalues, evr, components, scores, mean })
}

/// Actuators sorted by loading, descending; equal loadings keep id order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorRanking {
    pub order: Vec<(usize, f64)>,
}

impl ActuatorRanking {
    /// Up to `k` actuators with the largest positive loadings.
    pub fn top_positive(&self, k: usize) -> Vec<usize> {
        self.order.iter().filter(|(_, v)| *v > 0.0).take(k).map(|(a, _)| *a).collect()
    }

    /// Up to `k` actuators with the most negative loadings, most negative first.
    pub fn bottom_negative(&self, k: usize) -> Vec<usize> {
        self.order.iter().rev().filter(|(_, v)| *v < 0.0).take(k).map(|(a, _)| *a).collect()
    }
}

pub fn rank_actuators(loadings: &[f64]) -> ActuatorRanking {
    let mut order: Vec<(usize, f64)> = loadings.iter().copied().enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    ActuatorRanking { order }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub controller: String,
    pub period_cycles: usize,
    pub total_time_spent_veh_h: f64,
    /// Total time spent per completed trip; absent without completions.
    pub mean_travel_time_min: Option<f64>,
    pub trips_completed_veh: f64,
    pub demand_veh: f64,
    /// Largest cycle-averaged density per region.
    pub peak_density: Vec<f64>,
    /// Smallest cycle-averaged flow per region after the first cycle.
    pub min_flow: Vec<f64>,
    pub gridlock: bool,
    pub degraded_steps: usize,
}

/// Fraction of the maximal density above which a region counts as jammed.
pub const GRIDLOCK_FRACTION: f64 = 0.98;
/// Consecutive jammed duty cycles that raise the gridlock flag.
pub const GRIDLOCK_CYCLES: usize = 3;

pub fn summarize_run(run: &RunRecord, rho_max: &[f64]) -> Result<MetricsSummary> {
    let r = run.regions.len();
    if rho_max.len() != r {
        return Err(Error::dim(format!("{} maximal densities for {r} regions", rho_max.len())));
    }
    let mut peak = vec![0.0f64; r];
    let mut min_flow = vec![f64::INFINITY; r];
    let mut streak = vec![0usize; r];
    let mut gridlock = false;
    for (k, c) in run.cycles.iter().enumerate() {
        for i in 0..r {
            peak[i] = peak[i].max(c.rho[i]);
            if k > 0 {
                min_flow[i] = min_flow[i].min(c.phi[i]);
            }
            if c.rho[i] >= GRIDLOCK_FRACTION * rho_max[i] {
                streak[i] += 1;
                gridlock |= streak[i] >= GRIDLOCK_CYCLES;
            } else {
                streak[i] = 0;
            }
        }
    }
    for v in &mut min_flow {
        if !v.is_finite() {
            *v = 0.0;
        }
    }
    let tts_h = run.time_spent_veh_s / 3600.0;
    let travel = (run.trips_completed_veh > 0.0).then(|| run.time_spent_veh_s / run.trips_completed_veh / 60.0);
    Ok(MetricsSummary {
        controller: run.controller.clone(),
        period_cycles: run.period_cycles,
        total_time_spent_veh_h: tts_h,
        mean_travel_time_min: travel,
        trips_completed_veh: run.trips_completed_veh,
        demand_veh: run.demand_veh,
        peak_density: peak,
        min_flow,
        gridlock,
        degraded_steps: run.degraded_steps,
    })
}

/// Writes `step,PC1..PCk` time scores.
pub fn write_pca_components<W: Write>(res: &PcaResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let k = res.components.ncols();
    let mut header = vec!["step".to_string()];
    header.extend((1..=k).map(|c| format!("PC{c}")));
    w.write_record(&header)?;
    for (s, row) in res.scores.row_iter().enumerate() {
        let mut rec = vec![s.to_string()];
        rec.extend(row.iter().map(|v| format_float(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `actuator,PC1..PCk` loadings followed by an `evr` row.
pub fn write_loadings<W: Write>(res: &PcaResult, actuators: &[String], writer: W) -> Result<()> {
    let (l, k) = res.components.shape();
    if actuators.len() != l {
        return Err(Error::dim(format!("{} actuator names for {l} loadings", actuators.len())));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["actuator".to_string()];
    header.extend((1..=k).map(|c| format!("PC{c}")));
    w.write_record(&header)?;
    for (a, name) in actuators.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend(res.components.row(a).iter().map(|v| format_float(*v)));
        w.write_record(&rec)?;
    }
    let mut rec = vec!["evr".to_string()];
    rec.extend(res.evr.iter().map(|v| format_float(*v)));
    w.write_record(&rec)?;
    w.flush()?;
    Ok(())
}

pub fn write_metrics<W: Write>(rows: &[MetricsSummary], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "controller",
        "period_cycles",
        "total_time_spent_veh_h",
        "mean_travel_time_min",
        "trips_completed_veh",
        "demand_veh",
        "peak_density",
        "min_flow",
        "gridlock",
        "degraded_steps",
    ])?;
    let join = |v: &[f64]| v.iter().map(|x| format_float(*x)).collect::<Vec<_>>().join(";");
    for m in rows {
        w.write_record([
            m.controller.clone(),
            m.period_cycles.to_string(),
            format_float(m.total_time_spent_veh_h),
            m.mean_travel_time_min.map(format_float).unwrap_or_default(),
            format_float(m.trips_completed_veh),
            format_float(m.demand_veh),
            join(&m.peak_density),
            join(&m.min_flow),
            m.gridlock.to_string(),
            m.degraded_steps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Plant-resolution `(density, flow)` samples of region `i` in a run.
pub fn region_scatter(run: &RunRecord, i: usize) -> Vec<(f64, f64)> {
    run.steps.iter().map(|s| (s.rho[i], s.phi[i])).collect()
}

/// One region's MFD fitted separately to two data sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MfdComparison {
    pub region: String,
    pub labels: [String; 2],
    pub fits: [MfdEstimate; 2],
}

pub fn compare_mfds(
    region: &str,
    labels: [&str; 2],
    first: &[(f64, f64)],
    second: &[(f64, f64)],
) -> Result<MfdComparison> {
    let (a, b) = mfd_fit::compare(first, second)?;
    Ok(MfdComparison { region: region.to_string(), labels: labels.map(String::from), fits: [a, b] })
}

/// Writes `region,series,density,flow`: both fitted curves on a common grid
/// up to `upper`, then one `<label>_rho_cr` point per fit.
pub fn write_mfd_comparison<W: Write>(rows: &[MfdComparison], upper: f64, samples: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["region", "series", "density", "flow"])?;
    for c in rows {
        for (label, fit) in c.labels.iter().zip(&c.fits) {
            for (d, f) in fit.curve(upper, samples) {
                w.write_record([c.region.clone(), format!("{label}_fit"), format_float(d), format_float(f)])?;
            }
        }
        for (label, fit) in c.labels.iter().zip(&c.fits) {
            w.write_record([
                c.region.clone(),
                format!("{label}_rho_cr"),
                format_float(fit.rho_cr),
                format_float(fit.eval(fit.rho_cr)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
