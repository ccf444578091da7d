//! Quartic MFD estimation from density/flow scatter.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lti::format_float;

const GRID_POINTS: usize = 10_000;
const ROOT_TOL: f64 = 1e-9;
/// A local minimum counts as a root when it is this small relative to the
/// largest value on the search interval.
const TOUCH_TOL: f64 = 1e-8;
const MIN_POINTS: usize = 10;

/// Fitted `phi = sum_k c_k rho^k` with its critical and maximal densities.
#[derive(Debug, Clone, PartialEq)]
pub struct MfdEstimate {
    pub coefficients: [f64; 5],
    pub rho_cr: f64,
    /// Absent when the polynomial has no positive root in the search range.
    pub rho_max: Option<f64>,
    pub rmse: f64,
    pub diagnostic: Option<String>,
}

impl MfdEstimate {
    pub fn eval(&self, rho: f64) -> f64 {
        poly(&self.coefficients, rho)
    }

    /// Samples of the fitted curve on `[0, upper]`.
    pub fn curve(&self, upper: f64, samples: usize) -> Vec<(f64, f64)> {
        let samples = samples.max(2);
        (0..samples)
            .map(|k| {
                let x = upper * k as f64 / (samples - 1) as f64;
                (x, self.eval(x))
            })
            .collect()
    }
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, ck| acc * x + ck)
}

fn derivative(c: &[f64; 5]) -> [f64; 4] {
    [c[1], 2.0 * c[2], 3.0 * c[3], 4.0 * c[4]]
}

fn bisect(c: &[f64], mut lo: f64, mut hi: f64) -> f64 {
    let f_lo = poly(c, lo);
    while hi - lo > ROOT_TOL {
        let mid = 0.5 * (lo + hi);
        let f_mid = poly(c, mid);
        if (f_mid > 0.0) == (f_lo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Sign changes of `c` on a uniform grid over `[0, upper]`, refined by
/// bisection. `falling` selects positive-to-nonpositive crossings, otherwise
/// nonpositive-to-positive ones.
fn crossings(c: &[f64], upper: f64, falling: bool) -> Vec<f64> {
    let h = upper / (GRID_POINTS - 1) as f64;
    let mut out = Vec::new();
    let mut prev = poly(c, 0.0);
    for k in 1..GRID_POINTS {
        let (a, b) = ((k - 1) as f64 * h, k as f64 * h);
        let cur = poly(c, b);
        let hit = if falling { prev > 0.0 && cur <= 0.0 } else { prev <= 0.0 && cur > 0.0 };
        if hit {
            out.push(if cur == 0.0 { b } else { bisect(c, a, b) });
        }
        prev = cur;
    }
    out
}

/// Least-squares quartic fit followed by root and argmax extraction.
pub fn fit(points: &[(f64, f64)]) -> Result<MfdEstimate> {
    if points.len() < MIN_POINTS {
        return Err(Error::arg(format!("need at least {MIN_POINTS} points, got {}", points.len())));
    }
    if points.iter().any(|&(r, f)| !(r >= 0.0 && f >= 0.0) || !r.is_finite() || !f.is_finite()) {
        return Err(Error::arg("densities and flows must be finite and nonnegative"));
    }
    if points.iter().all(|&(_, f)| f == 0.0) {
        return Err(Error::Degenerate("all flows are zero".into()));
    }
    let max_rho = points.iter().map(|p| p.0).fold(0.0, f64::max);
    if max_rho == 0.0 {
        return Err(Error::Degenerate("all densities are zero".into()));
    }

    // fit in rho / max_rho for conditioning, then undo the scaling
    let v = DMatrix::from_fn(points.len(), 5, |i, k| (points[i].0 / max_rho).powi(k as i32));
    let phi = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
    let a = v
        .clone()
        .svd(true, true)
        .solve(&phi, 1e-14)
        .map_err(|e| Error::Degenerate(e.to_string()))?;
    let mut coefficients = [0.0; 5];
    for k in 0..5 {
        coefficients[k] = a[k] / max_rho.powi(k as i32);
    }
    let rmse = ((&v * &a - &phi).norm_squared() / points.len() as f64).sqrt();

    let upper = 3.0 * max_rho;
    let d = derivative(&coefficients);
    let scale = (0..GRID_POINTS)
        .map(|k| poly(&coefficients, upper * k as f64 / (GRID_POINTS - 1) as f64).abs())
        .fold(0.0, f64::max);
    let mut roots = crossings(&coefficients, upper, true);
    roots.extend(
        crossings(&d, upper, false)
            .into_iter()
            .filter(|&x| poly(&coefficients, x).abs() <= TOUCH_TOL * scale),
    );
    // roots before the curve has risen are fitting noise around the origin
    let risen = |x: f64| {
        let steps = ((x / upper) * (GRID_POINTS - 1) as f64) as usize;
        (0..=steps).any(|k| poly(&coefficients, upper * k as f64 / (GRID_POINTS - 1) as f64) > TOUCH_TOL * scale)
    };
    let rho_max = roots.into_iter().filter(|&x| x > 0.0 && risen(x)).min_by(f64::total_cmp);

    let end = rho_max.unwrap_or(upper);
    let rho_cr = crossings(&d, end, true)
        .into_iter()
        .filter(|&x| x > 0.0 && x < end)
        .max_by(|a, b| poly(&coefficients, *a).total_cmp(&poly(&coefficients, *b)));
    let rho_cr = match rho_cr {
        Some(x) => x,
        None => return Err(Error::Degenerate("fitted curve has no interior maximum".into())),
    };
    let diagnostic = rho_max
        .is_none()
        .then(|| format!("no positive root in [0, {upper}]; fall back to the configured maximum density"));
    Ok(MfdEstimate { coefficients, rho_cr, rho_max, rmse, diagnostic })
}

/// Stacks per-region critical densities into the output reference.
pub fn critical_reference(estimates: &BTreeMap<usize, MfdEstimate>, regions: usize) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(regions);
    for i in 0..regions {
        out[i] = estimates
            .get(&i)
            .ok_or_else(|| Error::arg(format!("no MFD estimate for region {i}")))?
            .rho_cr;
    }
    Ok(out)
}

/// Fits two scatters of the same region (for instance without and with
/// control) and returns both estimates.
pub fn compare(first: &[(f64, f64)], second: &[(f64, f64)]) -> Result<(MfdEstimate, MfdEstimate)> {
    Ok((fit(first)?, fit(second)?))
}

/// Reads `density,flow` rows.
pub fn read_points<R: Read>(reader: R) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse { line: 1, msg: format!("missing column `{name}`") })
    };
    let (cd, cf) = (col("density")?, col("flow")?);
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let get = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Parse { line, msg: "expected numeric density and flow".into() })
        };
        out.push((get(cd)?, get(cf)?));
    }
    Ok(out)
}

/// Writes fitted curve samples as `density,flow`.
pub fn write_curve<W: Write>(est: &MfdEstimate, upper: f64, samples: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["density", "flow"])?;
    for (x, y) in est.curve(upper, samples) {
        w.write_record([format_float(x), format_float(y)])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the `rho_cr,rho_max,rmse` summary; an absent maximum is left empty.
pub fn write_summary<W: Write>(est: &MfdEstimate, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["rho_cr", "rho_max", "rmse"])?;
    w.write_record([
        format_float(est.rho_cr),
        est.rho_max.map(format_float).unwrap_or_default(),
        format_float(est.rmse),
    ])?;
    w.flush()?;
    Ok(())
}
