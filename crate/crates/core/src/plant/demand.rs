use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-linear demand rate of one origin-destination pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdDemand {
    pub origin: usize,
    pub destination: usize,
    /// `(time_s, rate_veh_per_s)` breakpoints in nondecreasing time order;
    /// the rate is zero outside the first and last breakpoint.
    pub points: Vec<(f64, f64)>,
}

impl OdDemand {
    pub fn rate_at(&self, t: f64) -> f64 {
        let pts = &self.points;
        if pts.is_empty() || t < pts[0].0 || t > pts[pts.len() - 1].0 {
            return 0.0;
        }
        let k = pts.partition_point(|p| p.0 <= t);
        if k == 0 {
            return pts[0].1;
        }
        if k == pts.len() {
            return pts[k - 1].1;
        }
        let (t0, r0) = pts[k - 1];
        let (t1, r1) = pts[k];
        if t1 == t0 {
            return r1;
        }
        r0 + (r1 - r0) * (t - t0) / (t1 - t0)
    }

    /// Exact integral of the piecewise-linear rate, in vehicles.
    pub fn integral(&self) -> f64 {
        self.points.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DemandProfile {
    pub pairs: Vec<OdDemand>,
}

impl DemandProfile {
    pub fn new(pairs: Vec<OdDemand>) -> Result<Self> {
        let p = Self { pairs };
        p.validate(usize::MAX)?;
        Ok(p)
    }

    /// Checks ordering, nonnegativity and region indices below `regions`.
    pub fn validate(&self, regions: usize) -> Result<()> {
        for d in &self.pairs {
            if d.origin >= regions || d.destination >= regions {
                return Err(Error::config(format!(
                    "demand {} -> {} references a missing region",
                    d.origin, d.destination
                )));
            }
            if d.points.iter().any(|p| !(p.1 >= 0.0) || !p.0.is_finite() || !p.1.is_finite()) {
                return Err(Error::config("demand rates must be finite and nonnegative"));
            }
            if d.points.windows(2).any(|w| w[1].0 < w[0].0) {
                return Err(Error::config("demand breakpoints must be sorted by time"));
            }
        }
        Ok(())
    }

    /// OD rate matrix `q[(i, j)]` in veh/s at time `t`.
    pub fn rates_at(&self, t: f64, regions: usize) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(regions, regions);
        for d in &self.pairs {
            q[(d.origin, d.destination)] += d.rate_at(t);
        }
        q
    }

    pub fn total_vehicles(&self) -> f64 {
        self.pairs.iter().map(OdDemand::integral).sum()
    }

    /// End of the last breakpoint over all pairs.
    pub fn end_time(&self) -> f64 {
        self.pairs.iter().filter_map(|d| d.points.last().map(|p| p.0)).fold(0.0, f64::max)
    }
}

/// Two triangular peaks on a single origin-destination pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPeakDemand {
    pub origin: usize,
    pub destination: usize,
    pub total_veh: f64,
    pub peak_times_s: [f64; 2],
    pub half_widths_s: [f64; 2],
    /// Relative heights of the two peaks.
    pub magnitudes: [f64; 2],
}

pub fn make_two_peak_demand(params: &TwoPeakDemand) -> Result<DemandProfile> {
    let p = params;
    if !(p.total_veh >= 0.0) || p.magnitudes.iter().any(|m| !(*m >= 0.0)) {
        return Err(Error::arg("demand total and peak magnitudes must be nonnegative"));
    }
    if p.half_widths_s.iter().any(|w| !(*w > 0.0)) || p.peak_times_s.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::arg("peak times must be nonnegative and widths positive"));
    }
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| p.peak_times_s[a].total_cmp(&p.peak_times_s[b]));
    let [a, b] = order;
    let start = |k: usize| p.peak_times_s[k] - p.half_widths_s[k];
    let end = |k: usize| p.peak_times_s[k] + p.half_widths_s[k];
    if start(a) < 0.0 {
        return Err(Error::arg("first peak starts before time zero"));
    }
    let weight: f64 = (0..2).map(|k| p.magnitudes[k] * p.half_widths_s[k]).sum();
    if p.total_veh == 0.0 || weight == 0.0 {
        if p.total_veh > 0.0 {
            return Err(Error::arg("positive total requires a positive peak magnitude"));
        }
        return Ok(DemandProfile::default());
    }
    let active: Vec<usize> = [a, b].into_iter().filter(|&k| p.magnitudes[k] > 0.0).collect();
    if active.len() == 2 && end(a) > start(b) {
        return Err(Error::arg("demand peaks overlap"));
    }
    let scale = p.total_veh / weight;
    let mut points = Vec::new();
    for k in active {
        let h = scale * p.magnitudes[k];
        points.push((start(k), 0.0));
        points.push((p.peak_times_s[k], h));
        points.push((end(k), 0.0));
    }
    points.dedup();
    Ok(DemandProfile { pairs: vec![OdDemand { origin: p.origin, destination: p.destination, points }] })
}
