use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regional production function `P(n)` in veh·m/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProductionMfd {
    /// `a n (1 - n / n_max)^2`, with `a` a free-flow-like speed.
    Cubic { speed_m_per_s: f64 },
    /// Polynomial in accumulation, coefficients in ascending order.
    Polynomial { coefficients: Vec<f64> },
}

impl ProductionMfd {
    /// Production at accumulation `n`; zero outside `[0, n_max]` and never
    /// negative.
    pub fn eval(&self, n: f64, n_max: f64) -> f64 {
        if n <= 0.0 || n >= n_max {
            return 0.0;
        }
        self.raw(n, n_max).max(0.0)
    }

    fn raw(&self, n: f64, n_max: f64) -> f64 {
        match self {
            ProductionMfd::Cubic { speed_m_per_s } => {
                let r = 1.0 - n / n_max;
                speed_m_per_s * n * r * r
            }
            ProductionMfd::Polynomial { coefficients } => {
                coefficients.iter().rev().fold(0.0, |acc, c| acc * n + c)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub n_max_veh: f64,
    pub lane_km: f64,
    pub trip_length_m: f64,
    pub mfd: ProductionMfd,
    /// Share `theta_ii` of the region's own-destination vehicles completing
    /// their trip.
    #[serde(default = "one")]
    pub completion_share: f64,
    /// Number of virtual sensors averaged into the regional reading.
    #[serde(default = "one_usize")]
    pub sensors: usize,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

/// Directed boundary `from -> to` with receiving capacity
/// `capacity * (1 - n_to / n_max_to)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub from: usize,
    pub to: usize,
    pub capacity_veh_per_s: f64,
}

/// Share of vehicles in `origin` bound for `destination` that move on to
/// `next_hop`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub origin: usize,
    pub destination: usize,
    pub next_hop: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetworkSpec {
    regions: Vec<Region>,
    links: Vec<Link>,
    #[serde(default)]
    routes: Vec<Route>,
}

/// Validated multi-region network. Routes not listed explicitly follow a
/// fewest-hops path with ties broken by lowest region index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkSpec", into = "NetworkSpec")]
pub struct RegionNetwork {
    regions: Vec<Region>,
    links: Vec<Link>,
    routes: Vec<Route>,
    capacity: DMatrix<f64>,
    /// `theta[(i * N + j)]` lists `(h, share)`.
    theta: Vec<Vec<(usize, f64)>>,
}

impl TryFrom<NetworkSpec> for RegionNetwork {
    type Error = Error;

    fn try_from(spec: NetworkSpec) -> Result<Self> {
        RegionNetwork::new(spec.regions, spec.links, spec.routes)
    }
}

impl From<RegionNetwork> for NetworkSpec {
    fn from(net: RegionNetwork) -> Self {
        NetworkSpec { regions: net.regions, links: net.links, routes: net.routes }
    }
}

impl RegionNetwork {
    pub fn new(regions: Vec<Region>, links: Vec<Link>, routes: Vec<Route>) -> Result<Self> {
        let n = regions.len();
        if n == 0 {
            return Err(Error::config("network has no regions"));
        }
        for (i, r) in regions.iter().enumerate() {
            let positive = [r.n_max_veh, r.lane_km, r.trip_length_m];
            if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::config(format!(
                    "region {i}: n_max_veh, lane_km and trip_length_m must be positive"
                )));
            }
            if !(0.0..=1.0).contains(&r.completion_share) {
                return Err(Error::config(format!("region {i}: completion_share outside [0, 1]")));
            }
            if r.sensors == 0 {
                return Err(Error::config(format!("region {i}: at least one sensor required")));
            }
            check_mfd(i, r)?;
        }
        let mut capacity = DMatrix::zeros(n, n);
        for l in &links {
            if l.from >= n || l.to >= n || l.from == l.to {
                return Err(Error::config(format!("link {} -> {} is not a valid region pair", l.from, l.to)));
            }
            if !(l.capacity_veh_per_s.is_finite() && l.capacity_veh_per_s > 0.0) {
                return Err(Error::config(format!("link {} -> {}: capacity must be positive", l.from, l.to)));
            }
            capacity[(l.from, l.to)] = l.capacity_veh_per_s;
        }

        let mut theta = vec![Vec::new(); n * n];
        for r in &routes {
            if r.origin >= n || r.destination >= n || r.next_hop >= n {
                return Err(Error::config("route references an unknown region"));
            }
            if r.origin == r.destination {
                return Err(Error::config("routes are defined only between distinct regions"));
            }
            if capacity[(r.origin, r.next_hop)] == 0.0 {
                return Err(Error::config(format!(
                    "route {} -> {} uses non-adjacent next hop {}",
                    r.origin, r.destination, r.next_hop
                )));
            }
            if !(r.share >= 0.0) {
                return Err(Error::config("route shares must be nonnegative"));
            }
            theta[r.origin * n + r.destination].push((r.next_hop, r.share));
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let entry = &mut theta[i * n + j];
                if entry.is_empty() {
                    if let Some(h) = first_hop(&capacity, i, j) {
                        entry.push((h, 1.0));
                    }
                    continue;
                }
                let total: f64 = entry.iter().map(|e| e.1).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::config(format!("route shares {i} -> {j} sum to {total}, expected 1")));
                }
            }
        }
        Ok(Self { regions, links, routes, capacity, theta })
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, i: usize) -> &Region {
        &self.regions[i]
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn is_adjacent(&self, i: usize, h: usize) -> bool {
        self.capacity[(i, h)] > 0.0
    }

    /// Regions directly reachable from `i`.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&h| self.is_adjacent(i, h)).collect()
    }

    /// `(h, theta^h_ij)` pairs for vehicles in `i` bound for `j != i`.
    pub fn routing(&self, i: usize, j: usize) -> &[(usize, f64)] {
        &self.theta[i * self.len() + j]
    }

    pub fn production(&self, i: usize, n: f64) -> f64 {
        let r = &self.regions[i];
        r.mfd.eval(n, r.n_max_veh)
    }

    /// Receiving capacity `C_ih(n_h)` in veh/s.
    pub fn receiving_capacity(&self, i: usize, h: usize, n_h: f64) -> f64 {
        let nmax = self.regions[h].n_max_veh;
        self.capacity[(i, h)] * (1.0 - n_h / nmax).max(0.0)
    }

    pub fn n_max(&self) -> Vec<f64> {
        self.regions.iter().map(|r| r.n_max_veh).collect()
    }

    /// Density at gridlock, `n_max / lane_km`.
    pub fn rho_max(&self) -> Vec<f64> {
        self.regions.iter().map(|r| r.n_max_veh / r.lane_km).collect()
    }
}

fn check_mfd(i: usize, r: &Region) -> Result<()> {
    let nmax = r.n_max_veh;
    match &r.mfd {
        ProductionMfd::Cubic { speed_m_per_s } => {
            if !(speed_m_per_s.is_finite() && *speed_m_per_s > 0.0) {
                return Err(Error::config(format!("region {i}: MFD speed must be positive")));
            }
        }
        ProductionMfd::Polynomial { coefficients } => {
            if coefficients.is_empty() || coefficients.iter().any(|c| !c.is_finite()) {
                return Err(Error::config(format!("region {i}: MFD coefficients must be finite")));
            }
            let scale = (1..=100)
                .map(|k| r.mfd.raw(nmax * k as f64 / 100.0, nmax).abs())
                .fold(0.0_f64, f64::max)
                .max(1e-12);
            if coefficients[0].abs() > 1e-9 * scale || r.mfd.raw(nmax, nmax).abs() > 1e-6 * scale {
                return Err(Error::config(format!("region {i}: MFD must vanish at 0 and n_max")));
            }
            if (1..100).any(|k| r.mfd.raw(nmax * k as f64 / 100.0, nmax) < -1e-9 * scale) {
                return Err(Error::config(format!("region {i}: MFD is negative inside [0, n_max]")));
            }
        }
    }
    Ok(())
}

fn first_hop(capacity: &DMatrix<f64>, from: usize, to: usize) -> Option<usize> {
    let n = capacity.nrows();
    let mut parent = vec![usize::MAX; n];
    parent[from] = from;
    let mut queue = VecDeque::from([from]);
    while let Some(v) = queue.pop_front() {
        if v == to {
            break;
        }
        for w in 0..n {
            if capacity[(v, w)] > 0.0 && parent[w] == usize::MAX {
                parent[w] = v;
                queue.push_back(w);
            }
        }
    }
    if parent[to] == usize::MAX {
        return None;
    }
    let mut v = to;
    while parent[v] != from {
        v = parent[v];
    }
    Some(v)
}

/// Modulated flow `from -> to` and the weight of the actuator on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatedFlow {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actuator {
    pub name: String,
    pub flows: Vec<ActuatedFlow>,
    pub default_lambda: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

/// Maps actuator split fractions onto boundary gates
/// `u_ih = sum_l w_l,ih lambda_l + (1 - W_ih)`, where `W_ih` is the total
/// actuator weight on the flow. Flows without actuators keep `u = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActuatorMap {
    actuators: Vec<Actuator>,
}

impl ActuatorMap {
    pub fn new(actuators: Vec<Actuator>, network: &RegionNetwork) -> Result<Self> {
        let map = Self { actuators };
        map.validate(network)?;
        Ok(map)
    }

    pub fn validate(&self, network: &RegionNetwork) -> Result<()> {
        let n = network.len();
        let mut load = DMatrix::<f64>::zeros(n, n);
        for a in &self.actuators {
            if a.flows.is_empty() {
                return Err(Error::config(format!("actuator {} modulates no flow", a.name)));
            }
            let mut total = 0.0;
            for f in &a.flows {
                if f.from >= n || f.to >= n || !network.is_adjacent(f.from, f.to) {
                    return Err(Error::config(format!(
                        "actuator {} references missing flow {} -> {}",
                        a.name, f.from, f.to
                    )));
                }
                if !(f.weight >= 0.0) {
                    return Err(Error::config(format!("actuator {}: negative weight", a.name)));
                }
                total += f.weight;
                load[(f.from, f.to)] += f.weight;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("actuator {}: weights sum to {total}, expected 1", a.name)));
            }
            if !(0.0 <= a.lambda_min && a.lambda_min <= a.default_lambda
                && a.default_lambda <= a.lambda_max
                && a.lambda_max < 1.0)
            {
                return Err(Error::config(format!(
                    "actuator {}: need 0 <= lambda_min <= default_lambda <= lambda_max < 1",
                    a.name
                )));
            }
        }
        if load.iter().any(|&w| w > 1.0 + 1e-9) {
            return Err(Error::config("a flow carries total actuator weight above 1"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.actuators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actuators.is_empty()
    }

    pub fn actuators(&self) -> &[Actuator] {
        &self.actuators
    }

    pub fn defaults(&self) -> Vec<f64> {
        self.actuators.iter().map(|a| a.default_lambda).collect()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.actuators.iter().map(|a| a.lambda_min).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.actuators.iter().map(|a| a.lambda_max).collect()
    }

    /// Gate matrix `u` with `u[(i, h)]` the permeability of flow `i -> h`.
    pub fn gates(&self, lambda: &[f64], regions: usize) -> DMatrix<f64> {
        assert_eq!(lambda.len(), self.len(), "one split fraction per actuator");
        let mut u = DMatrix::from_element(regions, regions, 1.0);
        for (a, &l) in self.actuators.iter().zip(lambda) {
            let l = l.clamp(0.0, 1.0);
            for f in &a.flows {
                u[(f.from, f.to)] -= f.weight * (1.0 - l);
            }
        }
        u.apply(|v| *v = v.clamp(0.0, 1.0));
        u
    }
}
