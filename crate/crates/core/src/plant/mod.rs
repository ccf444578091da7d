//! Macroscopic multi-region traffic plant.
//!
//! Accumulations `n_ij` (vehicles in region `i` heading to region `j`) evolve
//! under internal trip completion and boundary transfer flows. Transfers are
//! gated by actuator split fractions and limited by the receiving capacity of
//! the downstream region. Demand that cannot enter a full region waits in an
//! origin queue outside the network.

mod demand;
mod network;

pub use demand::{make_two_peak_demand, DemandProfile, OdDemand, TwoPeakDemand};
pub use network::{
    ActuatedFlow, Actuator, ActuatorMap, Link, ProductionMfd, Region, RegionNetwork, Route,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    /// `n[(i, j)]`: vehicles in region `i` with destination `j`.
    pub n: DMatrix<f64>,
    /// Vehicles waiting to enter their origin region, by OD pair.
    pub queue: DMatrix<f64>,
    /// Number of plant steps taken.
    pub step: u64,
    pub time_s: f64,
    pub time_spent_veh_s: f64,
    pub trips_completed_veh: f64,
    pub entered_veh: f64,
    /// Steps in which an outflow or inflow had to be scaled down.
    pub saturation_events: u64,
}

impl PlantState {
    pub fn empty(regions: usize) -> Self {
        Self {
            n: DMatrix::zeros(regions, regions),
            queue: DMatrix::zeros(regions, regions),
            step: 0,
            time_s: 0.0,
            time_spent_veh_s: 0.0,
            trips_completed_veh: 0.0,
            entered_veh: 0.0,
            saturation_events: 0,
        }
    }

    /// Total accumulation `n_i` per region.
    pub fn accumulation(&self) -> DVector<f64> {
        DVector::from_fn(self.n.nrows(), |i, _| self.n.row(i).sum())
    }

    pub fn vehicles_in_network(&self) -> f64 {
        self.n.sum()
    }

    pub fn queued(&self) -> f64 {
        self.queue.sum()
    }
}

/// Internal completion rates `M_ii` and transfer flows `M^h_ij`, in veh/s.
#[derive(Debug, Clone, PartialEq)]
pub struct Flows {
    regions: usize,
    pub internal: DVector<f64>,
    transfer: Vec<f64>,
}

impl Flows {
    fn zeros(regions: usize) -> Self {
        Self { regions, internal: DVector::zeros(regions), transfer: vec![0.0; regions.pow(3)] }
    }

    fn idx(&self, i: usize, h: usize, j: usize) -> usize {
        (i * self.regions + h) * self.regions + j
    }

    /// `M^h_ij`: flow from `i` into `h` of vehicles bound for `j`.
    pub fn transfer(&self, i: usize, h: usize, j: usize) -> f64 {
        self.transfer[self.idx(i, h, j)]
    }

    fn transfer_mut(&mut self, i: usize, h: usize, j: usize) -> &mut f64 {
        let k = self.idx(i, h, j);
        &mut self.transfer[k]
    }

    /// Total boundary flow `i -> h`.
    pub fn boundary(&self, i: usize, h: usize) -> f64 {
        (0..self.regions).map(|j| self.transfer(i, h, j)).sum()
    }
}

/// Evaluates completion and transfer flows for gate values `u[(i, h)]`.
pub fn transfer_flows(state: &PlantState, network: &RegionNetwork, u: &DMatrix<f64>) -> Flows {
    let n_reg = network.len();
    let acc = state.accumulation();
    let mut flows = Flows::zeros(n_reg);
    for i in 0..n_reg {
        if acc[i] <= 0.0 {
            continue;
        }
        let rate = network.production(i, acc[i]) / network.region(i).trip_length_m;
        flows.internal[i] = network.region(i).completion_share * state.n[(i, i)] / acc[i] * rate;
        for j in 0..n_reg {
            if j == i || state.n[(i, j)] <= 0.0 {
                continue;
            }
            for &(h, theta) in network.routing(i, j) {
                let sending = u[(i, h)].clamp(0.0, 1.0) * theta * state.n[(i, j)] / acc[i] * rate;
                let receiving = network.receiving_capacity(i, h, acc[h]);
                *flows.transfer_mut(i, h, j) = sending.min(receiving).max(0.0);
            }
        }
    }
    flows
}

/// Advances the plant by one step of length `t_p` seconds under OD demand
/// rates `demand` (veh/s) and actuator split fractions `lambda`.
pub fn step(
    state: &PlantState,
    network: &RegionNetwork,
    actuators: &ActuatorMap,
    demand: &DMatrix<f64>,
    lambda: &[f64],
    t_p: f64,
) -> PlantState {
    let n_reg = network.len();
    let u = actuators.gates(lambda, n_reg);
    let mut flows = transfer_flows(state, network, &u);
    let mut next = state.clone();
    let mut saturated = false;

    for i in 0..n_reg {
        for j in 0..n_reg {
            let mut out: f64 = (0..n_reg).map(|h| flows.transfer(i, h, j)).sum();
            if i == j {
                out += flows.internal[i];
            }
            let out = out * t_p;
            let avail = state.n[(i, j)];
            if out > avail && out > 0.0 {
                let f = avail / out;
                saturated = true;
                if i == j {
                    flows.internal[i] *= f;
                }
                for h in 0..n_reg {
                    *flows.transfer_mut(i, h, j) *= f;
                }
            }
        }
    }

    next.queue += demand * t_p;
    let acc = state.accumulation();
    for h in 0..n_reg {
        // transfers out of h may still be scaled down, so only completions free space
        let space = (network.region(h).n_max_veh - acc[h] + t_p * flows.internal[h]).max(0.0);
        let arriving: f64 = t_p * (0..n_reg).map(|i| flows.boundary(i, h)).sum::<f64>();
        let waiting: f64 = next.queue.row(h).sum();
        let requested = arriving + waiting;
        let f = if requested > space && requested > 0.0 {
            saturated = true;
            space / requested
        } else {
            1.0
        };
        if f < 1.0 {
            for i in 0..n_reg {
                for j in 0..n_reg {
                    *flows.transfer_mut(i, h, j) *= f;
                }
            }
        }
        for j in 0..n_reg {
            let enter = next.queue[(h, j)] * f;
            next.queue[(h, j)] -= enter;
            next.n[(h, j)] += enter;
            next.entered_veh += enter;
        }
    }

    for i in 0..n_reg {
        next.n[(i, i)] -= t_p * flows.internal[i];
        for h in 0..n_reg {
            for j in 0..n_reg {
                let m = t_p * flows.transfer(i, h, j);
                if m > 0.0 {
                    next.n[(i, j)] -= m;
                    next.n[(h, j)] += m;
                }
            }
        }
    }
    next.n.apply(|v| *v = v.max(0.0));
    next.queue.apply(|v| *v = v.max(0.0));

    next.step += 1;
    next.time_s += t_p;
    next.time_spent_veh_s += t_p * (next.n.sum() + next.queue.sum());
    next.trips_completed_veh += t_p * flows.internal.sum();
    if saturated {
        next.saturation_events += 1;
        log::trace!("plant step {}: flows scaled to respect stock or space limits", next.step);
    }
    next
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SensorConfig {
    /// Half-width of the uniform multiplicative noise on each virtual sensor.
    #[serde(default)]
    pub noise: f64,
}

/// Regional density `rho_i = n_i / lane_km` (veh/km) and flow
/// `phi_i = P_i(n_i) / L_i` (veh/h), each averaged over the region's virtual
/// sensors.
pub fn read_sensors<R: Rng>(
    state: &PlantState,
    network: &RegionNetwork,
    config: &SensorConfig,
    rng: &mut R,
) -> (DVector<f64>, DVector<f64>) {
    let acc = state.accumulation();
    let n_reg = network.len();
    let mut rho = DVector::zeros(n_reg);
    let mut phi = DVector::zeros(n_reg);
    for i in 0..n_reg {
        let r = network.region(i);
        let true_rho = acc[i] / r.lane_km;
        let true_phi = network.production(i, acc[i]) / r.trip_length_m * 3600.0;
        if config.noise == 0.0 {
            rho[i] = (0..r.sensors).map(|_| true_rho).sum::<f64>() / r.sensors as f64;
            phi[i] = (0..r.sensors).map(|_| true_phi).sum::<f64>() / r.sensors as f64;
            continue;
        }
        let mut sr = 0.0;
        let mut sp = 0.0;
        for _ in 0..r.sensors {
            sr += true_rho * (1.0 + config.noise * rng.gen_range(-1.0..=1.0));
            sp += true_phi * (1.0 + config.noise * rng.gen_range(-1.0..=1.0));
        }
        rho[i] = (sr / r.sensors as f64).max(0.0);
        phi[i] = (sp / r.sensors as f64).max(0.0);
    }
    (rho, phi)
}
