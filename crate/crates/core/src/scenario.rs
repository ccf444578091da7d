//! Scenario files: network, actuators, demand, timing and controller
//! parameters in one TOML document.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::deepc::DeePCConfig;
use crate::error::{Error, Result};
use crate::plant::{
    make_two_peak_demand, Actuator, ActuatorMap, DemandProfile, OdDemand, RegionNetwork, SensorConfig, TwoPeakDemand,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timing {
    pub duty_cycle_s: f64,
    pub plant_step_s: f64,
    /// Closed-loop run length in duty cycles.
    pub horizon_cycles: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Self { duty_cycle_s: 90.0, plant_step_s: 5.0, horizon_cycles: 120 }
    }
}

impl Timing {
    pub fn steps_per_cycle(&self) -> usize {
        (self.duty_cycle_s / self.plant_step_s).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DemandSpec {
    TwoPeak(TwoPeakDemand),
    Profile { pairs: Vec<OdDemand> },
}

impl DemandSpec {
    pub fn profile(&self) -> Result<DemandProfile> {
        match self {
            DemandSpec::TwoPeak(p) => make_two_peak_demand(p),
            DemandSpec::Profile { pairs } => Ok(DemandProfile { pairs: pairs.clone() }),
        }
    }
}

/// Offline excitation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectionParams {
    pub cycles: usize,
    /// Half-width of the per-cycle multiplicative demand perturbation.
    pub demand_jitter: f64,
    /// Split-fraction range of the excitation; defaults to the actuator bounds.
    pub lambda_min: Option<Vec<f64>>,
    pub lambda_max: Option<Vec<f64>>,
    /// Assumed order used in the rank bound of the excitation check.
    pub order_estimate: Option<usize>,
}

impl Default for CollectionParams {
    fn default() -> Self {
        Self { cycles: 200, demand_jitter: 0.1, lambda_min: None, lambda_max: None, order_estimate: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ReferenceSpec {
    /// Critical densities of quartic fits to the collected scatter.
    Fitted,
    Fixed { rho_veh_per_km: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeePCParams {
    pub t_ini: usize,
    pub t_f: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_y: f64,
    pub q_weight: f64,
    pub r_weight: f64,
    /// Duty cycles between re-solves; the first planned split is held.
    pub period_cycles: usize,
    pub reference: ReferenceSpec,
    /// Output upper bound; defaults to `n_max / lane_km` per region.
    pub rho_max_veh_per_km: Option<Vec<f64>>,
}

impl Default for DeePCParams {
    fn default() -> Self {
        Self::lattice()
    }
}

impl DeePCParams {
    pub fn lattice() -> Self {
        Self {
            t_ini: 5,
            t_f: 4,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda_y: 0.0,
            q_weight: 1.0,
            r_weight: 2.0,
            period_cycles: 1,
            reference: ReferenceSpec::Fitted,
            rho_max_veh_per_km: None,
        }
    }

    pub fn zurich() -> Self {
        Self { lambda1: 15.0, lambda2: 20.0, ..Self::lattice() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcParams {
    pub horizon_cycles: usize,
    pub pwa_pieces: usize,
    pub rate_limit_veh_per_s: Option<f64>,
    pub period_cycles: usize,
}

impl Default for MpcParams {
    fn default() -> Self {
        Self { horizon_cycles: 4, pwa_pieces: 10, rate_limit_veh_per_s: None, period_cycles: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub timing: Timing,
    #[serde(default)]
    pub sensors: SensorConfig,
    pub network: RegionNetwork,
    pub actuators: Vec<Actuator>,
    pub demand: DemandSpec,
    #[serde(default)]
    pub collection: CollectionParams,
    #[serde(default)]
    pub deepc: DeePCParams,
    #[serde(default)]
    pub mpc: MpcParams,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn actuator_map(&self) -> Result<ActuatorMap> {
        ActuatorMap::new(self.actuators.clone(), &self.network)
    }

    pub fn demand_profile(&self) -> Result<DemandProfile> {
        let p = self.demand.profile().map_err(|e| Error::config(e.to_string()))?;
        p.validate(self.network.len())?;
        Ok(p)
    }

    /// Number of DeePC inputs: split fractions then all OD demands.
    pub fn inputs(&self) -> usize {
        self.actuators.len() + self.network.len() * self.network.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.timing;
        if !(t.duty_cycle_s > 0.0 && t.plant_step_s > 0.0) || t.horizon_cycles == 0 {
            return Err(Error::config("timing values must be positive"));
        }
        let ratio = t.duty_cycle_s / t.plant_step_s;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::config("duty_cycle_s must be a multiple of plant_step_s"));
        }
        self.actuator_map()?;
        self.demand_profile()?;
        let l = self.actuators.len();
        let c = &self.collection;
        for b in [&c.lambda_min, &c.lambda_max].into_iter().flatten() {
            if b.len() != l || b.iter().any(|v| !(0.0..1.0).contains(v)) {
                return Err(Error::config("collection split-fraction range needs one value in [0, 1) per actuator"));
            }
        }
        if !(c.demand_jitter >= 0.0 && c.demand_jitter < 1.0) {
            return Err(Error::config("demand_jitter must lie in [0, 1)"));
        }
        let d = &self.deepc;
        if d.t_ini == 0 || d.t_f == 0 || d.period_cycles == 0 || self.mpc.period_cycles == 0 {
            return Err(Error::config("horizons and periods must be positive"));
        }
        if let ReferenceSpec::Fixed { rho_veh_per_km } = &d.reference {
            if rho_veh_per_km.len() != self.network.len() {
                return Err(Error::config("fixed reference needs one density per region"));
            }
        }
        if let Some(r) = &d.rho_max_veh_per_km {
            if r.len() != self.network.len() {
                return Err(Error::config("rho_max_veh_per_km needs one value per region"));
            }
        }
        if self.mpc.horizon_cycles == 0 || self.mpc.pwa_pieces == 0 {
            return Err(Error::config("MPC horizon and PWA pieces must be positive"));
        }
        Ok(())
    }

    /// DeePC configuration with one controller step per duty cycle.
    pub fn deepc_config(&self, rho_max: Vec<f64>) -> DeePCConfig {
        let d = &self.deepc;
        let (m, p) = (self.inputs(), self.network.len());
        DeePCConfig {
            t_ini: d.t_ini,
            t_f: d.t_f,
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            lambda_y: d.lambda_y,
            q: DMatrix::identity(p, p) * d.q_weight,
            r: DMatrix::identity(m, m) * d.r_weight,
            lambda_lb: self.actuators.iter().map(|a| a.lambda_min).collect(),
            lambda_ub: self.actuators.iter().map(|a| a.lambda_max).collect(),
            duty_cycle_steps: 1,
            apply_steps: 1,
            rho_max,
        }
    }

    /// The two-region stress scenario: a large feeder region upstream of a
    /// small destination region that gridlocks under the default split.
    pub fn stress() -> Self {
        let text = include_str!("../scenarios/stress.toml");
        Self::from_toml(text).expect("bundled scenario parses")
    }
}
