//! Power draw, CO2 emission and hardware cost of one shared edge server
//! against one embedded board per robot.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{parse_decimal, Scalar};
use crate::types::ModelKind;

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("robot count must be at least 1")]
    NoRobots,
    #[error("anchors must be strictly increasing in n and non-decreasing in watts")]
    Anchors,
    #[error("cost model values must be positive")]
    Costs,
    #[error("unknown energy model: {0}")]
    UnknownModel(String),
    #[error("bad json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyModel {
    Detectron2,
    D2go,
}

impl EnergyModel {
    pub const ALL: [EnergyModel; 2] = [EnergyModel::Detectron2, EnergyModel::D2go];

    pub fn as_str(self) -> &'static str {
        match self {
            EnergyModel::Detectron2 => "detectron2",
            EnergyModel::D2go => "d2go",
        }
    }
}

impl From<ModelKind> for EnergyModel {
    fn from(m: ModelKind) -> Self {
        match m {
            ModelKind::Detectron2 => EnergyModel::Detectron2,
            ModelKind::D2go8 | ModelKind::D2go32 => EnergyModel::D2go,
        }
    }
}

impl fmt::Display for EnergyModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnergyModel {
    type Err = EnergyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "detectron2" => Ok(EnergyModel::Detectron2),
            "d2go" | "d2go8" | "d2go32" => Ok(EnergyModel::D2go),
            _ => Err(EnergyError::UnknownModel(s.into())),
        }
    }
}

/// Piecewise-linear power curve over robot count.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerModel<T> {
    anchors: Vec<(u32, T)>,
}

impl<T: Scalar> PowerModel<T> {
    pub fn new(anchors: Vec<(u32, T)>) -> Result<Self, EnergyError> {
        if anchors.is_empty() || anchors[0].0 < 1 {
            return Err(EnergyError::Anchors);
        }
        let ok = anchors.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1);
        if !ok || anchors.iter().any(|a| a.1 < T::zero()) {
            return Err(EnergyError::Anchors);
        }
        Ok(Self { anchors })
    }

    /// Power that grows linearly with the robot count.
    pub fn per_robot(watts: T) -> Self {
        Self { anchors: vec![(1, watts), (2, watts + watts)] }
    }

    pub fn anchors(&self) -> &[(u32, T)] {
        &self.anchors
    }

    /// Exact at anchors, linear between them and past the last pair. Below
    /// the first anchor the first segment is extended.
    pub fn power_at(&self, n: u32) -> Result<T, EnergyError> {
        if n < 1 {
            return Err(EnergyError::NoRobots);
        }
        let a = &self.anchors;
        if let Some(&(_, w)) = a.iter().find(|(k, _)| *k == n) {
            return Ok(w);
        }
        if a.len() == 1 {
            return Ok(a[0].1);
        }
        let i = match a.iter().position(|(k, _)| *k > n) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => a.len() - 2,
        };
        let (n0, w0) = a[i];
        let (n1, w1) = a[i + 1];
        let t = (T::from_count(n as u64) - T::from_count(n0 as u64)) / T::from_count((n1 - n0) as u64);
        Ok(w0 + (w1 - w0) * t)
    }
}

fn dec<T: Scalar>(s: &str) -> T {
    parse_decimal(s).expect("literal")
}

pub fn default_edge(model: EnergyModel) -> PowerModel<f64> {
    default_edge_in(model)
}

pub fn default_edge_in<T: Scalar>(model: EnergyModel) -> PowerModel<T> {
    let d2: [(u32, T); 4] = [(1, dec("33.6")), (2, dec("48.3")), (3, dec("59.7")), (12, dec("240"))];
    let anchors = match model {
        EnergyModel::Detectron2 => d2.to_vec(),
        EnergyModel::D2go => {
            let s = T::ratio(200, 240);
            let mut v: Vec<(u32, T)> = d2[..3].iter().map(|&(n, w)| (n, w * s)).collect();
            v.push((12, dec("200")));
            v
        }
    };
    PowerModel::new(anchors).expect("default anchors are valid")
}

/// Embedded board watts per robot.
pub fn default_njxn_per_robot<T: Scalar>(model: EnergyModel) -> T {
    match model {
        EnergyModel::Detectron2 => T::ratio(110, 12),
        EnergyModel::D2go => T::ratio(95, 12),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub server_base: f64,
    pub gpu_unit: f64,
    pub robots_per_gpu: u32,
    pub njxn_unit: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { server_base: 2000.0, gpu_unit: 250.0, robots_per_gpu: 3, njxn_unit: 300.0 }
    }
}

pub const BREAK_EVEN_SCAN: u32 = 1000;

impl CostModel {
    pub fn validate(&self) -> Result<(), EnergyError> {
        let pos = [self.server_base, self.gpu_unit, self.njxn_unit].iter().all(|v| v.is_finite() && *v > 0.0);
        if !pos || self.robots_per_gpu == 0 {
            return Err(EnergyError::Costs);
        }
        Ok(())
    }

    pub fn server_cost(&self, n: u32) -> f64 {
        self.server_base + n.div_ceil(self.robots_per_gpu) as f64 * self.gpu_unit
    }

    pub fn embedded_cost(&self, n: u32) -> f64 {
        n as f64 * self.njxn_unit
    }

    /// Smallest fleet for which the server costs no more than the boards.
    pub fn break_even(&self) -> Option<u32> {
        (1..=BREAK_EVEN_SCAN).find(|&n| self.server_cost(n) <= self.embedded_cost(n))
    }
}

/// One reading of (watts, mg CO2) used to fit the emission factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionReading {
    pub watts: f64,
    pub mg: f64,
}

pub const EMISSION_READINGS: [EmissionReading; 3] = [
    EmissionReading { watts: 33.6, mg: 98.0 },
    EmissionReading { watts: 48.3, mg: 128.0 },
    EmissionReading { watts: 59.7, mg: 155.0 },
];

pub fn default_emission_factor<T: Scalar>() -> T {
    T::ratio(980, 336)
}

pub fn emission<T: Scalar>(watts: T, factor: T) -> T {
    watts * factor
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmissionResidual {
    pub watts: f64,
    pub reported_mg: f64,
    pub model_mg: f64,
    pub residual_mg: f64,
}

pub fn emission_residuals(factor: f64, readings: &[EmissionReading]) -> Vec<EmissionResidual> {
    readings
        .iter()
        .map(|r| {
            let m = r.watts * factor;
            EmissionResidual { watts: r.watts, reported_mg: r.mg, model_mg: m, residual_mg: m - r.mg }
        })
        .collect()
}

/// Edge and embedded curves for one segmentation model, plus emission and cost.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySetup<T> {
    pub model: EnergyModel,
    pub edge: PowerModel<T>,
    pub njxn_per_robot: T,
    pub emission_factor: T,
    pub costs: CostModel,
}

impl<T: Scalar> EnergySetup<T> {
    pub fn default_for(model: EnergyModel) -> Self {
        Self {
            model,
            edge: default_edge_in(model),
            njxn_per_robot: default_njxn_per_robot(model),
            emission_factor: default_emission_factor(),
            costs: CostModel::default(),
        }
    }

    pub fn njxn_power(&self, n: u32) -> Result<T, EnergyError> {
        if n < 1 {
            return Err(EnergyError::NoRobots);
        }
        Ok(T::from_count(n as u64) * self.njxn_per_robot)
    }

    pub fn consumption_ratio(&self, n: u32) -> Result<T, EnergyError> {
        Ok(self.edge.power_at(n)? / self.njxn_power(n)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnchorJson {
    model: EnergyModel,
    edge: Vec<(u32, f64)>,
    njxn_per_robot: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EnergyJson {
    anchors: Vec<AnchorJson>,
    emission_factor: f64,
    #[serde(default)]
    costs: CostModel,
}

/// Parses `{"anchors": [{"model", "edge": [[n, W], ..], "njxn_per_robot"}], "emission_factor", "costs"}`.
pub fn load_setups(json: &str) -> Result<Vec<EnergySetup<f64>>, EnergyError> {
    let raw: EnergyJson = serde_json::from_str(json).map_err(|e| EnergyError::Json(e.to_string()))?;
    raw.costs.validate()?;
    if !(raw.emission_factor >= 0.0 && raw.emission_factor.is_finite()) {
        return Err(EnergyError::Json("emission_factor".into()));
    }
    raw.anchors
        .into_iter()
        .map(|a| {
            if !(a.njxn_per_robot > 0.0) {
                return Err(EnergyError::Anchors);
            }
            Ok(EnergySetup {
                model: a.model,
                edge: PowerModel::new(a.edge)?,
                njxn_per_robot: a.njxn_per_robot,
                emission_factor: raw.emission_factor,
                costs: raw.costs,
            })
        })
        .collect()
}

pub fn default_setups_json() -> String {
    let anchors = EnergyModel::ALL
        .iter()
        .map(|&m| {
            let s = EnergySetup::<f64>::default_for(m);
            AnchorJson { model: m, edge: s.edge.anchors().to_vec(), njxn_per_robot: s.njxn_per_robot }
        })
        .collect();
    let j = EnergyJson { anchors, emission_factor: default_emission_factor(), costs: CostModel::default() };
    serde_json::to_string_pretty(&j).expect("serializable")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyRow {
    pub robots: u32,
    pub model: EnergyModel,
    pub edge_watts: f64,
    pub njxn_watts: f64,
    pub ratio: f64,
    pub edge_mg: f64,
    pub njxn_mg: f64,
    pub server_cost: f64,
    pub embedded_cost: f64,
    /// False when `robots` is not an anchor of the edge curve.
    pub anchored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyTable {
    pub rows: Vec<EnergyRow>,
    pub break_even: Option<u32>,
    pub emission_factor: f64,
    pub emission_residuals: Vec<EmissionResidual>,
}

pub fn energy_table(setups: &[EnergySetup<f64>], max_robots: u32) -> Result<EnergyTable, EnergyError> {
    if max_robots < 1 {
        return Err(EnergyError::NoRobots);
    }
    let mut rows = Vec::new();
    for s in setups {
        for n in 1..=max_robots {
            let e = s.edge.power_at(n)?;
            let j = s.njxn_power(n)?;
            rows.push(EnergyRow {
                robots: n,
                model: s.model,
                edge_watts: e,
                njxn_watts: j,
                ratio: e / j,
                edge_mg: emission(e, s.emission_factor),
                njxn_mg: emission(j, s.emission_factor),
                server_cost: s.costs.server_cost(n),
                embedded_cost: s.costs.embedded_cost(n),
                anchored: s.edge.anchors().iter().any(|a| a.0 == n),
            });
        }
    }
    let costs = setups.first().map(|s| s.costs).unwrap_or_default();
    let factor = setups.first().map(|s| s.emission_factor).unwrap_or_else(default_emission_factor);
    Ok(EnergyTable {
        rows,
        break_even: costs.break_even(),
        emission_factor: factor,
        emission_residuals: emission_residuals(factor, &EMISSION_READINGS),
    })
}
