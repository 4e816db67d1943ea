//! FaaS versus IaaS cost estimates from invocation records.
//!
//! FaaS clients pay per invocation and per billed GB-second and GHz-second;
//! IaaS clients pay for every instance over the whole session, idle or not.
//! Both pay the same rate for egress. Gigabytes are binary (2^30 bytes).

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::MetricsRow;
use crate::fabric::{billed_duration, InvocationRecord};

pub const BYTES_PER_GB: f64 = 1024.0 * 1024.0 * 1024.0;
pub const DEFAULT_MULTIPLIERS: [f64; 4] = [0.5, 1.0, 2.0, 3.0];

#[derive(Debug, Error)]
pub enum CostError {
    #[error("invalid prices: {0}")]
    Prices(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = CostError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaasPrices {
    pub price_per_invocation: f64,
    pub price_per_gb_second: f64,
    pub price_per_ghz_second: f64,
    pub price_per_egress_gb: f64,
}

fn one_second() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IaasPrices {
    pub price_per_instance_hour: f64,
    pub instances: u32,
    pub price_per_egress_gb: f64,
    /// Instance runtime is rounded up to this many seconds.
    #[serde(default = "one_second")]
    pub billing_granularity_s: f64,
}

impl Default for IaasPrices {
    fn default() -> Self {
        Self {
            price_per_instance_hour: 0.0,
            instances: 0,
            price_per_egress_gb: 0.0,
            billing_granularity_s: one_second(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub faas: FaasPrices,
    pub iaas: IaasPrices,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let f = &self.faas;
        let i = &self.iaas;
        for (name, v) in [
            ("faas.price_per_invocation", f.price_per_invocation),
            ("faas.price_per_gb_second", f.price_per_gb_second),
            ("faas.price_per_ghz_second", f.price_per_ghz_second),
            ("faas.price_per_egress_gb", f.price_per_egress_gb),
            ("iaas.price_per_instance_hour", i.price_per_instance_hour),
            ("iaas.price_per_egress_gb", i.price_per_egress_gb),
            ("iaas.billing_granularity_s", i.billing_granularity_s),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CostError::Prices(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| CostError::Prices(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FaasCost {
    pub invocations: f64,
    pub memory: f64,
    pub cpu: f64,
    pub network: f64,
}

impl FaasCost {
    pub fn total(&self) -> f64 {
        self.invocations + self.memory + self.cpu + self.network
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IaasCost {
    pub instances: f64,
    pub network: f64,
}

impl IaasCost {
    pub fn total(&self) -> f64 {
        self.instances + self.network
    }
}

pub fn egress_gb(records: &[InvocationRecord]) -> f64 {
    records.iter().map(|r| r.egress_bytes as f64).sum::<f64>() / BYTES_PER_GB
}

/// Billed cost of `records`. Only billed durations count, so time a client
/// spends idle between invocations is free.
pub fn estimate_faas_cost(records: &[InvocationRecord], model: &CostModel) -> FaasCost {
    estimate_faas_cost_scaled(records, model, 1.0)
}

/// As [`estimate_faas_cost`] with every billed duration multiplied by
/// `multiplier`. The invocation and network terms do not change.
pub fn estimate_faas_cost_scaled(records: &[InvocationRecord], model: &CostModel, multiplier: f64) -> FaasCost {
    let p = &model.faas;
    let (gbs, ghzs) = records
        .iter()
        .fold((0.0, 0.0), |(g, c), r| (g + r.gb_seconds(), c + r.ghz_seconds()));
    FaasCost {
        invocations: records.len() as f64 * p.price_per_invocation,
        memory: multiplier * gbs * p.price_per_gb_second,
        cpu: multiplier * ghzs * p.price_per_ghz_second,
        network: egress_gb(records) * p.price_per_egress_gb,
    }
}

/// Every instance billed for the whole session wall time.
pub fn estimate_iaas_cost(session_wall_time_s: f64, model: &CostModel, egress_gb: f64) -> IaasCost {
    let p = &model.iaas;
    let billed = billed_duration(session_wall_time_s.max(0.0), p.billing_granularity_s);
    IaasCost {
        instances: p.instances as f64 * billed / 3600.0 * p.price_per_instance_hour,
        network: egress_gb * p.price_per_egress_gb,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub multiplier: f64,
    pub faas_cost: f64,
    pub iaas_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub faas_cost: f64,
    pub iaas_cost: f64,
    pub faas: FaasCost,
    pub iaas: IaasCost,
    /// Costs with client durations (FaaS billed time, IaaS wall time)
    /// scaled by each multiplier, sorted by multiplier.
    pub band: Vec<SensitivityPoint>,
}

/// Both estimates over the same egress volume, plus the sensitivity band.
pub fn compare(records: &[InvocationRecord], session_wall_time_s: f64, model: &CostModel, multipliers: &[f64]) -> CostEstimate {
    let egress = egress_gb(records);
    let faas = estimate_faas_cost(records, model);
    let iaas = estimate_iaas_cost(session_wall_time_s, model, egress);
    let mut ms = multipliers.to_vec();
    ms.sort_by(f64::total_cmp);
    let band = ms
        .into_iter()
        .map(|m| SensitivityPoint {
            multiplier: m,
            faas_cost: estimate_faas_cost_scaled(records, model, m).total(),
            iaas_cost: estimate_iaas_cost(session_wall_time_s * m, model, egress).total(),
        })
        .collect();
    CostEstimate {
        faas_cost: faas.total(),
        iaas_cost: iaas.total(),
        faas,
        iaas,
        band,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub round: u64,
    pub target_accuracy: f64,
    pub faas_cost: f64,
    pub iaas_cost: f64,
    pub multiplier: f64,
}

/// Records produced by client functions, i.e. tagged with a client id.
pub fn client_records(records: &[InvocationRecord]) -> Vec<InvocationRecord> {
    records.iter().filter(|r| r.client_id.is_some()).cloned().collect()
}

/// Cumulative cost after each round up to the first round whose accuracy
/// reaches each target. Targets never reached produce no rows. IaaS wall
/// time runs from 0 to the round's end timestamp.
pub fn cost_curve(
    records: &[InvocationRecord],
    metrics: &[MetricsRow],
    model: &CostModel,
    targets: &[f64],
    multipliers: &[f64],
) -> Vec<CostRow> {
    let mut by_round: BTreeMap<u64, Vec<InvocationRecord>> = BTreeMap::new();
    for r in records {
        if let Some(round) = r.round {
            by_round.entry(round).or_default().push(r.clone());
        }
    }
    let mut rows = Vec::new();
    for &target in targets {
        let Some(stop) = metrics
            .iter()
            .find(|m| m.accuracy.is_some_and(|a| a >= target))
            .map(|m| m.round)
        else {
            continue;
        };
        for m in metrics.iter().filter(|m| m.round <= stop) {
            let upto: Vec<InvocationRecord> = by_round.range(..=m.round).flat_map(|(_, v)| v.iter().cloned()).collect();
            let egress = egress_gb(&upto);
            for &mult in multipliers {
                rows.push(CostRow {
                    round: m.round,
                    target_accuracy: target,
                    faas_cost: estimate_faas_cost_scaled(&upto, model, mult).total(),
                    iaas_cost: estimate_iaas_cost(m.timestamp * mult, model, egress).total(),
                    multiplier: mult,
                });
            }
        }
    }
    rows
}

pub fn write_cost_csv<W: io::Write>(out: W, rows: &[CostRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
