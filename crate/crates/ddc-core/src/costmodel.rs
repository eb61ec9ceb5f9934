//! Parametric yearly cloud-cost estimator comparing operational models.
//!
//! Only storage and decompression compute are billed; inbound traffic is
//! free. Storage accrues monthly on the cumulative retained volume, using the
//! triangular approximation (mean retained data over a year of steady
//! ingestion is half the year-end volume). Prices are configuration, never
//! baked into the formulas.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GB: f64 = 1e9;

/// How the cloud side stores and consumes the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperationalModel {
    /// Raw samples stored; tasks read them directly, nothing to decompress.
    NoCompression,
    /// Losslessly compressed storage; every segment is decompressed for the
    /// tasks, plus the expert-review fetches.
    Lossless,
    /// Variable-rate compressed storage; tasks consume decompressed segments,
    /// plus the expert-review fetches.
    DynamicDeep,
    /// Variable-rate compressed storage, but tasks ran on the uncompressed
    /// copy at ingest (which is not stored); only review fetches decompress.
    DynamicDeepWithUncompressed,
}

impl OperationalModel {
    pub const ALL: [OperationalModel; 4] = [
        OperationalModel::NoCompression,
        OperationalModel::Lossless,
        OperationalModel::DynamicDeep,
        OperationalModel::DynamicDeepWithUncompressed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OperationalModel::NoCompression => "no_compression",
            OperationalModel::Lossless => "lossless",
            OperationalModel::DynamicDeep => "dynamic_deep",
            OperationalModel::DynamicDeepWithUncompressed => "dynamic_deep_with_uncompressed",
        }
    }

    pub fn parse(s: &str) -> Result<OperationalModel> {
        OperationalModel::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown operational model {s:?}")))
    }
}

/// Scenario parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub n_beds: u64,
    pub samples_per_second: f64,
    pub bytes_per_sample: u64,
    pub hours_per_year: f64,
    /// Currency per GB-month of storage.
    pub storage_price: f64,
    /// Currency per instance-hour of decompression compute.
    pub compute_price: f64,
    /// Segments decompressed per instance-hour.
    pub decompress_throughput: f64,
    /// Fraction of historical data a domain expert reviews.
    pub fetch_fraction: f64,
    /// Samples per segment (converts volume to decompression work).
    pub segment_samples: u64,
    /// Average compression gain per operational model.
    pub avg_cg: BTreeMap<OperationalModel, f64>,
}

impl Default for CostParams {
    fn default() -> Self {
        let mut avg_cg = BTreeMap::new();
        avg_cg.insert(OperationalModel::NoCompression, 1.0);
        avg_cg.insert(OperationalModel::Lossless, 2.7);
        avg_cg.insert(OperationalModel::DynamicDeep, 48.31);
        avg_cg.insert(OperationalModel::DynamicDeepWithUncompressed, 48.31);
        CostParams {
            n_beds: 200,
            samples_per_second: 300.0,
            bytes_per_sample: 2,
            hours_per_year: 8760.0,
            storage_price: 0.02,
            compute_price: 0.03,
            decompress_throughput: 2e6,
            fetch_fraction: 0.05,
            segment_samples: 1024,
            avg_cg,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fetch_fraction) {
            return Err(Error::InvalidArgument("fetch fraction must lie in [0, 1]".into()));
        }
        if self.samples_per_second < 0.0
            || self.hours_per_year < 0.0
            || self.storage_price < 0.0
            || self.compute_price < 0.0
            || self.decompress_throughput < 0.0
        {
            return Err(Error::InvalidArgument("cost parameters must be nonnegative".into()));
        }
        if self.segment_samples == 0 {
            return Err(Error::InvalidArgument("segment_samples must be positive".into()));
        }
        for (model, &cg) in &self.avg_cg {
            if cg <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "avg_cg for {} must be positive",
                    model.as_str()
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CostParams> {
        let text = std::fs::read_to_string(path)?;
        let params: CostParams = serde_json::from_str(&text)?;
        params.validate()?;
        Ok(params)
    }

    fn cg_for(&self, model: OperationalModel) -> Result<f64> {
        if model == OperationalModel::NoCompression {
            return Ok(1.0);
        }
        self.avg_cg
            .get(&model)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no avg_cg for {}", model.as_str())))
    }

    /// Raw ingested volume per year, bytes.
    fn raw_bytes_per_year(&self) -> f64 {
        self.n_beds as f64
            * self.samples_per_second
            * self.bytes_per_sample as f64
            * self.hours_per_year
            * 3600.0
    }

    /// Segments ingested per year.
    fn segments_per_year(&self) -> f64 {
        self.n_beds as f64 * self.samples_per_second * self.hours_per_year * 3600.0
            / self.segment_samples as f64
    }
}

/// Yearly cost split for one operational model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub model: OperationalModel,
    pub storage_cost: f64,
    pub compute_cost: f64,
    pub total: f64,
}

/// Yearly cost of one operational model under the given parameters.
pub fn yearly_cost(params: &CostParams, model: OperationalModel) -> Result<CostBreakdown> {
    params.validate()?;
    let cg = params.cg_for(model)?;
    let stored_gb = params.raw_bytes_per_year() / cg / GB;
    // Triangular accumulation: mean retained volume is half of year-end.
    let storage_cost = 0.5 * stored_gb * params.storage_price * 12.0;

    let x = params.fetch_fraction;
    let decompressed_segments = match model {
        OperationalModel::NoCompression => 0.0,
        OperationalModel::Lossless | OperationalModel::DynamicDeep => {
            (x + 1.0) * params.segments_per_year()
        }
        OperationalModel::DynamicDeepWithUncompressed => x * params.segments_per_year(),
    };
    let compute_cost = if decompressed_segments == 0.0 {
        0.0
    } else {
        decompressed_segments / params.decompress_throughput * params.compute_price
    };

    Ok(CostBreakdown {
        model,
        storage_cost,
        compute_cost,
        total: storage_cost + compute_cost,
    })
}

/// Evaluate [`yearly_cost`] across a list of values of one named parameter.
pub fn cost_sensitivity(
    params: &CostParams,
    model: OperationalModel,
    parameter: &str,
    values: &[f64],
) -> Result<Vec<(f64, CostBreakdown)>> {
    values
        .iter()
        .map(|&v| {
            let mut p = params.clone();
            match parameter {
                "n_beds" => p.n_beds = v as u64,
                "samples_per_second" => p.samples_per_second = v,
                "bytes_per_sample" => p.bytes_per_sample = v as u64,
                "hours_per_year" => p.hours_per_year = v,
                "storage_price" => p.storage_price = v,
                "compute_price" => p.compute_price = v,
                "decompress_throughput" => p.decompress_throughput = v,
                "fetch_fraction" => p.fetch_fraction = v,
                "segment_samples" => p.segment_samples = v as u64,
                "avg_cg" => {
                    p.avg_cg.insert(model, v);
                }
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown cost parameter {other:?}"
                    )))
                }
            }
            Ok((v, yearly_cost(&p, model)?))
        })
        .collect()
}

/// Write breakdowns as CSV: `model,storage_cost,compute_cost,total`.
pub fn write_cost_csv(rows: &[CostBreakdown], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "model,storage_cost,compute_cost,total")?;
    for row in rows {
        writeln!(
            f,
            "{},{},{},{}",
            row.model.as_str(),
            row.storage_cost,
            row.compute_cost,
            row.total
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_compression_has_storage_only() {
        let mut params = CostParams::default();
        params.fetch_fraction = 0.0;
        let c = yearly_cost(&params, OperationalModel::NoCompression).unwrap();
        assert_eq!(c.compute_cost, 0.0);
        assert!(c.storage_cost > 0.0);
        assert_eq!(c.total, c.storage_cost);
    }

    #[test]
    fn default_scenario_reaches_ninety_percent_savings() {
        let params = CostParams::default();
        let base = yearly_cost(&params, OperationalModel::NoCompression).unwrap();
        let dyn_unc = yearly_cost(&params, OperationalModel::DynamicDeepWithUncompressed).unwrap();
        assert!(
            dyn_unc.total <= 0.10 * base.total,
            "dynamic-with-uncompressed {} vs no-compression {}",
            dyn_unc.total,
            base.total
        );
    }

    #[test]
    fn lossless_with_negligible_compute_lands_near_63_percent_savings() {
        let mut params = CostParams::default();
        params.compute_price = 0.0;
        let base = yearly_cost(&params, OperationalModel::NoCompression).unwrap();
        let lossless = yearly_cost(&params, OperationalModel::Lossless).unwrap();
        let reduction = 1.0 - lossless.total / base.total;
        assert!(
            (reduction - 0.63).abs() <= 0.05,
            "lossless reduction {reduction}"
        );
    }

    #[test]
    fn ordering_under_default_params() {
        let params = CostParams::default();
        let totals: Vec<f64> = OperationalModel::ALL
            .iter()
            .map(|&m| yearly_cost(&params, m).unwrap().total)
            .collect();
        // no_compression >= lossless >= dynamic_deep >= dynamic_deep_with_uncompressed
        assert!(totals[0] >= totals[1]);
        assert!(totals[1] >= totals[2]);
        assert!(totals[2] >= totals[3]);
    }

    #[test]
    fn sensitivity_monotone_in_cg_and_fetch_fraction() {
        let params = CostParams::default();
        let by_cg = cost_sensitivity(
            &params,
            OperationalModel::DynamicDeep,
            "avg_cg",
            &[1.0, 2.0, 8.0, 32.0, 64.0],
        )
        .unwrap();
        assert!(by_cg.windows(2).all(|w| w[1].1.total <= w[0].1.total));

        let by_x = cost_sensitivity(
            &params,
            OperationalModel::DynamicDeep,
            "fetch_fraction",
            &[0.0, 0.25, 0.5, 0.75, 1.0],
        )
        .unwrap();
        assert!(by_x.windows(2).all(|w| w[1].1.total >= w[0].1.total));
    }

    #[test]
    fn cost_is_linear_in_beds() {
        let params = CostParams::default();
        let single = yearly_cost(&params, OperationalModel::DynamicDeep).unwrap();
        let mut doubled = params.clone();
        doubled.n_beds *= 2;
        let double = yearly_cost(&doubled, OperationalModel::DynamicDeep).unwrap();
        assert!((double.total - 2.0 * single.total).abs() < 1e-9 * single.total.max(1.0));
    }

    #[test]
    fn compute_difference_is_exactly_the_task_share() {
        // dynamic_deep decompresses (x + 1) shares; with_uncompressed only x.
        let params = CostParams::default();
        let a = yearly_cost(&params, OperationalModel::DynamicDeep).unwrap();
        let b = yearly_cost(&params, OperationalModel::DynamicDeepWithUncompressed).unwrap();
        let one_share = params.segments_per_year() / params.decompress_throughput
            * params.compute_price;
        assert!((a.compute_cost - b.compute_cost - one_share).abs() < 1e-9 * one_share);
        assert_eq!(a.storage_cost, b.storage_cost);
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let params = CostParams::default();
        assert!(cost_sensitivity(&params, OperationalModel::Lossless, "moon_phase", &[1.0]).is_err());
    }

    #[test]
    fn zero_cg_is_rejected() {
        let mut params = CostParams::default();
        params.avg_cg.insert(OperationalModel::DynamicDeep, 0.0);
        assert!(yearly_cost(&params, OperationalModel::DynamicDeep).is_err());
    }
}
