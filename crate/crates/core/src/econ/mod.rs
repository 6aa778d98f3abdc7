//! Trial cost model: medical-review labor, query management and database
//! lock, traditional versus assisted.
//!
//! Arithmetic is exact decimal. Intermediate quantities such as the query
//! count stay fractional; rounding happens only when formatting.

use std::path::Path;

use rust_decimal::prelude::*;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EconError {
    #[error("invalid parameter {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("unknown parameter {0}")]
    UnknownField(String),
    #[error("cannot read parameters: {0}")]
    Io(String),
    #[error("malformed parameters: {0}")]
    Parse(String),
    #[error("csv output failed: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconParams {
    #[serde(with = "rust_decimal::serde::float")]
    pub reviewers: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub hours_per_reviewer_year: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub years: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub hourly_rate: Decimal,
    /// Fold improvement in review throughput.
    #[serde(with = "rust_decimal::serde::float")]
    pub efficiency_gain: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub data_points: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub query_rate: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub med_reviewer_share: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub manual_share: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub cost_per_query: Decimal,
    /// Share of queries that lead to no data change.
    #[serde(with = "rust_decimal::serde::float")]
    pub false_query_rate: Decimal,
    /// Fold reduction in false queries.
    #[serde(with = "rust_decimal::serde::float")]
    pub fp_reduction: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub dbl_days_baseline: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub days_saved: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub revenue_per_day: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub ops_cost_per_day: Decimal,
}

const DEFAULTS: &str = include_str!("../../data/econ_defaults.json");

/// Names accepted by [`EconParams::field_mut`] and the sweep.
pub const FIELDS: [&str; 16] = [
    "reviewers",
    "hours_per_reviewer_year",
    "years",
    "hourly_rate",
    "efficiency_gain",
    "data_points",
    "query_rate",
    "med_reviewer_share",
    "manual_share",
    "cost_per_query",
    "false_query_rate",
    "fp_reduction",
    "dbl_days_baseline",
    "days_saved",
    "revenue_per_day",
    "ops_cost_per_day",
];

impl Default for EconParams {
    fn default() -> Self {
        EconParams::from_json(DEFAULTS).expect("shipped defaults parse")
    }
}

impl EconParams {
    pub fn from_json(text: &str) -> Result<Self, EconError> {
        let p: EconParams = serde_json::from_str(text).map_err(|e| EconError::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, EconError> {
        let text = std::fs::read_to_string(path).map_err(|e| EconError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn field_mut(&mut self, name: &str) -> Result<&mut Decimal, EconError> {
        Ok(match name {
            "reviewers" => &mut self.reviewers,
            "hours_per_reviewer_year" => &mut self.hours_per_reviewer_year,
            "years" => &mut self.years,
            "hourly_rate" => &mut self.hourly_rate,
            "efficiency_gain" => &mut self.efficiency_gain,
            "data_points" => &mut self.data_points,
            "query_rate" => &mut self.query_rate,
            "med_reviewer_share" => &mut self.med_reviewer_share,
            "manual_share" => &mut self.manual_share,
            "cost_per_query" => &mut self.cost_per_query,
            "false_query_rate" => &mut self.false_query_rate,
            "fp_reduction" => &mut self.fp_reduction,
            "dbl_days_baseline" => &mut self.dbl_days_baseline,
            "days_saved" => &mut self.days_saved,
            "revenue_per_day" => &mut self.revenue_per_day,
            "ops_cost_per_day" => &mut self.ops_cost_per_day,
            other => return Err(EconError::UnknownField(other.to_string())),
        })
    }

    /// Positive amounts, fractions in (0, 1], folds of at least 1, and
    /// `0 <= days_saved <= dbl_days_baseline`.
    pub fn validate(&self) -> Result<(), EconError> {
        let invalid = |field, reason: &str| EconError::Invalid {
            field,
            reason: reason.to_string(),
        };
        for (field, v) in [
            ("reviewers", self.reviewers),
            ("hours_per_reviewer_year", self.hours_per_reviewer_year),
            ("years", self.years),
            ("hourly_rate", self.hourly_rate),
            ("data_points", self.data_points),
            ("cost_per_query", self.cost_per_query),
            ("dbl_days_baseline", self.dbl_days_baseline),
            ("revenue_per_day", self.revenue_per_day),
            ("ops_cost_per_day", self.ops_cost_per_day),
        ] {
            if v <= Decimal::ZERO {
                return Err(invalid(field, "must be positive"));
            }
        }
        for (field, v) in [
            ("query_rate", self.query_rate),
            ("med_reviewer_share", self.med_reviewer_share),
            ("manual_share", self.manual_share),
            ("false_query_rate", self.false_query_rate),
        ] {
            if v <= Decimal::ZERO || v > Decimal::ONE {
                return Err(invalid(field, "must be in (0, 1]"));
            }
        }
        for (field, v) in [("efficiency_gain", self.efficiency_gain), ("fp_reduction", self.fp_reduction)] {
            if v < Decimal::ONE {
                return Err(invalid(field, "fold change must be at least 1"));
            }
        }
        if self.days_saved < Decimal::ZERO || self.days_saved > self.dbl_days_baseline {
            return Err(invalid("days_saved", "must be between 0 and dbl_days_baseline"));
        }
        Ok(())
    }
}

const LINE_DP: u32 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLine {
    pub name: String,
    #[serde(with = "rust_decimal::serde::float")]
    pub traditional: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub assisted: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub savings: Decimal,
    /// Savings as a percentage of the traditional cost.
    #[serde(with = "rust_decimal::serde::float")]
    pub pct_reduction: Decimal,
}

impl CostLine {
    fn new(name: &str, traditional: Decimal, savings: Decimal) -> Self {
        // pinned scale so the subtraction below never drops a digit
        let traditional = traditional.round_dp(LINE_DP);
        let savings = savings.round_dp(LINE_DP);
        CostLine {
            name: name.to_string(),
            traditional,
            assisted: traditional - savings,
            savings,
            pct_reduction: pct(savings, traditional),
        }
    }
}

fn pct(part: Decimal, whole: Decimal) -> Decimal {
    if whole.is_zero() {
        Decimal::ZERO
    } else {
        part * Decimal::ONE_HUNDRED / whole
    }
}

pub fn review_costs(p: &EconParams) -> CostLine {
    let hours = p.reviewers * p.hours_per_reviewer_year * p.years;
    let traditional = hours * p.hourly_rate;
    let assisted = traditional / p.efficiency_gain;
    CostLine::new("medical_review", traditional, traditional - assisted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryVolumes {
    #[serde(with = "rust_decimal::serde::float")]
    pub total_queries: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub false_queries: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub remaining_false_queries: Decimal,
}

pub fn query_volumes(p: &EconParams) -> QueryVolumes {
    let total_queries = p.data_points * p.query_rate * p.med_reviewer_share * p.manual_share;
    let false_queries = total_queries * p.false_query_rate;
    QueryVolumes {
        total_queries,
        false_queries,
        remaining_false_queries: false_queries / p.fp_reduction,
    }
}

pub fn query_costs(p: &EconParams) -> CostLine {
    let v = query_volumes(p);
    let traditional = v.total_queries * p.cost_per_query;
    let savings = (v.false_queries - v.remaining_false_queries) * p.cost_per_query;
    CostLine::new("query_management", traditional, savings)
}

pub fn dblock_costs(p: &EconParams) -> CostLine {
    let per_day = p.revenue_per_day + p.ops_cost_per_day;
    CostLine::new("database_lock", p.dbl_days_baseline * per_day, p.days_saved * per_day)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconReport {
    pub params: EconParams,
    pub lines: Vec<CostLine>,
    pub total: CostLine,
    pub queries: QueryVolumes,
}

pub fn total_report(p: &EconParams) -> Result<EconReport, EconError> {
    p.validate()?;
    let lines = vec![review_costs(p), query_costs(p), dblock_costs(p)];
    let traditional = lines.iter().map(|l| l.traditional).sum();
    let savings = lines.iter().map(|l| l.savings).sum();
    Ok(EconReport {
        params: p.clone(),
        total: CostLine::new("total", traditional, savings),
        lines,
        queries: query_volumes(p),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(with = "rust_decimal::serde::float")]
    pub value: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub total_savings: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub pct_reduction: Decimal,
}

/// Total savings with `field` set to each of `values` in turn.
pub fn sensitivity_sweep(p: &EconParams, field: &str, values: &[Decimal]) -> Result<Vec<SweepRow>, EconError> {
    let mut probe = p.clone();
    probe.field_mut(field)?;
    values
        .iter()
        .map(|&v| {
            *probe.field_mut(field)? = v;
            let r = total_report(&probe)?;
            Ok(SweepRow {
                value: v,
                total_savings: r.total.savings,
                pct_reduction: r.total.pct_reduction,
            })
        })
        .collect()
}

/// Money to whole cents, percentages to two places.
pub fn display_amount(d: Decimal) -> String {
    d.round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero).to_string()
}

pub fn report_to_csv(r: &EconReport) -> Result<String, EconError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| EconError::Csv(e.to_string());
    w.write_record(["line", "traditional", "assisted", "savings", "pct_reduction"]).map_err(err)?;
    for l in r.lines.iter().chain([&r.total]) {
        w.write_record([
            l.name.clone(),
            display_amount(l.traditional),
            display_amount(l.assisted),
            display_amount(l.savings),
            display_amount(l.pct_reduction),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| EconError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn sweep_to_csv(field: &str, rows: &[SweepRow]) -> Result<String, EconError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| EconError::Csv(e.to_string());
    w.write_record([field, "total_savings", "pct_reduction"]).map_err(err)?;
    for r in rows {
        w.write_record([r.value.to_string(), display_amount(r.total_savings), display_amount(r.pct_reduction)])
            .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| EconError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
