//! Per-record results, CSV persistence and the run summary.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::slope::{fit_slope_records, Column, SlopeFit, XAxis};

/// Column order of the CSV report.
pub const HEADER: [&str; 19] = [
    "config_hash",
    "seed",
    "N",
    "n",
    "n_T",
    "s",
    "lambda",
    "lambda_star",
    "sin_theta_hs",
    "chat_cn_hs",
    "excess_risk",
    "excess_risk_se",
    "baseline_krr_risk",
    "oracle_proj_risk",
    "davis_kahan_lhs",
    "davis_kahan_rhs",
    "davis_kahan_holds",
    "gamma_hat_profile",
    "status",
];

pub const STATUS_OK: &str = "ok";

/// One grid cell for one seed. Metrics that were not requested, or that a
/// failure prevented, are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub config_hash: String,
    pub seed: u64,
    pub n_tasks: usize,
    pub n: usize,
    pub n_target: usize,
    pub s: usize,
    pub lambda: Option<f64>,
    pub lambda_star: Option<f64>,
    pub sin_theta_hs: Option<f64>,
    pub chat_cn_hs: Option<f64>,
    pub excess_risk: Option<f64>,
    pub excess_risk_se: Option<f64>,
    pub baseline_krr_risk: Option<f64>,
    pub oracle_proj_risk: Option<f64>,
    pub davis_kahan_lhs: Option<f64>,
    pub davis_kahan_rhs: Option<f64>,
    pub davis_kahan_holds: Option<bool>,
    pub gamma_hat_profile: Vec<f64>,
    pub status: String,
}

impl Record {
    pub fn new(config_hash: &str, seed: u64, n_tasks: usize, n: usize, n_target: usize, s: usize) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            seed,
            n_tasks,
            n,
            n_target,
            s,
            lambda: None,
            lambda_star: None,
            sin_theta_hs: None,
            chat_cn_hs: None,
            excess_risk: None,
            excess_risk_se: None,
            baseline_krr_risk: None,
            oracle_proj_risk: None,
            davis_kahan_lhs: None,
            davis_kahan_rhs: None,
            davis_kahan_holds: None,
            gamma_hat_profile: Vec::new(),
            status: STATUS_OK.to_string(),
        }
    }

    pub fn fail(&mut self, msg: &str) {
        self.status = format!("failed: {msg}");
    }

    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }

    fn fields(&self) -> Vec<String> {
        let real = |v: Option<f64>| v.map(fmt_real).unwrap_or_default();
        vec![
            self.config_hash.clone(),
            self.seed.to_string(),
            self.n_tasks.to_string(),
            self.n.to_string(),
            self.n_target.to_string(),
            self.s.to_string(),
            real(self.lambda),
            real(self.lambda_star),
            real(self.sin_theta_hs),
            real(self.chat_cn_hs),
            real(self.excess_risk),
            real(self.excess_risk_se),
            real(self.baseline_krr_risk),
            real(self.oracle_proj_risk),
            real(self.davis_kahan_lhs),
            real(self.davis_kahan_rhs),
            self.davis_kahan_holds.map(|b| b.to_string()).unwrap_or_default(),
            self.gamma_hat_profile.iter().map(|&v| fmt_real(v)).collect::<Vec<_>>().join(";"),
            self.status.clone(),
        ]
    }

    fn from_fields(row: &csv::StringRecord) -> Result<Self> {
        let bad = |col: &str, v: &str| HarnessError::Report(format!("bad value {v:?} in column {col}"));
        let get = |i: usize| row.get(i).unwrap_or("");
        let int = |i: usize| get(i).parse::<u64>().map_err(|_| bad(HEADER[i], get(i)));
        let real = |i: usize| -> Result<Option<f64>> {
            match get(i) {
                "" => Ok(None),
                v => v.parse().map(Some).map_err(|_| bad(HEADER[i], v)),
            }
        };
        let holds = match get(16) {
            "" => None,
            "true" => Some(true),
            "false" => Some(false),
            v => return Err(bad(HEADER[16], v)),
        };
        let profile = match get(17) {
            "" => Vec::new(),
            v => v
                .split(';')
                .map(|p| p.parse().map_err(|_| bad(HEADER[17], p)))
                .collect::<Result<Vec<f64>>>()?,
        };
        Ok(Self {
            config_hash: get(0).to_string(),
            seed: int(1)?,
            n_tasks: int(2)? as usize,
            n: int(3)? as usize,
            n_target: int(4)? as usize,
            s: int(5)? as usize,
            lambda: real(6)?,
            lambda_star: real(7)?,
            sin_theta_hs: real(8)?,
            chat_cn_hs: real(9)?,
            excess_risk: real(10)?,
            excess_risk_se: real(11)?,
            baseline_krr_risk: real(12)?,
            oracle_proj_risk: real(13)?,
            davis_kahan_lhs: real(14)?,
            davis_kahan_rhs: real(15)?,
            davis_kahan_holds: holds,
            gamma_hat_profile: profile,
            status: get(18).to_string(),
        })
    }
}

/// 17 significant digits in scientific notation.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// All records of a run, in cell order then seed order.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub config_hash: String,
    pub records: Vec<Record>,
}

impl RateReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(HEADER)?;
        for r in &self.records {
            w.write_record(r.fields())?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = rd.headers()?.clone();
        if header.iter().ne(HEADER.iter().copied()) {
            return Err(HarnessError::Report(format!(
                "unexpected header {:?}",
                header.iter().collect::<Vec<_>>()
            )));
        }
        let records = rd
            .records()
            .map(|row| Record::from_fields(&row?))
            .collect::<Result<Vec<_>>>()?;
        let config_hash = records.first().map(|r| r.config_hash.clone()).unwrap_or_default();
        Ok(Self { config_hash, records })
    }

    pub fn failed(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| !r.is_ok())
    }

    /// Slope of `log(median y)` against `log x` over all completed records.
    pub fn fit_slope(&self, x_axis: XAxis, y: Column) -> Result<SlopeFit> {
        let ok: Vec<&Record> = self.records.iter().filter(|r| r.is_ok()).collect();
        fit_slope_records(&ok, x_axis, y)
    }

    pub fn summary(&self) -> Summary {
        Summary::from_report(self)
    }
}

/// Cell identity without the seed.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct CellId {
    n_tasks: usize,
    n: usize,
    n_target: usize,
    s: usize,
    lambda: f64,
}

impl CellId {
    fn of(r: &Record) -> Self {
        Self { n_tasks: r.n_tasks, n: r.n, n_target: r.n_target, s: r.s, lambda: r.lambda.unwrap_or(f64::NAN) }
    }

    fn key(&self) -> (usize, usize, usize, usize, u64) {
        (self.n_tasks, self.n, self.n_target, self.s, self.lambda.to_bits())
    }

    /// The cell with one axis blanked, grouping records that differ only
    /// along that axis.
    fn without(&self, axis: XAxis) -> (usize, usize, usize, usize, u64) {
        let (mut a, mut b, mut c, d, e) = self.key();
        match axis {
            XAxis::Tasks => a = 0,
            XAxis::PerTask => b = 0,
            XAxis::TotalSamples => {
                a = 0;
                b = 0;
            }
            XAxis::Target => c = 0,
        }
        (a, b, c, d, e)
    }
}

/// Medians across seeds for one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    #[serde(rename = "N")]
    pub n_tasks: usize,
    pub n: usize,
    #[serde(rename = "n_T")]
    pub n_target: usize,
    pub s: usize,
    pub lambda: f64,
    pub seeds: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_sin_theta_hs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_chat_cn_hs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_excess_risk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_baseline_krr_risk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_oracle_proj_risk: Option<f64>,
    pub davis_kahan_checked: usize,
    pub davis_kahan_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeSummary {
    pub x_axis: XAxis,
    pub metric: Column,
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    pub n_tasks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(rename = "n_T", skip_serializing_if = "Option::is_none")]
    pub n_target: Option<usize>,
    pub s: usize,
    pub lambda: f64,
    #[serde(flatten)]
    pub fit: SlopeFit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailedCell {
    pub seed: u64,
    #[serde(rename = "N")]
    pub n_tasks: usize,
    pub n: usize,
    #[serde(rename = "n_T")]
    pub n_target: usize,
    pub s: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub status: String,
}

/// Structured summary of a report: per-cell medians, fitted slopes along
/// each swept axis, and failed cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub config_hash: String,
    pub records: usize,
    pub completed: usize,
    pub cells: Vec<CellSummary>,
    pub slopes: Vec<SlopeSummary>,
    pub failed: Vec<FailedCell>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len();
    Some(if m % 2 == 1 { values[m / 2] } else { 0.5 * (values[m / 2 - 1] + values[m / 2]) })
}

impl Summary {
    pub fn from_report(report: &RateReport) -> Self {
        let ok: Vec<&Record> = report.records.iter().filter(|r| r.is_ok()).collect();
        let mut by_cell: BTreeMap<_, (CellId, Vec<&Record>)> = BTreeMap::new();
        for r in &ok {
            let id = CellId::of(r);
            by_cell.entry(id.key()).or_insert_with(|| (id, Vec::new())).1.push(r);
        }
        let cells = by_cell
            .values()
            .map(|(id, rs)| {
                let med = |f: fn(&Record) -> Option<f64>| median(&mut rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
                let checked = rs.iter().filter(|r| r.davis_kahan_holds.is_some()).count();
                let violations = rs.iter().filter(|r| r.davis_kahan_holds == Some(false)).count();
                CellSummary {
                    n_tasks: id.n_tasks,
                    n: id.n,
                    n_target: id.n_target,
                    s: id.s,
                    lambda: id.lambda,
                    seeds: rs.len(),
                    median_sin_theta_hs: med(|r| r.sin_theta_hs),
                    median_chat_cn_hs: med(|r| r.chat_cn_hs),
                    median_excess_risk: med(|r| r.excess_risk),
                    median_baseline_krr_risk: med(|r| r.baseline_krr_risk),
                    median_oracle_proj_risk: med(|r| r.oracle_proj_risk),
                    davis_kahan_checked: checked,
                    davis_kahan_violations: violations,
                }
            })
            .collect();

        let mut slopes = Vec::new();
        for axis in [XAxis::Tasks, XAxis::PerTask, XAxis::Target] {
            let mut groups: BTreeMap<_, (CellId, Vec<&Record>)> = BTreeMap::new();
            for r in &ok {
                let id = CellId::of(r);
                groups.entry(id.without(axis)).or_insert_with(|| (id, Vec::new())).1.push(r);
            }
            let metrics: &[Column] = match axis {
                XAxis::Target => &[Column::ExcessRisk],
                _ => &[Column::SinTheta, Column::ChatCn, Column::ExcessRisk],
            };
            for (id, rs) in groups.values() {
                for &metric in metrics {
                    // Axes that were not swept, or metrics that were not
                    // recorded, are skipped silently.
                    if let Ok(fit) = fit_slope_records(rs, axis, metric) {
                        slopes.push(SlopeSummary {
                            x_axis: axis,
                            metric,
                            n_tasks: (axis != XAxis::Tasks).then_some(id.n_tasks),
                            n: (axis != XAxis::PerTask).then_some(id.n),
                            n_target: (axis != XAxis::Target).then_some(id.n_target),
                            s: id.s,
                            lambda: id.lambda,
                            fit,
                        });
                    }
                }
            }
        }

        let failed = report
            .failed()
            .map(|r| FailedCell {
                seed: r.seed,
                n_tasks: r.n_tasks,
                n: r.n,
                n_target: r.n_target,
                s: r.s,
                lambda: r.lambda,
                status: r.status.clone(),
            })
            .collect();
        Summary {
            config_hash: report.config_hash.clone(),
            records: report.records.len(),
            completed: ok.len(),
            cells,
            slopes,
            failed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("summary serializes")
    }
}
