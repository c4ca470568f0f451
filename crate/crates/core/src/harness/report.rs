use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "scenario,seed,layer_set,metric,sweep_value,tau,value,status,runtime_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "usable_original")]
    UsableOriginal,
    #[serde(rename = "usable_latent")]
    UsableLatent,
    #[serde(rename = "jac_F")]
    JacF,
    #[serde(rename = "jac_1")]
    Jac1,
    #[serde(rename = "jac_inf")]
    JacInf,
    #[serde(rename = "grassmann")]
    Grassmann,
    #[serde(rename = "success_prob")]
    SuccessProb,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::UsableOriginal,
        Metric::UsableLatent,
        Metric::JacF,
        Metric::Jac1,
        Metric::JacInf,
        Metric::Grassmann,
        Metric::SuccessProb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::UsableOriginal => "usable_original",
            Metric::UsableLatent => "usable_latent",
            Metric::JacF => "jac_F",
            Metric::Jac1 => "jac_1",
            Metric::JacInf => "jac_inf",
            Metric::Grassmann => "grassmann",
            Metric::SuccessProb => "success_prob",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Diverged,
}

impl Status {
    fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Diverged => "diverged",
        }
    }
}

/// Rounds to 9 significant digits, the precision reports are written with.
pub fn round_sig(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

/// Shortest text that round-trips the 9-digit value; exponent form outside
/// `[1e-4, 1e15)` so tiny values stay readable.
pub fn fmt_value(v: f64) -> String {
    let r = round_sig(v);
    if r == 0.0 {
        "0".into()
    } else if (1e-4..1e15).contains(&r.abs()) {
        format!("{r}")
    } else {
        format!("{r:e}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub seed: u64,
    pub layer_set: String,
    pub metric: Metric,
    pub sweep_value: Option<f64>,
    pub tau: Option<f64>,
    pub value: Option<f64>,
    pub status: Status,
    pub runtime_ms: u64,
}

impl ReportRow {
    /// Builds a row with floats rounded to report precision. A missing or
    /// non-finite value marks the row as diverged.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scenario: &str,
        seed: u64,
        layers: &[usize],
        metric: Metric,
        sweep_value: Option<f64>,
        tau: Option<f64>,
        value: Option<f64>,
        runtime_ms: u64,
    ) -> Self {
        let value = value.filter(|v| v.is_finite()).map(round_sig);
        Self {
            scenario: scenario.to_string(),
            seed,
            layer_set: layer_label(layers),
            metric,
            sweep_value: sweep_value.map(round_sig),
            tau: tau.map(round_sig),
            status: if value.is_some() { Status::Ok } else { Status::Diverged },
            value,
            runtime_ms,
        }
    }

    pub fn layers(&self) -> Vec<usize> {
        self.layer_set.split('-').filter_map(|s| s.parse().ok()).collect()
    }

    fn csv_fields(&self) -> [String; 9] {
        let opt = |v: Option<f64>| v.map(fmt_value).unwrap_or_default();
        [
            self.scenario.clone(),
            self.seed.to_string(),
            self.layer_set.clone(),
            self.metric.to_string(),
            opt(self.sweep_value),
            opt(self.tau),
            opt(self.value),
            self.status.as_str().to_string(),
            self.runtime_ms.to_string(),
        ]
    }
}

pub fn layer_label(layers: &[usize]) -> String {
    layers.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

fn cmp_opt(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (a, b) => a.is_some().cmp(&b.is_some()),
    }
}

fn row_order(a: &ReportRow, b: &ReportRow) -> Ordering {
    a.scenario
        .cmp(&b.scenario)
        .then(a.seed.cmp(&b.seed))
        .then_with(|| a.layers().cmp(&b.layers()))
        .then(a.metric.as_str().cmp(b.metric.as_str()))
        .then_with(|| cmp_opt(a.sweep_value, b.sweep_value))
        .then_with(|| cmp_opt(a.tau, b.tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::invalid(format!("unknown report format {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LeakageReport {
    pub rows: Vec<ReportRow>,
}

impl LeakageReport {
    pub fn new(mut rows: Vec<ReportRow>) -> Self {
        rows.sort_by(row_order);
        Self { rows }
    }

    /// Rows matching a metric (and, optionally, a layer-set label).
    pub fn select<'a>(&'a self, metric: Metric, layer_set: Option<&'a str>) -> impl Iterator<Item = &'a ReportRow> {
        self.rows
            .iter()
            .filter(move |r| r.metric == metric && layer_set.is_none_or(|l| r.layer_set == l))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(CSV_HEADER.split(','))
            .map_err(|e| Error::invalid(e.to_string()))?;
        for row in &self.rows {
            w.write_record(row.csv_fields())
                .map_err(|e| Error::invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| Error::Format {
            offset: 0,
            detail: e.to_string(),
        })?;
        if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
            return Err(Error::Format {
                offset: 0,
                detail: "unexpected report header".into(),
            });
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Format {
                offset: e.position().map_or(0, |p| p.byte()),
                detail: e.to_string(),
            })?;
            let offset = rec.position().map_or(0, |p| p.byte());
            let bad = |what: &str| Error::Format {
                offset,
                detail: format!("invalid {what}"),
            };
            let float = |s: &str, what: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(what))
                }
            };
            let status = match &rec[7] {
                "ok" => Status::Ok,
                "diverged" => Status::Diverged,
                _ => return Err(bad("status")),
            };
            rows.push(ReportRow {
                scenario: rec[0].to_string(),
                seed: rec[1].parse().map_err(|_| bad("seed"))?,
                layer_set: rec[2].to_string(),
                metric: rec[3].parse().map_err(|_| bad("metric"))?,
                sweep_value: float(&rec[4], "sweep_value")?,
                tau: float(&rec[5], "tau")?,
                value: float(&rec[6], "value")?,
                status,
                runtime_ms: rec[8].parse().map_err(|_| bad("runtime_ms"))?,
            });
        }
        Ok(Self { rows })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.rows).map_err(|e| Error::invalid(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rows = serde_json::from_str(text).map_err(|e| Error::Format {
            offset: 0,
            detail: e.to_string(),
        })?;
        Ok(Self { rows })
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => self.to_json(),
        }
    }
}

pub fn emit_report(report: &LeakageReport, format: ReportFormat, path: &Path) -> Result<()> {
    std::fs::write(path, report.render(format)?).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<LeakageReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('[') {
        LeakageReport::from_json(&text)
    } else {
        LeakageReport::from_csv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(value: Option<f64>) -> ReportRow {
        ReportRow::new("s", 3, &[0, 3], Metric::UsableOriginal, Some(10.0), Some(0.5), value, 0)
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(LeakageReport::default().to_csv().unwrap(), format!("{CSV_HEADER}\n"));
        assert_eq!(LeakageReport::default().to_json().unwrap(), "[]\n");
    }

    #[test]
    fn csv_and_json_round_trip() {
        let report = LeakageReport::new(vec![row(Some(std::f64::consts::PI)), row(None)]);
        let csv = report.to_csv().unwrap();
        assert!(
            csv.contains("s,3,0-3,usable_original,10,0.5,3.14159265,ok,0\n"),
            "{csv}"
        );
        assert!(csv.contains("s,3,0-3,usable_original,10,0.5,,diverged,0\n"));
        assert_eq!(LeakageReport::from_csv(&csv).unwrap(), report);
        assert_eq!(LeakageReport::from_json(&report.to_json().unwrap()).unwrap(), report);
    }

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_value(0.1234567894321), "0.123456789");
        assert_eq!(fmt_value(1234567890123.0), "1234567890000");
        assert_eq!(fmt_value(1.0e-7), "1e-7");
        assert_eq!(fmt_value(2.220446049250313e-16), "2.22044605e-16");
        assert_eq!(fmt_value(-2.5), "-2.5");
        assert!(round_sig(f64::NAN).is_nan());
    }

    #[test]
    fn rows_sort_numerically_by_layers_and_values() {
        let mk = |layers: &[usize], tau: f64| {
            ReportRow::new("s", 0, layers, Metric::SuccessProb, None, Some(tau), Some(1.0), 0)
        };
        let report = LeakageReport::new(vec![mk(&[10], 0.1), mk(&[2], 0.5), mk(&[2], 0.25)]);
        let order: Vec<(String, Option<f64>)> = report.rows.iter().map(|r| (r.layer_set.clone(), r.tau)).collect();
        assert_eq!(
            order,
            vec![
                ("2".into(), Some(0.25)),
                ("2".into(), Some(0.5)),
                ("10".into(), Some(0.1))
            ]
        );
    }

    #[test]
    fn rejects_malformed_csv() {
        assert!(LeakageReport::from_csv("a,b\n").is_err());
        let bad = format!("{CSV_HEADER}\ns,0,0,nope,,,,ok,0\n");
        assert!(matches!(LeakageReport::from_csv(&bad), Err(Error::Format { .. })));
    }
}
