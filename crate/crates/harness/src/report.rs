//! Run records, versioned reports and their JSON/CSV encodings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use promptq_core::calib::Metric;
use promptq_core::recon::{UnitGranularity, UnitReport};
use serde::{Deserialize, Serialize};

use crate::config::{BitPair, ExperimentConfig, ReconMode};
use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Calibrated range of one query/key activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub name: String,
    pub x_low: f64,
    pub x_up: f64,
    /// Width over the bulk unit, for tensors that received outliers.
    pub width_sigma: Option<f64>,
}

/// Outcome of one (seed, method, bits, reconstruction) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub method: Metric,
    pub bits: BitPair,
    pub recon: ReconMode,
    /// Unit grouping; `None` without reconstruction.
    pub granularity: Option<UnitGranularity>,
    /// Focus threshold used by the calibration search and by `dist_pcc`.
    pub theta: f64,
    /// Mean IoU of binarized masks against the full-precision model.
    pub mask_iou: f64,
    /// Mean focus distance per attention module on the evaluation items.
    pub dist_pcc: BTreeMap<String, f64>,
    pub dist_pcc_mean: f64,
    /// Mean over the modules that received outliers.
    pub dist_pcc_targets: Option<f64>,
    /// Hybrid-token MSE per encoder stage through the layer-skip path.
    pub hybrid_mse: Vec<f64>,
    pub clip_ranges: Vec<ClipRange>,
    pub recon_units: Vec<UnitReport>,
    /// Wall-clock seconds; the only field allowed to differ between
    /// repeated runs.
    pub runtime_s: f64,
}

impl RunRecord {
    pub fn sort_key(&self) -> (u64, Metric, BitPair, ReconMode, Option<UnitGranularity>, u64) {
        (self.seed, self.method, self.bits, self.recon, self.granularity, self.theta.to_bits())
    }

    pub fn hybrid_mse_mean(&self) -> f64 {
        if self.hybrid_mse.is_empty() {
            0.0
        } else {
            self.hybrid_mse.iter().sum::<f64>() / self.hybrid_mse.len() as f64
        }
    }

    /// Widest outlier-target range in bulk units.
    pub fn max_target_width_sigma(&self) -> Option<f64> {
        self.clip_ranges.iter().filter_map(|c| c.width_sigma).reduce(f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    Experiment,
    ThetaSweep,
    GranularitySweep,
    Merged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub kind: ReportKind,
    /// Configuration that produced the records; absent for merged reports.
    pub config: Option<ExperimentConfig>,
    pub records: Vec<RunRecord>,
}

impl Report {
    pub fn new(kind: ReportKind, config: Option<ExperimentConfig>, mut records: Vec<RunRecord>) -> Self {
        records.sort_by_key(RunRecord::sort_key);
        Self {
            schema_version: SCHEMA_VERSION,
            kind,
            config,
            records,
        }
    }

    /// Appends `other`'s records after this report's, leaving existing
    /// records untouched.
    pub fn append(&mut self, other: Report) -> Result<()> {
        if other.schema_version != self.schema_version {
            return Err(HarnessError::Config(format!(
                "cannot merge schema {} into schema {}",
                other.schema_version, self.schema_version
            )));
        }
        if self.config != other.config || self.kind != other.kind {
            self.kind = ReportKind::Merged;
            self.config = None;
        }
        self.records.extend(other.records);
        self.records.sort_by_key(RunRecord::sort_key);
        Ok(())
    }

    /// The same report with every runtime zeroed, for reproducibility
    /// comparisons.
    pub fn without_runtime(&self) -> Self {
        let mut r = self.clone();
        r.records.iter_mut().for_each(|x| x.runtime_s = 0.0);
        r
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| HarnessError::Serialize(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("report: {e}")))?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::Config(format!("unsupported report schema {}", r.schema_version)));
        }
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    /// One row per record, columns as in [`CSV_COLUMNS`].
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let ser = |e: csv::Error| HarnessError::Serialize(e.to_string());
        w.write_record(CSV_COLUMNS).map_err(ser)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let stages: Vec<String> = r.hybrid_mse.iter().map(f64::to_string).collect();
            w.write_record([
                r.seed.to_string(),
                r.method.to_string(),
                r.bits.to_string(),
                r.recon.to_string(),
                r.granularity.map(|g| g.to_string()).unwrap_or_default(),
                r.theta.to_string(),
                r.mask_iou.to_string(),
                r.dist_pcc_mean.to_string(),
                opt(r.dist_pcc_targets),
                r.hybrid_mse_mean().to_string(),
                stages.join(";"),
                opt(r.max_target_width_sigma()),
                r.runtime_s.to_string(),
            ])
            .map_err(ser)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Serialize(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| HarnessError::Serialize(e.to_string()))
    }
}

/// Fixed CSV header. `hybrid_mse_stages` joins per-stage values with `;`;
/// empty cells mean "not applicable".
pub const CSV_COLUMNS: [&str; 13] = [
    "seed",
    "method",
    "bits",
    "recon",
    "granularity",
    "theta",
    "mask_iou",
    "dist_pcc_mean",
    "dist_pcc_targets",
    "hybrid_mse_mean",
    "hybrid_mse_stages",
    "max_target_width_sigma",
    "runtime_s",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl Format {
    /// From the file extension; JSON unless it is `.csv`.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Json,
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Json => "json",
            Format::Csv => "csv",
        })
    }
}

impl FromStr for Format {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            _ => Err(HarnessError::Config(format!("unknown report format {s:?}"))),
        }
    }
}

pub fn emit_report(report: &Report, format: Format, path: &Path) -> Result<()> {
    let text = match format {
        Format::Json => report.to_json()?,
        Format::Csv => report.to_csv()?,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(seed: u64, method: Metric) -> RunRecord {
        RunRecord {
            seed,
            method,
            bits: BitPair::new(6, 6),
            recon: ReconMode::None,
            granularity: None,
            theta: 0.5,
            mask_iou: 0.75,
            dist_pcc: BTreeMap::from([("dec.0.t2i".to_string(), 0.25)]),
            dist_pcc_mean: 0.25,
            dist_pcc_targets: Some(0.25),
            hybrid_mse: vec![0.5, 0.25],
            clip_ranges: vec![ClipRange {
                name: "dec.0.t2i.k.out".into(),
                x_low: -1.0,
                x_up: 2.0,
                width_sigma: Some(3.0),
            }],
            recon_units: vec![],
            runtime_s: 1.5,
        }
    }

    #[test]
    fn records_are_ordered() {
        let r = Report::new(ReportKind::Experiment, None, vec![record(1, Metric::Mse), record(0, Metric::Pcc), record(0, Metric::Mse)]);
        let keys: Vec<_> = r.records.iter().map(|x| (x.seed, x.method)).collect();
        assert_eq!(keys, vec![(0, Metric::Mse), (0, Metric::Pcc), (1, Metric::Mse)]);
    }

    #[test]
    fn json_round_trip() {
        let r = Report::new(ReportKind::Experiment, Some(ExperimentConfig::default()), vec![record(0, Metric::Pcc)]);
        let back = Report::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json().unwrap(), r.to_json().unwrap());
    }

    #[test]
    fn csv_has_fixed_columns() {
        let r = Report::new(ReportKind::Experiment, None, vec![record(0, Metric::Pcc)]);
        let csv = r.to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "0,pcc,W6A6,none,,0.5,0.75,0.25,0.25,0.375,0.5;0.25,3,1.5");
    }

    #[test]
    fn append_sorts_and_marks_merges() {
        let mut a = Report::new(ReportKind::Experiment, None, vec![record(3, Metric::Mse)]);
        let b = Report::new(ReportKind::ThetaSweep, None, vec![record(0, Metric::Mse)]);
        a.append(b).unwrap();
        assert_eq!(a.kind, ReportKind::Merged);
        assert_eq!(a.records.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 3]);
        let mut bad = a.clone();
        bad.schema_version = 99;
        assert!(a.append(bad).is_err());
    }

    #[test]
    fn runtime_is_the_only_volatile_field() {
        let r = Report::new(ReportKind::Experiment, None, vec![record(0, Metric::Mse)]);
        let mut s = r.clone();
        s.records[0].runtime_s = 99.0;
        assert_ne!(r, s);
        assert_eq!(r.without_runtime(), s.without_runtime());
    }
}
