//! File formats: frame logs (JSON Lines), risk traces (CSV), calibration and
//! experiment configuration (TOML). See `docs/formats.md`.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::ba::BackendConfig;
use crate::corruption::{CorruptionSpec, FrameWindow, CorruptionKind, SeverityTable};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::risk::{FeatureInput, FrameStatus, MonitorConfig, RiskEntry};
use crate::scene::ScenarioConfig;
use crate::uncertainty::BlockHessian;

pub const FRAME_LOG_SCHEMA: &str = "riskmon.framelog";
pub const RISK_CSV_SCHEMA: &str = "riskmon.risk";
pub const CALIBRATION_SCHEMA: &str = "riskmon.calibration";
pub const SCHEMA_MAJOR: u32 = 1;
pub const SCHEMA_VERSION: &str = "1.0";
/// Relative Frobenius asymmetry tolerated in stored symmetric matrices.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Feature flag: the measurement was replaced by an injected outlier.
pub const FLAG_INJECTED_OUTLIER: u32 = 1;

fn check_schema(found_schema: &str, found_version: &str, expected: &str) -> Result<()> {
    let major = found_version.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if found_schema != expected || major != Some(SCHEMA_MAJOR) {
        return Err(Error::UnsupportedSchema {
            found: format!("{found_schema} {found_version}"),
            expected: format!("{expected} {SCHEMA_MAJOR}.x"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: String,
    pub version: String,
    pub run_tag: String,
    pub frame_interval_s: f64,
    #[serde(default)]
    pub corruption: Option<CorruptionSpec>,
}

impl LogHeader {
    pub fn new(run_tag: impl Into<String>, frame_interval_s: f64, corruption: Option<CorruptionSpec>) -> Self {
        Self {
            schema: FRAME_LOG_SCHEMA.into(),
            version: SCHEMA_VERSION.into(),
            run_tag: run_tag.into(),
            frame_interval_s,
            corruption,
        }
    }
}

/// Marginalized per-feature inputs of the risk engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub feature_id: u64,
    /// Measured minus predicted left pixel.
    pub residual: [f64; 2],
    /// Projection Jacobian, 2x3 row-major.
    pub j_pi: [f64; 6],
    /// Marginal landmark information, 3x3 row-major.
    pub s_ii: [f64; 9],
    #[serde(default)]
    pub flags: u32,
}

impl FeatureRecord {
    pub fn new(feature_id: u64, residual: &Vector2<f64>, jacobian: &Matrix2x3<f64>, information: &Matrix3<f64>, flags: u32) -> Self {
        let mut j_pi = [0.0; 6];
        let mut s_ii = [0.0; 9];
        for r in 0..2 {
            for c in 0..3 {
                j_pi[3 * r + c] = jacobian[(r, c)];
            }
        }
        for r in 0..3 {
            for c in 0..3 {
                s_ii[3 * r + c] = information[(r, c)];
            }
        }
        Self { feature_id, residual: [residual.x, residual.y], j_pi, s_ii, flags }
    }

    pub fn information(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.s_ii)
    }

    pub fn to_input(&self) -> FeatureInput<f64> {
        FeatureInput {
            feature_id: self.feature_id,
            residual: Vector2::new(self.residual[0], self.residual[1]),
            jacobian: Matrix2x3::from_row_slice(&self.j_pi),
            information: self.information(),
        }
    }

    /// Relative Frobenius asymmetry of `s_ii`.
    pub fn asymmetry(&self) -> f64 {
        let m = self.information();
        let norm = m.norm();
        if norm == 0.0 {
            0.0
        } else {
            (m - m.transpose()).norm() / norm
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub n_features: usize,
    /// Translation error against ground truth when known, m.
    #[serde(default)]
    pub pose_error_m: Option<f64>,
    pub iterations: usize,
    pub lambda_lm: f64,
    #[serde(default)]
    pub outlier_ratio: f64,
    #[serde(default)]
    pub noise_sigma_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLogRecord {
    pub frame_id: u64,
    pub timestamp_s: f64,
    pub run_tag: String,
    #[serde(default)]
    pub corruption: Option<CorruptionSpec>,
    #[serde(default)]
    pub status: FrameStatus,
    pub features: Vec<FeatureRecord>,
    pub summary: FrameSummary,
}

impl FrameLogRecord {
    pub fn inputs(&self) -> Vec<FeatureInput<f64>> {
        self.features.iter().map(FeatureRecord::to_input).collect()
    }
}

/// Dense normal matrix of a small window, for offline checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHessianRecord {
    pub frame_id: u64,
    pub num_poses: usize,
    pub landmark_ids: Vec<u64>,
    pub damping: f64,
    /// Undamped matrix, poses first, row-major.
    pub dense: Vec<f64>,
}

impl RawHessianRecord {
    pub fn from_hessian(frame_id: u64, h: &BlockHessian<f64>) -> Self {
        let dense = h.to_dense(false);
        Self {
            frame_id,
            num_poses: h.num_poses,
            landmark_ids: h.landmark_ids.clone(),
            damping: h.damping,
            dense: dense.transpose().as_slice().to_vec(),
        }
    }

    pub fn dimension(&self) -> usize {
        6 * self.num_poses + 3 * self.landmark_ids.len()
    }

    pub fn to_hessian(&self) -> Result<BlockHessian<f64>> {
        let n = self.dimension();
        if self.dense.len() != n * n {
            return Err(Error::MalformedRecord { line: 0, reason: format!("dense matrix has {} entries, expected {}", self.dense.len(), n * n) });
        }
        let dense = DMatrix::from_row_slice(n, n, &self.dense);
        Ok(BlockHessian::from_dense(self.num_poses, self.landmark_ids.clone(), &dense, self.damping))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndRecord {
    pub status: RunStatus,
    /// Frame records written.
    pub frames: usize,
    /// Frame at which the backend gave up.
    #[serde(default)]
    pub failure_frame: Option<u64>,
    #[serde(default)]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogLine {
    Header(LogHeader),
    Frame(FrameLogRecord),
    RawHessian(RawHessianRecord),
    End(EndRecord),
}

fn to_line(line: &LogLine) -> String {
    serde_json::to_string(line).expect("log records serialize")
}

/// One frame record as a single line, without the trailing newline.
pub fn serialize_frame(record: &FrameLogRecord) -> String {
    to_line(&LogLine::Frame(record.clone()))
}

fn parse_line(text: &str, line: usize) -> Result<LogLine> {
    let parsed: LogLine = serde_json::from_str(text).map_err(|e| Error::MalformedRecord { line, reason: e.to_string() })?;
    if let LogLine::Frame(record) = &parsed {
        for f in &record.features {
            let asymmetry = f.asymmetry();
            if !(asymmetry <= SYMMETRY_TOLERANCE) {
                return Err(Error::AsymmetricMatrix { line, asymmetry });
            }
        }
    }
    Ok(parsed)
}

/// Parses one frame line; `line` is reported in errors.
pub fn parse_frame(text: &str, line: usize) -> Result<FrameLogRecord> {
    match parse_line(text, line)? {
        LogLine::Frame(record) => Ok(record),
        _ => Err(Error::MalformedRecord { line, reason: "not a frame record".into() }),
    }
}

/// A complete frame log in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLog {
    pub header: LogHeader,
    pub frames: Vec<FrameLogRecord>,
    pub raw_hessians: Vec<RawHessianRecord>,
    /// Absent when the writer was interrupted.
    pub end: Option<EndRecord>,
}

impl FrameLog {
    pub fn diverged(&self) -> bool {
        self.end.as_ref().is_some_and(|e| e.status == RunStatus::Diverged)
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut writer = FrameLogWriter::new(w, &self.header)?;
        for f in &self.frames {
            writer.write_frame(f)?;
        }
        for r in &self.raw_hessians {
            writer.write_raw(r)?;
        }
        if let Some(end) = &self.end {
            writer.finish(end)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_frame_log(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub struct FrameLogWriter<W: Write> {
    out: W,
}

impl<W: Write> FrameLogWriter<W> {
    pub fn new(mut out: W, header: &LogHeader) -> Result<Self> {
        writeln!(out, "{}", to_line(&LogLine::Header(header.clone())))?;
        Ok(Self { out })
    }

    pub fn write_frame(&mut self, record: &FrameLogRecord) -> Result<()> {
        writeln!(self.out, "{}", serialize_frame(record))?;
        Ok(())
    }

    pub fn write_raw(&mut self, record: &RawHessianRecord) -> Result<()> {
        writeln!(self.out, "{}", to_line(&LogLine::RawHessian(record.clone())))?;
        Ok(())
    }

    pub fn finish(mut self, end: &EndRecord) -> Result<W> {
        writeln!(self.out, "{}", to_line(&LogLine::End(end.clone())))?;
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Reads a frame log. Blank lines are skipped; the first record must be a
/// header with a supported schema.
pub fn read_frame_log(reader: impl BufRead) -> Result<FrameLog> {
    let mut header = None;
    let mut frames = Vec::new();
    let mut raw_hessians = Vec::new();
    let mut end = None;
    for (index, text) in reader.lines().enumerate() {
        let line = index + 1;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed = parse_line(&text, line)?;
        match (&header, parsed) {
            (None, LogLine::Header(h)) => {
                check_schema(&h.schema, &h.version, FRAME_LOG_SCHEMA)?;
                header = Some(h);
            }
            (None, _) => return Err(Error::MalformedRecord { line, reason: "missing header".into() }),
            (Some(_), LogLine::Header(_)) => return Err(Error::MalformedRecord { line, reason: "duplicate header".into() }),
            (Some(_), _) if end.is_some() => return Err(Error::MalformedRecord { line, reason: "record after end".into() }),
            (Some(_), LogLine::Frame(f)) => frames.push(f),
            (Some(_), LogLine::RawHessian(r)) => raw_hessians.push(r),
            (Some(_), LogLine::End(e)) => end = Some(e),
        }
    }
    let header = header.ok_or(Error::MalformedRecord { line: 0, reason: "empty log".into() })?;
    Ok(FrameLog { header, frames, raw_hessians, end })
}

/// One row of the risk CSV, in column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub frame_id: u64,
    pub t: f64,
    pub sigma_bar: f64,
    pub residual_bar: f64,
    pub kappa_bar: f64,
    pub n_features: usize,
    pub r_raw: f64,
    pub r_smooth: f64,
    pub r_dot: f64,
    pub margin: Option<f64>,
    pub trend: bool,
    pub saturated: bool,
}

pub const RISK_COLUMNS: [&str; 12] = [
    "frame_id", "t", "sigma_bar", "residual_bar", "kappa_bar", "n_features", "r_raw", "r_smooth", "r_dot", "margin", "trend",
    "saturated",
];

impl From<&RiskEntry<f64>> for RiskRow {
    fn from(e: &RiskEntry<f64>) -> Self {
        Self {
            frame_id: e.frame_id,
            t: e.timestamp,
            sigma_bar: e.indicators.sigma_bar,
            residual_bar: e.indicators.residual_bar,
            kappa_bar: e.indicators.kappa_bar,
            n_features: e.indicators.feature_count,
            r_raw: e.raw,
            r_smooth: e.smooth,
            r_dot: e.rate,
            margin: e.margin,
            trend: e.trend,
            saturated: e.saturated,
        }
    }
}

impl RiskRow {
    pub fn warning(&self) -> bool {
        self.trend || self.margin.is_some_and(|m| m > 0.0)
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::MalformedRecord { line, reason: e.to_string() }
}

pub fn write_risk_csv(mut w: impl Write, rows: &[RiskRow]) -> Result<()> {
    writeln!(w, "# schema={RISK_CSV_SCHEMA} version={SCHEMA_VERSION}")?;
    let mut csv = csv::Writer::from_writer(w);
    for row in rows {
        csv.serialize(row).map_err(csv_error)?;
    }
    if rows.is_empty() {
        csv.write_record(RISK_COLUMNS).map_err(csv_error)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_risk_csv(mut reader: impl BufRead) -> Result<Vec<RiskRow>> {
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let meta = first.trim().strip_prefix('#').ok_or(Error::MalformedRecord { line: 1, reason: "missing schema line".into() })?;
    let mut schema = "";
    let mut version = "";
    for kv in meta.split_whitespace() {
        match kv.split_once('=') {
            Some(("schema", v)) => schema = v,
            Some(("version", v)) => version = v,
            _ => {}
        }
    }
    check_schema(schema, version, RISK_CSV_SCHEMA)?;
    let mut csv = csv::Reader::from_reader(reader);
    let headers = csv.headers().map_err(csv_error)?.clone();
    if headers.iter().ne(RISK_COLUMNS) {
        return Err(Error::MalformedRecord { line: 2, reason: format!("unexpected columns {headers:?}") });
    }
    csv.deserialize().map(|r| r.map_err(|e| shift_line(csv_error(e)))).collect()
}

fn shift_line(e: Error) -> Error {
    match e {
        Error::MalformedRecord { line, reason } => Error::MalformedRecord { line: line + 1, reason },
        other => other,
    }
}

pub fn save_risk_csv(path: &Path, rows: &[RiskRow]) -> Result<()> {
    write_risk_csv(std::io::BufWriter::new(std::fs::File::create(path)?), rows)
}

pub fn load_risk_csv(path: &Path) -> Result<Vec<RiskRow>> {
    read_risk_csv(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Threshold calibrated on clean runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub schema: String,
    pub version: String,
    pub threshold: f64,
    pub quantile: f64,
    pub samples: usize,
    pub clean_runs: usize,
    pub monitor: MonitorConfig,
}

impl Calibration {
    pub fn new(threshold: f64, samples: usize, clean_runs: usize, monitor: MonitorConfig) -> Self {
        Self {
            schema: CALIBRATION_SCHEMA.into(),
            version: SCHEMA_VERSION.into(),
            threshold,
            quantile: crate::risk::THRESHOLD_QUANTILE,
            samples,
            clean_runs,
            monitor,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let c: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        check_schema(&c.schema, &c.version, CALIBRATION_SCHEMA)?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogConfig {
    /// Write a dense raw-H record for windows with at most this many
    /// parameters; 0 disables.
    pub raw_hessian_max_dim: usize,
}

/// Everything needed for one run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub backend: BackendConfig,
    pub monitor: MonitorConfig,
    pub severity: SeverityTable,
    pub corruption: Option<CorruptionSpec>,
    pub log: LogConfig,
    pub evaluation: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.backend.validate()?;
        self.monitor.validate()?;
        self.severity.validate()?;
        if let Some(c) = &self.corruption {
            c.validate(self.scenario.num_frames)?;
        }
        self.evaluation.validate()
    }
}

/// Batch of corruption runs, expanded kinds × severities × seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub seeds: Vec<u64>,
    pub window: Option<FrameWindow>,
    pub ramp_frames: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { kinds: CorruptionKind::ALL.to_vec(), severities: vec![0, 1, 2, 3, 4], seeds: vec![1, 2, 3], window: None, ramp_frames: 0 }
    }
}

impl GridConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let g: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if g.kinds.is_empty() || g.severities.is_empty() || g.seeds.is_empty() {
            return Err(Error::Config("grid needs at least one kind, severity and seed".into()));
        }
        Ok(g)
    }
}
