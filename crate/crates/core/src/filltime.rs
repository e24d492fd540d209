//! Checkpoint-Fill-Time Law.
//!
//! The ideal time to dump all of a machine's RAM to its storage tier is the
//! fraction of storage that RAM occupies, multiplied by the time it takes to
//! fill one storage device at its sustained write bandwidth:
//!
//! ```text
//! ideal = (storage_ram / storage_total) * (device_size / device_bandwidth)
//! ```
//!
//! All byte quantities are decimal (1 TB = 10^12 bytes). Times are reported
//! in minutes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KB: f64 = 1e3;
pub const MB: f64 = 1e6;
pub const GB: f64 = 1e9;
pub const TB: f64 = 1e12;
pub const PB: f64 = 1e15;

/// Multiplier from ideal to observed checkpoint time at petascale.
pub const DEFAULT_REAL_WORLD_FACTOR: f64 = 10.0;

/// Rows whose published ideal time differs from the law by more than this
/// (in minutes) are flagged as inconsistent.
pub const PUBLISHED_TOLERANCE_MIN: f64 = 0.15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FillTimeError {
    #[error("{field} must be positive (got {value})")]
    NonPositive { field: &'static str, value: f64 },
    #[error("{field} must be non-negative (got {value})")]
    Negative { field: &'static str, value: f64 },
    #[error("spec `{name}` has neither a stated ratio nor both RAM and storage totals")]
    MissingData { name: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Inputs to the law for one machine.
///
/// `ratio` is the RAM-to-storage ratio as published for a machine. When it is
/// present it takes precedence over `storage_ram / storage_total`; machines
/// whose totals are unknown can only be described through it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: String,
    pub year: Option<u32>,
    pub storage_ram: Option<f64>,
    pub storage_total: Option<f64>,
    pub ratio: Option<f64>,
    pub device_size: f64,
    pub device_bandwidth: f64,
}

impl SystemSpec {
    pub fn new(
        name: impl Into<String>,
        storage_ram: f64,
        storage_total: f64,
        device_size: f64,
        device_bandwidth: f64,
    ) -> Self {
        Self {
            name: name.into(),
            year: None,
            storage_ram: Some(storage_ram),
            storage_total: Some(storage_total),
            ratio: None,
            device_size,
            device_bandwidth,
        }
    }

    pub fn with_ratio(mut self, ratio: f64) -> Self {
        self.ratio = Some(ratio);
        self
    }

    pub fn with_year(mut self, year: u32) -> Self {
        self.year = Some(year);
        self
    }

    pub fn validate(&self) -> Result<(), FillTimeError> {
        positive("device_size", self.device_size)?;
        positive("device_bandwidth", self.device_bandwidth)?;
        if let Some(ram) = self.storage_ram {
            // Zero RAM is legal and predicts a zero-length dump.
            if !(ram >= 0.0) {
                return Err(FillTimeError::Negative { field: "storage_ram", value: ram });
            }
        }
        if let Some(total) = self.storage_total {
            positive("storage_total", total)?;
        }
        if let Some(ratio) = self.ratio {
            if !(ratio >= 0.0) {
                return Err(FillTimeError::Negative { field: "ratio", value: ratio });
            }
        }
        if self.ratio.is_none() && (self.storage_ram.is_none() || self.storage_total.is_none()) {
            return Err(FillTimeError::MissingData { name: self.name.clone() });
        }
        Ok(())
    }

    /// RAM-to-storage ratio used by the law.
    pub fn effective_ratio(&self) -> Result<f64, FillTimeError> {
        self.validate()?;
        match (self.ratio, self.storage_ram, self.storage_total) {
            (Some(r), _, _) => Ok(r),
            (None, Some(ram), Some(total)) => Ok(ram / total),
            _ => Err(FillTimeError::MissingData { name: self.name.clone() }),
        }
    }

    /// Storage total consistent with `effective_ratio`.
    fn effective_storage_total(&self) -> Result<f64, FillTimeError> {
        self.validate()?;
        match (self.ratio, self.storage_ram, self.storage_total) {
            (Some(r), Some(ram), _) if r > 0.0 && ram > 0.0 => Ok(ram / r),
            (_, _, Some(total)) => Ok(total),
            _ => Err(FillTimeError::MissingData { name: self.name.clone() }),
        }
    }

    fn has_missing_data(&self) -> bool {
        self.storage_ram.is_none() || self.storage_total.is_none()
    }
}

fn positive(field: &'static str, value: f64) -> Result<(), FillTimeError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(FillTimeError::NonPositive { field, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub ratio: f64,
    /// Minutes.
    pub single_device_fill_time: f64,
    /// Minutes.
    pub ideal_ckpt_time: f64,
    /// Minutes.
    pub real_world_estimate: f64,
}

/// The law with a calibratable real-world penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FillTimeLaw {
    pub real_world_factor: f64,
}

impl Default for FillTimeLaw {
    fn default() -> Self {
        Self { real_world_factor: DEFAULT_REAL_WORLD_FACTOR }
    }
}

impl FillTimeLaw {
    pub fn predict(&self, spec: &SystemSpec) -> Result<Prediction, FillTimeError> {
        let ratio = spec.effective_ratio()?;
        let fill = single_device_fill_time(spec)?;
        let ideal = ratio * fill;
        Ok(Prediction {
            ratio,
            single_device_fill_time: fill,
            ideal_ckpt_time: ideal,
            real_world_estimate: ideal * self.real_world_factor,
        })
    }
}

/// Minutes to fill one device at its sustained bandwidth.
pub fn single_device_fill_time(spec: &SystemSpec) -> Result<f64, FillTimeError> {
    positive("device_size", spec.device_size)?;
    positive("device_bandwidth", spec.device_bandwidth)?;
    Ok(spec.device_size / spec.device_bandwidth / 60.0)
}

pub fn ideal_ckpt_time(spec: &SystemSpec) -> Result<Prediction, FillTimeError> {
    FillTimeLaw::default().predict(spec)
}

/// Minutes to dump `dump_bytes` (rather than all of RAM).
pub fn partial_dump_time(spec: &SystemSpec, dump_bytes: f64) -> Result<f64, FillTimeError> {
    if !(dump_bytes >= 0.0) {
        return Err(FillTimeError::Negative { field: "dump_bytes", value: dump_bytes });
    }
    let total = spec.effective_storage_total()?;
    Ok(dump_bytes / total * single_device_fill_time(spec)?)
}

/// One machine of the built-in dataset, together with the ideal time that
/// was published for it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMachine {
    pub spec: SystemSpec,
    pub published_ideal_min: Option<f64>,
    pub published_fill_min: Option<f64>,
}

/// The seven reference machines (two petascale disk systems from 2009-2014,
/// a 2016 system, a university cluster, a single SSD node, and a projected
/// SSD-based exascale system).
pub fn table1() -> Vec<ReferenceMachine> {
    let row = |spec: SystemSpec, fill: f64, ideal: f64| ReferenceMachine {
        spec,
        published_ideal_min: Some(ideal),
        published_fill_min: Some(fill),
    };
    vec![
        row(
            SystemSpec::new("Stampede (TACC)", 205.0 * TB, 10.0 * PB, 2.0 * TB, 100.0 * MB)
                .with_ratio(0.02)
                .with_year(2014),
            333.0,
            6.7,
        ),
        row(
            SystemSpec::new("Jaguar (ORNL)", 598.0 * TB, 10.7 * PB, 1.0 * TB, 100.0 * MB)
                .with_ratio(0.056)
                .with_year(2009),
            167.0,
            9.4,
        ),
        row(
            SystemSpec::new("Titan (ORNL)", 710.0 * TB, 10.7 * PB, 1.0 * TB, 100.0 * MB)
                .with_ratio(0.066)
                .with_year(2012),
            167.0,
            11.0,
        ),
        row(
            SystemSpec {
                name: "Sunway TaihuLight".into(),
                year: Some(2016),
                storage_ram: Some(1311.0 * TB),
                storage_total: None,
                ratio: Some(0.05),
                device_size: 3.0 * TB,
                device_bandwidth: 100.0 * MB,
            },
            500.0,
            25.0,
        ),
        row(
            SystemSpec::new("CCR (UB)", 1.728 * TB, 500.0 * TB, 4.0 * TB, 100.0 * MB)
                .with_ratio(0.0035)
                .with_year(2015),
            666.0,
            2.3,
        ),
        row(
            SystemSpec::new("SSD-based 4-core node", 16.0 * GB, 128.0 * GB, 128.0 * GB, 500.0 * MB)
                .with_ratio(0.125)
                .with_year(2014),
            4.3,
            4.3,
        ),
        row(
            SystemSpec {
                name: "Theoretical Exascale".into(),
                year: Some(2020),
                storage_ram: None,
                storage_total: None,
                ratio: Some(0.1),
                device_size: 4.0 * TB,
                device_bandwidth: 4.0 * GB,
            },
            16.0,
            1.6,
        ),
    ]
}

/// Machine-readable form of one rendered row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub year: Option<u32>,
    pub storage_ram_bytes: Option<f64>,
    pub storage_total_bytes: Option<f64>,
    pub ratio: Option<f64>,
    pub device_size_bytes: f64,
    pub device_bandwidth_bytes_per_s: f64,
    pub single_device_fill_min: Option<f64>,
    pub ideal_ckpt_min: Option<f64>,
    pub real_world_min: Option<f64>,
    pub published_ideal_min: Option<f64>,
    /// Some input is unknown, or the ratio exceeds 1.
    pub uncertain: bool,
    /// The published ideal time does not follow from the law.
    pub law_inconsistent: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedTable {
    pub text: String,
    pub rows: Vec<TableRow>,
}

impl RenderedTable {
    pub fn json_lines(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("row serializes"));
            out.push('\n');
        }
        out
    }
}

pub fn build_row(spec: &SystemSpec, published_ideal_min: Option<f64>, law: &FillTimeLaw) -> TableRow {
    let prediction = law.predict(spec);
    let (fill, ideal, real, ratio, error) = match &prediction {
        Ok(p) => (
            Some(p.single_device_fill_time),
            Some(p.ideal_ckpt_time),
            Some(p.real_world_estimate),
            Some(p.ratio),
            None,
        ),
        Err(e) => (None, None, None, spec.ratio, Some(e.to_string())),
    };
    let law_inconsistent = match (ideal, published_ideal_min) {
        (Some(computed), Some(published)) => (computed - published).abs() > PUBLISHED_TOLERANCE_MIN,
        _ => false,
    };
    TableRow {
        name: spec.name.clone(),
        year: spec.year,
        storage_ram_bytes: spec.storage_ram,
        storage_total_bytes: spec.storage_total,
        ratio,
        device_size_bytes: spec.device_size,
        device_bandwidth_bytes_per_s: spec.device_bandwidth,
        single_device_fill_min: fill,
        ideal_ckpt_min: ideal,
        real_world_min: real,
        published_ideal_min,
        uncertain: spec.has_missing_data() || ratio.map_or(true, |r| r > 1.0),
        law_inconsistent,
        error,
    }
}

pub fn render_table(specs: &[SystemSpec]) -> RenderedTable {
    let entries: Vec<_> = specs.iter().map(|s| (s.clone(), None)).collect();
    render_entries(&entries, &FillTimeLaw::default())
}

pub fn render_reference_table(machines: &[ReferenceMachine]) -> RenderedTable {
    let entries: Vec<_> = machines
        .iter()
        .map(|m| (m.spec.clone(), m.published_ideal_min))
        .collect();
    render_entries(&entries, &FillTimeLaw::default())
}

fn render_entries(entries: &[(SystemSpec, Option<f64>)], law: &FillTimeLaw) -> RenderedTable {
    let rows: Vec<TableRow> = entries
        .iter()
        .map(|(spec, published)| build_row(spec, *published, law))
        .collect();

    let header = [
        "Name", "Year", "RAM", "Storage", "Ratio", "Device", "Device BW", "Fill (min)",
        "Ideal (min)", "Real (min)", "Published", "Notes",
    ];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for row in &rows {
        let mut notes = Vec::new();
        if row.uncertain {
            notes.push("??".to_string());
        }
        if row.law_inconsistent {
            notes.push("law-inconsistent".to_string());
        }
        if let Some(e) = &row.error {
            notes.push(e.clone());
        }
        cells.push(vec![
            row.name.clone(),
            row.year.map_or("??".into(), |y| y.to_string()),
            row.storage_ram_bytes.map_or("??".into(), format_bytes),
            row.storage_total_bytes.map_or("??".into(), format_bytes),
            row.ratio.map_or("??".into(), |r| format!("{r}")),
            format_bytes(row.device_size_bytes),
            format!("{}/s", format_bytes(row.device_bandwidth_bytes_per_s)),
            row.single_device_fill_min.map_or("??".into(), |v| format!("{v:.1}")),
            row.ideal_ckpt_min.map_or("??".into(), |v| format!("{v:.1}")),
            row.real_world_min.map_or("??".into(), |v| format!("{v:.1}")),
            row.published_ideal_min.map_or("-".into(), |v| format!("{v:.1}")),
            notes.join(" "),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        let _ = writeln!(text, "{}", line.join(" | ").trim_end());
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(text, "{}", rule.join("-+-"));
        }
    }
    RenderedTable { text, rows }
}

fn format_bytes(bytes: f64) -> String {
    let units = [(PB, "PB"), (TB, "TB"), (GB, "GB"), (MB, "MB"), (KB, "KB")];
    for (scale, unit) in units {
        if bytes >= scale {
            let v = bytes / scale;
            return if (v - v.round()).abs() < 1e-9 {
                format!("{} {unit}", v.round())
            } else {
                format!("{} {unit}", trim_float(v))
            };
        }
    }
    format!("{bytes} B")
}

fn trim_float(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Parses a byte quantity such as `205TB`, `1.728 TB`, `100MB/s` or `4096`.
/// `binary` selects 1024-based multipliers for the plain suffixes.
pub fn parse_quantity(text: &str, binary: bool) -> Result<f64, String> {
    let t = text.trim();
    let t = t.strip_suffix("/s").unwrap_or(t).trim();
    let split = t
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '_' || c == 'e' || c == '-' || c == '+'))
        .unwrap_or(t.len());
    // `e` is ambiguous with a unit letter only for "EB", which we do not accept.
    let (num, unit) = t.split_at(split);
    let value: f64 = num
        .replace('_', "")
        .parse()
        .map_err(|_| format!("invalid number `{num}`"))?;
    let base: f64 = if binary { 1024.0 } else { 1000.0 };
    let mult = match unit.trim().to_ascii_uppercase().as_str() {
        "" | "B" => 1.0,
        "K" | "KB" => base,
        "M" | "MB" => base.powi(2),
        "G" | "GB" => base.powi(3),
        "T" | "TB" => base.powi(4),
        "P" | "PB" => base.powi(5),
        "KIB" => 1024.0,
        "MIB" => 1024f64.powi(2),
        "GIB" => 1024f64.powi(3),
        "TIB" => 1024f64.powi(4),
        "PIB" => 1024f64.powi(5),
        other => return Err(format!("unknown unit `{other}`")),
    };
    Ok(value * mult)
}

/// Parses the line-oriented `key=value` spec format. `#` starts a comment.
///
/// Keys: `name`, `year`, `ram`, `storage`, `ratio`, `device_size`,
/// `device_bandwidth`, `units` (`decimal` or `binary`). A blank line or a
/// line `---` separates multiple specs.
pub fn parse_spec_file(text: &str) -> Result<Vec<SystemSpec>, FillTimeError> {
    let mut specs = Vec::new();
    let mut fields: Vec<(usize, String, String)> = Vec::new();
    let lines: Vec<&str> = text.lines().collect();
    for (idx, raw) in lines.iter().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line == "---" {
            if !fields.is_empty() {
                specs.push(spec_from_fields(&fields)?);
                fields.clear();
            }
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| FillTimeError::Parse {
            line: idx + 1,
            msg: format!("expected key=value, got `{line}`"),
        })?;
        fields.push((idx + 1, k.trim().to_ascii_lowercase(), v.trim().to_string()));
    }
    if !fields.is_empty() {
        specs.push(spec_from_fields(&fields)?);
    }
    Ok(specs)
}

fn spec_from_fields(fields: &[(usize, String, String)]) -> Result<SystemSpec, FillTimeError> {
    let binary = fields
        .iter()
        .find(|(_, k, _)| k == "units")
        .map(|(line, _, v)| match v.as_str() {
            "decimal" => Ok(false),
            "binary" => Ok(true),
            other => Err(FillTimeError::Parse { line: *line, msg: format!("unknown units `{other}`") }),
        })
        .transpose()?
        .unwrap_or(false);
    let mut spec = SystemSpec {
        name: String::from("unnamed"),
        year: None,
        storage_ram: None,
        storage_total: None,
        ratio: None,
        device_size: 0.0,
        device_bandwidth: 0.0,
    };
    let mut have_size = false;
    let mut have_bw = false;
    for (line, key, value) in fields {
        let err = |msg: String| FillTimeError::Parse { line: *line, msg };
        let qty = |v: &str| parse_quantity(v, binary).map_err(err);
        match key.as_str() {
            "name" => spec.name = value.clone(),
            "year" => spec.year = Some(value.parse().map_err(|_| err(format!("invalid year `{value}`")))?),
            "ram" => spec.storage_ram = optional(value).map(qty).transpose()?,
            "storage" => spec.storage_total = optional(value).map(qty).transpose()?,
            "ratio" => {
                spec.ratio = optional(value)
                    .map(|v| v.parse::<f64>().map_err(|_| err(format!("invalid ratio `{v}`"))))
                    .transpose()?
            }
            "device_size" => {
                spec.device_size = qty(value)?;
                have_size = true;
            }
            "device_bandwidth" => {
                spec.device_bandwidth = qty(value)?;
                have_bw = true;
            }
            "units" => {}
            other => return Err(err(format!("unknown key `{other}`"))),
        }
    }
    let last_line = fields.last().map_or(0, |f| f.0);
    if !have_size || !have_bw {
        return Err(FillTimeError::Parse {
            line: last_line,
            msg: "device_size and device_bandwidth are required".into(),
        });
    }
    Ok(spec)
}

fn optional(v: &str) -> Option<&str> {
    match v {
        "" | "??" => None,
        other => Some(other),
    }
}
