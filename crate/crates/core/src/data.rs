//! Cohort types, validation and the line-delimited cohort file format.
//!
//! A cohort file is UTF-8 JSON lines. The first line is a header record
//! carrying `schema_version`, `d_tab`, `d_img` and optional generator
//! provenance; every following line is one sample. Oracle fields are stored
//! on the sample line under the `oracle.` namespace.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::jsonfmt;
use crate::tensor::Matrix;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_D_TAB: usize = 17;
pub const DEFAULT_D_IMG: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub x_tab: Vec<f64>,
    pub x_img: Vec<f64>,
    /// 0 = conservative, 1 = surgery.
    pub t: u8,
    /// 1 = favorable.
    pub y: u8,
}

/// Ground truth known only for synthetic samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleInfo {
    pub y0_prob: f64,
    pub y1_prob: f64,
    pub y0: u8,
    pub y1: u8,
    pub propensity: f64,
}

impl OracleInfo {
    pub fn outcome(&self, t: u8) -> u8 {
        if t == 0 {
            self.y0
        } else {
            self.y1
        }
    }

    pub fn effect(&self) -> f64 {
        self.y1_prob - self.y0_prob
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub samples: Vec<Sample>,
    pub oracle: Option<Vec<OracleInfo>>,
    pub d_tab: usize,
    pub d_img: usize,
    pub schema_version: u32,
    /// Free-form provenance stored in the file header (e.g. the generator spec).
    pub provenance: Option<Value>,
}

impl Cohort {
    pub fn new(samples: Vec<Sample>, d_tab: usize, d_img: usize) -> Self {
        Self {
            samples,
            oracle: None,
            d_tab,
            d_img,
            schema_version: SCHEMA_VERSION,
            provenance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_oracle(&self) -> bool {
        self.oracle.is_some()
    }

    /// Copy of the cohort with oracle information removed.
    pub fn blind(&self) -> Self {
        Self {
            oracle: None,
            ..self.clone()
        }
    }

    /// Sub-cohort made of the given sample indices, oracle included.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            oracle: self
                .oracle
                .as_ref()
                .map(|o| idx.iter().map(|&i| o[i].clone()).collect()),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Self {
        Self {
            samples: Vec::new(),
            oracle: None,
            d_tab: self.d_tab,
            d_img: self.d_img,
            schema_version: self.schema_version,
            provenance: self.provenance.clone(),
        }
    }

    pub fn tab_matrix(&self) -> Matrix {
        let data = self.samples.iter().flat_map(|s| s.x_tab.iter().copied()).collect();
        Matrix::from_vec(self.len(), self.d_tab, data)
    }

    pub fn img_matrix(&self) -> Matrix {
        let data = self.samples.iter().flat_map(|s| s.x_img.iter().copied()).collect();
        Matrix::from_vec(self.len(), self.d_img, data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// `None` for cohort-level violations.
    pub sample_id: Option<String>,
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, sample_id: Option<&str>, field: &str, message: impl Into<String>) {
        self.violations.push(Violation {
            sample_id: sample_id.map(str::to_owned),
            field: field.to_owned(),
            message: message.into(),
        });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for v in &self.violations {
            match &v.sample_id {
                Some(id) => writeln!(f, "sample {id}: {}: {}", v.field, v.message)?,
                None => writeln!(f, "cohort: {}: {}", v.field, v.message)?,
            }
        }
        Ok(())
    }
}

pub fn validate_cohort(c: &Cohort) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    for s in &c.samples {
        let id = Some(s.id.as_str());
        if !seen.insert(s.id.as_str()) {
            report.push(id, "id", "duplicate id");
        }
        if s.t > 1 {
            report.push(id, "t", format!("treatment must be 0 or 1, got {}", s.t));
        }
        if s.y > 1 {
            report.push(id, "y", format!("outcome must be 0 or 1, got {}", s.y));
        }
        if s.x_tab.len() != c.d_tab {
            report.push(
                id,
                "x_tab",
                format!("length {} does not match d_tab {}", s.x_tab.len(), c.d_tab),
            );
        }
        if s.x_img.len() != c.d_img {
            report.push(
                id,
                "x_img",
                format!("length {} does not match d_img {}", s.x_img.len(), c.d_img),
            );
        }
        if s.x_tab.iter().any(|v| !v.is_finite()) {
            report.push(id, "x_tab", "non-finite entry");
        }
        if s.x_img.iter().any(|v| !v.is_finite()) {
            report.push(id, "x_img", "non-finite entry");
        }
    }
    if let Some(oracle) = &c.oracle {
        if oracle.len() != c.samples.len() {
            report.push(
                None,
                "oracle",
                format!(
                    "oracle list has {} entries but cohort has {} samples",
                    oracle.len(),
                    c.samples.len()
                ),
            );
        }
        for (s, o) in c.samples.iter().zip(oracle) {
            let id = Some(s.id.as_str());
            for (field, p) in [("oracle.y0_prob", o.y0_prob), ("oracle.y1_prob", o.y1_prob)] {
                if !(0.0..=1.0).contains(&p) {
                    report.push(id, field, format!("probability out of [0,1]: {p}"));
                }
            }
            if !(o.propensity > 0.0 && o.propensity < 1.0) {
                report.push(
                    id,
                    "oracle.propensity",
                    format!("propensity must lie in (0,1), got {}", o.propensity),
                );
            }
            if o.y0 > 1 {
                report.push(id, "oracle.y0", format!("must be 0 or 1, got {}", o.y0));
            }
            if o.y1 > 1 {
                report.push(id, "oracle.y1", format!("must be 0 or 1, got {}", o.y1));
            }
            if s.t <= 1 && o.y0 <= 1 && o.y1 <= 1 && o.outcome(s.t) != s.y {
                report.push(id, "y", "factual outcome disagrees with oracle potential outcome");
            }
        }
    }
    report
}

#[derive(Debug, Error)]
pub enum CohortIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    Field {
        line: usize,
        field: String,
        message: String,
    },
    #[error("unsupported cohort schema version {found} (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("cohort file contains no samples")]
    Empty,
    #[error("cohort is invalid:\n{0}")]
    Invalid(ValidationReport),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Keep oracle fields when present.
    Full,
    /// Drop every `oracle.*` field.
    Blind,
}

fn sample_record(s: &Sample, o: Option<&OracleInfo>) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("id".into(), Value::from(s.id.clone()));
    m.insert("x_tab".into(), Value::from(s.x_tab.clone()));
    m.insert("x_img".into(), Value::from(s.x_img.clone()));
    m.insert("t".into(), Value::from(s.t));
    m.insert("y".into(), Value::from(s.y));
    if let Some(o) = o {
        m.insert("oracle.y0_prob".into(), Value::from(o.y0_prob));
        m.insert("oracle.y1_prob".into(), Value::from(o.y1_prob));
        m.insert("oracle.y0".into(), Value::from(o.y0));
        m.insert("oracle.y1".into(), Value::from(o.y1));
        m.insert("oracle.propensity".into(), Value::from(o.propensity));
    }
    m
}

/// Serializes a cohort to its line-delimited text form.
pub fn cohort_to_string(c: &Cohort) -> Result<String, CohortIoError> {
    let mut buf = Vec::new();
    write_cohort(c, &mut buf).map_err(|source| CohortIoError::Io {
        path: "<memory>".into(),
        source,
    })?;
    Ok(String::from_utf8(buf).expect("serializer emits UTF-8"))
}

fn write_cohort(c: &Cohort, w: &mut impl Write) -> std::io::Result<()> {
    let mut header = Map::new();
    header.insert("record".into(), Value::from("header"));
    header.insert("schema_version".into(), Value::from(c.schema_version));
    header.insert("d_tab".into(), Value::from(c.d_tab));
    header.insert("d_img".into(), Value::from(c.d_img));
    header.insert("n".into(), Value::from(c.samples.len()));
    if let Some(p) = &c.provenance {
        header.insert("provenance".into(), p.clone());
    }
    jsonfmt::write_line(w, &Value::Object(header))?;
    for (i, s) in c.samples.iter().enumerate() {
        let o = c.oracle.as_ref().and_then(|o| o.get(i));
        jsonfmt::write_line(w, &Value::Object(sample_record(s, o)))?;
    }
    Ok(())
}

pub fn save_cohort(c: &Cohort, path: impl AsRef<Path>) -> Result<(), CohortIoError> {
    let path = path.as_ref();
    let io_err = |source| CohortIoError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    write_cohort(c, &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn load_cohort(path: impl AsRef<Path>, mode: LoadMode) -> Result<Cohort, CohortIoError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| CohortIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_cohort(BufReader::new(file), mode)
}

pub fn cohort_from_str(text: &str, mode: LoadMode) -> Result<Cohort, CohortIoError> {
    read_cohort(text.as_bytes(), mode)
}

struct Header {
    schema_version: u32,
    d_tab: usize,
    d_img: usize,
    provenance: Option<Value>,
}

fn field<'a>(m: &'a Map<String, Value>, line: usize, name: &str) -> Result<&'a Value, CohortIoError> {
    m.get(name).ok_or_else(|| CohortIoError::Field {
        line,
        field: name.into(),
        message: "missing field".into(),
    })
}

fn field_err(line: usize, name: &str, message: impl Into<String>) -> CohortIoError {
    CohortIoError::Field {
        line,
        field: name.into(),
        message: message.into(),
    }
}

fn as_usize(m: &Map<String, Value>, line: usize, name: &str) -> Result<usize, CohortIoError> {
    field(m, line, name)?
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| field_err(line, name, "expected a nonnegative integer"))
}

fn as_u8(m: &Map<String, Value>, line: usize, name: &str) -> Result<u8, CohortIoError> {
    field(m, line, name)?
        .as_u64()
        .and_then(|v| u8::try_from(v).ok())
        .ok_or_else(|| field_err(line, name, "expected a small nonnegative integer"))
}

fn as_f64(m: &Map<String, Value>, line: usize, name: &str) -> Result<f64, CohortIoError> {
    field(m, line, name)?
        .as_f64()
        .ok_or_else(|| field_err(line, name, "expected a number"))
}

fn as_vec(m: &Map<String, Value>, line: usize, name: &str) -> Result<Vec<f64>, CohortIoError> {
    let arr = field(m, line, name)?
        .as_array()
        .ok_or_else(|| field_err(line, name, "expected an array of numbers"))?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_f64()
                .ok_or_else(|| field_err(line, name, format!("entry {i} is not a number")))
        })
        .collect()
}

fn parse_header(m: &Map<String, Value>, line: usize) -> Result<Header, CohortIoError> {
    match m.get("record").and_then(Value::as_str) {
        Some("header") => {}
        _ => {
            return Err(CohortIoError::Malformed {
                line,
                message: "first record must be the header (record = \"header\")".into(),
            })
        }
    }
    let version = field(m, line, "schema_version")?
        .as_u64()
        .ok_or_else(|| field_err(line, "schema_version", "expected an integer"))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(CohortIoError::Version {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(Header {
        schema_version: SCHEMA_VERSION,
        d_tab: as_usize(m, line, "d_tab")?,
        d_img: as_usize(m, line, "d_img")?,
        provenance: m.get("provenance").cloned(),
    })
}

fn parse_sample(m: &Map<String, Value>, line: usize) -> Result<(Sample, Option<OracleInfo>), CohortIoError> {
    let id = field(m, line, "id")?
        .as_str()
        .ok_or_else(|| field_err(line, "id", "expected a string"))?
        .to_owned();
    let sample = Sample {
        id,
        x_tab: as_vec(m, line, "x_tab")?,
        x_img: as_vec(m, line, "x_img")?,
        t: as_u8(m, line, "t")?,
        y: as_u8(m, line, "y")?,
    };
    let has_oracle = m.keys().any(|k| k.starts_with("oracle."));
    let oracle = if has_oracle {
        Some(OracleInfo {
            y0_prob: as_f64(m, line, "oracle.y0_prob")?,
            y1_prob: as_f64(m, line, "oracle.y1_prob")?,
            y0: as_u8(m, line, "oracle.y0")?,
            y1: as_u8(m, line, "oracle.y1")?,
            propensity: as_f64(m, line, "oracle.propensity")?,
        })
    } else {
        None
    };
    Ok((sample, oracle))
}

fn read_cohort(reader: impl BufRead, mode: LoadMode) -> Result<Cohort, CohortIoError> {
    let mut header: Option<Header> = None;
    let mut samples = Vec::new();
    let mut oracle = Vec::new();
    let mut oracle_lines = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| CohortIoError::Malformed {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| CohortIoError::Malformed {
            line: lineno,
            message: e.to_string(),
        })?;
        let Value::Object(map) = value else {
            return Err(CohortIoError::Malformed {
                line: lineno,
                message: "record is not an object".into(),
            });
        };
        if header.is_none() {
            header = Some(parse_header(&map, lineno)?);
            continue;
        }
        let (s, o) = parse_sample(&map, lineno)?;
        samples.push(s);
        if let Some(o) = o {
            oracle_lines += 1;
            oracle.push(o);
        }
    }
    let Some(header) = header else {
        return Err(CohortIoError::Empty);
    };
    if samples.is_empty() {
        return Err(CohortIoError::Empty);
    }
    let oracle = match mode {
        LoadMode::Blind => None,
        LoadMode::Full if oracle_lines == 0 => None,
        LoadMode::Full => Some(oracle),
    };
    Ok(Cohort {
        samples,
        oracle,
        d_tab: header.d_tab,
        d_img: header.d_img,
        schema_version: header.schema_version,
        provenance: header.provenance,
    })
}
