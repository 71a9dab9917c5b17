//! Longitudinal data containers, CSV ingestion and the index-direction
//! normalization shared by every estimator.
//!
//! Data are stored in long form: one [`SubjectBlock`] per subject holding that
//! subject's observation times, responses, linear covariates `Z` (`m_i × d`)
//! and index covariates `X` (`m_i × p`). The number of observations `m_i`
//! varies across subjects.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Components with magnitude at or below this are treated as zero when
/// picking the sign of a direction vector.
pub const NONZERO_THRESHOLD: f64 = 1e-12;

/// Observations of one subject, sorted by time.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectBlock {
    pub id: String,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    /// `m_i × d` linear covariates.
    pub z: DMatrix<f64>,
    /// `m_i × p` index covariates.
    pub x: DMatrix<f64>,
}

impl SubjectBlock {
    pub fn new(
        id: impl Into<String>,
        times: Vec<f64>,
        y: Vec<f64>,
        z: DMatrix<f64>,
        x: DMatrix<f64>,
    ) -> Result<Self> {
        let id = id.into();
        let m = times.len();
        if y.len() != m || z.nrows() != m || x.nrows() != m {
            return Err(Error::DimensionMismatch(format!(
                "subject {id}: times {m}, y {}, z rows {}, x rows {}",
                y.len(),
                z.nrows(),
                x.nrows()
            )));
        }
        let mut block = SubjectBlock { id, times, y, z, x };
        block.sort_by_time();
        Ok(block)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Stable sort of all rows by observation time.
    pub fn sort_by_time(&mut self) {
        let m = self.times.len();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| self.times[a].total_cmp(&self.times[b]));
        if order.iter().enumerate().all(|(k, &o)| k == o) {
            return;
        }
        self.times = order.iter().map(|&k| self.times[k]).collect();
        self.y = order.iter().map(|&k| self.y[k]).collect();
        self.z = self.z.select_rows(order.iter());
        self.x = self.x.select_rows(order.iter());
    }

    /// Single-index values `X_ij' theta` for this subject.
    pub fn index(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|j| (0..theta.len()).map(|k| self.x[(j, k)] * theta[k]).sum())
            .collect()
    }

    /// Linear predictor part `Z_ij' beta`.
    pub fn linear_part(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|j| (0..beta.len()).map(|k| self.z[(j, k)] * beta[k]).sum())
            .collect()
    }
}

/// A collection of subjects with common covariate dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    pub subjects: Vec<SubjectBlock>,
    pub d: usize,
    pub p: usize,
    pub time_domain: (f64, f64),
}

impl LongitudinalDataset {
    /// Builds a dataset, sorting each subject by time. Covariate widths are
    /// taken from the first subject; use [`validate`] to check consistency.
    pub fn new(mut subjects: Vec<SubjectBlock>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for s in &mut subjects {
            s.sort_by_time();
        }
        let d = subjects[0].z.ncols();
        let p = subjects[0].x.ncols();
        let time_domain = time_span(&subjects);
        Ok(LongitudinalDataset { subjects, d, p, time_domain })
    }

    /// Number of subjects `n`.
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    /// Total number of observations `T_n`.
    pub fn total_obs(&self) -> usize {
        self.subjects.iter().map(SubjectBlock::len).sum()
    }

    /// Per-subject smoothing weights `1 / (n m_i)`.
    pub fn subject_weights(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.subjects.iter().map(|s| 1.0 / (n * s.len() as f64)).collect()
    }

    /// Copy of the dataset with subject `i` removed.
    pub fn without_subject(&self, i: usize) -> Result<Self> {
        if self.n() < 2 {
            return Err(Error::EmptyDataset);
        }
        let mut subjects = self.subjects.clone();
        subjects.remove(i);
        let time_domain = time_span(&subjects);
        Ok(LongitudinalDataset { subjects, d: self.d, p: self.p, time_domain })
    }

    /// Copy of the dataset with `block` inserted at position `i`.
    pub fn with_subject(&self, i: usize, block: SubjectBlock) -> Self {
        let mut subjects = self.subjects.clone();
        subjects.insert(i, block);
        let time_domain = time_span(&subjects);
        LongitudinalDataset { subjects, d: self.d, p: self.p, time_domain }
    }

    /// All index values `X_ij' theta`, subject-major.
    pub fn pooled_index(&self, theta: &[f64]) -> Vec<f64> {
        self.subjects.iter().flat_map(|s| s.index(theta)).collect()
    }
}

fn time_span(subjects: &[SubjectBlock]) -> (f64, f64) {
    subjects
        .iter()
        .flat_map(|s| s.times.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)))
}

/// Regression coefficients with a unit-norm, sign-fixed index direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
}

impl ModelParameters {
    /// Builds parameters, normalizing `theta`.
    pub fn new(beta: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        let theta = normalize_theta(&theta)?;
        Ok(ModelParameters { beta, theta })
    }

    /// Splits a concatenated `(beta, theta)` vector, normalizing `theta`.
    pub fn from_stacked(x: &[f64], d: usize) -> Result<Self> {
        Self::new(x[..d].to_vec(), x[d..].to_vec())
    }

    pub fn stacked(&self) -> Vec<f64> {
        self.beta.iter().chain(self.theta.iter()).copied().collect()
    }

    pub fn d(&self) -> usize {
        self.beta.len()
    }

    pub fn p(&self) -> usize {
        self.theta.len()
    }
}

/// Scales `v` to unit length and flips its sign so that the first component
/// with magnitude above [`NONZERO_THRESHOLD`] is positive.
pub fn normalize_theta(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > NONZERO_THRESHOLD) {
        return Err(Error::DegenerateDirection(norm));
    }
    let mut out: Vec<f64> = v.iter().map(|x| x / norm).collect();
    let leading = out.iter().copied().find(|x| x.abs() > NONZERO_THRESHOLD);
    if leading.is_some_and(|x| x < 0.0) {
        out.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(out)
}

/// One invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptySubject { subject: String },
    NonFinite { subject: String, row: usize, field: &'static str },
    DimensionMismatch { subject: String, field: &'static str, expected: usize, found: usize },
    UnsortedTimes { subject: String },
    OutsideTimeDomain { subject: String, row: usize },
    NoSubjects,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Non-fatal observations, e.g. repeated observation times.
    pub notes: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate(ds: &LongitudinalDataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    if ds.subjects.is_empty() {
        report.violations.push(Violation::NoSubjects);
    }
    let (lo, hi) = ds.time_domain;
    for s in &ds.subjects {
        let id = s.id.clone();
        let m = s.times.len();
        if m == 0 {
            report.violations.push(Violation::EmptySubject { subject: id.clone() });
        }
        for (field, found) in [("y", s.y.len()), ("z rows", s.z.nrows()), ("x rows", s.x.nrows())] {
            if found != m {
                report.violations.push(Violation::DimensionMismatch {
                    subject: id.clone(),
                    field,
                    expected: m,
                    found,
                });
            }
        }
        if s.z.ncols() != ds.d {
            report.violations.push(Violation::DimensionMismatch {
                subject: id.clone(),
                field: "z columns",
                expected: ds.d,
                found: s.z.ncols(),
            });
        }
        if s.x.ncols() != ds.p {
            report.violations.push(Violation::DimensionMismatch {
                subject: id.clone(),
                field: "x columns",
                expected: ds.p,
                found: s.x.ncols(),
            });
        }
        for (row, &t) in s.times.iter().enumerate() {
            if !t.is_finite() {
                report.violations.push(Violation::NonFinite { subject: id.clone(), row, field: "time" });
            } else if t < lo || t > hi {
                report.violations.push(Violation::OutsideTimeDomain { subject: id.clone(), row });
            }
        }
        for (row, y) in s.y.iter().enumerate() {
            if !y.is_finite() {
                report.violations.push(Violation::NonFinite { subject: id.clone(), row, field: "y" });
            }
        }
        for (field, mat) in [("z", &s.z), ("x", &s.x)] {
            for row in 0..mat.nrows() {
                if mat.row(row).iter().any(|v| !v.is_finite()) {
                    report.violations.push(Violation::NonFinite { subject: id.clone(), row, field });
                }
            }
        }
        if s.times.windows(2).any(|w| w[0] > w[1]) {
            report.violations.push(Violation::UnsortedTimes { subject: id.clone() });
        }
        let dups = s.times.windows(2).filter(|w| w[0] == w[1]).count();
        if dups > 0 {
            report.notes.push(format!("subject {id}: {dups} repeated observation time(s)"));
        }
    }
    report
}

/// Column names used to read a long-format CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub subject: String,
    pub time: String,
    pub y: String,
    pub z: Vec<String>,
    pub x: Vec<String>,
}

impl CsvSchema {
    /// `subject,time,y,z1..zd,x1..xp`.
    pub fn standard(d: usize, p: usize) -> Self {
        CsvSchema {
            subject: "subject".into(),
            time: "time".into(),
            y: "y".into(),
            z: (1..=d).map(|k| format!("z{k}")).collect(),
            x: (1..=p).map(|k| format!("x{k}")).collect(),
        }
    }

    /// Standard schema with `d` and `p` taken from the runs `z1, z2, ..` and
    /// `x1, x2, ..` present in `header`.
    pub fn infer<'a>(header: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let names: Vec<&str> = header.into_iter().map(str::trim).collect();
        let run = |prefix: &str| (1..).take_while(|k| names.contains(&format!("{prefix}{k}").as_str())).count();
        let (d, p) = (run("z"), run("x"));
        if d == 0 || p < 2 {
            return Err(Error::Schema(format!(
                "expected columns z1.. (at least one) and x1.. (at least two), found {d} and {p}"
            )));
        }
        Ok(CsvSchema::standard(d, p))
    }
}

/// Reads a CSV whose header follows the standard naming.
pub fn load_csv_standard(path: impl AsRef<Path>) -> Result<LongitudinalDataset> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let schema = CsvSchema::infer(rdr.headers()?.iter())?;
    load_csv(path, &schema)
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<LongitudinalDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

/// Reads a long-format CSV. Subjects keep their order of first appearance.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let subject_col = column(&schema.subject)?;
    let time_col = column(&schema.time)?;
    let y_col = column(&schema.y)?;
    let z_cols = schema.z.iter().map(|c| column(c)).collect::<Result<Vec<_>>>()?;
    let x_cols = schema.x.iter().map(|c| column(c)).collect::<Result<Vec<_>>>()?;
    let (d, p) = (z_cols.len(), x_cols.len());

    struct Rows {
        times: Vec<f64>,
        y: Vec<f64>,
        z: Vec<f64>,
        x: Vec<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Rows> = HashMap::new();

    for (k, record) in rdr.records().enumerate() {
        // header is line 1
        let line = k + 2;
        let record = record?;
        let cell = |col: usize| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row: line,
                message: format!("column '{}': cannot parse '{raw}' as a number", &headers[col]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row: line, message: format!("column '{}': non-finite value", &headers[col]) });
            }
            Ok(v)
        };
        let id = record
            .get(subject_col)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Parse { row: line, message: "missing subject id".into() })?
            .to_string();
        let t = cell(time_col)?;
        let y = cell(y_col)?;
        let zs = z_cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>()?;
        let xs = x_cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>()?;
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            Rows { times: Vec::new(), y: Vec::new(), z: Vec::new(), x: Vec::new() }
        });
        entry.times.push(t);
        entry.y.push(y);
        entry.z.extend(zs);
        entry.x.extend(xs);
    }
    if order.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let subjects = order
        .into_iter()
        .map(|id| {
            let rows = groups.remove(&id).expect("grouped subject");
            let m = rows.times.len();
            SubjectBlock::new(
                id,
                rows.times,
                rows.y,
                DMatrix::from_row_slice(m, d, &rows.z),
                DMatrix::from_row_slice(m, p, &rows.x),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = LongitudinalDataset::new(subjects)?;
    ds.d = d;
    ds.p = p;
    Ok(ds)
}

/// Writes the dataset with the standard `subject,time,y,z..,x..` header.
pub fn write_csv<W: Write>(ds: &LongitudinalDataset, writer: W) -> Result<()> {
    let schema = CsvSchema::standard(ds.d, ds.p);
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![schema.subject.clone(), schema.time.clone(), schema.y.clone()];
    header.extend(schema.z.iter().cloned());
    header.extend(schema.x.iter().cloned());
    wtr.write_record(&header)?;
    for s in &ds.subjects {
        for j in 0..s.len() {
            let mut rec = vec![s.id.clone(), s.times[j].to_string(), s.y[j].to_string()];
            rec.extend(s.z.row(j).iter().map(|v| v.to_string()));
            rec.extend(s.x.row(j).iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_csv(ds: &LongitudinalDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(ds, std::io::BufWriter::new(file))
}
