//! Observation records, covariates and CSV ingestion.
//!
//! A subject's follow-up is the tuple `(v0, l, r, delta_i, t, delta_d)`: entry
//! visit, last visit seen healthy, diagnosis visit (if diagnosed), diagnosis
//! flag, time of death or end of follow-up, and death flag. Times are numeric
//! years. A diagnosis at the death time (`r == t`) is accepted.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IdmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub id: String,
    pub v0: f64,
    pub l: f64,
    pub r: Option<f64>,
    pub delta_i: bool,
    pub t: f64,
    pub delta_d: bool,
}

/// The four follow-up patterns that determine a subject's likelihood term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LikelihoodCase {
    /// Diagnosed, alive at the end of follow-up.
    IllCensored,
    /// Diagnosed, then died.
    IllDied,
    /// Never diagnosed, alive at the end of follow-up.
    HealthyCensored,
    /// Never diagnosed, died.
    HealthyDied,
}

impl LikelihoodCase {
    pub fn is_diagnosed(self) -> bool {
        matches!(self, LikelihoodCase::IllCensored | LikelihoodCase::IllDied)
    }

    pub fn died(self) -> bool {
        matches!(self, LikelihoodCase::IllDied | LikelihoodCase::HealthyDied)
    }
}

pub fn classify_case(rec: &ObservationRecord) -> LikelihoodCase {
    match (rec.delta_i, rec.delta_d) {
        (true, false) => LikelihoodCase::IllCensored,
        (true, true) => LikelihoodCase::IllDied,
        (false, false) => LikelihoodCase::HealthyCensored,
        (false, true) => LikelihoodCase::HealthyDied,
    }
}

impl ObservationRecord {
    pub fn case(&self) -> LikelihoodCase {
        classify_case(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| IdmError::InvalidRecord {
            row: self.id.clone(),
            field: field.to_string(),
            reason,
        };
        for (name, value) in [("v0", self.v0), ("l", self.l), ("t", self.t)] {
            if !value.is_finite() || value < 0.0 {
                return Err(bad(name, format!("{value} is not a finite non-negative time")));
            }
        }
        if self.v0 > self.l {
            return Err(bad("l", format!("l = {} precedes entry v0 = {}", self.l, self.v0)));
        }
        match (self.delta_i, self.r) {
            (true, None) => return Err(bad("r", "diagnosed subject has no diagnosis time".into())),
            (false, Some(r)) => {
                return Err(bad("r", format!("undiagnosed subject carries r = {r}")));
            }
            (true, Some(r)) => {
                if !r.is_finite() || r < 0.0 {
                    return Err(bad("r", format!("{r} is not a finite non-negative time")));
                }
                if r <= self.l {
                    return Err(bad("r", format!("r = {r} does not exceed l = {}", self.l)));
                }
                if r > self.t {
                    return Err(bad("r", format!("r = {r} exceeds t = {}", self.t)));
                }
            }
            (false, None) => {
                if self.l > self.t {
                    return Err(bad("t", format!("t = {} precedes l = {}", self.t, self.l)));
                }
            }
        }
        Ok(())
    }
}

/// Per-column centering and scaling constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    pub fn apply_row(&self, row: &mut [f64]) {
        for ((x, m), s) in row.iter_mut().zip(&self.means).zip(&self.sds) {
            *x = (*x - m) / s;
        }
    }
}

/// Dense row-major covariate matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateMatrix {
    pub n_subjects: usize,
    pub p: usize,
    pub values: Vec<f64>,
    pub column_names: Vec<String>,
    pub standardized: bool,
}

impl CovariateMatrix {
    pub fn new(n_subjects: usize, p: usize, values: Vec<f64>, column_names: Vec<String>) -> Result<Self> {
        if values.len() != n_subjects * p {
            return Err(IdmError::InvalidInput(format!(
                "covariate buffer has {} values, expected {n_subjects} x {p}",
                values.len()
            )));
        }
        if column_names.len() != p {
            return Err(IdmError::InvalidInput(format!(
                "{} column names for {p} covariates",
                column_names.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(IdmError::InvalidInput(format!(
                "non-finite covariate at row {}, column {}",
                pos / p.max(1),
                pos % p.max(1)
            )));
        }
        Ok(Self {
            n_subjects,
            p,
            values,
            column_names,
            standardized: false,
        })
    }

    pub fn default_names(p: usize) -> Vec<String> {
        (1..=p).map(|j| format!("z{j}")).collect()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.p..(i + 1) * self.p]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.p + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_subjects).map(|i| self.get(i, j)).collect()
    }

    /// Sample mean and (n - 1) standard deviation of every column.
    pub fn column_moments(&self) -> Standardization {
        let n = self.n_subjects as f64;
        let mut means = vec![0.0; self.p];
        for i in 0..self.n_subjects {
            for (m, x) in means.iter_mut().zip(self.row(i)) {
                *m += x;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut sds = vec![0.0; self.p];
        for i in 0..self.n_subjects {
            for ((s, x), m) in sds.iter_mut().zip(self.row(i)).zip(&means) {
                *s += (x - m) * (x - m);
            }
        }
        sds.iter_mut().for_each(|s| *s = (*s / (n - 1.0)).sqrt());
        Standardization { means, sds }
    }

    /// Centers and scales every column in place and returns the constants used.
    pub fn standardize(&mut self) -> Result<Standardization> {
        if self.n_subjects < 2 {
            return Err(IdmError::InvalidInput(
                "standardization needs at least two subjects".into(),
            ));
        }
        let constants = self.column_moments();
        if let Some(j) = constants.sds.iter().position(|&s| !(s > 0.0)) {
            return Err(IdmError::InvalidInput(format!(
                "covariate `{}` is constant and cannot be standardized",
                self.column_names[j]
            )));
        }
        self.apply(&constants);
        Ok(constants)
    }

    pub fn apply(&mut self, constants: &Standardization) {
        let p = self.p;
        for row in self.values.chunks_mut(p.max(1)) {
            constants.apply_row(row);
        }
        self.standardized = true;
    }

    pub fn select_rows(&self, rows: &[usize]) -> CovariateMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.p);
        for &i in rows {
            values.extend_from_slice(self.row(i));
        }
        CovariateMatrix {
            n_subjects: rows.len(),
            p: self.p,
            values,
            column_names: self.column_names.clone(),
            standardized: self.standardized,
        }
    }
}

/// Records and covariates, aligned by row. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<ObservationRecord>,
    pub covariates: CovariateMatrix,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(records: Vec<ObservationRecord>, covariates: CovariateMatrix) -> Result<Self> {
        if records.len() != covariates.n_subjects {
            return Err(IdmError::InvalidInput(format!(
                "{} records but {} covariate rows",
                records.len(),
                covariates.n_subjects
            )));
        }
        for rec in &records {
            rec.validate()?;
        }
        Ok(Self {
            records,
            covariates,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.p
    }

    /// Rows picked by index, with repetition allowed (bootstrap resamples).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            records: rows.iter().map(|&i| self.records[i].clone()).collect(),
            covariates: self.covariates.select_rows(rows),
            standardization: self.standardization.clone(),
        }
    }

    pub fn case_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for rec in &self.records {
            let idx = match rec.case() {
                LikelihoodCase::IllCensored => 0,
                LikelihoodCase::IllDied => 1,
                LikelihoodCase::HealthyCensored => 2,
                LikelihoodCase::HealthyDied => 3,
            };
            counts[idx] += 1;
        }
        counts
    }
}

/// Column names used to locate the follow-up fields in a CSV header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub id: String,
    pub v0: String,
    pub l: String,
    pub r: String,
    pub delta_i: String,
    pub t: String,
    pub delta_d: String,
    /// Covariate columns; `None` takes every remaining column in header order.
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            v0: "v0".into(),
            l: "l".into(),
            r: "r".into(),
            delta_i: "delta_i".into(),
            t: "t".into(),
            delta_d: "delta_d".into(),
            covariates: None,
        }
    }
}

/// How covariates are scaled when a dataset is loaded.
#[derive(Debug, Clone, PartialEq)]
pub enum Scaling {
    Raw,
    /// Estimate constants from the file itself.
    Fit,
    /// Reuse constants from a training set.
    Apply(Standardization),
}

pub fn load_dataset(path: &Path, schema: &CsvSchema, standardize: bool) -> Result<Dataset> {
    let scaling = if standardize { Scaling::Fit } else { Scaling::Raw };
    load_dataset_scaled(path, schema, scaling)
}

pub fn load_dataset_scaled(path: &Path, schema: &CsvSchema, scaling: Scaling) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| IdmError::io(path, e))?;
    read_dataset(file, schema, scaling)
}

pub fn read_dataset<R: std::io::Read>(reader: R, schema: &CsvSchema, scaling: Scaling) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IdmError::MissingColumn(name.to_string()))
    };
    let idx_id = find(&schema.id)?;
    let idx_v0 = find(&schema.v0)?;
    let idx_l = find(&schema.l)?;
    let idx_r = find(&schema.r)?;
    let idx_di = find(&schema.delta_i)?;
    let idx_t = find(&schema.t)?;
    let idx_dd = find(&schema.delta_d)?;
    let reserved = [idx_id, idx_v0, idx_l, idx_r, idx_di, idx_t, idx_dd];
    let cov_idx: Vec<usize> = match &schema.covariates {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|i| !reserved.contains(i)).collect(),
    };
    if cov_idx.is_empty() {
        return Err(IdmError::MissingColumn("at least one covariate column".into()));
    }
    let column_names: Vec<String> = cov_idx.iter().map(|&i| headers[i].to_string()).collect();

    let mut records = Vec::new();
    let mut values = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let id = row.get(idx_id).unwrap_or("").to_string();
        let label = if id.is_empty() { format!("#{}", line + 1) } else { id.clone() };
        let cell = |idx: usize| row.get(idx).unwrap_or("");
        let num = |idx: usize| -> Result<f64> {
            let raw = cell(idx);
            raw.parse::<f64>().map_err(|_| IdmError::Parse {
                row: label.clone(),
                field: headers[idx].to_string(),
                value: raw.to_string(),
            })
        };
        let flag = |idx: usize| -> Result<bool> {
            match cell(idx) {
                "1" | "1.0" | "true" | "TRUE" | "True" => Ok(true),
                "0" | "0.0" | "false" | "FALSE" | "False" => Ok(false),
                other => Err(IdmError::Parse {
                    row: label.clone(),
                    field: headers[idx].to_string(),
                    value: other.to_string(),
                }),
            }
        };
        let r = match cell(idx_r) {
            "" | "NA" | "na" | "NaN" => None,
            _ => Some(num(idx_r)?),
        };
        let rec = ObservationRecord {
            id: label.clone(),
            v0: num(idx_v0)?,
            l: num(idx_l)?,
            r,
            delta_i: flag(idx_di)?,
            t: num(idx_t)?,
            delta_d: flag(idx_dd)?,
        };
        rec.validate()?;
        records.push(rec);
        for &j in &cov_idx {
            let v = num(j)?;
            if !v.is_finite() {
                return Err(IdmError::InvalidRecord {
                    row: label.clone(),
                    field: headers[j].to_string(),
                    reason: "covariate is not finite".into(),
                });
            }
            values.push(v);
        }
    }
    let n = records.len();
    let mut covariates = CovariateMatrix::new(n, cov_idx.len(), values, column_names)?;
    let standardization = match scaling {
        Scaling::Raw => None,
        Scaling::Fit => Some(covariates.standardize()?),
        Scaling::Apply(constants) => {
            if constants.means.len() != covariates.p {
                return Err(IdmError::InvalidInput(format!(
                    "standardization has {} columns, data has {}",
                    constants.means.len(),
                    covariates.p
                )));
            }
            covariates.apply(&constants);
            Some(constants)
        }
    };
    Ok(Dataset {
        records,
        covariates,
        standardization,
    })
}

fn fmt_time(x: f64) -> String {
    format!("{x}")
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| IdmError::io(path, e))?;
    write_dataset_to(file, data)
}

pub fn write_dataset_to<W: std::io::Write>(writer: W, data: &Dataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["id", "v0", "l", "r", "delta_i", "t", "delta_d"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(data.covariates.column_names.iter().cloned());
    wtr.write_record(&header)?;
    for (i, rec) in data.records.iter().enumerate() {
        let mut row = vec![
            rec.id.clone(),
            fmt_time(rec.v0),
            fmt_time(rec.l),
            rec.r.map(fmt_time).unwrap_or_default(),
            (rec.delta_i as u8).to_string(),
            fmt_time(rec.t),
            (rec.delta_d as u8).to_string(),
        ];
        row.extend(data.covariates.row(i).iter().map(|v| format!("{v}")));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| IdmError::io("<csv writer>", e))?;
    Ok(())
}

/// Follow-up with the illness onset time known exactly (when it happened
/// before the end of follow-up).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactRecord {
    pub id: String,
    pub v0: f64,
    pub onset: Option<f64>,
    pub t: f64,
    pub delta_d: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactDataset {
    pub records: Vec<ExactRecord>,
    pub covariates: CovariateMatrix,
}

impl ExactDataset {
    pub fn new(records: Vec<ExactRecord>, covariates: CovariateMatrix) -> Result<Self> {
        if records.len() != covariates.n_subjects {
            return Err(IdmError::InvalidInput("records and covariates are misaligned".into()));
        }
        for rec in &records {
            let bad = |reason: String| IdmError::InvalidRecord {
                row: rec.id.clone(),
                field: "onset".into(),
                reason,
            };
            if let Some(u) = rec.onset {
                if !(u > rec.v0 && u <= rec.t) {
                    return Err(bad(format!("onset {u} outside ({}, {}]", rec.v0, rec.t)));
                }
            }
            if !(rec.t >= rec.v0) {
                return Err(bad(format!("t = {} precedes entry {}", rec.t, rec.v0)));
            }
        }
        Ok(Self { records, covariates })
    }
}

/// Event type in the two-transition competing-risks comparator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhmCause {
    None,
    Illness,
    Death,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhmRecord {
    pub id: String,
    pub time: f64,
    pub cause: PhmCause,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhmDataset {
    pub records: Vec<PhmRecord>,
    pub covariates: CovariateMatrix,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(csv: &str) -> Result<Dataset> {
        read_dataset(csv.as_bytes(), &CsvSchema::default(), Scaling::Raw)
    }

    const HEADER: &str = "id,v0,l,r,delta_i,t,delta_d,z1\n";

    #[test]
    fn ill_censored_row() {
        let d = parse(&format!("{HEADER}s1,0,4,6,1,9,0,0.5\n")).unwrap();
        assert_eq!(d.records[0].case(), LikelihoodCase::IllCensored);
        assert_eq!(d.records[0].r, Some(6.0));
    }

    #[test]
    fn healthy_died_row_with_empty_r() {
        let d = parse(&format!("{HEADER}s2,0,7,,0,7.5,1,1.0\n")).unwrap();
        assert_eq!(d.records[0].case(), LikelihoodCase::HealthyDied);
        assert_eq!(d.records[0].r, None);
    }

    #[test]
    fn r_before_l_names_the_row() {
        let err = parse(&format!("{HEADER}s3,0,4,3,1,9,0,0.1\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("s3"), "{msg}");
        assert!(matches!(err, IdmError::InvalidRecord { ref field, .. } if field == "r"));
    }

    #[test]
    fn unparsable_cell() {
        let err = parse(&format!("{HEADER}s4,0,abc,,0,9,0,0.1\n")).unwrap_err();
        assert!(matches!(err, IdmError::Parse { ref field, .. } if field == "l"));
    }

    #[test]
    fn missing_column() {
        let err = parse("id,v0,l,r,delta_i,t\ns1,0,1,,0,2\n").unwrap_err();
        assert!(matches!(err, IdmError::MissingColumn(_)));
    }

    #[test]
    fn missing_file() {
        let err = load_dataset(Path::new("/nonexistent/x.csv"), &CsvSchema::default(), false).unwrap_err();
        assert!(matches!(err, IdmError::Io { .. }));
    }

    #[test]
    fn diagnosis_at_death_time_is_accepted() {
        let d = parse(&format!("{HEADER}s5,0,2,5,1,5,1,0.0\n")).unwrap();
        assert_eq!(d.records[0].case(), LikelihoodCase::IllDied);
    }

    #[test]
    fn classify_is_a_bijection() {
        let mut seen = std::collections::HashSet::new();
        for di in [false, true] {
            for dd in [false, true] {
                let rec = ObservationRecord {
                    id: "x".into(),
                    v0: 0.0,
                    l: 1.0,
                    r: di.then_some(2.0),
                    delta_i: di,
                    t: 3.0,
                    delta_d: dd,
                };
                let case = classify_case(&rec);
                assert_eq!(case.is_diagnosed(), di);
                assert_eq!(case.died(), dd);
                seen.insert(case);
            }
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn standardization_constants_are_reused() {
        let csv = format!("{HEADER}a,0,1,,0,2,0,1\nb,0,1,,0,2,0,2\nc,0,1,,0,2,0,6\n");
        let train = read_dataset(csv.as_bytes(), &CsvSchema::default(), Scaling::Fit).unwrap();
        let m = train.covariates.column_moments();
        assert!(m.means[0].abs() < 1e-12);
        assert!((m.sds[0] - 1.0).abs() < 1e-12);
        let consts = train.standardization.clone().unwrap();
        let test = read_dataset(csv.as_bytes(), &CsvSchema::default(), Scaling::Apply(consts)).unwrap();
        assert_eq!(test.covariates.values, train.covariates.values);
    }

    #[test]
    fn constant_column_cannot_be_standardized() {
        let csv = format!("{HEADER}a,0,1,,0,2,0,1\nb,0,1,,0,2,0,1\n");
        assert!(read_dataset(csv.as_bytes(), &CsvSchema::default(), Scaling::Fit).is_err());
    }
}
