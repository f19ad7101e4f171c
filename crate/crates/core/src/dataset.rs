//! Ingestion and indexing of sparse longitudinal records.
//!
//! Records arrive as JSONL or CSV rows keyed by subject and a numeric
//! timestamp, carrying either a raw text (to be embedded later) or an
//! already-numeric vector. [`build_dataset`] groups them per subject, sorts
//! each subject's records by time (stable for ties) and attaches the static
//! covariates.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// One input row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub subject_id: String,
    pub timestamp: f64,
    pub text: Option<String>,
    pub vector: Option<Vec<f64>>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl std::str::FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(InputFormat::Jsonl),
            "csv" => Ok(InputFormat::Csv),
            other => Err(Error::Config(format!("unknown input format '{other}'"))),
        }
    }
}

/// Column / key names used when reading records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub subject_id: String,
    pub timestamp: String,
    pub text: String,
    /// JSONL array key, or a CSV column holding `;`-separated values.
    pub vector: String,
    /// CSV prefix for one-column-per-dimension layouts (`v1..vp`).
    pub vector_prefix: String,
    /// JSONL key of the optional metadata object.
    pub metadata: String,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            subject_id: "subject_id".into(),
            timestamp: "timestamp".into(),
            text: "text".into(),
            vector: "vector".into(),
            vector_prefix: "v".into(),
            metadata: "metadata".into(),
        }
    }
}

fn row_err(line: usize, message: impl Into<String>) -> Error {
    Error::Row {
        line,
        message: message.into(),
    }
}

fn finite(x: f64, line: usize) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(row_err(line, "non-finite value"))
    }
}

/// Reads records from `path` in file order.
pub fn load_records(path: &Path, format: InputFormat, schema: &Schema) -> Result<Vec<RawRecord>> {
    match format {
        InputFormat::Jsonl => {
            let reader = BufReader::new(File::open(path)?);
            parse_jsonl(reader, schema)
        }
        InputFormat::Csv => {
            let reader = csv::Reader::from_path(path)?;
            parse_csv(reader, schema)
        }
    }
}

/// Parses JSONL from any buffered reader. Blank lines are skipped.
pub fn parse_jsonl<R: BufRead>(reader: R, schema: &Schema) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| row_err(line_no, format!("invalid JSON ({e})")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| row_err(line_no, "expected a JSON object"))?;

        let subject_id = match obj.get(&schema.subject_id) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(row_err(line_no, "missing subject_id")),
        };
        let timestamp = match obj.get(&schema.timestamp) {
            Some(Value::Number(n)) => n.as_f64().unwrap_or(f64::NAN),
            Some(Value::String(s)) => s
                .trim()
                .parse::<f64>()
                .map_err(|_| row_err(line_no, "unparseable timestamp"))?,
            _ => return Err(row_err(line_no, "missing timestamp")),
        };
        if !timestamp.is_finite() {
            return Err(row_err(line_no, "non-finite timestamp"));
        }
        let text = match obj.get(&schema.text) {
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Null) | None => None,
            Some(_) => return Err(row_err(line_no, "text must be a string")),
        };
        let vector = match obj.get(&schema.vector) {
            Some(Value::Array(items)) => {
                let mut v = Vec::with_capacity(items.len());
                for item in items {
                    let x = match item {
                        Value::Number(n) => n.as_f64().unwrap_or(f64::NAN),
                        Value::String(s) => s.trim().parse::<f64>().unwrap_or(f64::NAN),
                        _ => f64::NAN,
                    };
                    v.push(finite(x, line_no)?);
                }
                Some(v)
            }
            Some(Value::Null) | None => None,
            Some(_) => return Err(row_err(line_no, "vector must be an array")),
        };
        let mut metadata = BTreeMap::new();
        if let Some(Value::Object(meta)) = obj.get(&schema.metadata) {
            for (k, v) in meta {
                let s = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                metadata.insert(k.clone(), s);
            }
        }
        if text.is_none() && vector.is_none() {
            return Err(row_err(line_no, "neither text nor vector present"));
        }
        out.push(RawRecord {
            subject_id,
            timestamp,
            text,
            vector,
            metadata,
        });
    }
    Ok(out)
}

/// Parses header-driven CSV. Vector values come either from a single
/// `schema.vector` column (`;`-separated) or from `v1..vp` columns.
/// Any other column is kept as metadata.
pub fn parse_csv<R: std::io::Read>(mut reader: csv::Reader<R>, schema: &Schema) -> Result<Vec<RawRecord>> {
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let sid_col = find(&schema.subject_id)
        .ok_or_else(|| Error::Data(format!("CSV header lacks '{}'", schema.subject_id)))?;
    let ts_col = find(&schema.timestamp)
        .ok_or_else(|| Error::Data(format!("CSV header lacks '{}'", schema.timestamp)))?;
    let text_col = find(&schema.text);
    let packed_col = find(&schema.vector);
    let mut dim_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(col, h)| {
            h.strip_prefix(schema.vector_prefix.as_str())
                .and_then(|rest| rest.parse::<usize>().ok())
                .map(|d| (d, col))
        })
        .collect();
    dim_cols.sort_unstable();
    let known: Vec<usize> = [Some(sid_col), Some(ts_col), text_col, packed_col]
        .into_iter()
        .flatten()
        .chain(dim_cols.iter().map(|&(_, c)| c))
        .collect();

    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line_no = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |c: usize| row.get(c).map(str::trim).unwrap_or("");

        let subject_id = field(sid_col);
        if subject_id.is_empty() {
            return Err(row_err(line_no, "missing subject_id"));
        }
        let ts_raw = field(ts_col);
        if ts_raw.is_empty() {
            return Err(row_err(line_no, "missing timestamp"));
        }
        let timestamp: f64 = ts_raw
            .parse()
            .map_err(|_| row_err(line_no, "unparseable timestamp"))?;
        if !timestamp.is_finite() {
            return Err(row_err(line_no, "non-finite timestamp"));
        }
        let text = text_col
            .map(field)
            .filter(|s| !s.is_empty())
            .map(str::to_string);

        let parse_val = |s: &str| -> Result<f64> {
            let x: f64 = s
                .trim()
                .parse()
                .map_err(|_| row_err(line_no, format!("unparseable value '{s}'")))?;
            finite(x, line_no)
        };
        let mut vector = None;
        if let Some(c) = packed_col {
            let raw = field(c);
            if !raw.is_empty() {
                vector = Some(raw.split(';').map(parse_val).collect::<Result<Vec<_>>>()?);
            }
        }
        if vector.is_none() && !dim_cols.is_empty() {
            let cells: Vec<&str> = dim_cols.iter().map(|&(_, c)| field(c)).collect();
            if cells.iter().any(|s| !s.is_empty()) {
                vector = Some(cells.into_iter().map(parse_val).collect::<Result<Vec<_>>>()?);
            }
        }
        if text.is_none() && vector.is_none() {
            return Err(row_err(line_no, "neither text nor vector present"));
        }
        let metadata = headers
            .iter()
            .enumerate()
            .filter(|(c, _)| !known.contains(c))
            .map(|(c, h)| (h.to_string(), field(c).to_string()))
            .collect();
        out.push(RawRecord {
            subject_id: subject_id.to_string(),
            timestamp,
            text,
            vector,
            metadata,
        });
    }
    Ok(out)
}

/// Reads a covariates CSV with a `subject_id` column and `z1..zq` columns.
pub fn load_covariates(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    parse_covariates(csv::Reader::from_path(path)?)
}

pub fn parse_covariates<R: std::io::Read>(mut reader: csv::Reader<R>) -> Result<BTreeMap<String, Vec<f64>>> {
    let headers = reader.headers()?.clone();
    let sid_col = headers
        .iter()
        .position(|h| h == "subject_id")
        .ok_or_else(|| Error::Data("covariates header lacks 'subject_id'".into()))?;
    let mut z_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(c, h)| h.strip_prefix('z').and_then(|r| r.parse().ok()).map(|d| (d, c)))
        .collect();
    z_cols.sort_unstable();
    let mut out = BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        let line_no = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let sid = row.get(sid_col).unwrap_or("").trim();
        if sid.is_empty() {
            return Err(row_err(line_no, "missing subject_id"));
        }
        let z = z_cols
            .iter()
            .map(|&(_, c)| {
                let s = row.get(c).unwrap_or("").trim();
                let x: f64 = s
                    .parse()
                    .map_err(|_| row_err(line_no, format!("unparseable covariate '{s}'")))?;
                finite(x, line_no)
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(sid.to_string(), z);
    }
    Ok(out)
}

/// One time-stamped observation of a subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    /// `None` until the record's text has been embedded.
    pub values: Option<Vec<f64>>,
    pub text: Option<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTrajectory {
    pub subject_id: String,
    pub records: Vec<Observation>,
    pub covariates: Vec<f64>,
}

impl SubjectTrajectory {
    pub fn needs_embedding(&self) -> bool {
        self.records.iter().any(|r| r.values.is_none())
    }

    /// Times and values of dimension `d` over the embedded records.
    pub fn dim_sample(&self, d: usize) -> SparseSample {
        let mut times = Vec::with_capacity(self.records.len());
        let mut values = Vec::with_capacity(self.records.len());
        for r in &self.records {
            if let Some(v) = &r.values {
                times.push(r.time);
                values.push(v[d]);
            }
        }
        SparseSample { times, values }
    }
}

/// Univariate sparse observations of one subject.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseSample {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl SparseSample {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// The canonical in-memory dataset. Subjects are ordered by `subject_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlDataset {
    pub subjects: Vec<SubjectTrajectory>,
    pub p: usize,
    pub q: usize,
    pub time_domain: (f64, f64),
}

impl SlDataset {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_records(&self) -> usize {
        self.subjects.iter().map(|s| s.records.len()).sum()
    }

    pub fn needs_embedding(&self) -> bool {
        self.subjects.iter().any(SubjectTrajectory::needs_embedding)
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }

    pub fn index_of(&self, subject_id: &str) -> Option<usize> {
        self.subjects
            .binary_search_by(|s| s.subject_id.as_str().cmp(subject_id))
            .ok()
    }

    /// Per-subject samples of dimension `d`.
    pub fn dim_samples(&self, d: usize) -> Vec<SparseSample> {
        self.subjects.iter().map(|s| s.dim_sample(d)).collect()
    }

    /// Dataset restricted to the given subject indices (kept in index order).
    /// The time domain is inherited so grids stay comparable across subsets.
    pub fn subset(&self, indices: &[usize]) -> SlDataset {
        SlDataset {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            p: self.p,
            q: self.q,
            time_domain: self.time_domain,
        }
    }

    /// Builds a dataset directly from trajectories (used by generators and
    /// re-sampling). Subjects are sorted by id; records by time.
    pub fn from_subjects(mut subjects: Vec<SubjectTrajectory>, p: usize, q: usize) -> Result<SlDataset> {
        if subjects.is_empty() {
            return Err(Error::Data("dataset has no subjects".into()));
        }
        subjects.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        let mut t_min = f64::INFINITY;
        let mut t_max = f64::NEG_INFINITY;
        for s in &mut subjects {
            if s.records.is_empty() {
                return Err(Error::Data(format!("subject {} has no records", s.subject_id)));
            }
            s.records.sort_by(|a, b| a.time.total_cmp(&b.time));
            for r in &s.records {
                t_min = t_min.min(r.time);
                t_max = t_max.max(r.time);
                if let Some(v) = &r.values {
                    if v.len() != p {
                        return Err(Error::Data(format!(
                            "inconsistent vector lengths: subject {} has p={}, expected {p}",
                            s.subject_id,
                            v.len()
                        )));
                    }
                }
            }
            if s.covariates.len() != q {
                return Err(Error::Data(format!(
                    "covariate length mismatch for subject {}: {} != {q}",
                    s.subject_id,
                    s.covariates.len()
                )));
            }
        }
        Ok(SlDataset {
            subjects,
            p,
            q,
            time_domain: (t_min, t_max),
        })
    }
}

/// Groups records into subjects and attaches covariates.
///
/// `covariates` may be empty (q = 0); otherwise every subject that appears in
/// `records` needs an entry and all entries share one length.
pub fn build_dataset(records: Vec<RawRecord>, covariates: &BTreeMap<String, Vec<f64>>) -> Result<SlDataset> {
    if records.is_empty() {
        return Err(Error::Data("no records".into()));
    }
    let mut p: Option<(usize, String)> = None;
    for r in &records {
        if let Some(v) = &r.vector {
            match &p {
                None => p = Some((v.len(), r.subject_id.clone())),
                Some((p0, first)) if *p0 != v.len() => {
                    return Err(Error::Data(format!(
                        "inconsistent vector lengths: subject {} has p={}, subject {} has p={}",
                        r.subject_id,
                        v.len(),
                        first,
                        p0
                    )))
                }
                _ => {}
            }
        }
    }
    let p = p.map(|(p, _)| p).unwrap_or(0);

    let q = covariates.values().next().map(Vec::len).unwrap_or(0);
    if let Some((sid, z)) = covariates.iter().find(|(_, z)| z.len() != q) {
        return Err(Error::Data(format!(
            "covariate length mismatch for subject {sid}: {} != {q}",
            z.len()
        )));
    }

    let mut grouped: BTreeMap<String, Vec<Observation>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.subject_id).or_default().push(Observation {
            time: r.timestamp,
            values: r.vector,
            text: r.text,
            metadata: r.metadata,
        });
    }
    let subjects = grouped
        .into_iter()
        .map(|(subject_id, mut recs)| {
            // stable: ties keep input order
            recs.sort_by(|a, b| a.time.total_cmp(&b.time));
            let covs = if q == 0 {
                Vec::new()
            } else {
                covariates
                    .get(&subject_id)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("no covariates for subject {subject_id}")))?
            };
            Ok(SubjectTrajectory {
                subject_id,
                records: recs,
                covariates: covs,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n_text_only = subjects.iter().filter(|s| s.needs_embedding()).count();
    if n_text_only > 0 {
        log::info!("{n_text_only} subject(s) have records that need embedding");
    }
    SlDataset::from_subjects(subjects, p, q)
}

/// Replaces missing vectors using `embedded`, keyed by (subject, record index).
pub fn fill_embeddings(dataset: &mut SlDataset, embedded: &HashMap<(usize, usize), Vec<f64>>, p: usize) {
    for (&(i, j), v) in embedded {
        dataset.subjects[i].records[j].values = Some(v.clone());
    }
    dataset.p = p;
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn jsonl(s: &str) -> Result<Vec<RawRecord>> {
        parse_jsonl(Cursor::new(s), &Schema::default())
    }

    #[test]
    fn jsonl_field_mapping() {
        let recs = jsonl(r#"{"subject_id":"u1","timestamp":3.0,"vector":[0.1,-0.2,0.0,0.5]}"#).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].subject_id, "u1");
        assert_eq!(recs[0].timestamp, 3.0);
        assert_eq!(recs[0].vector.as_deref(), Some(&[0.1, -0.2, 0.0, 0.5][..]));
        assert!(recs[0].text.is_none());
    }

    #[test]
    fn jsonl_missing_timestamp() {
        let err = jsonl(r#"{"subject_id":"u1","vector":[0.1]}"#).unwrap_err();
        assert_eq!(err.to_string(), "missing timestamp at line 1");
    }

    #[test]
    fn jsonl_requires_text_or_vector() {
        let err = jsonl(r#"{"subject_id":"u1","timestamp":1}"#).unwrap_err();
        assert!(err.to_string().contains("neither text nor vector"));
    }

    #[test]
    fn jsonl_metadata_kept() {
        let recs = jsonl(r#"{"subject_id":"u1","timestamp":1,"text":"ok","metadata":{"rating":5}}"#).unwrap();
        assert_eq!(recs[0].metadata.get("rating").map(String::as_str), Some("5"));
    }

    #[test]
    fn csv_non_finite_vector() {
        let data = "subject_id,timestamp,vector\nu1,1.0,0.1;NaN;0;0\n";
        let err = parse_csv(csv::Reader::from_reader(data.as_bytes()), &Schema::default()).unwrap_err();
        assert!(err.to_string().contains("non-finite value"), "{err}");
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn csv_dimension_columns_and_metadata() {
        let data = "subject_id,timestamp,v2,v1,rating\nu1,1.5,0.2,0.1,4\n";
        let recs = parse_csv(csv::Reader::from_reader(data.as_bytes()), &Schema::default()).unwrap();
        assert_eq!(recs[0].vector.as_deref(), Some(&[0.1, 0.2][..]));
        assert_eq!(recs[0].metadata["rating"], "4");
    }

    fn rec(s: &str, t: f64, v: Vec<f64>) -> RawRecord {
        RawRecord {
            subject_id: s.into(),
            timestamp: t,
            text: None,
            vector: Some(v),
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn groups_and_sorts() {
        let recs = vec![
            rec("b", 3.0, vec![1.0]),
            rec("a", 2.0, vec![2.0]),
            rec("b", 1.0, vec![3.0]),
            rec("a", 0.5, vec![4.0]),
            rec("a", 9.0, vec![5.0]),
            rec("b", 4.0, vec![6.0]),
        ];
        let ds = build_dataset(recs, &BTreeMap::new()).unwrap();
        assert_eq!(ds.n_subjects(), 2);
        assert_eq!(ds.p, 1);
        assert_eq!(ds.q, 0);
        assert_eq!(ds.time_domain, (0.5, 9.0));
        assert_eq!(ds.n_records(), 6);
        let a = &ds.subjects[0];
        assert_eq!(a.subject_id, "a");
        let times: Vec<f64> = a.records.iter().map(|r| r.time).collect();
        assert_eq!(times, vec![0.5, 2.0, 9.0]);
    }

    #[test]
    fn covariates_attach() {
        let mut cov = BTreeMap::new();
        cov.insert("u1".to_string(), vec![0.4, 0.6]);
        let ds = build_dataset(vec![rec("u1", 0.0, vec![1.0]), rec("u1", 1.0, vec![2.0])], &cov).unwrap();
        assert_eq!(ds.q, 2);
        assert_eq!(ds.subjects[0].covariates, vec![0.4, 0.6]);
    }

    #[test]
    fn missing_covariates_rejected() {
        let mut cov = BTreeMap::new();
        cov.insert("u1".to_string(), vec![0.4]);
        let err = build_dataset(vec![rec("u2", 0.0, vec![1.0])], &cov).unwrap_err();
        assert!(err.to_string().contains("u2"));
    }

    #[test]
    fn inconsistent_lengths_name_subject() {
        let err = build_dataset(
            vec![rec("u1", 0.0, vec![0.0; 4]), rec("u2", 1.0, vec![0.0; 3])],
            &BTreeMap::new(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("inconsistent vector lengths"));
        assert!(msg.contains("u2"));
    }

    #[test]
    fn tied_timestamps_keep_input_order() {
        let recs = vec![rec("a", 1.0, vec![1.0]), rec("a", 1.0, vec![2.0]), rec("a", 0.0, vec![3.0])];
        let ds = build_dataset(recs, &BTreeMap::new()).unwrap();
        let vals: Vec<f64> = ds.subjects[0].records.iter().map(|r| r.values.as_ref().unwrap()[0]).collect();
        assert_eq!(vals, vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn text_only_subjects_flagged() {
        let mut r = rec("a", 0.0, vec![1.0]);
        r.vector = None;
        r.text = Some("hello".into());
        let ds = build_dataset(vec![r, rec("b", 1.0, vec![2.0])], &BTreeMap::new()).unwrap();
        assert!(ds.subjects[0].needs_embedding());
        assert!(!ds.subjects[1].needs_embedding());
        assert!(ds.needs_embedding());
    }

    proptest::proptest! {
        #[test]
        fn records_conserved_and_ties_stable(times in proptest::collection::vec((0u8..3, 0u8..4), 1..40)) {
            let raw: Vec<RawRecord> = times
                .iter()
                .enumerate()
                .map(|(k, &(s, t))| RawRecord {
                    subject_id: format!("s{s}"),
                    timestamp: f64::from(t),
                    text: Some(format!("r{k}")),
                    vector: Some(vec![k as f64]),
                    metadata: BTreeMap::new(),
                })
                .collect();
            let ds = build_dataset(raw.clone(), &BTreeMap::new()).unwrap();
            proptest::prop_assert_eq!(ds.n_records(), raw.len());
            for subj in &ds.subjects {
                // input order survives among equal timestamps
                for w in subj.records.windows(2) {
                    proptest::prop_assert!(w[0].time < w[1].time || (w[0].time == w[1].time && w[0].values.as_ref().unwrap()[0] < w[1].values.as_ref().unwrap()[0]));
                }
            }
            proptest::prop_assert_eq!(ds, build_dataset(raw, &BTreeMap::new()).unwrap());
        }
    }
}
