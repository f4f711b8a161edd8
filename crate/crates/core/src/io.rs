//! Flat CSV schemas for grade logs, model scores, reference standards,
//! truth tables and patient records, plus atomic file output.
//!
//! Readers report failures with the file name and 1-based line number.
//! Floats are written in shortest round-trip form so every file re-reads to
//! identical values.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use crate::adjudication::{ReferenceStandard, Resolution};
use crate::error::{Error, Result};
use crate::grade::{Assessment, BinaryLabelSet, FeatureId, Gradability, GradeRecord, GraderRole, Item, Round};
use crate::scores::{CodeEvent, CodeKind, Eye, FeatureHead, ModelOutput, PatientRecord, PatientScore, Visit, VisitImage};
use crate::synth::{CohortSpec, TruthRecord};

/// Writes through a temporary file in the destination directory and renames
/// it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn display_name(path: &Path) -> String {
    path.display().to_string()
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::io(path, e))
}

/// Header-indexed CSV rows with line-aware errors.
struct Table {
    file: String,
    columns: HashMap<String, usize>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read<R: Read>(reader: R, file: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let schema = |line: u64, message: String| Error::Schema {
            file: file.to_string(),
            line,
            message,
        };
        let headers = rdr.headers().map_err(|e| schema(1, e.to_string()))?.clone();
        if headers.is_empty() || headers.iter().all(str::is_empty) {
            return Err(schema(1, "missing header row".into()));
        }
        let mut columns = HashMap::new();
        for (i, h) in headers.iter().enumerate() {
            if columns.insert(h.to_string(), i).is_some() {
                return Err(schema(1, format!("duplicate column {h}")));
            }
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                schema(line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Table {
            file: file.to_string(),
            columns,
            rows,
        })
    }

    fn require(&self, names: &[&str]) -> Result<()> {
        for n in names {
            if !self.columns.contains_key(*n) {
                return Err(Error::Schema {
                    file: self.file.clone(),
                    line: 1,
                    message: format!("missing column {n}"),
                });
            }
        }
        Ok(())
    }

    fn has(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }

    fn get<'a>(&self, rec: &'a csv::StringRecord, name: &str) -> &'a str {
        self.columns.get(name).and_then(|&i| rec.get(i)).unwrap_or("")
    }

    fn schema(&self, line: u64, message: impl Into<String>) -> Error {
        Error::Schema {
            file: self.file.clone(),
            line,
            message: message.into(),
        }
    }

    fn violation(&self, line: u64, message: impl Into<String>) -> Error {
        Error::InvariantViolation {
            file: self.file.clone(),
            line,
            message: message.into(),
        }
    }
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::io("<csv buffer>", std::io::Error::other(e.to_string()));
    w.write_record(header).map_err(io_err)?;
    for r in rows {
        w.write_record(&r).map_err(io_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::io("<csv buffer>", std::io::Error::other(e.to_string())))
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(t: &Table, line: u64, column: &str, token: &str) -> Result<f64> {
    token
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| t.schema(line, format!("{column}: expected a number, found {token:?}")))
}

fn parse_bool(t: &Table, line: u64, column: &str, token: &str) -> Result<Option<bool>> {
    match token.to_ascii_lowercase().as_str() {
        "" => Ok(None),
        "1" | "true" | "yes" => Ok(Some(true)),
        "0" | "false" | "no" => Ok(Some(false)),
        _ => Err(t.schema(line, format!("{column}: expected 0/1, found {token:?}"))),
    }
}

fn fmt_bool(v: Option<bool>) -> String {
    match v {
        Some(true) => "1".into(),
        Some(false) => "0".into(),
        None => String::new(),
    }
}

fn parse_date(t: &Table, line: u64, column: &str, token: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(token, "%Y-%m-%d")
        .map_err(|_| t.schema(line, format!("{column}: expected an ISO-8601 date, found {token:?}")))
}

fn gradable_column(item: Item) -> String {
    format!("{}_gradable", item.column())
}

pub fn grade_log_header() -> Vec<String> {
    let mut h: Vec<String> = ["image_id", "grader_id", "grader_role", "round", "seq"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for item in Item::ALL {
        h.push(item.column().to_string());
        h.push(gradable_column(item));
    }
    h.push("other_findings".into());
    h
}

pub fn parse_grades<R: Read>(reader: R, file: &str) -> Result<Vec<GradeRecord>> {
    let t = Table::read(reader, file)?;
    let mut required = vec!["image_id", "grader_id", "grader_role", "round", "seq"];
    let gradable: Vec<String> = Item::ALL.iter().map(|&i| gradable_column(i)).collect();
    required.extend(Item::ALL.iter().map(|i| i.column()));
    required.extend(gradable.iter().map(String::as_str));
    t.require(&required)?;

    let mut out = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let line = *line;
        let image_id = t.get(rec, "image_id");
        let grader_id = t.get(rec, "grader_id");
        if image_id.is_empty() || grader_id.is_empty() {
            return Err(t.schema(line, "image_id and grader_id are required"));
        }
        let role_token = t.get(rec, "grader_role");
        let role = GraderRole::parse(role_token)
            .ok_or_else(|| t.schema(line, format!("unknown grader_role {role_token:?}")))?;
        let round_token = t.get(rec, "round");
        let round = round_token
            .parse::<u32>()
            .ok()
            .and_then(Round::from_number)
            .ok_or_else(|| t.schema(line, format!("round must be 1 or 2, found {round_token:?}")))?;
        let seq_token = t.get(rec, "seq");
        let seq = seq_token
            .parse::<u32>()
            .ok()
            .filter(|&s| s >= 1)
            .ok_or_else(|| t.schema(line, format!("seq must be a positive integer, found {seq_token:?}")))?;
        let mut r = GradeRecord::new(image_id, grader_id, role, round, seq).map_err(|e| t.schema(line, e.to_string()))?;
        for item in Item::ALL {
            let grade = t.get(rec, item.column());
            let grad_token = t.get(rec, &gradable_column(item));
            let gradability = if grad_token.is_empty() {
                None
            } else {
                Some(Gradability::parse(grad_token).ok_or_else(|| {
                    t.schema(line, format!("{}: unknown gradability {grad_token:?}", gradable_column(item)))
                })?)
            };
            let assessment = match (grade.is_empty(), gradability) {
                (true, None) => None,
                (true, Some(Gradability::Ungradable)) => Some(Assessment::Ungradable),
                (true, Some(Gradability::Gradable)) => {
                    return Err(t.violation(line, format!("{} marked gradable without a grade", item.column())))
                }
                (false, Some(Gradability::Ungradable)) => {
                    return Err(t.violation(line, format!("{} has a grade but is marked ungradable", item.column())))
                }
                (false, _) => {
                    let level = item.parse_level(grade).ok_or_else(|| {
                        t.schema(
                            line,
                            format!("{}: {grade:?} is not one of {:?}", item.column(), item.labels()),
                        )
                    })?;
                    Some(Assessment::Graded(level))
                }
            };
            r.set(item, assessment).map_err(|e| t.schema(line, e.to_string()))?;
        }
        let other = t.get(rec, "other_findings");
        r.other_findings = (!other.is_empty()).then(|| other.to_string());
        out.push(r);
    }
    Ok(out)
}

pub fn read_grades(path: &Path) -> Result<Vec<GradeRecord>> {
    parse_grades(open(path)?, &display_name(path))
}

pub fn grades_to_csv(records: &[GradeRecord]) -> Result<Vec<u8>> {
    let rows = records.iter().map(|r| {
        let mut row = vec![
            r.image_id.clone(),
            r.grader_id.clone(),
            r.grader_role.label().to_string(),
            r.round.number().to_string(),
            r.seq.to_string(),
        ];
        for item in Item::ALL {
            let (grade, grad) = match r.assessment(item) {
                None => (String::new(), String::new()),
                Some(Assessment::Ungradable) => (String::new(), Gradability::Ungradable.label().to_string()),
                Some(Assessment::Graded(l)) => (item.label(l).to_string(), Gradability::Gradable.label().to_string()),
            };
            row.push(grade);
            row.push(grad);
        }
        row.push(r.other_findings.clone().unwrap_or_default());
        row
    });
    csv_bytes(&grade_log_header(), rows)
}

pub fn write_grades(path: &Path, records: &[GradeRecord]) -> Result<()> {
    write_atomic(path, &grades_to_csv(records)?)
}

const GON_PROB_COLUMNS: [&str; 4] = ["p_non", "p_low", "p_high", "p_likely"];

pub fn parse_outputs<R: Read>(reader: R, file: &str) -> Result<Vec<ModelOutput>> {
    let t = Table::read(reader, file)?;
    let mut required = vec!["image_id", "model_id"];
    required.extend(GON_PROB_COLUMNS);
    t.require(&required)?;
    let features: Vec<FeatureId> = FeatureId::ALL.into_iter().filter(|f| t.has(f.column())).collect();
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let line = *line;
        let mut gon = [0.0; 4];
        for (slot, col) in gon.iter_mut().zip(GON_PROB_COLUMNS) {
            *slot = parse_f64(&t, line, col, t.get(rec, col))?;
        }
        let mut heads = BTreeMap::new();
        for &f in &features {
            let token = t.get(rec, f.column());
            if !token.is_empty() {
                heads.insert(f, FeatureHead::Positive(parse_f64(&t, line, f.column(), token)?));
            }
        }
        let o = ModelOutput::new(t.get(rec, "image_id"), t.get(rec, "model_id"), gon, heads)
            .map_err(|e| t.violation(line, e.to_string()))?;
        out.push(o);
    }
    Ok(out)
}

pub fn read_outputs(path: &Path) -> Result<Vec<ModelOutput>> {
    parse_outputs(open(path)?, &display_name(path))
}

/// Feature heads are written as their positive-level probability.
pub fn outputs_to_csv(outputs: &[ModelOutput]) -> Result<Vec<u8>> {
    let mut header: Vec<String> = ["image_id", "model_id"].iter().map(|s| s.to_string()).collect();
    header.extend(GON_PROB_COLUMNS.iter().map(|s| s.to_string()));
    header.extend(FeatureId::ALL.iter().map(|f| f.column().to_string()));
    let rows = outputs.iter().map(|o| {
        let mut row = vec![o.image_id.clone(), o.model_id.clone()];
        row.extend(o.gon_probs.iter().map(|&p| fmt_f64(p)));
        for f in FeatureId::ALL {
            row.push(o.feature_probs.get(&f).map(|h| fmt_f64(h.positive_prob(f))).unwrap_or_default());
        }
        row
    });
    csv_bytes(&header, rows)
}

pub fn write_outputs(path: &Path, outputs: &[ModelOutput]) -> Result<()> {
    write_atomic(path, &outputs_to_csv(outputs)?)
}

fn raw_column(item: Item) -> String {
    format!("raw_{}", item.column())
}

fn raw_token(a: Option<Assessment>, item: Item) -> String {
    match a {
        None => String::new(),
        Some(Assessment::Ungradable) => Gradability::Ungradable.label().to_string(),
        Some(Assessment::Graded(l)) => item.label(l).to_string(),
    }
}

fn parse_raw(t: &Table, line: u64, item: Item, token: &str) -> Result<Option<Assessment>> {
    if token.is_empty() {
        return Ok(None);
    }
    if Gradability::parse(token) == Some(Gradability::Ungradable) {
        return Ok(Some(Assessment::Ungradable));
    }
    item.parse_level(token)
        .map(|l| Some(Assessment::Graded(l)))
        .ok_or_else(|| t.schema(line, format!("{}: {token:?} is not one of {:?}", raw_column(item), item.labels())))
}

/// Reference columns: image_id, refer, resolution, n_reviews, one binary
/// column per feature, then the adjudicated raw grade of every item.
pub fn references_to_csv(refs: &[ReferenceStandard]) -> Result<Vec<u8>> {
    let mut header: Vec<String> = ["image_id", "refer", "resolution", "n_reviews"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(FeatureId::ALL.iter().map(|f| f.column().to_string()));
    header.extend(Item::ALL.iter().map(|&i| raw_column(i)));
    let rows = refs.iter().map(|r| {
        let mut row = vec![
            r.image_id.clone(),
            fmt_bool(r.labels.refer),
            r.resolution.label().to_string(),
            r.n_reviews.to_string(),
        ];
        row.extend(FeatureId::ALL.iter().map(|&f| fmt_bool(r.labels.feature(f))));
        row.extend(Item::ALL.iter().map(|&i| raw_token(r.raw(i), i)));
        row
    });
    csv_bytes(&header, rows)
}

pub fn write_references(path: &Path, refs: &[ReferenceStandard]) -> Result<()> {
    write_atomic(path, &references_to_csv(refs)?)
}

pub fn parse_references<R: Read>(reader: R, file: &str) -> Result<Vec<ReferenceStandard>> {
    let t = Table::read(reader, file)?;
    let raw_cols: Vec<String> = Item::ALL.iter().map(|&i| raw_column(i)).collect();
    let mut required = vec!["image_id", "refer", "resolution", "n_reviews"];
    required.extend(raw_cols.iter().map(String::as_str));
    t.require(&required)?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let line = *line;
        let mut raw = [None; Item::COUNT];
        for item in Item::ALL {
            raw[item.index()] = parse_raw(&t, line, item, t.get(rec, &raw_column(item)))?;
        }
        let res_token = t.get(rec, "resolution");
        let resolution =
            Resolution::parse(res_token).ok_or_else(|| t.schema(line, format!("unknown resolution {res_token:?}")))?;
        let n_token = t.get(rec, "n_reviews");
        let n_reviews = n_token
            .parse::<u32>()
            .map_err(|_| t.schema(line, format!("n_reviews: expected an integer, found {n_token:?}")))?;
        let r = ReferenceStandard::from_raw(t.get(rec, "image_id"), raw, resolution, n_reviews);
        // the binary columns must agree with the raw grades
        let refer = parse_bool(&t, line, "refer", t.get(rec, "refer"))?;
        if refer != r.labels.refer {
            return Err(t.violation(line, "refer disagrees with raw_gon"));
        }
        for f in FeatureId::ALL {
            if t.has(f.column()) && parse_bool(&t, line, f.column(), t.get(rec, f.column()))? != r.labels.feature(f) {
                return Err(t.violation(line, format!("{} disagrees with {}", f.column(), raw_column(Item::Feature(f)))));
            }
        }
        out.push(r);
    }
    Ok(out)
}

pub fn read_references(path: &Path) -> Result<Vec<ReferenceStandard>> {
    parse_references(open(path)?, &display_name(path))
}

/// Referral labels from any table with `image_id` and `refer` columns
/// (reference standards or truth files). Empty `refer` means ungradable.
pub fn read_labels(path: &Path) -> Result<Vec<(String, Option<bool>)>> {
    let t = Table::read(open(path)?, &display_name(path))?;
    t.require(&["image_id", "refer"])?;
    t.rows
        .iter()
        .map(|(line, rec)| Ok((t.get(rec, "image_id").to_string(), parse_bool(&t, *line, "refer", t.get(rec, "refer"))?)))
        .collect()
}

/// Binary labels from a reference table (raw grade columns), a truth table
/// (level columns) or a bare `image_id,refer` table, in file order.
pub fn read_binary_labels(path: &Path) -> Result<Vec<(String, BinaryLabelSet)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = display_name(path);
    let header = Table::read(bytes.split(|&b| b == b'\n').next().unwrap_or_default(), &name)?;
    if header.has(&raw_column(Item::Gon)) {
        return Ok(parse_references(bytes.as_slice(), &name)?
            .into_iter()
            .map(|r| (r.image_id, r.labels))
            .collect());
    }
    if Item::ALL.iter().all(|i| header.has(i.column())) {
        return Ok(parse_truth(bytes.as_slice(), &name)?
            .into_iter()
            .map(|t| {
                let labels = BinaryLabelSet::from_assessments(&t.assessments());
                (t.image_id, labels)
            })
            .collect());
    }
    let t = Table::read(bytes.as_slice(), &name)?;
    t.require(&["image_id", "refer"])?;
    t.rows
        .iter()
        .map(|(line, rec)| {
            let labels = BinaryLabelSet {
                refer: parse_bool(&t, *line, "refer", t.get(rec, "refer"))?,
                ..Default::default()
            };
            Ok((t.get(rec, "image_id").to_string(), labels))
        })
        .collect()
}

/// Truth columns: image_id, refer, then the true level label of every item.
pub fn truth_to_csv(truth: &[TruthRecord]) -> Result<Vec<u8>> {
    let mut header: Vec<String> = vec!["image_id".into(), "refer".into()];
    header.extend(Item::ALL.iter().map(|i| i.column().to_string()));
    let rows = truth.iter().map(|t| {
        let mut row = vec![t.image_id.clone(), fmt_bool(Some(t.refer))];
        row.extend(Item::ALL.iter().map(|&i| i.label(t.levels[i.index()]).to_string()));
        row
    });
    csv_bytes(&header, rows)
}

pub fn parse_truth<R: Read>(reader: R, file: &str) -> Result<Vec<TruthRecord>> {
    let t = Table::read(reader, file)?;
    let mut required = vec!["image_id", "refer"];
    required.extend(Item::ALL.iter().map(|i| i.column()));
    t.require(&required)?;
    t.rows
        .iter()
        .map(|(line, rec)| {
            let mut levels = [0u8; Item::COUNT];
            for item in Item::ALL {
                let token = t.get(rec, item.column());
                levels[item.index()] = item
                    .parse_level(token)
                    .ok_or_else(|| t.schema(*line, format!("{}: {token:?} is not a level", item.column())))?;
            }
            let refer = parse_bool(&t, *line, "refer", t.get(rec, "refer"))?
                .ok_or_else(|| t.schema(*line, "truth rows need refer"))?;
            Ok(TruthRecord {
                image_id: t.get(rec, "image_id").to_string(),
                refer,
                levels,
            })
        })
        .collect()
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRecord>> {
    parse_truth(open(path)?, &display_name(path))
}

/// Cohort spec from JSON; omitted fields take their defaults.
pub fn read_cohort_spec(path: &Path) -> Result<CohortSpec> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let spec: CohortSpec = serde_json::from_slice(&bytes).map_err(|e| Error::Schema {
        file: display_name(path),
        line: e.line() as u64,
        message: e.to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

const PATIENT_COLUMNS: [&str; 6] = ["patient_id", "visit_date", "image_id", "eye", "code_kind", "code_date"];

/// One row per image (`visit_date`, `image_id`, `eye`) and one per code
/// event (`code_kind`, `code_date`); a row may carry both.
pub fn patients_to_csv(patients: &[PatientRecord]) -> Result<Vec<u8>> {
    let header: Vec<String> = PATIENT_COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for p in patients {
        for v in &p.visits {
            for im in &v.images {
                rows.push(vec![
                    p.patient_id.clone(),
                    v.date.to_string(),
                    im.image_id.clone(),
                    im.eye.label().to_string(),
                    String::new(),
                    String::new(),
                ]);
            }
        }
        for e in &p.code_events {
            rows.push(vec![
                p.patient_id.clone(),
                String::new(),
                String::new(),
                String::new(),
                e.kind.label().to_string(),
                e.date.to_string(),
            ]);
        }
    }
    csv_bytes(&header, rows)
}

pub fn parse_patients<R: Read>(reader: R, file: &str) -> Result<Vec<PatientRecord>> {
    let t = Table::read(reader, file)?;
    t.require(&PATIENT_COLUMNS)?;
    let mut by_patient: BTreeMap<String, (BTreeMap<NaiveDate, Vec<VisitImage>>, Vec<CodeEvent>)> = BTreeMap::new();
    for (line, rec) in &t.rows {
        let line = *line;
        let pid = t.get(rec, "patient_id");
        if pid.is_empty() {
            return Err(t.schema(line, "patient_id is required"));
        }
        let entry = by_patient.entry(pid.to_string()).or_default();
        let image_id = t.get(rec, "image_id");
        let kind_token = t.get(rec, "code_kind");
        if image_id.is_empty() && kind_token.is_empty() {
            return Err(t.schema(line, "row carries neither an image nor a code event"));
        }
        if !image_id.is_empty() {
            let date = parse_date(&t, line, "visit_date", t.get(rec, "visit_date"))?;
            let eye_token = t.get(rec, "eye");
            let eye = Eye::parse(eye_token).ok_or_else(|| t.schema(line, format!("unknown eye {eye_token:?}")))?;
            entry.0.entry(date).or_default().push(VisitImage {
                image_id: image_id.to_string(),
                eye,
            });
        }
        if !kind_token.is_empty() {
            let kind =
                CodeKind::parse(kind_token).ok_or_else(|| t.schema(line, format!("unknown code_kind {kind_token:?}")))?;
            let date = parse_date(&t, line, "code_date", t.get(rec, "code_date"))?;
            entry.1.push(CodeEvent { date, kind });
        }
    }
    Ok(by_patient
        .into_iter()
        .map(|(patient_id, (visits, code_events))| PatientRecord {
            patient_id,
            visits: visits.into_iter().map(|(date, images)| Visit { date, images }).collect(),
            code_events,
        })
        .collect())
}

pub fn read_patients(path: &Path) -> Result<Vec<PatientRecord>> {
    parse_patients(open(path)?, &display_name(path))
}

pub fn patient_scores_to_csv(scores: &[PatientScore]) -> Result<Vec<u8>> {
    let header: Vec<String> = ["patient_id", "visit_date", "eye", "image_id", "score", "n_images"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = scores.iter().map(|s| {
        vec![
            s.patient_id.clone(),
            s.visit_date.to_string(),
            s.eye.label().to_string(),
            s.image_id.clone(),
            fmt_f64(s.score),
            s.n_images.to_string(),
        ]
    });
    csv_bytes(&header, rows)
}
