//! Loading, validation, and filtering of longitudinal biomarker data and
//! event records into an analysis-ready cohort.
//!
//! Inclusion rules: a subject needs at least three serial results and at
//! least two results at or after treatment start (time 0). For subjects
//! with a recorded status-1 event, measurements after the event day are
//! truncated first. Nonpositive values and duplicate (subject, day) rows
//! are dropped with a warning rather than failing the load.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type SubjectId = String;

/// One biomarker measurement. `time_days` is relative to treatment start
/// (0 = treatment start, negative = pre-treatment).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub time_days: i64,
    pub value: f64,
}

/// Time-to-event record: days since treatment start to the first event
/// marker (status 1) or to end of follow-up (status 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub subject_id: SubjectId,
    pub event_time_days: i64,
    pub status: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: SubjectId,
    /// Sorted ascending by `time_days`; times are unique within a subject.
    pub measurements: Vec<Measurement>,
    pub event: Option<EventRecord>,
}

impl Subject {
    pub fn n_post_treatment(&self) -> usize {
        self.measurements.iter().filter(|m| m.time_days >= 0).count()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_digest: String,
    pub filter_log: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub subjects: Vec<Subject>,
    pub provenance: Provenance,
}

impl Cohort {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.measurements.len()).sum()
    }

    pub fn subject(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    /// True when no subject carries a pre-treatment measurement, i.e. the
    /// treatment indicator is constant over the whole cohort.
    pub fn all_post_treatment(&self) -> bool {
        self.subjects
            .iter()
            .all(|s| s.measurements.iter().all(|m| m.time_days >= 0))
    }

    /// Population standard deviation of all measurement values.
    pub fn value_scale(&self) -> f64 {
        let n = self.n_observations();
        if n == 0 {
            return 1.0;
        }
        let mean: f64 = self
            .subjects
            .iter()
            .flat_map(|s| s.measurements.iter().map(|m| m.value))
            .sum::<f64>()
            / n as f64;
        let var: f64 = self
            .subjects
            .iter()
            .flat_map(|s| s.measurements.iter().map(|m| (m.value - mean).powi(2)))
            .sum::<f64>()
            / n as f64;
        let sd = var.sqrt();
        if sd > 0.0 && sd.is_finite() {
            sd
        } else {
            1.0
        }
    }

    /// Replace every value v by ln(v). Values are positive by invariant.
    pub fn log_transformed(&self) -> Cohort {
        let mut out = self.clone();
        for s in &mut out.subjects {
            for m in &mut s.measurements {
                m.value = m.value.ln();
            }
        }
        out.provenance.filter_log.push("log-transform applied".to_string());
        out
    }
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Minimum number of serial results a subject must keep.
    pub min_results: usize,
    /// Minimum number of results at time_days >= 0.
    pub min_post_treatment: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            min_results: 3,
            min_post_treatment: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExcludeReason {
    FewerThanThreeResults,
    FewerThanTwoPostTreatment,
    AllValuesInvalid,
}

impl std::fmt::Display for ExcludeReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExcludeReason::FewerThanThreeResults => write!(f, "fewer than 3 serial results"),
            ExcludeReason::FewerThanTwoPostTreatment => {
                write!(f, "fewer than 2 post-treatment results")
            }
            ExcludeReason::AllValuesInvalid => write!(f, "all values invalid"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropReason {
    NonPositiveValue,
    DuplicateTime,
    PostEventTime,
}

impl std::fmt::Display for DropReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DropReason::NonPositiveValue => write!(f, "nonpositive value"),
            DropReason::DuplicateTime => write!(f, "duplicate time"),
            DropReason::PostEventTime => write!(f, "post-event time"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRow {
    /// 1-based line in the source file; 0 for in-memory rebuilds.
    pub line: u64,
    pub subject_id: SubjectId,
    pub time_days: i64,
    pub reason: DropReason,
}

/// Per-load accounting. The identities
/// `subjects_in = subjects_retained + subjects_excluded` and
/// `rows_in = rows_retained + rows_dropped` always hold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub subjects_in: usize,
    pub subjects_retained: usize,
    pub subjects_excluded: usize,
    pub rows_in: usize,
    pub rows_retained: usize,
    pub rows_dropped: usize,
    pub excluded: Vec<(SubjectId, ExcludeReason)>,
    pub dropped_rows: Vec<DroppedRow>,
}

impl FilterReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "section\tkey\tvalue");
        let _ = writeln!(out, "summary\tsubjects_in\t{}", self.subjects_in);
        let _ = writeln!(out, "summary\tsubjects_retained\t{}", self.subjects_retained);
        let _ = writeln!(out, "summary\tsubjects_excluded\t{}", self.subjects_excluded);
        let _ = writeln!(out, "summary\trows_in\t{}", self.rows_in);
        let _ = writeln!(out, "summary\trows_retained\t{}", self.rows_retained);
        let _ = writeln!(out, "summary\trows_dropped\t{}", self.rows_dropped);
        for (id, reason) in &self.excluded {
            let _ = writeln!(out, "excluded_subject\t{id}\t{reason}");
        }
        for d in &self.dropped_rows {
            let _ = writeln!(
                out,
                "dropped_row\t{}\tline {} day {}: {}",
                d.subject_id, d.line, d.time_days, d.reason
            );
        }
        out
    }
}

struct RawRow {
    line: u64,
    subject_id: SubjectId,
    time_days: i64,
    value: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Load the longitudinal CSV (`subject_id,time_days,value`), apply the
/// row- and subject-level filters, and return the analysis-ready cohort
/// plus the filter accounting. Lines starting with '#' are ignored.
pub fn load_longitudinal(
    path: impl AsRef<Path>,
    options: &IngestOptions,
) -> Result<(Cohort, FilterReport)> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&display, e))?;
    let digest = sha256_hex(&bytes);
    let rows = parse_longitudinal(&bytes, &display)?;
    let (cohort, report) = assemble(rows, &HashMap::new(), options, digest);
    Ok((cohort, report))
}

fn parse_longitudinal(bytes: &[u8], path: &str) -> Result<Vec<RawRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| csv_error(path, &e))?
        .clone();
    expect_header(path, &headers, &["subject_id", "time_days", "value"])?;

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, &e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(Error::Parse {
                path: path.to_string(),
                line,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let subject_id = record[0].to_string();
        let time_days: i64 = record[1].parse().map_err(|_| Error::Parse {
            path: path.to_string(),
            line,
            message: format!("time_days '{}' is not an integer", &record[1]),
        })?;
        let value: f64 = record[2].parse().map_err(|_| Error::Parse {
            path: path.to_string(),
            line,
            message: format!("value '{}' is not a number", &record[2]),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse {
                path: path.to_string(),
                line,
                message: format!("value '{}' is not finite", &record[2]),
            });
        }
        rows.push(RawRow {
            line,
            subject_id,
            time_days,
            value,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(path.to_string()));
    }
    Ok(rows)
}

fn csv_error(path: &str, e: &csv::Error) -> Error {
    let line = match e.kind() {
        csv::ErrorKind::Utf8 { pos, .. } => pos.as_ref().map(|p| p.line()).unwrap_or(0),
        _ => e.position().map(|p| p.line()).unwrap_or(0),
    };
    Error::Parse {
        path: path.to_string(),
        line,
        message: e.to_string(),
    }
}

fn expect_header(path: &str, got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    let got_fields: Vec<&str> = got.iter().collect();
    if got_fields != want {
        return Err(Error::Parse {
            path: path.to_string(),
            line: 1,
            message: format!(
                "header mismatch: expected '{}', found '{}'",
                want.join(","),
                got_fields.join(",")
            ),
        });
    }
    Ok(())
}

/// Load the events CSV (`subject_id,event_time_days,status`). One record
/// per subject; duplicates, negative times, and status outside {0,1} are
/// hard errors.
pub fn load_events(path: impl AsRef<Path>) -> Result<Vec<EventRecord>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&display, e))?;
    parse_events(&bytes, &display)
}

pub fn parse_events(bytes: &[u8], path: &str) -> Result<Vec<EventRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| csv_error(path, &e))?
        .clone();
    expect_header(path, &headers, &["subject_id", "event_time_days", "status"])?;

    let mut seen = HashSet::new();
    let mut events = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, &e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(Error::Parse {
                path: path.to_string(),
                line,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let subject_id = record[0].to_string();
        let event_time_days: i64 = record[1].parse().map_err(|_| Error::Parse {
            path: path.to_string(),
            line,
            message: format!("event_time_days '{}' is not an integer", &record[1]),
        })?;
        let status: i64 = record[2].parse().map_err(|_| Error::Parse {
            path: path.to_string(),
            line,
            message: format!("status '{}' is not an integer", &record[2]),
        })?;
        if event_time_days < 0 {
            return Err(Error::InvalidEvent {
                subject: subject_id,
                message: format!("negative event_time_days {event_time_days}"),
            });
        }
        if status != 0 && status != 1 {
            return Err(Error::InvalidEvent {
                subject: subject_id,
                message: format!("status {status} outside {{0,1}}"),
            });
        }
        if !seen.insert(subject_id.clone()) {
            return Err(Error::DuplicateEventSubject(subject_id));
        }
        events.push(EventRecord {
            subject_id,
            event_time_days,
            status,
        });
    }
    Ok(events)
}

/// Outcome of attaching events to a cohort.
#[derive(Debug, Clone, Default)]
pub struct JoinReport {
    /// Subject ids present in the events but absent from the cohort.
    pub unmatched_events: Vec<SubjectId>,
    /// Filter accounting for the re-run of truncation and inclusion rules.
    pub filter: FilterReport,
}

/// Attach events to cohort subjects by id, truncate measurements after
/// status-1 events, and re-apply the inclusion rules. Mismatched event ids
/// are reported, never fatal.
pub fn join_cohort(
    cohort: &Cohort,
    events: &[EventRecord],
    options: &IngestOptions,
) -> (Cohort, JoinReport) {
    let mut event_map: HashMap<&str, &EventRecord> = HashMap::new();
    for e in events {
        event_map.insert(e.subject_id.as_str(), e);
    }
    let cohort_ids: HashSet<&str> = cohort.subjects.iter().map(|s| s.id.as_str()).collect();
    let unmatched_events: Vec<SubjectId> = events
        .iter()
        .filter(|e| !cohort_ids.contains(e.subject_id.as_str()))
        .map(|e| e.subject_id.clone())
        .collect();

    // Rebuild from rows so truncation and inclusion rules run in one place.
    let mut rows = Vec::new();
    let mut merged: HashMap<SubjectId, EventRecord> = HashMap::new();
    for s in &cohort.subjects {
        if let Some(e) = &s.event {
            merged.insert(s.id.clone(), e.clone());
        }
        if let Some(e) = event_map.get(s.id.as_str()) {
            merged.insert(s.id.clone(), (*e).clone());
        }
        for m in &s.measurements {
            rows.push(RawRow {
                line: 0,
                subject_id: s.id.clone(),
                time_days: m.time_days,
                value: m.value,
            });
        }
    }
    let (joined, filter) = assemble(rows, &merged, options, cohort.provenance.source_digest.clone());
    let mut joined = joined;
    joined
        .provenance
        .filter_log
        .splice(0..0, cohort.provenance.filter_log.iter().cloned());
    for id in &unmatched_events {
        joined
            .provenance
            .filter_log
            .push(format!("event for unknown subject '{id}' ignored"));
    }
    (
        joined,
        JoinReport {
            unmatched_events,
            filter,
        },
    )
}

/// Shared row->cohort pipeline: per-row drops (nonpositive value, duplicate
/// time, post-event time), then subject inclusion rules, then time-sorting.
fn assemble(
    rows: Vec<RawRow>,
    events: &HashMap<SubjectId, EventRecord>,
    options: &IngestOptions,
    source_digest: String,
) -> (Cohort, FilterReport) {
    // BTreeMap keyed by id: output order is deterministic regardless of
    // input row order.
    let mut by_subject: BTreeMap<SubjectId, Vec<RawRow>> = BTreeMap::new();
    let rows_in = rows.len();
    for row in rows {
        by_subject.entry(row.subject_id.clone()).or_default().push(row);
    }

    let mut report = FilterReport {
        subjects_in: by_subject.len(),
        rows_in,
        ..FilterReport::default()
    };
    let mut subjects = Vec::new();
    let mut filter_log = Vec::new();

    for (id, subject_rows) in by_subject {
        let n_rows = subject_rows.len();
        let event = events.get(&id).cloned();
        let truncate_after = event
            .as_ref()
            .filter(|e| e.status == 1)
            .map(|e| e.event_time_days);

        let mut kept: Vec<Measurement> = Vec::with_capacity(n_rows);
        let mut seen_times = HashSet::new();
        let mut n_nonpositive = 0usize;
        for row in subject_rows {
            if row.value <= 0.0 {
                n_nonpositive += 1;
                report.dropped_rows.push(DroppedRow {
                    line: row.line,
                    subject_id: id.clone(),
                    time_days: row.time_days,
                    reason: DropReason::NonPositiveValue,
                });
                continue;
            }
            if !seen_times.insert(row.time_days) {
                report.dropped_rows.push(DroppedRow {
                    line: row.line,
                    subject_id: id.clone(),
                    time_days: row.time_days,
                    reason: DropReason::DuplicateTime,
                });
                continue;
            }
            if let Some(cutoff) = truncate_after {
                if row.time_days > cutoff {
                    report.dropped_rows.push(DroppedRow {
                        line: row.line,
                        subject_id: id.clone(),
                        time_days: row.time_days,
                        reason: DropReason::PostEventTime,
                    });
                    continue;
                }
            }
            kept.push(Measurement {
                time_days: row.time_days,
                value: row.value,
            });
        }

        let n_post = kept.iter().filter(|m| m.time_days >= 0).count();
        let exclude = if kept.is_empty() && n_nonpositive == n_rows {
            Some(ExcludeReason::AllValuesInvalid)
        } else if kept.len() < options.min_results {
            Some(ExcludeReason::FewerThanThreeResults)
        } else if n_post < options.min_post_treatment {
            Some(ExcludeReason::FewerThanTwoPostTreatment)
        } else {
            None
        };

        match exclude {
            Some(reason) => {
                filter_log.push(format!("excluded {id}: {reason}"));
                report.excluded.push((id, reason));
                report.subjects_excluded += 1;
                // Rows that survived the row filters die with the subject.
                report.rows_dropped += kept.len();
            }
            None => {
                kept.sort_by_key(|m| m.time_days);
                report.rows_retained += kept.len();
                report.subjects_retained += 1;
                subjects.push(Subject {
                    id,
                    measurements: kept,
                    event,
                });
            }
        }
    }
    report.rows_dropped += report.dropped_rows.len();

    let cohort = Cohort {
        subjects,
        provenance: Provenance {
            source_digest,
            filter_log,
        },
    };
    (cohort, report)
}

/// Canonical longitudinal CSV emission: subjects in id order, rows in time
/// order, values in shortest round-trip form. Loading the emitted text
/// reproduces the cohort exactly.
pub fn write_longitudinal_csv(cohort: &Cohort) -> String {
    let mut out = String::from("subject_id,time_days,value\n");
    for s in &cohort.subjects {
        for m in &s.measurements {
            let _ = writeln!(out, "{},{},{}", s.id, m.time_days, m.value);
        }
    }
    out
}

pub fn write_events_csv(events: &[EventRecord]) -> String {
    let mut out = String::from("subject_id,event_time_days,status\n");
    for e in events {
        let _ = writeln!(out, "{},{},{}", e.subject_id, e.event_time_days, e.status);
    }
    out
}

/// Parse a longitudinal CSV from memory (used by tests and the idempotence
/// check).
pub fn load_longitudinal_str(
    text: &str,
    options: &IngestOptions,
) -> Result<(Cohort, FilterReport)> {
    let rows = parse_longitudinal(text.as_bytes(), "<memory>")?;
    let digest = sha256_hex(text.as_bytes());
    Ok(assemble(rows, &HashMap::new(), options, digest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> IngestOptions {
        IngestOptions::default()
    }

    #[test]
    fn accepts_minimal_valid_subject() {
        let csv = "subject_id,time_days,value\nS1,-10,100\nS1,0,90\nS1,30,85\n";
        let (cohort, report) = load_longitudinal_str(csv, &opts()).unwrap();
        assert_eq!(cohort.n_subjects(), 1);
        assert_eq!(cohort.subjects[0].measurements.len(), 3);
        assert_eq!(report.subjects_retained, 1);
        assert_eq!(report.rows_retained, 3);
    }

    #[test]
    fn excludes_subject_with_two_measurements() {
        let csv = "subject_id,time_days,value\nS1,0,90\nS1,30,85\n";
        let (cohort, report) = load_longitudinal_str(csv, &opts()).unwrap();
        assert_eq!(cohort.n_subjects(), 0);
        assert_eq!(
            report.excluded,
            vec![("S1".to_string(), ExcludeReason::FewerThanThreeResults)]
        );
    }

    #[test]
    fn post_event_truncation_can_cascade_into_exclusion() {
        // Measurements at -100, 30, 400; status-1 event at day 200.
        let csv = "subject_id,time_days,value\nS1,-100,200\nS1,30,150\nS1,400,120\n";
        let (cohort, _) = load_longitudinal_str(csv, &opts()).unwrap();
        let events = vec![EventRecord {
            subject_id: "S1".to_string(),
            event_time_days: 200,
            status: 1,
        }];
        let (joined, jr) = join_cohort(&cohort, &events, &opts());
        assert_eq!(joined.n_subjects(), 0);
        assert_eq!(
            jr.filter.dropped_rows.iter().map(|d| d.reason).collect::<Vec<_>>(),
            vec![DropReason::PostEventTime]
        );
        // After truncation only one post-treatment result remains.
        assert_eq!(
            jr.filter.excluded,
            vec![("S1".to_string(), ExcludeReason::FewerThanTwoPostTreatment)]
        );
    }

    #[test]
    fn censored_event_keeps_all_measurements() {
        let csv = "subject_id,time_days,value\nS1,-100,200\nS1,30,150\nS1,400,120\n";
        let (cohort, _) = load_longitudinal_str(csv, &opts()).unwrap();
        let events = vec![EventRecord {
            subject_id: "S1".to_string(),
            event_time_days: 200,
            status: 0,
        }];
        let (joined, _) = join_cohort(&cohort, &events, &opts());
        assert_eq!(joined.subjects[0].measurements.len(), 3);
        assert_eq!(joined.subjects[0].event.as_ref().unwrap().status, 0);
    }

    #[test]
    fn zero_value_row_dropped_subject_retained() {
        let csv = "subject_id,time_days,value\nS1,-10,0\nS1,0,90\nS1,30,85\nS1,60,80\n";
        let (cohort, report) = load_longitudinal_str(csv, &opts()).unwrap();
        assert_eq!(cohort.n_subjects(), 1);
        assert_eq!(cohort.subjects[0].measurements.len(), 3);
        assert_eq!(report.dropped_rows.len(), 1);
        assert_eq!(report.dropped_rows[0].reason, DropReason::NonPositiveValue);
    }

    #[test]
    fn duplicate_time_keeps_first() {
        let csv = "subject_id,time_days,value\nS1,0,90\nS1,0,999\nS1,30,85\nS1,60,80\n";
        let (cohort, report) = load_longitudinal_str(csv, &opts()).unwrap();
        let m = &cohort.subjects[0].measurements;
        assert_eq!(m.len(), 3);
        assert_eq!(m[0].value, 90.0);
        assert_eq!(report.dropped_rows[0].reason, DropReason::DuplicateTime);
    }

    #[test]
    fn all_values_invalid_reason() {
        let csv = "subject_id,time_days,value\nS1,0,-5\nS1,30,0\nS2,0,90\nS2,10,80\nS2,20,70\n";
        let (cohort, report) = load_longitudinal_str(csv, &opts()).unwrap();
        assert_eq!(cohort.n_subjects(), 1);
        assert!(report
            .excluded
            .contains(&("S1".to_string(), ExcludeReason::AllValuesInvalid)));
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "subject_id,time_days,value\nS1,0,90\nS1,abc,85\n";
        let err = load_longitudinal_str(csv, &opts()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_file_errors() {
        let err = load_longitudinal_str("subject_id,time_days,value\n", &opts()).unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
    }

    #[test]
    fn events_validation() {
        let ok = parse_events(
            b"subject_id,event_time_days,status\nS1,5479,1\n",
            "<memory>",
        )
        .unwrap();
        assert_eq!(ok[0].event_time_days, 5479);

        let dup = parse_events(
            b"subject_id,event_time_days,status\nS1,5,1\nS1,9,0\n",
            "<memory>",
        );
        assert!(matches!(dup, Err(Error::DuplicateEventSubject(_))));

        let neg = parse_events(
            b"subject_id,event_time_days,status\nS2,-1,0\n",
            "<memory>",
        );
        assert!(matches!(neg, Err(Error::InvalidEvent { .. })));

        let bad_status = parse_events(
            b"subject_id,event_time_days,status\nS2,1,2\n",
            "<memory>",
        );
        assert!(matches!(bad_status, Err(Error::InvalidEvent { .. })));
    }

    #[test]
    fn join_reports_unmatched_and_keeps_eventless() {
        let csv = "subject_id,time_days,value\n\
                   S1,0,90\nS1,10,85\nS1,20,80\n\
                   S2,0,90\nS2,10,85\nS2,20,80\n";
        let (cohort, _) = load_longitudinal_str(csv, &opts()).unwrap();
        let events = vec![
            EventRecord {
                subject_id: "S1".to_string(),
                event_time_days: 100,
                status: 1,
            },
            EventRecord {
                subject_id: "SX".to_string(),
                event_time_days: 50,
                status: 0,
            },
        ];
        let (joined, jr) = join_cohort(&cohort, &events, &opts());
        assert_eq!(jr.unmatched_events, vec!["SX".to_string()]);
        assert!(joined.subject("S1").unwrap().event.is_some());
        assert!(joined.subject("S2").unwrap().event.is_none());

        let (joined2, jr2) = join_cohort(&cohort, &[], &opts());
        assert!(jr2.unmatched_events.is_empty());
        assert!(joined2.subjects.iter().all(|s| s.event.is_none()));
    }

    #[test]
    fn load_is_idempotent_on_canonical_form() {
        let csv = "subject_id,time_days,value\n\
                   B,40,123.456\nB,-3,77.5\nB,0,88\nB,40,999\n\
                   A,0,90.25\nA,10,85\nA,20,0\nA,30,81.125\n";
        let (cohort, _) = load_longitudinal_str(csv, &opts()).unwrap();
        let emitted = write_longitudinal_csv(&cohort);
        let (reloaded, report) = load_longitudinal_str(&emitted, &opts()).unwrap();
        assert_eq!(reloaded.subjects, cohort.subjects);
        assert_eq!(report.rows_dropped, 0);
        assert_eq!(write_longitudinal_csv(&reloaded), emitted);
    }

    #[test]
    fn filter_counts_reconcile_on_random_dirty_input() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(42);
        for _ in 0..50 {
            let n_subjects = rng.gen_range(1..8);
            let mut csv = String::from("subject_id,time_days,value\n");
            let mut events = Vec::new();
            for s in 0..n_subjects {
                let n_rows = rng.gen_range(1..10);
                for _ in 0..n_rows {
                    let t = rng.gen_range(-200..400);
                    // Mix in nonpositive values and likely duplicates.
                    let v = if rng.gen_bool(0.15) {
                        0.0
                    } else {
                        rng.gen_range(1.0..300.0)
                    };
                    csv.push_str(&format!("P{s},{t},{v}\n"));
                }
                if rng.gen_bool(0.4) {
                    events.push(EventRecord {
                        subject_id: format!("P{s}"),
                        event_time_days: rng.gen_range(0..300),
                        status: u8::from(rng.gen_bool(0.7)),
                    });
                }
            }
            let (cohort, report) = load_longitudinal_str(&csv, &opts()).unwrap();
            assert_eq!(
                report.subjects_in,
                report.subjects_retained + report.subjects_excluded
            );
            assert_eq!(report.rows_in, report.rows_retained + report.rows_dropped);
            assert_eq!(report.rows_retained, cohort.n_observations());

            let (joined, jr) = join_cohort(&cohort, &events, &opts());
            assert_eq!(
                jr.filter.rows_in,
                jr.filter.rows_retained + jr.filter.rows_dropped
            );
            // Post-filter invariants hold for every retained subject.
            for subj in &joined.subjects {
                assert!(subj.measurements.len() >= 3);
                assert!(subj.n_post_treatment() >= 2);
                assert!(subj.measurements.windows(2).all(|w| w[0].time_days < w[1].time_days));
                assert!(subj.measurements.iter().all(|m| m.value > 0.0));
                if let Some(e) = &subj.event {
                    if e.status == 1 {
                        assert!(subj
                            .measurements
                            .iter()
                            .all(|m| m.time_days <= e.event_time_days));
                    }
                }
            }
        }
    }
}
