//! Loading, cleaning, label encoding and splitting of arena-style pairwise
//! preference data.
//!
//! Accepted inputs are CSV with the header
//! `id,model_a,model_b,prompt,response_a,response_b,winner_model_a,winner_model_b,winner_tie`
//! or JSONL objects with the same keys. Cleaned records are written as JSONL
//! with keys `id,prompt,response_a,response_b,label`.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const REQUIRED_COLUMNS: [&str; 9] = [
    "id",
    "model_a",
    "model_b",
    "prompt",
    "response_a",
    "response_b",
    "winner_model_a",
    "winner_model_b",
    "winner_tie",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("duplicate ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),
    #[error("record `{id}`: expected exactly one winner flag, got (a={a}, b={b}, tie={tie})")]
    InvalidLabel { id: String, a: u8, b: u8, tie: u8 },
    #[error("no records to split")]
    EmptyInput,
    #[error("split ratios {0:?} must be nonnegative and sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("unknown format `{0}` (expected csv or jsonl)")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Jsonl,
}

impl FromStr for DataFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

/// One row as it appears in the source; empty cells are `None`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub model_a: Option<String>,
    pub model_b: Option<String>,
    pub prompt: Option<String>,
    pub response_a: Option<String>,
    pub response_b: Option<String>,
    pub winner_model_a: u8,
    pub winner_model_b: u8,
    pub winner_tie: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    A,
    B,
    Tie,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::A, Label::B, Label::Tie];

    pub fn index(self) -> usize {
        match self {
            Label::A => 0,
            Label::B => 1,
            Label::Tie => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn encode(self) -> LabelVector {
        encode_label(self)
    }
}

/// One-hot target in (A, B, Tie) order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelVector(pub [f64; 3]);

impl LabelVector {
    pub fn label(&self) -> Label {
        Label::from_index(crate::metrics::argmax(&self.0)).expect("argmax of a 3-vector")
    }
}

pub fn encode_label(label: Label) -> LabelVector {
    let mut y = [0.0; 3];
    y[label.index()] = 1.0;
    LabelVector(y)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub id: String,
    pub prompt: String,
    pub response_a: String,
    pub response_b: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<PreferenceRecord>,
    pub validation: Vec<PreferenceRecord>,
    pub test: Vec<PreferenceRecord>,
    pub seed: u64,
}

/// Reads every row of `source`, in order, and rejects files with repeated ids.
pub fn parse_dataset<R: Read>(
    source: R,
    format: DataFormat,
) -> Result<Vec<RawRecord>, IngestError> {
    let records = match format {
        DataFormat::Csv => parse_csv(source)?,
        DataFormat::Jsonl => parse_jsonl(source)?,
    };
    check_unique_ids(&records)?;
    Ok(records)
}

fn check_unique_ids(records: &[RawRecord]) -> Result<(), IngestError> {
    let mut seen = HashSet::with_capacity(records.len());
    let mut dupes = BTreeSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            dupes.insert(r.id.clone());
        }
    }
    if dupes.is_empty() {
        Ok(())
    } else {
        Err(IngestError::DuplicateIds(dupes.into_iter().collect()))
    }
}

fn parse_csv<R: Read>(source: R) -> Result<Vec<RawRecord>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| IngestError::MalformedRow {
            row: 0,
            reason: e.to_string(),
        })?
        .clone();
    let mut columns = [0usize; 9];
    for (slot, name) in columns.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))?;
    }

    let mut out = Vec::new();
    for (i, result) in reader.records().enumerate() {
        let row = i + 1;
        let rec = result.map_err(|e| IngestError::MalformedRow {
            row,
            reason: e.to_string(),
        })?;
        let cell = |c: usize| -> Option<String> {
            rec.get(columns[c])
                .filter(|s| !s.is_empty())
                .map(str::to_string)
        };
        let flag = |c: usize| -> Result<u8, IngestError> {
            parse_flag(rec.get(columns[c]).unwrap_or(""), REQUIRED_COLUMNS[c], row)
        };
        let id = cell(0).ok_or_else(|| IngestError::MalformedRow {
            row,
            reason: "empty id".into(),
        })?;
        out.push(RawRecord {
            id,
            model_a: cell(1),
            model_b: cell(2),
            prompt: cell(3),
            response_a: cell(4),
            response_b: cell(5),
            winner_model_a: flag(6)?,
            winner_model_b: flag(7)?,
            winner_tie: flag(8)?,
        });
    }
    Ok(out)
}

fn parse_flag(s: &str, column: &str, row: usize) -> Result<u8, IngestError> {
    match s.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(IngestError::MalformedRow {
            row,
            reason: format!("{column} must be 0 or 1, got `{other}`"),
        }),
    }
}

fn parse_jsonl<R: Read>(source: R) -> Result<Vec<RawRecord>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let row = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| IngestError::MalformedRow { row, reason };
        let value: Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| malformed("expected a JSON object".into()))?;
        for name in REQUIRED_COLUMNS {
            if !obj.contains_key(name) {
                return Err(IngestError::MissingColumn(name.to_string()));
            }
        }
        let text = |name: &str| -> Result<Option<String>, IngestError> {
            match &obj[name] {
                Value::Null => Ok(None),
                Value::String(s) if s.is_empty() => Ok(None),
                Value::String(s) => Ok(Some(s.clone())),
                Value::Number(n) => Ok(Some(n.to_string())),
                other => Err(malformed(format!(
                    "{name}: expected string or null, got {other}"
                ))),
            }
        };
        let flag = |name: &str| -> Result<u8, IngestError> {
            match &obj[name] {
                Value::Number(n) if n.as_u64() == Some(0) => Ok(0),
                Value::Number(n) if n.as_u64() == Some(1) => Ok(1),
                other => Err(malformed(format!("{name} must be 0 or 1, got {other}"))),
            }
        };
        let id = text("id")?.ok_or_else(|| malformed("empty id".into()))?;
        out.push(RawRecord {
            id,
            model_a: text("model_a")?,
            model_b: text("model_b")?,
            prompt: text("prompt")?,
            response_a: text("response_a")?,
            response_b: text("response_b")?,
            winner_model_a: flag("winner_model_a")?,
            winner_model_b: flag("winner_model_b")?,
            winner_tie: flag("winner_tie")?,
        });
    }
    Ok(out)
}

/// Flattens a JSON array of strings into newline-joined text.
///
/// Anything that is not an array made only of strings is returned as is
/// (trimmed). Unwrapping repeats until the text stops changing, so the result
/// is a fixed point: unwrapping it again is a no-op.
pub fn unwrap_list_string(s: &str) -> String {
    const MAX_DEPTH: usize = 16;
    let mut current = s.trim().to_string();
    for _ in 0..MAX_DEPTH {
        match unwrap_once(&current) {
            Some(next) if next != current => current = next,
            _ => break,
        }
    }
    current
}

fn unwrap_once(s: &str) -> Option<String> {
    if !s.starts_with('[') {
        return None;
    }
    let Ok(Value::Array(items)) = serde_json::from_str::<Value>(s) else {
        return None;
    };
    let parts: Option<Vec<&str>> = items.iter().map(Value::as_str).collect();
    parts.map(|p| p.join("\n").trim().to_string())
}

/// `Ok(None)` when the prompt or a response is missing or empty after
/// unwrapping; an error when the winner flags are not one-hot.
pub fn clean_record(raw: &RawRecord) -> Result<Option<PreferenceRecord>, IngestError> {
    let Some(fields) = clean_texts(raw) else {
        return Ok(None);
    };
    let label = label_from_flags(raw)?;
    let (prompt, response_a, response_b) = fields;
    Ok(Some(PreferenceRecord {
        id: raw.id.clone(),
        prompt,
        response_a,
        response_b,
        label,
    }))
}

fn clean_texts(raw: &RawRecord) -> Option<(String, String, String)> {
    let clean = |f: &Option<String>| {
        f.as_deref()
            .map(unwrap_list_string)
            .filter(|s| !s.is_empty())
    };
    Some((
        clean(&raw.prompt)?,
        clean(&raw.response_a)?,
        clean(&raw.response_b)?,
    ))
}

fn label_from_flags(raw: &RawRecord) -> Result<Label, IngestError> {
    match (raw.winner_model_a, raw.winner_model_b, raw.winner_tie) {
        (1, 0, 0) => Ok(Label::A),
        (0, 1, 0) => Ok(Label::B),
        (0, 0, 1) => Ok(Label::Tie),
        (a, b, tie) => Err(IngestError::InvalidLabel {
            id: raw.id.clone(),
            a,
            b,
            tie,
        }),
    }
}

/// Counts of rows removed during cleaning, by reason.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub null_prompt: usize,
    pub null_response: usize,
    pub invalid_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanOutcome {
    pub records: Vec<PreferenceRecord>,
    pub report: DropReport,
    /// `(id, reason)` for each invalid-label rejection.
    pub rejected: Vec<(String, String)>,
}

pub fn clean_dataset(raws: &[RawRecord]) -> CleanOutcome {
    let mut outcome = CleanOutcome {
        records: Vec::with_capacity(raws.len()),
        report: DropReport::default(),
        rejected: Vec::new(),
    };
    for raw in raws {
        match clean_record(raw) {
            Ok(Some(rec)) => outcome.records.push(rec),
            Ok(None) => {
                let prompt_ok = raw
                    .prompt
                    .as_deref()
                    .map(unwrap_list_string)
                    .is_some_and(|s| !s.is_empty());
                if prompt_ok {
                    outcome.report.null_response += 1;
                } else {
                    outcome.report.null_prompt += 1;
                }
            }
            Err(e) => {
                outcome.report.invalid_label += 1;
                outcome.rejected.push((raw.id.clone(), e.to_string()));
            }
        }
    }
    outcome
}

/// Seeded shuffle followed by contiguous train/validation/test slices.
///
/// Slice sizes use largest-remainder rounding, so each is within one record
/// of `ratio · n` and together they cover every record.
pub fn split_dataset(
    records: &[PreferenceRecord],
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit, IngestError> {
    if records.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0)
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(IngestError::InvalidRatios(ratios));
    }
    let sizes = split_sizes(records.len(), ratios);
    let mut shuffled = records.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(sizes[0] + sizes[1]);
    let validation = shuffled.split_off(sizes[0]);
    Ok(DatasetSplit {
        train: shuffled,
        validation,
        test,
        seed,
    })
}

fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let mut remaining = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    // Largest fractional part first; earlier slices win ties.
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            sizes[i] += 1;
            remaining -= 1;
        }
    }
    sizes
}

pub fn write_records_jsonl<W: Write>(
    mut w: W,
    records: &[PreferenceRecord],
) -> Result<(), IngestError> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records_jsonl<R: Read>(source: R) -> Result<Vec<PreferenceRecord>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| IngestError::MalformedRow {
                row: i + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Writes raw records in the CSV input schema.
pub fn write_raw_csv<W: Write>(w: W, records: &[RawRecord]) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| IngestError::Io(std::io::Error::other(e));
    writer.write_record(REQUIRED_COLUMNS).map_err(csv_err)?;
    for r in records {
        let opt = |s: &Option<String>| s.clone().unwrap_or_default();
        writer
            .write_record([
                r.id.clone(),
                opt(&r.model_a),
                opt(&r.model_b),
                opt(&r.prompt),
                opt(&r.response_a),
                opt(&r.response_b),
                r.winner_model_a.to_string(),
                r.winner_model_b.to_string(),
                r.winner_tie.to_string(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes raw records as JSONL in the input schema (`null` for missing text).
pub fn write_raw_jsonl<W: Write>(mut w: W, records: &[RawRecord]) -> Result<(), IngestError> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "id,model_a,model_b,prompt,response_a,response_b,winner_model_a,winner_model_b,winner_tie\n";

    fn raw(
        id: &str,
        prompt: Option<&str>,
        a: Option<&str>,
        b: Option<&str>,
        flags: (u8, u8, u8),
    ) -> RawRecord {
        RawRecord {
            id: id.into(),
            model_a: Some("m1".into()),
            model_b: Some("m2".into()),
            prompt: prompt.map(Into::into),
            response_a: a.map(Into::into),
            response_b: b.map(Into::into),
            winner_model_a: flags.0,
            winner_model_b: flags.1,
            winner_tie: flags.2,
        }
    }

    fn rec(id: &str) -> PreferenceRecord {
        PreferenceRecord {
            id: id.into(),
            prompt: "p".into(),
            response_a: "a".into(),
            response_b: "b".into(),
            label: Label::A,
        }
    }

    #[test]
    fn csv_row_maps_fields() {
        let src = format!("{HEADER}r1,gpt,claude,\"hi\",\"a\",\"b\",1,0,0\n");
        let rows = parse_dataset(src.as_bytes(), DataFormat::Csv).unwrap();
        assert_eq!(
            rows,
            vec![RawRecord {
                id: "r1".into(),
                model_a: Some("gpt".into()),
                model_b: Some("claude".into()),
                prompt: Some("hi".into()),
                response_a: Some("a".into()),
                response_b: Some("b".into()),
                winner_model_a: 1,
                winner_model_b: 0,
                winner_tie: 0,
            }]
        );
    }

    #[test]
    fn empty_cell_becomes_none() {
        let src = format!("{HEADER}r1,gpt,claude,hi,a,,0,1,0\n");
        let rows = parse_dataset(src.as_bytes(), DataFormat::Csv).unwrap();
        assert_eq!(rows[0].response_b, None);
    }

    #[test]
    fn missing_column_is_a_schema_error() {
        let src = "id,model_a,model_b,prompt,response_a,winner_model_a,winner_model_b,winner_tie\n";
        let err = parse_dataset(src.as_bytes(), DataFormat::Csv).unwrap_err();
        assert!(
            matches!(err, IngestError::MissingColumn(ref c) if c == "response_b"),
            "{err}"
        );
    }

    #[test]
    fn malformed_row_reports_row_number() {
        let src = format!("{HEADER}r1,a,b,p,x,y,1,0,0\nr2,a,b,p,x,y,yes,0,0\n");
        let err = parse_dataset(src.as_bytes(), DataFormat::Csv).unwrap_err();
        assert!(
            matches!(err, IngestError::MalformedRow { row: 2, .. }),
            "{err}"
        );
        let src = format!("{HEADER}r1,a,b,p,x,y,1,0\n");
        let err = parse_dataset(src.as_bytes(), DataFormat::Csv).unwrap_err();
        assert!(
            matches!(err, IngestError::MalformedRow { row: 1, .. }),
            "{err}"
        );
    }

    #[test]
    fn duplicate_ids_reject_the_file() {
        let src = format!("{HEADER}r1,a,b,p,x,y,1,0,0\nr2,a,b,p,x,y,1,0,0\nr1,a,b,p,x,y,0,1,0\n");
        let err = parse_dataset(src.as_bytes(), DataFormat::Csv).unwrap_err();
        assert!(matches!(err, IngestError::DuplicateIds(ref ids) if ids == &["r1".to_string()]));
    }

    #[test]
    fn jsonl_parses_nulls_and_numeric_ids() {
        let src = r#"{"id":7,"model_a":"x","model_b":"y","prompt":"[\"hi\"]","response_a":null,"response_b":"b","winner_model_a":0,"winner_model_b":0,"winner_tie":1}
"#;
        let rows = parse_dataset(src.as_bytes(), DataFormat::Jsonl).unwrap();
        assert_eq!(rows[0].id, "7");
        assert_eq!(rows[0].response_a, None);
        assert_eq!(rows[0].winner_tie, 1);

        let missing = r#"{"id":"a","prompt":"p"}"#;
        assert!(matches!(
            parse_dataset(missing.as_bytes(), DataFormat::Jsonl),
            Err(IngestError::MissingColumn(_))
        ));
    }

    #[test]
    fn unwrap_examples() {
        assert_eq!(unwrap_list_string(r#"["Hello"]"#), "Hello");
        assert_eq!(
            unwrap_list_string(r#"["Line 1","Line 2"]"#),
            "Line 1\nLine 2"
        );
        assert_eq!(unwrap_list_string("plain text"), "plain text");
        assert_eq!(unwrap_list_string("  padded \n"), "padded");
        // Starts with '[' but is not an array of strings.
        assert_eq!(unwrap_list_string("[1, 2]"), "[1, 2]");
        assert_eq!(
            unwrap_list_string("[citation needed] text"),
            "[citation needed] text"
        );
        assert_eq!(unwrap_list_string(r#"["a", null]"#), r#"["a", null]"#);
    }

    #[test]
    fn unwrap_two_items_matches_reference_join() {
        // Reference path: decode with the JSON parser, join by hand.
        let src = r#"["Line 1","Line 2"]"#;
        let parsed: Vec<String> = serde_json::from_str(src).unwrap();
        assert_eq!(unwrap_list_string(src), parsed.join("\n"));
    }

    #[test]
    fn clean_record_examples() {
        assert_eq!(
            clean_record(&raw("r", Some("q"), None, Some("b"), (1, 0, 0))).unwrap(),
            None
        );
        assert_eq!(
            clean_record(&raw("r", Some("q"), Some("  "), Some("b"), (1, 0, 0))).unwrap(),
            None
        );
        assert_eq!(
            clean_record(&raw("r", Some("q"), Some("[]"), Some("b"), (1, 0, 0))).unwrap(),
            None
        );

        let cleaned = clean_record(&raw(
            "r",
            Some(r#"["Q?"]"#),
            Some(r#"["x"]"#),
            Some(r#"["y"]"#),
            (0, 0, 1),
        ))
        .unwrap()
        .unwrap();
        assert_eq!(cleaned.prompt, "Q?");
        assert_eq!(cleaned.response_a, "x");
        assert_eq!(cleaned.label, Label::Tie);

        let err = clean_record(&raw("r", Some("q"), Some("a"), Some("b"), (0, 0, 0))).unwrap_err();
        assert!(matches!(err, IngestError::InvalidLabel { .. }));
        let err = clean_record(&raw("r", Some("q"), Some("a"), Some("b"), (1, 1, 0))).unwrap_err();
        assert!(matches!(err, IngestError::InvalidLabel { .. }));
    }

    #[test]
    fn label_encoding() {
        assert_eq!(encode_label(Label::A).0, [1.0, 0.0, 0.0]);
        assert_eq!(encode_label(Label::B).0, [0.0, 1.0, 0.0]);
        assert_eq!(encode_label(Label::Tie).0, [0.0, 0.0, 1.0]);
        for l in Label::ALL {
            assert_eq!(encode_label(l).label(), l);
        }
    }

    #[test]
    fn split_examples() {
        let records: Vec<_> = (0..10).map(|i| rec(&format!("r{i}"))).collect();
        let s = split_dataset(&records, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        let again = split_dataset(&records, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(s, again);

        let five: Vec<_> = (0..5).map(|i| rec(&format!("r{i}"))).collect();
        let s = split_dataset(&five, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (5, 0, 0));

        assert!(matches!(
            split_dataset(&[], [0.8, 0.1, 0.1], 0),
            Err(IngestError::EmptyInput)
        ));
        assert!(matches!(
            split_dataset(&five, [0.5, 0.6, 0.0], 0),
            Err(IngestError::InvalidRatios(_))
        ));
    }

    #[test]
    fn cleaned_jsonl_key_order() {
        let mut out = Vec::new();
        write_records_jsonl(&mut out, &[rec("r1")]).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "{\"id\":\"r1\",\"prompt\":\"p\",\"response_a\":\"a\",\"response_b\":\"b\",\"label\":\"A\"}\n"
        );
    }

    fn arb_text() -> impl Strategy<Value = Option<String>> {
        prop_oneof![
            Just(None),
            "[ a-zA-Z\\[\\]\",]{0,12}".prop_map(Some),
            prop::collection::vec("[a-z \\[\\]\"]{0,6}", 0..3)
                .prop_map(|v| Some(serde_json::to_string(&v).unwrap())),
        ]
    }

    fn arb_raw() -> impl Strategy<Value = RawRecord> {
        (arb_text(), arb_text(), arb_text(), 0u8..2, 0u8..2, 0u8..2).prop_map(
            |(p, a, b, x, y, z)| RawRecord {
                id: String::new(),
                model_a: None,
                model_b: None,
                prompt: p,
                response_a: a,
                response_b: b,
                winner_model_a: x,
                winner_model_b: y,
                winner_tie: z,
            },
        )
    }

    proptest! {
        #[test]
        fn cleaning_accounts_for_every_row(mut rows in prop::collection::vec(arb_raw(), 0..40)) {
            for (i, r) in rows.iter_mut().enumerate() {
                r.id = format!("id{i}");
            }
            let out = clean_dataset(&rows);
            let r = out.report;
            prop_assert_eq!(rows.len(), out.records.len() + r.null_prompt + r.null_response + r.invalid_label);
        }

        #[test]
        fn cleaning_is_idempotent(row in arb_raw()) {
            if let Ok(Some(rec)) = clean_record(&row) {
                prop_assert_eq!(unwrap_list_string(&rec.prompt), rec.prompt.clone());
                prop_assert_eq!(unwrap_list_string(&rec.response_a), rec.response_a.clone());
                prop_assert_eq!(unwrap_list_string(&rec.response_b), rec.response_b.clone());
            }
        }

        #[test]
        fn split_partitions_ids(n in 1usize..200, seed: u64, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (a, b) = if a + b > 1.0 { (1.0 - a, 1.0 - b) } else { (a, b) };
            let ratios = [a, b, 1.0 - a - b];
            let records: Vec<_> = (0..n).map(|i| rec(&format!("r{i}"))).collect();
            let s = split_dataset(&records, ratios, seed).unwrap();
            let sizes = [s.train.len(), s.validation.len(), s.test.len()];
            for (size, r) in sizes.iter().zip(ratios) {
                prop_assert!((*size as f64 - r * n as f64).abs() <= 1.0 + 1e-9);
            }
            let mut ids: Vec<_> = s.train.iter().chain(&s.validation).chain(&s.test).map(|r| r.id.clone()).collect();
            ids.sort();
            let mut expected: Vec<_> = records.iter().map(|r| r.id.clone()).collect();
            expected.sort();
            prop_assert_eq!(ids, expected);
        }
    }
}
