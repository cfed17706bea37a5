//! JSON-lines artifact formats.
//!
//! Every file starts with a one-line JSON header carrying `format` and
//! `version`, followed by one JSON object per line. Field order is fixed by
//! the serde structs below and floats are written in shortest round-trip
//! form, so identical values always produce identical bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ploss::LinearModel;
use crate::types::{
    AdjustmentMatrix, BoundingBox, Dataset, FeatureRow, ImageRecord, LogitRecord, ObjectInstance, PopulationTable,
    PredictionRow, TripletInstance,
};

pub const DATASET_FORMAT: &str = "tscm-dataset";
pub const LOGITS_FORMAT: &str = "tscm-logits";
pub const POP_FORMAT: &str = "tscm-pop";
pub const ADJ_FORMAT: &str = "tscm-adj";
pub const FEAT_FORMAT: &str = "tscm-feat";
pub const PRED_FORMAT: &str = "tscm-pred";
pub const MODEL_FORMAT: &str = "tscm-model";
pub const FORMAT_VERSION: u32 = 1;

/// Optional header fields recording which run produced an artifact.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub producer: Option<String>,
}

impl Provenance {
    pub fn with_seed(seed: u64) -> Self {
        Provenance {
            seed: Some(seed),
            producer: Some(format!("tscm {}", crate::VERSION)),
        }
    }
}

// ---------------------------------------------------------------------------
// Line schemas
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    #[serde(rename = "C")]
    num_categories: usize,
    #[serde(rename = "K")]
    num_predicates: usize,
    #[serde(flatten)]
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ObjectLine {
    category: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct ImageLine {
    image_id: String,
    objects: Vec<ObjectLine>,
    triplets: Vec<[usize; 3]>,
}

#[derive(Serialize, Deserialize)]
struct KHeader {
    format: String,
    version: u32,
    #[serde(rename = "K")]
    num_predicates: usize,
    #[serde(flatten)]
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct PopHeader {
    format: String,
    version: u32,
    #[serde(rename = "K")]
    num_predicates: usize,
    alpha: usize,
    #[serde(flatten)]
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct PopLine {
    predicate: usize,
    population: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdjHeader {
    format: String,
    version: u32,
    #[serde(rename = "K")]
    num_predicates: usize,
    beta: usize,
    #[serde(flatten)]
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct AdjLine {
    predicate: usize,
    factors: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FeatHeader {
    format: String,
    version: u32,
    d: usize,
    #[serde(flatten)]
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    version: u32,
    #[serde(rename = "K")]
    num_predicates: usize,
    d: usize,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    #[serde(default)]
    loss_trace: Vec<f64>,
    #[serde(flatten)]
    provenance: Provenance,
}

// ---------------------------------------------------------------------------
// Generic JSON-lines plumbing
// ---------------------------------------------------------------------------

struct Lines {
    header: (usize, String),
    body: Vec<(usize, String)>,
}

fn split_lines<R: BufRead>(reader: R) -> Result<Lines> {
    let mut header = None;
    let mut body = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            header = Some((idx + 1, line));
        } else {
            body.push((idx + 1, line));
        }
    }
    let header = header.ok_or(Error::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    Ok(Lines { header, body })
}

fn parse_line<T: DeserializeOwned>(line_no: usize, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })
}

fn parse_header<H: DeserializeOwned>(header: &(usize, String), expected: &str) -> Result<H> {
    let (line_no, text) = header;
    let value: serde_json::Value = parse_line(*line_no, text)?;
    let format = value.get("format").and_then(|f| f.as_str());
    if format != Some(expected) {
        return Err(Error::Parse {
            line: *line_no,
            message: format!("expected format {expected:?}, found {format:?}"),
        });
    }
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Parse {
            line: *line_no,
            message: format!("unsupported version {version:?}"),
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Parse {
        line: *line_no,
        message: e.to_string(),
    })
}

fn write_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn save_with<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    body(&mut out)?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn stream_err(e: std::io::Error) -> Error {
    Error::io("<stream>", e)
}

fn with_path(path: &Path, err: Error) -> Error {
    match err {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let lines = split_lines(reader)?;
    let header: DatasetHeader = parse_header(&lines.header, DATASET_FORMAT)?;
    let mut records = Vec::with_capacity(lines.body.len());
    for (line_no, text) in &lines.body {
        let img: ImageLine = parse_line(*line_no, text)?;
        let mut objects = Vec::with_capacity(img.objects.len());
        for obj in img.objects {
            let [cx, cy, h, w] = obj.bbox;
            let bbox = BoundingBox::new(cx, cy, h, w).map_err(|e| Error::Parse {
                line: *line_no,
                message: format!("image {:?}: {e}", img.image_id),
            })?;
            objects.push(ObjectInstance {
                category: obj.category,
                bbox,
            });
        }
        let triplets = img
            .triplets
            .iter()
            .map(|&[s, o, p]| TripletInstance {
                subject_idx: s,
                object_idx: o,
                predicate: p,
            })
            .collect();
        records.push(ImageRecord {
            image_id: img.image_id,
            objects,
            triplets,
        });
    }
    Dataset::new(header.num_categories, header.num_predicates, records)
}

pub fn write_dataset<W: Write>(out: &mut W, dataset: &Dataset, provenance: &Provenance) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        num_categories: dataset.num_categories(),
        num_predicates: dataset.num_predicates(),
        provenance: provenance.clone(),
    };
    write_line(out, &header).map_err(stream_err)?;
    for rec in dataset.records() {
        let line = ImageLine {
            image_id: rec.image_id.clone(),
            objects: rec
                .objects
                .iter()
                .map(|o| ObjectLine {
                    category: o.category,
                    bbox: o.bbox.as_array(),
                })
                .collect(),
            triplets: rec
                .triplets
                .iter()
                .map(|t| [t.subject_idx, t.object_idx, t.predicate])
                .collect(),
        };
        write_line(out, &line).map_err(stream_err)?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(open(path)?).map_err(|e| with_path(path, e))
}

pub fn save_dataset(path: &Path, dataset: &Dataset, provenance: &Provenance) -> Result<()> {
    save_with(path, |out| write_dataset(out, dataset, provenance)).map_err(|e| with_path(path, e))
}

// ---------------------------------------------------------------------------
// Logit dumps
// ---------------------------------------------------------------------------

/// A logit dump together with its class count, which is needed to interpret
/// an empty dump.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitDump {
    pub num_predicates: usize,
    pub records: Vec<LogitRecord>,
}

pub fn read_logits<R: BufRead>(reader: R) -> Result<LogitDump> {
    let lines = split_lines(reader)?;
    let header: KHeader = parse_header(&lines.header, LOGITS_FORMAT)?;
    let k = header.num_predicates;
    let mut records = Vec::with_capacity(lines.body.len());
    for (line_no, text) in &lines.body {
        let rec: LogitRecord = parse_line(*line_no, text)?;
        rec.validate(k).map_err(|e| Error::Parse {
            line: *line_no,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(LogitDump {
        num_predicates: k,
        records,
    })
}

pub fn write_logits<W: Write>(out: &mut W, dump: &LogitDump, provenance: &Provenance) -> Result<()> {
    for rec in &dump.records {
        rec.validate(dump.num_predicates)?;
    }
    let header = KHeader {
        format: LOGITS_FORMAT.into(),
        version: FORMAT_VERSION,
        num_predicates: dump.num_predicates,
        provenance: provenance.clone(),
    };
    write_line(out, &header).map_err(stream_err)?;
    for rec in &dump.records {
        write_line(out, rec).map_err(stream_err)?;
    }
    Ok(())
}

pub fn load_logits(path: &Path) -> Result<LogitDump> {
    read_logits(open(path)?).map_err(|e| with_path(path, e))
}

pub fn save_logits(path: &Path, dump: &LogitDump, provenance: &Provenance) -> Result<()> {
    save_with(path, |out| write_logits(out, dump, provenance)).map_err(|e| with_path(path, e))
}

// ---------------------------------------------------------------------------
// Population tables
// ---------------------------------------------------------------------------

pub fn read_populations<R: BufRead>(reader: R) -> Result<PopulationTable> {
    let lines = split_lines(reader)?;
    let header: PopHeader = parse_header(&lines.header, POP_FORMAT)?;
    let k = header.num_predicates;
    if lines.body.len() != k {
        return Err(Error::Parse {
            line: lines.header.0,
            message: format!("expected {k} population lines, found {}", lines.body.len()),
        });
    }
    let mut populations = vec![None; k];
    for (line_no, text) in &lines.body {
        let pl: PopLine = parse_line(*line_no, text)?;
        let slot = populations.get_mut(pl.predicate).ok_or_else(|| Error::Parse {
            line: *line_no,
            message: format!("predicate {} >= K={k}", pl.predicate),
        })?;
        if slot.replace(pl.population).is_some() {
            return Err(Error::Parse {
                line: *line_no,
                message: format!("duplicate predicate {}", pl.predicate),
            });
        }
    }
    let populations = populations.into_iter().map(Option::unwrap_or_default).collect();
    PopulationTable::new(header.alpha, populations)
}

pub fn write_populations<W: Write>(out: &mut W, table: &PopulationTable, provenance: &Provenance) -> Result<()> {
    let header = PopHeader {
        format: POP_FORMAT.into(),
        version: FORMAT_VERSION,
        num_predicates: table.num_predicates(),
        alpha: table.alpha(),
        provenance: provenance.clone(),
    };
    write_line(out, &header).map_err(stream_err)?;
    for (predicate, pop) in table.populations().iter().enumerate() {
        let line = PopLine {
            predicate,
            population: pop.clone(),
        };
        write_line(out, &line).map_err(stream_err)?;
    }
    Ok(())
}

pub fn load_populations(path: &Path) -> Result<PopulationTable> {
    read_populations(open(path)?).map_err(|e| with_path(path, e))
}

pub fn save_populations(path: &Path, table: &PopulationTable, provenance: &Provenance) -> Result<()> {
    save_with(path, |out| write_populations(out, table, provenance)).map_err(|e| with_path(path, e))
}

// ---------------------------------------------------------------------------
// Adjustment matrices
// ---------------------------------------------------------------------------

pub fn read_adjustment<R: BufRead>(reader: R) -> Result<AdjustmentMatrix> {
    let lines = split_lines(reader)?;
    let header: AdjHeader = parse_header(&lines.header, ADJ_FORMAT)?;
    let k = header.num_predicates;
    if lines.body.len() != k {
        return Err(Error::Parse {
            line: lines.header.0,
            message: format!("expected {k} factor lines, found {}", lines.body.len()),
        });
    }
    let mut rows = vec![None; k];
    for (line_no, text) in &lines.body {
        let al: AdjLine = parse_line(*line_no, text)?;
        let slot = rows.get_mut(al.predicate).ok_or_else(|| Error::Parse {
            line: *line_no,
            message: format!("predicate {} >= K={k}", al.predicate),
        })?;
        if slot.replace(al.factors).is_some() {
            return Err(Error::Parse {
                line: *line_no,
                message: format!("duplicate predicate {}", al.predicate),
            });
        }
    }
    let rows = rows.into_iter().map(Option::unwrap_or_default).collect();
    AdjustmentMatrix::new(header.beta, rows)
}

pub fn write_adjustment<W: Write>(out: &mut W, matrix: &AdjustmentMatrix, provenance: &Provenance) -> Result<()> {
    let header = AdjHeader {
        format: ADJ_FORMAT.into(),
        version: FORMAT_VERSION,
        num_predicates: matrix.num_predicates(),
        beta: matrix.beta(),
        provenance: provenance.clone(),
    };
    write_line(out, &header).map_err(stream_err)?;
    for (predicate, row) in matrix.rows().iter().enumerate() {
        let line = AdjLine {
            predicate,
            factors: row.clone(),
        };
        write_line(out, &line).map_err(stream_err)?;
    }
    Ok(())
}

pub fn load_adjustment(path: &Path) -> Result<AdjustmentMatrix> {
    read_adjustment(open(path)?).map_err(|e| with_path(path, e))
}

pub fn save_adjustment(path: &Path, matrix: &AdjustmentMatrix, provenance: &Provenance) -> Result<()> {
    save_with(path, |out| write_adjustment(out, matrix, provenance)).map_err(|e| with_path(path, e))
}

// ---------------------------------------------------------------------------
// Feature files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub rows: Vec<FeatureRow>,
}

impl FeatureSet {
    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label).collect()
    }
}

pub fn read_features<R: BufRead>(reader: R) -> Result<FeatureSet> {
    let lines = split_lines(reader)?;
    let header: FeatHeader = parse_header(&lines.header, FEAT_FORMAT)?;
    let mut rows = Vec::with_capacity(lines.body.len());
    for (line_no, text) in &lines.body {
        let row: FeatureRow = parse_line(*line_no, text)?;
        if row.x.len() != header.d {
            return Err(Error::Parse {
                line: *line_no,
                message: format!(
                    "feature arity mismatch: {} values, expected d={}",
                    row.x.len(),
                    header.d
                ),
            });
        }
        if row.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: *line_no,
                message: "non-finite feature value".into(),
            });
        }
        rows.push(row);
    }
    Ok(FeatureSet { dim: header.d, rows })
}

pub fn write_features<W: Write>(out: &mut W, features: &FeatureSet, provenance: &Provenance) -> Result<()> {
    if let Some(bad) = features
        .rows
        .iter()
        .position(|r| r.x.len() != features.dim || r.x.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::invalid("feature set", format!("row {bad} is malformed")));
    }
    let header = FeatHeader {
        format: FEAT_FORMAT.into(),
        version: FORMAT_VERSION,
        d: features.dim,
        provenance: provenance.clone(),
    };
    write_line(out, &header).map_err(stream_err)?;
    for row in &features.rows {
        write_line(out, row).map_err(stream_err)?;
    }
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureSet> {
    read_features(open(path)?).map_err(|e| with_path(path, e))
}

pub fn save_features(path: &Path, features: &FeatureSet, provenance: &Provenance) -> Result<()> {
    save_with(path, |out| write_features(out, features, provenance)).map_err(|e| with_path(path, e))
}

// ---------------------------------------------------------------------------
// Prediction files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub num_predicates: usize,
    pub rows: Vec<PredictionRow>,
}

pub fn read_predictions<R: BufRead>(reader: R) -> Result<PredictionSet> {
    let lines = split_lines(reader)?;
    let header: KHeader = parse_header(&lines.header, PRED_FORMAT)?;
    let k = header.num_predicates;
    let mut rows = Vec::with_capacity(lines.body.len());
    for (line_no, text) in &lines.body {
        let row: PredictionRow = parse_line(*line_no, text)?;
        if row.score.len() != k || row.gt >= k || row.pred >= k {
            return Err(Error::Parse {
                line: *line_no,
                message: format!("prediction row inconsistent with K={k}"),
            });
        }
        rows.push(row);
    }
    Ok(PredictionSet {
        num_predicates: k,
        rows,
    })
}

pub fn write_predictions<W: Write>(out: &mut W, preds: &PredictionSet, provenance: &Provenance) -> Result<()> {
    let header = KHeader {
        format: PRED_FORMAT.into(),
        version: FORMAT_VERSION,
        num_predicates: preds.num_predicates,
        provenance: provenance.clone(),
    };
    write_line(out, &header).map_err(stream_err)?;
    for row in &preds.rows {
        if row.score.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                format!("prediction ({:?}, {})", row.image_id, row.pair_id),
                "non-finite score",
            ));
        }
        write_line(out, row).map_err(stream_err)?;
    }
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<PredictionSet> {
    read_predictions(open(path)?).map_err(|e| with_path(path, e))
}

pub fn save_predictions(path: &Path, preds: &PredictionSet, provenance: &Provenance) -> Result<()> {
    save_with(path, |out| write_predictions(out, preds, provenance)).map_err(|e| with_path(path, e))
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

pub fn read_model<R: Read>(mut reader: R) -> Result<LinearModel> {
    let mut text = String::new();
    reader.read_to_string(&mut text).map_err(stream_err)?;
    let doc: ModelDoc = parse_header(&(1, text), MODEL_FORMAT)?;
    let model = LinearModel::from_parts(doc.weights, doc.bias, doc.loss_trace)?;
    if model.num_classes() != doc.num_predicates || model.dim() != doc.d {
        return Err(Error::invalid("model", "header shape disagrees with weights"));
    }
    Ok(model)
}

pub fn write_model<W: Write>(out: &mut W, model: &LinearModel, provenance: &Provenance) -> Result<()> {
    let doc = ModelDoc {
        format: MODEL_FORMAT.into(),
        version: FORMAT_VERSION,
        num_predicates: model.num_classes(),
        d: model.dim(),
        weights: model.weights().to_vec(),
        bias: model.bias().to_vec(),
        loss_trace: model.loss_trace().to_vec(),
        provenance: provenance.clone(),
    };
    write_line(out, &doc).map_err(stream_err)
}

pub fn load_model(path: &Path) -> Result<LinearModel> {
    read_model(open(path)?).map_err(|e| with_path(path, e))
}

pub fn save_model(path: &Path, model: &LinearModel, provenance: &Provenance) -> Result<()> {
    save_with(path, |out| write_model(out, model, provenance)).map_err(|e| with_path(path, e))
}

/// Read just the `K` declared by any tscm header line.
pub fn peek_num_predicates(path: &Path) -> Result<Option<usize>> {
    let mut reader = open(path)?;
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = parse_line(1, &first)?;
    Ok(value.get("K").and_then(|k| k.as_u64()).map(|k| k as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn fixture_dataset_text() -> &'static str {
        concat!(
            r#"{"format":"tscm-dataset","version":1,"C":3,"K":4}"#,
            "\n",
            r#"{"image_id":"img0","objects":[{"category":0,"box":[10,10,4,4]},{"category":2,"box":[20,10,4,6]}],"triplets":[[0,1,3]]}"#,
            "\n"
        )
    }

    #[test]
    fn loads_two_line_fixture() {
        let ds = read_dataset(Cursor::new(fixture_dataset_text())).unwrap();
        assert_eq!(ds.num_predicates(), 4);
        assert_eq!(ds.num_categories(), 3);
        assert_eq!(ds.records().len(), 1);
        assert_eq!(ds.records()[0].triplets[0].predicate, 3);
        assert_eq!(ds.records()[0].objects[1].bbox.w, 6.0);
    }

    #[test]
    fn dataset_write_is_byte_stable_and_round_trips() {
        let ds = read_dataset(Cursor::new(fixture_dataset_text())).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_dataset(&mut a, &ds, &Provenance::default()).unwrap();
        write_dataset(&mut b, &ds, &Provenance::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(read_dataset(Cursor::new(&a)).unwrap(), ds);
    }

    #[test]
    fn empty_records_are_valid() {
        let text = r#"{"format":"tscm-dataset","version":1,"C":3,"K":4}"#;
        let ds = read_dataset(Cursor::new(text)).unwrap();
        assert_eq!(ds.records().len(), 0);
    }

    #[test]
    fn invalid_object_index_is_rejected() {
        let text = concat!(
            r#"{"format":"tscm-dataset","version":1,"C":3,"K":4}"#,
            "\n",
            r#"{"image_id":"a","objects":[{"category":0,"box":[1,1,1,1]},{"category":0,"box":[2,2,1,1]}],"triplets":[[0,7,1]]}"#,
        );
        let err = read_dataset(Cursor::new(text)).unwrap_err();
        assert!(err.to_string().contains("invalid object index"), "{err}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = concat!(
            r#"{"format":"tscm-dataset","version":1,"C":3,"K":4}"#,
            "\n",
            r#"{"image_id":"a","objects":[],"triplets":[]}"#,
            "\n",
            "{not json\n"
        );
        match read_dataset(Cursor::new(text)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_corpus_is_rejected_without_panicking() {
        let header = r#"{"format":"tscm-dataset","version":1,"C":3,"K":4}"#;
        let bodies = [
            r#"{"image_id":"a","objects":[{"category":5,"box":[1,1,1,1]}],"triplets":[]}"#,
            r#"{"image_id":"a","objects":[{"category":0,"box":[1,1,0,1]}],"triplets":[]}"#,
            r#"{"image_id":"a","objects":[{"category":0,"box":[1,1,1]}],"triplets":[]}"#,
            r#"{"image_id":"a","objects":[{"category":0,"box":[1,1,1,1]},{"category":0,"box":[1,1,1,1]}],"triplets":[[0,1,9]]}"#,
            r#"{"image_id":"a","objects":[{"category":0,"box":[1,1,1,1]}],"triplets":[[0,0,1]]}"#,
            r#"{"image_id":"a","objects":[],"triplets":[[-1,0,1]]}"#,
            r#"{"image_id":7,"objects":[],"triplets":[]}"#,
            r#"[]"#,
        ];
        for body in bodies {
            let text = format!("{header}\n{body}\n");
            assert!(read_dataset(Cursor::new(text)).is_err(), "accepted {body}");
        }
        let dup = format!(
            "{header}\n{}\n{}\n",
            r#"{"image_id":"a","objects":[],"triplets":[]}"#, r#"{"image_id":"a","objects":[],"triplets":[]}"#
        );
        assert!(read_dataset(Cursor::new(dup)).is_err());
        for bad_header in [
            "",
            r#"{"format":"tscm-logits","version":1,"C":3,"K":4}"#,
            r#"{"format":"tscm-dataset","version":2,"C":3,"K":4}"#,
            r#"{"format":"tscm-dataset","version":1,"C":3,"K":1}"#,
            r#"{"format":"tscm-dataset","version":1,"K":4}"#,
        ] {
            assert!(read_dataset(Cursor::new(bad_header)).is_err(), "accepted {bad_header}");
        }
    }

    #[test]
    fn logit_arity_mismatch() {
        let text = concat!(
            r#"{"format":"tscm-logits","version":1,"K":3}"#,
            "\n",
            r#"{"image_id":"a","pair_id":0,"gt":1,"fg":[0.5,1.0,2.0],"bg":0.5}"#,
            "\n",
            r#"{"image_id":"a","pair_id":1,"gt":1,"fg":[0.5,1.0],"bg":0.5}"#,
            "\n",
        );
        let err = read_logits(Cursor::new(text)).unwrap_err();
        assert!(err.to_string().contains("logit arity mismatch"), "{err}");
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn identity_adjustment_round_trips() {
        let m = AdjustmentMatrix::identity(4, 3);
        let mut buf = Vec::new();
        write_adjustment(&mut buf, &m, &Provenance::with_seed(9)).unwrap();
        assert_eq!(read_adjustment(Cursor::new(&buf)).unwrap(), m);
    }

    #[test]
    fn population_file_has_one_line_per_predicate() {
        let k = 50;
        let pops = (0..k).map(|c| (1..=5).map(|o| (c + o) % k).collect()).collect();
        let table = PopulationTable::new(5, pops).unwrap();
        let mut buf = Vec::new();
        write_populations(&mut buf, &table, &Provenance::default()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 50);
        assert_eq!(read_populations(Cursor::new(text)).unwrap(), table);
    }

    #[test]
    fn provenance_is_embedded_and_ignored_on_load() {
        let m = AdjustmentMatrix::identity(2, 1);
        let mut buf = Vec::new();
        write_adjustment(&mut buf, &m, &Provenance::with_seed(42)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first = text.lines().next().unwrap();
        assert!(
            first.starts_with(r#"{"format":"tscm-adj","version":1,"K":2,"beta":1,"seed":42"#),
            "{first}"
        );
        assert_eq!(read_adjustment(Cursor::new(text)).unwrap(), m);
    }

    #[test]
    fn floats_survive_round_trip_exactly() {
        let dump = LogitDump {
            num_predicates: 2,
            records: vec![LogitRecord {
                image_id: "x".into(),
                pair_id: 3,
                gt_predicate: 1,
                fg_logits: vec![0.1 + 0.2, -1.0 / 3.0],
                bg_logit: 1e-300,
            }],
        };
        let mut buf = Vec::new();
        write_logits(&mut buf, &dump, &Provenance::default()).unwrap();
        assert_eq!(read_logits(Cursor::new(buf)).unwrap(), dump);
    }

    #[test]
    fn non_finite_values_are_refused_on_write() {
        let dump = LogitDump {
            num_predicates: 2,
            records: vec![LogitRecord {
                image_id: "x".into(),
                pair_id: 0,
                gt_predicate: 0,
                fg_logits: vec![f64::NAN, 0.0],
                bg_logit: 1.0,
            }],
        };
        assert!(write_logits(&mut Vec::new(), &dump, &Provenance::default()).is_err());
    }
}
