use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};

use super::DatasetError;
use crate::taxonomy::{ConceptSet, ConceptTaxonomy};

const NUM_PREFIX: &str = "num_";
const CAT_PREFIX: &str = "cat_";

#[derive(Debug, Clone, PartialEq)]
pub struct RawEvent {
    pub event_id: String,
    pub timestamp: DateTime<Utc>,
    pub numeric_features: BTreeMap<String, Option<f64>>,
    pub categorical_features: BTreeMap<String, Option<String>>,
    pub fraud_label: bool,
    pub triggered_rules: Vec<String>,
}

impl RawEvent {
    pub fn new(
        event_id: &str,
        timestamp: DateTime<Utc>,
        fraud_label: bool,
        triggered_rules: Vec<String>,
    ) -> Self {
        Self {
            event_id: event_id.to_string(),
            timestamp,
            numeric_features: BTreeMap::new(),
            categorical_features: BTreeMap::new(),
            fraud_label,
            triggered_rules,
        }
    }

    pub fn with_numeric(mut self, name: &str, value: Option<f64>) -> Self {
        self.numeric_features.insert(name.to_string(), value);
        self
    }

    pub fn with_categorical(mut self, name: &str, value: Option<&str>) -> Self {
        self.categorical_features
            .insert(name.to_string(), value.map(str::to_string));
        self
    }
}

/// A raw event enriched with its concept annotation in taxonomy order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedEvent {
    pub event: RawEvent,
    pub concepts: ConceptSet,
}

#[derive(Debug, Clone)]
pub struct EventFile<T> {
    pub rows: Vec<T>,
    /// Rows dropped because their event_id had already been seen.
    pub duplicates: usize,
}

struct Layout {
    id: usize,
    timestamp: usize,
    label: usize,
    rules: usize,
    concepts: Option<usize>,
    numeric: Vec<(usize, String)>,
    categorical: Vec<(usize, String)>,
}

impl Layout {
    fn from_header(header: &csv::StringRecord) -> Result<Self, DatasetError> {
        let find = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DatasetError::Format {
                    line: 1,
                    message: format!("missing column {name:?}"),
                })
        };
        let mut numeric = Vec::new();
        let mut categorical = Vec::new();
        for (i, h) in header.iter().enumerate() {
            if let Some(name) = h.strip_prefix(NUM_PREFIX) {
                numeric.push((i, name.to_string()));
            } else if let Some(name) = h.strip_prefix(CAT_PREFIX) {
                categorical.push((i, name.to_string()));
            }
        }
        Ok(Self {
            id: find("event_id")?,
            timestamp: find("timestamp")?,
            label: find("label")?,
            rules: find("rules")?,
            concepts: header.iter().position(|h| h == "concepts"),
            numeric,
            categorical,
        })
    }

    fn parse(&self, rec: &csv::StringRecord, line: usize) -> Result<RawEvent, DatasetError> {
        let fmt = |message: String| DatasetError::Format { line, message };
        let field = |i: usize| rec.get(i).unwrap_or("");
        let event_id = field(self.id).trim();
        if event_id.is_empty() {
            return Err(fmt("empty event_id".into()));
        }
        let timestamp = DateTime::parse_from_rfc3339(field(self.timestamp).trim())
            .map_err(|e| fmt(format!("bad timestamp {:?}: {e}", field(self.timestamp))))?
            .with_timezone(&Utc);
        let fraud_label = match field(self.label).trim() {
            "0" => false,
            "1" => true,
            other => return Err(fmt(format!("label must be 0 or 1, got {other:?}"))),
        };
        let mut numeric_features = BTreeMap::new();
        for (i, name) in &self.numeric {
            let cell = field(*i).trim();
            let value = if cell.is_empty() {
                None
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| fmt(format!("bad numeric value {cell:?} for {name}")))?;
                if !v.is_finite() {
                    return Err(fmt(format!("non-finite value for {name}")));
                }
                Some(v)
            };
            numeric_features.insert(name.clone(), value);
        }
        let mut categorical_features = BTreeMap::new();
        for (i, name) in &self.categorical {
            let cell = field(*i);
            let value = (!cell.is_empty()).then(|| cell.to_string());
            categorical_features.insert(name.clone(), value);
        }
        Ok(RawEvent {
            event_id: event_id.to_string(),
            timestamp,
            numeric_features,
            categorical_features,
            fraud_label,
            triggered_rules: split_list(field(self.rules)),
        })
    }
}

fn split_list(cell: &str) -> Vec<String> {
    cell.split('|')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn read_rows<R: Read, T>(
    reader: R,
    mut parse: impl FnMut(&Layout, &csv::StringRecord, usize) -> Result<T, DatasetError>,
    id_of: impl Fn(&T) -> &str,
) -> Result<EventFile<T>, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let header = rdr.headers()?.clone();
    let layout = Layout::from_header(&header)?;
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    let mut duplicates = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let row = parse(&layout, &rec, line)?;
        if seen.insert(id_of(&row).to_string()) {
            rows.push(row);
        } else {
            duplicates += 1;
        }
    }
    Ok(EventFile { rows, duplicates })
}

pub fn read_events_from<R: Read>(reader: R) -> Result<EventFile<RawEvent>, DatasetError> {
    read_rows(reader, |l, rec, line| l.parse(rec, line), |e| &e.event_id)
}

pub fn read_events(path: impl AsRef<Path>) -> Result<EventFile<RawEvent>, DatasetError> {
    read_events_from(open(path.as_ref())?)
}

pub fn read_annotated_from<R: Read>(
    reader: R,
    tax: &ConceptTaxonomy,
) -> Result<EventFile<AnnotatedEvent>, DatasetError> {
    read_rows(
        reader,
        |layout, rec, line| {
            let event = layout.parse(rec, line)?;
            let col = layout.concepts.ok_or_else(|| DatasetError::Format {
                line: 1,
                message: "missing column \"concepts\"".into(),
            })?;
            let ids = split_list(rec.get(col).unwrap_or(""));
            let concepts = ConceptSet::from_ids(tax, ids.iter().map(String::as_str))
                .map_err(|id| DatasetError::UnknownConcept { line, id })?;
            Ok(AnnotatedEvent { event, concepts })
        },
        |a| &a.event.event_id,
    )
}

pub fn read_annotated(
    path: impl AsRef<Path>,
    tax: &ConceptTaxonomy,
) -> Result<EventFile<AnnotatedEvent>, DatasetError> {
    read_annotated_from(open(path.as_ref())?, tax)
}

fn open(path: &Path) -> Result<std::fs::File, DatasetError> {
    std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn feature_names<'a>(events: impl Iterator<Item = &'a RawEvent> + Clone) -> (Vec<String>, Vec<String>) {
    let numeric: BTreeSet<&String> = events
        .clone()
        .flat_map(|e| e.numeric_features.keys())
        .collect();
    let categorical: BTreeSet<&String> = events.flat_map(|e| e.categorical_features.keys()).collect();
    (
        numeric.into_iter().cloned().collect(),
        categorical.into_iter().cloned().collect(),
    )
}

fn format_f64(v: f64) -> String {
    // `{}` on f64 prints the shortest representation that round-trips.
    format!("{v}")
}

fn event_cells(e: &RawEvent) -> Vec<String> {
    vec![
        e.event_id.clone(),
        e.timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true),
        if e.fraud_label { "1" } else { "0" }.to_string(),
        e.triggered_rules.join("|"),
    ]
}

fn write_rows<W: Write>(
    writer: W,
    events: &[&RawEvent],
    concepts: Option<(&[&ConceptSet], &ConceptTaxonomy)>,
) -> Result<(), DatasetError> {
    let (numeric, categorical) = feature_names(events.iter().copied());
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["event_id", "timestamp", "label", "rules"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if concepts.is_some() {
        header.push("concepts".into());
    }
    header.extend(numeric.iter().map(|n| format!("{NUM_PREFIX}{n}")));
    header.extend(categorical.iter().map(|n| format!("{CAT_PREFIX}{n}")));
    wtr.write_record(&header)?;
    for (i, e) in events.iter().enumerate() {
        let mut cells = event_cells(e);
        if let Some((sets, tax)) = concepts {
            cells.push(sets[i].ids(tax).join("|"));
        }
        for n in &numeric {
            cells.push(
                e.numeric_features
                    .get(n)
                    .copied()
                    .flatten()
                    .map(format_f64)
                    .unwrap_or_default(),
            );
        }
        for n in &categorical {
            cells.push(
                e.categorical_features
                    .get(n)
                    .cloned()
                    .flatten()
                    .unwrap_or_default(),
            );
        }
        wtr.write_record(&cells)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_events_to<W: Write>(writer: W, events: &[RawEvent]) -> Result<(), DatasetError> {
    let refs: Vec<&RawEvent> = events.iter().collect();
    write_rows(writer, &refs, None)
}

pub fn write_events(path: impl AsRef<Path>, events: &[RawEvent]) -> Result<(), DatasetError> {
    write_events_to(create(path.as_ref())?, events)
}

pub fn write_annotated_to<W: Write>(
    writer: W,
    rows: &[AnnotatedEvent],
    tax: &ConceptTaxonomy,
) -> Result<(), DatasetError> {
    let events: Vec<&RawEvent> = rows.iter().map(|r| &r.event).collect();
    let sets: Vec<&ConceptSet> = rows.iter().map(|r| &r.concepts).collect();
    write_rows(writer, &events, Some((&sets, tax)))
}

pub fn write_annotated(
    path: impl AsRef<Path>,
    rows: &[AnnotatedEvent],
    tax: &ConceptTaxonomy,
) -> Result<(), DatasetError> {
    write_annotated_to(create(path.as_ref())?, rows, tax)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, DatasetError> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
}
