use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ExpertRegistry, HumanLoopError};
use crate::taxonomy::{ConceptSet, ConceptTaxonomy};

/// An expert's verdict on a case. `Decline` means the expert considers the
/// transaction fraudulent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Approve,
    Decline,
}

impl Decision {
    pub fn from_fraud(fraud: bool) -> Self {
        if fraud {
            Decision::Decline
        } else {
            Decision::Approve
        }
    }

    pub fn is_fraud(self) -> bool {
        self == Decision::Decline
    }

    pub fn flipped(self) -> Self {
        Self::from_fraud(!self.is_fraud())
    }
}

/// A review before the store has assigned it a sequence number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackDraft {
    pub event_id: String,
    pub expert_id: String,
    pub decision: Decision,
    pub concepts: Vec<String>,
    pub model_version_seen: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub seq: u64,
    pub event_id: String,
    pub expert_id: String,
    pub decision: Decision,
    /// Taxonomy order, no duplicates.
    pub concepts: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub model_version_seen: u64,
}

impl FeedbackRecord {
    pub fn concept_set(&self, tax: &ConceptTaxonomy) -> Result<ConceptSet, HumanLoopError> {
        ConceptSet::from_ids(tax, self.concepts.iter().map(String::as_str)).map_err(HumanLoopError::UnknownConcept)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConsumedBatch {
    version: u64,
    seqs: Vec<u64>,
}

/// Append-only feedback log. With a backing file every accepted record is
/// flushed and synced before `submit` returns; consumed sequence numbers go
/// to a `<file>.consumed` sidecar.
#[derive(Debug)]
pub struct FeedbackStore {
    path: Option<PathBuf>,
    file: Option<File>,
    consumed_file: Option<File>,
    records: Vec<FeedbackRecord>,
    latest: HashMap<(String, String), usize>,
    consumed: BTreeSet<u64>,
    replacements: usize,
    superseded_pending: usize,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".consumed");
    PathBuf::from(name)
}

/// Reads complete JSONL lines. An unterminated final line is a torn write
/// from an interrupted append and is cut off.
fn replay_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, File), HumanLoopError> {
    let file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
    let text = std::fs::read_to_string(path)?;
    let complete = text.rfind('\n').map_or(0, |i| i + 1);
    if complete < text.len() {
        file.set_len(complete as u64)?;
        file.sync_data()?;
    }
    let mut out = Vec::new();
    for (i, line) in text[..complete].lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(line).map_err(|e| HumanLoopError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(v);
    }
    Ok((out, file))
}

fn append_line<T: Serialize>(file: &mut File, value: &T) -> io::Result<()> {
    let mut line = serde_json::to_vec(value).map_err(io::Error::other)?;
    line.push(b'\n');
    file.write_all(&line)?;
    file.sync_data()
}

impl FeedbackStore {
    /// A store without persistence.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            file: None,
            consumed_file: None,
            records: Vec::new(),
            latest: HashMap::new(),
            consumed: BTreeSet::new(),
            replacements: 0,
            superseded_pending: 0,
        }
    }

    /// Opens or creates the store at `path` and replays it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, HumanLoopError> {
        let path = path.as_ref().to_path_buf();
        let (records, file) = replay_jsonl::<FeedbackRecord>(&path)?;
        let (batches, consumed_file) = replay_jsonl::<ConsumedBatch>(&sidecar(&path))?;
        let mut store = Self::in_memory();
        store.consumed = batches.into_iter().flat_map(|b| b.seqs).collect();
        for r in records {
            if let Some(last) = store.records.last() {
                if r.seq <= last.seq {
                    return Err(HumanLoopError::Corrupt {
                        path,
                        line: store.records.len() + 1,
                        message: format!("seq {} does not follow {}", r.seq, last.seq),
                    });
                }
            }
            store.index(r);
        }
        store.path = Some(path);
        store.file = Some(file);
        store.consumed_file = Some(consumed_file);
        Ok(store)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn index(&mut self, r: FeedbackRecord) {
        let key = (r.event_id.clone(), r.expert_id.clone());
        if let Some(prev) = self.latest.insert(key, self.records.len()) {
            self.replacements += 1;
            if !self.consumed.contains(&self.records[prev].seq) {
                self.superseded_pending += 1;
            }
        }
        self.records.push(r);
    }

    /// Every stored line in store order, replaced ones included.
    pub fn records(&self) -> &[FeedbackRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn next_seq(&self) -> u64 {
        self.records.last().map_or(1, |r| r.seq + 1)
    }

    /// Resubmissions for an existing (event, expert) pair.
    pub fn replacements(&self) -> usize {
        self.replacements
    }

    /// Records replaced before any tuning batch used them.
    pub fn superseded_pending(&self) -> usize {
        self.superseded_pending
    }

    pub fn consumed_count(&self) -> usize {
        self.consumed.len()
    }

    pub fn is_consumed(&self, seq: u64) -> bool {
        self.consumed.contains(&seq)
    }

    /// The current record for each (event, expert) pair, in seq order.
    pub fn live(&self) -> Vec<&FeedbackRecord> {
        let mut idx: Vec<usize> = self.latest.values().copied().collect();
        idx.sort_unstable();
        idx.into_iter().map(|i| &self.records[i]).collect()
    }

    /// Live records not yet used for tuning, oldest first.
    pub fn pending(&self) -> Vec<&FeedbackRecord> {
        self.live().into_iter().filter(|r| !self.consumed.contains(&r.seq)).collect()
    }

    /// Pending records from qualified experts, oldest first.
    pub fn pending_qualified(&self, experts: &ExpertRegistry) -> Vec<&FeedbackRecord> {
        self.pending()
            .into_iter()
            .filter(|r| experts.get(&r.expert_id).is_some_and(|p| p.qualified))
            .collect()
    }

    pub fn submit(
        &mut self,
        draft: FeedbackDraft,
        tax: &ConceptTaxonomy,
        experts: &ExpertRegistry,
    ) -> Result<u64, HumanLoopError> {
        self.submit_at(draft, tax, experts, Utc::now())
    }

    /// Validates and durably appends a review, returning its seq.
    pub fn submit_at(
        &mut self,
        draft: FeedbackDraft,
        tax: &ConceptTaxonomy,
        experts: &ExpertRegistry,
        at: DateTime<Utc>,
    ) -> Result<u64, HumanLoopError> {
        if !experts.contains_key(&draft.expert_id) {
            return Err(HumanLoopError::UnknownExpert(draft.expert_id));
        }
        if draft.concepts.is_empty() {
            return Err(HumanLoopError::EmptyConcepts);
        }
        let set = ConceptSet::from_ids(tax, draft.concepts.iter().map(String::as_str))
            .map_err(HumanLoopError::UnknownConcept)?;
        let record = FeedbackRecord {
            seq: self.next_seq(),
            event_id: draft.event_id,
            expert_id: draft.expert_id,
            decision: draft.decision,
            concepts: set.ids(tax).into_iter().map(String::from).collect(),
            created_at: at,
            model_version_seen: draft.model_version_seen,
        };
        if let Some(f) = self.file.as_mut() {
            append_line(f, &record)?;
        }
        let seq = record.seq;
        self.index(record);
        Ok(seq)
    }

    /// Records that a committed tuning batch used `seqs`.
    pub fn mark_consumed(&mut self, seqs: &[u64], version: u64) -> Result<(), HumanLoopError> {
        if let Some(f) = self.consumed_file.as_mut() {
            append_line(
                f,
                &ConsumedBatch {
                    version,
                    seqs: seqs.to_vec(),
                },
            )?;
        }
        self.consumed.extend(seqs);
        Ok(())
    }
}
