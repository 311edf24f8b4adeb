use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use joel_core::dataset::{FeatureCodec, RawEvent};
use joel_core::human_loop::{
    check_codec, force_tune, jaccard, maybe_tune, Decision, ExpertProfile, ExpertRegistry, FeedbackDraft, FeedbackStore,
    HumanLoopError, TuneConfig, TuneOutcome,
};
use joel_core::model::{JoelNetwork, Prediction};
use joel_core::taxonomy::{ConceptSet, ConceptTaxonomy};

pub const DEFAULT_BAND: (f64, f64) = (0.05, 0.95);
pub const DEFAULT_CLAIM_TTL_SECS: i64 = 15 * 60;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown expert {0:?}")]
    UnknownExpert(String),
    #[error("missing X-Expert-Id header")]
    MissingExpert,
    #[error("unknown case {0:?}")]
    UnknownCase(String),
    #[error("case {0:?} is not claimed by this expert")]
    NotClaimed(String),
    #[error("invalid concepts: {0}")]
    InvalidConcepts(String),
    #[error("admin token required")]
    Forbidden,
    #[error("{0}")]
    Internal(String),
}

impl From<HumanLoopError> for ServiceError {
    fn from(e: HumanLoopError) -> Self {
        match e {
            HumanLoopError::UnknownExpert(id) => ServiceError::UnknownExpert(id),
            HumanLoopError::UnknownConcept(c) => ServiceError::InvalidConcepts(format!("unknown concept {c:?}")),
            HumanLoopError::EmptyConcepts => ServiceError::InvalidConcepts("at least one concept is required".into()),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
#[derive(Clone)]
pub struct ManualClock(Arc<Mutex<DateTime<Utc>>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self(Arc::new(Mutex::new(start)))
    }

    pub fn advance(&self, by: Duration) {
        *self.0.lock().expect("clock lock") += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().expect("clock lock")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    /// Only events scoring inside `[lo, hi]` are queued for review.
    pub band: (f64, f64),
    pub claim_ttl: Duration,
    pub admin_token: Option<String>,
    pub tune: TuneConfig,
    /// Register unknown expert ids on first contact instead of rejecting them.
    pub open_registration: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            band: DEFAULT_BAND,
            claim_ttl: Duration::seconds(DEFAULT_CLAIM_TTL_SECS),
            admin_token: None,
            tune: TuneConfig::default(),
            open_registration: false,
        }
    }
}

impl ServiceConfig {
    /// Applies `JOEL_ADMIN_TOKEN` and `JOEL_CLAIM_TTL_SECS` when set.
    pub fn with_env(mut self) -> Result<Self, String> {
        if let Ok(token) = std::env::var("JOEL_ADMIN_TOKEN") {
            if !token.is_empty() {
                self.admin_token = Some(token);
            }
        }
        if let Ok(ttl) = std::env::var("JOEL_CLAIM_TTL_SECS") {
            let secs: i64 = ttl.parse().map_err(|_| format!("JOEL_CLAIM_TTL_SECS must be an integer, got {ttl:?}"))?;
            if secs <= 0 {
                return Err("JOEL_CLAIM_TTL_SECS must be positive".into());
            }
            self.claim_ttl = Duration::seconds(secs);
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Pending,
    Claimed,
    Reviewed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredConcept {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    pub fraud_score: f64,
    pub flagged: bool,
    /// Highest score first.
    pub concept_scores: Vec<ScoredConcept>,
    pub concepts_fired: Vec<String>,
    pub model_version: u64,
}

impl CasePrediction {
    fn new(p: &Prediction, tax: &ConceptTaxonomy) -> Self {
        let mut concept_scores: Vec<ScoredConcept> = tax
            .ids()
            .zip(&p.concept_scores)
            .map(|(id, s)| ScoredConcept {
                id: id.to_string(),
                score: *s,
            })
            .collect();
        concept_scores.sort_by(|a, b| b.score.total_cmp(&a.score));
        Self {
            fraud_score: p.fraud_score,
            flagged: p.flagged,
            concept_scores,
            concepts_fired: p.concepts_fired.clone(),
            model_version: p.model_version,
        }
    }
}

/// What an analyst sees of a transaction. The fraud label is withheld.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventPayload {
    pub timestamp: DateTime<Utc>,
    pub numeric_features: BTreeMap<String, Option<f64>>,
    pub categorical_features: BTreeMap<String, Option<String>>,
    pub triggered_rules: Vec<String>,
}

impl From<&RawEvent> for EventPayload {
    fn from(e: &RawEvent) -> Self {
        Self {
            timestamp: e.timestamp,
            numeric_features: e.numeric_features.clone(),
            categorical_features: e.categorical_features.clone(),
            triggered_rules: e.triggered_rules.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub event_id: String,
    pub event: EventPayload,
    pub prediction: CasePrediction,
    pub status: CaseStatus,
    pub claimed_by: Option<String>,
    pub claim_expires_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRequest {
    pub decision: Decision,
    pub concepts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewAck {
    pub seq: u64,
    pub model_version: u64,
    pub tuned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSummary {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub dropout: Vec<f64>,
    pub batch_norm: bool,
    pub concepts: usize,
    pub parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub decision: f64,
    pub concepts: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub version: u64,
    pub arch: ArchSummary,
    pub thresholds: Thresholds,
    pub lambda: f64,
    pub bootstrap_metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub reviews: usize,
    /// Mean Jaccard between fired and expert concept sets.
    pub mean_jaccard: f64,
    /// Per concept: cases where fired and expert sets both hold it, over
    /// cases where either does.
    pub per_concept: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopMetrics {
    pub model_version: u64,
    pub pending: usize,
    pub claimed: usize,
    pub reviewed: usize,
    pub pending_feedback: usize,
    pub feedback_records: usize,
    pub tunes: usize,
    /// Absent until the first review.
    pub agreement: Option<Agreement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub tuned: bool,
    pub version_before: u64,
    pub version_after: u64,
    pub consumed: usize,
}

#[derive(Debug, Default)]
struct Queue {
    cases: HashMap<String, CaseRecord>,
    /// Arrival order.
    order: Vec<String>,
    events: HashMap<String, RawEvent>,
}

impl Queue {
    /// Expired claims revert to pending.
    fn expire(&mut self, now: DateTime<Utc>) {
        for c in self.cases.values_mut() {
            if c.status == CaseStatus::Claimed && c.claim_expires_at.is_some_and(|t| t <= now) {
                c.status = CaseStatus::Pending;
                c.claimed_by = None;
                c.claim_expires_at = None;
            }
        }
    }

    fn count(&self, s: CaseStatus) -> usize {
        self.cases.values().filter(|c| c.status == s).count()
    }
}

/// Fired versus expert concept sets of one reviewed case.
#[derive(Debug, Clone)]
struct ReviewPair {
    fired: ConceptSet,
    expert: ConceptSet,
}

/// Feedback and tuning; the single writer.
struct Loop {
    store: FeedbackStore,
    events: HashMap<String, RawEvent>,
}

#[derive(Default)]
struct Stats {
    tunes: usize,
    reviews: Vec<ReviewPair>,
    pending_feedback: usize,
    feedback_records: usize,
}

/// Shared state behind the HTTP handlers.
///
/// Reviews and tunes are serialized through the loop lock. Claims and
/// status reads never take it, so they proceed during tuning against the
/// previous immutable model snapshot, which a commit replaces wholesale.
/// Locks are always acquired in the order loop, queue, experts, stats.
pub struct ReviewService {
    model: RwLock<Arc<JoelNetwork>>,
    codec: FeatureCodec,
    writer: Mutex<Loop>,
    queue: Mutex<Queue>,
    experts: RwLock<ExpertRegistry>,
    stats: Mutex<Stats>,
    config: ServiceConfig,
    clock: Box<dyn Clock>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl ReviewService {
    pub fn new(
        net: JoelNetwork,
        codec: FeatureCodec,
        experts: ExpertRegistry,
        store: FeedbackStore,
        config: ServiceConfig,
        clock: Box<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        check_codec(&net, &codec)?;
        config.tune.validate()?;
        let stats = Stats {
            pending_feedback: store.pending().len(),
            feedback_records: store.len(),
            ..Stats::default()
        };
        Ok(Self {
            model: RwLock::new(Arc::new(net)),
            codec,
            writer: Mutex::new(Loop {
                store,
                events: HashMap::new(),
            }),
            queue: Mutex::new(Queue::default()),
            experts: RwLock::new(experts),
            stats: Mutex::new(stats),
            config,
            clock,
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn snapshot(&self) -> Arc<JoelNetwork> {
        self.model.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn predict(&self, net: &JoelNetwork, event: &RawEvent) -> Result<Prediction, ServiceError> {
        let x = self.codec.encode_events(&[event]);
        net.predict(x.row(0)).map_err(|e| ServiceError::Internal(e.to_string()))
    }

    /// Scores an incoming event and queues it when inside the review band.
    /// Events the feedback store already holds a review for are queued as
    /// reviewed. Returns whether the event was queued.
    pub fn ingest(&self, event: RawEvent) -> Result<bool, ServiceError> {
        let net = self.snapshot();
        let p = self.predict(&net, &event)?;
        let (lo, hi) = self.config.band;
        if !(lo..=hi).contains(&p.fraud_score) {
            return Ok(false);
        }
        let mut writer = lock(&self.writer);
        let reviewed = writer.store.live().iter().any(|r| r.event_id == event.event_id);
        let mut q = lock(&self.queue);
        if q.cases.contains_key(&event.event_id) {
            return Ok(false);
        }
        q.order.push(event.event_id.clone());
        q.cases.insert(
            event.event_id.clone(),
            CaseRecord {
                event_id: event.event_id.clone(),
                event: EventPayload::from(&event),
                prediction: CasePrediction::new(&p, &net.taxonomy),
                status: if reviewed { CaseStatus::Reviewed } else { CaseStatus::Pending },
                claimed_by: None,
                claim_expires_at: None,
            },
        );
        q.events.insert(event.event_id.clone(), event.clone());
        writer.events.insert(event.event_id.clone(), event);
        Ok(true)
    }

    fn known_expert(&self, expert: &str) -> Result<(), ServiceError> {
        if self.experts.read().unwrap_or_else(|p| p.into_inner()).contains_key(expert) {
            return Ok(());
        }
        if self.config.open_registration && !expert.trim().is_empty() {
            self.experts
                .write()
                .unwrap_or_else(|p| p.into_inner())
                .entry(expert.to_string())
                .or_insert_with(|| ExpertProfile::trusted(expert, 1.0));
            return Ok(());
        }
        Err(ServiceError::UnknownExpert(expert.to_string()))
    }

    fn experts_snapshot(&self) -> ExpertRegistry {
        self.experts.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Claims the oldest pending case for `expert`, scored by the current
    /// model snapshot.
    pub fn next_case(&self, expert: &str) -> Result<Option<CaseRecord>, ServiceError> {
        self.known_expert(expert)?;
        let net = self.snapshot();
        let now = self.clock.now();
        let mut q = lock(&self.queue);
        q.expire(now);
        let Some(id) = q.order.iter().find(|id| q.cases[*id].status == CaseStatus::Pending).cloned() else {
            return Ok(None);
        };
        let p = self.predict(&net, &q.events[&id])?;
        let case = q.cases.get_mut(&id).expect("queued case");
        case.prediction = CasePrediction::new(&p, &net.taxonomy);
        case.status = CaseStatus::Claimed;
        case.claimed_by = Some(expert.to_string());
        case.claim_expires_at = Some(now + self.config.claim_ttl);
        Ok(Some(case.clone()))
    }

    pub fn review(&self, case_id: &str, expert: &str, req: ReviewRequest) -> Result<ReviewAck, ServiceError> {
        self.known_expert(expert)?;
        let mut writer = lock(&self.writer);
        let writer = &mut *writer;
        let net = self.snapshot();
        let fired = {
            let mut q = lock(&self.queue);
            q.expire(self.clock.now());
            let case = q.cases.get(case_id).ok_or_else(|| ServiceError::UnknownCase(case_id.to_string()))?;
            if case.status != CaseStatus::Claimed || case.claimed_by.as_deref() != Some(expert) {
                return Err(ServiceError::NotClaimed(case_id.to_string()));
            }
            ConceptSet::from_ids(&net.taxonomy, case.prediction.concepts_fired.iter().map(String::as_str))
                .map_err(|c| ServiceError::Internal(format!("fired concept {c:?} not in taxonomy")))?
        };
        let experts = self.experts_snapshot();
        let draft = FeedbackDraft {
            event_id: case_id.to_string(),
            expert_id: expert.to_string(),
            decision: req.decision,
            concepts: req.concepts,
            model_version_seen: net.version,
        };
        let seq = writer.store.submit_at(draft, &net.taxonomy, &experts, self.clock.now())?;
        let expert_set = writer
            .store
            .records()
            .last()
            .expect("just appended")
            .concept_set(&net.taxonomy)?;
        {
            let mut q = lock(&self.queue);
            let case = q.cases.get_mut(case_id).expect("checked above");
            case.status = CaseStatus::Reviewed;
            case.claim_expires_at = None;
        }
        lock(&self.stats).reviews.push(ReviewPair {
            fired,
            expert: expert_set,
        });
        let outcome = maybe_tune(&net, &mut writer.store, &self.config.tune, &experts, &self.codec, &writer.events);
        let model_version = self.settle(writer, outcome, net.version)?;
        Ok(ReviewAck {
            seq,
            model_version,
            tuned: model_version != net.version,
        })
    }

    /// Publishes a committed tune and refreshes the counters. Returns the
    /// live model version.
    fn settle(
        &self,
        writer: &Loop,
        outcome: Result<Option<TuneOutcome>, HumanLoopError>,
        current: u64,
    ) -> Result<u64, ServiceError> {
        let mut stats = lock(&self.stats);
        stats.pending_feedback = writer.store.pending().len();
        stats.feedback_records = writer.store.len();
        match outcome? {
            Some(o) => {
                stats.tunes += 1;
                let version = o.version;
                *self.model.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(o.net);
                Ok(version)
            }
            None => Ok(current),
        }
    }

    /// Tunes on whatever qualified feedback is pending, up to the batch size.
    pub fn force_tune(&self, token: Option<&str>) -> Result<TuneReport, ServiceError> {
        match (&self.config.admin_token, token) {
            (Some(expected), Some(given)) if expected == given => {}
            _ => return Err(ServiceError::Forbidden),
        }
        let mut writer = lock(&self.writer);
        let writer = &mut *writer;
        let net = self.snapshot();
        let experts = self.experts_snapshot();
        let outcome = force_tune(&net, &mut writer.store, &self.config.tune, &experts, &self.codec, &writer.events);
        let consumed = outcome.as_ref().ok().and_then(|o| o.as_ref()).map_or(0, |o| o.consumed.len());
        let version_after = self.settle(writer, outcome, net.version)?;
        Ok(TuneReport {
            tuned: version_after != net.version,
            version_before: net.version,
            version_after,
            consumed,
        })
    }

    pub fn model_info(&self) -> ModelInfo {
        let net = self.snapshot();
        ModelInfo {
            version: net.version,
            arch: ArchSummary {
                input_dim: net.input_dim,
                hidden: net.arch.hidden.clone(),
                dropout: net.arch.dropout.clone(),
                batch_norm: net.arch.batch_norm,
                concepts: net.concepts(),
                parameters: net.num_params(),
            },
            thresholds: Thresholds {
                decision: net.decision_threshold,
                concepts: net.taxonomy.ids().map(String::from).zip(net.concept_thresholds.iter().copied()).collect(),
            },
            lambda: net.lambda,
            bootstrap_metrics: net.bootstrap_metrics.clone(),
        }
    }

    pub fn taxonomy(&self) -> ConceptTaxonomy {
        self.snapshot().taxonomy.clone()
    }

    pub fn metrics(&self) -> LoopMetrics {
        let net = self.snapshot();
        let mut q = lock(&self.queue);
        q.expire(self.clock.now());
        let stats = lock(&self.stats);
        LoopMetrics {
            model_version: net.version,
            pending: q.count(CaseStatus::Pending),
            claimed: q.count(CaseStatus::Claimed),
            reviewed: q.count(CaseStatus::Reviewed),
            pending_feedback: stats.pending_feedback,
            feedback_records: stats.feedback_records,
            tunes: stats.tunes,
            agreement: agreement(&stats.reviews, &net.taxonomy),
        }
    }
}

fn agreement(reviews: &[ReviewPair], tax: &ConceptTaxonomy) -> Option<Agreement> {
    if reviews.is_empty() {
        return None;
    }
    let mean_jaccard = reviews.iter().map(|r| jaccard(&r.fired, &r.expert)).sum::<f64>() / reviews.len() as f64;
    let mut per_concept = BTreeMap::new();
    for (k, id) in tax.ids().enumerate() {
        let either = reviews.iter().filter(|r| r.fired.contains(k) || r.expert.contains(k)).count();
        if either > 0 {
            let both = reviews.iter().filter(|r| r.fired.contains(k) && r.expert.contains(k)).count();
            per_concept.insert(id.to_string(), both as f64 / either as f64);
        }
    }
    Some(Agreement {
        reviews: reviews.len(),
        mean_jaccard,
        per_concept,
    })
}
