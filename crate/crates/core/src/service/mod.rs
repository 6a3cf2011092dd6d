//! The service engine: owns the stores under `data_dir` and wires
//! ingestion, monitoring, enforcement, alerting and the gate together.
//!
//! Every state change is written to disk before anything that depends on
//! it. On open, the engine repairs the gaps a crash can leave between two
//! such writes (an event without its alert or queue message, a breach
//! record not yet folded into account state or not yet alerted), so a
//! restarted engine continues exactly where the old one stopped.

mod config;
mod simulate;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alerting::{Alert, AlertStore, DeliveryReport, Dispatcher};
use crate::budget::{compute_budget, BudgetSpec, ComputedBudget, SpendSeries, VariabilityMode};
use crate::enforcement::{
    AccountBook, AccountEntry, BreachFilter, BreachRecord, BreachStore, DurableQueue, EnforceError, EnforcementOutcome,
    Enforcer, EnqueueOutcome, QueueHandle,
};
use crate::gate::{evaluate_plan, plan_cost, DecisionLog, DeploymentPlan, GateContext, GateDecision};
use crate::ingest::{AttributionRules, CostCenter, FeedError, IngestReport, Ledger, RecordOutcome, UNATTRIBUTED};
use crate::model::{Account, BillingRecord, BudgetPeriod};
use crate::money::Money;
use crate::monitor::{
    check_thresholds, enqueues, evaluate, BudgetView, EnforcementMessage, ThresholdEvent, ZScoreDetector, ALL_SERVICES,
};
use crate::storage::{read_json, write_json, AppendLog, FailPoint, StoreError};

pub use config::{AccountConfig, Config};
pub use simulate::{ScenarioBudget, ScenarioConfig, SimCursor, SimSummary};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("version conflict on budget {budget_id}: current version is {current:?}")]
    Conflict { budget_id: String, current: Option<u64> },
    #[error("enforcement queue is full; retry later")]
    Backpressure,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("engine stopped after an earlier storage failure; reopen it")]
    Poisoned,
}

impl From<EnforceError> for ServiceError {
    fn from(e: EnforceError) -> Self {
        match e {
            EnforceError::UnknownAccount(id) => ServiceError::NotFound(format!("account {id}")),
            EnforceError::Store(s) => ServiceError::Store(s),
        }
    }
}

/// File locations under the data directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreLayout {
    pub data_dir: PathBuf,
}

impl StoreLayout {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        StoreLayout {
            data_dir: data_dir.into(),
        }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.data_dir.join(name)
    }

    /// Accepted billing records; the chargeback store.
    pub fn records(&self) -> PathBuf {
        self.file("records.jsonl")
    }
    pub fn budgets(&self) -> PathBuf {
        self.file("budgets.json")
    }
    /// Fired threshold events.
    pub fn events(&self) -> PathBuf {
        self.file("events.jsonl")
    }
    pub fn queue(&self) -> PathBuf {
        self.file("queue.journal")
    }
    pub fn breaches(&self) -> PathBuf {
        self.file("breaches.jsonl")
    }
    pub fn accounts(&self) -> PathBuf {
        self.file("accounts.json")
    }
    pub fn alerts(&self) -> PathBuf {
        self.file("alerts.jsonl")
    }
    pub fn dead_letter(&self) -> PathBuf {
        self.file("dead_letter.jsonl")
    }
    pub fn decisions(&self) -> PathBuf {
        self.file("decisions.jsonl")
    }
    pub fn sim_cursor(&self) -> PathBuf {
        self.file("sim_cursor.json")
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

/// Simulated time, advanced only explicitly.
#[derive(Debug)]
pub struct SimClock(std::sync::Mutex<DateTime<Utc>>);

impl SimClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        SimClock(std::sync::Mutex::new(start))
    }

    pub fn set(&self, t: DateTime<Utc>) {
        *self.0.lock().expect("clock lock poisoned") = t;
    }

    pub fn advance(&self, d: Duration) {
        let mut t = self.0.lock().expect("clock lock poisoned");
        *t += d;
    }
}

impl Clock for SimClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().expect("clock lock poisoned")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetRecord {
    pub budget_id: String,
    pub version: u64,
    pub budget: ComputedBudget,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct BudgetBook {
    budgets: BTreeMap<String, BudgetRecord>,
}

/// The budget governing one account for one period, after allocation of
/// cost-center budgets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectiveBudget {
    pub budget_id: String,
    pub account_id: String,
    pub period: BudgetPeriod,
    pub crb: Money,
    pub thresholds: Vec<Decimal>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChargebackRow {
    pub cost_center_id: String,
    pub period: BudgetPeriod,
    pub total: Money,
    pub by_account: BTreeMap<String, Money>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountView {
    pub account: Account,
    pub stopped_services: Vec<String>,
    pub period: BudgetPeriod,
    pub cumulative_spend: Money,
    pub budget_id: Option<String>,
    pub crb: Option<Money>,
    /// Spend as a fraction of the budget, six decimals.
    pub utilization: Option<Decimal>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepReport {
    pub events: Vec<ThresholdEvent>,
    pub enqueued: usize,
    pub rolled_over: Vec<String>,
}

/// Evaluates the budget formula without storing anything.
pub fn whatif(
    hc: Vec<Money>,
    g: Decimal,
    c: Decimal,
    v: Option<Decimal>,
    ab: Money,
    now: DateTime<Utc>,
) -> Result<ComputedBudget, ServiceError> {
    let historical = SpendSeries::new(hc).map_err(|e| ServiceError::InvalidInput(e.to_string()))?;
    let spec = BudgetSpec {
        target_id: "whatif".into(),
        period: BudgetPeriod::containing(crate::model::Granularity::Monthly, now),
        historical,
        growth_factor: g,
        cost_control_factor: c,
        variability: v.map_or(VariabilityMode::ComputedFromHistorical, |value| {
            VariabilityMode::Explicit { value }
        }),
        available_budget: ab,
        thresholds: crate::budget::default_thresholds(),
    };
    compute_budget(&spec, now).map_err(|e| ServiceError::InvalidInput(e.to_string()))
}

fn fired_key(budget_id: &str, account_id: &str, period: &BudgetPeriod) -> String {
    format!("{budget_id}|{account_id}|{}", period.label())
}

/// The instant a sweep at `now` is evaluated for: it covers data up to but
/// excluding `now`, so a sweep exactly at a period end closes that period.
fn covered_instant(now: DateTime<Utc>) -> DateTime<Utc> {
    now - Duration::seconds(1)
}

pub struct Abacus {
    config: Config,
    layout: StoreLayout,
    fail: Arc<FailPoint>,
    cost_centers: BTreeMap<String, CostCenter>,
    ledger: Ledger,
    records: AppendLog<BillingRecord>,
    budgets: BudgetBook,
    events: AppendLog<ThresholdEvent>,
    fired: HashMap<String, BTreeSet<Decimal>>,
    fired_log: Vec<ThresholdEvent>,
    queue: QueueHandle,
    breaches: BreachStore,
    book: AccountBook,
    enforcer: Enforcer,
    alerts: AlertStore,
    dispatcher: Dispatcher,
    decisions: DecisionLog,
    detector: ZScoreDetector,
    poisoned: bool,
}

impl std::fmt::Debug for Abacus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Abacus")
            .field("data_dir", &self.layout.data_dir)
            .finish_non_exhaustive()
    }
}

impl Abacus {
    pub fn open(config: Config) -> Result<Self, ServiceError> {
        Abacus::open_with(config, Arc::new(FailPoint::disarmed()))
    }

    /// Opens the stores, counting every durable write against `fail`.
    pub fn open_with(config: Config, fail: Arc<FailPoint>) -> Result<Self, ServiceError> {
        config.validate()?;
        let layout = StoreLayout::new(&config.data_dir);
        std::fs::create_dir_all(&layout.data_dir).map_err(|e| StoreError::io(&layout.data_dir, e))?;
        let d = config.durability;

        let cost_centers = config
            .cost_centers
            .iter()
            .map(|c| (c.cost_center_id.clone(), c.clone()))
            .collect();
        // Attribution must not depend on whether an account came from the
        // config or was registered later, so the persisted account book is
        // the base and the config is layered on top.
        let book = AccountBook::load(&layout.accounts())?.unwrap_or_default();
        let mut account_cost_centers: BTreeMap<String, String> = book
            .entries()
            .map(|e| (e.account.account_id.clone(), e.account.cost_center_id.clone()))
            .collect();
        for a in &config.accounts {
            account_cost_centers.insert(a.account_id.clone(), a.cost_center_id.clone());
        }
        let rules = AttributionRules {
            account_cost_centers,
            overrides: config.overrides.clone(),
        };
        let mut ledger = Ledger::new(rules);
        let (records, existing) = AppendLog::<BillingRecord>::open(layout.records(), d)?;
        for r in &existing {
            ledger.apply(r);
        }

        let budgets = read_json::<BudgetBook>(&layout.budgets())?.unwrap_or_default();
        let (events, fired_events) = AppendLog::<ThresholdEvent>::open(layout.events(), d)?;
        let mut fired: HashMap<String, BTreeSet<Decimal>> = HashMap::new();
        for e in &fired_events {
            fired
                .entry(fired_key(&e.budget_id, &e.account_id, &e.period))
                .or_default()
                .insert(e.threshold.normalize());
        }

        let queue = QueueHandle::new(DurableQueue::open(
            layout.queue(),
            config.queue_capacity,
            d,
            fail.clone(),
        )?);
        let breaches = BreachStore::open(&layout.breaches(), d, fail.clone())?;
        let alerts = AlertStore::open(&layout.alerts(), d, fail.clone())?;
        let dispatcher = Dispatcher::new(&layout.dead_letter(), d)?;
        for sink in &config.sinks {
            dispatcher.register(sink.clone()).map_err(ServiceError::InvalidInput)?;
        }
        let decisions = DecisionLog::open(&layout.decisions(), d)?;

        let mut engine = Abacus {
            enforcer: Enforcer::new(config.policy.clone()),
            config,
            layout,
            fail,
            cost_centers,
            ledger,
            records,
            budgets,
            events,
            fired,
            fired_log: fired_events,
            queue,
            breaches,
            book,
            alerts,
            dispatcher,
            decisions,
            detector: ZScoreDetector::default(),
            poisoned: false,
        };
        engine.guarded(|e| e.recover())?;
        Ok(engine)
    }

    fn recover(&mut self) -> Result<(), ServiceError> {
        let accounts: Vec<AccountConfig> = self.config.accounts.clone();
        self.register_accounts(&accounts)?;

        let mut dirty = false;
        for r in self.breaches.all() {
            if r.seq > self.book.applied_breach_seq() {
                self.book.apply(r);
                dirty = true;
            }
        }
        if dirty {
            self.save_book()?;
        }

        let pending: Vec<BreachRecord> = self
            .breaches
            .all()
            .iter()
            .filter(|r| Alert::for_breach(r).is_some() && !self.alerts.has_source(&r.breach_id))
            .cloned()
            .collect();
        for r in pending {
            self.alert_breach(&r)?;
        }

        for e in self.fired_log.clone() {
            if !self.alerts.has_source(&e.key()) {
                self.alert_event(&e)?;
            }
            self.ensure_enqueued(&e)?;
        }
        Ok(())
    }

    /// Runs `f`, refusing to run at all once a storage write has failed:
    /// after a failed write the in-memory state may be ahead of the disk.
    fn guarded<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T, ServiceError>) -> Result<T, ServiceError> {
        if self.poisoned {
            return Err(ServiceError::Poisoned);
        }
        let out = f(self);
        if let Err(ServiceError::Store(_)) = &out {
            self.poisoned = true;
        }
        out
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn layout(&self) -> &StoreLayout {
        &self.layout
    }

    pub fn fail_point(&self) -> &Arc<FailPoint> {
        &self.fail
    }

    fn save_book(&self) -> Result<(), StoreError> {
        self.book
            .save(&self.layout.accounts(), self.config.durability, &self.fail)
    }

    fn register_accounts(&mut self, accounts: &[AccountConfig]) -> Result<(), ServiceError> {
        let mut dirty = !self.layout.accounts().exists();
        for a in accounts {
            self.ledger.map_account(&a.account_id, &a.cost_center_id);
            if self.book.get(&a.account_id).is_none() {
                self.book.register(a.to_account());
                dirty = true;
            }
        }
        for entry in self.book.entries() {
            self.ledger.register_account(entry.account.account_id.clone());
        }
        if dirty {
            self.save_book()?;
        }
        Ok(())
    }

    fn register_cost_centers(&mut self, centers: &[CostCenter]) {
        for c in centers {
            self.cost_centers
                .entry(c.cost_center_id.clone())
                .or_insert_with(|| c.clone());
        }
    }

    // ---- budgets ----

    pub fn budgets(&self) -> impl Iterator<Item = &BudgetRecord> {
        self.budgets.budgets.values()
    }

    pub fn budget(&self, budget_id: &str) -> Option<&BudgetRecord> {
        self.budgets.budgets.get(budget_id)
    }

    fn is_target(&self, id: &str) -> bool {
        self.book.get(id).is_some()
            || self.cost_centers.contains_key(id)
            || self.book.entries().any(|e| e.account.cost_center_id == id)
    }

    /// Creates or replaces a budget. `expected_version` `None` creates
    /// only; `Some(v)` updates only if the stored version is `v`.
    pub fn put_budget(
        &mut self,
        budget_id: &str,
        spec: BudgetSpec,
        expected_version: Option<u64>,
        now: DateTime<Utc>,
    ) -> Result<BudgetRecord, ServiceError> {
        self.guarded(|e| {
            if budget_id.trim().is_empty() {
                return Err(ServiceError::InvalidInput("budget id is empty".into()));
            }
            if !e.is_target(&spec.target_id) {
                return Err(ServiceError::InvalidInput(format!(
                    "target {} is neither a known account nor a cost center",
                    spec.target_id
                )));
            }
            let current = e.budgets.budgets.get(budget_id).map(|b| b.version);
            if current != expected_version {
                return Err(ServiceError::Conflict {
                    budget_id: budget_id.to_string(),
                    current,
                });
            }
            let budget = compute_budget(&spec, now).map_err(|err| ServiceError::InvalidInput(err.to_string()))?;
            let record = BudgetRecord {
                budget_id: budget_id.to_string(),
                version: current.map_or(1, |v| v + 1),
                budget,
                updated_at: now,
            };
            let mut next = e.budgets.clone();
            next.budgets.insert(budget_id.to_string(), record.clone());
            e.fail.hit()?;
            write_json(&e.layout.budgets(), &next, e.config.durability)?;
            e.budgets = next;
            Ok(record)
        })
    }

    /// Budgets in force for every account whose period contains `at`.
    /// A budget targeting the account directly wins over a cost-center
    /// budget; cost-center budgets are split across the center's accounts
    /// in proportion to their previous-period spend.
    pub fn effective_budgets(&self, at: DateTime<Utc>) -> Vec<EffectiveBudget> {
        let mut out: BTreeMap<(String, BudgetPeriod), EffectiveBudget> = BTreeMap::new();
        let active = || {
            self.budgets
                .budgets
                .values()
                .filter(|b| b.budget.spec.period.contains(at))
        };
        for b in active() {
            let spec = &b.budget.spec;
            if self.book.get(&spec.target_id).is_some() {
                out.entry((spec.target_id.clone(), spec.period))
                    .or_insert_with(|| EffectiveBudget {
                        budget_id: b.budget_id.clone(),
                        account_id: spec.target_id.clone(),
                        period: spec.period,
                        crb: b.budget.crb,
                        thresholds: spec.thresholds.clone(),
                    });
            }
        }
        for b in active() {
            let spec = &b.budget.spec;
            let members: Vec<&AccountEntry> = self
                .book
                .entries()
                .filter(|e| e.account.cost_center_id == spec.target_id && e.account.account_id != spec.target_id)
                .collect();
            if members.is_empty() {
                continue;
            }
            let previous = spec.period.previous();
            let weights: Vec<(String, Money)> = members
                .iter()
                .map(|e| {
                    let id = e.account.account_id.clone();
                    let w = self.ledger.cumulative_spend(&id, &previous).unwrap_or(Money::ZERO);
                    (id, w)
                })
                .collect();
            for (account_id, crb) in crate::budget::allocate(b.budget.crb, &weights) {
                out.entry((account_id.clone(), spec.period))
                    .or_insert_with(|| EffectiveBudget {
                        budget_id: b.budget_id.clone(),
                        account_id,
                        period: spec.period,
                        crb,
                        thresholds: spec.thresholds.clone(),
                    });
            }
        }
        out.into_values().collect()
    }

    pub fn effective_budget(&self, account_id: &str, at: DateTime<Utc>) -> Option<EffectiveBudget> {
        self.effective_budgets(at)
            .into_iter()
            .find(|b| b.account_id == account_id)
    }

    // ---- ingestion ----

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Ingests a batch. Refused with [`ServiceError::Backpressure`] while
    /// the enforcement queue is full.
    pub fn ingest<I>(&mut self, records: I) -> Result<IngestReport, ServiceError>
    where
        I: IntoIterator<Item = Result<BillingRecord, FeedError>>,
    {
        self.guarded(|e| {
            if e.queue.with(|q| q.is_full()) {
                return Err(ServiceError::Backpressure);
            }
            e.ingest_unchecked(records)
        })
    }

    fn ingest_unchecked<I>(&mut self, records: I) -> Result<IngestReport, ServiceError>
    where
        I: IntoIterator<Item = Result<BillingRecord, FeedError>>,
    {
        let mut report = IngestReport::default();
        let mut accepted = Vec::new();
        for item in records {
            match item {
                Ok(r) => {
                    let outcome = self.ledger.apply(&r);
                    if matches!(outcome, RecordOutcome::Accepted { .. }) {
                        accepted.push(r);
                    }
                    report.record(&outcome);
                }
                Err(_) => report.rejected += 1,
            }
        }
        if !accepted.is_empty() {
            self.fail.hit()?;
            self.records.append_all(&accepted)?;
        }
        Ok(report)
    }

    pub fn cumulative_spend(&self, account_id: &str, period: &BudgetPeriod) -> Result<Money, ServiceError> {
        self.ledger
            .cumulative_spend(account_id, period)
            .map_err(|e| ServiceError::NotFound(e.to_string()))
    }

    // ---- monitoring ----

    fn alert_event(&mut self, event: &ThresholdEvent) -> Result<DeliveryReport, StoreError> {
        let alert = self.alerts.append(Alert::for_threshold(event))?;
        Ok(self.dispatcher.dispatch(&alert, event.occurred_at))
    }

    fn alert_breach(&mut self, record: &BreachRecord) -> Result<Option<DeliveryReport>, StoreError> {
        match Alert::for_breach(record) {
            Some(draft) if !self.alerts.has_source(&draft.source) => {
                let alert = self.alerts.append(draft)?;
                Ok(Some(self.dispatcher.dispatch(&alert, record.recorded_at)))
            }
            _ => Ok(None),
        }
    }

    fn message_for(&self, event: &ThresholdEvent) -> EnforcementMessage {
        let report = evaluate(
            &self.ledger,
            &event.account_id,
            &event.period,
            event.crb,
            event.occurred_at,
            &self.detector,
        )
        .unwrap_or_else(|_| crate::monitor::CostEvaluationReport {
            account_id: event.account_id.clone(),
            period: event.period,
            top_services: Vec::new(),
            burn_rate: None,
            anomalies: Vec::new(),
        });
        EnforcementMessage {
            budget_id: event.budget_id.clone(),
            account_id: event.account_id.clone(),
            period: event.period,
            service_type: ALL_SERVICES.to_string(),
            budget: event.crb,
            spend: event.spend_at_crossing,
            threshold: event.threshold,
            action_class: self.config.policy.action_for(event.threshold),
            report,
        }
    }

    /// Enqueues the event's message unless it was already enqueued or
    /// enforced. A full queue is drained inline; nothing is dropped.
    fn ensure_enqueued(&mut self, event: &ThresholdEvent) -> Result<bool, ServiceError> {
        if !enqueues(event.threshold, self.config.enforcement_floor) {
            return Ok(false);
        }
        let msg = self.message_for(event);
        let key = msg.dedup_key();
        if self.queue.with(|q| q.has_enqueued(&key)) || self.breaches.find_by_dedup(&key).is_some() {
            return Ok(false);
        }
        loop {
            match self.queue.enqueue(msg.clone())? {
                EnqueueOutcome::Accepted { .. } => return Ok(true),
                EnqueueOutcome::RetryLater => {
                    if self.drain_one_inner(event.occurred_at)?.is_none() {
                        return Err(ServiceError::Backpressure);
                    }
                }
            }
        }
    }

    /// One monitor pass at `now`: period rollover, then threshold checks
    /// for every effective budget. Fired events are alerted and, at or above
    /// the enforcement floor, queued.
    pub fn sweep(&mut self, now: DateTime<Utc>) -> Result<SweepReport, ServiceError> {
        self.guarded(|e| e.sweep_inner(now))
    }

    fn sweep_inner(&mut self, now: DateTime<Utc>) -> Result<SweepReport, ServiceError> {
        let at = covered_instant(now);
        let effective = self.effective_budgets(at);
        let mut report = SweepReport::default();

        let ids: Vec<String> = self.book.entries().map(|e| e.account.account_id.clone()).collect();
        for id in &ids {
            let period = effective
                .iter()
                .find(|b| &b.account_id == id)
                .map_or_else(|| BudgetPeriod::containing(self.config.granularity, at), |b| b.period);
            if self.book.roll_over(id, &period, period.start) {
                report.rolled_over.push(id.clone());
            }
        }
        if !report.rolled_over.is_empty() {
            self.save_book()?;
        }

        for b in &effective {
            let spend = self
                .ledger
                .cumulative_spend(&b.account_id, &b.period)
                .unwrap_or(Money::ZERO);
            let key = fired_key(&b.budget_id, &b.account_id, &b.period);
            let view = BudgetView {
                budget_id: &b.budget_id,
                account_id: &b.account_id,
                period: b.period,
                crb: b.crb,
                thresholds: &b.thresholds,
            };
            let empty = BTreeSet::new();
            let events = check_thresholds(&view, spend, self.fired.get(&key).unwrap_or(&empty), now);
            for event in events {
                self.fail.hit()?;
                self.events.append(&event)?;
                self.fired.entry(key.clone()).or_default().insert(event.threshold);
                self.fired_log.push(event.clone());
                self.alert_event(&event)?;
                if self.ensure_enqueued(&event)? {
                    report.enqueued += 1;
                }
                report.events.push(event);
            }
        }
        Ok(report)
    }

    /// Every threshold event fired so far, in firing order.
    pub fn fired_events(&self) -> &[ThresholdEvent] {
        &self.fired_log
    }

    // ---- enforcement ----

    pub fn queue(&self) -> &QueueHandle {
        &self.queue
    }

    pub fn queue_len(&self) -> usize {
        self.queue.with(|q| q.len())
    }

    fn drain_one_inner(&mut self, now: DateTime<Utc>) -> Result<Option<EnforcementOutcome>, ServiceError> {
        let Some(head) = self.queue.head() else {
            return Ok(None);
        };
        let services = self.ledger.services(&head.message.account_id);
        let outcome = self
            .enforcer
            .enforce(&head.message, &mut self.book, &mut self.breaches, &services, now)?;
        if !outcome.duplicate {
            self.save_book()?;
        }
        self.alert_breach(&outcome.record)?;
        self.queue.ack(head.seq)?;
        Ok(Some(outcome))
    }

    /// Enforces the message at the head of the queue, if any.
    pub fn drain_one(&mut self, now: DateTime<Utc>) -> Result<Option<EnforcementOutcome>, ServiceError> {
        self.guarded(|e| e.drain_one_inner(now))
    }

    /// Enforces every queued message in order.
    pub fn drain(&mut self, now: DateTime<Utc>) -> Result<Vec<EnforcementOutcome>, ServiceError> {
        self.guarded(|e| {
            let mut out = Vec::new();
            while let Some(o) = e.drain_one_inner(now)? {
                out.push(o);
            }
            Ok(out)
        })
    }

    pub fn reinstate(
        &mut self,
        account_id: &str,
        reason: &str,
        now: DateTime<Utc>,
    ) -> Result<BreachRecord, ServiceError> {
        self.guarded(|e| {
            let record = Enforcer::reinstate(&mut e.book, &mut e.breaches, account_id, reason, now)?;
            e.save_book()?;
            Ok(record)
        })
    }

    pub fn query_breaches(&self, filter: &BreachFilter, offset: usize, limit: usize) -> Vec<BreachRecord> {
        self.breaches.query(filter, offset, limit)
    }

    pub fn account_book(&self) -> &AccountBook {
        &self.book
    }

    // ---- alerts ----

    pub fn poll_alerts(&self, cursor: u64) -> (Vec<Alert>, u64) {
        self.alerts.poll(cursor)
    }

    // ---- accounts ----

    fn view(&self, entry: &AccountEntry, now: DateTime<Utc>) -> AccountView {
        let id = &entry.account.account_id;
        let budget = self.effective_budget(id, now);
        let period = budget
            .as_ref()
            .map_or_else(|| BudgetPeriod::containing(self.config.granularity, now), |b| b.period);
        let spend = self.ledger.cumulative_spend(id, &period).unwrap_or(Money::ZERO);
        let utilization = budget.as_ref().and_then(|b| {
            (b.crb.cents() > 0).then(|| {
                (Decimal::from(spend.cents()) / Decimal::from(b.crb.cents()))
                    .round_dp_with_strategy(6, rust_decimal::RoundingStrategy::ToZero)
            })
        });
        AccountView {
            account: entry.account.clone(),
            stopped_services: entry.stopped_services.iter().cloned().collect(),
            period,
            cumulative_spend: spend,
            budget_id: budget.as_ref().map(|b| b.budget_id.clone()),
            crb: budget.map(|b| b.crb),
            utilization,
        }
    }

    pub fn accounts(&self, now: DateTime<Utc>) -> Vec<AccountView> {
        self.book.entries().map(|e| self.view(e, now)).collect()
    }

    pub fn account(&self, account_id: &str, now: DateTime<Utc>) -> Option<AccountView> {
        self.book.get(account_id).map(|e| self.view(e, now))
    }

    // ---- gate ----

    pub fn check_plan(&mut self, plan: &DeploymentPlan, now: DateTime<Utc>) -> Result<GateDecision, ServiceError> {
        let cost = plan_cost(plan, &self.config.prices).map_err(|e| ServiceError::InvalidInput(e.to_string()))?;
        let decision = self.decide(plan, cost, now);
        self.guarded(|e| {
            e.decisions.append(&decision)?;
            Ok(decision)
        })
    }

    fn decide(&self, plan: &DeploymentPlan, cost: Money, now: DateTime<Utc>) -> GateDecision {
        let entry = self.book.get(&plan.account_id);
        let budget = self.effective_budget(&plan.account_id, now);
        let spend = budget
            .as_ref()
            .and_then(|b| self.ledger.cumulative_spend(&b.account_id, &b.period).ok())
            .unwrap_or(Money::ZERO);
        let ctx = GateContext {
            status: entry.map(|e| e.status()),
            crb: budget.map(|b| b.crb),
            spend,
        };
        evaluate_plan(plan, cost, ctx, plan.submitted_at.unwrap_or(now))
    }

    // ---- reports ----

    /// Spend per cost center for the period. Spend that cannot be
    /// attributed is reported in a row named `unattributed`, last.
    pub fn chargeback(&self, period: &BudgetPeriod) -> Result<Vec<ChargebackRow>, ServiceError> {
        let totals = self
            .ledger
            .cost_center_totals(period)
            .map_err(|e| ServiceError::InvalidInput(e.to_string()))?;
        let mut rows = Vec::new();
        let mut unattributed = None;
        for (cc, by_account) in totals {
            let total = crate::money::checked_sum(by_account.values().copied())
                .map_err(|e| ServiceError::InvalidInput(e.to_string()))?;
            let row = ChargebackRow {
                cost_center_id: cc.clone(),
                period: *period,
                total,
                by_account,
            };
            if cc == UNATTRIBUTED {
                unattributed = Some(row);
            } else {
                rows.push(row);
            }
        }
        rows.extend(unattributed);
        Ok(rows)
    }

    pub fn cost_centers(&self) -> impl Iterator<Item = &CostCenter> {
        self.cost_centers.values()
    }

    /// Files under the data directory whose contents define the engine's
    /// state, for comparing two runs.
    pub fn state_files(data_dir: &Path) -> Vec<PathBuf> {
        let layout = StoreLayout::new(data_dir);
        vec![
            layout.records(),
            layout.budgets(),
            layout.events(),
            layout.queue(),
            layout.breaches(),
            layout.accounts(),
            layout.alerts(),
            layout.sim_cursor(),
        ]
    }
}

#[cfg(test)]
mod tests;
