//! Billing feed ingestion, cost attribution, and spend aggregation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;

use chrono::{DateTime, Duration, NaiveDate, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{validate_labels, BillingRecord, BudgetPeriod, LabelSet, Provider};
use crate::money::{Money, MoneyError};

/// Reserved bucket for spend that cannot be attributed to a cost center.
pub const UNATTRIBUTED: &str = "unattributed";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IngestError {
    #[error("unknown account {0:?}")]
    UnknownAccount(String),
    #[error(transparent)]
    Money(#[from] MoneyError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeedError {
    #[error("line {line}: expected 8 tab-separated fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: bad {field}: {reason}")]
    Field {
        line: usize,
        field: &'static str,
        reason: String,
    },
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCenter {
    pub cost_center_id: String,
    pub display_name: String,
}

/// Routes spend with a matching label to a cost center, overriding the
/// account mapping (e.g. `environment=dev` to an R&D center).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelOverride {
    pub key: String,
    pub value: String,
    pub cost_center_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "cost_center_id", rename_all = "snake_case")]
pub enum Attribution {
    CostCenter(String),
    Unattributed,
}

impl Attribution {
    pub fn bucket(&self) -> &str {
        match self {
            Attribution::CostCenter(id) => id,
            Attribution::Unattributed => UNATTRIBUTED,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionRules {
    #[serde(default)]
    pub account_cost_centers: BTreeMap<String, String>,
    #[serde(default)]
    pub overrides: Vec<LabelOverride>,
}

impl AttributionRules {
    /// The first matching label override wins; otherwise the account's
    /// mapped cost center; otherwise unattributed.
    pub fn attribute(&self, record: &BillingRecord) -> Attribution {
        let overridden = self
            .overrides
            .iter()
            .find(|o| record.labels.get(&o.key) == Some(o.value.as_str()));
        if let Some(o) = overridden {
            return Attribution::CostCenter(o.cost_center_id.clone());
        }
        match self.account_cost_centers.get(&record.account_id) {
            Some(cc) => Attribution::CostCenter(cc.clone()),
            None => Attribution::Unattributed,
        }
    }

    /// Chargeback bucket: records with invalid labels are never attributed.
    pub fn chargeback_bucket(&self, record: &BillingRecord) -> Attribution {
        if validate_labels(&record.labels).is_valid() {
            self.attribute(record)
        } else {
            Attribution::Unattributed
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: u64,
    pub unattributed: u64,
    pub duplicates: u64,
    pub rejected: u64,
}

impl IngestReport {
    pub fn merge(&mut self, other: IngestReport) {
        self.accepted += other.accepted;
        self.unattributed += other.unattributed;
        self.duplicates += other.duplicates;
        self.rejected += other.rejected;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordOutcome {
    Accepted { unattributed: bool },
    Duplicate,
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpendAggregate {
    pub account_id: String,
    pub period: BudgetPeriod,
    pub total: Money,
    pub by_service: BTreeMap<String, Money>,
    pub unattributed: Money,
}

#[derive(Debug, Clone, Default)]
struct DayBucket {
    total: Money,
    by_service: BTreeMap<String, Money>,
    unattributed: Money,
    by_cost_center: BTreeMap<String, Money>,
}

fn add_into(map: &mut BTreeMap<String, Money>, key: &str, amount: Money) -> Result<(), MoneyError> {
    let slot = map.entry(key.to_string()).or_default();
    *slot = slot.checked_add(amount)?;
    Ok(())
}

impl DayBucket {
    fn apply(&mut self, record: &BillingRecord, labels_valid: bool, cost_center: &str) -> Result<(), MoneyError> {
        let mut next = self.clone();
        next.total = next.total.checked_add(record.cost)?;
        if labels_valid {
            add_into(&mut next.by_service, &record.service_name, record.cost)?;
        } else {
            next.unattributed = next.unattributed.checked_add(record.cost)?;
        }
        add_into(&mut next.by_cost_center, cost_center, record.cost)?;
        *self = next;
        Ok(())
    }
}

/// Per-account, per-day spend aggregates keyed by `usage_start`.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    rules: AttributionRules,
    seen: HashSet<String>,
    known_accounts: BTreeSet<String>,
    days: BTreeMap<String, BTreeMap<NaiveDate, DayBucket>>,
}

impl Ledger {
    pub fn new(rules: AttributionRules) -> Self {
        let known_accounts = rules.account_cost_centers.keys().cloned().collect();
        Ledger {
            rules,
            known_accounts,
            ..Default::default()
        }
    }

    pub fn rules(&self) -> &AttributionRules {
        &self.rules
    }

    /// Attributes the account's future records to `cost_center_id`.
    pub fn map_account(&mut self, account_id: &str, cost_center_id: &str) {
        self.rules
            .account_cost_centers
            .insert(account_id.to_string(), cost_center_id.to_string());
        self.known_accounts.insert(account_id.to_string());
    }

    pub fn register_account(&mut self, account_id: impl Into<String>) {
        self.known_accounts.insert(account_id.into());
    }

    pub fn is_known(&self, account_id: &str) -> bool {
        self.known_accounts.contains(account_id)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &str> {
        self.known_accounts.iter().map(String::as_str)
    }

    pub fn has_seen(&self, record_id: &str) -> bool {
        self.seen.contains(record_id)
    }

    pub fn record_count(&self) -> usize {
        self.seen.len()
    }

    /// Applies one record; the aggregates change all at once or not at all.
    pub fn apply(&mut self, record: &BillingRecord) -> RecordOutcome {
        if let Err(e) = record.validate() {
            return RecordOutcome::Rejected(e.to_string());
        }
        if self.seen.contains(&record.record_id) {
            return RecordOutcome::Duplicate;
        }
        let labels_valid = validate_labels(&record.labels).is_valid();
        let bucket_id = self.rules.chargeback_bucket(record);
        let day = record.usage_start.date_naive();
        let bucket = self
            .days
            .entry(record.account_id.clone())
            .or_default()
            .entry(day)
            .or_default();
        if let Err(e) = bucket.apply(record, labels_valid, bucket_id.bucket()) {
            return RecordOutcome::Rejected(e.to_string());
        }
        self.seen.insert(record.record_id.clone());
        self.known_accounts.insert(record.account_id.clone());
        RecordOutcome::Accepted {
            unattributed: bucket_id == Attribution::Unattributed,
        }
    }

    pub fn ingest<I>(&mut self, records: I) -> IngestReport
    where
        I: IntoIterator<Item = Result<BillingRecord, FeedError>>,
    {
        let mut report = IngestReport::default();
        for item in records {
            match item {
                Ok(record) => report.record(&self.apply(&record)),
                Err(_) => report.rejected += 1,
            }
        }
        report
    }

    fn period_days(
        &self,
        account_id: &str,
        period: &BudgetPeriod,
    ) -> Result<impl Iterator<Item = (&NaiveDate, &DayBucket)>, IngestError> {
        if !self.known_accounts.contains(account_id) {
            return Err(IngestError::UnknownAccount(account_id.to_string()));
        }
        let (first, last) = (period.first_day(), period.last_day());
        Ok(self
            .days
            .get(account_id)
            .into_iter()
            .flat_map(move |d| d.range(first..=last)))
    }

    /// Exact sum of record costs whose `usage_start` lies in the period.
    pub fn cumulative_spend(&self, account_id: &str, period: &BudgetPeriod) -> Result<Money, IngestError> {
        let mut total = Money::ZERO;
        for (_, bucket) in self.period_days(account_id, period)? {
            total = total.checked_add(bucket.total)?;
        }
        Ok(total)
    }

    pub fn aggregate(&self, account_id: &str, period: &BudgetPeriod) -> Result<SpendAggregate, IngestError> {
        let mut agg = SpendAggregate {
            account_id: account_id.to_string(),
            period: *period,
            total: Money::ZERO,
            by_service: BTreeMap::new(),
            unattributed: Money::ZERO,
        };
        for (_, bucket) in self.period_days(account_id, period)? {
            agg.total = agg.total.checked_add(bucket.total)?;
            agg.unattributed = agg.unattributed.checked_add(bucket.unattributed)?;
            for (svc, amount) in &bucket.by_service {
                add_into(&mut agg.by_service, svc, *amount)?;
            }
        }
        Ok(agg)
    }

    /// Per-day spend of one service over `[from, to]`, zero-filled.
    pub fn daily_service_spend(
        &self,
        account_id: &str,
        service: &str,
        from: NaiveDate,
        to: NaiveDate,
    ) -> Vec<(NaiveDate, Money)> {
        let days = self.days.get(account_id);
        let mut out = Vec::new();
        let mut day = from;
        while day <= to {
            let amount = days
                .and_then(|d| d.get(&day))
                .and_then(|b| b.by_service.get(service))
                .copied()
                .unwrap_or_default();
            out.push((day, amount));
            day = day.succ_opt().expect("date in range");
        }
        out
    }

    /// Every service the account has recorded spend for.
    pub fn services(&self, account_id: &str) -> BTreeSet<String> {
        self.days
            .get(account_id)
            .into_iter()
            .flat_map(|d| d.values())
            .flat_map(|b| b.by_service.keys().cloned())
            .collect()
    }

    /// First day on which the service has any recorded spend.
    pub fn first_service_day(&self, account_id: &str, service: &str) -> Option<NaiveDate> {
        self.days
            .get(account_id)?
            .iter()
            .find(|(_, b)| b.by_service.contains_key(service))
            .map(|(d, _)| *d)
    }

    /// Spend per `(cost center bucket, account)` for the period.
    pub fn cost_center_totals(
        &self,
        period: &BudgetPeriod,
    ) -> Result<BTreeMap<String, BTreeMap<String, Money>>, MoneyError> {
        let mut out: BTreeMap<String, BTreeMap<String, Money>> = BTreeMap::new();
        for (account, days) in &self.days {
            for (_, bucket) in days.range(period.first_day()..=period.last_day()) {
                for (cc, amount) in &bucket.by_cost_center {
                    add_into(out.entry(cc.clone()).or_default(), account, *amount)?;
                }
            }
        }
        Ok(out)
    }
}

impl IngestReport {
    pub fn record(&mut self, outcome: &RecordOutcome) {
        match outcome {
            RecordOutcome::Accepted { unattributed } => {
                self.accepted += 1;
                if *unattributed {
                    self.unattributed += 1;
                }
            }
            RecordOutcome::Duplicate => self.duplicates += 1,
            RecordOutcome::Rejected(_) => self.rejected += 1,
        }
    }
}

// Feed file format: one record per line, eight tab-separated fields:
// record_id, account_id, service_name, resource_id, labels (k=v,k=v),
// usage_start, usage_end (RFC 3339), cost (signed decimal dollars).
// Blank lines and lines starting with '#' are ignored.

pub const FEED_HEADER: &str =
    "# record_id\taccount_id\tservice_name\tresource_id\tlabels\tusage_start\tusage_end\tcost";

pub fn format_feed_line(record: &BillingRecord) -> String {
    let mut line = String::new();
    let _ = write!(
        line,
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        record.record_id,
        record.account_id,
        record.service_name,
        record.resource_id,
        record.labels.to_pairs_string(),
        record.usage_start.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        record.usage_end.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        record.cost,
    );
    line
}

fn parse_time(line: usize, field: &'static str, s: &str) -> Result<DateTime<Utc>, FeedError> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| FeedError::Field {
            line,
            field,
            reason: e.to_string(),
        })
}

/// Parses one feed line. `line` is used only for error messages.
pub fn parse_feed_line(line: usize, text: &str) -> Result<BillingRecord, FeedError> {
    let fields: Vec<&str> = text.trim_end_matches(['\r', '\n']).split('\t').collect();
    if fields.len() != 8 {
        return Err(FeedError::FieldCount {
            line,
            found: fields.len(),
        });
    }
    let non_empty = |idx: usize, field: &'static str| -> Result<String, FeedError> {
        let v = fields[idx].trim();
        if v.is_empty() {
            Err(FeedError::Field {
                line,
                field,
                reason: "empty".into(),
            })
        } else {
            Ok(v.to_string())
        }
    };
    let labels = LabelSet::parse_pairs(fields[4]).map_err(|e| FeedError::Field {
        line,
        field: "labels",
        reason: e.to_string(),
    })?;
    let cost = fields[7].trim().parse::<Money>().map_err(|e| FeedError::Field {
        line,
        field: "cost",
        reason: e.to_string(),
    })?;
    Ok(BillingRecord {
        record_id: non_empty(0, "record_id")?,
        account_id: non_empty(1, "account_id")?,
        service_name: non_empty(2, "service_name")?,
        resource_id: fields[3].trim().to_string(),
        labels,
        usage_start: parse_time(line, "usage_start", fields[5].trim())?,
        usage_end: parse_time(line, "usage_end", fields[6].trim())?,
        cost,
    })
}

/// Streams a feed, yielding one result per non-comment line.
pub fn read_feed<R: BufRead>(reader: R) -> impl Iterator<Item = Result<BillingRecord, FeedError>> {
    reader.lines().enumerate().filter_map(|(idx, line)| match line {
        Err(e) => Some(Err(FeedError::Io(e.to_string()))),
        Ok(text) => {
            let trimmed = text.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                None
            } else {
                Some(parse_feed_line(idx + 1, &text))
            }
        }
    })
}

fn default_feed_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedAccount {
    pub account_id: String,
    pub daily_mean: Money,
    pub daily_spread: Money,
    pub services: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedConfig {
    pub seed: u64,
    #[serde(default = "default_feed_start")]
    pub start: DateTime<Utc>,
    pub days: u32,
    pub records_per_day: u32,
    pub accounts: Vec<FeedAccount>,
}

/// Deterministic synthetic billing feed. Every slot of every day yields one
/// record per account; the seed fully determines the sequence.
pub struct FeedGenerator {
    config: FeedConfig,
    rng: ChaCha8Rng,
    day: u32,
    slot: u32,
    account: usize,
    totals: BTreeMap<String, Money>,
}

pub fn generate_feed(config: FeedConfig) -> FeedGenerator {
    let rng = ChaCha8Rng::seed_from_u64(config.seed);
    let totals = config
        .accounts
        .iter()
        .map(|a| (a.account_id.clone(), Money::ZERO))
        .collect();
    FeedGenerator {
        config,
        rng,
        day: 0,
        slot: 0,
        account: 0,
        totals,
    }
}

impl FeedGenerator {
    /// Running total generated per account so far.
    pub fn totals(&self) -> &BTreeMap<String, Money> {
        &self.totals
    }

    fn slot_len(&self) -> Duration {
        Duration::seconds(86_400 / i64::from(self.config.records_per_day.max(1)))
    }

    fn make_record(&mut self) -> BillingRecord {
        let account = self.config.accounts[self.account].clone();
        let per_slot = f64::from(self.config.records_per_day);
        let mean = dollars_f64(account.daily_mean) / per_slot;
        let sd = dollars_f64(account.daily_spread) / per_slot.sqrt();
        let draw = if sd > 0.0 {
            Normal::new(mean, sd).expect("finite spread").sample(&mut self.rng)
        } else {
            mean
        };
        let cost = Money::from_cents((draw.max(0.0) * 100.0).round() as i64);
        let service = if account.services.is_empty() {
            "compute".to_string()
        } else {
            let idx = self.rng.random_range(0..account.services.len());
            account.services[idx].clone()
        };
        let start = self.config.start + Duration::days(i64::from(self.day)) + self.slot_len() * self.slot as i32;
        let record = BillingRecord {
            record_id: format!("{}-d{:04}-s{:04}", account.account_id, self.day, self.slot),
            account_id: account.account_id.clone(),
            service_name: service.clone(),
            resource_id: format!("{}/{}", account.account_id, service),
            labels: LabelSet::new()
                .with("purpose", sanitize_label(&service))
                .with("owner", sanitize_label(&account.account_id))
                .with("environment", "prod"),
            usage_start: start,
            usage_end: start + self.slot_len(),
            cost,
        };
        let total = self.totals.entry(account.account_id).or_default();
        *total = total.checked_add(cost).expect("generated totals fit");
        record
    }
}

fn dollars_f64(m: Money) -> f64 {
    m.cents() as f64 / 100.0
}

fn sanitize_label(s: &str) -> String {
    let cleaned: String = s
        .to_ascii_lowercase()
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '-'
            }
        })
        .take(crate::model::MAX_LABEL_LEN)
        .collect();
    if cleaned.is_empty() {
        "unknown".into()
    } else {
        cleaned
    }
}

impl Iterator for FeedGenerator {
    type Item = BillingRecord;

    fn next(&mut self) -> Option<BillingRecord> {
        if self.config.accounts.is_empty() || self.config.records_per_day == 0 || self.day >= self.config.days {
            return None;
        }
        let record = self.make_record();
        self.account += 1;
        if self.account == self.config.accounts.len() {
            self.account = 0;
            self.slot += 1;
            if self.slot == self.config.records_per_day {
                self.slot = 0;
                self.day += 1;
            }
        }
        Some(record)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("{0:?} billing client is not configured in this build")]
    NotConfigured(Provider),
    #[error(transparent)]
    Feed(#[from] FeedError),
}

/// Source of billing records. Each call returns records whose usage ended
/// at or before `until` that have not been returned before.
pub trait BillingProvider {
    fn provider(&self) -> Provider;
    fn fetch(&mut self, until: DateTime<Utc>) -> Result<Vec<Result<BillingRecord, FeedError>>, ProviderError>;
}

pub struct SimulatedProvider {
    feed: std::iter::Peekable<FeedGenerator>,
}

impl SimulatedProvider {
    pub fn new(config: FeedConfig) -> Self {
        SimulatedProvider {
            feed: generate_feed(config).peekable(),
        }
    }
}

impl BillingProvider for SimulatedProvider {
    fn provider(&self) -> Provider {
        Provider::Simulated
    }

    fn fetch(&mut self, until: DateTime<Utc>) -> Result<Vec<Result<BillingRecord, FeedError>>, ProviderError> {
        let mut out = Vec::new();
        while let Some(r) = self.feed.next_if(|r| r.usage_end <= until) {
            out.push(Ok(r));
        }
        Ok(out)
    }
}

/// Replays a feed file; every record is available immediately.
pub struct FileProvider {
    pending: std::vec::IntoIter<Result<BillingRecord, FeedError>>,
}

impl FileProvider {
    pub fn open(path: &std::path::Path) -> Result<Self, ProviderError> {
        let file = std::fs::File::open(path).map_err(|e| FeedError::Io(e.to_string()))?;
        let records: Vec<_> = read_feed(std::io::BufReader::new(file)).collect();
        Ok(FileProvider {
            pending: records.into_iter(),
        })
    }
}

impl BillingProvider for FileProvider {
    fn provider(&self) -> Provider {
        Provider::Simulated
    }

    fn fetch(&mut self, _until: DateTime<Utc>) -> Result<Vec<Result<BillingRecord, FeedError>>, ProviderError> {
        Ok(self.pending.by_ref().collect())
    }
}

/// Placeholder for real cloud billing exports (GCP, AWS, Azure).
pub struct CloudProviderStub {
    pub provider: Provider,
}

impl BillingProvider for CloudProviderStub {
    fn provider(&self) -> Provider {
        self.provider
    }

    fn fetch(&mut self, _until: DateTime<Utc>) -> Result<Vec<Result<BillingRecord, FeedError>>, ProviderError> {
        Err(ProviderError::NotConfigured(self.provider))
    }
}
