//! Alert fan-out to pluggable sinks.
//!
//! Every alert is first appended to the dashboard store (`alerts.jsonl`),
//! which assigns its id and position in the notification feed, and then
//! offered to each enabled external sink. Webhook deliveries are retried
//! with exponential backoff; exhausted deliveries go to the dead-letter log.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::enforcement::{BreachRecord, EnforcementAction};
use crate::money::Money;
use crate::monitor::ThresholdEvent;
use crate::storage::{AppendLog, Durability, FailPoint, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

impl Severity {
    pub fn for_threshold(threshold: Decimal) -> Severity {
        if threshold >= Decimal::ONE {
            Severity::Critical
        } else if threshold >= Decimal::new(9, 1) {
            Severity::Warning
        } else {
            Severity::Info
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Info => "info",
            Severity::Warning => "warning",
            Severity::Critical => "critical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertKind {
    Threshold,
    Enforcement,
    Operator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub seq: u64,
    pub alert_id: String,
    pub severity: Severity,
    pub kind: AlertKind,
    /// Threshold event key or breach id this alert reports.
    pub source: String,
    pub account_id: String,
    pub budget_id: String,
    pub threshold: Decimal,
    pub spend: Money,
    pub crb: Money,
    pub body: String,
    pub created_at: DateTime<Utc>,
}

/// Thresholds are shown with at least two decimals: `0.50`, `1.10`.
pub fn format_threshold(t: Decimal) -> String {
    let mut t = t.normalize();
    if t.scale() < 2 {
        t.rescale(2);
    }
    t.to_string()
}

impl Alert {
    #[allow(clippy::too_many_arguments)]
    fn draft(
        severity: Severity,
        kind: AlertKind,
        source: String,
        account_id: &str,
        budget_id: &str,
        threshold: Decimal,
        spend: Money,
        crb: Money,
        body: String,
        created_at: DateTime<Utc>,
    ) -> Alert {
        Alert {
            seq: 0,
            alert_id: String::new(),
            severity,
            kind,
            source,
            account_id: account_id.to_string(),
            budget_id: budget_id.to_string(),
            threshold,
            spend,
            crb,
            body,
            created_at,
        }
    }

    pub fn for_threshold(event: &ThresholdEvent) -> Alert {
        let severity = Severity::for_threshold(event.threshold);
        let body = format!(
            "[{}] budget {} account {} period {} reached {} of budget: spend {} crb {}",
            severity.as_str(),
            event.budget_id,
            event.account_id,
            event.period.label(),
            format_threshold(event.threshold),
            event.spend_at_crossing,
            event.crb,
        );
        Alert::draft(
            severity,
            AlertKind::Threshold,
            event.key(),
            &event.account_id,
            &event.budget_id,
            event.threshold,
            event.spend_at_crossing,
            event.crb,
            body,
            event.occurred_at,
        )
    }

    /// Applied enforcement actions are critical; an enforcement message for
    /// an unknown account raises an operator warning. Other records (no-op
    /// enforcement, reinstatement) produce no alert.
    pub fn for_breach(record: &BreachRecord) -> Option<Alert> {
        let budget_id = record.budget_id.as_deref().unwrap_or("");
        let (severity, kind, what) = match (record.action_taken, record.resulting_state) {
            (EnforcementAction::None, None) if record.dedup_key.is_some() => (
                Severity::Warning,
                AlertKind::Operator,
                "enforcement skipped: unknown account".to_string(),
            ),
            (EnforcementAction::None, _) => return None,
            (action, state) => (
                Severity::Critical,
                AlertKind::Enforcement,
                format!(
                    "enforcement {:?} applied, account now {:?}",
                    action,
                    state.map(|s| s.value)
                ),
            ),
        };
        let body = format!(
            "[{}] {} {} account {} threshold {}: spend {} budget {}",
            severity.as_str(),
            record.breach_id,
            what,
            record.account_id,
            format_threshold(record.threshold),
            record.spend,
            record.budget,
        );
        Some(Alert::draft(
            severity,
            kind,
            record.breach_id.clone(),
            &record.account_id,
            budget_id,
            record.threshold,
            record.spend,
            record.budget,
            body,
            record.recorded_at,
        ))
    }
}

#[derive(Serialize)]
struct WebhookBody<'a> {
    alert_id: &'a str,
    severity: Severity,
    account_id: &'a str,
    budget_id: &'a str,
    threshold: String,
    spend: String,
    crb: String,
    created_at: String,
}

/// The webhook POST body: compact JSON, fields in a fixed order, all
/// values strings.
pub fn webhook_body(alert: &Alert) -> String {
    serde_json::to_string(&WebhookBody {
        alert_id: &alert.alert_id,
        severity: alert.severity,
        account_id: &alert.account_id,
        budget_id: &alert.budget_id,
        threshold: format_threshold(alert.threshold),
        spend: alert.spend.to_string(),
        crb: alert.crb.to_string(),
        created_at: alert.created_at.to_rfc3339_opts(SecondsFormat::Secs, true),
    })
    .expect("webhook body serializes")
}

/// The dashboard store: the always-on sink and the notification feed.
#[derive(Debug)]
pub struct AlertStore {
    log: AppendLog<Alert>,
    alerts: Vec<Alert>,
    by_source: HashMap<String, usize>,
    fail: Arc<FailPoint>,
}

impl AlertStore {
    pub fn open(path: &Path, durability: Durability, fail: Arc<FailPoint>) -> Result<Self, StoreError> {
        let (log, alerts) = AppendLog::<Alert>::open(path, durability)?;
        let by_source = alerts.iter().enumerate().map(|(i, a)| (a.source.clone(), i)).collect();
        Ok(AlertStore {
            log,
            alerts,
            by_source,
            fail,
        })
    }

    /// Assigns the sequence number and id, then appends durably.
    pub fn append(&mut self, mut alert: Alert) -> Result<Alert, StoreError> {
        alert.seq = self.alerts.last().map_or(1, |a| a.seq + 1);
        alert.alert_id = format!("AL-{:08}", alert.seq);
        self.fail.hit()?;
        self.log.append(&alert)?;
        self.by_source.insert(alert.source.clone(), self.alerts.len());
        self.alerts.push(alert.clone());
        Ok(alert)
    }

    pub fn has_source(&self, source: &str) -> bool {
        self.by_source.contains_key(source)
    }

    pub fn all(&self) -> &[Alert] {
        &self.alerts
    }

    /// Alerts created after `cursor` (0 is the beginning) and the cursor to
    /// pass next time.
    pub fn poll(&self, cursor: u64) -> (Vec<Alert>, u64) {
        let start = self.alerts.partition_point(|a| a.seq <= cursor);
        let new: Vec<Alert> = self.alerts[start..].to_vec();
        let next = new.last().map_or(cursor, |a| a.seq);
        (new, next)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinkKind {
    Console,
    File,
    Webhook,
    DashboardStore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SinkRegistration {
    pub sink_id: String,
    pub kind: SinkKind,
    /// File path or URL; unused for console and dashboard sinks.
    #[serde(default)]
    pub destination: Option<String>,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
}

fn enabled_default() -> bool {
    true
}

pub trait Sink: Send + Sync {
    fn deliver(&self, alert: &Alert) -> Result<(), String>;

    /// Whether failed deliveries should be retried.
    fn retryable(&self) -> bool {
        false
    }
}

pub struct ConsoleSink;

impl Sink for ConsoleSink {
    fn deliver(&self, alert: &Alert) -> Result<(), String> {
        println!("{} {}", alert.alert_id, alert.body);
        Ok(())
    }
}

/// Appends one plain-text line per alert.
pub struct FileSink {
    path: PathBuf,
}

impl FileSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FileSink { path: path.into() }
    }
}

impl Sink for FileSink {
    fn deliver(&self, alert: &Alert) -> Result<(), String> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| e.to_string())?;
        writeln!(
            f,
            "{}\t{}\t{}",
            alert.created_at.to_rfc3339_opts(SecondsFormat::Secs, true),
            alert.alert_id,
            alert.body
        )
        .map_err(|e| e.to_string())
    }
}

pub struct WebhookSink {
    url: String,
    agent: ureq::Agent,
}

impl WebhookSink {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        WebhookSink {
            url: url.into(),
            agent: ureq::Agent::new_with_config(config),
        }
    }
}

impl Sink for WebhookSink {
    fn deliver(&self, alert: &Alert) -> Result<(), String> {
        self.agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(webhook_body(alert))
            .map(|_| ())
            .map_err(|e| e.to_string())
    }

    fn retryable(&self) -> bool {
        true
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 3,
            base: Duration::from_secs(1),
            factor: 4,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry `n` (0-based): base, base·factor, base·factor², …
    pub fn delay(&self, n: u32) -> Duration {
        self.base * self.factor.pow(n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub alert_id: String,
    pub sink_id: String,
    pub destination: Option<String>,
    pub attempts: u32,
    pub error: String,
    pub failed_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SinkResult {
    pub sink_id: String,
    pub delivered: bool,
    pub attempts: u32,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryReport {
    pub alert_id: String,
    pub results: Vec<SinkResult>,
}

impl DeliveryReport {
    pub fn all_delivered(&self) -> bool {
        self.results.iter().all(|r| r.delivered)
    }
}

struct Registered {
    registration: SinkRegistration,
    sink: Box<dyn Sink>,
}

struct DispatchState {
    sinks: Vec<Registered>,
    dead_letter: AppendLog<DeadLetter>,
}

/// Delivers stored alerts to the external sinks. Calls are serialized so
/// each sink sees alerts in creation order.
pub struct Dispatcher {
    state: Mutex<DispatchState>,
    retry: RetryPolicy,
    sleeper: Arc<dyn Sleeper>,
}

impl std::fmt::Debug for Dispatcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dispatcher")
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

pub const DASHBOARD_SINK_ID: &str = "dashboard";

impl Dispatcher {
    pub fn new(dead_letter_path: &Path, durability: Durability) -> Result<Self, StoreError> {
        let (dead_letter, _) = AppendLog::open(dead_letter_path, durability)?;
        Ok(Dispatcher {
            state: Mutex::new(DispatchState {
                sinks: Vec::new(),
                dead_letter,
            }),
            retry: RetryPolicy::default(),
            sleeper: Arc::new(ThreadSleeper),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy, sleeper: Arc<dyn Sleeper>) -> Self {
        self.retry = retry;
        self.sleeper = sleeper;
        self
    }

    /// Registers a sink built from its registration. Dashboard-store
    /// registrations are accepted and ignored: that sink is always on.
    pub fn register(&self, registration: SinkRegistration) -> Result<(), String> {
        let sink: Box<dyn Sink> = match registration.kind {
            SinkKind::DashboardStore => return Ok(()),
            SinkKind::Console => Box::new(ConsoleSink),
            SinkKind::File => Box::new(FileSink::new(
                registration
                    .destination
                    .clone()
                    .ok_or("file sink needs a destination path")?,
            )),
            SinkKind::Webhook => Box::new(WebhookSink::new(
                registration
                    .destination
                    .clone()
                    .ok_or("webhook sink needs a destination URL")?,
                Duration::from_secs(5),
            )),
        };
        self.register_sink(registration, sink)
    }

    pub fn register_sink(&self, registration: SinkRegistration, sink: Box<dyn Sink>) -> Result<(), String> {
        let mut state = self.state.lock().expect("dispatcher lock poisoned");
        if registration.sink_id == DASHBOARD_SINK_ID
            || state
                .sinks
                .iter()
                .any(|r| r.registration.sink_id == registration.sink_id)
        {
            return Err(format!("duplicate sink id {}", registration.sink_id));
        }
        state.sinks.push(Registered { registration, sink });
        Ok(())
    }

    /// Offers a stored alert to every enabled sink. Failures are reported
    /// and dead-lettered, never returned.
    pub fn dispatch(&self, alert: &Alert, now: DateTime<Utc>) -> DeliveryReport {
        let mut state = self.state.lock().expect("dispatcher lock poisoned");
        let DispatchState { sinks, dead_letter } = &mut *state;
        let mut results = vec![SinkResult {
            sink_id: DASHBOARD_SINK_ID.to_string(),
            delivered: true,
            attempts: 1,
            error: None,
        }];
        for r in sinks.iter().filter(|r| r.registration.enabled) {
            let max_attempts = if r.sink.retryable() { 1 + self.retry.retries } else { 1 };
            let mut attempts = 0;
            let mut error = None;
            while attempts < max_attempts {
                if attempts > 0 {
                    self.sleeper.sleep(self.retry.delay(attempts - 1));
                }
                attempts += 1;
                match r.sink.deliver(alert) {
                    Ok(()) => {
                        error = None;
                        break;
                    }
                    Err(e) => error = Some(e),
                }
            }
            if let Some(e) = &error {
                let entry = DeadLetter {
                    alert_id: alert.alert_id.clone(),
                    sink_id: r.registration.sink_id.clone(),
                    destination: r.registration.destination.clone(),
                    attempts,
                    error: e.clone(),
                    failed_at: now,
                };
                if let Err(err) = dead_letter.append(&entry) {
                    tracing::error!(%err, alert_id = %alert.alert_id, "dead-letter append failed");
                }
            }
            results.push(SinkResult {
                sink_id: r.registration.sink_id.clone(),
                delivered: error.is_none(),
                attempts,
                error,
            });
        }
        DeliveryReport {
            alert_id: alert.alert_id.clone(),
            results,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BudgetPeriod;
    use chrono::TimeZone;
    use rust_decimal_macros::dec;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn event(t: Decimal) -> ThresholdEvent {
        ThresholdEvent {
            budget_id: "b1".into(),
            account_id: "acct-a".into(),
            period: BudgetPeriod::monthly(2024, 1).unwrap(),
            threshold: t,
            spend_at_crossing: "102060.00".parse().unwrap(),
            crb: "113400.00".parse().unwrap(),
            occurred_at: Utc.with_ymd_and_hms(2024, 1, 20, 0, 0, 0).unwrap(),
        }
    }

    struct Failing(AtomicU32);
    impl Sink for Failing {
        fn deliver(&self, _: &Alert) -> Result<(), String> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Err("connection refused".into())
        }
        fn retryable(&self) -> bool {
            true
        }
    }

    struct Recorder(Mutex<Vec<String>>);
    impl Sink for Recorder {
        fn deliver(&self, a: &Alert) -> Result<(), String> {
            self.0.lock().unwrap().push(a.alert_id.clone());
            Ok(())
        }
    }
    impl Sink for Arc<Recorder> {
        fn deliver(&self, a: &Alert) -> Result<(), String> {
            self.as_ref().deliver(a)
        }
    }

    #[derive(Default)]
    struct RecordingSleeper(Mutex<Vec<Duration>>);
    impl Sleeper for RecordingSleeper {
        fn sleep(&self, d: Duration) {
            self.0.lock().unwrap().push(d);
        }
    }

    fn reg(id: &str, kind: SinkKind) -> SinkRegistration {
        SinkRegistration {
            sink_id: id.into(),
            kind,
            destination: None,
            enabled: true,
        }
    }

    #[test]
    fn severity_mapping() {
        assert_eq!(Severity::for_threshold(dec!(0.5)), Severity::Info);
        assert_eq!(Severity::for_threshold(dec!(0.75)), Severity::Info);
        assert_eq!(Severity::for_threshold(dec!(0.9)), Severity::Warning);
        assert_eq!(Severity::for_threshold(dec!(1.0)), Severity::Critical);
        assert_eq!(Severity::for_threshold(dec!(1.1)), Severity::Critical);
    }

    #[test]
    fn webhook_body_layout() {
        let mut a = Alert::for_threshold(&event(dec!(0.9)));
        a.alert_id = "AL-00000003".into();
        assert_eq!(
            webhook_body(&a),
            r#"{"alert_id":"AL-00000003","severity":"warning","account_id":"acct-a","budget_id":"b1","threshold":"0.90","spend":"102060.00","crb":"113400.00","created_at":"2024-01-20T00:00:00Z"}"#
        );
    }

    #[test]
    fn failing_webhook_retries_then_dead_letters() {
        let dir = tempfile::tempdir().unwrap();
        let dl = dir.path().join("dead_letter.jsonl");
        let sleeper = Arc::new(RecordingSleeper::default());
        let d = Dispatcher::new(&dl, Durability::Flush)
            .unwrap()
            .with_retry(RetryPolicy::default(), sleeper.clone());
        let failing = Arc::new(Failing(AtomicU32::new(0)));
        struct Shared(Arc<Failing>);
        impl Sink for Shared {
            fn deliver(&self, a: &Alert) -> Result<(), String> {
                self.0.deliver(a)
            }
            fn retryable(&self) -> bool {
                true
            }
        }
        let recorder = Arc::new(Recorder(Mutex::new(vec![])));
        d.register_sink(reg("hook", SinkKind::Webhook), Box::new(Shared(failing.clone())))
            .unwrap();
        d.register_sink(reg("rec", SinkKind::Console), Box::new(recorder.clone()))
            .unwrap();

        let mut alert = Alert::for_threshold(&event(dec!(0.5)));
        alert.alert_id = "AL-00000001".into();
        let report = d.dispatch(&alert, alert.created_at);

        assert_eq!(failing.0.load(Ordering::SeqCst), 4);
        assert_eq!(
            *sleeper.0.lock().unwrap(),
            vec![Duration::from_secs(1), Duration::from_secs(4), Duration::from_secs(16)]
        );
        assert_eq!(report.results.len(), 3);
        assert!(report.results[0].delivered);
        assert!(!report.results[1].delivered);
        assert!(report.results[2].delivered);
        assert_eq!(*recorder.0.lock().unwrap(), vec!["AL-00000001"]);
        let (_, dead) = AppendLog::<DeadLetter>::open(&dl, Durability::Flush).unwrap();
        assert_eq!(dead.len(), 1);
        assert_eq!(dead[0].attempts, 4);
    }

    #[test]
    fn duplicate_sink_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dispatcher::new(&dir.path().join("dl"), Durability::Flush).unwrap();
        d.register(reg("c", SinkKind::Console)).unwrap();
        assert!(d.register(reg("c", SinkKind::Console)).is_err());
        assert!(d.register(reg("w", SinkKind::Webhook)).is_err());
    }

    #[test]
    fn store_polling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("alerts.jsonl");
        let mut store = AlertStore::open(&path, Durability::Flush, Arc::new(FailPoint::disarmed())).unwrap();
        assert_eq!(store.poll(0), (vec![], 0));
        for t in [dec!(0.5), dec!(0.75), dec!(0.9)] {
            store.append(Alert::for_threshold(&event(t))).unwrap();
        }
        let (got, cursor) = store.poll(0);
        assert_eq!(
            got.iter().map(|a| a.alert_id.as_str()).collect::<Vec<_>>(),
            ["AL-00000001", "AL-00000002", "AL-00000003"]
        );
        assert_eq!(cursor, 3);
        assert_eq!(store.poll(cursor), (vec![], 3));
        assert_eq!(store.poll(2).0.len(), 1);

        let reopened = AlertStore::open(&path, Durability::Flush, Arc::new(FailPoint::disarmed())).unwrap();
        assert_eq!(reopened.all(), store.all());
        assert!(reopened.has_source(&event(dec!(0.75)).key()));
    }

    #[test]
    fn file_sink_appends_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("alerts.log");
        let sink = FileSink::new(&path);
        let mut a = Alert::for_threshold(&event(dec!(1)));
        a.alert_id = "AL-00000009".into();
        sink.deliver(&a).unwrap();
        sink.deliver(&a).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("2024-01-20T00:00:00Z\tAL-00000009\t[critical] budget b1"));
    }
}
