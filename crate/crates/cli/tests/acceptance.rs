//! Acceptance checks. Prints one PASS or FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use abacus_cli::api::{router, AppState};
use abacus_cli::server::{tick_once, Monitor};
use abacus_core::budget::{
    coefficient_of_variation, compute_budget, default_thresholds, BudgetSpec, SpendSeries, VariabilityMode,
};
use abacus_core::enforcement::{
    AccountBook, BreachStore, DurableQueue, EnforcementAction, EnforcementPolicy, Enforcer, EnqueueOutcome, QueueHandle,
};
use abacus_core::gate::{DeploymentPlan, PlanResource, Verdict};
use abacus_core::ingest::{generate_feed, FeedAccount, FeedConfig, LabelOverride};
use abacus_core::model::{Account, AccountState, AccountStatus, BillingRecord, BudgetPeriod, Provider};
use abacus_core::money::Money;
use abacus_core::monitor::{CostEvaluationReport, EnforcementMessage};
use abacus_core::service::{Abacus, AccountConfig, Config, ScenarioConfig, SimClock};
use abacus_core::storage::{Durability, FailPoint};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use chrono::{DateTime, TimeZone, Utc};
use http_body_util::BodyExt;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;
use serde_json::{json, Value};
use tower::ServiceExt;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

fn d(s: &str) -> Decimal {
    s.parse().unwrap()
}

fn dollars(n: i64) -> Money {
    Money::from_dollars(n).unwrap()
}

fn jan(day: u32, hour: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, day, hour, 0, 0).unwrap()
}

fn samples() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("samples")
}

fn sample_config(dir: &Path) -> Config {
    let mut c = Config::from_toml(&std::fs::read_to_string(samples().join("config.toml")).unwrap()).unwrap();
    c.data_dir = dir.to_path_buf();
    c.durability = Durability::Flush;
    c
}

fn sample_scenario() -> ScenarioConfig {
    ScenarioConfig::from_toml(&std::fs::read_to_string(samples().join("scenario.toml")).unwrap()).unwrap()
}

fn spec(hc: &[Money], g: Decimal, c: Decimal, v: Decimal, ab: Money) -> BudgetSpec {
    BudgetSpec {
        target_id: "acct-etl".into(),
        period: BudgetPeriod::monthly(2024, 1).unwrap(),
        historical: SpendSeries::new(hc.to_vec()).unwrap(),
        growth_factor: g,
        cost_control_factor: c,
        variability: VariabilityMode::Explicit { value: v },
        available_budget: ab,
        thresholds: default_thresholds(),
    }
}

fn crb(s: &BudgetSpec) -> Money {
    compute_budget(s, jan(1, 0)).unwrap().crb
}

fn worked_example() -> Outcome {
    let s = spec(&[dollars(100_000)], d("0.20"), d("0.10"), d("0.05"), dollars(120_000));
    let start = Instant::now();
    let b = compute_budget(&s, jan(1, 0)).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    ensure!(b.adjusted_spend == dollars(113_400), "AS = {}", b.adjusted_spend);
    ensure!(b.crb == dollars(113_400), "CRB = {}", b.crb);
    ensure!(took < Duration::from_millis(1), "took {took:?}");
    Ok(format!("AS = CRB = {} in {took:?}", b.crb.to_grouped_string()))
}

fn table() -> Outcome {
    let row = |c: &str, v: &str| crb(&spec(&[dollars(100_000)], d("0.20"), d(c), d(v), dollars(120_000)));
    let expected = [
        ("0", "0", 120_000),
        ("0.10", "0", 108_000),
        ("0.20", "0", 96_000),
        ("0.30", "0", 84_000),
        ("0", "0.1", 120_000),
        ("0.10", "0.1", 118_800),
        ("0.20", "0.1", 105_600),
        ("0.30", "0.1", 92_400),
    ];
    for (c, v, want) in expected {
        let got = row(c, v);
        ensure!(got == dollars(want), "C={c} V={v}: got {got}, want {want}");
    }
    Ok("8 cells exact; erratum: the reference table lists 100,800 at C=30%, V=0.1, the formula gives 92,400".into())
}

fn rational(x: Decimal) -> BigRational {
    BigRational::new(BigInt::from(x.mantissa()), BigInt::from(10u8).pow(x.scale()))
}

/// Brute-force CoV: exact mean and variance, one square root at the end.
fn cov_oracle(xs: &[Decimal]) -> f64 {
    let n = BigRational::from_integer(xs.len().into());
    let sum = xs.iter().map(|x| rational(*x)).fold(BigRational::zero(), |a, b| a + b);
    let mean = &sum / &n;
    let ss = xs
        .iter()
        .map(|x| {
            let dx = rational(*x) - &mean;
            &dx * &dx
        })
        .fold(BigRational::zero(), |a, b| a + b);
    let var = ss / (n - BigRational::from_integer(1.into()));
    (var / (&mean * &mean)).to_f64().unwrap().sqrt()
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn cov() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut worst_scaled: f64 = 0.0;
    for i in 0..1_000 {
        let n = rng.random_range(2..=50);
        let xs: Vec<Decimal> = (0..n)
            .map(|_| Decimal::new(rng.random_range(1..=100_000_000_000), 2))
            .collect();
        let got = coefficient_of_variation(&xs)
            .map_err(|e| format!("series {i}: {e}"))?
            .to_f64()
            .unwrap();
        let err = rel_err(got, cov_oracle(&xs));
        worst = worst.max(if got == 0.0 { 0.0 } else { err });
        ensure!(err <= 1e-9, "series {i}: relative error {err}");

        let k = Decimal::new(rng.random_range(1..=1_000_000_000_000), 6);
        let scaled: Vec<Decimal> = xs.iter().map(|x| *x * k).collect();
        let v_scaled = coefficient_of_variation(&scaled)
            .map_err(|e| e.to_string())?
            .to_f64()
            .unwrap();
        let err = rel_err(got, v_scaled);
        worst_scaled = worst_scaled.max(err);
        ensure!(
            got == 0.0 && v_scaled == 0.0 || err <= 1e-9,
            "series {i} k={k}: scaled relative error {err}"
        );
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(5), "took {took:?}");
    Ok(format!(
        "1000 series, max rel err {worst:.1e}, scaled {worst_scaled:.1e}, {took:?}"
    ))
}

fn thresholds() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut scenario = sample_scenario();
    scenario.feed.accounts.retain(|a| a.account_id == "acct-etl");
    scenario.budgets.retain(|b| b.spec.target_id == "acct-etl");
    let mut e = Abacus::open(sample_config(dir.path())).map_err(|e| e.to_string())?;
    let summary = e.simulate(&scenario).map_err(|e| e.to_string())?;
    let fired: Vec<(Decimal, DateTime<Utc>)> = e
        .fired_events()
        .iter()
        .map(|ev| (ev.threshold, ev.occurred_at))
        .collect();
    let levels: Vec<Decimal> = fired.iter().map(|f| f.0).collect();
    ensure!(summary.events == 4, "{} events", summary.events);
    ensure!(levels == default_thresholds(), "thresholds {levels:?}");
    ensure!(
        fired.windows(2).all(|w| w[0].1 <= w[1].1),
        "out of time order: {fired:?}"
    );
    let again = e.sweep(jan(31, 23)).map_err(|e| e.to_string())?;
    ensure!(again.events.is_empty(), "re-sweep fired {}", again.events.len());
    let resumed = e.simulate(&scenario).map_err(|e| e.to_string())?;
    ensure!(resumed.events == 0, "resume fired {}", resumed.events);
    Ok(format!("fired {levels:?} once each, re-sweep fired 0"))
}

fn message(account: &str, threshold: Decimal) -> EnforcementMessage {
    let period = BudgetPeriod::monthly(2024, 1).unwrap();
    EnforcementMessage {
        budget_id: format!("b-{account}"),
        account_id: account.into(),
        period,
        service_type: "*".into(),
        budget: dollars(1_000),
        spend: dollars(1_100),
        threshold,
        action_class: EnforcementAction::StopServices,
        report: CostEvaluationReport {
            account_id: account.into(),
            period,
            top_services: vec![],
            burn_rate: None,
            anomalies: vec![],
        },
    }
}

fn open_queue(path: &Path) -> QueueHandle {
    QueueHandle::new(DurableQueue::open(path, 10_000, Durability::Flush, Arc::new(FailPoint::disarmed())).unwrap())
}

fn book_from(store: &BreachStore, accounts: &[&str]) -> AccountBook {
    let mut book = AccountBook::new(accounts.iter().map(|id| Account {
        account_id: id.to_string(),
        display_name: String::new(),
        cost_center_id: "cc".into(),
        provider: Provider::Simulated,
        state: AccountState {
            value: AccountStatus::Active,
            changed_at: jan(1, 0),
        },
    }));
    for r in store.all() {
        book.apply(r);
    }
    book
}

enum Stop {
    /// Kill after this many enforcements, with the last one recorded but
    /// not acknowledged.
    BeforeAck(usize),
    /// Run until the breach store's armed fail point trips.
    StoreFault,
    Drained(usize),
}

/// Single consumer: enforce the head, then ack it.
fn consume(
    queue: &QueueHandle,
    store: &mut BreachStore,
    book: &mut AccountBook,
    stop: Stop,
    producers_done: &dyn Fn() -> bool,
) -> usize {
    let enforcer = Enforcer::new(EnforcementPolicy::default());
    let services: BTreeSet<String> = ["compute", "storage"].iter().map(|s| s.to_string()).collect();
    let mut done = 0;
    loop {
        let Some(head) = queue.wait_head(Duration::from_millis(20)) else {
            if producers_done() && queue.head().is_none() {
                return done;
            }
            continue;
        };
        match enforcer.enforce(&head.message, book, store, &services, jan(20, 0)) {
            Ok(_) => {}
            Err(_) if matches!(stop, Stop::StoreFault) => return done,
            Err(e) => panic!("enforce: {e}"),
        }
        done += 1;
        if matches!(stop, Stop::BeforeAck(n) if n == done) {
            return done;
        }
        queue.ack(head.seq).unwrap();
        if matches!(stop, Stop::Drained(n) if n == done) {
            return done;
        }
    }
}

fn sequential_enforcement() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("queue.journal");
    let breaches = dir.path().join("breaches.jsonl");
    let accounts = ["acct-0", "acct-1", "acct-2", "acct-3"];
    const PRODUCERS: usize = 8;
    const PER_PRODUCER: usize = 125;
    let total = PRODUCERS * PER_PRODUCER;

    // First run: 8 producers race a consumer that is killed after 300
    // enforcements, the last one recorded but never acknowledged.
    let queue = open_queue(&journal);
    let mut store = BreachStore::open(&breaches, Durability::Flush, Arc::new(FailPoint::disarmed())).unwrap();
    let mut book = book_from(&store, &accounts);
    let finished = Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let seqs: BTreeMap<String, u64> = thread::scope(|s| {
        let handles: Vec<_> = (0..PRODUCERS)
            .map(|p| {
                let queue = queue.clone();
                let finished = finished.clone();
                s.spawn(move || {
                    let mut mine = Vec::new();
                    for i in 0..PER_PRODUCER {
                        let n = p * PER_PRODUCER + i;
                        let msg = message(accounts[n % accounts.len()], Decimal::new(10_000 + n as i64, 4));
                        let key = msg.dedup_key();
                        loop {
                            match queue.enqueue(msg.clone()).unwrap() {
                                EnqueueOutcome::Accepted { seq } => {
                                    mine.push((key, seq));
                                    break;
                                }
                                EnqueueOutcome::RetryLater => thread::sleep(Duration::from_millis(1)),
                            }
                        }
                    }
                    finished.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    mine
                })
            })
            .collect();
        let processed = consume(&queue, &mut store, &mut book, Stop::BeforeAck(300), &|| false);
        assert_eq!(processed, 300);
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    drop((queue, store, book));
    ensure!(seqs.len() == total, "{} distinct enqueued keys", seqs.len());

    // Second run: recover, then crash on a breach-store write.
    let queue = open_queue(&journal);
    let mut store = BreachStore::open(&breaches, Durability::Flush, Arc::new(FailPoint::after(250))).unwrap();
    let mut book = book_from(&store, &accounts);
    consume(&queue, &mut store, &mut book, Stop::StoreFault, &|| true);
    drop((queue, store, book));

    // Third run: drain to the end.
    let queue = open_queue(&journal);
    let mut store = BreachStore::open(&breaches, Durability::Flush, Arc::new(FailPoint::disarmed())).unwrap();
    let mut book = book_from(&store, &accounts);
    consume(&queue, &mut store, &mut book, Stop::Drained(usize::MAX), &|| true);
    ensure!(queue.head().is_none(), "queue not empty");

    let records = store.all();
    ensure!(records.len() == total, "{} breach records", records.len());
    let keys: Vec<&str> = records.iter().map(|r| r.dedup_key.as_deref().unwrap_or("")).collect();
    let unique: BTreeSet<&str> = keys.iter().copied().collect();
    ensure!(unique.len() == total, "{} duplicate keys", total - unique.len());
    let order: Vec<u64> = keys.iter().map(|k| seqs.get(*k).copied().unwrap_or(0)).collect();
    ensure!(order.iter().all(|s| *s > 0), "record with unknown key");
    ensure!(
        order.windows(2).all(|w| w[0] < w[1]),
        "breach order differs from enqueue order"
    );
    let record_seqs: Vec<u64> = records.iter().map(|r| r.seq).collect();
    ensure!(
        record_seqs == (1..=total as u64).collect::<Vec<_>>(),
        "breach sequence has gaps"
    );
    Ok(format!(
        "{total} records in enqueue order across 2 restarts, no duplicates or gaps"
    ))
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn blocking_flow() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(SimClock::new(jan(5, 0)));
    let state = AppState::new(Abacus::open(sample_config(dir.path())).unwrap(), clock.clone());
    let app = router(state.clone());
    let scenario = sample_scenario();
    let budget = &scenario.budgets[0];
    let (status, _) = call(
        &app,
        "PUT",
        &format!("/budgets/{}", budget.budget_id),
        serde_json::to_value(&budget.spec).unwrap(),
    )
    .await;
    ensure!(status == StatusCode::CREATED, "PUT budget: {status}");

    let feed: Vec<BillingRecord> = generate_feed(scenario.feed.clone()).collect();
    let monitor = Monitor {
        tick: Duration::from_millis(1),
        sim: Some((clock.clone(), chrono::Duration::minutes(30))),
    };
    let plan = json!({"plan_id": "p-1", "account_id": "acct-etl", "resources": [
        {"address": "vm.a", "service_name": "compute", "resource_type": "vm.small", "quantity": "2"}
    ]});

    let mut sent = 0;
    let advance_to = |until: DateTime<Utc>, sent: &mut usize| {
        let batch: Vec<&BillingRecord> = feed[*sent..].iter().take_while(|r| r.usage_end <= until).collect();
        *sent += batch.len();
        serde_json::to_value(batch).unwrap()
    };
    let batch = advance_to(jan(5, 0), &mut sent);
    let (status, _) = call(&app, "POST", "/spend/ingest", batch).await;
    ensure!(status == StatusCode::OK, "ingest: {status}");
    tick_once(&state, &monitor);
    let (status, before) = call(&app, "POST", "/plans/check", plan.clone()).await;
    ensure!(
        status == StatusCode::OK && before["verdict"] == "Allow",
        "before breach: {status} {before}"
    );

    // Feed the rest of the month in daily batches with a monitor pass
    // after each, until enforcement goes past a warning.
    let mut day = 5;
    let mut account = Value::Null;
    while day < 31 {
        day += 1;
        clock.set(jan(day, 0));
        let batch = advance_to(jan(day, 0), &mut sent);
        call(&app, "POST", "/spend/ingest", batch).await;
        tick_once(&state, &monitor);
        account = call(&app, "GET", "/accounts/acct-etl", Value::Null).await.1;
        let state = &account["account"]["state"]["value"];
        if state != "Active" && state != "Warned" {
            break;
        }
    }
    let status_now = account["account"]["state"]["value"].clone();
    ensure!(
        status_now != "Active" && status_now != "Warned",
        "account not restricted: {account}"
    );
    ensure!(
        account["utilization"].as_str().and_then(|u| u.parse::<f64>().ok()) >= Some(1.0),
        "spend below budget: {account}"
    );
    let (status, after) = call(&app, "POST", "/plans/check", plan).await;
    ensure!(
        status == StatusCode::OK && after["verdict"] == "Deny",
        "after breach: {status} {after}"
    );
    Ok(format!(
        "Allow on Jan 5; account {status_now} by Jan {day}; same plan then Deny ({})",
        after["reason"].as_str().unwrap_or("")
    ))
}

fn gate_boundary() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Config::new(dir.path());
    c.durability = Durability::Flush;
    c.accounts.push(AccountConfig {
        account_id: "acct-etl".into(),
        display_name: String::new(),
        cost_center_id: "cc".into(),
        provider: Provider::Simulated,
    });
    let mut e = Abacus::open(c).unwrap();
    // CRB 100,000 with 90,000 spent leaves exactly 10,000.
    let s = spec(
        &[dollars(100_000)],
        Decimal::ZERO,
        Decimal::ZERO,
        Decimal::ZERO,
        dollars(120_000),
    );
    e.put_budget("b", s, None, jan(1, 0)).map_err(|e| e.to_string())?;
    let record = BillingRecord {
        record_id: "r1".into(),
        account_id: "acct-etl".into(),
        service_name: "compute".into(),
        resource_id: "vm/1".into(),
        labels: abacus_core::model::LabelSet::new()
            .with("purpose", "etl")
            .with("owner", "data")
            .with("environment", "prod"),
        usage_start: jan(2, 0),
        usage_end: jan(2, 1),
        cost: dollars(90_000),
    };
    e.ingest(vec![Ok(record)]).map_err(|e| e.to_string())?;
    let check = |e: &mut Abacus, cost: &str| {
        let plan = DeploymentPlan {
            plan_id: format!("p-{cost}"),
            account_id: "acct-etl".into(),
            resources: vec![PlanResource {
                address: "a".into(),
                service_name: "compute".into(),
                monthly_cost: Some(cost.parse().unwrap()),
                resource_type: None,
                quantity: None,
            }],
            submitted_at: None,
        };
        e.check_plan(&plan, jan(3, 0)).unwrap()
    };
    let at = check(&mut e, "10000.00");
    ensure!(
        at.remaining_budget == dollars(10_000),
        "remaining {}",
        at.remaining_budget
    );
    ensure!(
        at.verdict == Verdict::Allow,
        "$10,000.00: {:?} {}",
        at.verdict,
        at.reason
    );
    let over = check(&mut e, "10000.01");
    ensure!(over.verdict == Verdict::Deny, "$10,000.01: {:?}", over.verdict);
    Ok("remaining $10,000.00: $10,000.00 Allow, $10,000.01 Deny".into())
}

#[derive(Clone, Copy, PartialEq)]
enum Mutation {
    None,
    /// Breaks label validation.
    Invalid,
    /// Valid, but matches the label override.
    Dev,
}

fn chargeback() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Config::new(dir.path());
    c.durability = Durability::Flush;
    for (id, cc) in [("acct-a", "cc-1"), ("acct-b", "cc-1"), ("acct-c", "cc-2")] {
        c.accounts.push(AccountConfig {
            account_id: id.into(),
            display_name: String::new(),
            cost_center_id: cc.into(),
            provider: Provider::Simulated,
        });
    }
    c.overrides.push(LabelOverride {
        key: "environment".into(),
        value: "dev".into(),
        cost_center_id: "cc-rnd".into(),
    });
    let mapping: HashMap<&str, &str> = [("acct-a", "cc-1"), ("acct-b", "cc-1"), ("acct-c", "cc-2")].into();

    let feed = FeedConfig {
        seed: 11,
        start: jan(1, 0),
        days: 31,
        records_per_day: 81,
        accounts: ["acct-a", "acct-b", "acct-c", "acct-x"]
            .iter()
            .map(|id| FeedAccount {
                account_id: id.to_string(),
                daily_mean: dollars(900),
                daily_spread: dollars(300),
                services: vec!["compute".into(), "storage".into()],
            })
            .collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut records = Vec::with_capacity(10_000);
    let mut mutations = Vec::with_capacity(10_000);
    for mut r in generate_feed(feed).take(10_000) {
        let m = match rng.random_range(0..10) {
            0 => {
                match rng.random_range(0..3) {
                    0 => r.labels = abacus_core::model::LabelSet::parse_pairs("purpose=x,environment=prod").unwrap(),
                    1 => r.labels.insert("owner", "Data Team"),
                    _ => r.labels.insert("cost center", "cc-1"),
                }
                Mutation::Invalid
            }
            1 => {
                r.labels.insert("environment", "dev");
                Mutation::Dev
            }
            _ => Mutation::None,
        };
        if rng.random_range(0..50) == 0 {
            r.cost = Money::from_cents(-r.cost.cents());
        }
        records.push(r);
        mutations.push(m);
    }

    let start = Instant::now();
    let mut e = Abacus::open(c).unwrap();
    let report = e.ingest(records.iter().cloned().map(Ok)).map_err(|e| e.to_string())?;
    ensure!(report.accepted == 10_000, "accepted {}", report.accepted);
    let rows = e
        .chargeback(&BudgetPeriod::monthly(2024, 1).unwrap())
        .map_err(|e| e.to_string())?;
    let took = start.elapsed();

    let mut oracle: BTreeMap<String, BTreeMap<String, i128>> = BTreeMap::new();
    let mut grand: i128 = 0;
    for (r, m) in records.iter().zip(&mutations) {
        let bucket = match (m, mapping.get(r.account_id.as_str())) {
            (Mutation::Invalid, _) => "unattributed",
            (Mutation::Dev, _) => "cc-rnd",
            (Mutation::None, Some(cc)) => cc,
            (Mutation::None, None) => "unattributed",
        };
        *oracle
            .entry(bucket.into())
            .or_default()
            .entry(r.account_id.clone())
            .or_default() += i128::from(r.cost.cents());
        grand += i128::from(r.cost.cents());
    }
    let got: BTreeMap<String, BTreeMap<String, i128>> = rows
        .iter()
        .map(|row| {
            let by: BTreeMap<String, i128> = row
                .by_account
                .iter()
                .map(|(a, m)| (a.clone(), i128::from(m.cents())))
                .collect();
            (row.cost_center_id.clone(), by)
        })
        .collect();
    ensure!(got == oracle, "grouping differs from oracle");
    let row_sum: i128 = rows.iter().map(|r| i128::from(r.total.cents())).sum();
    ensure!(row_sum == grand, "rows sum {row_sum} vs records {grand}");
    ensure!(
        rows.last().map(|r| r.cost_center_id.as_str()) == Some("unattributed"),
        "unattributed row not last"
    );
    ensure!(took < Duration::from_secs(5), "took {took:?}");
    Ok(format!(
        "10000 records, {} rows match oracle, total {} conserved, {took:?}",
        rows.len(),
        Money::from_cents(grand as i64)
    ))
}

fn monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let factor = |rng: &mut ChaCha8Rng, hi: i64| Decimal::new(rng.random_range(0..hi), 4);
    for i in 0..1_000 {
        let n = rng.random_range(1..=12);
        let hc: Vec<Money> = (0..n)
            .map(|_| Money::from_cents(rng.random_range(1..=10_000_000_000)))
            .collect();
        let (g, c, v) = (
            factor(&mut rng, 20_000),
            factor(&mut rng, 9_000),
            factor(&mut rng, 10_000),
        );
        let ab = Money::from_cents(rng.random_range(0..=100_000_000_000));
        let step = Decimal::new(rng.random_range(1..=999), 4);
        let base = crb(&spec(&hc, g, c, v, ab));
        ensure!(base <= ab, "spec {i}: CRB {base} above AB {ab}");
        ensure!(crb(&spec(&hc, g, c + step, v, ab)) <= base, "spec {i}: CRB rose with C");
        ensure!(crb(&spec(&hc, g + step, c, v, ab)) >= base, "spec {i}: CRB fell with G");
        ensure!(crb(&spec(&hc, g, c, v + step, ab)) >= base, "spec {i}: CRB fell with V");
    }
    Ok("1000 specs: non-increasing in C, non-decreasing in G and V, capped by AB".into())
}

fn state(dir: &Path) -> Vec<(String, Vec<u8>)> {
    Abacus::state_files(dir)
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap_or_default(),
            )
        })
        .collect()
}

fn restart_safety() -> Outcome {
    let reference = tempfile::tempdir().unwrap();
    let mut e = Abacus::open(sample_config(reference.path())).unwrap();
    e.simulate(&sample_scenario()).map_err(|e| e.to_string())?;
    let total = e.fail_point().writes();
    drop(e);
    let expected = state(reference.path());

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let points: Vec<u64> = (0..5).map(|_| rng.random_range(0..total)).collect();
    for at in &points {
        let dir = tempfile::tempdir().unwrap();
        let crashed = Abacus::open_with(sample_config(dir.path()), Arc::new(FailPoint::after(*at)))
            .map_err(|_| ())
            .and_then(|mut e| e.simulate(&sample_scenario()).map_err(|_| ()));
        ensure!(crashed.is_err(), "no crash at write {at}");
        let mut e = Abacus::open(sample_config(dir.path())).map_err(|e| format!("reopen after write {at}: {e}"))?;
        e.simulate(&sample_scenario())
            .map_err(|e| format!("resume after write {at}: {e}"))?;
        drop(e);
        let got = state(dir.path());
        for ((name, want), (_, have)) in expected.iter().zip(&got) {
            ensure!(want == have, "crash at write {at}: {name} differs");
        }
    }
    Ok(format!(
        "crash at writes {points:?} of {total}, resumed stores identical"
    ))
}

fn run(results: &mut Vec<bool>, n: usize, name: &str, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let ms = start.elapsed().as_millis();
    match &outcome {
        Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{ms} ms]"),
        Err(why) => println!("criterion {n:>2} FAIL  {name}: {why} [{ms} ms]"),
    }
    results.push(outcome.is_ok());
}

fn main() {
    let start = Instant::now();
    let runtime = tokio::runtime::Runtime::new().unwrap();
    let mut results = Vec::new();
    run(&mut results, 1, "worked example", worked_example);
    run(&mut results, 2, "budget table", table);
    run(&mut results, 3, "coefficient of variation", cov);
    run(&mut results, 4, "threshold semantics", thresholds);
    run(&mut results, 5, "sequential enforcement", sequential_enforcement);
    run(&mut results, 6, "end-to-end blocking", || {
        runtime.block_on(blocking_flow())
    });
    run(&mut results, 7, "gate boundary", gate_boundary);
    run(&mut results, 8, "chargeback conservation", chargeback);
    run(&mut results, 9, "monotonicity", monotonicity);
    run(&mut results, 10, "restart safety", restart_safety);
    let took = start.elapsed();
    let passed = results.iter().filter(|ok| **ok).count();
    let in_time = took < Duration::from_secs(60);
    println!(
        "acceptance: {passed}/{} passed, suite {:.1} s ({})",
        results.len(),
        took.as_secs_f64(),
        if in_time { "under 60 s" } else { "over 60 s" }
    );
    if passed != results.len() || !in_time {
        std::process::exit(1);
    }
}
