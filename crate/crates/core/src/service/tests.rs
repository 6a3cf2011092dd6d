use super::*;
use crate::enforcement::EnforcementAction;
use crate::gate::{PlanResource, Verdict};
use crate::ingest::{FeedAccount, FeedConfig};
use crate::model::{AccountStatus, Granularity, LabelSet};
use crate::storage::Durability;
use chrono::TimeZone;
use rust_decimal_macros::dec;

fn jan() -> BudgetPeriod {
    BudgetPeriod::monthly(2024, 1).unwrap()
}

fn t(day: u32, hour: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, day, hour, 0, 0).unwrap()
}

fn config(dir: &Path) -> Config {
    let mut c = Config::new(dir);
    c.durability = Durability::Flush;
    c.cost_centers = vec![CostCenter {
        cost_center_id: "cc-data".into(),
        display_name: "Data".into(),
    }];
    c.accounts = vec![
        AccountConfig {
            account_id: "acct-a".into(),
            display_name: String::new(),
            cost_center_id: "cc-data".into(),
            provider: crate::model::Provider::Simulated,
        },
        AccountConfig {
            account_id: "acct-b".into(),
            display_name: String::new(),
            cost_center_id: "cc-data".into(),
            provider: crate::model::Provider::Simulated,
        },
    ];
    c
}

fn worked_example(target: &str) -> BudgetSpec {
    BudgetSpec {
        target_id: target.into(),
        period: jan(),
        historical: SpendSeries::new(vec![Money::from_dollars(100_000).unwrap()]).unwrap(),
        growth_factor: dec!(0.20),
        cost_control_factor: dec!(0.10),
        variability: VariabilityMode::Explicit { value: dec!(0.05) },
        available_budget: Money::from_dollars(120_000).unwrap(),
        thresholds: crate::budget::default_thresholds(),
    }
}

fn record(id: &str, account: &str, service: &str, start: DateTime<Utc>, dollars: i64) -> BillingRecord {
    BillingRecord {
        record_id: id.into(),
        account_id: account.into(),
        service_name: service.into(),
        resource_id: format!("{account}/{service}"),
        labels: LabelSet::new()
            .with("purpose", "etl")
            .with("owner", "data")
            .with("environment", "prod"),
        usage_start: start,
        usage_end: start + Duration::hours(1),
        cost: Money::from_dollars(dollars).unwrap(),
    }
}

fn scenario() -> ScenarioConfig {
    ScenarioConfig {
        feed: FeedConfig {
            seed: 7,
            start: t(1, 0),
            days: 31,
            records_per_day: 24,
            accounts: vec![FeedAccount {
                account_id: "acct-a".into(),
                daily_mean: Money::from_dollars(5_000).unwrap(),
                daily_spread: Money::from_dollars(500).unwrap(),
                services: vec!["compute".into(), "storage".into(), "bigquery".into()],
            }],
        },
        cost_centers: vec![],
        accounts: vec![],
        budgets: vec![ScenarioBudget {
            budget_id: "b-a".into(),
            spec: worked_example("acct-a"),
        }],
        sweep_interval_minutes: 30,
    }
}

#[test]
fn budget_versions_and_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Abacus::open(config(dir.path())).unwrap();
    let r = e.put_budget("b1", worked_example("acct-a"), None, t(1, 0)).unwrap();
    assert_eq!(r.version, 1);
    assert_eq!(r.budget.crb.to_string(), "113400.00");
    assert!(matches!(
        e.put_budget("b1", worked_example("acct-a"), None, t(1, 0)),
        Err(ServiceError::Conflict { current: Some(1), .. })
    ));
    assert!(matches!(
        e.put_budget("b1", worked_example("acct-a"), Some(7), t(1, 0)),
        Err(ServiceError::Conflict { .. })
    ));
    assert_eq!(
        e.put_budget("b1", worked_example("acct-a"), Some(1), t(1, 0))
            .unwrap()
            .version,
        2
    );
    assert!(matches!(
        e.put_budget("b2", worked_example("nobody"), None, t(1, 0)),
        Err(ServiceError::InvalidInput(_))
    ));
    drop(e);
    let e = Abacus::open(config(dir.path())).unwrap();
    assert_eq!(e.budget("b1").unwrap().version, 2);
}

#[test]
fn whatif_matches_worked_example() {
    let b = whatif(
        vec![Money::from_dollars(100_000).unwrap()],
        dec!(0.2),
        dec!(0.1),
        Some(dec!(0.05)),
        Money::from_dollars(120_000).unwrap(),
        t(1, 0),
    )
    .unwrap();
    assert_eq!(b.crb.to_string(), "113400.00");
}

#[test]
fn sweep_fires_alerts_and_enqueues_at_floor() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Abacus::open(config(dir.path())).unwrap();
    e.put_budget("b1", worked_example("acct-a"), None, t(1, 0)).unwrap();
    e.ingest(vec![Ok(record("r1", "acct-a", "compute", t(2, 0), 60_000))])
        .unwrap();
    let r = e.sweep(t(3, 0)).unwrap();
    assert_eq!(
        r.events.iter().map(|e| e.threshold).collect::<Vec<_>>(),
        vec![dec!(0.5)]
    );
    assert_eq!(r.enqueued, 0);

    e.ingest(vec![Ok(record("r2", "acct-a", "compute", t(3, 0), 60_000))])
        .unwrap();
    let r = e.sweep(t(4, 0)).unwrap();
    assert_eq!(
        r.events.iter().map(|e| e.threshold).collect::<Vec<_>>(),
        vec![dec!(0.75), dec!(0.9), dec!(1)]
    );
    assert_eq!(r.enqueued, 2);
    assert!(e.sweep(t(4, 0)).unwrap().events.is_empty());

    let outcomes = e.drain(t(4, 0)).unwrap();
    assert_eq!(
        outcomes.iter().map(|o| o.action_taken()).collect::<Vec<_>>(),
        vec![EnforcementAction::Warn, EnforcementAction::StopServices]
    );
    assert_eq!(
        e.account("acct-a", t(4, 0)).unwrap().account.state.value,
        AccountStatus::Restricted
    );

    let (alerts, _) = e.poll_alerts(0);
    let severities: Vec<_> = alerts.iter().map(|a| a.severity.as_str()).collect();
    assert_eq!(
        severities,
        ["info", "info", "warning", "critical", "critical", "critical"]
    );
}

#[test]
fn cost_center_budget_is_allocated_by_previous_spend() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Abacus::open(config(dir.path())).unwrap();
    let dec_2023 = Utc.with_ymd_and_hms(2023, 12, 5, 0, 0, 0).unwrap();
    e.ingest(vec![
        Ok(record("h1", "acct-a", "compute", dec_2023, 300)),
        Ok(record("h2", "acct-b", "compute", dec_2023, 100)),
    ])
    .unwrap();
    let mut spec = worked_example("cc-data");
    spec.available_budget = Money::from_dollars(1_000).unwrap();
    e.put_budget("cc", spec, None, t(1, 0)).unwrap();
    let eff = e.effective_budgets(t(2, 0));
    assert_eq!(eff.len(), 2);
    assert_eq!(eff[0].crb.to_string(), "750.00");
    assert_eq!(eff[1].crb.to_string(), "250.00");

    e.put_budget("direct", worked_example("acct-b"), None, t(1, 0)).unwrap();
    assert_eq!(e.effective_budget("acct-b", t(2, 0)).unwrap().budget_id, "direct");
}

#[test]
fn gate_uses_budget_and_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Abacus::open(config(dir.path())).unwrap();
    let plan = DeploymentPlan {
        plan_id: "p".into(),
        account_id: "acct-a".into(),
        resources: vec![PlanResource {
            address: "vm".into(),
            service_name: "compute".into(),
            monthly_cost: Some(Money::from_dollars(10_000).unwrap()),
            resource_type: None,
            quantity: None,
        }],
        submitted_at: None,
    };
    let d = e.check_plan(&plan, t(5, 0)).unwrap();
    assert_eq!((d.verdict, d.reason.as_str()), (Verdict::Deny, "no budget"));

    e.put_budget("b1", worked_example("acct-a"), None, t(1, 0)).unwrap();
    e.ingest(vec![Ok(record("r1", "acct-a", "compute", t(2, 0), 103_400))])
        .unwrap();
    assert_eq!(e.check_plan(&plan, t(5, 0)).unwrap().verdict, Verdict::Allow);
    e.sweep(t(5, 0)).unwrap();
    e.drain(t(5, 0)).unwrap();
    assert_eq!(
        e.account("acct-a", t(5, 0)).unwrap().account.state.value,
        AccountStatus::Warned
    );
    assert_eq!(e.check_plan(&plan, t(5, 0)).unwrap().verdict, Verdict::Allow);

    e.ingest(vec![Ok(record("r2", "acct-a", "compute", t(5, 0), 10_000))])
        .unwrap();
    e.sweep(t(6, 0)).unwrap();
    e.drain(t(6, 0)).unwrap();
    let d = e.check_plan(&plan, t(6, 0)).unwrap();
    assert_eq!((d.verdict, d.reason.as_str()), (Verdict::Deny, "account restricted"));

    let unknown = DeploymentPlan {
        account_id: "ghost".into(),
        ..plan
    };
    assert_eq!(e.check_plan(&unknown, t(6, 0)).unwrap().verdict, Verdict::Deny);
}

#[test]
fn chargeback_has_unattributed_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Abacus::open(config(dir.path())).unwrap();
    assert!(e.chargeback(&jan()).unwrap().is_empty());
    let mut bad = record("r3", "acct-b", "compute", t(2, 0), 7);
    bad.labels = LabelSet::new().with("environment", "dev");
    e.ingest(vec![
        Ok(record("r1", "acct-a", "compute", t(2, 0), 100)),
        Ok(record("r2", "acct-b", "compute", t(2, 0), 200)),
        Ok(bad),
        Ok(record("r4", "stray", "compute", t(2, 0), 5)),
    ])
    .unwrap();
    let rows = e.chargeback(&jan()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].cost_center_id, "cc-data");
    assert_eq!(rows[0].total.to_string(), "300.00");
    assert_eq!(rows[1].cost_center_id, UNATTRIBUTED);
    assert_eq!(rows[1].total.to_string(), "12.00");
}

#[test]
fn reinstate_through_engine() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Abacus::open(config(dir.path())).unwrap();
    e.put_budget("b1", worked_example("acct-a"), None, t(1, 0)).unwrap();
    e.ingest(vec![Ok(record("r1", "acct-a", "compute", t(2, 0), 200_000))])
        .unwrap();
    e.sweep(t(3, 0)).unwrap();
    e.drain(t(3, 0)).unwrap();
    assert_ne!(
        e.account("acct-a", t(3, 0)).unwrap().account.state.value,
        AccountStatus::Active
    );
    e.reinstate("acct-a", "approved overage", t(3, 1)).unwrap();
    assert_eq!(
        e.account("acct-a", t(3, 1)).unwrap().account.state.value,
        AccountStatus::Active
    );
    assert!(matches!(
        e.reinstate("ghost", "", t(3, 1)),
        Err(ServiceError::NotFound(_))
    ));
    drop(e);
    let e = Abacus::open(config(dir.path())).unwrap();
    assert_eq!(
        e.account("acct-a", t(3, 1)).unwrap().account.state.value,
        AccountStatus::Active
    );
}

#[test]
fn ingest_refused_when_queue_full() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    c.queue_capacity = 1;
    let mut e = Abacus::open(c).unwrap();
    e.put_budget("b1", worked_example("acct-a"), None, t(1, 0)).unwrap();
    e.ingest(vec![Ok(record("r1", "acct-a", "compute", t(2, 0), 200_000))])
        .unwrap();
    let r = e.sweep(t(3, 0)).unwrap();
    // Two messages at the floor and above; the second forced an inline drain.
    assert_eq!(r.enqueued, 2);
    assert_eq!(e.queue_len(), 1);
    assert!(matches!(
        e.ingest(vec![Ok(record("r2", "acct-a", "compute", t(2, 0), 1))]),
        Err(ServiceError::Backpressure)
    ));
    e.drain(t(3, 0)).unwrap();
    assert!(e
        .ingest(vec![Ok(record("r2", "acct-a", "compute", t(2, 0), 1))])
        .is_ok());
}

#[test]
fn simulate_crosses_every_threshold_once() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Abacus::open(config(dir.path())).unwrap();
    let s = e.simulate(&scenario()).unwrap();
    assert_eq!(s.events, 4);
    let thresholds: Vec<Decimal> = e.fired_events().iter().map(|e| e.threshold).collect();
    assert_eq!(thresholds, vec![dec!(0.5), dec!(0.75), dec!(0.9), dec!(1)]);
    assert_eq!(s.final_states["acct-a"], AccountStatus::Restricted);
    assert!(s.skipped_stopped > 0);
    assert!(e.sweep(t(31, 23)).unwrap().events.is_empty());
    // Resuming a finished scenario does nothing.
    let again = e.simulate(&scenario()).unwrap();
    assert_eq!((again.sweeps, again.events), (0, 0));
}

fn read_state(dir: &Path) -> Vec<(String, Vec<u8>)> {
    Abacus::state_files(dir)
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read(&p).unwrap_or_default())
        })
        .collect()
}

#[test]
fn interrupted_simulation_matches_uninterrupted() {
    let reference = tempfile::tempdir().unwrap();
    let mut e = Abacus::open(config(reference.path())).unwrap();
    e.simulate(&scenario()).unwrap();
    let total_writes = e.fail_point().writes();
    drop(e);
    let expected = read_state(reference.path());

    // Find the write that records the first enforceable event, then crash at
    // every write around it, plus a few spread over the run.
    let events_after = |n: u64| {
        let dir = tempfile::tempdir().unwrap();
        if let Ok(mut e) = Abacus::open_with(config(dir.path()), Arc::new(FailPoint::after(n))) {
            let _ = e.simulate(&scenario());
        }
        std::fs::read_to_string(dir.path().join("events.jsonl")).map_or(0, |s| s.lines().count())
    };
    let (mut lo, mut hi) = (0, total_writes);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if events_after(mid) >= 3 {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut points: Vec<u64> = (lo.saturating_sub(4)..lo + 16).collect();
    points.extend([0, 1, 2, total_writes / 3, total_writes - 2, total_writes - 1]);
    for crash_at in points {
        let dir = tempfile::tempdir().unwrap();
        // The crash may land while opening, which writes the account book.
        let crashed = Abacus::open_with(config(dir.path()), Arc::new(FailPoint::after(crash_at)))
            .map_err(|_| ())
            .and_then(|mut e| e.simulate(&scenario()).map_err(|_| ()));
        assert!(crashed.is_err(), "run with crash at write {crash_at} should stop");
        let mut e = Abacus::open(config(dir.path())).unwrap();
        e.simulate(&scenario()).unwrap();
        drop(e);
        assert_eq!(read_state(dir.path()), expected, "crash at write {crash_at}");
    }
}

#[test]
fn scenario_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Abacus::open(config(dir.path())).unwrap();
    let mut s = scenario();
    s.feed.days = 2;
    e.simulate(&s).unwrap();
    assert!(matches!(e.simulate(&scenario()), Err(ServiceError::InvalidInput(_))));
}

#[test]
fn rollover_at_next_period() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    c.granularity = Granularity::Monthly;
    let mut e = Abacus::open(c).unwrap();
    e.put_budget("b1", worked_example("acct-a"), None, t(1, 0)).unwrap();
    e.ingest(vec![Ok(record("r1", "acct-a", "compute", t(2, 0), 114_000))])
        .unwrap();
    e.sweep(t(3, 0)).unwrap();
    e.drain(t(3, 0)).unwrap();
    assert_eq!(
        e.account_book().get("acct-a").unwrap().status(),
        AccountStatus::Restricted
    );
    let feb = Utc.with_ymd_and_hms(2024, 2, 1, 0, 0, 0).unwrap();
    assert!(e.sweep(feb).unwrap().rolled_over.is_empty());
    let r = e.sweep(feb + Duration::minutes(30)).unwrap();
    assert_eq!(r.rolled_over, vec!["acct-a".to_string()]);
    assert_eq!(e.account_book().get("acct-a").unwrap().status(), AccountStatus::Active);
}
