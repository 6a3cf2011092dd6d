//! Spend monitoring: threshold crossings of cumulative period spend and the
//! cost evaluation attached to enforcement messages.

use std::collections::BTreeSet;

use chrono::{DateTime, Duration, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::enforcement::EnforcementAction;
use crate::ingest::{IngestError, Ledger};
use crate::model::BudgetPeriod;
use crate::money::Money;

/// Service type used when a message concerns the whole account.
pub const ALL_SERVICES: &str = "ALL";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdEvent {
    pub budget_id: String,
    pub account_id: String,
    pub period: BudgetPeriod,
    pub threshold: Decimal,
    pub spend_at_crossing: Money,
    pub crb: Money,
    pub occurred_at: DateTime<Utc>,
}

impl ThresholdEvent {
    /// Identity of the crossing; at most one event exists per key.
    pub fn key(&self) -> String {
        event_key(&self.budget_id, &self.account_id, &self.period, self.threshold)
    }
}

pub fn event_key(budget_id: &str, account_id: &str, period: &BudgetPeriod, threshold: Decimal) -> String {
    format!("{budget_id}|{account_id}|{}|{}", period.label(), threshold.normalize())
}

/// The slice of a budget the monitor evaluates for one account.
#[derive(Debug, Clone, Copy)]
pub struct BudgetView<'a> {
    pub budget_id: &'a str,
    pub account_id: &'a str,
    pub period: BudgetPeriod,
    pub crb: Money,
    pub thresholds: &'a [Decimal],
}

/// `spend >= threshold * crb`, compared exactly.
pub fn reaches(spend: Money, threshold: Decimal, crb: Money) -> bool {
    let t = threshold.normalize();
    let lhs = i128::from(spend.cents()) * 10i128.pow(t.scale());
    let rhs = t.mantissa() * i128::from(crb.cents());
    lhs >= rhs
}

/// Every configured threshold reached by `spend` and not yet fired, in
/// ascending order. Negative spend (net credits) counts as zero; a zero
/// budget therefore fires every threshold.
pub fn check_thresholds(
    budget: &BudgetView<'_>,
    spend: Money,
    already_fired: &BTreeSet<Decimal>,
    occurred_at: DateTime<Utc>,
) -> Vec<ThresholdEvent> {
    let spend = spend.clamp_non_negative();
    let mut thresholds: Vec<Decimal> = budget.thresholds.iter().map(|t| t.normalize()).collect();
    thresholds.sort();
    thresholds.dedup();
    thresholds
        .into_iter()
        .filter(|t| !already_fired.contains(t) && reaches(spend, *t, budget.crb))
        .map(|threshold| ThresholdEvent {
            budget_id: budget.budget_id.to_string(),
            account_id: budget.account_id.to_string(),
            period: budget.period,
            threshold,
            spend_at_crossing: spend,
            crb: budget.crb,
            occurred_at,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceShare {
    pub service_name: String,
    pub spend: Money,
    pub share: Decimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub service_name: String,
    pub z_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEvaluationReport {
    pub account_id: String,
    pub period: BudgetPeriod,
    pub top_services: Vec<ServiceShare>,
    /// Spend per elapsed day over budget per period day; `None` when no time
    /// has elapsed or the budget is zero.
    pub burn_rate: Option<Decimal>,
    pub anomalies: Vec<Anomaly>,
}

pub trait AnomalyDetector: Send + Sync {
    /// Returns a score when `observation` is anomalous against `history`.
    fn detect(&self, history: &[Money], observation: Money) -> Option<f64>;
}

/// Flags an observation more than `k` standard deviations above the mean
/// of its trailing history.
///
/// The deviation is floored at 1% of the mean (and at one cent) so that a
/// perfectly flat history still yields a finite score.
#[derive(Debug, Clone, Copy)]
pub struct ZScoreDetector {
    pub k: f64,
}

impl Default for ZScoreDetector {
    fn default() -> Self {
        ZScoreDetector { k: 3.0 }
    }
}

impl ZScoreDetector {
    pub fn z_score(history: &[Money], observation: Money) -> Option<f64> {
        if history.len() < 2 {
            return None;
        }
        let xs: Vec<f64> = history.iter().map(|m| m.cents() as f64 / 100.0).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sigma = var.sqrt().max(mean.abs() * 0.01).max(0.01);
        Some((observation.cents() as f64 / 100.0 - mean) / sigma)
    }
}

impl AnomalyDetector for ZScoreDetector {
    fn detect(&self, history: &[Money], observation: Money) -> Option<f64> {
        Self::z_score(history, observation).filter(|z| *z > self.k)
    }
}

pub const TOP_SERVICES: usize = 5;
/// Days of per-day history a service is compared against.
pub const ANOMALY_WINDOW_DAYS: i64 = 14;

fn round6(d: Decimal) -> Decimal {
    d.round_dp_with_strategy(6, rust_decimal::RoundingStrategy::ToZero)
}

/// Breach context for one account and period, evaluated at `now`.
pub fn evaluate(
    ledger: &Ledger,
    account_id: &str,
    period: &BudgetPeriod,
    crb: Money,
    now: DateTime<Utc>,
    detector: &dyn AnomalyDetector,
) -> Result<CostEvaluationReport, IngestError> {
    let agg = ledger.aggregate(account_id, period)?;

    let mut ranked: Vec<(&String, Money)> = agg
        .by_service
        .iter()
        .map(|(s, m)| (s, *m))
        .filter(|(_, m)| !m.is_negative() && !m.is_zero())
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let positive_sum: i64 = ranked.iter().map(|(_, m)| m.cents()).sum();
    let denom = agg.total.cents().max(positive_sum);
    let top_services = ranked
        .into_iter()
        .take(TOP_SERVICES)
        .map(|(s, m)| ServiceShare {
            service_name: s.clone(),
            spend: m,
            share: if denom > 0 {
                round6(Decimal::from(m.cents()) / Decimal::from(denom))
            } else {
                Decimal::ZERO
            },
        })
        .collect();

    let as_of = now.clamp(period.start, period.end);
    let elapsed = (as_of - period.start).num_seconds();
    let period_secs = (period.end - period.start).num_seconds();
    let burn_rate = if elapsed > 0 && crb.cents() > 0 {
        let spend = Decimal::from(agg.total.clamp_non_negative().cents());
        let numer = spend * Decimal::from(period_secs);
        let denom = Decimal::from(elapsed) * Decimal::from(crb.cents());
        numer.checked_div(denom).map(round6)
    } else {
        None
    };

    let obs_day = (as_of - Duration::seconds(1)).max(period.start).date_naive();
    let mut anomalies = Vec::new();
    for service in agg.by_service.keys() {
        let Some(first) = ledger.first_service_day(account_id, service) else {
            continue;
        };
        let window_start = (obs_day - Duration::days(ANOMALY_WINDOW_DAYS)).max(first);
        let Some(history_end) = obs_day.pred_opt() else {
            continue;
        };
        if window_start > history_end {
            continue;
        }
        let daily = ledger.daily_service_spend(account_id, service, window_start, obs_day);
        let (history, observation) = daily.split_at(daily.len() - 1);
        let history: Vec<Money> = history.iter().map(|(_, m)| *m).collect();
        if let Some(z) = detector.detect(&history, observation[0].1) {
            anomalies.push(Anomaly {
                service_name: service.clone(),
                z_score: z,
            });
        }
    }

    Ok(CostEvaluationReport {
        account_id: account_id.to_string(),
        period: *period,
        top_services,
        burn_rate,
        anomalies,
    })
}

/// Queue payload for the budget enforcer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnforcementMessage {
    pub budget_id: String,
    pub account_id: String,
    pub period: BudgetPeriod,
    pub service_type: String,
    pub budget: Money,
    pub spend: Money,
    pub threshold: Decimal,
    pub action_class: EnforcementAction,
    pub report: CostEvaluationReport,
}

impl EnforcementMessage {
    /// Redelivery of the same breach maps to the same key.
    pub fn dedup_key(&self) -> String {
        format!(
            "{}|{}|{}",
            self.account_id,
            self.period.label(),
            self.threshold.normalize()
        )
    }
}

/// Thresholds at or above the floor are sent to the enforcer; every
/// threshold is alerted.
pub fn enqueues(threshold: Decimal, enforcement_floor: Decimal) -> bool {
    threshold >= enforcement_floor
}
