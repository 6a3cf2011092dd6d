//! Deterministic end-to-end scenario: a generated feed is ingested in
//! sweep-interval slices, each followed by a monitor sweep and a full
//! drain of the enforcement queue, all in simulated time.
//!
//! Progress is checkpointed in `sim_cursor.json` after each slice is
//! ingested and after each sweep, so an interrupted run resumes at the
//! step where it stopped and ends with the same stores.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Abacus, AccountConfig, ServiceError};
use crate::budget::BudgetSpec;
use crate::ingest::{generate_feed, CostCenter, FeedConfig, IngestReport};
use crate::model::{AccountStatus, BillingRecord};
use crate::storage::{read_json, write_json};

fn default_interval() -> u32 {
    30
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioBudget {
    pub budget_id: String,
    pub spec: BudgetSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub feed: FeedConfig,
    #[serde(default)]
    pub cost_centers: Vec<CostCenter>,
    /// Accounts to register. Feed accounts not listed here are registered
    /// as their own cost center.
    #[serde(default)]
    pub accounts: Vec<AccountConfig>,
    #[serde(default)]
    pub budgets: Vec<ScenarioBudget>,
    #[serde(default = "default_interval")]
    pub sweep_interval_minutes: u32,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::InvalidInput(e.to_string()))
    }

    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn all_accounts(&self) -> Vec<AccountConfig> {
        let mut out = self.accounts.clone();
        for fa in &self.feed.accounts {
            if !out.iter().any(|a| a.account_id == fa.account_id) {
                out.push(AccountConfig {
                    account_id: fa.account_id.clone(),
                    display_name: String::new(),
                    cost_center_id: fa.account_id.clone(),
                    provider: crate::model::Provider::Simulated,
                });
            }
        }
        out
    }

    fn end(&self) -> DateTime<Utc> {
        self.feed.start + Duration::days(i64::from(self.feed.days))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimCursor {
    pub scenario: String,
    pub ingested_through: DateTime<Utc>,
    pub swept_through: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimSummary {
    pub sweeps: u64,
    pub ingest: IngestReport,
    /// Records not ingested because their service was stopped.
    pub skipped_stopped: u64,
    pub events: u64,
    pub enforced: u64,
    pub final_states: BTreeMap<String, AccountStatus>,
}

impl Abacus {
    fn save_cursor(&self, cursor: &SimCursor) -> Result<(), ServiceError> {
        self.fail.hit()?;
        write_json(&self.layout.sim_cursor(), cursor, self.config.durability)?;
        Ok(())
    }

    fn service_running(&self, record: &BillingRecord) -> bool {
        self.book
            .get(&record.account_id)
            .is_none_or(|e| e.is_service_running(&record.service_name))
    }

    /// Runs (or resumes) the scenario to completion. Work done by an
    /// earlier interrupted run is not repeated; counts in the summary cover
    /// this call only.
    pub fn simulate(&mut self, scenario: &ScenarioConfig) -> Result<SimSummary, ServiceError> {
        if scenario.sweep_interval_minutes == 0 {
            return Err(ServiceError::InvalidInput(
                "sweep_interval_minutes must be positive".into(),
            ));
        }
        let fingerprint = scenario.fingerprint();
        let start = scenario.feed.start;
        let cursor = match read_json::<SimCursor>(&self.layout.sim_cursor())? {
            Some(c) if c.scenario != fingerprint => {
                return Err(ServiceError::InvalidInput(
                    "data directory holds a different scenario; use a fresh data_dir".into(),
                ))
            }
            Some(c) => c,
            None => {
                self.guarded(|e| e.setup_scenario(scenario, start))?;
                let c = SimCursor {
                    scenario: fingerprint,
                    ingested_through: start,
                    swept_through: start,
                };
                self.guarded(|e| e.save_cursor(&c))?;
                c
            }
        };
        self.guarded(|e| e.run_scenario(scenario, cursor))
    }

    fn setup_scenario(&mut self, scenario: &ScenarioConfig, now: DateTime<Utc>) -> Result<(), ServiceError> {
        self.register_cost_centers(&scenario.cost_centers);
        self.register_accounts(&scenario.all_accounts())?;
        for b in &scenario.budgets {
            let current = self.budget(&b.budget_id).map(|r| (r.version, r.budget.spec == b.spec));
            match current {
                Some((_, true)) => {}
                Some((v, false)) => {
                    self.put_budget(&b.budget_id, b.spec.clone(), Some(v), now)?;
                }
                None => {
                    self.put_budget(&b.budget_id, b.spec.clone(), None, now)?;
                }
            }
        }
        Ok(())
    }

    fn run_scenario(&mut self, scenario: &ScenarioConfig, mut cursor: SimCursor) -> Result<SimSummary, ServiceError> {
        self.register_cost_centers(&scenario.cost_centers);
        let interval = Duration::minutes(i64::from(scenario.sweep_interval_minutes));
        let end = scenario.end();
        let mut feed = generate_feed(scenario.feed.clone()).peekable();
        let mut summary = SimSummary::default();
        let mut boundary = scenario.feed.start;
        while boundary < end {
            boundary = (boundary + interval).min(end);
            let slice: Vec<BillingRecord> = std::iter::from_fn(|| feed.next_if(|r| r.usage_end <= boundary)).collect();
            if boundary > cursor.ingested_through {
                let (running, stopped): (Vec<_>, Vec<_>) = slice.into_iter().partition(|r| self.service_running(r));
                summary.skipped_stopped += stopped.len() as u64;
                summary
                    .ingest
                    .merge(self.ingest_unchecked(running.into_iter().map(Ok))?);
                cursor.ingested_through = boundary;
                self.save_cursor(&cursor)?;
            }
            if boundary > cursor.swept_through {
                let report = self.sweep_inner(boundary)?;
                summary.events += report.events.len() as u64;
                while self.drain_one_inner(boundary)?.is_some() {
                    summary.enforced += 1;
                }
                summary.sweeps += 1;
                cursor.swept_through = boundary;
                self.save_cursor(&cursor)?;
            }
        }
        summary.final_states = self
            .book
            .entries()
            .map(|e| (e.account.account_id.clone(), e.status()))
            .collect();
        Ok(summary)
    }
}
