//! Account state machine and the budget enforcer.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::breach::{BreachRecord, BreachStore};
use super::policy::{EnforcementAction, EnforcementPolicy};
use crate::model::{Account, AccountState, AccountStatus, BudgetPeriod};
use crate::money::Money;
use crate::monitor::{EnforcementMessage, ALL_SERVICES};
use crate::storage::{read_json, write_json, Durability, FailPoint, StoreError};

#[derive(Debug, Error)]
pub enum EnforceError {
    #[error("unknown account {0}")]
    UnknownAccount(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountEntry {
    pub account: Account,
    pub stopped_services: BTreeSet<String>,
    /// Period in which a Warned or Restricted state was entered.
    pub state_period: Option<BudgetPeriod>,
}

impl AccountEntry {
    pub fn status(&self) -> AccountStatus {
        self.account.state.value
    }

    pub fn is_service_running(&self, service: &str) -> bool {
        self.status() != AccountStatus::Suspended && !self.stopped_services.contains(service)
    }

    /// Warned and Restricted lapse back to Active when a new period starts.
    /// Suspension needs an operator.
    fn roll_over(&mut self, period: &BudgetPeriod, at: DateTime<Utc>) -> bool {
        let lapsed = matches!(self.status(), AccountStatus::Warned | AccountStatus::Restricted)
            && self.state_period.is_some_and(|p| p.start < period.start);
        if lapsed {
            self.account.state = AccountState {
                value: AccountStatus::Active,
                changed_at: at.max(period.start),
            };
            self.stopped_services.clear();
            self.state_period = None;
        }
        lapsed
    }
}

/// Current state of every account plus the last breach record folded in.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountBook {
    entries: BTreeMap<String, AccountEntry>,
    applied_breach_seq: u64,
}

impl AccountBook {
    pub fn new(accounts: impl IntoIterator<Item = Account>) -> Self {
        let entries = accounts
            .into_iter()
            .map(|account| {
                (
                    account.account_id.clone(),
                    AccountEntry {
                        account,
                        stopped_services: BTreeSet::new(),
                        state_period: None,
                    },
                )
            })
            .collect();
        AccountBook {
            entries,
            applied_breach_seq: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Option<Self>, StoreError> {
        read_json(path)
    }

    pub fn save(&self, path: &Path, durability: Durability, fail: &FailPoint) -> Result<(), StoreError> {
        fail.hit()?;
        write_json(path, self, durability)
    }

    /// Adds accounts not already present; existing state is kept.
    pub fn register(&mut self, account: Account) {
        self.entries
            .entry(account.account_id.clone())
            .or_insert_with(|| AccountEntry {
                account,
                stopped_services: BTreeSet::new(),
                state_period: None,
            });
    }

    pub fn get(&self, account_id: &str) -> Option<&AccountEntry> {
        self.entries.get(account_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &AccountEntry> {
        self.entries.values()
    }

    pub fn applied_breach_seq(&self) -> u64 {
        self.applied_breach_seq
    }

    pub fn is_service_running(&self, account_id: &str, service: &str) -> bool {
        self.entries
            .get(account_id)
            .is_some_and(|e| e.is_service_running(service))
    }

    /// Applies period rollover for one account; returns whether it changed.
    pub fn roll_over(&mut self, account_id: &str, period: &BudgetPeriod, at: DateTime<Utc>) -> bool {
        self.entries
            .get_mut(account_id)
            .is_some_and(|e| e.roll_over(period, at))
    }

    /// Folds a durable breach record into account state. Records already
    /// applied are ignored, so replay after a crash is safe.
    pub fn apply(&mut self, record: &BreachRecord) {
        if record.seq <= self.applied_breach_seq {
            return;
        }
        self.applied_breach_seq = record.seq;
        let (Some(state), Some(entry)) = (record.resulting_state, self.entries.get_mut(&record.account_id)) else {
            return;
        };
        if let Some(period) = record.period {
            entry.roll_over(&period, record.recorded_at);
        }
        match record.action_taken {
            EnforcementAction::None if state.value == AccountStatus::Active => {
                entry.stopped_services.clear();
                entry.state_period = None;
            }
            EnforcementAction::None => return,
            _ => {
                entry.stopped_services.extend(record.stopped_services.iter().cloned());
                entry.state_period = record.period;
            }
        }
        entry.account.state = state;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnforcementOutcome {
    pub record: BreachRecord,
    /// The message had already been enforced; `record` is the original.
    pub duplicate: bool,
}

impl EnforcementOutcome {
    pub fn action_taken(&self) -> EnforcementAction {
        self.record.action_taken
    }

    pub fn resulting_state(&self) -> Option<AccountState> {
        self.record.resulting_state
    }

    pub fn breach_id(&self) -> &str {
        &self.record.breach_id
    }
}

/// Applies the policy to one dequeued message at a time.
#[derive(Debug, Clone, Default)]
pub struct Enforcer {
    pub policy: EnforcementPolicy,
}

impl Enforcer {
    pub fn new(policy: EnforcementPolicy) -> Self {
        Enforcer { policy }
    }

    /// Records the outcome durably, then updates `book`. A message whose
    /// dedup key is already in the store is not enforced again.
    ///
    /// `services` lists the account's known services, used to decide what
    /// StopServices halts.
    pub fn enforce(
        &self,
        msg: &EnforcementMessage,
        book: &mut AccountBook,
        store: &mut BreachStore,
        services: &BTreeSet<String>,
        now: DateTime<Utc>,
    ) -> Result<EnforcementOutcome, StoreError> {
        let key = msg.dedup_key();
        if let Some(existing) = store.find_by_dedup(&key) {
            return Ok(EnforcementOutcome {
                record: existing.clone(),
                duplicate: true,
            });
        }
        let mut record = BreachRecord {
            seq: 0,
            breach_id: String::new(),
            account_id: msg.account_id.clone(),
            service_type: msg.service_type.clone(),
            budget_id: Some(msg.budget_id.clone()),
            budget: msg.budget,
            spend: msg.spend,
            threshold: msg.threshold,
            action_taken: EnforcementAction::None,
            resulting_state: None,
            recorded_at: now,
            period: Some(msg.period),
            dedup_key: Some(key),
            reason: None,
            stopped_services: Vec::new(),
        };
        match book.entries.get(&msg.account_id) {
            None => record.reason = Some("unknown account".into()),
            Some(entry) => {
                let mut entry = entry.clone();
                entry.roll_over(&msg.period, now);
                let current = entry.account.state;
                let action = self.policy.action_for(msg.threshold);
                match action.target_status() {
                    Some(target) if target > current.value => {
                        record.action_taken = action;
                        record.resulting_state = Some(AccountState {
                            value: target,
                            changed_at: now,
                        });
                        if action == EnforcementAction::StopServices {
                            record.stopped_services = services
                                .iter()
                                .filter(|s| !self.policy.is_exempt(s) && !entry.stopped_services.contains(*s))
                                .cloned()
                                .collect();
                        }
                    }
                    _ => {
                        record.resulting_state = Some(current);
                        record.reason = Some(format!(
                            "account already {current_status:?}",
                            current_status = current.value
                        ));
                    }
                }
            }
        }
        let record = store.append(record)?;
        book.apply(&record);
        Ok(EnforcementOutcome {
            record,
            duplicate: false,
        })
    }

    /// Returns the account to Active and appends an audit record.
    pub fn reinstate(
        book: &mut AccountBook,
        store: &mut BreachStore,
        account_id: &str,
        reason: &str,
        now: DateTime<Utc>,
    ) -> Result<BreachRecord, EnforceError> {
        if !book.entries.contains_key(account_id) {
            return Err(EnforceError::UnknownAccount(account_id.to_string()));
        }
        let record = store.append(BreachRecord {
            seq: 0,
            breach_id: String::new(),
            account_id: account_id.to_string(),
            service_type: ALL_SERVICES.to_string(),
            budget_id: None,
            budget: Money::ZERO,
            spend: Money::ZERO,
            threshold: Decimal::ZERO,
            action_taken: EnforcementAction::None,
            resulting_state: Some(AccountState {
                value: AccountStatus::Active,
                changed_at: now,
            }),
            recorded_at: now,
            period: None,
            dedup_key: None,
            reason: Some(if reason.is_empty() {
                "reinstated".into()
            } else {
                reason.to_string()
            }),
            stopped_services: Vec::new(),
        })?;
        book.apply(&record);
        Ok(record)
    }
}
