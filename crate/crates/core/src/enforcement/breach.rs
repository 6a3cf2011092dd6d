//! Append-only store of breach records.
//!
//! On disk: `breaches.jsonl`, one JSON object per line, fields in this
//! order: `seq`, `breach_id`, `account_id`, `service_type`, `budget_id`,
//! `budget`, `spend`, `threshold`, `action_taken`, `resulting_state`,
//! `recorded_at`, `period`, `dedup_key`, `reason`, `stopped_services`.
//! `budget_id` and `stopped_services` are omitted when empty. Records are
//! never rewritten.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::policy::EnforcementAction;
use crate::model::{AccountState, BudgetPeriod};
use crate::money::Money;
use crate::storage::{AppendLog, Durability, FailPoint, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreachRecord {
    pub seq: u64,
    pub breach_id: String,
    pub account_id: String,
    pub service_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_id: Option<String>,
    pub budget: Money,
    pub spend: Money,
    pub threshold: Decimal,
    pub action_taken: EnforcementAction,
    /// `None` when the account is unknown.
    pub resulting_state: Option<AccountState>,
    pub recorded_at: DateTime<Utc>,
    pub period: Option<BudgetPeriod>,
    /// Set for records produced from enforcement messages.
    pub dedup_key: Option<String>,
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stopped_services: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreachFilter {
    pub account: Option<String>,
    pub period: Option<BudgetPeriod>,
    pub action: Option<EnforcementAction>,
}

impl BreachFilter {
    fn matches(&self, r: &BreachRecord) -> bool {
        self.account.as_ref().is_none_or(|a| *a == r.account_id)
            && self.period.as_ref().is_none_or(|p| r.period.as_ref() == Some(p))
            && self.action.is_none_or(|a| a == r.action_taken)
    }
}

#[derive(Debug)]
pub struct BreachStore {
    log: AppendLog<BreachRecord>,
    records: Vec<BreachRecord>,
    by_dedup: HashMap<String, usize>,
    fail: Arc<FailPoint>,
}

impl BreachStore {
    pub fn open(path: &Path, durability: Durability, fail: Arc<FailPoint>) -> Result<Self, StoreError> {
        let (log, records) = AppendLog::<BreachRecord>::open(path, durability)?;
        let by_dedup = records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.dedup_key.clone().map(|k| (k, i)))
            .collect();
        Ok(BreachStore {
            log,
            records,
            by_dedup,
            fail,
        })
    }

    pub fn next_seq(&self) -> u64 {
        self.records.last().map_or(1, |r| r.seq + 1)
    }

    /// Assigns `seq` and `breach_id`, then appends durably.
    pub fn append(&mut self, mut record: BreachRecord) -> Result<BreachRecord, StoreError> {
        record.seq = self.next_seq();
        record.breach_id = format!("BR-{:08}", record.seq);
        self.fail.hit()?;
        self.log.append(&record)?;
        if let Some(key) = &record.dedup_key {
            self.by_dedup.insert(key.clone(), self.records.len());
        }
        self.records.push(record.clone());
        Ok(record)
    }

    pub fn find_by_dedup(&self, key: &str) -> Option<&BreachRecord> {
        self.by_dedup.get(key).map(|i| &self.records[*i])
    }

    pub fn all(&self) -> &[BreachRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Matching records in append order, paginated.
    pub fn query(&self, filter: &BreachFilter, offset: usize, limit: usize) -> Vec<BreachRecord> {
        self.records
            .iter()
            .filter(|r| filter.matches(r))
            .skip(offset)
            .take(limit)
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AccountStatus;
    use chrono::TimeZone;

    fn record(account: &str, action: EnforcementAction, key: Option<&str>) -> BreachRecord {
        BreachRecord {
            seq: 0,
            breach_id: String::new(),
            account_id: account.into(),
            service_type: "ALL".into(),
            budget_id: None,
            budget: Money::from_dollars(100).unwrap(),
            spend: Money::from_dollars(101).unwrap(),
            threshold: Decimal::ONE,
            action_taken: action,
            resulting_state: Some(AccountState {
                value: AccountStatus::Restricted,
                changed_at: Utc.with_ymd_and_hms(2024, 1, 3, 0, 0, 0).unwrap(),
            }),
            recorded_at: Utc.with_ymd_and_hms(2024, 1, 3, 0, 0, 0).unwrap(),
            period: Some(BudgetPeriod::monthly(2024, 1).unwrap()),
            dedup_key: key.map(str::to_string),
            reason: None,
            stopped_services: vec![],
        }
    }

    #[test]
    fn empty_store_queries_empty() {
        let dir = tempfile::tempdir().unwrap();
        let store = BreachStore::open(
            &dir.path().join("b"),
            Durability::Flush,
            Arc::new(FailPoint::disarmed()),
        )
        .unwrap();
        assert!(store.query(&BreachFilter::default(), 0, 100).is_empty());
    }

    #[test]
    fn filters_paginates_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b");
        {
            let mut store = BreachStore::open(&path, Durability::Flush, Arc::new(FailPoint::disarmed())).unwrap();
            store
                .append(record("a", EnforcementAction::StopServices, Some("k1")))
                .unwrap();
            store.append(record("b", EnforcementAction::Warn, Some("k2"))).unwrap();
            store.append(record("a", EnforcementAction::None, None)).unwrap();
        }
        let store = BreachStore::open(&path, Durability::Flush, Arc::new(FailPoint::disarmed())).unwrap();
        let only_a = BreachFilter {
            account: Some("a".into()),
            ..Default::default()
        };
        let got = store.query(&only_a, 0, 10);
        assert_eq!(
            got.iter().map(|r| r.breach_id.as_str()).collect::<Vec<_>>(),
            vec!["BR-00000001", "BR-00000003"]
        );
        assert_eq!(store.query(&BreachFilter::default(), 1, 1)[0].account_id, "b");
        let warns = BreachFilter {
            action: Some(EnforcementAction::Warn),
            ..Default::default()
        };
        assert_eq!(store.query(&warns, 0, 10).len(), 1);
        assert_eq!(store.find_by_dedup("k1").unwrap().seq, 1);
        assert_eq!(store.next_seq(), 4);
    }

    #[test]
    fn interrupted_append_leaves_store_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b");
        let mut store = BreachStore::open(&path, Durability::Flush, Arc::new(FailPoint::after(1))).unwrap();
        store.append(record("a", EnforcementAction::Warn, Some("k1"))).unwrap();
        assert!(store.append(record("a", EnforcementAction::Warn, Some("k2"))).is_err());
        let reopened = BreachStore::open(&path, Durability::Flush, Arc::new(FailPoint::disarmed())).unwrap();
        assert_eq!(reopened.len(), 1);
    }
}
