//! Shared domain types: labels, billing records, accounts, budget periods.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Months, NaiveDate, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::money::Money;

/// Label keys every attributable resource must carry.
pub const REQUIRED_LABEL_KEYS: [&str; 3] = ["purpose", "owner", "environment"];
pub const MAX_LABEL_LEN: usize = 63;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("usage_start {start} is after usage_end {end}")]
    InvertedUsageWindow { start: DateTime<Utc>, end: DateTime<Utc> },
    #[error("invalid period {0:?}")]
    InvalidPeriod(String),
    #[error("malformed label pair {0:?}")]
    MalformedLabel(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet {
    entries: BTreeMap<String, String>,
}

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.insert(key, value);
        self
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `key=value` pairs joined by commas, keys in sorted order.
    pub fn to_pairs_string(&self) -> String {
        self.iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Parses the comma-separated `key=value` form. An empty string is an
    /// empty set; `key=` yields an empty value (which validation rejects).
    pub fn parse_pairs(s: &str) -> Result<Self, ModelError> {
        let mut labels = LabelSet::new();
        for pair in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| ModelError::MalformedLabel(pair.to_string()))?;
            labels.insert(k.trim(), v.trim());
        }
        Ok(labels)
    }
}

impl<K: Into<String>, V: Into<String>> FromIterator<(K, V)> for LabelSet {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        LabelSet {
            entries: iter.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelViolation {
    EmptyKey,
    EmptyValue { key: String },
    InvalidKeyChars { key: String },
    InvalidValueChars { key: String },
    KeyTooLong { key: String },
    ValueTooLong { key: String },
    MissingKey { key: String },
}

impl fmt::Display for LabelViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelViolation::EmptyKey => write!(f, "empty label key"),
            LabelViolation::EmptyValue { key } => write!(f, "empty value for {key}"),
            LabelViolation::InvalidKeyChars { key } => write!(f, "invalid characters in key {key:?}"),
            LabelViolation::InvalidValueChars { key } => {
                write!(f, "invalid characters in value for {key}")
            }
            LabelViolation::KeyTooLong { key } => write!(f, "key {key:?} exceeds {MAX_LABEL_LEN} characters"),
            LabelViolation::ValueTooLong { key } => {
                write!(f, "value for {key} exceeds {MAX_LABEL_LEN} characters")
            }
            LabelViolation::MissingKey { key } => write!(f, "missing {key}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "violations", rename_all = "snake_case")]
pub enum ValidationResult {
    Valid,
    Invalid(Vec<LabelViolation>),
}

impl ValidationResult {
    pub fn is_valid(&self) -> bool {
        matches!(self, ValidationResult::Valid)
    }

    pub fn violations(&self) -> &[LabelViolation] {
        match self {
            ValidationResult::Valid => &[],
            ValidationResult::Invalid(v) => v,
        }
    }
}

fn label_chars_ok(s: &str) -> bool {
    s.bytes()
        .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-' || b == b'_')
}

/// Checks every label entry and the required keys, collecting all failures.
pub fn validate_labels(labels: &LabelSet) -> ValidationResult {
    let mut violations = Vec::new();
    for (key, value) in labels.iter() {
        if key.is_empty() {
            violations.push(LabelViolation::EmptyKey);
        } else {
            if !label_chars_ok(key) {
                violations.push(LabelViolation::InvalidKeyChars { key: key.to_string() });
            }
            if key.chars().count() > MAX_LABEL_LEN {
                violations.push(LabelViolation::KeyTooLong { key: key.to_string() });
            }
        }
        if value.is_empty() {
            violations.push(LabelViolation::EmptyValue { key: key.to_string() });
        } else {
            if !label_chars_ok(value) {
                violations.push(LabelViolation::InvalidValueChars { key: key.to_string() });
            }
            if value.chars().count() > MAX_LABEL_LEN {
                violations.push(LabelViolation::ValueTooLong { key: key.to_string() });
            }
        }
    }
    for required in REQUIRED_LABEL_KEYS {
        if labels.get(required).is_none() {
            violations.push(LabelViolation::MissingKey {
                key: required.to_string(),
            });
        }
    }
    if violations.is_empty() {
        ValidationResult::Valid
    } else {
        ValidationResult::Invalid(violations)
    }
}

/// One metered cost line from a provider feed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BillingRecord {
    pub record_id: String,
    pub account_id: String,
    pub service_name: String,
    pub resource_id: String,
    pub labels: LabelSet,
    pub usage_start: DateTime<Utc>,
    pub usage_end: DateTime<Utc>,
    /// Negative for credits and refunds.
    pub cost: Money,
}

impl BillingRecord {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.usage_start > self.usage_end {
            return Err(ModelError::InvertedUsageWindow {
                start: self.usage_start,
                end: self.usage_end,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    Simulated,
    Gcp,
    Aws,
    Azure,
}

/// Enforcement position of an account, ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AccountStatus {
    Active,
    Warned,
    Restricted,
    Suspended,
}

impl AccountStatus {
    /// New deployments are allowed only in these states.
    pub fn permits_deployments(self) -> bool {
        matches!(self, AccountStatus::Active | AccountStatus::Warned)
    }
}

impl fmt::Display for AccountStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AccountStatus::Active => "Active",
            AccountStatus::Warned => "Warned",
            AccountStatus::Restricted => "Restricted",
            AccountStatus::Suspended => "Suspended",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountState {
    pub value: AccountStatus,
    pub changed_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub account_id: String,
    pub display_name: String,
    pub cost_center_id: String,
    pub provider: Provider,
    pub state: AccountState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Monthly,
    Quarterly,
}

impl Granularity {
    fn months(self) -> u32 {
        match self {
            Granularity::Monthly => 1,
            Granularity::Quarterly => 3,
        }
    }
}

/// A half-open `[start, end)` budget window aligned to calendar months.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawPeriod")]
pub struct BudgetPeriod {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub granularity: Granularity,
}

#[derive(Deserialize)]
struct RawPeriod {
    start: DateTime<Utc>,
    end: Option<DateTime<Utc>>,
    granularity: Granularity,
}

impl TryFrom<RawPeriod> for BudgetPeriod {
    type Error = ModelError;

    fn try_from(raw: RawPeriod) -> Result<Self, Self::Error> {
        let period = BudgetPeriod::starting(raw.granularity, raw.start)?;
        match raw.end {
            Some(end) if end != period.end => Err(ModelError::InvalidPeriod(format!(
                "end {end} does not match {:?} period starting {}",
                raw.granularity, raw.start
            ))),
            _ => Ok(period),
        }
    }
}

fn month_start(year: i32, month: u32) -> Option<DateTime<Utc>> {
    NaiveDate::from_ymd_opt(year, month, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| Utc.from_utc_datetime(&dt))
}

impl BudgetPeriod {
    /// Period of the given granularity beginning at `start`, which must be
    /// midnight UTC on the first of a month (and a quarter start for
    /// quarterly periods).
    pub fn starting(granularity: Granularity, start: DateTime<Utc>) -> Result<Self, ModelError> {
        let aligned = month_start(start.year(), start.month()) == Some(start);
        let quarter_ok = granularity != Granularity::Quarterly || (start.month() - 1).is_multiple_of(3);
        if !aligned || !quarter_ok {
            return Err(ModelError::InvalidPeriod(format!(
                "{start} is not a {granularity:?} boundary"
            )));
        }
        let end = start
            .checked_add_months(Months::new(granularity.months()))
            .ok_or_else(|| ModelError::InvalidPeriod(start.to_string()))?;
        Ok(BudgetPeriod {
            start,
            end,
            granularity,
        })
    }

    pub fn monthly(year: i32, month: u32) -> Result<Self, ModelError> {
        let start = month_start(year, month).ok_or_else(|| ModelError::InvalidPeriod(format!("{year}-{month:02}")))?;
        BudgetPeriod::starting(Granularity::Monthly, start)
    }

    pub fn quarterly(year: i32, quarter: u32) -> Result<Self, ModelError> {
        if !(1..=4).contains(&quarter) {
            return Err(ModelError::InvalidPeriod(format!("{year}-Q{quarter}")));
        }
        let start = month_start(year, (quarter - 1) * 3 + 1)
            .ok_or_else(|| ModelError::InvalidPeriod(format!("{year}-Q{quarter}")))?;
        BudgetPeriod::starting(Granularity::Quarterly, start)
    }

    /// The period of this granularity that contains `t`.
    pub fn containing(granularity: Granularity, t: DateTime<Utc>) -> Self {
        let month = match granularity {
            Granularity::Monthly => t.month(),
            Granularity::Quarterly => (t.month() - 1) / 3 * 3 + 1,
        };
        let start = month_start(t.year(), month).expect("valid calendar month");
        BudgetPeriod::starting(granularity, start).expect("aligned start")
    }

    pub fn next(&self) -> Self {
        BudgetPeriod::starting(self.granularity, self.end).expect("end is aligned")
    }

    pub fn previous(&self) -> Self {
        let start = self
            .start
            .checked_sub_months(Months::new(self.granularity.months()))
            .expect("period start in range");
        BudgetPeriod::starting(self.granularity, start).expect("aligned start")
    }

    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.start <= t && t < self.end
    }

    pub fn days(&self) -> i64 {
        (self.end - self.start).num_days()
    }

    pub fn first_day(&self) -> NaiveDate {
        self.start.date_naive()
    }

    /// Last calendar day inside the period.
    pub fn last_day(&self) -> NaiveDate {
        self.end.date_naive().pred_opt().expect("period has at least one day")
    }

    /// `YYYY-MM` for monthly, `YYYY-Qn` for quarterly.
    pub fn label(&self) -> String {
        match self.granularity {
            Granularity::Monthly => format!("{}-{:02}", self.start.year(), self.start.month()),
            Granularity::Quarterly => {
                format!("{}-Q{}", self.start.year(), (self.start.month() - 1) / 3 + 1)
            }
        }
    }
}

impl fmt::Display for BudgetPeriod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for BudgetPeriod {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::InvalidPeriod(s.to_string());
        let (year, rest) = s.trim().split_once('-').ok_or_else(bad)?;
        let year: i32 = year.parse().map_err(|_| bad())?;
        if let Some(q) = rest.strip_prefix('Q').or_else(|| rest.strip_prefix('q')) {
            BudgetPeriod::quarterly(year, q.parse().map_err(|_| bad())?)
        } else {
            BudgetPeriod::monthly(year, rest.parse().map_err(|_| bad())?)
        }
    }
}
