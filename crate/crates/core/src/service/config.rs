use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::alerting::SinkRegistration;
use crate::budget::{default_thresholds, validate_thresholds};
use crate::enforcement::{EnforcementPolicy, DEFAULT_CAPACITY};
use crate::gate::PriceTable;
use crate::ingest::{CostCenter, LabelOverride};
use crate::model::{Account, AccountState, AccountStatus, Granularity, Provider};
use crate::storage::Durability;

use super::ServiceError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountConfig {
    pub account_id: String,
    #[serde(default)]
    pub display_name: String,
    pub cost_center_id: String,
    #[serde(default = "default_provider")]
    pub provider: Provider,
}

fn default_provider() -> Provider {
    Provider::Simulated
}

impl AccountConfig {
    /// A new account starts Active; the epoch marks "never changed".
    pub fn to_account(&self) -> Account {
        Account {
            account_id: self.account_id.clone(),
            display_name: if self.display_name.is_empty() {
                self.account_id.clone()
            } else {
                self.display_name.clone()
            },
            cost_center_id: self.cost_center_id.clone(),
            provider: self.provider,
            state: AccountState {
                value: AccountStatus::Active,
                changed_at: DateTime::<Utc>::UNIX_EPOCH,
            },
        }
    }
}

fn default_floor() -> Decimal {
    Decimal::new(90, 2)
}

fn default_interval() -> u64 {
    1800
}

fn default_capacity() -> usize {
    DEFAULT_CAPACITY
}

fn default_granularity() -> Granularity {
    Granularity::Monthly
}

/// Service configuration, normally read from a TOML file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Config {
    pub data_dir: PathBuf,
    /// Bearer token required by the HTTP API. `None` disables auth.
    #[serde(default)]
    pub token: Option<String>,
    /// Thresholds applied to budgets that do not list their own.
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<Decimal>,
    #[serde(default)]
    pub policy: EnforcementPolicy,
    /// Lowest threshold that is sent to the enforcer.
    #[serde(default = "default_floor")]
    pub enforcement_floor: Decimal,
    #[serde(default)]
    pub sinks: Vec<SinkRegistration>,
    /// Seconds between monitor sweeps when serving.
    #[serde(default = "default_interval")]
    pub monitor_interval_secs: u64,
    #[serde(default = "default_capacity")]
    pub queue_capacity: usize,
    #[serde(default)]
    pub durability: Durability,
    /// Period length used for accounts without a budget.
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    #[serde(default)]
    pub cost_centers: Vec<CostCenter>,
    #[serde(default)]
    pub accounts: Vec<AccountConfig>,
    #[serde(default)]
    pub overrides: Vec<LabelOverride>,
    #[serde(default)]
    pub prices: PriceTable,
}

impl Config {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Config {
            data_dir: data_dir.into(),
            token: None,
            thresholds: default_thresholds(),
            policy: EnforcementPolicy::default(),
            enforcement_floor: default_floor(),
            sinks: Vec::new(),
            monitor_interval_secs: default_interval(),
            queue_capacity: DEFAULT_CAPACITY,
            durability: Durability::default(),
            granularity: Granularity::Monthly,
            cost_centers: Vec::new(),
            accounts: Vec::new(),
            overrides: Vec::new(),
            prices: PriceTable::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        let config: Config = toml::from_str(text).map_err(|e| ServiceError::InvalidInput(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::InvalidInput(format!("{}: {e}", path.display())))?;
        Config::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        validate_thresholds(&self.thresholds).map_err(|e| ServiceError::InvalidInput(e.to_string()))?;
        self.policy
            .validate()
            .map_err(|e| ServiceError::InvalidInput(e.to_string()))?;
        if self.queue_capacity == 0 {
            return Err(ServiceError::InvalidInput("queue_capacity must be positive".into()));
        }
        let mut ids = std::collections::HashSet::new();
        for a in &self.accounts {
            if !ids.insert(&a.account_id) {
                return Err(ServiceError::InvalidInput(format!(
                    "duplicate account {}",
                    a.account_id
                )));
            }
        }
        Ok(())
    }
}
