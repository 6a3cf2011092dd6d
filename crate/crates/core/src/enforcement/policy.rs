use std::collections::BTreeSet;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::AccountStatus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EnforcementAction {
    None,
    Warn,
    StopServices,
    SuspendAccount,
}

impl EnforcementAction {
    /// The account state this action moves an account to.
    pub fn target_status(self) -> Option<AccountStatus> {
        match self {
            EnforcementAction::None => None,
            EnforcementAction::Warn => Some(AccountStatus::Warned),
            EnforcementAction::StopServices => Some(AccountStatus::Restricted),
            EnforcementAction::SuspendAccount => Some(AccountStatus::Suspended),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRule {
    pub threshold: Decimal,
    pub action: EnforcementAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("policy thresholds must be strictly ascending")]
    Unordered,
    #[error("policy actions must not decrease in severity as thresholds rise")]
    SeverityInversion,
}

/// Maps the crossed threshold to an action: the rule with the highest
/// threshold not above the crossed one applies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnforcementPolicy {
    rules: Vec<PolicyRule>,
    #[serde(default)]
    pub exempt_services: BTreeSet<String>,
}

impl Default for EnforcementPolicy {
    fn default() -> Self {
        EnforcementPolicy {
            rules: vec![
                PolicyRule {
                    threshold: Decimal::new(90, 2),
                    action: EnforcementAction::Warn,
                },
                PolicyRule {
                    threshold: Decimal::ONE,
                    action: EnforcementAction::StopServices,
                },
                PolicyRule {
                    threshold: Decimal::new(110, 2),
                    action: EnforcementAction::SuspendAccount,
                },
            ],
            exempt_services: BTreeSet::new(),
        }
    }
}

impl EnforcementPolicy {
    pub fn new(rules: Vec<PolicyRule>, exempt_services: BTreeSet<String>) -> Result<Self, PolicyError> {
        if rules.windows(2).any(|w| w[0].threshold >= w[1].threshold) {
            return Err(PolicyError::Unordered);
        }
        if rules.windows(2).any(|w| w[0].action > w[1].action) {
            return Err(PolicyError::SeverityInversion);
        }
        Ok(EnforcementPolicy { rules, exempt_services })
    }

    pub fn rules(&self) -> &[PolicyRule] {
        &self.rules
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        EnforcementPolicy::new(self.rules.clone(), self.exempt_services.clone()).map(|_| ())
    }

    pub fn action_for(&self, threshold: Decimal) -> EnforcementAction {
        self.rules
            .iter()
            .rev()
            .find(|r| r.threshold <= threshold)
            .map_or(EnforcementAction::None, |r| r.action)
    }

    pub fn is_exempt(&self, service: &str) -> bool {
        self.exempt_services.contains(service)
    }
}
