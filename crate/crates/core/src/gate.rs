//! Pre-deployment cost gate.
//!
//! A plan lists the resources a deployment would create with their
//! estimated monthly cost, either given directly or derived from a price
//! table as unit price × quantity. The gate allows the plan when billed
//! period spend plus the plan cost stays within the budget (inclusive) and
//! the account still permits deployments.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use chrono::{DateTime, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::AccountStatus;
use crate::money::{Money, MoneyError};
use crate::storage::{AppendLog, Durability, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanResource {
    pub address: String,
    pub service_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monthly_cost: Option<Money>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantity: Option<Decimal>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub plan_id: String,
    pub account_id: String,
    #[serde(default)]
    pub resources: Vec<PlanResource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submitted_at: Option<DateTime<Utc>>,
}

/// Monthly unit prices by resource type.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceTable(pub BTreeMap<String, Money>);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("plan_id and account_id must be non-empty")]
    MissingId,
    #[error("duplicate resource address {0}")]
    DuplicateAddress(String),
    #[error("resource {0} has a negative cost")]
    NegativeCost(String),
    #[error("resource {0} has neither monthly_cost nor resource_type")]
    MissingCost(String),
    #[error("resource {address}: no price for type {resource_type}")]
    UnknownResourceType { address: String, resource_type: String },
    #[error("resource {0}: {1}")]
    Money(String, MoneyError),
}

impl PlanResource {
    pub fn cost(&self, prices: &PriceTable) -> Result<Money, PlanError> {
        let cost = match (&self.monthly_cost, &self.resource_type) {
            (Some(c), _) => *c,
            (None, Some(t)) => {
                let unit = prices.0.get(t).ok_or_else(|| PlanError::UnknownResourceType {
                    address: self.address.clone(),
                    resource_type: t.clone(),
                })?;
                let qty = self.quantity.unwrap_or(Decimal::ONE);
                if qty.is_sign_negative() {
                    return Err(PlanError::NegativeCost(self.address.clone()));
                }
                unit.scale(qty).map_err(|e| PlanError::Money(self.address.clone(), e))?
            }
            (None, None) => return Err(PlanError::MissingCost(self.address.clone())),
        };
        if cost.is_negative() {
            return Err(PlanError::NegativeCost(self.address.clone()));
        }
        Ok(cost)
    }
}

impl DeploymentPlan {
    pub fn validate(&self, prices: &PriceTable) -> Result<(), PlanError> {
        plan_cost(self, prices).map(|_| ())
    }
}

/// Exact sum of resource estimates; also validates the plan.
pub fn plan_cost(plan: &DeploymentPlan, prices: &PriceTable) -> Result<Money, PlanError> {
    if plan.plan_id.is_empty() || plan.account_id.is_empty() {
        return Err(PlanError::MissingId);
    }
    let mut seen = HashSet::new();
    let mut total = Money::ZERO;
    for r in &plan.resources {
        if !seen.insert(r.address.as_str()) {
            return Err(PlanError::DuplicateAddress(r.address.clone()));
        }
        total = total
            .checked_add(r.cost(prices)?)
            .map_err(|e| PlanError::Money(r.address.clone(), e))?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Allow,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDecision {
    pub plan_id: String,
    pub account_id: String,
    pub verdict: Verdict,
    pub reason: String,
    pub plan_cost: Money,
    pub projected_spend: Money,
    pub remaining_budget: Money,
    pub crb: Option<Money>,
    pub decided_at: DateTime<Utc>,
}

/// What the gate knows about the plan's account.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateContext {
    /// `None` for an unknown account.
    pub status: Option<AccountStatus>,
    /// Budget for the current period, if one is configured.
    pub crb: Option<Money>,
    /// Billed spend so far this period.
    pub spend: Money,
}

pub fn evaluate_plan(plan: &DeploymentPlan, cost: Money, ctx: GateContext, decided_at: DateTime<Utc>) -> GateDecision {
    let projected = ctx.spend.checked_add(cost);
    let remaining = ctx
        .crb
        .and_then(|crb| crb.checked_sub(ctx.spend).ok())
        .unwrap_or(Money::ZERO);
    let deny = match (ctx.status, ctx.crb, &projected) {
        (None, _, _) => Some("unknown account".to_string()),
        (Some(AccountStatus::Suspended), _, _) => Some("account suspended".to_string()),
        (Some(AccountStatus::Restricted), _, _) => Some("account restricted".to_string()),
        (_, None, _) => Some("no budget".to_string()),
        (_, _, Err(_)) => Some("projected spend overflows".to_string()),
        (_, Some(crb), Ok(p)) if *p > crb => Some(format!(
            "projected spend {p} exceeds budget {crb} (remaining {remaining}, plan {cost})"
        )),
        _ => None,
    };
    GateDecision {
        plan_id: plan.plan_id.clone(),
        account_id: plan.account_id.clone(),
        verdict: if deny.is_some() { Verdict::Deny } else { Verdict::Allow },
        reason: deny.unwrap_or_else(|| "within budget".to_string()),
        plan_cost: cost,
        projected_spend: projected.unwrap_or(ctx.spend),
        remaining_budget: remaining,
        crb: ctx.crb,
        decided_at,
    }
}

/// Append-only log of gate decisions.
#[derive(Debug)]
pub struct DecisionLog {
    log: AppendLog<GateDecision>,
    count: usize,
}

impl DecisionLog {
    pub fn open(path: &Path, durability: Durability) -> Result<Self, StoreError> {
        let (log, existing) = AppendLog::<GateDecision>::open(path, durability)?;
        Ok(DecisionLog {
            log,
            count: existing.len(),
        })
    }

    pub fn append(&mut self, decision: &GateDecision) -> Result<(), StoreError> {
        self.log.append(decision)?;
        self.count += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}
