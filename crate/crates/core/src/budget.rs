//! Cloud Resource Budget computation.
//!
//! The budget for a target is
//!
//! ```text
//! AS  = (sum of historical spend) * (1 + G) * (1 - C) * (1 + V)
//! CRB = min(AS, AB)
//! ```
//!
//! where `G` is projected growth, `C` the cost-control factor, `V` the
//! variability factor and `AB` the available budget. `V` is either supplied
//! or derived as the coefficient of variation (sample standard deviation
//! over mean) of the historical series.
//!
//! The product is formed exactly over big integers and rounded half away
//! from zero to the cent only once, at the end.

use chrono::{DateTime, Utc};
use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{Signed, ToPrimitive, Zero};
use rust_decimal::{Decimal, MathematicalOps};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::BudgetPeriod;
use crate::money::{checked_sum, Money, MoneyError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("series is empty")]
    EmptySeries,
    #[error("sample variance is undefined for fewer than two observations")]
    VarianceUndefined,
    #[error("coefficient of variation is undefined for a non-positive mean")]
    CovUndefined,
    #[error("statistics overflowed decimal range")]
    Overflow,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BudgetError {
    #[error("invalid budget parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Money(#[from] MoneyError),
}

/// Ordered historical spend values; never empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Money>", into = "Vec<Money>")]
pub struct SpendSeries {
    values: Vec<Money>,
}

impl SpendSeries {
    pub fn new(values: Vec<Money>) -> Result<Self, StatsError> {
        if values.is_empty() {
            return Err(StatsError::EmptySeries);
        }
        Ok(SpendSeries { values })
    }

    pub fn values(&self) -> &[Money] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total(&self) -> Result<Money, MoneyError> {
        checked_sum(self.values.iter().copied())
    }

    fn decimals(&self) -> Vec<Decimal> {
        self.values.iter().map(|m| m.to_decimal()).collect()
    }

    pub fn mean(&self) -> Result<Decimal, StatsError> {
        mean(&self.decimals())
    }

    pub fn sample_variance(&self) -> Result<Decimal, StatsError> {
        sample_variance(&self.decimals())
    }

    pub fn coefficient_of_variation(&self) -> Result<Decimal, StatsError> {
        coefficient_of_variation(&self.decimals())
    }

    pub fn stats(&self) -> Result<SeriesStats, StatsError> {
        SeriesStats::of(&self.decimals())
    }
}

impl TryFrom<Vec<Money>> for SpendSeries {
    type Error = StatsError;

    fn try_from(values: Vec<Money>) -> Result<Self, Self::Error> {
        SpendSeries::new(values)
    }
}

impl From<SpendSeries> for Vec<Money> {
    fn from(series: SpendSeries) -> Self {
        series.values
    }
}

fn checked_total(values: &[Decimal]) -> Result<Decimal, StatsError> {
    values
        .iter()
        .try_fold(Decimal::ZERO, |acc, v| acc.checked_add(*v))
        .ok_or(StatsError::Overflow)
}

/// Arithmetic mean `(1/n) * sum(x_i)`.
pub fn mean(values: &[Decimal]) -> Result<Decimal, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptySeries);
    }
    checked_total(values)?
        .checked_div(Decimal::from(values.len()))
        .ok_or(StatsError::Overflow)
}

/// Sample variance with the `n - 1` denominator.
pub fn sample_variance(values: &[Decimal]) -> Result<Decimal, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptySeries);
    }
    if values.len() < 2 {
        return Err(StatsError::VarianceUndefined);
    }
    let m = mean(values)?;
    let squares = values
        .iter()
        .try_fold(Decimal::ZERO, |acc, x| {
            let d = x.checked_sub(m)?;
            acc.checked_add(d.checked_mul(d)?)
        })
        .ok_or(StatsError::Overflow)?;
    squares
        .checked_div(Decimal::from(values.len() - 1))
        .ok_or(StatsError::Overflow)
}

/// Sample standard deviation over mean. Requires a positive mean.
///
/// Computed on the series divided by its mean, so magnitudes whose squares
/// exceed the decimal range still work.
pub fn coefficient_of_variation(values: &[Decimal]) -> Result<Decimal, StatsError> {
    let m = mean(values)?;
    if values.len() < 2 {
        return Err(StatsError::VarianceUndefined);
    }
    if m <= Decimal::ZERO {
        return Err(StatsError::CovUndefined);
    }
    let normalized = values
        .iter()
        .map(|x| x.checked_div(m))
        .collect::<Option<Vec<_>>>()
        .ok_or(StatsError::Overflow)?;
    sample_variance(&normalized)?.sqrt().ok_or(StatsError::Overflow)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub mean: Decimal,
    pub sample_variance: Decimal,
    pub stddev: Decimal,
    pub cov: Decimal,
}

impl SeriesStats {
    pub fn of(values: &[Decimal]) -> Result<Self, StatsError> {
        let sample_variance = sample_variance(values)?;
        let mean = mean(values)?;
        if mean <= Decimal::ZERO {
            return Err(StatsError::CovUndefined);
        }
        let stddev = sample_variance.sqrt().ok_or(StatsError::Overflow)?;
        let cov = coefficient_of_variation(values)?;
        Ok(SeriesStats {
            mean,
            sample_variance,
            stddev,
            cov,
        })
    }
}

/// `1 + sign * d` as an exact fraction `numer / 10^scale`.
fn one_plus(sign: i8, d: Decimal) -> (BigInt, u32) {
    let scale = d.scale();
    let unit = BigInt::from(10u8).pow(scale);
    let m = BigInt::from(d.mantissa());
    let numer = if sign < 0 { unit - m } else { unit + m };
    (numer, scale)
}

fn check_factors(g: Decimal, c: Decimal, v: Decimal) -> Result<(), BudgetError> {
    if g < Decimal::NEGATIVE_ONE {
        return Err(BudgetError::InvalidParameter(format!(
            "growth factor {g} must be at least -1"
        )));
    }
    if c < Decimal::ZERO || c >= Decimal::ONE {
        return Err(BudgetError::InvalidParameter(format!(
            "cost control factor {c} must be in [0, 1)"
        )));
    }
    if v < Decimal::ZERO {
        return Err(BudgetError::InvalidParameter(format!(
            "variability factor {v} must be non-negative"
        )));
    }
    Ok(())
}

/// `sum(HC_i) * (1 + G) * (1 - C) * (1 + V)`, exact until the final
/// half-up rounding to cents.
pub fn adjusted_spend(
    historical: &SpendSeries,
    growth: Decimal,
    cost_control: Decimal,
    variability: Decimal,
) -> Result<Money, BudgetError> {
    check_factors(growth, cost_control, variability)?;
    let total_cents = BigInt::from(historical.total()?.cents());
    let factors = [
        one_plus(1, growth),
        one_plus(-1, cost_control),
        one_plus(1, variability),
    ];
    let mut numer = total_cents;
    let mut scale = 0u32;
    for (m, s) in factors {
        numer *= m;
        scale += s;
    }
    let denom = BigInt::from(10u8).pow(scale);
    let cents = round_half_away(&numer, &denom);
    cents
        .to_i64()
        .map(Money::from_cents)
        .ok_or(BudgetError::Money(MoneyError::Overflow))
}

fn round_half_away(numer: &BigInt, denom: &BigInt) -> BigInt {
    let (quot, rem) = numer.div_rem(denom);
    if !rem.is_zero() && rem.abs() * 2u8 >= *denom {
        if numer.is_negative() {
            quot - 1
        } else {
            quot + 1
        }
    } else {
        quot
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum VariabilityMode {
    Explicit {
        value: Decimal,
    },
    #[default]
    ComputedFromHistorical,
}

pub fn default_thresholds() -> Vec<Decimal> {
    vec![
        Decimal::new(50, 2),
        Decimal::new(75, 2),
        Decimal::new(90, 2),
        Decimal::new(100, 2),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSpec {
    /// Account or cost-center id.
    pub target_id: String,
    pub period: BudgetPeriod,
    pub historical: SpendSeries,
    pub growth_factor: Decimal,
    pub cost_control_factor: Decimal,
    #[serde(default)]
    pub variability: VariabilityMode,
    pub available_budget: Money,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<Decimal>,
}

impl BudgetSpec {
    pub fn validate(&self) -> Result<(), BudgetError> {
        if self.target_id.trim().is_empty() {
            return Err(BudgetError::InvalidParameter("target_id is empty".into()));
        }
        let v = match self.variability {
            VariabilityMode::Explicit { value } => value,
            VariabilityMode::ComputedFromHistorical => Decimal::ZERO,
        };
        check_factors(self.growth_factor, self.cost_control_factor, v)?;
        if self.available_budget.is_negative() {
            return Err(BudgetError::InvalidParameter(
                "available budget must be non-negative".into(),
            ));
        }
        validate_thresholds(&self.thresholds)
    }
}

/// Thresholds must be strictly ascending fractions in `(0, 2]`.
pub fn validate_thresholds(thresholds: &[Decimal]) -> Result<(), BudgetError> {
    let two = Decimal::TWO;
    for t in thresholds {
        if *t <= Decimal::ZERO || *t > two {
            return Err(BudgetError::InvalidParameter(format!(
                "threshold {t} is outside (0, 2]"
            )));
        }
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(BudgetError::InvalidParameter(
            "thresholds must be strictly ascending".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputedBudget {
    pub spec: BudgetSpec,
    pub adjusted_spend: Money,
    pub crb: Money,
    pub v_used: Decimal,
    pub computed_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Resolves `V`, evaluates the adjusted spend, and caps it by the
/// available budget.
///
/// In computed mode a series too short or with a non-positive mean falls
/// back to `V = 0` and records a warning instead of failing.
pub fn compute_budget(spec: &BudgetSpec, computed_at: DateTime<Utc>) -> Result<ComputedBudget, BudgetError> {
    spec.validate()?;
    let mut warnings = Vec::new();
    let v_used = match spec.variability {
        VariabilityMode::Explicit { value } => value,
        VariabilityMode::ComputedFromHistorical => match spec.historical.coefficient_of_variation() {
            Ok(v) => v,
            Err(err @ (StatsError::VarianceUndefined | StatsError::CovUndefined)) => {
                warnings.push(format!("variability factor defaulted to 0: {err}"));
                Decimal::ZERO
            }
            Err(err) => return Err(err.into()),
        },
    };
    let adjusted_spend = adjusted_spend(&spec.historical, spec.growth_factor, spec.cost_control_factor, v_used)?;
    let crb = adjusted_spend.min(spec.available_budget);
    Ok(ComputedBudget {
        spec: spec.clone(),
        adjusted_spend,
        crb,
        v_used,
        computed_at,
        warnings,
    })
}

/// Splits `total` across targets in proportion to their weights, exactly:
/// floor shares first, then leftover cents by largest remainder (ties by
/// input order). Non-positive weights count as zero; if every weight is
/// zero the split is equal.
pub fn allocate(total: Money, weights: &[(String, Money)]) -> Vec<(String, Money)> {
    if weights.is_empty() {
        return Vec::new();
    }
    let clamped: Vec<i128> = weights
        .iter()
        .map(|(_, w)| i128::from(w.clamp_non_negative().cents()))
        .collect();
    let weight_sum: i128 = clamped.iter().sum();
    let (clamped, weight_sum) = if weight_sum == 0 {
        (vec![1; weights.len()], weights.len() as i128)
    } else {
        (clamped, weight_sum)
    };
    let total_cents = i128::from(total.cents());
    let mut shares: Vec<i128> = Vec::with_capacity(weights.len());
    let mut remainders: Vec<(i128, usize)> = Vec::with_capacity(weights.len());
    for (i, w) in clamped.iter().enumerate() {
        let numer = total_cents * w;
        shares.push(numer.div_euclid(weight_sum));
        remainders.push((numer.rem_euclid(weight_sum), i));
    }
    let mut leftover = total_cents - shares.iter().sum::<i128>();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, i) in remainders {
        if leftover == 0 {
            break;
        }
        shares[i] += 1;
        leftover -= 1;
    }
    weights
        .iter()
        .zip(shares)
        .map(|((id, _), cents)| (id.clone(), Money::from_cents(cents as i64)))
        .collect()
}
