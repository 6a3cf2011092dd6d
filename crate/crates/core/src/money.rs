//! Exact money arithmetic over integer cents.
//!
//! All stored totals are `i64` minor units. Scaling by a decimal factor is
//! computed exactly in 128-bit integers and rounded half away from zero to
//! the nearest cent.

use std::fmt;
use std::iter::Sum;
use std::str::FromStr;

use rust_decimal::prelude::ToPrimitive;
use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Largest number of fractional digits accepted by [`Money::scale`].
pub const MAX_FACTOR_SCALE: u32 = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MoneyError {
    #[error("money arithmetic overflowed the minor-unit range")]
    Overflow,
    #[error("scale factor {0} has more than {MAX_FACTOR_SCALE} fractional digits")]
    FactorPrecision(Decimal),
    #[error("invalid money amount {0:?}")]
    Parse(String),
}

/// A USD amount held as a signed count of cents.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Money {
    cents: i64,
}

impl Money {
    pub const ZERO: Money = Money { cents: 0 };

    pub const fn from_cents(cents: i64) -> Self {
        Money { cents }
    }

    /// Whole dollars, for literals in tests and configs.
    pub fn from_dollars(dollars: i64) -> Result<Self, MoneyError> {
        dollars
            .checked_mul(100)
            .map(Money::from_cents)
            .ok_or(MoneyError::Overflow)
    }

    /// Converts a decimal dollar amount, rounding half away from zero to
    /// the cent.
    pub fn from_decimal(dollars: Decimal) -> Result<Self, MoneyError> {
        let cents = dollars
            .checked_mul(Decimal::ONE_HUNDRED)
            .ok_or(MoneyError::Overflow)?
            .round_dp_with_strategy(0, RoundingStrategy::MidpointAwayFromZero);
        cents.to_i64().map(Money::from_cents).ok_or(MoneyError::Overflow)
    }

    pub const fn cents(self) -> i64 {
        self.cents
    }

    pub fn to_decimal(self) -> Decimal {
        Decimal::new(self.cents, 2)
    }

    pub fn is_negative(self) -> bool {
        self.cents < 0
    }

    pub fn is_zero(self) -> bool {
        self.cents == 0
    }

    pub fn checked_add(self, other: Money) -> Result<Money, MoneyError> {
        self.cents
            .checked_add(other.cents)
            .map(Money::from_cents)
            .ok_or(MoneyError::Overflow)
    }

    pub fn checked_sub(self, other: Money) -> Result<Money, MoneyError> {
        self.cents
            .checked_sub(other.cents)
            .map(Money::from_cents)
            .ok_or(MoneyError::Overflow)
    }

    /// Multiplies by an exact decimal factor with at most six fractional
    /// digits and rounds half away from zero to the cent.
    pub fn scale(self, factor: Decimal) -> Result<Money, MoneyError> {
        let factor = factor.normalize();
        if factor.scale() > MAX_FACTOR_SCALE {
            return Err(MoneyError::FactorPrecision(factor));
        }
        let numer = i128::from(self.cents)
            .checked_mul(factor.mantissa())
            .ok_or(MoneyError::Overflow)?;
        let denom = 10i128.pow(factor.scale());
        let rounded = div_round_half_away(numer, denom);
        i64::try_from(rounded)
            .map(Money::from_cents)
            .map_err(|_| MoneyError::Overflow)
    }

    /// Negative amounts become zero.
    pub fn clamp_non_negative(self) -> Money {
        Money::from_cents(self.cents.max(0))
    }

    /// Dollar rendering with thousands separators, for human-facing output.
    pub fn to_grouped_string(self) -> String {
        let abs = self.cents.unsigned_abs();
        let whole = (abs / 100).to_string();
        let mut grouped = String::with_capacity(whole.len() + whole.len() / 3);
        for (i, ch) in whole.chars().enumerate() {
            if i > 0 && (whole.len() - i).is_multiple_of(3) {
                grouped.push(',');
            }
            grouped.push(ch);
        }
        let sign = if self.cents < 0 { "-" } else { "" };
        format!("{sign}${grouped}.{:02}", abs % 100)
    }
}

fn div_round_half_away(numer: i128, denom: i128) -> i128 {
    let quot = numer / denom;
    let rem = numer % denom;
    if rem.abs() * 2 >= denom {
        quot + numer.signum()
    } else {
        quot
    }
}

/// Exact sum of an iterator of amounts.
pub fn checked_sum<I: IntoIterator<Item = Money>>(items: I) -> Result<Money, MoneyError> {
    items.into_iter().try_fold(Money::ZERO, |acc, m| acc.checked_add(m))
}

impl Sum for Money {
    /// Panics on overflow; use [`checked_sum`] where inputs are untrusted.
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        checked_sum(iter).expect("money sum overflow")
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let abs = self.cents.unsigned_abs();
        let sign = if self.cents < 0 { "-" } else { "" };
        write!(f, "{sign}{}.{:02}", abs / 100, abs % 100)
    }
}

impl FromStr for Money {
    type Err = MoneyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim().trim_start_matches('$').replace(',', "");
        let dec = Decimal::from_str(&trimmed).map_err(|_| MoneyError::Parse(s.to_string()))?;
        Money::from_decimal(dec)
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Int(i64),
            Float(f64),
        }
        let parsed = match Raw::deserialize(deserializer)? {
            Raw::Text(s) => s.parse(),
            Raw::Int(i) => Money::from_dollars(i),
            Raw::Float(f) => Decimal::from_str(&f.to_string())
                .map_err(|_| MoneyError::Parse(f.to_string()))
                .and_then(Money::from_decimal),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}
