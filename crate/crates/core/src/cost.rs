//! Deterministic cost model standing in for hardware measurement.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use thiserror::Error;

use crate::ir::{interpret, ExecutionProfile, IRModule, InterpConfig, InterpError};

/// Exact non-negative quantity used for weights and costs.
pub type Cost = Ratio<i128>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CostError {
    #[error("`{0}` is not a non-negative decimal or fraction")]
    Number(String),
    #[error("unknown cost-model key `{0}`")]
    UnknownKey(String),
    #[error("line {0}: expected key=value")]
    Syntax(usize),
    #[error("{0} must be positive")]
    NotPositive(&'static str),
}

/// Parse `12`, `0.25` or `3/4` into an exact ratio.
pub fn parse_ratio(s: &str) -> Result<Cost, CostError> {
    let err = || CostError::Number(s.to_string());
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let n: i128 = n.trim().parse().map_err(|_| err())?;
        let d: i128 = d.trim().parse().map_err(|_| err())?;
        if d <= 0 || n < 0 {
            return Err(err());
        }
        return Ok(Ratio::new(n, d));
    }
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if int.is_empty() && frac.is_empty()
        || !int.chars().all(|c| c.is_ascii_digit())
        || !frac.chars().all(|c| c.is_ascii_digit())
        || frac.len() > 18
    {
        return Err(err());
    }
    let digits = format!("{int}{frac}");
    let n: i128 = digits.parse().map_err(|_| err())?;
    Ok(Ratio::new(n, 10i128.pow(frac.len() as u32)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostModel {
    pub w_instr: Cost,
    pub w_branch: Cost,
    pub icache_capacity: u64,
    pub w_icache: Cost,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            w_instr: Ratio::from_integer(1),
            w_branch: Ratio::from_integer(8),
            icache_capacity: 512,
            w_icache: Ratio::from_integer(4),
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), CostError> {
        let zero = Ratio::from_integer(0);
        if self.w_instr <= zero {
            return Err(CostError::NotPositive("w_instr"));
        }
        if self.w_branch <= zero {
            return Err(CostError::NotPositive("w_branch"));
        }
        if self.icache_capacity == 0 {
            return Err(CostError::NotPositive("icache_capacity"));
        }
        if self.w_icache < zero {
            return Err(CostError::Number(self.w_icache.to_string()));
        }
        Ok(())
    }

    /// Apply `key=value` lines (`#` comments allowed) over the defaults.
    pub fn from_config(text: &str) -> Result<Self, CostError> {
        let mut cm = CostModel::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(CostError::Syntax(n + 1))?;
            cm.set(k.trim(), v.trim())?;
        }
        cm.validate()?;
        Ok(cm)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CostError> {
        match key {
            "w_instr" => self.w_instr = parse_ratio(value)?,
            "w_branch" => self.w_branch = parse_ratio(value)?,
            "w_icache" => self.w_icache = parse_ratio(value)?,
            "icache_capacity" => {
                self.icache_capacity = value
                    .parse()
                    .map_err(|_| CostError::Number(value.to_string()))?
            }
            k => match k.strip_prefix("cost.") {
                Some(inner) => return self.set(inner, value),
                None => return Err(CostError::UnknownKey(k.to_string())),
            },
        }
        Ok(())
    }

    /// Cost of a run with the given profile and static size.
    pub fn cost(&self, profile: &ExecutionProfile, size: usize) -> Cost {
        let over = (size as u64).saturating_sub(self.icache_capacity);
        self.w_instr * Ratio::from_integer(profile.dynamic_instructions as i128)
            + self.w_branch * Ratio::from_integer(profile.branches_taken as i128)
            + self.w_icache * Ratio::from_integer(over as i128)
    }
}

impl fmt::Display for CostModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "w_instr={} w_branch={} icache_capacity={} w_icache={}",
            self.w_instr, self.w_branch, self.icache_capacity, self.w_icache
        )
    }
}

impl FromStr for CostModel {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CostModel::from_config(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Measurement {
    pub cost: Cost,
    pub size: usize,
    pub profile: ExecutionProfile,
}

impl Measurement {
    pub fn cost_f64(&self) -> f64 {
        ratio_f64(&self.cost)
    }
}

pub fn ratio_f64(r: &Cost) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub fn measure(m: &IRModule, input: &[i64], cm: &CostModel) -> Result<Measurement, InterpError> {
    measure_with(m, input, cm, InterpConfig::default())
}

pub fn measure_with(
    m: &IRModule,
    input: &[i64],
    cm: &CostModel,
    cfg: InterpConfig,
) -> Result<Measurement, InterpError> {
    let profile = interpret(m, input, cfg)?;
    let size = m.size();
    Ok(Measurement {
        cost: cm.cost(&profile, size),
        size,
        profile,
    })
}

/// `base.cost / x.cost`.
pub fn speedup(base: &Measurement, x: &Measurement) -> f64 {
    speedup_of(&base.cost, &x.cost)
}

pub fn speedup_of(base: &Cost, x: &Cost) -> f64 {
    ratio_f64(&(base / x))
}
