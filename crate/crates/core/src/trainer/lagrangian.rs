use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintKind, Lambdas};

/// Default multiplier of the fixed-coefficient baseline.
pub const DEFAULT_FIXED_LAMBDA: f64 = 0.1;

/// How constraint multipliers are set during training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LambdaMode {
    /// Projected dual ascent from λ = 0.
    #[default]
    Dual,
    /// Constant multipliers: one value for everything, one per constraint
    /// kind (in constraint-set order), or one per (layer, kind).
    Fixed(Vec<f64>),
}

impl LambdaMode {
    pub fn fixed_default() -> Self {
        LambdaMode::Fixed(vec![DEFAULT_FIXED_LAMBDA])
    }

    /// Initial multipliers for the given layers and constraint kinds.
    pub fn initial(&self, layers: &[usize], kinds: &[ConstraintKind]) -> Result<Lambdas, String> {
        match self {
            LambdaMode::Dual => Ok(Lambdas::uniform(layers, kinds, 0.0)),
            LambdaMode::Fixed(v) => {
                if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    return Err(format!("fixed multipliers must be finite and >= 0: {v:?}"));
                }
                let mut l = Lambdas::default();
                if v.len() == 1 {
                    return Ok(Lambdas::uniform(layers, kinds, v[0]));
                } else if v.len() == kinds.len() {
                    for &layer in layers {
                        for (&k, &x) in kinds.iter().zip(v) {
                            l.set(layer, k, x);
                        }
                    }
                } else if v.len() == kinds.len() * layers.len() {
                    let mut it = v.iter();
                    for &layer in layers {
                        for &k in kinds {
                            l.set(layer, k, *it.next().unwrap());
                        }
                    }
                } else {
                    return Err(format!(
                        "{} fixed multipliers for {} layers x {} constraints",
                        v.len(),
                        layers.len(),
                        kinds.len()
                    ));
                }
                Ok(l)
            }
        }
    }
}

impl fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaMode::Dual => f.write_str("dual"),
            LambdaMode::Fixed(v) => {
                let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "fixed:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for LambdaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "dual" {
            return Ok(LambdaMode::Dual);
        }
        if s == "fixed" {
            return Ok(LambdaMode::fixed_default());
        }
        let Some(csv) = s.strip_prefix("fixed:") else {
            return Err(format!("unknown lambda mode {s:?}; expected dual or fixed:<csv>"));
        };
        let v = csv
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|e| format!("bad multiplier {x:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        if v.iter().any(|x| *x < 0.0 || !x.is_finite()) {
            return Err(format!("multipliers must be finite and >= 0: {csv}"));
        }
        Ok(LambdaMode::Fixed(v))
    }
}

impl TryFrom<String> for LambdaMode {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<LambdaMode> for String {
    fn from(m: LambdaMode) -> String {
        m.to_string()
    }
}

pub type Violations = BTreeMap<(usize, ConstraintKind), f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationEntry {
    pub layer: usize,
    pub constraint: ConstraintKind,
    pub value: f64,
}

pub fn violation_entries(v: &Violations) -> Vec<ViolationEntry> {
    v.iter()
        .map(|(&(layer, constraint), &value)| ViolationEntry {
            layer,
            constraint,
            value,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualRecord {
    pub step: usize,
    pub epoch: usize,
    /// Multipliers after the update.
    pub lambdas: Lambdas,
    /// Mean of per-batch mean violations over the period (drives the update).
    pub period_mean: Vec<ViolationEntry>,
    /// Violations of the last batch in the period (logged only).
    pub period_end: Vec<ViolationEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambdas: Lambdas,
    pub step_size: f64,
    /// Steps between updates; `None` updates once per epoch.
    pub update_period: Option<usize>,
    pub history: Vec<DualRecord>,
}

impl LagrangianState {
    pub fn new(lambdas: Lambdas, step_size: f64, update_period: Option<usize>) -> Self {
        Self {
            lambdas,
            step_size,
            update_period,
            history: Vec::new(),
        }
    }

    /// `λ ← max(0, λ + η v)` for every multiplier with a reported violation.
    pub fn dual_update(&mut self, violations: &Violations, period_end: &Violations, step: usize, epoch: usize) {
        for (&(layer, kind), &v) in violations {
            let updated = (self.lambdas.get(layer, kind) + self.step_size * v).max(0.0);
            self.lambdas.set(layer, kind, updated);
        }
        self.history.push(DualRecord {
            step,
            epoch,
            lambdas: self.lambdas.clone(),
            period_mean: violation_entries(violations),
            period_end: violation_entries(period_end),
        });
    }
}

/// Running mean of per-batch mean violations within one dual period.
#[derive(Debug, Clone, Default)]
pub struct PeriodAccumulator {
    sums: Violations,
    batches: usize,
    last: Violations,
}

impl PeriodAccumulator {
    pub fn push_batch(&mut self, batch_mean: Violations) {
        for (&k, &v) in &batch_mean {
            *self.sums.entry(k).or_default() += v;
        }
        self.batches += 1;
        self.last = batch_mean;
    }

    pub fn is_empty(&self) -> bool {
        self.batches == 0
    }

    /// Returns (period mean, period end) and resets.
    pub fn take(&mut self) -> (Violations, Violations) {
        let n = self.batches.max(1) as f64;
        let mean = self.sums.iter().map(|(&k, &v)| (k, v / n)).collect();
        let last = std::mem::take(&mut self.last);
        self.sums.clear();
        self.batches = 0;
        (mean, last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ConstraintKind::*;

    fn viol(v: f64) -> Violations {
        Violations::from([((0, Contiguity), v)])
    }

    #[test]
    fn update_arithmetic() {
        let mut s = LagrangianState::new(Lambdas::uniform(&[0], &[Contiguity], 0.0), 0.1, None);
        s.dual_update(&viol(0.0), &viol(0.0), 1, 0);
        assert_eq!(s.lambdas.get(0, Contiguity), 0.0);
        s.dual_update(&viol(0.5), &viol(0.5), 2, 0);
        assert!((s.lambdas.get(0, Contiguity) - 0.05).abs() < 1e-15);
        assert_eq!(s.history.len(), 2);
    }

    #[test]
    fn projection_clamps_at_zero() {
        let mut s = LagrangianState::new(Lambdas::uniform(&[0], &[Contiguity], 0.01), 0.1, None);
        s.dual_update(&viol(-1.0), &viol(-1.0), 1, 0);
        assert_eq!(s.lambdas.get(0, Contiguity), 0.0);
    }

    #[test]
    fn persistent_violation_strictly_increases_lambda() {
        let mut s = LagrangianState::new(Lambdas::uniform(&[0], &[Contiguity], 0.0), 0.1, None);
        let mut last = 0.0;
        for step in 0..3 {
            s.dual_update(&viol(0.3), &viol(0.3), step, step);
            let now = s.lambdas.get(0, Contiguity);
            assert!(now > last);
            last = now;
        }
    }

    #[test]
    fn lambda_mode_parsing() {
        assert_eq!("dual".parse::<LambdaMode>().unwrap(), LambdaMode::Dual);
        assert_eq!(
            "fixed:0.5,1".parse::<LambdaMode>().unwrap(),
            LambdaMode::Fixed(vec![0.5, 1.0])
        );
        assert!("fixed:-1".parse::<LambdaMode>().is_err());
        assert!("other".parse::<LambdaMode>().is_err());
        let m = LambdaMode::Fixed(vec![0.1, 0.2]);
        assert_eq!(m.to_string().parse::<LambdaMode>().unwrap(), m);
    }

    #[test]
    fn fixed_mode_broadcasting() {
        let kinds = [Contiguity, Overlap];
        let l = LambdaMode::Fixed(vec![0.2, 0.4]).initial(&[0, 1], &kinds).unwrap();
        assert_eq!(l.get(1, Overlap), 0.4);
        assert!(LambdaMode::Fixed(vec![1.0, 2.0, 3.0]).initial(&[0], &kinds).is_err());
    }

    #[test]
    fn period_mean_averages_batch_means() {
        let mut acc = PeriodAccumulator::default();
        acc.push_batch(viol(0.2));
        acc.push_batch(viol(0.6));
        let (mean, end) = acc.take();
        assert!((mean[&(0, Contiguity)] - 0.4).abs() < 1e-15);
        assert_eq!(end[&(0, Contiguity)], 0.6);
        assert!(acc.is_empty());
    }
}
