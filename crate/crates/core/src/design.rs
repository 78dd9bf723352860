use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A two-arm treatment assignment: one ±1 entry per node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<i8>", into = "Vec<i8>")]
pub struct Design(Vec<i8>);

impl Design {
    pub fn new(x: Vec<i8>) -> Result<Self> {
        if let Some(pos) = x.iter().position(|&v| v != 1 && v != -1) {
            return Err(Error::invalid(format!(
                "design entry {pos} is {}, expected +1 or -1",
                x[pos]
            )));
        }
        Ok(Design(x))
    }

    /// All nodes in the +1 arm.
    pub fn ones(n: usize) -> Self {
        Design(vec![1; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.0.iter().map(|&v| f64::from(v)))
    }

    /// Σ x_i.
    pub fn imbalance(&self) -> i64 {
        self.0.iter().map(|&v| i64::from(v)).sum()
    }

    /// |Σ x_i| ≤ 1.
    pub fn is_balanced(&self) -> bool {
        self.imbalance().abs() <= 1
    }

    pub fn negated(&self) -> Design {
        Design(self.0.iter().map(|&v| -v).collect())
    }

    /// Representative of {x, -x} whose first entry is +1.
    pub fn canonical(&self) -> Design {
        match self.0.first() {
            Some(-1) => self.negated(),
            _ => self.clone(),
        }
    }

    pub(crate) fn from_raw(x: Vec<i8>) -> Self {
        debug_assert!(x.iter().all(|&v| v == 1 || v == -1));
        Design(x)
    }
}

impl TryFrom<Vec<i8>> for Design {
    type Error = Error;

    fn try_from(x: Vec<i8>) -> Result<Self> {
        Design::new(x)
    }
}

impl From<Design> for Vec<i8> {
    fn from(d: Design) -> Self {
        d.0
    }
}

impl std::fmt::Display for Design {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(" "))
    }
}

impl std::str::FromStr for Design {
    type Err = Error;

    /// Parse whitespace- or comma-separated ±1 entries.
    fn from_str(s: &str) -> Result<Self> {
        let x = s
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.trim_start_matches('+')
                    .parse::<i8>()
                    .map_err(|_| Error::invalid(format!("invalid design entry {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Design::new(x)
    }
}
