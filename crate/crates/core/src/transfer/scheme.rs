use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered candidate learning rates. Index 0 is always rate 0 (frozen).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LrZoo {
    rates: Vec<f64>,
}

impl LrZoo {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.len() < 2 {
            return Err(Error::InvalidZoo("needs at least two rates".into()));
        }
        if rates[0] != 0.0 || rates[0].is_sign_negative() {
            return Err(Error::InvalidZoo(format!(
                "first rate must be 0, got {}",
                rates[0]
            )));
        }
        if let Some(w) = rates
            .windows(2)
            .find(|w| !(w[1] > w[0] && w[1].is_finite()))
        {
            return Err(Error::InvalidZoo(format!(
                "rates must be finite and strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { rates })
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Number of choices per layer (m).
    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn rate(&self, index: usize) -> Option<f64> {
        self.rates.get(index).copied()
    }

    pub fn index_of(&self, rate: f64) -> Option<usize> {
        self.rates.iter().position(|&r| r == rate)
    }

    /// Index used for "uniform fine-tuning" baselines: exactly 0.01 when
    /// present, otherwise the smallest non-zero rate.
    pub fn uniform_index(&self) -> usize {
        self.index_of(0.01).unwrap_or(1)
    }
}

impl Default for LrZoo {
    fn default() -> Self {
        Self::new(vec![0.0, 0.01, 0.1, 1.0]).expect("default zoo is valid")
    }
}

impl TryFrom<Vec<f64>> for LrZoo {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LrZoo> for Vec<f64> {
    fn from(z: LrZoo) -> Self {
        z.rates
    }
}

/// One zoo index per parameterized backbone layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SchemeVector(Vec<usize>);

impl SchemeVector {
    pub fn new(entries: Vec<usize>) -> Self {
        Self(entries)
    }

    /// Every layer at the same zoo index.
    pub fn uniform(len: usize, index: usize) -> Self {
        Self(vec![index; len])
    }

    /// All layers frozen.
    pub fn frozen(len: usize) -> Self {
        Self::uniform(len, 0)
    }

    /// Only the last layer fine-tuned, at `index`.
    pub fn last_layer(len: usize, index: usize) -> Self {
        let mut v = vec![0; len];
        if let Some(last) = v.last_mut() {
            *last = index;
        }
        Self(v)
    }

    pub fn entries(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn nonzero_count(&self) -> usize {
        self.0.iter().filter(|&&e| e != 0).count()
    }

    pub fn validate(&self, len: usize, zoo: &LrZoo) -> Result<()> {
        if self.len() != len {
            return Err(Error::InvalidScheme(format!(
                "scheme has {} entries, network has {len} parameterized layers",
                self.len()
            )));
        }
        if let Some((i, &e)) = self.0.iter().enumerate().find(|(_, &e)| e >= zoo.len()) {
            return Err(Error::InvalidScheme(format!(
                "entry {i} = {e} is outside the zoo of {} rates",
                zoo.len()
            )));
        }
        Ok(())
    }

    pub fn rates(&self, zoo: &LrZoo) -> Result<Vec<f64>> {
        self.0
            .iter()
            .enumerate()
            .map(|(i, &e)| {
                zoo.rate(e).ok_or_else(|| {
                    Error::InvalidScheme(format!(
                        "entry {i} = {e} is outside the zoo of {} rates",
                        zoo.len()
                    ))
                })
            })
            .collect()
    }
}

impl fmt::Display for SchemeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|e| e.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

impl FromStr for SchemeVector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let inner = s
            .trim()
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| Error::InvalidScheme(format!("expected [a,b,...], got {s:?}")))?;
        if inner.trim().is_empty() {
            return Ok(Self(Vec::new()));
        }
        inner
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::InvalidScheme(format!("bad entry {p:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}
