use crate::error::{Error, Result};
use crate::grid::{Field, Grid};

/// Space-time data used for tracking targets and control bounds: a
/// constant, a time-independent field, or one field per time node `0..=nt`.
#[derive(Debug, Clone, PartialEq)]
pub enum Profile {
    Constant(f64),
    Field(Field),
    Series(Vec<Field>),
}

impl Default for Profile {
    fn default() -> Self {
        Profile::Constant(0.0)
    }
}

impl From<f64> for Profile {
    fn from(c: f64) -> Self {
        Profile::Constant(c)
    }
}

impl From<Field> for Profile {
    fn from(f: Field) -> Self {
        Profile::Field(f)
    }
}

impl Profile {
    /// Value in cell `i` at time node `node`.
    #[inline]
    pub fn value(&self, node: usize, i: usize) -> f64 {
        match self {
            Profile::Constant(c) => *c,
            Profile::Field(f) => f.values()[i],
            Profile::Series(s) => s[node].values()[i],
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Profile::Constant(c) => c.is_finite(),
            Profile::Field(f) => f.values().iter().all(|v| v.is_finite()),
            Profile::Series(s) => s.iter().all(|f| f.values().iter().all(|v| v.is_finite())),
        }
    }

    /// Checks the profile fits `grid` and, for series, covers nodes `0..=nt`.
    pub fn check_shape(&self, grid: &Grid, nt: usize) -> Result<()> {
        match self {
            Profile::Constant(_) => Ok(()),
            Profile::Field(f) if f.grid().as_ref() == grid => Ok(()),
            Profile::Series(s) if s.len() == nt + 1 && s.iter().all(|f| f.grid().as_ref() == grid) => Ok(()),
            _ => Err(Error::Shape("profile does not match grid or number of time nodes".into())),
        }
    }

    /// `f − self` at a node, as a fresh vector.
    pub fn deviation(&self, f: &Field, node: usize) -> Vec<f64> {
        f.values().iter().enumerate().map(|(i, &v)| v - self.value(node, i)).collect()
    }
}

impl Profile {
    /// Re-samples a series onto `nt` uniform steps by linear interpolation in
    /// time; constants and fields are returned unchanged.
    pub fn resample(&self, nt: usize) -> Profile {
        let Profile::Series(s) = self else {
            return self.clone();
        };
        let old = s.len() - 1;
        let series = (0..=nt)
            .map(|n| {
                let pos = n as f64 * old as f64 / nt as f64;
                let k = (pos.floor() as usize).min(old.saturating_sub(1));
                let w = pos - k as f64;
                if old == 0 {
                    s[0].clone()
                } else {
                    s[k].zip_map(&s[k + 1], |a, b| (1.0 - w) * a + w * b).expect("series on one grid")
                }
            })
            .collect();
        Profile::Series(series)
    }
}
