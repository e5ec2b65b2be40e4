//! Double-well potentials `F = B̂ + π̂` (convex part plus smooth concave
//! perturbation) and the proliferation function `P`.

use crate::error::{Error, Result};

/// Distance from `±1` inside which logarithmic terms refuse to evaluate.
pub const LOG_GUARD: f64 = 1e-12;

/// Default margin kept from the domain ends during Newton damping.
pub const DEFAULT_DOMAIN_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum PotentialKind {
    /// `¼(r² − 1)²`
    Regular,
    /// `(1−r)log(1−r) + (1+r)log(1+r) − k r²` on `(−1, 1)`.
    Logarithmic { k: f64 },
    Custom(CustomPotential),
}

/// Polynomial convex part and perturbation, given by coefficients in
/// increasing degree, on a declared domain.
#[derive(Debug, Clone, PartialEq)]
pub struct CustomPotential {
    pub bhat: Vec<f64>,
    pub pihat: Vec<f64>,
    pub r_minus: f64,
    pub r_plus: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    pub kind: PotentialKind,
    /// Margin kept from `(r₋, r₊)` by the Newton damping.
    pub domain_margin: f64,
}

/// Values of the split at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub bhat: f64,
    pub b: f64,
    pub pi: f64,
    pub dpi: f64,
}

impl Potential {
    pub fn regular() -> Self {
        Potential {
            kind: PotentialKind::Regular,
            domain_margin: DEFAULT_DOMAIN_MARGIN,
        }
    }

    pub fn logarithmic(k: f64) -> Self {
        Potential {
            kind: PotentialKind::Logarithmic { k },
            domain_margin: DEFAULT_DOMAIN_MARGIN,
        }
    }

    /// Builds a custom polynomial potential and runs its load-time self test.
    pub fn custom(spec: CustomPotential) -> Result<Self> {
        let pot = Potential {
            kind: PotentialKind::Custom(spec),
            domain_margin: DEFAULT_DOMAIN_MARGIN,
        };
        pot.self_test()?;
        Ok(pot)
    }

    pub fn r_minus(&self) -> f64 {
        match &self.kind {
            PotentialKind::Regular => f64::NEG_INFINITY,
            PotentialKind::Logarithmic { .. } => -1.0,
            PotentialKind::Custom(c) => c.r_minus,
        }
    }

    pub fn r_plus(&self) -> f64 {
        match &self.kind {
            PotentialKind::Regular => f64::INFINITY,
            PotentialKind::Logarithmic { .. } => 1.0,
            PotentialKind::Custom(c) => c.r_plus,
        }
    }

    /// Signed distance of `r` to the nearer domain end (infinite for unbounded domains).
    pub fn margin(&self, r: f64) -> f64 {
        (r - self.r_minus()).min(self.r_plus() - r)
    }

    /// Whether a Newton trial value stays within the damped region.
    pub fn admissible(&self, r: f64) -> bool {
        r.is_finite() && self.margin(r) > self.domain_margin
    }

    fn check_domain(&self, r: f64) -> Result<()> {
        if !r.is_finite() {
            return Err(Error::DomainViolation { r, bound: f64::NAN });
        }
        match &self.kind {
            PotentialKind::Regular => Ok(()),
            PotentialKind::Logarithmic { .. } => {
                if r.abs() < 1.0 - LOG_GUARD {
                    Ok(())
                } else {
                    Err(Error::DomainViolation { r, bound: r.signum() })
                }
            }
            PotentialKind::Custom(c) => {
                if r <= c.r_minus {
                    Err(Error::DomainViolation { r, bound: c.r_minus })
                } else if r >= c.r_plus {
                    Err(Error::DomainViolation { r, bound: c.r_plus })
                } else {
                    Ok(())
                }
            }
        }
    }

    /// `F⁽ᵐ⁾(r)` for `m ∈ 0..=3`.
    pub fn eval(&self, r: f64, order: u8) -> Result<f64> {
        self.check_domain(r)?;
        Ok(match &self.kind {
            PotentialKind::Regular => match order {
                0 => 0.25 * (r * r - 1.0).powi(2),
                1 => r * r * r - r,
                2 => 3.0 * r * r - 1.0,
                3 => 6.0 * r,
                _ => return Err(bad_order(order)),
            },
            PotentialKind::Logarithmic { k } => {
                let (a, b) = (1.0 - r, 1.0 + r);
                match order {
                    0 => a * a.ln() + b * b.ln() - k * r * r,
                    1 => (b / a).ln() - 2.0 * k * r,
                    2 => 2.0 / (a * b) - 2.0 * k,
                    3 => 4.0 * r / (a * b).powi(2),
                    _ => return Err(bad_order(order)),
                }
            }
            PotentialKind::Custom(c) => {
                if order > 3 {
                    return Err(bad_order(order));
                }
                poly_deriv(&c.bhat, r, order) + poly_deriv(&c.pihat, r, order)
            }
        })
    }

    /// `F'(r)`; hot path of the Newton residual.
    pub fn f1(&self, r: f64) -> Result<f64> {
        self.eval(r, 1)
    }

    pub fn f2(&self, r: f64) -> Result<f64> {
        self.eval(r, 2)
    }

    /// The split `(B̂(r), B(r), π(r), π'(r))`.
    pub fn split(&self, r: f64) -> Result<Split> {
        self.check_domain(r)?;
        Ok(match &self.kind {
            PotentialKind::Regular => Split {
                bhat: 0.25 * r.powi(4),
                b: r * r * r,
                pi: -r,
                dpi: -1.0,
            },
            PotentialKind::Logarithmic { k } => {
                let (a, b) = (1.0 - r, 1.0 + r);
                Split {
                    bhat: a * a.ln() + b * b.ln(),
                    b: (b / a).ln(),
                    pi: -2.0 * k * r,
                    dpi: -2.0 * k,
                }
            }
            PotentialKind::Custom(c) => Split {
                bhat: poly_deriv(&c.bhat, r, 0),
                b: poly_deriv(&c.bhat, r, 1),
                pi: poly_deriv(&c.pihat, r, 1),
                dpi: poly_deriv(&c.pihat, r, 2),
            },
        })
    }

    /// Consistency checks a custom potential has to pass before use:
    /// `r₋ < 0 < r₊`, `B̂(0) = B(0) = 0`, monotone `B`, and finite-difference
    /// agreement of consecutive derivative orders.
    pub fn self_test(&self) -> Result<()> {
        let (lo, hi) = (self.r_minus(), self.r_plus());
        if !(lo < 0.0 && 0.0 < hi) {
            return Err(Error::config("potential", format!("domain ({lo}, {hi}) must contain 0")));
        }
        let s0 = self.split(0.0)?;
        if s0.bhat.abs() > 1e-14 || s0.b.abs() > 1e-14 {
            return Err(Error::config("potential", "convex part must satisfy B̂(0) = B(0) = 0"));
        }
        let a = if lo.is_finite() { 0.9 * lo } else { -2.0 };
        let b = if hi.is_finite() { 0.9 * hi } else { 2.0 };
        let samples: Vec<f64> = (0..=40).map(|i| a + (b - a) * i as f64 / 40.0).collect();
        let mut prev_b = f64::NEG_INFINITY;
        for &r in &samples {
            let s = self.split(r)?;
            if s.b < prev_b - 1e-12 {
                return Err(Error::config("potential", format!("B is not monotone near r = {r}")));
            }
            prev_b = s.b;
        }
        let eps = 1e-5;
        for &r in &samples[1..samples.len() - 1] {
            for order in 0..3u8 {
                let fd = (self.eval(r + eps, order)? - self.eval(r - eps, order)?) / (2.0 * eps);
                let exact = self.eval(r, order + 1)?;
                if (fd - exact).abs() > 1e-5 * (1.0 + exact.abs()) {
                    return Err(Error::config(
                        "potential",
                        format!("derivative of order {} inconsistent at r = {r}", order + 1),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn bad_order(order: u8) -> Error {
    Error::Unsupported(format!("derivative order {order} not available"))
}

/// m-th derivative of `Σ c_j r^j`.
fn poly_deriv(coeffs: &[f64], r: f64, m: u8) -> f64 {
    let m = m as usize;
    // Horner on the differentiated coefficients
    coeffs.iter().enumerate().skip(m).rev().fold(0.0, |acc, (j, &c)| {
        let falling: f64 = (0..m).map(|i| (j - i) as f64).product();
        acc * r + c * falling
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Proliferation {
    Constant { p0: f64 },
    /// `P₀ / (1 + exp(−s r))`
    Sigmoid { p0: f64, steepness: f64 },
}

impl Default for Proliferation {
    fn default() -> Self {
        Proliferation::Sigmoid { p0: 1.0, steepness: 2.0 }
    }
}

impl Proliferation {
    pub fn amplitude(&self) -> f64 {
        match *self {
            Proliferation::Constant { p0 } | Proliferation::Sigmoid { p0, .. } => p0,
        }
    }

    /// `P⁽ᵐ⁾(r)` for `m ∈ 0..=2`.
    pub fn eval(&self, r: f64, order: u8) -> f64 {
        match *self {
            Proliferation::Constant { p0 } => {
                if order == 0 {
                    p0
                } else {
                    0.0
                }
            }
            Proliferation::Sigmoid { p0, steepness: s } => {
                // numerically stable logistic
                let g = if r >= 0.0 {
                    1.0 / (1.0 + (-s * r).exp())
                } else {
                    let e = (s * r).exp();
                    e / (1.0 + e)
                };
                match order {
                    0 => p0 * g,
                    1 => p0 * s * g * (1.0 - g),
                    2 => p0 * s * s * g * (1.0 - g) * (1.0 - 2.0 * g),
                    _ => panic!("proliferation derivative order {order} not available"),
                }
            }
        }
    }
}
