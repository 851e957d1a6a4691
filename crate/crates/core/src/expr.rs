//! Closed vocabulary of analytic scalar fields `f(t, x)`.
//!
//! Everything except `checker` has an exact symbolic derivative, which is
//! what the divergence oracles and the `add_div_b` option rely on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Expr {
    Const {
        value: f64,
    },
    /// The coordinate `x_axis`.
    X {
        axis: usize,
    },
    T,
    /// `(1 - ((x_axis - center) / radius)^2)_+ ^ power`
    Bump {
        axis: usize,
        center: f64,
        radius: f64,
        power: u32,
    },
    /// `cos(freq * x_axis + phase)`
    Cos {
        axis: usize,
        freq: f64,
        phase: f64,
    },
    /// Normalized Gaussian density with the given center and variance.
    Gaussian {
        center: Vec<f64>,
        variance: f64,
    },
    /// `low` or `high` on alternating cubes of side `period`.
    Checker {
        period: f64,
        low: f64,
        high: f64,
    },
    Sum {
        terms: Vec<Expr>,
    },
    Product {
        factors: Vec<Expr>,
    },
}

/// Differentiation variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    X(usize),
    T,
}

impl Expr {
    pub fn constant(value: f64) -> Self {
        Expr::Const { value }
    }

    pub fn zero() -> Self {
        Expr::constant(0.0)
    }

    pub fn x(axis: usize) -> Self {
        Expr::X { axis }
    }

    pub fn sum(terms: Vec<Expr>) -> Self {
        Expr::Sum { terms }
    }

    pub fn product(factors: Vec<Expr>) -> Self {
        Expr::Product { factors }
    }

    pub fn scaled(self, k: f64) -> Self {
        Expr::product(vec![Expr::constant(k), self])
    }

    pub fn bump(axis: usize, center: f64, radius: f64, power: u32) -> Self {
        Expr::Bump {
            axis,
            center,
            radius,
            power,
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            Expr::Const { value } => *value,
            Expr::X { axis } => x.get(*axis).copied().unwrap_or(0.0),
            Expr::T => t,
            Expr::Bump {
                axis,
                center,
                radius,
                power,
            } => {
                let z = (x.get(*axis).copied().unwrap_or(0.0) - center) / radius;
                let base = 1.0 - z * z;
                if base <= 0.0 {
                    0.0
                } else {
                    base.powi(*power as i32)
                }
            }
            Expr::Cos { axis, freq, phase } => {
                (freq * x.get(*axis).copied().unwrap_or(0.0) + phase).cos()
            }
            Expr::Gaussian { center, variance } => {
                let d2: f64 = center
                    .iter()
                    .enumerate()
                    .map(|(a, c)| {
                        let v = x.get(a).copied().unwrap_or(0.0) - c;
                        v * v
                    })
                    .sum();
                let n = center.len() as i32;
                (-d2 / (2.0 * variance)).exp()
                    / (2.0 * std::f64::consts::PI * variance).powf(n as f64 / 2.0)
            }
            Expr::Checker { period, low, high } => {
                let parity: i64 = x.iter().map(|v| (v / period).floor() as i64).sum();
                if parity.rem_euclid(2) == 0 {
                    *low
                } else {
                    *high
                }
            }
            Expr::Sum { terms } => terms.iter().map(|e| e.eval(t, x)).sum(),
            Expr::Product { factors } => factors.iter().map(|e| e.eval(t, x)).product(),
        }
    }

    pub fn depends_on_time(&self) -> bool {
        match self {
            Expr::T => true,
            Expr::Sum { terms } => terms.iter().any(Expr::depends_on_time),
            Expr::Product { factors } => factors.iter().any(Expr::depends_on_time),
            _ => false,
        }
    }

    /// Largest spatial axis referenced, if any.
    pub fn max_axis(&self) -> Option<usize> {
        match self {
            Expr::X { axis } | Expr::Bump { axis, .. } | Expr::Cos { axis, .. } => Some(*axis),
            Expr::Gaussian { center, .. } => center.len().checked_sub(1),
            Expr::Sum { terms: list } | Expr::Product { factors: list } => {
                list.iter().filter_map(Expr::max_axis).max()
            }
            _ => None,
        }
    }

    /// Validates parameters that would make evaluation meaningless.
    pub fn validate(&self) -> Result<()> {
        match self {
            Expr::Const { value } if !value.is_finite() => {
                Err(Error::InvalidParameter(format!("constant {value} is not finite")))
            }
            Expr::Bump { radius, .. } if !(*radius > 0.0) => {
                Err(Error::InvalidParameter(format!("bump radius {radius} must be positive")))
            }
            Expr::Gaussian { variance, center } if !(*variance > 0.0) || center.is_empty() => Err(
                Error::InvalidParameter(format!("gaussian variance {variance} must be positive")),
            ),
            Expr::Checker { period, .. } if !(*period > 0.0) => {
                Err(Error::InvalidParameter(format!("checker period {period} must be positive")))
            }
            Expr::Sum { terms: list } | Expr::Product { factors: list } => {
                list.iter().try_for_each(Expr::validate)
            }
            _ => Ok(()),
        }
    }

    pub fn derivative(&self, var: Var) -> Result<Expr> {
        let d = match self {
            Expr::Const { .. } => Expr::zero(),
            Expr::X { axis } => Expr::constant(if var == Var::X(*axis) { 1.0 } else { 0.0 }),
            Expr::T => Expr::constant(if var == Var::T { 1.0 } else { 0.0 }),
            Expr::Bump {
                axis,
                center,
                radius,
                power,
            } => {
                if var != Var::X(*axis) {
                    return Ok(Expr::zero());
                }
                if *power == 0 {
                    return Err(Error::NotDifferentiable(
                        "bump with power 0 is an indicator".into(),
                    ));
                }
                // d/dx (1 - z^2)^p = -2p z / r (1 - z^2)^(p-1), z = (x - c)/r
                let k = -2.0 * *power as f64 / (radius * radius);
                Expr::product(vec![
                    Expr::constant(k),
                    Expr::sum(vec![Expr::x(*axis), Expr::constant(-center)]),
                    Expr::bump(*axis, *center, *radius, power - 1),
                ])
            }
            Expr::Cos { axis, freq, phase } => {
                if var != Var::X(*axis) {
                    return Ok(Expr::zero());
                }
                Expr::product(vec![
                    Expr::constant(-freq),
                    Expr::Cos {
                        axis: *axis,
                        freq: *freq,
                        phase: phase - std::f64::consts::FRAC_PI_2,
                    },
                ])
            }
            Expr::Gaussian { center, variance } => match var {
                Var::T => Expr::zero(),
                Var::X(a) if a >= center.len() => Expr::zero(),
                Var::X(a) => Expr::product(vec![
                    Expr::constant(-1.0 / variance),
                    Expr::sum(vec![Expr::x(a), Expr::constant(-center[a])]),
                    self.clone(),
                ]),
            },
            Expr::Checker { .. } => {
                return Err(Error::NotDifferentiable("checker field has jumps".into()))
            }
            Expr::Sum { terms } => Expr::sum(
                terms
                    .iter()
                    .map(|e| e.derivative(var))
                    .collect::<Result<Vec<_>>>()?,
            ),
            Expr::Product { factors } => {
                let mut terms = Vec::with_capacity(factors.len());
                for i in 0..factors.len() {
                    let di = factors[i].derivative(var)?;
                    if di.is_zero() {
                        continue;
                    }
                    let mut f = factors.clone();
                    f[i] = di;
                    terms.push(Expr::product(f));
                }
                Expr::sum(terms)
            }
        };
        Ok(d.simplify())
    }

    fn is_zero(&self) -> bool {
        match self {
            Expr::Const { value } => *value == 0.0,
            Expr::Sum { terms } => terms.iter().all(Expr::is_zero),
            Expr::Product { factors } => factors.iter().any(Expr::is_zero),
            _ => false,
        }
    }

    /// Drops zero terms and collapses trivial sums and products.
    pub fn simplify(self) -> Expr {
        match self {
            Expr::Sum { terms } => {
                let mut kept: Vec<Expr> = terms
                    .into_iter()
                    .map(Expr::simplify)
                    .filter(|e| !e.is_zero())
                    .collect();
                match kept.len() {
                    0 => Expr::zero(),
                    1 => kept.pop().unwrap(),
                    _ => Expr::sum(kept),
                }
            }
            Expr::Product { factors } => {
                let factors: Vec<Expr> = factors.into_iter().map(Expr::simplify).collect();
                if factors.iter().any(Expr::is_zero) {
                    return Expr::zero();
                }
                let mut kept: Vec<Expr> = factors
                    .into_iter()
                    .filter(|e| !matches!(e, Expr::Const { value } if *value == 1.0))
                    .collect();
                match kept.len() {
                    0 => Expr::constant(1.0),
                    1 => kept.pop().unwrap(),
                    _ => Expr::product(kept),
                }
            }
            other => other,
        }
    }

    /// The field `(t, x) -> f(r^2 t, r x)`.
    pub fn rescale(&self, r: f64) -> Expr {
        match self {
            Expr::Const { .. } => self.clone(),
            Expr::X { .. } => self.clone().scaled(r),
            Expr::T => Expr::T.scaled(r * r),
            Expr::Bump {
                axis,
                center,
                radius,
                power,
            } => Expr::bump(*axis, center / r, radius / r, *power),
            Expr::Cos { axis, freq, phase } => Expr::Cos {
                axis: *axis,
                freq: freq * r,
                phase: *phase,
            },
            Expr::Gaussian { center, variance } => {
                let n = center.len() as i32;
                Expr::Gaussian {
                    center: center.iter().map(|c| c / r).collect(),
                    variance: variance / (r * r),
                }
                .scaled(r.powi(-n))
            }
            Expr::Checker { period, low, high } => Expr::Checker {
                period: period / r,
                low: *low,
                high: *high,
            },
            Expr::Sum { terms } => Expr::sum(terms.iter().map(|e| e.rescale(r)).collect()),
            Expr::Product { factors } => {
                Expr::product(factors.iter().map(|e| e.rescale(r)).collect())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn corpus() -> Vec<Expr> {
        vec![
            Expr::x(0),
            Expr::product(vec![Expr::x(0), Expr::x(1), Expr::T]),
            Expr::bump(0, 0.2, 0.9, 3),
            Expr::Cos {
                axis: 1,
                freq: 2.5,
                phase: 0.3,
            },
            Expr::Gaussian {
                center: vec![0.1, -0.2],
                variance: 0.3,
            },
            Expr::product(vec![
                Expr::bump(0, 0.0, 1.0, 2),
                Expr::bump(1, 0.1, 0.8, 2),
                Expr::sum(vec![Expr::x(0), Expr::constant(0.5)]),
            ]),
        ]
    }

    #[test]
    fn bump_shape() {
        let b = Expr::bump(0, 0.0, 2.0, 2);
        assert_eq!(b.eval(0.0, &[0.0]), 1.0);
        assert_eq!(b.eval(0.0, &[1.0]), 0.5625);
        assert_eq!(b.eval(0.0, &[2.5]), 0.0);
    }

    #[test]
    fn checker_alternates_and_has_no_derivative() {
        let c = Expr::Checker {
            period: 0.5,
            low: 1.0,
            high: 3.0,
        };
        assert_eq!(c.eval(0.0, &[0.1, 0.1]), 1.0);
        assert_eq!(c.eval(0.0, &[0.6, 0.1]), 3.0);
        assert_eq!(c.eval(0.0, &[0.6, 0.6]), 1.0);
        assert!(matches!(c.derivative(Var::X(0)), Err(Error::NotDifferentiable(_))));
    }

    #[test]
    fn gaussian_is_normalized_in_one_dimension() {
        let g = Expr::Gaussian {
            center: vec![0.0],
            variance: 0.1,
        };
        let h = 1e-3;
        let mass: f64 = (-4000..=4000).map(|i| g.eval(0.0, &[i as f64 * h]) * h).sum();
        assert_relative_eq!(mass, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn time_dependence_is_detected() {
        assert!(!Expr::x(0).depends_on_time());
        assert!(Expr::product(vec![Expr::x(0), Expr::T]).depends_on_time());
    }

    proptest! {
        #[test]
        fn symbolic_derivative_matches_central_difference(
            idx in 0usize..6, axis in 0usize..2,
            x0 in -0.6f64..0.6, x1 in -0.6f64..0.6, t in 0.0f64..1.0,
        ) {
            let e = &corpus()[idx];
            let d = e.derivative(Var::X(axis)).unwrap();
            let h = 1e-6;
            let mut xp = [x0, x1];
            let mut xm = [x0, x1];
            xp[axis] += h;
            xm[axis] -= h;
            let fd = (e.eval(t, &xp) - e.eval(t, &xm)) / (2.0 * h);
            prop_assert!((d.eval(t, &[x0, x1]) - fd).abs() <= 1e-5 * (1.0 + fd.abs()));
        }

        #[test]
        fn rescale_is_composition(
            idx in 0usize..6, r in 0.3f64..3.0,
            x0 in -0.3f64..0.3, x1 in -0.3f64..0.3, t in 0.0f64..1.0,
        ) {
            let e = &corpus()[idx];
            let lhs = e.rescale(r).eval(t, &[x0, x1]);
            let rhs = e.eval(r * r * t, &[r * x0, r * x1]);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }
}
