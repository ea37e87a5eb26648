//! Gradients of scene objectives and their finite-difference verification.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::body_model::{Coordinate, ParamBlock, PersonState};
use crate::losses::SceneObjective;
use crate::{Error, Result};

/// Central-difference step in parameter units.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance for objectives composed with the body model.
pub const COMPOSED_REL_TOL: f64 = 1e-4;
/// Relative tolerance for standalone losses.
pub const STANDALONE_REL_TOL: f64 = 1e-6;
/// Denominator floor of the relative error, per unit of objective value.
/// Central differences at `FD_STEP` carry roundoff near `eps |f| / h` and
/// truncation near `h^2`; smaller components cannot be compared relatively.
pub const ABS_FLOOR: f64 = 1e-5;

/// A scalar function of all persons' states.
pub trait Objective {
    fn value(&self, states: &[PersonState]) -> Result<f64>;
    fn value_and_gradient(&self, states: &[PersonState]) -> Result<(f64, Vec<PersonState>)>;
}

impl Objective for SceneObjective<'_> {
    fn value(&self, states: &[PersonState]) -> Result<f64> {
        Ok(self.evaluate(states, false)?.0.total)
    }

    fn value_and_gradient(&self, states: &[PersonState]) -> Result<(f64, Vec<PersonState>)> {
        let (b, g) = self.evaluate(states, true)?;
        Ok((b.total, g.unwrap_or_default()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub value: f64,
    /// One gradient per person, laid out like the parameter blocks.
    pub gradients: Vec<PersonState>,
    /// Largest relative discrepancy to central differences (0 when unchecked).
    pub max_fd_discrepancy: f64,
    pub worst: Option<Coordinate>,
    /// Number of objective evaluations.
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdCheck {
    pub passed: bool,
    pub rel_tol: f64,
    pub h: f64,
    pub report: GradientReport,
}

fn coordinates(states: &[PersonState]) -> impl Iterator<Item = Coordinate> + '_ {
    states.iter().enumerate().flat_map(|(person, s)| {
        ParamBlock::ALL.into_iter().flat_map(move |block| {
            (0..s.block_len(block)).map(move |index| Coordinate {
                person,
                block,
                index,
            })
        })
    })
}

pub fn gradient<O: Objective + ?Sized>(
    objective: &O,
    states: &[PersonState],
) -> Result<GradientReport> {
    let (value, gradients) = objective.value_and_gradient(states)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: format!("objective value {value}"),
        });
    }
    if gradients.len() != states.len() {
        return Err(Error::Dimension {
            what: "gradient persons",
            expected: states.len(),
            got: gradients.len(),
        });
    }
    for c in coordinates(states) {
        let g = gradients[c.person].get(c.block, c.index);
        if !g.is_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient at {c:?}"),
            });
        }
    }
    Ok(GradientReport {
        value,
        gradients,
        max_fd_discrepancy: 0.0,
        worst: None,
        evaluations: 1,
    })
}

/// `|g - fd| / max(|g|, |fd|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares [`gradient`] with central differences on every coordinate.
pub fn fd_check<O: Objective + ?Sized>(
    objective: &O,
    states: &[PersonState],
    h: f64,
    rel_tol: f64,
) -> Result<FdCheck> {
    if !(h > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut report = gradient(objective, states)?;
    let floor = ABS_FLOOR * report.value.abs().max(1.0);
    let mut work = states.to_vec();
    let mut worst_err = 0.0;
    for c in coordinates(states) {
        let x = states[c.person].get(c.block, c.index);
        work[c.person].set(c.block, c.index, x + h);
        let fp = objective.value(&work)?;
        work[c.person].set(c.block, c.index, x - h);
        let fm = objective.value(&work)?;
        work[c.person].set(c.block, c.index, x);
        report.evaluations += 2;
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(
            report.gradients[c.person].get(c.block, c.index),
            numeric,
            floor,
        );
        // NaN compares false; treat it as the worst possible
        if !(err <= worst_err) {
            worst_err = if err.is_nan() { f64::INFINITY } else { err };
            report.worst = Some(c);
        }
    }
    report.max_fd_discrepancy = worst_err;
    Ok(FdCheck {
        passed: worst_err <= rel_tol,
        rel_tol,
        h,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::{BodyConfig, BodyModel};
    use alloc::vec;

    fn config() -> BodyConfig {
        *BodyModel::default_humanoid().config()
    }

    struct Constant;
    impl Objective for Constant {
        fn value(&self, _: &[PersonState]) -> Result<f64> {
            Ok(4.2)
        }
        fn value_and_gradient(&self, s: &[PersonState]) -> Result<(f64, Vec<PersonState>)> {
            Ok((4.2, s.iter().map(|p| p.zeros_like()).collect()))
        }
    }

    /// Weighted sum of squares over all coordinates, optionally with a
    /// corrupted gradient entry.
    struct Quadratic {
        corrupt: Option<Coordinate>,
    }
    impl Objective for Quadratic {
        fn value(&self, s: &[PersonState]) -> Result<f64> {
            Ok(coordinates(s)
                .enumerate()
                .map(|(k, c)| (1.0 + k as f64 * 0.01) * s[c.person].get(c.block, c.index).powi(2))
                .sum())
        }
        fn value_and_gradient(&self, s: &[PersonState]) -> Result<(f64, Vec<PersonState>)> {
            let mut g: Vec<PersonState> = s.iter().map(|p| p.zeros_like()).collect();
            for (k, c) in coordinates(s).enumerate() {
                g[c.person].set(
                    c.block,
                    c.index,
                    2.0 * (1.0 + k as f64 * 0.01) * s[c.person].get(c.block, c.index),
                );
            }
            if let Some(c) = self.corrupt {
                let v = g[c.person].get(c.block, c.index);
                g[c.person].set(c.block, c.index, v + 1.0);
            }
            Ok((self.value(s)?, g))
        }
    }

    struct TauNorm;
    impl Objective for TauNorm {
        fn value(&self, s: &[PersonState]) -> Result<f64> {
            Ok(s.iter()
                .map(|p| p.tau.iter().map(|t| t * t).sum::<f64>())
                .sum())
        }
        fn value_and_gradient(&self, s: &[PersonState]) -> Result<(f64, Vec<PersonState>)> {
            let g = s
                .iter()
                .map(|p| {
                    let mut z = p.zeros_like();
                    z.tau = [2.0 * p.tau[0], 2.0 * p.tau[1], 2.0 * p.tau[2]];
                    z
                })
                .collect();
            Ok((self.value(s)?, g))
        }
    }

    fn states() -> Vec<PersonState> {
        let c = config();
        let mut a = PersonState::neutral(&c);
        a.tau = [0.3, -0.7, 4.0];
        a.theta[3] = [0.1, 0.2, -0.3];
        let mut b = PersonState::neutral(&c);
        b.beta[1] = 0.9;
        b.phi = [0.5, 0.0, 0.1];
        vec![a, b]
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let r = gradient(&Constant, &states()).unwrap();
        assert!(r.gradients.iter().all(|g| g.coords().all(|x| x == 0.0)));
    }

    #[test]
    fn tau_norm_gradient_is_exact() {
        let s = states();
        let r = gradient(&TauNorm, &s).unwrap();
        for (g, p) in r.gradients.iter().zip(&s) {
            assert_eq!(g.tau, [2.0 * p.tau[0], 2.0 * p.tau[1], 2.0 * p.tau[2]]);
        }
    }

    #[test]
    fn quadratic_passes_tight_tolerance() {
        // sparse state so round-off in the summed value stays below 1e-10
        let mut s: Vec<PersonState> = states().iter().map(|p| p.zeros_like()).collect();
        s[0].tau = [0.25, -0.5, 0.75];
        s[1].theta[4] = [0.5, 0.0, -0.25];
        let c = fd_check(&Quadratic { corrupt: None }, &s, FD_STEP, 1e-10).unwrap();
        assert!(c.passed, "{}", c.report.max_fd_discrepancy);
        assert_eq!(c.report.evaluations, 1 + 2 * coordinates(&s).count());
    }

    #[test]
    fn corrupted_gradient_is_located() {
        let bad = Coordinate {
            person: 1,
            block: ParamBlock::Theta,
            index: 7,
        };
        let c = fd_check(&Quadratic { corrupt: Some(bad) }, &states(), FD_STEP, 1e-4).unwrap();
        assert!(!c.passed);
        assert_eq!(c.report.worst, Some(bad));
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(fd_check(&TauNorm, &states(), 0.0, 1e-4).is_err());
    }
}
