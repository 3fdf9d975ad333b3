//! Differentiable relaxations of Round Robin.
//!
//! [`soft_round`] relaxes a single picking round: each agent's argmax over
//! the remaining goods becomes a temperature-scaled softmax, and the set of
//! remaining goods becomes a soft mask `c` that is multiplied by `1 - y`
//! after every pick. [`soft_rr`] relaxes the whole procedure by stacking
//! `ceil(m / n)` copies of the agents, running one soft round over the
//! stack and summing each agent's copies.
//!
//! As the temperature goes to zero both converge to their exact
//! counterparts, [`one_round`] and [`crate::fairdiv::round_robin`], provided
//! no row of the profile contains ties (and, for `soft_rr`, `m` is a
//! multiple of `n`). Column sums of `soft_rr` may exceed one at finite
//! temperature; no renormalization happens here.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::fairdiv::ValuationProfile;
use crate::matrix::{argmax, Matrix};

/// A strictly positive softmax temperature.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(Error::invalid(format!("temperature must be positive, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(tau: f64) -> Result<Self> {
        Self::new(tau)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// One exact picking round: agent `i` takes its most valued good among
/// those not taken by agents `0..i` (earliest good on ties).
///
/// Requires `n <= m`.
pub fn one_round(profile: &ValuationProfile) -> Result<Matrix> {
    let (n, m) = (profile.agents(), profile.goods());
    if n > m {
        return Err(Error::invalid(format!(
            "one round needs at least as many goods as agents ({n} > {m})"
        )));
    }
    let mut taken = vec![false; m];
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let row = profile.row(i);
        let available: Vec<f64> = (0..m)
            .map(|g| if taken[g] { f64::NEG_INFINITY } else { row[g] })
            .collect();
        let g = argmax(&available);
        taken[g] = true;
        out.set(i, g, 1.0);
    }
    Ok(out)
}

/// Soft round over the rows of `values` (an `n x m` tensor).
pub fn soft_round(g: &mut Graph, values: Tensor, tau: Temperature) -> Result<Tensor> {
    let (n, m) = g.shape(values);
    let mut remaining = g.constant(Matrix::filled(1, m, 1.0));
    let ones = Matrix::filled(1, m, 1.0);
    let mut picks = Vec::with_capacity(n);
    for i in 0..n {
        let row = g.slice_rows(values, i, i + 1)?;
        let low = g.row_min(row);
        let low = g.broadcast(low, 1, m)?;
        let shifted = g.sub(row, low)?;
        let shifted = g.add_scalar(shifted, 1.0);
        let masked = g.mul(shifted, remaining)?;
        let logits = g.scale(masked, 1.0 / tau.get());
        let y = g.row_softmax(logits);
        // c <- (1 - y) * c
        let neg_y = g.scale(y, -1.0);
        let keep = g.add_const(neg_y, &ones)?;
        remaining = g.mul(keep, remaining)?;
        picks.push(y);
    }
    g.vconcat(&picks)
}

/// `k` stacked copies of `values`.
pub fn repeat_rows(g: &mut Graph, values: Tensor, k: usize) -> Result<Tensor> {
    g.repeat_rows(values, k)
}

/// Relaxed Round Robin over the rows of `values` (an `n x m` tensor).
pub fn soft_rr(g: &mut Graph, values: Tensor, tau: Temperature) -> Result<Tensor> {
    let (n, m) = g.shape(values);
    let k = m.div_ceil(n);
    let stacked = g.repeat_rows(values, k)?;
    let rounds = soft_round(g, stacked, tau)?;
    let mut total = g.slice_rows(rounds, 0, n)?;
    for block in 1..k {
        let part = g.slice_rows(rounds, block * n, (block + 1) * n)?;
        total = g.add(total, part)?;
    }
    Ok(total)
}

/// [`soft_round`] evaluated on a plain profile.
pub fn soft_round_matrix(profile: &ValuationProfile, tau: Temperature) -> Result<Matrix> {
    let mut g = Graph::new();
    let v = g.constant(profile.matrix().clone());
    let out = soft_round(&mut g, v, tau)?;
    Ok(g.value(out).clone())
}

/// [`soft_rr`] evaluated on a plain profile.
pub fn soft_rr_matrix(profile: &ValuationProfile, tau: Temperature) -> Result<Matrix> {
    let mut g = Graph::new();
    let v = g.constant(profile.matrix().clone());
    let out = soft_rr(&mut g, v, tau)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::fairdiv::round_robin;

    fn t(x: f64) -> Temperature {
        Temperature::new(x).unwrap()
    }

    fn table1() -> ValuationProfile {
        ValuationProfile::from_rows(&[
            [1.0, 0.0, 3.0, 2.0],
            [3.0, 2.0, 1.0, 0.0],
            [4.0, 3.0, 2.0, 1.0],
        ])
        .unwrap()
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
    }

    #[test]
    fn one_round_examples() {
        let r = one_round(&table1()).unwrap();
        assert_eq!(r.row_argmax(), vec![2, 0, 1]);
        assert_eq!(r.sum(), 3.0);

        let single = ValuationProfile::from_rows(&[[0.2, 0.9, 0.4]]).unwrap();
        assert_eq!(one_round(&single).unwrap().as_slice(), &[0.0, 1.0, 0.0]);

        let v = ValuationProfile::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        assert_eq!(one_round(&v).unwrap(), Matrix::identity(2));

        let tall = ValuationProfile::from_rows(&[[1.0], [2.0]]).unwrap();
        assert!(one_round(&tall).is_err());
    }

    #[test]
    fn soft_round_trivial_cases() {
        let one = ValuationProfile::from_rows(&[[1.0]]).unwrap();
        assert_eq!(soft_round_matrix(&one, t(0.3)).unwrap().as_slice(), &[1.0]);
        let tie = ValuationProfile::from_rows(&[[0.5, 0.5]]).unwrap();
        assert_eq!(soft_round_matrix(&tie, t(1.0)).unwrap().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn soft_round_table1_converges() {
        let v = table1();
        let soft = soft_round_matrix(&v, t(1e-3)).unwrap();
        assert!(soft.max_abs_diff(&one_round(&v).unwrap()) < 1e-3);
    }

    #[test]
    fn soft_round_rows_are_stochastic() {
        let v = table1();
        for tau in [10.0, 1.0, 0.1, 1e-3] {
            let r = soft_round_matrix(&v, t(tau)).unwrap();
            for s in r.row_sums().as_slice() {
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn soft_rr_small_cases() {
        let v = ValuationProfile::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let r = soft_rr_matrix(&v, t(1e-3)).unwrap();
        assert!(r.max_abs_diff(&round_robin(&v).to_matrix()) < 1e-3);
        let one = ValuationProfile::from_rows(&[[3.0]]).unwrap();
        assert_eq!(soft_rr_matrix(&one, t(0.01)).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn soft_rr_mass_is_kn() {
        let v = table1();
        let r = soft_rr_matrix(&v, t(0.5)).unwrap();
        // k = ceil(4 / 3) = 2, so 6 softmax rows
        assert!((r.sum() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn repeat_rows_examples() {
        let mut g = Graph::new();
        let x = g.constant(table1().matrix().clone());
        let same = repeat_rows(&mut g, x, 1).unwrap();
        assert_eq!(g.value(same), g.value(x));
        let twice = repeat_rows(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(twice), (6, 4));
        for i in 0..3 {
            assert_eq!(g.value(twice).row(i + 3), table1().row(i));
        }
        let r = g.constant(Matrix::row_vector(&[1.0, 2.0]));
        let three = repeat_rows(&mut g, r, 3).unwrap();
        assert_eq!(g.value(three).as_slice(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(repeat_rows(&mut g, r, 0).is_err());
    }

    #[test]
    fn soft_rr_gradient_small() {
        let v = Matrix::from_rows(&[[0.9, 0.2], [0.4, 0.7]]).unwrap();
        let err = finite_difference_check(
            |g, p| {
                let r = soft_rr(g, p[0], t(0.1))?;
                Ok(g.sum(r))
            },
            &[v],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
