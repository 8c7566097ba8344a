//! Convex losses on the scalar network output.

use ndarray::{Array1, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Loss `L(f, y)` summed over samples.
///
/// `Squared` is `1/2 |f - y|^2`, `L2Norm` is `|f - y|` (1-Lipschitz),
/// `Logistic` and `Hinge` expect labels in `{-1, +1}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    Squared,
    L2Norm,
    Logistic,
    Hinge,
}

impl Loss {
    pub fn name(self) -> &'static str {
        match self {
            Loss::Squared => "squared",
            Loss::L2Norm => "l2_norm",
            Loss::Logistic => "logistic",
            Loss::Hinge => "hinge",
        }
    }

    pub fn value<T: Scalar>(self, f: ArrayView1<T>, y: ArrayView1<T>) -> T {
        let half = T::of(0.5);
        match self {
            Loss::Squared => Zip::from(f).and(y).fold(T::zero(), |a, &p, &t| a + half * (p - t) * (p - t)),
            Loss::L2Norm => Zip::from(f)
                .and(y)
                .fold(T::zero(), |a, &p, &t| a + (p - t) * (p - t))
                .sqrt(),
            Loss::Logistic => Zip::from(f).and(y).fold(T::zero(), |a, &p, &t| a + softplus(-t * p)),
            Loss::Hinge => Zip::from(f).and(y).fold(T::zero(), |a, &p, &t| {
                let m = T::one() - t * p;
                a + if m > T::zero() { m } else { T::zero() }
            }),
        }
    }

    /// Gradient in `f` (a subgradient for the nonsmooth cases: zero at the
    /// hinge kink and at `f = y` for `L2Norm`).
    pub fn gradient<T: Scalar>(self, f: ArrayView1<T>, y: ArrayView1<T>) -> Array1<T> {
        match self {
            Loss::Squared => &f - &y,
            Loss::L2Norm => {
                let r = &f - &y;
                let n = r.dot(&r).sqrt();
                if n > T::zero() {
                    r / n
                } else {
                    r
                }
            }
            Loss::Logistic => Zip::from(f).and(y).map_collect(|&p, &t| -t * sigmoid(-t * p)),
            Loss::Hinge => Zip::from(f)
                .and(y)
                .map_collect(|&p, &t| if T::one() - t * p > T::zero() { -t } else { T::zero() }),
        }
    }

    pub fn is_smooth(self) -> bool {
        matches!(self, Loss::Squared | Loss::Logistic)
    }
}

pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
