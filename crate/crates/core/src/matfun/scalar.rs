use serde::{Deserialize, Serialize};

/// Scalar functions that lift to symmetric matrices through their spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarFun {
    Log,
    Exp,
    Power(f64),
    Sqrt,
    InvSqrt,
    /// `max(λ, eps)`, the ReEig rectification.
    ReThreshold(f64),
}

impl ScalarFun {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            ScalarFun::Log => x.ln(),
            ScalarFun::Exp => x.exp(),
            ScalarFun::Power(p) => x.powf(p),
            ScalarFun::Sqrt => x.sqrt(),
            ScalarFun::InvSqrt => 1.0 / x.sqrt(),
            ScalarFun::ReThreshold(eps) => x.max(eps),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            ScalarFun::Log => 1.0 / x,
            ScalarFun::Exp => x.exp(),
            ScalarFun::Power(p) => {
                if p == 0.0 {
                    0.0
                } else {
                    p * x.powf(p - 1.0)
                }
            }
            ScalarFun::Sqrt => 0.5 / x.sqrt(),
            ScalarFun::InvSqrt => -0.5 / (x * x.sqrt()),
            ScalarFun::ReThreshold(eps) => {
                if x > eps {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Whether the function is only defined for strictly positive arguments.
    pub fn requires_positive(&self) -> bool {
        match *self {
            ScalarFun::Log | ScalarFun::Sqrt | ScalarFun::InvSqrt => true,
            ScalarFun::Power(p) => p.fract() != 0.0 || p < 0.0,
            ScalarFun::Exp | ScalarFun::ReThreshold(_) => false,
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        match self {
            ScalarFun::Log => "log",
            ScalarFun::Exp => "exp",
            ScalarFun::Power(_) => "power",
            ScalarFun::Sqrt => "sqrt",
            ScalarFun::InvSqrt => "inv_sqrt",
            ScalarFun::ReThreshold(_) => "re_threshold",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_matches_central_differences() {
        let funs = [
            ScalarFun::Log,
            ScalarFun::Exp,
            ScalarFun::Power(0.37),
            ScalarFun::Power(2.0),
            ScalarFun::Power(-1.5),
            ScalarFun::Sqrt,
            ScalarFun::InvSqrt,
            ScalarFun::ReThreshold(1e-4),
        ];
        let h = 1e-6;
        for f in funs {
            for &x in &[0.05, 0.3, 1.0, 2.7, 9.0] {
                let fd = (f.value(x + h) - f.value(x - h)) / (2.0 * h);
                let an = f.derivative(x);
                let rel = (fd - an).abs() / an.abs().max(1e-12);
                assert!(rel < 1e-6, "{f:?} at {x}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn threshold_kink() {
        let f = ScalarFun::ReThreshold(1e-4);
        assert_eq!(f.value(0.0), 1e-4);
        assert_eq!(f.derivative(0.0), 0.0);
        assert_eq!(f.derivative(1.0), 1.0);
    }
}
