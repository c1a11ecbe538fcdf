//! Central finite-difference verification of analytic gradients.
//!
//! For each checked coordinate the numeric estimate is
//! `(f(x + eps) - f(x - eps)) / (2 eps)` and the error is
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
//!
//! Coordinates whose perturbations move any relu or max-pool onto a different
//! linear piece (detected through the tape's kink signature) are excluded and
//! listed in the report instead of being counted as failures.

use super::params::ParamStore;
use super::tape::{Mode, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Lower bound on the error denominator, so that coordinates with
    /// vanishing gradients are judged on absolute error.
    pub floor: f64,
    /// Check at most this many coordinates per parameter (evenly strided).
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn f32() -> Self {
        GradCheckConfig { eps: 1e-2, tol: 1e-3, floor: 1e-2, max_per_param: None, seed: 0 }
    }

    pub fn f64() -> Self {
        GradCheckConfig { eps: 1e-6, tol: 1e-5, floor: 1e-3, max_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    pub excluded: Vec<Coordinate>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tol
    }
}

fn evaluate<T: Scalar, F>(f: &F, store: &ParamStore<T>, seed: u64) -> Result<(f64, u64, Tape<T>, Var)>
where
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new(Mode::Eval, seed);
    tape.track_kinks(true);
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::contract("grad_check", format!("function must return a scalar, got {:?}", v.shape())));
    }
    let value = v.data()[0].f64();
    let sig = tape.kink_signature();
    Ok((value, sig, tape, out))
}

/// Checks d f / d p for every trainable entry `p` of `store`.
pub fn grad_check<T: Scalar, F>(f: F, store: &ParamStore<T>, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let (_, base_sig, mut tape, out) = evaluate(&f, store, cfg.seed)?;
    tape.backward(out)?;
    let analytic = store.gradients(&tape);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, excluded: Vec::new(), tol: cfg.tol };
    let mut probe = store.clone();
    for (name, grad) in &analytic {
        let n = grad.len();
        let stride = cfg.max_per_param.map_or(1, |m| n.div_ceil(m.max(1)));
        for index in (0..n).step_by(stride) {
            let orig = probe.get(name)?.data()[index];
            let (xp, xm) = (orig + T::c(cfg.eps), orig - T::c(cfg.eps));
            probe.get_mut(name)?.data_mut()[index] = xp;
            let (fp, sp, ..) = evaluate(&f, &probe, cfg.seed)?;
            probe.get_mut(name)?.data_mut()[index] = xm;
            let (fm, sm, ..) = evaluate(&f, &probe, cfg.seed)?;
            probe.get_mut(name)?.data_mut()[index] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numeric { location: format!("grad_check at `{name}`[{index}]") });
            }
            let coord = Coordinate { param: name.clone(), index };
            if sp != base_sig || sm != base_sig {
                report.excluded.push(coord);
                continue;
            }
            // The stored step differs from 2 eps by rounding in low precision.
            let numeric = (fp - fm) / (xp - xm).f64();
            let a = grad[index].f64();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(coord);
            }
        }
    }
    Ok(report)
}

/// Single-input convenience wrapper: checks d f(x) / d x.
pub fn grad_check_tensor<T: Scalar, F>(f: F, x: &Tensor<T>, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    store.param("x", x.clone());
    grad_check(
        |tape, s| {
            let v = tape.param(s, "x")?;
            f(tape, v)
        },
        &store,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::<f64>::from_f64([4], &[0.3, -1.2, 2.0, 0.7]).unwrap();
        let cfg = GradCheckConfig { tol: 1e-4, ..GradCheckConfig::f64() };
        let r = grad_check_tensor(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum_all(sq))
            },
            &x,
            &cfg,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn relu_kink_is_excluded_not_failed() {
        let x = Tensor::<f64>::from_f64([3], &[0.0, 1.0, -1.0]).unwrap();
        let r = grad_check_tensor(
            |t, v| {
                let y = t.relu(v);
                Ok(t.sum_all(y))
            },
            &x,
            &GradCheckConfig::f64(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.excluded, vec![Coordinate { param: "x".into(), index: 0 }]);
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn wrong_gradient_fails() {
        // x * stop_gradient(x) has true derivative 2x but the tape sees x.
        let x = Tensor::<f64>::from_f64([2], &[1.5, -0.5]).unwrap();
        let r = grad_check_tensor(
            |t, v| {
                let c = t.stop_gradient(v);
                let p = t.mul(v, c)?;
                Ok(t.sum_all(p))
            },
            &x,
            &GradCheckConfig::f64(),
        )
        .unwrap();
        assert!(!r.passed());
        assert!(r.max_rel_error > 0.4);
    }
}
