use super::{Tape, Tensor};
use crate::{Error, Result};

/// Central-difference step used by the gradient checks in this crate.
pub const DEFAULT_GRAD_CHECK_EPS: f64 = 1e-5;

/// Compare analytic gradients of a scalar function against central finite
/// differences and return the worst relative error over every coordinate of
/// every parameter.
///
/// `f` must rebuild its computation from scratch on the tape it is given;
/// it runs once for the analytic pass and twice per parameter coordinate
/// for the numeric one. Relative error is
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, params: &[&Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    for p in params {
        p.zero_grad();
    }
    {
        let tape = Tape::new();
        let loss = f(&tape)?;
        let v = loss.expect_scalar("grad_check loss")?;
        if !v.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite loss {v} in gradient check"
            )));
        }
        tape.backward(&loss)?;
    }
    let mut worst = 0.0f64;
    for p in params {
        let analytic = p
            .grad()
            .ok_or_else(|| Error::Contract("grad_check parameter without gradients".into()))?;
        for k in 0..p.len() {
            let numeric = {
                p.nudge(k, eps);
                let plus = eval_scalar(&f)?;
                p.nudge(k, -2.0 * eps);
                let minus = eval_scalar(&f)?;
                p.nudge(k, eps);
                (plus - minus) / (2.0 * eps)
            };
            let a = analytic[k];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn eval_scalar<F>(f: &F) -> Result<f64>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    let tape = Tape::new();
    let loss = f(&tape)?;
    let v = loss.expect_scalar("grad_check loss")?;
    if !v.is_finite() {
        return Err(Error::Evaluation(format!(
            "non-finite loss {v} in gradient check"
        )));
    }
    Ok(v)
}
