//! Bracketed scalar root finding. Bisection only: every equation solved in
//! this crate comes with proven one-sided limits, so robustness beats order.

use crate::error::{Error, Result};

pub const MAX_ITER: usize = 200;

/// Find a sign change of `f` by geometric expansion from `±start`, for an
/// `f` that is negative towards -infinity and positive towards +infinity.
/// Returns `(lo, hi)` with `f(lo) <= 0 <= f(hi)`. A NaN probe on the right
/// is read as overflow of an exponentially growing branch, i.e. positive.
pub fn bracket_sign_change(
    mut f: impl FnMut(f64) -> f64,
    start: f64,
    context: &str,
) -> Result<(f64, f64)> {
    let f0 = f(0.0);
    if f0 == 0.0 {
        return Ok((0.0, 0.0));
    }
    let step0 = start.abs().max(1e-6);
    if f0 < 0.0 {
        let mut prev = 0.0;
        let mut hi = step0;
        for _ in 0..MAX_ITER {
            let fh = f(hi);
            if fh >= 0.0 || fh.is_nan() {
                return Ok((prev, hi));
            }
            prev = hi;
            hi *= 2.0;
            if !hi.is_finite() {
                break;
            }
        }
        Err(Error::Bracketing {
            context: format!("{context}: no sign change to the right"),
        })
    } else {
        let mut prev = 0.0;
        let mut lo = -step0;
        for _ in 0..MAX_ITER {
            let fl = f(lo);
            if fl <= 0.0 {
                return Ok((lo, prev));
            }
            prev = lo;
            lo *= 2.0;
            if !lo.is_finite() {
                break;
            }
        }
        Err(Error::Bracketing {
            context: format!("{context}: no sign change to the left"),
        })
    }
}

/// Bisect on `[lo, hi]` with `f(lo) <= 0 <= f(hi)` until `|f| <= f_tol`, the
/// bracket width drops below `x_tol`, or `MAX_ITER` splits. NaN midpoints
/// are treated as positive, consistent with [`bracket_sign_change`].
pub fn bisect(
    mut f: impl FnMut(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
    f_tol: f64,
    x_tol: f64,
    context: &str,
) -> Result<f64> {
    if lo > hi {
        std::mem::swap(&mut lo, &mut hi);
    }
    let flo = f(lo);
    if flo == 0.0 {
        return Ok(lo);
    }
    let fhi = f(hi);
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo > 0.0 || fhi < 0.0 {
        return Err(Error::Bracketing {
            context: format!("{context}: bracket does not straddle a root"),
        });
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..MAX_ITER {
        mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm.abs() <= f_tol {
            return Ok(mid);
        }
        if fm.is_nan() || fm > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= x_tol {
            return Ok(0.5 * (lo + hi));
        }
    }
    Ok(mid)
}
