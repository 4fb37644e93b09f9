//! Adaptive Simpson quadrature.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("quadrature did not converge after {subdivisions} subdivisions (error estimate {estimate:e})")]
    NotConverged { subdivisions: usize, estimate: f64 },
    #[error("integrand returned a non-finite value {value} at {at}")]
    NonFinite { at: f64, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureResult {
    pub value: f64,
    pub error_estimate: f64,
    pub subdivisions: usize,
}

/// Absolute tolerance and subdivision budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureOptions {
    pub abs_tol: f64,
    pub max_subdivisions: usize,
    /// Intervals are split unconditionally down to this depth.
    pub min_depth: u32,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            max_subdivisions: 1 << 20,
            min_depth: 3,
        }
    }
}

struct Panel {
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
}

fn eval<F: FnMut(f64) -> f64>(f: &mut F, x: f64) -> Result<f64, QuadratureError> {
    let v = f(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(QuadratureError::NonFinite { at: x, value: v })
    }
}

fn integrate_with_endpoints<F>(
    f: &mut F,
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
    opts: &QuadratureOptions,
) -> Result<QuadratureResult, QuadratureError>
where
    F: FnMut(f64) -> f64,
{
    if a == b {
        return Ok(QuadratureResult {
            value: 0.0,
            error_estimate: 0.0,
            subdivisions: 0,
        });
    }
    let m = 0.5 * (a + b);
    let fm = eval(f, m)?;
    let mut stack = vec![Panel {
        a,
        b,
        fa,
        fm,
        fb,
        whole: (b - a) / 6.0 * (fa + 4.0 * fm + fb),
        tol: opts.abs_tol,
        depth: 0,
    }];
    let mut total = 0.0;
    let mut error = 0.0;
    let mut subdivisions = 0usize;
    while let Some(p) = stack.pop() {
        let m = 0.5 * (p.a + p.b);
        let lm = 0.5 * (p.a + m);
        let rm = 0.5 * (m + p.b);
        let flm = eval(f, lm)?;
        let frm = eval(f, rm)?;
        let left = (m - p.a) / 6.0 * (p.fa + 4.0 * flm + p.fm);
        let right = (p.b - m) / 6.0 * (p.fm + 4.0 * frm + p.fb);
        let delta = left + right - p.whole;
        let tiny = (p.b - p.a).abs() <= 4.0 * f64::EPSILON * p.a.abs().max(p.b.abs());
        if p.depth >= opts.min_depth && (delta.abs() <= 15.0 * p.tol || tiny) {
            total += left + right + delta / 15.0;
            error += delta.abs() / 15.0;
            continue;
        }
        subdivisions += 1;
        if subdivisions > opts.max_subdivisions {
            return Err(QuadratureError::NotConverged {
                subdivisions,
                estimate: error + delta.abs() / 15.0,
            });
        }
        let tol = 0.5 * p.tol;
        let depth = p.depth + 1;
        stack.push(Panel {
            a: m,
            b: p.b,
            fa: p.fm,
            fm: frm,
            fb: p.fb,
            whole: right,
            tol,
            depth,
        });
        stack.push(Panel {
            a: p.a,
            b: m,
            fa: p.fa,
            fm: flm,
            fb: p.fm,
            whole: left,
            tol,
            depth,
        });
    }
    Ok(QuadratureResult {
        value: total,
        error_estimate: error,
        subdivisions,
    })
}

/// `∫_a^b f` to absolute tolerance `opts.abs_tol`.
pub fn adaptive_simpson<F>(
    mut f: F,
    a: f64,
    b: f64,
    opts: &QuadratureOptions,
) -> Result<QuadratureResult, QuadratureError>
where
    F: FnMut(f64) -> f64,
{
    if a == b {
        return integrate_with_endpoints(&mut f, a, b, 0.0, 0.0, opts);
    }
    let fa = eval(&mut f, a)?;
    let fb = eval(&mut f, b)?;
    integrate_with_endpoints(&mut f, a, b, fa, fb, opts)
}

/// Cumulative integrals `∫_{grid[0]}^{grid[k]} f` for every grid point.
///
/// Each grid interval gets a share of the tolerance proportional to its
/// length, so the value at the last node is within `opts.abs_tol` overall.
/// Endpoint evaluations are shared between neighbouring intervals.
pub fn cumulative_on_grid<F>(
    mut f: F,
    grid: &[f64],
    opts: &QuadratureOptions,
) -> Result<Vec<f64>, QuadratureError>
where
    F: FnMut(f64) -> f64,
{
    let mut out = Vec::with_capacity(grid.len());
    let Some(&first) = grid.first() else {
        return Ok(out);
    };
    out.push(0.0);
    if grid.len() == 1 {
        return Ok(out);
    }
    let span = grid[grid.len() - 1] - first;
    let per_interval = QuadratureOptions {
        min_depth: 0,
        ..*opts
    };
    let mut acc = 0.0;
    let mut f_left = eval(&mut f, first)?;
    for w in grid.windows(2) {
        let (a, b) = (w[0], w[1]);
        let f_right = eval(&mut f, b)?;
        let local = QuadratureOptions {
            abs_tol: opts.abs_tol * ((b - a) / span).max(f64::MIN_POSITIVE),
            ..per_interval
        };
        acc += integrate_with_endpoints(&mut f, a, b, f_left, f_right, &local)?.value;
        out.push(acc);
        f_left = f_right;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_and_exponentials() {
        let opts = QuadratureOptions::default();
        let r = adaptive_simpson(|x| x * x, 0.0, 3.0, &opts).unwrap();
        assert!((r.value - 9.0).abs() < 1e-12);
        let r = adaptive_simpson(|x: f64| (-x).exp(), 0.0, 20.0, &opts).unwrap();
        assert!((r.value - (1.0 - (-20.0f64).exp())).abs() < 1e-10);
        assert_eq!(adaptive_simpson(|x| x, 1.0, 1.0, &opts).unwrap().value, 0.0);
    }

    #[test]
    fn reversed_limits_flip_sign() {
        let opts = QuadratureOptions::default();
        let r = adaptive_simpson(|x: f64| x.cos(), 1.0, 0.0, &opts).unwrap();
        assert!((r.value + 1f64.sin()).abs() < 1e-10);
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let opts = QuadratureOptions {
            abs_tol: 1e-14,
            max_subdivisions: 4,
            min_depth: 0,
        };
        let err = adaptive_simpson(|x: f64| (50.0 * x).sin(), 0.0, 10.0, &opts).unwrap_err();
        assert!(matches!(err, QuadratureError::NotConverged { .. }));
    }

    #[test]
    fn non_finite_integrand_is_an_error() {
        let opts = QuadratureOptions::default();
        assert!(adaptive_simpson(|x: f64| 1.0 / x, 0.0, 1.0, &opts).is_err());
    }

    #[test]
    fn cumulative_grid_matches_closed_form() {
        let grid: Vec<f64> = (0..=100).map(|k| k as f64 * 0.05).collect();
        let opts = QuadratureOptions::default();
        let cum = cumulative_on_grid(|x: f64| (-x).exp(), &grid, &opts).unwrap();
        for (t, v) in grid.iter().zip(&cum) {
            assert!((v - (1.0 - (-t).exp())).abs() < 1e-10);
        }
    }
}
