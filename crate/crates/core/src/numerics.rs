//! Small numerical helpers shared across modules.

/// Brent's method on a bracketing interval `[a, b]`.
///
/// Returns `None` when `f(a)` and `f(b)` have the same sign or the iteration
/// budget is exhausted.
pub fn brent<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, xtol: f64, max_iter: usize) -> Option<f64> {
    let (mut a, mut b) = (a, b);
    let mut fa = f(a);
    let mut fb = f(b);
    if !fa.is_finite() || !fb.is_finite() || fa * fb > 0.0 {
        return None;
    }
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb * fc > 0.0 {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol;
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return Some(b);
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = d;
            }
        } else {
            d = m;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b);
    }
    None
}

/// Composite Simpson rule on uniformly spaced samples.
///
/// With an even number of intervals this is the textbook rule; an odd count
/// closes the last interval with the 3/8 rule.
pub fn simpson_uniform(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    match n {
        0 | 1 => 0.0,
        2 => 0.5 * h * (values[0] + values[1]),
        3 => h / 3.0 * (values[0] + 4.0 * values[1] + values[2]),
        _ => {
            let intervals = n - 1;
            let (simpson_end, tail) = if intervals.is_multiple_of(2) {
                (n - 1, 0.0)
            } else {
                let k = n - 4;
                let t = 3.0 * h / 8.0
                    * (values[k] + 3.0 * values[k + 1] + 3.0 * values[k + 2] + values[k + 3]);
                (k, t)
            };
            let mut s = values[0] + values[simpson_end];
            for (i, v) in values.iter().enumerate().take(simpson_end).skip(1) {
                s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
            }
            s * h / 3.0 + tail
        }
    }
}

/// Integrates `f` over `[a, b]` with composite Simpson using `intervals`
/// (rounded up to even) subintervals.
pub fn simpson<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, intervals: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let n = (intervals.max(2) + 1) & !1;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + h * i as f64;
        s += if i % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
    }
    s * h / 3.0
}

/// Result of a weighted straight-line fit `y = intercept + slope · x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub intercept_stderr: f64,
    pub chi2: f64,
}

/// Weighted least-squares line through `(x, y)` with standard deviations `sigma`.
pub fn weighted_line_fit(x: &[f64], y: &[f64], sigma: &[f64]) -> Option<LineFit> {
    if x.len() != y.len() || x.len() != sigma.len() || x.len() < 2 {
        return None;
    }
    let (mut s, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((&xi, &yi), &si) in x.iter().zip(y).zip(sigma) {
        if si <= 0.0 || !si.is_finite() {
            return None;
        }
        let w = 1.0 / (si * si);
        s += w;
        sx += w * xi;
        sy += w * yi;
        sxx += w * xi * xi;
        sxy += w * xi * yi;
    }
    let delta = s * sxx - sx * sx;
    if delta <= 0.0 {
        return None;
    }
    let slope = (s * sxy - sx * sy) / delta;
    let intercept = (sxx * sy - sx * sxy) / delta;
    let chi2 = x
        .iter()
        .zip(y)
        .zip(sigma)
        .map(|((&xi, &yi), &si)| ((yi - intercept - slope * xi) / si).powi(2))
        .sum();
    Some(LineFit {
        slope,
        intercept,
        slope_stderr: (s / delta).sqrt(),
        intercept_stderr: (sxx / delta).sqrt(),
        chi2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brent_finds_cube_root() {
        let r = brent(|x| x * x * x - 2.0, 0.0, 2.0, 1e-14, 200).unwrap();
        assert!((r - 2f64.cbrt()).abs() < 1e-12);
    }

    #[test]
    fn brent_rejects_non_bracketing_interval() {
        assert!(brent(|x| x * x + 1.0, -1.0, 1.0, 1e-12, 100).is_none());
    }

    #[test]
    fn simpson_is_exact_for_cubics() {
        let f = |x: f64| 3.0 * x * x * x - x + 2.0;
        let exact = |x: f64| 0.75 * x.powi(4) - 0.5 * x * x + 2.0 * x;
        let got = simpson(f, -1.0, 2.5, 10);
        assert!((got - (exact(2.5) - exact(-1.0))).abs() < 1e-12);
        let samples: Vec<f64> = (0..8).map(|i| f(-1.0 + 0.5 * i as f64)).collect();
        let got = simpson_uniform(&samples, 0.5);
        assert!((got - (exact(2.5) - exact(-1.0))).abs() < 1e-12);
    }

    #[test]
    fn line_fit_recovers_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 1.5 - 2.0 * v).collect();
        let fit = weighted_line_fit(&x, &y, &[0.1; 4]).unwrap();
        assert!((fit.slope + 2.0).abs() < 1e-12);
        assert!((fit.intercept - 1.5).abs() < 1e-12);
    }

    #[test]
    fn slope_error_halves_when_abscissa_doubles() {
        let x = [0.0, 100.0, 200.0, 300.0, 400.0];
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let y = [0.1, 0.3, 0.45, 0.71, 0.9];
        let a = weighted_line_fit(&x, &y, &[0.05; 5]).unwrap();
        let b = weighted_line_fit(&x2, &y, &[0.05; 5]).unwrap();
        assert!((a.slope_stderr / b.slope_stderr - 2.0).abs() < 1e-12);
    }
}
