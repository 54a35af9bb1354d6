//! Natural cubic spline for complex samples on a uniform grid.
//!
//! Temporal modes extracted from a coarse correlation-kernel grid are
//! resampled onto the (finer) propagation grid before capture couplings are
//! computed.

use num_complex::Complex64 as C64;

/// Natural cubic spline through `(t0 + k·dt, y_k)`.
pub(crate) struct CubicSpline {
    t0: f64,
    dt: f64,
    y: Vec<C64>,
    m: Vec<C64>, // second derivatives, zero at both ends
}

impl CubicSpline {
    pub fn fit(t0: f64, dt: f64, y: &[C64]) -> Self {
        let n = y.len();
        assert!(n >= 3, "spline needs at least 3 samples");
        let mut rhs = vec![C64::new(0.0, 0.0); n];
        for i in 1..n - 1 {
            rhs[i] = (y[i + 1] - y[i] * 2.0 + y[i - 1]) * (6.0 / (dt * dt));
        }
        // Thomas sweep on the interior [1, 4, 1] system; m[0] = m[n-1] = 0
        let mut m = vec![C64::new(0.0, 0.0); n];
        if n > 3 {
            let mut c_prime = vec![0.0f64; n];
            let mut d_prime = vec![C64::new(0.0, 0.0); n];
            c_prime[1] = 0.25;
            d_prime[1] = rhs[1] * 0.25;
            for i in 2..n - 1 {
                let denom = 4.0 - c_prime[i - 1];
                c_prime[i] = 1.0 / denom;
                d_prime[i] = (rhs[i] - d_prime[i - 1]) / denom;
            }
            m[n - 2] = d_prime[n - 2];
            for i in (1..n - 2).rev() {
                m[i] = d_prime[i] - m[i + 1] * c_prime[i];
            }
        } else {
            m[1] = rhs[1] * 0.25;
        }
        CubicSpline { t0, dt, y: y.to_vec(), m }
    }

    pub fn eval(&self, t: f64) -> C64 {
        let n = self.y.len();
        let x = (t - self.t0) / self.dt;
        let k = (x.floor() as isize).clamp(0, n as isize - 2) as usize;
        let s = x - k as f64;
        let h2 = self.dt * self.dt;
        let a = 1.0 - s;
        self.y[k] * a
            + self.y[k + 1] * s
            + (self.m[k] * (a * a * a - a) + self.m[k + 1] * (s * s * s - s)) * (h2 / 6.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_smooth_oscillation() {
        let n = 60;
        let dt = 0.25;
        let f = |t: f64| C64::new((0.7 * t).sin(), (0.5 * t).cos());
        let y: Vec<C64> = (0..n).map(|k| f(k as f64 * dt)).collect();
        let sp = CubicSpline::fit(0.0, dt, &y);
        for k in 0..(4 * (n - 1)) {
            let t = k as f64 * dt / 4.0;
            let err = (sp.eval(t) - f(t)).norm();
            // natural boundary conditions lose accuracy in the outermost cells
            let interior = t > 4.0 * dt && t < (n - 1) as f64 * dt - 4.0 * dt;
            let tol = if interior { 2e-4 } else { 3e-3 };
            assert!(err < tol, "t={t} err={err}");
        }
    }

    #[test]
    fn exact_at_knots() {
        let y: Vec<C64> =
            (0..10).map(|k| C64::new(k as f64 * k as f64, -(k as f64))).collect();
        let sp = CubicSpline::fit(1.0, 0.5, &y);
        for (k, want) in y.iter().enumerate() {
            let got = sp.eval(1.0 + 0.5 * k as f64);
            assert!((got - want).norm() < 1e-12);
        }
    }
}
