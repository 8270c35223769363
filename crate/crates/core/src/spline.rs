//! Natural cubic spline control paths.
//!
//! A [`ControlPath`] interpolates a `T × D` sequence at strictly increasing
//! knot times with one cubic per interval and channel, zero second
//! derivative at both ends, and C² continuity at interior knots. Evaluation
//! outside the knot range is rejected.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Piecewise-cubic interpolant `S(t) = a + bΔ + cΔ² + dΔ³`, `Δ = t - t_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPath {
    knot_times: Vec<f64>,
    channels: usize,
    /// `[interval * channels + channel] -> [a, b, c, d]`
    coeffs: Vec<[f64; 4]>,
}

fn validate_times(times: &[f64]) -> Result<()> {
    if times.len() < 2 {
        return Err(Error::invalid(format!(
            "spline needs at least 2 knots, got {}",
            times.len()
        )));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("knot times must be finite"));
    }
    if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!(
            "knot times not strictly increasing at index {}: {} then {}",
            i + 1,
            times[i],
            times[i + 1]
        )));
    }
    Ok(())
}

/// Fits a natural cubic spline through `values` (row-major `T × channels`)
/// at `times`. Two knots give straight lines.
pub fn fit_natural_cubic(values: &[f64], channels: usize, times: &[f64]) -> Result<ControlPath> {
    validate_times(times)?;
    let t = times.len();
    if channels == 0 || values.len() != t * channels {
        return Err(Error::Shape {
            op: "fit_natural_cubic",
            lhs: vec![values.len()],
            rhs: vec![t, channels],
        });
    }
    let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();

    // Second derivatives at the knots; M_0 = M_{T-1} = 0. The interior system
    // is tridiagonal and shared by all channels, so eliminate once.
    let n = t.saturating_sub(2);
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut factor = vec![0.0; n];
    for i in 0..n {
        diag[i] = 2.0 * (h[i] + h[i + 1]);
        upper[i] = h[i + 1];
        if i > 0 {
            factor[i] = h[i] / diag[i - 1];
            diag[i] -= factor[i] * upper[i - 1];
        }
    }

    let mut coeffs = vec![[0.0; 4]; (t - 1) * channels];
    let mut m = vec![0.0; t];
    let mut rhs = vec![0.0; n];
    for ch in 0..channels {
        let y = |k: usize| values[k * channels + ch];
        for i in 0..n {
            let k = i + 1;
            rhs[i] = 6.0 * ((y(k + 1) - y(k)) / h[k] - (y(k) - y(k - 1)) / h[k - 1]);
            if i > 0 {
                rhs[i] -= factor[i] * rhs[i - 1];
            }
        }
        for i in (0..n).rev() {
            let next = if i + 1 < n { m[i + 2] } else { 0.0 };
            m[i + 1] = (rhs[i] - upper[i] * next) / diag[i];
        }
        m[0] = 0.0;
        m[t - 1] = 0.0;
        for i in 0..t - 1 {
            let slope = (y(i + 1) - y(i)) / h[i];
            coeffs[i * channels + ch] = [
                y(i),
                slope - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0,
                m[i] / 2.0,
                (m[i + 1] - m[i]) / (6.0 * h[i]),
            ];
        }
    }
    Ok(ControlPath {
        knot_times: times.to_vec(),
        channels,
        coeffs,
    })
}

impl ControlPath {
    pub fn knot_times(&self) -> &[f64] {
        &self.knot_times
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Cubic coefficients `[a, b, c, d]` of `interval` for `channel`.
    pub fn coefficients(&self, interval: usize, channel: usize) -> [f64; 4] {
        self.coeffs[interval * self.channels + channel]
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let first = self.knot_times[0];
        let last = *self.knot_times.last().expect("at least two knots");
        if !(first..=last).contains(&t) {
            return Err(Error::invalid(format!(
                "t = {t} outside knot range [{first}, {last}]"
            )));
        }
        let upper = self.knot_times.partition_point(|&k| k <= t);
        let i = upper.saturating_sub(1).min(self.knot_times.len() - 2);
        Ok((i, t - self.knot_times[i]))
    }

    fn eval_with(&self, t: f64, f: impl Fn([f64; 4], f64) -> f64) -> Result<Vec<f64>> {
        let (i, dt) = self.locate(t)?;
        Ok(self.coeffs[i * self.channels..(i + 1) * self.channels]
            .iter()
            .map(|&c| f(c, dt))
            .collect())
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        self.eval_with(t, |[a, b, c, d], x| a + x * (b + x * (c + x * d)))
    }

    pub fn eval_derivative(&self, t: f64) -> Result<Vec<f64>> {
        self.eval_with(t, |[_, b, c, d], x| b + x * (2.0 * c + 3.0 * x * d))
    }

    pub fn eval_second_derivative(&self, t: f64) -> Result<Vec<f64>> {
        self.eval_with(t, |[_, _, c, d], x| 2.0 * c + 6.0 * x * d)
    }
}

/// Matrix `W` (`eval_times × knots`) such that `S'(s) = Σ_k W[s,k] · y_k`
/// for any data `y` at `times`.
///
/// The fit is linear in the knot values, so the derivative at fixed times is
/// a fixed linear map; its transpose carries gradients back to the values.
pub fn derivative_basis(times: &[f64], eval_times: &[f64]) -> Result<Tensor> {
    validate_times(times)?;
    let t = times.len();
    let mut identity = vec![0.0; t * t];
    for k in 0..t {
        identity[k * t + k] = 1.0;
    }
    let path = fit_natural_cubic(&identity, t, times)?;
    let mut data = Vec::with_capacity(eval_times.len() * t);
    for &s in eval_times {
        data.extend(path.eval_derivative(s)?);
    }
    Tensor::new(&[eval_times.len(), t], data)
}
