//! Continuous control paths built from discrete observations.
//!
//! Observations are augmented with a final channel carrying time itself,
//! then joined by a C¹ piecewise cubic Hermite interpolant. Interior knot
//! tangents come from the three-point (parabolic) finite-difference formula,
//! endpoint tangents from one-sided differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Irregularly sampled multichannel observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSignal {
    times: Vec<f64>,
    /// Row-major `(times.len(), channels)`.
    values: Vec<f64>,
    channels: usize,
}

impl TimeSeriesSignal {
    pub fn new(times: Vec<f64>, values: Vec<f64>, channels: usize) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidSignal(format!(
                "need at least 2 observations, got {}",
                times.len()
            )));
        }
        if channels == 0 || values.len() != times.len() * channels {
            return Err(Error::InvalidSignal(format!(
                "{} values do not fill {} observations of {} channels",
                values.len(),
                times.len(),
                channels
            )));
        }
        if let Some(k) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidSignal(format!(
                "times not strictly increasing at index {}",
                k + 1
            )));
        }
        if times.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::InvalidSignal("non-finite observation".into()));
        }
        Ok(TimeSeriesSignal {
            times,
            values,
            channels,
        })
    }

    /// Single-channel convenience constructor.
    pub fn scalar(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        Self::new(times, values, 1)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn observation(&self, k: usize) -> &[f64] {
        &self.values[k * self.channels..(k + 1) * self.channels]
    }

    /// Maps times through `t -> (t - offset) / scale` and values channel-wise
    /// through `v -> v / value_scale[c]`.
    pub fn normalized(&self, offset: f64, scale: f64, value_scale: &[f64]) -> Result<Self> {
        if value_scale.len() != self.channels {
            return Err(Error::InvalidArgument(format!(
                "{} value scales for {} channels",
                value_scale.len(),
                self.channels
            )));
        }
        let times = self.times.iter().map(|t| (t - offset) / scale).collect();
        let values = self
            .values
            .chunks(self.channels)
            .flat_map(|row| row.iter().zip(value_scale).map(|(v, s)| v / s))
            .collect();
        Self::new(times, values, self.channels)
    }
}

/// Piecewise cubic through the augmented observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    knots: Vec<f64>,
    /// Data channels (without the time channel).
    channels: usize,
    /// Per interval and data channel: `a + b s + c s^2 + d s^3` with `s = t - knot`.
    coeffs: Vec<[f64; 4]>,
}

/// Evaluation result with the out-of-domain flag.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub values: Vec<f64>,
    pub clamped: bool,
}

impl ControlPath {
    pub fn build(signal: &TimeSeriesSignal) -> Result<Self> {
        let t = signal.times();
        let n = t.len();
        let ch = signal.channels();
        if n < 2 {
            return Err(Error::InvalidSignal("need at least 2 observations".into()));
        }
        let mut coeffs = Vec::with_capacity((n - 1) * ch);
        let mut tangents = vec![0.0; n];
        for c in 0..ch {
            let y = |k: usize| signal.values()[k * ch + c];
            let slope = |k: usize| (y(k + 1) - y(k)) / (t[k + 1] - t[k]);
            tangents[0] = slope(0);
            tangents[n - 1] = slope(n - 2);
            for k in 1..n - 1 {
                let (h0, h1) = (t[k] - t[k - 1], t[k + 1] - t[k]);
                tangents[k] = (h1 * slope(k - 1) + h0 * slope(k)) / (h0 + h1);
            }
            for k in 0..n - 1 {
                let h = t[k + 1] - t[k];
                let (y0, y1) = (y(k), y(k + 1));
                let (m0, m1) = (tangents[k], tangents[k + 1]);
                let delta = (y1 - y0) / h;
                let c2 = (3.0 * delta - 2.0 * m0 - m1) / h;
                let c3 = (m0 + m1 - 2.0 * delta) / (h * h);
                coeffs.push([y0, m0, c2, c3]);
            }
        }
        // store interval-major for cache locality during evaluation
        let intervals = n - 1;
        let mut by_interval = Vec::with_capacity(coeffs.len());
        for k in 0..intervals {
            for c in 0..ch {
                by_interval.push(coeffs[c * intervals + k]);
            }
        }
        Ok(ControlPath {
            knots: t.to_vec(),
            channels: ch,
            coeffs: by_interval,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn start(&self) -> f64 {
        self.knots[0]
    }

    pub fn end(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// Number of path channels including the time channel.
    pub fn dim(&self) -> usize {
        self.channels + 1
    }

    pub fn data_channels(&self) -> usize {
        self.channels
    }

    fn locate(&self, t: f64) -> (usize, f64, bool) {
        let (lo, hi) = (self.start(), self.end());
        let clamped = !(lo..=hi).contains(&t);
        let tc = t.clamp(lo, hi);
        let k = match self.knots.partition_point(|&k| k <= tc) {
            0 => 0,
            p => (p - 1).min(self.knots.len() - 2),
        };
        (k, tc, clamped)
    }

    /// Writes `X(t)` into `out` (length [`Self::dim`]); returns whether `t`
    /// had to be clamped into the domain.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> bool {
        let (k, tc, clamped) = self.locate(t);
        let s = tc - self.knots[k];
        let row = &self.coeffs[k * self.channels..(k + 1) * self.channels];
        for (o, c) in out.iter_mut().zip(row) {
            *o = c[0] + s * (c[1] + s * (c[2] + s * c[3]));
        }
        out[self.channels] = tc;
        clamped
    }

    /// Writes `dX/dt` into `out`; the time channel derivative is exactly 1.
    pub fn deriv_into(&self, t: f64, out: &mut [f64]) -> bool {
        let (k, tc, clamped) = self.locate(t);
        let s = tc - self.knots[k];
        let row = &self.coeffs[k * self.channels..(k + 1) * self.channels];
        for (o, c) in out.iter_mut().zip(row) {
            *o = c[1] + s * (2.0 * c[2] + s * 3.0 * c[3]);
        }
        out[self.channels] = 1.0;
        clamped
    }

    pub fn eval(&self, t: f64) -> PathSample {
        let mut values = vec![0.0; self.dim()];
        let clamped = self.eval_into(t, &mut values);
        PathSample { values, clamped }
    }

    pub fn deriv(&self, t: f64) -> PathSample {
        let mut values = vec![0.0; self.dim()];
        let clamped = self.deriv_into(t, &mut values);
        PathSample { values, clamped }
    }

    /// Like [`Self::eval`] but out-of-domain times are an error.
    pub fn eval_checked(&self, t: f64) -> Result<Vec<f64>> {
        let s = self.eval(t);
        if s.clamped {
            return Err(Error::InvalidArgument(format!(
                "t = {t} outside path domain [{}, {}]",
                self.start(),
                self.end()
            )));
        }
        Ok(s.values)
    }

    /// Samples the data channels at `times` as a new signal.
    pub fn sample(&self, times: &[f64]) -> Result<TimeSeriesSignal> {
        let mut buf = vec![0.0; self.dim()];
        let mut values = Vec::with_capacity(times.len() * self.channels);
        for &t in times {
            self.eval_into(t, &mut buf);
            values.extend_from_slice(&buf[..self.channels]);
        }
        TimeSeriesSignal::new(times.to_vec(), values, self.channels)
    }
}
