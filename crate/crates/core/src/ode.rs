//! Explicit Runge–Kutta integration.
//!
//! Fixed-step Euler, RK4 and Tsit5 run over any [`OdeState`], which includes
//! tape variables, so a whole fixed-step solve can be differentiated. The
//! adaptive Tsit5 integrator works on plain vectors and is used for inference
//! and for the backward adjoint sweep.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Tsit5,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
            Method::Tsit5 => "tsit5",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            "tsit5" => Ok(Method::Tsit5),
            other => Err(Error::InvalidArgument(format!("unknown solver {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Step count for fixed-step methods.
    pub fixed_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Tsit5,
            rtol: 1e-4,
            atol: 1e-7,
            max_steps: 50_000,
            fixed_steps: 64,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tolerances must be positive (rtol = {}, atol = {})",
                self.rtol, self.atol
            )));
        }
        if self.max_steps == 0 || self.fixed_steps == 0 {
            return Err(Error::InvalidArgument("max_steps and fixed_steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_tolerances(mut self, rtol: f64, atol: f64) -> Self {
        self.rtol = rtol;
        self.atol = atol;
        self
    }
}

/// State types the fixed-step integrators can advance.
pub trait OdeState: Sized {
    /// `self + sum(coef * term)`.
    fn lincomb(&self, terms: &[(f64, &Self)]) -> Result<Self>;
    fn is_finite(&self) -> bool;
}

impl OdeState for Vec<f64> {
    fn lincomb(&self, terms: &[(f64, &Self)]) -> Result<Self> {
        let mut out = self.clone();
        for (c, k) in terms {
            if k.len() != out.len() {
                return Err(Error::shape("lincomb", &[out.len()], &[k.len()]));
            }
            for (o, v) in out.iter_mut().zip(k.iter()) {
                *o += c * v;
            }
        }
        Ok(out)
    }

    fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl OdeState for Var<'_> {
    fn lincomb(&self, terms: &[(f64, &Self)]) -> Result<Self> {
        let mut out = self.clone();
        for (c, k) in terms {
            if *c != 0.0 {
                out = out.add(&k.scale(*c))?;
            }
        }
        Ok(out)
    }

    fn is_finite(&self) -> bool {
        self.value().all_finite()
    }
}

/// Tsitouras 5(4) coefficients.
pub mod tsit5 {
    pub const C: [f64; 7] = [0.0, 0.161, 0.327, 0.9, 0.980_025_540_904_509_7, 1.0, 1.0];

    pub const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [0.161, 0.0, 0.0, 0.0, 0.0, 0.0],
        [-0.008_480_655_492_356_989, 0.335_480_655_492_357, 0.0, 0.0, 0.0, 0.0],
        [2.897_153_057_105_493, -6.359_448_489_975_075, 4.362_295_432_869_581_5, 0.0, 0.0, 0.0],
        [
            5.325_864_828_439_257,
            -11.748_883_564_062_828,
            7.495_539_342_889_836_5,
            -0.092_495_066_361_755_25,
            0.0,
            0.0,
        ],
        [
            5.861_455_442_946_42,
            -12.920_969_317_847_11,
            8.159_367_898_576_159,
            -0.071_584_973_281_401,
            -0.028_269_050_394_068_383,
            0.0,
        ],
        [
            0.096_460_766_818_065_23,
            0.01,
            0.479_889_650_414_499_6,
            1.379_008_574_103_742,
            -3.290_069_515_436_081,
            2.324_710_524_099_774,
        ],
    ];

    /// Fifth-order weights (equal to the last row of `A`; the method is FSAL).
    pub const B: [f64; 7] = [
        0.096_460_766_818_065_23,
        0.01,
        0.479_889_650_414_499_6,
        1.379_008_574_103_742,
        -3.290_069_515_436_081,
        2.324_710_524_099_774,
        0.0,
    ];

    /// `B` minus the embedded fourth-order weights.
    pub const BTILDE: [f64; 7] = [
        -0.001_780_011_052_225_777,
        -0.000_816_434_459_656_746_9,
        0.007_880_878_010_261_995,
        -0.144_711_007_173_262_9,
        0.582_357_165_452_555_2,
        -0.458_082_105_929_186_97,
        1.0 / 66.0,
    ];

    /// Weights of the continuous extension at fraction `theta` of a step.
    pub fn dense_weights(theta: f64) -> [f64; 7] {
        let t = theta;
        let t2 = t * t;
        [
            -1.053_088_497_729_021_6 * t * (t - 1.329_989_018_975_141) * (t2 - 1.436_402_854_171_635_1 * t + 0.713_981_691_707_420_9),
            0.1017 * t2 * (t2 - 2.196_656_833_824_975_4 * t + 1.294_985_250_737_463),
            2.490_627_285_651_253 * t2 * (t2 - 2.385_356_454_720_616_6 * t + 1.578_034_682_080_925),
            -16.548_102_889_244_902 * (t - 1.217_129_272_955_332_4) * (t - 0.616_204_060_378_000_9) * t2,
            47.379_521_962_819_28 * (t - 1.203_071_208_372_362_6) * (t - 0.658_047_292_653_547_4) * t2,
            -34.870_657_861_496_61 * (t - 1.2) * (t - 0.666_666_666_666_666_7) * t2,
            2.5 * (t - 1.0) * (t - 0.6) * t2,
        ]
    }
}

fn step_fixed<S: OdeState>(
    rhs: &mut dyn FnMut(f64, &S) -> Result<S>,
    t: f64,
    z: &S,
    h: f64,
    method: Method,
) -> Result<S> {
    match method {
        Method::Euler => {
            let k1 = rhs(t, z)?;
            z.lincomb(&[(h, &k1)])
        }
        Method::Rk4 => {
            let k1 = rhs(t, z)?;
            let k2 = rhs(t + 0.5 * h, &z.lincomb(&[(0.5 * h, &k1)])?)?;
            let k3 = rhs(t + 0.5 * h, &z.lincomb(&[(0.5 * h, &k2)])?)?;
            let k4 = rhs(t + h, &z.lincomb(&[(h, &k3)])?)?;
            z.lincomb(&[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)])
        }
        Method::Tsit5 => {
            let mut ks: Vec<S> = Vec::with_capacity(6);
            for i in 0..6 {
                let stage = if i == 0 {
                    rhs(t, z)?
                } else {
                    let terms: Vec<(f64, &S)> = (0..i).map(|j| (h * tsit5::A[i][j], &ks[j])).collect();
                    rhs(t + tsit5::C[i] * h, &z.lincomb(&terms)?)?
                };
                ks.push(stage);
            }
            let terms: Vec<(f64, &S)> = (0..6).map(|j| (h * tsit5::B[j], &ks[j])).collect();
            z.lincomb(&terms)
        }
    }
}

/// Advances `z0` from `t0` to `t1` in `n_steps` uniform steps.
pub fn integrate_fixed<S: OdeState>(
    rhs: &mut dyn FnMut(f64, &S) -> Result<S>,
    z0: S,
    t0: f64,
    t1: f64,
    n_steps: usize,
    method: Method,
) -> Result<S> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
    }
    let h = (t1 - t0) / n_steps as f64;
    let mut z = z0;
    for step in 0..n_steps {
        let t = t0 + step as f64 * h;
        z = step_fixed(rhs, t, &z, h, method)?;
        if !z.is_finite() {
            return Err(Error::SolverNonFinite { step, t: t + h });
        }
    }
    Ok(z)
}

/// Fixed-step solve that reports the state at every entry of `times`
/// (strictly increasing, starting at the initial time). Roughly `n_steps`
/// steps are spread over the whole span, with at least one per interval.
pub fn integrate_fixed_at<S: OdeState + Clone>(
    rhs: &mut dyn FnMut(f64, &S) -> Result<S>,
    z0: S,
    times: &[f64],
    n_steps: usize,
    method: Method,
) -> Result<Vec<S>> {
    if times.is_empty() {
        return Ok(Vec::new());
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("output times must be strictly increasing".into()));
    }
    let span = times[times.len() - 1] - times[0];
    let mut out = Vec::with_capacity(times.len());
    out.push(z0.clone());
    let mut z = z0;
    let mut offset = 0;
    for w in times.windows(2) {
        let steps = ((n_steps as f64 * (w[1] - w[0]) / span).ceil() as usize).max(1);
        z = integrate_fixed(rhs, z, w[0], w[1], steps, method).map_err(|e| match e {
            Error::SolverNonFinite { step, t } => Error::SolverNonFinite { step: step + offset, t },
            e => e,
        })?;
        offset += steps;
        out.push(z.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveSolution {
    pub state: Vec<f64>,
    /// States at the requested dense-output times.
    pub dense: Vec<Vec<f64>>,
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Right-hand side for the adaptive integrator: writes `dz/dt` into the
/// output slice.
pub type Rhs<'a> = dyn FnMut(f64, &[f64], &mut [f64]) -> Result<()> + 'a;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const PI_ALPHA: f64 = 0.7 / 5.0;
const PI_BETA: f64 = 0.4 / 5.0;

fn scaled_max(v: &[f64], y: &[f64], cfg: &SolverConfig) -> f64 {
    v.iter()
        .zip(y)
        .map(|(e, yi)| (e / (cfg.atol + cfg.rtol * yi.abs())).abs())
        .fold(0.0, f64::max)
}

/// Tsit5 with embedded error control. Works in either time direction.
/// `dense_at` must be ordered along the direction of integration and lie
/// inside `[t0, t1]`.
pub fn integrate_adaptive(
    rhs: &mut Rhs<'_>,
    z0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    dense_at: &[f64],
) -> Result<AdaptiveSolution> {
    cfg.validate()?;
    let n = z0.len();
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let (lo, hi) = if dir > 0.0 { (t0, t1) } else { (t1, t0) };
    if dense_at.iter().any(|t| !(lo..=hi).contains(t))
        || dense_at.windows(2).any(|w| dir * (w[1] - w[0]) < 0.0)
    {
        return Err(Error::InvalidArgument(
            "dense output times must be sorted along the integration direction and inside the span".into(),
        ));
    }
    let mut sol = AdaptiveSolution {
        state: z0.to_vec(),
        dense: Vec::with_capacity(dense_at.len()),
        accepted: 0,
        rejected: 0,
        evaluations: 0,
    };
    let mut next_dense = 0;
    while next_dense < dense_at.len() && dense_at[next_dense] == t0 {
        sol.dense.push(z0.to_vec());
        next_dense += 1;
    }
    if t1 == t0 {
        return Ok(sol);
    }

    let mut y = z0.to_vec();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    rhs(t0, &y, &mut k[0])?;
    sol.evaluations += 1;

    // initial step size (Hairer, Nørsett & Wanner II.4)
    let span = (t1 - t0).abs();
    let mut h = {
        let d0 = scaled_max(&y, &y, cfg);
        let d1 = scaled_max(&k[0], &y, cfg);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span);
        let y1: Vec<f64> = y.iter().zip(&k[0]).map(|(a, b)| a + dir * h0 * b).collect();
        let mut f1 = vec![0.0; n];
        rhs(t0 + dir * h0, &y1, &mut f1)?;
        sol.evaluations += 1;
        let diff: Vec<f64> = f1.iter().zip(&k[0]).map(|(a, b)| a - b).collect();
        let d2 = scaled_max(&diff, &y, cfg) / h0;
        if d1.max(d2) <= 1e-15 {
            span
        } else {
            let h1 = (0.01 / d1.max(d2)).powf(1.0 / 5.0);
            (100.0 * h0).min(h1).min(span)
        }
    };

    let mut t = t0;
    let mut err_prev: f64 = 1.0;
    let mut attempts = 0usize;
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err_vec = vec![0.0; n];
    let mut last_rejected = false;

    while dir * (t1 - t) > 0.0 {
        if attempts >= cfg.max_steps {
            return Err(Error::MaxStepsExceeded {
                max_steps: cfg.max_steps,
                t,
                step_size: h,
            });
        }
        attempts += 1;
        let remaining = (t1 - t).abs();
        let last = h >= remaining * (1.0 - 1e-12);
        let h_eff = if last { remaining } else { h };
        let hs = dir * h_eff;

        for i in 1..7 {
            for j in 0..n {
                let mut acc = y[j];
                for (m, a) in tsit5::A[i][..i].iter().enumerate() {
                    acc += hs * a * k[m][j];
                }
                stage[j] = acc;
            }
            let ti = if i == 6 && last { t1 } else { t + tsit5::C[i] * hs };
            rhs(ti, &stage, &mut k[i])?;
            sol.evaluations += 1;
            if i == 6 {
                y_new.copy_from_slice(&stage);
            }
        }
        for j in 0..n {
            let mut e = 0.0;
            for (m, bt) in tsit5::BTILDE.iter().enumerate() {
                e += bt * k[m][j];
            }
            err_vec[j] = hs * e;
        }
        let err = err_vec
            .iter()
            .zip(y.iter().zip(&y_new))
            .map(|(e, (a, b))| (e / (cfg.atol + cfg.rtol * a.abs().max(b.abs()))).abs())
            .fold(0.0, f64::max);
        if !err.is_finite() || !y_new.iter().all(|v| v.is_finite()) {
            if h_eff <= 1e-14 * span.max(1.0) {
                return Err(Error::SolverNonFinite {
                    step: sol.accepted,
                    t,
                });
            }
            h = h_eff * FAC_MIN;
            sol.rejected += 1;
            last_rejected = true;
            continue;
        }

        if err <= 1.0 {
            let t_new = if last { t1 } else { t + hs };
            while next_dense < dense_at.len() && dir * (dense_at[next_dense] - t_new) <= 0.0 {
                let theta = (dense_at[next_dense] - t) / hs;
                let w = tsit5::dense_weights(theta);
                let mut v = y.clone();
                for (m, wm) in w.iter().enumerate() {
                    for j in 0..n {
                        v[j] += hs * wm * k[m][j];
                    }
                }
                sol.dense.push(v);
                next_dense += 1;
            }
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6);
            t = t_new;
            sol.accepted += 1;
            let mut fac = if err == 0.0 {
                FAC_MAX
            } else {
                SAFETY * err.powf(-PI_ALPHA) * err_prev.powf(PI_BETA)
            };
            if last_rejected {
                fac = fac.min(1.0);
            }
            h = h_eff * fac.clamp(FAC_MIN, FAC_MAX);
            err_prev = err.max(1e-4);
            last_rejected = false;
        } else {
            let fac = (SAFETY * err.powf(-PI_ALPHA)).clamp(FAC_MIN, 1.0);
            h = h_eff * fac;
            sol.rejected += 1;
            last_rejected = true;
        }
    }
    sol.state = y;
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{E, FRAC_PI_2};

    use super::*;
    use crate::autodiff::{Tape, Tensor};

    fn exp_rhs() -> impl FnMut(f64, &Vec<f64>) -> Result<Vec<f64>> {
        |_, z: &Vec<f64>| Ok(z.clone())
    }

    #[test]
    fn tableau_is_consistent() {
        for i in 0..7 {
            let row: f64 = tsit5::A[i].iter().sum();
            assert!((row - tsit5::C[i]).abs() < 1e-14, "row {i}: {row}");
        }
        let b: f64 = tsit5::B.iter().sum();
        let bhat: f64 = tsit5::B.iter().zip(&tsit5::BTILDE).map(|(b, bt)| b - bt).sum();
        assert!((b - 1.0).abs() < 1e-14);
        assert!((bhat - 1.0).abs() < 1e-14);
        for j in 0..6 {
            assert_eq!(tsit5::A[6][j], tsit5::B[j]);
        }
    }

    #[test]
    fn dense_weights_are_consistent() {
        let w1 = tsit5::dense_weights(1.0);
        for (w, b) in w1.iter().zip(&tsit5::B) {
            assert!((w - b).abs() < 1e-12, "{w} vs {b}");
        }
        for k in 0..=10 {
            let th = k as f64 / 10.0;
            let s: f64 = tsit5::dense_weights(th).iter().sum();
            assert!((s - th).abs() < 1e-12, "theta {th}: {s}");
        }
    }

    #[test]
    fn zero_field_keeps_state() {
        for m in [Method::Euler, Method::Rk4, Method::Tsit5] {
            let mut f = |_: f64, z: &Vec<f64>| Ok(vec![0.0; z.len()]);
            let z = integrate_fixed(&mut f, vec![5.0], 0.0, 1.0, 7, m).unwrap();
            assert_eq!(z, vec![5.0]);
        }
        let mut f = |_: f64, _: &[f64], out: &mut [f64]| {
            out.fill(0.0);
            Ok(())
        };
        let sol = integrate_adaptive(&mut f, &[5.0], 0.0, 1.0, &SolverConfig::default(), &[]).unwrap();
        assert_eq!(sol.state, vec![5.0]);
        assert_eq!(sol.accepted, 1);
    }

    #[test]
    fn rk4_exponential() {
        let z = integrate_fixed(&mut exp_rhs(), vec![1.0], 0.0, 1.0, 100, Method::Rk4).unwrap();
        assert!((z[0] - E).abs() < 1e-8);
    }

    #[test]
    fn rk4_rotation() {
        let mut f = |_: f64, z: &Vec<f64>| Ok(vec![-z[1], z[0]]);
        let z = integrate_fixed(&mut f, vec![1.0, 0.0], 0.0, FRAC_PI_2, 200, Method::Rk4).unwrap();
        assert!(z[0].abs() < 1e-7 && (z[1] - 1.0).abs() < 1e-7);
        assert!((z[0].hypot(z[1]) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn nan_reports_step() {
        let mut f = |t: f64, z: &Vec<f64>| Ok(vec![if t > 0.5 { f64::NAN } else { z[0] }]);
        let err = integrate_fixed(&mut f, vec![1.0], 0.0, 1.0, 10, Method::Euler).unwrap_err();
        match err {
            Error::SolverNonFinite { step, .. } => assert_eq!(step, 6),
            e => panic!("unexpected {e}"),
        }
    }

    fn adaptive_exp(cfg: &SolverConfig) -> AdaptiveSolution {
        let mut f = |_: f64, z: &[f64], out: &mut [f64]| {
            out.copy_from_slice(z);
            Ok(())
        };
        integrate_adaptive(&mut f, &[1.0], 0.0, 1.0, cfg, &[]).unwrap()
    }

    #[test]
    fn adaptive_exponential_within_tolerance() {
        let sol = adaptive_exp(&SolverConfig::default());
        assert!(((sol.state[0] - E) / E).abs() < 1e-4);
    }

    #[test]
    fn tighter_tolerance_reduces_error() {
        let loose = SolverConfig::default();
        let tight = loose.with_tolerances(loose.rtol / 10.0, loose.atol / 10.0);
        let e1 = (adaptive_exp(&loose).state[0] - E).abs();
        let e2 = (adaptive_exp(&tight).state[0] - E).abs();
        assert!(e1 / e2 >= 5.0, "loose {e1:e} tight {e2:e}");
    }

    #[test]
    fn fixed_tsit5_is_fifth_order() {
        // on [0, 1] the n = 128 error is already at roundoff level
        let err = |n| {
            let z = integrate_fixed(&mut exp_rhs(), vec![1.0], 0.0, 2.0, n, Method::Tsit5).unwrap();
            (z[0] - 2f64.exp()).abs()
        };
        let order = (err(64) / err(128)).log2();
        assert!(order >= 4.8, "observed order {order}");
    }

    #[test]
    fn forward_then_backward_returns() {
        let cfg = SolverConfig::default();
        let mut f = |t: f64, z: &[f64], out: &mut [f64]| {
            out[0] = -z[1] + 0.1 * t.sin();
            out[1] = z[0] - 0.2 * z[1];
            Ok(())
        };
        let z0 = [1.0, 0.5];
        let fwd = integrate_adaptive(&mut f, &z0, 0.0, 3.0, &cfg, &[]).unwrap();
        let back = integrate_adaptive(&mut f, &fwd.state, 3.0, 0.0, &cfg, &[]).unwrap();
        for (a, b) in back.state.iter().zip(&z0) {
            assert!((a - b).abs() <= 10.0 * (cfg.atol + cfg.rtol * b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn dense_output_tracks_solution() {
        let cfg = SolverConfig::default().with_tolerances(1e-8, 1e-10);
        let mut f = |_: f64, z: &[f64], out: &mut [f64]| {
            out.copy_from_slice(z);
            Ok(())
        };
        let at: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
        let sol = integrate_adaptive(&mut f, &[1.0], 0.0, 1.0, &cfg, &at).unwrap();
        assert_eq!(sol.dense.len(), at.len());
        for (t, v) in at.iter().zip(&sol.dense) {
            assert!((v[0] - t.exp()).abs() < 1e-7, "t={t}: {}", v[0]);
        }
    }

    #[test]
    fn max_steps_is_reported() {
        let cfg = SolverConfig {
            max_steps: 3,
            ..SolverConfig::default().with_tolerances(1e-12, 1e-14)
        };
        let mut f = |t: f64, _: &[f64], out: &mut [f64]| {
            out[0] = (50.0 * t).sin();
            Ok(())
        };
        let err = integrate_adaptive(&mut f, &[0.0], 0.0, 10.0, &cfg, &[]).unwrap_err();
        assert!(matches!(err, Error::MaxStepsExceeded { max_steps: 3, .. }), "{err}");
        assert!(err.to_string().contains("step size"));
    }

    #[test]
    fn output_times_include_start() {
        let times = [0.0, 0.25, 0.5, 1.0];
        let zs = integrate_fixed_at(&mut exp_rhs(), vec![1.0], &times, 64, Method::Rk4).unwrap();
        assert_eq!(zs.len(), 4);
        for (t, z) in times.iter().zip(&zs) {
            assert!((z[0] - t.exp()).abs() < 1e-8);
        }
    }

    fn tanh_solve<'t>(tape: &'t Tape, w: &Var<'t>) -> Var<'t> {
        let z0 = tape.constant(Tensor::scalar(0.7));
        let mut f = |_: f64, z: &Var<'t>| -> Result<Var<'t>> { Ok(z.mul(w)?.tanh()) };
        integrate_fixed(&mut f, z0, 0.0, 1.0, 32, Method::Rk4).unwrap()
    }

    #[test]
    fn gradients_flow_through_fixed_steps() {
        // dz/dt = tanh(w z); gradient of z(1) w.r.t. w against finite differences
        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(0.8));
        let z1 = tanh_solve(&tape, &w);
        let g = tape.backward(&z1).unwrap().get(&w).item().unwrap();
        let plain = Tape::inference();
        let at = |w: f64| tanh_solve(&plain, &plain.constant(Tensor::scalar(w))).value().item().unwrap();
        let fd = (at(0.8 + 1e-5) - at(0.8 - 1e-5)) / 2e-5;
        assert!(((g - fd) / fd).abs() < 1e-5, "{g} vs {fd}");
    }
}
