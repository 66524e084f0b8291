//! Ground-truth data for the transient Poisson problem on the unit square.
//!
//! `u_t = Δu` with `u = 0` on the left edge, `u = g(t)` on the right edge,
//! zero flux on the top and bottom edges and `u(x, 0) = 0`. Time stepping is
//! backward Euler on a node-centred five-point grid; each step is one
//! symmetric positive definite solve by conjugate gradients.

use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::container::{format_list, Container};
use crate::error::{Error, Result};
use crate::operator::Normalization;
use crate::path::TimeSeriesSignal;

pub const DATASET_MAGIC: &str = "ncdeon-ds-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalFamily {
    Fourier,
    PiecewiseLinear,
}

impl SignalFamily {
    pub fn name(self) -> &'static str {
        match self {
            SignalFamily::Fourier => "fourier",
            SignalFamily::PiecewiseLinear => "piecewise-linear",
        }
    }
}

impl FromStr for SignalFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fourier" => Ok(SignalFamily::Fourier),
            "piecewise-linear" => Ok(SignalFamily::PiecewiseLinear),
            other => Err(Error::InvalidArgument(format!("unknown signal family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalConfig {
    pub family: SignalFamily,
    /// Bound on `|g(t)|`.
    pub amplitude: f64,
    pub max_modes: usize,
    /// Frequency band in cycles per horizon.
    pub min_freq: f64,
    pub max_freq: f64,
    pub min_knots: usize,
    pub max_knots: usize,
    pub horizon: f64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            family: SignalFamily::Fourier,
            amplitude: 1.0,
            max_modes: 5,
            min_freq: 0.25,
            max_freq: 2.0,
            min_knots: 4,
            max_knots: 10,
            horizon: 2.0,
        }
    }
}

impl SignalConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.amplitude >= 0.0
            && self.amplitude.is_finite()
            && self.max_modes >= 1
            && self.min_freq > 0.0
            && self.max_freq >= self.min_freq
            && self.max_freq.is_finite()
            && self.min_knots >= 2
            && self.max_knots >= self.min_knots
            && self.horizon > 0.0
            && self.horizon.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid signal config {self:?}")))
        }
    }
}

/// A boundary history that can be evaluated at any time.
#[derive(Debug, Clone, PartialEq)]
pub enum RandomSignal {
    /// `scale * sum a_k (sin(2 pi f_k t / T + phi_k) - sin(phi_k))`.
    Fourier {
        terms: Vec<(f64, f64, f64)>,
        scale: f64,
        horizon: f64,
    },
    PiecewiseLinear {
        times: Vec<f64>,
        values: Vec<f64>,
    },
}

impl RandomSignal {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            RandomSignal::Fourier { terms, scale, horizon } => {
                scale
                    * terms
                        .iter()
                        .map(|&(a, f, phi)| a * ((2.0 * PI * f * t / horizon + phi).sin() - phi.sin()))
                        .sum::<f64>()
            }
            RandomSignal::PiecewiseLinear { times, values } => {
                let t = t.clamp(times[0], times[times.len() - 1]);
                let k = times.partition_point(|&x| x <= t).clamp(1, times.len() - 1);
                let (t0, t1) = (times[k - 1], times[k]);
                let w = (t - t0) / (t1 - t0);
                values[k - 1] * (1.0 - w) + values[k] * w
            }
        }
    }

    pub fn sample(&self, times: &[f64]) -> Result<TimeSeriesSignal> {
        TimeSeriesSignal::scalar(times.to_vec(), times.iter().map(|&t| self.eval(t)).collect())
    }
}

/// Draws a random boundary history starting at zero.
pub fn sample_signal(cfg: &SignalConfig, rng: &mut impl Rng) -> Result<RandomSignal> {
    cfg.validate()?;
    Ok(match cfg.family {
        SignalFamily::Fourier => {
            let k = rng.gen_range(1..=cfg.max_modes);
            let terms: Vec<(f64, f64, f64)> = (0..k)
                .map(|_| {
                    let a = rng.gen_range(-1.0..1.0);
                    let f = rng.gen_range(cfg.min_freq..=cfg.max_freq);
                    let phi = rng.gen_range(0.0..2.0 * PI);
                    (a, f, phi)
                })
                .collect();
            // each term lies in [-2|a|, 2|a|]
            let total: f64 = terms.iter().map(|t| t.0.abs()).sum();
            let scale = if total > 0.0 { cfg.amplitude / (2.0 * total) } else { 0.0 };
            RandomSignal::Fourier {
                terms,
                scale,
                horizon: cfg.horizon,
            }
        }
        SignalFamily::PiecewiseLinear => {
            let n = rng.gen_range(cfg.min_knots..=cfg.max_knots);
            let mut times: Vec<f64> = (0..n - 2).map(|_| rng.gen_range(0.0..cfg.horizon)).collect();
            times.push(0.0);
            times.push(cfg.horizon);
            times.sort_by(f64::total_cmp);
            times.dedup();
            let values = times
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    if i == 0 || cfg.amplitude == 0.0 {
                        0.0
                    } else {
                        rng.gen_range(-cfg.amplitude..=cfg.amplitude)
                    }
                })
                .collect();
            RandomSignal::PiecewiseLinear { times, values }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonConfig {
    /// Grid nodes along x and y, boundaries included.
    pub nx: usize,
    pub ny: usize,
    pub horizon: f64,
    /// Snapshots at `k * horizon / (saves - 1)`, including `t = 0`.
    pub saves: usize,
    /// Implicit steps between consecutive snapshots.
    pub substeps: usize,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        PoissonConfig {
            nx: 32,
            ny: 32,
            horizon: 2.0,
            saves: 99,
            substeps: 4,
            cg_tol: 1e-10,
            cg_max_iter: 10_000,
        }
    }
}

impl PoissonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 8 || self.ny < 8 || self.saves < 2 || self.substeps == 0 || !(self.horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid Poisson config {self:?}")));
        }
        if !(self.cg_tol > 0.0) || self.cg_max_iter == 0 {
            return Err(Error::InvalidArgument("CG tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }

    pub fn save_times(&self) -> Vec<f64> {
        (0..self.saves)
            .map(|k| k as f64 * self.horizon / (self.saves - 1) as f64)
            .collect()
    }

    /// Node coordinates `(x, y)`, row-major over `y` then `x`.
    pub fn coords(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.nx * self.ny * 2);
        for j in 0..self.ny {
            for i in 0..self.nx {
                data.push(i as f64 / (self.nx - 1) as f64);
                data.push(j as f64 / (self.ny - 1) as f64);
            }
        }
        Tensor::from_parts(vec![self.nx * self.ny, 2], data)
    }
}

/// Symmetrized backward-Euler operator on the unknown nodes (interior
/// columns, all rows).
struct Stencil {
    nx_in: usize,
    ny: usize,
    cx: f64,
    cy: f64,
}

impl Stencil {
    fn row_weight(&self, j: usize) -> f64 {
        if j == 0 || j + 1 == self.ny {
            0.5
        } else {
            1.0
        }
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let (n, ny) = (self.nx_in, self.ny);
        for j in 0..ny {
            let w = self.row_weight(j);
            for i in 0..n {
                let k = j * n + i;
                let mut acc = (1.0 + 2.0 * self.cx + 2.0 * self.cy) * u[k];
                if i > 0 {
                    acc -= self.cx * u[k - 1];
                }
                if i + 1 < n {
                    acc -= self.cx * u[k + 1];
                }
                // ghost reflection at the Neumann edges
                let down = if j > 0 { u[k - n] } else { u[k + n] };
                let up = if j + 1 < ny { u[k + n] } else { u[k - n] };
                acc -= self.cy * (down + up);
                out[k] = w * acc;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients from the initial guess in `x`; stops once
/// `|r| <= tol * |b|`.
fn cg(st: &Stencil, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<usize> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        x.fill(0.0);
        return Ok(0);
    }
    let mut ax = vec![0.0; n];
    st.apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let target = tol * bnorm;
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        if rr.sqrt() <= target {
            return Ok(it);
        }
        st.apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
    }
    if rr.sqrt() <= target {
        return Ok(max_iter);
    }
    Err(Error::CgNotConverged {
        iterations: max_iter,
        residual: rr.sqrt() / bnorm,
    })
}

/// Snapshots `(saves, ny * nx)` of the field driven by the right-edge
/// history `bc`.
pub fn solve_poisson(bc: impl Fn(f64) -> f64, cfg: &PoissonConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (nx, ny) = (cfg.nx, cfg.ny);
    let nx_in = nx - 2;
    let hx = 1.0 / (nx - 1) as f64;
    let hy = 1.0 / (ny - 1) as f64;
    let dt = cfg.horizon / ((cfg.saves - 1) * cfg.substeps) as f64;
    let st = Stencil {
        nx_in,
        ny,
        cx: dt / (hx * hx),
        cy: dt / (hy * hy),
    };
    let mut u = vec![0.0; nx_in * ny];
    let mut rhs = vec![0.0; nx_in * ny];
    let mut out = Vec::with_capacity(cfg.saves * nx * ny);
    let snapshot = |u: &[f64], g: f64, out: &mut Vec<f64>| {
        for j in 0..ny {
            out.push(0.0);
            out.extend_from_slice(&u[j * nx_in..(j + 1) * nx_in]);
            out.push(g);
        }
    };
    snapshot(&u, bc(0.0), &mut out);
    for step in 1..=(cfg.saves - 1) * cfg.substeps {
        let g = bc(step as f64 * dt);
        for j in 0..ny {
            let w = st.row_weight(j);
            for i in 0..nx_in {
                let k = j * nx_in + i;
                rhs[k] = w * (u[k] + if i + 1 == nx_in { st.cx * g } else { 0.0 });
            }
        }
        cg(&st, &rhs, &mut u, cfg.cg_tol, cfg.cg_max_iter)?;
        if step % cfg.substeps == 0 {
            snapshot(&u, g, &mut out);
        }
    }
    Ok(out)
}

/// Signals, grid and target fields for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorDataset {
    /// `(N, T_in)` observation times.
    pub times: Tensor,
    /// `(N, T_in, d_in)` raw signal values.
    pub signals: Tensor,
    /// `(P, d_x)` spatial coordinates.
    pub coords: Tensor,
    /// `(T_out)` raw output times.
    pub query_times: Vec<f64>,
    /// `(N, T_out, P, c)` raw field values.
    pub targets: Tensor,
    pub norm: Normalization,
    /// Provenance entries copied into the file header.
    pub meta: Vec<(String, String)>,
}

impl OperatorDataset {
    pub fn len(&self) -> usize {
        self.times.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_channels(&self) -> usize {
        self.signals.shape()[2]
    }

    pub fn output_channels(&self) -> usize {
        self.targets.shape()[3]
    }

    pub fn points(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn spatial_dims(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn signal(&self, i: usize) -> Result<TimeSeriesSignal> {
        let t_in = self.times.shape()[1];
        let d = self.input_channels();
        TimeSeriesSignal::new(
            self.times.data()[i * t_in..(i + 1) * t_in].to_vec(),
            self.signals.data()[i * t_in * d..(i + 1) * t_in * d].to_vec(),
            d,
        )
    }

    /// Raw targets of sample `i`, laid out `(T_out, P, c)`.
    pub fn target(&self, i: usize) -> &[f64] {
        let n = self.targets.len() / self.len().max(1);
        &self.targets.data()[i * n..(i + 1) * n]
    }

    pub fn get_meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(DATASET_MAGIC);
        for (k, v) in &self.meta {
            c.set(k, v)?;
        }
        c.set("time_scale", format!("{:?}", self.norm.time_scale))?;
        c.set("signal_scale", format_list(&self.norm.signal_scale))?;
        c.set("target_scale", format_list(&self.norm.target_scale))?;
        c.push_array("times", self.times.clone())?;
        c.push_array("signals", self.signals.clone())?;
        c.push_array("coords", self.coords.clone())?;
        c.push_array("query_times", Tensor::vector(self.query_times.clone()))?;
        c.push_array("targets", self.targets.clone())?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.magic() != DATASET_MAGIC {
            return Err(Error::Format(format!("not a dataset: {:?}", c.magic())));
        }
        let norm = Normalization {
            time_scale: c.parse("time_scale")?,
            signal_scale: c.parse_list("signal_scale")?,
            target_scale: c.parse_list("target_scale")?,
        };
        let times = c.array("times")?.clone();
        let signals = c.array("signals")?.clone();
        let coords = c.array("coords")?.clone();
        let query_times = c.array("query_times")?.clone();
        let targets = c.array("targets")?.clone();
        let bad = |what: &str| Error::Format(format!("inconsistent dataset: {what}"));
        let (ts, ss, cs, qs, ys) = (times.shape(), signals.shape(), coords.shape(), query_times.shape(), targets.shape());
        if ts.len() != 2 || ss.len() != 3 || cs.len() != 2 || qs.len() != 1 || ys.len() != 4 {
            return Err(bad("array ranks"));
        }
        if ss[0] != ts[0] || ss[1] != ts[1] || ys[0] != ts[0] || ys[1] != qs[0] || ys[2] != cs[0] {
            return Err(bad("array shapes"));
        }
        if ts[0] > 0 && ts[1] < 2 {
            return Err(bad("signals need at least two observations"));
        }
        if norm.signal_scale.len() != ss[2] || norm.target_scale.len() != ys[3] {
            return Err(bad("normalization lengths"));
        }
        let positive = |v: &f64| v.is_finite() && *v > 0.0;
        if !positive(&norm.time_scale) || !norm.signal_scale.iter().chain(&norm.target_scale).all(positive) {
            return Err(bad("normalization constants must be positive"));
        }
        if !targets.all_finite() || !signals.all_finite() || !coords.all_finite() {
            return Err(bad("non-finite values"));
        }
        let reserved = ["time_scale", "signal_scale", "target_scale"];
        let meta = c
            .meta()
            .iter()
            .filter(|(k, _)| !reserved.contains(&k.as_str()))
            .cloned()
            .collect();
        Ok(OperatorDataset {
            times,
            signals,
            coords,
            query_times: query_times.into_vec(),
            targets,
            norm,
            meta,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, DATASET_MAGIC)?)
    }
}

/// Per-channel max-abs of `values` laid out with `channels` innermost;
/// zero channels get scale 1.
pub fn max_abs(values: &[f64], channels: usize) -> Vec<f64> {
    let mut m = vec![0.0f64; channels];
    for row in values.chunks(channels) {
        for (mi, v) in m.iter_mut().zip(row) {
            *mi = mi.max(v.abs());
        }
    }
    m.into_iter().map(|v| if v > 0.0 { v } else { 1.0 }).collect()
}

fn generate_split(
    n: usize,
    stream: u64,
    signal_cfg: &SignalConfig,
    poisson_cfg: &PoissonConfig,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let save_times = poisson_cfg.save_times();
    let samples: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream + i as u64);
            let sig = sample_signal(signal_cfg, &mut rng)?;
            let field = solve_poisson(|t| sig.eval(t), poisson_cfg).map_err(|e| e.for_sample(i))?;
            let values = save_times.iter().map(|&t| sig.eval(t)).collect();
            Ok((values, field))
        })
        .collect();
    let mut times = Vec::with_capacity(n * save_times.len());
    let mut signals = Vec::with_capacity(n * save_times.len());
    let mut fields = Vec::new();
    for s in samples {
        let (values, field) = s?;
        times.extend_from_slice(&save_times);
        signals.extend(values);
        fields.extend(field);
    }
    Ok((times, signals, fields))
}

/// Generates train and test splits. Normalization constants come from the
/// training split only and are shared by both.
pub fn build_dataset(
    n_train: usize,
    n_test: usize,
    signal_cfg: &SignalConfig,
    poisson_cfg: &PoissonConfig,
    seed: u64,
) -> Result<(OperatorDataset, OperatorDataset)> {
    signal_cfg.validate()?;
    poisson_cfg.validate()?;
    if (signal_cfg.horizon - poisson_cfg.horizon).abs() > 0.0 {
        return Err(Error::InvalidArgument("signal and solver horizons differ".into()));
    }
    let t = poisson_cfg.saves;
    let p = poisson_cfg.nx * poisson_cfg.ny;
    let train = generate_split(n_train, 0, signal_cfg, poisson_cfg, seed)?;
    let test = generate_split(n_test, 1 << 32, signal_cfg, poisson_cfg, seed)?;
    let norm = Normalization {
        time_scale: poisson_cfg.horizon,
        signal_scale: max_abs(&train.1, 1),
        target_scale: max_abs(&train.2, 1),
    };
    let meta_for = |split: &str, n: usize| -> Vec<(String, String)> {
        vec![
            ("split".into(), split.into()),
            ("samples".into(), n.to_string()),
            ("seed".into(), seed.to_string()),
            ("family".into(), signal_cfg.family.name().into()),
            ("amplitude".into(), format!("{:?}", signal_cfg.amplitude)),
            ("max_modes".into(), signal_cfg.max_modes.to_string()),
            ("min_freq".into(), format!("{:?}", signal_cfg.min_freq)),
            ("max_freq".into(), format!("{:?}", signal_cfg.max_freq)),
            ("min_knots".into(), signal_cfg.min_knots.to_string()),
            ("max_knots".into(), signal_cfg.max_knots.to_string()),
            ("nx".into(), poisson_cfg.nx.to_string()),
            ("ny".into(), poisson_cfg.ny.to_string()),
            ("horizon".into(), format!("{:?}", poisson_cfg.horizon)),
            ("saves".into(), poisson_cfg.saves.to_string()),
            ("substeps".into(), poisson_cfg.substeps.to_string()),
            ("cg_tol".into(), format!("{:?}", poisson_cfg.cg_tol)),
        ]
    };
    let assemble = |(times, signals, fields): (Vec<f64>, Vec<f64>, Vec<f64>), n: usize, split: &str| {
        Ok::<_, Error>(OperatorDataset {
            times: Tensor::new(vec![n, t], times)?,
            signals: Tensor::new(vec![n, t, 1], signals)?,
            coords: poisson_cfg.coords(),
            query_times: poisson_cfg.save_times(),
            targets: Tensor::new(vec![n, t, p, 1], fields)?,
            norm: norm.clone(),
            meta: meta_for(split, n),
        })
    };
    Ok((assemble(train, n_train, "train")?, assemble(test, n_test, "test")?))
}

/// Largest excursion of any snapshot outside the range spanned by the
/// previous snapshot and the boundary values up to the current time.
pub fn max_principle_violation(u: &[f64], cfg: &PoissonConfig, bc: impl Fn(f64) -> f64) -> f64 {
    let n = cfg.nx * cfg.ny;
    let dt = cfg.horizon / ((cfg.saves - 1) * cfg.substeps) as f64;
    let mut worst = 0.0f64;
    for s in 1..cfg.saves {
        let prev = &u[(s - 1) * n..s * n];
        let cur = &u[s * n..(s + 1) * n];
        let mut lo = prev.iter().copied().fold(0.0f64, f64::min);
        let mut hi = prev.iter().copied().fold(0.0f64, f64::max);
        for k in 1..=cfg.substeps {
            let g = bc(((s - 1) * cfg.substeps + k) as f64 * dt);
            lo = lo.min(g);
            hi = hi.max(g);
        }
        for &v in cur {
            worst = worst.max(lo - v).max(v - hi);
        }
    }
    worst
}
