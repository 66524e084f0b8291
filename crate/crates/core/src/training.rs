//! Mini-batch training with Adam and a warmup-cosine schedule.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::operator::{Branch, FieldPrediction, OperatorModel, Prepared, QueryBatch, TrunkKind};
use crate::pde_data::OperatorDataset;

/// Samples per tape; gradients of the chunks are summed in chunk order.
pub const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Backpropagate through fixed-step RK4.
    Tape,
    /// Adaptive forward solve plus the continuous adjoint.
    Adjoint,
}

impl GradMode {
    pub fn name(self) -> &'static str {
        match self {
            GradMode::Tape => "tape",
            GradMode::Adjoint => "adjoint",
        }
    }
}

impl FromStr for GradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tape" => Ok(GradMode::Tape),
            "adjoint" => Ok(GradMode::Adjoint),
            other => Err(Error::InvalidArgument(format!("unknown gradient mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// One epoch is one pass over the training signals.
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// `(x, t)` queries drawn per batch.
    pub queries: usize,
    pub grad: GradMode,
    /// RK4 steps over the normalized horizon in tape mode.
    pub fixed_steps: usize,
    /// Samples that may fail before training aborts.
    pub failure_budget: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 4000,
            lr_init: 1e-3,
            lr_final: 1e-5,
            warmup_fraction: 0.05,
            seed: 2024,
            queries: 256,
            grad: GradMode::Tape,
            fixed_steps: 64,
            failure_budget: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 || self.queries == 0 || self.fixed_steps == 0 {
            return bad("batch size, queries and fixed steps must be positive");
        }
        if !(self.lr_final > 0.0 && self.lr_final < self.lr_init && self.lr_init.is_finite()) {
            return bad("learning rates need 0 < lr_final < lr_init");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Learning rate after `step` of `total` updates: a linear ramp from 0 over
/// the warmup, then cosine decay to `lr_final`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warm = (cfg.warmup_fraction * total as f64).ceil() as usize;
    if step < warm {
        return cfg.lr_init * step as f64 / warm as f64;
    }
    if total <= warm {
        return cfg.lr_init;
    }
    let progress = ((step - warm) as f64 / (total - warm) as f64).min(1.0);
    cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Mean of squared differences over all entries.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("mse", &[target.len()], &[pred.len()]));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("mse of an empty prediction".into()));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

pub fn mse_loss(pred: &FieldPrediction, target: &Tensor) -> Result<f64> {
    if pred.values.shape() != target.shape() {
        return Err(Error::shape("mse_loss", target.shape(), pred.values.shape()));
    }
    mse(pred.values.data(), target.data())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update.
pub fn optim_step(params: &mut ParamSet, grads: &[Tensor], state: &mut OptimState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape("optim_step", &[params.len()], &[grads.len()]));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.get(i).shape() {
            return Err(Error::shape("optim_step", params.get(i).shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", params.names()[i])));
        }
    }
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (i, g) in grads.iter().enumerate() {
        let mut m = state.m[i].data().to_vec();
        let mut v = state.v[i].data().to_vec();
        let mut p = params.get(i).data().to_vec();
        for k in 0..p.len() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g.data()[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g.data()[k] * g.data()[k];
            p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
        }
        let shape = params.get(i).shape().to_vec();
        state.m[i] = Tensor::new(shape.clone(), m)?;
        state.v[i] = Tensor::new(shape.clone(), v)?;
        params.set(i, Tensor::new(shape, p)?)?;
    }
    Ok(())
}

/// Normalized training inputs and the dataset grid.
pub struct TrainingSet {
    pub inputs: Vec<Prepared>,
    /// Normalized output times.
    pub times: Vec<f64>,
    pub coords: Tensor,
    points: usize,
    channels: usize,
    targets: Vec<f64>,
}

impl TrainingSet {
    pub fn new(model: &OperatorModel, data: &OperatorDataset) -> Result<Self> {
        if data.input_channels() != model.config.input_channels
            || data.output_channels() != model.channels()
            || data.spatial_dims() != model.config.spatial_dims
        {
            return Err(Error::InvalidArgument("dataset channels do not match the model".into()));
        }
        let inputs = (0..data.len())
            .map(|i| model.prepare(&data.signal(i)?).map_err(|e| e.for_sample(i)))
            .collect::<Result<Vec<_>>>()?;
        let c = model.channels();
        let mut targets = data.targets.data().to_vec();
        for row in targets.chunks_mut(c) {
            for (v, s) in row.iter_mut().zip(&model.norm.target_scale) {
                *v /= s;
            }
        }
        Ok(TrainingSet {
            inputs,
            times: data.query_times.iter().map(|t| t / model.norm.time_scale).collect(),
            coords: data.coords.clone(),
            points: data.points(),
            channels: c,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Normalized targets `(B*c, Q)` matching `batch_predictions`.
    pub fn batch_targets(&self, samples: &[usize], q: &QueryBatch) -> Result<Tensor> {
        let (c, p, t) = (self.channels, self.points, self.times.len());
        let mut out = Vec::with_capacity(samples.len() * c * q.len());
        for &s in samples {
            let base = s * t * p * c;
            for k in 0..c {
                for (&j, &pt) in q.time_idx.iter().zip(&q.point_idx) {
                    out.push(self.targets[base + (j * p + pt) * c + k]);
                }
            }
        }
        Tensor::new(vec![samples.len() * c, q.len()], out)
    }

    pub fn sample_queries(&self, n: usize, rng: &mut impl Rng) -> QueryBatch {
        let mut time_idx = Vec::with_capacity(n);
        let mut point_idx = Vec::with_capacity(n);
        for _ in 0..n {
            time_idx.push(rng.gen_range(0..self.times.len()));
            point_idx.push(rng.gen_range(0..self.points));
        }
        QueryBatch { time_idx, point_idx }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Batch loss before each update.
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    /// Sample ids skipped after a solver failure.
    pub failures: Vec<usize>,
}

/// Sum of squared errors over a chunk and its parameter gradients.
struct ChunkResult {
    sse: f64,
    grads: Vec<Tensor>,
    ok: usize,
    failed: Vec<usize>,
}

fn solver_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::SolverNonFinite { .. } | Error::MaxStepsExceeded { .. } | Error::Adjoint { .. } | Error::NonFinite(_)
    )
}

fn sse_tape<'t>(pred: &Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    pred.sq_err_sum(target)
}

fn chunk_tape(model: &OperatorModel, set: &TrainingSet, ids: &[usize], q: &QueryBatch, cfg: &TrainConfig) -> Result<ChunkResult> {
    let tape = Tape::new();
    let p = model.params.leaves(&tape);
    let inputs: Vec<&Prepared> = ids.iter().map(|&i| &set.inputs[i]).collect();
    let pred = model.batch_predictions(&p, &inputs, q, &set.times, &set.coords, cfg.fixed_steps)?;
    let loss = sse_tape(&pred, &set.batch_targets(ids, q)?)?;
    let sse = loss.value().data()[0];
    if !sse.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let mut g = tape.backward(&loss)?;
    Ok(ChunkResult {
        sse,
        grads: p.iter().map(|v| g.take(v)).collect(),
        ok: ids.len(),
        failed: Vec::new(),
    })
}

fn chunk_adjoint(model: &OperatorModel, set: &TrainingSet, ids: &[usize], q: &QueryBatch) -> Result<ChunkResult> {
    let Branch::Ncde(ncde) = &model.branch else {
        return Err(Error::UnsupportedModel("adjoint gradients need the NCDE branch".into()));
    };
    if model.config.trunk != TrunkKind::SpaceTime {
        return Err(Error::UnsupportedModel("adjoint gradients need the space-time trunk".into()));
    }
    let d = model.config.latent;
    let mut kept = Vec::new();
    let mut z_ends = Vec::new();
    let mut failed = Vec::new();
    for &i in ids {
        match ncde.forward(&model.params, &set.inputs[i].path, &model.solver, &[]) {
            Ok(sol) => {
                kept.push(i);
                z_ends.extend(sol.z_end);
            }
            Err(e) if solver_failure(&e) => failed.push(i),
            Err(e) => return Err(e.for_sample(i)),
        }
    }
    let mut grads: Vec<Tensor> = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    if kept.is_empty() {
        return Ok(ChunkResult { sse: 0.0, grads, ok: 0, failed });
    }
    let tape = Tape::new();
    let p = model.params.leaves(&tape);
    let (b, c, h) = (kept.len(), model.channels(), model.embed());
    let z = tape.leaf(Tensor::new(vec![b, d], z_ends.clone())?);
    let emb = model.head_forward(&p, &z)?.reshape(&[b * c, h])?;
    let dx = model.config.spatial_dims;
    let mut qrows = Vec::with_capacity(q.len() * (dx + 1));
    for (&j, &pt) in q.time_idx.iter().zip(&q.point_idx) {
        qrows.extend_from_slice(set.coords.row(pt));
        qrows.push(set.times[j]);
    }
    let trunk = model.trunk_vars(&p, &tape.constant(Tensor::new(vec![q.len(), dx + 1], qrows)?))?;
    let pred = model.combine(&p, &emb, &trunk)?;
    let loss = sse_tape(&pred, &set.batch_targets(&kept, q)?)?;
    let sse = loss.value().data()[0];
    let mut g = tape.backward(&loss)?;
    for (k, v) in p.iter().enumerate() {
        grads[k] = g.take(v);
    }
    let dz = g.take(&z);
    for (r, &i) in kept.iter().enumerate() {
        let res = ncde.adjoint_backward(
            &model.params,
            &set.inputs[i].path,
            &model.solver,
            &z_ends[r * d..(r + 1) * d],
            &dz.data()[r * d..(r + 1) * d],
        );
        match res {
            Ok(parts) => {
                for (idx, t) in parts {
                    grads[idx] = grads[idx].zip_map(&t, "add", |a, b| a + b)?;
                }
            }
            // head and trunk gradients of the sample stay in
            Err(e) if solver_failure(&e) => failed.push(i),
            Err(e) => return Err(e.for_sample(i)),
        }
    }
    Ok(ChunkResult {
        sse,
        grads,
        ok: kept.len(),
        failed,
    })
}

fn run_chunk(model: &OperatorModel, set: &TrainingSet, ids: &[usize], q: &QueryBatch, cfg: &TrainConfig) -> Result<ChunkResult> {
    match cfg.grad {
        GradMode::Adjoint => chunk_adjoint(model, set, ids, q),
        GradMode::Tape => match chunk_tape(model, set, ids, q, cfg) {
            Err(e) if solver_failure(&e) && ids.len() > 1 => {
                // isolate the failing samples
                let mut acc: Option<ChunkResult> = None;
                let mut failed = Vec::new();
                for &i in ids {
                    match chunk_tape(model, set, &[i], q, cfg) {
                        Ok(r) => {
                            acc = Some(match acc {
                                None => r,
                                Some(a) => merge(a, r)?,
                            })
                        }
                        Err(e) if solver_failure(&e) => failed.push(i),
                        Err(e) => return Err(e.for_sample(i)),
                    }
                }
                let mut out = acc.unwrap_or_else(|| ChunkResult {
                    sse: 0.0,
                    grads: model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
                    ok: 0,
                    failed: Vec::new(),
                });
                out.failed.extend(failed);
                Ok(out)
            }
            Err(e) if solver_failure(&e) => Ok(ChunkResult {
                sse: 0.0,
                grads: model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
                ok: 0,
                failed: ids.to_vec(),
            }),
            other => other,
        },
    }
}

fn merge(mut a: ChunkResult, b: ChunkResult) -> Result<ChunkResult> {
    a.sse += b.sse;
    a.ok += b.ok;
    a.failed.extend(b.failed);
    for (x, y) in a.grads.iter_mut().zip(&b.grads) {
        *x = x.zip_map(y, "add", |p, q| p + q)?;
    }
    Ok(a)
}

/// Trains in place and reports the loss history.
pub fn train(model: &mut OperatorModel, data: &OperatorDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, data, cfg, &mut |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    model: &mut OperatorModel,
    data: &OperatorDataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochSummary),
) -> Result<TrainReport> {
    cfg.validate()?;
    let set = TrainingSet::new(model, data)?;
    let mut report = TrainReport::default();
    if set.is_empty() || cfg.epochs == 0 {
        return Ok(report);
    }
    let per_epoch = cfg.steps_per_epoch(set.len());
    let total = cfg.epochs * per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut state = OptimState::new(&model.params);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let q = set.sample_queries(cfg.queries, &mut rng);
            let chunks: Vec<&[usize]> = batch.chunks(CHUNK).collect();
            let model_ref = &*model;
            let results: Vec<Result<ChunkResult>> =
                chunks.par_iter().map(|ids| run_chunk(model_ref, &set, ids, &q, cfg)).collect();
            let mut total_res: Option<ChunkResult> = None;
            for r in results {
                let r = r?;
                total_res = Some(match total_res {
                    None => r,
                    Some(a) => merge(a, r)?,
                });
            }
            let res = total_res.expect("non-empty batch");
            for &i in &res.failed {
                eprintln!("warning: solver failure on training sample {i}, skipped");
            }
            report.failures.extend(&res.failed);
            if report.failures.len() > cfg.failure_budget {
                return Err(Error::InvalidArgument(format!(
                    "{} solver failures exceed the budget of {} (last sample {})",
                    report.failures.len(),
                    cfg.failure_budget,
                    report.failures[report.failures.len() - 1]
                )));
            }
            step += 1;
            lr = lr_at(step, total, cfg);
            if res.ok == 0 {
                continue;
            }
            let denom = (res.ok * model.channels() * q.len()) as f64;
            let loss = res.sse / denom;
            let grads: Vec<Tensor> = res.grads.iter().map(|g| g.map(|v| v / denom)).collect();
            optim_step(&mut model.params, &grads, &mut state, lr)?;
            report.losses.push(loss);
            report.lrs.push(lr);
            epoch_loss += loss;
        }
        on_epoch(&EpochSummary {
            epoch: epoch + 1,
            mean_loss: epoch_loss / per_epoch as f64,
            lr,
        });
    }
    Ok(report)
}
