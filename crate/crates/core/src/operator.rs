//! Operator models: an NCDE or GRU branch feeding a DeepONet head.
//!
//! The branch embeds the input history into `b` of shape `(c, h)`; the trunk
//! maps a query point to `t` in `R^h`; channel `k` of the prediction is
//! `b[k] . t + beta[k]`.

use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat, Tape, Tensor, Var};
use crate::container::{format_list, Container};
use crate::error::{Error, Result};
use crate::ncde::{Ncde, NcdeDims};
use crate::nn::{glorot, orthogonal, uniform_bias, Activation, Linear, Mlp, ParamSet};
use crate::ode::{Method, SolverConfig};
use crate::path::{ControlPath, TimeSeriesSignal};

pub const CHECKPOINT_MAGIC: &str = "ncdeon-ckpt-v1";

/// Largest single dimension accepted from a checkpoint header.
const MAX_DIM: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ncde,
    Gru,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ncde => "ncde",
            ModelKind::Gru => "gru",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ncde" => Ok(ModelKind::Ncde),
            "gru" => Ok(ModelKind::Gru),
            other => Err(Error::InvalidArgument(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrunkKind {
    /// Trunk input is `(x, t)`.
    SpaceTime,
    /// Trunk input is `x`; the branch emits one embedding per training time.
    Spatial,
}

impl TrunkKind {
    pub fn name(self) -> &'static str {
        match self {
            TrunkKind::SpaceTime => "spacetime",
            TrunkKind::Spatial => "spatial",
        }
    }
}

impl FromStr for TrunkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spacetime" => Ok(TrunkKind::SpaceTime),
            "spatial" => Ok(TrunkKind::Spatial),
            other => Err(Error::InvalidArgument(format!("unknown trunk {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub trunk: TrunkKind,
    pub input_channels: usize,
    pub spatial_dims: usize,
    pub output_channels: usize,
    pub latent: usize,
    pub field_width: usize,
    /// Affine layers in the vector field.
    pub field_depth: usize,
    pub trunk_width: usize,
    /// Affine layers in the trunk.
    pub trunk_depth: usize,
    /// Shared branch/trunk embedding size `h`.
    pub embed: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Ncde,
            trunk: TrunkKind::SpaceTime,
            input_channels: 1,
            spatial_dims: 2,
            output_channels: 1,
            latent: 64,
            field_width: 200,
            field_depth: 6,
            trunk_width: 200,
            trunk_depth: 6,
            embed: 200,
            gru_hidden: 200,
            gru_layers: 6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_channels", self.input_channels),
            ("spatial_dims", self.spatial_dims),
            ("output_channels", self.output_channels),
            ("latent", self.latent),
            ("field_width", self.field_width),
            ("field_depth", self.field_depth),
            ("trunk_width", self.trunk_width),
            ("trunk_depth", self.trunk_depth),
            ("embed", self.embed),
            ("gru_hidden", self.gru_hidden),
            ("gru_layers", self.gru_layers),
        ];
        for (name, v) in dims {
            if v == 0 || v > MAX_DIM {
                return Err(Error::InvalidArgument(format!("{name} = {v} out of range")));
            }
        }
        if self.kind == ModelKind::Gru && self.trunk == TrunkKind::Spatial {
            return Err(Error::UnsupportedModel(
                "the spatial-only trunk needs time-indexed branch states, which the GRU baseline does not provide".into(),
            ));
        }
        Ok(())
    }

    pub fn trunk_input_dim(&self) -> usize {
        match self.trunk {
            TrunkKind::SpaceTime => self.spatial_dims + 1,
            TrunkKind::Spatial => self.spatial_dims,
        }
    }

    fn branch_output_dim(&self) -> usize {
        match self.kind {
            ModelKind::Ncde => self.latent,
            ModelKind::Gru => self.gru_hidden,
        }
    }

    /// Number of trainable scalars, computed without allocating; `None` on
    /// overflow.
    pub fn param_count(&self) -> Option<usize> {
        let lin = |i: usize, o: usize| i.checked_mul(o)?.checked_add(o);
        let mlp = |dims: &[usize], ln: bool| -> Option<usize> {
            let mut n = 0usize;
            for (k, w) in dims.windows(2).enumerate() {
                n = n.checked_add(lin(w[0], w[1])?)?;
                if ln && k + 2 < dims.len() {
                    n = n.checked_add(w[1].checked_mul(2)?)?;
                }
            }
            Some(n)
        };
        let path_dim = self.input_channels + 1;
        let branch = match self.kind {
            ModelKind::Ncde => {
                let mut dims = vec![self.latent];
                dims.extend(std::iter::repeat_n(self.field_width, self.field_depth - 1));
                dims.push(self.latent.checked_mul(path_dim)?);
                lin(path_dim, self.latent)?.checked_add(mlp(&dims, false)?)?
            }
            ModelKind::Gru => {
                let h3 = self.gru_hidden.checked_mul(3)?;
                let mut n = 0usize;
                for layer in 0..self.gru_layers {
                    let fan_in = if layer == 0 { self.input_channels } else { self.gru_hidden };
                    n = n
                        .checked_add(lin(fan_in, h3)?)?
                        .checked_add(lin(self.gru_hidden, h3)?)?;
                }
                n
            }
        };
        let ch = self.output_channels.checked_mul(self.embed)?;
        let head = lin(self.branch_output_dim(), ch)?.checked_add(self.output_channels)?;
        let mut tdims = vec![self.trunk_input_dim()];
        tdims.extend(std::iter::repeat_n(self.trunk_width, self.trunk_depth - 1));
        tdims.push(self.embed);
        branch.checked_add(head)?.checked_add(mlp(&tdims, true)?)
    }
}

/// Max-abs scaling constants and the physical time horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub time_scale: f64,
    pub signal_scale: Vec<f64>,
    pub target_scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(input_channels: usize, output_channels: usize) -> Self {
        Normalization {
            time_scale: 1.0,
            signal_scale: vec![1.0; input_channels],
            target_scale: vec![1.0; output_channels],
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.time_scale)
            || self.signal_scale.len() != cfg.input_channels
            || self.target_scale.len() != cfg.output_channels
            || !self.signal_scale.iter().chain(&self.target_scale).all(|&v| positive(v))
        {
            return Err(Error::InvalidArgument(
                "normalization constants must be positive and match the channel counts".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruLayer {
    pub w_i: usize,
    pub b_i: usize,
    pub w_h: usize,
    pub b_h: usize,
}

/// Stacked GRU with gates ordered `(r, z, n)` along the columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    pub layers: Vec<GruLayer>,
    pub hidden: usize,
}

impl Gru {
    pub fn init(ps: &mut ParamSet, prefix: &str, input: usize, hidden: usize, n_layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let fan_in = if l == 0 { input } else { hidden };
            let w_i = ps.push(format!("{prefix}.{l}.w_i"), glorot(fan_in, 3 * hidden, rng));
            let b_i = ps.push(format!("{prefix}.{l}.b_i"), uniform_bias(hidden, 3 * hidden, rng));
            let mut wh = vec![0.0; hidden * 3 * hidden];
            for g in 0..3 {
                let q = orthogonal(hidden, hidden, rng);
                for r in 0..hidden {
                    wh[r * 3 * hidden + g * hidden..r * 3 * hidden + (g + 1) * hidden].copy_from_slice(q.row(r));
                }
            }
            let w_h = ps.push(format!("{prefix}.{l}.w_h"), Tensor::from_parts(vec![hidden, 3 * hidden], wh));
            let b_h = ps.push(format!("{prefix}.{l}.b_h"), uniform_bias(hidden, 3 * hidden, rng));
            layers.push(GruLayer { w_i, b_i, w_h, b_h });
        }
        Gru { layers, hidden }
    }

    /// Runs the stack over `(T*B, input)` inputs laid out time-major and
    /// returns the last layer's final hidden state `(B, hidden)`.
    pub fn forward<'t>(&self, p: &[Var<'t>], inputs: &Var<'t>, batch: usize) -> Result<Var<'t>> {
        let tape = inputs.tape();
        let h = self.hidden;
        let steps = inputs.shape()[0] / batch.max(1);
        let mut seq_in = inputs.clone();
        let mut last = tape.constant(Tensor::zeros(&[batch, h]));
        for layer in &self.layers {
            let gi_all = seq_in.matmul(&p[layer.w_i])?.add_row(&p[layer.b_i])?;
            let mut state = tape.constant(Tensor::zeros(&[batch, h]));
            let mut outs = Vec::with_capacity(steps);
            for t in 0..steps {
                let gi = gi_all.slice(0, t * batch, batch)?;
                let gh = state.matmul(&p[layer.w_h])?.add_row(&p[layer.b_h])?;
                let r = gi.slice(1, 0, h)?.add(&gh.slice(1, 0, h)?)?.sigmoid();
                let z = gi.slice(1, h, h)?.add(&gh.slice(1, h, h)?)?.sigmoid();
                let n = gi.slice(1, 2 * h, h)?.add(&r.mul(&gh.slice(1, 2 * h, h)?)?)?.tanh();
                state = n.add(&z.mul(&state.sub(&n)?)?)?;
                outs.push(state.clone());
            }
            last = state;
            if outs.is_empty() {
                break;
            }
            seq_in = concat(&outs, 0)?;
        }
        Ok(last)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Branch {
    Ncde(Ncde),
    Gru(Gru),
}

/// A normalized input signal with its control path.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub signal: TimeSeriesSignal,
    pub path: ControlPath,
}

impl Prepared {
    pub fn from_normalized(signal: TimeSeriesSignal) -> Result<Self> {
        let path = ControlPath::build(&signal)?;
        Ok(Prepared { signal, path })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldPrediction {
    /// `(n_queries, c)` in field units.
    pub values: Tensor,
    pub channels: Vec<String>,
}

pub fn channel_names(c: usize) -> Vec<String> {
    if c == 1 {
        vec!["u".to_string()]
    } else {
        (0..c).map(|k| format!("u{k}")).collect()
    }
}

/// Inner-product head: `out[q, k] = sum_i b[k, i] * trunk[q, i] + beta[k]`.
pub fn inner_product(b: &Tensor, beta: &[f64], trunk: &Tensor) -> Result<Tensor> {
    if b.shape().len() != 2 || trunk.shape().len() != 2 {
        return Err(Error::shape("inner_product", b.shape(), trunk.shape()));
    }
    let (c, h, n) = (b.shape()[0], b.shape()[1], trunk.shape()[0]);
    if trunk.shape()[1] != h || beta.len() != c {
        return Err(Error::shape("inner_product", b.shape(), trunk.shape()));
    }
    let mut out = vec![0.0; n * c];
    crate::autodiff::gemm(trunk.data(), (n, h), false, b.data(), (c, h), true, &mut out, false);
    for row in out.chunks_mut(c.max(1)) {
        for (v, bk) in row.iter_mut().zip(beta) {
            *v += bk;
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Training queries shared by every sample in a batch: pairs of
/// `(time index, point index)` into the dataset grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub time_idx: Vec<usize>,
    pub point_idx: Vec<usize>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.time_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time_idx.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorModel {
    pub config: ModelConfig,
    pub norm: Normalization,
    /// Used for inference solves.
    pub solver: SolverConfig,
    /// Normalized training time grid (spatial trunk only).
    pub train_times: Vec<f64>,
    pub seed: u64,
    pub params: ParamSet,
    pub branch: Branch,
    pub head: Linear,
    pub beta: usize,
    pub trunk: Mlp,
}

impl OperatorModel {
    pub fn new(
        config: ModelConfig,
        norm: Normalization,
        solver: SolverConfig,
        train_times: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        norm.validate(&config)?;
        solver.validate()?;
        if config.trunk == TrunkKind::Spatial && train_times.len() < 2 {
            return Err(Error::InvalidArgument("the spatial trunk needs the training time grid".into()));
        }
        if train_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("training times must be strictly increasing".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let branch = match config.kind {
            ModelKind::Ncde => Branch::Ncde(Ncde::init(
                &mut ps,
                "branch",
                NcdeDims {
                    latent: config.latent,
                    path_dim: config.input_channels + 1,
                    width: config.field_width,
                    depth: config.field_depth,
                },
                &mut rng,
            )),
            ModelKind::Gru => Branch::Gru(Gru::init(
                &mut ps,
                "branch",
                config.input_channels,
                config.gru_hidden,
                config.gru_layers,
                &mut rng,
            )),
        };
        let head = Linear::init(
            &mut ps,
            "head",
            config.branch_output_dim(),
            config.output_channels * config.embed,
            &mut rng,
        );
        let beta = ps.push("head.beta", Tensor::zeros(&[config.output_channels]));
        let mut tdims = vec![config.trunk_input_dim()];
        tdims.extend(std::iter::repeat_n(config.trunk_width, config.trunk_depth - 1));
        tdims.push(config.embed);
        let trunk = Mlp::init(&mut ps, "trunk", &tdims, true, Activation::Gelu, Activation::Identity, &mut rng);
        let train_times = if config.trunk == TrunkKind::Spatial { train_times } else { Vec::new() };
        Ok(OperatorModel {
            config,
            norm,
            solver,
            train_times,
            seed,
            params: ps,
            branch,
            head,
            beta,
            trunk,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.output_channels
    }

    pub fn embed(&self) -> usize {
        self.config.embed
    }

    /// Normalizes a raw signal and builds its path.
    pub fn prepare(&self, raw: &TimeSeriesSignal) -> Result<Prepared> {
        let signal = raw.normalized(0.0, self.norm.time_scale, &self.norm.signal_scale)?;
        Prepared::from_normalized(signal)
    }

    /// Branch output for a tape batch: `(B, c*h)`.
    pub fn embed_batch<'t>(
        &self,
        p: &[Var<'t>],
        inputs: &[&Prepared],
        fixed_steps: usize,
    ) -> Result<Var<'t>> {
        let features = match &self.branch {
            Branch::Ncde(ncde) => {
                let paths: Vec<&ControlPath> = inputs.iter().map(|x| &x.path).collect();
                ncde.forward_tape(p, &paths, Method::Rk4, fixed_steps)?
            }
            Branch::Gru(gru) => {
                let x = gru_inputs(p[self.beta].tape(), inputs)?;
                gru.forward(p, &x, inputs.len())?
            }
        };
        self.head.forward(p, &features)
    }

    /// Head applied to externally supplied branch features `(B, d)`.
    pub fn head_forward<'t>(&self, p: &[Var<'t>], features: &Var<'t>) -> Result<Var<'t>> {
        self.head.forward(p, features)
    }

    pub fn trunk_vars<'t>(&self, p: &[Var<'t>], queries: &Var<'t>) -> Result<Var<'t>> {
        if queries.shape().len() != 2 || queries.shape()[1] != self.config.trunk_input_dim() {
            return Err(Error::shape("trunk", &[self.config.trunk_input_dim()], queries.shape()));
        }
        self.trunk.forward(p, queries)
    }

    /// `(R, h)` rows of `b` against `(Q, h)` trunk rows plus the bias of each
    /// row's channel; result `(R, Q)`.
    pub fn combine<'t>(&self, p: &[Var<'t>], b_rows: &Var<'t>, trunk: &Var<'t>) -> Result<Var<'t>> {
        let tape = trunk.tape();
        let c = self.channels();
        let rows = b_rows.shape()[0];
        let q = trunk.shape()[0];
        let ones = tape.constant(Tensor::full(&[q, 1], 1.0));
        let t_aug = concat(&[trunk.clone(), ones], 1)?;
        let idx: Vec<usize> = (0..rows).map(|r| r % c).collect();
        let beta_rows = p[self.beta].gather(Arc::new(idx), &[rows, 1])?;
        let b_aug = concat(&[b_rows.clone(), beta_rows], 1)?;
        b_aug.matmul_t(&t_aug, false, true)
    }

    /// Normalized predictions at the batch queries, `(B*c, Q)` with row
    /// `b*c + k` holding channel `k` of sample `b`. `times` and `coords` are
    /// the dataset grid (normalized time, spatial coordinates).
    pub fn batch_predictions<'t>(
        &self,
        p: &[Var<'t>],
        inputs: &[&Prepared],
        queries: &QueryBatch,
        times: &[f64],
        coords: &Tensor,
        fixed_steps: usize,
    ) -> Result<Var<'t>> {
        let tape = p[self.beta].tape();
        let (b, c, h) = (inputs.len(), self.channels(), self.embed());
        let dx = self.config.spatial_dims;
        match self.config.trunk {
            TrunkKind::SpaceTime => {
                let mut q = Vec::with_capacity(queries.len() * (dx + 1));
                for (&j, &pt) in queries.time_idx.iter().zip(&queries.point_idx) {
                    q.extend_from_slice(coords.row(pt));
                    q.push(times[j]);
                }
                let qv = tape.constant(Tensor::new(vec![queries.len(), dx + 1], q)?);
                let trunk = self.trunk_vars(p, &qv)?;
                let emb = self.embed_batch(p, inputs, fixed_steps)?.reshape(&[b * c, h])?;
                self.combine(p, &emb, &trunk)
            }
            TrunkKind::Spatial => {
                let Branch::Ncde(ncde) = &self.branch else {
                    return Err(Error::UnsupportedModel("spatial trunk requires the NCDE branch".into()));
                };
                if times.len() != self.train_times.len() {
                    return Err(Error::InvalidArgument("dataset time grid differs from the model's".into()));
                }
                // unique spatial points in first-seen order
                let mut slot = std::collections::HashMap::new();
                let mut pts = Vec::new();
                for &pt in &queries.point_idx {
                    slot.entry(pt).or_insert_with(|| {
                        pts.push(pt);
                        pts.len() - 1
                    });
                }
                let mut x = Vec::with_capacity(pts.len() * dx);
                for &pt in &pts {
                    x.extend_from_slice(coords.row(pt));
                }
                let xv = tape.constant(Tensor::new(vec![pts.len(), dx], x)?);
                let trunk = self.trunk_vars(p, &xv)?;
                let paths: Vec<&ControlPath> = inputs.iter().map(|x| &x.path).collect();
                let zs = ncde.forward_tape_at(p, &paths, &self.train_times, Method::Rk4, fixed_steps)?;
                let z_all = concat(&zs, 0)?; // (T*B, d)
                let emb = self.head.forward(p, &z_all)?.reshape(&[times.len() * b * c, h])?;
                let full = self.combine(p, &emb, &trunk)?; // (T*B*c, U)
                let u = pts.len();
                let mut idx = Vec::with_capacity(b * c * queries.len());
                for s in 0..b {
                    for k in 0..c {
                        for (&j, &pt) in queries.time_idx.iter().zip(&queries.point_idx) {
                            let row = (j * b + s) * c + k;
                            idx.push(row * u + slot[&pt]);
                        }
                    }
                }
                full.gather(Arc::new(idx), &[b * c, queries.len()])
            }
        }
    }

    /// Branch embedding `(c, h)` for one input, using the inference solver.
    pub fn branch_forward(&self, input: &Prepared) -> Result<Tensor> {
        let tape = Tape::inference();
        let p = self.params.leaves(&tape);
        let features = match &self.branch {
            Branch::Ncde(ncde) => {
                let z = ncde.forward(&self.params, &input.path, &self.solver, &[])?.z_end;
                tape.constant(Tensor::new(vec![1, z.len()], z)?)
            }
            Branch::Gru(gru) => {
                let x = gru_inputs(&tape, &[input])?;
                gru.forward(&p, &x, 1)?
            }
        };
        let b = self.head.forward(&p, &features)?;
        b.value().reshape(&[self.channels(), self.embed()])
    }

    /// Branch embeddings `(c, h)` at every training time (spatial trunk).
    pub fn branch_series(&self, input: &Prepared) -> Result<Vec<Tensor>> {
        let Branch::Ncde(ncde) = &self.branch else {
            return Err(Error::UnsupportedModel("time-indexed branch states require the NCDE branch".into()));
        };
        let sol = ncde.forward(&self.params, &input.path, &self.solver, &self.train_times)?;
        let tape = Tape::inference();
        let p = self.params.leaves(&tape);
        sol.z_at
            .into_iter()
            .map(|z| {
                let zv = tape.constant(Tensor::new(vec![1, z.len()], z)?);
                self.head.forward(&p, &zv)?.value().reshape(&[self.channels(), self.embed()])
            })
            .collect()
    }

    /// Trunk outputs `(n, h)` for normalized query rows.
    pub fn trunk_forward(&self, queries: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let p = self.params.leaves(&tape);
        let q = tape.constant(queries.clone());
        Ok(self.trunk_vars(&p, &q)?.value().clone())
    }

    pub fn beta_values(&self) -> &[f64] {
        self.params.get(self.beta).data()
    }

    fn denormalize(&self, mut values: Vec<f64>) -> Vec<f64> {
        let c = self.channels();
        for row in values.chunks_mut(c) {
            for (v, s) in row.iter_mut().zip(&self.norm.target_scale) {
                *v *= s;
            }
        }
        values
    }

    /// Field-unit prediction from a branch embedding and precomputed trunk
    /// outputs.
    pub fn predict_with(&self, b: &Tensor, trunk: &Tensor) -> Result<FieldPrediction> {
        let raw = inner_product(b, self.beta_values(), trunk)?;
        let shape = raw.shape().to_vec();
        Ok(FieldPrediction {
            values: Tensor::new(shape, self.denormalize(raw.into_vec()))?,
            channels: channel_names(self.channels()),
        })
    }

    /// Prediction at normalized `(x, t)` query rows.
    pub fn predict(&self, input: &Prepared, queries: &Tensor) -> Result<FieldPrediction> {
        if self.config.trunk != TrunkKind::SpaceTime {
            return Err(Error::UnsupportedModel(
                "this model has a spatial-only trunk; use predict_spatial_only with a training time index".into(),
            ));
        }
        let b = self.branch_forward(input)?;
        let t = self.trunk_forward(queries)?;
        self.predict_with(&b, &t)
    }

    /// Prediction at spatial points for training time step `j` (1-based).
    pub fn predict_spatial_only(&self, input: &Prepared, points: &Tensor, j: usize) -> Result<FieldPrediction> {
        if self.config.trunk != TrunkKind::Spatial {
            return Err(Error::UnsupportedModel("model does not have a spatial-only trunk".into()));
        }
        let n = self.train_times.len();
        if j == 0 || j > n {
            return Err(Error::TimeIndexOutOfRange { index: j, len: n });
        }
        let b = &self.branch_series(input)?[j - 1];
        let t = self.trunk_forward(points)?;
        self.predict_with(b, &t)
    }

    pub fn to_container(&self) -> Result<Container> {
        let c = &self.config;
        let mut out = Container::new(CHECKPOINT_MAGIC);
        out.set("model", c.kind.name())?;
        out.set("trunk", c.trunk.name())?;
        for (k, v) in [
            ("input_channels", c.input_channels),
            ("spatial_dims", c.spatial_dims),
            ("output_channels", c.output_channels),
            ("latent", c.latent),
            ("field_width", c.field_width),
            ("field_depth", c.field_depth),
            ("trunk_width", c.trunk_width),
            ("trunk_depth", c.trunk_depth),
            ("embed", c.embed),
            ("gru_hidden", c.gru_hidden),
            ("gru_layers", c.gru_layers),
        ] {
            out.set(k, v)?;
        }
        out.set("seed", self.seed)?;
        out.set("time_scale", format!("{:?}", self.norm.time_scale))?;
        out.set("signal_scale", format_list(&self.norm.signal_scale))?;
        out.set("target_scale", format_list(&self.norm.target_scale))?;
        out.set("solver", self.solver.method.name())?;
        out.set("rtol", format!("{:?}", self.solver.rtol))?;
        out.set("atol", format!("{:?}", self.solver.atol))?;
        out.set("max_steps", self.solver.max_steps)?;
        out.set("fixed_steps", self.solver.fixed_steps)?;
        out.push_array("train_times", Tensor::vector(self.train_times.clone()))?;
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            out.push_array(name, t.clone())?;
        }
        Ok(out)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.magic() != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("not a checkpoint: {:?}", c.magic())));
        }
        let config = ModelConfig {
            kind: c.parse("model")?,
            trunk: c.parse("trunk")?,
            input_channels: c.parse("input_channels")?,
            spatial_dims: c.parse("spatial_dims")?,
            output_channels: c.parse("output_channels")?,
            latent: c.parse("latent")?,
            field_width: c.parse("field_width")?,
            field_depth: c.parse("field_depth")?,
            trunk_width: c.parse("trunk_width")?,
            trunk_depth: c.parse("trunk_depth")?,
            embed: c.parse("embed")?,
            gru_hidden: c.parse("gru_hidden")?,
            gru_layers: c.parse("gru_layers")?,
        };
        config.validate()?;
        let norm = Normalization {
            time_scale: c.parse("time_scale")?,
            signal_scale: c.parse_list("signal_scale")?,
            target_scale: c.parse_list("target_scale")?,
        };
        let solver = SolverConfig {
            method: c.parse("solver")?,
            rtol: c.parse("rtol")?,
            atol: c.parse("atol")?,
            max_steps: c.parse("max_steps")?,
            fixed_steps: c.parse("fixed_steps")?,
        };
        let train_times = c.array("train_times")?.data().to_vec();
        // make sure the file really holds this many weights before allocating
        let stored: usize = c
            .arrays()
            .iter()
            .filter(|(n, _)| n != "train_times")
            .map(|(_, t)| t.len())
            .sum();
        if config.param_count() != Some(stored) {
            return Err(Error::Format(format!(
                "checkpoint holds {stored} weights, configuration needs {:?}",
                config.param_count()
            )));
        }
        let mut model = OperatorModel::new(config, norm, solver, train_times, c.parse("seed")?)?;
        if c.arrays().len() != model.params.len() + 1 {
            return Err(Error::Format("unexpected arrays in checkpoint".into()));
        }
        for i in 0..model.params.len() {
            let name = model.params.names()[i].clone();
            let t = c.array(&name)?;
            model.params.set(i, t.clone()).map_err(|_| {
                Error::Format(format!("array {name} has shape {:?}", t.shape()))
            })?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, CHECKPOINT_MAGIC)?)
    }
}

/// Stacks equal-length normalized signals time-major: `(T*B, channels)`.
fn gru_inputs<'t>(tape: &'t Tape, inputs: &[&Prepared]) -> Result<Var<'t>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (steps, ch) = (first.signal.len(), first.signal.channels());
    if inputs.iter().any(|x| x.signal.len() != steps || x.signal.channels() != ch) {
        return Err(Error::UnsupportedModel(
            "the GRU baseline needs every signal on the same regular grid".into(),
        ));
    }
    let b = inputs.len();
    let mut data = vec![0.0; steps * b * ch];
    for (s, x) in inputs.iter().enumerate() {
        for t in 0..steps {
            data[(t * b + s) * ch..(t * b + s + 1) * ch].copy_from_slice(x.signal.observation(t));
        }
    }
    Ok(tape.constant(Tensor::new(vec![steps * b, ch], data)?))
}
