//! Named parameter storage and the dense layers built on it.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered list of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Replaces tensor `i`, keeping its shape.
    pub fn set(&mut self, i: usize, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[i].shape() {
            return Err(Error::shape("param_set", self.tensors[i].shape(), value.shape()));
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Tape leaves for every parameter, in order.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Same names with all-zero tensors.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Gelu,
}

impl Activation {
    pub fn apply<'t>(self, x: &Var<'t>) -> Var<'t> {
        match self {
            Activation::Identity => x.clone(),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => x.gelu(),
        }
    }
}

/// Uniform Glorot matrix of shape `(fan_in, fan_out)`.
pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

/// Matrix of shape `(rows, cols)` with orthonormal columns (or rows, when
/// `rows < cols`), via Gram–Schmidt on a Gaussian draw.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let (n, m) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // m vectors of length n
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(m);
    while vecs.len() < m {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for u in &vecs {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            vecs.push(v);
        }
    }
    let mut data = vec![0.0; rows * cols];
    for (j, v) in vecs.iter().enumerate() {
        for (i, &x) in v.iter().enumerate() {
            if rows >= cols {
                data[i * cols + j] = x;
            } else {
                data[j * cols + i] = x;
            }
        }
    }
    Tensor::from_parts(vec![rows, cols], data)
}

/// Bias vector drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_bias(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::vector((0..fan_out).map(|_| rng.gen_range(-limit..limit)).collect())
}

/// `x · W + b` with `W` stored as `(fan_in, fan_out)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn init(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = ps.push(format!("{name}.w"), glorot(fan_in, fan_out, rng));
        let b = ps.push(format!("{name}.b"), uniform_bias(fan_in, fan_out, rng));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        x.matmul(&p[self.w])?.add_row(&p[self.b])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

/// Stack of affine layers with an activation between them and, optionally,
/// layer normalization after each hidden affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub norms: Vec<LayerNorm>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// `dims` lists the widths from input to output, so `dims.len() - 1`
    /// affine layers are created.
    pub fn init(
        ps: &mut ParamSet,
        prefix: &str,
        dims: &[usize],
        layer_norm: bool,
        hidden: Activation,
        output: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            layers.push(Linear::init(ps, &format!("{prefix}.{i}"), w[0], w[1], rng));
            if layer_norm && i + 2 < dims.len() {
                let gain = ps.push(format!("{prefix}.{i}.ln.gain"), Tensor::full(&[w[1]], 1.0));
                let bias = ps.push(format!("{prefix}.{i}.ln.bias"), Tensor::zeros(&[w[1]]));
                norms.push(LayerNorm { gain, bias });
            }
        }
        Mlp {
            layers,
            norms,
            hidden,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, &h)?;
            if i < last {
                if let Some(ln) = self.norms.get(i) {
                    h = h.layer_norm(&p[ln.gain], &p[ln.bias])?;
                }
                h = self.hidden.apply(&h);
            } else {
                h = self.output.apply(&h);
            }
        }
        Ok(h)
    }

    /// Parameter indices used by this network.
    pub fn param_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.layers.iter().flat_map(|l| [l.w, l.b]).collect();
        idx.extend(self.norms.iter().flat_map(|n| [n.gain, n.bias]));
        idx.sort_unstable();
        idx
    }
}
