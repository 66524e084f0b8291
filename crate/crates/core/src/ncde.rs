//! Neural controlled differential equation branch.
//!
//! The latent state follows `dz/dt = f(z) · dX/dt` with `z(t0) = phi(X(t0))`,
//! where `f` is an MLP whose output is reshaped to `(latent, path_dim)`.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{AdjointPhase, Error, Result};
use crate::nn::{Activation, Linear, Mlp, ParamSet};
use crate::ode::{integrate_adaptive, integrate_fixed, integrate_fixed_at, Method, SolverConfig};
use crate::path::ControlPath;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NcdeDims {
    pub latent: usize,
    /// Path channels including time.
    pub path_dim: usize,
    pub width: usize,
    /// Number of affine layers in the vector field.
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ncde {
    pub dims: NcdeDims,
    pub init: Linear,
    pub field: Mlp,
}

/// Result of an inference solve for one path.
#[derive(Debug, Clone, PartialEq)]
pub struct NcdeSolution {
    pub z_end: Vec<f64>,
    /// Latent states at the requested query times.
    pub z_at: Vec<Vec<f64>>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl Ncde {
    pub fn init(ps: &mut ParamSet, prefix: &str, dims: NcdeDims, rng: &mut impl Rng) -> Self {
        assert!(dims.depth >= 1);
        let init = Linear::init(ps, &format!("{prefix}.init"), dims.path_dim, dims.latent, rng);
        let mut widths = vec![dims.latent];
        widths.extend(std::iter::repeat_n(dims.width, dims.depth - 1));
        widths.push(dims.latent * dims.path_dim);
        let field = Mlp::init(
            ps,
            &format!("{prefix}.field"),
            &widths,
            false,
            Activation::Gelu,
            Activation::Tanh,
            rng,
        );
        Ncde { dims, init, field }
    }

    /// Indices of all parameters owned by the branch dynamics.
    pub fn param_indices(&self) -> Vec<usize> {
        let mut idx = vec![self.init.w, self.init.b];
        idx.extend(self.field.param_indices());
        idx
    }

    fn check_path(&self, path: &ControlPath) -> Result<()> {
        if path.dim() != self.dims.path_dim {
            return Err(Error::shape("ncde_path", &[self.dims.path_dim], &[path.dim()]));
        }
        Ok(())
    }

    /// `z(t0)` for a batch of paths, shape `(B, latent)`.
    pub fn initial_state<'t>(&self, p: &[Var<'t>], paths: &[&ControlPath]) -> Result<Var<'t>> {
        let w = self.dims.path_dim;
        let mut x0 = vec![0.0; paths.len() * w];
        for (b, path) in paths.iter().enumerate() {
            self.check_path(path)?;
            path.eval_into(path.start(), &mut x0[b * w..(b + 1) * w]);
        }
        let tape = p[self.init.w].tape();
        let x0 = tape.constant(Tensor::new(vec![paths.len(), w], x0)?);
        self.init.forward(p, &x0)
    }

    /// `f(z) · xdot` for batched `z` (B, latent) and `xdot` (B, path_dim).
    pub fn rhs<'t>(&self, p: &[Var<'t>], z: &Var<'t>, xdot: &Var<'t>) -> Result<Var<'t>> {
        self.field.forward(p, z)?.row_contract(xdot, self.dims.path_dim)
    }

    fn xdot_batch<'t>(&self, tape: &'t Tape, paths: &[&ControlPath], t: f64) -> Result<Var<'t>> {
        let w = self.dims.path_dim;
        let mut buf = vec![0.0; paths.len() * w];
        for (b, path) in paths.iter().enumerate() {
            path.deriv_into(t, &mut buf[b * w..(b + 1) * w]);
        }
        Ok(tape.constant(Tensor::new(vec![paths.len(), w], buf)?))
    }

    fn common_domain(paths: &[&ControlPath]) -> Result<(f64, f64)> {
        let first = paths
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch of paths".into()))?;
        let (t0, t1) = (first.start(), first.end());
        for p in paths {
            if (p.start() - t0).abs() > 1e-12 || (p.end() - t1).abs() > 1e-12 {
                return Err(Error::InvalidArgument(
                    "paths in a batch must share the same time domain".into(),
                ));
            }
        }
        Ok((t0, t1))
    }

    /// Fixed-step solve of a batch recorded on the tape; returns `z(T)` as
    /// `(B, latent)`.
    pub fn forward_tape<'t>(
        &self,
        p: &[Var<'t>],
        paths: &[&ControlPath],
        method: Method,
        n_steps: usize,
    ) -> Result<Var<'t>> {
        let (t0, t1) = Self::common_domain(paths)?;
        let tape = p[self.init.w].tape();
        let z0 = self.initial_state(p, paths)?;
        let mut f = |t: f64, z: &Var<'t>| -> Result<Var<'t>> {
            let xdot = self.xdot_batch(tape, paths, t)?;
            self.rhs(p, z, &xdot)
        };
        integrate_fixed(&mut f, z0, t0, t1, n_steps, method)
    }

    /// Fixed-step solve reporting `z` at each of `times` (the first of which
    /// must be the path start).
    pub fn forward_tape_at<'t>(
        &self,
        p: &[Var<'t>],
        paths: &[&ControlPath],
        times: &[f64],
        method: Method,
        n_steps: usize,
    ) -> Result<Vec<Var<'t>>> {
        let (t0, _) = Self::common_domain(paths)?;
        if times.first().is_none_or(|&t| (t - t0).abs() > 1e-12) {
            return Err(Error::InvalidArgument("output times must start at the path start".into()));
        }
        let tape = p[self.init.w].tape();
        let z0 = self.initial_state(p, paths)?;
        let mut f = |t: f64, z: &Var<'t>| -> Result<Var<'t>> {
            let xdot = self.xdot_batch(tape, paths, t)?;
            self.rhs(p, z, &xdot)
        };
        integrate_fixed_at(&mut f, z0, times, n_steps, method)
    }

    /// Inference solve for one path. Tsit5 runs adaptively; the fixed-step
    /// methods use `cfg.fixed_steps` steps over the path domain.
    pub fn forward(
        &self,
        params: &ParamSet,
        path: &ControlPath,
        cfg: &SolverConfig,
        query_times: &[f64],
    ) -> Result<NcdeSolution> {
        cfg.validate()?;
        self.check_path(path)?;
        let tape = Tape::inference();
        let p = params.leaves(&tape);
        let z0 = self.initial_state(&p, &[path])?.value().data().to_vec();
        let (t0, t1) = (path.start(), path.end());
        if query_times.iter().any(|t| !(t0..=t1).contains(t)) {
            return Err(Error::InvalidArgument("query time outside the path domain".into()));
        }
        let d = self.dims.latent;
        let w = self.dims.path_dim;
        let mut xdot = vec![0.0; w];
        match cfg.method {
            Method::Tsit5 => {
                let mut f = |t: f64, z: &[f64], out: &mut [f64]| -> Result<()> {
                    path.deriv_into(t, &mut xdot);
                    let zv = tape.constant(Tensor::new(vec![1, d], z.to_vec())?);
                    let xv = tape.constant(Tensor::new(vec![1, w], xdot.clone())?);
                    out.copy_from_slice(self.rhs(&p, &zv, &xv)?.value().data());
                    Ok(())
                };
                let sol = integrate_adaptive(&mut f, &z0, t0, t1, cfg, query_times)?;
                Ok(NcdeSolution {
                    z_end: sol.state,
                    z_at: sol.dense,
                    accepted_steps: sol.accepted,
                    rejected_steps: sol.rejected,
                })
            }
            method => {
                let mut f = |t: f64, z: &Vec<f64>| -> Result<Vec<f64>> {
                    path.deriv_into(t, &mut xdot);
                    let zv = tape.constant(Tensor::new(vec![1, d], z.clone())?);
                    let xv = tape.constant(Tensor::new(vec![1, w], xdot.clone())?);
                    Ok(self.rhs(&p, &zv, &xv)?.value().data().to_vec())
                };
                // merge the query times into the output grid
                let mut grid = vec![t0];
                for &q in query_times {
                    if q > *grid.last().unwrap_or(&t0) {
                        grid.push(q);
                    }
                }
                if t1 > grid[grid.len() - 1] {
                    grid.push(t1);
                }
                let states = if grid.len() == 1 {
                    vec![z0.clone()]
                } else {
                    integrate_fixed_at(&mut f, z0.clone(), &grid, cfg.fixed_steps, method)?
                };
                let lookup = |q: f64| -> Vec<f64> {
                    let i = grid.iter().position(|&g| g == q).unwrap_or(0);
                    states[i].clone()
                };
                let z_at = query_times.iter().map(|&q| lookup(q)).collect();
                Ok(NcdeSolution {
                    z_end: states[states.len() - 1].clone(),
                    z_at,
                    accepted_steps: cfg.fixed_steps,
                    rejected_steps: 0,
                })
            }
        }
    }

    /// Vector–Jacobian products of the field output at `z` against the
    /// cotangent `cot` (length `latent * path_dim`): returns the gradient with
    /// respect to `z` and to each field parameter.
    pub fn jvp_field(&self, params: &ParamSet, z: &[f64], cot: &[f64]) -> Result<(Vec<f64>, Vec<(usize, Tensor)>)> {
        let d = self.dims.latent;
        let out_dim = d * self.dims.path_dim;
        if z.len() != d || cot.len() != out_dim {
            return Err(Error::shape("jvp_field", &[d, out_dim], &[z.len(), cot.len()]));
        }
        let tape = Tape::new();
        let p = params.leaves(&tape);
        let zv = tape.leaf(Tensor::new(vec![1, d], z.to_vec())?);
        let f = self.field.forward(&p, &zv)?;
        let mut g = tape.backward_with_seed(&f, &Tensor::new(vec![1, out_dim], cot.to_vec())?)?;
        let dz = g.take(&zv).into_vec();
        let dtheta = self
            .field
            .param_indices()
            .into_iter()
            .map(|i| (i, g.take(&p[i])))
            .collect();
        Ok((dz, dtheta))
    }

    /// Gradient of a loss with respect to the branch parameters, given
    /// `z(T)` from a forward solve and `dL/dz(T)`. Integrates the augmented
    /// system `[z, a, p]` backward from `T` to `t0` with adaptive Tsit5.
    pub fn adjoint_backward(
        &self,
        params: &ParamSet,
        path: &ControlPath,
        cfg: &SolverConfig,
        z_end: &[f64],
        dl_dz: &[f64],
    ) -> Result<Vec<(usize, Tensor)>> {
        cfg.validate()?;
        self.check_path(path)?;
        let d = self.dims.latent;
        let w = self.dims.path_dim;
        if z_end.len() != d || dl_dz.len() != d {
            return Err(Error::shape("adjoint_backward", &[d], &[z_end.len(), dl_dz.len()]));
        }
        let field_idx = self.field.param_indices();
        let n_theta: usize = field_idx.iter().map(|&i| params.get(i).len()).sum();
        let mut y_end = Vec::with_capacity(2 * d + n_theta);
        y_end.extend_from_slice(z_end);
        y_end.extend_from_slice(dl_dz);
        y_end.resize(2 * d + n_theta, 0.0);

        let mut xdot = vec![0.0; w];
        let mut last_z_finite = true;
        let mut f = |t: f64, y: &[f64], out: &mut [f64]| -> Result<()> {
            path.deriv_into(t, &mut xdot);
            last_z_finite = y[..d].iter().all(|v| v.is_finite());
            let tape = Tape::new();
            let p = params.leaves(&tape);
            let zv = tape.leaf(Tensor::new(vec![1, d], y[..d].to_vec())?);
            let xv = tape.constant(Tensor::new(vec![1, w], xdot.clone())?);
            let dz = self.rhs(&p, &zv, &xv)?;
            out[..d].copy_from_slice(dz.value().data());
            let mut g = tape.backward_with_seed(&dz, &Tensor::new(vec![1, d], y[d..2 * d].to_vec())?)?;
            for (o, v) in out[d..2 * d].iter_mut().zip(g.take(&zv).data()) {
                *o = -v;
            }
            let mut k = 2 * d;
            for &i in &field_idx {
                let gi = g.take(&p[i]);
                for (o, v) in out[k..k + gi.len()].iter_mut().zip(gi.data()) {
                    *o = -v;
                }
                k += gi.len();
            }
            Ok(())
        };
        let sol = integrate_adaptive(&mut f, &y_end, path.end(), path.start(), cfg, &[]);
        let y0 = match sol {
            Ok(s) => s.state,
            Err(e @ (Error::SolverNonFinite { .. } | Error::MaxStepsExceeded { .. })) => {
                let phase = if last_z_finite {
                    AdjointPhase::AdjointBlowUp
                } else {
                    AdjointPhase::Reconstruction
                };
                return Err(Error::Adjoint {
                    phase,
                    source: Box::new(e),
                });
            }
            Err(e) => return Err(e),
        };
        if !y0[..d].iter().all(|v| v.is_finite()) {
            return Err(Error::Adjoint {
                phase: AdjointPhase::Reconstruction,
                source: Box::new(Error::NonFinite("reconstructed z(t0)".into())),
            });
        }

        let a0 = &y0[d..2 * d];
        let mut x0 = vec![0.0; w];
        path.eval_into(path.start(), &mut x0);
        let mut dw = vec![0.0; w * d];
        for i in 0..w {
            for j in 0..d {
                dw[i * d + j] = x0[i] * a0[j];
            }
        }
        let mut grads = vec![
            (self.init.w, Tensor::new(vec![w, d], dw)?),
            (self.init.b, Tensor::vector(a0.to_vec())),
        ];
        let mut k = 2 * d;
        for &i in &field_idx {
            let shape = params.get(i).shape().to_vec();
            let n = params.get(i).len();
            grads.push((i, Tensor::new(shape, y0[k..k + n].to_vec())?));
            k += n;
        }
        Ok(grads)
    }
}

/// Default inference tolerances are loose; the gradient cross-checks use
/// these tighter ones.
pub fn tight_solver() -> SolverConfig {
    SolverConfig {
        method: Method::Tsit5,
        ..SolverConfig::default().with_tolerances(1e-6, 1e-9)
    }
}
