//! Relative L2 metrics, percentile reports and the input resampling
//! experiment.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::operator::{Branch, OperatorModel, Prepared, TrunkKind};
use crate::path::{ControlPath, TimeSeriesSignal};
use crate::pde_data::OperatorDataset;

/// `|y_true - y_pred| / |y_true|` over every entry jointly.
pub fn relative_l2(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::shape("relative_l2", &[y_true.len()], &[y_pred.len()]));
    }
    let den: f64 = y_true.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(den > 0.0) {
        return Err(Error::InvalidArgument("relative L2 error of an all-zero truth is undefined".into()));
    }
    let num: f64 = y_true.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(num / den)
}

pub const PERCENTILES: [u32; 7] = [0, 10, 25, 50, 75, 90, 100];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub errors: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    /// `(percentile, value)` pairs, linear interpolation between order
    /// statistics.
    pub percentiles: Vec<(u32, f64)>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

impl ErrorReport {
    pub fn from_errors(errors: Vec<f64>) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::InvalidArgument("error report needs at least one sample".into()));
        }
        if errors.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite("per-sample error".into()));
        }
        let mut sorted = errors.clone();
        sorted.sort_by(f64::total_cmp);
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let percentiles = PERCENTILES.iter().map(|&p| (p, percentile(&sorted, p as f64))).collect();
        Ok(ErrorReport {
            mean,
            median: percentile(&sorted, 50.0),
            percentiles,
            errors,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("sample\trelative_l2\n");
        for (i, e) in self.errors.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{e:.17e}");
        }
        let _ = writeln!(s, "# samples {}", self.errors.len());
        let _ = writeln!(s, "# mean {:.17e}", self.mean);
        let _ = writeln!(s, "# median {:.17e}", self.median);
        for (p, v) in &self.percentiles {
            let _ = writeln!(s, "# p{p} {v:.17e}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Field-unit predictions on a dataset's full `(time, point)` grid, with the
/// trunk evaluated once.
pub struct GridPredictor<'m> {
    model: &'m OperatorModel,
    /// `(T*P, h)` for the space-time trunk, `(P, h)` for the spatial one.
    trunk: Tensor,
    times: usize,
    points: usize,
}

impl<'m> GridPredictor<'m> {
    pub fn new(model: &'m OperatorModel, data: &OperatorDataset) -> Result<Self> {
        let (t, p, dx) = (data.query_times.len(), data.points(), data.spatial_dims());
        if dx != model.config.spatial_dims || data.output_channels() != model.channels() {
            return Err(Error::InvalidArgument("dataset does not match the model".into()));
        }
        let trunk = match model.config.trunk {
            TrunkKind::SpaceTime => {
                let mut q = Vec::with_capacity(t * p * (dx + 1));
                for &time in &data.query_times {
                    for k in 0..p {
                        q.extend_from_slice(data.coords.row(k));
                        q.push(time / model.norm.time_scale);
                    }
                }
                model.trunk_forward(&Tensor::new(vec![t * p, dx + 1], q)?)?
            }
            TrunkKind::Spatial => {
                let grid: Vec<f64> = data.query_times.iter().map(|x| x / model.norm.time_scale).collect();
                let same = grid.len() == model.train_times.len()
                    && grid.iter().zip(&model.train_times).all(|(a, b)| (a - b).abs() <= 1e-12);
                if !same {
                    return Err(Error::InvalidArgument(
                        "spatial-only trunk can only predict on its training time grid".into(),
                    ));
                }
                model.trunk_forward(&data.coords)?
            }
        };
        Ok(GridPredictor {
            model,
            trunk,
            times: t,
            points: p,
        })
    }

    /// Predictions laid out `(T, P, c)` like the dataset targets.
    pub fn predict(&self, input: &Prepared) -> Result<Vec<f64>> {
        match self.model.config.trunk {
            TrunkKind::SpaceTime => {
                let b = self.model.branch_forward(input)?;
                Ok(self.model.predict_with(&b, &self.trunk)?.values.into_vec())
            }
            TrunkKind::Spatial => {
                let series = self.model.branch_series(input)?;
                let mut out = Vec::with_capacity(self.times * self.points * self.model.channels());
                for b in &series {
                    out.extend(self.model.predict_with(b, &self.trunk)?.values.into_vec());
                }
                Ok(out)
            }
        }
    }
}

/// Per-sample relative errors on the full grid of `data`.
pub fn error_report(model: &OperatorModel, data: &OperatorDataset) -> Result<ErrorReport> {
    let grid = GridPredictor::new(model, data)?;
    let errors = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let run = || -> Result<f64> {
                let input = model.prepare(&data.signal(i)?)?;
                relative_l2(data.target(i), &grid.predict(&input)?)
            };
            run().map_err(|e| e.for_sample(i))
        })
        .collect::<Result<Vec<f64>>>()?;
    ErrorReport::from_errors(errors)
}

/// Sparser or denser copy of `signal`. Factor 0.5 keeps the even indices and
/// the final observation; factor 2 inserts midpoints read off the signal's
/// own Hermite path.
pub fn resample_signal(signal: &TimeSeriesSignal, factor: f64) -> Result<TimeSeriesSignal> {
    let n = signal.len();
    if n < 3 {
        return Err(Error::InvalidSignal(format!("resampling needs at least 3 observations, got {n}")));
    }
    let d = signal.channels();
    if factor == 1.0 {
        return Ok(signal.clone());
    }
    if factor == 0.5 {
        let mut idx: Vec<usize> = (0..n).step_by(2).collect();
        if idx[idx.len() - 1] != n - 1 {
            idx.push(n - 1);
        }
        let times = idx.iter().map(|&i| signal.times()[i]).collect();
        let values = idx.iter().flat_map(|&i| signal.observation(i).to_vec()).collect();
        return TimeSeriesSignal::new(times, values, d);
    }
    if factor == 2.0 {
        let path = ControlPath::build(signal)?;
        let mut times = Vec::with_capacity(2 * n - 1);
        let mut values = Vec::with_capacity((2 * n - 1) * d);
        let mut buf = vec![0.0; path.dim()];
        for i in 0..n {
            if i > 0 {
                let tm = 0.5 * (signal.times()[i - 1] + signal.times()[i]);
                path.eval_into(tm, &mut buf);
                times.push(tm);
                values.extend_from_slice(&buf[..d]);
            }
            times.push(signal.times()[i]);
            values.extend_from_slice(signal.observation(i));
        }
        return TimeSeriesSignal::new(times, values, d);
    }
    Err(Error::InvalidArgument(format!("unsupported resampling factor {factor}")))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResamplingReport {
    pub factors: Vec<f64>,
    /// Observation count of the first sample under each factor.
    pub knot_counts: Vec<usize>,
    /// `discrepancy[f][s]`: relative L2 gap between the predictions for
    /// sample `s` under factor `f` and under factor 1.
    pub discrepancy: Vec<Vec<f64>>,
}

impl ResamplingReport {
    /// Fraction of samples whose discrepancy is at most `bound` under
    /// factor index `f`.
    pub fn fraction_within(&self, f: usize, bound: f64) -> f64 {
        let d = &self.discrepancy[f];
        d.iter().filter(|&&x| x <= bound).count() as f64 / d.len().max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("sample");
        for f in &self.factors {
            let _ = write!(s, "\tfactor_{f}");
        }
        s.push('\n');
        let n = self.discrepancy.first().map_or(0, Vec::len);
        for i in 0..n {
            let _ = write!(s, "{i}");
            for d in &self.discrepancy {
                let _ = write!(s, "\t{:.17e}", d[i]);
            }
            s.push('\n');
        }
        for (k, f) in self.factors.iter().enumerate() {
            let d = &self.discrepancy[k];
            let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
            let max = d.iter().copied().fold(0.0, f64::max);
            let _ = writeln!(
                s,
                "# factor {f} knots {} mean {mean:.17e} max {max:.17e} within_5e-2 {:.4}",
                self.knot_counts[k],
                self.fraction_within(k, 5e-2)
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Full-grid predictions of one sample under each resampling factor.
pub fn resampled_predictions(
    model: &OperatorModel,
    grid: &GridPredictor<'_>,
    signal: &TimeSeriesSignal,
    factors: &[f64],
) -> Result<Vec<Vec<f64>>> {
    factors
        .iter()
        .map(|&f| grid.predict(&model.prepare(&resample_signal(signal, f)?)?))
        .collect()
}

/// Predicts every sample of `data` under each input resampling factor at
/// the same trunk queries and compares against factor 1.
pub fn resolution_experiment(model: &OperatorModel, data: &OperatorDataset, factors: &[f64]) -> Result<ResamplingReport> {
    if let Branch::Gru(_) = model.branch {
        return Err(Error::UnsupportedModel(
            "the GRU branch reads a fixed sampling grid and cannot take resampled inputs".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("resampling experiment needs samples".into()));
    }
    let grid = GridPredictor::new(model, data)?;
    let mut all = factors.to_vec();
    all.push(1.0);
    let per_sample = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let run = || -> Result<Vec<f64>> {
                let sig = data.signal(i)?;
                let preds = resampled_predictions(model, &grid, &sig, &all)?;
                let base = &preds[preds.len() - 1];
                preds[..factors.len()]
                    .iter()
                    .map(|p| {
                        if base.iter().all(|&v| v == 0.0) && p == base {
                            Ok(0.0)
                        } else {
                            relative_l2(base, p)
                        }
                    })
                    .collect()
            };
            run().map_err(|e| e.for_sample(i))
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let sig0 = data.signal(0)?;
    let knot_counts = factors
        .iter()
        .map(|&f| resample_signal(&sig0, f).map(|s| s.len()))
        .collect::<Result<Vec<_>>>()?;
    let discrepancy = (0..factors.len())
        .map(|k| per_sample.iter().map(|row| row[k]).collect())
        .collect();
    Ok(ResamplingReport {
        factors: factors.to_vec(),
        knot_counts,
        discrepancy,
    })
}
