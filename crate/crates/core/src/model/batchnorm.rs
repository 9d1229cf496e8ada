use crate::diffcore::{column_moments, Graph, Tensor, Var, NORM_VARIANCE_EPSILON};
use crate::error::{Error, Result};

pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Exponential moving averages of batch mean and population variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            var: vec![1.0; d],
        }
    }

    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = BATCHNORM_MOMENTUM;
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Frozen target statistics plus the learnable affine correction.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormTarget<'a> {
    pub mean: &'a [f64],
    pub var: &'a [f64],
    pub gain: Var,
    pub bias: Var,
}

/// Normalizes `x[N×D]` and rescales each column to the target statistics.
///
/// Training mode standardizes by the batch itself and folds the batch
/// moments into `running`; eval mode standardizes by `running` and leaves
/// it untouched.
pub fn batchnorm_match(
    g: &mut Graph,
    x: Var,
    target: BatchNormTarget<'_>,
    running: &mut RunningStats,
    mode: Mode,
) -> Result<Var> {
    let xv = g.value(x);
    let d = xv.cols();
    for len in [target.mean.len(), target.var.len(), running.mean.len(), running.var.len()] {
        if len != d {
            return Err(Error::Dimension {
                op: "batchnorm_match",
                left: xv.shape().to_vec(),
                right: vec![len],
            });
        }
    }
    let xhat = match mode {
        Mode::Train => {
            let xhat = g.standardize_cols(x)?;
            let (mean, var) = column_moments(g.value(x));
            running.update(&mean, &var);
            xhat
        }
        Mode::Eval => {
            let shift = g.constant(Tensor::vector(running.mean.iter().map(|m| -m).collect()));
            let inv = g.constant(Tensor::vector(
                running
                    .var
                    .iter()
                    .map(|v| 1.0 / (v + NORM_VARIANCE_EPSILON).sqrt())
                    .collect(),
            ));
            let centered = g.add_row(x, shift)?;
            g.mul_row(centered, inv)?
        }
    };
    let std = g.constant(Tensor::vector(target.var.iter().map(|v| v.sqrt()).collect()));
    let mean = g.constant(Tensor::vector(target.mean.to_vec()));
    let y = g.mul_row(xhat, std)?;
    let y = g.mul_row(y, target.gain)?;
    let y = g.add_row(y, mean)?;
    g.add_row(y, target.bias)
}
