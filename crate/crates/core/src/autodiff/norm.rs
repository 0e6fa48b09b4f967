use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{slot, Node, Op, Tape, Var};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

impl Tape {
    /// Batch normalization over `[B, C, H, W]`.
    ///
    /// Training mode normalizes with the biased batch variance and folds the
    /// batch statistics into `stats` (momentum 0.1, unbiased variance).
    /// Evaluation mode normalizes with `stats` and leaves it untouched.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        training: bool,
    ) -> Result<Var> {
        for v in [input, gamma, beta] {
            self.check("batchnorm2d", v)?;
        }
        let &[b, c, h, w] = self.shape(input) else {
            return Err(shape_err("batchnorm2d", "input must be rank 4"));
        };
        if self.shape(gamma) != [c]
            || self.shape(beta) != [c]
            || stats.mean.len() != c
            || stats.var.len() != c
        {
            return Err(shape_err(
                "batchnorm2d",
                format!("affine or running parameters do not match {c} channels"),
            ));
        }
        let hw = h * w;
        let m = b * hw;
        if training && m < 2 {
            return Err(arg_err(
                "batchnorm2d",
                format!("training needs at least 2 values per channel, got {m}"),
            ));
        }
        let x = self.data(input);
        let mut inv_std = vec![0.0; c];
        let mut mean = vec![0.0; c];
        if training {
            for ci in 0..c {
                let mut sum = 0.0;
                for bi in 0..b {
                    sum += x[(bi * c + ci) * hw..][..hw].iter().sum::<f64>();
                }
                let mu = sum / m as f64;
                let mut sq = 0.0;
                for bi in 0..b {
                    sq += x[(bi * c + ci) * hw..][..hw]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                let var = sq / m as f64;
                mean[ci] = mu;
                inv_std[ci] = 1.0 / libm::sqrt(var + BN_EPS);
                let unbiased = sq / (m - 1) as f64;
                stats.mean[ci] = (1.0 - BN_MOMENTUM) * stats.mean[ci] + BN_MOMENTUM * mu;
                stats.var[ci] = (1.0 - BN_MOMENTUM) * stats.var[ci] + BN_MOMENTUM * unbiased;
            }
        } else {
            for ci in 0..c {
                mean[ci] = stats.mean[ci];
                inv_std[ci] = 1.0 / libm::sqrt(stats.var[ci] + BN_EPS);
            }
        }
        let (gm, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; x.len()];
        let mut data = vec![0.0; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for i in off..off + hw {
                    xhat[i] = (x[i] - mean[ci]) * inv_std[ci];
                    data[i] = gm[ci] * xhat[i] + bt[ci];
                }
            }
        }
        let out = Tensor::new(&[b, c, h, w], data)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            rg,
            Op::BatchNorm {
                input: input.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                training,
            },
        ))
    }

    /// Inverted dropout: in training, each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`. Identity in
    /// evaluation or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.check("dropout", input)?;
        if !(0.0..1.0).contains(&p) {
            return Err(arg_err(
                "dropout",
                format!("probability {p} outside [0, 1)"),
            ));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let scale = 1.0 / (1.0 - p);
        let n = self.value(input).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let data = self
            .data(input)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let out = Tensor::new(self.shape(input), data).map_err(|_| Error::Empty("dropout"))?;
        let rg = self.rg(input);
        Ok(self.push(
            out,
            rg,
            Op::Dropout {
                input: input.id,
                mask,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batchnorm_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    input: usize,
    gamma: usize,
    beta: usize,
    xhat: &[f64],
    inv_std: &[f64],
    training: bool,
    g: &[f64],
) {
    let &[b, c, h, w] = nodes[input].value.shape() else {
        unreachable!()
    };
    let hw = h * w;
    let m = (b * hw) as f64;
    let gm = nodes[gamma].value.data();
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            for i in off..off + hw {
                sum_g[ci] += g[i];
                sum_gx[ci] += g[i] * xhat[i];
            }
        }
    }
    if let Some(s) = slot(nodes, grads, gamma) {
        s.iter_mut().zip(&sum_gx).for_each(|(s, v)| *s += v);
    }
    if let Some(s) = slot(nodes, grads, beta) {
        s.iter_mut().zip(&sum_g).for_each(|(s, v)| *s += v);
    }
    if let Some(s) = slot(nodes, grads, input) {
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                let k = gm[ci] * inv_std[ci];
                for i in off..off + hw {
                    s[i] += if training {
                        k * (g[i] - sum_g[ci] / m - xhat[i] * sum_gx[ci] / m)
                    } else {
                        k * g[i]
                    };
                }
            }
        }
    }
}
