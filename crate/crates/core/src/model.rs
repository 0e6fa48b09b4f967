//! The classifier: convolutional stages over the log-Mel image, a per-frame
//! projection, a stacked bidirectional LSTM, additive attention pooling and a
//! linear output layer.
//!
//! ```text
//! [B, 1, n_mels, T]
//!   -> (conv k x k, same padding -> batchnorm -> relu -> maxpool 2x2 -> dropout) x stages
//!   -> [B, C, n_mels / 2^s, T'] -> one frame per time column, flattened channel-major
//!   -> linear to fc_dim -> relu -> dropout
//!   -> BiLSTM x layers (dropout between layers), h_t = [fwd_t ; bwd_t]
//!   -> e_t = tanh(w . h_t + b), alpha = softmax(e), c = sum_t alpha_t h_t
//!   -> logits = W c + b
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{lstm_cell, BatchNormStats, LstmCellVars, Tape, Var};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const SUPPORTED_KERNELS: [usize; 5] = [3, 5, 7, 9, 11];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kernel_size: usize,
    pub conv_filters: Vec<usize>,
    pub fc_dim: usize,
    /// Hidden units per direction.
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub dropout: f64,
    pub n_mels: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kernel_size: 7,
            conv_filters: vec![32, 64, 128],
            fc_dim: 128,
            lstm_hidden: 64,
            lstm_layers: 2,
            dropout: 0.3,
            n_mels: 128,
            num_classes: 5,
        }
    }
}

impl ModelConfig {
    pub fn with_kernel(mut self, k: usize) -> Self {
        self.kernel_size = k;
        self
    }

    /// Always `(kernel_size - 1) / 2`.
    pub fn padding(&self) -> usize {
        self.kernel_size.saturating_sub(1) / 2
    }

    pub fn stages(&self) -> usize {
        self.conv_filters.len()
    }

    /// Mel rows left after pooling.
    pub fn pooled_mels(&self) -> usize {
        self.n_mels >> self.stages()
    }

    /// Width of one flattened frame entering the frame projection.
    pub fn frame_features(&self) -> usize {
        self.conv_filters.last().copied().unwrap_or(1) * self.pooled_mels()
    }

    /// Sequence length seen by the recurrent layers for `frames` input frames.
    pub fn time_steps(&self, frames: usize) -> usize {
        (0..self.stages()).fold(frames, |t, _| t / 2)
    }

    pub fn min_frames(&self) -> usize {
        1 << self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_KERNELS.contains(&self.kernel_size) {
            return Err(arg_err(
                "model config",
                format!(
                    "kernel_size {} not in {:?}",
                    self.kernel_size, SUPPORTED_KERNELS
                ),
            ));
        }
        if self.num_classes == 0 {
            return Err(arg_err("model config", "num_classes must be positive"));
        }
        if self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
            return Err(arg_err(
                "model config",
                "conv_filters must be a non-empty list of positive counts",
            ));
        }
        if self.n_mels == 0 || !self.n_mels.is_multiple_of(1 << self.stages()) {
            return Err(arg_err(
                "model config",
                format!(
                    "n_mels {} not divisible by {}",
                    self.n_mels,
                    1usize << self.stages()
                ),
            ));
        }
        if self.fc_dim == 0 || self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return Err(arg_err(
                "model config",
                "fc_dim, lstm_hidden and lstm_layers must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(arg_err(
                "model config",
                format!("dropout {} outside [0, 1)", self.dropout),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LstmSlots {
    w_ih: usize,
    w_hh: usize,
    b_ih: usize,
    b_hh: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    conv: Vec<(usize, usize)>,
    bn: Vec<(usize, usize)>,
    fc: (usize, usize),
    /// `[layer][direction]`, forward first.
    lstm: Vec<[LstmSlots; 2]>,
    attn: (usize, usize),
    out: (usize, usize),
}

/// Result of one forward pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B, num_classes]`
    pub logits: Var,
    /// `[B, T']`, each row sums to one.
    pub attention: Var,
    /// Tape handles of [`EmotionNet::params`], in the same order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmotionNet {
    cfg: ModelConfig,
    params: Vec<Param>,
    bn_stats: Vec<BatchNormStats>,
    layout: Layout,
}

fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

impl EmotionNet {
    /// Fresh model: conv and linear weights uniform in `+-sqrt(1/fan_in)`,
    /// LSTM weights uniform in `+-sqrt(1/hidden)`, biases zero, batchnorm
    /// scale one and shift zero.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, &[rng::tag::INIT]);
        Self::build_with(cfg, |shape, fan_in| {
            if fan_in == 0 {
                Tensor::zeros(shape)
            } else {
                uniform_tensor(&mut rng, shape, libm::sqrt(1.0 / fan_in as f64))
            }
        })
    }

    /// Every learnable parameter zero, including batchnorm scales.
    pub fn zeroed(cfg: &ModelConfig) -> Result<Self> {
        let mut m = Self::build_with(cfg, |shape, _| Tensor::zeros(shape))?;
        for p in &mut m.params {
            p.value.data_mut().fill(0.0);
        }
        Ok(m)
    }

    /// `init(shape, fan)` supplies weight tensors; `fan == 0` marks biases,
    /// which start at zero. Batchnorm scales start at one.
    fn build_with(
        cfg: &ModelConfig,
        mut init: impl FnMut(&[usize], usize) -> Tensor,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut params = Vec::new();
        let push = |params: &mut Vec<Param>, name: String, value: Tensor| {
            params.push(Param { name, value });
            params.len() - 1
        };
        let k = cfg.kernel_size;
        let mut conv = Vec::new();
        let mut bn = Vec::new();
        let mut in_ch = 1;
        for (i, &out_ch) in cfg.conv_filters.iter().enumerate() {
            let w = push(
                &mut params,
                format!("conv{i}.weight"),
                init(&[out_ch, in_ch, k, k], in_ch * k * k),
            );
            let b = push(&mut params, format!("conv{i}.bias"), init(&[out_ch], 0));
            conv.push((w, b));
            let g = push(
                &mut params,
                format!("bn{i}.gamma"),
                Tensor::full(&[out_ch], 1.0),
            );
            let bt = push(&mut params, format!("bn{i}.beta"), Tensor::zeros(&[out_ch]));
            bn.push((g, bt));
            in_ch = out_ch;
        }
        let ff = cfg.frame_features();
        let fc = (
            push(&mut params, "fc.weight".into(), init(&[cfg.fc_dim, ff], ff)),
            push(&mut params, "fc.bias".into(), init(&[cfg.fc_dim], 0)),
        );
        let h = cfg.lstm_hidden;
        let mut lstm = Vec::new();
        let mut width = cfg.fc_dim;
        for l in 0..cfg.lstm_layers {
            let mut dirs = [LstmSlots {
                w_ih: 0,
                w_hh: 0,
                b_ih: 0,
                b_hh: 0,
            }; 2];
            for (d, dir) in ["fwd", "bwd"].iter().enumerate() {
                dirs[d] = LstmSlots {
                    w_ih: push(
                        &mut params,
                        format!("lstm.l{l}.{dir}.w_ih"),
                        init(&[4 * h, width], h),
                    ),
                    w_hh: push(
                        &mut params,
                        format!("lstm.l{l}.{dir}.w_hh"),
                        init(&[4 * h, h], h),
                    ),
                    b_ih: push(
                        &mut params,
                        format!("lstm.l{l}.{dir}.b_ih"),
                        init(&[4 * h], 0),
                    ),
                    b_hh: push(
                        &mut params,
                        format!("lstm.l{l}.{dir}.b_hh"),
                        init(&[4 * h], 0),
                    ),
                };
            }
            lstm.push(dirs);
            width = 2 * h;
        }
        let attn = (
            push(&mut params, "attn.weight".into(), init(&[1, 2 * h], 2 * h)),
            push(&mut params, "attn.bias".into(), init(&[1], 0)),
        );
        let out = (
            push(
                &mut params,
                "out.weight".into(),
                init(&[cfg.num_classes, 2 * h], 2 * h),
            ),
            push(&mut params, "out.bias".into(), init(&[cfg.num_classes], 0)),
        );
        let bn_stats = cfg
            .conv_filters
            .iter()
            .map(|&c| BatchNormStats::new(c))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            params,
            bn_stats,
            layout: Layout {
                conv,
                bn,
                fc,
                lstm,
                attn,
                out,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn bn_stats(&self) -> &[BatchNormStats] {
        &self.bn_stats
    }

    pub fn bn_stats_mut(&mut self) -> &mut [BatchNormStats] {
        &mut self.bn_stats
    }

    /// Number of scalar learnable parameters.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Parameter counts grouped by layer, in network order. Sums to
    /// [`count_params`](Self::count_params).
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for p in &self.params {
            let group = match p.name.split('.').collect::<Vec<_>>().as_slice() {
                ["lstm", layer, ..] => format!("lstm.{layer}"),
                [head, ..] => String::from(*head),
                [] => String::new(),
            };
            match groups.last_mut() {
                Some((g, n)) if *g == group => *n += p.value.numel(),
                _ => groups.push((group, p.value.numel())),
            }
        }
        groups
    }

    /// All persisted tensors: learnable parameters followed by batchnorm
    /// running statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for (i, s) in self.bn_stats.iter().enumerate() {
            let c = s.mean.len();
            out.push((
                format!("bn{i}.running_mean"),
                Tensor::new(&[c], s.mean.clone()).expect("1-d"),
            ));
            out.push((
                format!("bn{i}.running_var"),
                Tensor::new(&[c], s.var.clone()).expect("1-d"),
            ));
        }
        out
    }

    /// Rebuilds a model for `cfg` from tensors produced by
    /// [`named_tensors`](Self::named_tensors). Names and shapes must match
    /// exactly.
    pub fn from_named_tensors(cfg: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::zeroed(cfg)?;
        let expected = model.named_tensors();
        if expected.len() != tensors.len() {
            return Err(shape_err(
                "load weights",
                format!(
                    "expected {} tensors, found {}",
                    expected.len(),
                    tensors.len()
                ),
            ));
        }
        let n_params = model.params.len();
        for (i, ((want_name, want), (name, t))) in expected.iter().zip(tensors).enumerate() {
            if *want_name != name {
                return Err(shape_err(
                    "load weights",
                    format!("tensor {i}: expected {want_name}, found {name}"),
                ));
            }
            if want.shape() != t.shape() {
                return Err(shape_err(
                    "load weights",
                    format!(
                        "{name}: expected shape {:?}, found {:?}",
                        want.shape(),
                        t.shape()
                    ),
                ));
            }
            if i < n_params {
                model.params[i].value = t;
            } else {
                let s = &mut model.bn_stats[(i - n_params) / 2];
                if (i - n_params) % 2 == 0 {
                    s.mean = t.into_data();
                } else {
                    s.var = t.into_data();
                }
            }
        }
        Ok(model)
    }

    /// Forward pass. Training mode applies dropout and updates batchnorm
    /// running statistics; evaluation mode is deterministic and leaves the
    /// model untouched.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        input: &Tensor,
        training: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        if training {
            let mut stats = core::mem::take(&mut self.bn_stats);
            let out = self.run(tape, input, true, rng, &mut stats);
            self.bn_stats = stats;
            out
        } else {
            self.forward_eval(tape, input)
        }
    }

    pub fn forward_eval(&self, tape: &mut Tape, input: &Tensor) -> Result<Forward> {
        let mut stats = self.bn_stats.clone();
        let mut unused = rng::stream(0, &[]);
        self.run(tape, input, false, &mut unused, &mut stats)
    }

    /// Eval-mode logits and attention weights as plain tensors.
    pub fn predict(&self, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let f = self.forward_eval(&mut tape, input)?;
        Ok((
            tape.value(f.logits).clone(),
            tape.value(f.attention).clone(),
        ))
    }

    fn run<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        training: bool,
        rng: &mut R,
        stats: &mut [BatchNormStats],
    ) -> Result<Forward> {
        let cfg = &self.cfg;
        let &[b, ch, mels, frames] = input.shape() else {
            return Err(shape_err(
                "forward",
                format!("input must be [B, 1, n_mels, T], got {:?}", input.shape()),
            ));
        };
        if ch != 1 || mels != cfg.n_mels {
            return Err(shape_err(
                "forward",
                format!(
                    "expected [B, 1, {}, T], got {:?}",
                    cfg.n_mels,
                    input.shape()
                ),
            ));
        }
        if frames < cfg.min_frames() {
            return Err(arg_err(
                "forward",
                format!("{frames} frames, need at least {}", cfg.min_frames()),
            ));
        }
        if b == 0 {
            return Err(Error::Empty("forward"));
        }
        let p: Vec<Var> = self.params.iter().map(|p| tape.param(&p.value)).collect();
        let l = &self.layout;

        let mut x = tape.constant(input.clone());
        for (i, (&(w, bias), &(g, beta))) in l.conv.iter().zip(&l.bn).enumerate() {
            x = tape.conv2d(x, p[w], p[bias], cfg.padding())?;
            x = tape.batchnorm2d(x, p[g], p[beta], &mut stats[i], training)?;
            x = tape.relu(x);
            x = tape.maxpool2d(x)?;
            x = tape.dropout(x, cfg.dropout, training, rng)?;
        }

        let seq = tape.maps_to_frames(x)?;
        let steps = tape.shape(seq)[1];
        let flat = tape.reshape(seq, &[b * steps, cfg.frame_features()])?;
        let y = tape.linear(flat, p[l.fc.0], Some(p[l.fc.1]))?;
        let y = tape.relu(y);
        let y = tape.dropout(y, cfg.dropout, training, rng)?;
        let mut seq = tape.reshape(y, &[b, steps, cfg.fc_dim])?;

        let h = cfg.lstm_hidden;
        for (layer, dirs) in l.lstm.iter().enumerate() {
            let xs: Vec<Var> = (0..steps)
                .map(|t| tape.select_step(seq, t))
                .collect::<Result<_>>()?;
            let mut per_dir: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
            for (d, slots) in dirs.iter().enumerate() {
                let vars = LstmCellVars {
                    w_ih: p[slots.w_ih],
                    w_hh: p[slots.w_hh],
                    b_ih: p[slots.b_ih],
                    b_hh: p[slots.b_hh],
                };
                let zero = tape.constant(Tensor::zeros(&[b, h]));
                let (mut hs, mut cs) = (zero, zero);
                let mut outs = vec![zero; steps];
                let order: Vec<usize> = if d == 0 {
                    (0..steps).collect()
                } else {
                    (0..steps).rev().collect()
                };
                for t in order {
                    (hs, cs) = lstm_cell(tape, xs[t], hs, cs, &vars)?;
                    outs[t] = hs;
                }
                per_dir[d] = outs;
            }
            let joined: Vec<Var> = per_dir[0]
                .iter()
                .zip(&per_dir[1])
                .map(|(&f, &r)| tape.concat_last(f, r))
                .collect::<Result<_>>()?;
            seq = tape.stack_steps(&joined)?;
            if layer + 1 < l.lstm.len() {
                seq = tape.dropout(seq, cfg.dropout, training, rng)?;
            }
        }

        let flat = tape.reshape(seq, &[b * steps, 2 * h])?;
        let scores = tape.linear(flat, p[l.attn.0], Some(p[l.attn.1]))?;
        let scores = tape.reshape(scores, &[b, steps])?;
        let scores = tape.tanh(scores);
        let attention = tape.softmax(scores, 1)?;
        let context = tape.weighted_sum(attention, seq)?;
        let logits = tape.linear(context, p[l.out.0], Some(p[l.out.1]))?;
        Ok(Forward {
            logits,
            attention,
            params: p,
        })
    }
}
