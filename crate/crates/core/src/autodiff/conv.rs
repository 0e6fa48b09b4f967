use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::linalg::gemm;
use super::{slot, Node, Op, Tape, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

/// Unfolds one `[C, H, W]` image into `[C*k*k, H*W]` patch columns for a
/// stride-1 convolution with symmetric zero padding `pad`.
fn im2col(img: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &img[ci * hw..][..hw];
        for i in 0..k {
            for j in 0..k {
                let row = &mut cols[((ci * k + i) * k + j) * hw..][..hw];
                for y in 0..h {
                    let out = &mut row[y * w..][..w];
                    let iy = y + i;
                    if iy < pad || iy - pad >= h {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[(iy - pad) * w..][..w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let ix = x + j;
                        *o = if ix < pad || ix - pad >= w {
                            0.0
                        } else {
                            src[ix - pad]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, img: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut img[ci * hw..][..hw];
        for i in 0..k {
            for j in 0..k {
                let row = &cols[((ci * k + i) * k + j) * hw..][..hw];
                for y in 0..h {
                    let iy = y + i;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let dst = &mut plane[(iy - pad) * w..][..w];
                    for (x, v) in row[y * w..][..w].iter().enumerate() {
                        let ix = x + j;
                        if ix >= pad && ix - pad < w {
                            dst[ix - pad] += v;
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// Stride-1 "same" convolution: `input[B, C, H, W]` with
    /// `weight[O, C, k, k]` and `bias[O]`, where `padding` must equal
    /// `(k - 1) / 2` for odd `k`. Out-of-range input reads as zero.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: usize) -> Result<Var> {
        for v in [input, weight, bias] {
            self.check("conv2d", v)?;
        }
        let &[b, c, h, w] = self.shape(input) else {
            return Err(shape_err(
                "conv2d",
                format!("input must be rank 4, got {:?}", self.shape(input)),
            ));
        };
        let &[o, wc, k, k2] = self.shape(weight) else {
            return Err(shape_err(
                "conv2d",
                format!("weight must be rank 4, got {:?}", self.shape(weight)),
            ));
        };
        if k != k2 {
            return Err(shape_err(
                "conv2d",
                format!("kernel must be square, got {k}x{k2}"),
            ));
        }
        if k % 2 == 0 {
            return Err(arg_err("conv2d", format!("kernel size {k} is even")));
        }
        if wc != c {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels, weight expects {wc}"),
            ));
        }
        if self.shape(bias) != [o] {
            return Err(shape_err(
                "conv2d",
                format!("bias {:?} vs {o} filters", self.shape(bias)),
            ));
        }
        if padding != (k - 1) / 2 {
            return Err(arg_err(
                "conv2d",
                format!("padding {padding} does not preserve size for kernel {k}"),
            ));
        }
        let (hw, ckk) = (h * w, c * k * k);
        let mut data = vec![0.0; b * o * hw];
        let mut cols = vec![0.0; ckk * hw];
        let (x, wt, bs) = (self.data(input), self.data(weight), self.data(bias));
        for bi in 0..b {
            im2col(&x[bi * c * hw..][..c * hw], c, h, w, k, padding, &mut cols);
            let out = &mut data[bi * o * hw..][..o * hw];
            for (oi, plane) in out.chunks_mut(hw.max(1)).enumerate() {
                plane.fill(bs[oi]);
            }
            gemm(o, ckk, hw, wt, false, &cols, false, 1.0, out);
        }
        let out = Tensor::new(&[b, o, h, w], data)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input: input.id,
                weight: weight.id,
                bias: bias.id,
                pad: padding,
            },
        ))
    }

    /// 2x2 max pooling with stride 2; a trailing odd row or column is
    /// dropped. Ties route the gradient to the first cell in row-major order.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        self.check("maxpool2d", input)?;
        let &[b, c, h, w] = self.shape(input) else {
            return Err(shape_err("maxpool2d", "input must be rank 4"));
        };
        if h < 2 || w < 2 {
            return Err(shape_err(
                "maxpool2d",
                format!("spatial size {h}x{w} is smaller than the 2x2 window"),
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data(input);
        let mut data = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    data.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(&[b, c, ho, wo], data)?;
        let rg = self.rg(input);
        Ok(self.push(
            out,
            rg,
            Op::MaxPool2d {
                input: input.id,
                argmax,
            },
        ))
    }
}

pub(super) fn conv2d_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    input: usize,
    weight: usize,
    bias: usize,
    pad: usize,
    g: &[f64],
) {
    let &[b, c, h, w] = nodes[input].value.shape() else {
        unreachable!()
    };
    let &[o, _, k, _] = nodes[weight].value.shape() else {
        unreachable!()
    };
    let (hw, ckk) = (h * w, c * k * k);
    if let Some(s) = slot(nodes, grads, bias) {
        for bi in 0..b {
            for (oi, s) in s.iter_mut().enumerate() {
                *s += g[(bi * o + oi) * hw..][..hw].iter().sum::<f64>();
            }
        }
    }
    let x = nodes[input].value.data();
    let wt = nodes[weight].value.data();
    let need_w = nodes[weight].requires_grad;
    let need_x = nodes[input].requires_grad;
    if !need_w && !need_x {
        return;
    }
    let mut cols = vec![0.0; ckk * hw];
    for bi in 0..b {
        let gb = &g[bi * o * hw..][..o * hw];
        if need_w {
            im2col(&x[bi * c * hw..][..c * hw], c, h, w, k, pad, &mut cols);
            let s = slot(nodes, grads, weight).unwrap();
            gemm(o, hw, ckk, gb, false, &cols, true, 1.0, s);
        }
        if need_x {
            gemm(ckk, o, hw, wt, true, gb, false, 0.0, &mut cols);
            let s = slot(nodes, grads, input).unwrap();
            col2im_add(&cols, c, h, w, k, pad, &mut s[bi * c * hw..][..c * hw]);
        }
    }
}
