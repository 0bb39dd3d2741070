//! Elementwise, structural and loss operations, batch normalization and
//! dropout. Convolutions live in `conv`, the LSTM in `lstm`.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::param::Param;
use super::{Result, Scalar, Tensor, TensorError};

/// (outer, axis extent, inner) block sizes for iterating along `axis`.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |args| {
                let g = args.grad;
                (args.sink)(0, &mut |buf| {
                    for (b, &gv) in buf.iter_mut().zip(g) {
                        *b += gv;
                    }
                });
                (args.sink)(1, &mut |buf| {
                    for (b, &gv) in buf.iter_mut().zip(g) {
                        *b += gv;
                    }
                });
            },
        )
    }

    pub fn sub(&self, other: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |args| {
                let g = args.grad;
                (args.sink)(0, &mut |buf| {
                    for (b, &gv) in buf.iter_mut().zip(g) {
                        *b += gv;
                    }
                });
                (args.sink)(1, &mut |buf| {
                    for (b, &gv) in buf.iter_mut().zip(g) {
                        *b = *b - gv;
                    }
                });
            },
        )
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |args| {
                let g = args.grad;
                let a = args.parents[0].data().clone();
                let b = args.parents[1].data().clone();
                (args.sink)(0, &mut |buf| {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(&b) {
                        *o += gv * bv;
                    }
                });
                (args.sink)(1, &mut |buf| {
                    for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(&a) {
                        *o += gv * av;
                    }
                });
            },
        )
    }

    /// Multiply by a constant.
    pub fn scale(&self, c: S) -> Tensor<S> {
        let data = self.data().iter().map(|&a| a * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |args| {
            let g = args.grad;
            (args.sink)(0, &mut |buf| {
                for (b, &gv) in buf.iter_mut().zip(g) {
                    *b += gv * c;
                }
            });
        })
    }

    /// Rectified linear unit; the gradient at exactly zero is zero.
    pub fn relu(&self) -> Tensor<S> {
        let data = self.data().iter().map(|&a| a.max(S::ZERO)).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], |args| {
            let g = args.grad;
            let x = args.parents[0].data().clone();
            (args.sink)(0, &mut |buf| {
                for ((b, &gv), &xv) in buf.iter_mut().zip(g).zip(&x) {
                    if xv > S::ZERO {
                        *b += gv;
                    }
                }
            });
        })
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        let data = self.data().iter().map(|&a| sigmoid_scalar(a)).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], |args| {
            let g = args.grad;
            let y: Vec<S> = args.out.to_vec();
            (args.sink)(0, &mut |buf| {
                for ((b, &gv), &yv) in buf.iter_mut().zip(g).zip(&y) {
                    *b += gv * yv * (S::ONE - yv);
                }
            });
        })
    }

    pub fn tanh(&self) -> Tensor<S> {
        let data = self.data().iter().map(|&a| a.tanh()).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], |args| {
            let g = args.grad;
            let y: Vec<S> = args.out.to_vec();
            (args.sink)(0, &mut |buf| {
                for ((b, &gv), &yv) in buf.iter_mut().zip(g).zip(&y) {
                    *b += gv * (S::ONE - yv * yv);
                }
            });
        })
    }

    /// View with a new shape of identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Tensor<S> {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape to {shape:?} from {:?}", self.shape());
        let data = self.to_vec();
        Tensor::from_op(shape.to_vec(), data, vec![self.clone()], |args| {
            let g = args.grad;
            (args.sink)(0, &mut |buf| {
                for (b, &gv) in buf.iter_mut().zip(g) {
                    *b += gv;
                }
            });
        })
    }

    /// Sub-tensor `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<S> {
        let (outer, mid, inner) = axis_blocks(self.shape(), axis);
        assert!(start + len <= mid, "narrow out of range");
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let data = self.data();
            for o in 0..outer {
                let base = o * mid * inner + start * inner;
                out.extend_from_slice(&data[base..base + len * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(shape, out, vec![self.clone()], move |args| {
            let g = args.grad;
            (args.sink)(0, &mut |buf| {
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = o * mid * inner + start * inner;
                    for k in 0..len * inner {
                        buf[dst + k] += g[src + k];
                    }
                }
            });
        })
    }

    /// Zero-pad the last axis by `left`/`right` elements.
    pub fn pad_last(&self, left: usize, right: usize) -> Tensor<S> {
        let shape = self.shape().to_vec();
        let t = *shape.last().expect("pad_last on 0-d tensor");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let t_out = t + left + right;
        let mut out = vec![S::ZERO; rows * t_out];
        {
            let data = self.data();
            for r in 0..rows {
                out[r * t_out + left..r * t_out + left + t]
                    .copy_from_slice(&data[r * t..(r + 1) * t]);
            }
        }
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = t_out;
        Tensor::from_op(new_shape, out, vec![self.clone()], move |args| {
            let g = args.grad;
            (args.sink)(0, &mut |buf| {
                for r in 0..rows {
                    for k in 0..t {
                        buf[r * t + k] += g[r * t_out + left + k];
                    }
                }
            });
        })
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum_all(&self) -> Tensor<S> {
        let total = self.data().iter().copied().sum();
        Tensor::from_op(vec![], vec![total], vec![self.clone()], |args| {
            let g = args.grad[0];
            (args.sink)(0, &mut |buf| {
                for b in buf.iter_mut() {
                    *b += g;
                }
            });
        })
    }

    /// Mean of all elements as a scalar tensor.
    pub fn mean_all(&self) -> Tensor<S> {
        let n = S::from_f64(self.numel() as f64);
        let total: S = self.data().iter().copied().sum();
        Tensor::from_op(vec![], vec![total / n], vec![self.clone()], move |args| {
            let g = args.grad[0] / n;
            (args.sink)(0, &mut |buf| {
                for b in buf.iter_mut() {
                    *b += g;
                }
            });
        })
    }
}

impl<S: Scalar> Tensor<S> {
    /// `[B, C, T]` -> `[T, B, C]` (channel-major to time-major).
    pub fn bct_to_tbc(&self) -> Tensor<S> {
        let s = self.shape();
        assert_eq!(s.len(), 3);
        let (b, c, t) = (s[0], s[1], s[2]);
        let mut out = vec![S::ZERO; b * c * t];
        {
            let data = self.data();
            for bi in 0..b {
                for ci in 0..c {
                    for ti in 0..t {
                        out[(ti * b + bi) * c + ci] = data[(bi * c + ci) * t + ti];
                    }
                }
            }
        }
        Tensor::from_op(vec![t, b, c], out, vec![self.clone()], move |args| {
            let g = args.grad;
            (args.sink)(0, &mut |buf| {
                for bi in 0..b {
                    for ci in 0..c {
                        for ti in 0..t {
                            buf[(bi * c + ci) * t + ti] += g[(ti * b + bi) * c + ci];
                        }
                    }
                }
            });
        })
    }

    /// `[T, B, C]` -> `[B, C, T]` (time-major back to channel-major).
    pub fn tbc_to_bct(&self) -> Tensor<S> {
        let s = self.shape();
        assert_eq!(s.len(), 3);
        let (t, b, c) = (s[0], s[1], s[2]);
        let mut out = vec![S::ZERO; b * c * t];
        {
            let data = self.data();
            for ti in 0..t {
                for bi in 0..b {
                    for ci in 0..c {
                        out[(bi * c + ci) * t + ti] = data[(ti * b + bi) * c + ci];
                    }
                }
            }
        }
        Tensor::from_op(vec![b, c, t], out, vec![self.clone()], move |args| {
            let g = args.grad;
            (args.sink)(0, &mut |buf| {
                for ti in 0..t {
                    for bi in 0..b {
                        for ci in 0..c {
                            buf[(ti * b + bi) * c + ci] += g[(bi * c + ci) * t + ti];
                        }
                    }
                }
            });
        })
    }
}

pub(crate) fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    // evaluate on the non-overflowing side
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

/// Gated linear unit along `axis`: the first half of the channels is gated
/// by the sigmoid of the second half, halving the axis extent.
pub fn glu<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let (outer, mid, inner) = axis_blocks(x.shape(), axis);
    if mid % 2 != 0 {
        return Err(TensorError::Shape(format!(
            "glu needs an even extent along axis {axis}, got {mid}"
        )));
    }
    let half = mid / 2;
    let mut out = vec![S::ZERO; outer * half * inner];
    let mut sig = vec![S::ZERO; outer * half * inner];
    {
        let data = x.data();
        for o in 0..outer {
            for c in 0..half {
                for k in 0..inner {
                    let a = data[o * mid * inner + c * inner + k];
                    let b = data[o * mid * inner + (half + c) * inner + k];
                    let s = sigmoid_scalar(b);
                    let idx = o * half * inner + c * inner + k;
                    sig[idx] = s;
                    out[idx] = a * s;
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = half;
    Ok(Tensor::from_op(shape, out, vec![x.clone()], move |args| {
        let g = args.grad;
        let data = args.parents[0].data().clone();
        (args.sink)(0, &mut |buf| {
            for o in 0..outer {
                for c in 0..half {
                    for k in 0..inner {
                        let idx = o * half * inner + c * inner + k;
                        let ai = o * mid * inner + c * inner + k;
                        let bi = o * mid * inner + (half + c) * inner + k;
                        let s = sig[idx];
                        buf[ai] += g[idx] * s;
                        buf[bi] += g[idx] * data[ai] * s * (S::ONE - s);
                    }
                }
            }
        });
    }))
}

/// Concatenate along `axis`; all other extents must match.
pub fn concat<S: Scalar>(parts: &[&Tensor<S>], axis: usize) -> Tensor<S> {
    assert!(!parts.is_empty());
    let mut shape = parts[0].shape().to_vec();
    let (outer, _, inner) = axis_blocks(&shape, axis);
    let mids: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    for p in parts {
        assert_eq!(p.shape().len(), shape.len(), "concat rank mismatch");
        for (d, (&a, &b)) in p.shape().iter().zip(&shape).enumerate() {
            assert!(d == axis || a == b, "concat extent mismatch on axis {d}");
        }
    }
    let total_mid: usize = mids.iter().sum();
    let mut out = vec![S::ZERO; outer * total_mid * inner];
    for o in 0..outer {
        let mut offset = 0usize;
        for (p, &m) in parts.iter().zip(&mids) {
            let data = p.data();
            let src = o * m * inner;
            let dst = o * total_mid * inner + offset * inner;
            out[dst..dst + m * inner].copy_from_slice(&data[src..src + m * inner]);
            offset += m;
        }
    }
    shape[axis] = total_mid;
    let parents: Vec<Tensor<S>> = parts.iter().map(|&p| p.clone()).collect();
    Tensor::from_op(shape, out, parents, move |args| {
        let g = args.grad;
        let mut offset = 0usize;
        for (i, &m) in mids.iter().enumerate() {
            let off = offset;
            (args.sink)(i, &mut |buf| {
                for o in 0..outer {
                    let src = o * total_mid * inner + off * inner;
                    let dst = o * m * inner;
                    for k in 0..m * inner {
                        buf[dst + k] += g[src + k];
                    }
                }
            });
            offset += m;
        }
    })
}

/// Mean absolute error over all elements.
pub fn l1_loss<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_eq!(a.shape(), b.shape(), "l1_loss shape mismatch");
    let n = S::from_f64(a.numel() as f64);
    let total: S = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y).abs())
        .sum();
    Tensor::from_op(vec![], vec![total / n], vec![a.clone(), b.clone()], move |args| {
        let g = args.grad[0] / n;
        let av = args.parents[0].data().clone();
        let bv = args.parents[1].data().clone();
        let signs: Vec<S> = av
            .iter()
            .zip(&bv)
            .map(|(&x, &y)| {
                if x > y {
                    S::ONE
                } else if x < y {
                    -S::ONE
                } else {
                    S::ZERO
                }
            })
            .collect();
        (args.sink)(0, &mut |buf| {
            for (o, &s) in buf.iter_mut().zip(&signs) {
                *o += g * s;
            }
        });
        (args.sink)(1, &mut |buf| {
            for (o, &s) in buf.iter_mut().zip(&signs) {
                *o = *o - g * s;
            }
        });
    })
}

/// Mean squared error over all elements.
pub fn mse_loss<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_eq!(a.shape(), b.shape(), "mse_loss shape mismatch");
    let n = S::from_f64(a.numel() as f64);
    let total: S = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Tensor::from_op(vec![], vec![total / n], vec![a.clone(), b.clone()], move |args| {
        let g = args.grad[0] / n;
        let av = args.parents[0].data().clone();
        let bv = args.parents[1].data().clone();
        let two = S::from_f64(2.0);
        (args.sink)(0, &mut |buf| {
            for ((o, &x), &y) in buf.iter_mut().zip(&av).zip(&bv) {
                *o += g * two * (x - y);
            }
        });
        (args.sink)(1, &mut |buf| {
            for ((o, &x), &y) in buf.iter_mut().zip(&av).zip(&bv) {
                *o = *o - g * two * (x - y);
            }
        });
    })
}

/// Numerically stable binary cross entropy on logits, mean over all elements:
/// `max(z,0) - z*y + ln(1 + exp(-|z|))`.
pub fn bce_with_logits_loss<S: Scalar>(logits: &Tensor<S>, targets: &Tensor<S>) -> Tensor<S> {
    assert_eq!(logits.shape(), targets.shape(), "bce shape mismatch");
    let n = S::from_f64(logits.numel() as f64);
    let total: S = logits
        .data()
        .iter()
        .zip(targets.data().iter())
        .map(|(&z, &y)| z.max(S::ZERO) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    Tensor::from_op(
        vec![],
        vec![total / n],
        vec![logits.clone(), targets.clone()],
        move |args| {
            let g = args.grad[0] / n;
            let zv = args.parents[0].data().clone();
            let yv = args.parents[1].data().clone();
            (args.sink)(0, &mut |buf| {
                for ((o, &z), &y) in buf.iter_mut().zip(&zv).zip(&yv) {
                    *o += g * (sigmoid_scalar(z) - y);
                }
            });
        },
    )
}

/// Inverted dropout: in training mode each element is zeroed with
/// probability `p` and survivors are scaled by `1/(1-p)`; in eval mode the
/// input passes through untouched.
pub fn dropout<S: Scalar>(x: &Tensor<S>, p: f64, training: bool, rng: &mut ChaCha8Rng) -> Tensor<S> {
    if !training || p <= 0.0 {
        return x.clone();
    }
    assert!(p < 1.0, "dropout probability must be < 1");
    let keep = S::from_f64(1.0 / (1.0 - p));
    let mask: Vec<S> = (0..x.numel())
        .map(|_| if rng.random_range(0.0..1.0) < p { S::ZERO } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Tensor::from_op(x.shape().to_vec(), data, vec![x.clone()], move |args| {
        let g = args.grad;
        (args.sink)(0, &mut |buf| {
            for ((b, &gv), &m) in buf.iter_mut().zip(g).zip(&mask) {
                *b += gv * m;
            }
        });
    })
}

/// Per-channel batch normalization state for inputs shaped `[B, C, H, W]`.
pub struct BatchNorm<S: Scalar = f32> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: RefCell<Vec<S>>,
    pub running_var: RefCell<Vec<S>>,
    pub eps: f64,
    pub momentum: f64,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(&format!("{name}.gamma"), Tensor::leaf(&[channels], vec![S::ONE; channels])),
            beta: Param::new(&format!("{name}.beta"), Tensor::leaf(&[channels], vec![S::ZERO; channels])),
            running_mean: RefCell::new(vec![S::ZERO; channels]),
            running_var: RefCell::new(vec![S::ONE; channels]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.tensor().numel()
    }
}

/// Batch normalization over the channel axis of `[B, C, H, W]`. Training
/// mode normalizes with batch statistics and updates the running buffers;
/// eval mode uses the frozen running statistics, making the forward pass
/// deterministic.
pub fn batchnorm2d<S: Scalar>(x: &Tensor<S>, bn: &BatchNorm<S>, training: bool) -> Tensor<S> {
    let shape = x.shape().to_vec();
    assert_eq!(shape.len(), 4, "batchnorm2d expects [B, C, H, W]");
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(c, bn.channels(), "batchnorm2d channel mismatch");
    let m = (b * h * w) as f64; // samples per channel
    let plane = h * w;

    let (mean, var): (Vec<S>, Vec<S>) = if training {
        let data = x.data();
        let mut mean = vec![S::ZERO; c];
        let mut var = vec![S::ZERO; c];
        for ci in 0..c {
            let mut sum = S::ZERO;
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for k in 0..plane {
                    sum += data[base + k];
                }
            }
            mean[ci] = sum / S::from_f64(m);
            let mut sq = S::ZERO;
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for k in 0..plane {
                    let d = data[base + k] - mean[ci];
                    sq += d * d;
                }
            }
            var[ci] = sq / S::from_f64(m);
        }
        // update running statistics
        let mom = S::from_f64(bn.momentum);
        let one_m = S::from_f64(1.0 - bn.momentum);
        let mut rm = bn.running_mean.borrow_mut();
        let mut rv = bn.running_var.borrow_mut();
        for ci in 0..c {
            rm[ci] = one_m * rm[ci] + mom * mean[ci];
            rv[ci] = one_m * rv[ci] + mom * var[ci];
        }
        (mean, var)
    } else {
        (bn.running_mean.borrow().clone(), bn.running_var.borrow().clone())
    };

    let eps = S::from_f64(bn.eps);
    let invstd: Vec<S> = var.iter().map(|&v| S::ONE / (v + eps).sqrt()).collect();
    let gamma = bn.gamma.effective();
    let beta = bn.beta.effective();

    let mut xhat = vec![S::ZERO; x.numel()];
    let mut out = vec![S::ZERO; x.numel()];
    {
        let data = x.data();
        let gv = gamma.data();
        let bv = beta.data();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for k in 0..plane {
                    let xh = (data[base + k] - mean[ci]) * invstd[ci];
                    xhat[base + k] = xh;
                    out[base + k] = gv[ci] * xh + bv[ci];
                }
            }
        }
    }

    Tensor::from_op(
        shape,
        out,
        vec![x.clone(), gamma, beta],
        move |args| {
            let g = args.grad;
            let gamma_v = args.parents[1].data().clone();
            // dgamma, dbeta
            (args.sink)(1, &mut |buf| {
                for ci in 0..c {
                    let mut s = S::ZERO;
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        for k in 0..plane {
                            s += g[base + k] * xhat[base + k];
                        }
                    }
                    buf[ci] += s;
                }
            });
            (args.sink)(2, &mut |buf| {
                for ci in 0..c {
                    let mut s = S::ZERO;
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        for k in 0..plane {
                            s += g[base + k];
                        }
                    }
                    buf[ci] += s;
                }
            });
            (args.sink)(0, &mut |buf| {
                if training {
                    // full backward through the batch statistics
                    let mf = S::from_f64(m);
                    for ci in 0..c {
                        let mut sum_dy = S::ZERO;
                        let mut sum_dy_xhat = S::ZERO;
                        for bi in 0..b {
                            let base = (bi * c + ci) * plane;
                            for k in 0..plane {
                                sum_dy += g[base + k];
                                sum_dy_xhat += g[base + k] * xhat[base + k];
                            }
                        }
                        let scale = gamma_v[ci] * invstd[ci];
                        for bi in 0..b {
                            let base = (bi * c + ci) * plane;
                            for k in 0..plane {
                                let term = g[base + k] - sum_dy / mf - xhat[base + k] * sum_dy_xhat / mf;
                                buf[base + k] += scale * term;
                            }
                        }
                    }
                } else {
                    for ci in 0..c {
                        let scale = gamma_v[ci] * invstd[ci];
                        for bi in 0..b {
                            let base = (bi * c + ci) * plane;
                            for k in 0..plane {
                                buf[base + k] += g[base + k] * scale;
                            }
                        }
                    }
                }
            });
        },
    )
}
