//! Differentiable convolution operations over the raw kernels.

use super::kernels::{self, Conv1dDims, Conv2dDims, ConvTr1dDims};
use super::{Result, Scalar, Tensor, TensorError};

/// Valid 1-d convolution: `x [B, C_in, T]`, `w [C_out, C_in, K]`, `b [C_out]`,
/// output `[B, C_out, floor((T-K)/stride)+1]`. Differentiable in all three.
pub fn conv1d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>, stride: usize) -> Result<Tensor<S>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 3 {
        return Err(TensorError::Shape(format!(
            "conv1d expects x [B,Cin,T] and w [Cout,Cin,K], got {xs:?} and {ws:?}"
        )));
    }
    if xs[1] != ws[1] {
        return Err(TensorError::Shape(format!(
            "conv1d channel mismatch: x has {} input channels, w expects {}",
            xs[1], ws[1]
        )));
    }
    if xs[2] < ws[2] {
        return Err(TensorError::Shape(format!(
            "conv1d input length {} shorter than kernel {}",
            xs[2], ws[2]
        )));
    }
    assert!(stride >= 1);
    assert_eq!(b.shape(), &[ws[0]], "conv1d bias shape");
    let d = Conv1dDims { batch: xs[0], c_in: xs[1], c_out: ws[0], t_in: xs[2], k: ws[2], stride };
    let t_out = d.t_out();
    let mut out = vec![S::ZERO; d.batch * d.c_out * t_out];
    kernels::conv1d_fwd(&x.data(), &w.data(), &b.data(), &d, &mut out);
    Ok(Tensor::from_op(
        vec![d.batch, d.c_out, t_out],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        move |args| {
            let gy = args.grad;
            let xv = args.parents[0].data().clone();
            let wv = args.parents[1].data().clone();
            (args.sink)(0, &mut |buf| kernels::conv1d_bwd_x(gy, &wv, &d, buf));
            (args.sink)(1, &mut |buf| kernels::conv1d_bwd_w(gy, &xv, &d, buf));
            (args.sink)(2, &mut |buf| kernels::conv1d_bwd_b(gy, &d, buf));
        },
    ))
}

/// 1-d transposed convolution: `x [B, C_in, T]`, `w [C_in, C_out, K]`,
/// output `[B, C_out, (T-1)*stride + K]`. With zero bias this is the adjoint
/// of [`conv1d`] with respect to its input.
pub fn conv_transpose1d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: usize,
) -> Result<Tensor<S>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 3 {
        return Err(TensorError::Shape(format!(
            "conv_transpose1d expects x [B,Cin,T] and w [Cin,Cout,K], got {xs:?} and {ws:?}"
        )));
    }
    if xs[1] != ws[0] {
        return Err(TensorError::Shape(format!(
            "conv_transpose1d channel mismatch: x has {} channels, w expects {}",
            xs[1], ws[0]
        )));
    }
    if xs[2] == 0 {
        return Err(TensorError::Shape("conv_transpose1d needs at least one input frame".into()));
    }
    assert!(stride >= 1);
    assert_eq!(b.shape(), &[ws[1]], "conv_transpose1d bias shape");
    let d = ConvTr1dDims { batch: xs[0], c_in: xs[1], c_out: ws[1], t_in: xs[2], k: ws[2], stride };
    let t_out = d.t_out();
    let mut out = vec![S::ZERO; d.batch * d.c_out * t_out];
    kernels::convtr1d_fwd(&x.data(), &w.data(), &b.data(), &d, &mut out);
    Ok(Tensor::from_op(
        vec![d.batch, d.c_out, t_out],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        move |args| {
            let gy = args.grad;
            let xv = args.parents[0].data().clone();
            let wv = args.parents[1].data().clone();
            (args.sink)(0, &mut |buf| kernels::convtr1d_bwd_x(gy, &wv, &d, buf));
            (args.sink)(1, &mut |buf| kernels::convtr1d_bwd_w(gy, &xv, &d, buf));
            (args.sink)(2, &mut |buf| {
                // db[o] = sum over batch and output positions
                for bi in 0..d.batch {
                    for o in 0..d.c_out {
                        let row = &gy[(bi * d.c_out + o) * t_out..(bi * d.c_out + o + 1) * t_out];
                        let mut acc = S::ZERO;
                        for g in row {
                            acc += *g;
                        }
                        buf[o] += acc;
                    }
                }
            });
        },
    ))
}

/// Valid 2-d convolution: `x [B, C_in, H, W]`, `w [C_out, C_in, KH, KW]`,
/// square stride. Kernels may be rectangular.
pub fn conv2d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>, stride: usize) -> Result<Tensor<S>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return Err(TensorError::Shape(format!(
            "conv2d expects x [B,C,H,W] and w [O,C,KH,KW], got {xs:?} and {ws:?}"
        )));
    }
    if xs[1] != ws[1] {
        return Err(TensorError::Shape(format!(
            "conv2d channel mismatch: {} vs {}",
            xs[1], ws[1]
        )));
    }
    if xs[2] < ws[2] || xs[3] < ws[3] {
        return Err(TensorError::Shape(format!(
            "conv2d input {}x{} smaller than kernel {}x{}",
            xs[2], xs[3], ws[2], ws[3]
        )));
    }
    assert_eq!(b.shape(), &[ws[0]], "conv2d bias shape");
    let d = Conv2dDims {
        batch: xs[0],
        c_in: xs[1],
        c_out: ws[0],
        h_in: xs[2],
        w_in: xs[3],
        kh: ws[2],
        kw: ws[3],
        stride,
    };
    let (h_out, w_out) = (d.h_out(), d.w_out());
    let mut out = vec![S::ZERO; d.batch * d.c_out * h_out * w_out];
    kernels::conv2d_fwd(&x.data(), &w.data(), &b.data(), &d, &mut out);
    Ok(Tensor::from_op(
        vec![d.batch, d.c_out, h_out, w_out],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        move |args| {
            let gy = args.grad;
            let xv = args.parents[0].data().clone();
            let wv = args.parents[1].data().clone();
            (args.sink)(0, &mut |buf| kernels::conv2d_bwd_x(gy, &wv, &d, buf));
            (args.sink)(1, &mut |buf| kernels::conv2d_bwd_w(gy, &xv, &d, buf));
            (args.sink)(2, &mut |buf| kernels::conv2d_bwd_b(gy, &d, buf));
        },
    ))
}

/// Square max-pool over `[B, C, H, W]`; ties break to the first element in
/// scan order so the backward scatter is deterministic.
pub fn maxpool2d<S: Scalar>(x: &Tensor<S>, k: usize, stride: usize) -> Result<Tensor<S>> {
    let xs = x.shape().to_vec();
    if xs.len() != 4 {
        return Err(TensorError::Shape(format!("maxpool2d expects [B,C,H,W], got {xs:?}")));
    }
    if xs[2] < k || xs[3] < k {
        return Err(TensorError::Shape(format!(
            "maxpool2d input {}x{} smaller than window {k}",
            xs[2], xs[3]
        )));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let h_out = (h - k) / stride + 1;
    let w_out = (w - k) / stride + 1;
    let mut out = vec![S::ZERO; b * c * h_out * w_out];
    let mut argmax = vec![0usize; out.len()];
    kernels::maxpool2d_fwd(&x.data(), b, c, h, w, k, stride, &mut out, &mut argmax);
    let plane_out = h_out * w_out;
    let plane_in = h * w;
    Ok(Tensor::from_op(
        vec![b, c, h_out, w_out],
        out,
        vec![x.clone()],
        move |args| {
            let gy = args.grad;
            (args.sink)(0, &mut |buf| {
                kernels::maxpool2d_bwd(gy, &argmax, plane_out, plane_in, buf);
            });
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv1d_length_formula() {
        // K=8, S=4, T=44100 -> floor((44100-8)/4)+1 = 11024
        let d = Conv1dDims { batch: 1, c_in: 1, c_out: 1, t_in: 44100, k: 8, stride: 4 };
        assert_eq!(d.t_out(), 11024);
    }

    #[test]
    fn convtr1d_inverts_length() {
        let d = ConvTr1dDims { batch: 1, c_in: 1, c_out: 1, t_in: 11024, k: 8, stride: 4 };
        assert_eq!(d.t_out(), 44100);
    }

    #[test]
    fn conv1d_rejects_short_input() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 3], vec![1.0, 2.0, 3.0]);
        let w = Tensor::<f32>::from_vec(&[1, 1, 8], vec![0.1; 8]);
        let b = Tensor::<f32>::zeros(&[1]);
        assert!(matches!(conv1d(&x, &w, &b, 4), Err(TensorError::Shape(_))));
    }

    #[test]
    fn adjoint_identity() {
        // <conv(x,w,S), y> == <x, convT(y,w,S)> for random data
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let (b, cin, cout, t, k, s) = (2usize, 3usize, 2usize, 21usize, 5usize, 4usize);
        let t_out = (t - k) / s + 1;
        let xv: Vec<f64> = (0..b * cin * t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..cout * cin * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let yv: Vec<f64> = (0..b * cout * t_out).map(|_| rng.random_range(-1.0..1.0)).collect();

        let x = Tensor::<f64>::from_vec(&[b, cin, t], xv.clone());
        let w = Tensor::<f64>::from_vec(&[cout, cin, k], wv.clone());
        let zero_out = Tensor::<f64>::zeros(&[cout]);
        let fwd = conv1d(&x, &w, &zero_out, s).unwrap();

        // the same [Cout, Cin, K] buffer reads as the transposed conv's
        // [in=Cout, out=Cin, K] weights without any permutation
        let y = Tensor::<f64>::from_vec(&[b, cout, t_out], yv.clone());
        let w_tr = Tensor::<f64>::from_vec(&[cout, cin, k], wv.clone());
        let zero_in = Tensor::<f64>::zeros(&[cin]);
        let adj = conv_transpose1d(&y, &w_tr, &zero_in, s).unwrap();

        let lhs: f64 = fwd.data().iter().zip(&yv).map(|(a, b)| a * b).sum();
        // convT output is longer than x when (t-k) % s != 0; compare on x's support
        let adj_data = adj.to_vec();
        let rhs: f64 = xv
            .iter()
            .enumerate()
            .map(|(i, &xvv)| {
                let (bc, tt) = (i / t, i % t);
                xvv * adj_data[bc * adj.shape()[2] + tt]
            })
            .sum();
        let rel = (lhs - rhs).abs() / lhs.abs().max(1e-12);
        assert!(rel < 1e-12, "adjoint identity violated: {lhs} vs {rhs}");
    }
}
