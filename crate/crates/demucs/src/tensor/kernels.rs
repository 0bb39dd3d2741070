//! Raw-slice compute kernels behind the tensor ops.
//!
//! Every kernel parallelizes over disjoint output rows/planes with rayon
//! (feature `parallel`, on by default) and computes each output element by a
//! single sequential reduction, so results are bit-identical to the
//! sequential fallbacks. The `*_seq` twins are always compiled; the
//! `kernels` criterion bench compares the two paths.

use crate::par::{for_each_chunk_mut, for_each_chunk_mut_seq};

use super::Scalar;

/// Geometry of a valid (unpadded) 1-d convolution.
#[derive(Debug, Clone, Copy)]
pub struct Conv1dDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv1dDims {
    pub fn t_out(&self) -> usize {
        (self.t_in - self.k) / self.stride + 1
    }
}

#[inline]
fn conv1d_row<S: Scalar>(x: &[S], w: &[S], bias: S, d: &Conv1dDims, b: usize, o: usize, out: &mut [S]) {
    let t_out = d.t_out();
    let x_b = &x[b * d.c_in * d.t_in..(b + 1) * d.c_in * d.t_in];
    let w_o = &w[o * d.c_in * d.k..(o + 1) * d.c_in * d.k];
    for (t, slot) in out.iter_mut().enumerate().take(t_out) {
        let start = t * d.stride;
        let mut acc = bias;
        for c in 0..d.c_in {
            let xs = &x_b[c * d.t_in + start..c * d.t_in + start + d.k];
            let ws = &w_o[c * d.k..(c + 1) * d.k];
            for (xv, wv) in xs.iter().zip(ws) {
                acc += *xv * *wv;
            }
        }
        *slot = acc;
    }
}

/// y[b,o,t] = bias[o] + sum_{c,k} w[o,c,k] * x[b,c,t*stride+k]
pub fn conv1d_fwd<S: Scalar>(x: &[S], w: &[S], bias: &[S], d: &Conv1dDims, out: &mut [S]) {
    let t_out = d.t_out();
    for_each_chunk_mut(out, t_out, |row, chunk| {
        let (b, o) = (row / d.c_out, row % d.c_out);
        conv1d_row(x, w, bias[o], d, b, o, chunk);
    });
}

/// Sequential twin of [`conv1d_fwd`] (bench baseline).
pub fn conv1d_fwd_seq<S: Scalar>(x: &[S], w: &[S], bias: &[S], d: &Conv1dDims, out: &mut [S]) {
    let t_out = d.t_out();
    for_each_chunk_mut_seq(out, t_out, |row, chunk| {
        let (b, o) = (row / d.c_out, row % d.c_out);
        conv1d_row(x, w, bias[o], d, b, o, chunk);
    });
}

/// gx[b,c,t] = sum over contributing (o, t') of gy[b,o,t'] * w[o,c,t-t'*stride]
pub fn conv1d_bwd_x<S: Scalar>(gy: &[S], w: &[S], d: &Conv1dDims, gx: &mut [S]) {
    let t_out = d.t_out();
    let s = d.stride as isize;
    for_each_chunk_mut(gx, d.t_in, |row, chunk| {
        let (b, c) = (row / d.c_in, row % d.c_in);
        for (t, slot) in chunk.iter_mut().enumerate() {
            let ti = t as isize;
            let lo = ((ti - d.k as isize + 1 + s - 1).div_euclid(s)).max(0) as usize;
            let hi = ((ti / s) as usize).min(t_out.saturating_sub(1));
            let mut acc = S::ZERO;
            if lo <= hi {
                for tp in lo..=hi {
                    let k = t - tp * d.stride;
                    for o in 0..d.c_out {
                        acc += gy[(b * d.c_out + o) * t_out + tp] * w[(o * d.c_in + c) * d.k + k];
                    }
                }
            }
            *slot += acc;
        }
    });
}

/// gw[o,c,k] = sum_{b,t'} gy[b,o,t'] * x[b,c,t'*stride+k]
pub fn conv1d_bwd_w<S: Scalar>(gy: &[S], x: &[S], d: &Conv1dDims, gw: &mut [S]) {
    let t_out = d.t_out();
    for_each_chunk_mut(gw, d.c_in * d.k, |o, chunk| {
        for c in 0..d.c_in {
            for k in 0..d.k {
                let mut acc = S::ZERO;
                for b in 0..d.batch {
                    let gy_row = &gy[(b * d.c_out + o) * t_out..(b * d.c_out + o + 1) * t_out];
                    let x_row = &x[(b * d.c_in + c) * d.t_in..(b * d.c_in + c + 1) * d.t_in];
                    for (tp, g) in gy_row.iter().enumerate() {
                        acc += *g * x_row[tp * d.stride + k];
                    }
                }
                chunk[c * d.k + k] += acc;
            }
        }
    });
}

/// gb[o] = sum_{b,t'} gy[b,o,t']
pub fn conv1d_bwd_b<S: Scalar>(gy: &[S], d: &Conv1dDims, gb: &mut [S]) {
    let t_out = d.t_out();
    for o in 0..d.c_out {
        let mut acc = S::ZERO;
        for b in 0..d.batch {
            let row = &gy[(b * d.c_out + o) * t_out..(b * d.c_out + o + 1) * t_out];
            for g in row {
                acc += *g;
            }
        }
        gb[o] += acc;
    }
}

/// Geometry of a 1-d transposed convolution; `t_out = (t_in-1)*stride + k`.
#[derive(Debug, Clone, Copy)]
pub struct ConvTr1dDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvTr1dDims {
    pub fn t_out(&self) -> usize {
        (self.t_in - 1) * self.stride + self.k
    }
}

#[inline]
fn convtr1d_row<S: Scalar>(x: &[S], w: &[S], bias: S, d: &ConvTr1dDims, b: usize, o: usize, out: &mut [S]) {
    // gather form: y[b,o,t'] = bias + sum over (t,k) with t*stride + k = t'
    let x_b = &x[b * d.c_in * d.t_in..(b + 1) * d.c_in * d.t_in];
    for (tp, slot) in out.iter_mut().enumerate() {
        let mut acc = bias;
        let k_lo = tp.saturating_sub((d.t_in - 1) * d.stride);
        for k in k_lo..d.k.min(tp + 1) {
            let up = tp - k;
            if up % d.stride != 0 {
                continue;
            }
            let t = up / d.stride;
            for c in 0..d.c_in {
                acc += x_b[c * d.t_in + t] * w[(c * d.c_out + o) * d.k + k];
            }
        }
        *slot = acc;
    }
}

/// Transposed convolution with weights laid out `[C_in, C_out, K]`; the
/// adjoint of [`conv1d_fwd`] with respect to its input.
pub fn convtr1d_fwd<S: Scalar>(x: &[S], w: &[S], bias: &[S], d: &ConvTr1dDims, out: &mut [S]) {
    let t_out = d.t_out();
    for_each_chunk_mut(out, t_out, |row, chunk| {
        let (b, o) = (row / d.c_out, row % d.c_out);
        convtr1d_row(x, w, bias[o], d, b, o, chunk);
    });
}

/// Sequential twin of [`convtr1d_fwd`].
pub fn convtr1d_fwd_seq<S: Scalar>(x: &[S], w: &[S], bias: &[S], d: &ConvTr1dDims, out: &mut [S]) {
    let t_out = d.t_out();
    for_each_chunk_mut_seq(out, t_out, |row, chunk| {
        let (b, o) = (row / d.c_out, row % d.c_out);
        convtr1d_row(x, w, bias[o], d, b, o, chunk);
    });
}

/// gx[b,c,t] = sum_{o,k} gy[b,o,t*stride+k] * w[c,o,k] — a strided gather.
pub fn convtr1d_bwd_x<S: Scalar>(gy: &[S], w: &[S], d: &ConvTr1dDims, gx: &mut [S]) {
    let t_out = d.t_out();
    for_each_chunk_mut(gx, d.t_in, |row, chunk| {
        let (b, c) = (row / d.c_in, row % d.c_in);
        for (t, slot) in chunk.iter_mut().enumerate() {
            let start = t * d.stride;
            let mut acc = S::ZERO;
            for o in 0..d.c_out {
                let gy_row = &gy[(b * d.c_out + o) * t_out..(b * d.c_out + o + 1) * t_out];
                let w_co = &w[(c * d.c_out + o) * d.k..(c * d.c_out + o + 1) * d.k];
                for (k, wv) in w_co.iter().enumerate() {
                    acc += gy_row[start + k] * *wv;
                }
            }
            *slot += acc;
        }
    });
}

/// gw[c,o,k] = sum_{b,t} x[b,c,t] * gy[b,o,t*stride+k]
pub fn convtr1d_bwd_w<S: Scalar>(gy: &[S], x: &[S], d: &ConvTr1dDims, gw: &mut [S]) {
    let t_out = d.t_out();
    for_each_chunk_mut(gw, d.c_out * d.k, |c, chunk| {
        for o in 0..d.c_out {
            for k in 0..d.k {
                let mut acc = S::ZERO;
                for b in 0..d.batch {
                    let x_row = &x[(b * d.c_in + c) * d.t_in..(b * d.c_in + c + 1) * d.t_in];
                    let gy_row = &gy[(b * d.c_out + o) * t_out..(b * d.c_out + o + 1) * t_out];
                    for (t, xv) in x_row.iter().enumerate() {
                        acc += *xv * gy_row[t * d.stride + k];
                    }
                }
                chunk[o * d.k + k] += acc;
            }
        }
    });
}

/// Geometry of a valid 2-d convolution over `[B, C, H, W]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl Conv2dDims {
    pub fn h_out(&self) -> usize {
        (self.h_in - self.kh) / self.stride + 1
    }
    pub fn w_out(&self) -> usize {
        (self.w_in - self.kw) / self.stride + 1
    }
}

#[inline]
fn conv2d_plane<S: Scalar>(x: &[S], w: &[S], bias: S, d: &Conv2dDims, b: usize, o: usize, out: &mut [S]) {
    let (h_out, w_out) = (d.h_out(), d.w_out());
    let x_b = &x[b * d.c_in * d.h_in * d.w_in..];
    let w_o = &w[o * d.c_in * d.kh * d.kw..];
    for i in 0..h_out {
        for j in 0..w_out {
            let mut acc = bias;
            for c in 0..d.c_in {
                for u in 0..d.kh {
                    let x_off = c * d.h_in * d.w_in + (i * d.stride + u) * d.w_in + j * d.stride;
                    let w_off = c * d.kh * d.kw + u * d.kw;
                    for v in 0..d.kw {
                        acc += x_b[x_off + v] * w_o[w_off + v];
                    }
                }
            }
            out[i * w_out + j] = acc;
        }
    }
}

/// y[b,o,i,j] = bias[o] + sum_{c,u,v} x[b,c,i*s+u,j*s+v] * w[o,c,u,v]
pub fn conv2d_fwd<S: Scalar>(x: &[S], w: &[S], bias: &[S], d: &Conv2dDims, out: &mut [S]) {
    let plane = d.h_out() * d.w_out();
    for_each_chunk_mut(out, plane, |row, chunk| {
        let (b, o) = (row / d.c_out, row % d.c_out);
        conv2d_plane(x, w, bias[o], d, b, o, chunk);
    });
}

/// Sequential twin of [`conv2d_fwd`].
pub fn conv2d_fwd_seq<S: Scalar>(x: &[S], w: &[S], bias: &[S], d: &Conv2dDims, out: &mut [S]) {
    let plane = d.h_out() * d.w_out();
    for_each_chunk_mut_seq(out, plane, |row, chunk| {
        let (b, o) = (row / d.c_out, row % d.c_out);
        conv2d_plane(x, w, bias[o], d, b, o, chunk);
    });
}

/// Input gradient of [`conv2d_fwd`].
pub fn conv2d_bwd_x<S: Scalar>(gy: &[S], w: &[S], d: &Conv2dDims, gx: &mut [S]) {
    let (h_out, w_out) = (d.h_out(), d.w_out());
    let s = d.stride;
    for_each_chunk_mut(gx, d.h_in * d.w_in, |row, chunk| {
        let (b, c) = (row / d.c_in, row % d.c_in);
        for y in 0..d.h_in {
            for xq in 0..d.w_in {
                let mut acc = S::ZERO;
                for u in 0..d.kh.min(y + 1) {
                    if (y - u) % s != 0 {
                        continue;
                    }
                    let i = (y - u) / s;
                    if i >= h_out {
                        continue;
                    }
                    for v in 0..d.kw.min(xq + 1) {
                        if (xq - v) % s != 0 {
                            continue;
                        }
                        let j = (xq - v) / s;
                        if j >= w_out {
                            continue;
                        }
                        for o in 0..d.c_out {
                            acc += gy[((b * d.c_out + o) * h_out + i) * w_out + j]
                                * w[((o * d.c_in + c) * d.kh + u) * d.kw + v];
                        }
                    }
                }
                chunk[y * d.w_in + xq] += acc;
            }
        }
    });
}

/// Weight gradient of [`conv2d_fwd`].
pub fn conv2d_bwd_w<S: Scalar>(gy: &[S], x: &[S], d: &Conv2dDims, gw: &mut [S]) {
    let (h_out, w_out) = (d.h_out(), d.w_out());
    for_each_chunk_mut(gw, d.c_in * d.kh * d.kw, |o, chunk| {
        for c in 0..d.c_in {
            for u in 0..d.kh {
                for v in 0..d.kw {
                    let mut acc = S::ZERO;
                    for b in 0..d.batch {
                        for i in 0..h_out {
                            for j in 0..w_out {
                                acc += gy[((b * d.c_out + o) * h_out + i) * w_out + j]
                                    * x[((b * d.c_in + c) * d.h_in + i * d.stride + u) * d.w_in
                                        + j * d.stride
                                        + v];
                            }
                        }
                    }
                    chunk[(c * d.kh + u) * d.kw + v] += acc;
                }
            }
        }
    });
}

/// Bias gradient of [`conv2d_fwd`].
pub fn conv2d_bwd_b<S: Scalar>(gy: &[S], d: &Conv2dDims, gb: &mut [S]) {
    let plane = d.h_out() * d.w_out();
    for o in 0..d.c_out {
        let mut acc = S::ZERO;
        for b in 0..d.batch {
            let row = &gy[(b * d.c_out + o) * plane..(b * d.c_out + o + 1) * plane];
            for g in row {
                acc += *g;
            }
        }
        gb[o] += acc;
    }
}

/// Max-pool forward over `[B, C, H, W]` planes; records the flat input index
/// of each maximum (first occurrence wins ties) for the backward scatter.
pub fn maxpool2d_fwd<S: Scalar>(
    x: &[S],
    batch: usize,
    _channels: usize,
    h_in: usize,
    w_in: usize,
    k: usize,
    stride: usize,
    out: &mut [S],
    argmax: &mut [usize],
) {
    let h_out = (h_in - k) / stride + 1;
    let w_out = (w_in - k) / stride + 1;
    let plane_out = h_out * w_out;
    let plane_in = h_in * w_in;
    let _ = batch;
    // each chunk writes a disjoint plane of argmax, addressed by chunk id
    let argmax_ptr = SendPtr(argmax.as_mut_ptr());
    for_each_chunk_mut(out, plane_out, |row, chunk| {
        let argmax_ptr = &argmax_ptr; // capture the Send wrapper, not the raw pointer
        let base_in = row * plane_in;
        for i in 0..h_out {
            for j in 0..w_out {
                let mut best = x[base_in + (i * stride) * w_in + j * stride];
                let mut best_idx = (i * stride) * w_in + j * stride;
                for u in 0..k {
                    for v in 0..k {
                        let idx = (i * stride + u) * w_in + j * stride + v;
                        let val = x[base_in + idx];
                        if val > best {
                            best = val;
                            best_idx = idx;
                        }
                    }
                }
                chunk[i * w_out + j] = best;
                // disjoint per-plane writes
                unsafe { *argmax_ptr.0.add(row * plane_out + i * w_out + j) = best_idx };
            }
        }
    });
}

struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

/// Scatter pooled gradients back to their argmax positions.
pub fn maxpool2d_bwd<S: Scalar>(
    gy: &[S],
    argmax: &[usize],
    plane_out: usize,
    plane_in: usize,
    gx: &mut [S],
) {
    for_each_chunk_mut(gx, plane_in, |row, chunk| {
        let base = row * plane_out;
        for p in 0..plane_out {
            chunk[argmax[base + p]] += gy[base + p];
        }
    });
}

/// out[m,n] += sum_k a[m,k] * b[n,k]  (b is accessed transposed)
pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize, out: &mut [S]) {
    let _ = m;
    for_each_chunk_mut(out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, slot) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += *av * *bv;
            }
            *slot += acc;
        }
    });
}

/// Sequential twin of [`gemm_nt`].
pub fn gemm_nt_seq<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize, out: &mut [S]) {
    let _ = m;
    for_each_chunk_mut_seq(out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, slot) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += *av * *bv;
            }
            *slot += acc;
        }
    });
}

/// out[m,n] += sum_k a[m,k] * b[k,n]
pub fn gemm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize, out: &mut [S]) {
    let _ = m;
    for_each_chunk_mut(out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (slot, bv) in row.iter_mut().zip(b_row) {
                *slot += *av * *bv;
            }
        }
    });
}

/// out[m,n] += sum_k a[k,m] * b[k,n]  (a is accessed transposed)
pub fn gemm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize, out: &mut [S]) {
    let _ = m;
    for_each_chunk_mut(out, n, |i, row| {
        for kk in 0..k {
            let av = a[kk * m + i];
            let b_row = &b[kk * n..(kk + 1) * n];
            for (slot, bv) in row.iter_mut().zip(b_row) {
                *slot += av * *bv;
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv1d_hand_example() {
        // x=[1,2,3,4], w=[1,1], b=0, stride=2 -> [3, 7]
        let d = Conv1dDims { batch: 1, c_in: 1, c_out: 1, t_in: 4, k: 2, stride: 2 };
        let mut out = vec![0.0f32; d.t_out()];
        conv1d_fwd(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], &[0.0], &d, &mut out);
        assert_eq!(out, vec![3.0, 7.0]);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let d = Conv1dDims { batch: 1, c_in: 1, c_out: 1, t_in: 5, k: 1, stride: 1 };
        let x = [0.5f32, -1.0, 2.0, 0.0, 3.0];
        let mut out = vec![0.0f32; d.t_out()];
        conv1d_fwd(&x, &[1.0], &[0.0], &d, &mut out);
        assert_eq!(out, x.to_vec());
    }

    #[test]
    fn convtr1d_disjoint_copies() {
        // x=[1,2], w=[1,1,1,1], K=4, S=4 -> [1,1,1,1,2,2,2,2]
        let d = ConvTr1dDims { batch: 1, c_in: 1, c_out: 1, t_in: 2, k: 4, stride: 4 };
        let mut out = vec![0.0f32; d.t_out()];
        convtr1d_fwd(&[1.0, 2.0], &[1.0; 4], &[0.0], &d, &mut out);
        assert_eq!(out, vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn par_and_seq_paths_match_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let d = Conv1dDims { batch: 2, c_in: 3, c_out: 4, t_in: 50, k: 8, stride: 4 };
        let x: Vec<f32> = (0..d.batch * d.c_in * d.t_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..d.c_out * d.c_in * d.k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..d.c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut out_par = vec![0.0f32; d.batch * d.c_out * d.t_out()];
        let mut out_seq = out_par.clone();
        conv1d_fwd(&x, &w, &b, &d, &mut out_par);
        conv1d_fwd_seq(&x, &w, &b, &d, &mut out_seq);
        assert_eq!(out_par, out_seq);
    }

    #[test]
    fn maxpool_tracks_argmax() {
        let x = vec![1.0f32, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 1.0, 2.0];
        let mut out = vec![0.0f32; 1];
        let mut argmax = vec![0usize; 1];
        maxpool2d_fwd(&x, 1, 1, 3, 3, 3, 1, &mut out, &mut argmax);
        assert_eq!(out[0], 7.0);
        assert_eq!(argmax[0], 6);
        let mut gx = vec![0.0f32; 9];
        maxpool2d_bwd(&[2.0f32], &argmax, 1, 9, &mut gx);
        assert_eq!(gx[6], 2.0);
    }
}
