//! Fused multi-layer bidirectional LSTM.
//!
//! One graph node covers the whole stack: the forward pass caches per-step
//! gate activations and cell states, and the backward rule runs hand-written
//! backpropagation through time over those caches. Gates are stacked
//! [input, forget, cell, output] along the 4H axis; initial states are zero.
//! Layer inputs are `[T, B, C]` time-major; output is `[T, B, 2H]` with the
//! forward direction in the first H features.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::ops::sigmoid_scalar;
use super::param::{he_init, Param};
use super::{Scalar, Tensor};

/// Weights of one direction of one layer.
pub struct LstmLayerParams<S: Scalar = f32> {
    /// `[4H, C_in]` input-to-hidden.
    pub w_ih: Param<S>,
    /// `[4H, H]` hidden-to-hidden.
    pub w_hh: Param<S>,
    /// `[4H]`; the forget-gate quarter starts at 1, the rest at 0.
    pub bias: Param<S>,
}

impl<S: Scalar> LstmLayerParams<S> {
    fn new(name: &str, in_size: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut bias = vec![S::ZERO; 4 * hidden];
        for b in bias.iter_mut().take(2 * hidden).skip(hidden) {
            *b = S::ONE; // forget gate
        }
        LstmLayerParams {
            w_ih: Param::new(&format!("{name}.w_ih"), he_init(&[4 * hidden, in_size], in_size, rng)),
            w_hh: Param::new(&format!("{name}.w_hh"), he_init(&[4 * hidden, hidden], hidden, rng)),
            bias: Param::new(&format!("{name}.bias"), Tensor::leaf(&[4 * hidden], bias)),
        }
    }
}

/// A stack of bidirectional LSTM layers with optional inter-layer dropout.
pub struct BiLstm<S: Scalar = f32> {
    /// `layers[l] = [forward, backward]`.
    pub layers: Vec<[LstmLayerParams<S>; 2]>,
    pub input_size: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl<S: Scalar> BiLstm<S> {
    pub fn new(
        name: &str,
        input_size: usize,
        hidden: usize,
        num_layers: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(num_layers >= 1);
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let in_size = if l == 0 { input_size } else { 2 * hidden };
            layers.push([
                LstmLayerParams::new(&format!("{name}.{l}.fwd"), in_size, hidden, rng),
                LstmLayerParams::new(&format!("{name}.{l}.bwd"), in_size, hidden, rng),
            ]);
        }
        BiLstm { layers, input_size, hidden, dropout }
    }

    pub fn params(&self) -> Vec<Param<S>> {
        let mut out = Vec::new();
        for pair in &self.layers {
            for dir in pair {
                out.push(dir.w_ih.clone());
                out.push(dir.w_hh.clone());
                out.push(dir.bias.clone());
            }
        }
        out
    }

    /// Run the stack over `x [T, B, input_size]`.
    pub fn forward(&self, x: &Tensor<S>, training: bool, rng: Option<&mut ChaCha8Rng>) -> Tensor<S> {
        bilstm_forward(self, x, training, rng)
    }
}

/// Per-direction forward caches, indexed by absolute time step.
struct DirCache<S> {
    i: Vec<S>,
    f: Vec<S>,
    g: Vec<S>,
    o: Vec<S>,
    c: Vec<S>,
    tc: Vec<S>,
    h: Vec<S>,
}

#[allow(clippy::too_many_arguments)]
fn run_direction<S: Scalar>(
    input: &[S], // [T, B, C]
    t_len: usize,
    batch: usize,
    in_size: usize,
    hidden: usize,
    w_ih: &[S],
    w_hh: &[S],
    bias: &[S],
    reverse: bool,
) -> DirCache<S> {
    let bh = batch * hidden;
    let mut cache = DirCache {
        i: vec![S::ZERO; t_len * bh],
        f: vec![S::ZERO; t_len * bh],
        g: vec![S::ZERO; t_len * bh],
        o: vec![S::ZERO; t_len * bh],
        c: vec![S::ZERO; t_len * bh],
        tc: vec![S::ZERO; t_len * bh],
        h: vec![S::ZERO; t_len * bh],
    };
    let mut h_prev = vec![S::ZERO; bh];
    let mut c_prev = vec![S::ZERO; bh];
    let mut gates = vec![S::ZERO; batch * 4 * hidden];

    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let x_t = &input[t * batch * in_size..(t + 1) * batch * in_size];
        // gates = x_t W_ih^T + h_prev W_hh^T + bias
        for row in gates.chunks_mut(4 * hidden) {
            row.copy_from_slice(bias);
        }
        gemm_nt(x_t, w_ih, batch, 4 * hidden, in_size, &mut gates);
        gemm_nt(&h_prev, w_hh, batch, 4 * hidden, hidden, &mut gates);

        let base = t * bh;
        for b in 0..batch {
            let row = &gates[b * 4 * hidden..(b + 1) * 4 * hidden];
            for u in 0..hidden {
                let idx = base + b * hidden + u;
                let iv = sigmoid_scalar(row[u]);
                let fv = sigmoid_scalar(row[hidden + u]);
                let gv = row[2 * hidden + u].tanh();
                let ov = sigmoid_scalar(row[3 * hidden + u]);
                let cv = fv * c_prev[b * hidden + u] + iv * gv;
                let tcv = cv.tanh();
                cache.i[idx] = iv;
                cache.f[idx] = fv;
                cache.g[idx] = gv;
                cache.o[idx] = ov;
                cache.c[idx] = cv;
                cache.tc[idx] = tcv;
                cache.h[idx] = ov * tcv;
            }
        }
        h_prev.copy_from_slice(&cache.h[base..base + bh]);
        c_prev.copy_from_slice(&cache.c[base..base + bh]);
    }
    cache
}

/// BPTT for one direction. `dh_seq [T, B, H]` is the loss gradient on this
/// direction's output; gradients are accumulated into the weight buffers and
/// `dx [T, B, C]`.
#[allow(clippy::too_many_arguments)]
fn backprop_direction<S: Scalar>(
    cache: &DirCache<S>,
    input: &[S],
    dh_seq: &[S],
    t_len: usize,
    batch: usize,
    in_size: usize,
    hidden: usize,
    w_ih: &[S],
    w_hh: &[S],
    reverse: bool,
    dw_ih: &mut [S],
    dw_hh: &mut [S],
    db: &mut [S],
    dx: &mut [S],
)
{
    let bh = batch * hidden;
    let mut dh_carry = vec![S::ZERO; bh];
    let mut dc = vec![S::ZERO; bh];
    let mut da = vec![S::ZERO; batch * 4 * hidden];

    for step in (0..t_len).rev() {
        let t = if reverse { t_len - 1 - step } else { step };
        let base = t * bh;
        let prev_t = if step > 0 {
            Some(if reverse { t_len - step } else { step - 1 })
        } else {
            None
        };

        for b in 0..batch {
            for u in 0..hidden {
                let idx = base + b * hidden + u;
                let k = b * hidden + u;
                let dh = dh_seq[idx] + dh_carry[k];
                let (iv, fv, gv, ov) = (cache.i[idx], cache.f[idx], cache.g[idx], cache.o[idx]);
                let tcv = cache.tc[idx];
                let c_prev = match prev_t {
                    Some(pt) => cache.c[pt * bh + k],
                    None => S::ZERO,
                };
                let d_o = dh * tcv;
                let dcv = dc[k] + dh * ov * (S::ONE - tcv * tcv);
                let d_i = dcv * gv;
                let d_g = dcv * iv;
                let d_f = dcv * c_prev;
                dc[k] = dcv * fv; // carried to the previous step

                let row = &mut da[b * 4 * hidden..(b + 1) * 4 * hidden];
                row[u] = d_i * iv * (S::ONE - iv);
                row[hidden + u] = d_f * fv * (S::ONE - fv);
                row[2 * hidden + u] = d_g * (S::ONE - gv * gv);
                row[3 * hidden + u] = d_o * ov * (S::ONE - ov);
            }
        }

        let x_t = &input[t * batch * in_size..(t + 1) * batch * in_size];
        // dW_ih += da^T x_t ; dW_hh += da^T h_prev ; db += sum_b da
        gemm_tn(&da, x_t, 4 * hidden, in_size, batch, dw_ih);
        if let Some(pt) = prev_t {
            let h_prev = &cache.h[pt * bh..pt * bh + bh];
            gemm_tn(&da, h_prev, 4 * hidden, hidden, batch, dw_hh);
        }
        for b in 0..batch {
            for (dbv, dav) in db.iter_mut().zip(&da[b * 4 * hidden..(b + 1) * 4 * hidden]) {
                *dbv += *dav;
            }
        }
        // dx_t += da W_ih ; dh_carry = da W_hh
        gemm_nn(&da, w_ih, batch, in_size, 4 * hidden, &mut dx[t * batch * in_size..(t + 1) * batch * in_size]);
        dh_carry.fill(S::ZERO);
        gemm_nn(&da, w_hh, batch, hidden, 4 * hidden, &mut dh_carry);
    }
}

/// Run a [`BiLstm`] over `x [T, B, C]`, producing `[T, B, 2H]`. Inter-layer
/// dropout is applied only when `training` is true and needs an rng.
pub fn bilstm_forward<S: Scalar>(
    lstm: &BiLstm<S>,
    x: &Tensor<S>,
    training: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Tensor<S> {
    let shape = x.shape().to_vec();
    assert_eq!(shape.len(), 3, "bilstm input must be [T, B, C]");
    let (t_len, batch, in_size) = (shape[0], shape[1], shape[2]);
    assert_eq!(in_size, lstm.input_size, "bilstm input feature mismatch");
    let hidden = lstm.hidden;
    let n_layers = lstm.layers.len();
    let bh = batch * hidden;

    // parents: x then per layer/direction effective weights
    let mut parents: Vec<Tensor<S>> = vec![x.clone()];
    for pair in &lstm.layers {
        for dir in pair {
            parents.push(dir.w_ih.effective());
            parents.push(dir.w_hh.effective());
            parents.push(dir.bias.effective());
        }
    }

    let use_dropout = training && lstm.dropout > 0.0 && n_layers > 1;
    let keep = S::from_f64(1.0 / (1.0 - lstm.dropout));

    let mut caches: Vec<[DirCache<S>; 2]> = Vec::with_capacity(n_layers);
    let mut layer_inputs: Vec<Vec<S>> = Vec::with_capacity(n_layers); // input of layer l > 0
    let mut dropout_masks: Vec<Option<Vec<S>>> = Vec::with_capacity(n_layers);
    let mut current: Vec<S> = x.to_vec();

    for l in 0..n_layers {
        let layer_in = if l == 0 { lstm.input_size } else { 2 * hidden };
        if l > 0 {
            layer_inputs.push(current.clone());
        }
        let w_ih_f = parents[1 + 6 * l].data().clone();
        let w_hh_f = parents[2 + 6 * l].data().clone();
        let b_f = parents[3 + 6 * l].data().clone();
        let w_ih_b = parents[4 + 6 * l].data().clone();
        let w_hh_b = parents[5 + 6 * l].data().clone();
        let b_b = parents[6 + 6 * l].data().clone();

        let fwd = run_direction(&current, t_len, batch, layer_in, hidden, &w_ih_f, &w_hh_f, &b_f, false);
        let bwd = run_direction(&current, t_len, batch, layer_in, hidden, &w_ih_b, &w_hh_b, &b_b, true);

        // concat directions: [T, B, 2H]
        let mut merged = vec![S::ZERO; t_len * batch * 2 * hidden];
        for t in 0..t_len {
            for b in 0..batch {
                let src = t * bh + b * hidden;
                let dst = (t * batch + b) * 2 * hidden;
                merged[dst..dst + hidden].copy_from_slice(&fwd.h[src..src + hidden]);
                merged[dst + hidden..dst + 2 * hidden].copy_from_slice(&bwd.h[src..src + hidden]);
            }
        }
        caches.push([fwd, bwd]);

        // inter-layer dropout (not after the last layer)
        if use_dropout && l + 1 < n_layers {
            let r = rng.as_deref_mut().expect("training bilstm with dropout needs an rng");
            let mask: Vec<S> = (0..merged.len())
                .map(|_| if r.random_range(0.0..1.0) < lstm.dropout { S::ZERO } else { keep })
                .collect();
            for (v, m) in merged.iter_mut().zip(&mask) {
                *v = *v * *m;
            }
            dropout_masks.push(Some(mask));
        } else {
            dropout_masks.push(None);
        }
        current = merged;
    }

    let out_shape = vec![t_len, batch, 2 * hidden];
    Tensor::from_op(out_shape, current, parents, move |args| {
        let g = args.grad;
        let n_layers = caches.len();
        // gradient flowing into each layer's merged output, walking top-down
        let mut d_merged: Vec<S> = g.to_vec();
        for l in (0..n_layers).rev() {
            let layer_in = if l == 0 { in_size } else { 2 * hidden };
            // undo dropout that was applied to this layer's output
            if let Some(mask) = &dropout_masks[l] {
                for (v, m) in d_merged.iter_mut().zip(mask) {
                    *v = *v * *m;
                }
            }
            let input_vec;
            let input: &[S] = if l == 0 {
                input_vec = args.parents[0].data().clone();
                &input_vec
            } else {
                &layer_inputs[l - 1]
            };

            let mut dx_layer = vec![S::ZERO; t_len * batch * layer_in];
            for (dir_idx, reverse) in [(0usize, false), (1usize, true)] {
                // split this direction's dh out of the merged gradient
                let mut dh_seq = vec![S::ZERO; t_len * bh];
                for t in 0..t_len {
                    for b in 0..batch {
                        let src = (t * batch + b) * 2 * hidden + dir_idx * hidden;
                        let dst = t * bh + b * hidden;
                        dh_seq[dst..dst + hidden].copy_from_slice(&d_merged[src..src + hidden]);
                    }
                }
                let p = 1 + 6 * l + 3 * dir_idx;
                let w_ih = args.parents[p].data().clone();
                let w_hh = args.parents[p + 1].data().clone();
                let cache = &caches[l][dir_idx];

                let mut dw_ih = vec![S::ZERO; 4 * hidden * layer_in];
                let mut dw_hh = vec![S::ZERO; 4 * hidden * hidden];
                let mut db = vec![S::ZERO; 4 * hidden];
                backprop_direction(
                    cache, input, &dh_seq, t_len, batch, layer_in, hidden, &w_ih, &w_hh, reverse,
                    &mut dw_ih, &mut dw_hh, &mut db, &mut dx_layer,
                );
                (args.sink)(p, &mut |buf| {
                    for (o, v) in buf.iter_mut().zip(&dw_ih) {
                        *o += *v;
                    }
                });
                (args.sink)(p + 1, &mut |buf| {
                    for (o, v) in buf.iter_mut().zip(&dw_hh) {
                        *o += *v;
                    }
                });
                (args.sink)(p + 2, &mut |buf| {
                    for (o, v) in buf.iter_mut().zip(&db) {
                        *o += *v;
                    }
                });
            }
            if l == 0 {
                (args.sink)(0, &mut |buf| {
                    for (o, v) in buf.iter_mut().zip(&dx_layer) {
                        *o += *v;
                    }
                });
            } else {
                d_merged = dx_layer;
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_weights_zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lstm = BiLstm::<f32>::new("lstm", 3, 4, 2, 0.0, &mut rng);
        for pair in &mut lstm.layers {
            for dir in pair.iter_mut() {
                dir.w_ih.tensor().update_data(|d| d.fill(0.0));
                dir.w_hh.tensor().update_data(|d| d.fill(0.0));
                dir.bias.tensor().update_data(|d| d.fill(0.0));
            }
        }
        let x = Tensor::<f32>::zeros(&[5, 2, 3]);
        let y = lstm.forward(&x, false, None);
        assert_eq!(y.shape(), &[5, 2, 8]);
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_two_unidirectional_cells() {
        // at T = 1 both directions see the same single frame
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lstm = BiLstm::<f32>::new("lstm", 2, 3, 1, 0.0, &mut rng);
        let x = Tensor::<f32>::from_vec(&[1, 1, 2], vec![0.3, -0.7]);
        let y = lstm.forward(&x, false, None);
        assert_eq!(y.shape(), &[1, 1, 6]);

        // manual single cell per direction
        let cell = |p: &LstmLayerParams<f32>| -> Vec<f32> {
            let w_ih = p.w_ih.tensor().to_vec();
            let w_hh = p.w_hh.tensor().to_vec();
            let _ = w_hh; // h_prev = 0
            let b = p.bias.tensor().to_vec();
            let xv = [0.3f32, -0.7];
            let h = 3usize;
            let mut out = vec![0.0f32; h];
            for u in 0..h {
                let pre = |gate: usize| -> f32 {
                    let row = gate * h + u;
                    b[row] + w_ih[row * 2] * xv[0] + w_ih[row * 2 + 1] * xv[1]
                };
                let i = 1.0 / (1.0 + (-pre(0)).exp());
                let f = 1.0 / (1.0 + (-pre(1)).exp());
                let _ = f;
                let g = pre(2).tanh();
                let o = 1.0 / (1.0 + (-pre(3)).exp());
                let c = i * g; // c_prev = 0
                out[u] = o * c.tanh();
            }
            out
        };
        let want_f = cell(&lstm.layers[0][0]);
        let want_b = cell(&lstm.layers[0][1]);
        let got = y.to_vec();
        for u in 0..3 {
            assert!((got[u] - want_f[u]).abs() < 1e-6);
            assert!((got[3 + u] - want_b[u]).abs() < 1e-6);
        }
    }

    #[test]
    fn time_reversal_symmetry_single_layer() {
        // exchanging direction weights and reversing time swaps the output halves
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let lstm = BiLstm::<f32>::new("lstm", 2, 3, 1, 0.0, &mut rng);
        let swapped = BiLstm::<f32>::new("sw", 2, 3, 1, 0.0, &mut rng);
        // copy weights crosswise
        for (dst, src) in [(0usize, 1usize), (1, 0)] {
            swapped.layers[0][dst].w_ih.tensor().set_data(&lstm.layers[0][src].w_ih.tensor().to_vec());
            swapped.layers[0][dst].w_hh.tensor().set_data(&lstm.layers[0][src].w_hh.tensor().to_vec());
            swapped.layers[0][dst].bias.tensor().set_data(&lstm.layers[0][src].bias.tensor().to_vec());
        }
        let t_len = 6;
        let mut data = Vec::new();
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..t_len * 2 {
            data.push(r2.random_range(-1.0f32..1.0));
        }
        let x = Tensor::<f32>::from_vec(&[t_len, 1, 2], data.clone());
        let rev: Vec<f32> = (0..t_len)
            .rev()
            .flat_map(|t| data[t * 2..(t + 1) * 2].to_vec())
            .collect();
        let x_rev = Tensor::<f32>::from_vec(&[t_len, 1, 2], rev);

        let y = lstm.forward(&x, false, None).to_vec(); // [T, 1, 6]
        let y_sw_rev = swapped.forward(&x_rev, false, None).to_vec();

        // bilstm_swapped(reverse(x))[t] must equal swap_directions(bilstm(x)[T-1-t])
        for t in 0..t_len {
            let a = &y_sw_rev[t * 6..(t + 1) * 6];
            let b = &y[(t_len - 1 - t) * 6..(t_len - t) * 6];
            for u in 0..3 {
                assert!((a[u] - b[3 + u]).abs() < 1e-5, "fwd half mismatch at t={t}");
                assert!((a[3 + u] - b[u]).abs() < 1e-5, "bwd half mismatch at t={t}");
            }
        }
    }
}
