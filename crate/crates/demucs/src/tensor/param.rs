//! Named trainable parameters, He initialization and weight rescaling.
//!
//! A [`Param`] stores weights together with a compensating output scale: the
//! value a layer actually uses is `scale * stored`. Rescaling moves magnitude
//! from the stored weights into the scale without changing the layer output,
//! which equalizes the per-coordinate update size an adaptive optimizer like
//! Adam applies across layers of very different fan-in.

use std::cell::Cell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};

/// A named leaf tensor plus its use-time multiplier. Clones share both the
/// tensor storage and the scale, so optimizers, checkpoints and the model
/// all see one parameter.
pub struct Param<S: Scalar = f32> {
    tensor: Tensor<S>,
    scale: Rc<Cell<S>>,
    name: String,
}

impl<S: Scalar> Clone for Param<S> {
    fn clone(&self) -> Self {
        Param { tensor: self.tensor.clone(), scale: Rc::clone(&self.scale), name: self.name.clone() }
    }
}

impl<S: Scalar> Param<S> {
    pub fn new(name: &str, tensor: Tensor<S>) -> Self {
        assert!(tensor.requires_grad(), "params must be leaf tensors");
        Param { tensor, scale: Rc::new(Cell::new(S::ONE)), name: name.to_string() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn scale(&self) -> S {
        self.scale.get()
    }

    pub(crate) fn set_scale(&mut self, scale: S) {
        self.scale.set(scale);
    }

    /// The stored (optimizer-visible) tensor.
    pub fn tensor(&self) -> &Tensor<S> {
        &self.tensor
    }

    /// The weight value used in forward passes: `scale * stored`. With a unit
    /// scale this is the stored tensor itself; otherwise a recorded scaling
    /// node, so gradients flow back to the stored weights multiplied by the
    /// scale.
    pub fn effective(&self) -> Tensor<S> {
        let s = self.scale.get();
        if s == S::ONE {
            self.tensor.clone()
        } else {
            self.tensor.scale(s)
        }
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad();
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    /// Population standard deviation of the stored weights.
    pub fn std(&self) -> f64 {
        tensor_std(&self.tensor)
    }

    /// Restore stored values and scale from a checkpoint record.
    pub fn load(&mut self, data: &[S], scale: S) {
        self.tensor.set_data(data);
        self.scale.set(scale);
    }
}

pub(crate) fn tensor_std<S: Scalar>(t: &Tensor<S>) -> f64 {
    let data = t.data();
    let n = data.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean: f64 = data.iter().map(|&v| v.to_f64()).sum::<f64>() / n;
    let var: f64 = data.iter().map(|&v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
    var.sqrt()
}

/// Uniform initialization with variance `1/fan_in`: i.i.d. on
/// `[-sqrt(3/fan_in), sqrt(3/fan_in)]`. Deterministic in the rng state.
pub fn he_init<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    assert!(fan_in > 0);
    let bound = (3.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n).map(|_| S::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::leaf(shape, data)
}

/// Reparameterize so the stored weights sit at the reference level `a`:
/// with `alpha = std(stored)/a`, divide the stored weights by `alpha` and
/// fold `alpha` into the use-time scale. The effective weight is unchanged
/// up to float rounding; afterwards `std(stored) == a`. A zero-spread tensor
/// is left untouched (scale stays 1).
pub fn rescale_param<S: Scalar>(p: &mut Param<S>, a: f64) {
    assert!(a > 0.0, "reference level must be positive");
    let std = p.std();
    if std < 1e-12 {
        eprintln!("warning: skipping rescale of {} (zero-spread weights)", p.name());
        return;
    }
    let alpha = std / a;
    let inv = S::from_f64(1.0 / alpha);
    p.tensor().update_data(|d| {
        for v in d.iter_mut() {
            *v = *v * inv;
        }
    });
    p.set_scale(p.scale() * S::from_f64(alpha));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn he_init_statistics() {
        // fan_in = 16 -> std ~= 0.25 within 2% over 1e5 draws
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = he_init::<f32>(&[100_000], 16, &mut rng);
        let std = tensor_std(&t);
        assert!((std - 0.25).abs() / 0.25 < 0.02, "std = {std}");
    }

    #[test]
    fn he_init_first_encoder_layer_scale() {
        // K=8, C_in=2 -> fan_in=16 -> std ~= 1/sqrt(16) = 0.25
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = he_init::<f32>(&[48, 2, 8], 16, &mut rng);
        let std = tensor_std(&t);
        assert!((std - 0.25).abs() < 0.03);
    }

    #[test]
    fn he_init_deterministic_in_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let x = he_init::<f32>(&[64], 8, &mut a);
        let y = he_init::<f32>(&[64], 8, &mut b);
        assert_eq!(x.to_vec(), y.to_vec());
    }

    #[test]
    fn rescale_reaches_reference_level_and_preserves_effective() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Param::new("w", he_init::<f64>(&[256], 4, &mut rng));
        let before = p.effective().to_vec();
        rescale_param(&mut p, 0.1);
        assert!((p.std() - 0.1).abs() < 1e-6, "stored std {} != 0.1", p.std());
        let after = p.effective().to_vec();
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn rescale_at_reference_is_noop() {
        // weights already at std = a: alpha = 1
        let data: Vec<f32> = vec![0.1, -0.1, 0.1, -0.1];
        let mut p = Param::new("w", Tensor::leaf(&[4], data.clone()));
        rescale_param(&mut p, 0.1);
        assert!((p.scale() - 1.0).abs() < 1e-6);
        for (a, b) in p.tensor().to_vec().iter().zip(&data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rescale_skips_constant_tensor() {
        let mut p = Param::new("w", Tensor::<f32>::leaf(&[4], vec![0.5; 4]));
        rescale_param(&mut p, 0.1);
        assert_eq!(p.scale(), 1.0);
        assert_eq!(p.tensor().to_vec(), vec![0.5; 4]);
    }

    #[test]
    fn effective_grad_scales_into_stored() {
        let mut p = Param::new("w", Tensor::<f32>::leaf(&[2], vec![0.4, -0.4]));
        rescale_param(&mut p, 0.1); // alpha = 4
        assert!((p.scale() - 4.0).abs() < 1e-5);
        let x = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]);
        let loss = p.effective().mul(&x).sum_all();
        loss.backward().unwrap();
        // d loss / d stored = scale * x
        let g = p.tensor().grad().unwrap();
        assert!((g[0] - 4.0).abs() < 1e-5);
        assert!((g[1] - 8.0).abs() < 1e-5);
    }
}
