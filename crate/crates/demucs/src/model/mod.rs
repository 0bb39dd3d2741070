//! The waveform separator: an L-layer strided convolutional encoder, a
//! two-layer bidirectional LSTM bottleneck, and an L-layer transposed-
//! convolution decoder with U-Net skip concatenations, emitting one waveform
//! per source.
//!
//! Every encoder layer is `ReLU(Conv(C_{i-1} -> C_i, K, S))` followed by a
//! 1x1 convolution that doubles the channels and a GLU gating them back down
//! to `C_i`. Decoder layer i takes the incoming stream, applies a
//! length-preserving kernel-3 context convolution with ReLU, concatenates
//! the matching encoder output (the skip), rewrites with a 1x1 GLU, and
//! upsamples with `ConvTranspose(C_i -> C_{i-1}, K, S)` and ReLU; the last
//! layer instead emits `sources * channels` outputs with no activation.
//! Channel counts double per level (2 -> 48 -> ... -> 1536 with paper-scale
//! defaults). All convolutions are valid; the kernel-3 context conv is fed
//! explicitly zero-padded input so every level preserves the length algebra
//! of [`valid_length`].

mod checkpoint;

pub use checkpoint::{load_model, save_model};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{SourceSet, Waveform};
use crate::tensor::{
    conv1d, conv_transpose1d, glu, he_init, no_grad, rescale_param, BiLstm, Param, Result, Tensor,
    TensorError,
};

/// Separator hyperparameters. Defaults are the paper-scale configuration;
/// desk-scale work overrides `depth`, `initial_channels` and the audio rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Encoder/decoder depth L.
    pub depth: usize,
    /// Audio channels C0 of the mixture (2 = stereo).
    pub input_channels: usize,
    /// First-layer channel count C1.
    pub initial_channels: usize,
    /// Channel growth per level.
    pub growth: usize,
    /// Convolution kernel size K.
    pub kernel: usize,
    /// Convolution stride S.
    pub stride: usize,
    /// Bottleneck LSTM layers.
    pub lstm_layers: usize,
    /// Gate the 1x1 rewrites with GLU (false = plain ReLU, ablation).
    pub use_glu: bool,
    /// Keep the BiLSTM bottleneck (false = identity bottleneck, ablation).
    pub use_bilstm: bool,
    /// Weight-rescaling reference level a; 0 disables rescaling.
    pub rescale_reference: f64,
    /// Also rescale LSTM input-hidden weights (off: convolutions only).
    pub rescale_lstm: bool,
    /// Number of output sources N.
    pub sources: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 6,
            input_channels: 2,
            initial_channels: 48,
            growth: 2,
            kernel: 8,
            stride: 4,
            lstm_layers: 2,
            use_glu: true,
            use_bilstm: true,
            rescale_reference: 0.1,
            rescale_lstm: false,
            sources: 4,
        }
    }
}

impl ModelConfig {
    /// C_i for i in 0..=depth: `[C0, C1, C1*growth, ...]`.
    pub fn channel_ladder(&self) -> Vec<usize> {
        let mut ladder = vec![self.input_channels];
        let mut c = self.initial_channels;
        for _ in 0..self.depth {
            ladder.push(c);
            c *= self.growth;
        }
        ladder
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(TensorError::Contract("depth must be >= 1".into()));
        }
        if self.kernel <= self.stride || self.stride < 1 {
            return Err(TensorError::Contract(format!(
                "need kernel > stride >= 1, got K={} S={}",
                self.kernel, self.stride
            )));
        }
        if self.input_channels == 0 || self.initial_channels == 0 || self.sources == 0 {
            return Err(TensorError::Contract("channel counts must be positive".into()));
        }
        if self.growth < 1 || self.lstm_layers < 1 {
            return Err(TensorError::Contract("growth and lstm_layers must be >= 1".into()));
        }
        Ok(())
    }
}

pub(crate) struct ConvParams {
    pub(crate) w: Param<f32>,
    pub(crate) b: Param<f32>,
}

impl ConvParams {
    /// `shape = [out, in, k]`, he-init with the given fan-in.
    pub(crate) fn new(name: &str, shape: [usize; 3], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::with_bias_len(name, shape, shape[0], fan_in, rng)
    }

    /// Transposed convolutions store weights `[in, out, k]`, so the bias
    /// length is `shape[1]`.
    pub(crate) fn new_transposed(name: &str, shape: [usize; 3], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::with_bias_len(name, shape, shape[1], fan_in, rng)
    }

    fn with_bias_len(name: &str, shape: [usize; 3], bias_len: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvParams {
            w: Param::new(&format!("{name}.weight"), he_init(&shape, fan_in, rng)),
            b: Param::new(&format!("{name}.bias"), he_init(&[bias_len], fan_in, rng)),
        }
    }
}

struct EncoderLayer {
    conv: ConvParams,
    rewrite: ConvParams,
}

struct DecoderLayer {
    context: ConvParams,
    rewrite: ConvParams,
    convtr: ConvParams,
}

/// The separator network; parameters live behind shared handles so the
/// optimizer and checkpointing see the same storage.
pub struct Model {
    pub config: ModelConfig,
    encoder: Vec<EncoderLayer>,
    lstm: Option<BiLstm<f32>>,
    lstm_rewrite: Option<ConvParams>,
    decoder: Vec<DecoderLayer>,
}

/// Build and initialize a separator: weights are he-initialized with each
/// layer's fan-in, then convolution weights (and optionally LSTM
/// input-hidden weights) are rescaled to the reference level. Deterministic
/// in `seed`.
pub fn new_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ladder = config.channel_ladder();
    let k = config.kernel;
    let glu_mul = if config.use_glu { 2 } else { 1 };

    let mut encoder = Vec::with_capacity(config.depth);
    for i in 1..=config.depth {
        let (c_prev, c) = (ladder[i - 1], ladder[i]);
        encoder.push(EncoderLayer {
            conv: ConvParams::new(&format!("encoder.{i}.conv"), [c, c_prev, k], c_prev * k, &mut rng),
            rewrite: ConvParams::new(&format!("encoder.{i}.rewrite"), [glu_mul * c, c, 1], c, &mut rng),
        });
    }

    let c_top = *ladder.last().unwrap();
    let (lstm, lstm_rewrite) = if config.use_bilstm {
        let lstm = BiLstm::new("lstm", c_top, c_top, config.lstm_layers, 0.0, &mut rng);
        let rewrite = ConvParams::new("lstm.rewrite", [c_top, 2 * c_top, 1], 2 * c_top, &mut rng);
        (Some(lstm), Some(rewrite))
    } else {
        (None, None)
    };

    let mut decoder = Vec::with_capacity(config.depth);
    for i in (1..=config.depth).rev() {
        let c = ladder[i];
        let c_out = if i > 1 { ladder[i - 1] } else { config.sources * config.input_channels };
        decoder.push(DecoderLayer {
            context: ConvParams::new(&format!("decoder.{i}.context"), [c, c, 3], c * 3, &mut rng),
            // takes the 2C_i concat back down to C_i (via GLU when enabled)
            rewrite: ConvParams::new(
                &format!("decoder.{i}.rewrite"),
                [glu_mul * c, 2 * c, 1],
                2 * c,
                &mut rng,
            ),
            convtr: ConvParams::new_transposed(&format!("decoder.{i}.convtr"), [c, c_out, k], c * k, &mut rng),
        });
    }

    let mut model = Model { config: config.clone(), encoder, lstm, lstm_rewrite, decoder };
    if config.rescale_reference > 0.0 {
        let a = config.rescale_reference;
        for p in model.conv_weight_params_mut() {
            rescale_param(p, a);
        }
        if config.rescale_lstm {
            if let Some(lstm) = model.lstm.as_mut() {
                for pair in lstm.layers.iter_mut() {
                    for dir in pair.iter_mut() {
                        rescale_param(&mut dir.w_ih, a);
                    }
                }
            }
        }
    }
    Ok(model)
}

impl Model {
    /// All trainable parameters in a stable order.
    pub fn params(&self) -> Vec<Param<f32>> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.push(l.conv.w.clone());
            out.push(l.conv.b.clone());
            out.push(l.rewrite.w.clone());
            out.push(l.rewrite.b.clone());
        }
        if let Some(lstm) = &self.lstm {
            out.extend(lstm.params());
        }
        if let Some(r) = &self.lstm_rewrite {
            out.push(r.w.clone());
            out.push(r.b.clone());
        }
        for l in &self.decoder {
            out.push(l.context.w.clone());
            out.push(l.context.b.clone());
            out.push(l.rewrite.w.clone());
            out.push(l.rewrite.b.clone());
            out.push(l.convtr.w.clone());
            out.push(l.convtr.b.clone());
        }
        out
    }

    fn conv_weight_params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut out = Vec::new();
        for l in &mut self.encoder {
            out.push(&mut l.conv.w);
            out.push(&mut l.rewrite.w);
        }
        if let Some(r) = &mut self.lstm_rewrite {
            out.push(&mut r.w);
        }
        for l in &mut self.decoder {
            out.push(&mut l.context.w);
            out.push(&mut l.rewrite.w);
            out.push(&mut l.convtr.w);
        }
        out
    }

    /// Convolution weight tensors (the ones subject to rescaling).
    pub fn conv_weight_params(&self) -> Vec<Param<f32>> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.push(l.conv.w.clone());
            out.push(l.rewrite.w.clone());
        }
        if let Some(r) = &self.lstm_rewrite {
            out.push(r.w.clone());
        }
        for l in &self.decoder {
            out.push(l.context.w.clone());
            out.push(l.rewrite.w.clone());
            out.push(l.convtr.w.clone());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Run the separator over `mix [B, C0, T]`; `T` must already be a valid
    /// length. Output is `[B, N, C0, T]`.
    pub fn forward(&self, mix: &Tensor) -> Result<Tensor> {
        let shape = mix.shape().to_vec();
        if shape.len() != 3 || shape[1] != self.config.input_channels {
            return Err(TensorError::Shape(format!(
                "expected mix [B, {}, T], got {shape:?}",
                self.config.input_channels
            )));
        }
        let t_in = shape[2];
        if valid_length(t_in, &self.config) != t_in {
            return Err(TensorError::Shape(format!(
                "input length {t_in} is not a valid length (next is {})",
                valid_length(t_in, &self.config)
            )));
        }
        let s = self.config.stride;

        let mut x = mix.clone();
        let mut skips: Vec<Tensor> = Vec::with_capacity(self.config.depth);
        for layer in &self.encoder {
            x = conv1d(&x, &layer.conv.w.effective(), &layer.conv.b.effective(), s)?.relu();
            x = conv1d(&x, &layer.rewrite.w.effective(), &layer.rewrite.b.effective(), 1)?;
            x = if self.config.use_glu { glu(&x, 1)? } else { x.relu() };
            skips.push(x.clone());
        }

        if let (Some(lstm), Some(rewrite)) = (&self.lstm, &self.lstm_rewrite) {
            let tbc = x.bct_to_tbc();
            let out = lstm.forward(&tbc, false, None);
            x = out.tbc_to_bct();
            x = conv1d(&x, &rewrite.w.effective(), &rewrite.b.effective(), 1)?.relu();
        }

        for (d, layer) in self.decoder.iter().enumerate() {
            let skip = &skips[self.config.depth - 1 - d];
            x = x.pad_last(1, 1);
            x = conv1d(&x, &layer.context.w.effective(), &layer.context.b.effective(), 1)?.relu();
            x = crate::tensor::concat(&[&x, skip], 1);
            x = conv1d(&x, &layer.rewrite.w.effective(), &layer.rewrite.b.effective(), 1)?;
            x = if self.config.use_glu { glu(&x, 1)? } else { x.relu() };
            x = conv_transpose1d(&x, &layer.convtr.w.effective(), &layer.convtr.b.effective(), s)?;
            if d + 1 < self.config.depth {
                x = x.relu();
            }
        }

        let b = shape[0];
        Ok(x.reshape(&[b, self.config.sources, self.config.input_channels, t_in]))
    }

    /// Separate one track: zero-pad symmetrically to the next valid length,
    /// run the network without building a graph, trim the padding back off.
    /// The caller is responsible for matching the model's training sample
    /// rate.
    pub fn separate(&self, wave: &Waveform) -> Result<SourceSet> {
        if wave.channels() != self.config.input_channels {
            return Err(TensorError::Shape(format!(
                "model expects {} channel(s), waveform has {}",
                self.config.input_channels,
                wave.channels()
            )));
        }
        if self.config.sources != 4 {
            return Err(TensorError::Contract("separate() emits the fixed 4-source set".into()));
        }
        let t = wave.frames();
        let t_valid = valid_length(t.max(1), &self.config);
        let pad = t_valid - t;
        let left = pad / 2;

        let c = wave.channels();
        let mut data = vec![0.0f32; c * t_valid];
        for ch in 0..c {
            data[ch * t_valid + left..ch * t_valid + left + t].copy_from_slice(wave.channel(ch));
        }
        let mix = Tensor::from_vec(&[1, c, t_valid], data);
        let out = no_grad(|| self.forward(&mix))?;
        let out_data = out.data();

        let mut sources: Vec<Waveform> = Vec::with_capacity(4);
        for src in 0..4 {
            let mut samples = vec![0.0f32; c * t];
            for ch in 0..c {
                let base = (src * c + ch) * t_valid + left;
                samples[ch * t..(ch + 1) * t].copy_from_slice(&out_data[base..base + t]);
            }
            sources.push(Waveform::new(samples, c, wave.sample_rate()));
        }
        let mut it = sources.into_iter();
        Ok(SourceSet::new([
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        ]))
    }
}

/// Smallest admissible input length >= `t_in`: descending through the
/// encoder must divide exactly at every level and the decoder's
/// `(t-1)*stride + kernel` must reproduce the input length.
pub fn valid_length(t_in: usize, config: &ModelConfig) -> usize {
    let ascend = |bottom: u64| -> u64 {
        let mut t = bottom;
        for _ in 0..config.depth {
            t = (t - 1) * config.stride as u64 + config.kernel as u64;
        }
        t
    };
    let a1 = ascend(1);
    if (t_in as u64) <= a1 {
        return a1 as usize;
    }
    let step = (config.stride as u64).pow(config.depth as u32);
    let bottom = 1 + (t_in as u64 - a1).div_ceil(step);
    let result = ascend(bottom);
    debug_assert!(result >= t_in as u64 && result - (t_in as u64) < step);
    result as usize
}

/// Parameter count computed from the configuration alone, independently of
/// the built network.
pub fn expected_param_count(config: &ModelConfig) -> usize {
    let ladder = config.channel_ladder();
    let k = config.kernel;
    let glu_mul = if config.use_glu { 2 } else { 1 };
    let mut total = 0usize;

    for i in 1..=config.depth {
        let (c_prev, c) = (ladder[i - 1], ladder[i]);
        total += c * c_prev * k + c; // strided conv
        total += glu_mul * c * c + glu_mul * c; // 1x1 rewrite
    }
    if config.use_bilstm {
        let h = *ladder.last().unwrap();
        for l in 0..config.lstm_layers {
            let in_size = if l == 0 { h } else { 2 * h };
            // two directions: w_ih + w_hh + bias
            total += 2 * (4 * h * in_size + 4 * h * h + 4 * h);
        }
        total += h * 2 * h + h; // post-LSTM 1x1
    }
    for i in (1..=config.depth).rev() {
        let c = ladder[i];
        let c_out = if i > 1 { ladder[i - 1] } else { config.sources * config.input_channels };
        total += c * c * 3 + c; // context conv
        total += glu_mul * c * 2 * c + glu_mul * c; // 1x1 rewrite on concat
        total += c * c_out * k + c_out; // transposed conv
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            depth: 2,
            input_channels: 1,
            initial_channels: 4,
            growth: 2,
            kernel: 8,
            stride: 4,
            lstm_layers: 2,
            use_glu: true,
            use_bilstm: true,
            rescale_reference: 0.1,
            rescale_lstm: false,
            sources: 4,
        }
    }

    #[test]
    fn default_channel_ladder() {
        let ladder = ModelConfig::default().channel_ladder();
        assert_eq!(ladder, vec![2, 48, 96, 192, 384, 768, 1536]);
    }

    #[test]
    fn valid_length_single_layer() {
        let config = ModelConfig { depth: 1, kernel: 8, stride: 4, ..tiny_config() };
        assert_eq!(valid_length(8, &config), 8);
        assert_eq!(valid_length(9, &config), 12);
    }

    #[test]
    fn valid_length_idempotent_and_geq_identity() {
        let config = tiny_config();
        for t in 1..=10_000 {
            let v = valid_length(t, &config);
            assert!(v >= t);
            assert_eq!(valid_length(v, &config), v);
        }
    }

    #[test]
    fn valid_length_matches_recurrence_oracle() {
        // brute force: ascend from every bottom length until >= target
        let config = ModelConfig { depth: 3, kernel: 8, stride: 4, ..tiny_config() };
        let ascend = |mut t: usize| {
            for _ in 0..3 {
                t = (t - 1) * 4 + 8;
            }
            t
        };
        for t_in in [1usize, 100, 1000, 44100] {
            let mut bottom = 1;
            while ascend(bottom) < t_in {
                bottom += 1;
            }
            assert_eq!(valid_length(t_in, &config), ascend(bottom));
        }
    }

    #[test]
    fn forward_shape_contract() {
        let config = tiny_config();
        let model = new_model(&config, 1).unwrap();
        let t = valid_length(1000, &config);
        let mix = Tensor::zeros(&[2, 1, t]);
        let out = model.forward(&mix).unwrap();
        assert_eq!(out.shape(), &[2, 4, 1, t]);
    }

    #[test]
    fn forward_rejects_invalid_length() {
        let config = tiny_config();
        let model = new_model(&config, 1).unwrap();
        let t = valid_length(1000, &config) + 1;
        let mix = Tensor::zeros(&[1, 1, t]);
        assert!(matches!(model.forward(&mix), Err(TensorError::Shape(_))));
    }

    #[test]
    fn ablations_still_run() {
        for (use_glu, use_bilstm) in [(false, true), (true, false), (false, false)] {
            let config = ModelConfig { use_glu, use_bilstm, ..tiny_config() };
            let model = new_model(&config, 3).unwrap();
            let t = valid_length(500, &config);
            let mix = Tensor::zeros(&[1, 1, t]);
            let out = model.forward(&mix).unwrap();
            assert_eq!(out.shape(), &[1, 4, 1, t]);
            assert_eq!(model.num_params(), expected_param_count(&config));
        }
    }

    #[test]
    fn param_count_matches_independent_formula() {
        let config = tiny_config();
        let model = new_model(&config, 7).unwrap();
        assert_eq!(model.num_params(), expected_param_count(&config));
        // paper-scale too (construction only)
        let full = ModelConfig::default();
        let model = new_model(&full, 7).unwrap();
        assert_eq!(model.num_params(), expected_param_count(&full));
    }

    #[test]
    fn rescaled_conv_weights_sit_at_reference() {
        let model = new_model(&tiny_config(), 5).unwrap();
        for p in model.conv_weight_params() {
            let std = p.std();
            assert!((std - 0.1).abs() < 1e-3, "{} std {std}", p.name());
        }
    }

    #[test]
    fn rescaling_preserves_forward_output() {
        let mut off = tiny_config();
        off.rescale_reference = 0.0;
        let m_off = new_model(&off, 11).unwrap();
        let mut on = tiny_config();
        on.rescale_reference = 0.1;
        let m_on = new_model(&on, 11).unwrap();
        let t = valid_length(600, &off);
        let data: Vec<f32> = (0..t).map(|i| ((i as f32) * 0.01).sin() * 0.5).collect();
        let mix = Tensor::from_vec(&[1, 1, t], data);
        let a = m_off.forward(&mix).unwrap().to_vec();
        let b = m_on.forward(&mix).unwrap().to_vec();
        let mut worst = 0.0f32;
        let mut denom = 0.0f32;
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
            denom = denom.max(x.abs());
        }
        assert!(worst / denom.max(1e-6) < 1e-5, "rel dev {}", worst / denom);
    }

    #[test]
    fn zero_bias_zero_input_gives_zero_output() {
        let config = tiny_config();
        let model = new_model(&config, 2).unwrap();
        for p in model.params() {
            if p.name().contains("bias") {
                p.tensor().update_data(|d| d.fill(0.0));
            }
        }
        let t = valid_length(500, &config);
        let mix = Tensor::zeros(&[1, 1, t]);
        let out = model.forward(&mix).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_lengths_follow_recurrence() {
        // output length at depth i equals the recurrence applied i times
        let config = tiny_config();
        let model = new_model(&config, 4).unwrap();
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let t = valid_length(rng.random_range(100..4000), &config);
            let mut expect = t;
            for _ in 0..config.depth {
                expect = (expect - config.kernel) / config.stride + 1;
            }
            // run just the encoder
            let mix = Tensor::zeros(&[1, 1, t]);
            let mut x = mix;
            for layer in &model.encoder {
                x = conv1d(&x, &layer.conv.w.effective(), &layer.conv.b.effective(), config.stride)
                    .unwrap()
                    .relu();
                x = conv1d(&x, &layer.rewrite.w.effective(), &layer.rewrite.b.effective(), 1).unwrap();
                x = glu(&x, 1).unwrap();
            }
            assert_eq!(x.shape()[2], expect);
        }
    }

    #[test]
    fn separate_round_trips_shape() {
        let config = tiny_config();
        let model = new_model(&config, 6).unwrap();
        let wave = Waveform::new((0..3000).map(|i| (i as f32 * 0.01).sin() * 0.3).collect(), 1, 8000);
        let set = model.separate(&wave).unwrap();
        assert_eq!(set.frames(), 3000);
        assert_eq!(set.channels(), 1);
        assert_eq!(set.sample_rate(), 8000);
    }

    #[test]
    fn separate_at_valid_length_equals_forward() {
        let config = tiny_config();
        let model = new_model(&config, 8).unwrap();
        let t = valid_length(2000, &config);
        let data: Vec<f32> = (0..t).map(|i| ((i * 7 % 100) as f32 / 100.0) - 0.5).collect();
        let wave = Waveform::new(data.clone(), 1, 8000);
        let set = model.separate(&wave).unwrap();
        let mix = Tensor::from_vec(&[1, 1, t], data);
        let fwd = no_grad(|| model.forward(&mix)).unwrap();
        let fwd_data = fwd.data();
        for src in 0..4 {
            for t_i in 0..t {
                assert_eq!(set.source(src).channel(0)[t_i], fwd_data[src * t + t_i]);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let config = tiny_config();
        let model = new_model(&config, 9).unwrap();
        let t = valid_length(700, &config);
        let data: Vec<f32> = (0..t).map(|i| ((i % 37) as f32 / 37.0) - 0.5).collect();
        let mix = Tensor::from_vec(&[1, 1, t], data);
        let a = model.forward(&mix).unwrap().to_vec();
        let b = model.forward(&mix).unwrap().to_vec();
        assert_eq!(a, b);
    }
}
