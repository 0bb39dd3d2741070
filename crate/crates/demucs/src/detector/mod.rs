//! Per-window silent-source detection.
//!
//! A scattering front end ([`scatter2`]) turns 16 kHz mono audio into a
//! `(7, 48, T_w)` feature tensor on a 0.64 s / 64 ms window grid; the
//! classifier below maps it to one silence probability per source per
//! (pooled) window. Architecture: batch norm, two blocks of
//! `ReLU(Conv5x5) x2 + ReLU(Conv1x1) + MaxPool(5, 2) + BN`, a convolution
//! collapsing the frequency axis, a two-layer bidirectional LSTM with
//! dropout, and a 1x1 head with batch norm emitting 4 logits per step.
//! Channel widths are configurable: `DetectorConfig::paper()` is the
//! full-size stack, `DetectorConfig::desk()` a small one that trains on a
//! laptop.

mod checkpoint;
mod scattering;

pub use checkpoint::{load_detector, save_detector};
pub use scattering::{scatter2, ScatterError, ScatteringFeatures, ScatteringPlan};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use thiserror::Error;

use crate::audio::{downmix_mono, resample, AudioError, SourceSet, TrackDataset, Waveform};
use crate::metrics::{is_silent, relative_volume_window, RelVolume};
use crate::tensor::{
    batchnorm2d, bce_with_logits_loss, bilstm_forward, conv2d, he_init, maxpool2d, Adam,
    BatchNorm, BiLstm, Param, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Scatter(#[from] ScatterError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, DetectorError>;

/// Default label threshold: a source quieter than -13 dB relative to the
/// mixture counts as silent for training labels.
pub const SILENCE_THRESHOLD_DB: f64 = -13.0;

/// Width configuration of the classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectorConfig {
    pub in_channels: usize,
    pub freq_rows: usize,
    pub block1: [usize; 3],
    pub block2: [usize; 3],
    pub collapse_channels: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub head_channels: usize,
    pub sources: usize,
    /// LSTM inter-layer dropout probability, times 1000 (stored integral so
    /// the config stays Eq/hashable); 180 = 0.18.
    pub dropout_milli: u32,
}

impl DetectorConfig {
    /// Full-size stack.
    pub fn paper() -> Self {
        DetectorConfig {
            in_channels: 7,
            freq_rows: 48,
            block1: [128, 128, 256],
            block2: [256, 256, 512],
            collapse_channels: 1024,
            lstm_hidden: 1024,
            lstm_layers: 2,
            head_channels: 1024,
            sources: 4,
            dropout_milli: 180,
        }
    }

    /// Laptop-scale stack with the same topology.
    pub fn desk() -> Self {
        DetectorConfig {
            in_channels: 7,
            freq_rows: 48,
            block1: [8, 8, 16],
            block2: [16, 16, 32],
            collapse_channels: 32,
            lstm_hidden: 32,
            lstm_layers: 2,
            head_channels: 32,
            sources: 4,
            dropout_milli: 180,
        }
    }

    pub fn dropout(&self) -> f64 {
        self.dropout_milli as f64 / 1000.0
    }

    /// Extent left after two `conv5, conv5, conv1, pool(5,2)` blocks.
    pub fn stack_output_len(mut n: usize) -> Option<usize> {
        for _ in 0..2 {
            n = n.checked_sub(8)?; // two valid K=5 convolutions
            if n < 5 {
                return None;
            }
            n = (n - 5) / 2 + 1;
        }
        if n == 0 {
            None
        } else {
            Some(n)
        }
    }

    /// Frequency extent entering the collapsing convolution.
    pub fn collapsed_freq(&self) -> usize {
        Self::stack_output_len(self.freq_rows)
            .expect("freq_rows too small for the conv/pool stack")
    }

    /// Smallest number of input windows that produces one output step.
    pub fn min_windows() -> usize {
        let mut t = 1;
        while Self::stack_output_len(t).is_none() {
            t += 1;
        }
        t
    }

    /// Input window index at the receptive-field center of output step `u`:
    /// `4 * u + 18` for this stack.
    pub fn time_map(u: usize) -> usize {
        4 * u + 18
    }
}

struct Conv2dParams {
    w: Param<f32>,
    b: Param<f32>,
}

impl Conv2dParams {
    fn new(name: &str, shape: [usize; 4], rng: &mut ChaCha8Rng) -> Self {
        let fan_in = shape[1] * shape[2] * shape[3];
        Conv2dParams {
            w: Param::new(&format!("{name}.weight"), he_init(&shape, fan_in, rng)),
            b: Param::new(&format!("{name}.bias"), he_init(&[shape[0]], fan_in, rng)),
        }
    }
}

/// The silence classifier.
pub struct DetectorModel {
    pub config: DetectorConfig,
    bn0: BatchNorm,
    block1: [Conv2dParams; 3],
    bn1: BatchNorm,
    block2: [Conv2dParams; 3],
    bn2: BatchNorm,
    collapse: Conv2dParams,
    lstm: BiLstm<f32>,
    head1: Conv2dParams,
    bn3: BatchNorm,
    head2: Conv2dParams,
}

impl DetectorModel {
    pub fn new(config: &DetectorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let [b1a, b1b, b1c] = c.block1;
        let [b2a, b2b, b2c] = c.block2;
        let f_rem = c.collapsed_freq();
        DetectorModel {
            config: c.clone(),
            bn0: BatchNorm::new("bn0", c.in_channels),
            block1: [
                Conv2dParams::new("block1.0", [b1a, c.in_channels, 5, 5], &mut rng),
                Conv2dParams::new("block1.1", [b1b, b1a, 5, 5], &mut rng),
                Conv2dParams::new("block1.2", [b1c, b1b, 1, 1], &mut rng),
            ],
            bn1: BatchNorm::new("bn1", b1c),
            block2: [
                Conv2dParams::new("block2.0", [b2a, b1c, 5, 5], &mut rng),
                Conv2dParams::new("block2.1", [b2b, b2a, 5, 5], &mut rng),
                Conv2dParams::new("block2.2", [b2c, b2b, 1, 1], &mut rng),
            ],
            bn2: BatchNorm::new("bn2", b2c),
            collapse: Conv2dParams::new("collapse", [c.collapse_channels, b2c, f_rem, 1], &mut rng),
            lstm: BiLstm::new("lstm", c.collapse_channels, c.lstm_hidden, c.lstm_layers, c.dropout(), &mut rng),
            head1: Conv2dParams::new("head1", [c.head_channels, 2 * c.lstm_hidden, 1, 1], &mut rng),
            bn3: BatchNorm::new("bn3", c.head_channels),
            head2: Conv2dParams::new("head2", [c.sources, c.head_channels, 1, 1], &mut rng),
        }
    }

    /// Trainable parameters in a stable order (batch-norm running statistics
    /// are separate state, see the checkpoint module).
    pub fn params(&self) -> Vec<Param<f32>> {
        let mut out = vec![
            self.bn0.gamma.clone(),
            self.bn0.beta.clone(),
        ];
        for c in &self.block1 {
            out.push(c.w.clone());
            out.push(c.b.clone());
        }
        out.push(self.bn1.gamma.clone());
        out.push(self.bn1.beta.clone());
        for c in &self.block2 {
            out.push(c.w.clone());
            out.push(c.b.clone());
        }
        out.push(self.bn2.gamma.clone());
        out.push(self.bn2.beta.clone());
        out.push(self.collapse.w.clone());
        out.push(self.collapse.b.clone());
        out.extend(self.lstm.params());
        out.push(self.head1.w.clone());
        out.push(self.head1.b.clone());
        out.push(self.bn3.gamma.clone());
        out.push(self.bn3.beta.clone());
        out.push(self.head2.w.clone());
        out.push(self.head2.b.clone());
        out
    }

    pub(crate) fn batchnorms(&self) -> [&BatchNorm; 4] {
        [&self.bn0, &self.bn1, &self.bn2, &self.bn3]
    }

    /// Logits `[B, sources, T']` for features `[B, C, F, T_w]`.
    pub fn forward_logits(
        &self,
        x: &Tensor,
        training: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] != self.config.freq_rows {
            return Err(DetectorError::Tensor(TensorError::Shape(format!(
                "expected [B, {}, {}, T], got {shape:?}",
                self.config.in_channels, self.config.freq_rows
            ))));
        }
        if DetectorConfig::stack_output_len(shape[3]).is_none() {
            return Err(DetectorError::Contract(format!(
                "input of {} windows is shorter than the receptive minimum {}",
                shape[3],
                DetectorConfig::min_windows()
            )));
        }

        let mut h = batchnorm2d(x, &self.bn0, training);
        for (i, conv) in self.block1.iter().enumerate() {
            let stride = 1;
            let _ = i;
            h = conv2d(&h, &conv.w.effective(), &conv.b.effective(), stride)
                .map_err(DetectorError::Tensor)?
                .relu();
        }
        h = maxpool2d(&h, 5, 2).map_err(DetectorError::Tensor)?;
        h = batchnorm2d(&h, &self.bn1, training);
        for conv in &self.block2 {
            h = conv2d(&h, &conv.w.effective(), &conv.b.effective(), 1)
                .map_err(DetectorError::Tensor)?
                .relu();
        }
        h = maxpool2d(&h, 5, 2).map_err(DetectorError::Tensor)?;
        h = batchnorm2d(&h, &self.bn2, training);
        h = conv2d(&h, &self.collapse.w.effective(), &self.collapse.b.effective(), 1)
            .map_err(DetectorError::Tensor)?;

        // [B, CC, 1, T'] -> time-major for the LSTM
        let hs = h.shape().to_vec();
        let (b, cc, t_out) = (hs[0], hs[1], hs[3]);
        let h3 = h.reshape(&[b, cc, t_out]);
        let tbc = h3.bct_to_tbc();
        let lstm_out = bilstm_forward(&self.lstm, &tbc, training, rng.as_deref_mut());
        let bct = lstm_out.tbc_to_bct(); // [B, 2H, T']

        let h4 = bct.reshape(&[b, 2 * self.config.lstm_hidden, 1, t_out]);
        let mut y = conv2d(&h4, &self.head1.w.effective(), &self.head1.b.effective(), 1)
            .map_err(DetectorError::Tensor)?;
        y = batchnorm2d(&y, &self.bn3, training).relu();
        // dropout sits in the LSTM; the heads are deterministic
        let logits = conv2d(&y, &self.head2.w.effective(), &self.head2.b.effective(), 1)
            .map_err(DetectorError::Tensor)?;
        Ok(logits.reshape(&[b, self.config.sources, t_out]))
    }

    /// Silence probabilities `per_step[u][source]` for one feature tensor, in
    /// eval mode (frozen batch-norm statistics, no dropout, no graph).
    pub fn probabilities(&self, feats: &ScatteringFeatures) -> Result<Vec<[f32; 4]>> {
        let x = features_tensor(feats);
        let probs = crate::tensor::no_grad(|| -> Result<Tensor> {
            Ok(self.forward_logits(&x, false, None)?.sigmoid())
        })?;
        let data = probs.data();
        let t_out = probs.shape()[2];
        let mut out = Vec::with_capacity(t_out);
        for u in 0..t_out {
            out.push(std::array::from_fn(|s| data[s * t_out + u]));
        }
        Ok(out)
    }
}

/// Pack features into a `[1, C, F, T]` tensor.
pub fn features_tensor(feats: &ScatteringFeatures) -> Tensor {
    Tensor::from_vec(&[1, feats.channels, feats.rows, feats.windows], feats.data.clone())
}

/// Per-window silence labels on the scattering window grid. Windows are laid
/// out on the 16 kHz feature timeline and mapped back to the track's native
/// rate; a window where the whole mixture is silent labels every source
/// silent.
pub fn label_windows(track: &SourceSet, thres_db: f64, plan: &ScatteringPlan) -> Vec<[bool; 4]> {
    let sr = track.sample_rate() as u64;
    let fr = plan.sample_rate as u64;
    let n16 = ((track.frames() as u64 * fr + sr / 2) / sr) as usize;
    let windows = plan.num_windows(n16);
    let mixture = track.mixture();
    let (win, hop) = (plan.window_len() as u64, plan.hop_len() as u64);

    crate::par::map_indexed(windows, |w| {
        let start16 = w as u64 * hop;
        let end16 = start16 + win;
        let start = ((start16 * sr + fr / 2) / fr) as usize;
        let end = (((end16 * sr) + fr / 2) / fr) as usize;
        let end = end.min(track.frames());
        std::array::from_fn(|i| {
            match relative_volume_window(track.source(i), &mixture, start, end) {
                Ok(v) => is_silent(v, thres_db),
                Err(_) => true, // whole mixture silent: every source is
            }
        })
    })
}

/// Ground-truth relative volumes per window (used for calibration).
pub fn window_volumes(track: &SourceSet, plan: &ScatteringPlan) -> Vec<[RelVolume; 4]> {
    let sr = track.sample_rate() as u64;
    let fr = plan.sample_rate as u64;
    let n16 = ((track.frames() as u64 * fr + sr / 2) / sr) as usize;
    let windows = plan.num_windows(n16);
    let mixture = track.mixture();
    let (win, hop) = (plan.window_len() as u64, plan.hop_len() as u64);

    crate::par::map_indexed(windows, |w| {
        let start = ((w as u64 * hop * sr + fr / 2) / fr) as usize;
        let end = ((((w as u64 * hop) + win) * sr + fr / 2) / fr) as usize;
        let end = end.min(track.frames());
        std::array::from_fn(|i| {
            relative_volume_window(track.source(i), &mixture, start, end)
                .unwrap_or(RelVolume::SILENT)
        })
    })
}

/// Features plus labels of one track, ready for training.
pub struct PreparedTrack {
    pub feats: ScatteringFeatures,
    pub labels: Vec<[bool; 4]>,
}

/// Downmix, resample to the plan's rate, scatter, and label one track.
pub fn prepare_track(set: &SourceSet, plan: &ScatteringPlan, thres_db: f64) -> Result<PreparedTrack> {
    let mono = downmix_mono(&set.mixture());
    let wave16 = resample(&mono, plan.sample_rate);
    let feats = scatter2(&wave16, plan)?;
    let mut labels = label_windows(set, thres_db, plan);
    labels.truncate(feats.windows);
    Ok(PreparedTrack { feats, labels })
}

/// Detector training hyperparameters.
#[derive(Debug, Clone)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Windows per training crop.
    pub crop_windows: usize,
    pub seed: u64,
    pub silence_threshold_db: f64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            epochs: 40,
            batch_size: 64,
            lr: 5e-4,
            crop_windows: 64,
            seed: 0,
            silence_threshold_db: SILENCE_THRESHOLD_DB,
        }
    }
}

/// Train a fresh detector on a labeled dataset: Adam on the summed
/// per-source binary cross entropy over crops of consecutive windows.
/// Returns the model and the mean loss per epoch. Deterministic in the seed.
pub fn train_detector(
    dataset: &TrackDataset,
    config: &DetectorConfig,
    train: &DetectorTrainConfig,
) -> Result<(DetectorModel, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(DetectorError::Contract("training dataset is empty".into()));
    }
    let plan = ScatteringPlan::default();
    let prepared: Vec<Result<PreparedTrack>> = crate::par::map_indexed(dataset.len(), |i| {
        let set = dataset.load_track(i)?;
        prepare_track(&set, &plan, train.silence_threshold_db)
    });
    let mut tracks = Vec::with_capacity(prepared.len());
    for p in prepared {
        tracks.push(p?);
    }
    let model = DetectorModel::new(config, train.seed);
    let losses = train_detector_prepared(&model, &tracks, train)?;
    Ok((model, losses))
}

/// Training loop over already-prepared tracks (features + labels).
pub fn train_detector_prepared(
    model: &DetectorModel,
    tracks: &[PreparedTrack],
    train: &DetectorTrainConfig,
) -> Result<Vec<f64>> {
    if tracks.is_empty() {
        return Err(DetectorError::Contract("no prepared tracks".into()));
    }
    let crop = train.crop_windows.max(DetectorConfig::min_windows());
    let t_out = DetectorConfig::stack_output_len(crop)
        .ok_or_else(|| DetectorError::Contract(format!("crop of {crop} windows too short")))?;

    // crop coordinates (track, start window)
    let mut crops: Vec<(usize, usize)> = Vec::new();
    for (ti, tr) in tracks.iter().enumerate() {
        let mut start = 0;
        while start + crop <= tr.feats.windows {
            crops.push((ti, start));
            start += crop / 2;
        }
    }
    if crops.is_empty() {
        return Err(DetectorError::Contract("tracks shorter than one crop".into()));
    }

    let params = model.params();
    let mut opt = Adam::new(train.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xdec0de);
    let (channels, rows) = (tracks[0].feats.channels, tracks[0].feats.rows);
    let sources = model.config.sources;
    let mut epoch_losses = Vec::with_capacity(train.epochs);

    for _epoch in 0..train.epochs {
        crops.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in crops.chunks(train.batch_size) {
            let b = chunk.len();
            let mut x = vec![0.0f32; b * channels * rows * crop];
            let mut y = vec![0.0f32; b * sources * t_out];
            for (bi, &(ti, start)) in chunk.iter().enumerate() {
                let tr = &tracks[ti];
                for c in 0..channels {
                    for f in 0..rows {
                        for t in 0..crop {
                            x[((bi * channels + c) * rows + f) * crop + t] =
                                tr.feats.at(c, f, start + t);
                        }
                    }
                }
                for u in 0..t_out {
                    let w = start + DetectorConfig::time_map(u);
                    let labels = tr.labels[w.min(tr.labels.len() - 1)];
                    for (s, &lab) in labels.iter().enumerate().take(sources) {
                        y[(bi * sources + s) * t_out + u] = if lab { 1.0 } else { 0.0 };
                    }
                }
            }
            let x_t = Tensor::from_vec(&[b, channels, rows, crop], x);
            let y_t = Tensor::from_vec(&[b, sources, t_out], y);
            let logits = model.forward_logits(&x_t, true, Some(&mut rng))?;
            // summed-over-sources BCE, mean over batch and time
            let loss = bce_with_logits_loss(&logits, &y_t).scale(sources as f32);
            loss.backward().map_err(DetectorError::Tensor)?;
            opt.step(&params).map_err(DetectorError::Tensor)?;
            Adam::zero_grad(&params);
            total += loss.item() as f64;
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    Ok(epoch_losses)
}

/// Downmix/resample a mixture and produce per-window probabilities plus the
/// map from output step to feature-window index.
pub fn detect_track(model: &DetectorModel, mixture: &Waveform) -> Result<Vec<[f32; 4]>> {
    let plan = ScatteringPlan::default();
    let mono = downmix_mono(mixture);
    let wave16 = resample(&mono, plan.sample_rate);
    let feats = scatter2(&wave16, &plan)?;
    model.probabilities(&feats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::no_grad;

    fn rand_features(windows: usize, seed: u64) -> ScatteringFeatures {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, f) = (7, 48);
        ScatteringFeatures {
            data: (0..c * f * windows).map(|_| rng.random_range(0.0..1.0)).collect(),
            channels: c,
            rows: f,
            windows,
        }
    }

    #[test]
    fn stack_length_algebra() {
        // 48 -> 44 -> 40 -> 40 -> 18 -> 14 -> 10 -> 10 -> 3
        assert_eq!(DetectorConfig::stack_output_len(48), Some(3));
        assert_eq!(DetectorConfig::min_windows(), 37);
        assert_eq!(DetectorConfig::stack_output_len(36), None);
        assert_eq!(DetectorConfig::stack_output_len(37), Some(1));
        // center of the single output of a 37-window input is window 18
        assert_eq!(DetectorConfig::time_map(0), 18);
    }

    #[test]
    fn forward_shapes_and_probability_range() {
        let config = DetectorConfig::desk();
        let model = DetectorModel::new(&config, 1);
        let feats = rand_features(64, 2);
        let probs = model.probabilities(&feats).unwrap();
        assert_eq!(probs.len(), DetectorConfig::stack_output_len(64).unwrap());
        for step in &probs {
            for &p in step {
                assert!(p > 0.0 && p < 1.0);
            }
        }
    }

    #[test]
    fn zero_weights_give_half_probability() {
        let config = DetectorConfig::desk();
        let model = DetectorModel::new(&config, 1);
        for p in model.params() {
            p.tensor().update_data(|d| d.fill(0.0));
        }
        let feats = rand_features(40, 3);
        let probs = model.probabilities(&feats).unwrap();
        for step in &probs {
            for &p in step {
                assert!((p - 0.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let config = DetectorConfig::desk();
        let model = DetectorModel::new(&config, 7);
        let feats = rand_features(50, 4);
        let x = features_tensor(&feats);
        let a = no_grad(|| model.forward_logits(&x, false, None)).unwrap().to_vec();
        let b = no_grad(|| model.forward_logits(&x, false, None)).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_windows_is_contract_error() {
        let config = DetectorConfig::desk();
        let model = DetectorModel::new(&config, 1);
        let feats = rand_features(20, 5);
        assert!(matches!(
            model.probabilities(&feats),
            Err(DetectorError::Contract(_))
        ));
    }

    #[test]
    fn equal_energy_orthogonal_sources_label_not_silent() {
        // four equal-energy orthogonal sources: each V_i ~ -6 dB > -13
        let rate = 16000usize;
        let frames = rate * 2;
        let mk = |offset: usize| -> Waveform {
            let mut d = vec![0.0f32; frames];
            for t in (offset..frames).step_by(4) {
                d[t] = 0.4;
            }
            Waveform::new(d, 1, rate as u32)
        };
        let set = SourceSet::new([mk(0), mk(1), mk(2), mk(3)]);
        let labels = label_windows(&set, -13.0, &ScatteringPlan::default());
        assert!(!labels.is_empty());
        for l in &labels {
            assert_eq!(*l, [false; 4]);
        }
        // and each source's relative volume is ~ -6 dB
        let v = window_volumes(&set, &ScatteringPlan::default());
        for vol in &v[0] {
            assert!((vol.db() + 6.02).abs() < 0.2, "V = {}", vol.db());
        }
    }

    #[test]
    fn digitally_zero_stem_labels_silent() {
        let rate = 16000usize;
        let frames = rate * 2;
        let active = Waveform::new(
            (0..frames).map(|t| ((t as f32) * 0.05).sin() * 0.3).collect(),
            1,
            rate as u32,
        );
        let silent = Waveform::zeros(1, frames, rate as u32);
        let set = SourceSet::new([active.clone(), silent, active.clone(), active]);
        let labels = label_windows(&set, -13.0, &ScatteringPlan::default());
        for l in &labels {
            assert!(l[1], "zero bass stem must label silent");
            assert!(!l[0] && !l[2] && !l[3]);
        }
    }
}
