//! Audio types, WAV I/O, resampling, and dataset handling.
//!
//! The universal currency is [`Waveform`]: a channels-by-frames buffer of
//! 32-bit floats with a sample rate. Four of them, in the fixed order
//! drums/bass/other/vocals, form a [`SourceSet`]; a directory of track
//! subdirectories each holding `mixture.wav` plus one WAV per source is a
//! [`TrackDataset`].

mod resample;
pub(crate) mod synth;
mod wav;

pub use resample::resample;
pub use synth::{synth_corpus, SilencePlan, SynthSpec};
pub use wav::{read_wav, write_wav, WavEncoding};

use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Canonical source order; indices into [`SourceSet::sources`] follow it.
pub const SOURCE_NAMES: [&str; 4] = ["drums", "bass", "other", "vocals"];

/// Number of separation targets.
pub const NUM_SOURCES: usize = 4;

/// Peak absolute tolerance when checking a stored mixture against the sum of
/// its stems (accommodates PCM16 stems summed in float).
pub const MIXTURE_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed WAV {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("unsupported WAV {path}: {reason}")]
    Unsupported { path: PathBuf, reason: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("track {track}: mixture deviates from stem sum by {deviation} (tolerance {tolerance})")]
    MixtureMismatch {
        track: String,
        deviation: f32,
        tolerance: f32,
    },
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Multichannel sample buffer: `channels` rows of `frames` samples each,
/// stored row-major, values nominally in [-1, 1], with a sample rate in Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    channels: usize,
    frames: usize,
    sample_rate: u32,
}

impl Waveform {
    /// Build from row-major channel data. `samples.len()` must equal
    /// `channels * frames`, `channels` must be 1 or 2 and `sample_rate`
    /// positive; all samples must be finite.
    pub fn new(samples: Vec<f32>, channels: usize, sample_rate: u32) -> Self {
        assert!(channels == 1 || channels == 2, "channels must be 1 or 2, got {channels}");
        assert!(sample_rate > 0, "sample rate must be positive");
        assert!(
            samples.len() % channels == 0,
            "sample count {} not divisible by channel count {channels}",
            samples.len()
        );
        debug_assert!(samples.iter().all(|s| s.is_finite()), "non-finite sample");
        let frames = samples.len() / channels;
        Self { samples, channels, frames, sample_rate }
    }

    /// All-zero waveform.
    pub fn zeros(channels: usize, frames: usize, sample_rate: u32) -> Self {
        Self::new(vec![0.0; channels * frames], channels, sample_rate)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of frames (samples per channel).
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.frames as f64 / self.sample_rate as f64
    }

    /// One channel's samples.
    pub fn channel(&self, c: usize) -> &[f32] {
        &self.samples[c * self.frames..(c + 1) * self.frames]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        &mut self.samples[c * self.frames..(c + 1) * self.frames]
    }

    /// Row-major sample storage (channel-contiguous).
    pub fn data(&self) -> &[f32] {
        &self.samples
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.samples
    }

    /// Frame range `[start, end)` copied out as a new waveform.
    pub fn slice_frames(&self, start: usize, end: usize) -> Waveform {
        assert!(start <= end && end <= self.frames);
        let mut out = Vec::with_capacity(self.channels * (end - start));
        for c in 0..self.channels {
            out.extend_from_slice(&self.channel(c)[start..end]);
        }
        Waveform::new(out, self.channels, self.sample_rate)
    }

    /// Elementwise sum; shapes and rates must match.
    pub fn add(&self, other: &Waveform) -> Waveform {
        assert_eq!(self.channels, other.channels);
        assert_eq!(self.frames, other.frames);
        assert_eq!(self.sample_rate, other.sample_rate);
        let samples = self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| a + b)
            .collect();
        Waveform::new(samples, self.channels, self.sample_rate)
    }

    /// Sum of squared samples over all channels, accumulated in f64.
    pub fn energy(&self) -> f64 {
        crate::par::det_sum_by(&self.samples, |&s| (s as f64) * (s as f64))
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, &s| m.max(s.abs()))
    }
}

impl fmt::Display for Waveform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Waveform({}ch, {} frames @ {} Hz)",
            self.channels, self.frames, self.sample_rate
        )
    }
}

/// Average the channels down to mono; mono input passes through unchanged.
pub fn downmix_mono(wave: &Waveform) -> Waveform {
    if wave.channels() == 1 {
        return wave.clone();
    }
    let (l, r) = (wave.channel(0), wave.channel(1));
    let samples = l.iter().zip(r).map(|(a, b)| 0.5 * (a + b)).collect();
    Waveform::new(samples, 1, wave.sample_rate())
}

/// The four stems of one track, fixed order drums/bass/other/vocals, all
/// sharing channel count, length and sample rate.
#[derive(Debug, Clone)]
pub struct SourceSet {
    sources: [Waveform; NUM_SOURCES],
}

impl SourceSet {
    pub fn new(sources: [Waveform; NUM_SOURCES]) -> Self {
        let (c, t, sr) = (sources[0].channels(), sources[0].frames(), sources[0].sample_rate());
        for s in &sources {
            assert_eq!(s.channels(), c, "source channel mismatch");
            assert_eq!(s.frames(), t, "source length mismatch");
            assert_eq!(s.sample_rate(), sr, "source rate mismatch");
        }
        Self { sources }
    }

    pub fn source(&self, i: usize) -> &Waveform {
        &self.sources[i]
    }

    pub fn sources(&self) -> &[Waveform; NUM_SOURCES] {
        &self.sources
    }

    pub fn channels(&self) -> usize {
        self.sources[0].channels()
    }

    pub fn frames(&self) -> usize {
        self.sources[0].frames()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sources[0].sample_rate()
    }

    /// Elementwise sum of the four stems.
    pub fn mixture(&self) -> Waveform {
        let mut mix = self.sources[0].clone();
        for s in &self.sources[1..] {
            mix = mix.add(s);
        }
        mix
    }

    /// Frame range `[start, end)` of every stem.
    pub fn slice_frames(&self, start: usize, end: usize) -> SourceSet {
        SourceSet::new([
            self.sources[0].slice_frames(start, end),
            self.sources[1].slice_frames(start, end),
            self.sources[2].slice_frames(start, end),
            self.sources[3].slice_frames(start, end),
        ])
    }
}

/// Load `<dir>/{mixture,drums,bass,other,vocals}.wav`, validating that the
/// stored mixture matches the stem sum within [`MIXTURE_TOLERANCE`] peak
/// absolute error.
pub fn load_track_dir(dir: &Path) -> Result<SourceSet> {
    let set = load_sources_dir(dir)?;
    let mix_path = dir.join("mixture.wav");
    if !mix_path.exists() {
        return Err(AudioError::Dataset(format!("missing file {}", mix_path.display())));
    }
    let stored = read_wav(&mix_path)?;
    if stored.channels() != set.channels() || stored.frames() != set.frames() {
        return Err(AudioError::Dataset(format!(
            "mixture shape {}x{} does not match stems {}x{} in {}",
            stored.channels(),
            stored.frames(),
            set.channels(),
            set.frames(),
            dir.display()
        )));
    }
    let computed = set.mixture();
    let mut deviation = 0.0f32;
    for (a, b) in stored.data().iter().zip(computed.data()) {
        deviation = deviation.max((a - b).abs());
    }
    if deviation > MIXTURE_TOLERANCE {
        return Err(AudioError::MixtureMismatch {
            track: dir.display().to_string(),
            deviation,
            tolerance: MIXTURE_TOLERANCE,
        });
    }
    Ok(set)
}

/// Load just the four stems (estimate directories have no mixture file).
pub fn load_sources_dir(dir: &Path) -> Result<SourceSet> {
    let mut loaded: Vec<Waveform> = Vec::with_capacity(NUM_SOURCES);
    for name in SOURCE_NAMES {
        let path = dir.join(format!("{name}.wav"));
        if !path.exists() {
            return Err(AudioError::Dataset(format!("missing file {}", path.display())));
        }
        loaded.push(read_wav(&path)?);
    }
    let (c, t) = (loaded[0].channels(), loaded[0].frames());
    for (w, name) in loaded.iter().zip(SOURCE_NAMES) {
        if w.channels() != c || w.frames() != t {
            return Err(AudioError::Dataset(format!(
                "{name}.wav shape {}x{} inconsistent with drums.wav {}x{} in {}",
                w.channels(),
                w.frames(),
                c,
                t,
                dir.display()
            )));
        }
    }
    let mut it = loaded.into_iter();
    Ok(SourceSet::new([
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
    ]))
}

/// A directory of track subdirectories plus the segmentation scheme that
/// defines one epoch: every window of `segment_length` frames taken with a
/// `segment_stride` hop, per track.
#[derive(Debug, Clone)]
pub struct TrackDataset {
    root: PathBuf,
    tracks: Vec<PathBuf>,
    sample_rate: u32,
    segment_length: usize,
    segment_stride: usize,
}

impl TrackDataset {
    /// Scan `root` for track directories (sorted by name for determinism).
    pub fn open(
        root: &Path,
        sample_rate: u32,
        segment_length: usize,
        segment_stride: usize,
    ) -> Result<Self> {
        assert!(segment_length > 0 && segment_stride > 0);
        let mut tracks = Vec::new();
        let entries = std::fs::read_dir(root).map_err(|e| AudioError::Io {
            path: root.to_path_buf(),
            source: e,
        })?;
        for entry in entries {
            let entry = entry.map_err(|e| AudioError::Io { path: root.to_path_buf(), source: e })?;
            let path = entry.path();
            if path.is_dir() && path.join("mixture.wav").exists() {
                tracks.push(path);
            }
        }
        tracks.sort();
        if tracks.is_empty() {
            return Err(AudioError::Dataset(format!(
                "no track directories under {}",
                root.display()
            )));
        }
        Ok(Self { root: root.to_path_buf(), tracks, sample_rate, segment_length, segment_stride })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn tracks(&self) -> &[PathBuf] {
        &self.tracks
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn segment_length(&self) -> usize {
        self.segment_length
    }

    pub fn segment_stride(&self) -> usize {
        self.segment_stride
    }

    /// Scan without a segmentation scheme (rate read from the first track's
    /// header); for consumers that only iterate whole tracks.
    pub fn scan(root: &Path) -> Result<Self> {
        let probe = Self::open(root, 1, 1, 1)?;
        let (_, rate) = wav::wav_spec(&probe.tracks[0].join("drums.wav"))?;
        Ok(Self { sample_rate: rate, ..probe })
    }

    pub fn load_track(&self, idx: usize) -> Result<SourceSet> {
        load_track_dir(&self.tracks[idx])
    }

    /// All `(track_index, start_frame)` segment coordinates of one epoch.
    /// Track lengths are read from `drums.wav` headers.
    pub fn segments(&self) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        for (i, dir) in self.tracks.iter().enumerate() {
            let frames = wav::wav_frames(&dir.join("drums.wav"))?;
            let mut start = 0;
            while start + self.segment_length <= frames {
                out.push((i, start));
                start += self.segment_stride;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downmix_averages_channels() {
        let w = Waveform::new(vec![1.0, 1.0, 0.0, 0.0], 2, 44100);
        let m = downmix_mono(&w);
        assert_eq!(m.channels(), 1);
        assert_eq!(m.channel(0), &[0.5, 0.5]);
    }

    #[test]
    fn downmix_mono_is_identity() {
        let w = Waveform::new(vec![0.25, -0.5], 1, 8000);
        assert_eq!(downmix_mono(&w), w);
    }

    #[test]
    fn downmix_random_stereo_is_mean() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f32> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Waveform::new(samples.clone(), 2, 44100);
        let m = downmix_mono(&w);
        for t in 0..256 {
            let expect = 0.5 * (samples[t] + samples[256 + t]);
            assert!((m.channel(0)[t] - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn mixture_is_sum() {
        let mk = |v: f32| Waveform::new(vec![v, v], 1, 8000);
        let set = SourceSet::new([mk(0.1), mk(0.2), mk(0.3), mk(0.05)]);
        let mix = set.mixture();
        assert!((mix.channel(0)[0] - 0.65).abs() < 1e-6);
    }

    #[test]
    fn slice_frames_copies_range() {
        let w = Waveform::new(vec![0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0], 2, 8000);
        let s = w.slice_frames(1, 3);
        assert_eq!(s.channel(0), &[1.0, 2.0]);
        assert_eq!(s.channel(1), &[11.0, 12.0]);
    }
}
