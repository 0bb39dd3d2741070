//! Deterministic synthetic four-stem corpus.
//!
//! Each track is generated from a per-track ChaCha stream derived from the
//! corpus seed: drums are filtered noise bursts on a periodic grid, bass is a
//! low-frequency (40-120 Hz) tone, vocals are a frequency-modulated mid-band
//! tone and other is a sustained harmonic chord pad. Stems are RMS-balanced,
//! planned silence intervals are exact digital zeros, and `mixture.wav` is
//! written as the float32 sum of the final stems, so `load_track_dir` always
//! validates. The directory layout matches real decoded stem datasets
//! (`<root>/<track>/{mixture,drums,bass,other,vocals}.wav`), so real data
//! drops in unchanged.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{write_wav, AudioError, Result, SourceSet, TrackDataset, WavEncoding, Waveform};

/// Default epoch segmentation of generated corpora: 5 s windows, 0.5 s hop.
pub const DEFAULT_SEGMENT_S: f64 = 5.0;
pub const DEFAULT_STRIDE_S: f64 = 0.5;

/// One planned mute: `source` is digitally zero on `[start_s, end_s)` of `track`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SilenceInterval {
    pub track: usize,
    pub source: usize,
    pub start_s: f64,
    pub end_s: f64,
}

/// The full mute schedule of a corpus.
#[derive(Debug, Clone, Default)]
pub struct SilencePlan {
    pub intervals: Vec<SilenceInterval>,
}

impl SilencePlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with(mut self, track: usize, source: usize, start_s: f64, end_s: f64) -> Self {
        assert!(end_s > start_s && start_s >= 0.0);
        self.intervals.push(SilenceInterval { track, source, start_s, end_s });
        self
    }

    /// Random plan: every track gets `per_track` intervals of `len_s` seconds
    /// for rotating sources, placed away from track edges. Deterministic in
    /// `seed`.
    pub fn random(seed: u64, n_tracks: usize, duration_s: f64, per_track: usize, len_s: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51e7ce);
        let mut plan = Self::none();
        let mut next_source = 0usize;
        for track in 0..n_tracks {
            for _ in 0..per_track {
                let source = next_source % 4;
                next_source += 1;
                let latest = (duration_s - len_s - 0.5).max(0.5);
                let start = rng.random_range(0.5..latest.max(0.6));
                plan = plan.with(track, source, start, start + len_s);
            }
        }
        plan
    }

    fn intervals_for(&self, track: usize, source: usize) -> impl Iterator<Item = &SilenceInterval> {
        self.intervals
            .iter()
            .filter(move |iv| iv.track == track && iv.source == source)
    }
}

/// Corpus parameters for [`synth_corpus`].
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_tracks: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub channels: usize,
    pub silence_plan: SilencePlan,
}

impl SynthSpec {
    pub fn new(seed: u64, n_tracks: usize, duration_s: f64, sample_rate: u32) -> Self {
        assert!(duration_s >= 6.0, "corpus tracks must be at least 6 s long");
        Self { seed, n_tracks, duration_s, sample_rate, channels: 2, silence_plan: SilencePlan::none() }
    }

    pub fn channels(mut self, channels: usize) -> Self {
        assert!(channels == 1 || channels == 2);
        self.channels = channels;
        self
    }

    pub fn silence_plan(mut self, plan: SilencePlan) -> Self {
        self.silence_plan = plan;
        self
    }
}

/// splitmix64; used to derive independent per-track seeds from one corpus seed.
pub(crate) fn seed_stream(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn track_name(i: usize) -> String {
    format!("track_{i:03}")
}

/// Scale `mono` into `channels` rows with per-channel pan gains.
fn spread(mono: Vec<f64>, channels: usize, pan: f64, rate: u32) -> Waveform {
    let frames = mono.len();
    if channels == 1 {
        let samples = mono.iter().map(|&v| v as f32).collect();
        return Waveform::new(samples, 1, rate);
    }
    // constant-power pan, pan in [-1, 1]
    let theta = (pan + 1.0) * std::f64::consts::FRAC_PI_4;
    let (gl, gr) = (theta.cos(), theta.sin());
    let mut samples = vec![0.0f32; 2 * frames];
    for (t, &v) in mono.iter().enumerate() {
        samples[t] = (v * gl) as f32;
        samples[frames + t] = (v * gr) as f32;
    }
    Waveform::new(samples, 2, rate)
}

fn normalize_rms(mono: &mut [f64], target: f64) {
    let energy: f64 = mono.iter().map(|v| v * v).sum();
    let rms = (energy / mono.len().max(1) as f64).sqrt();
    if rms > 1e-12 {
        let g = target / rms;
        for v in mono.iter_mut() {
            *v *= g;
        }
    }
}

fn gen_drums(rng: &mut ChaCha8Rng, frames: usize, rate: u32) -> Vec<f64> {
    let mut out = vec![0.0f64; frames];
    let hit_period = (0.25 * rate as f64) as usize; // 4 hits per second
    let decay = 0.08 * rate as f64;
    let lp_pole = 0.995f64 - 600.0 / rate as f64; // kick tilt
    let mut hit = 0usize;
    let mut idx = 0usize;
    while idx < frames {
        let kick = hit % 2 == 0;
        let amp = rng.random_range(0.8..1.2);
        let span = (decay * 5.0) as usize;
        let mut lp = 0.0f64;
        for k in 0..span.min(frames - idx) {
            let noise: f64 = rng.random_range(-1.0..1.0);
            let env = (-(k as f64) / decay).exp();
            let v = if kick {
                lp = lp_pole * lp + (1.0 - lp_pole) * noise;
                lp * 14.0
            } else {
                noise * 0.5
            };
            out[idx + k] += amp * env * v;
        }
        hit += 1;
        idx += hit_period;
    }
    out
}

fn gen_bass(rng: &mut ChaCha8Rng, frames: usize, rate: u32) -> Vec<f64> {
    let f0 = rng.random_range(40.0..120.0);
    let lfo_rate = rng.random_range(0.1..0.4);
    let phase0 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut out = vec![0.0f64; frames];
    let mut phase = phase0;
    for (t, o) in out.iter_mut().enumerate() {
        let ts = t as f64 / rate as f64;
        let amp = 1.0 + 0.2 * (std::f64::consts::TAU * lfo_rate * ts).sin();
        // slightly overdriven sine for harmonics
        *o = amp * (phase.sin() + 0.15 * (2.0 * phase).sin());
        phase += std::f64::consts::TAU * f0 / rate as f64;
    }
    out
}

fn gen_vocals(rng: &mut ChaCha8Rng, frames: usize, rate: u32) -> Vec<f64> {
    let carrier = rng.random_range(220.0..800.0);
    let vibrato_rate = rng.random_range(4.0..6.5);
    let vibrato_depth = rng.random_range(8.0..25.0);
    let tremolo_rate = rng.random_range(2.0..4.0);
    let phase0 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut out = vec![0.0f64; frames];
    let mut phase = phase0;
    for (t, o) in out.iter_mut().enumerate() {
        let ts = t as f64 / rate as f64;
        let f = carrier + vibrato_depth * (std::f64::consts::TAU * vibrato_rate * ts).sin();
        let amp = 1.0 + 0.35 * (std::f64::consts::TAU * tremolo_rate * ts).sin();
        *o = amp * (phase.sin() + 0.2 * (2.0 * phase).sin());
        phase += std::f64::consts::TAU * f / rate as f64;
    }
    out
}

fn gen_other(rng: &mut ChaCha8Rng, frames: usize, rate: u32) -> Vec<f64> {
    // minor-triad pad with mild detune
    let root = rng.random_range(150.0..300.0);
    let ratios = [1.0, 1.1892, 1.4983]; // minor third, fifth
    let detune = rng.random_range(0.9995..1.0005);
    let phases0: [f64; 3] = [
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    ];
    let mut out = vec![0.0f64; frames];
    for (v, (&ratio, &p0)) in ratios.iter().zip(&phases0).enumerate() {
        let f = root * ratio * if v == 2 { detune } else { 1.0 };
        let mut phase = p0;
        for o in out.iter_mut() {
            *o += phase.sin() / 3.0;
            phase += std::f64::consts::TAU * f / rate as f64;
        }
    }
    out
}

/// Generate `spec.n_tracks` track directories under `root` and open them as
/// a [`TrackDataset`] with the default 5 s / 0.5 s segmentation. Byte-level
/// deterministic in `spec.seed`.
pub fn synth_corpus(root: &Path, spec: &SynthSpec) -> Result<TrackDataset> {
    std::fs::create_dir_all(root).map_err(|e| AudioError::Io { path: root.to_path_buf(), source: e })?;
    let frames = (spec.duration_s * spec.sample_rate as f64).round() as usize;

    let track_sets: Vec<Result<()>> = crate::par::map_indexed(spec.n_tracks, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_stream(spec.seed, i as u64));
        let mut stems_mono = [
            gen_drums(&mut rng, frames, spec.sample_rate),
            gen_bass(&mut rng, frames, spec.sample_rate),
            gen_other(&mut rng, frames, spec.sample_rate),
            gen_vocals(&mut rng, frames, spec.sample_rate),
        ];
        for stem in stems_mono.iter_mut() {
            normalize_rms(stem, 0.1);
        }
        let pans: [f64; 4] = [
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.4..0.4),
        ];
        let mut stems: Vec<Waveform> = stems_mono
            .into_iter()
            .zip(pans)
            .map(|(m, p)| spread(m, spec.channels, p, spec.sample_rate))
            .collect();

        // keep the mixture inside full scale
        let mut mix = stems[0].clone();
        for s in &stems[1..] {
            mix = mix.add(s);
        }
        let peak = mix.peak();
        if peak > 0.98 {
            let g = 0.98 / peak;
            for s in stems.iter_mut() {
                for v in s.data_mut() {
                    *v *= g;
                }
            }
        }

        // planned silences are exact digital zero
        for (src, stem) in stems.iter_mut().enumerate() {
            for iv in spec.silence_plan.intervals_for(i, src) {
                let a = ((iv.start_s * spec.sample_rate as f64).round() as usize).min(frames);
                let b = ((iv.end_s * spec.sample_rate as f64).round() as usize).min(frames);
                for c in 0..stem.channels() {
                    stem.channel_mut(c)[a..b].fill(0.0);
                }
            }
        }

        let set = SourceSet::new([
            stems[0].clone(),
            stems[1].clone(),
            stems[2].clone(),
            stems[3].clone(),
        ]);
        let dir = root.join(track_name(i));
        std::fs::create_dir_all(&dir).map_err(|e| AudioError::Io { path: dir.clone(), source: e })?;
        for (name, stem) in super::SOURCE_NAMES.iter().zip(set.sources()) {
            write_wav(&dir.join(format!("{name}.wav")), stem, WavEncoding::Float32)?;
        }
        write_wav(&dir.join("mixture.wav"), &set.mixture(), WavEncoding::Float32)?;
        Ok(())
    });
    for r in track_sets {
        r?;
    }

    let seg = (DEFAULT_SEGMENT_S * spec.sample_rate as f64) as usize;
    let stride = (DEFAULT_STRIDE_S * spec.sample_rate as f64) as usize;
    TrackDataset::open(root, spec.sample_rate, seg.min(frames), stride)
}
