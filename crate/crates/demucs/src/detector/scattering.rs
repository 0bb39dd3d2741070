//! Second-order wavelet scattering front end for the silence detector.
//!
//! Stage 1 filters the mono 16 kHz input with a bank of analytic Gaussian
//! band-pass wavelets (8 per octave across the 6 octaves below Nyquist,
//! 48 filters) and takes the modulus, giving one envelope per frequency row.
//! Stage 2 band-passes each envelope (decimated to 2 kHz) with one wavelet
//! per octave over 2-128 Hz and takes the modulus again, exposing
//! amplitude-modulation structure. Both stages are averaged over 0.64 s
//! windows hopped every 64 ms.
//!
//! The output tensor is (1 + 6) x 48 x T_w: channel 0 holds the first-order
//! coefficients, channels 1..=6 the second-order coefficients ordered by
//! ascending modulation frequency. Second-order paths with f2 >= f1 are
//! zeroed. Everything is computed with FFT filtering; the decimation between
//! stages rides on the spectrum truncation, which is exact for the bands the
//! stage-2 filters keep.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use thiserror::Error;

use crate::audio::Waveform;

#[derive(Debug, Error)]
pub enum ScatterError {
    #[error("scattering input must be mono at {expected} Hz, got {channels} channel(s) at {rate} Hz")]
    WrongFormat { expected: u32, channels: usize, rate: u32 },
    #[error("input of {frames} frames is shorter than one {window} sample window")]
    TooShort { frames: usize, window: usize },
}

/// Filterbank geometry. The defaults reproduce the 7-channel layout the
/// detector expects; changing them changes `ScatteringFeatures` shape.
#[derive(Debug, Clone)]
pub struct ScatteringPlan {
    pub sample_rate: u32,
    /// First-order wavelets per octave.
    pub q1: usize,
    /// First-order octaves below Nyquist.
    pub octaves1: usize,
    /// Lowest second-order octave start, Hz.
    pub f2_min: f64,
    /// Second-order octave count (one wavelet per octave).
    pub octaves2: usize,
    /// Averaging window, seconds.
    pub window_s: f64,
    /// Window hop, seconds.
    pub hop_s: f64,
    /// Envelope decimation factor between stages.
    pub decim: usize,
}

impl Default for ScatteringPlan {
    fn default() -> Self {
        ScatteringPlan {
            sample_rate: 16_000,
            q1: 8,
            octaves1: 6,
            f2_min: 2.0,
            octaves2: 6,
            window_s: 0.64,
            hop_s: 0.064,
            decim: 8,
        }
    }
}

impl ScatteringPlan {
    /// First-order center frequencies, ascending (row order of the output).
    pub fn f1_centers(&self) -> Vec<f64> {
        let nyq = self.sample_rate as f64 / 2.0;
        let n = self.q1 * self.octaves1;
        (0..n)
            .map(|row| nyq * 2f64.powf(-((n - row) as f64) / self.q1 as f64))
            .collect()
    }

    /// Second-order center frequencies, ascending (geometric octave centers).
    pub fn f2_centers(&self) -> Vec<f64> {
        (0..self.octaves2)
            .map(|m| self.f2_min * 2f64.powi(m as i32) * std::f64::consts::SQRT_2)
            .collect()
    }

    pub fn feature_channels(&self) -> usize {
        1 + self.octaves2
    }

    pub fn freq_rows(&self) -> usize {
        self.q1 * self.octaves1
    }

    pub fn window_len(&self) -> usize {
        (self.window_s * self.sample_rate as f64).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_s * self.sample_rate as f64).round() as usize
    }

    /// Number of analysis windows for an input of `frames` samples.
    pub fn num_windows(&self, frames: usize) -> usize {
        if frames < self.window_len() {
            0
        } else {
            (frames - self.window_len()) / self.hop_len() + 1
        }
    }
}

/// Gaussian bandwidth giving a -3 dB crossing halfway (in log frequency) to
/// the next filter of a Q-per-octave bank.
fn gaussian_sigma(center: f64, q: f64) -> f64 {
    center * (2f64.powf(1.0 / (2.0 * q)) - 1.0) / (2f64.ln()).sqrt()
}

/// Morlet frequency response: a Gaussian bump minus the correction that
/// zeroes the response at DC, so constant envelopes produce no band-pass
/// output. The correction is negligible for narrow (high-Q) filters.
fn morlet_response(f: f64, center: f64, sigma: f64) -> f64 {
    let bump = (-((f - center) * (f - center)) / (2.0 * sigma * sigma)).exp();
    let dc = (-(center * center) / (2.0 * sigma * sigma)).exp();
    let envelope = (-(f * f) / (2.0 * sigma * sigma)).exp();
    bump - dc * envelope
}

/// First- and second-order scattering coefficients, `[channels, rows, T_w]`
/// row-major; all values are non-negative moduli.
#[derive(Debug, Clone)]
pub struct ScatteringFeatures {
    pub data: Vec<f32>,
    pub channels: usize,
    pub rows: usize,
    pub windows: usize,
}

impl ScatteringFeatures {
    pub fn at(&self, c: usize, f: usize, t: usize) -> f32 {
        self.data[(c * self.rows + f) * self.windows + t]
    }

    fn set(&mut self, c: usize, f: usize, t: usize, v: f32) {
        self.data[(c * self.rows + f) * self.windows + t] = v;
    }
}

fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// Mean of `x[w*hop .. w*hop+len]` per window.
fn window_means(x: &[f32], len: usize, hop: usize, windows: usize) -> Vec<f32> {
    crate::par::map_indexed(windows, |w| {
        let s = &x[w * hop..w * hop + len];
        let sum: f64 = s.iter().map(|&v| v as f64).sum();
        (sum / len as f64) as f32
    })
}

/// Order-2 scattering of a mono 16 kHz waveform. See the module docs for the
/// filter plan and output layout.
pub fn scatter2(wave: &Waveform, plan: &ScatteringPlan) -> Result<ScatteringFeatures, ScatterError> {
    if wave.channels() != 1 || wave.sample_rate() != plan.sample_rate {
        return Err(ScatterError::WrongFormat {
            expected: plan.sample_rate,
            channels: wave.channels(),
            rate: wave.sample_rate(),
        });
    }
    let n = wave.frames();
    let window = plan.window_len();
    if n < window {
        return Err(ScatterError::TooShort { frames: n, window });
    }
    let hop = plan.hop_len();
    let windows = plan.num_windows(n);
    let rows = plan.freq_rows();
    let channels = plan.feature_channels();

    // padding of at least one second kills circular wraparound of the
    // longest stage-1 wavelets
    let nfft = next_pow2(n + plan.sample_rate as usize);
    let decim = plan.decim;
    assert!(nfft % decim == 0);
    let nfft2 = nfft / decim;
    let rate = plan.sample_rate as f64;
    let bin_hz = rate / nfft as f64;

    let mut planner = FftPlanner::<f32>::new();
    let fft_fwd = planner.plan_fft_forward(nfft);
    let fft_inv = planner.plan_fft_inverse(nfft);
    let fft_inv2 = planner.plan_fft_inverse(nfft2);

    // spectrum of the input
    let mut spectrum = vec![Complex::new(0.0f32, 0.0f32); nfft];
    for (s, &v) in spectrum.iter_mut().zip(wave.channel(0)) {
        s.re = v;
    }
    fft_fwd.process(&mut spectrum);

    let f1 = plan.f1_centers();
    let f2 = plan.f2_centers();
    let window2 = window / decim;
    let hop2 = hop / decim;

    let mut features = ScatteringFeatures {
        data: vec![0.0f32; channels * rows * windows],
        channels,
        rows,
        windows,
    };

    // per-row results computed independently (and in parallel)
    let row_results: Vec<(Vec<f32>, Vec<Vec<f32>>)> = crate::par::map_indexed(rows, |k| {
        let center = f1[k];
        let sigma = gaussian_sigma(center, plan.q1 as f64);
        // stage 1: analytic band-pass + modulus
        let mut buf = vec![Complex::new(0.0f32, 0.0f32); nfft];
        let half = nfft / 2;
        for (b, slot) in buf.iter_mut().enumerate().take(half + 1) {
            let f = b as f64 * bin_hz;
            let h = morlet_response(f, center, sigma);
            if h.abs() > 1e-12 {
                *slot = spectrum[b] * (h as f32);
            }
        }
        fft_inv.process(&mut buf);
        let scale = 1.0 / nfft as f32;
        let envelope: Vec<f32> = buf[..n].iter().map(|c| c.norm() * scale).collect();

        // order-1 coefficients
        let s1 = window_means(&envelope, window, hop, windows);

        // spectrum of the envelope for stage 2
        let mut env_spec = vec![Complex::new(0.0f32, 0.0f32); nfft];
        for (s, &v) in env_spec.iter_mut().zip(&envelope) {
            s.re = v;
        }
        fft_fwd.process(&mut env_spec);

        let rate2 = rate / decim as f64;
        let n2 = n / decim;
        let mut s2 = Vec::with_capacity(f2.len());
        for &center2 in &f2 {
            if center2 >= center {
                s2.push(vec![0.0f32; windows]); // f2 >= f1 paths are dropped
                continue;
            }
            let sigma2 = gaussian_sigma(center2, 1.0);
            let mut buf2 = vec![Complex::new(0.0f32, 0.0f32); nfft2];
            let half2 = nfft2 / 2;
            let bin2_hz = rate2 / nfft2 as f64; // == bin_hz * decim / decim
            for (b, slot) in buf2.iter_mut().enumerate().take(half2 + 1) {
                let f = b as f64 * bin2_hz;
                let h = morlet_response(f, center2, sigma2);
                if h.abs() > 1e-12 {
                    // truncated-spectrum decimation: low bins carry over 1:1
                    *slot = env_spec[b] * ((h / decim as f64) as f32);
                }
            }
            fft_inv2.process(&mut buf2);
            let scale2 = 1.0 / nfft2 as f32;
            let env2: Vec<f32> = buf2[..n2].iter().map(|c| c.norm() * scale2).collect();
            // windows at the decimated rate line up with the stage-1 grid
            let w2 = if n2 >= window2 { (n2 - window2) / hop2 + 1 } else { 0 };
            let mut means = window_means(&env2, window2, hop2, w2.min(windows));
            means.resize(windows, *means.last().unwrap_or(&0.0));
            s2.push(means);
        }
        (s1, s2)
    });

    for (k, (s1, s2)) in row_results.into_iter().enumerate() {
        for (t, &v) in s1.iter().enumerate() {
            features.set(0, k, t, v);
        }
        for (m, coeffs) in s2.into_iter().enumerate() {
            for (t, v) in coeffs.into_iter().enumerate() {
                features.set(1 + m, k, t, v);
            }
        }
    }
    Ok(features)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, amp: f32, frames: usize) -> Waveform {
        let data: Vec<f32> = (0..frames)
            .map(|t| (2.0 * std::f64::consts::PI * freq * t as f64 / 16000.0).sin() as f32 * amp)
            .collect();
        Waveform::new(data, 1, 16000)
    }

    #[test]
    fn rejects_wrong_rate_or_stereo() {
        let plan = ScatteringPlan::default();
        let w = Waveform::zeros(1, 32000, 44100);
        assert!(matches!(scatter2(&w, &plan), Err(ScatterError::WrongFormat { .. })));
        let w = Waveform::zeros(2, 32000, 16000);
        assert!(matches!(scatter2(&w, &plan), Err(ScatterError::WrongFormat { .. })));
        let short = Waveform::zeros(1, 100, 16000);
        assert!(matches!(scatter2(&short, &plan), Err(ScatterError::TooShort { .. })));
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let plan = ScatteringPlan::default();
        let w = Waveform::zeros(1, 32000, 16000);
        let f = scatter2(&w, &plan).unwrap();
        assert_eq!(f.channels, 7);
        assert_eq!(f.rows, 48);
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_count_follows_grid() {
        let plan = ScatteringPlan::default();
        // n = 10240 -> 1 window; n = 10240 + 1024 -> 2 windows
        assert_eq!(plan.num_windows(10_240), 1);
        assert_eq!(plan.num_windows(11_263), 1);
        assert_eq!(plan.num_windows(11_264), 2);
        let w = tone(500.0, 0.4, 11_264);
        let f = scatter2(&w, &plan).unwrap();
        assert_eq!(f.windows, 2);
    }

    #[test]
    fn pure_tone_concentrates_in_nearest_row() {
        let plan = ScatteringPlan::default();
        let centers = plan.f1_centers();
        let w = tone(1000.0, 0.4, 32000);
        let f = scatter2(&w, &plan).unwrap();
        // argmax over rows of the order-1 channel (middle window)
        let t = f.windows / 2;
        let mut best = (0usize, 0.0f32);
        for k in 0..f.rows {
            let v = f.at(0, k, t);
            if v > best.1 {
                best = (k, v);
            }
        }
        let mut nearest = 0usize;
        for (k, &c) in centers.iter().enumerate() {
            if (c - 1000.0).abs() < (centers[nearest] - 1000.0).abs() {
                nearest = k;
            }
        }
        assert_eq!(best.0, nearest, "energy at row {} but tone sits at row {nearest}", best.0);
        // a stationary tone has next to no second-order energy relative to order 1
        let s1 = f.at(0, nearest, t);
        for m in 0..6 {
            assert!(f.at(1 + m, nearest, t) < 0.05 * s1, "order-2 channel {m} too hot");
        }
    }

    #[test]
    fn sign_flip_invariance_is_exact() {
        let w = tone(440.0, 0.3, 20_000);
        let flipped = Waveform::new(w.channel(0).iter().map(|v| -v).collect(), 1, 16000);
        let plan = ScatteringPlan::default();
        let a = scatter2(&w, &plan).unwrap();
        let b = scatter2(&flipped, &plan).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn amplitude_modulation_lights_lowest_f2_channel() {
        let plan = ScatteringPlan::default();
        let centers = plan.f1_centers();
        // 4 Hz AM on a 1 kHz carrier
        let n = 48000;
        let data: Vec<f32> = (0..n)
            .map(|t| {
                let ts = t as f64 / 16000.0;
                let carrier = (2.0 * std::f64::consts::PI * 1000.0 * ts).sin();
                let env = 1.0 + 0.8 * (2.0 * std::f64::consts::PI * 4.0 * ts).sin();
                (0.25 * env * carrier) as f32
            })
            .collect();
        let w = Waveform::new(data, 1, 16000);
        let f = scatter2(&w, &plan).unwrap();
        let mut carrier_row = 0usize;
        for (k, &c) in centers.iter().enumerate() {
            if (c - 1000.0).abs() < (centers[carrier_row] - 1000.0).abs() {
                carrier_row = k;
            }
        }
        let t = f.windows / 2;
        // the 4 Hz modulation falls in the lowest f2 octave (2-4 Hz band edge)
        let low = f.at(1, carrier_row, t);
        assert!(low > 0.0, "no second-order energy at the carrier row");
        // and the high modulation octaves see far less of it
        for m in 3..6 {
            assert!(f.at(1 + m, carrier_row, t) < low, "channel {m} >= lowest octave");
        }
    }

    #[test]
    fn am_matches_direct_two_stage_filtering() {
        // oracle: direct FIR convolution with the same Gaussian wavelets at
        // both stages, plain decimation in between
        let plan = ScatteringPlan::default();
        let centers = plan.f1_centers();
        let n = 32000;
        let data: Vec<f32> = (0..n)
            .map(|t| {
                let ts = t as f64 / 16000.0;
                let carrier = (2.0 * std::f64::consts::PI * 800.0 * ts).sin();
                let env = 1.0 + 0.6 * (2.0 * std::f64::consts::PI * 6.0 * ts).sin();
                (0.3 * env * carrier) as f32
            })
            .collect();
        let w = Waveform::new(data.clone(), 1, 16000);
        let f = scatter2(&w, &plan).unwrap();

        let mut row = 0usize;
        for (k, &c) in centers.iter().enumerate() {
            if (c - 800.0).abs() < (centers[row] - 800.0).abs() {
                row = k;
            }
        }
        let center1 = centers[row];
        let sigma1 = gaussian_sigma(center1, 8.0);
        // oracle stage 1: complex FIR, Gaussian frequency response ==
        // Gaussian time envelope exp(-2 pi^2 sigma_f^2 t^2) carrier exp(i 2 pi f t)
        let env1 = |k_range: f64| -> Vec<(f64, f64)> {
            let sigma_t = 1.0 / (2.0 * std::f64::consts::PI * sigma1);
            let half = (k_range * sigma_t * 16000.0) as isize;
            (-half..=half)
                .map(|d| {
                    let t = d as f64 / 16000.0;
                    let g = (-t * t / (2.0 * sigma_t * sigma_t)).exp() / (sigma_t * 16000.0 * (2.0 * std::f64::consts::PI).sqrt());
                    let ph = 2.0 * std::f64::consts::PI * center1 * t;
                    (g * ph.cos(), g * ph.sin())
                })
                .collect()
        };
        let taps = env1(5.0);
        let half = taps.len() / 2;
        let (dir_lo, dir_hi) = (2000usize, 30_000usize);
        let mut direct_env = vec![0.0f64; n];
        for (t, slot) in direct_env.iter_mut().enumerate().take(dir_hi).skip(dir_lo) {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (j, (hr, hi)) in taps.iter().enumerate() {
                let idx = t as isize + j as isize - half as isize;
                if idx >= 0 && (idx as usize) < n {
                    let x = data[idx as usize] as f64;
                    re += x * hr;
                    im += x * hi;
                }
            }
            *slot = (re * re + im * im).sqrt();
        }
        // compare order-1 window means over interior windows
        let wlen = plan.window_len();
        let hoplen = plan.hop_len();
        let w_first = (dir_lo + 2048).div_ceil(hoplen);
        let w_last = (dir_hi - 2048 - wlen) / hoplen;
        assert!(w_last > w_first, "oracle window range is empty");
        let mut compared = 0;
        for wdx in w_first..=w_last {
            let s = wdx * hoplen;
            let direct_mean: f64 = direct_env[s..s + wlen].iter().sum::<f64>() / wlen as f64;
            let got = f.at(0, row, wdx) as f64;
            let rel = (got - direct_mean).abs() / direct_mean.max(1e-9);
            assert!(rel < 0.05, "window {wdx}: fft {got} vs direct {direct_mean}");
            compared += 1;
        }
        assert!(compared >= 3);
    }
}
