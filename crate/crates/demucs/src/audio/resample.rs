//! Windowed-sinc polyphase sample-rate conversion.
//!
//! 64 taps per phase, Kaiser window with beta = 8. The rate ratio is reduced
//! to L/M; each output sample n sits at input position n*M/L and is a dot
//! product of 64 neighboring input samples with the phase-(n*M mod L) taps.
//! When downsampling, the sinc cutoff is scaled by L/M for anti-aliasing.
//! Identical rates reduce to L = M = 1, where the kernel is an exact unit
//! impulse and the signal passes through unchanged.

use super::Waveform;

const TAPS: usize = 64;
const HALF: isize = (TAPS / 2) as isize; // taps span [center-31, center+32]
const KAISER_BETA: f64 = 8.0;
/// Phase tables beyond this many phases are not cached; taps are then
/// evaluated directly per output sample.
const MAX_TABLE_PHASES: usize = 4096;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_x = x / 2.0;
    for k in 1..=30 {
        term *= (half_x / k as f64) * (half_x / k as f64);
        sum += term;
        if term < 1e-16 * sum {
            break;
        }
    }
    sum
}

fn kaiser(x: f64, beta: f64) -> f64 {
    if x.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(beta * (1.0 - x * x).sqrt()) / bessel_i0(beta)
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Tap value at signed offset `u` from the (fractional) filter center.
/// `scale` is the cutoff relative to the input Nyquist, min(1, L/M).
fn tap(u: f64, scale: f64) -> f64 {
    scale * sinc(scale * u) * kaiser(u / HALF as f64, KAISER_BETA)
}

/// Per-phase tap table: phase p holds the 64 taps for fractional offset p/L.
fn phase_table(l: u64, scale: f64) -> Option<Vec<f64>> {
    if (l as usize) > MAX_TABLE_PHASES {
        return None;
    }
    let mut t = vec![0.0f64; l as usize * TAPS];
    for phase in 0..l as usize {
        let frac = phase as f64 / l as f64;
        for j in 0..TAPS {
            // tap j multiplies input sample floor(t) - 31 + j
            let u = (j as isize - (HALF - 1)) as f64 - frac;
            t[phase * TAPS + j] = tap(u, scale);
        }
    }
    Some(t)
}

/// Resample one channel. `l`/`m` is the reduced rate ratio target/src.
fn resample_channel(
    input: &[f32],
    out_len: usize,
    l: u64,
    m: u64,
    scale: f64,
    table: Option<&[f64]>,
    out: &mut [f32],
) {
    let n_in = input.len() as isize;
    for (n, sample) in out.iter_mut().enumerate().take(out_len) {
        let num = n as u64 * m;
        let base = (num / l) as isize; // floor of input position
        let phase = (num % l) as usize;
        let mut acc = 0.0f64;
        match table {
            Some(t) => {
                let taps = &t[phase * TAPS..(phase + 1) * TAPS];
                for (j, &h) in taps.iter().enumerate() {
                    let k = base - (HALF - 1) + j as isize;
                    if k >= 0 && k < n_in {
                        acc += input[k as usize] as f64 * h;
                    }
                }
            }
            None => {
                let frac = phase as f64 / l as f64;
                for j in 0..TAPS {
                    let k = base - (HALF - 1) + j as isize;
                    if k >= 0 && k < n_in {
                        let u = (j as isize - (HALF - 1)) as f64 - frac;
                        acc += input[k as usize] as f64 * tap(u, scale);
                    }
                }
            }
        }
        *sample = acc as f32;
    }
}

/// Resample to `target_rate`. Output length is round(T * target / src);
/// channels are processed independently.
pub fn resample(wave: &Waveform, target_rate: u32) -> Waveform {
    assert!(target_rate > 0, "target rate must be positive");
    let src = wave.sample_rate() as u64;
    let dst = target_rate as u64;
    if src == dst {
        return wave.clone();
    }
    let g = gcd(dst, src);
    let (l, m) = (dst / g, src / g);
    let out_len = ((wave.frames() as u64 * dst + src / 2) / src) as usize;
    let scale = if l < m { l as f64 / m as f64 } else { 1.0 };
    let table = phase_table(l, scale);

    let channels = wave.channels();
    let mut out = vec![0.0f32; channels * out_len];
    let chunk = out_len.max(1);
    crate::par::for_each_chunk_mut(&mut out, chunk, |c, chunk_data| {
        if out_len > 0 {
            resample_channel(wave.channel(c), out_len, l, m, scale, table.as_deref(), chunk_data);
        }
    });
    Waveform::new(out, channels, target_rate)
}
