//! RIFF/WAVE reader and writer for PCM16 and IEEE float32.
//!
//! Little-endian throughout; the fmt chunk may be 16 or 18 bytes (the
//! 2-byte extension size must be zero). PCM16 samples map to float via
//! division by 32768; writing PCM16 clamps to [-1, 1] before quantizing.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::{AudioError, Result, Waveform};

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

/// On-disk sample encoding for [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

fn format_err(path: &Path, reason: impl Into<String>) -> AudioError {
    AudioError::Format { path: path.to_path_buf(), reason: reason.into() }
}

fn unsupported_err(path: &Path, reason: impl Into<String>) -> AudioError {
    AudioError::Unsupported { path: path.to_path_buf(), reason: reason.into() }
}

struct WavInfo {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
    data_offset: usize,
    data_len: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<WavInfo> {
    if bytes.len() < 12 {
        return Err(format_err(path, "file shorter than RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(format_err(path, "missing RIFF tag"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(format_err(path, "missing WAVE tag"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<(usize, usize)> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(format_err(path, format!("chunk {:?} overruns file", String::from_utf8_lossy(id))));
        }
        match id {
            b"fmt " => {
                if size != 16 && size != 18 {
                    return Err(format_err(path, format!("fmt chunk of {size} bytes (expected 16 or 18)")));
                }
                let c = &bytes[body..body + size];
                let format = u16::from_le_bytes([c[0], c[1]]);
                let channels = u16::from_le_bytes([c[2], c[3]]);
                let sample_rate = u32::from_le_bytes([c[4], c[5], c[6], c[7]]);
                let bits = u16::from_le_bytes([c[14], c[15]]);
                if size == 18 {
                    let ext = u16::from_le_bytes([c[16], c[17]]);
                    if ext != 0 {
                        return Err(format_err(path, format!("fmt extension of {ext} bytes")));
                    }
                }
                fmt = Some((format, channels, sample_rate, bits));
            }
            b"data" => {
                data = Some((body, size));
            }
            _ => {} // skip LIST, fact, cue, ...
        }
        // chunks are word-aligned
        pos = body + size + (size & 1);
    }

    let (format, channels, sample_rate, bits_per_sample) =
        fmt.ok_or_else(|| format_err(path, "no fmt chunk"))?;
    let (data_offset, data_len) = data.ok_or_else(|| format_err(path, "no data chunk"))?;
    Ok(WavInfo { format, channels, sample_rate, bits_per_sample, data_offset, data_len })
}

fn validated_info(path: &Path, info: &WavInfo) -> Result<()> {
    if info.channels == 0 || info.channels > 2 {
        return Err(unsupported_err(path, format!("{} channels (only 1 or 2 supported)", info.channels)));
    }
    if info.sample_rate == 0 {
        return Err(format_err(path, "zero sample rate"));
    }
    match (info.format, info.bits_per_sample) {
        (FORMAT_PCM, 16) | (FORMAT_IEEE_FLOAT, 32) => Ok(()),
        (f, b) => Err(unsupported_err(path, format!("format {f} with {b} bits per sample"))),
    }
}

/// Read a PCM16 or float32 WAV file into a normalized [`Waveform`].
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path).map_err(|e| AudioError::Io { path: path.to_path_buf(), source: e })?;
    let info = parse_header(path, &bytes)?;
    validated_info(path, &info)?;

    let channels = info.channels as usize;
    let bytes_per_sample = (info.bits_per_sample / 8) as usize;
    let frame_bytes = bytes_per_sample * channels;
    if info.data_len % frame_bytes != 0 {
        return Err(format_err(path, format!("data chunk of {} bytes not frame-aligned", info.data_len)));
    }
    let frames = info.data_len / frame_bytes;
    let data = &bytes[info.data_offset..info.data_offset + info.data_len];

    // de-interleave into channel-contiguous storage
    let mut samples = vec![0.0f32; channels * frames];
    match info.format {
        FORMAT_PCM => {
            for t in 0..frames {
                for c in 0..channels {
                    let o = (t * channels + c) * 2;
                    let v = i16::from_le_bytes([data[o], data[o + 1]]);
                    samples[c * frames + t] = v as f32 / 32768.0;
                }
            }
        }
        FORMAT_IEEE_FLOAT => {
            for t in 0..frames {
                for c in 0..channels {
                    let o = (t * channels + c) * 4;
                    let v = f32::from_le_bytes([data[o], data[o + 1], data[o + 2], data[o + 3]]);
                    if !v.is_finite() {
                        return Err(format_err(path, format!("non-finite sample at frame {t}")));
                    }
                    samples[c * frames + t] = v;
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(Waveform::new(samples, channels, info.sample_rate))
}

/// Frame count from the header alone, without decoding samples.
pub(crate) fn wav_frames(path: &Path) -> Result<usize> {
    wav_spec(path).map(|(frames, _)| frames)
}

/// (frames, sample rate) from the header alone.
pub(crate) fn wav_spec(path: &Path) -> Result<(usize, u32)> {
    let bytes = fs::read(path).map_err(|e| AudioError::Io { path: path.to_path_buf(), source: e })?;
    let info = parse_header(path, &bytes)?;
    validated_info(path, &info)?;
    let frame_bytes = (info.bits_per_sample / 8) as usize * info.channels as usize;
    Ok((info.data_len / frame_bytes, info.sample_rate))
}

/// Write a waveform as PCM16 or float32. Float32 round-trips bit-exactly;
/// PCM16 clamps to [-1, 1] then rounds to the nearest quantization step.
pub fn write_wav(path: &Path, wave: &Waveform, encoding: WavEncoding) -> Result<()> {
    let channels = wave.channels();
    let frames = wave.frames();
    let (format, bits): (u16, u16) = match encoding {
        WavEncoding::Pcm16 => (FORMAT_PCM, 16),
        WavEncoding::Float32 => (FORMAT_IEEE_FLOAT, 32),
    };
    let bytes_per_sample = (bits / 8) as usize;
    let block_align = (bytes_per_sample * channels) as u16;
    let byte_rate = wave.sample_rate() * block_align as u32;
    let data_len = frames * channels * bytes_per_sample;

    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format.to_le_bytes());
    out.extend_from_slice(&(channels as u16).to_le_bytes());
    out.extend_from_slice(&wave.sample_rate().to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());

    match encoding {
        WavEncoding::Pcm16 => {
            for t in 0..frames {
                for c in 0..channels {
                    let s = wave.channel(c)[t].clamp(-1.0, 1.0);
                    let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
            }
        }
        WavEncoding::Float32 => {
            for t in 0..frames {
                for c in 0..channels {
                    out.extend_from_slice(&wave.channel(c)[t].to_le_bytes());
                }
            }
        }
    }

    let mut file = fs::File::create(path).map_err(|e| AudioError::Io { path: path.to_path_buf(), source: e })?;
    file.write_all(&out).map_err(|e| AudioError::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("demucs-wav-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn pcm16_scaling() {
        // hand-built mono PCM16 file holding [0, 16384, -32768]
        let path = tmp("scale.wav");
        let w = Waveform::new(vec![0.0, 0.5, -1.0], 1, 8000);
        write_wav(&path, &w, WavEncoding::Pcm16).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.channel(0), &[0.0, 0.5, -1.0]);
    }

    #[test]
    fn empty_stereo_float() {
        let path = tmp("empty.wav");
        let w = Waveform::new(vec![], 2, 44100);
        write_wav(&path, &w, WavEncoding::Float32).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.channels(), 2);
        assert_eq!(r.frames(), 0);
    }

    #[test]
    fn pcm16_clamps_over_full_scale() {
        let path = tmp("clamp.wav");
        let w = Waveform::new(vec![1.5], 1, 8000);
        write_wav(&path, &w, WavEncoding::Pcm16).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.channel(0)[0], 32767.0 / 32768.0);
    }

    #[test]
    fn rejects_three_channels() {
        let path = tmp("3ch.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&40u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
        bytes.extend_from_slice(&3u16.to_le_bytes()); // 3 channels
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&48000u32.to_le_bytes());
        bytes.extend_from_slice(&6u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_wav(&path), Err(AudioError::Unsupported { .. })));
    }

    #[test]
    fn rejects_garbage_header() {
        let path = tmp("garbage.wav");
        std::fs::write(&path, b"not a wav at all").unwrap();
        assert!(matches!(read_wav(&path), Err(AudioError::Format { .. })));
    }

    #[test]
    fn fmt18_accepted() {
        let path = tmp("fmt18.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(38u32 + 4).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&18u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(&0u16.to_le_bytes()); // empty extension
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&16384i16.to_le_bytes());
        bytes.extend_from_slice(&(-16384i16).to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.channel(0), &[0.5, -0.5]);
    }

    proptest! {
        #[test]
        fn float32_round_trip_is_bit_exact(data in proptest::collection::vec(-1.0f32..1.0, 0..600)) {
            let frames = data.len() / 2;
            let w = Waveform::new(data[..frames * 2].to_vec(), 2, 44100);
            let path = tmp(&format!("rt-{}.wav", frames));
            write_wav(&path, &w, WavEncoding::Float32).unwrap();
            let r = read_wav(&path).unwrap();
            prop_assert_eq!(r.data(), w.data());
        }

        #[test]
        fn pcm16_round_trip_within_one_step(data in proptest::collection::vec(-1.0f32..1.0, 1..400)) {
            let w = Waveform::new(data.clone(), 1, 22050);
            let path = tmp(&format!("q-{}.wav", data.len()));
            write_wav(&path, &w, WavEncoding::Pcm16).unwrap();
            let r = read_wav(&path).unwrap();
            for (a, b) in r.channel(0).iter().zip(w.channel(0)) {
                prop_assert!((a - b).abs() <= 1.0 / 32768.0);
            }
        }
    }
}
