//! Separator checkpoints: a versioned little-endian config header followed
//! by the shared `DMX1` parameter container. Save/load round trips are
//! bit-exact.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::{read_container, write_container, ParamRecord};

use super::{new_model, Model, ModelConfig};

const CONFIG_MAGIC: [u8; 4] = *b"DMCF";
const CONFIG_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_config<W: Write>(w: &mut W, config: &ModelConfig, sample_rate: u32) -> io::Result<()> {
    w.write_all(&CONFIG_MAGIC)?;
    write_u32(w, CONFIG_VERSION)?;
    write_u32(w, config.depth as u32)?;
    write_u32(w, config.input_channels as u32)?;
    write_u32(w, config.initial_channels as u32)?;
    write_u32(w, config.growth as u32)?;
    write_u32(w, config.kernel as u32)?;
    write_u32(w, config.stride as u32)?;
    write_u32(w, config.lstm_layers as u32)?;
    w.write_all(&[config.use_glu as u8, config.use_bilstm as u8, config.rescale_lstm as u8])?;
    w.write_all(&config.rescale_reference.to_le_bytes())?;
    write_u32(w, config.sources as u32)?;
    write_u32(w, sample_rate)?;
    Ok(())
}

fn read_config<R: Read>(r: &mut R) -> io::Result<(ModelConfig, u32)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CONFIG_MAGIC {
        return Err(bad("bad separator checkpoint magic"));
    }
    let version = read_u32(r)?;
    if version != CONFIG_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let depth = read_u32(r)? as usize;
    let input_channels = read_u32(r)? as usize;
    let initial_channels = read_u32(r)? as usize;
    let growth = read_u32(r)? as usize;
    let kernel = read_u32(r)? as usize;
    let stride = read_u32(r)? as usize;
    let lstm_layers = read_u32(r)? as usize;
    let mut flags = [0u8; 3];
    r.read_exact(&mut flags)?;
    let mut scale_b = [0u8; 8];
    r.read_exact(&mut scale_b)?;
    let rescale_reference = f64::from_le_bytes(scale_b);
    let sources = read_u32(r)? as usize;
    let sample_rate = read_u32(r)?;
    Ok((
        ModelConfig {
            depth,
            input_channels,
            initial_channels,
            growth,
            kernel,
            stride,
            lstm_layers,
            use_glu: flags[0] != 0,
            use_bilstm: flags[1] != 0,
            rescale_lstm: flags[2] != 0,
            rescale_reference,
            sources,
        },
        sample_rate,
    ))
}

/// Write config header plus all parameters (name, scale, raw f32 data).
pub fn save_model(path: &Path, model: &Model, sample_rate: u32) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_config(&mut w, &model.config, sample_rate)?;
    let records: Vec<ParamRecord> = model.params().iter().map(ParamRecord::from_param).collect();
    write_container(&mut w, &records)?;
    w.flush()
}

/// Rebuild the model from a checkpoint; returns the training sample rate
/// stored alongside the config.
pub fn load_model(path: &Path) -> io::Result<(Model, u32)> {
    let mut r = BufReader::new(File::open(path)?);
    let (config, sample_rate) = read_config(&mut r)?;
    let records = read_container(&mut r)?;
    let model = new_model(&config, 0).map_err(|e| bad(format!("config rejected: {e}")))?;
    let params = model.params();
    if params.len() != records.len() {
        return Err(bad(format!(
            "checkpoint holds {} params, model built from its config needs {}",
            records.len(),
            params.len()
        )));
    }
    for (mut p, rec) in params.into_iter().zip(records) {
        if p.name() != rec.name {
            return Err(bad(format!("param order mismatch: {} vs {}", p.name(), rec.name)));
        }
        if p.tensor().shape() != rec.shape.as_slice() {
            return Err(bad(format!(
                "param {} shape mismatch: {:?} vs {:?}",
                rec.name,
                p.tensor().shape(),
                rec.shape
            )));
        }
        p.load(&rec.data, rec.scale as f32);
    }
    Ok((model, sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::valid_length;
    use crate::tensor::Tensor;

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let config = ModelConfig {
            depth: 2,
            input_channels: 1,
            initial_channels: 4,
            ..ModelConfig::default()
        };
        let model = new_model(&config, 42).unwrap();
        let dir = std::env::temp_dir().join("demucs-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.dmx");
        save_model(&path, &model, 8000).unwrap();
        let (loaded, rate) = load_model(&path).unwrap();
        assert_eq!(rate, 8000);
        assert_eq!(loaded.config, config);
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.scale().to_bits(), b.scale().to_bits());
            for (x, y) in a.tensor().to_vec().iter().zip(b.tensor().to_vec()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // forward outputs agree exactly
        let t = valid_length(500, &config);
        let data: Vec<f32> = (0..t).map(|i| ((i % 50) as f32 / 50.0) - 0.5).collect();
        let mix = Tensor::from_vec(&[1, 1, t], data);
        assert_eq!(model.forward(&mix).unwrap().to_vec(), loaded.forward(&mix).unwrap().to_vec());
        // double round trip produces identical bytes
        let path2 = dir.join("model2.dmx");
        save_model(&path2, &loaded, rate).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
