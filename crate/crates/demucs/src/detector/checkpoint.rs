//! Detector checkpoints: a `DTCF` config header, then the shared `DMX1`
//! container holding every trainable parameter followed by the batch-norm
//! running statistics (as unit-scale records).

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::{read_container, write_container, ParamRecord};

use super::{DetectorConfig, DetectorModel};

const CONFIG_MAGIC: [u8; 4] = *b"DTCF";
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

fn write_config<W: Write>(w: &mut W, c: &DetectorConfig) -> io::Result<()> {
    w.write_all(&CONFIG_MAGIC)?;
    write_u32(w, CONFIG_VERSION)?;
    for v in [
        c.in_channels,
        c.freq_rows,
        c.block1[0],
        c.block1[1],
        c.block1[2],
        c.block2[0],
        c.block2[1],
        c.block2[2],
        c.collapse_channels,
        c.lstm_hidden,
        c.lstm_layers,
        c.head_channels,
        c.sources,
    ] {
        write_u32(w, v as u32)?;
    }
    write_u32(w, c.dropout_milli)?;
    Ok(())
}

fn read_config<R: Read>(r: &mut R) -> io::Result<DetectorConfig> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CONFIG_MAGIC {
        return Err(bad("bad detector checkpoint magic"));
    }
    let version = read_u32(r)?;
    if version != CONFIG_VERSION {
        return Err(bad(format!("unsupported detector checkpoint version {version}")));
    }
    let mut vals = [0usize; 13];
    for v in vals.iter_mut() {
        *v = read_u32(r)? as usize;
    }
    let dropout_milli = read_u32(r)?;
    Ok(DetectorConfig {
        in_channels: vals[0],
        freq_rows: vals[1],
        block1: [vals[2], vals[3], vals[4]],
        block2: [vals[5], vals[6], vals[7]],
        collapse_channels: vals[8],
        lstm_hidden: vals[9],
        lstm_layers: vals[10],
        head_channels: vals[11],
        sources: vals[12],
        dropout_milli,
    })
}

fn state_records(model: &DetectorModel) -> Vec<ParamRecord> {
    let mut records: Vec<ParamRecord> =
        model.params().iter().map(ParamRecord::from_param).collect();
    for (i, bn) in model.batchnorms().iter().enumerate() {
        let mean = bn.running_mean.borrow().clone();
        let var = bn.running_var.borrow().clone();
        records.push(ParamRecord {
            name: format!("bn{i}.running_mean"),
            shape: vec![mean.len()],
            scale: 1.0,
            data: mean,
        });
        records.push(ParamRecord {
            name: format!("bn{i}.running_var"),
            shape: vec![var.len()],
            scale: 1.0,
            data: var,
        });
    }
    records
}

pub fn save_detector(path: &Path, model: &DetectorModel) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_config(&mut w, &model.config)?;
    write_container(&mut w, &state_records(model))?;
    w.flush()
}

pub fn load_detector(path: &Path) -> io::Result<DetectorModel> {
    let mut r = BufReader::new(File::open(path)?);
    let config = read_config(&mut r)?;
    let records = read_container(&mut r)?;
    let model = DetectorModel::new(&config, 0);
    let params = model.params();
    if records.len() != params.len() + 8 {
        return Err(bad(format!(
            "detector checkpoint holds {} records, expected {}",
            records.len(),
            params.len() + 8
        )));
    }
    for (mut p, rec) in params.into_iter().zip(&records) {
        if p.name() != rec.name {
            return Err(bad(format!("param order mismatch: {} vs {}", p.name(), rec.name)));
        }
        p.load(&rec.data, rec.scale as f32);
    }
    for (i, bn) in model.batchnorms().iter().enumerate() {
        let mean_rec = &records[records.len() - 8 + 2 * i];
        let var_rec = &records[records.len() - 8 + 2 * i + 1];
        if !mean_rec.name.ends_with("running_mean") || !var_rec.name.ends_with("running_var") {
            return Err(bad("running-statistic records out of order"));
        }
        bn.running_mean.borrow_mut().copy_from_slice(&mean_rec.data);
        bn.running_var.borrow_mut().copy_from_slice(&var_rec.data);
    }
    Ok(model)
}
