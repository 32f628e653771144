//! Binary checkpoints: a versioned header, the config as JSON, then each
//! named parameter group as `rows × cols` little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use super::{Params, RefModelConfig, RefModelError};

pub const MAGIC: &[u8; 8] = b"GLTRREF\0";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> RefModelError {
    RefModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut w: W, cfg: &RefModelConfig, params: &Params) -> Result<(), RefModelError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let cfg_json = serde_json::to_vec(cfg).map_err(|e| bad(e.to_string()))?;
    w.write_u32::<LittleEndian>(cfg_json.len() as u32)?;
    w.write_all(&cfg_json)?;
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, v) in params.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(v.nrows() as u32)?;
        w.write_u32::<LittleEndian>(v.ncols() as u32)?;
        for &x in v.iter() {
            w.write_f64::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(RefModelConfig, Params), RefModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a reference-model checkpoint"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut cfg_json = vec![0u8; n];
    r.read_exact(&mut cfg_json)?;
    let cfg: RefModelConfig = serde_json::from_slice(&cfg_json).map_err(|e| bad(e.to_string()))?;
    let groups = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(groups);
    for _ in 0..groups {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let rows = r.read_u32::<LittleEndian>()? as usize;
        let cols = r.read_u32::<LittleEndian>()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.read_f64::<LittleEndian>()?);
        }
        let arr = Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(e.to_string()))?;
        out.push((name, arr));
    }
    let params = Params::from_groups(out);
    let expected = Params::init(&cfg)?;
    if expected.names() != params.names()
        || expected.values().iter().zip(params.values()).any(|(a, b)| a.dim() != b.dim())
    {
        return Err(bad("parameter groups do not match the stored config"));
    }
    Ok((cfg, params))
}

pub fn save(path: &Path, cfg: &RefModelConfig, params: &Params) -> Result<(), RefModelError> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(f, cfg, params)
}

pub fn load(path: &Path) -> Result<(RefModelConfig, Params), RefModelError> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
