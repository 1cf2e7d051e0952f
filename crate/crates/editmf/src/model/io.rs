//! Binary weight file: magic "EDMF", one version byte, a length-prefixed
//! JSON config block, then each tensor as length-prefixed name, rank, dims
//! (u32 little-endian each) and row-major f64 little-endian values.

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"EDMF";
pub const FORMAT_VERSION: u8 = 1;

pub fn save_model(model: &ModelState, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    let config_json = serde_json::to_vec(&model.config)?;
    w.write_all(&(config_json.len() as u32).to_le_bytes())?;
    w.write_all(&config_json)?;
    for (name, dims, data) in model.tensor_views() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for dim in &dims {
            w.write_all(&(*dim as u32).to_le_bytes())?;
        }
        for value in data {
            w.write_all(&value.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes_exact(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::LoadTruncated(format!("while reading {what}")))?;
        Ok(buf)
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes_exact(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };
    let magic = r.bytes_exact(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::LoadMagic);
    }
    let version = r.bytes_exact(1, "version")?[0];
    if version != FORMAT_VERSION {
        return Err(Error::LoadVersion(version));
    }
    let config_len = r.u32_le("config length")? as usize;
    let config_bytes = r.bytes_exact(config_len, "config block")?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes)?;
    config.validate()?;

    let mut model = ModelState::zeros_like(&config)?;
    for (expect_name, expect_dims, data) in model.tensor_views_mut() {
        let name_len = r.u32_le("tensor name length")? as usize;
        let name_bytes = r.bytes_exact(name_len, "tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::LoadShape("tensor name is not valid UTF-8".into()))?;
        if name != expect_name {
            return Err(Error::LoadShape(format!(
                "expected tensor {expect_name:?}, found {name:?}"
            )));
        }
        let rank = r.u32_le("tensor rank")? as usize;
        if rank != expect_dims.len() {
            return Err(Error::LoadShape(format!(
                "tensor {name:?} has rank {rank}, expected {}",
                expect_dims.len()
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32_le("tensor dim")? as usize);
        }
        if dims != expect_dims {
            return Err(Error::LoadShape(format!(
                "tensor {name:?} has dims {dims:?}, expected {expect_dims:?}"
            )));
        }
        let count: usize = dims.iter().product();
        if count != data.len() {
            return Err(Error::LoadShape(format!(
                "tensor {name:?} dims {dims:?} do not match buffer length {}",
                data.len()
            )));
        }
        let bytes = r.bytes_exact(count * 8, &format!("tensor {name} values"))?;
        for (i, chunk) in bytes.chunks_exact(8).enumerate() {
            data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    model.validate()?;
    Ok(model)
}
