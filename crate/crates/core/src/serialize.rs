//! Binary parameter blobs, role manifests and optimizer checkpoints.
//!
//! Blob layout, per parameter in store order: `u64` rank, `u64` extents,
//! then `f32` values, all little-endian. The manifest is one
//! `name\trole\tshape` line per parameter. A checkpoint is the magic
//! `NOBLECKP`, a `u32` version, the `u64` step count, then three blobs:
//! parameters, first moments, second moments.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{AdamW, RoleTag};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 8] = b"NOBLECKP";
const VERSION: u32 = 1;

fn put_tensor(out: &mut Vec<u8>, shape: &[usize], data: impl Iterator<Item = f64>) {
    out.extend((shape.len() as u64).to_le_bytes());
    for &e in shape {
        out.extend((e as u64).to_le_bytes());
    }
    for v in data {
        out.extend((v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated blob at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor<F: Real>(&mut self) -> Result<Tensor<F>> {
        let rank = self.u64()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(4 * n)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| F::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn encode_params<F: Real>(store: &ParamStore<F>) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, p) in store.iter() {
        put_tensor(&mut out, p.value.shape(), p.value.data().iter().map(|v| v.as_f64()));
    }
    out
}

pub fn manifest<F: Real>(store: &ParamStore<F>) -> String {
    let mut s = String::new();
    for (_, p) in store.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(|e| e.to_string()).collect();
        s.push_str(&format!("{}\t{}\t{}\n", p.name, p.role, shape.join("x")));
    }
    s
}

/// Overwrites `store` values from a blob; names and roles in `manifest_text`
/// must match the store.
pub fn decode_params<F: Real>(store: &mut ParamStore<F>, blob: &[u8], manifest_text: &str) -> Result<()> {
    let lines: Vec<&str> = manifest_text.lines().collect();
    if lines.len() != store.len() {
        return Err(Error::Format(format!("manifest lists {} parameters, model has {}", lines.len(), store.len())));
    }
    for (line, id) in lines.iter().zip(store.ids().collect::<Vec<_>>()) {
        let mut cols = line.split('\t');
        let (name, role) = (cols.next().unwrap_or(""), cols.next().unwrap_or(""));
        let p = store.get(id);
        if name != p.name || role.parse::<RoleTag>().ok() != Some(p.role) {
            return Err(Error::Format(format!("manifest entry {line:?} does not match parameter {}", p.name)));
        }
    }
    let mut r = Reader { buf: blob, pos: 0 };
    read_into(&mut r, store)?;
    if r.pos != blob.len() {
        return Err(Error::Format("trailing bytes after parameter blob".into()));
    }
    Ok(())
}

fn read_into<F: Real>(r: &mut Reader, store: &mut ParamStore<F>) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let t = r.tensor::<F>()?;
        store.set(id, t)?;
    }
    Ok(())
}

pub fn save_params<F: Real>(store: &ParamStore<F>, blob_path: &Path) -> Result<()> {
    fs::write(blob_path, encode_params(store)).map_err(|e| Error::io(blob_path, e))?;
    let mpath = blob_path.with_extension("manifest");
    fs::write(&mpath, manifest(store)).map_err(|e| Error::io(&mpath, e))
}

pub fn load_params<F: Real>(store: &mut ParamStore<F>, blob_path: &Path) -> Result<()> {
    let blob = fs::read(blob_path).map_err(|e| Error::io(blob_path, e))?;
    let mpath = blob_path.with_extension("manifest");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    decode_params(store, &blob, &text)
}

pub fn encode_checkpoint<F: Real>(store: &ParamStore<F>, opt: &AdamW<F>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend(VERSION.to_le_bytes());
    out.extend(opt.step_count().to_le_bytes());
    out.extend(encode_params(store));
    let (m, v) = opt.moments();
    for moments in [m, v] {
        for ((_, p), mom) in store.iter().zip(moments) {
            put_tensor(&mut out, p.value.shape(), mom.iter().map(|x| x.as_f64()));
        }
    }
    out
}

/// Restores parameters and optimizer state written by [`encode_checkpoint`]
/// for a model of identical structure.
pub fn decode_checkpoint<F: Real>(store: &mut ParamStore<F>, opt: &mut AdamW<F>, bytes: &[u8]) -> Result<()> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let t = r.u64()?;
    let mut staged = store.clone();
    read_into(&mut r, &mut staged)?;
    let mut moments = [Vec::new(), Vec::new()];
    for mom in &mut moments {
        for (_, p) in store.iter() {
            let tensor = r.tensor::<F>()?;
            if tensor.shape() != p.value.shape() {
                return Err(Error::Format(format!("moment shape mismatch for {}", p.name)));
            }
            mom.push(tensor.into_data());
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let [m, v] = moments;
    opt.restore(t, m, v)?;
    *store = staged;
    Ok(())
}
