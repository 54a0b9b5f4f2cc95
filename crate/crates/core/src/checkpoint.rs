//! Binary network checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "SFEU" | version u32 = 1 | network count u8
//! per network: layer count u32
//!   per layer: in_dim u32 | out_dim u32 | weights f64 (row-major in × out) | biases f64 (out)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::NetworkParams;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"SFEU";
pub const VERSION: u32 = 1;

pub fn encode_networks(nets: &[&NetworkParams]) -> Vec<u8> {
    assert!(nets.len() <= u8::MAX as usize, "too many networks");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(nets.len() as u8);
    for net in nets {
        out.extend_from_slice(&(net.n_layers() as u32).to_le_bytes());
        for (w, b) in net.weights().iter().zip(net.biases()) {
            out.extend_from_slice(&(w.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(w.cols() as u32).to_le_bytes());
            for v in w.as_slice().iter().chain(b.as_slice()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.fail("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Decodes a checkpoint buffer; `path` only labels errors.
pub fn decode_networks(buf: &[u8], path: &Path) -> Result<Vec<NetworkParams>> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.fail("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let count = r.take(1)?[0] as usize;
    let mut nets = Vec::with_capacity(count);
    for _ in 0..count {
        let layers = r.u32()? as usize;
        if layers == 0 {
            return Err(r.fail("network with no layers"));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for _ in 0..layers {
            let din = r.u32()? as usize;
            let dout = r.u32()? as usize;
            let w = r.f64s(din * dout)?;
            let b = r.f64s(dout)?;
            weights.push(Matrix::from_vec(din, dout, w));
            biases.push(Matrix::from_vec(1, dout, b));
        }
        let net = NetworkParams::from_parts(weights, biases).map_err(|e| r.fail(format!("invalid network: {e}")))?;
        nets.push(net);
    }
    if r.pos != buf.len() {
        return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(nets)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(tmp, e))?;
    f.sync_all().map_err(|e| Error::io(tmp, e))?;
    drop(f);
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_networks(path: &Path, nets: &[&NetworkParams]) -> Result<()> {
    write_atomic(path, &encode_networks(nets))
}

pub fn load_networks(path: &Path) -> Result<Vec<NetworkParams>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_networks(&buf, path)
}
