//! Binary weight container.
//!
//! ```text
//! "LDRPM1"
//! u32 LE  config text length, then the canonical model config text (UTF-8)
//! repeated until EOF:
//!   u32 LE  name length, name (UTF-8)
//!   u32 LE  rank, rank × u64 LE extents
//!   numel × f64 LE values
//! ```
//!
//! Parameters come first in allocation order, followed by batch-norm
//! running statistics.

use std::io::{Read, Write};
use std::path::Path;

use crate::config;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::network::Network;

pub const MAGIC: &str = "LDRPM1";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Validation(format!("{v} does not fit in a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len())?;
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut out = MAGIC.as_bytes().to_vec();
    let text = config::model_to_text(&net.config)?;
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    for (_, p) in net.store.iter() {
        put_tensor(&mut out, &p.name, p.value.shape(), p.value.data())?;
    }
    for (name, values) in net.buffers() {
        put_tensor(&mut out, &name, &[values.len()], values)?;
    }
    Ok(out)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    let bytes = to_bytes(net)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("needed {n} bytes for {what} at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Validation(format!("{what} {v} too large")))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Validation(format!("{what} is not UTF-8")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Rebuilds the network described by the embedded config and overwrites
/// every parameter and buffer with the stored values.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Network> {
    if !bytes.starts_with(MAGIC.as_bytes()) {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: MAGIC });
    }
    let mut c = Cursor { bytes, pos: MAGIC.len(), path };
    let len = c.u32("config length")?;
    let text = c.string(len, "config text")?;
    let (model, _) = config::parse(&text, path)?;
    let mut net = Network::build(&model, 0)?;
    let names: Vec<String> = net.store.iter().map(|(_, p)| p.name.clone()).collect();
    let buffer_names: Vec<String> = net.buffers().into_iter().map(|(n, _)| n).collect();
    let mut seen = Vec::new();
    while !c.done() {
        let n = c.u32("name length")?;
        let name = c.string(n, "tensor name")?;
        let rank = c.u32("rank")?;
        let shape = (0..rank).map(|_| c.u64("extent")).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let numel = numel
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Validation(format!("tensor `{name}` extents overflow")))?
            / 8;
        let raw = c.take(numel * 8, &format!("values of `{name}`"))?;
        let values: Vec<f64> =
            raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        if seen.contains(&name) {
            return Err(Error::Validation(format!("tensor `{name}` stored twice")));
        }
        if let Some(i) = names.iter().position(|x| *x == name) {
            let id = net.store.ids().nth(i).expect("index");
            if net.store.get(id).shape() != shape.as_slice() {
                return Err(Error::Validation(format!(
                    "tensor `{name}` has shape {shape:?}, network expects {:?}",
                    net.store.get(id).shape()
                )));
            }
            *net.store.get_mut(id) = Tensor::new(&shape, values)?;
        } else if buffer_names.contains(&name) {
            net.set_buffer(&name, &values)?;
        } else {
            return Err(Error::Validation(format!("unexpected tensor `{name}`")));
        }
        seen.push(name);
    }
    let expected = names.len() + buffer_names.len();
    if seen.len() != expected {
        return Err(Error::CountMismatch(format!(
            "{}: checkpoint holds {} tensors, network has {expected}",
            path.display(),
            seen.len()
        )));
    }
    Ok(net)
}

pub fn load(path: &Path) -> Result<Network> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttnKind, ConvKind, ModelConfig};

    fn net() -> Network {
        let mut n = Network::build(&ModelConfig::gradcheck_config(ConvKind::Standard, AttnKind::Mhsa), 5).unwrap();
        for (i, s) in n.bn_stats_mut().into_iter().enumerate() {
            s.mean.iter_mut().for_each(|m| *m = 0.1 * i as f64 + 1.0 / 3.0);
        }
        n
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = net();
        let bytes = to_bytes(&a).unwrap();
        let b = from_bytes(&bytes, Path::new("w.bin")).unwrap();
        assert_eq!(a.config, b.config);
        let bits = |n: &Network| n.store.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let bufs = |n: &Network| n.buffers().into_iter().map(|(k, v)| (k, v.to_vec())).collect::<Vec<_>>();
        assert_eq!(bufs(&a), bufs(&b));
        assert_eq!(to_bytes(&b).unwrap(), bytes);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = to_bytes(&net()).unwrap();
        let p = Path::new("w.bin");
        assert!(matches!(from_bytes(b"LDRPM2xxxx", p), Err(Error::BadMagic { .. })));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3], p), Err(Error::Truncated { .. })));
        assert!(matches!(from_bytes(&bytes[..10], p), Err(Error::Truncated { .. })));
    }
}
