//! Binary checkpoint: `"MSCK"`, u32 version (1), u32 tensor count, then per
//! tensor a u16 name length, UTF-8 name, u8 rank, u32 dims and the f32
//! payload. All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MSCK";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(out: &mut W, store: &ParamStore<f32>) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, e) in store.entries() {
        let name = e.name.as_bytes();
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[e.value.rank() as u8])?;
        for &d in e.value.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(e.value.numel() * 4);
        for v in e.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, store).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_exact<R: Read>(r: &mut R, n: usize, path: &Path) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(path, "truncated checkpoint"))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let b = read_exact(r, 4, path)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parse a checkpoint stream into `(name, tensor)` pairs in file order.
pub fn read_checkpoint<R: Read>(r: &mut R, path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    if read_exact(r, 4, path)? != MAGIC {
        return Err(Error::format(path, "bad magic, expected MSCK"));
    }
    let version = read_u32(r, path)?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = read_u32(r, path)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nl = read_exact(r, 2, path)?;
        let nl = u16::from_le_bytes([nl[0], nl[1]]) as usize;
        let name = String::from_utf8(read_exact(r, nl, path)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let rank = read_exact(r, 1, path)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r, path)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = read_exact(r, n * 4, path)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Load a checkpoint file into a model store whose layout must match.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore<f32>) -> Result<()> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let entries = read_checkpoint(&mut BufReader::new(f), path)?;
    if entries.len() != store.len() {
        return Err(Error::format(
            path,
            format!("checkpoint has {} tensors, model expects {}", entries.len(), store.len()),
        ));
    }
    for (name, t) in entries {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::format(path, format!("unexpected tensor {name}")))?;
        store.set(id, t).map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamKind;

    #[test]
    fn byte_layout_is_exact() {
        let mut s = ParamStore::new();
        s.add("ab", Tensor::new(vec![2], vec![1.0f32, -2.5]).unwrap(), ParamKind::Trainable).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &s).unwrap();
        let mut want = b"MSCK".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn roundtrip_and_corruption() {
        let mut s = ParamStore::new();
        s.add("conv.w", Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * 0.5), ParamKind::Trainable).unwrap();
        s.add("bn.mean", Tensor::zeros(&[2]), ParamKind::Buffer).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &s).unwrap();
        let mut t = s.clone();
        t.set(t.id("conv.w").unwrap(), Tensor::zeros(&[2, 1, 3, 3])).unwrap();
        load_checkpoint(&p, &mut t).unwrap();
        assert_eq!(t.by_name("conv.w"), s.by_name("conv.w"));

        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p, &mut t), Err(Error::Format { .. })));
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_checkpoint(&p, &mut t).is_err());
    }
}
