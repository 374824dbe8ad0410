//! Binary checkpoints: `"TFCK"`, u32 version, u64 step, the run config as
//! TOML, then every named tensor (parameters and running statistics) as
//! little-endian f64. All integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::TfNet;
use crate::nn::{Parameterized, TensorRole};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TFCK";
const VERSION: u32 = 1;

pub fn write_checkpoint(w: &mut impl Write, model: &TfNet, cfg: &RunConfig, step: u64) -> std::io::Result<()> {
    let mut cfg = cfg.clone();
    cfg.model.num_classes = Some(model.num_classes);
    let text = cfg.to_toml();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&step.to_le_bytes())?;
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    let mut entries = Vec::new();
    model.visit("", &mut |name, t, role| entries.push((name.to_string(), role, t)));
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, role, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[matches!(role, TensorRole::Buffer) as u8])?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(path: &Path, model: &TfNet, cfg: &RunConfig, step: u64) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, cfg, step).map_err(|e| Error::io(path, e))?;
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take<const K: usize>(r: &mut impl Read) -> std::io::Result<[u8; K]> {
    let mut b = [0u8; K];
    r.read_exact(&mut b)?;
    Ok(b)
}

struct Entry {
    name: String,
    buffer: bool,
    tensor: Tensor,
}

fn read_body(r: &mut impl Read) -> std::result::Result<(u64, String, Vec<Entry>), String> {
    let io = |e: std::io::Error| format!("truncated checkpoint: {e}");
    if &take::<4>(r).map_err(io)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = u32::from_le_bytes(take(r).map_err(io)?);
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let step = u64::from_le_bytes(take(r).map_err(io)?);
    let len = u64::from_le_bytes(take(r).map_err(io)?) as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text).map_err(io)?;
    let text = String::from_utf8(text).map_err(|_| "config is not UTF-8".to_string())?;
    let count = u32::from_le_bytes(take(r).map_err(io)?);
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n = u32::from_le_bytes(take(r).map_err(io)?) as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| "tensor name is not UTF-8".to_string())?;
        let buffer = take::<1>(r).map_err(io)?[0] != 0;
        let rank = u32::from_le_bytes(take(r).map_err(io)?) as usize;
        let shape = (0..rank)
            .map(|_| take(r).map(|b| u64::from_le_bytes(b) as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let size: usize = shape.iter().product();
        let mut raw = vec![0u8; size * 8];
        r.read_exact(&mut raw).map_err(io)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        entries.push(Entry { name, buffer, tensor });
    }
    Ok((step, text, entries))
}

/// Rebuilds the model described by the stored config and fills in every
/// tensor; the names, roles and shapes must match exactly.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(TfNet, RunConfig, u64)> {
    let (step, text, entries) = read_body(r).map_err(Error::Data)?;
    let cfg = RunConfig::from_toml(&text, &[])?;
    let classes = cfg
        .model
        .num_classes
        .ok_or_else(|| Error::Data("checkpoint config lacks model.num_classes".into()))?;
    let mut model = TfNet::seeded(&cfg, classes)?;
    let mut expected = 0;
    let mut problem = None;
    model.visit_mut("", &mut |name, t, role| {
        let slot = expected;
        expected += 1;
        if problem.is_some() {
            return;
        }
        match entries.get(slot) {
            Some(e) if e.name == name && e.buffer == (role == TensorRole::Buffer) && e.tensor.shape() == t.shape() => {
                t.data_mut().copy_from_slice(e.tensor.data());
            }
            Some(e) => {
                problem = Some(format!(
                    "tensor {slot}: expected '{name}' {:?}, found '{}' {:?}",
                    t.shape(),
                    e.name,
                    e.tensor.shape()
                ))
            }
            None => problem = Some(format!("missing tensor '{name}'")),
        }
    });
    if let Some(p) = problem {
        return Err(Error::Data(p));
    }
    if entries.len() != expected {
        return Err(Error::Data(format!("{} tensors stored, model has {expected}", entries.len())));
    }
    Ok((model, cfg, step))
}

pub fn load_checkpoint(path: &Path) -> Result<(TfNet, RunConfig, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice()).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;

    fn small() -> (TfNet, RunConfig) {
        let cfg = RunConfig::from_toml("seed = 3\n[clip]\nclip_depth = 2\n", &[]).unwrap();
        (TfNet::seeded(&cfg, 2).unwrap(), cfg)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (mut model, cfg) = small();
        // A training-mode pass moves the running statistics off their init.
        let x = crate::model::ModelInput {
            clips: Tensor::from_fn(&[2, 3, 2, 64, 64], |i| (i % 7) as f64 / 7.0),
            dct: Some(Tensor::from_fn(&[2, 48, 16, 16], |i| ((i % 5) as f64 - 2.0) / 3.0)),
        };
        model.forward(&x, Mode::Train).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model, &cfg, 17).unwrap();
        let (loaded, lcfg, step) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(step, 17);
        assert_eq!(lcfg.model.num_classes, Some(2));
        let mut a = vec![];
        model.visit("", &mut |n, t, _| a.push((n.to_string(), t.data().to_vec())));
        let mut b = vec![];
        loaded.visit("", &mut |n, t, _| b.push((n.to_string(), t.data().to_vec())));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0, y.0);
            assert!(x.1.iter().zip(&y.1).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let mut again = Vec::new();
        write_checkpoint(&mut again, &loaded, &lcfg, 17).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn corrupt_input_is_a_data_error() {
        let (model, cfg) = small();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model, &cfg, 0).unwrap();
        assert!(matches!(read_checkpoint(&mut &buf[..buf.len() - 3]), Err(Error::Data(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Data(_))));
    }
}
