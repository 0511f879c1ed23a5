//! Trainable parameters with paired gradient buffers, plain SGD, and a
//! flat binary checkpoint format.
//!
//! Parameters are keyed by name in a `BTreeMap` so every traversal
//! (updates, gradient checks, checkpoint bytes) is deterministic.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

const MAGIC: &[u8; 4] = b"TZSH";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
struct Param {
    value: Tensor2,
    grad: Tensor2,
}

/// All trainable weights and biases, each paired with a gradient buffer of
/// the same shape, plus the optimizer step counter.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a parameter. Its gradient buffer starts at zero.
    pub fn insert(&mut self, name: &str, value: Tensor2) {
        let grad = Tensor2::zeros(value.rows(), value.cols());
        self.entries.insert(name.to_string(), Param { value, grad });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn try_value(&self, name: &str) -> Option<&Tensor2> {
        self.entries.get(name).map(|p| &p.value)
    }

    /// Panics if the parameter does not exist; missing names are a bug in
    /// the caller, not a runtime condition.
    pub fn value(&self, name: &str) -> &Tensor2 {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor2 {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .value
    }

    pub fn grad(&self, name: &str) -> &Tensor2 {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .grad
    }

    /// `grad[name] += scale * delta`.
    pub fn accumulate(&mut self, name: &str, delta: &Tensor2, scale: f64) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        p.grad.add_scaled(delta, scale)
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// One plain SGD update: `p <- p - lr * grad` for every parameter,
    /// then gradients are cleared and the step counter advances.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        for (name, p) in &self.entries {
            if !p.grad.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient in parameter {name:?} at step {}",
                    self.step
                )));
            }
        }
        for p in self.entries.values_mut() {
            for (v, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= lr * g;
            }
            p.grad.data_mut().fill(0.0);
        }
        self.step += 1;
        Ok(())
    }

    /// Byte-for-byte deterministic checkpoint: magic `TZSH`, version u32,
    /// then per parameter in name order: name length u32, name bytes,
    /// rows u32, cols u32, row-major little-endian f64 data. Gradients and
    /// the step counter are not persisted.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (name, p) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(p.value.rows() as u32).to_le_bytes())?;
            w.write_all(&(p.value.cols() as u32).to_le_bytes())?;
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data("not a checkpoint: bad magic bytes".into()));
        }
        let version = read_u32(r)?.ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
        if version != VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut store = ParamStore::new();
        while let Some(name_len) = read_u32(r)? {
            let mut name_bytes = vec![0u8; name_len as usize];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Data("checkpoint parameter name is not UTF-8".into()))?;
            let rows =
                read_u32(r)?.ok_or_else(|| Error::Data("truncated checkpoint".into()))? as usize;
            let cols =
                read_u32(r)?.ok_or_else(|| Error::Data("truncated checkpoint".into()))? as usize;
            let mut data = vec![0.0; rows * cols];
            let mut buf = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            let value = Tensor2::from_vec(rows, cols, data)?;
            if !value.is_finite() {
                return Err(Error::Data(format!(
                    "checkpoint parameter {name:?} contains non-finite values"
                )));
            }
            store.insert(&name, value);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r =
            BufReader::new(File::open(path).map_err(|e| {
                Error::Data(format!("cannot open checkpoint {}: {e}", path.display()))
            })?);
        Self::read_from(&mut r)
    }
}

/// Reads a little-endian u32; `Ok(None)` on clean EOF before any byte.
fn read_u32<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(Error::Data("truncated checkpoint".into()));
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            name,
            Tensor2::from_vec(1, vals.len(), vals.to_vec()).unwrap(),
        );
        s
    }

    #[test]
    fn sgd_applies_update_and_clears_grads() {
        let mut s = store_with("p", &[1.0]);
        s.accumulate("p", &Tensor2::from_vec(1, 1, vec![2.0]).unwrap(), 1.0)
            .unwrap();
        s.sgd_step(0.1).unwrap();
        assert_eq!(s.value("p").get(0, 0), 0.8);
        assert_eq!(s.grad("p").get(0, 0), 0.0);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut s = store_with("p", &[3.5, -1.25]);
        let before = s.value("p").clone();
        s.accumulate(
            "p",
            &Tensor2::from_vec(1, 2, vec![10.0, -4.0]).unwrap(),
            1.0,
        )
        .unwrap();
        s.sgd_step(0.0).unwrap();
        assert_eq!(s.value("p"), &before);
    }

    #[test]
    fn two_steps_match_one_doubled_step_for_constant_grad() {
        let g = Tensor2::from_vec(1, 1, vec![0.7]).unwrap();
        let mut twice = store_with("p", &[1.0]);
        twice.accumulate("p", &g, 1.0).unwrap();
        twice.sgd_step(0.05).unwrap();
        twice.accumulate("p", &g, 1.0).unwrap();
        twice.sgd_step(0.05).unwrap();

        let mut once = store_with("p", &[1.0]);
        once.accumulate("p", &g, 1.0).unwrap();
        once.sgd_step(0.1).unwrap();

        let a = twice.value("p").get(0, 0);
        let b = once.value("p").get(0, 0);
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut s = store_with("w", &[1.0]);
        s.accumulate("w", &Tensor2::from_vec(1, 1, vec![f64::NAN]).unwrap(), 1.0)
            .unwrap();
        let err = s.sgd_step(0.1).unwrap_err();
        assert!(err.to_string().contains("\"w\""), "{err}");
    }

    #[test]
    fn checkpoint_roundtrip_is_identity() {
        let mut s = ParamStore::new();
        s.insert("b", Tensor2::from_vec(1, 3, vec![0.25, -1.5, 3.0]).unwrap());
        s.insert(
            "a.w",
            Tensor2::from_vec(2, 2, vec![1.0, f64::MIN_POSITIVE, -0.0, 1e300]).unwrap(),
        );
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        let loaded = ParamStore::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.value("a.w"), s.value("a.w"));
        assert_eq!(loaded.value("b"), s.value("b"));

        // identical content serializes to identical bytes
        let mut again = Vec::new();
        loaded.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let err = ParamStore::read_from(&mut &b"NOPE\x01\x00\x00\x00"[..]).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}
