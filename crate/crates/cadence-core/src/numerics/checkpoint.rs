//! Plain-text checkpoint container: named tensors plus string metadata.
//!
//! Layout: a one-line magic header, `meta key value` lines, then per tensor
//! a `tensor name ndim dims...` line followed by one line of values. Floats
//! are printed with Rust's shortest round-trip formatting, so
//! save -> load -> save is byte-identical.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::tensor::Tensor;
use super::NumericsError;

pub const CHECKPOINT_MAGIC: &str = "#cadence-checkpoint v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    meta: Vec<(String, String)>,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, NumericsError> {
        self.meta(key)
            .ok_or_else(|| NumericsError::Checkpoint(format!("missing meta key '{}'", key)))?
            .parse()
            .map_err(|_| NumericsError::Checkpoint(format!("unparseable meta key '{}'", key)))
    }

    pub fn add_tensor(&mut self, name: &str, tensor: Tensor) {
        self.tensors.push((name.to_string(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take_tensor(&mut self, name: &str) -> Result<Tensor, NumericsError> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| NumericsError::Checkpoint(format!("missing tensor '{}'", name)))?;
        Ok(self.tensors.remove(idx).1)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        let file = fs::File::create(path)
            .map_err(|e| NumericsError::Checkpoint(format!("create {}: {}", path.display(), e)))?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| NumericsError::Checkpoint(format!("write {}: {}", path.display(), e));
        writeln!(w, "{}", CHECKPOINT_MAGIC).map_err(io)?;
        for (k, v) in &self.meta {
            writeln!(w, "meta {} {}", k, v).map_err(io)?;
        }
        for (name, t) in &self.tensors {
            if !t.is_finite() {
                return Err(NumericsError::Checkpoint(format!("tensor '{}' has non-finite values", name)));
            }
            write!(w, "tensor {} {}", name, t.shape().len()).map_err(io)?;
            for d in t.shape() {
                write!(w, " {}", d).map_err(io)?;
            }
            writeln!(w).map_err(io)?;
            let mut first = true;
            for v in t.data() {
                if first {
                    first = false;
                } else {
                    write!(w, " ").map_err(io)?;
                }
                write!(w, "{:?}", v).map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, NumericsError> {
        let text = fs::read_to_string(path)
            .map_err(|e| NumericsError::Checkpoint(format!("read {}: {}", path.display(), e)))?;
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, msg: String| NumericsError::Checkpoint(format!("{}:{}: {}", path.display(), line + 1, msg));

        let (_, magic) = lines
            .next()
            .ok_or_else(|| bad(0, "empty checkpoint file".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(bad(0, format!("bad magic header '{}'", magic)));
        }

        let mut ckpt = Checkpoint::new();
        while let Some((lineno, line)) = lines.next() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, ' ');
            match parts.next() {
                Some("meta") => {
                    let rest = parts.next().ok_or_else(|| bad(lineno, "meta without key".into()))?;
                    let (key, value) = rest
                        .split_once(' ')
                        .ok_or_else(|| bad(lineno, "meta without value".into()))?;
                    ckpt.meta.push((key.to_string(), value.to_string()));
                }
                Some("tensor") => {
                    let rest = parts.next().ok_or_else(|| bad(lineno, "tensor without name".into()))?;
                    let mut fields = rest.split(' ');
                    let name = fields.next().ok_or_else(|| bad(lineno, "tensor without name".into()))?;
                    let ndim: usize = fields
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad(lineno, "bad tensor rank".into()))?;
                    let mut shape = Vec::with_capacity(ndim);
                    for _ in 0..ndim {
                        let d: usize = fields
                            .next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| bad(lineno, "bad tensor dimension".into()))?;
                        shape.push(d);
                    }
                    let (dlineno, data_line) = lines
                        .next()
                        .ok_or_else(|| bad(lineno, format!("tensor '{}' missing data line", name)))?;
                    let mut data = Vec::with_capacity(shape.iter().product());
                    for tok in data_line.split(' ') {
                        let v: f64 = tok
                            .parse()
                            .map_err(|_| bad(dlineno, format!("bad float '{}'", tok)))?;
                        data.push(v);
                    }
                    let t = Tensor::new(shape, data)
                        .map_err(|e| bad(dlineno, format!("tensor '{}': {}", name, e)))?;
                    ckpt.tensors.push((name.to_string(), t));
                }
                Some(other) => return Err(bad(lineno, format!("unknown record '{}'", other))),
                None => {}
            }
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_byte_identical() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("kind", "test");
        ckpt.set_meta("n_layers", 2);
        ckpt.add_tensor("w", Tensor::randn(&[3, 4], 0.37, &mut rng));
        ckpt.add_tensor("b", Tensor::from_vec(vec![0.1, -1.0 / 3.0, 1e-17]));

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded, ckpt);
        assert_eq!(loaded.meta("n_layers"), Some("2"));
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, "not a checkpoint\n").unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
