//! Named parameter tensors with parallel gradient slots, plus the `MVDP`
//! checkpoint format.

use std::fs;
use std::path::Path;

use crate::error::{MvdError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVDP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A rank-1 or rank-2 tensor of f64 values with a gradient slot of the same
/// shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Stable handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Ordered collection of named tensors. Insertion order is part of the
/// store's identity: serialization and updates walk tensors in order, which
/// keeps training bit-reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) -> TensorId {
        assert!(
            self.by_name(name).is_none(),
            "tensor {name:?} already exists"
        );
        let numel: usize = dims.iter().product();
        assert_eq!(numel, data.len(), "shape/data mismatch for {name:?}");
        let grad = vec![0.0; numel];
        self.tensors.push(Tensor {
            name: name.to_string(),
            dims,
            data,
            grad,
        });
        TensorId(self.tensors.len() - 1)
    }

    pub fn by_name(&self, name: &str) -> Option<TensorId> {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .map(TensorId)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }

    /// One SGD step over every tensor: `p <- p - lr * g`, then gradients are
    /// zeroed. Rejects non-finite gradients before touching any parameter.
    pub fn sgd_update(&mut self, learning_rate: f64) -> Result<()> {
        self.sgd_update_filtered(learning_rate, |_| true)
    }

    /// SGD step restricted to tensors whose name passes `update`. Skipped
    /// tensors keep their parameters and gradients untouched, so a frozen
    /// model is bit-identical before and after.
    pub fn sgd_update_filtered(
        &mut self,
        learning_rate: f64,
        update: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for t in &self.tensors {
            if !update(&t.name) {
                continue;
            }
            if let Some(i) = t.grad.iter().position(|g| !g.is_finite()) {
                return Err(MvdError::NonFinite {
                    what: format!("gradient of {}[{i}]", t.name),
                });
            }
        }
        for t in &mut self.tensors {
            if !update(&t.name) {
                continue;
            }
            for (p, g) in t.data.iter_mut().zip(t.grad.iter()) {
                *p -= learning_rate * g;
            }
            t.grad.fill(0.0);
        }
        Ok(())
    }

    /// Clones the tensors whose name starts with `prefix` into a new store.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for t in &self.tensors {
            if t.name.starts_with(prefix) {
                out.add(&t.name, t.dims.clone(), t.data.clone());
            }
        }
        out
    }

    /// Serializes parameters (not gradients) to the `MVDP` byte format:
    /// magic, version u32, then per tensor: name length u16, name bytes,
    /// rank u8, dims u32..., values f64, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(t.dims.len() as u8);
            for &d in &t.dims {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<ParamStore> {
        let mut r = Reader {
            path,
            bytes,
            pos: 0,
        };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(MvdError::BadMagic {
                path: path.to_path_buf(),
                expected: "MVDP".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(MvdError::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let mut store = ParamStore::new();
        while !r.at_end() {
            let name_len = r.u16()? as usize;
            let name =
                String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| MvdError::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    msg: format!("tensor name is not utf-8: {e}"),
                })?;
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let numel: usize = dims.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            if store.by_name(&name).is_some() {
                return Err(MvdError::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    msg: format!("checkpoint repeats tensor {name:?}"),
                });
            }
            store.add(&name, dims, data);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| MvdError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| MvdError::io(path, e))?;
        ParamStore::from_bytes(path, &bytes)
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MvdError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                expected: n as u64,
                actual: (self.bytes.len() - self.pos) as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

// ---------------------------------------------------------------------------
// Forward math shared by the value path and the autodiff tape. Keeping a
// single implementation makes the two paths bit-identical.
// ---------------------------------------------------------------------------

/// Mean of the embedding rows selected by `tokens`.
pub(crate) fn embed_mean(table: &Tensor, tokens: &[u32]) -> Vec<f64> {
    debug_assert_eq!(table.dims.len(), 2);
    debug_assert!(!tokens.is_empty());
    let d = table.dims[1];
    let mut out = vec![0.0; d];
    for &t in tokens {
        let row = &table.data[t as usize * d..(t as usize + 1) * d];
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = 1.0 / tokens.len() as f64;
    for o in &mut out {
        *o *= inv;
    }
    out
}

/// `y_j = b_j + sum_i x_i * w[i][j]` with `w` stored row-major `[d_in, d_out]`.
pub(crate) fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let d_in = w.dims[0];
    let d_out = w.dims[1];
    debug_assert_eq!(x.len(), d_in);
    debug_assert_eq!(b.data.len(), d_out);
    let mut out = b.data.clone();
    for (i, &xi) in x.iter().enumerate() {
        let row = &w.data[i * d_out..(i + 1) * d_out];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

pub(crate) fn tanh_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Interaction features `[a; b; a*b; |a-b|]`.
pub(crate) fn pair_features(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    let mut out = Vec::with_capacity(4 * a.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out.extend(a.iter().zip(b).map(|(x, y)| x * y));
    out.extend(a.iter().zip(b).map(|(x, y)| (x - y).abs()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.25, -0.125]);
        s.add("a.b", vec![3], vec![0.5, 0.25, -1.0]);
        s
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let store = sample_store();
        let bytes = store.to_bytes();
        let back = ParamStore::from_bytes(Path::new("test.mvdp"), &bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let bytes = sample_store().to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        match ParamStore::from_bytes(Path::new("t.mvdp"), cut) {
            Err(MvdError::Truncated {
                expected, actual, ..
            }) => {
                assert!(expected > actual);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let mut bytes = sample_store().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            ParamStore::from_bytes(Path::new("t"), &bytes),
            Err(MvdError::BadMagic { .. })
        ));

        let mut bytes = sample_store().to_bytes();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            ParamStore::from_bytes(Path::new("t"), &bytes),
            Err(MvdError::UnsupportedVersion { found: 99, .. })
        ));
    }

    #[test]
    fn sgd_applies_and_zeroes() {
        let mut s = ParamStore::new();
        let id = s.add("p", vec![1], vec![1.0]);
        s.tensor_mut(id).grad[0] = 2.0;
        s.sgd_update(0.1).unwrap();
        assert_eq!(s.tensor(id).data[0], 0.8);
        assert_eq!(s.tensor(id).grad[0], 0.0);

        s.tensor_mut(id).grad[0] = 3.0;
        s.sgd_update(0.0).unwrap();
        assert_eq!(s.tensor(id).data[0], 0.8);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut s = ParamStore::new();
        let id = s.add("p", vec![1], vec![1.0]);
        s.tensor_mut(id).grad[0] = f64::NAN;
        assert!(matches!(s.sgd_update(0.1), Err(MvdError::NonFinite { .. })));
    }

    #[test]
    fn filtered_update_leaves_frozen_tensors_untouched() {
        let mut s = ParamStore::new();
        let a = s.add("student.p", vec![1], vec![1.0]);
        let b = s.add("teacher.p", vec![1], vec![1.0]);
        s.tensor_mut(a).grad[0] = 1.0;
        s.tensor_mut(b).grad[0] = 1.0;
        s.sgd_update_filtered(0.5, |n| !n.starts_with("teacher."))
            .unwrap();
        assert_eq!(s.tensor(a).data[0], 0.5);
        assert_eq!(s.tensor(b).data[0], 1.0);
        assert_eq!(s.tensor(b).grad[0], 1.0);
    }
}
