//! Flat parameter storage.
//!
//! All learnable tensors live in one contiguous `f64` buffer, addressed by
//! [`ParamId`] handles that layers hold on to. Gradients and optimizer
//! moments mirror the buffer element-for-element, which keeps the optimizer,
//! gradient clipping, finite-difference checking, and checkpoint
//! serialization trivial.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
    pub data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    /// Allocate a zero-initialized tensor. Names must be unique; they become
    /// the keys of the checkpoint blob.
    pub fn alloc(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        self.data.resize(offset + len, 0.0);
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push(Entry {
            name,
            shape: shape.to_vec(),
            offset,
            len,
        });
        ParamId(idx)
    }

    pub fn num_values(&self) -> usize {
        self.data.len()
    }

    pub fn num_tensors(&self) -> usize {
        self.entries.len()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn range(&self, id: ParamId) -> std::ops::Range<usize> {
        let e = &self.entries[id.0];
        e.offset..e.offset + e.len
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        &self.data[self.range(id)]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        let r = self.range(id);
        &mut self.data[r]
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, f64> {
        let e = &self.entries[id.0];
        debug_assert_eq!(e.shape.len(), 1, "{} is not rank 1", e.name);
        ArrayView1::from_shape(e.len, self.slice(id)).unwrap()
    }

    pub fn view2(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let e = &self.entries[id.0];
        debug_assert_eq!(e.shape.len(), 2, "{} is not rank 2", e.name);
        let (r, c) = (e.shape[0], e.shape[1]);
        ArrayView2::from_shape((r, c), self.slice(id)).unwrap()
    }

    /// 2-D view of a tensor of any rank with matching element count
    /// (row-major), e.g. a `[c_out, c_in, k]` conv kernel seen as
    /// `[c_out, c_in*k]`.
    pub fn view_as2(&self, id: ParamId, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        let e = &self.entries[id.0];
        debug_assert_eq!(rows * cols, e.len, "{} cannot view as 2-D", e.name);
        ArrayView2::from_shape((rows, cols), self.slice(id)).unwrap()
    }

    pub fn fill(&mut self, id: ParamId, value: f64) {
        self.slice_mut(id).fill(value);
    }

    pub fn set_from_fn(&mut self, id: ParamId, mut f: impl FnMut(usize) -> f64) {
        for (i, v) in self.slice_mut(id).iter_mut().enumerate() {
            *v = f(i);
        }
    }

    /// Uniform init on (-bound, bound).
    pub fn init_uniform(&mut self, id: ParamId, rng: &mut ChaCha8Rng, bound: f64) {
        for v in self.slice_mut(id) {
            *v = rng.gen_range(-bound..bound);
        }
    }

    pub fn init_normal(&mut self, id: ParamId, rng: &mut ChaCha8Rng, std: f64) {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, std).expect("valid normal");
        for v in self.slice_mut(id) {
            *v = dist.sample(rng);
        }
    }

    /// Parameter counts grouped by the leading dot-separated name component.
    pub fn counts_by_group(&self) -> Vec<(String, usize)> {
        let mut acc: Vec<(String, usize)> = Vec::new();
        for e in &self.entries {
            let group = e.name.split('.').next().unwrap_or("").to_string();
            match acc.iter_mut().find(|(g, _)| *g == group) {
                Some((_, n)) => *n += e.len,
                None => acc.push((group, e.len)),
            }
        }
        acc
    }

    // ---- checkpoint blob ----------------------------------------------

    const MAGIC: &'static [u8; 8] = b"CMPARAM1";

    /// Serialize as named, shape-tagged, little-endian IEEE-754 blocks.
    pub fn save_blob(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::with_capacity(16 + self.data.len() * 8);
        buf.extend_from_slice(Self::MAGIC);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &self.data[e.offset..e.offset + e.len] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Load a blob written by [`save_blob`] into this set. Every stored
    /// tensor must exist here with the same shape, and vice versa.
    pub fn load_blob(&mut self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::data(format!("truncated parameter blob {path:?}")));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != Self::MAGIC {
            return Err(Error::data(format!("{path:?} is not a parameter blob")));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if count != self.entries.len() {
            return Err(Error::data(format!(
                "parameter blob has {count} tensors, model expects {}",
                self.entries.len()
            )));
        }
        let mut seen = vec![false; self.entries.len()];
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| Error::data("non-utf8 parameter name in blob"))?
                .to_string();
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let idx = *self
                .by_name
                .get(&name)
                .ok_or_else(|| Error::data(format!("unexpected tensor {name:?} in blob")))?;
            let entry = self.entries[idx].clone();
            if entry.shape != shape {
                return Err(Error::data(format!(
                    "tensor {name:?} has shape {shape:?}, model expects {:?}",
                    entry.shape
                )));
            }
            let raw = take(&mut pos, entry.len * 8)?;
            for (i, chunk) in raw.chunks_exact(8).enumerate() {
                self.data[entry.offset + i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            seen[idx] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::data("parameter blob is missing tensors"));
        }
        Ok(())
    }
}

/// Gradient buffer mirroring a [`ParamSet`]'s layout.
#[derive(Debug, Clone)]
pub struct GradStore {
    pub data: Vec<f64>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamSet) -> GradStore {
        GradStore {
            data: vec![0.0; params.num_values()],
        }
    }

    pub fn view1_mut(&mut self, params: &ParamSet, id: ParamId) -> ArrayViewMut1<'_, f64> {
        let r = params.range(id);
        ArrayViewMut1::from_shape(r.len(), &mut self.data[r]).unwrap()
    }

    pub fn view2_mut(&mut self, params: &ParamSet, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let shape = params.shape(id);
        debug_assert_eq!(shape.len(), 2);
        let (rows, cols) = (shape[0], shape[1]);
        let r = params.range(id);
        ArrayViewMut2::from_shape((rows, cols), &mut self.data[r]).unwrap()
    }

    pub fn view_as2_mut(
        &mut self,
        params: &ParamSet,
        id: ParamId,
        rows: usize,
        cols: usize,
    ) -> ArrayViewMut2<'_, f64> {
        let r = params.range(id);
        debug_assert_eq!(rows * cols, r.len());
        ArrayViewMut2::from_shape((rows, cols), &mut self.data[r]).unwrap()
    }

    pub fn slice(&self, params: &ParamSet, id: ParamId) -> &[f64] {
        &self.data[params.range(id)]
    }

    pub fn add_assign(&mut self, other: &GradStore) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn alloc_and_views() {
        let mut ps = ParamSet::new();
        let w = ps.alloc("layer.w", &[2, 3]);
        let b = ps.alloc("layer.b", &[3]);
        ps.set_from_fn(w, |i| i as f64);
        ps.fill(b, 0.5);
        assert_eq!(ps.view2(w)[[1, 2]], 5.0);
        assert_eq!(ps.view1(b)[1], 0.5);
        assert_eq!(ps.num_values(), 9);
    }

    #[test]
    fn blob_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let a = ps.alloc("a.w", &[4, 5]);
        let b = ps.alloc("b.v", &[7]);
        ps.init_normal(a, &mut rng, 1.0);
        ps.init_uniform(b, &mut rng, 0.3);
        ps.save_blob(&path).unwrap();

        let mut ps2 = ParamSet::new();
        ps2.alloc("a.w", &[4, 5]);
        ps2.alloc("b.v", &[7]);
        ps2.load_blob(&path).unwrap();
        assert_eq!(ps.data, ps2.data);
    }

    #[test]
    fn blob_shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let mut ps = ParamSet::new();
        ps.alloc("a.w", &[4, 5]);
        ps.save_blob(&path).unwrap();

        let mut ps2 = ParamSet::new();
        ps2.alloc("a.w", &[5, 4]);
        assert!(ps2.load_blob(&path).is_err());
    }

    #[test]
    fn group_counts() {
        let mut ps = ParamSet::new();
        ps.alloc("encoder.l0.w", &[2, 2]);
        ps.alloc("encoder.l1.w", &[2, 2]);
        ps.alloc("decoder.l0.w", &[3]);
        let counts = ps.counts_by_group();
        assert_eq!(counts[0], ("encoder".to_string(), 8));
        assert_eq!(counts[1], ("decoder".to_string(), 3));
    }
}
