//! Named parameter storage, seeded initialization, and the flat binary
//! parameter container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DPAFPRMS"
//! version  u32      CONTAINER_VERSION
//! count    u32      number of entries
//! entry*   name_len u32 | name (UTF-8) | dtype u8 (1 = f32, 2 = f64)
//!          | rank u32 | dims u64 × rank | values, little-endian
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const CONTAINER_MAGIC: &[u8; 8] = b"DPAFPRMS";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters addressed by hierarchical dotted names, each paired with a
/// gradient buffer of the same shape.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), grads: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(config_err!("duplicate parameter name `{name}`"));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.grads.push(Tensor::zeros(value.shape().to_vec()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| Error::Lookup(format!("parameter `{name}`")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    /// Value and gradient buffer of one parameter, borrowed together.
    pub fn value_and_grad(&mut self, id: ParamId) -> (&Tensor<T>, &mut Tensor<T>) {
        (&self.values[id.0], &mut self.grads[id.0])
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn grads(&self) -> &[Tensor<T>] {
        &self.grads
    }

    /// All values read-only and all gradients mutable.
    pub fn split_mut(&mut self) -> (&mut [Tensor<T>], &[Tensor<T>]) {
        (&mut self.values, &self.grads)
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(T::zero()));
    }

    pub fn grads_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    /// Converts every parameter to another precision (gradients reset).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_container(self.names.iter().map(String::as_str).zip(&self.values))
    }

    /// Overwrites every value from decoded container entries, which must
    /// match this store's names and shapes entry for entry.
    pub fn load_entries(&mut self, entries: Vec<NamedTensor<T>>, source: &Path) -> Result<()> {
        if entries.len() != self.values.len() {
            let first_bad = self
                .names
                .iter()
                .zip(&entries)
                .find(|(n, e)| *n != &e.name)
                .map(|(n, _)| n.clone())
                .or_else(|| {
                    if entries.len() > self.names.len() {
                        entries.get(self.names.len()).map(|e| e.name.clone())
                    } else {
                        self.names.get(entries.len()).cloned()
                    }
                })
                .unwrap_or_default();
            return Err(Error::format(
                source,
                format!(
                    "expected {} parameters, found {} (first offending entry `{first_bad}`)",
                    self.values.len(),
                    entries.len()
                ),
            ));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.name != self.names[i] {
                return Err(Error::format(
                    source,
                    format!("entry {i} is `{}`, expected `{}`", e.name, self.names[i]),
                ));
            }
            if e.value.shape() != self.values[i].shape() {
                return Err(Error::format(
                    source,
                    format!(
                        "entry `{}` has shape {:?}, expected {:?}",
                        e.name,
                        e.value.shape(),
                        self.values[i].shape()
                    ),
                ));
            }
        }
        for (slot, e) in self.values.iter_mut().zip(entries) {
            *slot = e.value;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub dtype: DType,
    pub value: Tensor<T>,
}

pub fn encode_container<'a, T: Real>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

/// Little-endian byte cursor with path-tagged errors.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader { bytes, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn error(&self, reason: impl Into<String>) -> Error {
        Error::format(self.path, reason)
    }
}

/// Decodes a container. Values stored in a different precision than `T` are
/// converted; same-precision values round-trip bit-exactly.
pub fn decode_container<T: Real>(bytes: &[u8], path: &Path) -> Result<Vec<NamedTensor<T>>> {
    let mut r = Reader::new(bytes, path);
    let entries = decode_container_from(&mut r)?;
    if !r.is_done() {
        return Err(r.error("trailing bytes after parameter container"));
    }
    Ok(entries)
}

pub(crate) fn decode_container_from<T: Real>(r: &mut Reader<'_>) -> Result<Vec<NamedTensor<T>>> {
    if r.take(8)? != CONTAINER_MAGIC {
        return Err(r.error("bad parameter container magic"));
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(r.error(format!("unsupported container version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.error("parameter name is not UTF-8"))?
            .to_owned();
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| r.error(format!("unknown dtype tag {tag}")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * dtype.size())?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        out.push(NamedTensor { name, dtype, value: Tensor::new(shape, data)? });
    }
    Ok(out)
}

/// Seeded parameter initializer.
///
/// Weights are drawn from `U(-b, b)` with `b = 1/sqrt(fan_in)`; biases are
/// zero. The stream is ChaCha8, so a seed fixes every value across platforms.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform<T: Real>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape.to_vec(), |_| T::lit(self.rng.random_range(-bound..=bound)))
    }

    pub fn fan_in<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.uniform(shape, 1.0 / (fan_in as f64).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::<f32>::new();
        ps.add("a", Tensor::zeros([1])).unwrap();
        assert!(ps.add("a", Tensor::zeros([2])).is_err());
    }

    #[test]
    fn container_roundtrip_bit_exact() {
        let mut ps = ParamStore::<f32>::new();
        let mut init = Init::new(3);
        ps.add("conv.weight", init.fan_in(&[4, 2, 3, 3], 18)).unwrap();
        ps.add("conv.bias", Tensor::full([4], -0.0)).unwrap();
        ps.add("odd", Tensor::new([1], vec![f32::MIN_POSITIVE / 3.0]).unwrap()).unwrap();
        let bytes = ps.to_bytes();
        let entries = decode_container::<f32>(&bytes, Path::new("mem")).unwrap();
        let mut other = ps.clone();
        other.values.iter_mut().for_each(|v| v.fill(1.0));
        other.load_entries(entries, Path::new("mem")).unwrap();
        for (a, b) in ps.values().iter().zip(other.values()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(other.to_bytes(), bytes);
    }

    #[test]
    fn load_names_first_offending_entry() {
        let mut ps = ParamStore::<f64>::new();
        ps.add("a", Tensor::zeros([2])).unwrap();
        ps.add("b", Tensor::zeros([3])).unwrap();
        let mut wrong = ParamStore::<f64>::new();
        wrong.add("a", Tensor::zeros([2])).unwrap();
        wrong.add("b", Tensor::zeros([4])).unwrap();
        let entries = decode_container::<f64>(&wrong.to_bytes(), Path::new("x")).unwrap();
        let err = ps.load_entries(entries, Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");
    }

    #[test]
    fn truncated_container_is_an_error() {
        let mut ps = ParamStore::<f64>::new();
        ps.add("a", Tensor::zeros([2])).unwrap();
        let bytes = ps.to_bytes();
        assert!(decode_container::<f64>(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }
}
