use std::collections::BTreeMap;
use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    /// Kaiming-uniform weights for a layer with the given fan-in.
    pub fn add_kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Serializes all parameters plus optional extra tensors and metadata.
    pub fn save(
        &self,
        path: &Path,
        extra: &[(String, Tensor)],
        metadata: HashMap<String, String>,
    ) -> Result<()> {
        let mut entries: Vec<(String, &Tensor)> =
            self.names.iter().cloned().zip(self.values.iter()).collect();
        entries.extend(extra.iter().map(|(n, t)| (n.clone(), t)));
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = entries
            .into_iter()
            .map(|(n, t)| (n, t.data().iter().flat_map(|v| v.to_le_bytes()).collect(), t.shape().to_vec()))
            .collect();
        let views = bytes
            .iter()
            .map(|(n, b, s)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Model(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = if metadata.is_empty() { None } else { Some(metadata) };
        let bytes = safetensors::serialize(views, &meta).map_err(|e| Error::Model(e.to_string()))?;
        std::fs::write(path, canonical_header(bytes)?).map_err(|e| Error::io(path, e))
    }

    /// Metadata stored alongside the tensors of a saved file.
    pub fn read_metadata(path: &Path) -> Result<HashMap<String, String>> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| Error::Model(e.to_string()))?;
        Ok(header.metadata().clone().unwrap_or_default())
    }

    /// Loads values for every registered parameter from a file. Shapes must
    /// match; tensors in the file that are not registered are returned so the
    /// caller can pick up optimizer state.
    pub fn load(&mut self, path: &Path) -> Result<(BTreeMap<String, Tensor>, HashMap<String, String>)> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| Error::Model(e.to_string()))?;
        let metadata = header.metadata().clone().unwrap_or_default();
        let st = SafeTensors::deserialize(&buf).map_err(|e| Error::Model(e.to_string()))?;
        let mut rest = BTreeMap::new();
        let mut seen = 0;
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Model(format!("tensor {name} is not f32")));
            }
            let data: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(view.shape().to_vec(), data);
            match self.id(&name) {
                Some(id) => {
                    if self.values[id.0].shape() != t.shape() {
                        return Err(Error::Model(format!(
                            "tensor {name} has shape {:?}, expected {:?}",
                            t.shape(),
                            self.values[id.0].shape()
                        )));
                    }
                    self.values[id.0] = t;
                    seen += 1;
                }
                None => {
                    rest.insert(name, t);
                }
            }
        }
        if seen != self.values.len() {
            let missing: Vec<&str> = self
                .names
                .iter()
                .filter(|n| !st.names().iter().any(|m| m == n))
                .map(String::as_str)
                .take(3)
                .collect();
            return Err(Error::Model(format!("model file is missing parameters, e.g. {missing:?}")));
        }
        Ok((rest, metadata))
    }
}

/// Rewrites the JSON header with sorted keys. The metadata map is a
/// `HashMap`, so without this two saves of the same weights differ in bytes.
fn canonical_header(bytes: Vec<u8>) -> Result<Vec<u8>> {
    let bad = || Error::Model("malformed safetensors header".into());
    let n = u64::from_le_bytes(bytes.get(..8).ok_or_else(bad)?.try_into().map_err(|_| bad())?) as usize;
    let header = bytes.get(8..8 + n).ok_or_else(bad)?;
    let value: serde_json::Value = serde_json::from_slice(header).map_err(|_| bad())?;
    let mut text = serde_json::to_string(&value).map_err(|_| bad())?.into_bytes();
    while text.len() % 8 != 0 {
        text.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}
