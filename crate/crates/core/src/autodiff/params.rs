//! Named parameter blocks, the AdamW update rule, and the versioned
//! checkpoint container.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::autodiff::tape::{Tape, Var};
use crate::{Error, Result};

/// Learning-rate group of a parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Color/appearance networks.
    Texture,
    /// SDF encoder and geometry MLP.
    Geometry,
    /// Forward/backward deformation fields and voxel latents.
    Deformation,
    /// Surface sharpness (β).
    Sharpness,
    /// Gaussian primitive attributes.
    Splat,
}

#[derive(Debug, Clone)]
pub struct ParamBlock {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    /// Whether decoupled weight decay applies (weight matrices only).
    pub decay: bool,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// All trainable parameters, keyed by block name. Insertion order is stable,
/// which keeps optimizer traversal and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    blocks: IndexMap<String, ParamBlock>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        data: Vec<f64>,
        shape: Vec<usize>,
        group: ParamGroup,
        decay: bool,
    ) {
        let name = name.into();
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "shape/data mismatch for block {name}"
        );
        self.blocks.insert(
            name,
            ParamBlock {
                data,
                shape,
                group,
                decay,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.blocks.contains_key(name)
    }

    pub fn block(&self, name: &str) -> &ParamBlock {
        self.blocks
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter block {name}"))
    }

    pub fn data(&self, name: &str) -> &[f64] {
        &self.block(name).data
    }

    pub fn data_mut(&mut self, name: &str) -> &mut [f64] {
        &mut self
            .blocks
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter block {name}"))
            .data
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamBlock)> {
        self.blocks.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total_len(&self) -> usize {
        self.blocks.values().map(|b| b.data.len()).sum()
    }

    /// Copy every block under `src_prefix.` to `dst_prefix.` (field cloning
    /// for the refined forward field).
    pub fn copy_prefix(&mut self, src_prefix: &str, dst_prefix: &str) {
        let src: Vec<(String, ParamBlock)> = self
            .blocks
            .iter()
            .filter(|(k, _)| k.starts_with(src_prefix) && k[src_prefix.len()..].starts_with('.'))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for (k, v) in src {
            let dst = format!("{dst_prefix}{}", &k[src_prefix.len()..]);
            self.blocks.insert(dst, v);
        }
    }

    /// Remove every block under `prefix.`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.blocks
            .retain(|k, _| !(k.starts_with(prefix) && k[prefix.len()..].starts_with('.')));
    }
}

/// Per-tape record of which parameter blocks were bound to which nodes.
/// Binding the same block twice returns the original node.
#[derive(Default)]
pub struct BoundParams {
    entries: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Var {
        if let Some((_, v)) = self.entries.iter().find(|(n, _)| n == name) {
            return *v;
        }
        let var = tape.leaf(store.data(name));
        self.entries.push((name.to_string(), var));
        var
    }

    /// After a backward pass, add each bound block's gradient into `grads`.
    pub fn accumulate_grads(&self, tape: &Tape, grads: &mut GradMap) {
        for (name, var) in &self.entries {
            let g = tape.grad(*var);
            match grads.map.get_mut(name) {
                Some(acc) => {
                    for (a, &gi) in acc.iter_mut().zip(g) {
                        *a += gi;
                    }
                }
                None => {
                    grads.map.insert(name.clone(), g.to_vec());
                }
            }
        }
    }
}

/// Gradients keyed by parameter block name.
#[derive(Debug, Clone, Default)]
pub struct GradMap {
    pub map: IndexMap<String, Vec<f64>>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(|v| v.as_slice())
    }

    /// Merge another map into this one by summation, in the other's order.
    pub fn merge(&mut self, other: &GradMap) {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => {
                    for (a, &gi) in acc.iter_mut().zip(g) {
                        *a += gi;
                    }
                }
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.map.values_mut() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Adaptive per-parameter updates with decoupled weight decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            state: IndexMap::new(),
        }
    }

    /// One optimizer step. `lr_of` maps a block's group to its current
    /// learning rate; a rate of 0 freezes that group.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradMap,
        lr_of: impl Fn(ParamGroup) -> f64,
    ) {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        for (name, block) in store.blocks.iter_mut() {
            let lr = lr_of(block.group);
            if lr == 0.0 {
                continue;
            }
            let Some(g) = grads.map.get(name) else {
                continue;
            };
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; block.data.len()], vec![0.0; block.data.len()]));
            let decay = if block.decay { self.weight_decay } else { 0.0 };
            for i in 0..block.data.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                block.data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * block.data[i]);
            }
        }
    }
}

// ── checkpoint container ─────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"DEFSURF1";
const CKPT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct CkptHeader {
    version: u32,
    blocks: Vec<CkptBlock>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CkptBlock {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
    decay: bool,
    len: usize,
}

impl ParamStore {
    /// Write a self-describing checkpoint: magic, versioned JSON header with
    /// per-block shape metadata, then little-endian f64 payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CkptHeader {
            version: CKPT_VERSION,
            blocks: self
                .blocks
                .iter()
                .map(|(name, b)| CkptBlock {
                    name: name.clone(),
                    shape: b.shape.clone(),
                    group: b.group,
                    decay: b.decay,
                    len: b.data.len(),
                })
                .collect(),
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(&mut file);
        let io_err = |e| Error::io(path, e);
        w.write_all(CKPT_MAGIC).map_err(io_err)?;
        w.write_all(&(header_json.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&header_json).map_err(io_err)?;
        for b in self.blocks.values() {
            for &v in &b.data {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |detail: &str| Error::Format {
            what: "checkpoint",
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + hlen {
            return Err(bad("truncated header"));
        }
        let header: CkptHeader = serde_json::from_slice(&bytes[12..12 + hlen])
            .map_err(|e| bad(&format!("header: {e}")))?;
        if header.version != CKPT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let mut store = ParamStore::new();
        let mut cursor = std::io::Cursor::new(&bytes[12 + hlen..]);
        for blk in header.blocks {
            let mut data = vec![0.0f64; blk.len];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                cursor
                    .read_exact(&mut buf)
                    .map_err(|_| bad(&format!("truncated payload in block {}", blk.name)))?;
                *v = f64::from_le_bytes(buf);
            }
            store.insert(blk.name, data, blk.shape, blk.group, blk.decay);
        }
        Ok(store)
    }
}
