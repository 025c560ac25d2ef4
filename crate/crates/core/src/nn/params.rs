//! Named parameter tensors with per-group freezing and the `RADW` checkpoint
//! format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{RadError, Result};
use crate::nn::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RADW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Coarse parameter groups used for freezing and gradient checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    InputPatch,
    ContextPatch,
    InputPos,
    ContextPos,
    InputBlocks,
    ContextBlocks,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::InputPatch,
        ParamGroup::ContextPatch,
        ParamGroup::InputPos,
        ParamGroup::ContextPos,
        ParamGroup::InputBlocks,
        ParamGroup::ContextBlocks,
        ParamGroup::Decoder,
    ];

    pub fn of(name: &str) -> Option<ParamGroup> {
        let g = if name.starts_with("input.patch") {
            ParamGroup::InputPatch
        } else if name.starts_with("context.patch") {
            ParamGroup::ContextPatch
        } else if name.starts_with("input.pos") {
            ParamGroup::InputPos
        } else if name.starts_with("context.pos") {
            ParamGroup::ContextPos
        } else if name.starts_with("input.block") {
            ParamGroup::InputBlocks
        } else if name.starts_with("context.block") {
            ParamGroup::ContextBlocks
        } else if name.starts_with("decoder") {
            ParamGroup::Decoder
        } else {
            return None;
        };
        Some(g)
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::InputPatch => "input.patch",
            ParamGroup::ContextPatch => "context.patch",
            ParamGroup::InputPos => "input.pos",
            ParamGroup::ContextPos => "context.pos",
            ParamGroup::InputBlocks => "input.blocks",
            ParamGroup::ContextBlocks => "context.blocks",
            ParamGroup::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].value = value;
            return i;
        }
        let i = self.entries.len();
        self.index.insert(name.clone(), i);
        self.entries.push(ParamEntry {
            name,
            value,
            frozen: false,
        });
        i
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| RadError::input(format!("no parameter named `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entries[self.id(name)?].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.id(name)?;
        Ok(&mut self.entries[i].value)
    }

    pub fn entry(&self, id: usize) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn is_frozen(&self, id: usize) -> bool {
        self.entries[id].frozen
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        for e in &mut self.entries {
            if ParamGroup::of(&e.name) == Some(group) {
                e.frozen = frozen;
            }
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.entries.iter_mut().for_each(|e| e.frozen = false);
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| ParamGroup::of(&self.entries[i].name) == Some(group))
            .collect()
    }

    pub fn group_frozen(&self, group: ParamGroup) -> bool {
        let ids = self.group_ids(group);
        !ids.is_empty() && ids.iter().all(|&i| self.entries[i].frozen)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Rounds every value to the nearest f32, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            e.value.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&2u32.to_le_bytes())?;
            w.write_all(&(e.value.rows as u32).to_le_bytes())?;
            w.write_all(&(e.value.cols as u32).to_le_bytes())?;
            for &x in &e.value.data {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        let mut bitmap = vec![0u8; self.entries.len().div_ceil(8)];
        for (i, e) in self.entries.iter().enumerate() {
            if e.frozen {
                bitmap[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&bitmap)
    }

    pub fn read_from(r: &mut impl Read, origin: &str) -> Result<Self> {
        let bad = |message: String| RadError::Parse {
            location: origin.to_string(),
            message,
        };
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, origin)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a RADW checkpoint".into()));
        }
        let version = read_u32(r, origin)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(r, origin)? as usize;
        let mut store = ParamStore::new();
        for i in 0..count {
            let len = read_u32(r, origin)? as usize;
            if len > 4096 {
                return Err(bad(format!("tensor {i}: name length {len} too large")));
            }
            let mut name = vec![0u8; len];
            read_exact(r, &mut name, origin)?;
            let name = String::from_utf8(name).map_err(|_| bad(format!("tensor {i}: name not UTF-8")))?;
            let rank = read_u32(r, origin)? as usize;
            let dims: Vec<usize> = (0..rank)
                .map(|_| read_u32(r, origin).map(|d| d as usize))
                .collect::<Result<_>>()?;
            let (rows, cols) = match dims.as_slice() {
                [n] => (1, *n),
                [a, b] => (*a, *b),
                _ => return Err(bad(format!("tensor `{name}`: unsupported rank {rank}"))),
            };
            let mut bytes = vec![0u8; rows * cols * 4];
            read_exact(r, &mut bytes, origin)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if store.index.contains_key(&name) {
                return Err(bad(format!("duplicate tensor `{name}`")));
            }
            store.insert(name, Tensor::from_vec(rows, cols, data));
        }
        let mut bitmap = vec![0u8; count.div_ceil(8)];
        read_exact(r, &mut bitmap, origin)?;
        for (i, e) in store.entries.iter_mut().enumerate() {
            e.frozen = bitmap[i / 8] & (1 << (i % 8)) != 0;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| RadError::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| RadError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| RadError::io(path, e))?;
        Self::read_from(&mut BufReader::new(f), &path.display().to_string())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], origin: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| RadError::Parse {
        location: origin.to_string(),
        message: format!("truncated checkpoint: {e}"),
    })
}

fn read_u32(r: &mut impl Read, origin: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, origin)?;
    Ok(u32::from_le_bytes(b))
}

/// Per-parameter gradients aligned with a [`ParamStore`]; `None` means the
/// parameter did not influence the loss or is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    /// Analytic gradient of one scalar coordinate; zero where absent.
    pub fn coordinate(&self, id: usize, flat: usize) -> f64 {
        self.grads[id].as_ref().map_or(0.0, |g| g.data[flat])
    }

    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            let Some(b) = b else { continue };
            match a {
                Some(a) => {
                    for (x, y) in a.data.iter_mut().zip(&b.data) {
                        *x += scale * y;
                    }
                }
                None => {
                    let mut t = b.clone();
                    t.scale(scale);
                    *a = Some(t);
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}
