use serde::{Deserialize, Serialize};

use crate::numerics::{standard_normal_from, Rng};

/// Location of one named tensor inside a flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Records tensors as layers are declared; `build` allocates and initializes.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    tensors: Vec<TensorInfo>,
    inits: Vec<Init>,
    len: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        let offset = self.len;
        let info = TensorInfo {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        };
        self.len += info.len();
        self.tensors.push(info);
        self.inits.push(init);
        offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn build(self, rng: &Rng) -> ParamStore {
        let mut values = vec![0.0; self.len];
        let mut g = rng.generator();
        for (info, init) in self.tensors.iter().zip(&self.inits) {
            let slot = &mut values[info.offset..info.offset + info.len()];
            match *init {
                Init::Zeros => {}
                Init::Ones => slot.fill(1.0),
                Init::Normal(std) => {
                    for (s, n) in slot.iter_mut().zip(standard_normal_from(&mut g, info.len())) {
                        *s = std * n;
                    }
                }
            }
        }
        let mut store = ParamStore {
            values,
            tensors: self.tensors,
        };
        store.round_to_f32();
        store
    }
}

/// All trainable parameters of a model in one contiguous buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub values: Vec<f64>,
    pub tensors: Vec<TensorInfo>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.values[t.offset..t.offset + t.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let t = self.tensors.iter().find(|t| t.name == name)?.clone();
        Some(&mut self.values[t.offset..t.offset + t.len()])
    }

    /// Snap every value to the nearest f32 so the in-memory model equals
    /// what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }
}
