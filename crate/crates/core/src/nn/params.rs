use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Location of one named tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRange {
    pub offset: usize,
    pub len: usize,
}

impl ParamRange {
    #[inline]
    pub fn of<'a>(&self, flat: &'a [f32]) -> &'a [f32] {
        &flat[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn of_mut<'a>(&self, flat: &'a mut [f32]) -> &'a mut [f32] {
        &mut flat[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: ParamRange,
}

/// Flat parameter store with named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    specs: Vec<TensorSpec>,
    data: Vec<f32>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamRange {
        let len = shape.iter().product();
        let range = ParamRange {
            offset: self.data.len(),
            len,
        };
        self.specs.push(TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            range,
        });
        self.data.resize(self.data.len() + len, 0.0);
        range
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.range.of(&self.data))
    }

    /// Fill a range with `N(0, std^2)` samples.
    pub fn init_normal(&mut self, range: ParamRange, std: f32, rng: &mut impl Rng) {
        let normal = Normal::new(0.0f32, std).expect("finite std");
        for v in range.of_mut(&mut self.data) {
            *v = normal.sample(rng);
        }
    }

    /// Replace all values; lengths must agree.
    pub fn load_flat(&mut self, values: &[f32]) -> bool {
        if values.len() != self.data.len() {
            return false;
        }
        self.data.copy_from_slice(values);
        true
    }

    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.specs == other.specs
    }
}
