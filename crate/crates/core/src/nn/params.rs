use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// How a freshly registered parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `gain * sqrt(1 / fan_in)`.
    FanIn { gain: f32 },
    Constant(f32),
}

impl Init {
    pub const HE: Init = Init::FanIn { gain: std::f32::consts::SQRT_2 };
    pub const ZEROS: Init = Init::Constant(0.0);
    pub const ONES: Init = Init::Constant(1.0);
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Learnable parameters and non-learnable buffers of one network.
///
/// A store built with [`ParamStore::shape_only`] records shapes without
/// allocating, which is enough to count parameters of full-size models.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Param>,
    rng: ChaCha8Rng,
    shape_only: bool,
    prefix: Vec<String>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            shape_only: false,
            prefix: Vec::new(),
        }
    }

    pub fn shape_only() -> Self {
        ParamStore { shape_only: true, ..ParamStore::new(0) }
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    /// Runs `f` with `name` appended to the naming scope.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    /// `fan_in` is only used by [`Init::FanIn`].
    pub fn add(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let value = if self.shape_only {
            Vec::new()
        } else {
            match init {
                Init::Constant(c) => vec![c; n],
                Init::FanIn { gain } => {
                    let std = gain / (fan_in.max(1) as f32).sqrt();
                    let dist = Normal::new(0.0f32, std).expect("finite std");
                    (0..n).map(|_| dist.sample(&mut self.rng)).collect()
                }
            }
        };
        self.params.push(Param { name: self.full_name(name), shape: shape.to_vec(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: &str, shape: &[usize], fill: f32) -> BufferId {
        let n: usize = shape.iter().product();
        let value = if self.shape_only { Vec::new() } else { vec![fill; n] };
        self.buffers.push(Param { name: self.full_name(name), shape: shape.to_vec(), value });
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &[f32] {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut [f32] {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Param] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Param] {
        &mut self.buffers
    }

    /// Number of learnable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    /// Number of learnable scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name == prefix || p.name.starts_with(&format!("{prefix}.")))
            .map(Param::numel)
            .sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }
}
