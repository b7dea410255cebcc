//! Frozen patch encoder with per-block taps and the task-gated feature choice.
//!
//! Each block first mixes patches spatially, `u = ((1-β)·I + β·J/N)·h` with `J`
//! the all-ones matrix, then applies a residual channel map `u + gelu(u·W)`.
//! The mixing strength `β` grows with depth, so shallow blocks keep per-patch
//! detail (concrete-grained) while deep blocks carry image-wide summaries
//! (abstract-grained).

use rand::Rng;

use crate::adapter::Linear;
use crate::error::{Error, Result};
use crate::image::ToyImage;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::task::TaskType;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub d_vis: usize,
    /// Spatial mixing strength per block; its length is the depth `L`.
    pub mixing: Vec<f64>,
    /// Scale of the block weights; larger values make the blocks more nonlinear.
    pub gain: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            d_vis: 32,
            mixing: vec![0.0, 0.0, 0.95, 0.95],
            gain: 0.5,
        }
    }
}

impl EncoderConfig {
    pub fn depth(&self) -> usize {
        self.mixing.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.d_vis == 0 || self.mixing.is_empty() {
            return Err(Error::Config("encoder needs positive patch, width and depth".into()));
        }
        if self.mixing.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Config("mixing strengths must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub config: EncoderConfig,
    pub patch_embed: ParamId,
    pub blocks: Vec<ParamId>,
}

impl EncoderStack {
    /// Parameters live under `vision.*` in the frozen `VisionEncoder` group.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let p2 = config.patch_size * config.patch_size;
        let d = config.d_vis;
        let patch_embed = store.add(
            "vision.patch_embed",
            ParamGroup::VisionEncoder,
            Tensor::randn([p2, d], 2.0 / (p2 as f64).sqrt(), rng),
        );
        let blocks = (0..config.depth())
            .map(|i| {
                store.add(
                    format!("vision.block{i}"),
                    ParamGroup::VisionEncoder,
                    Tensor::randn([d, d], config.gain / (d as f64).sqrt(), rng),
                )
            })
            .collect();
        Ok(Self {
            config,
            patch_embed,
            blocks,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    fn mixing_matrix(n: usize, beta: f64) -> Tensor {
        let mut m = vec![beta / n as f64; n * n];
        for i in 0..n {
            m[i * n + i] += 1.0 - beta;
        }
        Tensor::new([n, n], m).expect("mixing matrix")
    }

    /// Hidden state after every block, `f_1..f_L`, each `num_patches × d_vis`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, image: &ToyImage) -> Result<Vec<Var>> {
        let patches = image.patches(self.config.patch_size)?;
        let n = patches.len();
        let flat: Vec<f64> = patches.into_iter().flatten().collect();
        let x = g.constant(Tensor::new([n, self.config.patch_size.pow(2)], flat)?);
        let pe = g.param(store, self.patch_embed);
        let mut h = g.matmul(x, pe)?;
        let mut states = Vec::with_capacity(self.depth());
        for (&w, &beta) in self.blocks.iter().zip(&self.config.mixing) {
            let mix = g.constant(Self::mixing_matrix(n, beta));
            let u = g.matmul(mix, h)?;
            let w = g.param(store, w);
            let z = g.matmul(u, w)?;
            let a = g.gelu(z);
            h = g.add(u, a)?;
            states.push(h);
        }
        Ok(states)
    }
}

/// Which encoder block feeds each task; blocks are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GranularitySelection {
    concrete_tap: usize,
    abstract_tap: usize,
    split: usize,
}

impl GranularitySelection {
    /// Requires `1 <= concrete < split <= abstract <= depth`.
    pub fn new(concrete_tap: usize, abstract_tap: usize, split: usize, depth: usize) -> Result<Self> {
        if !(1 <= concrete_tap && concrete_tap < split && split <= abstract_tap && abstract_tap <= depth) {
            return Err(Error::Config(format!(
                "taps must satisfy 1 <= concrete({concrete_tap}) < split({split}) <= abstract({abstract_tap}) <= depth({depth})"
            )));
        }
        Ok(Self {
            concrete_tap,
            abstract_tap,
            split,
        })
    }

    pub fn concrete_tap(&self) -> usize {
        self.concrete_tap
    }

    pub fn abstract_tap(&self) -> usize {
        self.abstract_tap
    }

    pub fn split(&self) -> usize {
        self.split
    }

    /// Shallow block for generation, deep block for comprehension.
    pub fn tap_for(&self, task: TaskType) -> usize {
        match task {
            TaskType::Generation => self.concrete_tap,
            TaskType::Comprehension => self.abstract_tap,
        }
    }
}

/// Picks the single state a task consumes. Pure selection.
pub fn select_features(taps: &GranularitySelection, states: &[Var], task: TaskType) -> Result<Var> {
    let tap = taps.tap_for(task);
    states
        .get(tap.wrapping_sub(1))
        .copied()
        .ok_or(Error::OutOfRange {
            what: "encoder tap",
            index: tap,
            len: states.len(),
        })
}

/// Two-layer perceptron from encoder width to model width.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentAdapter {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl AlignmentAdapter {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_vis: usize,
        d_hidden: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::init(store, &format!("{name}.fc1"), group, d_vis, d_hidden, true, 1.0, rng),
            fc2: Linear::init(store, &format!("{name}.fc2"), group, d_hidden, d_model, true, 1.0, rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.fc1.d_in
    }

    pub fn d_out(&self) -> usize {
        self.fc2.d_out
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.fc1, &self.fc2]
            .iter()
            .flat_map(|l| std::iter::once(l.weight).chain(l.bias))
            .collect()
    }

    /// `gelu(f·W1 + b1)·W2 + b2`.
    pub fn align(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let width = g.value(features).cols();
        if width != self.d_in() {
            return Err(Error::Shape {
                op: "align",
                lhs: g.value(features).shape().to_vec(),
                rhs: vec![self.d_in(), self.d_out()],
            });
        }
        let h = self.fc1.forward(g, store, features)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}
