//! Low-rank adapters on top of a frozen linear layer.
//!
//! Three variants share one substrate so their costs are directly comparable:
//!
//! * [`lora_forward`]: a single `A·B` bypass scaled by `α/r`.
//! * [`moelora_forward_reference`]: `k` experts evaluated one at a time, each
//!   weighted by its router column. Kept as the baseline and as the oracle for
//!   the merged path.
//! * [`hlora_forward`]: the experts' matrices live pre-concatenated in
//!   `A_merged` (`d_in × rk`) and `B_merged` (`rk × d_out`). Router weights are
//!   replicated `r` times per expert, scaled by `α·k/r`, and applied with a
//!   single element-wise product between the two merged products.
//!
//! Because `(x·A_merged ⊙ Ŵ)·B_merged = Σᵢ wᵢ·s·(x·Aᵢ)·Bᵢ` when `Ŵ` holds `s·wᵢ`
//! in column block `i`, the merged and reference paths agree exactly up to
//! floating-point reassociation.
//!
//! Each forward tallies its adapter-side operations into an [`OpCounter`]. The
//! frozen `x·W0` product is not counted; only the additional work is.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::task::TaskType;
use crate::tensor::{Graph, Tensor, Var};

/// Dense `x·W + b`. Used both as the frozen base of every adapted projection and
/// for the small trainable perceptrons elsewhere; trainability is decided by the
/// parameter group, never by this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// `W ~ N(0, std²)` with `std = gain/sqrt(d_in)`; bias starts at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = Tensor::randn([d_in, d_out], gain / (d_in as f64).sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), group, w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Tensor::zeros([d_out])));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        weight: Tensor,
        bias: Option<Tensor>,
    ) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::Config(format!("{name}: weight must be 2-D")));
        }
        let (d_in, d_out) = (weight.shape()[0], weight.shape()[1]);
        if let Some(b) = &bias {
            if b.numel() != d_out {
                return Err(Error::Shape {
                    op: "linear bias",
                    lhs: weight.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let weight = store.add(format!("{name}.weight"), group, weight);
        let bias = bias.map(|b| store.add(format!("{name}.bias"), group, b));
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Per-pass tallies of adapter work, in the five categories of the cost analysis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub expert_multiplications: u64,
    pub router_multiplications: u64,
    pub weight_expansions: u64,
    pub dot_products: u64,
    pub additions: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.expert_multiplications
            + self.router_multiplications
            + self.weight_expansions
            + self.dot_products
            + self.additions
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    /// Analytic per-pass total for `k` experts computed one by one: `5k + 1`.
    pub fn moelora_law(k: usize) -> u64 {
        5 * k as u64 + 1
    }

    /// Analytic per-pass total for the merged path, independent of `k`.
    pub const HLORA_LAW: u64 = 6;

    /// Plain LoRA: two products and one addition.
    pub const LORA_LAW: u64 = 3;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub d_in: usize,
    pub d_out: usize,
}

fn check_rank(rank: usize, d_in: usize, d_out: usize) -> Result<()> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::Config(format!(
            "rank {rank} must be in 1..={} for a {d_in}x{d_out} layer",
            d_in.min(d_out)
        )));
    }
    Ok(())
}

impl LoraAdapter {
    /// Gaussian `A` (std `1/sqrt(d_in)`), zero `B`: the bypass contributes nothing until trained.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_rank(rank, d_in, d_out)?;
        let a = Tensor::randn([d_in, rank], 1.0 / (d_in as f64).sqrt(), rng);
        Self::from_tensors(store, name, group, a, Tensor::zeros([rank, d_out]), alpha)
    }

    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        a: Tensor,
        b: Tensor,
        alpha: f64,
    ) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::Shape {
                op: "lora adapter",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (d_in, rank, d_out) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        check_rank(rank, d_in, d_out)?;
        if alpha.is_nan() || alpha <= 0.0 {
            return Err(Error::Config(format!("{name}: alpha must be positive")));
        }
        Ok(Self {
            a: store.add(format!("{name}.A"), group, a),
            b: store.add(format!("{name}.B"), group, b),
            rank,
            alpha,
            d_in,
            d_out,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Linear map from a token's hidden state to `k` softmax-normalized expert weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterLayer {
    pub weight: ParamId,
    pub d_in: usize,
    pub experts: usize,
}

impl RouterLayer {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        experts: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = Tensor::randn([d_in, experts.max(1)], 1.0 / (d_in as f64).sqrt(), rng);
        Self::from_tensor(store, name, group, w)
    }

    pub fn from_tensor(store: &mut ParamStore, name: &str, group: ParamGroup, weight: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::Config(format!("{name}: router weight must be 2-D")));
        }
        let (d_in, experts) = (weight.shape()[0], weight.shape()[1]);
        if experts == 0 {
            return Err(Error::Config("at least one expert is required".into()));
        }
        Ok(Self {
            weight: store.add(name.to_string(), group, weight),
            d_in,
            experts,
        })
    }

    /// `softmax_rows(x · R)`: token_num × k, rows summing to one.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let logits = g.matmul(x, w)?;
        g.softmax_rows(logits)
    }
}

/// Rank, expert count and scale of one task's plugin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HLoraConfig {
    pub rank: usize,
    pub experts: usize,
    pub alpha: f64,
}

impl HLoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("plugin rank must be positive".into()));
        }
        if self.experts == 0 {
            return Err(Error::Config("plugin needs at least one expert".into()));
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::Config("plugin alpha must be positive".into()));
        }
        Ok(())
    }
}

/// One task's adapter for one projection: merged expert matrices plus router.
#[derive(Debug, Clone, PartialEq)]
pub struct HLoraSubmodule {
    pub a_merged: ParamId,
    pub b_merged: ParamId,
    pub router: RouterLayer,
    pub experts: usize,
    pub rank: usize,
    pub alpha: f64,
    pub task: TaskType,
    pub d_in: usize,
    pub d_out: usize,
}

impl HLoraSubmodule {
    /// Entries are stored as `{prefix}.A_merged`, `{prefix}.B_merged`, `{prefix}.router`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        task: TaskType,
        d_in: usize,
        d_out: usize,
        cfg: HLoraConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let width = cfg.rank * cfg.experts;
        let a = Tensor::randn([d_in, width], 1.0 / (d_in as f64).sqrt(), rng);
        let router = RouterLayer::init(store, &format!("{prefix}.router"), group, d_in, cfg.experts, rng)?;
        let a_merged = store.add(format!("{prefix}.A_merged"), group, a);
        let b_merged = store.add(format!("{prefix}.B_merged"), group, Tensor::zeros([width, d_out]));
        Ok(Self {
            a_merged,
            b_merged,
            router,
            experts: cfg.experts,
            rank: cfg.rank,
            alpha: cfg.alpha,
            task,
            d_in,
            d_out,
        })
    }

    /// Concatenates expert `A`s along columns and `B`s along rows; expert `i`
    /// owns column block `i` of `A_merged` and row block `i` of `B_merged`.
    pub fn from_experts(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        task: TaskType,
        experts: &[LoraAdapter],
        router: RouterLayer,
    ) -> Result<Self> {
        let (rank, d_in, d_out, alpha) = check_experts(experts)?;
        let k = experts.len();
        if router.experts != k || router.d_in != d_in {
            return Err(Error::Config(format!(
                "router maps {}->{} but there are {k} experts over d_in={d_in}",
                router.d_in, router.experts
            )));
        }
        let width = rank * k;
        let mut a = vec![0.0; d_in * width];
        let mut b = Vec::with_capacity(width * d_out);
        for (i, e) in experts.iter().enumerate() {
            let ai = store.tensor(e.a).data();
            for row in 0..d_in {
                a[row * width + i * rank..row * width + (i + 1) * rank]
                    .copy_from_slice(&ai[row * rank..(row + 1) * rank]);
            }
            b.extend_from_slice(store.tensor(e.b).data());
        }
        let a_merged = store.add(format!("{prefix}.A_merged"), group, Tensor::new([d_in, width], a)?);
        let b_merged = store.add(format!("{prefix}.B_merged"), group, Tensor::new([width, d_out], b)?);
        Ok(Self {
            a_merged,
            b_merged,
            router,
            experts: k,
            rank,
            alpha,
            task,
            d_in,
            d_out,
        })
    }

    /// Expert `i`'s `(A_i, B_i)` cut back out of the merged matrices.
    pub fn expert_blocks(&self, store: &ParamStore) -> Vec<(Tensor, Tensor)> {
        let (r, width) = (self.rank, self.rank * self.experts);
        let a = store.tensor(self.a_merged).data();
        let b = store.tensor(self.b_merged).data();
        (0..self.experts)
            .map(|i| {
                let mut ai = Vec::with_capacity(self.d_in * r);
                for row in 0..self.d_in {
                    ai.extend_from_slice(&a[row * width + i * r..row * width + (i + 1) * r]);
                }
                let bi = b[i * r * self.d_out..(i + 1) * r * self.d_out].to_vec();
                (
                    Tensor::new([self.d_in, r], ai).expect("block shape"),
                    Tensor::new([r, self.d_out], bi).expect("block shape"),
                )
            })
            .collect()
    }

    /// `α·k/r`, the factor folded into the expanded router weights.
    pub fn expansion_scale(&self) -> f64 {
        self.alpha * self.experts as f64 / self.rank as f64
    }
}

fn check_experts(experts: &[LoraAdapter]) -> Result<(usize, usize, usize, f64)> {
    let first = experts
        .first()
        .ok_or_else(|| Error::Config("expert list is empty".into()))?;
    for e in experts {
        if e.rank != first.rank || e.d_in != first.d_in || e.d_out != first.d_out {
            return Err(Error::Config(format!(
                "experts disagree: {}x{} rank {} vs {}x{} rank {}",
                first.d_in, first.d_out, first.rank, e.d_in, e.d_out, e.rank
            )));
        }
    }
    Ok((first.rank, first.d_in, first.d_out, first.alpha))
}

/// Scale applied to each expert in the per-expert reference path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleMode {
    /// `α·k/r`, identical to the merged path.
    #[default]
    Merged,
    /// `α/r`, the single-adapter convention; kept for ablations.
    Conventional,
}

/// `x·W0 + (α/r)·x·A·B`.
pub fn lora_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    base: &Linear,
    adapter: &LoraAdapter,
    counter: &mut OpCounter,
) -> Result<Var> {
    let out = base.forward(g, store, x)?;
    let a = g.param(store, adapter.a);
    let b = g.param(store, adapter.b);
    let xa = g.matmul(x, a)?;
    let xab = g.matmul(xa, b)?;
    counter.expert_multiplications += 2;
    let delta = g.scale(xab, adapter.scale());
    counter.additions += 1;
    g.add(out, delta)
}

/// Expert-by-expert mixture: `x·W0 + Σᵢ (s·wᵢ ⊗ 1) ⊙ (x·Aᵢ)·Bᵢ`.
#[allow(clippy::too_many_arguments)]
pub fn moelora_forward_reference(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    base: &Linear,
    experts: &[LoraAdapter],
    router: &RouterLayer,
    scale: ScaleMode,
    counter: &mut OpCounter,
) -> Result<Var> {
    let (rank, _, d_out, alpha) = check_experts(experts)?;
    let k = experts.len();
    if router.experts != k {
        return Err(Error::Config(format!(
            "router produces {} weights for {k} experts",
            router.experts
        )));
    }
    let s = match scale {
        ScaleMode::Merged => alpha * k as f64 / rank as f64,
        ScaleMode::Conventional => alpha / rank as f64,
    };
    let mut out = base.forward(g, store, x)?;
    let weights = router.forward(g, store, x)?;
    counter.router_multiplications += 1;
    for (i, e) in experts.iter().enumerate() {
        let a = g.param(store, e.a);
        let b = g.param(store, e.b);
        let xa = g.matmul(x, a)?;
        let h = g.matmul(xa, b)?;
        counter.expert_multiplications += 2;
        let wi = g.slice_cols(weights, i, 1)?;
        let wide = g.expand_cols(wi, d_out, s)?;
        counter.weight_expansions += 1;
        let weighted = g.mul(h, wide)?;
        counter.dot_products += 1;
        out = g.add(out, weighted)?;
        counter.additions += 1;
    }
    Ok(out)
}

/// Merged-matrix mixture: `x·W0 + (x·A_merged ⊙ (α·k/r)·W ⊗ 1_r)·B_merged`.
pub fn hlora_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    base: &Linear,
    sub: &HLoraSubmodule,
    counter: &mut OpCounter,
) -> Result<Var> {
    let a_shape = store.tensor(sub.a_merged).shape();
    let b_shape = store.tensor(sub.b_merged).shape();
    let width = sub.rank * sub.experts;
    if sub.router.experts != sub.experts || a_shape[1] != width || b_shape[0] != width {
        return Err(Error::Shape {
            op: "hlora block layout",
            lhs: vec![sub.router.experts, sub.rank],
            rhs: vec![a_shape[1], b_shape[0]],
        });
    }
    let out = base.forward(g, store, x)?;
    let weights = sub.router.forward(g, store, x)?;
    counter.router_multiplications += 1;
    let expanded = g.expand_cols(weights, sub.rank, sub.expansion_scale())?;
    counter.weight_expansions += 1;
    let a = g.param(store, sub.a_merged);
    let b = g.param(store, sub.b_merged);
    let xa = g.matmul(x, a)?;
    let gated = g.mul(xa, expanded)?;
    counter.dot_products += 1;
    let delta = g.matmul(gated, b)?;
    counter.expert_multiplications += 2;
    counter.additions += 1;
    g.add(out, delta)
}

/// All of one task's submodules, keyed by the projection they adapt.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPlugin {
    pub task: TaskType,
    pub config: HLoraConfig,
    pub layers: BTreeMap<String, HLoraSubmodule>,
}

impl TaskPlugin {
    pub fn layer(&self, name: &str) -> Result<&HLoraSubmodule> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::Config(format!("{} plugin has no layer {name}", self.task)))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .values()
            .flat_map(|s| [s.a_merged, s.b_merged, s.router.weight])
            .collect()
    }
}

/// Disjoint per-task plugins. Tasks never share A, B or router parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PluginBank {
    plugins: BTreeMap<TaskType, TaskPlugin>,
}

impl PluginBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a plugin for `task` covering every `(name, d_in, d_out)` projection.
    /// Entries are named `{task}.{layer}.{A_merged|B_merged|router}`.
    pub fn add_task<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        task: TaskType,
        cfg: HLoraConfig,
        projections: &[(String, usize, usize)],
        rng: &mut R,
    ) -> Result<()> {
        let group = match task {
            TaskType::Comprehension => ParamGroup::CompPlugin,
            TaskType::Generation => ParamGroup::GenPlugin,
        };
        let mut layers = BTreeMap::new();
        for (name, d_in, d_out) in projections {
            let prefix = format!("{}.{name}", task.tag());
            let sub = HLoraSubmodule::init(store, &prefix, group, task, *d_in, *d_out, cfg, rng)?;
            layers.insert(name.clone(), sub);
        }
        self.plugins.insert(
            task,
            TaskPlugin {
                task,
                config: cfg,
                layers,
            },
        );
        Ok(())
    }

    pub fn insert(&mut self, plugin: TaskPlugin) {
        self.plugins.insert(plugin.task, plugin);
    }

    pub fn select(&self, task: TaskType) -> Result<&TaskPlugin> {
        select_submodule(task, self)
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskType> + '_ {
        self.plugins.keys().copied()
    }
}

/// Hard task-level gating: the plugin registered for `task`, or a configuration error.
pub fn select_submodule(task: TaskType, bank: &PluginBank) -> Result<&TaskPlugin> {
    bank.plugins
        .get(&task)
        .ok_or_else(|| Error::Config(format!("no plugin registered for task {task}")))
}
