//! Op-count audits and wall-clock comparisons of the three adapter forwards.
//!
//! Every configuration times plain LoRA of rank `r·k`, the expert-by-expert
//! mixture and the merged mixture over the same frozen base, interleaving the
//! three per repetition so slow drift on the machine hits them equally.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::adapter::{
    hlora_forward, lora_forward, moelora_forward_reference, HLoraSubmodule, Linear, LoraAdapter, OpCounter,
    RouterLayer, ScaleMode,
};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::rng::stream;
use crate::task::TaskType;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AdapterKind {
    Lora,
    MoeLora,
    HLora,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 3] = [AdapterKind::Lora, AdapterKind::MoeLora, AdapterKind::HLora];

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::MoeLora => "moelora",
            AdapterKind::HLora => "hlora",
        }
    }

    /// Analytic per-pass op total.
    pub fn law(self, k: usize) -> u64 {
        match self {
            AdapterKind::Lora => OpCounter::LORA_LAW,
            AdapterKind::MoeLora => OpCounter::moelora_law(k),
            AdapterKind::HLora => OpCounter::HLORA_LAW,
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub experts: Vec<usize>,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub tokens: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub include_backward: bool,
    /// Token count doubles until one LoRA pass takes at least this long.
    pub min_pass_ns: u64,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            experts: vec![2, 4, 8, 32],
            rank: 4,
            d_in: 256,
            d_out: 256,
            tokens: 128,
            repetitions: 21,
            warmup: 3,
            include_backward: true,
            min_pass_ns: 50_000,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 5 {
            return Err(Error::Config("bench needs at least 5 repetitions".into()));
        }
        if self.warmup < 2 {
            return Err(Error::Config("bench needs at least 2 warmup passes".into()));
        }
        if self.experts.is_empty() || self.experts.contains(&0) {
            return Err(Error::Config("expert counts must be a nonempty list of positive values".into()));
        }
        if self.rank == 0 || self.tokens == 0 || self.d_in == 0 || self.d_out == 0 {
            return Err(Error::Config("bench dimensions must be positive".into()));
        }
        for &k in &self.experts {
            if self.rank * k > self.d_in.min(self.d_out) {
                return Err(Error::Config(format!(
                    "rank {}·{k} exceeds the {}x{} layer",
                    self.rank, self.d_in, self.d_out
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub kind: AdapterKind,
    pub k: usize,
    pub r: usize,
    pub tokens: usize,
    pub median_ns: f64,
    pub iqr_ns: f64,
    /// Against LoRA of rank `r·k` at the same token count.
    pub ratio_vs_lora: f64,
    pub opcount: u64,
}

/// The three adapters over one shared frozen base. The mixture paths share
/// their expert weights; the LoRA has rank `r·k` to match their capacity.
pub struct Fixture {
    store: ParamStore,
    base: Linear,
    lora: LoraAdapter,
    experts: Vec<LoraAdapter>,
    router: RouterLayer,
    merged: HLoraSubmodule,
}

impl Fixture {
    pub fn new(d_in: usize, d_out: usize, rank: usize, k: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, &format!("bench.k{k}"));
        let mut store = ParamStore::new();
        let base = Linear::init(&mut store, "base", ParamGroup::Backbone, d_in, d_out, false, 1.0, &mut rng);
        let alpha = rank as f64;
        let rand_b = |rows, rng: &mut _| Tensor::randn([rows, d_out], 0.1, rng);
        let a = Tensor::randn([d_in, rank * k], 1.0 / (d_in as f64).sqrt(), &mut rng);
        let b = rand_b(rank * k, &mut rng);
        let lora = LoraAdapter::from_tensors(&mut store, "lora", ParamGroup::SharedLora, a, b, alpha)?;
        let mut experts = Vec::with_capacity(k);
        for i in 0..k {
            let a = Tensor::randn([d_in, rank], 1.0 / (d_in as f64).sqrt(), &mut rng);
            let b = rand_b(rank, &mut rng);
            experts.push(LoraAdapter::from_tensors(
                &mut store,
                &format!("expert{i}"),
                ParamGroup::CompPlugin,
                a,
                b,
                alpha,
            )?);
        }
        let router = RouterLayer::init(&mut store, "router", ParamGroup::CompPlugin, d_in, k, &mut rng)?;
        let merged = HLoraSubmodule::from_experts(
            &mut store,
            "merged",
            ParamGroup::CompPlugin,
            TaskType::Comprehension,
            &experts,
            router.clone(),
        )?;
        for id in [lora.a, lora.b, merged.a_merged, merged.b_merged, router.weight] {
            store.set_trainable(id, true);
        }
        for e in &experts {
            store.set_trainable(e.a, true);
            store.set_trainable(e.b, true);
        }
        Ok(Self {
            store,
            base,
            lora,
            experts,
            router,
            merged,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, kind: AdapterKind, counter: &mut OpCounter) -> Result<Var> {
        match kind {
            AdapterKind::Lora => lora_forward(g, &self.store, x, &self.base, &self.lora, counter),
            AdapterKind::MoeLora => moelora_forward_reference(
                g,
                &self.store,
                x,
                &self.base,
                &self.experts,
                &self.router,
                ScaleMode::Merged,
                counter,
            ),
            AdapterKind::HLora => hlora_forward(g, &self.store, x, &self.base, &self.merged, counter),
        }
    }

    /// One timed pass; returns the output so callers can compare paths.
    pub fn pass(&self, x: &Tensor, kind: AdapterKind, backward: bool) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone().with_requires_grad(true));
        let y = self.forward(&mut g, xv, kind, &mut OpCounter::new())?;
        if backward {
            let loss = g.sum(y);
            g.backward(loss)?;
        }
        Ok(g.value(y).clone())
    }
}

/// Totals of one instrumented forward of `kind` with `k` experts.
pub fn audit_opcounts(kind: AdapterKind, k: usize) -> Result<OpCounter> {
    if k == 0 {
        return Err(Error::Config("at least one expert is required".into()));
    }
    let rank = 1;
    let d = k.max(2);
    let fx = Fixture::new(d, d, rank, k, 0)?;
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([2, d]));
    let mut counter = OpCounter::new();
    fx.forward(&mut g, x, kind, &mut counter)?;
    Ok(counter)
}

fn max_rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Median and interquartile range, linear interpolation between order statistics.
pub fn median_iqr(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (s.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
    };
    (q(0.5), q(0.75) - q(0.25))
}

fn time_ns<F: FnMut() -> Result<()>>(mut f: F) -> Result<f64> {
    let t = Instant::now();
    f()?;
    Ok(t.elapsed().as_nanos() as f64)
}

/// Times every `(kind, k)` on the calling thread. Before timing and again on
/// the last timed outputs, the two mixture paths must agree within `1e-9`.
pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchResult>> {
    spec.validate()?;
    let mut out = Vec::new();
    for &k in &spec.experts {
        let fx = Fixture::new(spec.d_in, spec.d_out, spec.rank, k, spec.seed)?;
        let mut rng = stream(spec.seed, &format!("bench.input.k{k}"));
        let mut tokens = spec.tokens;
        let mut x = Tensor::randn([tokens, spec.d_in], 1.0, &mut rng);
        loop {
            let probe = time_ns(|| fx.pass(&x, AdapterKind::Lora, spec.include_backward).map(drop))?;
            if probe >= spec.min_pass_ns as f64 || tokens >= 1 << 20 {
                break;
            }
            tokens *= 2;
            x = Tensor::randn([tokens, spec.d_in], 1.0, &mut rng);
        }
        if tokens != spec.tokens {
            log::info!("k={k}: token count scaled from {} to {tokens} for timer resolution", spec.tokens);
        }
        check_equivalent(&fx.pass(&x, AdapterKind::MoeLora, false)?, &fx.pass(&x, AdapterKind::HLora, false)?, k)?;
        for _ in 0..spec.warmup {
            for kind in AdapterKind::ALL {
                fx.pass(&x, kind, spec.include_backward)?;
            }
        }
        let mut samples: [Vec<f64>; 3] = Default::default();
        let mut last: [Option<Tensor>; 3] = Default::default();
        for _ in 0..spec.repetitions {
            for (i, kind) in AdapterKind::ALL.into_iter().enumerate() {
                let mut y = None;
                samples[i].push(time_ns(|| {
                    y = Some(fx.pass(&x, kind, spec.include_backward)?);
                    Ok(())
                })?);
                last[i] = y;
            }
        }
        let (moe, merged) = (last[1].as_ref().expect("timed"), last[2].as_ref().expect("timed"));
        check_equivalent(moe, merged, k)?;
        let stats: Vec<(f64, f64)> = samples.iter().map(|s| median_iqr(s)).collect();
        let lora_median = stats[0].0;
        for (i, kind) in AdapterKind::ALL.into_iter().enumerate() {
            let opcount = audit_opcounts(kind, k)?.total();
            if opcount != kind.law(k) {
                return Err(Error::Check(format!(
                    "{kind} k={k}: audited {opcount} ops, law says {}",
                    kind.law(k)
                )));
            }
            out.push(BenchResult {
                kind,
                k,
                r: spec.rank,
                tokens,
                median_ns: stats[i].0,
                iqr_ns: stats[i].1,
                ratio_vs_lora: stats[i].0 / lora_median,
                opcount,
            });
        }
    }
    out.sort_by_key(|r| (r.kind, r.k));
    Ok(out)
}

fn check_equivalent(moe: &Tensor, merged: &Tensor, k: usize) -> Result<()> {
    let diff = max_rel_diff(moe, merged);
    if diff > 1e-9 {
        return Err(Error::Check(format!(
            "k={k}: merged and per-expert outputs differ by {diff:e}"
        )));
    }
    Ok(())
}

pub const BENCH_TAG: &str = "# hlora-bench v1";
pub const BENCH_HEADER: &str = "run_id,kind,k,r,tokens,median_ns,iqr_ns,ratio_vs_lora,opcount";

/// Appends rows to `path`, writing the header only when the file is new.
pub fn emit_report(results: &[BenchResult], path: &Path, run_id: &str) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Config("no bench results to report".into()));
    }
    let fresh = !path.exists();
    let io = |e: std::io::Error| Error::Io(format!("{}: {e}", path.display()));
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    let mut text = String::new();
    if fresh {
        text.push_str(&format!("{BENCH_TAG}\n{BENCH_HEADER}\n"));
    }
    for r in results {
        text.push_str(&format!(
            "{run_id},{},{},{},{},{:.0},{:.0},{:.4},{}\n",
            r.kind, r.k, r.r, r.tokens, r.median_ns, r.iqr_ns, r.ratio_vs_lora, r.opcount
        ));
    }
    f.write_all(text.as_bytes()).map_err(io)
}

pub fn format_table(results: &[BenchResult]) -> String {
    let mut s = format!(
        "{:<8} {:>3} {:>3} {:>7} {:>12} {:>10} {:>7} {:>4}\n",
        "kind", "k", "r", "tokens", "median_us", "iqr_us", "ratio", "ops"
    );
    for r in results {
        s.push_str(&format!(
            "{:<8} {:>3} {:>3} {:>7} {:>12.1} {:>10.1} {:>7.3} {:>4}\n",
            r.kind.name(),
            r.k,
            r.r,
            r.tokens,
            r.median_ns / 1e3,
            r.iqr_ns / 1e3,
            r.ratio_vs_lora,
            r.opcount
        ));
    }
    s
}
