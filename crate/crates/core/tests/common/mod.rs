//! Central-difference gradient oracle shared by the integration suites.

#![allow(dead_code)]

use hlora_core::adapter::{
    hlora_forward, lora_forward, moelora_forward_reference, HLoraSubmodule, Linear, LoraAdapter, OpCounter, RouterLayer,
    ScaleMode,
};
use hlora_core::data::{fit_codec, DrawSpec};
use hlora_core::image::ToyImage;
use hlora_core::model::{Architecture, Model, ModelConfig, Target};
use hlora_core::rng::{stream, StreamRng};
use hlora_core::vision::{AlignmentAdapter, EncoderConfig, EncoderStack};
use hlora_core::{Graph, ParamGroup, ParamStore, Result, TaskType, Tensor, Var};
use hlora_core::vq::VqCodec;
use rand::Rng;
use std::sync::OnceLock;

pub const STEP: f64 = 1e-5;
pub const REL: f64 = 1e-4;
pub const ABS: f64 = 1e-7;
pub const CASES: usize = 50;

pub const PRIMITIVES: [&str; 17] = [
    "matmul",
    "add",
    "mul",
    "scale",
    "add_bias",
    "gelu",
    "layer_norm",
    "softmax_rows",
    "causal_softmax",
    "transpose",
    "slice_cols",
    "concat_cols",
    "concat_rows",
    "gather_rows",
    "expand_cols",
    "sum",
    "cross_entropy",
];

pub const MODULES: [&str; 7] = [
    "linear",
    "lora_forward",
    "moelora_forward_reference",
    "hlora_forward",
    "alignment_adapter",
    "encoder",
    "model_loss",
];

/// Worst `|analytic - numeric| / max(ABS, REL·max(|analytic|, |numeric|))`
/// over the checked entries; at most 1 means every entry passed.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    pub checked: usize,
    pub worst: f64,
}

impl FdReport {
    pub fn add(&mut self, analytic: f64, numeric: f64) {
        let tol = ABS.max(REL * analytic.abs().max(numeric.abs()));
        self.worst = self.worst.max((analytic - numeric).abs() / tol);
        self.checked += 1;
    }

    fn merge(&mut self, o: FdReport) {
        self.checked += o.checked;
        self.worst = self.worst.max(o.worst);
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst <= 1.0
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn randn(shape: [usize; 2], rng: &mut StreamRng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn dim(rng: &mut StreamRng) -> usize {
    rng.random_range(1..=5)
}

/// Inputs and graph builder for one random instance of a primitive op.
fn primitive_case(op: &str, rng: &mut StreamRng) -> (Vec<Tensor>, Build) {
    let (m, n, p) = (dim(rng), dim(rng), dim(rng));
    match op {
        "matmul" => (vec![randn([m, n], rng), randn([n, p], rng)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        "add" => (vec![randn([m, n], rng), randn([m, n], rng)], Box::new(|g, v| g.add(v[0], v[1]))),
        "mul" => (vec![randn([m, n], rng), randn([m, n], rng)], Box::new(|g, v| g.mul(v[0], v[1]))),
        "scale" => {
            let f: f64 = rng.random_range(-2.0..2.0);
            (vec![randn([m, n], rng)], Box::new(move |g, v| Ok(g.scale(v[0], f))))
        }
        "add_bias" => (
            vec![randn([m, n], rng), Tensor::randn([n], 1.0, rng)],
            Box::new(|g, v| g.add_bias(v[0], v[1])),
        ),
        "gelu" => (vec![randn([m, n], rng)], Box::new(|g, v| Ok(g.gelu(v[0])))),
        "layer_norm" => (vec![randn([m, n + 1], rng)], Box::new(|g, v| g.layer_norm(v[0], 1e-5))),
        "softmax_rows" => (vec![randn([m, n], rng)], Box::new(|g, v| g.softmax_rows(v[0]))),
        "causal_softmax" => {
            let offset = rng.random_range(0..=2);
            (vec![randn([m, m + offset], rng)], Box::new(move |g, v| g.causal_softmax(v[0], offset)))
        }
        "transpose" => (vec![randn([m, n], rng)], Box::new(|g, v| g.transpose(v[0]))),
        "slice_cols" => {
            let start = rng.random_range(0..n);
            let len = rng.random_range(1..=n - start);
            (vec![randn([m, n], rng)], Box::new(move |g, v| g.slice_cols(v[0], start, len)))
        }
        "concat_cols" => (
            vec![randn([m, n], rng), randn([m, p], rng)],
            Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
        ),
        "concat_rows" => (
            vec![randn([m, n], rng), randn([p, n], rng)],
            Box::new(|g, v| g.concat_rows(&[v[0], v[1]])),
        ),
        "gather_rows" => {
            let ids: Vec<usize> = (0..p + 1).map(|_| rng.random_range(0..m)).collect();
            (vec![randn([m, n], rng)], Box::new(move |g, v| g.gather_rows(v[0], &ids)))
        }
        "expand_cols" => {
            let times = rng.random_range(1..=3);
            let s: f64 = rng.random_range(0.5..2.0);
            (vec![randn([m, n], rng)], Box::new(move |g, v| g.expand_cols(v[0], times, s)))
        }
        "sum" => (vec![randn([m, n], rng)], Box::new(|g, v| Ok(g.sum(v[0])))),
        "cross_entropy" => {
            let vocab = n + 1;
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..vocab)).collect();
            let mut mask: Vec<bool> = (0..m).map(|_| rng.random_bool(0.7)).collect();
            mask[rng.random_range(0..m)] = true;
            (
                vec![randn([m, vocab], rng)],
                Box::new(move |g, v| g.cross_entropy(v[0], &targets, &mask)),
            )
        }
        other => panic!("no case generator for {other}"),
    }
}

/// `Σ out ⊙ W` for a fixed random `W`, so no output direction is invisible.
fn probe(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn primitive_loss(inputs: &[Tensor], build: &Build, weights: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let l = probe(&mut g, out, weights)?;
    Ok(g.value(l).item())
}

/// Every input entry of one random instance of `op`.
pub fn check_primitive(op: &str, seed: u64) -> Result<FdReport> {
    let mut rng = stream(seed, &format!("fd.{op}"));
    let (inputs, build) = primitive_case(op, &mut rng);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone().with_requires_grad(true))).collect();
    let out = build(&mut g, &vars)?;
    let weights = Tensor::randn(g.value(out).shape().to_vec(), 1.0, &mut rng);
    let l = probe(&mut g, out, &weights)?;
    g.backward(l)?;
    let mut report = FdReport::default();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (primitive_loss(&plus, &build, &weights)? - primitive_loss(&minus, &build, &weights)?) / (2.0 * STEP);
            report.add(a, numeric);
        }
    }
    Ok(report)
}

/// A parameterized forward whose loss depends on entries of `store`.
type LossFn = Box<dyn Fn(&ParamStore) -> Result<(Graph, Var)>>;

struct ModuleCase {
    store: ParamStore,
    loss: LossFn,
}

fn trainable(mut store: ParamStore) -> ParamStore {
    let groups: Vec<ParamGroup> = ParamGroup::ALL.into_iter().filter(|&g| g != ParamGroup::Codec).collect();
    store.set_trainable_groups(&groups);
    store
}

fn random_b(store: &mut ParamStore, ids: &[hlora_core::ParamId], rng: &mut StreamRng) {
    for &id in ids {
        let shape = store.tensor(id).shape().to_vec();
        *store.tensor_mut(id) = Tensor::randn(shape, 0.5, rng);
    }
}

fn module_case(kind: &str, seed: u64) -> Result<ModuleCase> {
    let mut rng = stream(seed, &format!("fd.{kind}"));
    let tokens = rng.random_range(1..=4);
    let d_in = rng.random_range(2..=6);
    let d_out = rng.random_range(2..=6);
    let rank = rng.random_range(1..=2);
    let k = [1, 2, 4][rng.random_range(0..3)];
    let x = Tensor::randn([tokens, d_in], 1.0, &mut rng);
    let weights = Tensor::randn([tokens, d_out], 1.0, &mut rng);
    let mut store = ParamStore::new();
    let g = ParamGroup::CompPlugin;
    let case = match kind {
        "linear" => {
            let lin = Linear::init(&mut store, "lin", g, d_in, d_out, true, 1.0, &mut rng);
            let bias = lin.bias.unwrap();
            random_b(&mut store, &[bias], &mut rng);
            ModuleCase {
                store,
                loss: Box::new(move |s| {
                    let mut gr = Graph::new();
                    let xv = gr.constant(x.clone());
                    let y = lin.forward(&mut gr, s, xv)?;
                    let l = probe(&mut gr, y, &weights)?;
                    Ok((gr, l))
                }),
            }
        }
        "lora_forward" => {
            let base = Linear::init(&mut store, "base", g, d_in, d_out, true, 1.0, &mut rng);
            let ad = LoraAdapter::init(&mut store, "lora", g, d_in, d_out, rank.min(d_in).min(d_out), 2.0, &mut rng)?;
            random_b(&mut store, &[ad.b], &mut rng);
            ModuleCase {
                store,
                loss: Box::new(move |s| {
                    let mut gr = Graph::new();
                    let xv = gr.input(x.clone().with_requires_grad(true));
                    let y = lora_forward(&mut gr, s, xv, &base, &ad, &mut OpCounter::new())?;
                    let l = probe(&mut gr, y, &weights)?;
                    Ok((gr, l))
                }),
            }
        }
        "moelora_forward_reference" | "hlora_forward" => {
            let rank = rank.min(d_in).min(d_out);
            let base = Linear::init(&mut store, "base", g, d_in, d_out, false, 1.0, &mut rng);
            let mut experts = Vec::new();
            for i in 0..k {
                let e = LoraAdapter::init(&mut store, &format!("e{i}"), g, d_in, d_out, rank, 2.0, &mut rng)?;
                random_b(&mut store, &[e.b], &mut rng);
                experts.push(e);
            }
            let router = RouterLayer::init(&mut store, "router", g, d_in, k, &mut rng)?;
            if kind == "hlora_forward" {
                let sub = HLoraSubmodule::from_experts(&mut store, "m", g, TaskType::Generation, &experts, router)?;
                ModuleCase {
                    store,
                    loss: Box::new(move |s| {
                        let mut gr = Graph::new();
                        let xv = gr.constant(x.clone());
                        let y = hlora_forward(&mut gr, s, xv, &base, &sub, &mut OpCounter::new())?;
                        let l = probe(&mut gr, y, &weights)?;
                        Ok((gr, l))
                    }),
                }
            } else {
                ModuleCase {
                    store,
                    loss: Box::new(move |s| {
                        let mut gr = Graph::new();
                        let xv = gr.constant(x.clone());
                        let y = moelora_forward_reference(&mut gr, s, xv, &base, &experts, &router, ScaleMode::Merged, &mut OpCounter::new())?;
                        let l = probe(&mut gr, y, &weights)?;
                        Ok((gr, l))
                    }),
                }
            }
        }
        "alignment_adapter" => {
            let hidden = rng.random_range(2..=5);
            let ad = AlignmentAdapter::init(&mut store, "align", ParamGroup::CompAdapter, d_in, hidden, d_out, &mut rng);
            ModuleCase {
                store,
                loss: Box::new(move |s| {
                    let mut gr = Graph::new();
                    let xv = gr.constant(x.clone());
                    let y = ad.align(&mut gr, s, xv)?;
                    let l = probe(&mut gr, y, &weights)?;
                    Ok((gr, l))
                }),
            }
        }
        "encoder" => {
            let depth = rng.random_range(1..=3);
            let cfg = EncoderConfig {
                patch_size: 4,
                d_vis: rng.random_range(2..=5),
                mixing: (0..depth).map(|_| rng.random_range(0.0..1.0)).collect(),
                gain: 0.5,
            };
            let enc = EncoderStack::init(&mut store, cfg.clone(), &mut rng)?;
            let img = ToyImage::random(8, 8, &mut rng);
            let w = Tensor::randn([4, cfg.d_vis], 1.0, &mut rng);
            ModuleCase {
                store,
                loss: Box::new(move |s| {
                    let mut gr = Graph::new();
                    let states = enc.encode(&mut gr, s, &img)?;
                    let mut total = None;
                    for st in states {
                        let l = probe(&mut gr, st, &w)?;
                        total = Some(match total {
                            None => l,
                            Some(t) => gr.add(t, l)?,
                        });
                    }
                    let l = total.expect("encoder has blocks");
                    Ok((gr, l))
                }),
            }
        }
        "model_loss" => {
            let cfg = tiny_model_config();
            let codec = shared_codec().clone();
            let arch = if rng.random_bool(0.5) { Architecture::HLora } else { Architecture::SharedLora };
            let mut model = Model::new(cfg, arch, codec, seed)?;
            let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
            for id in ids {
                if model.store.entry(id).name.ends_with(".B_merged") || model.store.entry(id).name.ends_with(".B") {
                    let shape = model.store.tensor(id).shape().to_vec();
                    *model.store.tensor_mut(id) = Tensor::randn(shape, 0.3, &mut rng);
                }
            }
            let task = if rng.random_bool(0.5) { TaskType::Comprehension } else { TaskType::Generation };
            let spec = DrawSpec::all()[rng.random_range(0..81)];
            let seq = match task {
                TaskType::Comprehension => {
                    let img = spec.render();
                    model.build_sequence(Some(&img), &[2], Some(&Target::Text(vec![7, 1])), task)?
                }
                TaskType::Generation => {
                    let idx = model.codec.encode(&spec.render())?;
                    model.build_sequence(None, &spec.prompt(), Some(&Target::Image(idx)), task)?
                }
            };
            let store = std::mem::take(&mut model.store);
            ModuleCase {
                store,
                loss: Box::new(move |s| {
                    let mut m = model.clone();
                    m.store = s.clone();
                    let mut gr = Graph::new();
                    let l = m.loss(&mut gr, &seq, task)?;
                    Ok((gr, l))
                }),
            }
        }
        other => panic!("no module case for {other}"),
    };
    Ok(ModuleCase {
        store: trainable(case.store),
        loss: case.loss,
    })
}

pub fn shared_codec() -> &'static VqCodec {
    static CODEC: OnceLock<VqCodec> = OnceLock::new();
    CODEC.get_or_init(|| fit_codec(0, 64, 8).expect("codec fits"))
}

pub fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        max_seq: 24,
        ff_hidden: 8,
        align_hidden: 6,
        ..ModelConfig::default()
    };
    cfg.encoder.d_vis = 4;
    cfg.comp.rank = 1;
    cfg.comp.experts = 2;
    cfg.gen.rank = 2;
    cfg.gen.experts = 2;
    cfg.shared_rank = 2;
    cfg
}

/// Up to `budget` parameter entries of one random module instance, spread
/// over every trainable tensor.
pub fn check_module(kind: &str, seed: u64, budget: usize) -> Result<FdReport> {
    let case = module_case(kind, seed)?;
    let mut rng = stream(seed, &format!("fd.pick.{kind}"));
    let (mut g, l) = (case.loss)(&case.store)?;
    g.backward(l)?;
    let grads: std::collections::HashMap<_, Vec<f64>> = g.param_grads().map(|(id, gr)| (id, gr.to_vec())).collect();
    let ids: Vec<_> = case
        .store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(id, _)| id)
        .collect();
    let per = (budget / ids.len().max(1)).max(1);
    let mut report = FdReport::default();
    for id in ids {
        let n = case.store.tensor(id).numel();
        let picks: Vec<usize> = if n <= per {
            (0..n).collect()
        } else {
            (0..per).map(|_| rng.random_range(0..n)).collect()
        };
        let analytic = grads.get(&id).cloned().unwrap_or_else(|| vec![0.0; n]);
        let mut sub = FdReport::default();
        for j in picks {
            let eval = |delta: f64| -> Result<f64> {
                let mut s = case.store.clone();
                s.tensor_mut(id).data_mut()[j] += delta;
                let (g, l) = (case.loss)(&s)?;
                Ok(g.value(l).item())
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            sub.add(analytic[j], numeric);
        }
        report.merge(sub);
    }
    Ok(report)
}

/// `CASES` random instances of every primitive and module; returns failures.
pub fn gradient_suite(module_budget: usize) -> Vec<(String, FdReport)> {
    let mut out = Vec::new();
    for op in PRIMITIVES {
        let mut r = FdReport::default();
        for c in 0..CASES {
            r.merge(check_primitive(op, c as u64).unwrap_or_else(|e| panic!("{op} case {c}: {e}")));
        }
        out.push((op.to_string(), r));
    }
    for kind in MODULES {
        let mut r = FdReport::default();
        for c in 0..CASES {
            r.merge(check_module(kind, c as u64, module_budget).unwrap_or_else(|e| panic!("{kind} case {c}: {e}")));
        }
        out.push((kind.to_string(), r));
    }
    out
}
