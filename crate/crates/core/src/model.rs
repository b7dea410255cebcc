//! A small decoder-only transformer over one joint stream of aligned visual
//! features, text tokens and image-code tokens.
//!
//! Every projection inside the blocks (`q`, `k`, `v`, `o`, `ff1`, `ff2`) is a
//! frozen linear layer with a trainable bypass: either the task's H-LoRA
//! submodule, picked by the task tag, or one LoRA shared by both tasks.

use std::collections::BTreeMap;

use crate::adapter::{hlora_forward, lora_forward, HLoraConfig, Linear, LoraAdapter, OpCounter, PluginBank};
use crate::error::{Error, Result};
use crate::image::ToyImage;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::stream;
use crate::task::TaskType;
use crate::tensor::{Graph, Tensor, Var};
use crate::text;
use crate::vision::{AlignmentAdapter, EncoderConfig, EncoderStack, GranularitySelection};
use crate::vq::{Codebook, IndexSequence, LatentMap, VocabularyMap, VqCodec};

const LN_EPS: f64 = 1e-5;
pub const PROJECTIONS: [&str; 6] = ["q", "k", "v", "o", "ff1", "ff2"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub ff_hidden: usize,
    pub align_hidden: usize,
    pub image_size: usize,
    pub encoder: EncoderConfig,
    pub concrete_tap: usize,
    pub abstract_tap: usize,
    pub tap_split: usize,
    pub comp: HLoraConfig,
    pub gen: HLoraConfig,
    /// Rank and scale of the single LoRA used by the shared architecture.
    pub shared_rank: usize,
    pub shared_alpha: f64,
    pub codebook_size: usize,
    pub d_code: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 2,
            max_seq: 128,
            ff_hidden: 128,
            align_hidden: 64,
            image_size: 12,
            encoder: EncoderConfig::default(),
            concrete_tap: 2,
            abstract_tap: 3,
            tap_split: 3,
            comp: HLoraConfig {
                rank: 4,
                experts: 4,
                alpha: 4.0,
            },
            gen: HLoraConfig {
                rank: 8,
                experts: 4,
                alpha: 8.0,
            },
            shared_rank: 8,
            shared_alpha: 8.0,
            codebook_size: 64,
            d_code: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.ff_hidden == 0 || self.align_hidden == 0 || self.max_seq < 2 {
            return Err(Error::Config("layers, widths and max_seq must be positive".into()));
        }
        self.encoder.validate()?;
        if !self.image_size.is_multiple_of(self.encoder.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.encoder.patch_size
            )));
        }
        self.comp.validate()?;
        self.gen.validate()?;
        if self.shared_rank == 0 || self.shared_alpha.is_nan() || self.shared_alpha <= 0.0 {
            return Err(Error::Config("shared rank and alpha must be positive".into()));
        }
        GranularitySelection::new(self.concrete_tap, self.abstract_tap, self.tap_split, self.encoder.depth())?;
        VocabularyMap::new(text::text_vocab_size(), self.codebook_size)?;
        Ok(())
    }

    pub fn vocab(&self) -> VocabularyMap {
        VocabularyMap::new(text::text_vocab_size(), self.codebook_size).expect("validated vocabulary")
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        let n = self.image_size / self.encoder.patch_size;
        (n, n)
    }

    pub fn patches_per_image(&self) -> usize {
        let (r, c) = self.patch_grid();
        r * c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Task-gated plugins and per-task alignment adapters.
    HLora,
    /// One LoRA and one alignment adapter serving both tasks.
    SharedLora,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Adaptation {
    TaskGated {
        bank: PluginBank,
        comp_align: AlignmentAdapter,
        gen_align: AlignmentAdapter,
    },
    Shared {
        lora: BTreeMap<String, LoraAdapter>,
        align: AlignmentAdapter,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub proj: BTreeMap<&'static str, Linear>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Visual(ToyImage),
    Text(Vec<usize>),
    Response(Vec<usize>),
}

/// Visual positions carry no token id.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSequence {
    segments: Vec<Segment>,
    patches: usize,
}

impl JointSequence {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Visual(_) => self.patches,
                Segment::Text(t) | Segment::Response(t) => t.len(),
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.segments {
            match s {
                Segment::Visual(_) => out.extend(std::iter::repeat_n(None, self.patches)),
                Segment::Text(t) | Segment::Response(t) => out.extend(t.iter().copied().map(Some)),
            }
        }
        out
    }

    /// True exactly on response positions.
    pub fn loss_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.segments {
            match s {
                Segment::Visual(_) => out.extend(std::iter::repeat_n(false, self.patches)),
                Segment::Text(t) => out.extend(std::iter::repeat_n(false, t.len())),
                Segment::Response(t) => out.extend(std::iter::repeat_n(true, t.len())),
            }
        }
        out
    }

    pub fn image(&self) -> Option<&ToyImage> {
        self.segments.iter().find_map(|s| match s {
            Segment::Visual(img) => Some(img),
            _ => None,
        })
    }

    pub fn response(&self) -> Vec<usize> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Response(t) => Some(t.as_slice()),
                _ => None,
            })
            .flatten()
            .copied()
            .collect()
    }

    /// The same stream with the response removed.
    pub fn prompt(&self) -> JointSequence {
        JointSequence {
            segments: self
                .segments
                .iter()
                .filter(|s| !matches!(s, Segment::Response(_)))
                .cloned()
                .collect(),
            patches: self.patches,
        }
    }

    fn push_response_token(&mut self, id: usize) {
        match self.segments.last_mut() {
            Some(Segment::Response(t)) => t.push(id),
            _ => self.segments.push(Segment::Response(vec![id])),
        }
    }
}

/// What the model should answer with.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Text(Vec<usize>),
    /// Framed as `START_IMG`, the code tokens, `END_IMG`.
    Image(IndexSequence),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub tokens: Vec<usize>,
    pub indices: Option<IndexSequence>,
    pub image: Option<ToyImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub architecture: Architecture,
    pub store: ParamStore,
    pub encoder: EncoderStack,
    pub taps: GranularitySelection,
    tap_override: BTreeMap<TaskType, usize>,
    pub embed: ParamId,
    pub pos: ParamId,
    pub head: ParamId,
    pub blocks: Vec<Block>,
    pub adaptation: Adaptation,
    pub codec: VqCodec,
    pub vocab: VocabularyMap,
    /// Tags of the training stages applied so far, oldest first.
    pub history: Vec<String>,
}

fn projection_name(layer: usize, proj: &str) -> String {
    format!("layer{layer}.{proj}")
}

impl Model {
    /// Builds every parameter from named substreams of `seed`. The codec's
    /// codebook and projections are copied into the store under `vq.*`.
    pub fn new(config: ModelConfig, architecture: Architecture, codec: VqCodec, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = config.vocab();
        if codec.codebook.len() != config.codebook_size || codec.codebook.dim() != config.d_code {
            return Err(Error::Config(format!(
                "codec has {} codes of width {}, config wants {} of width {}",
                codec.codebook.len(),
                codec.codebook.dim(),
                config.codebook_size,
                config.d_code
            )));
        }
        if codec.latent.patch_size != config.encoder.patch_size {
            return Err(Error::Config("codec and encoder disagree on patch size".into()));
        }
        let d = config.d_model;
        let mut store = ParamStore::new();
        let encoder = EncoderStack::init(&mut store, config.encoder.clone(), &mut stream(seed, "model.vision"))?;
        let taps = GranularitySelection::new(config.concrete_tap, config.abstract_tap, config.tap_split, encoder.depth())?;

        let mut rng = stream(seed, "model.backbone");
        let embed = store.add("embed.tokens", ParamGroup::Embedding, Tensor::randn([vocab.total(), d], 1.0, &mut rng));
        let pos = store.add("backbone.pos", ParamGroup::Backbone, Tensor::randn([config.max_seq, d], 0.5, &mut rng));
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut proj = BTreeMap::new();
            for name in PROJECTIONS {
                let (d_in, d_out) = projection_dims(&config, name);
                let lin = Linear::init(
                    &mut store,
                    &format!("backbone.{}", projection_name(l, name)),
                    ParamGroup::Backbone,
                    d_in,
                    d_out,
                    false,
                    1.0,
                    &mut rng,
                );
                proj.insert(name, lin);
            }
            blocks.push(Block { proj });
        }
        let head = store.add(
            "head.weight",
            ParamGroup::Head,
            Tensor::randn([d, vocab.total()], 1.0 / (d as f64).sqrt(), &mut rng),
        );
        store.add("vq.codes", ParamGroup::Codec, codec.codebook.to_tensor());
        store.add("vq.latent_map", ParamGroup::Codec, codec.latent.encoder.clone());

        let projections: Vec<(String, usize, usize)> = (0..config.layers)
            .flat_map(|l| PROJECTIONS.iter().map(move |p| (l, *p)))
            .map(|(l, p)| {
                let (i, o) = projection_dims(&config, p);
                (projection_name(l, p), i, o)
            })
            .collect();
        let d_vis = config.encoder.d_vis;
        let adaptation = match architecture {
            Architecture::HLora => {
                let mut bank = PluginBank::new();
                for task in TaskType::ALL {
                    let cfg = match task {
                        TaskType::Comprehension => config.comp,
                        TaskType::Generation => config.gen,
                    };
                    let mut rng = stream(seed, &format!("model.plugins.{}", task.tag()));
                    bank.add_task(&mut store, task, cfg, &projections, &mut rng)?;
                }
                let mut rng = stream(seed, "model.align");
                let comp_align = AlignmentAdapter::init(&mut store, "adapter.comp", ParamGroup::CompAdapter, d_vis, config.align_hidden, d, &mut rng);
                let gen_align = AlignmentAdapter::init(&mut store, "adapter.gen", ParamGroup::GenAdapter, d_vis, config.align_hidden, d, &mut rng);
                Adaptation::TaskGated {
                    bank,
                    comp_align,
                    gen_align,
                }
            }
            Architecture::SharedLora => {
                let mut rng = stream(seed, "model.shared_lora");
                let mut lora = BTreeMap::new();
                for (name, i, o) in &projections {
                    let rank = config.shared_rank.min(*i).min(*o);
                    let ad = LoraAdapter::init(&mut store, &format!("lora.{name}"), ParamGroup::SharedLora, *i, *o, rank, config.shared_alpha, &mut rng)?;
                    lora.insert(name.clone(), ad);
                }
                let mut rng = stream(seed, "model.align");
                let align = AlignmentAdapter::init(&mut store, "adapter.shared", ParamGroup::SharedAdapter, d_vis, config.align_hidden, d, &mut rng);
                Adaptation::Shared { lora, align }
            }
        };
        Ok(Self {
            config,
            architecture,
            store,
            encoder,
            taps,
            tap_override: BTreeMap::new(),
            embed,
            pos,
            head,
            blocks,
            adaptation,
            codec,
            vocab,
            history: Vec::new(),
        })
    }

    /// Rebuilds the codec from the `vq.*` entries, e.g. after loading a checkpoint.
    pub fn refresh_codec(&mut self) -> Result<()> {
        let codes = self.store.get("vq.codes").ok_or_else(|| Error::Config("missing vq.codes".into()))?;
        let latent = self
            .store
            .get("vq.latent_map")
            .ok_or_else(|| Error::Config("missing vq.latent_map".into()))?;
        self.codec = VqCodec {
            codebook: Codebook::from_tensor(codes)?,
            latent: LatentMap::from_encoder(self.config.encoder.patch_size, latent.clone())?,
        };
        Ok(())
    }

    /// Feeds `task` from encoder block `tap` instead of its default granularity.
    pub fn set_tap(&mut self, task: TaskType, tap: usize) -> Result<()> {
        if tap == 0 || tap > self.encoder.depth() {
            return Err(Error::OutOfRange {
                what: "encoder tap",
                index: tap,
                len: self.encoder.depth(),
            });
        }
        self.tap_override.insert(task, tap);
        Ok(())
    }

    /// Task-gated models follow the granularity selection; the shared model
    /// reads the abstract tap for both tasks.
    pub fn tap_for(&self, task: TaskType) -> usize {
        if let Some(&t) = self.tap_override.get(&task) {
            return t;
        }
        match self.adaptation {
            Adaptation::TaskGated { .. } => self.taps.tap_for(task),
            Adaptation::Shared { .. } => self.taps.abstract_tap(),
        }
    }

    pub fn align_adapter(&self, task: TaskType) -> &AlignmentAdapter {
        match &self.adaptation {
            Adaptation::TaskGated {
                comp_align, gen_align, ..
            } => match task {
                TaskType::Comprehension => comp_align,
                TaskType::Generation => gen_align,
            },
            Adaptation::Shared { align, .. } => align,
        }
    }

    /// Image prefix, text, then the target with its loss mask.
    pub fn build_sequence(
        &self,
        image: Option<&ToyImage>,
        text: &[usize],
        target: Option<&Target>,
        task: TaskType,
    ) -> Result<JointSequence> {
        let mut segments = Vec::new();
        if let Some(img) = image {
            if img.rows() != self.config.image_size || img.cols() != self.config.image_size {
                return Err(Error::Shape {
                    op: "build_sequence image",
                    lhs: vec![img.rows(), img.cols()],
                    rhs: vec![self.config.image_size, self.config.image_size],
                });
            }
            segments.push(Segment::Visual(img.clone()));
        }
        if let Some(&bad) = text.iter().find(|&&t| !self.vocab.is_text(t)) {
            return Err(Error::OutOfRange {
                what: "text vocabulary",
                index: bad,
                len: self.vocab.text_vocab,
            });
        }
        if !text.is_empty() {
            segments.push(Segment::Text(text.to_vec()));
        }
        match target {
            None => {}
            Some(Target::Text(ids)) => {
                if task == TaskType::Generation {
                    return Err(Error::Config("generation targets are image index grids".into()));
                }
                if let Some(&bad) = ids.iter().find(|&&t| !self.vocab.is_text(t)) {
                    return Err(Error::OutOfRange {
                        what: "text vocabulary",
                        index: bad,
                        len: self.vocab.text_vocab,
                    });
                }
                segments.push(Segment::Response(ids.clone()));
            }
            Some(Target::Image(idx)) => {
                if task == TaskType::Comprehension {
                    return Err(Error::Config("comprehension targets are text".into()));
                }
                let mut ids = vec![self.vocab.start_img()];
                ids.extend(crate::vq::to_token_ids(idx, &self.vocab)?);
                ids.push(self.vocab.end_img());
                segments.push(Segment::Response(ids));
            }
        }
        let seq = JointSequence {
            segments,
            patches: self.config.patches_per_image(),
        };
        if seq.len() > self.config.max_seq {
            return Err(Error::SequenceLength {
                len: seq.len(),
                max: self.config.max_seq,
            });
        }
        Ok(seq)
    }

    #[allow(clippy::too_many_arguments)]
    fn project(
        &self,
        g: &mut Graph,
        x: Var,
        layer: usize,
        proj: &'static str,
        task: TaskType,
        adapters: bool,
        counter: &mut OpCounter,
    ) -> Result<Var> {
        let base = &self.blocks[layer].proj[proj];
        if !adapters {
            return base.forward(g, &self.store, x);
        }
        let name = projection_name(layer, proj);
        match &self.adaptation {
            Adaptation::TaskGated { bank, .. } => {
                let sub = bank.select(task)?.layer(&name)?;
                hlora_forward(g, &self.store, x, base, sub, counter)
            }
            Adaptation::Shared { lora, .. } => {
                let ad = lora
                    .get(&name)
                    .ok_or_else(|| Error::Config(format!("shared LoRA has no layer {name}")))?;
                lora_forward(g, &self.store, x, base, ad, counter)
            }
        }
    }

    fn embed_sequence(&self, g: &mut Graph, seq: &JointSequence, task: TaskType) -> Result<Var> {
        let table = g.param(&self.store, self.embed);
        let mut parts = Vec::with_capacity(seq.segments.len());
        for s in &seq.segments {
            match s {
                Segment::Visual(img) => {
                    let states = self.encoder.encode(g, &self.store, img)?;
                    let tap = self.tap_for(task);
                    let f = *states.get(tap - 1).ok_or(Error::OutOfRange {
                        what: "encoder tap",
                        index: tap,
                        len: states.len(),
                    })?;
                    parts.push(self.align_adapter(task).align(g, &self.store, f)?);
                }
                Segment::Text(ids) | Segment::Response(ids) => {
                    if !ids.is_empty() {
                        parts.push(g.gather_rows(table, ids)?);
                    }
                }
            }
        }
        if parts.is_empty() {
            return Err(Error::Config("empty sequence".into()));
        }
        let x = g.concat_rows(&parts)?;
        let pos = g.param(&self.store, self.pos);
        let positions: Vec<usize> = (0..seq.len()).collect();
        let p = g.gather_rows(pos, &positions)?;
        g.add(x, p)
    }

    fn forward_impl(
        &self,
        g: &mut Graph,
        seq: &JointSequence,
        task: TaskType,
        adapters: bool,
        counter: &mut OpCounter,
    ) -> Result<Var> {
        if seq.len() > self.config.max_seq {
            return Err(Error::SequenceLength {
                len: seq.len(),
                max: self.config.max_seq,
            });
        }
        let mut h = self.embed_sequence(g, seq, task)?;
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        for l in 0..self.blocks.len() {
            let x = g.layer_norm(h, LN_EPS)?;
            let q = self.project(g, x, l, "q", task, adapters, counter)?;
            let k = self.project(g, x, l, "k", task, adapters, counter)?;
            let v = self.project(g, x, l, "v", task, adapters, counter)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let kt = g.transpose(kh)?;
                let s = g.matmul(qh, kt)?;
                let s = g.scale(s, inv);
                let p = g.causal_softmax(s, 0)?;
                outs.push(g.matmul(p, vh)?);
            }
            let att = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
            let o = self.project(g, att, l, "o", task, adapters, counter)?;
            h = g.add(h, o)?;
            let x = g.layer_norm(h, LN_EPS)?;
            let f = self.project(g, x, l, "ff1", task, adapters, counter)?;
            let f = g.gelu(f);
            let f = self.project(g, f, l, "ff2", task, adapters, counter)?;
            h = g.add(h, f)?;
        }
        let x = g.layer_norm(h, LN_EPS)?;
        let w = g.param(&self.store, self.head);
        g.matmul(x, w)
    }

    /// Logits `len × vocab`; row `t` scores the token at position `t + 1`.
    pub fn forward(&self, g: &mut Graph, seq: &JointSequence, task: TaskType) -> Result<Var> {
        self.forward_impl(g, seq, task, true, &mut OpCounter::new())
    }

    /// Same pass with every adapter bypassed: the frozen backbone alone.
    pub fn forward_backbone(&self, g: &mut Graph, seq: &JointSequence, task: TaskType) -> Result<Var> {
        self.forward_impl(g, seq, task, false, &mut OpCounter::new())
    }

    /// Forward that also tallies adapter operations across every projection.
    pub fn forward_counted(&self, g: &mut Graph, seq: &JointSequence, task: TaskType, counter: &mut OpCounter) -> Result<Var> {
        self.forward_impl(g, seq, task, true, counter)
    }

    /// Teacher-forced next-token targets: `(targets, mask)` aligned with logit rows.
    pub fn next_token_targets(seq: &JointSequence) -> (Vec<usize>, Vec<bool>) {
        let tokens = seq.tokens();
        let mask = seq.loss_mask();
        let n = tokens.len();
        let mut targets = vec![0; n];
        let mut out_mask = vec![false; n];
        for t in 0..n.saturating_sub(1) {
            if mask[t + 1] {
                targets[t] = tokens[t + 1].expect("response positions carry tokens");
                out_mask[t] = true;
            }
        }
        (targets, out_mask)
    }

    /// Mean cross-entropy over the response positions.
    pub fn loss(&self, g: &mut Graph, seq: &JointSequence, task: TaskType) -> Result<Var> {
        let (targets, mask) = Self::next_token_targets(seq);
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyLoss);
        }
        let logits = self.forward(g, seq, task)?;
        g.cross_entropy(logits, &targets, &mask)
    }

    fn allowed(&self, task: TaskType) -> std::ops::Range<usize> {
        match task {
            TaskType::Comprehension => 0..self.vocab.text_vocab,
            TaskType::Generation => self.vocab.vq_base()..self.vocab.start_img(),
        }
    }

    /// Greedy prediction at every response position, restricted to the
    /// task's output range; image delimiters are reported as themselves.
    pub fn teacher_forced_predictions(&self, seq: &JointSequence, task: TaskType) -> Result<Vec<usize>> {
        let (targets, mask) = Self::next_token_targets(seq);
        let mut g = Graph::new();
        let logits = self.forward(&mut g, seq, task)?;
        let lt = g.value(logits);
        let range = self.allowed(task);
        let mut out = Vec::new();
        for (t, (&target, &m)) in targets.iter().zip(&mask).enumerate() {
            if !m {
                continue;
            }
            if target == self.vocab.start_img() || target == self.vocab.end_img() {
                out.push(target);
            } else {
                out.push(constrained_argmax(lt.row(t), range.clone()));
            }
        }
        Ok(out)
    }

    /// Greedy decoding. Generation emits `START_IMG`, exactly one code per
    /// patch, then `END_IMG`, and decodes the codes into an image.
    /// Comprehension emits text ids until `<eos>`.
    pub fn generate(&self, prompt: &JointSequence, task: TaskType, max_new: usize) -> Result<Generated> {
        let mut seq = prompt.prompt();
        let mut emitted = Vec::new();
        let n_codes = self.config.patches_per_image();
        let step = |seq: &mut JointSequence, emitted: &mut Vec<usize>, id: usize| -> Result<()> {
            if emitted.len() >= max_new || seq.len() >= self.config.max_seq {
                return Err(Error::Truncated {
                    partial: emitted.clone(),
                });
            }
            emitted.push(id);
            seq.push_response_token(id);
            Ok(())
        };
        match task {
            TaskType::Generation => {
                step(&mut seq, &mut emitted, self.vocab.start_img())?;
                for _ in 0..n_codes {
                    let next = self.next_token(&seq, task)?;
                    step(&mut seq, &mut emitted, next)?;
                }
                step(&mut seq, &mut emitted, self.vocab.end_img())?;
                let codes = &emitted[1..1 + n_codes];
                let idx = crate::vq::from_token_ids(codes, self.config.patch_grid(), &self.vocab)?;
                let image = self.codec.decode(&idx)?;
                Ok(Generated {
                    tokens: emitted,
                    indices: Some(idx),
                    image: Some(image),
                })
            }
            TaskType::Comprehension => loop {
                let next = self.next_token(&seq, task)?;
                step(&mut seq, &mut emitted, next)?;
                if next == text::EOS {
                    return Ok(Generated {
                        tokens: emitted,
                        indices: None,
                        image: None,
                    });
                }
            },
        }
    }

    fn next_token(&self, seq: &JointSequence, task: TaskType) -> Result<usize> {
        let mut g = Graph::new();
        let logits = self.forward(&mut g, seq, task)?;
        let lt = g.value(logits);
        Ok(constrained_argmax(lt.row(lt.rows() - 1), self.allowed(task)))
    }
}

fn projection_dims(config: &ModelConfig, proj: &str) -> (usize, usize) {
    let d = config.d_model;
    match proj {
        "ff1" => (d, config.ff_hidden),
        "ff2" => (config.ff_hidden, d),
        _ => (d, d),
    }
}

/// Highest logit inside `range`, lowest id on ties.
pub fn constrained_argmax(row: &[f64], range: std::ops::Range<usize>) -> usize {
    let mut best = range.start;
    for i in range {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}
