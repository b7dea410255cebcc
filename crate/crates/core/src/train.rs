//! Optimizer, per-stage trainability masks and the training protocols.
//!
//! The three-stage protocol:
//!
//! * `1c`: the comprehension alignment adapter and the word rows of the
//!   embedding and columns of the head. The backbone is random, so the words
//!   have no meaning until some stage teaches them.
//! * `1g`: the generation alignment adapter, generation plugins and the
//!   image-token rows of the embedding and columns of the head.
//! * `2`: embedding and head on a small mixture of both tasks.
//! * `3c` / `3g`: each task's plugins and alignment adapter on its own data.
//!
//! `mixed` is the baseline: one shared LoRA, one shared alignment adapter,
//! embedding and head, all trained on both tasks in a single stream.
//!
//! Masks are enforced mechanically. Every step checks that gradients exist
//! exactly on the trainable parameters the step touched, and every stage ends
//! with a bitwise comparison against the starting parameters.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::debug;
use rand::seq::SliceRandom;

use crate::data::{Sample, TaskSuite};
use crate::error::{Error, Result};
use crate::model::{Architecture, Model, Target};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::stream;
use crate::task::TaskType;
use crate::tensor::Graph;
use crate::vq::VocabularyMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    AlignComp,
    AlignGen,
    Harmonize,
    TuneComp,
    TuneGen,
    Mixed,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::AlignComp,
        Stage::AlignGen,
        Stage::Harmonize,
        Stage::TuneComp,
        Stage::TuneGen,
        Stage::Mixed,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Stage::AlignComp => "1c",
            Stage::AlignGen => "1g",
            Stage::Harmonize => "2",
            Stage::TuneComp => "3c",
            Stage::TuneGen => "3g",
            Stage::Mixed => "mixed",
        }
    }

    /// The task a single-task stage trains on.
    pub fn task(self) -> Option<TaskType> {
        match self {
            Stage::AlignComp | Stage::TuneComp => Some(TaskType::Comprehension),
            Stage::AlignGen | Stage::TuneGen => Some(TaskType::Generation),
            Stage::Harmonize | Stage::Mixed => None,
        }
    }

    pub fn mask(self) -> StageMask {
        use ParamGroup::*;
        let (groups, rows): (&[ParamGroup], VocabRows) = match self {
            Stage::AlignComp => (&[CompAdapter, Embedding, Head], VocabRows::Text),
            Stage::AlignGen => (&[GenAdapter, GenPlugin, Embedding, Head], VocabRows::Image),
            Stage::Harmonize => (&[Embedding, Head], VocabRows::All),
            Stage::TuneComp => (&[CompPlugin, CompAdapter], VocabRows::All),
            Stage::TuneGen => (&[GenPlugin, GenAdapter], VocabRows::All),
            Stage::Mixed => (&[SharedLora, SharedAdapter, Embedding, Head], VocabRows::All),
        };
        StageMask {
            groups: groups.iter().copied().collect(),
            rows,
        }
    }

    /// Ordering rules of the protocol, checked against the model's history.
    pub fn check_preconditions(self, model: &Model) -> Result<()> {
        let has = |t: &str| model.history.iter().any(|h| h == t);
        let fail = |msg: &str| Err(Error::Config(format!("stage {}: {msg}", self.tag())));
        match (self, model.architecture) {
            (Stage::Mixed, Architecture::SharedLora) => {
                if model.history.iter().any(|h| h != "mixed") {
                    return fail("the mixed baseline starts from a fresh shared model");
                }
                Ok(())
            }
            (Stage::Mixed, _) => fail("the mixed baseline needs the shared-LoRA architecture"),
            (_, Architecture::SharedLora) => fail("staged training needs task-gated plugins"),
            (Stage::AlignComp | Stage::AlignGen, _) => {
                if ["2", "3c", "3g"].iter().any(|t| has(t)) {
                    return fail("alignment runs before harmonization");
                }
                Ok(())
            }
            (Stage::Harmonize, _) => {
                if !(has("1c") && has("1g")) {
                    return fail("requires both alignment stages (1c, 1g)");
                }
                if has("3c") || has("3g") {
                    return fail("harmonization runs before instruction tuning");
                }
                Ok(())
            }
            (Stage::TuneComp | Stage::TuneGen, _) => {
                if !has("2") {
                    return fail("requires a stage-2 checkpoint");
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}; expected 1c, 1g, 2, 3c, 3g or mixed")))
    }
}

/// Which vocabulary entries of the embedding (rows) and head (columns) may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VocabRows {
    #[default]
    All,
    /// Words only.
    Text,
    /// Codebook ids and the two image delimiters.
    Image,
}

impl VocabRows {
    fn contains(self, id: usize, vocab: &VocabularyMap) -> bool {
        match self {
            VocabRows::All => true,
            VocabRows::Text => vocab.is_text(id),
            VocabRows::Image => vocab.image_range().contains(&id),
        }
    }
}

/// Trainable groups of one stage, optionally restricted to part of the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageMask {
    pub groups: BTreeSet<ParamGroup>,
    pub rows: VocabRows,
}

impl StageMask {
    pub fn apply(&self, store: &mut ParamStore) {
        let groups: Vec<ParamGroup> = self.groups.iter().copied().collect();
        store.set_trainable_groups(&groups);
    }

    pub fn allows(&self, group: ParamGroup) -> bool {
        self.groups.contains(&group)
    }

    /// Whether element `i` of a tensor in `group` with `cols` columns may change.
    pub fn element_allowed(&self, group: ParamGroup, cols: usize, i: usize, vocab: &VocabularyMap) -> bool {
        if !self.allows(group) {
            return false;
        }
        match group {
            ParamGroup::Embedding => self.rows.contains(i / cols, vocab),
            ParamGroup::Head => self.rows.contains(i % cols, vocab),
            _ => true,
        }
    }

    fn filter_grad(&self, group: ParamGroup, cols: usize, grad: &mut [f64], vocab: &VocabularyMap) {
        if self.rows == VocabRows::All || !matches!(group, ParamGroup::Embedding | ParamGroup::Head) {
            return;
        }
        for (i, g) in grad.iter_mut().enumerate() {
            if !self.element_allowed(group, cols, i, vocab) {
                *g = 0.0;
            }
        }
    }
}

/// Compares two snapshots: frozen parameters and masked-out elements must be
/// bit-identical, and every parameter in `must_move` must have changed.
pub fn audit_changes(
    before: &ParamStore,
    after: &ParamStore,
    mask: &StageMask,
    vocab: &VocabularyMap,
    must_move: &BTreeSet<ParamId>,
) -> Result<()> {
    for ((id, b), (_, a)) in before.iter().zip(after.iter()) {
        let cols = *b.tensor.shape().last().unwrap_or(&1);
        let (bd, ad) = (b.tensor.data(), a.tensor.data());
        let mut moved = false;
        for (i, (x, y)) in bd.iter().zip(ad).enumerate() {
            if x.to_bits() == y.to_bits() {
                continue;
            }
            if !mask.element_allowed(b.group, cols, i, vocab) {
                return Err(Error::MaskViolation(format!(
                    "{} ({}) changed at element {i}",
                    b.name, b.group
                )));
            }
            moved = true;
        }
        if must_move.contains(&id) && !moved {
            return Err(Error::MaskViolation(format!("trainable {} ({}) never changed", b.name, b.group)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// Linear warmup over the first `warmup` steps, then cosine decay to 10%.
    WarmupDecay { warmup: usize },
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub group_lr: HashMap<ParamGroup, f64>,
    pub schedule: Schedule,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Global gradient-norm threshold.
    pub clip: Option<f64>,
    /// Log the running training loss every this many steps.
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(lr: f64, steps: usize, batch: usize, schedule: Schedule, seed: u64) -> Self {
        Self {
            lr,
            group_lr: HashMap::new(),
            schedule,
            batch,
            steps,
            seed,
            clip: Some(1.0),
            log_every: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.lr].iter().chain(self.group_lr.values()).any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let Some(c) = self.clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config("clip threshold must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn lr_factor(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => 1.0,
            Schedule::WarmupDecay { warmup } => {
                if step < warmup {
                    (step + 1) as f64 / warmup as f64
                } else {
                    let span = self.steps.saturating_sub(warmup).max(1) as f64;
                    let p = ((step - warmup) as f64 / span).min(1.0);
                    0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
                }
            }
        }
    }

    pub fn lr_for(&self, group: ParamGroup) -> f64 {
        self.group_lr.get(&group).copied().unwrap_or(self.lr)
    }
}

/// Adam without weight decay; moments are created lazily per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: HashMap<ParamId, i32>,
    m: HashMap<ParamId, Vec<f64>>,
    v: HashMap<ParamId, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: HashMap::new(),
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn update(&mut self, store: &mut ParamStore, id: ParamId, grad: &[f64], lr: f64) {
        let n = grad.len();
        let t = self.t.entry(id).or_insert(0);
        *t += 1;
        let (c1, c2) = (1.0 - self.beta1.powi(*t), 1.0 - self.beta2.powi(*t));
        let m = self.m.entry(id).or_insert_with(|| vec![0.0; n]);
        let v = self.v.entry(id).or_insert_with(|| vec![0.0; n]);
        let p = store.tensor_mut(id).data_mut();
        for i in 0..n {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            p[i] -= step;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub stage: String,
    pub step: usize,
    pub task: String,
    pub loss: f64,
    pub metric_name: String,
    pub metric_value: f64,
}

/// Rows for the `run_id,stage,step,task,loss,metric_name,metric_value` CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

pub const METRICS_TAG: &str = "# hlora-metrics v1";
pub const METRICS_HEADER: &str = "run_id,stage,step,task,loss,metric_name,metric_value";

impl MetricsLog {
    #[allow(clippy::too_many_arguments)]
    pub fn push(&mut self, run_id: &str, stage: &str, step: usize, task: &str, loss: f64, name: &str, value: f64) {
        self.rows.push(MetricRow {
            run_id: run_id.to_string(),
            stage: stage.to_string(),
            step,
            task: task.to_string(),
            loss,
            metric_name: name.to_string(),
            metric_value: value,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_TAG}\n{METRICS_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.run_id, r.stage, r.step, r.task, r.loss, r.metric_name, r.metric_value
            ));
        }
        s
    }

    /// Appends rows, writing the tag and header only into a new or empty file.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let csv = self.to_csv();
        let body = if fresh {
            csv.as_str()
        } else {
            csv.splitn(3, '\n').nth(2).unwrap_or("")
        };
        f.write_all(body.as_bytes())
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub label: String,
    pub steps: usize,
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
    /// Steps on which the gradient norm was clipped.
    pub clipped: usize,
}

impl StageReport {
    /// Mean loss over the first and the last `window` steps.
    pub fn loss_ends(&self, window: usize) -> (f64, f64) {
        if self.losses.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let w = window.min(self.losses.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.losses[..w]), mean(&self.losses[self.losses.len() - w..]))
    }
}

/// Batches of sample indices. Task-homogeneous batching keeps every batch to
/// one task; otherwise samples are shuffled together.
fn epoch_batches(data: &[Sample], batch: usize, homogeneous: bool, rng: &mut crate::rng::StreamRng) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if homogeneous {
        for task in TaskType::ALL {
            let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].task == task).collect();
            idx.shuffle(rng);
            out.extend(idx.chunks(batch).map(<[usize]>::to_vec));
        }
    } else {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(rng);
        out.extend(idx.chunks(batch).map(<[usize]>::to_vec));
    }
    out.shuffle(rng);
    out
}

/// Generic masked training loop shared by every stage.
#[allow(clippy::too_many_arguments)]
pub fn train_with_mask(
    model: &mut Model,
    data: &[Sample],
    mask: &StageMask,
    label: &str,
    cfg: &TrainConfig,
    homogeneous: bool,
    log: &mut MetricsLog,
    run_id: &str,
) -> Result<StageReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config(format!("stage {label}: no training data")));
    }
    mask.apply(&mut model.store);
    let before = model.store.clone();
    let mut rng = stream(cfg.seed, &format!("train.{label}"));
    let mut adam = Adam::default();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut clipped = 0;
    let mut updated = BTreeSet::new();
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let vocab = model.vocab;
    let task_tag = {
        let tasks: BTreeSet<TaskType> = data.iter().map(|s| s.task).collect();
        if tasks.len() == 1 {
            tasks.iter().next().expect("one task").tag()
        } else {
            "both"
        }
    };

    for step in 0..cfg.steps {
        if queue.is_empty() {
            queue = epoch_batches(data, cfg.batch, homogeneous, &mut rng);
            queue.reverse();
        }
        let batch = queue.pop().expect("nonempty epoch");
        let mut g = Graph::new();
        let mut total = None;
        let mut weight_sum = 0.0;
        for &i in &batch {
            let s = &data[i];
            let seq = model.build_sequence(s.image.as_ref(), &s.text, Some(&s.target), s.task)?;
            let l = model.loss(&mut g, &seq, s.task)?;
            // Token-level mean over the whole batch.
            let w = seq.loss_mask().iter().filter(|&&m| m).count() as f64;
            weight_sum += w;
            let l = g.scale(l, w);
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let total = total.expect("nonempty batch");
        let loss = g.scale(total, 1.0 / weight_sum);
        g.backward(loss)?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Config(format!("stage {label}: loss diverged at step {step}")));
        }
        losses.push(loss_value);

        let mut grads: Vec<(ParamId, Vec<f64>)> = g.param_grads().map(|(id, gr)| (id, gr.to_vec())).collect();
        let with_grad: BTreeSet<ParamId> = grads.iter().map(|(id, _)| *id).collect();
        for id in g.param_ids() {
            let e = model.store.entry(id);
            if e.trainable != mask.allows(e.group) {
                return Err(Error::MaskViolation(format!("{} trainability drifted from the stage mask", e.name)));
            }
            if e.trainable != with_grad.contains(&id) {
                return Err(Error::MaskViolation(format!(
                    "{} ({}) trainable={} but gradient present={}",
                    e.name,
                    e.group,
                    e.trainable,
                    with_grad.contains(&id)
                )));
            }
        }
        if grads.is_empty() {
            return Err(Error::MaskViolation(format!("stage {label}: no trainable parameter received a gradient")));
        }
        for (id, gr) in grads.iter_mut() {
            let e = model.store.entry(*id);
            let cols = *e.tensor.shape().last().unwrap_or(&1);
            mask.filter_grad(e.group, cols, gr, &vocab);
        }
        if let Some(c) = cfg.clip {
            let norm = grads.iter().flat_map(|(_, g)| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > c {
                clipped += 1;
                debug!("stage {label} step {step}: gradient norm {norm:.3} clipped to {c}");
                let f = c / norm;
                grads.iter_mut().for_each(|(_, g)| g.iter_mut().for_each(|v| *v *= f));
            }
        }
        let factor = cfg.lr_factor(step);
        for (id, gr) in &grads {
            updated.insert(*id);
            let lr = cfg.lr_for(model.store.entry(*id).group) * factor;
            adam.update(&mut model.store, *id, gr, lr);
        }
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            let w = &losses[losses.len().saturating_sub(cfg.log_every)..];
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            log.push(run_id, label, step + 1, task_tag, mean, "lr", cfg.lr * factor);
        }
    }
    audit_changes(&before, &model.store, mask, &vocab, &updated)?;
    model.store.freeze_all();
    Ok(StageReport {
        label: label.to_string(),
        steps: cfg.steps,
        losses,
        clipped,
    })
}

fn run_stage(
    model: &mut Model,
    data: &[Sample],
    stage: Stage,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
    run_id: &str,
) -> Result<StageReport> {
    stage.check_preconditions(model)?;
    if let Some(task) = stage.task() {
        if let Some(bad) = data.iter().find(|s| s.task != task) {
            return Err(Error::Config(format!(
                "stage {stage} trains on {task} data but got a {} sample",
                bad.task
            )));
        }
    }
    let report = train_with_mask(model, data, &stage.mask(), stage.tag(), cfg, stage != Stage::Mixed, log, run_id)?;
    model.history.push(stage.tag().to_string());
    Ok(report)
}

/// Alignment for one task: `1c` or `1g`.
pub fn run_stage1(
    model: &mut Model,
    data: &[Sample],
    task: TaskType,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
    run_id: &str,
) -> Result<StageReport> {
    let stage = match task {
        TaskType::Comprehension => Stage::AlignComp,
        TaskType::Generation => Stage::AlignGen,
    };
    run_stage(model, data, stage, cfg, log, run_id)
}

/// Embedding and head only, on a mixture of both tasks.
pub fn run_stage2(
    model: &mut Model,
    mixture: &[Sample],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
    run_id: &str,
) -> Result<StageReport> {
    run_stage(model, mixture, Stage::Harmonize, cfg, log, run_id)
}

/// Plugins and alignment adapter of one task: `3c` or `3g`.
pub fn run_stage3(
    model: &mut Model,
    data: &[Sample],
    task: TaskType,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
    run_id: &str,
) -> Result<StageReport> {
    let stage = match task {
        TaskType::Comprehension => Stage::TuneComp,
        TaskType::Generation => Stage::TuneGen,
    };
    run_stage(model, data, stage, cfg, log, run_id)
}

/// The single-stream baseline over both tasks.
pub fn run_mixed_baseline(
    model: &mut Model,
    data_both: &[Sample],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
    run_id: &str,
) -> Result<StageReport> {
    run_stage(model, data_both, Stage::Mixed, cfg, log, run_id)
}

/// `frac` of the combined data, split evenly between the tasks.
pub fn stage2_mixture(comp: &[Sample], gen: &[Sample], frac: f64, seed: u64) -> Vec<Sample> {
    let total = ((comp.len() + gen.len()) as f64 * frac).round().max(2.0) as usize;
    let per = total / 2;
    let mut rng = stream(seed, "train.mixture");
    let mut pick = |src: &[Sample]| -> Vec<Sample> {
        let mut idx: Vec<usize> = (0..src.len()).collect();
        idx.shuffle(&mut rng);
        idx.into_iter().take(per.min(src.len())).map(|i| src[i].clone()).collect()
    };
    let mut out = pick(comp);
    out.extend(pick(gen));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalMetrics {
    /// Fraction of comprehension answers reproduced exactly, `<eos>` included.
    pub comp_accuracy: f64,
    /// Fraction of image codes predicted correctly under teacher forcing.
    pub gen_index_accuracy: f64,
    /// Pixel MSE between the decoded predicted codes and the exact target image.
    pub gen_mse: f64,
    pub comp_loss: f64,
    pub gen_loss: f64,
}

/// Scores both validation sets; either may be empty.
pub fn evaluate(model: &Model, comp: &[Sample], gen: &[Sample]) -> Result<EvalMetrics> {
    let mut m = EvalMetrics::default();
    for s in comp {
        let seq = model.build_sequence(s.image.as_ref(), &s.text, Some(&s.target), s.task)?;
        let pred = model.teacher_forced_predictions(&seq, s.task)?;
        let Target::Text(want) = &s.target else {
            return Err(Error::Config("comprehension sample with an image target".into()));
        };
        if &pred == want {
            m.comp_accuracy += 1.0;
        }
        let mut g = Graph::new();
        let l = model.loss(&mut g, &seq, s.task)?;
        m.comp_loss += g.value(l).item();
    }
    let mut codes = 0usize;
    for s in gen {
        let seq = model.build_sequence(s.image.as_ref(), &s.text, Some(&s.target), s.task)?;
        let pred = model.teacher_forced_predictions(&seq, s.task)?;
        let Target::Image(want) = &s.target else {
            return Err(Error::Config("generation sample with a text target".into()));
        };
        let got = &pred[1..pred.len() - 1];
        let got_idx: Vec<usize> = got.iter().map(|&t| t - model.vocab.vq_base()).collect();
        m.gen_index_accuracy += got_idx.iter().zip(want.indices()).filter(|(a, b)| a == b).count() as f64;
        codes += want.len();
        let decoded = model.codec.decode(&crate::vq::IndexSequence::new(got_idx, want.shape(), model.vocab.codebook_size)?)?;
        let reference = match &s.target_image {
            Some(img) => img.clone(),
            None => model.codec.decode(want)?,
        };
        m.gen_mse += decoded.mse(&reference);
        let mut g = Graph::new();
        let l = model.loss(&mut g, &seq, s.task)?;
        m.gen_loss += g.value(l).item();
    }
    if !comp.is_empty() {
        let n = comp.len() as f64;
        m.comp_accuracy /= n;
        m.comp_loss /= n;
    }
    if !gen.is_empty() {
        m.gen_index_accuracy /= codes as f64;
        m.gen_mse /= gen.len() as f64;
        m.gen_loss /= gen.len() as f64;
    }
    Ok(m)
}

pub fn log_eval(log: &mut MetricsLog, run_id: &str, stage: &str, step: usize, m: &EvalMetrics) {
    log.push(run_id, stage, step, "comp", m.comp_loss, "exact_match", m.comp_accuracy);
    log.push(run_id, stage, step, "gen", m.gen_loss, "index_accuracy", m.gen_index_accuracy);
    log.push(run_id, stage, step, "gen", m.gen_loss, "image_mse", m.gen_mse);
}

/// Step budgets and rates of the full protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub steps_1c: usize,
    pub steps_1g: usize,
    pub steps_2: usize,
    pub steps_3c: usize,
    pub steps_3g: usize,
    pub batch: usize,
    pub lr_align: f64,
    pub lr_harmonize: f64,
    pub lr_tune: f64,
    pub lr_mixed: f64,
    pub warmup_frac: f64,
    pub clip: Option<f64>,
    pub mixture_frac: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            steps_1c: 200,
            steps_1g: 200,
            steps_2: 100,
            steps_3c: 1000,
            steps_3g: 500,
            batch: 8,
            lr_align: 3e-3,
            lr_harmonize: 1e-3,
            lr_tune: 3e-3,
            lr_mixed: 3e-3,
            warmup_frac: 0.1,
            clip: Some(1.0),
            mixture_frac: 0.05,
        }
    }
}

impl ProtocolConfig {
    pub fn total_steps(&self) -> usize {
        self.steps_1c + self.steps_1g + self.steps_2 + self.steps_3c + self.steps_3g
    }

    pub fn stage_config(&self, stage: Stage, seed: u64) -> TrainConfig {
        let (lr, steps) = match stage {
            Stage::AlignComp => (self.lr_align, self.steps_1c),
            Stage::AlignGen => (self.lr_align, self.steps_1g),
            Stage::Harmonize => (self.lr_harmonize, self.steps_2),
            Stage::TuneComp => (self.lr_tune, self.steps_3c),
            Stage::TuneGen => (self.lr_tune, self.steps_3g),
            Stage::Mixed => (self.lr_mixed, self.total_steps()),
        };
        let schedule = match stage {
            Stage::Harmonize => Schedule::Constant,
            _ => Schedule::WarmupDecay {
                warmup: ((steps as f64 * self.warmup_frac).round() as usize).max(1),
            },
        };
        let mut cfg = TrainConfig::new(lr, steps, self.batch, schedule, seed);
        cfg.clip = self.clip;
        cfg
    }
}

/// Runs `stage` with the data the protocol assigns to it.
pub fn run_protocol_stage(
    model: &mut Model,
    suite: &TaskSuite,
    stage: Stage,
    protocol: &ProtocolConfig,
    seed: u64,
    log: &mut MetricsLog,
    run_id: &str,
) -> Result<StageReport> {
    let cfg = protocol.stage_config(stage, seed);
    match stage {
        Stage::AlignComp => run_stage1(model, &suite.comp_train, TaskType::Comprehension, &cfg, log, run_id),
        Stage::AlignGen => run_stage1(model, &suite.gen_train, TaskType::Generation, &cfg, log, run_id),
        Stage::Harmonize => {
            let mix = stage2_mixture(&suite.comp_train, &suite.gen_train, protocol.mixture_frac, seed);
            run_stage2(model, &mix, &cfg, log, run_id)
        }
        Stage::TuneComp => run_stage3(model, &suite.comp_train, TaskType::Comprehension, &cfg, log, run_id),
        Stage::TuneGen => run_stage3(model, &suite.gen_train, TaskType::Generation, &cfg, log, run_id),
        Stage::Mixed => {
            let mut both = suite.comp_train.clone();
            both.extend(suite.gen_train.iter().cloned());
            run_mixed_baseline(model, &both, &cfg, log, run_id)
        }
    }
}

/// `1c, 1g, 2, 3c, 3g` in order, evaluating on the validation sets after each.
pub fn run_three_stage(
    model: &mut Model,
    suite: &TaskSuite,
    protocol: &ProtocolConfig,
    seed: u64,
    log: &mut MetricsLog,
    run_id: &str,
) -> Result<(Vec<StageReport>, Vec<EvalMetrics>)> {
    let mut reports = Vec::new();
    let mut evals = Vec::new();
    for stage in [Stage::AlignComp, Stage::AlignGen, Stage::Harmonize, Stage::TuneComp, Stage::TuneGen] {
        let r = run_protocol_stage(model, suite, stage, protocol, seed, log, run_id)?;
        let m = evaluate(model, &suite.comp_val, &suite.gen_val)?;
        log_eval(log, run_id, stage.tag(), r.steps, &m);
        reports.push(r);
        evals.push(m);
    }
    Ok((reports, evals))
}

/// One point of a conflict sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub ratio: f64,
    pub comp_metric: f64,
    pub gen_metric: f64,
}

impl SweepPoint {
    pub fn metric(&self, task: TaskType) -> f64 {
        match task {
            TaskType::Comprehension => self.comp_metric,
            TaskType::Generation => self.gen_metric,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
    pub primary: TaskType,
    /// Primary-task samples, fixed across ratios.
    pub primary_count: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

/// Groups trained during a sweep run.
pub fn sweep_mask(arch: Architecture) -> StageMask {
    use ParamGroup::*;
    let groups: &[ParamGroup] = match arch {
        Architecture::HLora => &[CompPlugin, GenPlugin, CompAdapter, GenAdapter, Embedding, Head],
        Architecture::SharedLora => &[SharedLora, SharedAdapter, Embedding, Head],
    };
    StageMask {
        groups: groups.iter().copied().collect(),
        rows: VocabRows::All,
    }
}

/// Fixed primary data plus `ratio × primary_count` samples of the other task,
/// trained for a fixed number of epochs with mixed batches, then
/// scored on both validation sets. `make_model` builds a fresh model per ratio.
pub fn conflict_sweep(
    make_model: &dyn Fn() -> Result<Model>,
    suite: &TaskSuite,
    cfg: &SweepConfig,
    seed: u64,
    log: &mut MetricsLog,
    run_id: &str,
) -> Result<Vec<SweepPoint>> {
    let (primary, other) = match cfg.primary {
        TaskType::Comprehension => (&suite.comp_train, &suite.gen_train),
        TaskType::Generation => (&suite.gen_train, &suite.comp_train),
    };
    if cfg.primary_count == 0 || cfg.primary_count > primary.len() {
        return Err(Error::Config(format!(
            "primary count {} outside 1..={}",
            cfg.primary_count,
            primary.len()
        )));
    }
    let mut points = Vec::with_capacity(cfg.ratios.len());
    for &ratio in &cfg.ratios {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!("ratio {ratio} outside [0, 1]")));
        }
        let extra = (ratio * cfg.primary_count as f64).round() as usize;
        if extra > other.len() {
            return Err(Error::Config(format!("ratio {ratio} needs {extra} other-task samples, have {}", other.len())));
        }
        let mut data: Vec<Sample> = primary[..cfg.primary_count].to_vec();
        data.extend(other[..extra].iter().cloned());
        let batches_per_epoch = cfg.primary_count.div_ceil(cfg.batch) + extra.div_ceil(cfg.batch);
        let steps = batches_per_epoch * cfg.epochs;
        let mut model = make_model()?;
        let arch = model.architecture;
        let tcfg = TrainConfig::new(
            cfg.lr,
            steps,
            cfg.batch,
            Schedule::WarmupDecay {
                warmup: (steps / 10).max(1),
            },
            seed,
        );
        let label = format!("sweep{ratio}");
        train_with_mask(&mut model, &data, &sweep_mask(arch), &label, &tcfg, false, log, run_id)?;
        let m = evaluate(&model, &suite.comp_val, &suite.gen_val)?;
        log_eval(log, run_id, &label, steps, &m);
        points.push(SweepPoint {
            ratio,
            comp_metric: m.comp_accuracy,
            gen_metric: m.gen_index_accuracy,
        });
    }
    Ok(points)
}

/// Trains one task's plugins, alignment adapter, embedding and head on a fresh
/// model that reads encoder block `tap`, and returns that task's validation loss.
#[allow(clippy::too_many_arguments)]
pub fn tap_probe(
    make_model: &dyn Fn() -> Result<Model>,
    suite: &TaskSuite,
    task: TaskType,
    tap: usize,
    steps: usize,
    lr: f64,
    seed: u64,
    log: &mut MetricsLog,
    run_id: &str,
) -> Result<f64> {
    use ParamGroup::*;
    let mut model = make_model()?;
    if model.architecture != Architecture::HLora {
        return Err(Error::Config("tap probes need task-gated plugins".into()));
    }
    model.set_tap(task, tap)?;
    let (train, groups, val_comp, val_gen): (_, [ParamGroup; 4], &[Sample], &[Sample]) = match task {
        TaskType::Comprehension => (&suite.comp_train, [CompPlugin, CompAdapter, Embedding, Head], &suite.comp_val, &[]),
        TaskType::Generation => (&suite.gen_train, [GenPlugin, GenAdapter, Embedding, Head], &[], &suite.gen_val),
    };
    let mask = StageMask {
        groups: groups.into_iter().collect(),
        rows: VocabRows::All,
    };
    let cfg = TrainConfig::new(lr, steps, 8, Schedule::WarmupDecay { warmup: steps / 10 }, seed);
    let label = format!("tap{tap}.{}", task.tag());
    train_with_mask(&mut model, train, &mask, &label, &cfg, true, log, run_id)?;
    let m = evaluate(&model, val_comp, val_gen)?;
    log_eval(log, run_id, &label, steps, &m);
    Ok(match task {
        TaskType::Comprehension => m.comp_loss,
        TaskType::Generation => m.gen_loss,
    })
}

pub const SWEEP_TAG: &str = "# hlora-sweep v1";
pub const SWEEP_HEADER: &str = "arch,primary,seed,ratio,comp_metric,gen_metric";

pub fn sweep_csv(arch: Architecture, primary: TaskType, seed: u64, points: &[SweepPoint]) -> String {
    let name = match arch {
        Architecture::HLora => "hlora",
        Architecture::SharedLora => "shared",
    };
    let mut s = String::new();
    for p in points {
        s.push_str(&format!(
            "{name},{},{seed},{},{},{}\n",
            primary.tag(),
            p.ratio,
            p.comp_metric,
            p.gen_metric
        ));
    }
    s
}

/// Average ranks, ties sharing the mean of the positions they span.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of average ranks. Zero when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 40.0]) - 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), 0.0);
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn schedules() {
        let c = TrainConfig::new(1.0, 100, 4, Schedule::WarmupDecay { warmup: 10 }, 0);
        assert!((c.lr_factor(0) - 0.1).abs() < 1e-12);
        assert!((c.lr_factor(9) - 1.0).abs() < 1e-12);
        assert!((c.lr_factor(10) - 1.0).abs() < 1e-12);
        assert!(c.lr_factor(99) < 0.11);
        let k = TrainConfig::new(1.0, 100, 4, Schedule::Constant, 0);
        assert!((0..100).all(|s| k.lr_factor(s) == 1.0));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", ParamGroup::Head, crate::tensor::Tensor::new([3], vec![1.0, 1.0, 1.0]).unwrap());
        let mut adam = Adam::default();
        adam.update(&mut store, id, &[2.0, -0.5, 0.0], 0.1);
        let d = store.tensor(id).data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] - 1.1).abs() < 1e-6);
        assert_eq!(d[2], 1.0);
    }

    #[test]
    fn stage_masks_never_touch_frozen_backbone() {
        for st in Stage::ALL {
            let m = st.mask();
            assert!(!m.allows(ParamGroup::Backbone) && !m.allows(ParamGroup::VisionEncoder) && !m.allows(ParamGroup::Codec));
        }
        assert!("3x".parse::<Stage>().is_err());
        assert_eq!("3g".parse::<Stage>().unwrap(), Stage::TuneGen);
    }

    #[test]
    fn image_row_mask() {
        let vocab = VocabularyMap::new(10, 4).unwrap();
        let m = Stage::AlignGen.mask();
        // embedding is 16 x 2, head 2 x 16
        assert!(!m.element_allowed(ParamGroup::Embedding, 2, 2 * 9 + 1, &vocab));
        assert!(m.element_allowed(ParamGroup::Embedding, 2, 2 * 10, &vocab));
        assert!(m.element_allowed(ParamGroup::Head, 16, 16 + 15, &vocab));
        assert!(!m.element_allowed(ParamGroup::Head, 16, 16 + 3, &vocab));
        let m = Stage::AlignComp.mask();
        assert!(m.element_allowed(ParamGroup::Embedding, 2, 2 * 9 + 1, &vocab));
        assert!(!m.element_allowed(ParamGroup::Embedding, 2, 2 * 10, &vocab));
        assert!(m.element_allowed(ParamGroup::Head, 16, 16 + 3, &vocab));
        assert!(!m.element_allowed(ParamGroup::Head, 16, 16 + 10, &vocab));
    }

    #[test]
    fn metrics_csv_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut log = MetricsLog::default();
        log.push("r1", "1c", 10, "comp", 0.5, "lr", 0.001);
        log.append_to(&path).unwrap();
        log.append_to(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), METRICS_TAG);
        assert_eq!(text.lines().nth(1).unwrap(), METRICS_HEADER);
    }
}
