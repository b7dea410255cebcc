//! Synthetic comprehension and generation tasks with exact labels.
//!
//! Every image is a 12×12 canvas split into a 3×3 grid of 4×4 cells; shapes
//! sit inside single cells so each patch holds at most one of them.

use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{ImageMeta, PlacedShape, ShapeKind, ToyImage};
use crate::model::Target;
use crate::rng::{stream, StreamRng};
use crate::task::TaskType;
use crate::text;
use crate::vq::VqCodec;

pub const IMAGE_SIZE: usize = 12;
pub const CELL: usize = 4;
pub const CELLS: usize = 9;
/// Most shapes in an inversion scene.
pub const MAX_COUNT: usize = 4;
/// Most shapes in a question scene; answers are single digits.
pub const MAX_QA_COUNT: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// Single-kind scene plus `count?` or `kind?`, answered with one word.
    CompQa,
    /// `draw shape=… size=… pos=…` to the codes of the rendered image.
    GenFromText,
    /// Image plus `invert` to the codes of its negative.
    GenTransform,
}

impl TaskKind {
    pub fn task(self) -> TaskType {
        match self {
            TaskKind::CompQa => TaskType::Comprehension,
            TaskKind::GenFromText | TaskKind::GenTransform => TaskType::Generation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seed: u64,
    pub count: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub task: TaskType,
    pub kind: TaskKind,
    pub image: Option<ToyImage>,
    pub text: Vec<usize>,
    pub target: Target,
    /// The exact image a generation sample should produce.
    pub target_image: Option<ToyImage>,
}

/// A `draw` prompt: kind, size in `1..=3` (side `size + 1`) and cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DrawSpec {
    pub kind: ShapeKind,
    pub size: usize,
    pub cell: usize,
}

impl DrawSpec {
    pub fn all() -> Vec<DrawSpec> {
        let mut out = Vec::new();
        for kind in ShapeKind::ALL {
            for size in 1..=3 {
                for cell in 0..CELLS {
                    out.push(DrawSpec { kind, size, cell });
                }
            }
        }
        out
    }

    pub fn render(&self) -> ToyImage {
        let (r, c) = cell_origin(self.cell);
        ToyImage::render(
            IMAGE_SIZE,
            IMAGE_SIZE,
            &[PlacedShape {
                kind: self.kind,
                side: self.size + 1,
                row: r,
                col: c,
            }],
        )
    }

    pub fn prompt(&self) -> Vec<usize> {
        vec![
            text::id_of("draw").expect("draw"),
            text::shape_attr(self.kind),
            text::size_attr(self.size),
            text::pos_attr(self.cell),
        ]
    }

    /// Fixed train/val partition of the 81 prompts; about one in five is held out.
    pub fn split(&self) -> Split {
        let k = self.kind.index();
        if (k + 2 * self.size + 4 * self.cell).is_multiple_of(5) {
            Split::Val
        } else {
            Split::Train
        }
    }
}

fn cell_origin(cell: usize) -> (usize, usize) {
    ((cell / 3) * CELL, (cell % 3) * CELL)
}

/// One shape per listed kind, in distinct cells, each with a side drawn from
/// `sides` at a random offset inside its cell.
pub fn random_scene<R: Rng + ?Sized>(kinds: &[ShapeKind], sides: RangeInclusive<usize>, rng: &mut R) -> ToyImage {
    assert!(kinds.len() <= CELLS, "more shapes than cells");
    let mut cells: Vec<usize> = (0..CELLS).collect();
    cells.shuffle(rng);
    let shapes: Vec<PlacedShape> = kinds
        .iter()
        .zip(&cells)
        .map(|(&kind, &cell)| {
            let side = rng.random_range(sides.clone());
            let (r, c) = cell_origin(cell);
            PlacedShape {
                kind,
                side,
                row: r + rng.random_range(0..=CELL - side),
                col: c + rng.random_range(0..=CELL - side),
            }
        })
        .collect();
    ToyImage::render(IMAGE_SIZE, IMAGE_SIZE, &shapes)
}

/// 1 to `max` shapes, all of one kind.
fn random_kinds<R: Rng + ?Sized>(max: usize, rng: &mut R) -> Vec<ShapeKind> {
    let count = rng.random_range(1..=max);
    vec![ShapeKind::ALL[rng.random_range(0..3)]; count]
}

fn scene_key(meta: &ImageMeta) -> Vec<(usize, usize, usize, usize)> {
    let mut k: Vec<_> = meta.shapes.iter().map(|s| (s.kind.index(), s.side, s.row, s.col)).collect();
    k.sort_unstable();
    k
}

/// Scenes are assigned to a split by a hash of their layout, so the two
/// splits never share an image.
fn scene_split(meta: &ImageMeta) -> Split {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (a, b, c, d) in scene_key(meta) {
        for v in [a, b, c, d] {
            h ^= v as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    if h.is_multiple_of(5) {
        Split::Val
    } else {
        Split::Train
    }
}

/// Question scenes use side 3 only: there the kinds ink 9, 8 and 5 pixels, so
/// both kind and count are recoverable from the pixels. Side-2 squares and
/// frames would render identically.
pub const QA_SIDES: RangeInclusive<usize> = 3..=3;
pub const TRANSFORM_SIDES: RangeInclusive<usize> = 2..=4;

fn next_scene(rng: &mut StreamRng, split: Split, sides: RangeInclusive<usize>, max: usize) -> ToyImage {
    loop {
        let kinds = random_kinds(max, rng);
        let img = random_scene(&kinds, sides.clone(), rng);
        if scene_split(&img.meta) == split {
            return img;
        }
    }
}

/// Deterministic in `(kind, seed, count, split)`. Generation targets are the
/// codec's encoding of the exact rendered image.
pub fn make_dataset(task: &SyntheticTask, codec: &VqCodec) -> Result<Vec<Sample>> {
    if task.count == 0 {
        return Err(Error::Config("dataset needs a positive sample count".into()));
    }
    let tag = match task.split {
        Split::Train => "train",
        Split::Val => "val",
    };
    let mut rng = stream(task.seed, &format!("data.{:?}.{tag}", task.kind));
    let mut out = Vec::with_capacity(task.count);
    match task.kind {
        TaskKind::CompQa => {
            let count_q = text::id_of("count?")?;
            let kind_q = text::id_of("kind?")?;
            for _ in 0..task.count {
                let img = next_scene(&mut rng, task.split, QA_SIDES, MAX_QA_COUNT);
                let shapes = &img.meta.shapes;
                let (q, answer) = if rng.random_bool(0.5) {
                    (vec![count_q], text::digit(shapes.len()))
                } else {
                    (vec![kind_q], text::shape_word(shapes[0].kind))
                };
                out.push(Sample {
                    task: TaskType::Comprehension,
                    kind: task.kind,
                    image: Some(img),
                    text: q,
                    target: Target::Text(vec![answer, text::EOS]),
                    target_image: None,
                });
            }
        }
        TaskKind::GenFromText => {
            let mut specs: Vec<DrawSpec> = DrawSpec::all().into_iter().filter(|s| s.split() == task.split).collect();
            specs.shuffle(&mut rng);
            for i in 0..task.count {
                let spec = specs[i % specs.len()];
                let img = spec.render();
                out.push(Sample {
                    task: TaskType::Generation,
                    kind: task.kind,
                    image: None,
                    text: spec.prompt(),
                    target: Target::Image(codec.encode(&img)?),
                    target_image: Some(img),
                });
            }
        }
        TaskKind::GenTransform => {
            let invert = text::id_of("invert")?;
            for _ in 0..task.count {
                let img = next_scene(&mut rng, task.split, TRANSFORM_SIDES, MAX_COUNT);
                let inverted = img.inverted();
                out.push(Sample {
                    task: TaskType::Generation,
                    kind: task.kind,
                    image: Some(img),
                    text: vec![invert],
                    target: Target::Image(codec.encode(&inverted)?),
                    target_image: Some(inverted),
                });
            }
        }
    }
    Ok(out)
}

/// Images spanning every generator and their negatives, for fitting the codebook.
pub fn codec_corpus(seed: u64, scenes: usize) -> Vec<ToyImage> {
    let mut rng = stream(seed, "data.codec_corpus");
    let mut out: Vec<ToyImage> = DrawSpec::all().iter().map(DrawSpec::render).collect();
    for _ in 0..scenes {
        let kinds = random_kinds(MAX_COUNT, &mut rng);
        out.push(random_scene(&kinds, TRANSFORM_SIDES, &mut rng));
    }
    let inverted: Vec<ToyImage> = out.iter().map(ToyImage::inverted).collect();
    out.extend(inverted);
    out
}

/// Seeded codec over [`codec_corpus`]: patch 4, `k` codes of width `d_code`.
pub fn fit_codec(seed: u64, k: usize, d_code: usize) -> Result<VqCodec> {
    let corpus = codec_corpus(seed, 300);
    VqCodec::fit(&corpus, CELL, d_code, k, seed, &mut stream(seed, "data.latent_map"))
}

/// Suite of train and val sets used by the experiments.
#[derive(Debug, Clone)]
pub struct TaskSuite {
    pub comp_train: Vec<Sample>,
    pub gen_train: Vec<Sample>,
    pub comp_val: Vec<Sample>,
    pub gen_val: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteSize {
    pub comp_train: usize,
    pub gen_train: usize,
    pub comp_val: usize,
    pub gen_val: usize,
}

impl Default for SuiteSize {
    fn default() -> Self {
        Self {
            comp_train: 600,
            gen_train: 600,
            comp_val: 400,
            gen_val: 400,
        }
    }
}

impl TaskSuite {
    /// Generation sets are half text-to-image, half inversion.
    pub fn build(seed: u64, size: SuiteSize, codec: &VqCodec) -> Result<Self> {
        let make = |kind, count, split| make_dataset(&SyntheticTask { kind, seed, count, split }, codec);
        let gen = |count: usize, split| -> Result<Vec<Sample>> {
            let a = make(TaskKind::GenFromText, count / 2, split)?;
            let b = make(TaskKind::GenTransform, count - count / 2, split)?;
            Ok(interleave(a, b))
        };
        Ok(Self {
            comp_train: make(TaskKind::CompQa, size.comp_train, Split::Train)?,
            gen_train: gen(size.gen_train, Split::Train)?,
            comp_val: make(TaskKind::CompQa, size.comp_val, Split::Val)?,
            gen_val: gen(size.gen_val, Split::Val)?,
        })
    }
}

fn interleave(a: Vec<Sample>, b: Vec<Sample>) -> Vec<Sample> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut ia, mut ib) = (a.into_iter(), b.into_iter());
    loop {
        match (ia.next(), ib.next()) {
            (None, None) => return out,
            (x, y) => out.extend(x.into_iter().chain(y)),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn codec() -> VqCodec {
        fit_codec(1, 64, 8).unwrap()
    }

    #[test]
    fn comp_labels_match_metadata() {
        let c = codec();
        let ds = make_dataset(&SyntheticTask { kind: TaskKind::CompQa, seed: 2, count: 50, split: Split::Train }, &c).unwrap();
        for s in &ds {
            let img = s.image.as_ref().unwrap();
            let Target::Text(ans) = &s.target else { panic!() };
            assert_eq!(ans[1], text::EOS);
            let shapes = &img.meta.shapes;
            if s.text[0] == text::id_of("count?").unwrap() {
                assert_eq!(ans[0], text::digit(shapes.len()));
            } else {
                assert_eq!(ans[0], text::shape_word(shapes[0].kind));
            }
        }
    }

    #[test]
    fn three_squares_answer_three() {
        let mut rng = stream(0, "t");
        let img = random_scene(&[ShapeKind::Square; 3], QA_SIDES, &mut rng);
        assert_eq!(img.meta.shapes.len(), 3);
        let ink: f64 = img.pixels().iter().sum();
        let expect: usize = img.meta.shapes.iter().map(|s| s.side * s.side).sum();
        assert_eq!(ink, expect as f64);
    }

    #[test]
    fn draw_targets_are_rendered_encodings() {
        let c = codec();
        let ds = make_dataset(&SyntheticTask { kind: TaskKind::GenFromText, seed: 3, count: 20, split: Split::Train }, &c).unwrap();
        for s in &ds {
            let spec = DrawSpec {
                kind: ShapeKind::ALL[s.text[1] - text::shape_attr(ShapeKind::Square)],
                size: s.text[2] - text::size_attr(1) + 1,
                cell: s.text[3] - text::pos_attr(0),
            };
            assert_eq!(s.target, Target::Image(c.encode(&spec.render()).unwrap()));
        }
        let spec = text::tokenize("draw shape=square;size=2 pos=0").unwrap();
        let sq = DrawSpec { kind: ShapeKind::Square, size: 2, cell: 0 };
        assert_eq!(sq.prompt(), spec);
    }

    #[test]
    fn splits_are_disjoint() {
        let c = codec();
        let specs = DrawSpec::all();
        let val = specs.iter().filter(|s| s.split() == Split::Val).count();
        assert!(val > 10 && val < 25);
        for kind in [TaskKind::CompQa, TaskKind::GenTransform] {
            let tr = make_dataset(&SyntheticTask { kind, seed: 4, count: 200, split: Split::Train }, &c).unwrap();
            let va = make_dataset(&SyntheticTask { kind, seed: 4, count: 100, split: Split::Val }, &c).unwrap();
            let keys: HashSet<_> = tr.iter().map(|s| scene_key(&s.image.as_ref().unwrap().meta)).collect();
            assert!(va.iter().all(|s| !keys.contains(&scene_key(&s.image.as_ref().unwrap().meta))));
        }
    }

    #[test]
    fn datasets_are_deterministic() {
        let c = codec();
        let t = SyntheticTask { kind: TaskKind::GenTransform, seed: 5, count: 10, split: Split::Val };
        assert_eq!(make_dataset(&t, &c).unwrap(), make_dataset(&t, &c).unwrap());
        assert!(make_dataset(&SyntheticTask { count: 0, ..t }, &c).is_err());
    }
}
