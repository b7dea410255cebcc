//! Small grayscale images and the shape renderer behind the synthetic tasks.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Square,
    Frame,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Frame, ShapeKind::Cross];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Frame => "frame",
            ShapeKind::Cross => "cross",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether pixel `(dr, dc)` of a `side`-wide box is inked.
    pub fn covers(self, side: usize, dr: usize, dc: usize) -> bool {
        match self {
            ShapeKind::Square => true,
            ShapeKind::Frame => dr == 0 || dc == 0 || dr + 1 == side || dc + 1 == side,
            ShapeKind::Cross => dr == side / 2 || dc == side / 2,
        }
    }
}

/// One drawn shape: kind, box side length and top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub side: usize,
    pub row: usize,
    pub col: usize,
}

/// Generator parameters an image was rendered from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct ImageMeta {
    pub shapes: Vec<PlacedShape>,
    pub inverted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyImage {
    rows: usize,
    cols: usize,
    pixels: Vec<f64>,
    pub meta: ImageMeta,
}

impl ToyImage {
    /// Values must lie in `[0, 1]`.
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || pixels.len() != rows * cols {
            return Err(Error::DataLength {
                shape: vec![rows, cols],
                len: pixels.len(),
            });
        }
        if let Some(bad) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(format!(
                "pixel {bad} = {} outside [0, 1]",
                pixels[bad]
            )));
        }
        Ok(Self {
            rows,
            cols,
            pixels,
            meta: ImageMeta::default(),
        })
    }

    pub fn blank(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols]).expect("blank image")
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    /// Independent uniform pixels.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let px = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
        Self::new(rows, cols, px).expect("unit pixels")
    }

    /// Draws every shape at intensity 1 on a black canvas. Shapes running past
    /// the border are clipped.
    pub fn render(rows: usize, cols: usize, shapes: &[PlacedShape]) -> Self {
        let mut img = Self::blank(rows, cols);
        for s in shapes {
            for dr in 0..s.side {
                for dc in 0..s.side {
                    let (r, c) = (s.row + dr, s.col + dc);
                    if r < rows && c < cols && s.kind.covers(s.side, dr, dc) {
                        img.pixels[r * cols + c] = 1.0;
                    }
                }
            }
        }
        img.meta.shapes = shapes.to_vec();
        img
    }

    /// `1 - x` everywhere.
    pub fn inverted(&self) -> Self {
        let mut out = self.clone();
        out.pixels.iter_mut().for_each(|v| *v = 1.0 - *v);
        out.meta.inverted = !self.meta.inverted;
        out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.cols + c]
    }

    /// Patch grid dimensions for square patches of `patch` pixels.
    pub fn patch_grid(&self, patch: usize) -> Result<(usize, usize)> {
        if patch == 0 || !self.rows.is_multiple_of(patch) || !self.cols.is_multiple_of(patch) {
            return Err(Error::Patching {
                rows: self.rows,
                cols: self.cols,
                patch,
            });
        }
        Ok((self.rows / patch, self.cols / patch))
    }

    /// Row-major list of flattened patches, each `patch²` long.
    pub fn patches(&self, patch: usize) -> Result<Vec<Vec<f64>>> {
        let (gr, gc) = self.patch_grid(patch)?;
        let mut out = Vec::with_capacity(gr * gc);
        for pr in 0..gr {
            for pc in 0..gc {
                let mut p = Vec::with_capacity(patch * patch);
                for r in 0..patch {
                    let start = (pr * patch + r) * self.cols + pc * patch;
                    p.extend_from_slice(&self.pixels[start..start + patch]);
                }
                out.push(p);
            }
        }
        Ok(out)
    }

    /// Inverse of [`patches`](Self::patches); values are clamped into `[0, 1]`.
    pub fn from_patches(grid: (usize, usize), patch: usize, patches: &[Vec<f64>]) -> Result<Self> {
        let (gr, gc) = grid;
        if patches.len() != gr * gc || patches.iter().any(|p| p.len() != patch * patch) {
            return Err(Error::DataLength {
                shape: vec![gr, gc, patch * patch],
                len: patches.len(),
            });
        }
        let cols = gc * patch;
        let mut pixels = vec![0.0; gr * patch * cols];
        for (i, p) in patches.iter().enumerate() {
            let (pr, pc) = (i / gc, i % gc);
            for r in 0..patch {
                for c in 0..patch {
                    pixels[(pr * patch + r) * cols + pc * patch + c] = p[r * patch + c].clamp(0.0, 1.0);
                }
            }
        }
        Self::new(gr * patch, cols, pixels)
    }

    pub fn mse(&self, other: &ToyImage) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let n = self.pixels.len() as f64;
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n
    }
}
