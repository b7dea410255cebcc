//! Plain (P2) portable graymap I/O with pixel values in `[0, 1]`.

use std::path::Path;

use hlora_core::image::ToyImage;
use hlora_core::{Error, Result};

pub const PGM_TAG: &str = "# hlora-pgm v1";
const MAXVAL: u32 = 255;

pub fn to_pgm(img: &ToyImage) -> String {
    let mut s = format!("P2\n{PGM_TAG}\n{} {}\n{MAXVAL}\n", img.cols(), img.rows());
    for r in 0..img.rows() {
        let row: Vec<String> = (0..img.cols())
            .map(|c| {
                let v = (img.get(r, c).clamp(0.0, 1.0) * f64::from(MAXVAL)).round() as u32;
                v.to_string()
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn from_pgm(text: &str) -> Result<ToyImage> {
    let bad = |m: &str| Error::Config(format!("pgm: {m}"));
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(bad("expected plain graymap magic P2"));
    }
    let mut num = || -> Result<u32> {
        tokens
            .next()
            .ok_or_else(|| bad("truncated"))?
            .parse()
            .map_err(|_| bad("non-numeric field"))
    };
    let cols = num()? as usize;
    let rows = num()? as usize;
    let maxval = num()?;
    if maxval == 0 {
        return Err(bad("maxval must be positive"));
    }
    let mut pixels = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let v = num()?;
        if v > maxval {
            return Err(bad("pixel exceeds maxval"));
        }
        pixels.push(f64::from(v) / f64::from(maxval));
    }
    if tokens.next().is_some() {
        return Err(bad("trailing data"));
    }
    ToyImage::new(rows, cols, pixels)
}

pub fn read(path: &Path) -> Result<ToyImage> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    from_pgm(&text)
}

pub fn write(path: &Path, img: &ToyImage) -> Result<()> {
    std::fs::write(path, to_pgm(img)).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}
