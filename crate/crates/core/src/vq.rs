//! Discrete image tokens: codebook fitting, nearest-code quantization, patch
//! decoding and the map between code indices and language-model token ids.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ToyImage;
use crate::rng::stream;
use crate::tensor::Tensor;

const MIN_CODE_SEPARATION: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codes: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

impl Codebook {
    /// At least two finite, pairwise distinct codes of one dimension.
    pub fn new(codes: Vec<Vec<f64>>) -> Result<Self> {
        if codes.len() < 2 {
            return Err(Error::Config(format!("codebook needs K >= 2, got {}", codes.len())));
        }
        let dim = codes[0].len();
        if dim == 0 || codes.iter().any(|c| c.len() != dim) {
            return Err(Error::Config("codes must share a positive dimension".into()));
        }
        if codes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("codes must be finite".into()));
        }
        for i in 0..codes.len() {
            for j in i + 1..codes.len() {
                if sq_dist(&codes[i], &codes[j]).sqrt() <= MIN_CODE_SEPARATION {
                    return Err(Error::Config(format!("codes {i} and {j} coincide")));
                }
            }
        }
        Ok(Self { codes })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.codes[0].len()
    }

    pub fn code(&self, j: usize) -> &[f64] {
        &self.codes[j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.len(), self.dim()], self.codes.concat()).expect("codebook tensor")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Config("codebook tensor must be 2-D".into()));
        }
        Self::new(t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect())
    }
}

/// Lloyd iterations from a seeded k-means++ start. Deterministic for a given seed.
pub fn fit_codebook(samples: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<Codebook> {
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for s in samples {
        if distinct.len() >= k {
            break;
        }
        if !distinct.contains(&s) {
            distinct.push(s);
        }
    }
    if k < 2 || distinct.len() < k {
        return Err(Error::TooFewSamples {
            needed: k.max(2),
            found: distinct.len(),
        });
    }
    let mut rng = stream(seed, "vq.fit");
    let mut centers: Vec<Vec<f64>> = vec![samples[rng.random_range(0..samples.len())].clone()];
    let mut nearest: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = nearest.iter().rposition(|&d| d > 0.0).expect("distinct samples remain");
        for (i, &d) in nearest.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = samples[pick].clone();
        for (n, s) in nearest.iter_mut().zip(samples) {
            *n = n.min(sq_dist(s, &c));
        }
        centers.push(c);
    }

    let dim = samples[0].len();
    let mut assign = vec![usize::MAX; samples.len()];
    for _ in 0..max_iters {
        let mut changed = false;
        for (a, s) in assign.iter_mut().zip(samples) {
            let j = nearest_index(s, &centers);
            if *a != j {
                *a = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, s) in assign.iter().zip(samples) {
            counts[a] += 1;
            sums[a].iter_mut().zip(s).for_each(|(x, y)| *x += y);
        }
        for ((c, sum), &n) in centers.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = sum.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    Codebook::new(centers)
}

fn nearest_index(z: &[f64], codes: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in codes.iter().enumerate() {
        let d = sq_dist(z, c);
        // strict comparison keeps the lowest index on ties
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// `argmin_k ‖z − z_k‖₂`, ties toward the lowest index.
pub fn quantize(z: &[f64], cb: &Codebook) -> Result<usize> {
    if z.len() != cb.dim() {
        return Err(Error::Shape {
            op: "quantize",
            lhs: vec![z.len()],
            rhs: vec![cb.len(), cb.dim()],
        });
    }
    Ok(nearest_index(z, &cb.codes))
}

/// Row-major code ids over a patch grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IndexSequence {
    indices: Vec<usize>,
    shape: (usize, usize),
}

impl IndexSequence {
    pub fn new(indices: Vec<usize>, shape: (usize, usize), codebook_size: usize) -> Result<Self> {
        if shape.0 * shape.1 != indices.len() {
            return Err(Error::DataLength {
                shape: vec![shape.0, shape.1],
                len: indices.len(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= codebook_size) {
            return Err(Error::OutOfRange {
                what: "codebook",
                index: bad,
                len: codebook_size,
            });
        }
        Ok(Self { indices, shape })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Fixed patch↔latent projections standing in for a learned encoder/decoder.
/// `decoder` is the least-squares pseudo-inverse of `encoder`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMap {
    pub patch_size: usize,
    pub encoder: Tensor,
    pub decoder: Tensor,
}

impl LatentMap {
    pub fn random<R: Rng + ?Sized>(patch_size: usize, d_code: usize, rng: &mut R) -> Result<Self> {
        let p2 = patch_size * patch_size;
        let encoder = Tensor::randn([p2, d_code], 1.0 / (p2 as f64).sqrt(), rng);
        Self::from_encoder(patch_size, encoder)
    }

    pub fn from_encoder(patch_size: usize, encoder: Tensor) -> Result<Self> {
        let p2 = patch_size * patch_size;
        if encoder.shape() != [p2, encoder.cols()] {
            return Err(Error::Config("latent map rows must equal patch pixels".into()));
        }
        let d = encoder.cols();
        let m = DMatrix::from_row_slice(p2, d, encoder.data());
        let pinv = m
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Config(format!("latent map pseudo-inverse: {e}")))?;
        let mut dec = Vec::with_capacity(d * p2);
        for r in 0..d {
            for c in 0..p2 {
                dec.push(pinv[(r, c)]);
            }
        }
        Ok(Self {
            patch_size,
            encoder,
            decoder: Tensor::new([d, p2], dec)?,
        })
    }

    pub fn d_code(&self) -> usize {
        self.encoder.cols()
    }

    pub fn to_latent(&self, patch: &[f64]) -> Vec<f64> {
        let d = self.d_code();
        let mut z = vec![0.0; d];
        for (i, &p) in patch.iter().enumerate() {
            for (zj, w) in z.iter_mut().zip(self.encoder.row(i)) {
                *zj += p * w;
            }
        }
        z
    }

    /// Unclamped patch reconstruction from a latent.
    pub fn to_patch(&self, z: &[f64]) -> Vec<f64> {
        let p2 = self.patch_size * self.patch_size;
        let mut p = vec![0.0; p2];
        for (j, &zj) in z.iter().enumerate() {
            for (pi, w) in p.iter_mut().zip(self.decoder.row(j)) {
                *pi += zj * w;
            }
        }
        p
    }
}

/// Per-patch latents of an image, in patch order.
pub fn patch_latents(image: &ToyImage, latent: &LatentMap) -> Result<Vec<Vec<f64>>> {
    Ok(image
        .patches(latent.patch_size)?
        .iter()
        .map(|p| latent.to_latent(p))
        .collect())
}

pub fn encode_image(image: &ToyImage, cb: &Codebook, latent: &LatentMap) -> Result<IndexSequence> {
    let grid = image.patch_grid(latent.patch_size)?;
    let indices = patch_latents(image, latent)?
        .iter()
        .map(|z| quantize(z, cb))
        .collect::<Result<Vec<_>>>()?;
    IndexSequence::new(indices, grid, cb.len())
}

/// Maps every code back to a patch and reassembles, clamping into `[0, 1]`.
pub fn decode_indices(idx: &IndexSequence, cb: &Codebook, latent: &LatentMap) -> Result<ToyImage> {
    let patches = idx
        .indices
        .iter()
        .map(|&i| {
            if i >= cb.len() {
                return Err(Error::OutOfRange {
                    what: "codebook",
                    index: i,
                    len: cb.len(),
                });
            }
            Ok(latent.to_patch(cb.code(i)))
        })
        .collect::<Result<Vec<_>>>()?;
    ToyImage::from_patches(idx.shape, latent.patch_size, &patches)
}

/// Codebook plus its projections, frozen once fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct VqCodec {
    pub codebook: Codebook,
    pub latent: LatentMap,
}

impl VqCodec {
    pub fn encode(&self, image: &ToyImage) -> Result<IndexSequence> {
        encode_image(image, &self.codebook, &self.latent)
    }

    pub fn decode(&self, idx: &IndexSequence) -> Result<ToyImage> {
        decode_indices(idx, &self.codebook, &self.latent)
    }

    /// Fits `k` codes to the patch latents of `corpus`.
    pub fn fit<R: Rng + ?Sized>(
        corpus: &[ToyImage],
        patch_size: usize,
        d_code: usize,
        k: usize,
        seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        let latent = LatentMap::random(patch_size, d_code, rng)?;
        let mut samples = Vec::new();
        for img in corpus {
            samples.extend(patch_latents(img, &latent)?);
        }
        let codebook = fit_codebook(&samples, k, seed, 100)?;
        Ok(Self { codebook, latent })
    }
}

/// Pixel MSE left after replacing every patch by its nearest code: the best
/// any decode of `image` can do under `codec`.
pub fn quantization_floor(image: &ToyImage, codec: &VqCodec) -> Result<f64> {
    Ok(image.mse(&codec.decode(&codec.encode(image)?)?))
}

/// Layout of the extended vocabulary: text ids, then code ids, then the two
/// image delimiters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabularyMap {
    pub text_vocab: usize,
    pub codebook_size: usize,
}

impl VocabularyMap {
    pub fn new(text_vocab: usize, codebook_size: usize) -> Result<Self> {
        if text_vocab == 0 || codebook_size < 2 {
            return Err(Error::Config("vocabulary needs text ids and K >= 2 codes".into()));
        }
        Ok(Self {
            text_vocab,
            codebook_size,
        })
    }

    pub fn vq_base(&self) -> usize {
        self.text_vocab
    }

    pub fn start_img(&self) -> usize {
        self.text_vocab + self.codebook_size
    }

    pub fn end_img(&self) -> usize {
        self.start_img() + 1
    }

    pub fn total(&self) -> usize {
        self.text_vocab + self.codebook_size + 2
    }

    pub fn is_text(&self, id: usize) -> bool {
        id < self.text_vocab
    }

    pub fn is_vq(&self, id: usize) -> bool {
        (self.vq_base()..self.start_img()).contains(&id)
    }

    /// Token ids of the image range: codes plus both delimiters.
    pub fn image_range(&self) -> std::ops::Range<usize> {
        self.vq_base()..self.total()
    }

    pub fn index_to_token(&self, index: usize) -> Result<usize> {
        if index >= self.codebook_size {
            return Err(Error::OutOfRange {
                what: "codebook",
                index,
                len: self.codebook_size,
            });
        }
        Ok(self.vq_base() + index)
    }

    pub fn token_to_index(&self, token: usize) -> Result<usize> {
        if !self.is_vq(token) {
            return Err(Error::OutOfRange {
                what: "vq token range",
                index: token,
                len: self.codebook_size,
            });
        }
        Ok(token - self.vq_base())
    }
}

pub fn to_token_ids(idx: &IndexSequence, vm: &VocabularyMap) -> Result<Vec<usize>> {
    idx.indices.iter().map(|&i| vm.index_to_token(i)).collect()
}

pub fn from_token_ids(tokens: &[usize], shape: (usize, usize), vm: &VocabularyMap) -> Result<IndexSequence> {
    let indices = tokens
        .iter()
        .map(|&t| vm.token_to_index(t))
        .collect::<Result<Vec<_>>>()?;
    IndexSequence::new(indices, shape, vm.codebook_size)
}
