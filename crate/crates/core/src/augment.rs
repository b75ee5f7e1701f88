//! Offline rotation and the online crop → erase → noise → mixup pipeline.
//!
//! Rotation runs once over the training set. The online steps run per batch
//! and draw their randomness from per-image streams derived from an
//! [`RngKey`], so results do not depend on processing order.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{RngKey, SeededRng};
use crate::{Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Pixels removed from both height and width by the random crop.
    pub crop_reduction: usize,
    /// Side of the square erased per image.
    pub erase_extent: usize,
    /// Gaussian noise standard deviation, in units of the [0, 1] range.
    pub noise_sigma: f64,
    /// Symmetric Beta(α, α) parameter for the second mixup sub-batch.
    pub mixup_beta_alpha: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_reduction: 10,
            erase_extent: 20,
            noise_sigma: 0.01,
            mixup_beta_alpha: 0.2,
            seed: 0,
        }
    }
}

/// Images `[N, H, W, 3]` with values in [0, 1] and label rows `[N, C]` on
/// the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Tensor,
}

impl Batch {
    pub fn new(images: Tensor, labels: Tensor) -> Result<Self> {
        if images.rank() != 4 || labels.rank() != 2 || images.shape()[0] != labels.shape()[0] {
            return Err(Error::shape("batch", images.shape(), labels.shape()));
        }
        Ok(Self { images, labels })
    }

    /// One-hot labels over `num_classes`.
    pub fn one_hot(images: Tensor, classes: &[usize], num_classes: usize) -> Result<Self> {
        let mut labels = Tensor::zeros([classes.len(), num_classes]);
        for (i, &c) in classes.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::arg("class index out of range"));
            }
            labels.data_mut()[i * num_classes + c] = 1.0;
        }
        Self::new(images, labels)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.images.shape();
        (s[0], s[1], s[2], s[3])
    }

    fn image_len(&self) -> usize {
        self.images.numel() / self.len()
    }
}

/// Rotates one `[H, W, C]` image by 90° clockwise.
pub fn rotate90(img: &Tensor) -> Result<Tensor> {
    let &[h, w, c] = img.shape() else {
        return Err(Error::InvalidShape {
            shape: img.shape().to_vec(),
            reason: "rotation expects [H, W, C]",
        });
    };
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    // out[i][j] = in[h - 1 - j][i], output is w × h
    for i in 0..w {
        for j in 0..h {
            let s = ((h - 1 - j) * w + i) * c;
            let d = (i * h + j) * c;
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Tensor::new([w, h, c], out)
}

/// Each square image followed by its 90°, 180° and 270° rotations.
pub fn rotate_dataset(images: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len() * 4);
    for img in images {
        let s = img.shape();
        if s.len() != 3 || s[0] != s[1] {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "rotation needs square [H, H, C] images",
            });
        }
        let r90 = rotate90(img)?;
        let r180 = rotate90(&r90)?;
        let r270 = rotate90(&r180)?;
        out.extend([img.clone(), r90, r180, r270]);
    }
    Ok(out)
}

/// Bilinear resize of an `[h, w, c]` slice to `[oh, ow, c]` with
/// half-pixel centres.
fn resize_bilinear(src: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![0.0; oh * ow * c];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch] as f64;
                let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                out[(y * ow + x) * c + ch] = (top * (1.0 - ty) + bot * ty) as f32;
            }
        }
    }
    out
}

/// `λ·a + (1 − λ)·b`, elementwise.
pub fn mix(a: &[f32], b: &[f32], lambda: f64) -> Vec<f32> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (lambda * x as f64 + (1.0 - lambda) * y as f64) as f32)
        .collect()
}

/// Online augmentation steps. Tracks how many random words it consumed.
#[derive(Clone, Debug)]
pub struct OnlineAugmenter {
    cfg: AugmentConfig,
    draws: u64,
}

impl OnlineAugmenter {
    pub fn new(cfg: AugmentConfig) -> Result<Self> {
        if !(cfg.noise_sigma >= 0.0) {
            return Err(Error::arg("noise_sigma must be non-negative"));
        }
        if !(cfg.mixup_beta_alpha > 0.0) {
            return Err(Error::arg("mixup_beta_alpha must be positive"));
        }
        Ok(Self { cfg, draws: 0 })
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.cfg
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    fn with_rng<T>(&mut self, key: RngKey, f: impl FnOnce(&mut SeededRng) -> T) -> T {
        let mut rng = key.rng();
        let out = f(&mut rng);
        self.draws += rng.draws();
        out
    }

    /// Full pipeline in order: crop, erase, noise, mixup. `N` in, `3N` out.
    pub fn apply(&mut self, batch: &Batch, key: RngKey) -> Result<Batch> {
        let b = self.random_crop(batch, key)?;
        let b = self.random_erase(&b, key)?;
        let b = self.add_gaussian_noise(&b, key)?;
        self.mixup(&b, key)
    }

    /// Crops a `(H−k)×(W−k)` window at a uniform offset and resizes it back.
    pub fn random_crop(&mut self, batch: &Batch, key: RngKey) -> Result<Batch> {
        let k = self.cfg.crop_reduction;
        let (n, h, w, c) = batch.dims();
        if k >= h.min(w) {
            return Err(Error::arg("crop_reduction must be smaller than the image side"));
        }
        if k == 0 {
            return Ok(batch.clone());
        }
        let (ch, cw) = (h - k, w - k);
        let len = batch.image_len();
        let mut out = Vec::with_capacity(batch.images.numel());
        let key = key.derive_tag("crop");
        for i in 0..n {
            let (oy, ox) = self.with_rng(key.derive(i as u64), |r| (r.random_range(0..=k), r.random_range(0..=k)));
            let img = &batch.images.data()[i * len..(i + 1) * len];
            let mut window = Vec::with_capacity(ch * cw * c);
            for y in oy..oy + ch {
                window.extend_from_slice(&img[(y * w + ox) * c..(y * w + ox + cw) * c]);
            }
            out.extend(resize_bilinear(&window, ch, cw, c, h, w));
        }
        Ok(Batch {
            images: Tensor::new(batch.images.shape(), out)?,
            labels: batch.labels.clone(),
        })
    }

    /// Zeroes one `e×e` square per image across all channels.
    pub fn random_erase(&mut self, batch: &Batch, key: RngKey) -> Result<Batch> {
        let e = self.cfg.erase_extent;
        let (n, h, w, c) = batch.dims();
        if e > h.min(w) {
            return Err(Error::arg("erase_extent exceeds the image side"));
        }
        let mut images = batch.images.clone();
        if e == 0 {
            return Ok(batch.clone());
        }
        let len = batch.image_len();
        let key = key.derive_tag("erase");
        for i in 0..n {
            let (y0, x0) = self.with_rng(key.derive(i as u64), |r| (r.random_range(0..=h - e), r.random_range(0..=w - e)));
            let img = &mut images.data_mut()[i * len..(i + 1) * len];
            for y in y0..y0 + e {
                img[(y * w + x0) * c..(y * w + x0 + e) * c].fill(0.0);
            }
        }
        Ok(Batch {
            images,
            labels: batch.labels.clone(),
        })
    }

    /// Adds i.i.d. `N(0, σ²)` noise and clamps to [0, 1].
    pub fn add_gaussian_noise(&mut self, batch: &Batch, key: RngKey) -> Result<Batch> {
        let sigma = self.cfg.noise_sigma;
        if sigma == 0.0 {
            return Ok(batch.clone());
        }
        let (n, ..) = batch.dims();
        let len = batch.image_len();
        let mut images = batch.images.clone();
        let key = key.derive_tag("noise");
        for i in 0..n {
            let img = &mut images.data_mut()[i * len..(i + 1) * len];
            self.with_rng(key.derive(i as u64), |r| {
                for v in img.iter_mut() {
                    let z: f64 = StandardNormal.sample(r);
                    *v = (*v as f64 + sigma * z).clamp(0.0, 1.0) as f32;
                }
            });
        }
        Ok(Batch {
            images,
            labels: batch.labels.clone(),
        })
    }

    /// Returns the original batch followed by a Uniform(0,1)-mixed copy and a
    /// Beta(α,α)-mixed copy. Each mixed sample `i` pairs with `perm(i)` for a
    /// uniformly random permutation drawn per copy; `λ` is drawn per sample.
    pub fn mixup(&mut self, batch: &Batch, key: RngKey) -> Result<Batch> {
        let (n, h, w, c) = batch.dims();
        if n < 2 {
            return Err(Error::arg("mixup needs at least two samples"));
        }
        let beta = Beta::new(self.cfg.mixup_beta_alpha, self.cfg.mixup_beta_alpha).map_err(|_| Error::arg("invalid Beta parameter"))?;
        let classes = batch.labels.shape()[1];
        let len = batch.image_len();
        let (imgs, labs) = (batch.images.data(), batch.labels.data());
        let mut images = Vec::with_capacity(3 * imgs.len());
        let mut labels = Vec::with_capacity(3 * labs.len());
        images.extend_from_slice(imgs);
        labels.extend_from_slice(labs);
        let key = key.derive_tag("mixup");
        for sub in 0..2u64 {
            let sk = key.derive(sub);
            let perm = self.with_rng(sk.derive_tag("perm"), |r| {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(r);
                p
            });
            for (i, &j) in perm.iter().enumerate() {
                let lambda = self.with_rng(sk.derive(i as u64), |r| if sub == 0 { r.random::<f64>() } else { beta.sample(r) });
                images.extend(mix(&imgs[i * len..(i + 1) * len], &imgs[j * len..(j + 1) * len], lambda));
                labels.extend(mix(
                    &labs[i * classes..(i + 1) * classes],
                    &labs[j * classes..(j + 1) * classes],
                    lambda,
                ));
            }
        }
        Ok(Batch {
            images: Tensor::new([3 * n, h, w, c], images)?,
            labels: Tensor::new([3 * n, classes], labels)?,
        })
    }
}
