//! Toy VQ tokenizer: nearest-centroid quantization of non-overlapping patches
//! against a k-means codebook that is fit once and then frozen.

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heads::TokenGrid;
use crate::image::RgbImage;
use crate::rng::{self, stream};
use crate::tensor::Mat;

const KMEANS_ITERS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyVq {
    pub patch: usize,
    /// K × (patch²·3) centroids in latent scale [−1, 1].
    pub codebook: Option<Mat>,
    pub frozen: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by Euclidean distance, ties to the lowest index.
fn nearest(codebook: &Mat, v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..codebook.rows {
        let d = sq_dist(codebook.row(k), v);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// k-means++ seeding followed by a fixed number of Lloyd iterations.
pub fn kmeans(points: &Mat, k: usize, seed: u64) -> Result<Mat> {
    if k == 0 {
        return Err(Error::config("codebook size must be >= 1"));
    }
    if points.rows == 0 {
        return Err(Error::config("k-means needs at least one point"));
    }
    let mut r = rng::rng(seed, &[stream::KMEANS]);
    let dim = points.cols;
    let mut centers = Mat::zeros(k, dim);
    centers.row_mut(0).copy_from_slice(points.row(r.random_range(0..points.rows)));
    let mut d2: Vec<f64> = (0..points.rows).map(|i| sq_dist(points.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            r.random_range(0..points.rows)
        } else {
            let mut u = r.random_range(0.0..total);
            let mut idx = points.rows - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        };
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for i in 0..points.rows {
            d2[i] = d2[i].min(sq_dist(points.row(i), centers.row(c)));
        }
    }
    for _ in 0..KMEANS_ITERS {
        let mut sums = Mat::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for i in 0..points.rows {
            let a = nearest(&centers, points.row(i));
            counts[a] += 1;
            for (s, &v) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut moved = false;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for (dst, &s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                let nv = s * inv;
                moved |= nv != *dst;
                *dst = nv;
            }
        }
        if !moved {
            break;
        }
    }
    Ok(centers)
}

impl ToyVq {
    pub fn unfit(patch: usize) -> Self {
        ToyVq { patch, codebook: None, frozen: false }
    }

    /// Fits a `k`-entry codebook on the patches of `images` and freezes it.
    pub fn fit(images: &[RgbImage], patch: usize, k: usize, seed: u64) -> Result<Self> {
        let mut rows = Vec::new();
        for img in images {
            let lat = img.to_latent(patch)?;
            rows.push(lat);
        }
        let refs: Vec<&Mat> = rows.iter().collect();
        let points = Mat::vstack(&refs);
        let codebook = kmeans(&points, k, seed)?;
        Ok(ToyVq { patch, codebook: Some(codebook), frozen: true })
    }

    pub fn from_codebook(patch: usize, codebook: Mat) -> Result<Self> {
        if codebook.cols != patch * patch * 3 {
            return Err(Error::Shape("codebook width does not match the patch size".into()));
        }
        Ok(ToyVq { patch, codebook: Some(codebook), frozen: true })
    }

    pub fn codebook(&self) -> Result<&Mat> {
        self.codebook.as_ref().ok_or_else(|| Error::config("VQ codebook has not been fit"))
    }

    pub fn size(&self) -> usize {
        self.codebook.as_ref().map_or(0, |c| c.rows)
    }

    pub fn encode_latent(&self, latent: &Mat) -> Result<TokenGrid> {
        let cb = self.codebook()?;
        if latent.cols != cb.cols {
            return Err(Error::Shape(format!("latent width {} vs codebook width {}", latent.cols, cb.cols)));
        }
        let ids = (0..latent.rows).map(|i| nearest(cb, latent.row(i))).collect();
        TokenGrid::new(ids, cb.rows)
    }

    pub fn encode(&self, image: &RgbImage) -> Result<TokenGrid> {
        self.encode_latent(&image.to_latent(self.patch)?)
    }

    pub fn decode_latent(&self, tokens: &TokenGrid) -> Result<Mat> {
        let cb = self.codebook()?;
        let mut out = Mat::zeros(tokens.len(), cb.cols);
        for (i, &id) in tokens.ids.iter().enumerate() {
            if id >= cb.rows {
                return Err(Error::Range(format!("token id {id} not in [0, {})", cb.rows)));
            }
            out.row_mut(i).copy_from_slice(cb.row(id));
        }
        Ok(out)
    }

    pub fn decode(&self, tokens: &TokenGrid, width: usize, height: usize) -> Result<RgbImage> {
        RgbImage::from_latent(&self.decode_latent(tokens)?, width, height, self.patch)
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.patch as u64).to_le_bytes());
        if let Some(cb) = &self.codebook {
            for v in &cb.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Mean squared error in latent units over a set of images after encode→decode.
pub fn reconstruction_mse(vq: &ToyVq, images: &[RgbImage]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for img in images {
        let lat = img.to_latent(vq.patch)?;
        let rec = vq.decode_latent(&vq.encode_latent(&lat)?)?;
        total += lat.sub(&rec).sum_sq();
        count += lat.len();
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, render, SceneSpec};

    fn scenes(n: u64) -> Vec<RgbImage> {
        (0..n)
            .map(|s| {
                let r = render(&generate_scene(&SceneSpec::with_size(16, 2), s).unwrap());
                RgbImage::new(16, 16, r.rgb).unwrap()
            })
            .collect()
    }

    #[test]
    fn unfit_codebook_errors() {
        let vq = ToyVq::unfit(4);
        assert!(vq.encode(&RgbImage::filled(8, 8, [0, 0, 0])).is_err());
    }

    #[test]
    fn single_centroid_maps_everything_to_zero() {
        let imgs = scenes(3);
        let vq = ToyVq::fit(&imgs, 4, 1, 0).unwrap();
        let toks = vq.encode(&imgs[0]).unwrap();
        assert!(toks.ids.iter().all(|&i| i == 0));
        let dec = vq.decode(&toks, 16, 16).unwrap();
        let first = &dec.data[..48];
        // Constant tiling: every 4x4 tile equals the first one.
        let lat = dec.to_latent(4).unwrap();
        for r in 1..lat.rows {
            assert_eq!(lat.row(r), lat.row(0));
        }
        assert_eq!(first.len(), 48);
    }

    #[test]
    fn codebook_images_reconstruct_exactly() {
        let imgs = scenes(4);
        let vq = ToyVq::fit(&imgs, 4, 8, 1).unwrap();
        let toks = TokenGrid::new(vec![0, 1, 2, 3, 4, 5, 6, 7, 0, 1, 2, 3, 4, 5, 6, 7], 8).unwrap();
        let lat = vq.decode_latent(&toks).unwrap();
        assert_eq!(vq.encode_latent(&lat).unwrap().ids.len(), 16);
        let again = vq.decode_latent(&vq.encode_latent(&lat).unwrap()).unwrap();
        assert_eq!(again, lat);
    }

    #[test]
    fn encode_decode_idempotent() {
        let imgs = scenes(4);
        let vq = ToyVq::fit(&imgs, 4, 6, 2).unwrap();
        for img in &imgs {
            let once = vq.decode(&vq.encode(img).unwrap(), 16, 16).unwrap();
            let twice = vq.decode(&vq.encode(&once).unwrap(), 16, 16).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn mse_non_increasing_in_codebook_size() {
        let imgs = scenes(12);
        let mses: Vec<f64> = [4, 16, 64]
            .iter()
            .map(|&k| reconstruction_mse(&ToyVq::fit(&imgs, 4, k, 0).unwrap(), &imgs).unwrap())
            .collect();
        assert!(mses[0] >= mses[1] && mses[1] >= mses[2], "{mses:?}");
    }
}
