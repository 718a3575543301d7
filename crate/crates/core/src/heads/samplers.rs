use std::f64::consts::FRAC_PI_2;

use rand::Rng as _;

use super::{ddpm_posterior_mean, NoiseSchedule, TokenGrid};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{argmax, softmax_in_place, Mat};

/// Ancestral DDPM sampling: x_T ~ N(0, I), then for t = T..1
/// x_{t−1} = μ_θ(x_t, t) + √β̃_t z (no noise on the last step).
pub fn ddpm_sample(
    mut eps_model: impl FnMut(&Mat, usize) -> Mat,
    schedule: &NoiseSchedule,
    rows: usize,
    cols: usize,
    seed: u64,
) -> Mat {
    let mut r = rng::rng(seed, &[stream::SAMPLE]);
    let mut x = Mat::randn(rows, cols, 1.0, &mut r);
    for t in (1..=schedule.steps).rev() {
        let eps = eps_model(&x, t);
        let mean = ddpm_posterior_mean(schedule, &x, t, &eps);
        x = if t > 1 {
            let z = Mat::randn(rows, cols, 1.0, &mut r);
            mean.add(&z.scale(schedule.posterior_var(t).sqrt()))
        } else {
            mean
        };
    }
    x
}

/// Explicit Euler integration of dx/dt = v(x, t) from t = 0 to 1 in
/// `n_steps` uniform steps, starting at `x0`.
pub fn fm_euler(mut field: impl FnMut(&Mat, f64) -> Mat, x0: Mat, n_steps: usize) -> Result<Mat> {
    if n_steps == 0 {
        return Err(Error::config("n_steps must be >= 1"));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = x0;
    for i in 0..n_steps {
        let v = field(&x, i as f64 * dt);
        x.add_scaled(&v, dt);
    }
    Ok(x)
}

/// Flow-matching sampler: x₀ ~ N(0, I) from `seed`, then Euler to t = 1.
pub fn fm_sample(field: impl FnMut(&Mat, f64) -> Mat, rows: usize, cols: usize, n_steps: usize, seed: u64) -> Result<Mat> {
    let mut r = rng::rng(seed, &[stream::SAMPLE]);
    let x0 = Mat::randn(rows, cols, 1.0, &mut r);
    fm_euler(field, x0, n_steps)
}

/// Fraction of tokens still masked after iteration `i` of `n` (cosine schedule).
pub fn cosine_mask_ratio(i: usize, n: usize) -> f64 {
    (FRAC_PI_2 * i as f64 / n as f64).cos().max(0.0)
}

/// MaskGit iterative parallel decoding.
///
/// `logits_fn` receives the current grid (`None` = masked) and returns L×K
/// logits. Each iteration fills every masked position with its argmax, ranks
/// the new predictions by confidence (plus annealed Gumbel noise scaled by
/// `temperature`), and re-masks the least confident so that the masked
/// fraction follows the cosine schedule. Every position is filled after
/// `n_iters` iterations.
pub fn maskgit_decode(
    mut logits_fn: impl FnMut(&[Option<usize>]) -> Mat,
    len: usize,
    codebook_size: usize,
    n_iters: usize,
    temperature: f64,
    seed: u64,
) -> Result<TokenGrid> {
    if n_iters == 0 {
        return Err(Error::config("n_iters must be >= 1"));
    }
    let mut r = rng::rng(seed, &[stream::SAMPLE]);
    let mut grid: Vec<Option<usize>> = vec![None; len];
    for it in 1..=n_iters {
        let masked: Vec<usize> = (0..len).filter(|&i| grid[i].is_none()).collect();
        if masked.is_empty() {
            break;
        }
        let logits = logits_fn(&grid);
        assert_eq!(logits.shape(), (len, codebook_size));
        let anneal = temperature * (1.0 - it as f64 / n_iters as f64);
        let mut cands: Vec<(f64, usize, usize)> = masked
            .iter()
            .map(|&i| {
                let mut p = logits.row(i).to_vec();
                softmax_in_place(&mut p);
                let tok = argmax(&p);
                let u: f64 = r.random_range(f64::MIN_POSITIVE..1.0);
                let gumbel = -(-u.ln()).ln();
                (p[tok].ln() + anneal * gumbel, i, tok)
            })
            .collect();
        let remain = if it == n_iters {
            0
        } else {
            let target = (len as f64 * cosine_mask_ratio(it, n_iters)).floor() as usize;
            target.min(masked.len() - 1)
        };
        let reveal = masked.len() - remain;
        // Highest confidence first; ties resolved by position.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i, tok) in cands.iter().take(reveal) {
            grid[i] = Some(tok);
        }
    }
    TokenGrid::new(grid.into_iter().map(|t| t.expect("all positions filled")).collect(), codebook_size)
}
