use super::{MaskPattern, NoiseSchedule, TokenGrid};
use crate::error::{Error, Result};
use crate::tensor::{logsumexp, Mat};

fn check_logits(logits: &Mat, tokens: &TokenGrid) -> Result<()> {
    if logits.rows != tokens.len() || logits.cols != tokens.codebook_size {
        return Err(Error::Shape(format!(
            "logits {}x{} vs {} tokens over a codebook of {}",
            logits.rows,
            logits.cols,
            tokens.len(),
            tokens.codebook_size
        )));
    }
    if let Some(&bad) = tokens.ids.iter().find(|&&i| i >= logits.cols) {
        return Err(Error::Range(format!("token id {bad} not in [0, {})", logits.cols)));
    }
    Ok(())
}

/// Mean over positions of −log softmax(logits[i])[tokens[i]]. Row i must have
/// been computed from tokens before i only.
pub fn causal_nll(logits: &Mat, tokens: &TokenGrid) -> Result<f64> {
    check_logits(logits, tokens)?;
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Shape("empty token sequence".into()));
    }
    let sum: f64 = (0..n).map(|i| logsumexp(logits.row(i)) - logits.at(i, tokens.ids[i])).sum();
    Ok(sum / n as f64)
}

/// Mean cross-entropy over masked positions; visible positions contribute nothing.
pub fn maskgit_loss(logits: &Mat, tokens: &TokenGrid, pattern: &MaskPattern) -> Result<f64> {
    check_logits(logits, tokens)?;
    if pattern.visible.len() != tokens.len() {
        return Err(Error::Shape("mask pattern length differs from token count".into()));
    }
    let masked: Vec<usize> = (0..tokens.len()).filter(|&i| !pattern.visible[i]).collect();
    if masked.is_empty() {
        return Err(Error::config("mask pattern has no masked positions"));
    }
    let sum: f64 = masked.iter().map(|&i| logsumexp(logits.row(i)) - logits.at(i, tokens.ids[i])).sum();
    Ok(sum / masked.len() as f64)
}

/// x_t = √ᾱ_t x₀ + √(1 − ᾱ_t) ε.
pub fn ddpm_q_sample(schedule: &NoiseSchedule, x0: &Mat, t: usize, eps: &Mat) -> Result<Mat> {
    schedule.check_step(t)?;
    q_sample_with(schedule.alpha_bar(t), x0, eps)
}

/// Marginal sample for an explicit ᾱ.
pub fn q_sample_with(alpha_bar: f64, x0: &Mat, eps: &Mat) -> Result<Mat> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0.data.iter().zip(&eps.data).map(|(x, e)| a * x + b * e).collect();
    Ok(Mat::from_vec(x0.rows, x0.cols, data))
}

/// One forward kernel step x_t = √(1 − β_t) x_{t−1} + √β_t z.
pub fn ddpm_q_step(schedule: &NoiseSchedule, x_prev: &Mat, t: usize, z: &Mat) -> Result<Mat> {
    schedule.check_step(t)?;
    let (a, b) = (schedule.alpha(t).sqrt(), schedule.beta(t).sqrt());
    let data = x_prev.data.iter().zip(&z.data).map(|(x, e)| a * x + b * e).collect();
    Ok(Mat::from_vec(x_prev.rows, x_prev.cols, data))
}

/// Mean over rows of ‖ε − ε_θ‖².
pub fn ddpm_loss(noise_pred: &Mat, eps: &Mat) -> Result<f64> {
    sq_err_rows(noise_pred, eps)
}

pub(crate) fn sq_err_rows(a: &Mat, b: &Mat) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.sub(b).sum_sq() / a.rows.max(1) as f64)
}

/// μ_θ(x_t, t) = (x_t − β_t / √(1 − ᾱ_t) · ε_θ) / √α_t.
pub fn ddpm_posterior_mean(schedule: &NoiseSchedule, x_t: &Mat, t: usize, eps_pred: &Mat) -> Mat {
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / schedule.alpha(t).sqrt();
    let data = x_t.data.iter().zip(&eps_pred.data).map(|(x, e)| inv * (x - coef * e)).collect();
    Mat::from_vec(x_t.rows, x_t.cols, data)
}

fn check_unit_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range(format!("flow time {t} not in [0,1]")));
    }
    Ok(())
}

/// ψ_t = (1 − t) x₀ + t x₁.
pub fn fm_interpolate(x0: &Mat, x1: &Mat, t: f64) -> Result<Mat> {
    check_unit_time(t)?;
    if x0.shape() != x1.shape() {
        return Err(Error::Shape(format!("x0 {:?} vs x1 {:?}", x0.shape(), x1.shape())));
    }
    let data = x0.data.iter().zip(&x1.data).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    Ok(Mat::from_vec(x0.rows, x0.cols, data))
}

/// Regression target of the linear path: x₁ − x₀.
pub fn fm_target(x0: &Mat, x1: &Mat) -> Mat {
    x1.sub(x0)
}

/// Mean over rows of ‖v_pred − (x₁ − x₀)‖².
pub fn fm_loss(v_pred: &Mat, x0: &Mat, x1: &Mat) -> Result<f64> {
    sq_err_rows(v_pred, &fm_target(x0, x1))
}

/// A per-token denoiser conditioned on a clean prefix in generation order.
pub trait MarDenoiser {
    /// `noisy` row j holds token `order[j]` diffused to step `k`; the
    /// prediction for row j may depend on `z[order[..j]]` but not on later
    /// tokens. Returns an L×d matrix of noise predictions in generation order.
    fn predict(&mut self, z: &Mat, order: &[usize], noisy: &Mat, k: usize) -> Mat;
}

pub fn check_permutation(order: &[usize], len: usize) -> Result<()> {
    let mut seen = vec![false; len];
    if order.len() != len {
        return Err(Error::config(format!("order has {} entries for {len} tokens", order.len())));
    }
    for &o in order {
        if o >= len || std::mem::replace(&mut seen[o], true) {
            return Err(Error::config(format!("order is not a permutation of 0..{len}")));
        }
    }
    Ok(())
}

/// Rows of `eps` and `z` rearranged into generation order, and the diffused
/// tokens z_{order[j]}^{(k)}.
pub fn mar_noisy_tokens(schedule: &NoiseSchedule, z: &Mat, order: &[usize], k: usize, eps: &Mat) -> Result<(Mat, Mat)> {
    schedule.check_step(k)?;
    check_permutation(order, z.rows)?;
    if eps.shape() != z.shape() {
        return Err(Error::Shape("eps and z differ in shape".into()));
    }
    let d = z.cols;
    let mut z_ord = Mat::zeros(z.rows, d);
    let mut eps_ord = Mat::zeros(z.rows, d);
    for (j, &o) in order.iter().enumerate() {
        z_ord.row_mut(j).copy_from_slice(z.row(o));
        eps_ord.row_mut(j).copy_from_slice(eps.row(o));
    }
    let noisy = ddpm_q_sample(schedule, &z_ord, k, &eps_ord)?;
    Ok((noisy, eps_ord))
}

/// Mean over tokens of ‖ε − ε_θ(z_i^{(k)}, k, cond = clean prefix)‖².
pub fn mar_loss(
    model: &mut dyn MarDenoiser,
    schedule: &NoiseSchedule,
    z: &Mat,
    order: &[usize],
    k: usize,
    eps: &Mat,
) -> Result<f64> {
    let (noisy, eps_ord) = mar_noisy_tokens(schedule, z, order, k, eps)?;
    let pred = model.predict(z, order, &noisy, k);
    sq_err_rows(&pred, &eps_ord)
}
