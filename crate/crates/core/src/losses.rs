//! Training objectives: masked cross-entropy for pre-training and the
//! preference loss built from per-sequence rate-matrix log-ratio terms.
//!
//! Every objective returns its value together with the gradient with respect
//! to the logits of the θ model, so callers can push it through
//! [`Differentiable::backward`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::{
    conditional_rate_noisy, sample_forward, unconditional_rate_mask, Alphabet, NoiseSchedule,
    RateQuery, Sequence,
};
use crate::error::{Error, Result};
use crate::net::{Denoiser, DenoiserOutput, Differentiable, GradAccumulator};

/// How diffusion times are drawn across the two sequences of a pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairTime {
    /// One `t` per draw, shared by winner and loser.
    #[default]
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    pub eta: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub per_pair_t: PairTime,
    /// Monte Carlo time draws per pair.
    pub mc_t_samples: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            eta: 0.0,
            t_min: 1e-3,
            t_max: 1.0 - 1e-3,
            per_pair_t: PairTime::Shared,
            mc_t_samples: 1,
        }
    }
}

impl DpoConfig {
    /// `beta = 0` is accepted: it pins the loss at `ln 2`, which is a useful
    /// degenerate control run.
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("dpo.beta must be finite and >= 0".into()));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config("dpo.eta must be finite and >= 0".into()));
        }
        if !(0.0 <= self.t_min && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(Error::Config(
                "dpo time clamp must satisfy 0 <= t_min < t_max < 1".into(),
            ));
        }
        if self.mc_t_samples == 0 {
            return Err(Error::Config("dpo.mc_t_samples must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub winner: Sequence,
    pub loser: Sequence,
}

impl PreferencePair {
    pub fn new(winner: Sequence, loser: Sequence, alphabet: Alphabet) -> Result<Self> {
        winner.ensure_clean(alphabet)?;
        loser.ensure_clean(alphabet)?;
        if winner.len() != loser.len() {
            return Err(Error::Shape(format!(
                "winner has {} dimensions, loser {}",
                winner.len(),
                loser.len()
            )));
        }
        Ok(Self { winner, loser })
    }
}

/// Value of a per-sequence log-ratio term and its gradient with respect to
/// the θ logits (`D x S`).
#[derive(Clone, Debug, PartialEq)]
pub struct DTerm {
    pub value: f64,
    pub logit_grad: Vec<f64>,
}

/// `ln(1 + e^z)`, stable for large `|z|`.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-ln σ(β (a - b))`, the Bradley-Terry negative log-likelihood in its
/// DPO parameterisation.
pub fn bt_dpo_sanity(logratio_winner: f64, logratio_loser: f64, beta: f64) -> f64 {
    softplus(-beta * (logratio_winner - logratio_loser))
}

/// Masked cross-entropy on a single denoiser output, averaged over masked
/// dimensions. Returns the loss and its logit gradient.
pub fn pretrain_objective(
    alphabet: Alphabet,
    out: &DenoiserOutput,
    x1: &Sequence,
    xt: &Sequence,
) -> Result<(f64, Vec<f64>)> {
    check_shapes(alphabet, out, x1, xt)?;
    let s = alphabet.size();
    let masked = xt.masked_count(alphabet);
    let norm = 1.0 / masked.max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; out.dims() * s];
    for (d, (&noisy, &clean)) in xt.tokens().iter().zip(x1.tokens()).enumerate() {
        if !alphabet.is_mask(noisy) {
            continue;
        }
        loss -= out.log_prob(d, clean);
        for j in 0..s {
            let target = if j == clean { 1.0 } else { 0.0 };
            grad[d * s + j] = (out.prob(d, j) - target) * norm;
        }
    }
    Ok((loss * norm, grad))
}

/// Forward + backward of [`pretrain_objective`] through `model`; the
/// parameter gradient is added to `grads`.
pub fn pretrain_loss<M: Differentiable + ?Sized>(
    model: &M,
    x1: &Sequence,
    t: f64,
    xt: &Sequence,
    grads: &mut GradAccumulator,
) -> Result<f64> {
    let (out, trace) = model.forward_trace(xt, t);
    let (loss, dlogits) = pretrain_objective(model.alphabet(), &out, x1, xt)?;
    if xt.masked_count(model.alphabet()) > 0 {
        model.backward(&trace, &dlogits, grads)?;
    }
    Ok(loss)
}

fn check_shapes(
    alphabet: Alphabet,
    out: &DenoiserOutput,
    x1: &Sequence,
    xt: &Sequence,
) -> Result<()> {
    if out.tokens() != alphabet.size() || out.dims() != x1.len() || xt.len() != x1.len() {
        return Err(Error::Shape(format!(
            "denoiser output {}x{}, clean length {}, noisy length {}",
            out.dims(),
            out.tokens(),
            x1.len(),
            xt.len()
        )));
    }
    Ok(())
}

/// Log-ratio term summed over dimensions, evaluated from its definition:
/// conditional rates from the kernel-derivative construction (plus the
/// re-masking term when `eta > 0`), model rates from the per-dimension
/// unconditional rate of each denoiser output.
#[allow(clippy::too_many_arguments)]
pub fn d_term_general(
    alphabet: Alphabet,
    schedule: NoiseSchedule,
    theta: &DenoiserOutput,
    reference: &DenoiserOutput,
    xt: &Sequence,
    x1: &Sequence,
    t: f64,
    eta: f64,
) -> Result<DTerm> {
    check_shapes(alphabet, theta, x1, xt)?;
    check_shapes(alphabet, reference, x1, xt)?;
    let s = alphabet.size();
    let mut value = 0.0;
    let mut logit_grad = vec![0.0; theta.dims() * s];
    let mut prob_grad = vec![0.0; s];
    for d in 0..xt.len() {
        let from = xt.tokens()[d];
        let clean = x1.tokens()[d];
        let p_theta = theta.row(d);
        let p_ref = reference.row(d);
        prob_grad.iter_mut().for_each(|g| *g = 0.0);
        for to in 0..alphabet.augmented_size() {
            if to == from {
                continue;
            }
            let rq = conditional_rate_noisy(alphabet, schedule, RateQuery { from, to, clean, t }, eta)?;
            let r_theta = unconditional_rate_mask(alphabet, p_theta, from, to, t, eta);
            let r_ref = unconditional_rate_mask(alphabet, p_ref, from, to, t, eta);
            if rq == 0.0 && r_theta == 0.0 && r_ref == 0.0 {
                continue;
            }
            if rq > 0.0 {
                if r_ref == 0.0 {
                    return Err(Error::ZeroReferenceRate { dim: d, target: to });
                }
                value += rq * (r_theta / r_ref).ln();
            }
            value += r_ref - r_theta;
            // R^θ is linear in p^θ_to only when unmasking into a real token.
            if alphabet.is_mask(from) && !alphabet.is_mask(to) {
                let slope = unconditional_rate_mask(alphabet, &unit(s, to), from, to, t, eta);
                prob_grad[to] += rq / p_theta[to] - slope;
            }
        }
        let mean: f64 = p_theta.iter().zip(&prob_grad).map(|(p, g)| p * g).sum();
        for j in 0..s {
            logit_grad[d * s + j] = p_theta[j] * (prob_grad[j] - mean);
        }
    }
    Ok(DTerm { value, logit_grad })
}

fn unit(len: usize, hot: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[hot] = 1.0;
    v
}

/// Closed form of the log-ratio term for the masking process:
/// `(1 + ηt)/(1 - t) · Σ_d [x_t^d = M] (ln p^θ(x_1^d) - ln p^ref(x_1^d))`.
///
/// The `η = 0` value is computed first and then multiplied by `1 + ηt`, so
/// the noisy value is exactly that product.
pub fn d_term_mask(
    alphabet: Alphabet,
    theta: &DenoiserOutput,
    reference: &DenoiserOutput,
    xt: &Sequence,
    x1: &Sequence,
    t: f64,
    eta: f64,
) -> Result<DTerm> {
    check_shapes(alphabet, theta, x1, xt)?;
    check_shapes(alphabet, reference, x1, xt)?;
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Time { t, range: "[0, 1)" });
    }
    let s = alphabet.size();
    let base_weight = 1.0 / (1.0 - t);
    let noise_scale = 1.0 + eta * t;
    let weight = noise_scale * base_weight;
    let mut sum = 0.0;
    let mut logit_grad = vec![0.0; theta.dims() * s];
    for (d, (&noisy, &clean)) in xt.tokens().iter().zip(x1.tokens()).enumerate() {
        if !alphabet.is_mask(noisy) {
            continue;
        }
        sum += theta.log_prob(d, clean) - reference.log_prob(d, clean);
        for j in 0..s {
            let target = if j == clean { 1.0 } else { 0.0 };
            logit_grad[d * s + j] = weight * (target - theta.prob(d, j));
        }
    }
    let value = noise_scale * (base_weight * sum);
    Ok(DTerm { value, logit_grad })
}

/// Incremental mean. A run of equal values averages to exactly that value,
/// which a sum followed by a division does not guarantee.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunningMean {
    count: u64,
    mean: f64,
}

impl RunningMean {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.mean += (x - self.mean) / self.count as f64;
    }

    pub fn value(&self) -> f64 {
        self.mean
    }
}

/// Result of one preference-loss evaluation on a single pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DpoLoss {
    /// Mean over time draws.
    pub loss: f64,
    pub per_draw: Vec<f64>,
    pub times: Vec<f64>,
    pub theta_queries: u64,
    pub ref_queries: u64,
}

/// Monte Carlo estimate of the preference loss on one pair, with the
/// gradient of the mean loss added to `grads`.
///
/// Each draw samples one shared `t ~ U[t_min, t_max]`, corrupts both
/// sequences independently, and evaluates `-ln σ(β (D_w - D_l))`. The
/// reference contributes no gradient.
pub fn d2dpo_loss<T, R, G>(
    theta: &T,
    reference: &R,
    pair: &PreferencePair,
    cfg: &DpoConfig,
    rng: &mut G,
    grads: &mut GradAccumulator,
) -> Result<DpoLoss>
where
    T: Differentiable + ?Sized,
    R: Denoiser + ?Sized,
    G: Rng + ?Sized,
{
    let alphabet = theta.alphabet();
    let draws = cfg.mc_t_samples;
    let inv_draws = 1.0 / draws as f64;
    let mut per_draw = Vec::with_capacity(draws);
    let mut times = Vec::with_capacity(draws);
    let mut theta_queries = 0;
    let mut ref_queries = 0;
    for _ in 0..draws {
        let t = match cfg.per_pair_t {
            PairTime::Shared => rng.gen_range(cfg.t_min..cfg.t_max),
        };
        let xt_w = sample_forward(alphabet, &pair.winner, t, rng)?;
        let xt_l = sample_forward(alphabet, &pair.loser, t, rng)?;

        let (theta_w, trace_w) = theta.forward_trace(&xt_w, t);
        let (theta_l, trace_l) = theta.forward_trace(&xt_l, t);
        let ref_w = reference.predict(&xt_w, t);
        let ref_l = reference.predict(&xt_l, t);
        theta_queries += 2;
        ref_queries += 2;

        let d_w = d_term_mask(alphabet, &theta_w, &ref_w, &xt_w, &pair.winner, t, cfg.eta)?;
        let d_l = d_term_mask(alphabet, &theta_l, &ref_l, &xt_l, &pair.loser, t, cfg.eta)?;
        let margin = cfg.beta * (d_w.value - d_l.value);
        per_draw.push(softplus(-margin));
        times.push(t);

        // d/dmargin of softplus(-margin) is -σ(-margin).
        let dmargin = -sigmoid(-margin) * cfg.beta * inv_draws;
        if dmargin != 0.0 {
            let gw: Vec<f64> = d_w.logit_grad.iter().map(|g| dmargin * g).collect();
            let gl: Vec<f64> = d_l.logit_grad.iter().map(|g| -dmargin * g).collect();
            theta.backward(&trace_w, &gw, grads)?;
            theta.backward(&trace_l, &gl, grads)?;
        }
    }
    let mut loss = RunningMean::default();
    per_draw.iter().for_each(|&l| loss.push(l));
    let loss = loss.value();
    Ok(DpoLoss {
        loss,
        per_draw,
        times,
        theta_queries,
        ref_queries,
    })
}
