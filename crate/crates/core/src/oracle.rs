//! Independent verifiers: forward-equation integration on small chains,
//! finite-difference gradient checks, the general-vs-closed-form sweep for
//! the log-ratio term, and model-query counters.
//!
//! Nothing here is used on the training path.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::{
    generate, sample_forward, stream_rng, unconditional_rate_mask, Alphabet, NoiseSchedule,
    SamplerConfig, Sequence, Token,
};
use crate::error::{Error, Result};
use crate::losses::{
    d2dpo_loss, d_term_general, d_term_mask, pretrain_loss, DTerm, DpoConfig, PreferencePair,
};
use crate::net::{
    snapshot_ref, Architecture, Denoiser, DenoiserOutput, Differentiable, GradAccumulator, Mlp,
    Trace,
};

/// Upper bound on dense enumeration: `(S + 1)^D` with `S <= 5`, `D <= 4`.
pub const MAX_CHAIN_STATES: usize = 6 * 6 * 6 * 6;

/// A small CTMC with a dense, time-dependent generator, for verification.
pub struct TinyChain<'a> {
    states: usize,
    p0: Vec<f64>,
    rates: Box<dyn Fn(f64) -> Vec<f64> + 'a>,
}

impl<'a> TinyChain<'a> {
    /// `rates(t)` returns the `states x states` generator, row-major.
    pub fn new(p0: Vec<f64>, rates: impl Fn(f64) -> Vec<f64> + 'a) -> Result<Self> {
        let states = p0.len();
        if states == 0 || states > MAX_CHAIN_STATES {
            return Err(Error::Shape(format!(
                "chain must have 1..={MAX_CHAIN_STATES} states, got {states}"
            )));
        }
        if p0.iter().any(|&p| p < 0.0) || (p0.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Shape("initial distribution is not a distribution".into()));
        }
        Ok(Self {
            states,
            p0,
            rates: Box::new(rates),
        })
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn generator(&self, t: f64) -> Vec<f64> {
        (self.rates)(t)
    }

    /// Generator invariants at time `t`: nonnegative off-diagonals and rows
    /// summing to zero.
    pub fn check_generator(&self, t: f64, tol: f64) -> Result<()> {
        let r = self.generator(t);
        if r.len() != self.states * self.states {
            return Err(Error::Shape("generator has the wrong size".into()));
        }
        for i in 0..self.states {
            let row = &r[i * self.states..(i + 1) * self.states];
            if row.iter().enumerate().any(|(j, &v)| j != i && v < 0.0) {
                return Err(Error::Shape(format!("negative off-diagonal rate in row {i}")));
            }
            if row.iter().sum::<f64>().abs() > tol {
                return Err(Error::Shape(format!("row {i} does not sum to zero")));
            }
        }
        Ok(())
    }
}

/// Explicit Euler integration of `dp/dt = p R(t)` from 0 to `t_end`.
///
/// Roundoff negatives down to `-1e-9` are clipped and the vector is
/// renormalised each step; anything more negative is an error.
pub fn ode_marginals(chain: &TinyChain<'_>, t_end: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 || !(t_end >= 0.0) {
        return Err(Error::Shape("need steps >= 1 and t_end >= 0".into()));
    }
    let n = chain.states;
    let dt = t_end / steps as f64;
    let mut p = chain.p0.clone();
    let mut next = vec![0.0; n];
    for k in 0..steps {
        let t = k as f64 * dt;
        let r = chain.generator(t);
        next.copy_from_slice(&p);
        for (i, &pi) in p.iter().enumerate() {
            if pi == 0.0 {
                continue;
            }
            let row = &r[i * n..(i + 1) * n];
            for (nj, rij) in next.iter_mut().zip(row) {
                *nj += dt * pi * rij;
            }
        }
        for (state, v) in next.iter_mut().enumerate() {
            if *v < -1e-9 {
                return Err(Error::NegativeMass {
                    state,
                    mass: *v,
                    t: t + dt,
                });
            }
            *v = v.max(0.0);
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        std::mem::swap(&mut p, &mut next);
    }
    Ok(p)
}

/// Index of a sequence in the dense joint state space, base `radix`.
pub fn state_index(tokens: &[Token], radix: usize) -> usize {
    tokens.iter().rev().fold(0, |acc, &t| acc * radix + t)
}

pub fn state_tokens(mut index: usize, radix: usize, dims: usize) -> Vec<Token> {
    (0..dims)
        .map(|_| {
            let t = index % radix;
            index /= radix;
            t
        })
        .collect()
}

/// The reverse masking chain induced by `model` over all `(S + 1)^D` joint
/// states, started from the all-mask state. Transitions change one
/// dimension at a time.
pub fn masking_chain<'a, M: Denoiser + ?Sized>(model: &'a M, eta: f64) -> Result<TinyChain<'a>> {
    let alphabet = model.alphabet();
    let dims = model.num_dims();
    let radix = alphabet.augmented_size();
    let states = radix.checked_pow(dims as u32).unwrap_or(usize::MAX);
    if states > MAX_CHAIN_STATES {
        return Err(Error::Shape(format!("{states} joint states is too many to enumerate")));
    }
    let mut p0 = vec![0.0; states];
    p0[state_index(&vec![alphabet.mask(); dims], radix)] = 1.0;
    let s = alphabet.size();
    TinyChain::new(p0, move |t| {
        let mut r = vec![0.0; states * states];
        for i in 0..states {
            let tokens = state_tokens(i, radix, dims);
            let x = Sequence::new(tokens.clone(), alphabet).expect("enumerated state");
            let out = model.predict(&x, t);
            let mut total = 0.0;
            for d in 0..dims {
                for to in 0..radix {
                    if to == tokens[d] {
                        continue;
                    }
                    let rate =
                        unconditional_rate_mask(alphabet, &out.probs()[d * s..(d + 1) * s], tokens[d], to, t, eta);
                    if rate > 0.0 {
                        let mut y = tokens.clone();
                        y[d] = to;
                        r[i * states + state_index(&y, radix)] += rate;
                        total += rate;
                    }
                }
            }
            r[i * states + i] = -total;
        }
        r
    })
}

/// Distribution over clean sequences (`S^D`, base-`S` index) produced by
/// running the reverse chain to `t_max` and decoding the masked dimensions
/// of every state from `p_{1|t_max}`, mirroring [`generate`].
pub fn terminal_distribution<M: Denoiser + ?Sized>(
    model: &M,
    eta: f64,
    t_max: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    let alphabet = model.alphabet();
    let dims = model.num_dims();
    let radix = alphabet.augmented_size();
    let s = alphabet.size();
    let chain = masking_chain(model, eta)?;
    let p = ode_marginals(&chain, t_max, steps)?;
    let mut clean = vec![0.0; s.pow(dims as u32)];
    for (i, &mass) in p.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        let tokens = state_tokens(i, radix, dims);
        let x = Sequence::new(tokens.clone(), alphabet)?;
        let out = model.predict(&x, t_max);
        // Enumerate completions of the masked dimensions.
        let masked: Vec<usize> = (0..dims).filter(|&d| alphabet.is_mask(tokens[d])).collect();
        for c in 0..s.pow(masked.len() as u32) {
            let fill = state_tokens(c, s, masked.len());
            let mut y = tokens.clone();
            let mut w = mass;
            for (k, &d) in masked.iter().enumerate() {
                y[d] = fill[k];
                w *= out.prob(d, fill[k]);
            }
            clean[state_index(&y, s)] += w;
        }
    }
    Ok(clean)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Empirical distribution of clean samples over `S^D` (base-`S` index).
pub fn empirical_distribution(samples: &[Sequence], alphabet: Alphabet, dims: usize) -> Vec<f64> {
    let s = alphabet.size();
    let mut hist = vec![0.0; s.pow(dims as u32)];
    for x in samples {
        hist[state_index(x.tokens(), s)] += 1.0;
    }
    let n = samples.len().max(1) as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    hist
}

/// The exact denoising posterior of a finite data distribution under the
/// masking kernel: `p(x_1^d | x_t)` is the data distribution conditioned
/// on the unmasked coordinates of `x_t`, independent of `t`.
#[derive(Clone, Debug)]
pub struct BayesDenoiser {
    alphabet: Alphabet,
    dims: usize,
    support: Vec<(Vec<Token>, f64)>,
}

impl BayesDenoiser {
    pub fn new(alphabet: Alphabet, support: Vec<(Vec<Token>, f64)>) -> Result<Self> {
        let dims = support.first().map(|(x, _)| x.len()).unwrap_or(0);
        if dims == 0 || support.iter().any(|(x, w)| x.len() != dims || *w < 0.0) {
            return Err(Error::Shape("data support must be nonempty, equal-length, nonnegative".into()));
        }
        for (x, _) in &support {
            Sequence::clean(x.clone(), alphabet)?;
        }
        let total: f64 = support.iter().map(|(_, w)| w).sum();
        let support = support.into_iter().map(|(x, w)| (x, w / total)).collect();
        Ok(Self {
            alphabet,
            dims,
            support,
        })
    }

    /// Data distribution over `S^D` in the base-`S` index order.
    pub fn data_distribution(&self) -> Vec<f64> {
        let s = self.alphabet.size();
        let mut p = vec![0.0; s.pow(self.dims as u32)];
        for (x, w) in &self.support {
            p[state_index(x, s)] += w;
        }
        p
    }
}

impl Denoiser for BayesDenoiser {
    fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    fn num_dims(&self) -> usize {
        self.dims
    }

    fn predict(&self, xt: &Sequence, _t: f64) -> DenoiserOutput {
        let s = self.alphabet.size();
        let mut probs = vec![0.0; self.dims * s];
        let mut total = 0.0;
        for (x1, w) in &self.support {
            let consistent = xt
                .tokens()
                .iter()
                .zip(x1)
                .all(|(&a, &b)| self.alphabet.is_mask(a) || a == b);
            if consistent {
                total += w;
                for (d, &tok) in x1.iter().enumerate() {
                    probs[d * s + tok] += w;
                }
            }
        }
        if total > 0.0 {
            probs.iter_mut().for_each(|p| *p /= total);
        } else {
            probs.iter_mut().for_each(|p| *p = 1.0 / s as f64);
        }
        DenoiserOutput::from_probs(self.dims, s, probs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub probes: usize,
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` against an
/// analytic gradient on the coordinates `probes`. Relative error uses an
/// absolute floor of `1e-8` in the denominator.
pub fn fd_gradcheck<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    probes: &[usize],
    h: f64,
) -> GradCheckReport {
    let mut work = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: probes.first().copied().unwrap_or(0),
        probes: probes.len(),
    };
    for &i in probes {
        work[i] = point[i] + h;
        let plus = f(&work);
        work[i] = point[i] - h;
        let minus = f(&work);
        work[i] = point[i];
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-8);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report
}

/// `count` probe coordinates spread round-robin over the network's parameter
/// blocks, uniformly within each block.
pub fn spread_probes<R: Rng + ?Sized>(model: &Mlp, count: usize, rng: &mut R) -> Vec<usize> {
    let blocks = model.blocks();
    (0..count)
        .map(|k| {
            let (_, range) = &blocks[k % blocks.len()];
            rng.gen_range(range.clone())
        })
        .collect()
}

/// Signature shared by [`d_term_mask`] and stand-ins used in mutation tests.
pub type ClosedFormDTerm =
    fn(Alphabet, &DenoiserOutput, &DenoiserOutput, &Sequence, &Sequence, f64, f64) -> Result<DTerm>;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub cases: usize,
    pub max_abs_diff: f64,
    pub failures: usize,
}

/// Random cases with `D <= 4`, `S <= 5`, `t ∈ [0.01, 0.99)`, random softmax
/// outputs and mask patterns, `η` alternating over `etas`. Compares the
/// general evaluation against `closed_form`.
pub fn equivalence_sweep<R: Rng + ?Sized>(
    num_cases: usize,
    etas: &[f64],
    closed_form: ClosedFormDTerm,
    rng: &mut R,
) -> Result<SweepReport> {
    let mut report = SweepReport {
        cases: num_cases,
        max_abs_diff: 0.0,
        failures: 0,
    };
    for case in 0..num_cases {
        let eta = etas[case % etas.len()];
        let (alphabet, theta, reference, xt, x1, t) = random_dterm_case(rng)?;
        let general = d_term_general(alphabet, NoiseSchedule::Masking, &theta, &reference, &xt, &x1, t, eta)?;
        let closed = closed_form(alphabet, &theta, &reference, &xt, &x1, t, eta)?;
        let diff = (general.value - closed.value).abs();
        if !(diff <= 1e-10) {
            report.failures += 1;
        }
        report.max_abs_diff = report.max_abs_diff.max(if diff.is_nan() { f64::INFINITY } else { diff });
    }
    Ok(report)
}

/// Transparent wrapper that counts forward evaluations of the wrapped model.
#[derive(Debug)]
pub struct Counted<M> {
    inner: M,
    forwards: AtomicU64,
}

impl<M> Counted<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            forwards: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    fn tick(&self) {
        self.forwards.fetch_add(1, Ordering::Relaxed);
    }
}

impl<M: Denoiser> Denoiser for Counted<M> {
    fn alphabet(&self) -> Alphabet {
        self.inner.alphabet()
    }

    fn num_dims(&self) -> usize {
        self.inner.num_dims()
    }

    fn predict(&self, xt: &Sequence, t: f64) -> DenoiserOutput {
        self.tick();
        self.inner.predict(xt, t)
    }
}

impl<M: Differentiable> Differentiable for Counted<M> {
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn forward_trace(&self, xt: &Sequence, t: f64) -> (DenoiserOutput, Trace) {
        self.tick();
        self.inner.forward_trace(xt, t)
    }

    fn backward(&self, trace: &Trace, dlogits: &[f64], grads: &mut GradAccumulator) -> Result<()> {
        self.inner.backward(trace, dlogits, grads)
    }
}

/// Snapshot of θ-model and reference-model forward counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct QueryCounter {
    pub theta: u64,
    pub reference: u64,
}

pub fn count_queries<T, R>(theta: &Counted<T>, reference: &Counted<R>) -> QueryCounter {
    QueryCounter {
        theta: theta.count(),
        reference: reference.count(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyMode {
    Quick,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub check_name: String,
    pub metric: f64,
    pub threshold: f64,
    pub pass: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationReport {
    pub mode: VerifyMode,
    pub all_pass: bool,
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.check_name == name)
    }
}

pub struct VerifyOptions {
    pub mode: VerifyMode,
    pub seed: u64,
    pub closed_form: ClosedFormDTerm,
}

impl VerifyOptions {
    pub fn new(mode: VerifyMode) -> Self {
        Self {
            mode,
            seed: 0x0d2d_0d90,
            closed_form: d_term_mask,
        }
    }
}

struct Checks {
    results: Vec<CheckResult>,
}

impl Checks {
    /// `metric <= threshold` passes; a NaN metric fails.
    fn run(&mut self, name: &str, threshold: f64, body: impl FnOnce() -> Result<f64>) -> Result<()> {
        let start = Instant::now();
        let metric = body()?;
        let seconds = start.elapsed().as_secs_f64();
        let pass = metric <= threshold;
        log::info!("{name}: metric {metric:.3e} threshold {threshold:.1e} {}", if pass { "pass" } else { "FAIL" });
        self.results.push(CheckResult {
            check_name: name.into(),
            metric,
            threshold,
            pass,
            seconds,
        });
        Ok(())
    }
}

/// Architecture used by the verification suite's gradient checks; matches
/// the desk-scale experiment.
pub fn verification_architecture() -> Architecture {
    Architecture {
        n_dims: 8,
        n_tokens: 2,
        hidden: vec![128, 128],
    }
}

/// Gradient check of the mean masked cross-entropy over a random batch.
pub fn gradcheck_pretrain(seed: u64, probes: usize) -> Result<GradCheckReport> {
    let arch = verification_architecture();
    let model = Mlp::init(arch.clone(), seed)?;
    let alphabet = model.alphabet();
    let mut rng = stream_rng(seed, 1);
    let batch: Vec<(Sequence, Sequence, f64)> = (0..6)
        .map(|_| {
            let x1 = Sequence::clean((0..arch.n_dims).map(|_| rng.gen_range(0..2)).collect(), alphabet)?;
            let t = rng.gen_range(0.05..0.95);
            let xt = sample_forward(alphabet, &x1, t, &mut rng)?;
            Ok((x1, xt, t))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let batch_loss = |net: &Mlp, grads: &mut GradAccumulator| -> Result<f64> {
        let mut total = 0.0;
        for (x1, xt, t) in &batch {
            total += pretrain_loss(net, x1, *t, xt, grads)?;
        }
        grads.scale(scale);
        Ok(total * scale)
    };
    let mut grads = GradAccumulator::for_model(&model);
    batch_loss(&model, &mut grads)?;
    let picks = spread_probes(&model, probes, &mut rng);
    let mut scratch = GradAccumulator::for_model(&model);
    Ok(fd_gradcheck(
        |p| {
            let net = Mlp::from_parts(arch.clone(), p.to_vec()).expect("same architecture");
            scratch.zero();
            batch_loss(&net, &mut scratch).expect("loss evaluates")
        },
        model.params(),
        grads.values(),
        &picks,
        1e-4,
    ))
}

/// Gradient check of the preference loss with frozen draws, at a point
/// away from the reference so both D-terms are nonzero.
pub fn gradcheck_d2dpo(seed: u64, probes: usize) -> Result<GradCheckReport> {
    let arch = verification_architecture();
    let reference = snapshot_ref(&Mlp::init(arch.clone(), seed)?);
    let mut theta = reference.params().clone();
    let mut rng = stream_rng(seed, 2);
    for p in theta.params_mut() {
        *p += rng.gen_range(-0.05..0.05);
    }
    let alphabet = theta.alphabet();
    let pair = PreferencePair::new(
        Sequence::clean(vec![1, 1, 1, 0, 0, 0, 0, 0], alphabet)?,
        Sequence::clean(vec![1, 1, 1, 1, 0, 0, 0, 0], alphabet)?,
        alphabet,
    )?;
    let cfg = DpoConfig {
        mc_t_samples: 4,
        beta: 0.5,
        eta: 1.0,
        ..DpoConfig::default()
    };
    let draw_seed = seed ^ 0x5eed;
    let mut grads = GradAccumulator::for_model(&theta);
    d2dpo_loss(&theta, &reference, &pair, &cfg, &mut stream_rng(draw_seed, 0), &mut grads)?;
    let picks = spread_probes(&theta, probes, &mut rng);
    let mut scratch = GradAccumulator::for_model(&theta);
    Ok(fd_gradcheck(
        |p| {
            let net = Mlp::from_parts(arch.clone(), p.to_vec()).expect("same architecture");
            scratch.zero();
            d2dpo_loss(&net, &reference, &pair, &cfg, &mut stream_rng(draw_seed, 0), &mut scratch)
                .expect("loss evaluates")
                .loss
        },
        theta.params(),
        grads.values(),
        &picks,
        1e-4,
    ))
}

/// TV distance between [`generate`] output and the forward-equation
/// terminal distribution for an exact Bayes denoiser.
pub fn sampler_vs_ode(
    model: &BayesDenoiser,
    eta: f64,
    t_max: f64,
    sampler_steps: usize,
    ode_steps: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let cfg = SamplerConfig {
        num_steps: sampler_steps,
        eta,
        t_max,
        rng_seed: seed,
    };
    let drawn = generate(model, &cfg, samples)?;
    let empirical = empirical_distribution(&drawn, model.alphabet(), model.num_dims());
    let exact = terminal_distribution(model, eta, t_max, ode_steps)?;
    Ok(total_variation(&empirical, &exact))
}

/// Largest standardised deviation (in binomial sigmas) of the per-dimension
/// unmask fraction from `t`, over `ts`.
pub fn forward_marginal_sigmas(ts: &[f64], draws: usize, seed: u64) -> Result<f64> {
    let alphabet = Alphabet::new(2)?;
    let x1 = Sequence::clean(vec![1], alphabet)?;
    let mut worst: f64 = 0.0;
    for (k, &t) in ts.iter().enumerate() {
        let mut rng = stream_rng(seed, k as u64);
        let mut kept = 0usize;
        for _ in 0..draws {
            if sample_forward(alphabet, &x1, t, &mut rng)?.is_clean(alphabet) {
                kept += 1;
            }
        }
        let sigma = (t * (1.0 - t) / draws as f64).sqrt();
        worst = worst.max((kept as f64 / draws as f64 - t).abs() / sigma);
    }
    Ok(worst)
}

/// Largest deviation of counted queries from `2T` per model per pair.
pub fn query_count_deviation(pairs: usize, draws: usize, seed: u64) -> Result<f64> {
    let arch = Architecture {
        n_dims: 4,
        n_tokens: 2,
        hidden: vec![8],
    };
    let theta = Counted::new(Mlp::init(arch.clone(), seed)?);
    let reference = Counted::new(snapshot_ref(&Mlp::init(arch, seed + 1)?));
    let alphabet = theta.alphabet();
    let pair = PreferencePair::new(
        Sequence::clean(vec![1, 0, 0, 0], alphabet)?,
        Sequence::clean(vec![1, 1, 0, 0], alphabet)?,
        alphabet,
    )?;
    let cfg = DpoConfig {
        mc_t_samples: draws,
        ..DpoConfig::default()
    };
    let mut grads = GradAccumulator::for_model(&theta);
    let mut rng = stream_rng(seed, 0);
    let mut worst: f64 = 0.0;
    for p in 0..pairs {
        let before = count_queries(&theta, &reference);
        let out = d2dpo_loss(&theta, &reference, &pair, &cfg, &mut rng, &mut grads)?;
        let after = count_queries(&theta, &reference);
        let expected = 2 * draws as u64;
        for got in [
            after.theta - before.theta,
            after.reference - before.reference,
            out.theta_queries,
            out.ref_queries,
        ] {
            worst = worst.max((got as f64 - expected as f64).abs());
        }
        let cumulative = count_queries(&theta, &reference);
        let expected_total = 2 * draws as u64 * (p as u64 + 1);
        worst = worst
            .max((cumulative.theta as f64 - expected_total as f64).abs())
            .max((cumulative.reference as f64 - expected_total as f64).abs());
    }
    Ok(worst)
}

/// Bit-level check that the η-scaled closed form equals `(1 + ηt)` times
/// the noiseless one. Returns the number of mismatching cases.
pub fn eta_scaling_mismatches<R: Rng + ?Sized>(
    cases: usize,
    closed_form: ClosedFormDTerm,
    rng: &mut R,
) -> Result<usize> {
    let mut bad = 0;
    for _ in 0..cases {
        let (alphabet, theta, reference, xt, x1, t) = random_dterm_case(rng)?;
        let eta = rng.gen_range(0.1..4.0);
        let noisy = closed_form(alphabet, &theta, &reference, &xt, &x1, t, eta)?.value;
        let clean = closed_form(alphabet, &theta, &reference, &xt, &x1, t, 0.0)?.value;
        if noisy.to_bits() != ((1.0 + eta * t) * clean).to_bits() {
            bad += 1;
        }
    }
    Ok(bad)
}

#[allow(clippy::type_complexity)]
pub(crate) fn random_dterm_case<R: Rng + ?Sized>(
    rng: &mut R,
) -> Result<(Alphabet, DenoiserOutput, DenoiserOutput, Sequence, Sequence, f64)> {
    let dims = rng.gen_range(1..=4);
    let s = rng.gen_range(2..=5);
    let alphabet = Alphabet::new(s)?;
    let out = |rng: &mut R| {
        let logits = (0..dims * s).map(|_| rng.gen_range(-4.0..4.0)).collect();
        DenoiserOutput::from_logits(dims, s, logits)
    };
    let theta = out(rng);
    let reference = out(rng);
    let x1 = Sequence::clean((0..dims).map(|_| rng.gen_range(0..s)).collect(), alphabet)?;
    let mut xt_tokens: Vec<Token> = x1
        .tokens()
        .iter()
        .map(|&x| if rng.gen_bool(0.5) { alphabet.mask() } else { x })
        .collect();
    xt_tokens[0] = alphabet.mask();
    let xt = Sequence::new(xt_tokens, alphabet)?;
    let t = rng.gen_range(0.01..0.99);
    Ok((alphabet, theta, reference, xt, x1, t))
}

/// Largest `|loss - ln 2|` over every draw of every pair when θ = ref.
pub fn reference_fixed_point_error(seed: u64, pairs: usize, draws: usize) -> Result<f64> {
    let theta = Mlp::init(verification_architecture(), seed)?;
    let reference = snapshot_ref(&theta);
    let alphabet = theta.alphabet();
    let mut rng = stream_rng(seed, 7);
    let cfg = DpoConfig {
        mc_t_samples: draws,
        ..DpoConfig::default()
    };
    let mut grads = GradAccumulator::for_model(&theta);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let w: Vec<Token> = (0..8).map(|_| rng.gen_range(0..2)).collect();
        let l: Vec<Token> = (0..8).map(|_| rng.gen_range(0..2)).collect();
        let pair = PreferencePair::new(Sequence::clean(w, alphabet)?, Sequence::clean(l, alphabet)?, alphabet)?;
        let out = d2dpo_loss(&theta, &reference, &pair, &cfg, &mut rng, &mut grads)?;
        for v in out.per_draw.iter().chain([&out.loss]) {
            worst = worst.max((v - std::f64::consts::LN_2).abs());
        }
    }
    Ok(worst)
}

/// The three-token / one-dimension chain used by sampler checks:
/// data distribution `(0.3, 0.7)` over `{0, 1}`.
pub fn binary_scalar_data() -> Result<BayesDenoiser> {
    BayesDenoiser::new(Alphabet::new(2)?, vec![(vec![0], 0.3), (vec![1], 0.7)])
}

/// Correlated two-dimensional binary data.
pub fn binary_pair_data() -> Result<BayesDenoiser> {
    BayesDenoiser::new(
        Alphabet::new(2)?,
        vec![
            (vec![0, 0], 0.40),
            (vec![0, 1], 0.05),
            (vec![1, 0], 0.15),
            (vec![1, 1], 0.40),
        ],
    )
}

/// Run every verification check. `Quick` skips the multi-dimensional and
/// re-masking sampler comparisons.
pub fn verify(opts: &VerifyOptions) -> Result<VerificationReport> {
    let mut checks = Checks { results: Vec::new() };
    let seed = opts.seed;

    checks.run("closed_form_equivalence", 1e-10, || {
        let r = equivalence_sweep(1000, &[0.0, 2.0], opts.closed_form, &mut stream_rng(seed, 100))?;
        Ok(r.max_abs_diff)
    })?;
    checks.run("eta_scaling_bit_exact", 0.0, || {
        Ok(eta_scaling_mismatches(100, opts.closed_form, &mut stream_rng(seed, 101))? as f64)
    })?;
    checks.run("reference_fixed_point", 0.0, || reference_fixed_point_error(seed, 20, 8))?;
    checks.run("gradcheck_pretrain", 1e-4, || Ok(gradcheck_pretrain(seed, 200)?.max_rel_err))?;
    checks.run("gradcheck_d2dpo", 1e-4, || Ok(gradcheck_d2dpo(seed, 200)?.max_rel_err))?;
    checks.run("sampler_vs_ode_d1", 0.02, || {
        sampler_vs_ode(&binary_scalar_data()?, 0.0, 1.0 - 1e-3, 1000, 20_000, 20_000, seed)
    })?;
    checks.run("forward_marginal_sigmas", 3.0, || {
        forward_marginal_sigmas(&[0.25, 0.5, 0.75], 10_000, seed)
    })?;
    checks.run("query_count_deviation", 0.0, || query_count_deviation(5, 3, seed))?;
    if opts.mode == VerifyMode::Full {
        checks.run("sampler_vs_ode_d2", 0.02, || {
            sampler_vs_ode(&binary_pair_data()?, 0.0, 1.0 - 1e-3, 1000, 20_000, 20_000, seed + 1)
        })?;
        checks.run("sampler_vs_ode_d1_eta2", 0.02, || {
            sampler_vs_ode(&binary_scalar_data()?, 2.0, 0.99, 1000, 20_000, 20_000, seed + 2)
        })?;
    }

    let all_pass = checks.results.iter().all(|c| c.pass);
    Ok(VerificationReport {
        mode: opts.mode,
        all_pass,
        checks: checks.results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_generator_leaves_distribution() {
        let chain = TinyChain::new(vec![0.2, 0.5, 0.3], |_| vec![0.0; 9]).unwrap();
        let p = ode_marginals(&chain, 3.0, 1000).unwrap();
        assert_eq!(p, vec![0.2, 0.5, 0.3]);
    }

    #[test]
    fn symmetric_flip_chain_reaches_half() {
        let chain = TinyChain::new(vec![1.0, 0.0], |_| vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        chain.check_generator(0.0, 1e-12).unwrap();
        let p = ode_marginals(&chain, 50.0, 100_000).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-6 && (p[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn ode_rejects_unstable_steps() {
        let chain = TinyChain::new(vec![1.0, 0.0], |_| vec![-10.0, 10.0, 0.0, 0.0]).unwrap();
        assert!(matches!(ode_marginals(&chain, 1.0, 2), Err(Error::NegativeMass { .. })));
    }

    #[test]
    fn reverse_chain_recovers_scalar_data() {
        let model = binary_scalar_data().unwrap();
        let chain = masking_chain(&model, 0.0).unwrap();
        for t in [0.0, 0.5, 0.99] {
            chain.check_generator(t, 1e-9).unwrap();
        }
        let p = terminal_distribution(&model, 0.0, 1.0 - 1e-3, 2000).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-3 && (p[1] - 0.7).abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn reverse_chain_recovers_correlated_data() {
        let model = binary_pair_data().unwrap();
        let p = terminal_distribution(&model, 0.0, 1.0 - 1e-3, 20_000).unwrap();
        assert!(total_variation(&p, &model.data_distribution()) < 1e-3, "{p:?}");
        let noisy = terminal_distribution(&model, 2.0, 0.99, 20_000).unwrap();
        assert!(total_variation(&noisy, &model.data_distribution()) < 1e-2, "{noisy:?}");
    }

    #[test]
    fn bayes_denoiser_conditions_on_observed_dims() {
        let model = binary_pair_data().unwrap();
        let a = model.alphabet();
        let out = model.predict(&Sequence::new(vec![0, 2], a).unwrap(), 0.3);
        assert!((out.prob(1, 1) - 0.05 / 0.45).abs() < 1e-12);
        assert_eq!(out.prob(0, 0), 1.0);
    }

    #[test]
    fn gradcheck_is_exact_on_linear_functions() {
        let w: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let point: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let probes: Vec<usize> = (0..50).collect();
        let report = fd_gradcheck(
            |p| p.iter().zip(&w).map(|(a, b)| a * b).sum(),
            &point,
            &w,
            &probes,
            1e-4,
        );
        assert!(report.max_rel_err <= 1e-8, "{report:?}");
    }

    #[test]
    fn gradcheck_flags_wrong_gradients() {
        let point = vec![1.0, 2.0];
        let report = fd_gradcheck(|p| p[0] * p[0] + p[1], &point, &[2.0, 1.5], &[0, 1], 1e-4);
        assert_eq!(report.worst_index, 1);
        assert!(report.max_rel_err > 0.3);
    }

    #[test]
    fn sweep_at_reference_is_zero() {
        let mut rng = stream_rng(2, 0);
        for _ in 0..50 {
            let (a, theta, _, xt, x1, t) = random_dterm_case(&mut rng).unwrap();
            for eta in [0.0, 2.0] {
                let g = d_term_general(a, NoiseSchedule::Masking, &theta, &theta, &xt, &x1, t, eta).unwrap();
                let c = d_term_mask(a, &theta, &theta, &xt, &x1, t, eta).unwrap();
                assert_eq!(c.value, 0.0);
                assert!(g.value.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sweep_detects_tampered_closed_form() {
        fn flipped(
            a: Alphabet,
            th: &DenoiserOutput,
            r: &DenoiserOutput,
            xt: &Sequence,
            x1: &Sequence,
            t: f64,
            eta: f64,
        ) -> Result<DTerm> {
            let mut d = d_term_mask(a, th, r, xt, x1, t, eta)?;
            d.value = -d.value;
            Ok(d)
        }
        let good = equivalence_sweep(200, &[0.0, 2.0], d_term_mask, &mut stream_rng(1, 0)).unwrap();
        assert_eq!(good.failures, 0);
        let bad = equivalence_sweep(200, &[0.0, 2.0], flipped, &mut stream_rng(1, 0)).unwrap();
        assert!(bad.failures > 0 && bad.max_abs_diff > 1e-3);
    }

    #[test]
    fn query_counts_scale_with_draws_and_pairs() {
        assert_eq!(query_count_deviation(1, 1, 3).unwrap(), 0.0);
        assert_eq!(query_count_deviation(4, 5, 3).unwrap(), 0.0);
    }

    #[test]
    fn counted_wrapper_is_transparent() {
        let arch = Architecture { n_dims: 2, n_tokens: 3, hidden: vec![4] };
        let m = Mlp::init(arch, 1).unwrap();
        let c = Counted::new(m.clone());
        let x = Sequence::new(vec![3, 1], m.alphabet()).unwrap();
        assert_eq!(c.predict(&x, 0.2), m.predict(&x, 0.2));
        let (out, _) = c.forward_trace(&x, 0.2);
        assert_eq!(out, m.predict(&x, 0.2));
        assert_eq!(c.count(), 2);
    }
}
