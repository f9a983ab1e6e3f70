//! Masking-state CTMC: state representation, forward noise kernel, rate
//! matrices, and the reverse-time Euler sampler.
//!
//! Tokens are plain `usize` ids. Real tokens occupy `0..S` and the mask
//! symbol is fixed at id `S`, so the augmented alphabet has `S + 1` symbols.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Denoiser;

pub type Token = usize;

/// Stay probabilities in `[-STAY_FLOOR, 0)` are treated as exactly zero.
/// Anything more negative means the step is too large for the current rates.
pub const STAY_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    size: usize,
}

impl Alphabet {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Alphabet(format!(
                "need at least 2 real tokens, got {size}"
            )));
        }
        Ok(Self { size })
    }

    /// Number of real (unmasked) tokens `S`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask(&self) -> Token {
        self.size
    }

    /// `S + 1`: real tokens plus the mask.
    pub fn augmented_size(&self) -> usize {
        self.size + 1
    }

    pub fn is_mask(&self, token: Token) -> bool {
        token == self.size
    }

    fn check(&self, token: Token) -> Result<()> {
        if token > self.size {
            return Err(Error::TokenOutOfRange {
                token,
                size: self.augmented_size(),
            });
        }
        Ok(())
    }
}

/// A fixed-length vector of token ids over the augmented alphabet.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sequence {
    tokens: Vec<Token>,
}

impl Sequence {
    pub fn new(tokens: Vec<Token>, alphabet: Alphabet) -> Result<Self> {
        for &tok in &tokens {
            alphabet.check(tok)?;
        }
        Ok(Self { tokens })
    }

    /// A sequence that must not contain the mask token.
    pub fn clean(tokens: Vec<Token>, alphabet: Alphabet) -> Result<Self> {
        let seq = Self::new(tokens, alphabet)?;
        seq.ensure_clean(alphabet)?;
        Ok(seq)
    }

    pub fn all_masked(len: usize, alphabet: Alphabet) -> Self {
        Self {
            tokens: vec![alphabet.mask(); len],
        }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_clean(&self, alphabet: Alphabet) -> bool {
        !self.tokens.iter().any(|&t| alphabet.is_mask(t))
    }

    pub fn masked_count(&self, alphabet: Alphabet) -> usize {
        self.tokens.iter().filter(|&&t| alphabet.is_mask(t)).count()
    }

    pub fn ensure_clean(&self, alphabet: Alphabet) -> Result<()> {
        match self.tokens.iter().position(|&t| alphabet.is_mask(t)) {
            Some(dim) => Err(Error::NotClean { dim }),
            None => Ok(()),
        }
    }
}

/// Forward noise process `q_{t|1}`. Only the masking interpolation is in scope.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseSchedule {
    #[default]
    Masking,
}

impl NoiseSchedule {
    /// `q_{t|1}(xt | x1)`.
    pub fn kernel_prob(&self, alphabet: Alphabet, x1: Token, xt: Token, t: f64) -> Result<f64> {
        alphabet.check(xt)?;
        alphabet.check(x1)?;
        if alphabet.is_mask(x1) {
            return Err(Error::NotClean { dim: 0 });
        }
        check_unit_time(t)?;
        match self {
            NoiseSchedule::Masking => Ok(if xt == x1 {
                t
            } else if alphabet.is_mask(xt) {
                1.0 - t
            } else {
                0.0
            }),
        }
    }

    /// `∂_t q_{t|1}(xt | x1)`.
    pub fn kernel_time_derivative(&self, alphabet: Alphabet, x1: Token, xt: Token) -> f64 {
        match self {
            NoiseSchedule::Masking => {
                if xt == x1 {
                    1.0
                } else if alphabet.is_mask(xt) {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Size of the kernel's support at time `t`, `|{j : q_{t|1}(j|x1) > 0}|`.
    pub fn support_size(&self, alphabet: Alphabet, x1: Token, t: f64) -> Result<usize> {
        let mut count = 0;
        for j in 0..alphabet.augmented_size() {
            if self.kernel_prob(alphabet, x1, j, t)? > 0.0 {
                count += 1;
            }
        }
        Ok(count)
    }

    /// Whether `xt` can ever be reached from `x1` under this schedule.
    pub fn reachable(&self, alphabet: Alphabet, x1: Token, xt: Token) -> bool {
        match self {
            NoiseSchedule::Masking => xt == x1 || alphabet.is_mask(xt),
        }
    }
}

fn check_unit_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Time {
            t,
            range: "[0, 1]",
        });
    }
    Ok(())
}

fn check_open_time(t: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Time {
            t,
            range: "[0, 1)",
        });
    }
    Ok(())
}

pub fn masking_kernel_prob(alphabet: Alphabet, x1: Token, xt: Token, t: f64) -> Result<f64> {
    NoiseSchedule::Masking.kernel_prob(alphabet, x1, xt, t)
}

/// Corrupt a clean sequence to time `t`: each dimension independently keeps
/// its token with probability `t` and is masked otherwise.
pub fn sample_forward<R: Rng + ?Sized>(
    alphabet: Alphabet,
    x1: &Sequence,
    t: f64,
    rng: &mut R,
) -> Result<Sequence> {
    x1.ensure_clean(alphabet)?;
    check_unit_time(t)?;
    let tokens = x1
        .tokens
        .iter()
        .map(|&tok| {
            let u: f64 = rng.gen();
            if u < t {
                tok
            } else {
                alphabet.mask()
            }
        })
        .collect();
    Ok(Sequence { tokens })
}

/// One off-diagonal conditional rate query `R^q_t(from, to | clean)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateQuery {
    pub from: Token,
    pub to: Token,
    pub clean: Token,
    pub t: f64,
}

/// Conditional rate from the ReLU-of-kernel-derivatives construction,
/// normalised by the support size of `q_{t|1}` (2 for masking).
///
/// Targets that the forward process can never reach from `clean` carry zero
/// rate regardless of the derivative difference.
pub fn conditional_rate_general(
    alphabet: Alphabet,
    schedule: NoiseSchedule,
    q: RateQuery,
) -> Result<f64> {
    alphabet.check(q.from)?;
    alphabet.check(q.to)?;
    if q.from == q.to {
        return Err(Error::Shape(
            "conditional rate queries must be off-diagonal".into(),
        ));
    }
    check_open_time(q.t)?;
    let q_from = schedule.kernel_prob(alphabet, q.clean, q.from, q.t)?;
    if q_from <= 0.0 {
        return Err(Error::UnreachableState { from: q.from });
    }
    if !schedule.reachable(alphabet, q.clean, q.to) {
        return Ok(0.0);
    }
    let d_to = schedule.kernel_time_derivative(alphabet, q.clean, q.to);
    let d_from = schedule.kernel_time_derivative(alphabet, q.clean, q.from);
    let z = schedule.support_size(alphabet, q.clean, q.t)? as f64;
    Ok((d_to - d_from).max(0.0) / (z * q_from))
}

/// Conditional rate including the re-masking noise of strength `eta`.
///
/// The extra term is the detailed-balance partner of `q_{t|1}`: unmasked
/// tokens re-mask at rate `eta`, and the mask flows back to `clean` at
/// `eta * q(clean) / q(mask)`. With `eta = 0` this is exactly
/// [`conditional_rate_general`].
pub fn conditional_rate_noisy(
    alphabet: Alphabet,
    schedule: NoiseSchedule,
    q: RateQuery,
    eta: f64,
) -> Result<f64> {
    let base = conditional_rate_general(alphabet, schedule, q)?;
    if eta == 0.0 {
        return Ok(base);
    }
    let extra = match schedule {
        NoiseSchedule::Masking => {
            if !alphabet.is_mask(q.from) && alphabet.is_mask(q.to) {
                eta
            } else if alphabet.is_mask(q.from) && q.to == q.clean {
                let q_to = schedule.kernel_prob(alphabet, q.clean, q.to, q.t)?;
                let q_from = schedule.kernel_prob(alphabet, q.clean, q.from, q.t)?;
                eta * q_to / q_from
            } else {
                0.0
            }
        }
    };
    Ok(base + extra)
}

/// Closed-form masking conditional rate: `1/(1-t)` from mask to the clean
/// token, zero otherwise.
pub fn conditional_rate_mask(alphabet: Alphabet, q: RateQuery) -> Result<f64> {
    check_open_time(q.t)?;
    Ok(if alphabet.is_mask(q.from) && q.to == q.clean {
        1.0 / (1.0 - q.t)
    } else {
        0.0
    })
}

/// Per-dimension unconditional rate under a denoiser distribution `p1t`
/// (over the `S` real tokens), with re-masking noise `eta`.
pub fn unconditional_rate_mask(
    alphabet: Alphabet,
    p1t: &[f64],
    xt: Token,
    to: Token,
    t: f64,
    eta: f64,
) -> f64 {
    if alphabet.is_mask(xt) && !alphabet.is_mask(to) {
        (1.0 + eta * t) / (1.0 - t) * p1t[to]
    } else if !alphabet.is_mask(xt) && alphabet.is_mask(to) {
        eta
    } else {
        0.0
    }
}

/// Full rate-matrix row for one dimension over the augmented alphabet, with
/// the diagonal set to the negative off-diagonal sum.
pub fn unconditional_rate_row(
    alphabet: Alphabet,
    p1t: &[f64],
    xt: Token,
    t: f64,
    eta: f64,
) -> Vec<f64> {
    let mut row: Vec<f64> = (0..alphabet.augmented_size())
        .map(|j| {
            if j == xt {
                0.0
            } else {
                unconditional_rate_mask(alphabet, p1t, xt, j, t, eta)
            }
        })
        .collect();
    row[xt] = -row.iter().sum::<f64>();
    row
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub eta: f64,
    pub t_max: f64,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 200,
            eta: 0.0,
            t_max: 1.0 - 1e-3,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("sampler.num_steps must be >= 1".into()));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config("sampler.eta must be finite and >= 0".into()));
        }
        if !(self.t_max > 0.0 && self.t_max < 1.0) {
            return Err(Error::Config("sampler.t_max must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Independent rng stream `stream` under base seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Inverse-CDF draw from a (possibly slightly unnormalised) categorical.
/// Rounding slack at the top falls to the last index with positive weight.
pub fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// One Euler step of the reverse CTMC. `probs` is the denoiser table for the
/// current state, laid out as `D x S` row-major.
///
/// Each dimension moves independently with probabilities `δ + R·dt`.
pub fn euler_step<R: Rng + ?Sized>(
    alphabet: Alphabet,
    x: &Sequence,
    probs: &[f64],
    t: f64,
    dt: f64,
    eta: f64,
    rng: &mut R,
) -> Result<Sequence> {
    let s = alphabet.size();
    if probs.len() != x.len() * s {
        return Err(Error::Shape(format!(
            "denoiser table has {} entries, expected {} x {}",
            probs.len(),
            x.len(),
            s
        )));
    }
    if !(dt > 0.0) || t + dt > 1.0 + 1e-12 {
        return Err(Error::Time {
            t: t + dt,
            range: "dt > 0 and t + dt <= 1",
        });
    }
    check_open_time(t)?;

    let mut tokens = Vec::with_capacity(x.len());
    let mut step = vec![0.0; alphabet.augmented_size()];
    for (d, &xt) in x.tokens.iter().enumerate() {
        let row = unconditional_rate_row(alphabet, &probs[d * s..(d + 1) * s], xt, t, eta);
        for (j, r) in row.iter().enumerate() {
            step[j] = if j == xt { 1.0 + r * dt } else { r * dt };
        }
        let stay = step[xt];
        if stay < -STAY_FLOOR {
            return Err(Error::NegativeStay {
                dim: d,
                stay,
                t,
                dt,
            });
        }
        step[xt] = stay.max(0.0);
        let u: f64 = rng.gen();
        tokens.push(sample_categorical(&step, u));
    }
    Ok(Sequence { tokens })
}

/// Draw `num_samples` clean sequences by simulating the reverse process from
/// the all-mask state up to `t_max`, then decoding any remaining masked
/// dimensions from `p_{1|t_max}`.
///
/// Sample `i` uses rng stream `i` under `cfg.rng_seed`.
pub fn generate<M: Denoiser + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    num_samples: usize,
) -> Result<Vec<Sequence>> {
    cfg.validate()?;
    (0..num_samples)
        .map(|i| {
            let mut rng = stream_rng(cfg.rng_seed, i as u64);
            generate_one(model, cfg, &mut rng)
        })
        .collect()
}

fn generate_one<M: Denoiser + ?Sized, R: Rng>(
    model: &M,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Sequence> {
    let alphabet = model.alphabet();
    let s = alphabet.size();
    let dt = cfg.t_max / cfg.num_steps as f64;
    let mut x = Sequence::all_masked(model.num_dims(), alphabet);
    for n in 0..cfg.num_steps {
        // With no re-masking, a fully unmasked state is absorbing.
        if cfg.eta == 0.0 && x.is_clean(alphabet) {
            return Ok(x);
        }
        let t = n as f64 * dt;
        let out = model.predict(&x, t);
        x = euler_step(alphabet, &x, out.probs(), t, dt, cfg.eta, rng)?;
    }
    if !x.is_clean(alphabet) {
        let out = model.predict(&x, cfg.t_max);
        for d in 0..x.len() {
            if alphabet.is_mask(x.tokens[d]) {
                let u: f64 = rng.gen();
                x.tokens[d] = sample_categorical(&out.probs()[d * s..(d + 1) * s], u);
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::TableDenoiser;
    use proptest::prelude::*;

    fn alpha(s: usize) -> Alphabet {
        Alphabet::new(s).unwrap()
    }

    #[test]
    fn alphabet_rejects_single_token() {
        assert!(Alphabet::new(1).is_err());
        let a = alpha(6);
        assert_eq!(a.mask(), 6);
        assert_eq!(a.augmented_size(), 7);
    }

    #[test]
    fn kernel_examples() {
        let a = alpha(6);
        let m = a.mask();
        assert_eq!(masking_kernel_prob(a, 3, 3, 0.7).unwrap(), 0.7);
        assert!((masking_kernel_prob(a, 3, m, 0.7).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(masking_kernel_prob(a, 3, 5, 0.7).unwrap(), 0.0);
        assert!(matches!(
            masking_kernel_prob(a, m, m, 0.5),
            Err(Error::NotClean { .. })
        ));
        assert!(masking_kernel_prob(a, 3, 3, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn kernel_normalises(s in 2usize..8, x1_seed in 0usize..100, t in 0.0f64..=1.0) {
            let a = alpha(s);
            let x1 = x1_seed % s;
            let total: f64 = (0..a.augmented_size())
                .map(|xt| masking_kernel_prob(a, x1, xt, t).unwrap())
                .sum();
            prop_assert_eq!(total, t + (1.0 - t));
            prop_assert!((total - 1.0).abs() <= f64::EPSILON);
        }
    }

    #[test]
    fn forward_endpoints() {
        let a = alpha(3);
        let x1 = Sequence::clean(vec![0, 1, 2, 1, 0], a).unwrap();
        let mut rng = stream_rng(7, 0);
        let at0 = sample_forward(a, &x1, 0.0, &mut rng).unwrap();
        assert_eq!(at0, Sequence::all_masked(5, a));
        let at1 = sample_forward(a, &x1, 1.0, &mut rng).unwrap();
        assert_eq!(at1, x1);
        let dirty = Sequence::new(vec![0, 3], a).unwrap();
        assert!(sample_forward(a, &dirty, 0.5, &mut rng).is_err());
    }

    #[test]
    fn forward_unmask_fraction_concentrates() {
        let a = alpha(2);
        let x1 = Sequence::clean(vec![1; 10_000], a).unwrap();
        let mut rng = stream_rng(11, 0);
        let xt = sample_forward(a, &x1, 0.7, &mut rng).unwrap();
        let kept = xt.len() - xt.masked_count(a);
        let frac = kept as f64 / xt.len() as f64;
        // 3 sigma of Binomial(1e4, 0.7) is 0.0137, inside the 0.02 band.
        assert!((frac - 0.7).abs() <= 0.02, "fraction {frac}");
    }

    #[test]
    fn forward_is_deterministic_per_seed() {
        let a = alpha(4);
        let x1 = Sequence::clean((0..64).map(|i| i % 4).collect(), a).unwrap();
        let x = sample_forward(a, &x1, 0.4, &mut stream_rng(3, 9)).unwrap();
        let y = sample_forward(a, &x1, 0.4, &mut stream_rng(3, 9)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn general_rate_examples() {
        let a = alpha(4);
        let m = a.mask();
        let s = NoiseSchedule::Masking;
        let r = conditional_rate_general(a, s, RateQuery { from: m, to: 1, clean: 1, t: 0.75 }).unwrap();
        assert!((r - 4.0).abs() < 1e-12);
        let r = conditional_rate_general(a, s, RateQuery { from: 1, to: m, clean: 1, t: 0.5 }).unwrap();
        assert_eq!(r, 0.0);
        for j in [0, 2, 3] {
            let r = conditional_rate_general(a, s, RateQuery { from: m, to: j, clean: 1, t: 0.3 }).unwrap();
            assert_eq!(r, 0.0);
        }
        let err = conditional_rate_general(a, s, RateQuery { from: 2, to: m, clean: 1, t: 0.3 });
        assert!(matches!(err, Err(Error::UnreachableState { from: 2 })));
        assert!(conditional_rate_general(a, s, RateQuery { from: m, to: 1, clean: 1, t: 1.0 }).is_err());
    }

    #[test]
    fn closed_form_rate_examples() {
        let a = alpha(4);
        let m = a.mask();
        assert_eq!(conditional_rate_mask(a, RateQuery { from: m, to: 2, clean: 2, t: 0.75 }).unwrap(), 4.0);
        assert_eq!(conditional_rate_mask(a, RateQuery { from: 2, to: m, clean: 2, t: 0.5 }).unwrap(), 0.0);
        assert_eq!(conditional_rate_mask(a, RateQuery { from: m, to: 0, clean: 2, t: 0.5 }).unwrap(), 0.0);
        assert!(conditional_rate_mask(a, RateQuery { from: m, to: 2, clean: 2, t: 1.0 }).is_err());
    }

    #[test]
    fn general_matches_closed_form_on_grid() {
        for s in 2..=5 {
            let a = alpha(s);
            for k in 0..50 {
                let t = 0.01 + 0.98 * k as f64 / 49.0;
                for x1 in 0..s {
                    for from in 0..a.augmented_size() {
                        if masking_kernel_prob(a, x1, from, t).unwrap() <= 0.0 {
                            continue;
                        }
                        for to in 0..a.augmented_size() {
                            if to == from {
                                continue;
                            }
                            let q = RateQuery { from, to, clean: x1, t };
                            let g = conditional_rate_general(a, NoiseSchedule::Masking, q).unwrap();
                            let c = conditional_rate_mask(a, q).unwrap();
                            assert!((g - c).abs() <= 1e-12, "{q:?}: {g} vs {c}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn noisy_rate_is_in_detailed_balance_with_kernel() {
        let a = alpha(3);
        let m = a.mask();
        let eta = 2.0;
        let t = 0.4;
        let x1 = 1;
        // Only the eta part is in detailed balance; subtract the base rate.
        let up = conditional_rate_noisy(a, NoiseSchedule::Masking, RateQuery { from: m, to: x1, clean: x1, t }, eta).unwrap()
            - conditional_rate_mask(a, RateQuery { from: m, to: x1, clean: x1, t }).unwrap();
        let down = conditional_rate_noisy(a, NoiseSchedule::Masking, RateQuery { from: x1, to: m, clean: x1, t }, eta).unwrap();
        let q_m = masking_kernel_prob(a, x1, m, t).unwrap();
        let q_x = masking_kernel_prob(a, x1, x1, t).unwrap();
        assert!((q_m * up - q_x * down).abs() < 1e-12);
        let total = conditional_rate_noisy(a, NoiseSchedule::Masking, RateQuery { from: m, to: x1, clean: x1, t }, eta).unwrap();
        assert!((total - (1.0 + eta * t) / (1.0 - t)).abs() < 1e-12);
    }

    #[test]
    fn unconditional_rate_examples() {
        let a = alpha(4);
        let m = a.mask();
        let uniform = [0.25; 4];
        assert!((unconditional_rate_mask(a, &uniform, m, 2, 0.5, 0.0) - 0.5).abs() < 1e-15);
        assert_eq!(unconditional_rate_mask(a, &uniform, 1, m, 0.3, 2.0), 2.0);
        assert_eq!(unconditional_rate_mask(a, &uniform, 1, 2, 0.3, 2.0), 0.0);
        assert_eq!(unconditional_rate_mask(a, &uniform, 1, 2, 0.9, 0.0), 0.0);
    }

    proptest! {
        #[test]
        fn unconditional_rate_is_expectation_of_conditional(
            s in 2usize..6,
            raw in proptest::collection::vec(0.01f64..1.0, 6),
            t in 0.0f64..0.99,
        ) {
            let a = alpha(s);
            let m = a.mask();
            let z: f64 = raw[..s].iter().sum();
            let p: Vec<f64> = raw[..s].iter().map(|v| v / z).collect();
            for to in 0..a.augmented_size() {
                if to == m { continue; }
                let expectation: f64 = (0..s)
                    .map(|x1| p[x1] * conditional_rate_mask(a, RateQuery { from: m, to, clean: x1, t }).unwrap())
                    .sum();
                let direct = unconditional_rate_mask(a, &p, m, to, t, 0.0);
                prop_assert!((expectation - direct).abs() <= 1e-12);
            }
        }

        #[test]
        fn rate_rows_are_generator_rows(
            s in 2usize..6,
            raw in proptest::collection::vec(0.01f64..1.0, 6),
            t in 0.0f64..0.99,
            eta in 0.0f64..3.0,
            xt_seed in 0usize..10,
        ) {
            let a = alpha(s);
            let z: f64 = raw[..s].iter().sum();
            let p: Vec<f64> = raw[..s].iter().map(|v| v / z).collect();
            let xt = xt_seed % a.augmented_size();
            let row = unconditional_rate_row(a, &p, xt, t, eta);
            for (j, r) in row.iter().enumerate() {
                if j != xt { prop_assert!(*r >= 0.0); }
            }
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn euler_step_identity_when_rates_vanish() {
        let a = alpha(3);
        let x = Sequence::clean(vec![0, 2, 1, 1], a).unwrap();
        let probs = vec![1.0 / 3.0; 12];
        let mut rng = stream_rng(1, 0);
        for _ in 0..20 {
            let y = euler_step(a, &x, &probs, 0.3, 0.5, 0.0, &mut rng).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn euler_step_full_unmask_with_unit_jump_probability() {
        let a = alpha(4);
        let x = Sequence::all_masked(1, a);
        let probs = vec![0.0, 0.0, 1.0, 0.0];
        for seed in 0..200 {
            let mut rng = stream_rng(seed, 0);
            let y = euler_step(a, &x, &probs, 0.9, 0.1, 0.0, &mut rng).unwrap();
            assert_eq!(y.tokens(), &[2]);
        }
    }

    #[test]
    fn euler_step_rejects_oversized_step() {
        let a = alpha(2);
        let x = Sequence::all_masked(2, a);
        let probs = vec![0.5; 4];
        let mut rng = stream_rng(1, 0);
        let err = euler_step(a, &x, &probs, 0.8, 0.19, 0.0, &mut rng);
        assert!(err.is_ok());
        let err = euler_step(a, &x, &probs, 0.7, 0.29, 5.0, &mut rng);
        assert!(matches!(err, Err(Error::NegativeStay { .. })));
        assert!(euler_step(a, &x, &probs[..2], 0.1, 0.1, 0.0, &mut rng).is_err());
    }

    #[test]
    fn generate_decodes_one_hot_denoiser() {
        let a = alpha(3);
        let target = [2usize, 0, 1, 1, 0];
        let table = TableDenoiser::constant(a, &target);
        let cfg = SamplerConfig { num_steps: 50, ..SamplerConfig::default() };
        let samples = generate(&table, &cfg, 40).unwrap();
        assert_eq!(samples.len(), 40);
        for s in samples {
            assert_eq!(s.tokens(), &target);
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let a = alpha(2);
        let table = TableDenoiser::uniform(a, 6);
        let cfg = SamplerConfig { num_steps: 30, eta: 0.5, t_max: 0.9, rng_seed: 42 };
        let x = generate(&table, &cfg, 25).unwrap();
        let y = generate(&table, &cfg, 25).unwrap();
        assert_eq!(x, y);
        assert!(x.iter().all(|s| s.is_clean(a)));
    }
}
