//! The structured-binary alignment task.
//!
//! Integers `i ∈ {0..D}` are written as `i` ones followed by `D - i` zeros.
//! A model is pretrained on all valid encodings, then fine-tuned with the
//! preference loss on (odd, even) pairs. Progress is tracked with the odd
//! ratio and the valid-samples ratio (VSR) of generated sequences.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::{generate, sample_forward, stream_rng, Alphabet, SamplerConfig, Sequence};
use crate::error::{Error, Result};
use crate::losses::{d2dpo_loss, pretrain_loss, DpoConfig, PreferencePair, RunningMean};
use crate::net::{
    optimizer_step, snapshot_ref, AdamConfig, AdamState, Architecture, Denoiser, GradAccumulator,
    Mlp,
};

pub const CSV_HEADER: &str = "epoch,phase,loss,odd_ratio,vsr,theta_queries,ref_queries,wall_ms";

const PRETRAIN_STREAM: u64 = 1;
const FINETUNE_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;
const PAIRS_STREAM: u64 = 4;

pub fn binary_alphabet() -> Alphabet {
    Alphabet::new(2).expect("two tokens")
}

/// `i` ones followed by `n_bits - i` zeros.
pub fn encode(i: usize, n_bits: usize) -> Result<Sequence> {
    if i > n_bits {
        return Err(Error::Shape(format!("{i} does not fit in {n_bits} bits")));
    }
    let tokens = (0..n_bits).map(|d| usize::from(d < i)).collect();
    Sequence::clean(tokens, binary_alphabet())
}

/// Inverse of [`encode`]; `None` for anything that is not a valid encoding.
pub fn decode(x: &Sequence) -> Option<usize> {
    let ones = x.tokens().iter().take_while(|&&t| t == 1).count();
    x.tokens()[ones..].iter().all(|&t| t == 0).then_some(ones)
}

/// All `n_bits + 1` valid encodings, each repeated `multiplicity` times.
pub fn build_dataset(n_bits: usize, multiplicity: usize) -> Result<Vec<Sequence>> {
    if n_bits < 2 {
        return Err(Error::Config("n_bits must be >= 2".into()));
    }
    let mut data = Vec::with_capacity((n_bits + 1) * multiplicity);
    for i in 0..=n_bits {
        let x = encode(i, n_bits)?;
        data.extend(std::iter::repeat_n(x, multiplicity));
    }
    Ok(data)
}

/// Pairs with a uniformly drawn odd winner and even loser.
pub fn build_preferences<R: Rng + ?Sized>(
    n_bits: usize,
    num_pairs: usize,
    rng: &mut R,
) -> Result<Vec<PreferencePair>> {
    if n_bits < 2 {
        return Err(Error::Config("n_bits must be >= 2".into()));
    }
    let odds: Vec<usize> = (0..=n_bits).filter(|i| i % 2 == 1).collect();
    let evens: Vec<usize> = (0..=n_bits).filter(|i| i % 2 == 0).collect();
    (0..num_pairs)
        .map(|_| {
            let w = odds[rng.gen_range(0..odds.len())];
            let l = evens[rng.gen_range(0..evens.len())];
            PreferencePair::new(encode(w, n_bits)?, encode(l, n_bits)?, binary_alphabet())
        })
        .collect()
}

/// Fraction of samples of the form `1^i 0^(D-i)`. Zero for an empty list.
pub fn metric_vsr(samples: &[Sequence]) -> f64 {
    ratio(samples, |x| decode(x).is_some())
}

/// Fraction of all samples that are valid and decode to an odd integer.
pub fn metric_odd_ratio(samples: &[Sequence]) -> f64 {
    ratio(samples, |x| decode(x).is_some_and(|i| i % 2 == 1))
}

fn ratio(samples: &[Sequence], pred: impl Fn(&Sequence) -> bool) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|x| pred(x)).count() as f64 / samples.len() as f64
}

fn default_multiplicity() -> usize {
    64
}
fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}
fn default_pretrain_epochs() -> usize {
    300
}
fn default_pretrain_batch() -> usize {
    64
}
fn default_finetune_epochs() -> usize {
    200
}
fn default_num_pairs() -> usize {
    512
}
fn default_finetune_batch() -> usize {
    512
}
fn default_lr() -> f64 {
    1e-3
}
fn default_eval_samples() -> usize {
    1000
}
fn default_eval_every() -> usize {
    10
}

/// Everything that determines a run. Only `n_bits` is required in a config
/// file; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n_bits: usize,
    #[serde(default = "default_multiplicity")]
    pub dataset_multiplicity: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "default_pretrain_batch")]
    pub pretrain_batch: usize,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    #[serde(default = "default_num_pairs")]
    pub num_pairs: usize,
    #[serde(default = "default_finetune_batch")]
    pub finetune_batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Loss settings. The `t_min`/`t_max` clamp also bounds pretraining times.
    #[serde(default)]
    pub dpo: DpoConfig,
    /// Sampler used for evaluation. Its `rng_seed` is only the default for
    /// the `sample` command; evaluation streams derive from `seed`.
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub finetune_draws: DrawSchedule,
    /// Fill the `wall_ms` column. Off by default so that records are
    /// byte-identical across repeated runs.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl RunConfig {
    pub fn with_bits(n_bits: usize) -> Self {
        Self {
            n_bits,
            dataset_multiplicity: default_multiplicity(),
            hidden: default_hidden(),
            pretrain_epochs: default_pretrain_epochs(),
            pretrain_batch: default_pretrain_batch(),
            finetune_epochs: default_finetune_epochs(),
            num_pairs: default_num_pairs(),
            finetune_batch: default_finetune_batch(),
            lr: default_lr(),
            dpo: DpoConfig::default(),
            sampler: SamplerConfig::default(),
            eval_samples: default_eval_samples(),
            eval_every: default_eval_every(),
            seed: 0,
            finetune_draws: DrawSchedule::default(),
            record_wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bits < 2 {
            return Err(Error::Config("n_bits must be >= 2".into()));
        }
        for (name, v) in [
            ("dataset_multiplicity", self.dataset_multiplicity),
            ("pretrain_batch", self.pretrain_batch),
            ("num_pairs", self.num_pairs),
            ("finetune_batch", self.finetune_batch),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive and finite".into()));
        }
        self.architecture().validate()?;
        self.dpo.validate()?;
        self.sampler.validate()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            n_dims: self.n_bits,
            n_tokens: 2,
            hidden: self.hidden.clone(),
        }
    }

    /// Parse a JSON config, reporting the offending field path on error.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Whether each preference pair gets new Monte Carlo draws every epoch or
/// keeps the same ones for the whole run. With fixed draws the epoch loss
/// is a deterministic function of the weights, so the recorded curve shows
/// optimisation progress rather than sampling noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawSchedule {
    Fresh,
    #[default]
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

/// One row of `records.csv`. Epoch 0 is the model before any update; its
/// loss is evaluated without stepping the optimizer. Metrics are present on
/// evaluation epochs only. Query counts are cumulative training forwards.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub odd_ratio: Option<f64>,
    pub vsr: Option<f64>,
    pub theta_queries: u64,
    pub ref_queries: u64,
    pub wall_ms: Option<u64>,
}

pub fn records_to_csv(records: &[TrainRecord]) -> String {
    fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
        v.as_ref().map(|x| x.to_string()).unwrap_or_default()
    }
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.phase.as_str(),
            r.loss,
            opt(&r.odd_ratio),
            opt(&r.vsr),
            r.theta_queries,
            r.ref_queries,
            opt(&r.wall_ms)
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub odd_ratio: f64,
    pub vsr: f64,
}

/// Seed for a derived, independent rng stream.
fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    stream_rng(seed ^ index.rotate_left(32), stream).gen()
}

/// Draw `cfg.eval_samples` sequences on the evaluation stream for `epoch`.
pub fn evaluate<M: Denoiser + ?Sized>(model: &M, cfg: &RunConfig, phase: Phase, epoch: usize) -> Result<Metrics> {
    let sampler = SamplerConfig {
        rng_seed: derive_seed(cfg.seed, EVAL_STREAM, ((phase as u64) << 40) | epoch as u64),
        ..cfg.sampler.clone()
    };
    let samples = generate(model, &sampler, cfg.eval_samples)?;
    Ok(Metrics {
        odd_ratio: metric_odd_ratio(&samples),
        vsr: metric_vsr(&samples),
    })
}

fn is_eval_epoch(cfg: &RunConfig, epoch: usize, last: usize) -> bool {
    epoch.is_multiple_of(cfg.eval_every) || epoch == last
}

fn training_error(phase: Phase, epoch: usize, err: Error) -> Error {
    match err {
        Error::Training { .. } => err,
        other => Error::Training {
            phase: phase.as_str(),
            epoch,
            reason: other.to_string(),
        },
    }
}

fn check_loss(phase: Phase, epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            phase: phase.as_str(),
            epoch,
            reason: format!("non-finite loss {loss}"),
        })
    }
}

pub struct RunOutcome {
    pub model: Mlp,
    pub records: Vec<TrainRecord>,
}

impl RunOutcome {
    pub fn final_metrics(&self) -> Option<Metrics> {
        self.records.iter().rev().find_map(|r| {
            Some(Metrics {
                odd_ratio: r.odd_ratio?,
                vsr: r.vsr?,
            })
        })
    }
}

struct Recorder<'a> {
    cfg: &'a RunConfig,
    phase: Phase,
    start: Instant,
    records: Vec<TrainRecord>,
}

impl<'a> Recorder<'a> {
    fn new(cfg: &'a RunConfig, phase: Phase) -> Self {
        Self {
            cfg,
            phase,
            start: Instant::now(),
            records: Vec::new(),
        }
    }

    fn push<M: Denoiser + ?Sized>(
        &mut self,
        model: &M,
        epoch: usize,
        last: usize,
        loss: f64,
        queries: (u64, u64),
    ) -> Result<()> {
        let metrics = if is_eval_epoch(self.cfg, epoch, last) {
            let m = evaluate(model, self.cfg, self.phase, epoch)?;
            log::info!(
                "{} epoch {epoch}: loss {loss:.5} odd_ratio {:.3} vsr {:.3}",
                self.phase.as_str(),
                m.odd_ratio,
                m.vsr
            );
            Some(m)
        } else {
            log::debug!("{} epoch {epoch}: loss {loss:.5}", self.phase.as_str());
            None
        };
        self.records.push(TrainRecord {
            epoch,
            phase: self.phase,
            loss,
            odd_ratio: metrics.map(|m| m.odd_ratio),
            vsr: metrics.map(|m| m.vsr),
            theta_queries: queries.0,
            ref_queries: queries.1,
            wall_ms: self
                .cfg
                .record_wall_time
                .then(|| self.start.elapsed().as_millis() as u64),
        });
        Ok(())
    }
}

/// Masked cross-entropy pretraining from a fresh initialisation.
pub fn run_pretrain(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let phase = Phase::Pretrain;
    let mut model = Mlp::init(cfg.architecture(), cfg.seed)?;
    let alphabet = model.alphabet();
    let data = build_dataset(cfg.n_bits, cfg.dataset_multiplicity)?;
    let mut adam = AdamState::new(model.params().len());
    let hyper = cfg.adam();
    let mut grads = GradAccumulator::for_model(&model);
    let mut recorder = Recorder::new(cfg, phase);
    let mut queries = 0u64;
    let last = cfg.pretrain_epochs;

    for epoch in 0..=last {
        let mut rng = stream_rng(derive_seed(cfg.seed, PRETRAIN_STREAM, epoch as u64), 0);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = RunningMean::default();
        for batch in order.chunks(cfg.pretrain_batch) {
            grads.zero();
            let mut batch_loss = 0.0;
            for &i in batch {
                let t = rng.gen_range(cfg.dpo.t_min..cfg.dpo.t_max);
                let xt = sample_forward(alphabet, &data[i], t, &mut rng)?;
                let l = pretrain_loss(&model, &data[i], t, &xt, &mut grads)?;
                batch_loss += l;
                epoch_loss.push(l);
                queries += 1;
            }
            check_loss(phase, epoch, batch_loss)?;
            // Epoch 0 only measures the initial loss.
            if epoch > 0 {
                grads.scale(1.0 / batch.len() as f64);
                optimizer_step(&mut model, &grads, &mut adam, &hyper)
                    .map_err(|e| training_error(phase, epoch, e))?;
            }
        }
        let loss = epoch_loss.value();
        recorder.push(&model, epoch, last, loss, (queries, 0))?;
    }
    Ok(RunOutcome {
        model,
        records: recorder.records,
    })
}

/// Preference fine-tuning starting from `pretrained`, which is also frozen
/// as the reference.
pub fn run_finetune(pretrained: &Mlp, cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    if pretrained.architecture() != &cfg.architecture() {
        return Err(Error::Config(format!(
            "checkpoint architecture {:?} does not match the config {:?}",
            pretrained.architecture(),
            cfg.architecture()
        )));
    }
    let phase = Phase::Finetune;
    let reference = snapshot_ref(pretrained);
    let mut model = pretrained.clone();
    let pairs = build_preferences(cfg.n_bits, cfg.num_pairs, &mut stream_rng(cfg.seed, PAIRS_STREAM))?;
    let mut adam = AdamState::new(model.params().len());
    let hyper = cfg.adam();
    let mut grads = GradAccumulator::for_model(&model);
    let mut recorder = Recorder::new(cfg, phase);
    let (mut theta_q, mut ref_q) = (0u64, 0u64);
    let last = cfg.finetune_epochs;

    for epoch in 0..=last {
        let mut rng = stream_rng(derive_seed(cfg.seed, FINETUNE_STREAM, epoch as u64), 0);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let draw_seed = match cfg.finetune_draws {
            DrawSchedule::Fresh => derive_seed(cfg.seed, FINETUNE_STREAM, epoch as u64),
            DrawSchedule::Fixed => derive_seed(cfg.seed, FINETUNE_STREAM, u64::MAX),
        };
        let mut epoch_loss = RunningMean::default();
        for batch in order.chunks(cfg.finetune_batch) {
            grads.zero();
            let mut batch_loss = 0.0;
            for &i in batch {
                let mut draw_rng = stream_rng(draw_seed, 1 + i as u64);
                let out = d2dpo_loss(&model, &reference, &pairs[i], &cfg.dpo, &mut draw_rng, &mut grads)?;
                batch_loss += out.loss;
                epoch_loss.push(out.loss);
                theta_q += out.theta_queries;
                ref_q += out.ref_queries;
            }
            check_loss(phase, epoch, batch_loss)?;
            if epoch > 0 {
                grads.scale(1.0 / batch.len() as f64);
                optimizer_step(&mut model, &grads, &mut adam, &hyper)
                    .map_err(|e| training_error(phase, epoch, e))?;
            }
        }
        let loss = epoch_loss.value();
        recorder.push(&model, epoch, last, loss, (theta_q, ref_q))?;
    }
    Ok(RunOutcome {
        model,
        records: recorder.records,
    })
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Metadata written next to every run's outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunMetadata<'a> {
    pub artifact: &'static str,
    pub version: &'static str,
    pub phase: Phase,
    pub seed: u64,
    pub config: &'a RunConfig,
    pub final_metrics: Option<Metrics>,
    pub checkpoint_format: &'static str,
    pub checkpoint_version: u32,
}

impl<'a> RunMetadata<'a> {
    pub fn new(phase: Phase, cfg: &'a RunConfig, outcome: &RunOutcome) -> Self {
        Self {
            artifact: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            phase,
            seed: cfg.seed,
            config: cfg,
            final_metrics: outcome.final_metrics(),
            checkpoint_format: crate::net::CHECKPOINT_FORMAT,
            checkpoint_version: crate::net::CHECKPOINT_VERSION,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metadata serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_examples() {
        assert_eq!(encode(2, 4).unwrap().tokens(), &[1, 1, 0, 0]);
        assert_eq!(encode(0, 3).unwrap().tokens(), &[0, 0, 0]);
        assert_eq!(encode(3, 3).unwrap().tokens(), &[1, 1, 1]);
        assert!(encode(5, 4).is_err());
        for i in 0..=8 {
            assert_eq!(decode(&encode(i, 8).unwrap()), Some(i));
        }
    }

    #[test]
    fn dataset_holds_every_encoding() {
        let data = build_dataset(4, 3).unwrap();
        assert_eq!(data.len(), 15);
        let mut distinct: Vec<_> = data.iter().map(|x| decode(x).unwrap()).collect();
        distinct.dedup();
        assert_eq!(distinct, vec![0, 1, 2, 3, 4]);
        assert!(build_dataset(1, 3).is_err());
    }

    #[test]
    fn preferences_have_odd_winners_and_even_losers() {
        let pairs = build_preferences(8, 10_000, &mut stream_rng(3, 0)).unwrap();
        let mut hist = [0usize; 9];
        for p in &pairs {
            let w = decode(&p.winner).unwrap();
            let l = decode(&p.loser).unwrap();
            assert!(w % 2 == 1 && l % 2 == 0);
            hist[w] += 1;
        }
        let n = pairs.len() as f64;
        let sigma = (n * 0.25 * 0.75).sqrt();
        for w in [1, 3, 5, 7] {
            assert!((hist[w] as f64 - n / 4.0).abs() < 3.0 * sigma, "{hist:?}");
        }
    }

    #[test]
    fn metric_examples() {
        let a = binary_alphabet();
        let good = Sequence::clean(vec![1, 1, 0, 0], a).unwrap();
        let bad = Sequence::clean(vec![1, 0, 1, 0], a).unwrap();
        assert_eq!(metric_vsr(&[good.clone()]), 1.0);
        assert_eq!(metric_vsr(&[bad.clone()]), 0.0);
        assert_eq!(metric_odd_ratio(&vec![encode(3, 8).unwrap(); 5]), 1.0);
        assert_eq!(metric_odd_ratio(&[bad.clone(), bad]), 0.0);
        let valid: Vec<_> = (0..=8).map(|i| encode(i, 8).unwrap()).collect();
        assert_eq!(metric_odd_ratio(&valid), 4.0 / 9.0);
        assert_eq!(metric_vsr(&[]), 0.0);
    }

    #[test]
    fn vsr_of_uniform_bits_matches_valid_word_count() {
        let a = binary_alphabet();
        let mut rng = stream_rng(11, 0);
        let n = 100_000;
        let samples: Vec<_> = (0..n)
            .map(|_| Sequence::clean((0..8).map(|_| rng.gen_range(0..2)).collect(), a).unwrap())
            .collect();
        let p = 9.0 / 256.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((metric_vsr(&samples) - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn config_requires_only_n_bits() {
        let cfg = RunConfig::from_json(r#"{"n_bits": 6}"#).unwrap();
        assert_eq!(cfg, RunConfig::with_bits(6));
        let err = RunConfig::from_json(r#"{"seed": 1}"#).unwrap_err().to_string();
        assert!(err.contains("n_bits"), "{err}");
        let err = RunConfig::from_json(r#"{"n_bits": 6, "dpo": {"beta": 1.0, "gamma": 2}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("dpo"), "{err}");
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    fn tiny(seed: u64) -> RunConfig {
        RunConfig {
            dataset_multiplicity: 4,
            hidden: vec![16],
            pretrain_epochs: 3,
            pretrain_batch: 8,
            finetune_epochs: 3,
            num_pairs: 16,
            finetune_batch: 8,
            eval_samples: 50,
            eval_every: 2,
            sampler: SamplerConfig { num_steps: 20, ..SamplerConfig::default() },
            seed,
            ..RunConfig::with_bits(4)
        }
    }

    #[test]
    fn runs_are_deterministic_and_well_formed() {
        let cfg = tiny(5);
        let a = run_pretrain(&cfg).unwrap();
        let b = run_pretrain(&cfg).unwrap();
        assert_eq!(records_to_csv(&a.records), records_to_csv(&b.records));
        assert_eq!(a.records.len(), 4);
        assert!(a.records[1].odd_ratio.is_none() && a.records[3].vsr.is_some());
        let fa = run_finetune(&a.model, &cfg).unwrap();
        let fb = run_finetune(&b.model, &cfg).unwrap();
        let csv = records_to_csv(&fa.records);
        assert_eq!(csv, records_to_csv(&fb.records));
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(fa.records[0].loss, std::f64::consts::LN_2);
        assert_eq!(fa.records[0].theta_queries, 32);
        assert!(fa.records.iter().all(|r| r.wall_ms.is_none()));
        let other = run_pretrain(&tiny(6)).unwrap();
        assert_ne!(records_to_csv(&other.records), records_to_csv(&a.records));
    }

    #[test]
    fn zero_beta_pins_finetune_loss() {
        let mut cfg = tiny(1);
        cfg.dpo.beta = 0.0;
        let pre = run_pretrain(&cfg).unwrap();
        let ft = run_finetune(&pre.model, &cfg).unwrap();
        assert!(ft.records.iter().all(|r| r.loss == std::f64::consts::LN_2));
    }

    #[test]
    fn finetune_rejects_mismatched_checkpoint() {
        let cfg = tiny(1);
        let other = Mlp::init(RunConfig { n_bits: 5, ..cfg.clone() }.architecture(), 0).unwrap();
        assert!(matches!(run_finetune(&other, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn untrained_model_vsr_is_near_random_baseline() {
        let cfg = RunConfig { eval_samples: 1000, sampler: SamplerConfig { num_steps: 50, ..SamplerConfig::default() }, ..RunConfig::with_bits(8) };
        let model = Mlp::init(cfg.architecture(), 9).unwrap();
        let m = evaluate(&model, &cfg, Phase::Pretrain, 0).unwrap();
        assert!(m.vsr < 0.15, "{m:?}");
    }

    #[test]
    fn divergent_training_aborts_with_epoch_context() {
        let cfg = RunConfig { lr: f64::MAX, ..tiny(2) };
        match run_pretrain(&cfg) {
            Err(Error::Training { phase, epoch, .. }) => assert_eq!((phase, epoch), ("pretrain", 1)),
            other => panic!("expected a training abort, got {:?}", other.map(|o| o.records)),
        }
    }

    #[test]
    fn moving_average_examples() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
