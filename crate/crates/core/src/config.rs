//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors. A single
//! `seed` drives data synthesis, splitting, initialization and sampling.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::dataset::{SplitProtocol, SynthConfig};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Deepest CMC rank reported.
    pub cmc_depth: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { cmc_depth: 20 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub gallery_size: usize,
    pub queries: usize,
    pub repetitions: usize,
    pub top_k: usize,
    /// Code length of the benchmark gallery; 0 means use `code_length`.
    pub bits: usize,
    /// Also time the float32 Euclidean baseline.
    pub real_baseline: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { gallery_size: 100_000, queries: 20, repetitions: 5, top_k: 10, bits: 2048, real_baseline: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub split: SplitProtocol,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 7,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            split: SplitProtocol::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        };
        cfg.set_seed(7);
        cfg
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|w| parse::<usize>(key, w.trim())).collect()
}

fn join_widths(w: &[usize]) -> String {
    w.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.rng_seed = seed;
        self.train.rng_seed = seed;
    }

    pub fn set_code_length(&mut self, bits: usize) {
        self.train.code_length = bits;
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (k, v) = (key.trim(), value.trim());
        let t = &mut self.train;
        let s = &mut self.synth;
        match k {
            "seed" => {
                let seed = parse(k, v)?;
                self.set_seed(seed);
            }
            "num_identities" => s.num_identities = parse(k, v)?,
            "views_per_identity" => s.views_per_identity = parse(k, v)?,
            "samples_per_view" => s.samples_per_view = parse(k, v)?,
            "input_dim" => s.input_dim = parse(k, v)?,
            "identity_radius" => s.identity_radius = parse(k, v)?,
            "intra_identity_noise_sigma" => s.intra_identity_noise_sigma = parse(k, v)?,
            "view_offset_sigma" => s.view_offset_sigma = parse(k, v)?,

            "code_length" => t.code_length = parse(k, v)?,
            "extractor_hidden" => t.extractor_hidden = parse_widths(k, v)?,
            "extractor_output_activation" => t.extractor_output_activation = parse(k, v)?,
            "critic_hidden" => t.critic_hidden = parse_widths(k, v)?,
            "pretrain_iters" => t.pretrain_iters = parse(k, v)?,
            "batch_size_pretrain" => t.batch_size_pretrain = parse(k, v)?,
            "pretrain_lr" => t.pretrain_lr = parse(k, v)?,
            "pretrain_momentum" => t.pretrain_momentum = parse(k, v)?,
            "joint_global_iters" => t.joint_global_iters = parse(k, v)?,
            "gan_block_every" => t.gan_block_every = parse(k, v)?,
            "gan_block_len" => t.gan_block_len = parse(k, v)?,
            "critic_steps_per_gan_iter" => t.critic_steps_per_gan_iter = parse(k, v)?,
            "generator_steps_per_gan_iter" => t.generator_steps_per_gan_iter = parse(k, v)?,
            "batch_size_joint" => t.batch_size_joint = parse(k, v)?,
            "triplets_per_batch" => t.triplets_per_batch = parse(k, v)?,
            "extractor_optimizer" => t.extractor_optimizer = parse(k, v)?,
            "extractor_lr" => t.extractor_lr = parse(k, v)?,
            "extractor_lr_final" => t.extractor_lr_final = parse(k, v)?,
            "lr_drop_fraction" => t.lr_drop_fraction = parse(k, v)?,
            "extractor_momentum" => t.extractor_momentum = parse(k, v)?,
            "extractor_decay" => t.extractor_decay = parse(k, v)?,
            "critic_lr" => t.critic_lr = parse(k, v)?,
            "critic_decay" => t.critic_decay = parse(k, v)?,
            "clip_c" => t.clip_c = parse(k, v)?,
            "margin_schedule" => t.margin = parse(k, v)?,
            "adversarial_weight" => t.adversarial_weight = parse(k, v)?,
            "triplet_only" => t.triplet_only = parse_bool(k, v)?,
            "lambda_mode" => t.lambda_mode = parse(k, v)?,
            "l2_normalize_enabled" => t.l2_normalize_enabled = parse_bool(k, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(k, v)?,

            "query_fraction" => self.split.query_fraction = parse(k, v)?,
            "cmc_depth" => self.eval.cmc_depth = parse(k, v)?,

            "bench_gallery_size" => self.bench.gallery_size = parse(k, v)?,
            "bench_queries" => self.bench.queries = parse(k, v)?,
            "bench_repetitions" => self.bench.repetitions = parse(k, v)?,
            "bench_top_k" => self.bench.top_k = parse(k, v)?,
            "bench_bits" => self.bench.bits = parse(k, v)?,
            "bench_real_baseline" => self.bench.real_baseline = parse_bool(k, v)?,
            _ => return Err(Error::Config(format!("unknown key {k:?}"))),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_str_with_defaults(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_str_with_defaults(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if !(self.split.query_fraction > 0.0 && self.split.query_fraction < 1.0) {
            return Err(Error::Config(format!("query_fraction must lie in (0, 1), got {}", self.split.query_fraction)));
        }
        if self.eval.cmc_depth == 0 {
            return Err(Error::Config("cmc_depth must be positive".into()));
        }
        let b = &self.bench;
        if b.gallery_size == 0 || b.queries == 0 || b.top_k == 0 {
            return Err(Error::Config("bench sizes must be positive".into()));
        }
        if b.repetitions < 3 {
            return Err(Error::Config("bench_repetitions must be at least 3".into()));
        }
        Ok(())
    }

    /// Every key with its current value, one assignment per line. Parsing the
    /// result reproduces `self`.
    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let t = &self.train;
        let b = &self.bench;
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("num_identities", s.num_identities.to_string()),
            ("views_per_identity", s.views_per_identity.to_string()),
            ("samples_per_view", s.samples_per_view.to_string()),
            ("input_dim", s.input_dim.to_string()),
            ("identity_radius", s.identity_radius.to_string()),
            ("intra_identity_noise_sigma", s.intra_identity_noise_sigma.to_string()),
            ("view_offset_sigma", s.view_offset_sigma.to_string()),
            ("code_length", t.code_length.to_string()),
            ("extractor_hidden", join_widths(&t.extractor_hidden)),
            ("extractor_output_activation", t.extractor_output_activation.to_string()),
            ("critic_hidden", join_widths(&t.critic_hidden)),
            ("pretrain_iters", t.pretrain_iters.to_string()),
            ("batch_size_pretrain", t.batch_size_pretrain.to_string()),
            ("pretrain_lr", t.pretrain_lr.to_string()),
            ("pretrain_momentum", t.pretrain_momentum.to_string()),
            ("joint_global_iters", t.joint_global_iters.to_string()),
            ("gan_block_every", t.gan_block_every.to_string()),
            ("gan_block_len", t.gan_block_len.to_string()),
            ("critic_steps_per_gan_iter", t.critic_steps_per_gan_iter.to_string()),
            ("generator_steps_per_gan_iter", t.generator_steps_per_gan_iter.to_string()),
            ("batch_size_joint", t.batch_size_joint.to_string()),
            ("triplets_per_batch", t.triplets_per_batch.to_string()),
            ("extractor_optimizer", t.extractor_optimizer.to_string()),
            ("extractor_lr", t.extractor_lr.to_string()),
            ("extractor_lr_final", t.extractor_lr_final.to_string()),
            ("lr_drop_fraction", t.lr_drop_fraction.to_string()),
            ("extractor_momentum", t.extractor_momentum.to_string()),
            ("extractor_decay", t.extractor_decay.to_string()),
            ("critic_lr", t.critic_lr.to_string()),
            ("critic_decay", t.critic_decay.to_string()),
            ("clip_c", t.clip_c.to_string()),
            ("margin_schedule", t.margin.to_string()),
            ("adversarial_weight", t.adversarial_weight.to_string()),
            ("triplet_only", t.triplet_only.to_string()),
            ("lambda_mode", t.lambda_mode.to_string()),
            ("l2_normalize_enabled", t.l2_normalize_enabled.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("query_fraction", self.split.query_fraction.to_string()),
            ("cmc_depth", self.eval.cmc_depth.to_string()),
            ("bench_gallery_size", b.gallery_size.to_string()),
            ("bench_queries", b.queries.to_string()),
            ("bench_repetitions", b.repetitions.to_string()),
            ("bench_top_k", b.top_k.to_string()),
            ("bench_bits", b.bits.to_string()),
            ("bench_real_baseline", b.real_baseline.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
