//! Two-phase training: cross-entropy pretraining of the extractor, then joint
//! triplet + adversarial optimization against a weight-clipped critic.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codespace::{
    binarize, normalization_factor, sample_codes_with, BinaryCodeBatch, CodePrior, LambdaMode,
};
use crate::dataset::{ClassSampler, IdentityDataset, Label, TripletSampler};
use crate::error::{Error, Result};
use crate::losses::{accuracy, critic_objective, cross_entropy, generator_objective, triplet_loss, MarginSchedule, TripletBatch};
use crate::matrix::Matrix;
use crate::nn::{
    backward, clip_weights, forward, init_params, Activation, Algorithm, DenseLayer, DenseNetSpec, ModelParams, Network,
    Optimizer, OptimizerConfig,
};

/// Source of the triplet margin ladder.
#[derive(Clone, Debug, PartialEq)]
pub enum MarginChoice {
    /// CUHK03 ladder (6000 iterations) rescaled to the joint run length.
    Cuhk03,
    /// Market-1501 ladder (8000 iterations) rescaled to the joint run length.
    Market1501,
    /// DukeMTMC-reID ladder (8000 iterations) rescaled to the joint run length.
    DukeMtmc,
    /// Used verbatim.
    Explicit(MarginSchedule),
}

impl MarginChoice {
    pub fn schedule(&self, joint_iters: u64) -> Result<MarginSchedule> {
        let total = joint_iters.max(1);
        match self {
            MarginChoice::Cuhk03 => MarginSchedule::cuhk03().rescaled(6000, total),
            MarginChoice::Market1501 => MarginSchedule::market1501().rescaled(8000, total),
            MarginChoice::DukeMtmc => MarginSchedule::duke_mtmc().rescaled(8000, total),
            MarginChoice::Explicit(s) => Ok(s.clone()),
        }
    }
}

impl fmt::Display for MarginChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MarginChoice::Cuhk03 => f.write_str("cuhk03"),
            MarginChoice::Market1501 => f.write_str("market1501"),
            MarginChoice::DukeMtmc => f.write_str("duke-mtmc"),
            MarginChoice::Explicit(s) => {
                let parts: Vec<String> = s.ladder().iter().map(|(i, m)| format!("{i}:{m}")).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for MarginChoice {
    type Err = Error;

    /// A preset name or `iteration:margin` pairs separated by commas.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cuhk03" => Ok(MarginChoice::Cuhk03),
            "market1501" => Ok(MarginChoice::Market1501),
            "duke-mtmc" | "dukemtmc" => Ok(MarginChoice::DukeMtmc),
            other => {
                let ladder = other
                    .split(',')
                    .map(|step| {
                        let (it, m) = step
                            .split_once(':')
                            .ok_or_else(|| Error::Config(format!("bad margin step {step:?}, expected ITER:MARGIN")))?;
                        let it = it.trim().parse::<u64>().map_err(|e| Error::Config(format!("margin step {step:?}: {e}")))?;
                        let m = m.trim().parse::<f64>().map_err(|e| Error::Config(format!("margin step {step:?}: {e}")))?;
                        Ok((it, m))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(MarginChoice::Explicit(MarginSchedule::new(ladder)?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Code length m.
    pub code_length: usize,
    pub extractor_hidden: Vec<usize>,
    pub extractor_output_activation: Activation,
    pub critic_hidden: Vec<usize>,

    pub pretrain_iters: u64,
    pub batch_size_pretrain: usize,
    pub pretrain_lr: f64,
    pub pretrain_momentum: f64,

    pub joint_global_iters: u64,
    pub gan_block_every: u64,
    pub gan_block_len: u64,
    pub critic_steps_per_gan_iter: u64,
    pub generator_steps_per_gan_iter: u64,
    pub batch_size_joint: usize,
    pub triplets_per_batch: usize,

    pub extractor_optimizer: Algorithm,
    pub extractor_lr: f64,
    pub extractor_lr_final: f64,
    /// Fraction of the joint run after which `extractor_lr_final` applies.
    pub lr_drop_fraction: f64,
    pub extractor_momentum: f64,
    pub extractor_decay: f64,

    pub critic_lr: f64,
    pub critic_decay: f64,
    pub clip_c: f64,

    pub margin: MarginChoice,
    /// Weight of the generator term in the extractor objective.
    pub adversarial_weight: f64,
    /// Global iterations use the triplet loss alone; GAN blocks still run.
    pub triplet_only: bool,
    pub lambda_mode: LambdaMode,
    pub l2_normalize_enabled: bool,
    /// Global iterations between checkpoint callbacks; 0 disables.
    pub checkpoint_every: u64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            code_length: 64,
            extractor_hidden: vec![128],
            extractor_output_activation: Activation::Relu,
            critic_hidden: vec![64],
            pretrain_iters: 500,
            batch_size_pretrain: 64,
            pretrain_lr: 0.01,
            pretrain_momentum: 0.9,
            joint_global_iters: 2000,
            gan_block_every: 20,
            gan_block_len: 10,
            critic_steps_per_gan_iter: 5,
            generator_steps_per_gan_iter: 1,
            batch_size_joint: 128,
            triplets_per_batch: 42,
            extractor_optimizer: Algorithm::Sgd,
            extractor_lr: 0.001,
            extractor_lr_final: 0.0001,
            lr_drop_fraction: 0.5,
            extractor_momentum: 0.0,
            extractor_decay: 0.9,
            critic_lr: 0.01,
            critic_decay: 0.9,
            clip_c: 0.01,
            margin: MarginChoice::Cuhk03,
            adversarial_weight: 1000.0,
            triplet_only: false,
            lambda_mode: LambdaMode::NormMatching,
            l2_normalize_enabled: true,
            checkpoint_every: 500,
            rng_seed: 7,
        }
    }
}

/// Closed-form update counts implied by a schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleCounts {
    pub global_iterations: u64,
    pub gan_blocks: u64,
    pub critic_updates: u64,
    pub gan_generator_updates: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("code_length", self.code_length as u64),
            ("gan_block_every", self.gan_block_every),
            ("gan_block_len", self.gan_block_len),
            ("critic_steps_per_gan_iter", self.critic_steps_per_gan_iter),
            ("generator_steps_per_gan_iter", self.generator_steps_per_gan_iter),
            ("batch_size_pretrain", self.batch_size_pretrain as u64),
            ("batch_size_joint", self.batch_size_joint as u64),
            ("triplets_per_batch", self.triplets_per_batch as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if 3 * self.triplets_per_batch > self.batch_size_joint {
            return Err(Error::Config(format!(
                "{} triplets need {} rows, more than batch_size_joint = {}",
                self.triplets_per_batch,
                3 * self.triplets_per_batch,
                self.batch_size_joint
            )));
        }
        if self.extractor_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        let rates = [
            ("pretrain_lr", self.pretrain_lr),
            ("extractor_lr", self.extractor_lr),
            ("extractor_lr_final", self.extractor_lr_final),
            ("critic_lr", self.critic_lr),
            ("clip_c", self.clip_c),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        let unit = [
            ("pretrain_momentum", self.pretrain_momentum),
            ("extractor_momentum", self.extractor_momentum),
            ("extractor_decay", self.extractor_decay),
            ("critic_decay", self.critic_decay),
        ];
        for (name, v) in unit {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lr_drop_fraction) {
            return Err(Error::Config(format!("lr_drop_fraction must lie in [0, 1], got {}", self.lr_drop_fraction)));
        }
        if !(self.adversarial_weight >= 0.0 && self.adversarial_weight.is_finite()) {
            return Err(Error::Config("adversarial_weight must be non-negative".into()));
        }
        self.margin.schedule(self.joint_global_iters)?;
        Ok(())
    }

    pub fn prior(&self) -> Result<CodePrior> {
        CodePrior::balanced(self.code_length, self.lambda_mode)
    }

    pub fn lambda(&self) -> Result<f64> {
        normalization_factor(&self.prior()?)
    }

    /// Normalization factor for codes of `bits` under this config's lambda mode.
    pub fn lambda_for(&self, bits: usize) -> Result<f64> {
        normalization_factor(&CodePrior::balanced(bits, self.lambda_mode)?)
    }

    pub fn margin_schedule(&self) -> Result<MarginSchedule> {
        self.margin.schedule(self.joint_global_iters)
    }

    pub fn extractor_spec(&self, input_dim: usize) -> Result<DenseNetSpec> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.extractor_hidden);
        sizes.push(self.code_length);
        DenseNetSpec::mlp(sizes, Activation::Relu, self.extractor_output_activation, self.l2_normalize_enabled)
    }

    pub fn critic_spec(&self) -> Result<DenseNetSpec> {
        let mut sizes = vec![self.code_length];
        sizes.extend(&self.critic_hidden);
        sizes.push(1);
        DenseNetSpec::mlp(sizes, Activation::Relu, Activation::None, false)
    }

    /// Fresh extractor seeded from `rng_seed`.
    pub fn new_extractor(&self, input_dim: usize) -> Result<Network> {
        Ok(Network::new(self.extractor_spec(input_dim)?, self.rng_seed))
    }

    /// Fresh critic, clipped so the Lipschitz box holds from the start.
    pub fn new_critic(&self) -> Result<Network> {
        let mut critic = Network::new(self.critic_spec()?, self.rng_seed.wrapping_add(1));
        clip_weights(&mut critic.params, self.clip_c);
        Ok(critic)
    }

    /// Extractor learning rate in effect at a global iteration.
    pub fn extractor_lr_at(&self, iteration: u64) -> f64 {
        let drop_at = (self.joint_global_iters as f64 * self.lr_drop_fraction).round() as u64;
        if iteration < drop_at {
            self.extractor_lr
        } else {
            self.extractor_lr_final
        }
    }

    pub fn expected_counts(&self) -> ScheduleCounts {
        let blocks = self.joint_global_iters / self.gan_block_every;
        ScheduleCounts {
            global_iterations: self.joint_global_iters,
            gan_blocks: blocks,
            critic_updates: blocks * self.gan_block_len * self.critic_steps_per_gan_iter,
            gan_generator_updates: blocks * self.gan_block_len * self.generator_steps_per_gan_iter,
        }
    }

    fn extractor_optimizer_config(&self) -> OptimizerConfig {
        let mut cfg = match self.extractor_optimizer {
            Algorithm::Sgd => OptimizerConfig::sgd(self.extractor_lr),
            Algorithm::RmsProp => OptimizerConfig::rmsprop(self.extractor_lr, self.extractor_decay),
        };
        cfg.momentum = self.extractor_momentum;
        cfg
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainRecord {
    pub iteration: u64,
    pub cross_entropy: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub records: Vec<PretrainRecord>,
    pub num_classes: usize,
}

impl PretrainReport {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "iteration,cross_entropy,accuracy")?;
        for r in &self.records {
            writeln!(w, "{},{},{}", r.iteration, r.cross_entropy, r.accuracy)?;
        }
        Ok(())
    }
}

/// One row per global iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: u64,
    pub triplet_loss: f64,
    /// Wasserstein estimate `mean D(real) - mean D(fake)` on this iteration's batch.
    pub critic_estimate: f64,
    pub generator_objective: f64,
    pub margin: f64,
    pub active_triplets: usize,
    pub learning_rate: f64,
}

/// Per-bit activation statistics of an encoded set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BitBalance {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl BitBalance {
    pub fn of(codes: &BinaryCodeBatch) -> Self {
        let means = codes.bit_means();
        if means.is_empty() {
            return Self::default();
        }
        Self {
            mean: means.iter().sum::<f64>() / means.len() as f64,
            min: means.iter().copied().fold(f64::INFINITY, f64::min),
            max: means.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<IterationRecord>,
    pub gan_blocks: u64,
    pub critic_updates: u64,
    pub gan_generator_updates: u64,
    /// Largest |critic parameter| seen right after any critic update.
    pub max_critic_abs: f64,
    pub bit_balance: BitBalance,
}

impl TrainReport {
    pub fn counts(&self) -> ScheduleCounts {
        ScheduleCounts {
            global_iterations: self.records.len() as u64,
            gan_blocks: self.gan_blocks,
            critic_updates: self.critic_updates,
            gan_generator_updates: self.gan_generator_updates,
        }
    }

    /// Mean critic estimate over records `[start, end)` as fractions of the run.
    pub fn mean_critic_estimate(&self, from: f64, to: f64) -> f64 {
        let n = self.records.len();
        let a = ((n as f64 * from).floor() as usize).min(n);
        let b = ((n as f64 * to).ceil() as usize).clamp(a, n);
        let slice = &self.records[a..b];
        if slice.is_empty() {
            return f64::NAN;
        }
        slice.iter().map(|r| r.critic_estimate).sum::<f64>() / slice.len() as f64
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "iteration,triplet_loss,critic_estimate,generator_objective,margin,active_triplets,learning_rate")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.iteration,
                r.triplet_loss,
                r.critic_estimate,
                r.generator_objective,
                r.margin,
                r.active_triplets,
                r.learning_rate
            )?;
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_input(extractor: &Network, ds: &IdentityDataset) -> Result<()> {
    if extractor.spec.input_dim() != ds.dim() {
        return Err(Error::LengthMismatch { expected: extractor.spec.input_dim(), actual: ds.dim() });
    }
    Ok(())
}

/// Cross-entropy pretraining over identity classes through a temporary linear
/// head (without the l2 head). The head is dropped from the returned network.
pub fn pretrain(extractor: &Network, ds: &IdentityDataset, config: &TrainConfig) -> Result<(Network, PretrainReport)> {
    config.validate()?;
    check_input(extractor, ds)?;
    let sampler = ClassSampler::new(ds);
    let classes = sampler.num_classes();
    let mut report = PretrainReport { records: Vec::with_capacity(config.pretrain_iters as usize), num_classes: classes };
    if config.pretrain_iters == 0 {
        return Ok((extractor.clone(), report));
    }

    let spec = extractor.spec.with_linear_head(classes)?;
    let head_init = init_params(&spec, config.rng_seed.wrapping_add(2));
    let mut params = extractor.params.clone();
    params.layers.push(head_init.layers.last().expect("head layer").clone());

    let mut opt_cfg = OptimizerConfig::sgd(config.pretrain_lr);
    opt_cfg.momentum = config.pretrain_momentum;
    let mut opt = Optimizer::new(opt_cfg);
    let mut rng = stream_rng(config.rng_seed, 3);

    for it in 0..config.pretrain_iters {
        let (batch, labels) = sampler.sample(config.batch_size_pretrain, &mut rng)?;
        let (logits, trace) = forward(&params, &spec, &batch)?;
        let (loss, grad) = cross_entropy(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("cross-entropy became {loss} at pretrain iteration {it}")));
        }
        report.records.push(PretrainRecord { iteration: it, cross_entropy: loss, accuracy: accuracy(&logits, &labels) });
        let grads = backward(&params, &spec, &trace, &grad)?;
        opt.step(&mut params, &grads.params)?;
    }
    params.layers.pop();
    Ok((Network { spec: extractor.spec.clone(), params }, report))
}

fn scores_column(scores: &Matrix) -> Vec<f64> {
    scores.as_slice().to_vec()
}

fn embedded_prior_batch<R: Rng + ?Sized>(prior: &CodePrior, lambda: f64, n: usize, rng: &mut R) -> Result<Matrix> {
    let codes = sample_codes_with(prior, n, rng)?;
    let m = prior.m();
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        crate::codespace::embed_words_into(codes.row(i), lambda, out.row_mut(i));
    }
    Ok(out)
}

fn random_records<R: Rng + ?Sized>(ds: &IdentityDataset, n: usize, rng: &mut R) -> Matrix {
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..ds.len())).collect();
    ds.features(&idx)
}

/// Gradient of `weight * generator_objective(critic(z))` with respect to `z`.
fn generator_grad(critic: &Network, z: &Matrix, weight: f64) -> Result<(f64, Matrix)> {
    let (scores, trace) = critic.forward(z)?;
    let (value, g) = generator_objective(&scores_column(&scores))?;
    let grad_scores = Matrix::from_vec(g.len(), 1, g.into_iter().map(|x| x * weight).collect())?;
    let grads = critic.backward(&trace, &grad_scores)?;
    Ok((value, grads.inputs))
}

/// Identity of a global iteration inside the joint run, passed to checkpoint callbacks.
pub type CheckpointFn<'a> = dyn FnMut(u64, &Network, &Network) -> Result<()> + 'a;

/// Joint training without checkpoint callbacks.
pub fn train_joint(
    extractor: &Network,
    critic: &Network,
    ds: &IdentityDataset,
    config: &TrainConfig,
) -> Result<(Network, Network, TrainReport)> {
    train_joint_with(extractor, critic, ds, config, &mut |_, _, _| Ok(()))
}

/// Joint training; `on_checkpoint(iterations_done, extractor, critic)` fires
/// every `checkpoint_every` global iterations.
pub fn train_joint_with(
    extractor: &Network,
    critic: &Network,
    ds: &IdentityDataset,
    config: &TrainConfig,
    on_checkpoint: &mut CheckpointFn<'_>,
) -> Result<(Network, Network, TrainReport)> {
    config.validate()?;
    check_input(extractor, ds)?;
    let m = config.code_length;
    if extractor.spec.output_dim() != m {
        return Err(Error::LengthMismatch { expected: m, actual: extractor.spec.output_dim() });
    }
    if critic.spec.input_dim() != m || critic.spec.output_dim() != 1 {
        return Err(Error::shape(format!(
            "critic must map {m} inputs to 1 score, got {} -> {}",
            critic.spec.input_dim(),
            critic.spec.output_dim()
        )));
    }

    let mut ext = Network {
        spec: extractor.spec.with_l2_normalize(config.l2_normalize_enabled),
        params: extractor.params.clone(),
    };
    let mut crit = critic.clone();
    let prior = config.prior()?;
    let lambda = normalization_factor(&prior)?;
    let margins = config.margin_schedule()?;
    let sampler = TripletSampler::new(ds)?;
    let n_triplets = config.triplets_per_batch;
    let fake_rows = config.batch_size_joint;

    let mut ext_opt = Optimizer::new(config.extractor_optimizer_config());
    let mut crit_opt = Optimizer::new(OptimizerConfig::rmsprop(config.critic_lr, config.critic_decay));
    let mut data_rng = stream_rng(config.rng_seed, 4);
    let mut prior_rng = stream_rng(config.rng_seed, 5);

    let mut report = TrainReport { records: Vec::with_capacity(config.joint_global_iters as usize), ..Default::default() };
    let adv_weight = if config.triplet_only { 0.0 } else { config.adversarial_weight };

    for it in 0..config.joint_global_iters {
        let lr = config.extractor_lr_at(it);
        ext_opt.set_learning_rate(lr);

        let batch = sampler.sample(n_triplets, &mut data_rng)?;
        let stacked = batch.stacked();
        let (z, trace) = ext.forward(&stacked)?;
        let margin = margins.margin_at(it);
        let labels = batch.labels.clone();
        let tl = triplet_loss(&TripletBatch::from_stacked(&z, labels)?, margin)?;
        if !tl.loss.is_finite() {
            return Err(Error::Diverged(format!("triplet loss became {} at iteration {it}", tl.loss)));
        }

        let (gen_value, gen_grad) = generator_grad(&crit, &z, adv_weight)?;
        let real = embedded_prior_batch(&prior, lambda, z.rows(), &mut prior_rng)?;
        let real_scores = crit.infer(&real)?;
        let fake_scores = crit.infer(&z)?;
        let estimate = critic_objective(&scores_column(&real_scores), &scores_column(&fake_scores))?.value;

        let mut grad_z = tl.stacked_grad();
        if adv_weight > 0.0 {
            grad_z.add_scaled(&gen_grad, 1.0)?;
        }
        let grads = ext.backward(&trace, &grad_z)?;
        ext_opt.step(&mut ext.params, &grads.params)?;

        report.records.push(IterationRecord {
            iteration: it,
            triplet_loss: tl.loss,
            critic_estimate: estimate,
            generator_objective: gen_value,
            margin,
            active_triplets: tl.active,
            learning_rate: lr,
        });

        if (it + 1) % config.gan_block_every == 0 {
            report.gan_blocks += 1;
            for _ in 0..config.gan_block_len {
                for _ in 0..config.critic_steps_per_gan_iter {
                    let fake = ext.infer(&random_records(ds, fake_rows, &mut data_rng))?;
                    let real = embedded_prior_batch(&prior, lambda, fake_rows, &mut prior_rng)?;
                    let both = Matrix::vstack(&[&real, &fake])?;
                    let (scores, trace) = crit.forward(&both)?;
                    let s = scores_column(&scores);
                    let obj = critic_objective(&s[..fake_rows], &s[fake_rows..])?;
                    // The critic ascends the objective.
                    let g: Vec<f64> = obj.grad_real.iter().chain(&obj.grad_fake).map(|x| -x).collect();
                    let grads = crit.backward(&trace, &Matrix::from_vec(g.len(), 1, g)?)?;
                    crit_opt.step(&mut crit.params, &grads.params)?;
                    clip_weights(&mut crit.params, config.clip_c);
                    report.max_critic_abs = report.max_critic_abs.max(crit.params.max_abs());
                    report.critic_updates += 1;
                }
                for _ in 0..config.generator_steps_per_gan_iter {
                    let x = random_records(ds, fake_rows, &mut data_rng);
                    let (z, trace) = ext.forward(&x)?;
                    let (_, gz) = generator_grad(&crit, &z, config.adversarial_weight)?;
                    let grads = ext.backward(&trace, &gz)?;
                    ext_opt.step(&mut ext.params, &grads.params)?;
                    report.gan_generator_updates += 1;
                }
            }
        }

        if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 {
            on_checkpoint(it + 1, &ext, &crit)?;
        }
    }

    let (codes, _) = encode_dataset(&ext, ds, lambda)?;
    report.bit_balance = BitBalance::of(&codes);
    Ok((ext, crit, report))
}

const ENCODE_CHUNK: usize = 256;

/// Extractor outputs for every record, in dataset order.
pub fn extract_features(extractor: &Network, ds: &IdentityDataset) -> Result<Matrix> {
    check_input(extractor, ds)?;
    let mut out = Matrix::zeros(ds.len(), extractor.spec.output_dim());
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(ENCODE_CHUNK) {
        let z = extractor.infer(&ds.features(chunk))?;
        for (k, &i) in chunk.iter().enumerate() {
            out.row_mut(i).copy_from_slice(z.row(k));
        }
    }
    Ok(out)
}

/// Binarizes extractor outputs at threshold `1/(2*lambda)`; labels are returned in record order.
pub fn encode_dataset(extractor: &Network, ds: &IdentityDataset, lambda: f64) -> Result<(BinaryCodeBatch, Vec<Label>)> {
    let z = extract_features(extractor, ds)?;
    Ok((encode_features(&z, lambda)?, ds.labels()))
}

pub fn encode_features(features: &Matrix, lambda: f64) -> Result<BinaryCodeBatch> {
    let mut codes = BinaryCodeBatch::with_capacity(features.cols(), features.rows())?;
    for row in features.iter_rows() {
        codes.push(&binarize(row, lambda)?)?;
    }
    Ok(codes)
}

/// Fraction of entries within `tolerance / lambda` of either 0 or `1 / lambda`.
pub fn quantization_fraction(features: &Matrix, lambda: f64, tolerance: f64) -> f64 {
    let total = features.as_slice().len();
    if total == 0 {
        return 0.0;
    }
    let hi = 1.0 / lambda;
    let tol = tolerance / lambda;
    let near = features.as_slice().iter().filter(|&&x| x.abs() <= tol || (x - hi).abs() <= tol).count();
    near as f64 / total as f64
}

/// Wraps raw layers as a network; handy for constructed weights in tests.
pub fn network_from_layers(spec: DenseNetSpec, layers: Vec<DenseLayer>, seed: u64) -> Network {
    Network { spec, params: ModelParams { layers, seed } }
}
