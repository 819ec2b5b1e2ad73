//! Two-stage training: supervised pre-training on the source cohort, then
//! adversarial adaptation on the target cohort with a small fraction of
//! injected source samples; plus the cross-validation protocol and the
//! baseline runners.
//!
//! Every run is a pure function of (datasets, config, seed): all shuffles
//! and draws come from counter-derived ChaCha streams, so repeated runs are
//! bitwise identical.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasynth::{Cohort, SensorWindow};
use crate::error::{Error, Result};
use crate::eval::{self, MetricStat, MetricsReport};
use crate::losses::{self, LossWeights};
use crate::model::{
    coarse_graph, encode_graph, fine_graph, predictor_graph, EncoderSpec, ModelParams,
};
use crate::numerics::Tape;

/// Schedule for the gradient-reversal strength during adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum GrlSchedule {
    Constant(f64),
    /// `lambda_max * (2 / (1 + exp(-10 * t / T)) - 1)` over optimizer steps.
    Ramp(f64),
}

impl GrlSchedule {
    pub fn lambda_at(&self, step: usize, total_steps: usize) -> f64 {
        match *self {
            GrlSchedule::Constant(l) => l,
            GrlSchedule::Ramp(lmax) => {
                let p = if total_steps == 0 { 1.0 } else { step as f64 / total_steps as f64 };
                lmax * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let l = match *self {
            GrlSchedule::Constant(l) | GrlSchedule::Ramp(l) => l,
        };
        if !(l >= 0.0) {
            return Err(Error::config(format!("grl lambda must be >= 0, got {l}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub encoder: EncoderSpec,
    pub lr: f64,
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    pub batch_size: usize,
    /// Fraction of the target training set to draw from the source cohort.
    pub injection_fraction: f64,
    pub grl_schedule: GrlSchedule,
    pub seed: u64,
    pub folds: usize,
    pub test_fraction: f64,
    pub hellinger_bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            encoder: EncoderSpec::default(),
            lr: 1e-3,
            pretrain_epochs: 50,
            adapt_epochs: 100,
            batch_size: 32,
            injection_fraction: 0.05,
            grl_schedule: GrlSchedule::Ramp(1.0),
            seed: 42,
            folds: 3,
            test_fraction: 0.30,
            hellinger_bins: eval::DEFAULT_HELLINGER_BINS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.encoder.validate()?;
        self.grl_schedule.validate()?;
        if !(self.lr >= 0.0) {
            return Err(Error::config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.injection_fraction >= 0.0) {
            return Err(Error::config("injection_fraction must be >= 0"));
        }
        if self.folds < 1 {
            return Err(Error::config("folds must be >= 1"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config(format!(
                "test_fraction must lie in (0,1), got {}",
                self.test_fraction
            )));
        }
        if self.hellinger_bins < 2 {
            return Err(Error::config("hellinger_bins must be >= 2"));
        }
        Ok(())
    }
}

/// One epoch of training-telemetry. `eq1` is the signed combined objective
/// recomputed from the logged components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub mse: f64,
    pub cse: f64,
    pub gll: f64,
    pub lambda_grl: f64,
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub eq1: f64,
}

/// Trained parameters plus the per-epoch log of the run.
pub struct TrainRun {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

// ── Seed derivation ──────────────────────────────────────────────────

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy)]
enum Stream {
    /// Shared by every phase that consumes the target training set, so the
    /// plain fine-tune and the zero-weight adaptation walk identical batches.
    PretrainShuffle = 1,
    TargetShuffle = 2,
    FoldSplit = 3,
    Injection = 4,
}

fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64((stream as u64) << 32 | index))
}

// ── Adam ─────────────────────────────────────────────────────────────

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(params: &ModelParams, lr: f64) -> Self {
        let sizes: Vec<usize> = params.trainable().map(|t| t.numel()).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn step(&mut self, params: &mut ModelParams) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, tensor) in params.trainable_mut().into_iter().enumerate() {
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            // missing grad means the tensor was untouched this step: zero gradient
            let zero;
            let g: &[f64] = match tensor.grad() {
                Some(g) => {
                    zero = g.to_vec();
                    &zero
                }
                None => {
                    zero = vec![0.0; tensor.numel()];
                    &zero
                }
            };
            let values = tensor.values_mut();
            for i in 0..values.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

// ── The shared step engine ───────────────────────────────────────────

/// Adversarial branch configuration for [`run_phase`]. Weights are raw so
/// ablations (including both at zero) can share the exact adaptation path.
#[derive(Debug, Clone, Copy)]
pub struct AdversarialOptions {
    pub lambda1: f64,
    pub lambda2: f64,
    pub grl: GrlSchedule,
}

struct PhaseSpec<'a> {
    name: &'static str,
    epochs: usize,
    shuffle_stream: Stream,
    adversarial: Option<AdversarialOptions>,
    data: &'a [&'a SensorWindow],
}

fn run_phase(params: &mut ModelParams, config: &TrainConfig, phase: PhaseSpec) -> Result<Vec<EpochLog>> {
    let n = phase.data.len();
    if n == 0 {
        return Err(Error::contract(format!("{}: empty training set", phase.name)));
    }
    let timesteps = phase.data[0].t;
    let (alpha, l1, l2) = match phase.adversarial {
        Some(a) => (config.weights.alpha(), a.lambda1, a.lambda2),
        None => (config.weights.alpha(), 0.0, 0.0),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, phase.shuffle_stream, 0));
    let mut adam = Adam::new(params, config.lr);
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = phase.epochs * batches_per_epoch;
    let mut step = 0usize;
    let mut logs = Vec::with_capacity(phase.epochs);

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..phase.epochs {
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut last_lambda = 0.0;
        for (batch_ix, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&SensorWindow> = chunk.iter().map(|&i| phase.data[i]).collect();
            let xs: Vec<&[f64]> = batch.iter().map(|w| w.x.as_slice()).collect();
            let metas: Vec<&[f64]> = batch.iter().map(|w| w.metadata.as_slice()).collect();
            let ys: Vec<f64> = batch.iter().map(|w| w.y).collect();

            let mut tape = Tape::new();
            let leaves = params.insert_leaves(&mut tape);
            let emb = encode_graph(params, &mut tape, &leaves, &xs, &metas, timesteps)?;
            let pred = predictor_graph(params, &mut tape, &leaves, emb)?;
            let mse = losses::mse_node(&mut tape, pred, &ys)?;
            let mut total = tape.mul_scalar(mse, alpha);

            let mut cse_val = 0.0;
            let mut gll_val = 0.0;
            if let Some(adv) = phase.adversarial {
                let lambda = adv.grl.lambda_at(step, total_steps);
                last_lambda = lambda;
                let labels: Vec<u8> = batch.iter().map(|w| w.y_c).collect();
                let yds: Vec<f64> = batch.iter().map(|w| w.y_d).collect();
                let rev = tape.grad_reverse(emb, lambda)?;
                let logits = coarse_graph(params, &mut tape, &leaves, rev)?;
                let cse = losses::cross_entropy_node(&mut tape, logits, &labels)?;
                let (mu, s2) = fine_graph(params, &mut tape, &leaves, rev)?;
                let gll = losses::gaussian_nll_node(&mut tape, mu, s2, &yds)?;
                cse_val = tape.values(cse)[0];
                gll_val = tape.values(gll)[0];
                let wc = tape.mul_scalar(cse, adv.lambda1);
                let wg = tape.mul_scalar(gll, adv.lambda2);
                let t1 = tape.add(total, wc)?;
                total = tape.add(t1, wg)?;
            }

            let mse_val = tape.values(mse)[0];
            let total_val = tape.values(total)[0];
            if !mse_val.is_finite() || !cse_val.is_finite() || !gll_val.is_finite() || !total_val.is_finite()
            {
                return Err(Error::NonFiniteLoss {
                    phase: phase.name,
                    epoch,
                    batch: batch_ix,
                    lr: config.lr,
                });
            }

            tape.backward(total)?;
            params.zero_grads();
            params.accumulate_grads(&tape, &leaves);
            adam.step(params);
            step += 1;

            sums.0 += mse_val;
            sums.1 += cse_val;
            sums.2 += gll_val;
        }
        let b = batches_per_epoch as f64;
        let (mse, cse, gll) = (sums.0 / b, sums.1 / b, sums.2 / b);
        logs.push(EpochLog {
            phase: phase.name.to_string(),
            epoch,
            mse,
            cse,
            gll,
            lambda_grl: last_lambda,
            alpha,
            lambda1: l1,
            lambda2: l2,
            eq1: alpha * mse - l1 * cse - l2 * gll,
        });
    }
    Ok(logs)
}

type NormStats = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, (f64, f64));

fn feature_stats(windows: &[&SensorWindow]) -> NormStats {
    let f = windows[0].f;
    let m = windows[0].metadata.len();
    let mut x_sum = vec![0.0; f];
    let mut x_sq = vec![0.0; f];
    let mut rows = 0usize;
    for w in windows {
        for t in 0..w.mask_len {
            let row = w.row(t);
            for j in 0..f {
                x_sum[j] += row[j];
                x_sq[j] += row[j] * row[j];
            }
            rows += 1;
        }
    }
    let rows = rows.max(1) as f64;
    let x_mean: Vec<f64> = x_sum.iter().map(|s| s / rows).collect();
    let x_std: Vec<f64> = x_sq
        .iter()
        .zip(&x_mean)
        .map(|(sq, mean)| ((sq / rows - mean * mean).max(0.0)).sqrt().max(1e-8))
        .collect();

    let mut m_sum = vec![0.0; m];
    let mut m_sq = vec![0.0; m];
    for w in windows {
        for j in 0..m {
            m_sum[j] += w.metadata[j];
            m_sq[j] += w.metadata[j] * w.metadata[j];
        }
    }
    let nw = windows.len() as f64;
    let m_mean: Vec<f64> = m_sum.iter().map(|s| s / nw).collect();
    let m_std: Vec<f64> = m_sq
        .iter()
        .zip(&m_mean)
        .map(|(sq, mean)| ((sq / nw - mean * mean).max(0.0)).sqrt().max(1e-8))
        .collect();

    let y_mean = windows.iter().map(|w| w.y).sum::<f64>() / nw;
    let y_var = windows.iter().map(|w| (w.y - y_mean) * (w.y - y_mean)).sum::<f64>() / nw;
    (x_mean, x_std, m_mean, m_std, (y_mean, y_var.sqrt().max(1e-8)))
}

fn init_with_stats(config: &TrainConfig, data: &[&SensorWindow]) -> Result<ModelParams> {
    let mut params = ModelParams::init(&config.encoder, config.seed)?;
    let (xm, xs, mm, ms, ys) = feature_stats(data);
    params.set_normalization(xm, xs, mm, ms, ys)?;
    Ok(params)
}

// ── Public training operations ───────────────────────────────────────

/// Stage 1: supervised pre-training on the (noisy-labeled) source cohort.
/// Feature normalization is computed here and frozen into the parameters.
pub fn pretrain(source: &Cohort, config: &TrainConfig) -> Result<TrainRun> {
    let data: Vec<&SensorWindow> = source.windows.iter().collect();
    let mut params = init_with_stats(config, &data)?;
    let log = run_phase(
        &mut params,
        config,
        PhaseSpec {
            name: "pretrain",
            epochs: config.pretrain_epochs,
            shuffle_stream: Stream::PretrainShuffle,
            adversarial: None,
            data: &data,
        },
    )?;
    Ok(TrainRun { params, log })
}

/// Supervised training from a fresh initialization on the given windows
/// (the train-from-scratch baseline path).
pub fn train_scratch(data: &[&SensorWindow], config: &TrainConfig) -> Result<TrainRun> {
    let mut params = init_with_stats(config, data)?;
    let log = run_phase(
        &mut params,
        config,
        PhaseSpec {
            name: "scratch",
            epochs: config.adapt_epochs,
            shuffle_stream: Stream::TargetShuffle,
            adversarial: None,
            data,
        },
    )?;
    Ok(TrainRun { params, log })
}

/// Plain supervised fine-tuning of pretrained parameters (the transfer
/// learning baseline path). No discriminators are built.
pub fn fine_tune(
    pretrained: &ModelParams,
    data: &[&SensorWindow],
    config: &TrainConfig,
) -> Result<TrainRun> {
    let mut params = pretrained.clone();
    let log = run_phase(
        &mut params,
        config,
        PhaseSpec {
            name: "finetune",
            epochs: config.adapt_epochs,
            shuffle_stream: Stream::TargetShuffle,
            adversarial: None,
            data,
        },
    )?;
    Ok(TrainRun { params, log })
}

/// Draws `round(rho * |target_train|)` source windows without replacement
/// (seeded) and appends them to the training list. Injected samples keep
/// their source labels, including `y_c = 0`.
pub fn inject_source_samples<'a>(
    source: &'a Cohort,
    target_train: &[&'a SensorWindow],
    rho: f64,
    seed: u64,
) -> Result<Vec<&'a SensorWindow>> {
    if !(rho >= 0.0) {
        return Err(Error::config(format!("injection fraction must be >= 0, got {rho}")));
    }
    let count = (rho * target_train.len() as f64).round() as usize;
    if count > source.windows.len() {
        return Err(Error::config(format!(
            "cannot inject {count} samples from a source cohort of {}",
            source.windows.len()
        )));
    }
    let mut augmented: Vec<&SensorWindow> = target_train.to_vec();
    if count > 0 {
        let mut indices: Vec<usize> = (0..source.windows.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        for &ix in indices.iter().take(count) {
            augmented.push(&source.windows[ix]);
        }
    }
    Ok(augmented)
}

/// Stage 2 with explicit adversarial weights. This is the ablation surface:
/// both lambdas may be zero, in which case the adaptation trajectory must
/// match [`fine_tune`] step for step.
pub fn adapt_with_options(
    pretrained: &ModelParams,
    train: &[&SensorWindow],
    config: &TrainConfig,
    options: AdversarialOptions,
) -> Result<TrainRun> {
    options.grl.validate()?;
    if config.injection_fraction > 0.0 {
        let has_source = train.iter().any(|w| w.y_c == 0);
        let has_target = train.iter().any(|w| w.y_c == 1);
        if !has_source || !has_target {
            return Err(Error::contract(
                "adaptation with injection requires both domains in the training set",
            ));
        }
    }
    let mut params = pretrained.clone();
    let log = run_phase(
        &mut params,
        config,
        PhaseSpec {
            name: "adapt",
            epochs: config.adapt_epochs,
            shuffle_stream: Stream::TargetShuffle,
            adversarial: Some(options),
            data: train,
        },
    )?;
    Ok(TrainRun { params, log })
}

/// Stage 2: adversarial adaptation with the configured loss weights.
pub fn adapt(
    pretrained: &ModelParams,
    train: &[&SensorWindow],
    config: &TrainConfig,
) -> Result<TrainRun> {
    config.weights.validate()?;
    adapt_with_options(
        pretrained,
        train,
        config,
        AdversarialOptions {
            lambda1: config.weights.lambda1(),
            lambda2: config.weights.lambda2(),
            grl: config.grl_schedule,
        },
    )
}

// ── Cross-validation protocol ────────────────────────────────────────

/// One seeded 70/30 resample of the target cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

/// Independent seeded resamples; every test set holds exactly
/// `round(test_fraction * n)` target samples.
pub fn fold_splits(n: usize, config: &TrainConfig) -> Result<Vec<FoldSplit>> {
    if config.folds < 1 {
        return Err(Error::config("folds must be >= 1"));
    }
    let n_test = (config.test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::config(format!(
            "test_fraction {} leaves an empty split for n = {n}",
            config.test_fraction
        )));
    }
    let mut splits = Vec::with_capacity(config.folds);
    for fold in 0..config.folds {
        let mut ids: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, Stream::FoldSplit, fold as u64));
        ids.shuffle(&mut rng);
        let mut test_ids: Vec<usize> = ids[..n_test].to_vec();
        let mut train_ids: Vec<usize> = ids[n_test..].to_vec();
        test_ids.sort_unstable();
        train_ids.sort_unstable();
        splits.push(FoldSplit { fold, train_ids, test_ids });
    }
    Ok(splits)
}

/// The baseline and method grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Scratch,
    Tf,
    TfPlusSamples,
    CoarseOnly,
    FineOnly,
    Udama,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Scratch => "scratch",
            Method::Tf => "tf",
            Method::TfPlusSamples => "tf_plus_samples",
            Method::CoarseOnly => "coarse_only",
            Method::FineOnly => "fine_only",
            Method::Udama => "udama",
        }
    }

    pub fn needs_pretraining(&self) -> bool {
        !matches!(self, Method::Scratch)
    }

    pub fn injects_samples(&self) -> bool {
        matches!(
            self,
            Method::TfPlusSamples | Method::CoarseOnly | Method::FineOnly | Method::Udama
        )
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Method::Scratch),
            "tf" => Ok(Method::Tf),
            "tf_plus_samples" => Ok(Method::TfPlusSamples),
            "coarse_only" => Ok(Method::CoarseOnly),
            "fine_only" => Ok(Method::FineOnly),
            "udama" => Ok(Method::Udama),
            other => Err(Error::config(format!("unknown method '{other}'"))),
        }
    }
}

/// Held-out metrics of a single fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub r2: f64,
    pub corr: f64,
    pub mse: f64,
    pub mae: f64,
    pub hellinger: f64,
}

pub struct FoldOutcome {
    pub split: FoldSplit,
    pub metrics: FoldMetrics,
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

pub struct CrossValOutcome {
    pub report: MetricsReport,
    pub folds: Vec<FoldOutcome>,
}

fn train_fold<'a>(
    method: Method,
    target_train: &[&'a SensorWindow],
    source: &'a Cohort,
    config: &TrainConfig,
    pretrained: Option<&ModelParams>,
    fold: usize,
) -> Result<TrainRun> {
    let augmented: Vec<&'a SensorWindow> = if method.injects_samples() {
        inject_source_samples(
            source,
            target_train,
            config.injection_fraction,
            derive_seed(config.seed, Stream::Injection, fold as u64),
        )?
    } else {
        Vec::new()
    };
    let pre = || -> Result<&ModelParams> {
        pretrained.ok_or_else(|| Error::contract("method requires pretrained parameters"))
    };
    match method {
        Method::Scratch => train_scratch(target_train, config),
        Method::Tf => fine_tune(pre()?, target_train, config),
        Method::TfPlusSamples => fine_tune(pre()?, &augmented, config),
        Method::CoarseOnly => adapt_with_options(
            pre()?,
            &augmented,
            config,
            AdversarialOptions { lambda1: 1.0, lambda2: 0.0, grl: config.grl_schedule },
        ),
        Method::FineOnly => adapt_with_options(
            pre()?,
            &augmented,
            config,
            AdversarialOptions { lambda1: 0.0, lambda2: 1.0, grl: config.grl_schedule },
        ),
        Method::Udama => adapt(pre()?, &augmented, config),
    }
}

/// Runs the full protocol for one method: seeded 70/30 resamples of the
/// target cohort, training per fold, evaluation on the held-out target-only
/// test set, aggregated as mean ± population std.
pub fn crossvalidate(
    target: &Cohort,
    source: &Cohort,
    config: &TrainConfig,
    method: Method,
) -> Result<CrossValOutcome> {
    crossvalidate_with_pretrained(target, source, config, method, None)
}

/// [`crossvalidate`] reusing an already pretrained model (it is a pure
/// function of (source, config), so sharing it across methods changes
/// nothing).
pub fn crossvalidate_with_pretrained(
    target: &Cohort,
    source: &Cohort,
    config: &TrainConfig,
    method: Method,
    pretrained: Option<&ModelParams>,
) -> Result<CrossValOutcome> {
    config.validate()?;
    if target.windows.len() < 10 {
        return Err(Error::contract(format!(
            "cross-validation needs at least 10 target samples, got {}",
            target.windows.len()
        )));
    }
    let owned_pretrain;
    let pretrained = if method.needs_pretraining() {
        match pretrained {
            Some(p) => Some(p),
            None => {
                owned_pretrain = pretrain(source, config)?;
                Some(&owned_pretrain.params)
            }
        }
    } else {
        None
    };

    let splits = fold_splits(target.windows.len(), config)?;
    let mut folds = Vec::with_capacity(splits.len());
    for split in splits {
        let train_refs: Vec<&SensorWindow> =
            split.train_ids.iter().map(|&i| &target.windows[i]).collect();
        let run = train_fold(method, &train_refs, source, config, pretrained, split.fold)?;

        let test_refs: Vec<&SensorWindow> =
            split.test_ids.iter().map(|&i| &target.windows[i]).collect();
        debug_assert!(test_refs.iter().all(|w| w.y_c == 1), "test sets are target-only");
        let truth: Vec<f64> = test_refs.iter().map(|w| w.y).collect();
        let pred = crate::model::predict_batch(&run.params, &test_refs)?;
        let (r2, corr, mse, mae) = eval::compute_metrics(&pred, &truth)?;
        let hellinger = eval::hellinger_distance(&pred, &truth, config.hellinger_bins)?;
        folds.push(FoldOutcome {
            split,
            metrics: FoldMetrics { r2, corr, mse, mae, hellinger },
            params: run.params,
            log: run.log,
        });
    }

    let stat = |f: fn(&FoldMetrics) -> f64| -> MetricStat {
        MetricStat::from_folds(&folds.iter().map(|o| f(&o.metrics)).collect::<Vec<_>>())
    };
    let report = MetricsReport {
        method: method.name().to_string(),
        n_folds: folds.len(),
        r2: stat(|m| m.r2),
        corr: stat(|m| m.corr),
        mse: stat(|m| m.mse),
        mae: stat(|m| m.mae),
        hellinger: stat(|m| m.hellinger),
    };
    Ok(CrossValOutcome { report, folds })
}

/// Convenience wrapper returning just the aggregated report.
pub fn run_baseline(
    method: Method,
    target: &Cohort,
    source: &Cohort,
    config: &TrainConfig,
) -> Result<MetricsReport> {
    Ok(crossvalidate(target, source, config, method)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasynth::Domain;

    fn toy_config() -> TrainConfig {
        TrainConfig {
            encoder: EncoderSpec {
                gru_layers: 1,
                hidden_size: 3,
                mlp_sizes: vec![2],
                input_features: 4,
                metadata_dim: 2,
            },
            lr: 5e-3,
            pretrain_epochs: 3,
            adapt_epochs: 3,
            batch_size: 4,
            injection_fraction: 0.25,
            grl_schedule: GrlSchedule::Constant(0.5),
            seed: 17,
            folds: 2,
            test_fraction: 0.30,
            ..TrainConfig::default()
        }
    }

    fn toy_window(domain: Domain, i: usize, y: f64) -> SensorWindow {
        let t = 3;
        let f = 4;
        let x: Vec<f64> = (0..t * f)
            .map(|k| ((i * 31 + k * 7) % 17) as f64 / 17.0 - 0.5 + y / 100.0)
            .collect();
        SensorWindow {
            id: format!("{domain:?}-{i}"),
            domain,
            y,
            y_c: if domain == Domain::Source { 0 } else { 1 },
            y_d: (y - 38.0) / 8.0,
            metadata: vec![(i % 5) as f64, y / 50.0],
            x,
            t,
            f,
            mask_len: t,
        }
    }

    fn toy_cohorts(ns: usize, nt: usize) -> (Cohort, Cohort) {
        let source = Cohort {
            name: "source".into(),
            domain: Domain::Source,
            windows: (0..ns).map(|i| toy_window(Domain::Source, i, 40.0 + (i % 13) as f64)).collect(),
        };
        let target = Cohort {
            name: "target".into(),
            domain: Domain::Target,
            windows: (0..nt).map(|i| toy_window(Domain::Target, i, 30.0 + (i % 11) as f64)).collect(),
        };
        (source, target)
    }

    fn params_bits(p: &ModelParams) -> Vec<u64> {
        p.trainable().flat_map(|t| t.values().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn fold_splits_match_protocol_arithmetic() {
        let config = TrainConfig { folds: 3, ..toy_config() };
        let splits = fold_splits(191, &config).unwrap();
        assert_eq!(splits.len(), 3);
        for s in &splits {
            assert_eq!(s.test_ids.len(), 57);
            assert_eq!(s.train_ids.len(), 134);
            let mut all: Vec<usize> = s.train_ids.iter().chain(&s.test_ids).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..191).collect::<Vec<_>>(), "partition");
        }
        let again = fold_splits(191, &config).unwrap();
        assert_eq!(splits, again);
    }

    #[test]
    fn injection_counts_and_labels() {
        let (source, target) = toy_cohorts(20, 12);
        let train: Vec<&SensorWindow> = target.windows.iter().collect();

        let none = inject_source_samples(&source, &train, 0.0, 1).unwrap();
        assert_eq!(none.len(), 12);

        let train140: Vec<&SensorWindow> =
            (0..140).map(|i| &target.windows[i % 12]).collect();
        let aug = inject_source_samples(&source, &train140, 0.05, 1).unwrap();
        assert_eq!(aug.len(), 147);
        assert!(aug[140..].iter().all(|w| w.y_c == 0));

        assert!(inject_source_samples(&source, &train140, 1.0, 1).is_err());
    }

    #[test]
    fn pretrain_zero_epochs_returns_initialized_params() {
        let (source, _) = toy_cohorts(8, 4);
        let config = TrainConfig { pretrain_epochs: 0, ..toy_config() };
        let run = pretrain(&source, &config).unwrap();
        let fresh = ModelParams::init(&config.encoder, config.seed).unwrap();
        let fresh_bits: Vec<u64> =
            fresh.trainable().flat_map(|t| t.values().iter().map(|v| v.to_bits())).collect();
        assert_eq!(params_bits(&run.params), fresh_bits);
        assert!(run.log.is_empty());
    }

    #[test]
    fn pretrain_learns_constant_labels() {
        let (mut source, _) = toy_cohorts(12, 4);
        for w in &mut source.windows {
            w.y = 37.0;
        }
        let config = TrainConfig {
            pretrain_epochs: 120,
            lr: 0.02,
            ..toy_config()
        };
        let run = pretrain(&source, &config).unwrap();
        let first = run.log.first().unwrap().mse;
        let last = run.log.last().unwrap().mse;
        assert!(last < 0.1 * first, "mse {first} -> {last} should collapse on constant labels");
    }

    #[test]
    fn training_is_deterministic() {
        let (source, _) = toy_cohorts(8, 4);
        let config = toy_config();
        let a = pretrain(&source, &config).unwrap();
        let b = pretrain(&source, &config).unwrap();
        assert_eq!(params_bits(&a.params), params_bits(&b.params));
    }

    #[test]
    fn zero_lr_keeps_params_fixed() {
        let (source, target) = toy_cohorts(8, 6);
        let config = TrainConfig { lr: 0.0, adapt_epochs: 1, ..toy_config() };
        let pre = pretrain(&source, &config).unwrap();
        let train: Vec<&SensorWindow> = target.windows.iter().collect();
        let aug = inject_source_samples(&source, &train, 0.25, 3).unwrap();
        let run = adapt(&pre.params, &aug, &config).unwrap();
        assert_eq!(params_bits(&pre.params), params_bits(&run.params));
    }

    #[test]
    fn zero_weight_adaptation_matches_fine_tune_bitwise() {
        let (source, target) = toy_cohorts(10, 8);
        let config = TrainConfig { injection_fraction: 0.0, ..toy_config() };
        let pre = pretrain(&source, &config).unwrap();
        let train: Vec<&SensorWindow> = target.windows.iter().collect();

        let tf = fine_tune(&pre.params, &train, &config).unwrap();
        let zero = adapt_with_options(
            &pre.params,
            &train,
            &config,
            AdversarialOptions { lambda1: 0.0, lambda2: 0.0, grl: GrlSchedule::Constant(0.0) },
        )
        .unwrap();
        assert_eq!(params_bits(&tf.params), params_bits(&zero.params));
    }

    #[test]
    fn adapt_requires_both_domains_when_injecting() {
        let (source, target) = toy_cohorts(8, 6);
        let config = toy_config(); // injection_fraction > 0
        let pre = pretrain(&source, &config).unwrap();
        let target_only: Vec<&SensorWindow> = target.windows.iter().collect();
        assert!(matches!(
            adapt(&pre.params, &target_only, &config),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn epoch_log_eq1_recomputes_exactly() {
        let (source, target) = toy_cohorts(10, 8);
        let config = toy_config();
        let pre = pretrain(&source, &config).unwrap();
        let train: Vec<&SensorWindow> = target.windows.iter().collect();
        let aug = inject_source_samples(&source, &train, 0.25, 9).unwrap();
        let run = adapt(&pre.params, &aug, &config).unwrap();
        for e in &run.log {
            let recomputed = e.alpha * e.mse - e.lambda1 * e.cse - e.lambda2 * e.gll;
            assert!((e.eq1 - recomputed).abs() < 1e-12);
            for v in [e.mse, e.cse, e.gll, e.eq1] {
                assert!(v.is_finite());
            }
        }
    }

    #[test]
    fn grl_schedule_shapes() {
        let c = GrlSchedule::Constant(0.3);
        assert_eq!(c.lambda_at(0, 100), 0.3);
        assert_eq!(c.lambda_at(99, 100), 0.3);

        let r = GrlSchedule::Ramp(1.0);
        assert_eq!(r.lambda_at(0, 100), 0.0);
        let late = r.lambda_at(99, 100);
        assert!(late > 0.99 && late <= 1.0);
        let mut prev = -1.0;
        for s in 0..100 {
            let l = r.lambda_at(s, 100);
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let (source, target) = toy_cohorts(8, 6);
        let config = TrainConfig { injection_fraction: 0.0, ..toy_config() };
        let mut pre = pretrain(&source, &config).unwrap();
        pre.params.tensor_mut("gy.b").unwrap().values_mut()[0] = f64::NAN;
        let train: Vec<&SensorWindow> = target.windows.iter().collect();
        match fine_tune(&pre.params, &train, &config) {
            Err(Error::NonFiniteLoss { phase, epoch, .. }) => {
                assert_eq!(phase, "finetune");
                assert_eq!(epoch, 0);
            }
            other => panic!("expected NonFiniteLoss, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn coarse_only_is_udama_with_lambda1_one() {
        let (source, target) = toy_cohorts(12, 10);
        let config = TrainConfig {
            weights: LossWeights::new(0.01, 1.0, 0.0).unwrap(),
            ..toy_config()
        };
        let a = crossvalidate(&target, &source, &config, Method::Udama).unwrap();
        let b = crossvalidate(&target, &source, &config, Method::CoarseOnly).unwrap();
        for (fa, fb) in a.folds.iter().zip(&b.folds) {
            assert_eq!(params_bits(&fa.params), params_bits(&fb.params));
        }
        assert_eq!(a.report.corr.mean.to_bits(), b.report.corr.mean.to_bits());
    }

    #[test]
    fn crossvalidate_shapes_and_determinism() {
        let (source, target) = toy_cohorts(12, 10);
        let config = toy_config();
        let out = crossvalidate(&target, &source, &config, Method::Udama).unwrap();
        assert_eq!(out.folds.len(), 2);
        assert_eq!(out.report.n_folds, 2);
        for f in &out.folds {
            assert_eq!(f.split.test_ids.len(), 3); // round(0.3 * 10)
            assert_eq!(f.split.train_ids.len(), 7);
        }
        let again = crossvalidate(&target, &source, &config, Method::Udama).unwrap();
        assert_eq!(out.report, again.report);

        // shared pretraining changes nothing
        let pre = pretrain(&source, &config).unwrap();
        let shared =
            crossvalidate_with_pretrained(&target, &source, &config, Method::Udama, Some(&pre.params))
                .unwrap();
        assert_eq!(out.report, shared.report);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("udama".parse::<Method>().unwrap(), Method::Udama);
        assert_eq!("tf_plus_samples".parse::<Method>().unwrap(), Method::TfPlusSamples);
        assert!("nope".parse::<Method>().is_err());
    }
}
