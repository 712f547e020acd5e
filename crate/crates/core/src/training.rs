//! Teacher-forced joint training of the word and entity-label heads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AttributeSchema, Sample, Vocab, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{KeywordInput, MemoryMode, Model, ModelConfig, StepOutput, Variant};
use crate::scalar::Scalar;
use crate::tensor::{clip_global_norm, AdamConfig, AdamState, ParamStore, Tape, Tensor, Var};

/// Probability floor applied to target log-probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lambda_final: f64,
    pub lambda_warmup: u64,
    pub tau: f64,
    pub seed: u64,
    pub precision: Precision,
    pub variant: Variant,
    pub max_keywords: usize,
    pub max_len: usize,
    pub clip_norm: f64,
    pub val_fraction: f64,
    /// Divide the loss by the number of unmasked target tokens.
    pub normalize: bool,
    /// Stop after this many optimizer updates.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            dim: 64,
            batch_size: 32,
            epochs: 3,
            lr: 1e-3,
            lambda_final: 0.6,
            lambda_warmup: 500,
            tau: 0.5,
            seed: 0,
            precision: Precision::F32,
            variant: Variant::FULL,
            max_keywords: 16,
            max_len: 70,
            clip_norm: 5.0,
            val_fraction: 0.1,
            normalize: true,
            max_steps: None,
        }
    }

    pub fn paper() -> Self {
        Self {
            dim: 256,
            batch_size: 256,
            epochs: 15,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.batch_size == 0 || self.max_keywords == 0 || self.max_len == 0 {
            return bad("dimensions and sizes must be positive".into());
        }
        if !(self.lambda_final >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda_final));
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("validation fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }

    pub fn lambda_at(&self, step: u64) -> f64 {
        lambda_schedule(step, self.lambda_warmup, self.lambda_final)
    }

    pub fn model_config(&self, vocab: &Vocab, schema: &AttributeSchema) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            vocab_size: vocab.len(),
            num_labels: schema.num_categories(),
            normal_label: schema.normal(),
            tau: self.tau,
            variant: self.variant,
        }
    }
}

/// Entity-loss weight after `step` optimizer updates.
pub fn lambda_schedule(step: u64, warmup: u64, lambda_final: f64) -> f64 {
    if step < warmup {
        0.0
    } else {
        lambda_final
    }
}

/// A sample mapped to ids. Targets are the description followed by EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub keywords: Vec<usize>,
    pub keyword_labels: Vec<usize>,
    pub targets: Vec<usize>,
    pub target_labels: Vec<usize>,
}

impl EncodedSample {
    pub fn new(
        sample: &Sample,
        vocab: &Vocab,
        schema: &AttributeSchema,
        max_keywords: usize,
        max_len: usize,
    ) -> Result<Self> {
        let kw = sample.keywords.len().min(max_keywords);
        if kw == 0 {
            return Err(Error::EmptyAxis { op: "keyword set" });
        }
        let n = sample.description.len().min(max_len);
        let mut targets = vocab.encode(&sample.description[..n]);
        let mut target_labels = sample.description_label_ids(schema)?;
        target_labels.truncate(n);
        targets.push(EOS);
        target_labels.push(schema.normal());
        Ok(Self {
            keywords: vocab.encode(&sample.keywords[..kw]),
            keyword_labels: sample.keyword_label_ids(schema)?[..kw].to_vec(),
            targets,
            target_labels,
        })
    }
}

pub fn encode_corpus(
    corpus: &[Sample],
    vocab: &Vocab,
    schema: &AttributeSchema,
    max_keywords: usize,
    max_len: usize,
) -> Result<Vec<EncodedSample>> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, s)| {
            EncodedSample::new(s, vocab, schema, max_keywords, max_len).map_err(|e| Error::Sample {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Padded batch. Decoder-side vectors are indexed `[step][row]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub keywords: KeywordInput,
    pub inputs: Vec<Vec<usize>>,
    pub input_labels: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub target_labels: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn new(samples: &[&EncodedSample], normal_label: usize) -> Result<Self> {
        let rows: Vec<(&[usize], &[usize])> = samples
            .iter()
            .map(|s| (s.keywords.as_slice(), s.keyword_labels.as_slice()))
            .collect();
        let keywords = KeywordInput::from_rows(&rows, PAD, normal_label)?;
        let steps = samples.iter().map(|s| s.targets.len()).max().unwrap_or(0);
        let mut batch = Self {
            keywords,
            inputs: Vec::with_capacity(steps),
            input_labels: Vec::with_capacity(steps),
            targets: Vec::with_capacity(steps),
            target_labels: Vec::with_capacity(steps),
            mask: Vec::with_capacity(steps),
        };
        for t in 0..steps {
            let mut row = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for s in samples {
                let live = t < s.targets.len();
                let (y_in, m_in) = match t {
                    0 => (BOS, normal_label),
                    _ if t <= s.targets.len() => (s.targets[t - 1], s.target_labels[t - 1]),
                    _ => (PAD, normal_label),
                };
                row.0.push(y_in);
                row.1.push(m_in);
                row.2.push(if live { s.targets[t] } else { PAD });
                row.3.push(if live { s.target_labels[t] } else { normal_label });
                row.4.push(live);
            }
            batch.inputs.push(row.0);
            batch.input_labels.push(row.1);
            batch.targets.push(row.2);
            batch.target_labels.push(row.3);
            batch.mask.push(row.4);
        }
        Ok(batch)
    }

    pub fn size(&self) -> usize {
        self.keywords.batch
    }

    pub fn steps(&self) -> usize {
        self.targets.len()
    }

    pub fn tokens(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }
}

/// Derives the gumbel seed for one optimizer update.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_add(step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Teacher-forced pass feeding the ground-truth previous token and label.
/// `noise_seed` selects train-mode memory reads; `None` reads noise-free.
pub fn teacher_forced<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    batch: &Batch,
    noise_seed: Option<u64>,
) -> Result<Vec<StepOutput>> {
    let (ctx, mut state) = model.prepare(tape, &batch.keywords)?;
    let mut out = Vec::with_capacity(batch.steps());
    for t in 0..batch.steps() {
        let mode = match noise_seed {
            Some(seed) => MemoryMode::Train { seed, stream: t as u64 },
            None => MemoryMode::Eval,
        };
        let step = model.step(tape, &ctx, &state, &batch.inputs[t], &batch.input_labels[t], mode)?;
        state = step.state.clone();
        out.push(step);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub loss: Var,
    /// Mean (or summed, without normalization) word negative log-likelihood.
    pub word_nll: f64,
    pub label_nll: f64,
    pub tokens: usize,
}

/// `L = −Σ log P^v(y_t) − λ Σ log P^e(m_t)` over unmasked positions, divided
/// by the token count when `normalize` is set. Target log-probabilities are
/// floored at `ln 1e-12`; [`Tape::clamp_count`] counts the clamps.
pub fn joint_loss<T: Scalar>(
    tape: &mut Tape<T>,
    log_pv: &[Var],
    log_pe: Option<&[Var]>,
    batch: &Batch,
    lambda: f64,
    normalize: bool,
) -> Result<LossParts> {
    if log_pv.len() != batch.steps() || log_pe.is_some_and(|e| e.len() != batch.steps()) {
        return Err(Error::shape("joint_loss", &[log_pv.len()], &[batch.steps()]));
    }
    let tokens = batch.tokens();
    if tokens == 0 {
        return Err(Error::EmptyAxis { op: "joint_loss" });
    }
    let floor = T::of(PROB_FLOOR.ln());
    let masked_sum = |tape: &mut Tape<T>, dist: Var, ids: &[usize], mask: &[bool]| -> Result<Var> {
        let picked = tape.pick(dist, ids)?;
        let picked = tape.floor(picked, floor);
        let m: Vec<T> = mask.iter().map(|&k| if k { T::one() } else { T::zero() }).collect();
        let m = tape.constant(Tensor::vector(m));
        let masked = tape.mul(picked, m)?;
        Ok(tape.sum(masked))
    };
    let mut word_terms = Vec::with_capacity(log_pv.len());
    for (t, &dist) in log_pv.iter().enumerate() {
        word_terms.push((T::one(), masked_sum(tape, dist, &batch.targets[t], &batch.mask[t])?));
    }
    let word = tape.weighted_sum(&word_terms)?;
    let label = match log_pe {
        Some(pe) => {
            let mut terms = Vec::with_capacity(pe.len());
            for (t, &dist) in pe.iter().enumerate() {
                terms.push((T::one(), masked_sum(tape, dist, &batch.target_labels[t], &batch.mask[t])?));
            }
            Some(tape.weighted_sum(&terms)?)
        }
        None => None,
    };
    let denom = if normalize { tokens as f64 } else { 1.0 };
    let scale = T::of(-1.0 / denom);
    let loss = match label {
        Some(l) if lambda > 0.0 => tape.weighted_sum(&[(scale, word), (scale * T::of(lambda), l)])?,
        _ => tape.scale(word, scale),
    };
    Ok(LossParts {
        loss,
        word_nll: -tape.value(word).item().as_f64() / denom,
        label_nll: label.map_or(0.0, |l| -tape.value(l).item().as_f64() / denom),
        tokens,
    })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lambda: f64,
    pub loss: f64,
    pub word_nll: f64,
    pub label_nll: f64,
}

/// Aggregate teacher-forced statistics over a data set.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TeacherForcedStats {
    pub word_nll: f64,
    pub label_nll: f64,
    pub tokens: usize,
    pub correct: usize,
}

impl TeacherForcedStats {
    pub fn accuracy(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.correct as f64 / self.tokens as f64
        }
    }

    pub fn loss(&self, lambda: f64) -> f64 {
        self.word_nll + lambda * self.label_nll
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Noise-free teacher-forced loss and next-token accuracy.
pub fn evaluate_teacher_forced<T: Scalar>(model: &Model<T>, batches: &[Batch]) -> Result<TeacherForcedStats> {
    let mut stats = TeacherForcedStats::default();
    let (mut word, mut label) = (0.0, 0.0);
    for batch in batches {
        let mut tape = Tape::inference();
        let steps = teacher_forced(model, &mut tape, batch, None)?;
        let pv: Vec<Var> = steps.iter().map(|s| s.log_pv).collect();
        let pe: Option<Vec<Var>> = steps.iter().map(|s| s.log_pe).collect();
        let parts = joint_loss(&mut tape, &pv, pe.as_deref(), batch, 0.0, false)?;
        word += parts.word_nll;
        label += parts.label_nll;
        stats.tokens += parts.tokens;
        for (t, s) in steps.iter().enumerate() {
            let v = tape.value(s.log_pv);
            for (b, row) in v.data().chunks(v.last_dim()).enumerate() {
                if batch.mask[t][b] && argmax(row) == batch.targets[t][b] {
                    stats.correct += 1;
                }
            }
        }
    }
    if stats.tokens > 0 {
        stats.word_nll = word / stats.tokens as f64;
        stats.label_nll = label / stats.tokens as f64;
    }
    Ok(stats)
}

/// Splits samples into consecutive batches, in order.
pub fn make_batches(samples: &[EncodedSample], batch_size: usize, normal_label: usize) -> Result<Vec<Batch>> {
    samples
        .chunks(batch_size.max(1))
        .map(|chunk| Batch::new(&chunk.iter().collect::<Vec<_>>(), normal_label))
        .collect()
}

/// Seeded shuffle of `0..n` split into `(train, validation)` indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * val_fraction).round() as usize;
    let val = idx.split_off(n - n_val.min(n));
    let mut train = idx;
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

/// Optimizer state around a model.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    adam: AdamState<T>,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(
            &model.params,
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            model,
            config,
            adam,
            step: 0,
        })
    }

    /// Optimizer updates performed so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Loss and parameter gradients for one batch at the given λ, without updating.
    pub fn gradients(&self, batch: &Batch, lambda: f64) -> Result<(LossParts, f64, Vec<Option<Tensor<T>>>)> {
        let mut tape = Tape::new();
        let seed = step_seed(self.config.seed, self.step);
        let steps = teacher_forced(&self.model, &mut tape, batch, Some(seed))?;
        let pv: Vec<Var> = steps.iter().map(|s| s.log_pv).collect();
        let pe: Option<Vec<Var>> = steps.iter().map(|s| s.log_pe).collect();
        let parts = joint_loss(&mut tape, &pv, pe.as_deref(), batch, lambda, self.config.normalize)?;
        let loss = tape.value(parts.loss).item().as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        let grads = tape.backward(parts.loss)?;
        Ok((parts, loss, tape.param_grads(&self.model.params, &grads)))
    }

    /// One clipped Adam update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let lambda = self.config.lambda_at(self.step);
        let (parts, loss, mut grads) = self.gradients(batch, lambda)?;
        clip_global_norm(&mut grads, self.config.clip_norm);
        self.adam.step(&mut self.model.params, &grads)?;
        let metrics = StepMetrics {
            step: self.step,
            lambda,
            loss,
            word_nll: parts.word_nll,
            label_nll: parts.label_nll,
        };
        self.step += 1;
        Ok(metrics)
    }
}

/// Result of [`train`].
#[derive(Debug)]
pub struct TrainOutcome<T> {
    /// Parameters with the lowest validation loss (the final ones without a validation set).
    pub best: ParamStore<T>,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub steps: u64,
    pub history: Vec<StepMetrics>,
    pub val_history: Vec<f64>,
}

/// Callbacks invoked during [`train`].
pub trait TrainObserver<T> {
    fn on_step(&mut self, _metrics: &StepMetrics) -> Result<()> {
        Ok(())
    }
    /// Called when validation improves; `model` holds the new best parameters.
    fn on_best(&mut self, _model: &Model<T>, _epoch: usize, _val_loss: Option<f64>) -> Result<()> {
        Ok(())
    }
}

impl<T> TrainObserver<T> for () {}

/// Seeded-shuffle epochs of clipped Adam with per-epoch validation.
pub fn train<T: Scalar>(
    trainer: &mut Trainer<T>,
    train_set: &[EncodedSample],
    val_set: &[EncodedSample],
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() {
        return Err(Error::EmptyAxis { op: "training set" });
    }
    let cfg = trainer.config.clone();
    let normal = trainer.model.config.normal_label;
    let val_batches = make_batches(val_set, cfg.batch_size, normal)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut outcome = TrainOutcome {
        best: trainer.model.params.clone(),
        best_epoch: 0,
        best_val_loss: None,
        steps: 0,
        history: Vec::new(),
        val_history: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        if cfg.max_steps.is_some_and(|m| trainer.steps() >= m) {
            break;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| trainer.steps() >= m) {
                break;
            }
            let samples: Vec<&EncodedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::new(&samples, normal)?;
            let metrics = trainer.train_step(&batch)?;
            observer.on_step(&metrics)?;
            outcome.history.push(metrics);
        }
        let val = if val_batches.is_empty() {
            None
        } else {
            let s = evaluate_teacher_forced(&trainer.model, &val_batches)?;
            Some(s.loss(cfg.lambda_final))
        };
        if let Some(v) = val {
            outcome.val_history.push(v);
        }
        let improved = match (val, outcome.best_val_loss) {
            (Some(v), Some(best)) => v < best,
            _ => true,
        };
        if improved {
            outcome.best = trainer.model.params.clone();
            outcome.best_epoch = epoch;
            outcome.best_val_loss = val;
            observer.on_best(&trainer.model, epoch, val)?;
        }
    }
    if cfg.epochs == 0 {
        observer.on_best(&trainer.model, 0, None)?;
    }
    outcome.steps = trainer.steps();
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_schema, generate_corpus};

    fn fixture(n: usize) -> (AttributeSchema, Vocab, Vec<EncodedSample>) {
        let schema = default_schema();
        let corpus = generate_corpus(&schema, n, 1).unwrap();
        let vocab = Vocab::build(&corpus).unwrap();
        let enc = encode_corpus(&corpus, &vocab, &schema, 16, 70).unwrap();
        (schema, vocab, enc)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            dim: 8,
            batch_size: 4,
            epochs: 1,
            lambda_warmup: 0,
            val_fraction: 0.0,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn lambda_schedule_boundaries() {
        assert_eq!(lambda_schedule(0, 500, 0.6), 0.0);
        assert_eq!(lambda_schedule(499, 500, 0.6), 0.0);
        assert_eq!(lambda_schedule(500, 500, 0.6), 0.6);
        assert_eq!(lambda_schedule(0, 0, 0.6), 0.6);
    }

    #[test]
    fn presets() {
        let p = TrainConfig::paper();
        assert_eq!((p.dim, p.batch_size, p.epochs), (256, 256, 15));
        assert_eq!((p.lr, p.lambda_final, p.lambda_warmup), (1e-3, 0.6, 500));
        assert_eq!(TrainConfig::preset("desk").unwrap(), TrainConfig::desk());
        assert!(TrainConfig::preset("huge").is_err());
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), p);
        let partial: TrainConfig = serde_json::from_str(r#"{"dim": 16}"#).unwrap();
        assert_eq!(partial.dim, 16);
        assert_eq!(partial.batch_size, 32);
        assert!(TrainConfig { tau: 0.0, ..p.clone() }.validate().is_err());
        assert!(TrainConfig { lambda_final: -0.1, ..p }.validate().is_err());
    }

    #[test]
    fn batch_layout_and_masks() {
        let (schema, _, enc) = fixture(3);
        let refs: Vec<&EncodedSample> = enc.iter().collect();
        let b = Batch::new(&refs, schema.normal()).unwrap();
        assert_eq!(b.size(), 3);
        let longest = enc.iter().map(|s| s.targets.len()).max().unwrap();
        assert_eq!(b.steps(), longest);
        assert_eq!(b.tokens(), enc.iter().map(|s| s.targets.len()).sum::<usize>());
        for (r, s) in enc.iter().enumerate() {
            assert_eq!(b.inputs[0][r], BOS);
            assert_eq!(*s.targets.last().unwrap(), EOS);
            for t in 0..b.steps() {
                assert_eq!(b.mask[t][r], t < s.targets.len());
                if t < s.targets.len() {
                    assert_eq!(b.targets[t][r], s.targets[t]);
                }
                if t >= 1 && t <= s.targets.len() {
                    assert_eq!(b.inputs[t][r], s.targets[t - 1]);
                    assert_eq!(b.input_labels[t][r], s.target_labels[t - 1]);
                }
            }
        }
    }

    /// Log-uniform distributions as constants on a tape.
    fn uniform(tape: &mut Tape<f64>, rows: usize, n: usize) -> Var {
        tape.constant(Tensor::full(&[rows, n], -(n as f64).ln()))
    }

    fn toy_batch(len: usize, vocab: usize, labels: usize) -> Batch {
        let s = EncodedSample {
            keywords: vec![4],
            keyword_labels: vec![1],
            targets: (0..len).map(|i| 4 + i % (vocab - 4)).collect(),
            target_labels: (0..len).map(|i| i % labels).collect(),
        };
        Batch::new(&[&s], 0).unwrap()
    }

    #[test]
    fn uniform_predictions_closed_form() {
        let batch = toy_batch(3, 10, 4);
        let mut tape = Tape::new();
        let pv: Vec<Var> = (0..3).map(|_| uniform(&mut tape, 1, 10)).collect();
        let pe: Vec<Var> = (0..3).map(|_| uniform(&mut tape, 1, 4)).collect();
        let parts = joint_loss(&mut tape, &pv, Some(&pe), &batch, 0.6, true).unwrap();
        let expected = 10f64.ln() + 0.6 * 4f64.ln();
        assert!((tape.value(parts.loss).item() - expected).abs() < 1e-12);
        assert!((expected - 3.1344).abs() < 1e-4);

        let raw = joint_loss(&mut tape, &pv, Some(&pe), &batch, 0.6, false).unwrap();
        assert!((tape.value(raw.loss).item() - 3.0 * expected).abs() < 1e-12);
        let word_only = joint_loss(&mut tape, &pv, Some(&pe), &batch, 0.0, true).unwrap();
        assert!((tape.value(word_only.loss).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_and_clamping() {
        let batch = toy_batch(2, 6, 2);
        let mut tape = Tape::new();
        let onehot = |tape: &mut Tape<f64>, n: usize, hot: usize| {
            let mut v = vec![f64::NEG_INFINITY; n];
            v[hot] = 0.0;
            tape.constant(Tensor::from_f64(&[1, n], &v).unwrap())
        };
        let pv: Vec<Var> = (0..2).map(|t| onehot(&mut tape, 6, batch.targets[t][0])).collect();
        let pe: Vec<Var> = (0..2).map(|t| onehot(&mut tape, 2, batch.target_labels[t][0])).collect();
        let parts = joint_loss(&mut tape, &pv, Some(&pe), &batch, 0.6, true).unwrap();
        assert_eq!(tape.value(parts.loss).item(), 0.0);
        assert_eq!(tape.clamp_count(), 0);

        let wrong: Vec<Var> = (0..2).map(|t| onehot(&mut tape, 6, (batch.targets[t][0] + 1) % 6)).collect();
        let parts = joint_loss(&mut tape, &wrong, None, &batch, 0.0, true).unwrap();
        assert!((tape.value(parts.loss).item() + PROB_FLOOR.ln()).abs() < 1e-9);
        assert_eq!(tape.clamp_count(), 2);
    }

    #[test]
    fn padding_contributes_nothing() {
        let (schema, _, enc) = fixture(2);
        let mut tape = Tape::new();
        let long = Batch::new(&[&enc[0], &enc[1]], schema.normal()).unwrap();
        let v = 500;
        let pv: Vec<Var> = (0..long.steps()).map(|_| uniform(&mut tape, 2, v)).collect();
        let parts = joint_loss(&mut tape, &pv, None, &long, 0.0, false).unwrap();
        let expected = long.tokens() as f64 * (v as f64).ln();
        assert!((tape.value(parts.loss).item() - expected).abs() < 1e-9);
    }

    fn trainer(variant: Variant, vocab: &Vocab, schema: &AttributeSchema) -> Trainer<f64> {
        let cfg = TrainConfig {
            variant,
            ..small_config()
        };
        let model = Model::new(cfg.model_config(vocab, schema), 3).unwrap();
        Trainer::new(model, cfg).unwrap()
    }

    #[test]
    fn every_parameter_gets_a_gradient() {
        let (schema, vocab, enc) = fixture(4);
        let batch = make_batches(&enc, 4, schema.normal()).unwrap().remove(0);
        for v in ["full", "no_mem", "no_elstm", "no_elstm+no_mem"] {
            let t = trainer(Variant::parse(v).unwrap(), &vocab, &schema);
            let (_, loss, grads) = t.gradients(&batch, 0.6).unwrap();
            assert!(loss.is_finite() && loss > 0.0);
            for (id, name, _) in t.model.params.iter() {
                let g = grads[id.index()].as_ref().unwrap_or_else(|| panic!("{v}: {name} has no gradient"));
                assert!(g.data().iter().any(|&x| x != 0.0), "{v}: {name} gradient is zero");
            }
        }
    }

    #[test]
    fn zero_lambda_leaves_label_head_untouched() {
        let (schema, vocab, enc) = fixture(4);
        let batch = make_batches(&enc, 4, schema.normal()).unwrap().remove(0);
        let t = trainer(Variant::FULL, &vocab, &schema);
        let (_, _, grads) = t.gradients(&batch, 0.0).unwrap();
        let head = t.model.decoder.out_e.unwrap();
        for id in [head.weight, head.bias] {
            assert!(grads[id.index()].as_ref().map_or(true, |g| g.data().iter().all(|&x| x == 0.0)));
        }
        let (_, _, grads) = t.gradients(&batch, 0.6).unwrap();
        assert!(grads[head.weight.index()].as_ref().unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn one_epoch_step_count_and_determinism() {
        let (schema, vocab, enc) = fixture(10);
        let run = || {
            let mut t = trainer(Variant::FULL, &vocab, &schema);
            train(&mut t, &enc, &enc[..3], &mut ()).unwrap()
        };
        let a = run();
        assert_eq!(a.steps, 3);
        assert_eq!(a.history.len(), 3);
        let b = run();
        let bits = |o: &TrainOutcome<f64>| o.history.iter().map(|m| m.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.history.iter().all(|m| m.loss.is_finite() && m.loss >= 0.0));
    }

    #[test]
    fn nan_parameters_abort_the_step() {
        let (schema, vocab, enc) = fixture(4);
        let batch = make_batches(&enc, 4, schema.normal()).unwrap().remove(0);
        let mut t = trainer(Variant::FULL, &vocab, &schema);
        let id = t.model.decoder.out_v.bias;
        t.model.params.value_mut(id).data_mut()[5] = f64::NAN;
        let r = t.train_step(&batch);
        assert!(matches!(r, Err(Error::NonFiniteLoss { step: 0 })), "{r:?}");
    }

    #[test]
    fn split_is_seeded_partition() {
        let (tr, va) = split_indices(100, 0.1, 4);
        assert_eq!(va.len(), 10);
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.1, 4), (tr, va));
    }
}
