//! Optimization: warmup/inverse-sqrt schedule, Adam over the trainable
//! subset, SpecAugment-style masking, the teacher-forced training loop with
//! best-on-dev checkpointing, and learning-rate grid selection.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as IoWrite;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{lang_name, Example, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::corpus_bleu;
use crate::model::{EncoderInput, ForwardCtx, Model};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

// ── learning-rate schedule ────────────────────────────────────────────────

/// Linear warmup to `eta_max` over `warmup` steps, then inverse-sqrt decay:
/// eta_max · min(step/warmup, sqrt(warmup/step)). Step counts from 1.
pub fn lr_schedule(step: usize, warmup: usize, eta_max: f64) -> f64 {
    if step == 0 {
        return 0.0;
    }
    let s = step as f64;
    let w = warmup.max(1) as f64;
    eta_max * (s / w).min((w / s).sqrt())
}

/// The learning-rate grid every recipe sweeps, smallest first.
pub const ETA_GRID: [f64; 3] = [2e-5, 2e-4, 2e-3];

// ── Adam ──────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; None disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-9, clip_norm: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm over trainable parameters, before clipping.
    pub grad_norm: f64,
    /// Multiplier applied by clipping (1 when inactive).
    pub clip_scale: f64,
    /// Parameters that received an update.
    pub updated: usize,
}

/// Adam with moments kept in f64 and allocated lazily, so optimizer state
/// exists only for parameters that actually train.
pub struct Adam {
    pub cfg: AdamConfig,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    t: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, state: BTreeMap::new(), t: 0 }
    }

    /// Moment-vector elements currently held (2 per tracked parameter
    /// element).
    pub fn state_elements(&self) -> usize {
        self.state.values().map(|(m, v)| m.len() + v.len()).sum()
    }

    /// One update over every trainable parameter carrying a gradient.
    /// Frozen parameters are skipped even if the tape gave them gradients.
    pub fn step<T: Scalar>(&mut self, store: &ParamStore<T>, lr: f64) -> Result<StepStats> {
        let mut sq_norm = 0.0f64;
        for p in store.iter() {
            if !p.trainable {
                continue;
            }
            if let Some(g) = p.tensor.grad() {
                for v in &g {
                    let v = v.as_f64();
                    if !v.is_finite() {
                        return Err(Error::NonFiniteGradient(p.path.clone()));
                    }
                    sq_norm += v * v;
                }
            }
        }
        let grad_norm = sq_norm.sqrt();
        let clip_scale = match self.cfg.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };

        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let mut updated = 0;
        for p in store.iter() {
            if !p.trainable {
                continue;
            }
            let Some(g) = p.tensor.grad() else { continue };
            let (m, v) = self
                .state
                .entry(p.path.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            p.tensor.update(|values, _| {
                for i in 0..values.len() {
                    let gi = g[i].as_f64() * clip_scale;
                    m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                    v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                    let step = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.cfg.eps);
                    values[i] = T::from_f64(values[i].as_f64() - step);
                }
            });
            updated += 1;
        }
        Ok(StepStats { grad_norm, clip_scale, updated })
    }
}

// ── SpecAugment ───────────────────────────────────────────────────────────

/// Frequency and time masking on rendered features, applied to training
/// inputs only. Masked cells become zero.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct SpecAugment {
    pub n_freq_masks: usize,
    /// Max channels per frequency mask.
    pub max_freq: usize,
    pub n_time_masks: usize,
    /// Max frames per time mask.
    pub max_time: usize,
    /// Cap on the fraction of frames a single time mask may cover.
    pub p_time: f64,
}

impl SpecAugment {
    /// The light policy: one narrow frequency mask and one time mask,
    /// scaled to the feature dimension.
    pub fn light(feat_dim: usize) -> Self {
        SpecAugment {
            n_freq_masks: 1,
            max_freq: (feat_dim / 4).max(1),
            n_time_masks: 1,
            max_time: 12,
            p_time: 0.3,
        }
    }

    pub fn apply<T: Scalar>(&self, frames: &mut [T], t: usize, feat: usize, rng: &mut ChaCha8Rng) {
        debug_assert_eq!(frames.len(), t * feat);
        for _ in 0..self.n_freq_masks {
            let f = rng.gen_range(0..=self.max_freq.min(feat));
            let f0 = rng.gen_range(0..=feat - f);
            for row in 0..t {
                for c in f0..f0 + f {
                    frames[row * feat + c] = T::zero();
                }
            }
        }
        let time_cap = ((t as f64 * self.p_time) as usize).min(self.max_time);
        for _ in 0..self.n_time_masks {
            let w = rng.gen_range(0..=time_cap);
            let t0 = rng.gen_range(0..=t - w);
            for cell in frames[t0 * feat..(t0 + w) * feat].iter_mut() {
                *cell = T::zero();
            }
        }
    }
}

// ── batching ──────────────────────────────────────────────────────────────

/// Length-bucketed batches: indices sorted by decreasing cost, chunked,
/// then batch order shuffled. Every index appears exactly once.
pub fn make_batches(costs: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse((costs[i], i)));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    batches.shuffle(rng);
    batches
}

// ── forward and loss ──────────────────────────────────────────────────────

fn encoder_input_of<'a, T: Scalar>(
    frames_t: &'a Option<(Vec<T>, usize)>,
    tokens: &'a Option<Vec<usize>>,
) -> Result<EncoderInput<'a, T>> {
    match (frames_t, tokens) {
        (Some((data, t)), None) => Ok(EncoderInput::Frames { data, t: *t, n_valid: *t }),
        (None, Some(toks)) => Ok(EncoderInput::Tokens(toks)),
        _ => Err(Error::InvalidConfig(
            "example needs exactly one of frames or tokens".into(),
        )),
    }
}

/// Teacher-forced mean token loss for one example. Frames are optionally
/// SpecAugmented in place before the forward.
pub fn example_loss<T: Scalar>(
    model: &Model<T>,
    ex: &Example,
    ctx: &mut ForwardCtx<'_, T>,
    augment: Option<(&SpecAugment, &mut ChaCha8Rng)>,
) -> Result<Tensor<T>> {
    let mut frames_t: Option<(Vec<T>, usize)> = ex
        .enc_frames
        .as_ref()
        .map(|(f, t)| (f.iter().map(|&x| T::from_f32(x)).collect(), *t));
    if let (Some((data, t)), Some((aug, rng))) = (&mut frames_t, augment) {
        let feat = data.len() / *t;
        aug.apply(data, *t, feat, rng);
    }
    let lang = ex.lang.map(lang_name);
    let enc = model.encode(ctx, encoder_input_of(&frames_t, &ex.enc_tokens)?, lang.as_deref())?;
    let logits = model.decode_forward(ctx, &enc, &ex.prefix, lang.as_deref())?;
    ctx.tape.softmax_cross_entropy(&logits, &ex.targets)
}

/// Token-weighted mean dev loss, eval mode.
pub fn eval_loss<T: Scalar>(model: &Model<T>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("eval examples"));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for ex in examples {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval(&mut tape);
        let loss = example_loss(model, ex, &mut ctx, None)?;
        total += loss.item().as_f64() * ex.targets.len() as f64;
        tokens += ex.targets.len();
    }
    Ok(total / tokens as f64)
}

/// Greedy-decode every example and score corpus BLEU against the
/// references (targets without the trailing eos).
pub fn eval_bleu<T: Scalar>(model: &Model<T>, examples: &[Example], max_len: usize) -> Result<f64> {
    let mut hyps = Vec::with_capacity(examples.len());
    let mut refs = Vec::with_capacity(examples.len());
    for ex in examples {
        let frames_t: Option<(Vec<T>, usize)> = ex
            .enc_frames
            .as_ref()
            .map(|(f, t)| (f.iter().map(|&x| T::from_f32(x)).collect(), *t));
        let lang = ex.lang.map(lang_name);
        let hyp = model.greedy_decode(
            encoder_input_of(&frames_t, &ex.enc_tokens)?,
            lang.as_deref(),
            ex.prefix[0],
            Vocab::EOS,
            max_len,
        )?;
        hyps.push(hyp);
        let mut r = ex.targets.clone();
        if r.last() == Some(&Vocab::EOS) {
            r.pop();
        }
        refs.push(r);
    }
    corpus_bleu(&hyps, &refs)
}

// ── training loop ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// Lower dev loss wins.
    #[default]
    DevLoss,
    /// Higher dev BLEU wins.
    DevBleu,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub warmup_steps: usize,
    pub eta_max: f64,
    /// Utterances per optimizer step (gradient accumulation group).
    pub batch_size: usize,
    /// Dev evaluation cadence in steps; also evaluated at steps 0 and end.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping; None trains to
    /// max_steps.
    pub patience: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub spec_augment: Option<SpecAugment>,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub selection: SelectionMetric,
    /// Greedy decode budget for BLEU selection.
    #[serde(default = "default_decode_len")]
    pub max_decode_len: usize,
    /// NDJSON training log destination.
    #[serde(default)]
    pub log_path: Option<PathBuf>,
}

fn default_decode_len() -> usize {
    24
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        if self.eta_max <= 0.0 || !self.eta_max.is_finite() {
            return bad(format!("bad eta_max {}", self.eta_max));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub dev_loss: f64,
    pub dev_bleu: Option<f64>,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_run: usize,
    pub best_step: usize,
    /// Dev loss at the best step (or dev BLEU under BLEU selection).
    pub best_metric: f64,
    pub history: Vec<EvalPoint>,
    pub final_train_loss: f64,
    /// Optimizer moment elements at the end; 2 per trained element.
    pub optimizer_state_elements: usize,
}

struct NdjsonLog {
    file: Option<std::io::BufWriter<fs::File>>,
}

impl NdjsonLog {
    fn open(path: &Option<PathBuf>) -> Result<Self> {
        let file = match path {
            None => None,
            Some(p) => {
                if let Some(dir) = p.parent() {
                    if !dir.as_os_str().is_empty() {
                        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
                    }
                }
                let f = fs::File::create(p).map_err(|e| Error::io(p.display().to_string(), e))?;
                Some(std::io::BufWriter::new(f))
            }
        };
        Ok(NdjsonLog { file })
    }

    fn write(&mut self, value: serde_json::Value) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{value}").map_err(|e| Error::io("train log".into(), e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush().map_err(|e| Error::io("train log".into(), e))?;
        }
        Ok(())
    }
}

/// Train `model` on `train` with dev-based selection. The best dev
/// checkpoint (evaluated before the first update, then every `eval_every`
/// steps) is restored into the model before returning, so a run can never
/// hand back something worse on dev than what it started from.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training examples"));
    }
    if dev.is_empty() {
        return Err(Error::EmptyInput("dev examples"));
    }

    let mut log = NdjsonLog::open(&cfg.log_path)?;
    let mut adam = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5bd1_e995);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);

    // higher-is-better metrics are negated so "smaller wins" throughout
    let score = |model: &Model<T>| -> Result<(f64, EvalPoint, f64)> {
        let loss = eval_loss(model, dev)?;
        match cfg.selection {
            SelectionMetric::DevLoss => {
                Ok((loss, EvalPoint { step: 0, dev_loss: loss, dev_bleu: None }, loss))
            }
            SelectionMetric::DevBleu => {
                let bleu = eval_bleu(model, dev, cfg.max_decode_len)?;
                Ok((-bleu, EvalPoint { step: 0, dev_loss: loss, dev_bleu: Some(bleu) }, bleu))
            }
        }
    };

    let (mut best_key, mut point, mut best_metric) = score(model)?;
    let mut best_step = 0usize;
    let mut best_snapshot = model.store().snapshot_trainable();
    let mut history = vec![point];
    log.write(serde_json::json!({
        "step": 0, "loss": point.dev_loss, "bleu": point.dev_bleu, "split": "dev",
    }))?;

    let costs: Vec<usize> = train.iter().map(|e| e.targets.len()).collect();
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut batch_cursor = 0usize;
    let mut step = 0usize;
    let mut since_best = 0usize;
    let mut final_train_loss = f64::NAN;

    'outer: while step < cfg.max_steps {
        if batch_cursor >= batches.len() {
            batches = make_batches(&costs, cfg.batch_size, &mut rng);
            batch_cursor = 0;
        }
        let batch = &batches[batch_cursor];
        batch_cursor += 1;
        step += 1;

        model.store().zero_grads();
        let batch_tokens: usize = batch.iter().map(|&i| train[i].targets.len()).sum();
        let mut batch_loss = 0.0f64;
        for &i in batch {
            let ex = &train[i];
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::train(&mut tape, &mut dropout_rng, cfg.dropout);
            let aug = cfg.spec_augment.as_ref().map(|a| (a, &mut aug_rng));
            let loss = example_loss(model, ex, &mut ctx, aug)?;
            let w = ex.targets.len() as f64 / batch_tokens as f64;
            batch_loss += loss.item().as_f64() * w;
            // scale before backward so accumulated grads sum to the
            // token-weighted batch loss gradient
            let scaled = tape.scale(&loss, T::from_f64(w))?;
            tape.backward(&scaled)?;
        }
        final_train_loss = batch_loss;

        let lr = lr_schedule(step, cfg.warmup_steps, cfg.eta_max);
        adam.step(model.store(), lr)?;
        log.write(serde_json::json!({
            "step": step, "lr": lr, "loss": batch_loss, "split": "train",
        }))?;

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let (key, mut p, metric) = score(model)?;
            p.step = step;
            history.push(p);
            log.write(serde_json::json!({
                "step": step, "loss": p.dev_loss, "bleu": p.dev_bleu, "split": "dev",
            }))?;
            if key < best_key {
                best_key = key;
                best_metric = metric;
                best_step = step;
                best_snapshot = model.store().snapshot_trainable();
                since_best = 0;
            } else {
                since_best += 1;
                if let Some(patience) = cfg.patience {
                    if since_best > patience {
                        break 'outer;
                    }
                }
            }
        }
    }

    model.store_mut().restore(&best_snapshot)?;
    log.flush()?;
    let _ = point; // first eval point lives on in history
    Ok(TrainReport {
        steps_run: step,
        best_step,
        best_metric,
        history,
        final_train_loss,
        optimizer_state_elements: adam.state_elements(),
    })
}

// ── grid selection ────────────────────────────────────────────────────────

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct GridResult {
    pub best_eta: f64,
    /// Selection key of the winner (dev loss, or negated dev BLEU).
    pub best_key: f64,
    /// (eta, key) for every grid point, in sweep order.
    pub sweep: Vec<(f64, f64)>,
}

/// Sweep learning rates smallest-first and keep the first strict winner:
/// ties resolve to the smallest eta. `run` returns a smaller-is-better key.
pub fn grid_select<F>(etas: &[f64], mut run: F) -> Result<GridResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    if etas.is_empty() {
        return Err(Error::InvalidConfig("empty learning-rate grid".into()));
    }
    let mut sorted = etas.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut sweep = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64)> = None;
    for &eta in &sorted {
        let key = run(eta)?;
        if !key.is_finite() {
            return Err(Error::NonFinite(format!("grid key for eta {eta}")));
        }
        sweep.push((eta, key));
        if best.map_or(true, |(_, k)| key < k) {
            best = Some((eta, key));
        }
    }
    let (best_eta, best_key) = best.expect("grid is non-empty");
    Ok(GridResult { best_eta, best_key, sweep })
}

// ──────────────────────────────────────────────────────────────────────────
