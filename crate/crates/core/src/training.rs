//! End-to-end optimization: Adam over the flattened parameter vector,
//! mini-batch loop with per-seed deterministic shuffling, early stopping on
//! validation AUC, and best-checkpoint retention.
//!
//! All stochasticity in a run (init, shuffling, dropout) flows from one
//! ChaCha8 generator seeded by `TrainConfig::seed`; the split derives its
//! own generator from the same seed, so a seed pins the entire run.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::SparseConfig;
use crate::data::{make_batches, split, Batch, Dataset, InteractionSequence};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auc, ScoredLabels};
use crate::model::{
    forward, AttnRecord, ForwardOpts, ModelDims, ModelFlags, ModelParams,
};
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig<T> {
    pub d: usize,
    pub batch_size: usize,
    pub lr: T,
    pub epochs: usize,
    /// Epochs without a validation-AUC improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub sparse: SparseConfig<T>,
    pub dropout: T,
    pub flags: ModelFlags,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            d: 64,
            batch_size: 64,
            lr: T::from_f64(1e-3),
            epochs: 100,
            patience: 10,
            seed: 0,
            sparse: SparseConfig {
                mode: crate::attention::SparseMode::Soft,
                k: T::from_f64(0.7),
                renorm: crate::attention::Renorm::Resoftmax,
            },
            dropout: T::zero(),
            flags: ModelFlags::default(),
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(Error::Usage(
                "d, batch_size, epochs, and patience must be positive".into(),
            ));
        }
        if self.patience > self.epochs {
            return Err(Error::Usage(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.epochs
            )));
        }
        if !(self.lr > T::zero()) || !self.lr.is_finite() {
            return Err(Error::Usage(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.dropout >= T::zero() && self.dropout < T::one()) {
            return Err(Error::Usage(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        if self.flags.n_heads == 0 || self.d % self.flags.n_heads != 0 {
            return Err(Error::Usage(format!(
                "n_heads {} must divide d {}",
                self.flags.n_heads, self.d
            )));
        }
        self.sparse.validate()
    }
}

/// One row of the training log. `seconds` is wall-clock and excluded from
/// determinism comparisons; `clip_events` counts batches whose gradient was
/// rescaled.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when the validation split is empty or single-class.
    pub valid_auc: f64,
    pub valid_acc: f64,
    pub seconds: f64,
    pub clip_events: usize,
}

pub fn log_to_csv(log: &[EpochStat]) -> String {
    let mut out = String::from("epoch,train_loss,valid_auc,valid_acc,seconds\n");
    for s in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.3}\n",
            s.epoch, s.train_loss, s.valid_auc, s.valid_acc, s.seconds
        ));
    }
    out
}

/// Serializable ChaCha8 position: seed, stream, and word offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub cfg: TrainConfig<T>,
    pub epoch: usize,
    /// Validation AUC at `epoch`; NaN when it was undefined.
    pub valid_auc: f64,
    pub rng: RngState,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub adam_t: u64,
}

pub struct TrainResult<T> {
    pub checkpoint: Checkpoint<T>,
    pub log: Vec<EpochStat>,
    pub clip_events_total: usize,
}

/// Flat Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub t: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T, n: usize) -> Self {
        Self { lr, t: 0, m: vec![T::zero(); n], v: vec![T::zero(); n] }
    }

    pub fn step(&mut self, theta: &mut [T], grad: &[T]) {
        assert_eq!(theta.len(), self.m.len());
        assert_eq!(theta.len(), grad.len());
        self.t += 1;
        let b1 = T::from_f64(ADAM_BETA1);
        let b2 = T::from_f64(ADAM_BETA2);
        let eps = T::from_f64(ADAM_EPS);
        let corr1 = T::one() - b1.powi(self.t as i32);
        let corr2 = T::one() - b2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let m_hat = self.m[i] / corr1;
            let v_hat = self.v[i] / corr2;
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Rescale `grad` in place so its global L2 norm is at most `max_norm`.
/// Returns true when clipping activated.
pub fn clip_global_norm<T: Scalar>(grad: &mut [T], max_norm: T) -> bool {
    let norm = grad.iter().map(|&g| g * g).sum::<T>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
        true
    } else {
        false
    }
}

/// Loss, loss-position count, and flat gradient for one batch; errors name
/// the offending tensor when a gradient goes non-finite.
fn batch_grad<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch,
    cfg: &TrainConfig<T>,
    rng: &mut ChaCha8Rng,
    step: u64,
    records: Option<&mut Vec<AttnRecord>>,
) -> Result<(T, usize, Vec<T>)> {
    let f = forward(
        params,
        batch,
        &cfg.sparse,
        ForwardOpts {
            train: true,
            dropout: cfg.dropout,
            rng: Some(rng),
            fixed_selection: None,
            capture_selection: None,
            records,
        },
    )?;
    let grads = f.tape.backward(f.loss);
    let mut flat = Vec::with_capacity(params.n_params());
    for (leaf, (name, m)) in f.param_leaves.iter().zip(params.tensors()) {
        let g = grads.of(*leaf, m.rows(), m.cols());
        if !g.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient in tensor {name} at step {step}"
            )));
        }
        flat.extend_from_slice(g.data());
    }
    Ok((f.loss_value(), f.n_loss, flat))
}

/// Predictions and labels over all loss positions of `batches`.
fn eval_scores<T: Scalar>(
    params: &ModelParams<T>,
    batches: &[Batch],
    scfg: &SparseConfig<T>,
) -> Result<ScoredLabels> {
    let mut sl = ScoredLabels::default();
    for batch in batches {
        let f = forward(params, batch, scfg, ForwardOpts::eval())?;
        let preds = f.tape.value(f.preds);
        for (i, &(b, p)) in f.row_index.iter().enumerate() {
            if f.loss_mask[i] {
                let label = batch.responses[b * batch.cols + p] as u8;
                sl.push(preds.get(i, 0).to_f64(), label);
            }
        }
    }
    Ok(sl)
}

/// Optimize on the train split of `ds` (split by `cfg.seed` and the
/// dataset's stored fractions), early-stop on validation AUC, and return
/// the best-validation checkpoint with the full epoch log.
///
/// `attn_hook`, when given, receives each training batch's attention
/// records as `(epoch, query_count, records)`.
pub fn train<T: Scalar>(
    ds: &Dataset,
    cfg: &TrainConfig<T>,
    mut attn_hook: Option<&mut dyn FnMut(usize, usize, &[AttnRecord])>,
) -> Result<TrainResult<T>> {
    cfg.validate()?;
    if ds.sequences.is_empty() {
        return Err(Error::Usage("dataset is empty".into()));
    }
    let parts = split(ds, cfg.seed, ds.meta.fractions)?;
    let predictable: usize =
        parts.train.iter().map(|s| s.items.len().saturating_sub(1)).sum();
    if predictable == 0 {
        return Err(Error::Usage(
            "training split has no valid prediction positions".into(),
        ));
    }

    let dims = ModelDims {
        d: cfg.d,
        n_kcs: ds.meta.n_kcs,
        n_questions: ds.meta.n_questions,
        l_max: ds.meta.l_max,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::<T>::init(dims, cfg.flags, &mut rng)?;
    let mut adam = Adam::new(cfg.lr, params.n_params());
    let valid_batches = make_batches(&parts.valid, cfg.batch_size, ds.meta.l_max);

    let mut log: Vec<EpochStat> = Vec::new();
    let mut clip_events_total = 0usize;
    let mut best: Option<Checkpoint<T>> = None;
    let mut best_auc = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut step = 0u64;
    let mut records_buf: Vec<AttnRecord> = Vec::new();
    let clip = T::from_f64(CLIP_NORM);

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<&InteractionSequence> = parts.train.iter().collect();
        order.shuffle(&mut rng);
        let batches = make_batches(&order, cfg.batch_size, ds.meta.l_max);

        let mut loss_sum = 0.0f64;
        let mut loss_n = 0usize;
        let mut clip_events = 0usize;
        for batch in &batches {
            step += 1;
            let rec_opt = if attn_hook.is_some() {
                records_buf.clear();
                Some(&mut records_buf)
            } else {
                None
            };
            let (loss, n, mut grad) =
                batch_grad(&params, batch, cfg, &mut rng, step, rec_opt)?;
            if let Some(hook) = attn_hook.as_deref_mut() {
                hook(epoch, n, &records_buf);
            }
            loss_sum += loss.to_f64() * n as f64;
            loss_n += n;
            if clip_global_norm(&mut grad, clip) {
                clip_events += 1;
            }
            let mut theta = params.to_flat();
            adam.step(&mut theta, &grad);
            params.set_from_flat(&theta);
        }
        clip_events_total += clip_events;

        let (valid_auc, valid_acc) = if valid_batches.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let sl = eval_scores(&params, &valid_batches, &cfg.sparse)?;
            (
                auc(&sl).unwrap_or(f64::NAN),
                accuracy(&sl, 0.5).unwrap_or(f64::NAN),
            )
        };

        log.push(EpochStat {
            epoch,
            train_loss: loss_sum / loss_n.max(1) as f64,
            valid_auc,
            valid_acc,
            seconds: t0.elapsed().as_secs_f64(),
            clip_events,
        });

        if valid_auc.is_finite() && valid_auc > best_auc {
            best_auc = valid_auc;
            stale = 0;
            best = Some(Checkpoint {
                params: params.clone(),
                cfg: *cfg,
                epoch,
                valid_auc,
                rng: RngState::capture(&rng),
                adam_m: adam.m.clone(),
                adam_v: adam.v.clone(),
                adam_t: adam.t,
            });
        } else if valid_auc.is_finite() {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
        // undefined AUC: no basis for early stopping; keep going
    }

    let checkpoint = best.unwrap_or_else(|| Checkpoint {
        params,
        cfg: *cfg,
        epoch: log.last().map(|s| s.epoch).unwrap_or(0),
        valid_auc: f64::NAN,
        rng: RngState::capture(&rng),
        adam_m: adam.m,
        adam_v: adam.v,
        adam_t: adam.t,
    });
    Ok(TrainResult { checkpoint, log, clip_events_total })
}

/// One scored prediction, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredRecord {
    pub student_id: String,
    /// Position within the (possibly chunked) sequence, 0-based.
    pub position: usize,
    pub question: usize,
    pub kc: usize,
    pub label: u8,
    pub pred: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// None when labels are single-class.
    pub auc: Option<f64>,
    /// None when there are no scored positions.
    pub accuracy: Option<f64>,
    pub predictions: Vec<PredRecord>,
}

/// Score every predictable position (the second interaction onward) of
/// `sequences` under the checkpointed model.
pub fn evaluate<T: Scalar>(
    ck: &Checkpoint<T>,
    sequences: &[InteractionSequence],
) -> Result<EvalReport> {
    let dims = ck.params.dims;
    for s in sequences {
        for it in &s.items {
            if it.kc >= dims.n_kcs || it.question >= dims.n_questions {
                return Err(Error::Data(format!(
                    "sequence {} has ids (q={}, kc={}) outside checkpoint tables (Q={}, n={})",
                    s.student_id, it.question, it.kc, dims.n_questions, dims.n_kcs
                )));
            }
        }
        if s.items.len() > dims.l_max {
            return Err(Error::Data(format!(
                "sequence {} length {} exceeds checkpoint l_max {}",
                s.student_id,
                s.items.len(),
                dims.l_max
            )));
        }
    }
    let batches = make_batches(sequences, ck.cfg.batch_size, dims.l_max);
    let mut sl = ScoredLabels::default();
    let mut predictions = Vec::new();
    for batch in &batches {
        let f = forward(&ck.params, batch, &ck.cfg.sparse, ForwardOpts::eval())?;
        let preds = f.tape.value(f.preds);
        for (i, &(b, p)) in f.row_index.iter().enumerate() {
            if !f.loss_mask[i] {
                continue;
            }
            let at = b * batch.cols + p;
            let label = batch.responses[at] as u8;
            let pred = preds.get(i, 0).to_f64();
            sl.push(pred, label);
            predictions.push(PredRecord {
                student_id: batch.student_ids[b].clone(),
                position: p,
                question: batch.questions[at] as usize,
                kc: batch.kcs[at] as usize,
                label,
                pred,
            });
        }
    }
    Ok(EvalReport {
        auc: auc(&sl),
        accuracy: accuracy(&sl, 0.5),
        predictions,
    })
}
