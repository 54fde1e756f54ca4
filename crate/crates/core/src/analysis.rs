//! Post-training analysis: the KC-relation attention matrix (how much a
//! query on one KC attends to history on another) and the k-sweep study.
//!
//! Axis convention: raw/normalized cell (i, j) is mass flowing from
//! pre-interaction (key) KC i to post-interaction (query) KC j — rows are
//! the history side.

use std::sync::Mutex;

use crate::attention::SparseMode;
use crate::data::{make_batches, Dataset, InteractionSequence};
use crate::error::{Error, Result};
use crate::matrix::{minmax_normalize, Matrix};
use crate::model::{forward, AttnRecord, ForwardOpts};
use crate::scalar::Scalar;
use crate::training::{train, Checkpoint, TrainConfig};

pub const DEFAULT_TOP_M: usize = 6;

/// Running accumulation of attention mass between KC pairs.
#[derive(Debug, Clone)]
pub struct KcAccum {
    raw: Matrix<f64>,
    n_queries: usize,
}

impl KcAccum {
    pub fn new(n_kcs: usize) -> Self {
        Self { raw: Matrix::zeros(n_kcs, n_kcs), n_queries: 0 }
    }

    pub fn add(&mut self, n_queries: usize, records: &[AttnRecord]) {
        self.n_queries += n_queries;
        for r in records {
            let v = self.raw.get(r.kc_key, r.kc_query) + r.weight;
            self.raw.set(r.kc_key, r.kc_query, v);
        }
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn total_mass(&self) -> f64 {
        self.raw.data().iter().sum()
    }

    /// Normalize and restrict to the `top_m` most frequent KCs of
    /// `sequences` (ties broken toward the lower id).
    pub fn finish(
        self,
        sequences: &[InteractionSequence],
        top_m: usize,
        mode_note: String,
    ) -> Result<KcRelationMatrix> {
        if top_m == 0 {
            return Err(Error::Usage("top_m must be positive".into()));
        }
        let n = self.raw.rows();
        let normalized = minmax_normalize(&self.raw);

        let mut counts = vec![0usize; n];
        for s in sequences {
            for it in &s.items {
                if it.kc < n {
                    counts[it.kc] += 1;
                }
            }
        }
        let mut by_freq: Vec<usize> = (0..n).collect();
        by_freq.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let top_ids: Vec<usize> = by_freq.into_iter().take(top_m.min(n)).collect();
        let m = top_ids.len();
        let mut top = Matrix::zeros(m, m);
        for (ti, &i) in top_ids.iter().enumerate() {
            for (tj, &j) in top_ids.iter().enumerate() {
                top.set(ti, tj, normalized.get(i, j));
            }
        }
        Ok(KcRelationMatrix {
            raw: self.raw,
            normalized,
            top_ids,
            top,
            n_queries: self.n_queries,
            mode_note,
        })
    }
}

/// Accumulated attention mass between KC pairs, with its min-max normalized
/// form and the top-m-frequency restriction used for plotting.
#[derive(Debug, Clone)]
pub struct KcRelationMatrix {
    /// (key KC, query KC) -> accumulated attention weight.
    pub raw: Matrix<f64>,
    /// Min-max normalized over all cells; all zeros when raw is constant.
    pub normalized: Matrix<f64>,
    /// Dense ids of the most frequent KCs, frequency order.
    pub top_ids: Vec<usize>,
    /// `normalized` restricted to `top_ids` x `top_ids`.
    pub top: Matrix<f64>,
    /// Valid query positions accumulated (each contributes total weight 1).
    pub n_queries: usize,
    /// Which sparse mode/threshold produced the weights.
    pub mode_note: String,
}

pub fn mode_note<T: Scalar>(cfg: &TrainConfig<T>) -> String {
    format!(
        "{} k={} renorm={}",
        cfg.sparse.mode.as_str(),
        cfg.sparse.k.to_f64(),
        cfg.sparse.renorm.as_str()
    )
}

/// One evaluation pass of the checkpointed model over `sequences`,
/// accumulating every query's final attention weights by KC pair.
pub fn accumulate_kc_attention<T: Scalar>(
    ck: &Checkpoint<T>,
    sequences: &[InteractionSequence],
    top_m: usize,
) -> Result<KcRelationMatrix> {
    if sequences.is_empty() {
        return Err(Error::Usage(
            "attention accumulation needs at least one sequence".into(),
        ));
    }
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
    }
    let mut acc = KcAccum::new(dims.n_kcs);
    let batches = make_batches(sequences, ck.cfg.batch_size, dims.l_max);
    for batch in &batches {
        let mut records = Vec::new();
        let f = forward(
            &ck.params,
            batch,
            &ck.cfg.sparse,
            ForwardOpts { records: Some(&mut records), ..ForwardOpts::eval() },
        )?;
        acc.add(f.n_loss, &records);
    }
    acc.finish(sequences, top_m, mode_note(&ck.cfg))
}

/// CSV of the normalized matrix: `#` metadata lines, then a header row and
/// leading column of original KC ids. Rows are pre-interaction KCs.
pub fn matrix_to_csv(m: &KcRelationMatrix, kc_ids: &[u64]) -> String {
    let n = m.normalized.rows();
    let id = |i: usize| {
        kc_ids
            .get(i)
            .map(|v| v.to_string())
            .unwrap_or_else(|| i.to_string())
    };
    let mut out = String::new();
    out.push_str(&format!("# mode = {}\n", m.mode_note));
    out.push_str(&format!("# queries = {}\n", m.n_queries));
    out.push_str(&format!("# raw_mass = {}\n", m.raw.data().iter().sum::<f64>()));
    out.push_str(&format!(
        "# top_kcs = {}\n",
        m.top_ids.iter().map(|&i| id(i)).collect::<Vec<_>>().join(" ")
    ));
    out.push_str("key_kc");
    for j in 0..n {
        out.push_str(&format!(",{}", id(j)));
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&id(i));
        for j in 0..n {
            out.push_str(&format!(",{}", m.normalized.get(i, j)));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint<T> {
    pub mode: SparseMode,
    pub k: T,
    pub seed: u64,
    pub valid_auc: f64,
    pub valid_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport<T> {
    pub points: Vec<SweepPoint<T>>,
}

impl<T: Scalar> SweepReport<T> {
    pub fn best_auc(&self) -> Option<&SweepPoint<T>> {
        self.points
            .iter()
            .filter(|p| p.valid_auc.is_finite())
            .max_by(|a, b| a.valid_auc.partial_cmp(&b.valid_auc).unwrap())
    }
}

pub fn default_soft_grid<T: Scalar>() -> Vec<T> {
    (1..=10).map(|i| T::from_f64(i as f64 / 10.0)).collect()
}

pub fn default_topk_grid<T: Scalar>() -> Vec<T> {
    (1..=10).map(|i| T::from_usize(i)).collect()
}

fn run_sweep_point<T: Scalar>(ds: &Dataset, cfg: &TrainConfig<T>) -> Result<SweepPoint<T>> {
    let r = train(ds, cfg, None)?;
    let valid_acc = r
        .log
        .iter()
        .find(|s| s.epoch == r.checkpoint.epoch)
        .map(|s| s.valid_acc)
        .unwrap_or(f64::NAN);
    Ok(SweepPoint {
        mode: cfg.sparse.mode,
        k: cfg.sparse.k,
        seed: cfg.seed,
        valid_auc: r.checkpoint.valid_auc,
        valid_acc,
    })
}

/// Train one model per grid value of k (mode fixed) and report each run's
/// best validation AUC/accuracy. Runs are independent; up to `threads` of
/// them execute in parallel. Report order follows the grid.
pub fn sweep_k<T: Scalar>(
    ds: &Dataset,
    base: &TrainConfig<T>,
    mode: SparseMode,
    grid: &[T],
    threads: usize,
) -> Result<SweepReport<T>> {
    if grid.is_empty() {
        return Err(Error::Usage("sweep grid is empty".into()));
    }
    let workers = threads.max(1).min(grid.len());
    let slots: Mutex<Vec<Option<Result<SweepPoint<T>>>>> =
        Mutex::new((0..grid.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for w in 0..workers {
            let slots = &slots;
            s.spawn(move || {
                let mut i = w;
                while i < grid.len() {
                    let mut cfg = *base;
                    cfg.sparse.mode = mode;
                    cfg.sparse.k = grid[i];
                    let point = run_sweep_point(ds, &cfg);
                    slots.lock().unwrap()[i] = Some(point);
                    i += workers;
                }
            });
        }
    });
    let mut points = Vec::with_capacity(grid.len());
    for slot in slots.into_inner().unwrap() {
        points.push(slot.expect("every grid slot is assigned a worker")?);
    }
    Ok(SweepReport { points })
}

pub fn sweep_to_csv<T: Scalar>(r: &SweepReport<T>) -> String {
    let mut out = String::from("mode,k,seed,valid_auc,valid_acc\n");
    for p in &r.points {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            p.mode.as_str(),
            p.k.to_f64(),
            p.seed,
            p.valid_auc,
            p.valid_acc
        ));
    }
    out
}
