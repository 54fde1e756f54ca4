//! The trainable model: embeddings -> causal sparse attention -> MLP head,
//! assembled on a gradient tape per mini-batch.
//!
//! The batched tape path must agree with the pure reference path in
//! `attention`/`head`; tests pin that equivalence. Sparse selection is
//! computed from the forward score values and then enters the tape as a
//! constant mask (straight-through), so gradients flow only through
//! selected entries.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{select_row, Renorm, SparseConfig};
use crate::data::Batch;
use crate::embeddings::{sample_normal, EmbeddingTables, INIT_STD};
use crate::error::{Error, Result};
use crate::head::{HeadParams, PRED_CLAMP};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d: usize,
    pub n_kcs: usize,
    pub n_questions: usize,
    /// Longest sequence the model accepts (sizes the positional table).
    pub l_max: usize,
}

/// Structural knobs. All default off/1 and are excluded from acceptance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelFlags {
    /// Learned absolute positional embeddings added to x_t.
    pub positions: bool,
    /// Learned query/key/value projection matrices.
    pub projections: bool,
    pub n_heads: usize,
}

impl Default for ModelFlags {
    fn default() -> Self {
        Self { positions: false, projections: false, n_heads: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub dims: ModelDims,
    pub flags: ModelFlags,
    pub emb: EmbeddingTables<T>,
    pub head: HeadParams<T>,
    pub pos_table: Option<Matrix<T>>,
    pub proj_q: Option<Matrix<T>>,
    pub proj_k: Option<Matrix<T>>,
    pub proj_v: Option<Matrix<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Draw order is fixed (embeddings, head, extras) so a seed pins the
    /// whole initialization.
    pub fn init(dims: ModelDims, flags: ModelFlags, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.d == 0 || dims.n_kcs == 0 || dims.n_questions == 0 || dims.l_max == 0 {
            return Err(Error::Usage("model dimensions must be positive".into()));
        }
        if flags.n_heads == 0 || dims.d % flags.n_heads != 0 {
            return Err(Error::Usage(format!(
                "n_heads {} must divide d {}",
                flags.n_heads, dims.d
            )));
        }
        let emb = EmbeddingTables::init(dims.d, dims.n_kcs, dims.n_questions, rng);
        let head = HeadParams::init(dims.d, rng);
        let pos_table =
            flags.positions.then(|| sample_normal(rng, dims.l_max, dims.d, INIT_STD));
        let (proj_q, proj_k, proj_v) = if flags.projections {
            (
                Some(sample_normal(rng, dims.d, dims.d, INIT_STD)),
                Some(sample_normal(rng, dims.d, dims.d, INIT_STD)),
                Some(sample_normal(rng, dims.d, dims.d, INIT_STD)),
            )
        } else {
            (None, None, None)
        };
        Ok(Self { dims, flags, emb, head, pos_table, proj_q, proj_k, proj_v })
    }

    /// Named tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix<T>)> {
        let mut v = vec![
            ("kc_table", &self.emb.kc_table),
            ("resp_table", &self.emb.resp_table),
            ("q_discrim", &self.emb.q_discrim),
            ("kc_var", &self.emb.kc_var),
            ("head_w1", &self.head.w1),
            ("head_w2", &self.head.w2),
            ("head_w", &self.head.w),
            ("head_b1", &self.head.b1),
            ("head_b2", &self.head.b2),
            ("head_b", &self.head.b),
        ];
        if let Some(p) = &self.pos_table {
            v.push(("pos_table", p));
        }
        if let Some(p) = &self.proj_q {
            v.push(("proj_q", p));
        }
        if let Some(p) = &self.proj_k {
            v.push(("proj_k", p));
        }
        if let Some(p) = &self.proj_v {
            v.push(("proj_v", p));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix<T>)> {
        let mut v = vec![
            ("kc_table", &mut self.emb.kc_table),
            ("resp_table", &mut self.emb.resp_table),
            ("q_discrim", &mut self.emb.q_discrim),
            ("kc_var", &mut self.emb.kc_var),
            ("head_w1", &mut self.head.w1),
            ("head_w2", &mut self.head.w2),
            ("head_w", &mut self.head.w),
            ("head_b1", &mut self.head.b1),
            ("head_b2", &mut self.head.b2),
            ("head_b", &mut self.head.b),
        ];
        if let Some(p) = &mut self.pos_table {
            v.push(("pos_table", p));
        }
        if let Some(p) = &mut self.proj_q {
            v.push(("proj_q", p));
        }
        if let Some(p) = &mut self.proj_k {
            v.push(("proj_k", p));
        }
        if let Some(p) = &mut self.proj_v {
            v.push(("proj_v", p));
        }
        v
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_params());
        for (_, m) in self.tensors() {
            out.extend_from_slice(m.data());
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[T]) {
        let mut at = 0;
        for (_, m) in self.tensors_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        assert_eq!(at, flat.len());
    }
}

/// Per-query attention weight attributed to a (history KC, query KC) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnRecord {
    pub kc_key: usize,
    pub kc_query: usize,
    pub weight: f64,
}

/// Selection masks captured from one forward pass, indexed
/// [batch_row * n_heads + head], each a row-major [L x L] mask.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectionStore {
    pub masks: Vec<Vec<bool>>,
}

pub struct ForwardOpts<'a, T> {
    pub train: bool,
    pub dropout: T,
    pub rng: Option<&'a mut ChaCha8Rng>,
    /// Reuse selection masks from an earlier pass (finite-difference checks
    /// hold the straight-through selection constant this way).
    pub fixed_selection: Option<&'a SelectionStore>,
    pub capture_selection: Option<&'a mut SelectionStore>,
    pub records: Option<&'a mut Vec<AttnRecord>>,
}

impl<T: Scalar> ForwardOpts<'_, T> {
    pub fn eval() -> Self {
        ForwardOpts {
            train: false,
            dropout: T::zero(),
            rng: None,
            fixed_selection: None,
            capture_selection: None,
            records: None,
        }
    }
}

pub struct Forward<T> {
    pub tape: Tape<T>,
    /// Scalar mean BCE over loss positions.
    pub loss: NodeId,
    /// [N x 1] probabilities (pre-clamp), N = batch rows * padded length.
    pub preds: NodeId,
    /// Leaf ids aligned with `ModelParams::tensors()`.
    pub param_leaves: Vec<NodeId>,
    /// (batch_row, position) per prediction row.
    pub row_index: Vec<(usize, usize)>,
    /// True where a prediction participates in loss/metrics: a valid
    /// position with at least one history item.
    pub loss_mask: Vec<bool>,
    pub n_loss: usize,
}

impl<T: Scalar> Forward<T> {
    pub fn loss_value(&self) -> T {
        self.tape.value(self.loss).get(0, 0)
    }
}

pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch,
    scfg: &SparseConfig<T>,
    mut opts: ForwardOpts<'_, T>,
) -> Result<Forward<T>> {
    scfg.validate()?;
    let d = params.dims.d;
    let n_heads = params.flags.n_heads;
    let dh = d / n_heads;
    let (b_rows, l) = (batch.rows, batch.cols);
    if l > params.dims.l_max {
        return Err(Error::Data(format!(
            "batch length {l} exceeds model l_max {}",
            params.dims.l_max
        )));
    }
    for (i, (&q, &c)) in batch.questions.iter().zip(&batch.kcs).enumerate() {
        if batch.valid[i] && (q as usize >= params.dims.n_questions || c as usize >= params.dims.n_kcs)
        {
            return Err(Error::Data(format!(
                "batch ids (q={q}, kc={c}) exceed model tables (Q={}, n={})",
                params.dims.n_questions, params.dims.n_kcs
            )));
        }
    }
    if let Some(store) = &mut opts.capture_selection {
        store.masks.clear();
    }

    let mut tape = Tape::new();
    let tensors = params.tensors();
    let param_leaves: Vec<NodeId> =
        tensors.iter().map(|(_, m)| tape.leaf((*m).clone())).collect();
    let leaf = |name: &str| -> NodeId {
        param_leaves[tensors.iter().position(|(n, _)| *n == name).unwrap()]
    };

    let zt = tape.transpose(leaf("kc_table")); // [n x d]
    let rt = tape.transpose(leaf("resp_table")); // [2 x d]
    let proj_t = if params.flags.projections {
        Some((
            tape.transpose(leaf("proj_q")),
            tape.transpose(leaf("proj_k")),
            tape.transpose(leaf("proj_v")),
        ))
    } else {
        None
    };

    let sel_index = |b: usize, h: usize| b * n_heads + h;

    let mut hs_parts = Vec::with_capacity(b_rows);
    let mut xs_parts = Vec::with_capacity(b_rows);
    let mut row_index = Vec::with_capacity(b_rows * l);
    let mut loss_mask = Vec::with_capacity(b_rows * l);

    for b in 0..b_rows {
        let idx = |c: usize| b * l + c;
        let kc_ids: Vec<usize> =
            (0..l).map(|c| batch.kcs[idx(c)].max(0) as usize).collect();
        let resp_ids: Vec<usize> =
            (0..l).map(|c| batch.responses[idx(c)].max(0) as usize).collect();
        let q_ids: Vec<usize> =
            (0..l).map(|c| batch.questions[idx(c)].max(0) as usize).collect();
        let valid: Vec<bool> = (0..l).map(|c| batch.valid[idx(c)]).collect();

        let zs = tape.gather_rows(zt, kc_ids.clone());
        let rs = tape.gather_rows(rt, resp_ids);
        let ys = tape.add(zs, rs);
        let ms = tape.gather_rows(leaf("q_discrim"), q_ids);
        let vs = tape.gather_rows(leaf("kc_var"), kc_ids.clone());
        let mv = tape.mul(ms, vs);
        let mut xs = tape.add(mv, zs);
        if params.flags.positions {
            let ps = tape.gather_rows(leaf("pos_table"), (0..l).collect());
            xs = tape.add(xs, ps);
        }
        let (q_in, k_in, v_in) = match proj_t {
            Some((pq, pk, pv)) => {
                (tape.matmul(xs, pq), tape.matmul(xs, pk), tape.matmul(ys, pv))
            }
            None => (xs, xs, ys),
        };

        // causal mask: query p attends key j iff both valid and j < p
        let mut causal = vec![false; l * l];
        for p in 0..l {
            if !valid[p] {
                continue;
            }
            for j in 0..p {
                causal[p * l + j] = valid[j];
            }
        }

        let mut head_outs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (qh, kh, vh) = if n_heads == 1 {
                (q_in, k_in, v_in)
            } else {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                (
                    tape.slice_cols(q_in, lo, hi),
                    tape.slice_cols(k_in, lo, hi),
                    tape.slice_cols(v_in, lo, hi),
                )
            };
            let kt = tape.transpose(kh);
            let raw = tape.matmul(qh, kt);
            let raw = tape.scale(raw, T::one() / T::from_usize(dh).sqrt());
            let scores = tape.masked_softmax_rows(raw, causal.clone());

            let sel = match opts.fixed_selection {
                Some(store) => store.masks[sel_index(b, h)].clone(),
                None => {
                    let sv = tape.value(scores);
                    let mut sel = vec![false; l * l];
                    for p in 0..l {
                        let row_mask = &causal[p * l..(p + 1) * l];
                        if !row_mask.iter().any(|&m| m) {
                            continue;
                        }
                        let cols: Vec<usize> =
                            (0..l).filter(|&j| row_mask[j]).collect();
                        let compact: Vec<T> =
                            cols.iter().map(|&j| sv.get(p, j)).collect();
                        let chosen = select_row(&compact, scfg);
                        for (ci, &j) in cols.iter().enumerate() {
                            sel[p * l + j] = chosen[ci];
                        }
                    }
                    sel
                }
            };
            if let Some(store) = &mut opts.capture_selection {
                store.masks.push(sel.clone());
            }

            let weights = match scfg.renorm {
                Renorm::Resoftmax => tape.masked_softmax_rows(scores, sel),
                Renorm::Sumnorm => tape.masked_normalize_rows(scores, sel),
            };
            if let Some(records) = &mut opts.records {
                let wv = tape.value(weights);
                let head_scale = 1.0 / n_heads as f64;
                for p in 0..l {
                    for j in 0..p {
                        let w = wv.get(p, j);
                        if w != T::zero() {
                            records.push(AttnRecord {
                                kc_key: kc_ids[j],
                                kc_query: kc_ids[p],
                                weight: w.to_f64() * head_scale,
                            });
                        }
                    }
                }
            }
            head_outs.push(tape.matmul(weights, vh));
        }
        let mut hs = if n_heads == 1 {
            head_outs[0]
        } else {
            let mut acc = head_outs[0];
            for &part in &head_outs[1..] {
                acc = tape.concat_cols(acc, part);
            }
            acc
        };
        if opts.train && opts.dropout > T::zero() {
            hs = apply_dropout(&mut tape, hs, opts.dropout, opts.rng.as_deref_mut())?;
        }

        hs_parts.push(hs);
        xs_parts.push(xs);
        for p in 0..l {
            row_index.push((b, p));
            // position 0 has no history; padded rows never count
            loss_mask.push(p >= 1 && valid[p]);
        }
    }

    let h_all = tape.concat_rows(&hs_parts);
    let x_all = tape.concat_rows(&xs_parts);
    let cat = tape.concat_cols(h_all, x_all); // [N x 2d]

    let w1t = tape.transpose(leaf("head_w1")); // [2d x d]
    let b1t = tape.transpose(leaf("head_b1")); // [1 x d]
    let z1 = tape.matmul(cat, w1t);
    let z1 = tape.add_row_broadcast(z1, b1t);
    let mut a1 = tape.relu(z1);
    if opts.train && opts.dropout > T::zero() {
        a1 = apply_dropout(&mut tape, a1, opts.dropout, opts.rng.as_deref_mut())?;
    }
    let w2t = tape.transpose(leaf("head_w2"));
    let b2t = tape.transpose(leaf("head_b2"));
    let z2 = tape.matmul(a1, w2t);
    let z2 = tape.add_row_broadcast(z2, b2t);
    let mut a2 = tape.relu(z2);
    if opts.train && opts.dropout > T::zero() {
        a2 = apply_dropout(&mut tape, a2, opts.dropout, opts.rng.as_deref_mut())?;
    }
    let logits = tape.matmul(a2, leaf("head_w")); // [N x 1]
    let logits = tape.add_row_broadcast(logits, leaf("head_b"));
    let preds = tape.sigmoid(logits);

    let n = b_rows * l;
    let n_loss = loss_mask.iter().filter(|&&m| m).count();
    if n_loss == 0 {
        return Err(Error::Usage("batch has no valid prediction positions".into()));
    }
    let labels_m = {
        let data: Vec<T> = (0..n)
            .map(|i| {
                let (b, p) = row_index[i];
                if batch.responses[b * l + p] == 1 {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect();
        Matrix::new(n, 1, data).unwrap()
    };
    let inv_labels_m = labels_m.map(|v| T::one() - v);
    let lab = tape.constant(labels_m);
    let inv_lab = tape.constant(inv_labels_m);

    let lo = T::from_f64(PRED_CLAMP);
    let clamped = tape.clamp(preds, lo, T::one() - lo);
    let one = tape.constant(Matrix::filled(n, 1, T::one()));
    let inv_pred = tape.sub(one, clamped);
    let logp = tape.log(clamped);
    let log_inv = tape.log(inv_pred);
    let pos_term = tape.mul(lab, logp);
    let neg_term = tape.mul(inv_lab, log_inv);
    let term = tape.add(pos_term, neg_term);
    let mean = tape.masked_mean(term, loss_mask.clone())?;
    let loss = tape.scale(mean, -T::one());

    Ok(Forward { tape, loss, preds, param_leaves, row_index, loss_mask, n_loss })
}

fn apply_dropout<T: Scalar>(
    tape: &mut Tape<T>,
    node: NodeId,
    rate: T,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    if rate >= T::one() {
        return Err(Error::Usage(format!("dropout rate must be < 1, got {rate}")));
    }
    let rng = rng.ok_or_else(|| {
        Error::Usage("dropout > 0 requires an RNG in training mode".into())
    })?;
    let (r, c) = {
        let v = tape.value(node);
        (v.rows(), v.cols())
    };
    let keep = T::one() - rate;
    let scale = T::one() / keep;
    let data: Vec<T> = (0..r * c)
        .map(|_| {
            if rng.gen_bool(keep.to_f64()) {
                scale
            } else {
                T::zero()
            }
        })
        .collect();
    let mask = tape.constant(Matrix::new(r, c, data).unwrap());
    Ok(tape.mul(node, mask))
}

/// Convenience for tests and gradient checks: loss over one batch with the
/// selection fixed by the caller.
pub fn loss_with_fixed_selection<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch,
    scfg: &SparseConfig<T>,
    selection: &SelectionStore,
) -> Result<T> {
    let f = forward(
        params,
        batch,
        scfg,
        ForwardOpts {
            fixed_selection: Some(selection),
            ..ForwardOpts::eval()
        },
    )?;
    Ok(f.loss_value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{sparse_attention_row, SparseMode};
    use crate::data::{gen_synthetic, make_batches, L_MAX};
    use crate::head::predict;
    use rand::SeedableRng;

    fn small_setup(
        seed: u64,
        flags: ModelFlags,
    ) -> (ModelParams<f64>, Batch, SparseConfig<f64>) {
        let ds = gen_synthetic(4, 3, 6, seed).unwrap();
        let batch = make_batches(&ds.sequences, 4, L_MAX).remove(0);
        let dims = ModelDims { d: 8, n_kcs: 3, n_questions: 6, l_max: L_MAX };
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let params = ModelParams::init(dims, flags, &mut rng).unwrap();
        (params, batch, SparseConfig::default())
    }

    #[test]
    fn batched_forward_matches_pure_reference_path() {
        let (params, batch, scfg) = small_setup(3, ModelFlags::default());
        let f = forward(&params, &batch, &scfg, ForwardOpts::eval()).unwrap();
        let preds = f.tape.value(f.preds);

        let l = batch.cols;
        for b in 0..batch.rows {
            let len =
                (0..l).take_while(|&c| batch.valid[b * l + c]).count();
            // rebuild x/y for this sequence with the pure lookups
            let mut x = Matrix::zeros(len, 8);
            let mut y = Matrix::zeros(len, 8);
            for c in 0..len {
                let q = batch.questions[b * l + c] as usize;
                let kc = batch.kcs[b * l + c] as usize;
                let r = batch.responses[b * l + c] as u8;
                x.row_mut(c)
                    .copy_from_slice(&params.emb.enhance_question(q, kc).unwrap());
                y.row_mut(c)
                    .copy_from_slice(&params.emb.embed_interaction(kc, r).unwrap());
            }
            for p in 1..len {
                let mut xh = Matrix::zeros(p, 8);
                let mut yh = Matrix::zeros(p, 8);
                for j in 0..p {
                    xh.row_mut(j).copy_from_slice(x.row(j));
                    yh.row_mut(j).copy_from_slice(y.row(j));
                }
                let (h, _) =
                    sparse_attention_row(x.row(p), &xh, &yh, &scfg).unwrap();
                let expect = predict(&h, x.row(p), &params.head);
                let got = preds.get(b * l + p, 0);
                assert!(
                    (expect - got).abs() < 1e-12,
                    "seq {b} pos {p}: pure {expect} vs tape {got}"
                );
            }
        }
    }

    #[test]
    fn loss_positions_exclude_first_and_padding() {
        let (params, batch, scfg) = small_setup(5, ModelFlags::default());
        let f = forward(&params, &batch, &scfg, ForwardOpts::eval()).unwrap();
        let l = batch.cols;
        for (i, &(b, p)) in f.row_index.iter().enumerate() {
            let valid = batch.valid[b * l + p];
            assert_eq!(f.loss_mask[i], valid && p >= 1);
        }
        let expect: usize = (0..batch.rows)
            .map(|b| (0..l).filter(|&c| batch.valid[b * l + c]).count() - 1)
            .sum();
        assert_eq!(f.n_loss, expect);
    }

    #[test]
    fn selection_capture_and_replay_reproduce_the_loss() {
        let (params, batch, scfg) = small_setup(9, ModelFlags::default());
        let mut store = SelectionStore::default();
        let f = forward(
            &params,
            &batch,
            &scfg,
            ForwardOpts { capture_selection: Some(&mut store), ..ForwardOpts::eval() },
        )
        .unwrap();
        assert_eq!(store.masks.len(), batch.rows);
        let replay = loss_with_fixed_selection(&params, &batch, &scfg, &store).unwrap();
        assert_eq!(f.loss_value().to_bits(), replay.to_bits());
    }

    #[test]
    fn later_items_never_change_earlier_predictions() {
        let (params, mut batch, scfg) = small_setup(11, ModelFlags::default());
        let f1 = forward(&params, &batch, &scfg, ForwardOpts::eval()).unwrap();
        let before = f1.tape.value(f1.preds).clone();

        // corrupt the tail of sequence 0 (keep ids in range)
        let l = batch.cols;
        let len0 = (0..l).take_while(|&c| batch.valid[c]).count();
        let cut = len0 / 2;
        for c in cut..len0 {
            batch.questions[c] = (batch.questions[c] + 1) % 6;
            batch.kcs[c] = (batch.kcs[c] + 1) % 3;
            batch.responses[c] = 1 - batch.responses[c];
        }
        let f2 = forward(&params, &batch, &scfg, ForwardOpts::eval()).unwrap();
        let after = f2.tape.value(f2.preds);
        for p in 0..cut {
            assert_eq!(
                before.get(p, 0).to_bits(),
                after.get(p, 0).to_bits(),
                "prediction at {p} changed by a future edit"
            );
        }
        assert!(
            (cut..len0).any(|p| before.get(p, 0) != after.get(p, 0)),
            "edits should affect some later prediction"
        );
    }

    #[test]
    fn multi_head_and_extras_forward_and_differentiate() {
        for flags in [
            ModelFlags { n_heads: 2, ..ModelFlags::default() },
            ModelFlags { positions: true, ..ModelFlags::default() },
            ModelFlags { projections: true, ..ModelFlags::default() },
        ] {
            let (params, batch, scfg) = small_setup(13, flags);
            let f = forward(&params, &batch, &scfg, ForwardOpts::eval()).unwrap();
            assert!(f.loss_value().is_finite());
            let grads = f.tape.backward(f.loss);
            for (leaf, (name, m)) in f.param_leaves.iter().zip(params.tensors()) {
                let g = grads.of(*leaf, m.rows(), m.cols());
                assert!(g.all_finite(), "non-finite grad in {name}");
            }
        }
    }

    #[test]
    fn dropout_needs_rng_and_changes_predictions() {
        let (params, batch, scfg) = small_setup(17, ModelFlags::default());
        let bad = forward(
            &params,
            &batch,
            &scfg,
            ForwardOpts { train: true, dropout: 0.5, ..ForwardOpts::eval() },
        );
        assert!(bad.is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f1 = forward(
            &params,
            &batch,
            &scfg,
            ForwardOpts {
                train: true,
                dropout: 0.5,
                rng: Some(&mut rng),
                ..ForwardOpts::eval()
            },
        )
        .unwrap();
        let f2 = forward(&params, &batch, &scfg, ForwardOpts::eval()).unwrap();
        assert_ne!(
            f1.loss_value().to_bits(),
            f2.loss_value().to_bits(),
            "dropout should perturb the loss"
        );
    }

    #[test]
    fn record_weights_sum_to_valid_query_count() {
        for (mode, k) in [
            (SparseMode::Soft, 0.6),
            (SparseMode::TopK, 2.0),
            (SparseMode::Dense, 0.0),
        ] {
            let (params, batch, _) = small_setup(19, ModelFlags::default());
            let scfg = SparseConfig { mode, k, renorm: Renorm::Resoftmax };
            let mut records = Vec::new();
            let f = forward(
                &params,
                &batch,
                &scfg,
                ForwardOpts { records: Some(&mut records), ..ForwardOpts::eval() },
            )
            .unwrap();
            let mass: f64 = records.iter().map(|r| r.weight).sum();
            assert!(
                (mass - f.n_loss as f64).abs() < 1e-9,
                "mode {mode:?}: mass {mass} vs {} queries",
                f.n_loss
            );
        }
    }

    #[test]
    fn id_bounds_are_checked() {
        let (params, mut batch, scfg) = small_setup(23, ModelFlags::default());
        batch.questions[0] = 99;
        assert!(matches!(
            forward(&params, &batch, &scfg, ForwardOpts::eval()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn flat_roundtrip_preserves_params() {
        let (mut params, _, _) = small_setup(29, ModelFlags::default());
        let flat = params.to_flat();
        assert_eq!(flat.len(), params.n_params());
        let orig = params.clone();
        let mut shifted = flat.clone();
        for v in &mut shifted {
            *v += 1.0;
        }
        params.set_from_flat(&shifted);
        assert_ne!(params, orig);
        params.set_from_flat(&flat);
        assert_eq!(params, orig);
    }
}
