//! Tape-level forward graph builders shared by inference and training.

use crate::autograd::{ffn_graph, FfnVars, Tape, TensorId};
use crate::data::Granularity;

use super::{CandidateSet, CatRef, McanParams, ModelConfig, ModelError, PoolSet, TupleView};

/// Tape handles for every parameter tensor, in canonical order.
pub(crate) struct ModelVars {
    pub e_fine: TensorId,
    pub e_coarse: TensorId,
    pub w_f: TensorId,
    pub w_g: TensorId,
    pub w_h: TensorId,
    pub attn: FfnVars,
    pub mix_fine: FfnVars,
    pub mix_coarse: FfnVars,
    pub scorer: FfnVars,
    pub cpl_fine: Option<FfnVars>,
    pub cpl_coarse: Option<FfnVars>,
}

impl ModelVars {
    pub fn bind(tape: &Tape, params: &McanParams) -> ModelVars {
        ModelVars {
            e_fine: tape.leaf(&params.e_fine),
            e_coarse: tape.leaf(&params.e_coarse),
            w_f: tape.leaf(&params.w_f),
            w_g: tape.leaf(&params.w_g),
            w_h: tape.leaf(&params.w_h),
            attn: params.attn.bind(tape),
            mix_fine: params.mix_fine.bind(tape),
            mix_coarse: params.mix_coarse.bind(tape),
            scorer: params.scorer.bind(tape),
            cpl_fine: params.cpl_fine.as_ref().map(|f| f.bind(tape)),
            cpl_coarse: params.cpl_coarse.as_ref().map(|f| f.bind(tape)),
        }
    }

    /// Rebuilds the binding from ids laid out in canonical order (the order
    /// of `McanParams::named_tensors`); used when leaves were registered
    /// externally, e.g. by the finite-difference checker.
    #[cfg(test)]
    pub fn from_ordered_ids(params: &McanParams, ids: &[TensorId]) -> ModelVars {
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("id list matches parameter layout");
        let e_fine = next();
        let e_coarse = next();
        let w_f = next();
        let w_g = next();
        let w_h = next();
        let mut ffn = |f: &crate::autograd::Ffn| {
            FfnVars::from_layers(f.layers.iter().map(|_| (next(), next())).collect())
        };
        let attn = ffn(&params.attn);
        let mix_fine = ffn(&params.mix_fine);
        let mix_coarse = ffn(&params.mix_coarse);
        let scorer = ffn(&params.scorer);
        let cpl_fine = params.cpl_fine.as_ref().map(&mut ffn);
        let cpl_coarse = params.cpl_coarse.as_ref().map(&mut ffn);
        ModelVars {
            e_fine,
            e_coarse,
            w_f,
            w_g,
            w_h,
            attn,
            mix_fine,
            mix_coarse,
            scorer,
            cpl_fine,
            cpl_coarse,
        }
    }

    /// Ids in the same order as `McanParams::named_tensors`.
    pub fn ids_in_order(&self) -> Vec<TensorId> {
        let mut out = vec![self.e_fine, self.e_coarse, self.w_f, self.w_g, self.w_h];
        for ffn in [&self.attn, &self.mix_fine, &self.mix_coarse, &self.scorer] {
            out.extend(ffn.ids());
        }
        for ffn in [&self.cpl_fine, &self.cpl_coarse].into_iter().flatten() {
            out.extend(ffn.ids());
        }
        out
    }

    pub fn table(&self, granularity: Granularity) -> TensorId {
        match granularity {
            Granularity::Fine => self.e_fine,
            Granularity::Coarse => self.e_coarse,
        }
    }

    pub fn mixer(&self, granularity: Granularity) -> &FfnVars {
        match granularity {
            Granularity::Fine => &self.mix_fine,
            Granularity::Coarse => &self.mix_coarse,
        }
    }

    pub fn cpl(&self, granularity: Granularity) -> Option<&FfnVars> {
        match granularity {
            Granularity::Fine => self.cpl_fine.as_ref(),
            Granularity::Coarse => self.cpl_coarse.as_ref(),
        }
    }
}

/// Causal self-attention over `x: [n × d_img]`.
///
/// Scores every (query, key) pair through the attention net, masks keys
/// after the query position, row-softmaxes, and aggregates the key/value
/// projections: `h_i = sum_{k<=i} alpha_ik g_k`.
pub(crate) fn attend(
    tape: &Tape,
    vars: &ModelVars,
    x: TensorId,
    n: usize,
) -> Result<(TensorId, TensorId), ModelError> {
    let f_proj = tape.matmul(x, tape.transpose(vars.w_f)?)?;
    let g_proj = tape.matmul(x, tape.transpose(vars.w_g)?)?;

    let mut left = Vec::with_capacity(n * n);
    let mut right = Vec::with_capacity(n * n);
    for i in 0..n {
        for k in 0..n {
            left.push(i);
            right.push(k);
        }
    }
    let pairs = tape.concat_cols(
        tape.gather_rows(f_proj, &left)?,
        tape.gather_rows(g_proj, &right)?,
    )?;
    let scores = ffn_graph(tape, &vars.attn, pairs)?;
    let e = tape.reshape(scores, vec![n, n])?;

    let mut mask = vec![false; n * n];
    for i in 0..n {
        for k in 0..=i {
            mask[i * n + k] = true;
        }
    }
    let alpha = tape.softmax_rows(e, Some(&mask))?;
    let h = tape.matmul(alpha, g_proj)?;
    Ok((alpha, h))
}

/// Mixes attended rows with their category embeddings, per-position by the
/// tuple's granularity: `t_i = f([h_i, c_i])` or `f'([h_i, c'_i])`.
pub(crate) fn tuple_reprs(
    tape: &Tape,
    vars: &ModelVars,
    h: TensorId,
    cats: &[(usize, Granularity)],
) -> Result<TensorId, ModelError> {
    let mut fine_rows = Vec::new();
    let mut fine_ids = Vec::new();
    let mut coarse_rows = Vec::new();
    let mut coarse_ids = Vec::new();
    for (row, &(id, g)) in cats.iter().enumerate() {
        match g {
            Granularity::Fine => {
                fine_rows.push(row);
                fine_ids.push(id);
            }
            Granularity::Coarse => {
                coarse_rows.push(row);
                coarse_ids.push(id);
            }
        }
    }

    let mix_group = |rows: &[usize], ids: &[usize], g: Granularity| -> Result<TensorId, ModelError> {
        let hr = tape.gather_rows(h, rows)?;
        let emb = tape.gather_rows(vars.table(g), ids)?;
        let cat = tape.concat_cols(hr, emb)?;
        Ok(ffn_graph(tape, vars.mixer(g), cat)?)
    };

    let (combined, order) = match (fine_rows.is_empty(), coarse_rows.is_empty()) {
        (false, true) => (mix_group(&fine_rows, &fine_ids, Granularity::Fine)?, fine_rows),
        (true, false) => (
            mix_group(&coarse_rows, &coarse_ids, Granularity::Coarse)?,
            coarse_rows,
        ),
        (false, false) => {
            let fine = mix_group(&fine_rows, &fine_ids, Granularity::Fine)?;
            let coarse = mix_group(&coarse_rows, &coarse_ids, Granularity::Coarse)?;
            let both = tape.concat_rows(fine, coarse)?;
            let mut order = fine_rows;
            order.extend(coarse_rows);
            (both, order)
        }
        (true, true) => return Err(ModelError::SeqTooShort { len: 0, need: 1 }),
    };

    // order[combined_row] = original position; invert to restore input order.
    let mut perm = vec![0usize; order.len()];
    for (combined_row, &orig) in order.iter().enumerate() {
        perm[orig] = combined_row;
    }
    Ok(tape.gather_rows(combined, &perm)?)
}

/// Registers prefix features and returns the last tuple representation
/// `[1 × d]`.
pub(crate) fn prefix_repr(
    tape: &Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    prefix: &[TupleView<'_>],
) -> Result<TensorId, ModelError> {
    let n = prefix.len();
    let mut feats = Vec::with_capacity(n * cfg.d_img);
    for tv in prefix {
        if tv.features.len() != cfg.d_img {
            return Err(ModelError::FeatureWidth {
                expected: cfg.d_img,
                got: tv.features.len(),
            });
        }
        feats.extend_from_slice(tv.features);
    }
    let x = tape.constant(vec![n, cfg.d_img], feats)?;
    let (_, h) = attend(tape, vars, x, n)?;
    let cats: Vec<(usize, Granularity)> =
        prefix.iter().map(|tv| (tv.category_id, tv.granularity)).collect();
    let t = tuple_reprs(tape, vars, h, &cats)?;
    Ok(tape.gather_rows(t, &[n - 1])?)
}

/// Candidate-side tuple features: `f_or_f'([W_H x, c])` for every candidate,
/// `[K × d]`.
pub(crate) fn candidate_tuple_feats(
    tape: &Tape,
    vars: &ModelVars,
    cat: CatRef,
    candidates: &CandidateSet,
) -> Result<TensorId, ModelError> {
    let k = candidates.len();
    let x = tape.constant(vec![k, candidates.d_img], candidates.features.clone())?;
    let proj = tape.matmul(x, tape.transpose(vars.w_h)?)?;
    let emb = tape.gather_rows(vars.table(cat.granularity), &vec![cat.id; k])?;
    let cat_feats = tape.concat_cols(proj, emb)?;
    Ok(ffn_graph(tape, vars.mixer(cat.granularity), cat_feats)?)
}

/// Scores candidates against the last tuple representation: `[1 × K]`
/// logits of `s([t, cand_tuple])`.
pub(crate) fn step_logits(
    tape: &Tape,
    vars: &ModelVars,
    _cfg: &ModelConfig,
    t_last: TensorId,
    cat: CatRef,
    candidates: &CandidateSet,
) -> Result<TensorId, ModelError> {
    let k = candidates.len();
    let cand_tuples = candidate_tuple_feats(tape, vars, cat, candidates)?;
    let t_rep = tape.gather_rows(t_last, &vec![0; k])?;
    let pairs = tape.concat_cols(t_rep, cand_tuples)?;
    let scores = ffn_graph(tape, &vars.scorer, pairs)?;
    Ok(tape.reshape(scores, vec![1, k])?)
}

/// One prediction step of a sequence: the candidate pool for the target
/// position's category and the target's index within it.
#[derive(Debug, Clone)]
pub(crate) struct StepTarget {
    pub category: CatRef,
    pub candidates: CandidateSet,
    pub target_index: usize,
}

/// Builds full-pool step targets for positions `1..n` of a sequence.
pub(crate) fn full_steps(
    seq: &[TupleView<'_>],
    pools: &PoolSet,
) -> Result<Vec<StepTarget>, ModelError> {
    let mut steps = Vec::with_capacity(seq.len() - 1);
    for tv in &seq[1..] {
        let category = CatRef {
            granularity: tv.granularity,
            id: tv.category_id,
        };
        let candidates = pools.get(category)?.clone();
        let target_index = candidates
            .index_of(tv.item_id)
            .ok_or(ModelError::TargetNotInPool(tv.item_id))?;
        steps.push(StepTarget {
            category,
            candidates,
            target_index,
        });
    }
    Ok(steps)
}

/// Chain-rule log-likelihood of a sequence given per-step candidate pools.
///
/// `sum_i log P(x_{i+1} | t_i, c_{i+1}) + log P(c_{i+1} | t_i)`, the second
/// term only when the CPL heads exist. The first-tuple prior is a constant
/// zero and contributes nothing.
pub(crate) fn outfit_loglik_graph(
    tape: &Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    seq: &[TupleView<'_>],
    steps: &[StepTarget],
) -> Result<TensorId, ModelError> {
    let n = seq.len();
    debug_assert_eq!(steps.len(), n - 1);
    let mut feats = Vec::with_capacity(n * cfg.d_img);
    for tv in seq {
        if tv.features.len() != cfg.d_img {
            return Err(ModelError::FeatureWidth {
                expected: cfg.d_img,
                got: tv.features.len(),
            });
        }
        feats.extend_from_slice(tv.features);
    }
    let x = tape.constant(vec![n, cfg.d_img], feats)?;
    let (_, h) = attend(tape, vars, x, n)?;
    let cats: Vec<(usize, Granularity)> =
        seq.iter().map(|tv| (tv.category_id, tv.granularity)).collect();
    let t = tuple_reprs(tape, vars, h, &cats)?;

    let mut total: Option<TensorId> = None;
    for (i, step) in steps.iter().enumerate() {
        let t_row = tape.gather_rows(t, &[i])?;
        let logits = step_logits(tape, vars, cfg, t_row, step.category, &step.candidates)?;
        let log_probs = tape.log_softmax_rows(logits)?;
        let mut term = tape.pick(log_probs, step.target_index)?;
        if cfg.use_cpl {
            let head = vars
                .cpl(step.category.granularity)
                .ok_or(ModelError::CplDisabled)?;
            let cl = ffn_graph(tape, head, t_row)?;
            let clp = tape.log_softmax_rows(cl)?;
            let cterm = tape.pick(clp, step.category.id)?;
            term = tape.add(term, cterm)?;
        }
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("sequence has at least two tuples"))
}
