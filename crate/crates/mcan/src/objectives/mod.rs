//! Training losses and the three-level negative sampler.
//!
//! `L_F` and `L_C` are negative log-likelihoods of the training sequences at
//! fine and coarse granularity. The triplet loss pushes the score of the
//! true next tuple above a sampled negative tuple by a margin; its negatives
//! follow a curriculum, semi-hard for the first half of training and hard
//! for the second. A negative tuple pairs the sampled item with the
//! *target's* category, so a semi-hard negative may carry a fine-category
//! embedding that differs from the item's own.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use rand::Rng;

use crate::autograd::{Tape, TensorError, TensorId};
use crate::data::{DataError, Dataset, Granularity, ItemId, Outfit, OutfitId, TupleSeq};
use crate::model::graph::{self, ModelVars, StepTarget};
use crate::model::{CandidateSet, CatRef, Mcan, ModelConfig, ModelError, PoolSet, TupleView};

#[derive(Debug, Error)]
pub enum ObjError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0}")]
    Contract(String),
    #[error("no eligible negative for {category} outside outfit {outfit}")]
    Sampling { category: String, outfit: OutfitId },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Negative-sampling difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplingLevel {
    /// Any item outside the target outfit.
    Easy,
    /// Same coarse category as the target, outside its outfit.
    SemiHard,
    /// Same fine category as the target, outside its outfit.
    Hard,
}

impl SamplingLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingLevel::Easy => "easy",
            SamplingLevel::SemiHard => "semi_hard",
            SamplingLevel::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "easy" => Some(SamplingLevel::Easy),
            "semi_hard" => Some(SamplingLevel::SemiHard),
            "hard" => Some(SamplingLevel::Hard),
            _ => None,
        }
    }
}

/// Curriculum: semi-hard for the first half of training, hard after.
pub fn schedule_level(epoch: usize, total_epochs: usize) -> Result<SamplingLevel, ObjError> {
    if epoch >= total_epochs {
        return Err(ObjError::Contract(format!(
            "epoch {epoch} out of range for {total_epochs} total"
        )));
    }
    if epoch < total_epochs.div_ceil(2) {
        Ok(SamplingLevel::SemiHard)
    } else {
        Ok(SamplingLevel::Hard)
    }
}

/// Draws one negative item for the target at `(outfit, position)`, uniform
/// over the eligible set of the level.
pub fn sample_negative(
    dataset: &Dataset,
    rng: &mut ChaCha8Rng,
    outfit: &Outfit,
    position: usize,
    level: SamplingLevel,
) -> Result<ItemId, ObjError> {
    let target = outfit.item_ids[position];
    let target_fine = dataset.item(target)?.fine_category;
    let target_coarse = dataset.taxonomy().coarse_of(target_fine)?;

    let eligible: Vec<ItemId> = dataset
        .items()
        .iter()
        .filter(|item| {
            if outfit.item_ids.contains(&item.id) {
                return false;
            }
            match level {
                SamplingLevel::Easy => true,
                SamplingLevel::SemiHard => {
                    dataset.taxonomy().coarse_of(item.fine_category).unwrap() == target_coarse
                }
                SamplingLevel::Hard => item.fine_category == target_fine,
            }
        })
        .map(|item| item.id)
        .collect();

    if eligible.is_empty() {
        let category = match level {
            SamplingLevel::Easy => "any category".to_string(),
            SamplingLevel::SemiHard => CatRef::coarse(target_coarse).to_string(),
            SamplingLevel::Hard => CatRef::fine(target_fine).to_string(),
        };
        return Err(ObjError::Sampling {
            category,
            outfit: outfit.id,
        });
    }
    Ok(eligible[rng.gen_range(0..eligible.len())])
}

/// One anchor/positive/negative example: the anchor is a tuple prefix, the
/// positive the true next tuple, and the negative pairs a sampled item with
/// the positive's category.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub outfit_id: OutfitId,
    pub anchor: TupleSeq,
    pub category: CatRef,
    pub positive: ItemId,
    pub negative: ItemId,
}

pub type TripletBatch = Vec<Triplet>;

/// One triplet per prediction position of every outfit in the batch, with
/// negatives drawn at the given level.
pub fn build_triplets(
    dataset: &Dataset,
    outfits: &[&Outfit],
    level: SamplingLevel,
    granularity: Granularity,
    rng: &mut ChaCha8Rng,
) -> Result<TripletBatch, ObjError> {
    let mut triplets = Vec::new();
    for outfit in outfits {
        for pos in 1..outfit.item_ids.len() {
            let positive = outfit.item_ids[pos];
            let cat_id = dataset.category_of(positive, granularity)?;
            let negative = sample_negative(dataset, rng, outfit, pos, level)?;
            triplets.push(Triplet {
                outfit_id: outfit.id,
                anchor: TupleSeq::uniform(&outfit.item_ids[..pos], granularity)?,
                category: CatRef {
                    granularity,
                    id: cat_id,
                },
                positive,
                negative,
            });
        }
    }
    Ok(triplets)
}

fn check_granularity(batch: &[TupleSeq], expected: Granularity) -> Result<(), ObjError> {
    for seq in batch {
        if seq.entries().iter().any(|&(_, g)| g != expected) {
            return Err(ObjError::Contract(format!(
                "batch sequence mixes granularities, expected all {}",
                expected.as_str()
            )));
        }
    }
    Ok(())
}

/// Builds per-step candidate targets, subsampling the pool to `sample_k`
/// candidates (target always kept) when configured.
fn steps_for(
    seq: &[TupleView<'_>],
    pools: &PoolSet,
    sample_k: Option<usize>,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Vec<StepTarget>, ObjError> {
    let mut steps = graph::full_steps(seq, pools)?;
    if let (Some(k), Some(rng)) = (sample_k, rng.as_deref_mut()) {
        for step in steps.iter_mut() {
            let pool = &step.candidates;
            if pool.len() <= k {
                continue;
            }
            let target = pool.item_ids[step.target_index];
            // Partial Fisher-Yates over the non-target indices.
            let mut others: Vec<usize> = (0..pool.len()).filter(|&i| pool.item_ids[i] != target).collect();
            for pick in 0..(k - 1) {
                let j = rng.gen_range(pick..others.len());
                others.swap(pick, j);
            }
            let mut keep: Vec<usize> = others[..k - 1].to_vec();
            keep.push(step.target_index);
            keep.sort_unstable_by_key(|&i| pool.item_ids[i]);
            let d = pool.d_img;
            let mut features = Vec::with_capacity(keep.len() * d);
            let mut item_ids = Vec::with_capacity(keep.len());
            for &i in &keep {
                item_ids.push(pool.item_ids[i]);
                features.extend_from_slice(&pool.features[i * d..(i + 1) * d]);
            }
            let target_index = item_ids
                .iter()
                .position(|&i| i == target)
                .expect("target kept in subsample");
            step.candidates = CandidateSet {
                category: pool.category,
                item_ids,
                features,
                d_img: d,
            };
            step.target_index = target_index;
        }
    }
    Ok(steps)
}

fn nll_graph(
    tape: &Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    dataset: &Dataset,
    batch: &[TupleSeq],
    pools: &PoolSet,
    granularity: Granularity,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<TensorId, ObjError> {
    if batch.is_empty() {
        return Err(ObjError::EmptyBatch);
    }
    check_granularity(batch, granularity)?;
    let mut total: Option<TensorId> = None;
    for seq in batch {
        let views = crate::model::resolve_seq(dataset, seq)?;
        if views.len() < 2 {
            return Err(ObjError::Contract(format!(
                "training sequence needs at least 2 tuples, got {}",
                views.len()
            )));
        }
        let steps = steps_for(&views, pools, cfg.sample_k, &mut rng)?;
        let ll = graph::outfit_loglik_graph(tape, vars, cfg, &views, &steps)?;
        total = Some(match total {
            None => ll,
            Some(acc) => tape.add(acc, ll)?,
        });
    }
    let sum = total.expect("non-empty batch");
    Ok(tape.scale(sum, -1.0 / batch.len() as f64)?)
}

/// `L_F`: mean negative log-likelihood over fine-granularity sequences.
pub(crate) fn loss_fine_graph(
    tape: &Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    dataset: &Dataset,
    batch: &[TupleSeq],
    pools: &PoolSet,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<TensorId, ObjError> {
    nll_graph(tape, vars, cfg, dataset, batch, pools, Granularity::Fine, rng)
}

/// `L_C`: the coarse-granularity counterpart of `L_F`.
pub(crate) fn loss_coarse_graph(
    tape: &Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    dataset: &Dataset,
    batch: &[TupleSeq],
    pools: &PoolSet,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<TensorId, ObjError> {
    nll_graph(tape, vars, cfg, dataset, batch, pools, Granularity::Coarse, rng)
}

/// `L_triplet`: mean hinge `max(0, s(t_a, t_n) - s(t_a, t_p) + mu)`.
pub(crate) fn loss_triplet_graph(
    tape: &Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    dataset: &Dataset,
    batch: &TripletBatch,
    mu: f64,
) -> Result<TensorId, ObjError> {
    if batch.is_empty() {
        return Err(ObjError::EmptyBatch);
    }
    if !(mu >= 0.0) {
        return Err(ObjError::Contract(format!("margin mu must be >= 0, got {mu}")));
    }
    let mut total: Option<TensorId> = None;
    for triplet in batch {
        let anchor = crate::model::resolve_seq(dataset, &triplet.anchor)?;
        let t_a = graph::prefix_repr(tape, vars, cfg, &anchor)?;
        let d_img = dataset.d_img();
        let mut features = Vec::with_capacity(2 * d_img);
        features.extend_from_slice(&dataset.item(triplet.positive)?.features);
        features.extend_from_slice(&dataset.item(triplet.negative)?.features);
        // The negative tuple reuses the positive's category embedding, so
        // this set is intentionally not category-checked.
        let cands = CandidateSet {
            category: triplet.category,
            item_ids: vec![triplet.positive, triplet.negative],
            features,
            d_img,
        };
        let logits = graph::step_logits(tape, vars, cfg, t_a, triplet.category, &cands)?;
        let s_p = tape.pick(logits, 0)?;
        let s_n = tape.pick(logits, 1)?;
        let margin = tape.constant(vec![1], vec![mu])?;
        let gap = tape.add(tape.sub(s_n, s_p)?, margin)?;
        let hinge = tape.relu(gap)?;
        total = Some(match total {
            None => hinge,
            Some(acc) => tape.add(acc, hinge)?,
        });
    }
    let sum = total.expect("non-empty batch");
    Ok(tape.scale(sum, 1.0 / batch.len() as f64)?)
}

/// Loss weights: `L = L_F + lambda1 L_C + lambda2 L_triplet`, hinge margin
/// `mu` inside the triplet term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 0.1,
            mu: 0.05,
        }
    }
}

/// One training batch: the same outfits as fine and coarse sequences, plus
/// triplets drawn at the scheduled level (empty when the triplet term is
/// disabled).
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub fine: Vec<TupleSeq>,
    pub coarse: Vec<TupleSeq>,
    pub triplets: TripletBatch,
}

impl TrainBatch {
    pub fn from_outfits(
        dataset: &Dataset,
        outfits: &[&Outfit],
        triplet_level: Option<SamplingLevel>,
        triplet_granularity: Granularity,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainBatch, ObjError> {
        if outfits.is_empty() {
            return Err(ObjError::EmptyBatch);
        }
        let fine = outfits
            .iter()
            .map(|o| TupleSeq::uniform(&o.item_ids, Granularity::Fine))
            .collect::<Result<_, _>>()?;
        let coarse = outfits
            .iter()
            .map(|o| TupleSeq::uniform(&o.item_ids, Granularity::Coarse))
            .collect::<Result<_, _>>()?;
        let triplets = match triplet_level {
            Some(level) => build_triplets(dataset, outfits, level, triplet_granularity, rng)?,
            None => Vec::new(),
        };
        Ok(TrainBatch {
            fine,
            coarse,
            triplets,
        })
    }
}

/// Component values of one evaluated batch loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLosses {
    pub fine: f64,
    pub coarse: f64,
    pub triplet: f64,
    pub total: f64,
}

/// Builds the total loss graph and returns the scalar id plus component
/// values read off the tape.
pub(crate) fn total_loss_graph(
    tape: &Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    dataset: &Dataset,
    pools: &PoolSet,
    batch: &TrainBatch,
    weights: &LossWeights,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(TensorId, BatchLosses), ObjError> {
    let fine = loss_fine_graph(tape, vars, cfg, dataset, &batch.fine, pools, rng.as_deref_mut())?;
    let coarse = loss_coarse_graph(tape, vars, cfg, dataset, &batch.coarse, pools, rng.as_deref_mut())?;
    let mut total = tape.add(fine, tape.scale(coarse, weights.lambda1)?)?;
    let mut triplet_val = 0.0;
    if !batch.triplets.is_empty() {
        let triplet = loss_triplet_graph(tape, vars, cfg, dataset, &batch.triplets, weights.mu)?;
        triplet_val = tape.values(triplet)[0];
        total = tape.add(total, tape.scale(triplet, weights.lambda2)?)?;
    }
    let losses = BatchLosses {
        fine: tape.values(fine)[0],
        coarse: tape.values(coarse)[0],
        triplet: triplet_val,
        total: tape.values(total)[0],
    };
    Ok((total, losses))
}

// ── Tape-free convenience wrappers ─────────────────────────────────────

pub fn loss_fine(
    model: &Mcan,
    dataset: &Dataset,
    batch: &[TupleSeq],
    pools: &PoolSet,
) -> Result<f64, ObjError> {
    let tape = Tape::new();
    let vars = ModelVars::bind(&tape, &model.params);
    let id = loss_fine_graph(&tape, &vars, &model.cfg, dataset, batch, pools, None)?;
    Ok(tape.values(id)[0])
}

pub fn loss_coarse(
    model: &Mcan,
    dataset: &Dataset,
    batch: &[TupleSeq],
    pools: &PoolSet,
) -> Result<f64, ObjError> {
    let tape = Tape::new();
    let vars = ModelVars::bind(&tape, &model.params);
    let id = loss_coarse_graph(&tape, &vars, &model.cfg, dataset, batch, pools, None)?;
    Ok(tape.values(id)[0])
}

pub fn loss_triplet(
    model: &Mcan,
    dataset: &Dataset,
    batch: &TripletBatch,
    mu: f64,
) -> Result<f64, ObjError> {
    let tape = Tape::new();
    let vars = ModelVars::bind(&tape, &model.params);
    let id = loss_triplet_graph(&tape, &vars, &model.cfg, dataset, batch, mu)?;
    Ok(tape.values(id)[0])
}

pub fn total_loss(
    model: &Mcan,
    dataset: &Dataset,
    pools: &PoolSet,
    batch: &TrainBatch,
    weights: &LossWeights,
) -> Result<BatchLosses, ObjError> {
    let tape = Tape::new();
    let vars = ModelVars::bind(&tape, &model.params);
    let (_, losses) = total_loss_graph(
        &tape,
        &vars,
        &model.cfg,
        dataset,
        pools,
        batch,
        weights,
        None,
    )?;
    Ok(losses)
}

/// `total_loss` plus its gradient with respect to every named parameter
/// tensor, in canonical order.
pub fn total_loss_with_gradients(
    model: &Mcan,
    dataset: &Dataset,
    pools: &PoolSet,
    batch: &TrainBatch,
    weights: &LossWeights,
) -> Result<(BatchLosses, Vec<(String, Vec<f64>)>), ObjError> {
    let tape = Tape::new();
    let vars = ModelVars::bind(&tape, &model.params);
    let (total, losses) = total_loss_graph(
        &tape,
        &vars,
        &model.cfg,
        dataset,
        pools,
        batch,
        weights,
        None,
    )?;
    let grads = tape.backward(total)?;
    let named = model
        .params
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .zip(vars.ids_in_order())
        .map(|(name, id)| {
            let g = grads.get(id).expect("all parameters are trainable").to_vec();
            (name, g)
        })
        .collect();
    Ok((losses, named))
}
