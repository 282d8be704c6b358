//! Evaluation harnesses: fill-in-the-blank questions, compatibility AUC at
//! three difficulty levels, and order-shuffle comparisons.
//!
//! A FITB question blanks one item of a test outfit (never the first
//! position) and asks the model to pick it out of four choices; the three
//! negatives are drawn by the level's sampler. Answering conditions on all
//! remaining items of the outfit. Choices whose category does not match the
//! blank's category carry probability zero by construction, which is what
//! makes the easy level easy.
//!
//! Compatibility tasks score each split outfit and a same-length negative
//! outfit (every item replaced by a level draw) with the length-normalized
//! log-likelihood, then rank them with Mann-Whitney AUC.

use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{DataError, Dataset, Granularity, ItemId, Split, TupleSeq};
use crate::model::{resolve_seq, CandidateSet, CatRef, Mcan, ModelError, PoolSet};
use crate::objectives::{sample_negative, ObjError, SamplingLevel};
use crate::seeding::derive_seed;
use crate::textfmt::fmt_f64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Contract(String),
    #[error("outfit {outfit}: {source}")]
    Build {
        outfit: u64,
        #[source]
        source: ObjError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One four-choice question: the blanked outfit, the blank's category, the
/// shuffled choices and the index of the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FitbQuestion {
    pub prefix: TupleSeq,
    pub blank_category: CatRef,
    pub choices: [ItemId; 4],
    pub answer_index: usize,
}

/// Builds one question per outfit of the split, deterministically in `seed`.
///
/// The blank position is uniform over positions `2..=N` (the first tuple is
/// always given); negatives are three distinct draws at `level`.
pub fn build_fitb(
    dataset: &Dataset,
    split: Split,
    level: SamplingLevel,
    granularity: Granularity,
    seed: u64,
) -> Result<Vec<FitbQuestion>, EvalError> {
    let outfits = dataset.split_outfits(split);
    if outfits.is_empty() {
        return Err(EvalError::Contract(format!(
            "split {} has no outfits",
            split.as_str()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "fitb"));
    let mut questions = Vec::with_capacity(outfits.len());
    for outfit in outfits {
        let blank = rng.gen_range(1..outfit.item_ids.len());
        let truth = outfit.item_ids[blank];

        let mut negatives: Vec<ItemId> = Vec::with_capacity(3);
        let mut attempts = 0usize;
        while negatives.len() < 3 {
            let draw = sample_negative(dataset, &mut rng, outfit, blank, level)
                .map_err(|source| EvalError::Build {
                    outfit: outfit.id,
                    source,
                })?;
            if !negatives.contains(&draw) {
                negatives.push(draw);
            }
            attempts += 1;
            if attempts > 64 + dataset.items().len() {
                return Err(EvalError::Contract(format!(
                    "outfit {}: fewer than 3 distinct {} negatives available",
                    outfit.id,
                    level.as_str()
                )));
            }
        }

        let answer_index = rng.gen_range(0..4);
        let mut choices = [0 as ItemId; 4];
        let mut neg_iter = negatives.into_iter();
        for (i, slot) in choices.iter_mut().enumerate() {
            *slot = if i == answer_index {
                truth
            } else {
                neg_iter.next().expect("three negatives")
            };
        }

        let remaining: Vec<ItemId> = outfit
            .item_ids
            .iter()
            .copied()
            .filter(|&i| i != truth)
            .collect();
        questions.push(FitbQuestion {
            prefix: TupleSeq::uniform(&remaining, granularity)?,
            blank_category: CatRef {
                granularity,
                id: dataset.category_of(truth, granularity)?,
            },
            choices,
            answer_index,
        });
    }
    Ok(questions)
}

/// Answers a question: the argmax choice under the item distribution
/// restricted to choices of the blank's category; other choices have
/// probability zero. Ties break to the lowest item id.
pub fn answer_fitb(model: &Mcan, dataset: &Dataset, q: &FitbQuestion) -> Result<usize, EvalError> {
    let valid: Vec<(usize, ItemId)> = q
        .choices
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, item)| {
            dataset
                .category_of(item, q.blank_category.granularity)
                .map(|c| c == q.blank_category.id)
                .unwrap_or(false)
        })
        .collect();
    debug_assert!(!valid.is_empty(), "ground truth always matches the blank");

    let mut probs = vec![0.0f64; 4];
    if valid.len() == 1 {
        probs[valid[0].0] = 1.0;
    } else {
        let ids: Vec<ItemId> = valid.iter().map(|&(_, item)| item).collect();
        let cands = CandidateSet::from_items(dataset, q.blank_category, &ids)?;
        let prefix = resolve_seq(dataset, &q.prefix)?;
        let dist = model.item_distribution(&prefix, q.blank_category, &cands)?;
        for (&(choice_idx, _), p) in valid.iter().zip(dist.iter()) {
            probs[choice_idx] = *p;
        }
    }

    let mut best = 0usize;
    for i in 1..4 {
        let better = probs[i] > probs[best]
            || (probs[i] == probs[best] && q.choices[i] < q.choices[best]);
        if better {
            best = i;
        }
    }
    Ok(best)
}

/// Fraction of questions answered correctly.
pub fn fitb_accuracy(
    model: &Mcan,
    dataset: &Dataset,
    questions: &[FitbQuestion],
) -> Result<f64, EvalError> {
    if questions.is_empty() {
        return Err(EvalError::Contract("empty question list".into()));
    }
    let mut correct = 0usize;
    for q in questions {
        if answer_fitb(model, dataset, q)? == q.answer_index {
            correct += 1;
        }
    }
    Ok(correct as f64 / questions.len() as f64)
}

/// Positive outfits of a split plus one perturbed negative per positive.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatTask {
    pub level: SamplingLevel,
    pub positives: Vec<Vec<ItemId>>,
    pub negatives: Vec<Vec<ItemId>>,
}

/// Builds a compatibility task: each negative outfit replaces every item of
/// its positive with a level draw (categories preserved for semi-hard and
/// hard, unconstrained for easy).
pub fn build_compat(
    dataset: &Dataset,
    split: Split,
    level: SamplingLevel,
    seed: u64,
) -> Result<CompatTask, EvalError> {
    let outfits = dataset.split_outfits(split);
    if outfits.is_empty() {
        return Err(EvalError::Contract(format!(
            "split {} has no outfits",
            split.as_str()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "compat"));
    let mut positives = Vec::with_capacity(outfits.len());
    let mut negatives = Vec::with_capacity(outfits.len());
    for outfit in outfits {
        let mut negative = Vec::with_capacity(outfit.item_ids.len());
        for pos in 0..outfit.item_ids.len() {
            let neg = sample_negative(dataset, &mut rng, outfit, pos, level).map_err(|source| {
                EvalError::Build {
                    outfit: outfit.id,
                    source,
                }
            })?;
            negative.push(neg);
        }
        positives.push(outfit.item_ids.clone());
        negatives.push(negative);
    }
    Ok(CompatTask {
        level,
        positives,
        negatives,
    })
}

/// Length-normalized log-likelihood, `outfit_loglik / (N - 1)`, so outfits
/// of different lengths score on the same scale.
pub fn compat_score(
    model: &Mcan,
    dataset: &Dataset,
    pools: &PoolSet,
    seq: &TupleSeq,
) -> Result<f64, EvalError> {
    if seq.len() < 2 {
        return Err(EvalError::Contract(format!(
            "compatibility needs at least 2 items, got {}",
            seq.len()
        )));
    }
    let views = resolve_seq(dataset, seq)?;
    let ll = model.outfit_loglik(&views, pools)?;
    Ok(ll / (seq.len() - 1) as f64)
}

/// Mann-Whitney rank AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counted half.
pub fn auc(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64, EvalError> {
    if pos_scores.is_empty() || neg_scores.is_empty() {
        return Err(EvalError::Contract(
            "auc needs at least one score on each side".into(),
        ));
    }
    let n_pos = pos_scores.len();
    let n_neg = neg_scores.len();
    let mut all: Vec<(f64, bool)> = pos_scores
        .iter()
        .map(|&s| (s, true))
        .chain(neg_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores are finite"));

    // Average ranks over tie groups.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0; // ranks are 1-based
        for entry in &all[i..j] {
            if entry.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Metrics of one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub fitb_accuracy: f64,
    pub fitb_n: usize,
    pub compat_auc: f64,
    pub compat_n: usize,
}

/// Scores a compat task at one granularity.
fn compat_auc_of(
    model: &Mcan,
    dataset: &Dataset,
    pools: &PoolSet,
    task: &CompatTask,
    granularity: Granularity,
    perms: Option<&[Vec<usize>]>,
) -> Result<f64, EvalError> {
    let score_side = |outfits: &[Vec<ItemId>]| -> Result<Vec<f64>, EvalError> {
        outfits
            .iter()
            .enumerate()
            .map(|(i, items)| {
                let seq = TupleSeq::uniform(items, granularity)?;
                let seq = match perms {
                    Some(perms) => seq.permuted(&perms[i])?,
                    None => seq,
                };
                compat_score(model, dataset, pools, &seq)
            })
            .collect()
    };
    let pos = score_side(&task.positives)?;
    let neg = score_side(&task.negatives)?;
    auc(&pos, &neg)
}

/// One full evaluation at a level: FITB accuracy plus compatibility AUC.
pub fn evaluate(
    model: &Mcan,
    dataset: &Dataset,
    split: Split,
    level: SamplingLevel,
    granularity: Granularity,
    seed: u64,
) -> Result<EvalMetrics, EvalError> {
    let questions = build_fitb(dataset, split, level, granularity, seed)?;
    let task = build_compat(dataset, split, level, seed)?;
    let pools = PoolSet::build(dataset)?;
    Ok(EvalMetrics {
        fitb_accuracy: fitb_accuracy(model, dataset, &questions)?,
        fitb_n: questions.len(),
        compat_auc: compat_auc_of(model, dataset, &pools, &task, granularity, None)?,
        compat_n: task.positives.len(),
    })
}

fn random_perm(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        p.swap(i, j);
    }
    p
}

/// Runs the same tasks twice: on stored order and with every sequence's
/// tuples jointly permuted (items and categories move together). The
/// questions, choices and negatives are identical across the two passes, so
/// any difference is pure ordering effect.
pub fn shuffle_eval(
    model: &Mcan,
    dataset: &Dataset,
    split: Split,
    level: SamplingLevel,
    granularity: Granularity,
    seed: u64,
) -> Result<(EvalMetrics, EvalMetrics), EvalError> {
    let questions = build_fitb(dataset, split, level, granularity, seed)?;
    let task = build_compat(dataset, split, level, seed)?;
    let pools = PoolSet::build(dataset)?;

    let ordered = EvalMetrics {
        fitb_accuracy: fitb_accuracy(model, dataset, &questions)?,
        fitb_n: questions.len(),
        compat_auc: compat_auc_of(model, dataset, &pools, &task, granularity, None)?,
        compat_n: task.positives.len(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "shuffle-eval"));
    let shuffled_questions: Vec<FitbQuestion> = questions
        .iter()
        .map(|q| {
            let perm = random_perm(&mut rng, q.prefix.len());
            Ok(FitbQuestion {
                prefix: q.prefix.permuted(&perm)?,
                ..q.clone()
            })
        })
        .collect::<Result<_, EvalError>>()?;
    let perms: Vec<Vec<usize>> = task
        .positives
        .iter()
        .map(|items| random_perm(&mut rng, items.len()))
        .collect();

    let shuffled = EvalMetrics {
        fitb_accuracy: fitb_accuracy(model, dataset, &shuffled_questions)?,
        fitb_n: shuffled_questions.len(),
        compat_auc: compat_auc_of(model, dataset, &pools, &task, granularity, Some(&perms))?,
        compat_n: task.positives.len(),
    };
    Ok((ordered, shuffled))
}

/// One metrics report line: task, level, mode, metric, value, n, seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportLine {
    pub task: &'static str,
    pub level: SamplingLevel,
    pub shuffled: bool,
    pub metric: &'static str,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

pub fn report_lines(
    level: SamplingLevel,
    shuffled: bool,
    metrics: &EvalMetrics,
    seed: u64,
) -> Vec<ReportLine> {
    vec![
        ReportLine {
            task: "fitb",
            level,
            shuffled,
            metric: "accuracy",
            value: metrics.fitb_accuracy,
            n: metrics.fitb_n,
            seed,
        },
        ReportLine {
            task: "compat",
            level,
            shuffled,
            metric: "auc",
            value: metrics.compat_auc,
            n: metrics.compat_n,
            seed,
        },
    ]
}

pub fn report_to_string(lines: &[ReportLine]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            l.task,
            l.level.as_str(),
            if l.shuffled { "shuffled" } else { "ordered" },
            l.metric,
            fmt_f64(l.value),
            l.n,
            l.seed
        ));
    }
    out
}

pub fn save_report(lines: &[ReportLine], path: &Path) -> Result<(), EvalError> {
    fs::write(path, report_to_string(lines))?;
    Ok(())
}

#[cfg(test)]
mod tests;
