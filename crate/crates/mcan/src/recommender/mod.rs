//! Conditional recommendation: next-item ranking, next-category ranking,
//! and greedy outfit completion.
//!
//! A completion query gives a partial outfit plus an ordered plan of steps.
//! Each step either names a category (at fine or coarse granularity) or is a
//! wildcard; wildcards take the most probable category that is not already
//! used in the outfit, which keeps the distinct-category convention. The
//! item for the step is the argmax of the item distribution over the
//! category's pool. Decoding is greedy; diversity comes from varying the
//! plan, not from beam width.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::data::{DataError, Dataset, Granularity, ItemId, TupleSeq};
use crate::model::{resolve_seq, CatRef, Mcan, ModelError, PoolSet};
use crate::textfmt::{fields, fmt_f64, parse_u64, parse_usize};

#[derive(Debug, Error)]
pub enum RecError {
    #[error("{0}")]
    Contract(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no unused {granularity} category left for a wildcard step")]
    CategoriesExhausted { granularity: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One plan step: a concrete category or a wildcard at a granularity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanStep {
    pub category: Option<usize>,
    pub granularity: Granularity,
}

/// A completion query: the given partial outfit, the plan, and a length cap.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub given: TupleSeq,
    pub plan: Vec<PlanStep>,
    pub max_len: usize,
}

impl Query {
    pub fn validate(&self) -> Result<(), RecError> {
        if self.plan.is_empty() {
            return Err(RecError::Contract("plan must have at least one step".into()));
        }
        if self.max_len < self.given.len() + self.plan.len() {
            return Err(RecError::Contract(format!(
                "max_len {} is below given length {} plus plan length {}",
                self.max_len,
                self.given.len(),
                self.plan.len()
            )));
        }
        Ok(())
    }
}

/// Top-`k` items of a category, ranked by next-item probability
/// (descending; ties to the lowest item id). `k` larger than the pool
/// returns the whole pool ranked.
pub fn recommend_item(
    model: &Mcan,
    dataset: &Dataset,
    pools: &PoolSet,
    given: &TupleSeq,
    category: CatRef,
    k: usize,
) -> Result<Vec<(ItemId, f64)>, RecError> {
    if k == 0 {
        return Err(RecError::Contract("k must be at least 1".into()));
    }
    let pool = pools.get(category)?;
    let prefix = resolve_seq(dataset, given)?;
    let dist = model.item_distribution(&prefix, category, pool)?;
    let mut ranked: Vec<(ItemId, f64)> = pool
        .item_ids
        .iter()
        .copied()
        .zip(dist.into_iter())
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite probabilities").then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// All categories of a granularity ranked by next-category probability
/// (descending; ties to the lowest id). Requires the CPL heads.
pub fn recommend_category(
    model: &Mcan,
    dataset: &Dataset,
    given: &TupleSeq,
    granularity: Granularity,
) -> Result<Vec<(usize, f64)>, RecError> {
    let prefix = resolve_seq(dataset, given)?;
    let dist = model.category_distribution(&prefix, granularity)?;
    let mut ranked: Vec<(usize, f64)> = dist.into_iter().enumerate().map(|(i, p)| (i, p)).collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite probabilities").then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// One decoded step of a completion.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionStep {
    pub category: CatRef,
    pub item: ItemId,
    pub item_prob: f64,
    /// Present when the step's category was predicted rather than given.
    pub category_prob: Option<f64>,
}

/// A completed outfit: the full tuple sequence and the decoded steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub seq: TupleSeq,
    pub steps: Vec<CompletionStep>,
}

/// Greedy left-to-right completion of a query.
pub fn complete_outfit(
    model: &Mcan,
    dataset: &Dataset,
    pools: &PoolSet,
    query: &Query,
) -> Result<Completion, RecError> {
    query.validate()?;
    let mut seq = query.given.clone();
    let mut steps = Vec::with_capacity(query.plan.len());

    for step in &query.plan {
        if seq.len() >= query.max_len {
            break;
        }
        let (category, category_prob) = match step.category {
            Some(id) => (
                CatRef {
                    granularity: step.granularity,
                    id,
                },
                None,
            ),
            None => {
                let used = used_categories(dataset, &seq, step.granularity)?;
                let ranked = recommend_category(model, dataset, &seq, step.granularity)?;
                let pick = ranked
                    .into_iter()
                    .find(|(id, _)| !used.contains(id))
                    .ok_or(RecError::CategoriesExhausted {
                        granularity: step.granularity.as_str(),
                    })?;
                (
                    CatRef {
                        granularity: step.granularity,
                        id: pick.0,
                    },
                    Some(pick.1),
                )
            }
        };
        let top = recommend_item(model, dataset, pools, &seq, category, 1)?;
        let (item, item_prob) = top[0];
        seq.push(item, category.granularity);
        steps.push(CompletionStep {
            category,
            item,
            item_prob,
            category_prob,
        });
    }
    Ok(Completion { seq, steps })
}

fn used_categories(
    dataset: &Dataset,
    seq: &TupleSeq,
    granularity: Granularity,
) -> Result<Vec<usize>, RecError> {
    let mut used = Vec::with_capacity(seq.len());
    for &(item, _) in seq.entries() {
        used.push(dataset.category_of(item, granularity)?);
    }
    Ok(used)
}

// ── Query and completion text formats ──────────────────────────────────

/// Parses a query document:
///
/// ```text
/// Q <max_len>
/// G <item_id> <fine|coarse>
/// S <category_id|*> <fine|coarse>
/// ```
pub fn query_from_str(text: &str) -> Result<Query, RecError> {
    let perr = |line: usize, msg: String| RecError::Parse { line, msg };
    let mut max_len: Option<usize> = None;
    let mut given: Vec<(ItemId, Granularity)> = Vec::new();
    let mut plan: Vec<PlanStep> = Vec::new();

    for (lno, raw) in text.lines().enumerate() {
        let line = lno + 1;
        let f = fields(raw);
        if f.is_empty() {
            continue;
        }
        match f[0] {
            "Q" => {
                if f.len() != 2 {
                    return Err(perr(line, "Q needs max_len".into()));
                }
                max_len = Some(parse_usize(f[1]).map_err(|m| perr(line, m))?);
            }
            "G" => {
                if f.len() != 3 {
                    return Err(perr(line, "G needs item id and granularity".into()));
                }
                let item = parse_u64(f[1]).map_err(|m| perr(line, m))?;
                let g = Granularity::parse(f[2])
                    .ok_or_else(|| perr(line, format!("unknown granularity {:?}", f[2])))?;
                given.push((item, g));
            }
            "S" => {
                if f.len() != 3 {
                    return Err(perr(line, "S needs category (or *) and granularity".into()));
                }
                let category = if f[1] == "*" {
                    None
                } else {
                    Some(parse_usize(f[1]).map_err(|m| perr(line, m))?)
                };
                let granularity = Granularity::parse(f[2])
                    .ok_or_else(|| perr(line, format!("unknown granularity {:?}", f[2])))?;
                plan.push(PlanStep {
                    category,
                    granularity,
                });
            }
            other => return Err(perr(line, format!("unknown record kind {other:?}"))),
        }
    }

    let given = TupleSeq::new(given)
        .map_err(|_| RecError::Contract("query needs at least one given tuple".into()))?;
    let max_len = max_len.unwrap_or(given.len() + plan.len());
    let query = Query {
        given,
        plan,
        max_len,
    };
    query.validate()?;
    Ok(query)
}

pub fn load_query(path: &Path) -> Result<Query, RecError> {
    let text = fs::read_to_string(path)?;
    query_from_str(&text)
}

/// Serializes a completion: the full tuple sequence, then one `P` line per
/// decoded step with its probabilities.
pub fn completion_to_string(c: &Completion) -> String {
    let mut out = String::new();
    for &(item, g) in c.seq.entries() {
        out.push_str(&format!("T {item} {}\n", g.as_str()));
    }
    for (i, s) in c.steps.iter().enumerate() {
        let cat_prob = match s.category_prob {
            Some(p) => fmt_f64(p),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "P {i} {} {} {} {} {}\n",
            s.category.granularity.as_str(),
            s.category.id,
            s.item,
            fmt_f64(s.item_prob),
            cat_prob
        ));
    }
    out
}

#[cfg(test)]
mod tests;
