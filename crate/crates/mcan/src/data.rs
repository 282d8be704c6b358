//! Category taxonomy, items, outfits, tuple sequences and the dataset file
//! format.
//!
//! The on-disk format is line-delimited UTF-8 text, one record per line:
//!
//! ```text
//! H <d_img>
//! T coarse <id> <name>
//! T fine <id> <name> <coarse_id>
//! I <item_id> <fine_id> <f_1> ... <f_dimg>
//! O <outfit_id> <split> <item_id> ...
//! ```
//!
//! Ids are decimal integers, category ids dense and 0-based, and `split` is
//! one of `train`, `val`, `test`, `none`. Saving is canonical (records
//! sorted by id, floats at 17 significant digits) so equal datasets always
//! produce byte-identical files; the loader accepts records in any order.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::textfmt::{fields, parse_f64, parse_u64, parse_usize, push_f64};

pub type ItemId = u64;
pub type OutfitId = u64;
pub type FineId = usize;
pub type CoarseId = usize;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation: {0}")]
    Validation(String),
    #[error("unknown fine category {0}")]
    UnknownFine(FineId),
    #[error("unknown coarse category {0}")]
    UnknownCoarse(CoarseId),
    #[error("unknown item {0}")]
    UnknownItem(ItemId),
    #[error("unknown outfit {0}")]
    UnknownOutfit(OutfitId),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Which category table a tuple entry refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    Fine,
    Coarse,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Fine => "fine",
            Granularity::Coarse => "coarse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fine" => Some(Granularity::Fine),
            "coarse" => Some(Granularity::Coarse),
            _ => None,
        }
    }
}

/// Many-to-one map from fine categories to coarse ones. Ids are dense and
/// 0-based on both sides.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CategoryTaxonomy {
    fine_names: Vec<String>,
    coarse_names: Vec<String>,
    fine_to_coarse: Vec<CoarseId>,
}

impl CategoryTaxonomy {
    pub fn new(
        coarse_names: Vec<String>,
        fine_names: Vec<String>,
        fine_to_coarse: Vec<CoarseId>,
    ) -> Result<Self, DataError> {
        if fine_names.len() != fine_to_coarse.len() {
            return Err(DataError::Validation(format!(
                "{} fine categories but {} coarse mappings",
                fine_names.len(),
                fine_to_coarse.len()
            )));
        }
        for (f, &c) in fine_to_coarse.iter().enumerate() {
            if c >= coarse_names.len() {
                return Err(DataError::Validation(format!(
                    "fine category {f} maps to unknown coarse category {c}"
                )));
            }
        }
        for (names, kind) in [(&coarse_names, "coarse"), (&fine_names, "fine")] {
            let mut seen = HashSet::new();
            for n in names.iter() {
                if !seen.insert(n.as_str()) {
                    return Err(DataError::Validation(format!(
                        "duplicate {kind} category name {n:?}"
                    )));
                }
            }
        }
        Ok(CategoryTaxonomy {
            fine_names,
            coarse_names,
            fine_to_coarse,
        })
    }

    pub fn num_fine(&self) -> usize {
        self.fine_names.len()
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_names.len()
    }

    pub fn fine_name(&self, id: FineId) -> Option<&str> {
        self.fine_names.get(id).map(|s| s.as_str())
    }

    pub fn coarse_name(&self, id: CoarseId) -> Option<&str> {
        self.coarse_names.get(id).map(|s| s.as_str())
    }

    /// The coarse category a fine category belongs to.
    pub fn coarse_of(&self, fine: FineId) -> Result<CoarseId, DataError> {
        self.fine_to_coarse
            .get(fine)
            .copied()
            .ok_or(DataError::UnknownFine(fine))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: ItemId,
    pub fine_category: FineId,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    None,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            "none" => Some(Split::None),
            _ => None,
        }
    }
}

/// An ordered sequence of at least two items with pairwise-distinct fine
/// categories.
#[derive(Debug, Clone, PartialEq)]
pub struct Outfit {
    pub id: OutfitId,
    pub split: Split,
    pub item_ids: Vec<ItemId>,
}

impl Outfit {
    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }
}

/// An outfit (or partial outfit) paired with a per-position granularity
/// choice; the model's input unit.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleSeq {
    entries: Vec<(ItemId, Granularity)>,
}

impl TupleSeq {
    pub fn new(entries: Vec<(ItemId, Granularity)>) -> Result<Self, DataError> {
        if entries.is_empty() {
            return Err(DataError::Validation(
                "tuple sequence must have at least one entry".into(),
            ));
        }
        Ok(TupleSeq { entries })
    }

    /// All positions at one granularity.
    pub fn uniform(item_ids: &[ItemId], granularity: Granularity) -> Result<Self, DataError> {
        Self::new(item_ids.iter().map(|&i| (i, granularity)).collect())
    }

    pub fn entries(&self) -> &[(ItemId, Granularity)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, item: ItemId, granularity: Granularity) {
        self.entries.push((item, granularity));
    }

    /// Reorders the entries; `perm[new_position] = old_position`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, DataError> {
        if perm.len() != self.entries.len() {
            return Err(DataError::Validation(format!(
                "permutation of length {} applied to sequence of length {}",
                perm.len(),
                self.entries.len()
            )));
        }
        let entries = perm.iter().map(|&p| self.entries[p]).collect();
        Self::new(entries)
    }
}

/// A validated, immutable collection of taxonomy, items, outfits and splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d_img: usize,
    taxonomy: CategoryTaxonomy,
    items: Vec<Item>,              // sorted by id
    outfits: Vec<Outfit>,          // sorted by id
    item_index: HashMap<ItemId, usize>,
    outfit_index: HashMap<OutfitId, usize>,
}

impl Dataset {
    pub fn new(
        d_img: usize,
        taxonomy: CategoryTaxonomy,
        mut items: Vec<Item>,
        mut outfits: Vec<Outfit>,
    ) -> Result<Self, DataError> {
        items.sort_by_key(|i| i.id);
        outfits.sort_by_key(|o| o.id);

        let mut item_index = HashMap::with_capacity(items.len());
        for (pos, item) in items.iter().enumerate() {
            if item_index.insert(item.id, pos).is_some() {
                return Err(DataError::Validation(format!("duplicate item id {}", item.id)));
            }
            if item.features.len() != d_img {
                return Err(DataError::Validation(format!(
                    "item {} has {} features, expected {d_img}",
                    item.id,
                    item.features.len()
                )));
            }
            if !item.features.iter().all(|f| f.is_finite()) {
                return Err(DataError::Validation(format!(
                    "item {} has non-finite features",
                    item.id
                )));
            }
            if item.fine_category >= taxonomy.num_fine() {
                return Err(DataError::Validation(format!(
                    "item {} references unknown fine category {}",
                    item.id, item.fine_category
                )));
            }
        }

        let mut outfit_index = HashMap::with_capacity(outfits.len());
        for (pos, outfit) in outfits.iter().enumerate() {
            if outfit_index.insert(outfit.id, pos).is_some() {
                return Err(DataError::Validation(format!(
                    "duplicate outfit id {}",
                    outfit.id
                )));
            }
            if outfit.item_ids.len() < 2 {
                return Err(DataError::Validation(format!(
                    "outfit {} has {} items, need at least 2",
                    outfit.id,
                    outfit.item_ids.len()
                )));
            }
            let mut seen_fine = HashSet::new();
            for &iid in &outfit.item_ids {
                let Some(&ipos) = item_index.get(&iid) else {
                    return Err(DataError::Validation(format!(
                        "outfit {} references unknown item {}",
                        outfit.id, iid
                    )));
                };
                let fine = items[ipos].fine_category;
                if !seen_fine.insert(fine) {
                    return Err(DataError::Validation(format!(
                        "outfit {} has two items of fine category {}",
                        outfit.id, fine
                    )));
                }
            }
        }

        Ok(Dataset {
            d_img,
            taxonomy,
            items,
            outfits,
            item_index,
            outfit_index,
        })
    }

    pub fn d_img(&self) -> usize {
        self.d_img
    }

    pub fn taxonomy(&self) -> &CategoryTaxonomy {
        &self.taxonomy
    }

    /// Items sorted by id.
    pub fn items(&self) -> &[Item] {
        &self.items
    }

    /// Outfits sorted by id.
    pub fn outfits(&self) -> &[Outfit] {
        &self.outfits
    }

    pub fn item(&self, id: ItemId) -> Result<&Item, DataError> {
        self.item_index
            .get(&id)
            .map(|&p| &self.items[p])
            .ok_or(DataError::UnknownItem(id))
    }

    pub fn outfit(&self, id: OutfitId) -> Result<&Outfit, DataError> {
        self.outfit_index
            .get(&id)
            .map(|&p| &self.outfits[p])
            .ok_or(DataError::UnknownOutfit(id))
    }

    /// Outfits of one split, in id order.
    pub fn split_outfits(&self, split: Split) -> Vec<&Outfit> {
        self.outfits.iter().filter(|o| o.split == split).collect()
    }

    /// The category of an item at the requested granularity.
    pub fn category_of(&self, item: ItemId, granularity: Granularity) -> Result<usize, DataError> {
        let fine = self.item(item)?.fine_category;
        match granularity {
            Granularity::Fine => Ok(fine),
            Granularity::Coarse => self.taxonomy.coarse_of(fine),
        }
    }

    /// All items of one category, sorted by item id.
    pub fn category_subset(
        &self,
        category: usize,
        granularity: Granularity,
    ) -> Result<Vec<ItemId>, DataError> {
        match granularity {
            Granularity::Fine => {
                if category >= self.taxonomy.num_fine() {
                    return Err(DataError::UnknownFine(category));
                }
                Ok(self
                    .items
                    .iter()
                    .filter(|i| i.fine_category == category)
                    .map(|i| i.id)
                    .collect())
            }
            Granularity::Coarse => {
                if category >= self.taxonomy.num_coarse() {
                    return Err(DataError::UnknownCoarse(category));
                }
                Ok(self
                    .items
                    .iter()
                    .filter(|i| self.taxonomy.fine_to_coarse[i.fine_category] == category)
                    .map(|i| i.id)
                    .collect())
            }
        }
    }
}

/// Serializes a dataset canonically: ids sorted, fixed field order, floats
/// at 17 significant digits. Equal datasets produce byte-identical files.
pub fn dataset_to_string(d: &Dataset) -> String {
    let mut out = String::new();
    out.push_str(&format!("H {}\n", d.d_img));
    for (id, name) in d.taxonomy.coarse_names.iter().enumerate() {
        out.push_str(&format!("T coarse {id} {name}\n"));
    }
    for (id, name) in d.taxonomy.fine_names.iter().enumerate() {
        out.push_str(&format!(
            "T fine {id} {name} {}\n",
            d.taxonomy.fine_to_coarse[id]
        ));
    }
    for item in &d.items {
        let mut line = format!("I {} {}", item.id, item.fine_category);
        for &f in &item.features {
            push_f64(&mut line, f);
        }
        line.push('\n');
        out.push_str(&line);
    }
    for outfit in &d.outfits {
        let mut line = format!("O {} {}", outfit.id, outfit.split.as_str());
        for &iid in &outfit.item_ids {
            line.push_str(&format!(" {iid}"));
        }
        line.push('\n');
        out.push_str(&line);
    }
    out
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<(), DataError> {
    fs::write(path, dataset_to_string(d))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path)?;
    dataset_from_str(&text)
}

pub fn dataset_from_str(text: &str) -> Result<Dataset, DataError> {
    let mut d_img: Option<usize> = None;
    let mut coarse: Vec<(usize, String)> = Vec::new();
    let mut fine: Vec<(usize, String, usize)> = Vec::new();
    let mut items: Vec<Item> = Vec::new();
    let mut outfits: Vec<Outfit> = Vec::new();

    let perr = |line: usize, msg: String| DataError::Parse { line, msg };

    for (lno, raw) in text.lines().enumerate() {
        let line = lno + 1;
        let f = fields(raw);
        if f.is_empty() {
            continue;
        }
        match f[0] {
            "H" => {
                if f.len() != 2 {
                    return Err(perr(line, "header needs exactly one field".into()));
                }
                if d_img.is_some() {
                    return Err(perr(line, "duplicate header".into()));
                }
                d_img = Some(parse_usize(f[1]).map_err(|m| perr(line, m))?);
            }
            "T" => match f.get(1).copied() {
                Some("coarse") => {
                    if f.len() != 4 {
                        return Err(perr(line, "coarse category needs id and name".into()));
                    }
                    let id = parse_usize(f[2]).map_err(|m| perr(line, m))?;
                    coarse.push((id, f[3].to_string()));
                }
                Some("fine") => {
                    if f.len() != 5 {
                        return Err(perr(line, "fine category needs id, name, coarse id".into()));
                    }
                    let id = parse_usize(f[2]).map_err(|m| perr(line, m))?;
                    let c = parse_usize(f[4]).map_err(|m| perr(line, m))?;
                    fine.push((id, f[3].to_string(), c));
                }
                other => {
                    return Err(perr(line, format!("unknown taxonomy kind {other:?}")));
                }
            },
            "I" => {
                if f.len() < 3 {
                    return Err(perr(line, "item needs id and fine category".into()));
                }
                let id = parse_u64(f[1]).map_err(|m| perr(line, m))?;
                let fine_category = parse_usize(f[2]).map_err(|m| perr(line, m))?;
                let mut features = Vec::with_capacity(f.len() - 3);
                for field in &f[3..] {
                    features.push(parse_f64(field).map_err(|m| perr(line, m))?);
                }
                items.push(Item {
                    id,
                    fine_category,
                    features,
                });
            }
            "O" => {
                if f.len() < 3 {
                    return Err(perr(line, "outfit needs id and split".into()));
                }
                let id = parse_u64(f[1]).map_err(|m| perr(line, m))?;
                let split = Split::parse(f[2])
                    .ok_or_else(|| perr(line, format!("unknown split {:?}", f[2])))?;
                let mut item_ids = Vec::with_capacity(f.len() - 3);
                for field in &f[3..] {
                    item_ids.push(parse_u64(field).map_err(|m| perr(line, m))?);
                }
                outfits.push(Outfit {
                    id,
                    split,
                    item_ids,
                });
            }
            other => {
                return Err(perr(line, format!("unknown record kind {other:?}")));
            }
        }
    }

    let d_img = d_img.ok_or_else(|| DataError::Validation("missing H header".into()))?;

    let dense_names = |mut pairs: Vec<(usize, String)>, kind: &str| -> Result<Vec<String>, DataError> {
        pairs.sort_by_key(|(id, _)| *id);
        for (expect, (id, _)) in pairs.iter().enumerate() {
            if *id != expect {
                return Err(DataError::Validation(format!(
                    "{kind} category ids are not dense 0-based (saw {id}, expected {expect})"
                )));
            }
        }
        Ok(pairs.into_iter().map(|(_, n)| n).collect())
    };

    let coarse_names = dense_names(coarse, "coarse")?;
    fine.sort_by_key(|(id, _, _)| *id);
    for (expect, (id, _, _)) in fine.iter().enumerate() {
        if *id != expect {
            return Err(DataError::Validation(format!(
                "fine category ids are not dense 0-based (saw {id}, expected {expect})"
            )));
        }
    }
    let fine_to_coarse: Vec<usize> = fine.iter().map(|(_, _, c)| *c).collect();
    let fine_names: Vec<String> = fine.into_iter().map(|(_, n, _)| n).collect();

    let taxonomy = CategoryTaxonomy::new(coarse_names, fine_names, fine_to_coarse)?;
    Dataset::new(d_img, taxonomy, items, outfits)
}
