//! Synthetic dataset generator with a planted latent-style structure.
//!
//! Every outfit gets a style vector drawn uniformly on the unit sphere in
//! `R^k`. An item planted for that outfit in fine category `c` has feature
//! `p_c + M_c * u + noise`, where `p_c` and `M_c` are a per-category
//! prototype and linear map. Distractor items carry independent styles.
//! Because the noise lives in feature space and the latent styles are kept,
//! the accompanying [`LatentRecord`] supports exact brute-force oracles for
//! best-item and compatibility questions, which the evaluation harness uses
//! as ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::data::{CategoryTaxonomy, DataError, Dataset, Item, ItemId, Outfit, OutfitId, Split};
use crate::textfmt::{fields, parse_f64, parse_u64, parse_usize, push_f64};

#[derive(Debug, Error)]
pub enum SynError {
    #[error("config: {0}")]
    Config(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub num_coarse: usize,
    pub fines_per_coarse: usize,
    pub items_per_fine: usize,
    pub num_outfits: usize,
    pub outfit_len: usize,
    pub style_dim: usize,
    pub d_img: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_coarse: 4,
            fines_per_coarse: 2,
            items_per_fine: 16,
            num_outfits: 200,
            outfit_len: 4,
            style_dim: 3,
            d_img: 8,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynError> {
        for (v, name) in [
            (self.num_coarse, "num_coarse"),
            (self.fines_per_coarse, "fines_per_coarse"),
            (self.items_per_fine, "items_per_fine"),
            (self.num_outfits, "num_outfits"),
            (self.outfit_len, "outfit_len"),
            (self.style_dim, "style_dim"),
            (self.d_img, "d_img"),
        ] {
            if v == 0 {
                return Err(SynError::Config(format!("{name} must be positive")));
            }
        }
        if self.outfit_len < 2 {
            return Err(SynError::Config("outfit_len must be at least 2".into()));
        }
        let num_fine = self.num_coarse * self.fines_per_coarse;
        if self.outfit_len > num_fine {
            return Err(SynError::Config(format!(
                "outfit_len {} exceeds the {} distinct fine categories available",
                self.outfit_len, num_fine
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SynError::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn num_fine(&self) -> usize {
        self.num_coarse * self.fines_per_coarse
    }
}

/// Ground-truth latent state kept alongside a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRecord {
    pub style_dim: usize,
    pub d_img: usize,
    /// outfit id -> unit style vector
    pub outfit_styles: BTreeMap<OutfitId, Vec<f64>>,
    /// item id -> unit style vector
    pub item_styles: BTreeMap<ItemId, Vec<f64>>,
    /// fine category id -> d_img x k map, row-major
    pub category_maps: Vec<Vec<f64>>,
    /// fine category id -> d_img prototype
    pub category_prototypes: Vec<Vec<f64>>,
}

impl LatentRecord {
    /// The candidate whose style best matches the mean style of the prefix
    /// items (highest dot product; ties broken by lowest item id).
    pub fn oracle_best_item(
        &self,
        prefix: &[ItemId],
        candidates: &[ItemId],
    ) -> Result<ItemId, SynError> {
        if candidates.is_empty() {
            return Err(SynError::Contract("empty candidate set".into()));
        }
        if prefix.is_empty() {
            return Err(SynError::Contract("empty prefix".into()));
        }
        let mut mean = vec![0.0; self.style_dim];
        for iid in prefix {
            let s = self.item_style(*iid)?;
            for (m, v) in mean.iter_mut().zip(s.iter()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= prefix.len() as f64;
        }
        let mut best: Option<(f64, ItemId)> = None;
        for &cand in candidates {
            let s = self.item_style(cand)?;
            let score: f64 = mean.iter().zip(s.iter()).map(|(a, b)| a * b).sum();
            let better = match best {
                None => true,
                Some((bs, bid)) => score > bs || (score == bs && cand < bid),
            };
            if better {
                best = Some((score, cand));
            }
        }
        Ok(best.expect("non-empty candidates").1)
    }

    /// Mean pairwise dot product of the item styles, in `[-1, 1]`.
    pub fn oracle_compat(&self, items: &[ItemId]) -> Result<f64, SynError> {
        if items.len() < 2 {
            return Err(SynError::Contract(
                "compatibility needs at least two items".into(),
            ));
        }
        let styles: Vec<&[f64]> = items
            .iter()
            .map(|&i| self.item_style(i))
            .collect::<Result<_, _>>()?;
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..styles.len() {
            for j in (i + 1)..styles.len() {
                total += styles[i]
                    .iter()
                    .zip(styles[j].iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
                pairs += 1;
            }
        }
        Ok(total / pairs as f64)
    }

    fn item_style(&self, id: ItemId) -> Result<&[f64], SynError> {
        self.item_styles
            .get(&id)
            .map(|v| v.as_slice())
            .ok_or_else(|| SynError::Contract(format!("no style recorded for item {id}")))
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates a dataset with planted compatibility plus the latent record
/// that defines its ground truth. Deterministic in `cfg.seed`.
pub fn generate(cfg: &GenConfig) -> Result<(Dataset, LatentRecord), SynError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let num_fine = cfg.num_fine();
    let (k, d_img) = (cfg.style_dim, cfg.d_img);

    let coarse_names: Vec<String> = (0..cfg.num_coarse).map(|c| format!("coarse{c}")).collect();
    let fine_names: Vec<String> = (0..num_fine).map(|f| format!("fine{f}")).collect();
    let fine_to_coarse: Vec<usize> = (0..num_fine).map(|f| f / cfg.fines_per_coarse).collect();
    let taxonomy = CategoryTaxonomy::new(coarse_names, fine_names, fine_to_coarse)?;

    // Per-category prototype and style-to-feature map.
    let mut category_maps = Vec::with_capacity(num_fine);
    let mut category_prototypes = Vec::with_capacity(num_fine);
    for _ in 0..num_fine {
        let m: Vec<f64> = (0..d_img * k)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let p: Vec<f64> = (0..d_img)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        category_maps.push(m);
        category_prototypes.push(p);
    }

    let feature_of = |style: &[f64], fine: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let m = &category_maps[fine];
        let p = &category_prototypes[fine];
        (0..d_img)
            .map(|r| {
                let proj: f64 = (0..k).map(|c| m[r * k + c] * style[c]).sum();
                let noise: f64 = rng.sample::<f64, _>(StandardNormal);
                p[r] + proj + cfg.noise_sigma * noise
            })
            .collect()
    };

    let mut outfit_styles = BTreeMap::new();
    let mut item_styles = BTreeMap::new();
    let mut items: Vec<Item> = Vec::new();
    let mut outfits: Vec<Outfit> = Vec::new();
    let mut per_fine_count = vec![0usize; num_fine];
    let mut next_item: ItemId = 0;

    let train_end = (cfg.num_outfits * 70) / 100;
    let val_end = (cfg.num_outfits * 85) / 100;

    for oid in 0..cfg.num_outfits as OutfitId {
        let style = unit_vector(&mut rng, k);
        // Distinct fine categories for this outfit, by partial shuffle.
        let mut cats: Vec<usize> = (0..num_fine).collect();
        for pos in 0..cfg.outfit_len {
            let j = rng.gen_range(pos..num_fine);
            cats.swap(pos, j);
        }
        let mut item_ids = Vec::with_capacity(cfg.outfit_len);
        for &fine in cats.iter().take(cfg.outfit_len) {
            let id = next_item;
            next_item += 1;
            items.push(Item {
                id,
                fine_category: fine,
                features: feature_of(&style, fine, &mut rng),
            });
            item_styles.insert(id, style.clone());
            per_fine_count[fine] += 1;
            item_ids.push(id);
        }
        let split = if (oid as usize) < train_end {
            Split::Train
        } else if (oid as usize) < val_end {
            Split::Val
        } else {
            Split::Test
        };
        outfits.push(Outfit {
            id: oid,
            split,
            item_ids,
        });
        outfit_styles.insert(oid, style);
    }

    // Top up each fine category with independent-style distractors.
    for fine in 0..num_fine {
        while per_fine_count[fine] < cfg.items_per_fine {
            let style = unit_vector(&mut rng, k);
            let id = next_item;
            next_item += 1;
            items.push(Item {
                id,
                fine_category: fine,
                features: feature_of(&style, fine, &mut rng),
            });
            item_styles.insert(id, style);
            per_fine_count[fine] += 1;
        }
    }

    let dataset = Dataset::new(d_img, taxonomy, items, outfits)?;
    let latent = LatentRecord {
        style_dim: k,
        d_img,
        outfit_styles,
        item_styles,
        category_maps,
        category_prototypes,
    };
    Ok((dataset, latent))
}

/// Canonical text serialization of a latent record.
pub fn latent_to_string(lat: &LatentRecord) -> String {
    let mut out = String::new();
    out.push_str(&format!("LH {} {}\n", lat.style_dim, lat.d_img));
    for (fine, m) in lat.category_maps.iter().enumerate() {
        let mut line = format!("CM {fine}");
        for &v in m {
            push_f64(&mut line, v);
        }
        line.push('\n');
        out.push_str(&line);
    }
    for (fine, p) in lat.category_prototypes.iter().enumerate() {
        let mut line = format!("CP {fine}");
        for &v in p {
            push_f64(&mut line, v);
        }
        line.push('\n');
        out.push_str(&line);
    }
    for (oid, s) in &lat.outfit_styles {
        let mut line = format!("OS {oid}");
        for &v in s {
            push_f64(&mut line, v);
        }
        line.push('\n');
        out.push_str(&line);
    }
    for (iid, s) in &lat.item_styles {
        let mut line = format!("IS {iid}");
        for &v in s {
            push_f64(&mut line, v);
        }
        line.push('\n');
        out.push_str(&line);
    }
    out
}

pub fn save_latent(lat: &LatentRecord, path: &Path) -> Result<(), SynError> {
    fs::write(path, latent_to_string(lat))?;
    Ok(())
}

pub fn load_latent(path: &Path) -> Result<LatentRecord, SynError> {
    let text = fs::read_to_string(path)?;
    latent_from_str(&text)
}

pub fn latent_from_str(text: &str) -> Result<LatentRecord, SynError> {
    let perr = |line: usize, msg: String| SynError::Parse { line, msg };
    let mut header: Option<(usize, usize)> = None;
    let mut maps: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut protos: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut outfit_styles = BTreeMap::new();
    let mut item_styles = BTreeMap::new();

    for (lno, raw) in text.lines().enumerate() {
        let line = lno + 1;
        let f = fields(raw);
        if f.is_empty() {
            continue;
        }
        let floats = |f: &[&str]| -> Result<Vec<f64>, SynError> {
            f.iter()
                .map(|x| parse_f64(x).map_err(|m| perr(line, m)))
                .collect()
        };
        match f[0] {
            "LH" => {
                if f.len() != 3 {
                    return Err(perr(line, "latent header needs k and d_img".into()));
                }
                let k = parse_usize(f[1]).map_err(|m| perr(line, m))?;
                let d = parse_usize(f[2]).map_err(|m| perr(line, m))?;
                header = Some((k, d));
            }
            "CM" => {
                let id = parse_usize(f[1]).map_err(|m| perr(line, m))?;
                maps.push((id, floats(&f[2..])?));
            }
            "CP" => {
                let id = parse_usize(f[1]).map_err(|m| perr(line, m))?;
                protos.push((id, floats(&f[2..])?));
            }
            "OS" => {
                let id = parse_u64(f[1]).map_err(|m| perr(line, m))?;
                outfit_styles.insert(id, floats(&f[2..])?);
            }
            "IS" => {
                let id = parse_u64(f[1]).map_err(|m| perr(line, m))?;
                item_styles.insert(id, floats(&f[2..])?);
            }
            other => return Err(perr(line, format!("unknown record kind {other:?}"))),
        }
    }

    let (style_dim, d_img) =
        header.ok_or_else(|| SynError::Contract("missing LH header".into()))?;
    maps.sort_by_key(|(id, _)| *id);
    protos.sort_by_key(|(id, _)| *id);
    Ok(LatentRecord {
        style_dim,
        d_img,
        outfit_styles,
        item_styles,
        category_maps: maps.into_iter().map(|(_, v)| v).collect(),
        category_prototypes: protos.into_iter().map(|(_, v)| v).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset_to_string;

    #[test]
    fn noiseless_identity_map_reproduces_styles() {
        // With k = d_img, M_c = I and p_c = 0, item features equal styles.
        let cfg = GenConfig {
            num_coarse: 2,
            fines_per_coarse: 1,
            items_per_fine: 2,
            num_outfits: 1,
            outfit_len: 2,
            style_dim: 3,
            d_img: 3,
            noise_sigma: 0.0,
            seed: 5,
        };
        let (mut dataset, mut latent) = generate(&cfg).unwrap();
        // Overwrite the category transforms and regenerate features by hand.
        for fine in 0..2 {
            latent.category_maps[fine] = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
            latent.category_prototypes[fine] = vec![0.0; 3];
        }
        let outfit = dataset.outfits()[0].clone();
        let style = latent.outfit_styles[&outfit.id].clone();
        let items: Vec<Item> = dataset
            .items()
            .iter()
            .map(|i| {
                let mut it = i.clone();
                if outfit.item_ids.contains(&i.id) {
                    it.features = style.clone();
                }
                it
            })
            .collect();
        dataset = Dataset::new(3, dataset.taxonomy().clone(), items, vec![outfit.clone()]).unwrap();
        for &iid in &outfit.item_ids {
            assert_eq!(dataset.item(iid).unwrap().features, style);
        }
    }

    #[test]
    fn single_outfit_plus_distractors() {
        let cfg = GenConfig {
            num_coarse: 2,
            fines_per_coarse: 1,
            items_per_fine: 3,
            num_outfits: 1,
            outfit_len: 2,
            style_dim: 2,
            d_img: 4,
            noise_sigma: 0.1,
            seed: 1,
        };
        let (dataset, latent) = generate(&cfg).unwrap();
        assert_eq!(dataset.outfits().len(), 1);
        assert_eq!(dataset.items().len(), 6); // 2 outfit items + 4 distractors
        assert_eq!(latent.item_styles.len(), 6);
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = GenConfig::default();
        let (d1, l1) = generate(&cfg).unwrap();
        let (d2, l2) = generate(&cfg).unwrap();
        assert_eq!(dataset_to_string(&d1), dataset_to_string(&d2));
        assert_eq!(latent_to_string(&l1), latent_to_string(&l2));
    }

    #[test]
    fn infeasible_outfit_len_is_config_error() {
        let cfg = GenConfig {
            num_coarse: 2,
            fines_per_coarse: 1,
            outfit_len: 3,
            ..GenConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(SynError::Config(_))));
    }

    #[test]
    fn generated_datasets_pass_validation_and_roundtrip() {
        let cfg = GenConfig {
            num_outfits: 20,
            ..GenConfig::default()
        };
        let (dataset, latent) = generate(&cfg).unwrap();
        let text = dataset_to_string(&dataset);
        let reloaded = crate::data::dataset_from_str(&text).unwrap();
        assert_eq!(dataset, reloaded);
        let lat_text = latent_to_string(&latent);
        let lat_reloaded = latent_from_str(&lat_text).unwrap();
        assert_eq!(latent, lat_reloaded);
    }

    #[test]
    fn splits_are_70_15_15_by_outfit_id() {
        let cfg = GenConfig {
            num_outfits: 100,
            ..GenConfig::default()
        };
        let (dataset, _) = generate(&cfg).unwrap();
        assert_eq!(dataset.split_outfits(Split::Train).len(), 70);
        assert_eq!(dataset.split_outfits(Split::Val).len(), 15);
        assert_eq!(dataset.split_outfits(Split::Test).len(), 15);
        assert!(dataset.split_outfits(Split::Train).iter().all(|o| o.id < 70));
    }

    #[test]
    fn oracle_best_item_prefers_true_outfit_member() {
        let cfg = GenConfig {
            noise_sigma: 0.0,
            num_outfits: 10,
            ..GenConfig::default()
        };
        let (dataset, latent) = generate(&cfg).unwrap();
        let outfit = &dataset.outfits()[3];
        let truth = outfit.item_ids[2];
        let prefix: Vec<ItemId> = outfit
            .item_ids
            .iter()
            .copied()
            .filter(|&i| i != truth)
            .collect();
        // Mix the truth with distractors of the same fine category.
        let fine = dataset.item(truth).unwrap().fine_category;
        let mut candidates = dataset
            .category_subset(fine, Granularity::Fine)
            .unwrap()
            .into_iter()
            .filter(|i| !outfit.item_ids.contains(i) || *i == truth)
            .collect::<Vec<_>>();
        candidates.sort_unstable();
        let winner = latent.oracle_best_item(&prefix, &candidates).unwrap();
        assert_eq!(winner, truth);
    }

    use crate::data::Granularity;

    #[test]
    fn oracle_best_item_single_candidate() {
        let (dataset, latent) = generate(&GenConfig::default()).unwrap();
        let outfit = &dataset.outfits()[0];
        let winner = latent
            .oracle_best_item(&outfit.item_ids[..2], &[outfit.item_ids[2]])
            .unwrap();
        assert_eq!(winner, outfit.item_ids[2]);
    }

    #[test]
    fn oracle_best_item_matches_exhaustive_scan() {
        let (dataset, latent) = generate(&GenConfig::default()).unwrap();
        let outfit = &dataset.outfits()[7];
        let prefix = &outfit.item_ids[..2];
        let candidates: Vec<ItemId> = dataset.items().iter().map(|i| i.id).take(40).collect();
        let winner = latent.oracle_best_item(prefix, &candidates).unwrap();
        // Independent exhaustive scan.
        let mut mean = vec![0.0; latent.style_dim];
        for iid in prefix {
            for (m, v) in mean.iter_mut().zip(latent.item_styles[iid].iter()) {
                *m += v / prefix.len() as f64;
            }
        }
        let mut best = candidates[0];
        let mut best_score = f64::NEG_INFINITY;
        for &c in &candidates {
            let s: f64 = mean
                .iter()
                .zip(latent.item_styles[&c].iter())
                .map(|(a, b)| a * b)
                .sum();
            if s > best_score {
                best_score = s;
                best = c;
            }
        }
        assert_eq!(winner, best);
    }

    #[test]
    fn oracle_compat_is_one_for_shared_style() {
        let cfg = GenConfig {
            noise_sigma: 0.0,
            ..GenConfig::default()
        };
        let (dataset, latent) = generate(&cfg).unwrap();
        let outfit = &dataset.outfits()[0];
        let c = latent.oracle_compat(&outfit.item_ids).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_compat_orthogonal_styles_is_zero() {
        let latent = LatentRecord {
            style_dim: 2,
            d_img: 2,
            outfit_styles: BTreeMap::new(),
            item_styles: BTreeMap::from([(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]),
            category_maps: vec![],
            category_prototypes: vec![],
        };
        assert_eq!(latent.oracle_compat(&[0, 1]).unwrap(), 0.0);
        assert!(latent.oracle_compat(&[0]).is_err());
    }

    #[test]
    fn oracle_compat_matches_pairwise_loop() {
        let (dataset, latent) = generate(&GenConfig::default()).unwrap();
        let ids: Vec<ItemId> = dataset.outfits()[2].item_ids.clone();
        let got = latent.oracle_compat(&ids).unwrap();
        let mut total = 0.0;
        let mut n = 0;
        for i in 0..ids.len() {
            for j in (i + 1)..ids.len() {
                let a = &latent.item_styles[&ids[i]];
                let b = &latent.item_styles[&ids[j]];
                total += a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>();
                n += 1;
            }
        }
        assert!((got - total / n as f64).abs() < 1e-12);
    }

    #[test]
    fn distractors_do_not_share_outfit_styles() {
        let (dataset, latent) = generate(&GenConfig::default()).unwrap();
        let outfit_items: std::collections::HashSet<ItemId> = dataset
            .outfits()
            .iter()
            .flat_map(|o| o.item_ids.iter().copied())
            .collect();
        for item in dataset.items() {
            if !outfit_items.contains(&item.id) {
                for style in latent.outfit_styles.values() {
                    assert_ne!(&latent.item_styles[&item.id], style);
                }
            }
        }
    }
}
