//! The mixed category attention net (MCAN).
//!
//! A tuple pairs an item with a category at fine or coarse granularity. The
//! model embeds categories through per-granularity lookup tables, attends
//! over the tuples already chosen (causally, so position `i` sees only
//! positions `<= i`), mixes each attended item representation with its
//! category embedding, and scores candidate items of a requested category
//! against the last tuple representation. A category prediction head (CPL)
//! additionally predicts the next category; disabling it (`use_cpl = false`)
//! is the MAN ablation.
//!
//! There is no positional encoding anywhere, so the representation of the
//! last tuple is invariant to permutations of the tuples before it.

pub(crate) mod graph;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{uniform_tensor, Ffn, Tape, Tensor, TensorError};
use crate::data::{DataError, Dataset, Granularity, ItemId, TupleSeq};

use graph::ModelVars;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("config: {0}")]
    Config(String),
    #[error("unknown {granularity} category {id}")]
    UnknownCategory { granularity: &'static str, id: usize },
    #[error("category prediction is disabled in this model (MAN ablation)")]
    CplDisabled,
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("candidate {item} does not belong to {expected}")]
    WrongCategory { item: ItemId, expected: String },
    #[error("target item {0} is not in the candidate pool")]
    TargetNotInPool(ItemId),
    #[error("sequence of length {len} is too short, need at least {need}")]
    SeqTooShort { len: usize, need: usize },
    #[error("feature width {got} does not match model d_img {expected}")]
    FeatureWidth { expected: usize, got: usize },
}

/// A category reference: an id within one granularity's table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CatRef {
    pub granularity: Granularity,
    pub id: usize,
}

impl CatRef {
    pub fn fine(id: usize) -> Self {
        CatRef {
            granularity: Granularity::Fine,
            id,
        }
    }

    pub fn coarse(id: usize) -> Self {
        CatRef {
            granularity: Granularity::Coarse,
            id,
        }
    }
}

impl std::fmt::Display for CatRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} category {}", self.granularity.as_str(), self.id)
    }
}

/// Architecture hyperparameters. `d_img` must match the dataset's feature
/// width; everything else is a free choice.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Compatibility space dimension.
    pub d: usize,
    /// Item feature width.
    pub d_img: usize,
    /// Category embedding width.
    pub d_c: usize,
    pub hidden_attn: usize,
    pub hidden_mix_fine: usize,
    pub hidden_mix_coarse: usize,
    pub hidden_scorer: usize,
    /// `false` removes the category prediction heads (the MAN ablation).
    pub use_cpl: bool,
    /// When set, training softmax denominators are subsampled to this many
    /// same-category candidates (the target always included).
    pub sample_k: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 512,
            d_img: 8,
            d_c: 64,
            hidden_attn: 128,
            hidden_mix_fine: 128,
            hidden_mix_coarse: 128,
            hidden_scorer: 128,
            use_cpl: true,
            sample_k: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (v, name) in [
            (self.d, "d"),
            (self.d_img, "d_img"),
            (self.d_c, "d_c"),
            (self.hidden_attn, "hidden_attn"),
            (self.hidden_mix_fine, "hidden_mix_fine"),
            (self.hidden_mix_coarse, "hidden_mix_coarse"),
            (self.hidden_scorer, "hidden_scorer"),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if let Some(k) = self.sample_k {
            if k < 2 {
                return Err(ModelError::Config("sample_k must be at least 2".into()));
            }
        }
        Ok(())
    }
}

/// All learnable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct McanParams {
    /// Fine category embedding table, `|fine| × d_c`.
    pub e_fine: Tensor,
    /// Coarse category embedding table, `|coarse| × d_c`.
    pub e_coarse: Tensor,
    /// Attention query projection, `d × d_img`.
    pub w_f: Tensor,
    /// Attention key/value projection, `d × d_img`.
    pub w_g: Tensor,
    /// Candidate projection, `d × d_img`.
    pub w_h: Tensor,
    /// Attention scorer `a`: `2d -> 1`.
    pub attn: Ffn,
    /// Fine feature mixer `f`: `d + d_c -> d`.
    pub mix_fine: Ffn,
    /// Coarse feature mixer `f'`: `d + d_c -> d`.
    pub mix_coarse: Ffn,
    /// Tuple scorer `s`: `2d -> 1`.
    pub scorer: Ffn,
    /// Fine category head: `d -> |fine|` logits; absent in the MAN ablation.
    pub cpl_fine: Option<Ffn>,
    /// Coarse category head: `d -> |coarse|` logits.
    pub cpl_coarse: Option<Ffn>,
}

impl McanParams {
    /// Named tensors in canonical order; the order fixes checkpoint layout,
    /// SGD update order and initialization draws.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("e_fine".into(), &self.e_fine),
            ("e_coarse".into(), &self.e_coarse),
            ("w_f".into(), &self.w_f),
            ("w_g".into(), &self.w_g),
            ("w_h".into(), &self.w_h),
        ];
        for (name, ffn) in [
            ("attn", &self.attn),
            ("mix_fine", &self.mix_fine),
            ("mix_coarse", &self.mix_coarse),
            ("scorer", &self.scorer),
        ] {
            for (i, layer) in ffn.layers.iter().enumerate() {
                out.push((format!("{name}.{i}.w"), &layer.w));
                out.push((format!("{name}.{i}.b"), &layer.b));
            }
        }
        for (name, ffn) in [("cpl_fine", &self.cpl_fine), ("cpl_coarse", &self.cpl_coarse)] {
            if let Some(ffn) = ffn {
                for (i, layer) in ffn.layers.iter().enumerate() {
                    out.push((format!("{name}.{i}.w"), &layer.w));
                    out.push((format!("{name}.{i}.b"), &layer.b));
                }
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("e_fine".into(), &mut self.e_fine),
            ("e_coarse".into(), &mut self.e_coarse),
            ("w_f".into(), &mut self.w_f),
            ("w_g".into(), &mut self.w_g),
            ("w_h".into(), &mut self.w_h),
        ];
        for (name, ffn) in [
            ("attn", &mut self.attn),
            ("mix_fine", &mut self.mix_fine),
            ("mix_coarse", &mut self.mix_coarse),
            ("scorer", &mut self.scorer),
        ] {
            for (i, layer) in ffn.layers.iter_mut().enumerate() {
                out.push((format!("{name}.{i}.w"), &mut layer.w));
                out.push((format!("{name}.{i}.b"), &mut layer.b));
            }
        }
        for (name, ffn) in [
            ("cpl_fine", &mut self.cpl_fine),
            ("cpl_coarse", &mut self.cpl_coarse),
        ] {
            if let Some(ffn) = ffn {
                for (i, layer) in ffn.layers.iter_mut().enumerate() {
                    out.push((format!("{name}.{i}.w"), &mut layer.w));
                    out.push((format!("{name}.{i}.b"), &mut layer.b));
                }
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// One resolved input tuple: item features plus the category id at the
/// tuple's granularity.
#[derive(Debug, Clone)]
pub struct TupleView<'a> {
    pub item_id: ItemId,
    pub features: &'a [f64],
    pub category_id: usize,
    pub granularity: Granularity,
}

/// Resolves a [`TupleSeq`] against a dataset into model input views.
pub fn resolve_seq<'a>(
    dataset: &'a Dataset,
    seq: &TupleSeq,
) -> Result<Vec<TupleView<'a>>, ModelError> {
    seq.entries()
        .iter()
        .map(|&(item_id, granularity)| {
            let item = dataset.item(item_id)?;
            let category_id = dataset.category_of(item_id, granularity)?;
            Ok(TupleView {
                item_id,
                features: &item.features,
                category_id,
                granularity,
            })
        })
        .collect()
}

/// A category-stamped candidate list with features laid out `K × d_img`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub category: CatRef,
    pub item_ids: Vec<ItemId>,
    pub features: Vec<f64>,
    pub d_img: usize,
}

impl CandidateSet {
    /// Builds a set from explicit item ids, checking each item belongs to
    /// the stamped category.
    pub fn from_items(
        dataset: &Dataset,
        category: CatRef,
        item_ids: &[ItemId],
    ) -> Result<Self, ModelError> {
        if item_ids.is_empty() {
            return Err(ModelError::EmptyCandidates);
        }
        let d_img = dataset.d_img();
        let mut features = Vec::with_capacity(item_ids.len() * d_img);
        for &iid in item_ids {
            let got = dataset.category_of(iid, category.granularity)?;
            if got != category.id {
                return Err(ModelError::WrongCategory {
                    item: iid,
                    expected: category.to_string(),
                });
            }
            features.extend_from_slice(&dataset.item(iid)?.features);
        }
        Ok(CandidateSet {
            category,
            item_ids: item_ids.to_vec(),
            features,
            d_img,
        })
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn index_of(&self, item: ItemId) -> Option<usize> {
        self.item_ids.iter().position(|&i| i == item)
    }
}

/// Per-category candidate pools for a whole dataset.
#[derive(Debug, Clone)]
pub struct PoolSet {
    pub(crate) fine: Vec<CandidateSet>,
    pub(crate) coarse: Vec<CandidateSet>,
}

impl PoolSet {
    pub fn build(dataset: &Dataset) -> Result<Self, ModelError> {
        let tax = dataset.taxonomy();
        let mut fine = Vec::with_capacity(tax.num_fine());
        for c in 0..tax.num_fine() {
            let ids = dataset.category_subset(c, Granularity::Fine)?;
            fine.push(CandidateSet::from_items(dataset, CatRef::fine(c), &ids)?);
        }
        let mut coarse = Vec::with_capacity(tax.num_coarse());
        for c in 0..tax.num_coarse() {
            let ids = dataset.category_subset(c, Granularity::Coarse)?;
            coarse.push(CandidateSet::from_items(dataset, CatRef::coarse(c), &ids)?);
        }
        Ok(PoolSet { fine, coarse })
    }

    pub fn get(&self, cat: CatRef) -> Result<&CandidateSet, ModelError> {
        let table = match cat.granularity {
            Granularity::Fine => &self.fine,
            Granularity::Coarse => &self.coarse,
        };
        table.get(cat.id).ok_or(ModelError::UnknownCategory {
            granularity: cat.granularity.as_str(),
            id: cat.id,
        })
    }
}

/// A configured model with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mcan {
    pub cfg: ModelConfig,
    pub params: McanParams,
}

impl Mcan {
    /// Fresh parameters: weights uniform with fan-in scaling
    /// (`±sqrt(6 / fan_in)`), biases zero, drawn in canonical parameter
    /// order from the given seed.
    pub fn init(
        cfg: ModelConfig,
        num_fine: usize,
        num_coarse: usize,
        seed: u64,
    ) -> Result<Mcan, ModelError> {
        cfg.validate()?;
        if num_fine == 0 || num_coarse == 0 {
            return Err(ModelError::Config(
                "taxonomy must have at least one category per granularity".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let table_scale = (6.0 / cfg.d_c as f64).sqrt();
        let proj_scale = (6.0 / cfg.d_img as f64).sqrt();
        let params = McanParams {
            e_fine: uniform_tensor(r, vec![num_fine, cfg.d_c], table_scale),
            e_coarse: uniform_tensor(r, vec![num_coarse, cfg.d_c], table_scale),
            w_f: uniform_tensor(r, vec![cfg.d, cfg.d_img], proj_scale),
            w_g: uniform_tensor(r, vec![cfg.d, cfg.d_img], proj_scale),
            w_h: uniform_tensor(r, vec![cfg.d, cfg.d_img], proj_scale),
            attn: Ffn::init(&[2 * cfg.d, cfg.hidden_attn, 1], r),
            mix_fine: Ffn::init(&[cfg.d + cfg.d_c, cfg.hidden_mix_fine, cfg.d], r),
            mix_coarse: Ffn::init(&[cfg.d + cfg.d_c, cfg.hidden_mix_coarse, cfg.d], r),
            scorer: Ffn::init(&[2 * cfg.d, cfg.hidden_scorer, 1], r),
            cpl_fine: cfg.use_cpl.then(|| Ffn::init(&[cfg.d, num_fine], r)),
            cpl_coarse: cfg.use_cpl.then(|| Ffn::init(&[cfg.d, num_coarse], r)),
        };
        Ok(Mcan { cfg, params })
    }

    pub fn num_fine(&self) -> usize {
        self.params.e_fine.shape()[0]
    }

    pub fn num_coarse(&self) -> usize {
        self.params.e_coarse.shape()[0]
    }

    fn check_cat(&self, cat: CatRef) -> Result<(), ModelError> {
        let bound = match cat.granularity {
            Granularity::Fine => self.num_fine(),
            Granularity::Coarse => self.num_coarse(),
        };
        if cat.id >= bound {
            return Err(ModelError::UnknownCategory {
                granularity: cat.granularity.as_str(),
                id: cat.id,
            });
        }
        Ok(())
    }

    /// Rows of the matching embedding table, `n × d_c`.
    pub fn embed_categories(
        &self,
        ids: &[usize],
        granularity: Granularity,
    ) -> Result<Tensor, ModelError> {
        for &id in ids {
            self.check_cat(CatRef { granularity, id })?;
        }
        let tape = Tape::new();
        let vars = ModelVars::bind(&tape, &self.params);
        let out = tape.gather_rows(vars.table(granularity), ids)?;
        Ok(tape.tensor(out))
    }

    /// Causal self-attention over item features `N × d_img`, returning the
    /// attended representations `N × d`.
    pub fn attend(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.attention(x)?.1)
    }

    /// Like [`Mcan::attend`] but also returns the attention matrix `N × N`
    /// (rows sum to 1; strictly-upper entries are exactly zero).
    pub fn attention(&self, x: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        self.check_features(x)?;
        let tape = Tape::new();
        let vars = ModelVars::bind(&tape, &self.params);
        let xid = tape.leaf(x);
        let (alpha, h) = graph::attend(&tape, &vars, xid, x.shape()[0])?;
        Ok((tape.tensor(alpha), tape.tensor(h)))
    }

    fn check_features(&self, x: &Tensor) -> Result<(), ModelError> {
        if x.shape().len() != 2 || x.shape()[1] != self.cfg.d_img {
            return Err(ModelError::FeatureWidth {
                expected: self.cfg.d_img,
                got: x.shape().last().copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    /// Mixes one attended representation with one category embedding via
    /// the granularity's mixer net.
    pub fn mix(
        &self,
        h: &[f64],
        c: &[f64],
        granularity: Granularity,
    ) -> Result<Vec<f64>, ModelError> {
        if h.len() != self.cfg.d || c.len() != self.cfg.d_c {
            return Err(ModelError::Config(format!(
                "mix expects widths d={} and d_c={}, got {} and {}",
                self.cfg.d,
                self.cfg.d_c,
                h.len(),
                c.len()
            )));
        }
        let tape = Tape::new();
        let vars = ModelVars::bind(&tape, &self.params);
        let hid = tape.constant(vec![1, h.len()], h.to_vec())?;
        let cid = tape.constant(vec![1, c.len()], c.to_vec())?;
        let cat = tape.concat_cols(hid, cid)?;
        let out = crate::autograd::ffn_graph(&tape, vars.mixer(granularity), cat)?;
        Ok(tape.values(out))
    }

    /// Probability of each candidate being the next item, conditioned on
    /// the prefix and the candidates' (shared) category.
    ///
    /// Items outside `next_cat` are excluded by construction: the candidate
    /// set is stamped with its category and a mismatch is a contract error.
    pub fn item_distribution(
        &self,
        prefix: &[TupleView<'_>],
        next_cat: CatRef,
        candidates: &CandidateSet,
    ) -> Result<Vec<f64>, ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::SeqTooShort { len: 0, need: 1 });
        }
        if candidates.is_empty() {
            return Err(ModelError::EmptyCandidates);
        }
        if candidates.category != next_cat {
            return Err(ModelError::WrongCategory {
                item: candidates.item_ids[0],
                expected: next_cat.to_string(),
            });
        }
        self.check_cat(next_cat)?;
        let tape = Tape::new();
        let vars = ModelVars::bind(&tape, &self.params);
        let t_last = graph::prefix_repr(&tape, &vars, &self.cfg, prefix)?;
        let logits = graph::step_logits(&tape, &vars, &self.cfg, t_last, next_cat, candidates)?;
        let probs = tape.softmax_rows(logits, None)?;
        Ok(tape.values(probs))
    }

    /// Probability of each category (at one granularity) being the next
    /// category. Requires the CPL heads.
    pub fn category_distribution(
        &self,
        prefix: &[TupleView<'_>],
        granularity: Granularity,
    ) -> Result<Vec<f64>, ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::SeqTooShort { len: 0, need: 1 });
        }
        let tape = Tape::new();
        let vars = ModelVars::bind(&tape, &self.params);
        let t_last = graph::prefix_repr(&tape, &vars, &self.cfg, prefix)?;
        let head = vars.cpl(granularity).ok_or(ModelError::CplDisabled)?;
        let logits = crate::autograd::ffn_graph(&tape, head, t_last)?;
        let probs = tape.softmax_rows(logits, None)?;
        Ok(tape.values(probs))
    }

    /// Log-likelihood of a full tuple sequence under the chain-rule
    /// factorization; the first-tuple prior is a constant 0. With CPL
    /// disabled only the item terms contribute.
    pub fn outfit_loglik(
        &self,
        seq: &[TupleView<'_>],
        pools: &PoolSet,
    ) -> Result<f64, ModelError> {
        let (ll, tape, _) = self.loglik_graph(seq, pools)?;
        Ok(tape.values(ll)[0])
    }

    /// `outfit_loglik` plus its gradient with respect to every named
    /// parameter tensor, in canonical order.
    pub fn outfit_loglik_gradients(
        &self,
        seq: &[TupleView<'_>],
        pools: &PoolSet,
    ) -> Result<(f64, Vec<(String, Vec<f64>)>), ModelError> {
        let (ll, tape, vars) = self.loglik_graph(seq, pools)?;
        let grads = tape.backward(ll)?;
        let out = self
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
        Ok((tape.values(ll)[0], out))
    }

    fn loglik_graph(
        &self,
        seq: &[TupleView<'_>],
        pools: &PoolSet,
    ) -> Result<(crate::autograd::TensorId, Tape, ModelVars), ModelError> {
        if seq.len() < 2 {
            return Err(ModelError::SeqTooShort {
                len: seq.len(),
                need: 2,
            });
        }
        let tape = Tape::new();
        let vars = ModelVars::bind(&tape, &self.params);
        let steps = graph::full_steps(seq, pools)?;
        let ll = graph::outfit_loglik_graph(&tape, &vars, &self.cfg, seq, &steps)?;
        Ok((ll, tape, vars))
    }
}
