//! Deterministic mini-batch SGD training with the negative-sampling
//! curriculum, plus checkpoint and training-log serialization.
//!
//! Everything random is derived from `TrainConfig::seed` through labeled
//! sub-seeds, so a `(seed, config, dataset)` triple fixes the whole training
//! trajectory bit for bit.

use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{sgd_step, Affine, Ffn, Tape, Tensor, TensorError};
use crate::data::{DataError, Dataset, Granularity, Split};
use crate::model::graph::ModelVars;
use crate::model::{Mcan, McanParams, ModelConfig, ModelError, PoolSet};
use crate::objectives::{schedule_level, LossWeights, ObjError, SamplingLevel, TrainBatch};
use crate::seeding::derive_seed;
use crate::textfmt::{fields, fmt_f64, parse_f64, parse_usize, push_f64};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Eval(#[from] crate::evaluator::EvalError),
}

/// Optional step decay: `lr <- lr * factor` every `every` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrDecay {
    pub every: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Run a validation FITB pass every this many epochs (0 = never).
    pub eval_every: usize,
    pub triplet_enabled: bool,
    pub triplet_granularity: Granularity,
    pub lr_decay: Option<LrDecay>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 0.01,
            batch_size: 20,
            epochs: 10,
            weights: LossWeights::default(),
            seed: 0,
            eval_every: 0,
            triplet_enabled: true,
            triplet_granularity: Granularity::Fine,
            lr_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        // lr = 0 and epochs = 0 are allowed; both degenerate to "return the
        // initial parameters" and are useful for probing untrained models.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config("lr must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.weights.mu < 0.0 || self.weights.lambda1 < 0.0 || self.weights.lambda2 < 0.0 {
            return Err(TrainError::Config(
                "mu, lambda1 and lambda2 must be non-negative".into(),
            ));
        }
        if let Some(d) = self.lr_decay {
            if d.every == 0 || !(d.factor > 0.0 && d.factor <= 1.0) {
                return Err(TrainError::Config("invalid lr decay".into()));
            }
        }
        self.model.validate()?;
        Ok(())
    }
}

/// One completed epoch of the log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub level: SamplingLevel,
    pub loss_fine: f64,
    pub loss_coarse: f64,
    pub loss_triplet: f64,
    pub loss_total: f64,
    pub val_fitb: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Line-delimited text: one `E` record per epoch.
    pub fn to_string(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            let mut line = format!("E {} {}", r.epoch, r.level.as_str());
            for v in [r.loss_fine, r.loss_coarse, r.loss_triplet, r.loss_total] {
                push_f64(&mut line, v);
            }
            match r.val_fitb {
                Some(v) => line.push_str(&format!(" {}", fmt_f64(v))),
                None => line.push_str(" -"),
            }
            line.push_str(&format!(" {:.3}", r.seconds));
            line.push('\n');
            out.push_str(&line);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_string())?;
        Ok(())
    }
}

/// Trains a fresh model on the dataset's train split.
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<(Mcan, TrainLog), TrainError> {
    cfg.validate()?;
    let model_cfg = cfg.model.clone();
    if model_cfg.d_img != dataset.d_img() {
        return Err(TrainError::Config(format!(
            "model d_img {} does not match dataset d_img {}",
            model_cfg.d_img,
            dataset.d_img()
        )));
    }
    model_cfg.validate()?;

    let train_outfits = dataset.split_outfits(Split::Train);
    if train_outfits.is_empty() {
        return Err(TrainError::Config("empty train split".into()));
    }

    let tax = dataset.taxonomy();
    let mut model = Mcan::init(
        model_cfg,
        tax.num_fine(),
        tax.num_coarse(),
        derive_seed(cfg.seed, "init"),
    )?;
    let pools = PoolSet::build(dataset)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "negatives"));
    let mut pool_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pooldraw"));

    let mut log = TrainLog::default();
    let mut lr = cfg.lr;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let level = schedule_level(epoch, cfg.epochs)?;
        if let Some(decay) = cfg.lr_decay {
            if epoch > 0 && epoch % decay.every == 0 {
                lr *= decay.factor;
            }
        }

        let mut order: Vec<usize> = (0..train_outfits.len()).collect();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_outfits: Vec<&crate::data::Outfit> =
                chunk.iter().map(|&i| train_outfits[i]).collect();
            let batch = TrainBatch::from_outfits(
                dataset,
                &batch_outfits,
                cfg.triplet_enabled.then_some(level),
                cfg.triplet_granularity,
                &mut sample_rng,
            )?;

            let tape = Tape::new();
            let vars = ModelVars::bind(&tape, &model.params);
            let (total, losses) = crate::objectives::total_loss_graph(
                &tape,
                &vars,
                &model.cfg,
                dataset,
                &pools,
                &batch,
                &cfg.weights,
                Some(&mut pool_rng),
            )?;
            let grads = tape.backward(total)?;

            let ids = vars.ids_in_order();
            let mut named = model.params.named_tensors_mut();
            let mut pairs: Vec<(crate::autograd::TensorId, &mut Tensor)> = ids
                .into_iter()
                .zip(named.iter_mut().map(|(_, t)| &mut **t))
                .collect();
            sgd_step(&mut pairs, &grads, lr)?;

            let w = batch_outfits.len() as f64;
            sums.0 += losses.fine * w;
            sums.1 += losses.coarse * w;
            sums.2 += losses.triplet * w;
            sums.3 += losses.total * w;
            seen += batch_outfits.len();
        }

        let val_fitb = if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            validation_fitb(&model, dataset, cfg.seed)?
        } else {
            None
        };

        let n = seen as f64;
        log.epochs.push(EpochRecord {
            epoch,
            level,
            loss_fine: sums.0 / n,
            loss_coarse: sums.1 / n,
            loss_triplet: sums.2 / n,
            loss_total: sums.3 / n,
            val_fitb,
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    Ok((model, log))
}

fn validation_fitb(
    model: &Mcan,
    dataset: &Dataset,
    seed: u64,
) -> Result<Option<f64>, TrainError> {
    if dataset.split_outfits(Split::Val).is_empty() {
        return Ok(None);
    }
    let questions = crate::evaluator::build_fitb(
        dataset,
        Split::Val,
        SamplingLevel::Easy,
        Granularity::Fine,
        derive_seed(seed, "val"),
    )?;
    let acc = crate::evaluator::fitb_accuracy(model, dataset, &questions)?;
    Ok(Some(acc))
}

// ── Checkpoints ────────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &str = "MCAN 1";

/// Canonical text serialization: a version line, the config, then every
/// named tensor in canonical order. Byte-stable for identical parameters.
pub fn checkpoint_to_string(model: &Mcan) -> String {
    let cfg = &model.cfg;
    let mut out = String::new();
    out.push_str(CHECKPOINT_MAGIC);
    out.push('\n');
    out.push_str(&format!(
        "C {} {} {} {} {} {} {} {} {}\n",
        cfg.d,
        cfg.d_img,
        cfg.d_c,
        cfg.hidden_attn,
        cfg.hidden_mix_fine,
        cfg.hidden_mix_coarse,
        cfg.hidden_scorer,
        if cfg.use_cpl { 1 } else { 0 },
        cfg.sample_k.map_or(0, |k| k),
    ));
    for (name, tensor) in model.params.named_tensors() {
        let mut line = format!("P {name} {}", tensor.shape().len());
        for d in tensor.shape() {
            line.push_str(&format!(" {d}"));
        }
        for &v in tensor.values() {
            push_f64(&mut line, v);
        }
        line.push('\n');
        out.push_str(&line);
    }
    out
}

pub fn save_checkpoint(model: &Mcan, path: &Path) -> Result<(), TrainError> {
    fs::write(path, checkpoint_to_string(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Mcan, TrainError> {
    let text = fs::read_to_string(path)?;
    checkpoint_from_str(&text)
}

pub fn checkpoint_from_str(text: &str) -> Result<Mcan, TrainError> {
    let cerr = |msg: String| TrainError::Checkpoint(msg);
    let mut lines = text.lines().enumerate();
    let (_, magic) = lines
        .next()
        .ok_or_else(|| cerr("empty checkpoint".into()))?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(cerr(format!("unsupported version line {magic:?}")));
    }

    let mut cfg: Option<ModelConfig> = None;
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (lno, raw) in lines {
        let line = lno + 1;
        let f = fields(raw);
        if f.is_empty() {
            continue;
        }
        match f[0] {
            "C" => {
                if f.len() != 10 {
                    return Err(cerr(format!("line {line}: config needs 9 fields")));
                }
                let num = |i: usize| parse_usize(f[i]).map_err(|m| cerr(format!("line {line}: {m}")));
                let sample_k = num(9)?;
                cfg = Some(ModelConfig {
                    d: num(1)?,
                    d_img: num(2)?,
                    d_c: num(3)?,
                    hidden_attn: num(4)?,
                    hidden_mix_fine: num(5)?,
                    hidden_mix_coarse: num(6)?,
                    hidden_scorer: num(7)?,
                    use_cpl: num(8)? != 0,
                    sample_k: (sample_k != 0).then_some(sample_k),
                });
            }
            "P" => {
                if f.len() < 3 {
                    return Err(cerr(format!("line {line}: truncated tensor record")));
                }
                let name = f[1].to_string();
                let ndim = parse_usize(f[2]).map_err(|m| cerr(format!("line {line}: {m}")))?;
                if f.len() < 3 + ndim {
                    return Err(cerr(format!("line {line}: truncated shape")));
                }
                let mut shape = Vec::with_capacity(ndim);
                for i in 0..ndim {
                    shape.push(parse_usize(f[3 + i]).map_err(|m| cerr(format!("line {line}: {m}")))?);
                }
                let expected: usize = shape.iter().product();
                let rest = &f[3 + ndim..];
                if rest.len() != expected {
                    return Err(cerr(format!(
                        "line {line}: tensor {name} expects {expected} values, found {}",
                        rest.len()
                    )));
                }
                let mut values = Vec::with_capacity(expected);
                for field in rest {
                    values.push(parse_f64(field).map_err(|m| cerr(format!("line {line}: {m}")))?);
                }
                let tensor = Tensor::new(shape, values)
                    .map_err(|e| cerr(format!("line {line}: {e}")))?
                    .with_grad();
                tensors.push((name, tensor));
            }
            other => return Err(cerr(format!("line {line}: unknown record {other:?}"))),
        }
    }

    let cfg = cfg.ok_or_else(|| cerr("missing config record".into()))?;
    let params = assemble_params(&cfg, tensors)?;
    let model = Mcan { cfg, params };
    Ok(model)
}

fn assemble_params(
    cfg: &ModelConfig,
    tensors: Vec<(String, Tensor)>,
) -> Result<McanParams, TrainError> {
    let cerr = |msg: String| TrainError::Checkpoint(msg);
    let mut iter = tensors.into_iter();
    let mut take = |expect: &str| -> Result<Tensor, TrainError> {
        let (name, tensor) = iter
            .next()
            .ok_or_else(|| cerr(format!("missing tensor {expect}")))?;
        if name != expect {
            return Err(cerr(format!("expected tensor {expect}, found {name}")));
        }
        Ok(tensor)
    };

    let e_fine = take("e_fine")?;
    let e_coarse = take("e_coarse")?;
    let w_f = take("w_f")?;
    let w_g = take("w_g")?;
    let w_h = take("w_h")?;
    let mut take_ffn = |name: &str, layers: usize| -> Result<Ffn, TrainError> {
        let mut out = Vec::with_capacity(layers);
        for i in 0..layers {
            let w = take(&format!("{name}.{i}.w"))?;
            let b = take(&format!("{name}.{i}.b"))?;
            out.push(Affine { w, b });
        }
        Ok(Ffn { layers: out })
    };
    let attn = take_ffn("attn", 2)?;
    let mix_fine = take_ffn("mix_fine", 2)?;
    let mix_coarse = take_ffn("mix_coarse", 2)?;
    let scorer = take_ffn("scorer", 2)?;
    let (cpl_fine, cpl_coarse) = if cfg.use_cpl {
        (Some(take_ffn("cpl_fine", 1)?), Some(take_ffn("cpl_coarse", 1)?))
    } else {
        (None, None)
    };
    if iter.next().is_some() {
        return Err(cerr("unexpected trailing tensor records".into()));
    }
    Ok(McanParams {
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
    })
}
