//! Deterministic mini-batch SGD and the bias/accuracy metrics.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{is_stereotypical, mask_scene_with, DataError, Dataset, Scene};
use crate::kb::{BiasIndex, KbError, KnowledgeBase, TokenId};
use crate::losses::{confusion_fn, grad_total, Example, LossBreakdown, LossError, LossHyperParams};
use crate::model::{
    caption_ids, forward_sequence, greedy_decode, init_params, Dims, ModelError, ModelParams,
};
use crate::scalar::Scalar;

/// Training aborts once the total loss exceeds this value.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("knowledge base does not fit the dataset vocabulary: {0}")]
    InvalidKb(String),
    #[error("sub-class '{0}' is not in the knowledge base")]
    UnknownSubclass(String),
    #[error("scene {0} has no bias-prone token in its caption")]
    NoBiasPronePosition(u64),
    #[error("training diverged at step {step} (total loss {total})")]
    DivergenceDetected {
        step: usize,
        total: f64,
        /// Parameters before the diverging step.
        last_finite: Box<ModelParams<f64>>,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Fields missing from a config file take their default values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hp: LossHyperParams,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Hidden width; the other model dims come from the dataset.
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hp: LossHyperParams::default(),
            learning_rate: 0.2,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            hidden: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.hp.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(TrainError::InvalidConfig(format!(
                    "{name} must be at least 1"
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self, ds: &Dataset) -> Dims {
        Dims {
            vocab: ds.vocab.len(),
            hidden: self.hidden,
            context: ds.config().context_dim,
            evidence: ds.config().evidence_dim,
        }
    }
}

/// A scene prepared for training: the full input, its masked copy and its target ids.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub full: Scene,
    pub masked: Scene,
    pub target: Vec<TokenId>,
}

impl PreparedScene {
    pub fn example(&self) -> Example<'_> {
        Example {
            full: &self.full,
            masked: &self.masked,
            target: &self.target,
        }
    }
}

pub fn prepare(ds: &Dataset) -> Result<Vec<PreparedScene>, TrainError> {
    let fill = ds.config().mask_fill;
    ds.scenes
        .iter()
        .map(|s| {
            Ok(PreparedScene {
                full: s.clone(),
                masked: mask_scene_with(s, fill)?,
                target: ds.vocab.encode_target(&s.caption)?,
            })
        })
        .collect()
}

fn resolve_kb(kb: &KnowledgeBase, ds: &Dataset) -> Result<BiasIndex, TrainError> {
    kb.index(&ds.vocab)
        .map_err(|e| TrainError::InvalidKb(e.to_string()))
}

/// Called after every optimizer step with the step number (1-based) and the updated parameters.
pub trait StepObserver<T> {
    fn after_step(&mut self, step: usize, params: &ModelParams<T>, loss: &LossBreakdown<T>);
}

impl<T, F: FnMut(usize, &ModelParams<T>, &LossBreakdown<T>)> StepObserver<T> for F {
    fn after_step(&mut self, step: usize, params: &ModelParams<T>, loss: &LossBreakdown<T>) {
        self(step, params, loss)
    }
}

/// Plain SGD over seed-shuffled mini-batches.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    ds: &Dataset,
    kb: &KnowledgeBase,
) -> Result<(ModelParams<T>, Vec<LossBreakdown<T>>), TrainError> {
    train_observed(
        cfg,
        ds,
        kb,
        &mut |_: usize, _: &ModelParams<T>, _: &LossBreakdown<T>| {},
    )
}

pub fn train_observed<T: Scalar, O: StepObserver<T> + ?Sized>(
    cfg: &TrainConfig,
    ds: &Dataset,
    kb: &KnowledgeBase,
    observer: &mut O,
) -> Result<(ModelParams<T>, Vec<LossBreakdown<T>>), TrainError> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let index = resolve_kb(kb, ds)?;
    let prepared = prepare(ds)?;
    let mut params = init_params::<T>(cfg.dims(ds), cfg.seed)?;
    let lr = T::lit(cfg.learning_rate);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut members = chunk.to_vec();
            // fixed reduction order inside a batch
            members.sort_unstable_by_key(|&i| prepared[i].full.id);
            let batch: Vec<Example<'_>> = members.iter().map(|&i| prepared[i].example()).collect();
            let (grad, loss) = grad_total(&params, &batch, &cfg.hp, &index)?;
            let total = loss.total.as_f64();
            if !total.is_finite() || total > DIVERGENCE_LIMIT {
                return Err(TrainError::DivergenceDetected {
                    step: history.len() + 1,
                    total,
                    last_finite: Box::new(params.cast()),
                });
            }
            let mut next = params.clone();
            next.add_scaled(-lr, &grad);
            if next.check().is_err() {
                return Err(TrainError::DivergenceDetected {
                    step: history.len() + 1,
                    total,
                    last_finite: Box::new(params.cast()),
                });
            }
            params = next;
            history.push(loss);
            observer.after_step(history.len(), &params, &loss);
        }
    }
    Ok((params, history))
}

/// Writes one CSV row per step: `step,ce,confusion,confidence,total,ce_count,confusion_count,confidence_count`.
pub fn write_history_csv<T: Scalar, W: Write>(
    history: &[LossBreakdown<T>],
    out: W,
) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "step",
        "ce",
        "confusion",
        "confidence",
        "total",
        "ce_count",
        "confusion_count",
        "confidence_count",
    ])?;
    for (i, b) in history.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            b.ce.to_string(),
            b.confusion.to_string(),
            b.confidence.to_string(),
            b.total.to_string(),
            b.counts.ce.to_string(),
            b.counts.confusion.to_string(),
            b.counts.confidence.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Accuracy and bias measurements on a test split.
///
/// The anti-stereotypical fields are `None` when the split has no such scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_scenes: usize,
    pub n_anti_stereo: usize,
    pub caption_token_accuracy: f64,
    pub subclass_accuracy: f64,
    pub anti_stereo_subclass_accuracy: Option<f64>,
    /// Anti-stereotypical scenes where the emitted sub-class is a wrong one whose stereotype flag is raised.
    pub context_overuse_rate: Option<f64>,
    /// Anti-stereotypical scenes where no sub-class token was emitted.
    pub abstention_rate: Option<f64>,
    /// Mean confusion on masked copies at the first bias-prone target position.
    pub masked_mean_confusion: f64,
}

/// Per-scene outcome used by [`evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct SceneOutcome {
    pub id: u64,
    pub decoded: Vec<TokenId>,
    pub emitted_subclass: Option<TokenId>,
    pub true_subclass: TokenId,
    pub anti_stereo: bool,
    pub overuse: bool,
    pub token_hits: usize,
    pub token_total: usize,
    pub masked_confusion: f64,
}

/// Decodes a scene and scores it against its ground truth.
pub fn score_scene<T: Scalar>(
    params: &ModelParams<T>,
    ds: &Dataset,
    index: &BiasIndex,
    scene: &Scene,
) -> Result<SceneOutcome, TrainError> {
    let cfg = ds.config();
    let true_sub = ds
        .vocab
        .id(&scene.true_subclass)
        .filter(|&id| index.is_bias_prone(id))
        .ok_or_else(|| TrainError::UnknownSubclass(scene.true_subclass.clone()))?;
    let decoded = greedy_decode(params, scene, cfg.t_max + 1)?;
    let caption = caption_ids(&decoded);
    let emitted_subclass = index.first_bias_prone(caption).map(|(t, _)| caption[t]);

    let gt = ds.vocab.encode(&scene.caption)?;
    let token_hits = gt
        .iter()
        .enumerate()
        .filter(|&(i, &g)| caption.get(i) == Some(&g))
        .count();

    let anti_stereo = !is_stereotypical(scene, cfg)?;
    let overuse = match emitted_subclass {
        Some(e) if e != true_sub => cfg
            .stereotype_flag(ds.vocab.token(e))
            .is_some_and(|f| scene.context.get(f).copied().unwrap_or(0.0) > 0.5),
        _ => false,
    };

    let target = ds.vocab.encode_target(&scene.caption)?;
    let (pos, m) = index
        .first_bias_prone(&target)
        .ok_or(TrainError::NoBiasPronePosition(scene.id))?;
    let masked = mask_scene_with(scene, cfg.mask_fill)?;
    let dists = forward_sequence(params, &masked, &target)?;
    let masked_confusion = confusion_fn(&dists[pos], &index.set(m.set).members)?.as_f64();

    Ok(SceneOutcome {
        id: scene.id,
        decoded,
        emitted_subclass,
        true_subclass: true_sub,
        anti_stereo,
        overuse,
        token_hits,
        token_total: gt.len(),
        masked_confusion,
    })
}

pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    ds_test: &Dataset,
    kb: &KnowledgeBase,
) -> Result<Metrics, TrainError> {
    if ds_test.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let index = resolve_kb(kb, ds_test)?;
    if let Some(s) = ds_test.scenes.iter().find(|s| s.masked) {
        return Err(TrainError::Data(DataError::Malformed(format!(
            "scene {} is masked; evaluation expects unmasked scenes",
            s.id
        ))));
    }
    let outcomes: Vec<SceneOutcome> = ds_test
        .scenes
        .par_iter()
        .map(|s| score_scene(params, ds_test, &index, s))
        .collect::<Result<_, _>>()?;
    Ok(summarize(&outcomes))
}

pub fn summarize(outcomes: &[SceneOutcome]) -> Metrics {
    let n = outcomes.len();
    let ratio = |num: usize, den: usize| num as f64 / den as f64;
    let correct = |o: &&SceneOutcome| o.emitted_subclass == Some(o.true_subclass);
    let hits: usize = outcomes.iter().map(|o| o.token_hits).sum();
    let total: usize = outcomes.iter().map(|o| o.token_total).sum();
    let anti: Vec<&SceneOutcome> = outcomes.iter().filter(|o| o.anti_stereo).collect();
    let anti_rate = |f: &dyn Fn(&&SceneOutcome) -> bool| {
        (!anti.is_empty()).then(|| ratio(anti.iter().filter(|o| f(o)).count(), anti.len()))
    };
    if anti.is_empty() {
        log::warn!("no anti-stereotypical scenes; anti-stereotypical metrics are absent");
    }
    Metrics {
        n_scenes: n,
        n_anti_stereo: anti.len(),
        caption_token_accuracy: ratio(hits, total.max(1)),
        subclass_accuracy: ratio(outcomes.iter().filter(correct).count(), n),
        anti_stereo_subclass_accuracy: anti_rate(&|o| correct(o)),
        context_overuse_rate: anti_rate(&|o| o.overuse),
        abstention_rate: anti_rate(&|o| o.emitted_subclass.is_none()),
        masked_mean_confusion: outcomes.iter().map(|o| o.masked_confusion).sum::<f64>() / n as f64,
    }
}
