//! Knowledge-base driven caption losses and their exact gradients.
//!
//! For a bias-prone set `B` of size `J` and a predicted distribution `p`:
//!
//! * confusion `C(p) = Σ_{b∈B} (p_b − 1/J)²`, evaluated on masked scenes;
//! * confidence `F^j(p) = Σ_{b∈B∖b_j} p_b / (p_{b_j} + ε)`, evaluated on full scenes;
//! * cross-entropy on positions whose ground-truth token is not bias-prone.
//!
//! Each batch loss sums over positions and divides by the number of scenes.
//! The total is `α·CE + β·confidence + μ·confusion`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Scene;
use crate::kb::{BiasIndex, TokenId};
use crate::model::{forward_trace, ForwardTrace, ModelError, ModelParams, TokenDistribution};
use crate::scalar::Scalar;

/// Probabilities are clamped here before taking the log.
pub const CE_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("bias-prone set needs at least 2 members, got {0}")]
    EmptyBiasSet(usize),
    #[error("index {j} outside bias-prone set of size {len}")]
    IndexOutOfBiasSet { j: usize, len: usize },
    #[error("token id {0} outside the distribution")]
    InvalidToken(TokenId),
    #[error("scene {scene_id}: expected a {} input", if *.expected_masked { "masked" } else { "full (unmasked)" })]
    MaskingContractViolation {
        scene_id: u64,
        expected_masked: bool,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("full and masked batches describe different scenes")]
    BatchMismatch,
    #[error("scene {scene_id}: {dists} distributions for a target of length {target}")]
    LengthMismatch {
        scene_id: u64,
        dists: usize,
        target: usize,
    },
    #[error("invalid hyper-parameters: {0}")]
    InvalidHyperParams(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Weights of the three loss terms and the confidence stabilizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossHyperParams {
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub epsilon: f64,
    pub ce_scope: CeScope,
}

/// Tokens scored by the cross-entropy term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeScope {
    /// Only tokens outside every bias-prone set.
    #[default]
    NonBiasProne,
    /// Every target token, as in a conventional captioner.
    AllTokens,
}

impl CeScope {
    fn scores(self, bias_prone: bool) -> bool {
        self == CeScope::AllTokens || !bias_prone
    }
}

impl Default for LossHyperParams {
    fn default() -> Self {
        LossHyperParams {
            alpha: 1.0,
            beta: 0.1,
            mu: 1.0,
            epsilon: 1e-6,
            ce_scope: CeScope::NonBiasProne,
        }
    }
}

impl LossHyperParams {
    /// Cross-entropy only (`β = μ = 0`).
    pub fn baseline() -> Self {
        LossHyperParams {
            beta: 0.0,
            mu: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("mu", self.mu)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::InvalidHyperParams(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(LossError::InvalidHyperParams(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Number of positions contributing to each term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermCounts {
    pub ce: usize,
    pub confusion: usize,
    pub confidence: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub ce: T,
    pub confusion: T,
    pub confidence: T,
    pub total: T,
    pub counts: TermCounts,
}

impl<T: Scalar> LossBreakdown<T> {
    fn combine(
        hp: &LossHyperParams,
        ce: T,
        confidence: T,
        confusion: T,
        counts: TermCounts,
    ) -> Self {
        let total =
            T::lit(hp.alpha) * ce + T::lit(hp.beta) * confidence + T::lit(hp.mu) * confusion;
        LossBreakdown {
            ce,
            confusion,
            confidence,
            total,
            counts,
        }
    }
}

fn check_set<T: Scalar>(dist: &TokenDistribution<T>, b_set: &[TokenId]) -> Result<(), LossError> {
    if b_set.len() < 2 {
        return Err(LossError::EmptyBiasSet(b_set.len()));
    }
    match b_set.iter().find(|&&b| b >= dist.probs.len()) {
        Some(&b) => Err(LossError::InvalidToken(b)),
        None => Ok(()),
    }
}

/// Squared distance of the bias-prone probabilities from `1/J`.
pub fn confusion_fn<T: Scalar>(
    dist: &TokenDistribution<T>,
    b_set: &[TokenId],
) -> Result<T, LossError> {
    check_set(dist, b_set)?;
    let inv_j = T::one() / T::lit(b_set.len() as f64);
    Ok(b_set
        .iter()
        .map(|&b| {
            let d = dist.probs[b] - inv_j;
            d * d
        })
        .sum())
}

/// `∂C/∂p_b = 2(p_b − 1/J)`, one entry per member of `b_set`.
pub fn confusion_grad<T: Scalar>(
    dist: &TokenDistribution<T>,
    b_set: &[TokenId],
) -> Result<Vec<T>, LossError> {
    check_set(dist, b_set)?;
    let inv_j = T::one() / T::lit(b_set.len() as f64);
    Ok(b_set
        .iter()
        .map(|&b| T::lit(2.0) * (dist.probs[b] - inv_j))
        .collect())
}

/// Gradient of the confusion with respect to the logits behind `dist`.
pub fn confusion_logit_grad<T: Scalar>(
    dist: &TokenDistribution<T>,
    b_set: &[TokenId],
) -> Result<Vec<T>, LossError> {
    let g = confusion_grad(dist, b_set)?;
    let mut dz = vec![T::zero(); dist.probs.len()];
    softmax_backward(&dist.probs, b_set, &g, T::one(), &mut dz);
    Ok(dz)
}

/// Mass on the other bias-prone tokens relative to the mass on `b_set[j]`.
pub fn confidence_fn<T: Scalar>(
    dist: &TokenDistribution<T>,
    j: usize,
    b_set: &[TokenId],
    epsilon: T,
) -> Result<T, LossError> {
    check_set(dist, b_set)?;
    if j >= b_set.len() {
        return Err(LossError::IndexOutOfBiasSet {
            j,
            len: b_set.len(),
        });
    }
    let others: T = b_set
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != j)
        .map(|(_, &b)| dist.probs[b])
        .sum();
    Ok(others / (dist.probs[b_set[j]] + epsilon))
}

/// Distributions produced for one scene, aligned with its target.
#[derive(Clone, Copy, Debug)]
pub struct ScoredCaption<'a, T> {
    pub scene_id: u64,
    pub masked: bool,
    pub target: &'a [TokenId],
    pub dists: &'a [TokenDistribution<T>],
}

fn check_batch<T>(batch: &[ScoredCaption<'_, T>], expected_masked: bool) -> Result<(), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    for s in batch {
        if s.masked != expected_masked {
            return Err(LossError::MaskingContractViolation {
                scene_id: s.scene_id,
                expected_masked,
            });
        }
        if s.dists.len() != s.target.len() {
            return Err(LossError::LengthMismatch {
                scene_id: s.scene_id,
                dists: s.dists.len(),
                target: s.target.len(),
            });
        }
    }
    Ok(())
}

fn confusion_sum<T: Scalar>(
    s: &ScoredCaption<'_, T>,
    index: &BiasIndex,
) -> Result<(T, usize), LossError> {
    let mut sum = T::zero();
    let mut n = 0;
    for (t, &tok) in s.target.iter().enumerate() {
        if let Some(m) = index.membership(tok) {
            sum += confusion_fn(&s.dists[t], &index.set(m.set).members)?;
            n += 1;
        }
    }
    Ok((sum, n))
}

fn confidence_sum<T: Scalar>(
    s: &ScoredCaption<'_, T>,
    index: &BiasIndex,
    epsilon: T,
) -> Result<(T, usize), LossError> {
    let mut sum = T::zero();
    let mut n = 0;
    for (t, &tok) in s.target.iter().enumerate() {
        if let Some(m) = index.membership(tok) {
            sum += confidence_fn(&s.dists[t], m.position, &index.set(m.set).members, epsilon)?;
            n += 1;
        }
    }
    Ok((sum, n))
}

fn ce_sum<T: Scalar>(
    s: &ScoredCaption<'_, T>,
    index: &BiasIndex,
    scope: CeScope,
) -> Result<(T, usize), LossError> {
    let clamp = T::lit(CE_CLAMP);
    let mut sum = T::zero();
    let mut n = 0;
    for (t, &tok) in s.target.iter().enumerate() {
        if !scope.scores(index.is_bias_prone(tok)) {
            continue;
        }
        let p = *s.dists[t]
            .probs
            .get(tok)
            .ok_or(LossError::InvalidToken(tok))?;
        sum -= p.max(clamp).ln();
        n += 1;
    }
    Ok((sum, n))
}

fn batch_mean<T: Scalar>(
    batch: &[ScoredCaption<'_, T>],
    mut per_scene: impl FnMut(&ScoredCaption<'_, T>) -> Result<(T, usize), LossError>,
) -> Result<(T, usize), LossError> {
    let mut sum = T::zero();
    let mut count = 0;
    for s in batch {
        let (v, n) = per_scene(s)?;
        sum += v;
        count += n;
    }
    Ok((sum / T::lit(batch.len() as f64), count))
}

/// Mean over scenes of the summed confusion at bias-prone positions of masked inputs.
pub fn confusion_loss<T: Scalar>(
    batch: &[ScoredCaption<'_, T>],
    index: &BiasIndex,
) -> Result<T, LossError> {
    check_batch(batch, true)?;
    batch_mean(batch, |s| confusion_sum(s, index)).map(|r| r.0)
}

/// Mean over scenes of the summed confidence term at bias-prone positions of full inputs.
pub fn confidence_loss<T: Scalar>(
    batch: &[ScoredCaption<'_, T>],
    index: &BiasIndex,
    epsilon: T,
) -> Result<T, LossError> {
    check_batch(batch, false)?;
    batch_mean(batch, |s| confidence_sum(s, index, epsilon)).map(|r| r.0)
}

/// Mean over scenes of the summed negative log-likelihood of non-bias-prone tokens.
pub fn cross_entropy_loss<T: Scalar>(
    batch: &[ScoredCaption<'_, T>],
    index: &BiasIndex,
) -> Result<T, LossError> {
    cross_entropy_loss_scoped(batch, index, CeScope::NonBiasProne)
}

pub fn cross_entropy_loss_scoped<T: Scalar>(
    batch: &[ScoredCaption<'_, T>],
    index: &BiasIndex,
    scope: CeScope,
) -> Result<T, LossError> {
    check_batch(batch, false)?;
    batch_mean(batch, |s| ce_sum(s, index, scope)).map(|r| r.0)
}

/// Weighted total of the three terms: CE and confidence on `full`, confusion on `masked`.
pub fn total_loss<T: Scalar>(
    hp: &LossHyperParams,
    full: &[ScoredCaption<'_, T>],
    masked: &[ScoredCaption<'_, T>],
    index: &BiasIndex,
) -> Result<LossBreakdown<T>, LossError> {
    hp.validate()?;
    check_batch(full, false)?;
    check_batch(masked, true)?;
    let mut a: Vec<u64> = full.iter().map(|s| s.scene_id).collect();
    let mut b: Vec<u64> = masked.iter().map(|s| s.scene_id).collect();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(LossError::BatchMismatch);
    }
    let (ce, n_ce) = batch_mean(full, |s| ce_sum(s, index, hp.ce_scope))?;
    let (conf, n_conf) = batch_mean(full, |s| confidence_sum(s, index, T::lit(hp.epsilon)))?;
    let (confu, n_confu) = batch_mean(masked, |s| confusion_sum(s, index))?;
    Ok(LossBreakdown::combine(
        hp,
        ce,
        conf,
        confu,
        TermCounts {
            ce: n_ce,
            confusion: n_confu,
            confidence: n_conf,
        },
    ))
}

/// One training scene: the full input, its masked counterpart and the encoded target.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub full: &'a Scene,
    pub masked: &'a Scene,
    pub target: &'a [TokenId],
}

struct SceneGrad<T> {
    grad: ModelParams<T>,
    ce: T,
    confidence: T,
    confusion: T,
    counts: TermCounts,
}

/// Backpropagates per-position logit gradients through the recurrence.
fn backprop<T: Scalar>(
    p: &ModelParams<T>,
    trace: &ForwardTrace<T>,
    context: &[f64],
    evidence: &[f64],
    target: &[TokenId],
    dlogits: &[Option<Vec<T>>],
    grad: &mut ModelParams<T>,
) {
    let hidden = p.dims.hidden;
    let mut carry = vec![T::zero(); hidden];
    for t in (0..target.len()).rev() {
        let h = &trace.hidden[t];
        let mut dh = std::mem::replace(&mut carry, vec![T::zero(); hidden]);
        if let Some(dz) = &dlogits[t] {
            p.v_out.t_mul_vec_add(dz, &mut dh);
            grad.v_out.add_outer(dz, h);
            for (g, &d) in grad.c.iter_mut().zip(dz) {
                *g += d;
            }
        }
        let da: Vec<T> = dh
            .iter()
            .zip(h)
            .map(|(&d, &hv)| d * (T::one() - hv * hv))
            .collect();
        if da.iter().all(|&x| x == T::zero()) {
            continue;
        }
        if t > 0 {
            grad.w_h.add_outer(&da, &trace.hidden[t - 1]);
            grad.embed.add_to_col(target[t - 1], &da);
            p.w_h.t_mul_vec_add(&da, &mut carry);
        } else {
            let ctx: Vec<T> = context.iter().map(|&x| T::lit(x)).collect();
            let ev: Vec<T> = evidence.iter().map(|&x| T::lit(x)).collect();
            grad.w_ctx.add_outer(&da, &ctx);
            grad.w_ev.add_outer(&da, &ev);
            for (g, &d) in grad.b.iter_mut().zip(&da) {
                *g += d;
            }
        }
    }
}

/// `dz = w · p ⊙ (g − ⟨g, p⟩)` for a gradient `g` supported on `support`.
fn softmax_backward<T: Scalar>(probs: &[T], support: &[TokenId], g: &[T], w: T, dz: &mut [T]) {
    let dot: T = support.iter().zip(g).map(|(&b, &gb)| gb * probs[b]).sum();
    for (i, dzi) in dz.iter_mut().enumerate() {
        *dzi -= w * probs[i] * dot;
    }
    for (&b, &gb) in support.iter().zip(g) {
        dz[b] += w * probs[b] * gb;
    }
}

fn scene_grad<T: Scalar>(
    p: &ModelParams<T>,
    ex: &Example<'_>,
    hp: &LossHyperParams,
    index: &BiasIndex,
    n: T,
) -> Result<SceneGrad<T>, LossError> {
    let (alpha, beta, mu) = (T::lit(hp.alpha) / n, T::lit(hp.beta) / n, T::lit(hp.mu) / n);
    let eps = T::lit(hp.epsilon);
    let clamp = T::lit(CE_CLAMP);
    let v = p.dims.vocab;
    let target = ex.target;
    let mut grad = ModelParams::zeros(p.dims);
    let mut out = SceneGrad {
        grad: ModelParams::zeros(p.dims),
        ce: T::zero(),
        confidence: T::zero(),
        confusion: T::zero(),
        counts: TermCounts::default(),
    };

    let full = forward_trace(p, &ex.full.context, &ex.full.evidence, target)?;
    let mut dz_full: Vec<Option<Vec<T>>> = vec![None; target.len()];
    for (t, &tok) in target.iter().enumerate() {
        let probs = &full.dists[t].probs;
        let mut dz = vec![T::zero(); v];
        let membership = index.membership(tok);
        if hp.ce_scope.scores(membership.is_some()) {
            let pw = probs[tok];
            out.ce -= pw.max(clamp).ln();
            out.counts.ce += 1;
            if pw >= clamp {
                for (d, &pi) in dz.iter_mut().zip(probs) {
                    *d = alpha * pi;
                }
                dz[tok] -= alpha;
            }
        }
        match membership {
            None => {}
            Some(m) => {
                let set = &index.set(m.set).members;
                let pj = probs[set[m.position]];
                let denom = pj + eps;
                let others: T = set
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != m.position)
                    .map(|(_, &b)| probs[b])
                    .sum();
                out.confidence += others / denom;
                out.counts.confidence += 1;
                let g: Vec<T> = (0..set.len())
                    .map(|k| {
                        if k == m.position {
                            -others / (denom * denom)
                        } else {
                            T::one() / denom
                        }
                    })
                    .collect();
                softmax_backward(probs, set, &g, beta, &mut dz);
            }
        }
        dz_full[t] = Some(dz);
    }
    backprop(
        p,
        &full,
        &ex.full.context,
        &ex.full.evidence,
        target,
        &dz_full,
        &mut grad,
    );

    if target.iter().any(|&tok| index.is_bias_prone(tok)) {
        let masked = forward_trace(p, &ex.masked.context, &ex.masked.evidence, target)?;
        let mut dz_masked: Vec<Option<Vec<T>>> = vec![None; target.len()];
        for (t, &tok) in target.iter().enumerate() {
            let Some(m) = index.membership(tok) else {
                continue;
            };
            let set = &index.set(m.set).members;
            let dist = &masked.dists[t];
            let probs = &dist.probs;
            let g = confusion_grad(dist, set)?;
            out.confusion += confusion_fn(dist, set)?;
            out.counts.confusion += 1;
            let mut dz = vec![T::zero(); v];
            softmax_backward(probs, set, &g, mu, &mut dz);
            dz_masked[t] = Some(dz);
        }
        backprop(
            p,
            &masked,
            &ex.masked.context,
            &ex.masked.evidence,
            target,
            &dz_masked,
            &mut grad,
        );
    }
    out.grad = grad;
    Ok(out)
}

fn check_example(ex: &Example<'_>) -> Result<(), LossError> {
    if ex.full.masked {
        return Err(LossError::MaskingContractViolation {
            scene_id: ex.full.id,
            expected_masked: false,
        });
    }
    if !ex.masked.masked {
        return Err(LossError::MaskingContractViolation {
            scene_id: ex.masked.id,
            expected_masked: true,
        });
    }
    if ex.full.id != ex.masked.id {
        return Err(LossError::BatchMismatch);
    }
    Ok(())
}

/// Analytic gradient of the total loss over a batch, with the loss breakdown.
///
/// Per-scene gradients may be computed in parallel; they are summed in batch
/// order so the result does not depend on the thread count.
pub fn grad_total<T: Scalar>(
    p: &ModelParams<T>,
    batch: &[Example<'_>],
    hp: &LossHyperParams,
    index: &BiasIndex,
) -> Result<(ModelParams<T>, LossBreakdown<T>), LossError> {
    hp.validate()?;
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    for ex in batch {
        check_example(ex)?;
    }
    let n = T::lit(batch.len() as f64);
    let parts: Vec<SceneGrad<T>> = batch
        .par_iter()
        .map(|ex| scene_grad(p, ex, hp, index, n))
        .collect::<Result<_, _>>()?;

    let mut grad = ModelParams::zeros(p.dims);
    let (mut ce, mut conf, mut confu) = (T::zero(), T::zero(), T::zero());
    let mut counts = TermCounts::default();
    for part in &parts {
        grad.add_scaled(T::one(), &part.grad);
        ce += part.ce;
        conf += part.confidence;
        confu += part.confusion;
        counts.ce += part.counts.ce;
        counts.confidence += part.counts.confidence;
        counts.confusion += part.counts.confusion;
    }
    Ok((
        grad,
        LossBreakdown::combine(hp, ce / n, conf / n, confu / n, counts),
    ))
}

fn scored<'a, T>(
    batch: &'a [Example<'_>],
    dists: &'a [Vec<TokenDistribution<T>>],
    masked: bool,
) -> Vec<ScoredCaption<'a, T>> {
    batch
        .iter()
        .zip(dists)
        .map(|(ex, d)| ScoredCaption {
            scene_id: ex.full.id,
            masked,
            target: ex.target,
            dists: d,
        })
        .collect()
}

/// Loss breakdown of a batch without the gradient (two forward passes per scene).
pub fn evaluate_batch<T: Scalar>(
    p: &ModelParams<T>,
    batch: &[Example<'_>],
    hp: &LossHyperParams,
    index: &BiasIndex,
) -> Result<LossBreakdown<T>, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    for ex in batch {
        check_example(ex)?;
    }
    let mut full_d = Vec::with_capacity(batch.len());
    let mut masked_d = Vec::with_capacity(batch.len());
    for ex in batch {
        full_d.push(forward_trace(p, &ex.full.context, &ex.full.evidence, ex.target)?.dists);
        masked_d.push(forward_trace(p, &ex.masked.context, &ex.masked.evidence, ex.target)?.dists);
    }
    let full = scored(batch, &full_d, false);
    let masked = scored(batch, &masked_d, true);
    total_loss(hp, &full, &masked, index)
}
