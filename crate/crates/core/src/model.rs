//! Elman-style caption model.
//!
//! ```text
//! h_0 = tanh(W_ctx·context + W_ev·evidence + b)
//! h_t = tanh(W_h·h_{t-1} + E[:, w_{t-1}])        t >= 1
//! p_t = softmax(V_out·h_t + c)
//! ```
//!
//! `p_t` is the distribution of the token at position `t` given the prefix
//! `w_{0:t-1}` and the scene, which is the quantity every loss term reads.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Scene;
use crate::kb::{TokenId, END_ID, START_ID};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken { id: TokenId, vocab: usize },
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error("target sequence must begin with the start token")]
    MissingStartToken,
    #[error("max_len must be at least 1")]
    InvalidMaxLen,
    #[error("parameters contain non-finite values in '{0}'")]
    NonFinite(&'static str),
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedFormat(u32),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub hidden: usize,
    pub context: usize,
    pub evidence: usize,
}

impl Dims {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("vocab", self.vocab),
            ("hidden", self.hidden),
            ("context", self.context),
            ("evidence", self.evidence),
        ] {
            if v == 0 {
                return Err(ModelError::InvalidDims(format!(
                    "{name} must be at least 1"
                )));
            }
        }
        if self.vocab < 2 {
            return Err(ModelError::InvalidDims(
                "vocab must hold the start and end tokens".into(),
            ));
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self · x`
    pub fn mul_vec_add(&self, x: &[T], out: &mut [T]) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (&a, &b) in self.row(r).iter().zip(x) {
                acc += a * b;
            }
            *o += acc;
        }
    }

    /// `out += selfᵀ · y`
    pub fn t_mul_vec_add(&self, y: &[T], out: &mut [T]) {
        for (r, &yr) in y.iter().enumerate() {
            if yr == T::zero() {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
    }

    /// `self += y · xᵀ`
    pub fn add_outer(&mut self, y: &[T], x: &[T]) {
        let cols = self.cols;
        for (r, &yr) in y.iter().enumerate() {
            if yr == T::zero() {
                continue;
            }
            for (a, &xc) in self.data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *a += yr * xc;
            }
        }
    }

    /// `self[:, c] += y`
    pub fn add_to_col(&mut self, c: usize, y: &[T]) {
        for (r, &yr) in y.iter().enumerate() {
            self.data[r * self.cols + c] += yr;
        }
    }

    pub fn col(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

/// Trainable arrays of the caption model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub dims: Dims,
    /// hidden × context
    pub w_ctx: Matrix<T>,
    /// hidden × evidence
    pub w_ev: Matrix<T>,
    /// hidden × vocab token embeddings
    pub embed: Matrix<T>,
    /// hidden × hidden recurrence
    pub w_h: Matrix<T>,
    pub b: Vec<T>,
    /// vocab × hidden
    pub v_out: Matrix<T>,
    pub c: Vec<T>,
}

/// Names of the parameter arrays in storage order.
pub const ARRAY_NAMES: [&str; 7] = ["w_ctx", "w_ev", "embed", "w_h", "b", "v_out", "c"];

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(dims: Dims) -> Self {
        let Dims {
            vocab,
            hidden,
            context,
            evidence,
        } = dims;
        ModelParams {
            dims,
            w_ctx: Matrix::zeros(hidden, context),
            w_ev: Matrix::zeros(hidden, evidence),
            embed: Matrix::zeros(hidden, vocab),
            w_h: Matrix::zeros(hidden, hidden),
            b: vec![T::zero(); hidden],
            v_out: Matrix::zeros(vocab, hidden),
            c: vec![T::zero(); vocab],
        }
    }

    /// The seven arrays as flat slices, in [`ARRAY_NAMES`] order.
    pub fn arrays(&self) -> [&[T]; 7] {
        [
            self.w_ctx.as_slice(),
            self.w_ev.as_slice(),
            self.embed.as_slice(),
            self.w_h.as_slice(),
            &self.b,
            self.v_out.as_slice(),
            &self.c,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut [T]; 7] {
        [
            self.w_ctx.as_mut_slice(),
            self.w_ev.as_mut_slice(),
            self.embed.as_mut_slice(),
            self.w_h.as_mut_slice(),
            &mut self.b,
            self.v_out.as_mut_slice(),
            &mut self.c,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    /// `self += alpha · other`, array by array.
    pub fn add_scaled(&mut self, alpha: T, other: &ModelParams<T>) {
        for (dst, src) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        self.dims.validate()?;
        let Dims {
            vocab,
            hidden,
            context,
            evidence,
        } = self.dims;
        let shapes = [
            ("w_ctx", &self.w_ctx, hidden, context),
            ("w_ev", &self.w_ev, hidden, evidence),
            ("embed", &self.embed, hidden, vocab),
            ("w_h", &self.w_h, hidden, hidden),
            ("v_out", &self.v_out, vocab, hidden),
        ];
        for (name, m, r, c) in shapes {
            if m.rows != r || m.cols != c || m.data.len() != r * c {
                return Err(ModelError::InvalidDims(format!(
                    "{name} is {}x{} with {} entries, expected {r}x{c}",
                    m.rows,
                    m.cols,
                    m.data.len()
                )));
            }
        }
        if self.b.len() != hidden || self.c.len() != vocab {
            return Err(ModelError::InvalidDims(
                "bias lengths disagree with dims".into(),
            ));
        }
        for (name, arr) in ARRAY_NAMES.iter().zip(self.arrays()) {
            if arr.iter().any(|x| !x.is_finite()) {
                return Err(ModelError::NonFinite(name));
            }
        }
        Ok(())
    }

    /// Converts to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let m = |x: &Matrix<T>| Matrix {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        };
        ModelParams {
            dims: self.dims,
            w_ctx: m(&self.w_ctx),
            w_ev: m(&self.w_ev),
            embed: m(&self.embed),
            w_h: m(&self.w_h),
            b: self.b.iter().map(|&v| U::lit(v.as_f64())).collect(),
            v_out: m(&self.v_out),
            c: self.c.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Glorot-uniform matrices (`s = sqrt(6 / (fan_in + fan_out))`), zero biases.
pub fn init_params<T: Scalar>(dims: Dims, seed: u64) -> Result<ModelParams<T>, ModelError> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::<T>::zeros(dims);
    for m in [
        &mut p.w_ctx,
        &mut p.w_ev,
        &mut p.embed,
        &mut p.w_h,
        &mut p.v_out,
    ] {
        let s = (6.0 / (m.rows + m.cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-s, s);
        for x in m.data.iter_mut() {
            *x = T::lit(dist.sample(&mut rng));
        }
    }
    Ok(p)
}

/// Probabilities over the vocabulary at one position.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution<T> {
    pub probs: Vec<T>,
}

impl<T: Scalar> TokenDistribution<T> {
    pub fn prob(&self, id: TokenId) -> T {
        self.probs[id]
    }

    /// Highest-probability id, ties to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Max-subtracted softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    for p in out.iter_mut() {
        *p /= sum;
    }
    out
}

/// Hidden states and output distributions of one teacher-forced pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub hidden: Vec<Vec<T>>,
    pub dists: Vec<TokenDistribution<T>>,
}

fn check_inputs<T: Scalar>(
    p: &ModelParams<T>,
    context: &[f64],
    evidence: &[f64],
) -> Result<(), ModelError> {
    if context.len() != p.dims.context {
        return Err(ModelError::DimensionMismatch {
            what: "context",
            expected: p.dims.context,
            got: context.len(),
        });
    }
    if evidence.len() != p.dims.evidence {
        return Err(ModelError::DimensionMismatch {
            what: "evidence",
            expected: p.dims.evidence,
            got: evidence.len(),
        });
    }
    Ok(())
}

fn initial_state<T: Scalar>(p: &ModelParams<T>, context: &[f64], evidence: &[f64]) -> Vec<T> {
    let ctx: Vec<T> = context.iter().map(|&x| T::lit(x)).collect();
    let ev: Vec<T> = evidence.iter().map(|&x| T::lit(x)).collect();
    let mut a = p.b.clone();
    p.w_ctx.mul_vec_add(&ctx, &mut a);
    p.w_ev.mul_vec_add(&ev, &mut a);
    a.into_iter().map(T::tanh).collect()
}

fn step_state<T: Scalar>(p: &ModelParams<T>, prev: &[T], token: TokenId) -> Vec<T> {
    let mut a = p.embed.col(token);
    p.w_h.mul_vec_add(prev, &mut a);
    a.into_iter().map(T::tanh).collect()
}

fn output<T: Scalar>(p: &ModelParams<T>, h: &[T]) -> TokenDistribution<T> {
    let mut z = p.c.clone();
    p.v_out.mul_vec_add(h, &mut z);
    TokenDistribution { probs: softmax(&z) }
}

/// Teacher-forced pass over raw feature vectors; one distribution per target position.
pub fn forward_trace<T: Scalar>(
    p: &ModelParams<T>,
    context: &[f64],
    evidence: &[f64],
    target: &[TokenId],
) -> Result<ForwardTrace<T>, ModelError> {
    check_inputs(p, context, evidence)?;
    match target.first() {
        None => return Err(ModelError::EmptyTarget),
        Some(&t) if t != START_ID => return Err(ModelError::MissingStartToken),
        _ => {}
    }
    if let Some(&id) = target.iter().find(|&&id| id >= p.dims.vocab) {
        return Err(ModelError::UnknownToken {
            id,
            vocab: p.dims.vocab,
        });
    }
    let mut hidden = Vec::with_capacity(target.len());
    let mut dists = Vec::with_capacity(target.len());
    let mut h = initial_state(p, context, evidence);
    for t in 0..target.len() {
        if t > 0 {
            h = step_state(p, &h, target[t - 1]);
        }
        dists.push(output(p, &h));
        hidden.push(h.clone());
    }
    Ok(ForwardTrace { hidden, dists })
}

/// Distributions `p(w_t | w_{0:t-1}, scene)` for every position of `target`.
pub fn forward_sequence<T: Scalar>(
    p: &ModelParams<T>,
    scene: &Scene,
    target: &[TokenId],
) -> Result<Vec<TokenDistribution<T>>, ModelError> {
    forward_trace(p, &scene.context, &scene.evidence, target).map(|t| t.dists)
}

/// Greedy decoding fed by its own emissions; stops at the end token (not
/// included) or after `max_len` tokens.
pub fn greedy_decode<T: Scalar>(
    p: &ModelParams<T>,
    scene: &Scene,
    max_len: usize,
) -> Result<Vec<TokenId>, ModelError> {
    if max_len == 0 {
        return Err(ModelError::InvalidMaxLen);
    }
    check_inputs(p, &scene.context, &scene.evidence)?;
    let mut out = Vec::with_capacity(max_len);
    let mut h = initial_state(p, &scene.context, &scene.evidence);
    loop {
        let tok = output(p, &h).argmax();
        if tok == END_ID {
            break;
        }
        out.push(tok);
        if out.len() == max_len {
            break;
        }
        h = step_state(p, &h, tok);
    }
    Ok(out)
}

/// Drops a leading start token from a decoded sequence.
pub fn caption_ids(decoded: &[TokenId]) -> &[TokenId] {
    match decoded.first() {
        Some(&START_ID) => &decoded[1..],
        _ => decoded,
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint<T> {
    format_version: u32,
    dims: Dims,
    params: ModelParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn to_checkpoint_json(&self) -> String {
        let ck = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dims: self.dims,
            params: self.clone(),
        };
        serde_json::to_string(&ck).expect("parameters serialize")
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint<T> = serde_json::from_str(s)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::UnsupportedFormat(ck.format_version));
        }
        if ck.dims != ck.params.dims {
            return Err(ModelError::InvalidDims(
                "header dims disagree with arrays".into(),
            ));
        }
        ck.params.check()?;
        Ok(ck.params)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_checkpoint_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint_json(&fs::read_to_string(path)?)
    }
}
