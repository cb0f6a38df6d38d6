//! The differentiable rationale model: an extractor that scores document
//! tokens, a multiplicative mask, a bag-of-embeddings predictor, the joint
//! loss (label CE + rationale CE + sparsity), and analytic gradients.
//!
//! The extractor and predictor own separate embedding tables so their
//! parameters stay independent. Query and sentinel positions always carry a
//! rationale of exactly 1: the extractor only adjudicates document tokens.

use std::collections::HashMap;

use rand::Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{InputToken, ModelInput};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;
/// Floor for the masked-bag denominator, so an all-zero mask never divides
/// by zero.
pub const DENOM_EPS: f64 = 1e-8;

/// Model family: a plain bag classifier, or the same predictor gated by the
/// extractor mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Standard,
    Rationale,
}

/// Hyperparameters for the joint objective and the training loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    /// Weight of the rationale supervision term.
    pub lambda1: f64,
    /// Weight of the sparsity term (length-normalized L1 of the soft mask).
    pub lambda2: f64,
    pub learning_rate: f64,
    /// Window radius of the extractor's local-context feature.
    pub window: usize,
    /// Embedding dimension (shared by both tables).
    pub dim: usize,
    /// When false, the label loss does not backpropagate into the extractor.
    pub joint_optimized: bool,
    pub max_epochs: usize,
    pub min_epochs: usize,
    /// Non-improving validation intervals tolerated before stopping.
    pub patience: usize,
    /// Fraction of an epoch between validations.
    pub val_interval: f64,
    pub batch_size: usize,
    /// Epochs of predictor-only training on full input before joint training.
    pub pretrain_epochs: usize,
    /// Batches accumulated per optimizer step.
    pub grad_accumulation: usize,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lambda1: 1.0,
            lambda2: 0.1,
            learning_rate: 1e-2,
            window: 1,
            dim: 16,
            joint_optimized: true,
            max_epochs: 12,
            min_epochs: 3,
            patience: 5,
            val_interval: 0.2,
            batch_size: 8,
            pretrain_epochs: 1,
            grad_accumulation: 1,
            seed: 0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> crate::Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(crate::Error::Config(
                "lambda weights must be non-negative".into(),
            ));
        }
        if self.dim == 0 {
            return Err(crate::Error::Config("embedding dim must be >= 1".into()));
        }
        if !(self.val_interval > 0.0 && self.val_interval <= 1.0) {
            return Err(crate::Error::Config(
                "val_interval must be in (0, 1]".into(),
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.grad_accumulation == 0 {
            return Err(crate::Error::Config(
                "batch_size, max_epochs and grad_accumulation must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Supervision signal for the predicted rationale of one instance.
#[derive(Debug, Clone, PartialEq)]
pub enum RationaleTarget {
    /// No rationale supervision; the lambda1 term is omitted.
    None,
    /// Human-annotated rationale over document tokens.
    Human(Vec<bool>),
    /// Complement of the attack mask (all-ones for clean instances).
    NonAttack(Vec<bool>),
}

impl RationaleTarget {
    pub fn mask(&self) -> Option<&[bool]> {
        match self {
            RationaleTarget::None => None,
            RationaleTarget::Human(m) | RationaleTarget::NonAttack(m) => Some(m),
        }
    }

    pub fn origin_name(&self) -> &'static str {
        match self {
            RationaleTarget::None => "none",
            RationaleTarget::Human(_) => "human",
            RationaleTarget::NonAttack(_) => "non-attack",
        }
    }
}

/// Token-id mapping. Ids 0..3 are reserved for `[CLS]`, `[SEP]` and the
/// unknown-word embedding; corpus words follow in first-occurrence order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const UNK_ID: usize = 2;
const RESERVED: [&str; 3] = ["[CLS]", "[SEP]", "[UNK]"];

impl Vocab {
    /// Build from word surfaces in a deterministic order (first occurrence
    /// wins; callers should feed corpus words first, then resource words).
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut vocab = Vocab {
            words: RESERVED.iter().map(|s| s.to_string()).collect(),
            index: RESERVED
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i))
                .collect(),
        };
        for word in words {
            vocab.intern(word);
        }
        vocab
    }

    fn intern(&mut self, word: &str) {
        if !self.index.contains_key(word) {
            self.index.insert(word.to_owned(), self.words.len());
            self.words.push(word.to_owned());
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of an input token; unknown words map to the reserved UNK id.
    pub fn id_of(&self, token: &InputToken) -> usize {
        match token {
            InputToken::Cls => CLS_ID,
            InputToken::Sep => SEP_ID,
            InputToken::Word(w) => self.index.get(w.as_str()).copied().unwrap_or(UNK_ID),
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.words[RESERVED.len()..].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let words = Vec::<String>::deserialize(deserializer)?;
        let vocab = Vocab::build(words.iter().map(String::as_str));
        if vocab.len() != words.len() + RESERVED.len() {
            return Err(D::Error::custom("vocabulary contains duplicate words"));
        }
        Ok(vocab)
    }
}

/// Model input resolved to vocabulary ids.
#[derive(Debug, Clone)]
pub struct EncodedInput {
    /// Document token ids in order.
    pub doc: Vec<usize>,
    /// Query token ids in order (never empty).
    pub query: Vec<usize>,
    /// Span layout of the original input, used to place forced-1 positions.
    pub input_len: usize,
    pub doc_start: usize,
    pub query_start: usize,
}

impl EncodedInput {
    pub fn encode(vocab: &Vocab, input: &ModelInput) -> EncodedInput {
        EncodedInput {
            doc: input.tokens[input.doc_span.clone()]
                .iter()
                .map(|t| vocab.id_of(t))
                .collect(),
            query: input.tokens[input.query_span.clone()]
                .iter()
                .map(|t| vocab.id_of(t))
                .collect(),
            input_len: input.tokens.len(),
            doc_start: input.doc_span.start,
            query_start: input.query_span.start,
        }
    }
}

/// Extractor and predictor parameters plus the vocabulary they index.
///
/// The extractor scores document position `i` as
/// `phi_i = w . [e_i ; win_i ; e_i*qbar ; qbar] + b` where `win_i` is the
/// mean extractor embedding over the window `i-w ..= i+w` (clipped to the
/// document) and `qbar` is the mean extractor embedding of the query. The
/// predictor reads `sigmoid(u . [z ; qbar'] + c)` where `z` is the
/// rhat-weighted mean of predictor embeddings over document tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub vocab: Vocab,
    pub dim: usize,
    pub window: usize,
    /// Extractor embeddings, `vocab.len() * dim`, row-major.
    pub emb_ex: Vec<f64>,
    /// Extractor feature weights, `4 * dim`.
    pub w_ex: Vec<f64>,
    pub b_ex: f64,
    /// Predictor embeddings, `vocab.len() * dim`, row-major.
    pub emb_pr: Vec<f64>,
    /// Predictor readout over `[z ; qbar']`, `2 * dim`.
    pub u_pr: Vec<f64>,
    pub c_pr: f64,
}

impl ModelParams {
    pub fn init(vocab: Vocab, dim: usize, window: usize, rng: &mut impl Rng) -> ModelParams {
        let v = vocab.len();
        let mut sample = |n: usize| -> Vec<f64> {
            (0..n).map(|_| (rng.gen::<f64>() - 0.5) * 0.2).collect()
        };
        ModelParams {
            dim,
            window,
            emb_ex: sample(v * dim),
            w_ex: sample(4 * dim),
            b_ex: 0.0,
            emb_pr: sample(v * dim),
            u_pr: sample(2 * dim),
            c_pr: 0.0,
            vocab,
        }
    }

    pub fn zeros(vocab: Vocab, dim: usize, window: usize) -> ModelParams {
        let v = vocab.len();
        ModelParams {
            dim,
            window,
            emb_ex: vec![0.0; v * dim],
            w_ex: vec![0.0; 4 * dim],
            b_ex: 0.0,
            emb_pr: vec![0.0; v * dim],
            u_pr: vec![0.0; 2 * dim],
            c_pr: 0.0,
            vocab,
        }
    }

    fn emb_ex_row(&self, id: usize) -> &[f64] {
        &self.emb_ex[id * self.dim..(id + 1) * self.dim]
    }

    fn emb_pr_row(&self, id: usize) -> &[f64] {
        &self.emb_pr[id * self.dim..(id + 1) * self.dim]
    }

    pub fn n_params(&self) -> usize {
        self.emb_ex.len() + self.w_ex.len() + 1 + self.emb_pr.len() + self.u_pr.len() + 1
    }

    /// Count of extractor parameters; they occupy the first positions of the
    /// flat layout.
    pub fn n_extractor_params(&self) -> usize {
        self.emb_ex.len() + self.w_ex.len() + 1
    }

    /// Flatten in a fixed order (embeddings, weights, biases) for the
    /// optimizer and finite-difference checks.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        flat.extend_from_slice(&self.emb_ex);
        flat.extend_from_slice(&self.w_ex);
        flat.push(self.b_ex);
        flat.extend_from_slice(&self.emb_pr);
        flat.extend_from_slice(&self.u_pr);
        flat.push(self.c_pr);
        flat
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut at = 0;
        let take = |buf: &mut [f64], at: &mut usize| {
            buf.copy_from_slice(&flat[*at..*at + buf.len()]);
            *at += buf.len();
        };
        take(&mut self.emb_ex, &mut at);
        take(&mut self.w_ex, &mut at);
        self.b_ex = flat[at];
        at += 1;
        take(&mut self.emb_pr, &mut at);
        take(&mut self.u_pr, &mut at);
        self.c_pr = flat[at];
    }

    pub fn is_finite(&self) -> bool {
        self.emb_ex.iter().all(|x| x.is_finite())
            && self.w_ex.iter().all(|x| x.is_finite())
            && self.b_ex.is_finite()
            && self.emb_pr.iter().all(|x| x.is_finite())
            && self.u_pr.iter().all(|x| x.is_finite())
            && self.c_pr.is_finite()
    }
}

/// Gradient accumulator mirroring [`ModelParams`] shapes.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub emb_ex: Vec<f64>,
    pub w_ex: Vec<f64>,
    pub b_ex: f64,
    pub emb_pr: Vec<f64>,
    pub u_pr: Vec<f64>,
    pub c_pr: f64,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> ParamGrads {
        ParamGrads {
            emb_ex: vec![0.0; params.emb_ex.len()],
            w_ex: vec![0.0; params.w_ex.len()],
            b_ex: 0.0,
            emb_pr: vec![0.0; params.emb_pr.len()],
            u_pr: vec![0.0; params.u_pr.len()],
            c_pr: 0.0,
        }
    }

    pub fn reset(&mut self) {
        self.emb_ex.iter_mut().for_each(|x| *x = 0.0);
        self.w_ex.iter_mut().for_each(|x| *x = 0.0);
        self.b_ex = 0.0;
        self.emb_pr.iter_mut().for_each(|x| *x = 0.0);
        self.u_pr.iter_mut().for_each(|x| *x = 0.0);
        self.c_pr = 0.0;
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(
            self.emb_ex.len() + self.w_ex.len() + self.emb_pr.len() + self.u_pr.len() + 2,
        );
        flat.extend_from_slice(&self.emb_ex);
        flat.extend_from_slice(&self.w_ex);
        flat.push(self.b_ex);
        flat.extend_from_slice(&self.emb_pr);
        flat.extend_from_slice(&self.u_pr);
        flat.push(self.c_pr);
        flat
    }

    /// Component-wise sum; batch gradients are exact vector sums of
    /// per-instance gradients.
    pub fn add_assign(&mut self, other: &ParamGrads) {
        let add = |a: &mut [f64], b: &[f64]| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        };
        add(&mut self.emb_ex, &other.emb_ex);
        add(&mut self.w_ex, &other.w_ex);
        self.b_ex += other.b_ex;
        add(&mut self.emb_pr, &other.emb_pr);
        add(&mut self.u_pr, &other.u_pr);
        self.c_pr += other.c_pr;
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }
}

/// How the rationale mask is produced for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Sigmoid relaxation, used during training.
    Soft,
    /// Thresholded at 0.5 (inclusive), used at test time.
    Hard,
    /// Mask fixed to all ones: the standard classifier and predictor
    /// pretraining path.
    Ones,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy with clamped probability.
pub fn bce(p: f64, target: f64) -> f64 {
    let p = clamp_prob(p);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// d bce(sigmoid(a), target) / d a; zero where the clamp saturates.
fn bce_dlogit(p: f64, target: f64) -> f64 {
    if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
        0.0
    } else {
        p - target
    }
}

/// Everything the forward pass computed, cached for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Rationale over the full input; query and sentinel positions are
    /// exactly 1.
    pub rhat_full: Vec<f64>,
    /// Predicted probability of the true label.
    pub yhat: f64,
    /// Rationale restricted to document positions.
    pub doc_rhat: Vec<f64>,
    phi: Vec<f64>,
    qbar_ex: Vec<f64>,
    qbar_pr: Vec<f64>,
    z: Vec<f64>,
    denom: f64,
    mask_sum: f64,
    pred_logit: f64,
    mode: MaskMode,
}

impl ForwardTrace {
    /// Mean soft rationale over document positions (0 for empty documents).
    pub fn mean_doc_rhat(&self) -> f64 {
        if self.doc_rhat.is_empty() {
            0.0
        } else {
            self.doc_rhat.iter().sum::<f64>() / self.doc_rhat.len() as f64
        }
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn pred_logit(&self) -> f64 {
        self.pred_logit
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }
}

fn window_range(i: usize, n: usize, w: usize) -> std::ops::RangeInclusive<usize> {
    i.saturating_sub(w)..=usize::min(n - 1, i + w)
}

fn extractor_phi(params: &ModelParams, enc: &EncodedInput, qbar_ex: &[f64]) -> Vec<f64> {
    let d = params.dim;
    let n = enc.doc.len();
    let (w1, rest) = params.w_ex.split_at(d);
    let (w2, rest) = rest.split_at(d);
    let (w3, w4) = rest.split_at(d);
    let mut phi = Vec::with_capacity(n);
    for i in 0..n {
        let e_i = params.emb_ex_row(enc.doc[i]);
        let mut acc = params.b_ex;
        for k in 0..d {
            acc += w1[k] * e_i[k] + w3[k] * e_i[k] * qbar_ex[k] + w4[k] * qbar_ex[k];
        }
        let range = window_range(i, n, params.window);
        let count = (range.end() - range.start() + 1) as f64;
        for j in range {
            let e_j = params.emb_ex_row(enc.doc[j]);
            for k in 0..d {
                acc += w2[k] * e_j[k] / count;
            }
        }
        phi.push(acc);
    }
    phi
}

fn mean_embedding(rows: &[usize], emb: &[f64], dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    if rows.is_empty() {
        return mean;
    }
    for &id in rows {
        for k in 0..dim {
            mean[k] += emb[id * dim + k];
        }
    }
    let inv = 1.0 / rows.len() as f64;
    mean.iter_mut().for_each(|x| *x *= inv);
    mean
}

/// Run the model. The document mask comes from the extractor (soft or
/// hard-thresholded) or is fixed to ones, then the predictor classifies the
/// mask-weighted bag.
pub fn forward(params: &ModelParams, enc: &EncodedInput, mode: MaskMode) -> ForwardTrace {
    let d = params.dim;
    let n = enc.doc.len();

    let (qbar_ex, phi, doc_rhat) = match mode {
        MaskMode::Ones => (vec![0.0; d], vec![0.0; n], vec![1.0; n]),
        MaskMode::Soft | MaskMode::Hard => {
            let qbar_ex = mean_embedding(&enc.query, &params.emb_ex, d);
            let phi = extractor_phi(params, enc, &qbar_ex);
            let doc_rhat: Vec<f64> = match mode {
                MaskMode::Soft => phi.iter().map(|&x| sigmoid(x)).collect(),
                // threshold inclusive at exactly 0.5, i.e. phi >= 0
                _ => phi.iter().map(|&x| f64::from(u8::from(x >= 0.0))).collect(),
            };
            (qbar_ex, phi, doc_rhat)
        }
    };

    let qbar_pr = mean_embedding(&enc.query, &params.emb_pr, d);
    let mask_sum: f64 = doc_rhat.iter().sum();
    let denom = mask_sum.max(DENOM_EPS);
    let mut z = vec![0.0; d];
    for (i, &id) in enc.doc.iter().enumerate() {
        let r = doc_rhat[i];
        if r != 0.0 {
            let e = params.emb_pr_row(id);
            for k in 0..d {
                z[k] += r * e[k];
            }
        }
    }
    z.iter_mut().for_each(|x| *x /= denom);

    let (u_z, u_q) = params.u_pr.split_at(d);
    let mut pred_logit = params.c_pr;
    for k in 0..d {
        pred_logit += u_z[k] * z[k] + u_q[k] * qbar_pr[k];
    }
    let yhat = sigmoid(pred_logit);

    let mut rhat_full = vec![1.0; enc.input_len];
    for (i, &r) in doc_rhat.iter().enumerate() {
        rhat_full[enc.doc_start + i] = r;
    }

    ForwardTrace {
        rhat_full,
        yhat,
        doc_rhat,
        phi,
        qbar_ex,
        qbar_pr,
        z,
        denom,
        mask_sum,
        pred_logit,
        mode,
    }
}

/// Soft rationale over the full input (1 on query and sentinel positions).
pub fn extract(params: &ModelParams, input: &ModelInput) -> Vec<f64> {
    let enc = EncodedInput::encode(&params.vocab, input);
    forward(params, &enc, MaskMode::Soft).rhat_full
}

/// Classify the input under a caller-supplied full-length rationale.
pub fn mask_and_predict(params: &ModelParams, input: &ModelInput, rhat: &[f64]) -> f64 {
    assert_eq!(rhat.len(), input.tokens.len(), "rationale length mismatch");
    let enc = EncodedInput::encode(&params.vocab, input);
    let d = params.dim;
    let doc_rhat: Vec<f64> = (0..enc.doc.len())
        .map(|i| rhat[enc.doc_start + i])
        .collect();
    let qbar_pr = mean_embedding(&enc.query, &params.emb_pr, d);
    let mask_sum: f64 = doc_rhat.iter().sum();
    let denom = mask_sum.max(DENOM_EPS);
    let mut z = vec![0.0; d];
    for (i, &id) in enc.doc.iter().enumerate() {
        let e = params.emb_pr_row(id);
        for k in 0..d {
            z[k] += doc_rhat[i] * e[k];
        }
    }
    z.iter_mut().for_each(|x| *x /= denom);
    let (u_z, u_q) = params.u_pr.split_at(d);
    let mut logit = params.c_pr;
    for k in 0..d {
        logit += u_z[k] * z[k] + u_q[k] * qbar_pr[k];
    }
    sigmoid(logit)
}

/// Test-time pass: the mask is discretized and the prediction recomputed
/// from the binary mask through the same weighted-bag formula.
pub fn forward_hard(params: &ModelParams, input: &ModelInput) -> (Vec<f64>, f64) {
    let enc = EncodedInput::encode(&params.vocab, input);
    let trace = forward(params, &enc, MaskMode::Hard);
    (trace.rhat_full, trace.yhat)
}

fn mask_mode_for(architecture: Architecture) -> MaskMode {
    match architecture {
        Architecture::Standard => MaskMode::Ones,
        Architecture::Rationale => MaskMode::Soft,
    }
}

/// The three weighted terms of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    /// `bce(yhat, y)`.
    pub label: f64,
    /// `lambda1 * mean_i bce(rhat_i, r_i)` (0 without a target).
    pub rationale: f64,
    /// `lambda2 * mean_i rhat_i`.
    pub sparsity: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.label + self.rationale + self.sparsity
    }

    /// The extractor's objective under separate optimization: everything
    /// except the label term.
    pub fn extractor_objective(&self) -> f64 {
        self.rationale + self.sparsity
    }
}

fn parts_from_trace(
    trace: &ForwardTrace,
    y: bool,
    target: &RationaleTarget,
    hyper: &Hyper,
    architecture: Architecture,
) -> LossParts {
    let label = bce(trace.yhat, f64::from(u8::from(y)));
    let mut parts = LossParts {
        label,
        rationale: 0.0,
        sparsity: 0.0,
    };
    if architecture == Architecture::Standard {
        return parts;
    }
    let n = trace.doc_rhat.len();
    if n > 0 {
        if let Some(mask) = target.mask() {
            assert_eq!(mask.len(), n, "rationale target length mismatch");
            let rat: f64 = trace
                .doc_rhat
                .iter()
                .zip(mask)
                .map(|(&p, &t)| bce(p, f64::from(u8::from(t))))
                .sum();
            parts.rationale = hyper.lambda1 * rat / n as f64;
        }
        parts.sparsity = hyper.lambda2 * trace.doc_rhat.iter().sum::<f64>() / n as f64;
    }
    parts
}

fn loss_from_trace(
    trace: &ForwardTrace,
    y: bool,
    target: &RationaleTarget,
    hyper: &Hyper,
    architecture: Architecture,
) -> f64 {
    parts_from_trace(trace, y, target, hyper, architecture).total()
}

/// Per-term breakdown of the objective for one encoded instance.
pub fn loss_parts(
    params: &ModelParams,
    enc: &EncodedInput,
    y: bool,
    target: &RationaleTarget,
    hyper: &Hyper,
    architecture: Architecture,
) -> LossParts {
    let trace = forward(params, enc, mask_mode_for(architecture));
    parts_from_trace(&trace, y, target, hyper, architecture)
}

/// Joint objective for one instance over an already-encoded input:
/// `bce(yhat, y) + lambda1 * mean_i bce(rhat_i, r_i) + lambda2 * mean_i rhat_i`,
/// rationale and sparsity terms over document positions only. The standard
/// architecture reduces to the label term.
pub fn loss_encoded(
    params: &ModelParams,
    enc: &EncodedInput,
    y: bool,
    target: &RationaleTarget,
    hyper: &Hyper,
    architecture: Architecture,
) -> f64 {
    let trace = forward(params, enc, mask_mode_for(architecture));
    loss_from_trace(&trace, y, target, hyper, architecture)
}

/// Loss for a [`ModelInput`] (encodes, forwards, evaluates).
pub fn loss(
    params: &ModelParams,
    input: &ModelInput,
    y: bool,
    target: &RationaleTarget,
    hyper: &Hyper,
    architecture: Architecture,
) -> f64 {
    let enc = EncodedInput::encode(&params.vocab, input);
    loss_encoded(params, &enc, y, target, hyper, architecture)
}

/// Analytic reverse pass. Accumulates into `grads` (so batch gradients are
/// plain sums over instances) and returns the instance loss.
///
/// With `joint_optimized = false` the label term contributes nothing to the
/// extractor: only the rationale supervision and sparsity terms reach it.
/// The standard architecture never touches extractor parameters.
pub fn grad_into(
    params: &ModelParams,
    enc: &EncodedInput,
    y: bool,
    target: &RationaleTarget,
    hyper: &Hyper,
    architecture: Architecture,
    grads: &mut ParamGrads,
) -> f64 {
    let d = params.dim;
    let n = enc.doc.len();
    let m = enc.query.len();
    let trace = forward(params, enc, mask_mode_for(architecture));
    let loss = loss_from_trace(&trace, y, target, hyper, architecture);

    // predictor path
    let delta = bce_dlogit(trace.yhat, f64::from(u8::from(y)));
    let (u_z, u_q) = params.u_pr.split_at(d);
    let (gu_z, gu_q) = grads.u_pr.split_at_mut(d);
    for k in 0..d {
        gu_z[k] += delta * trace.z[k];
        gu_q[k] += delta * trace.qbar_pr[k];
    }
    grads.c_pr += delta;
    for (i, &id) in enc.doc.iter().enumerate() {
        let r = trace.doc_rhat[i];
        if r != 0.0 {
            let coeff = delta * r / trace.denom;
            let row = &mut grads.emb_pr[id * d..(id + 1) * d];
            for k in 0..d {
                row[k] += coeff * u_z[k];
            }
        }
    }
    if m > 0 {
        let coeff = delta / m as f64;
        for &id in &enc.query {
            let row = &mut grads.emb_pr[id * d..(id + 1) * d];
            for k in 0..d {
                row[k] += coeff * u_q[k];
            }
        }
    }

    if architecture == Architecture::Standard || n == 0 {
        return loss;
    }

    // d loss / d rhat_i, then chain through the sigmoid into phi_i
    let uz_dot_z: f64 = (0..d).map(|k| u_z[k] * trace.z[k]).sum();
    let denom_active = trace.mask_sum > DENOM_EPS;
    let inv_n = 1.0 / n as f64;
    let mut dphi = vec![0.0; n];
    for i in 0..n {
        let r = trace.doc_rhat[i];
        let mut dr = hyper.lambda2 * inv_n;
        if hyper.joint_optimized && delta != 0.0 {
            let e = params.emb_pr_row(enc.doc[i]);
            let uz_dot_e: f64 = (0..d).map(|k| u_z[k] * e[k]).sum();
            let dz = (uz_dot_e - if denom_active { uz_dot_z } else { 0.0 }) / trace.denom;
            dr += delta * dz;
        }
        let mut g = dr * r * (1.0 - r);
        if let Some(mask) = target.mask() {
            g += hyper.lambda1 * inv_n * bce_dlogit(r, f64::from(u8::from(mask[i])));
        }
        dphi[i] = g;
    }

    // extractor path
    let (w1, rest) = params.w_ex.split_at(d);
    let (w2, rest) = rest.split_at(d);
    let (w3, w4) = rest.split_at(d);
    let (gw1, grest) = grads.w_ex.split_at_mut(d);
    let (gw2, grest) = grest.split_at_mut(d);
    let (gw3, gw4) = grest.split_at_mut(d);
    let mut dqbar = vec![0.0; d];
    for i in 0..n {
        let g = dphi[i];
        if g == 0.0 {
            continue;
        }
        let e_i = params.emb_ex_row(enc.doc[i]);
        let range = window_range(i, n, params.window);
        let count = (range.end() - range.start() + 1) as f64;

        // weight gradients: g * feature
        for k in 0..d {
            gw1[k] += g * e_i[k];
            gw3[k] += g * e_i[k] * trace.qbar_ex[k];
            gw4[k] += g * trace.qbar_ex[k];
        }
        for j in range.clone() {
            let e_j = params.emb_ex_row(enc.doc[j]);
            for k in 0..d {
                gw2[k] += g * e_j[k] / count;
            }
        }
        grads.b_ex += g;

        // embedding gradients through the direct and interaction slots
        {
            let row = &mut grads.emb_ex[enc.doc[i] * d..(enc.doc[i] + 1) * d];
            for k in 0..d {
                row[k] += g * (w1[k] + w3[k] * trace.qbar_ex[k]);
            }
        }
        // through the window mean
        for j in range {
            let row = &mut grads.emb_ex[enc.doc[j] * d..(enc.doc[j] + 1) * d];
            for k in 0..d {
                row[k] += g * w2[k] / count;
            }
        }
        // accumulate the query-mean path
        for k in 0..d {
            dqbar[k] += g * (w3[k] * e_i[k] + w4[k]);
        }
    }
    if m > 0 {
        let inv_m = 1.0 / m as f64;
        for &id in &enc.query {
            let row = &mut grads.emb_ex[id * d..(id + 1) * d];
            for k in 0..d {
                row[k] += inv_m * dqbar[k];
            }
        }
    }
    loss
}

/// Single-instance gradient (fresh accumulator), mirroring [`loss`].
pub fn grad(
    params: &ModelParams,
    input: &ModelInput,
    y: bool,
    target: &RationaleTarget,
    hyper: &Hyper,
    architecture: Architecture,
) -> (f64, ParamGrads) {
    let enc = EncodedInput::encode(&params.vocab, input);
    let mut grads = ParamGrads::zeros_like(params);
    let loss = grad_into(params, &enc, y, target, hyper, architecture, &mut grads);
    (loss, grads)
}

/// Gradient of the summed loss over a batch.
///
/// Each instance is computed into a scratch accumulator and added in, so a
/// duplicated instance contributes exactly twice its single-instance
/// gradient.
pub fn grad_batch<'a>(
    params: &ModelParams,
    batch: impl IntoIterator<Item = (&'a EncodedInput, bool, &'a RationaleTarget)>,
    hyper: &Hyper,
    architecture: Architecture,
) -> (f64, ParamGrads) {
    let mut total = ParamGrads::zeros_like(params);
    let mut scratch = ParamGrads::zeros_like(params);
    let mut loss_sum = 0.0;
    for (enc, y, target) in batch {
        scratch.reset();
        loss_sum += grad_into(params, enc, y, target, hyper, architecture, &mut scratch);
        total.add_assign(&scratch);
    }
    (loss_sum, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_input, tokenize, Document};

    fn input(doc: &str, query: &str) -> ModelInput {
        let document = Document::from_tokens(tokenize(doc).tokens);
        build_input(&document, &tokenize(query).tokens).unwrap()
    }

    fn tiny_vocab() -> Vocab {
        Vocab::build(["a", "b", "c", "q", "r"])
    }

    #[test]
    fn vocab_ids_and_unk() {
        let v = tiny_vocab();
        assert_eq!(v.len(), 8);
        let tok = |s: &str| InputToken::Word(crate::corpus::Token::new(s).unwrap());
        assert_eq!(v.id_of(&InputToken::Cls), CLS_ID);
        assert_eq!(v.id_of(&InputToken::Sep), SEP_ID);
        assert_eq!(v.id_of(&tok("a")), 3);
        assert_eq!(v.id_of(&tok("zzz")), UNK_ID);
    }

    #[test]
    fn vocab_serde_round_trip() {
        let v = tiny_vocab();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn extract_zero_params_is_half() {
        let params = ModelParams::zeros(tiny_vocab(), 4, 1);
        let inp = input("a b c", "q");
        let rhat = extract(&params, &inp);
        for i in inp.doc_span.clone() {
            assert_eq!(rhat[i], 0.5);
        }
    }

    #[test]
    fn extract_forces_query_and_sentinels_to_one() {
        let mut rng = crate::rng::stream(5, &["p"]);
        let params = ModelParams::init(tiny_vocab(), 4, 1, &mut rng);
        let inp = input("a b c", "q r");
        let rhat = extract(&params, &inp);
        for (i, value) in rhat.iter().enumerate() {
            if inp.doc_span.contains(&i) {
                assert!(*value > 0.0 && *value < 1.0);
            } else {
                assert_eq!(*value, 1.0);
            }
        }
    }

    /// Hand evaluation of the extractor formula on a 3-token document.
    #[test]
    fn extract_matches_hand_computation() {
        let vocab = Vocab::build(["a", "b", "c", "q"]);
        let dim = 2;
        let mut params = ModelParams::zeros(vocab, dim, 1);
        let set_row = |emb: &mut [f64], id: usize, v: [f64; 2]| {
            emb[id * 2] = v[0];
            emb[id * 2 + 1] = v[1];
        };
        // word ids: a=3, b=4, c=5, q=6
        set_row(&mut params.emb_ex, 3, [0.1, 0.2]);
        set_row(&mut params.emb_ex, 4, [-0.3, 0.4]);
        set_row(&mut params.emb_ex, 5, [0.5, -0.6]);
        set_row(&mut params.emb_ex, 6, [0.7, 0.8]);
        params.w_ex = vec![1.0, -1.0, 0.5, 0.5, 2.0, 1.0, -1.0, 0.5];
        params.b_ex = 0.1;

        let inp = input("a b c", "q");
        let rhat = extract(&params, &inp);

        // independent scalar evaluation of phi_i = w.[e_i; win; e_i*qbar; qbar] + b
        let e = [[0.1, 0.2], [-0.3, 0.4], [0.5, -0.6]];
        let qbar = [0.7, 0.8];
        let (w1, w2, w3, w4) = ([1.0, -1.0], [0.5, 0.5], [2.0, 1.0], [-1.0, 0.5]);
        for i in 0usize..3 {
            let lo = i.saturating_sub(1);
            let hi = usize::min(2, i + 1);
            let mut win = [0.0, 0.0];
            for j in lo..=hi {
                win[0] += e[j][0];
                win[1] += e[j][1];
            }
            let cnt = (hi - lo + 1) as f64;
            win[0] /= cnt;
            win[1] /= cnt;
            let mut phi = 0.1;
            for k in 0..2 {
                phi +=
                    w1[k] * e[i][k] + w2[k] * win[k] + w3[k] * e[i][k] * qbar[k] + w4[k] * qbar[k];
            }
            let expected = sigmoid(phi);
            assert!(
                (rhat[inp.doc_span.start + i] - expected).abs() < 1e-12,
                "position {i}: {} vs {expected}",
                rhat[inp.doc_span.start + i]
            );
        }
        // phi_0 works out to exactly 0.1 with these numbers
        assert!((rhat[inp.doc_span.start] - sigmoid(0.1)).abs() < 1e-12);
        assert!((sigmoid(0.1) - 0.5249791874789399).abs() < 1e-12);
    }

    #[test]
    fn mask_and_predict_all_ones_is_plain_mean() {
        let mut rng = crate::rng::stream(6, &["p"]);
        let params = ModelParams::init(tiny_vocab(), 4, 1, &mut rng);
        let inp = input("a b c", "q");
        let yhat = mask_and_predict(&params, &inp, &vec![1.0; inp.tokens.len()]);

        // plain mean of document predictor embeddings
        let enc = EncodedInput::encode(&params.vocab, &inp);
        let d = params.dim;
        let mut z = vec![0.0; d];
        for &id in &enc.doc {
            for k in 0..d {
                z[k] += params.emb_pr[id * d + k];
            }
        }
        z.iter_mut().for_each(|x| *x /= 3.0);
        let qbar: Vec<f64> = (0..d)
            .map(|k| params.emb_pr[enc.query[0] * d + k])
            .collect();
        let mut logit = params.c_pr;
        for k in 0..d {
            logit += params.u_pr[k] * z[k] + params.u_pr[d + k] * qbar[k];
        }
        assert!((yhat - sigmoid(logit)).abs() < 1e-12);
    }

    #[test]
    fn mask_and_predict_all_zeros_uses_query_only() {
        let mut rng = crate::rng::stream(7, &["p"]);
        let params = ModelParams::init(tiny_vocab(), 4, 1, &mut rng);
        let inp = input("a b c", "q");
        let mut rhat = vec![1.0; inp.tokens.len()];
        for i in inp.doc_span.clone() {
            rhat[i] = 0.0;
        }
        let yhat = mask_and_predict(&params, &inp, &rhat);

        let enc = EncodedInput::encode(&params.vocab, &inp);
        let d = params.dim;
        let mut logit = params.c_pr;
        for k in 0..d {
            let q = params.emb_pr[enc.query[0] * d + k];
            logit += params.u_pr[d + k] * q;
        }
        assert!((yhat - sigmoid(logit)).abs() < 1e-12);
    }

    #[test]
    fn mask_and_predict_one_hot_selects_token() {
        let mut rng = crate::rng::stream(8, &["p"]);
        let params = ModelParams::init(tiny_vocab(), 4, 1, &mut rng);
        let inp = input("a b c", "q");
        let mut rhat = vec![1.0; inp.tokens.len()];
        for i in inp.doc_span.clone() {
            rhat[i] = 0.0;
        }
        rhat[inp.doc_span.start + 1] = 1.0; // keep only "b"
        let yhat = mask_and_predict(&params, &inp, &rhat);

        let enc = EncodedInput::encode(&params.vocab, &inp);
        let d = params.dim;
        let b = enc.doc[1];
        let mut logit = params.c_pr;
        for k in 0..d {
            logit += params.u_pr[k] * params.emb_pr[b * d + k]
                + params.u_pr[d + k] * params.emb_pr[enc.query[0] * d + k];
        }
        assert!((yhat - sigmoid(logit)).abs() < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let params = ModelParams::zeros(tiny_vocab(), 4, 1);
        let inp = input("a b c r", "q");
        let mut hyper = Hyper {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Hyper::default()
        };
        // zero params: yhat = 0.5, so the label term is ln 2
        let l = loss(
            &params,
            &inp,
            true,
            &RationaleTarget::None,
            &hyper,
            Architecture::Rationale,
        );
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        // rhat = 0.5 everywhere: rationale CE is ln 2 for any target
        hyper.lambda1 = 1.0;
        let target = RationaleTarget::Human(vec![true, false, true, false]);
        let l = loss(&params, &inp, true, &target, &hyper, Architecture::Rationale);
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn sparsity_term_scales_with_mean_rhat() {
        let mut rng = crate::rng::stream(9, &["p"]);
        let params = ModelParams::init(tiny_vocab(), 4, 1, &mut rng);
        let inp = input("a b c", "q");
        let enc = EncodedInput::encode(&params.vocab, &inp);
        let trace = forward(&params, &enc, MaskMode::Soft);
        let base = Hyper {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Hyper::default()
        };
        let with = Hyper {
            lambda2: 0.1,
            ..base.clone()
        };
        let l0 = loss(
            &params,
            &inp,
            true,
            &RationaleTarget::None,
            &base,
            Architecture::Rationale,
        );
        let l1 = loss(
            &params,
            &inp,
            true,
            &RationaleTarget::None,
            &with,
            Architecture::Rationale,
        );
        assert!((l1 - l0 - 0.1 * trace.mean_doc_rhat()).abs() < 1e-15);
    }

    /// Increasing lambda2 raises the loss by exactly (delta lambda2) * mean
    /// rhat at a fixed parameter point: the sparsity pressure on every
    /// position is uniform.
    #[test]
    fn monotone_sparsity_on_loss_surface() {
        let mut rng = crate::rng::stream(10, &["p"]);
        let params = ModelParams::init(tiny_vocab(), 6, 1, &mut rng);
        let inp = input("a b c a b", "q r");
        let enc = EncodedInput::encode(&params.vocab, &inp);
        let mean = forward(&params, &enc, MaskMode::Soft).mean_doc_rhat();
        let mut prev = f64::NEG_INFINITY;
        for &l2 in &[0.0, 0.1, 0.2, 0.3] {
            let hyper = Hyper {
                lambda1: 0.0,
                lambda2: l2,
                ..Hyper::default()
            };
            let l = loss(
                &params,
                &inp,
                false,
                &RationaleTarget::None,
                &hyper,
                Architecture::Rationale,
            );
            assert!(l > prev);
            let base = loss(
                &params,
                &inp,
                false,
                &RationaleTarget::None,
                &Hyper {
                    lambda2: 0.0,
                    ..hyper.clone()
                },
                Architecture::Rationale,
            );
            assert!((l - base - l2 * mean).abs() < 1e-15);
            prev = l;
        }
    }

    /// With the mask overridden to ones and both lambdas zero, the loss is
    /// the plain cross-entropy of a bag-of-embeddings classifier.
    #[test]
    fn standard_reduction_property() {
        let mut rng = crate::rng::stream(11, &["p"]);
        let params = ModelParams::init(tiny_vocab(), 4, 1, &mut rng);
        let inp = input("a b c r", "q r");
        let hyper = Hyper {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Hyper::default()
        };
        let std_loss = loss(
            &params,
            &inp,
            true,
            &RationaleTarget::None,
            &hyper,
            Architecture::Standard,
        );

        // independent bag classifier: mean doc embedding and mean query
        // embedding through the readout
        let enc = EncodedInput::encode(&params.vocab, &inp);
        let d = params.dim;
        let n = enc.doc.len() as f64;
        let m = enc.query.len() as f64;
        let mut logit = params.c_pr;
        for k in 0..d {
            let zbar: f64 =
                enc.doc.iter().map(|&id| params.emb_pr[id * d + k]).sum::<f64>() / n;
            let qbar: f64 =
                enc.query.iter().map(|&id| params.emb_pr[id * d + k]).sum::<f64>() / m;
            logit += params.u_pr[k] * zbar + params.u_pr[d + k] * qbar;
        }
        let expected = bce(sigmoid(logit), 1.0);
        assert!((std_loss - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_is_permutation_invariant_with_zero_window() {
        let mut rng = crate::rng::stream(12, &["p"]);
        let params = ModelParams::init(tiny_vocab(), 4, 0, &mut rng);
        let hyper = Hyper {
            lambda1: 1.0,
            lambda2: 0.2,
            window: 0,
            ..Hyper::default()
        };
        let l1 = loss(
            &params,
            &input("a b c r", "q"),
            true,
            &RationaleTarget::Human(vec![true, false, false, true]),
            &hyper,
            Architecture::Rationale,
        );
        let l2 = loss(
            &params,
            &input("r c b a", "q"),
            true,
            &RationaleTarget::Human(vec![true, false, false, true]),
            &hyper,
            Architecture::Rationale,
        );
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn forward_hard_threshold_inclusive() {
        // zero params: phi = 0 everywhere, threshold is inclusive so rhat = 1
        let params = ModelParams::zeros(tiny_vocab(), 4, 1);
        let inp = input("a b c", "q");
        let (rhat, _) = forward_hard(&params, &inp);
        for i in inp.doc_span.clone() {
            assert_eq!(rhat[i], 1.0);
        }
    }

    #[test]
    fn forward_hard_all_negative_phi_gives_query_only_path() {
        let mut rng = crate::rng::stream(13, &["p"]);
        let mut params = ModelParams::init(tiny_vocab(), 4, 1, &mut rng);
        params.b_ex = -800.0;
        let inp = input("a b c", "q");
        let (rhat, yhat) = forward_hard(&params, &inp);
        for i in inp.doc_span.clone() {
            assert_eq!(rhat[i], 0.0);
        }
        let mut zeros = vec![1.0; inp.tokens.len()];
        for i in inp.doc_span.clone() {
            zeros[i] = 0.0;
        }
        assert!((yhat - mask_and_predict(&params, &inp, &zeros)).abs() < 1e-15);

        // the soft mask saturates to exactly 0 at this magnitude, so soft
        // and hard predictions coincide
        let enc = EncodedInput::encode(&params.vocab, &inp);
        let soft = forward(&params, &enc, MaskMode::Soft);
        assert!(soft.doc_rhat.iter().all(|&r| r == 0.0));
        assert_eq!(soft.yhat, yhat);
    }

    #[test]
    fn grad_duplicate_instance_is_twice_single() {
        let mut rng = crate::rng::stream(14, &["p"]);
        let params = ModelParams::init(tiny_vocab(), 4, 1, &mut rng);
        let inp = input("a b c r", "q r");
        let hyper = Hyper::default();
        let target = RationaleTarget::NonAttack(vec![true, true, false, true]);
        let enc = EncodedInput::encode(&params.vocab, &inp);

        let (l1, single) = grad_batch(
            &params,
            [(&enc, true, &target)],
            &hyper,
            Architecture::Rationale,
        );
        let (l2, double) = grad_batch(
            &params,
            [(&enc, true, &target), (&enc, true, &target)],
            &hyper,
            Architecture::Rationale,
        );
        assert_eq!(l2, 2.0 * l1);
        for (a, b) in single.to_flat().iter().zip(double.to_flat()) {
            assert_eq!(2.0 * a, b, "summed batch gradient must be exactly linear");
        }
    }

    #[test]
    fn grad_stop_gradient_zeroes_extractor() {
        let mut rng = crate::rng::stream(15, &["p"]);
        let params = ModelParams::init(tiny_vocab(), 4, 1, &mut rng);
        let inp = input("a b c", "q");
        let hyper = Hyper {
            lambda1: 0.0,
            lambda2: 0.0,
            joint_optimized: false,
            ..Hyper::default()
        };
        let (_, grads) = grad(
            &params,
            &inp,
            true,
            &RationaleTarget::None,
            &hyper,
            Architecture::Rationale,
        );
        assert!(grads.emb_ex.iter().all(|&g| g == 0.0));
        assert!(grads.w_ex.iter().all(|&g| g == 0.0));
        assert_eq!(grads.b_ex, 0.0);
        // the predictor still learns
        assert!(grads.u_pr.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn grad_standard_never_touches_extractor() {
        let mut rng = crate::rng::stream(16, &["p"]);
        let params = ModelParams::init(tiny_vocab(), 4, 1, &mut rng);
        let inp = input("a b c", "q");
        let (_, grads) = grad(
            &params,
            &inp,
            false,
            &RationaleTarget::None,
            &Hyper::default(),
            Architecture::Standard,
        );
        assert!(grads.emb_ex.iter().all(|&g| g == 0.0));
        assert!(grads.w_ex.iter().all(|&g| g == 0.0));
        assert_eq!(grads.b_ex, 0.0);
    }

    /// Central finite differences over every parameter on random
    /// configurations.
    ///
    /// Under separate optimization (`joint_optimized = false`) the
    /// extractor's objective is the rationale and sparsity terms only, so
    /// extractor coordinates are differenced against that partial loss while
    /// predictor coordinates are differenced against the full loss.
    #[test]
    fn grad_matches_finite_differences() {
        let mut seed_rng = crate::rng::stream(99, &["fd"]);
        for case in 0..20 {
            let joint = case % 2 == 0;
            let with_target = case % 3 != 0;
            let vocab = Vocab::build(["a", "b", "c", "d", "q", "r"]);
            let mut rng = crate::rng::stream(seed_rng.gen(), &["cfg"]);
            let dim = 2 + case % 3;
            let window = case % 3;
            let mut params = ModelParams::init(vocab, dim, window, &mut rng);
            params.b_ex = (rng.gen::<f64>() - 0.5) * 0.2;
            params.c_pr = (rng.gen::<f64>() - 0.5) * 0.2;
            let inp = input("a b c d b a", "q r");
            let y = rng.gen::<bool>();
            let target = if with_target {
                RationaleTarget::Human((0..6).map(|_| rng.gen::<bool>()).collect())
            } else {
                RationaleTarget::None
            };
            let hyper = Hyper {
                lambda1: rng.gen::<f64>(),
                lambda2: rng.gen::<f64>() * 0.3,
                joint_optimized: joint,
                window,
                dim,
                ..Hyper::default()
            };
            let (_, analytic) = grad(&params, &inp, y, &target, &hyper, Architecture::Rationale);
            let analytic = analytic.to_flat();
            let n_ex = params.n_extractor_params();

            let mut flat = params.to_flat();
            let enc = EncodedInput::encode(&params.vocab, &inp);
            let mut max_err: f64 = 0.0;
            for p in 0..flat.len() {
                let objective = |params: &ModelParams| {
                    let parts =
                        loss_parts(params, &enc, y, &target, &hyper, Architecture::Rationale);
                    if !joint && p < n_ex {
                        parts.extractor_objective()
                    } else {
                        parts.total()
                    }
                };
                let orig = flat[p];
                let h = 1e-5;
                flat[p] = orig + h;
                params.set_from_flat(&flat);
                let lp = objective(&params);
                flat[p] = orig - h;
                params.set_from_flat(&flat);
                let lm = objective(&params);
                flat[p] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let denom = analytic[p].abs().max(fd.abs());
                let err = if denom < 1e-6 {
                    (analytic[p] - fd).abs()
                } else {
                    (analytic[p] - fd).abs() / denom
                };
                max_err = max_err.max(err);
            }
            params.set_from_flat(&flat);
            assert!(max_err < 1e-4, "case {case}: max relative error {max_err}");
        }
    }

    #[test]
    fn params_flat_round_trip() {
        let mut rng = crate::rng::stream(17, &["p"]);
        let params = ModelParams::init(tiny_vocab(), 5, 2, &mut rng);
        let flat = params.to_flat();
        assert_eq!(flat.len(), params.n_params());
        let mut other = ModelParams::zeros(params.vocab.clone(), 5, 2);
        other.set_from_flat(&flat);
        assert_eq!(other.to_flat(), flat);
    }
}
