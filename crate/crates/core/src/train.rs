//! Training regimes, rationale-target construction, predictor pretraining,
//! the Adam loop, and early stopping.
//!
//! The loop is single-writer and fully deterministic: the validation split,
//! parameter init, epoch shuffles, and per-instance attack streams are all
//! keyed off `hyper.seed`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::addsent::augment_dataset;
use crate::corpus::{build_input_for, Dataset, Example};
use crate::lexres::LexicalResources;
use crate::model::{
    forward, grad_batch, Architecture, EncodedInput, Hyper, MaskMode, ModelParams, ParamGrads,
    RationaleTarget, Vocab,
};
use crate::rng::stream;
use crate::{Error, Result};

/// Default sparsity-weight grid searched for rationale architectures.
pub const DEFAULT_LAMBDA2_GRID: [f64; 4] = [0.0, 0.1, 0.2, 0.3];

/// Training condition: how the data is augmented and what supervises the
/// extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimeKind {
    /// Clean data, plain classifier.
    NoAdv,
    /// 1:1 adversarial augmentation, plain classifier.
    Adv,
    /// K attacked copies per instance, plain classifier.
    AdvKx(usize),
    /// Clean data, extractor supervised by human rationales.
    HumanSup,
    /// 1:1 augmentation, extractor supervised by the non-attack indicator.
    AdvAtkSup,
    /// 1:1 augmentation, extractor supervised by human rationales.
    AdvHumanSup,
}

impl RegimeKind {
    pub fn name(&self) -> String {
        match self {
            RegimeKind::NoAdv => "no-adv".into(),
            RegimeKind::Adv => "adv".into(),
            RegimeKind::AdvKx(k) => format!("adv-{k}x"),
            RegimeKind::HumanSup => "human-sup".into(),
            RegimeKind::AdvAtkSup => "adv-atk-sup".into(),
            RegimeKind::AdvHumanSup => "adv-human-sup".into(),
        }
    }

    /// Parse a regime name; "adv-10x" style names carry the K factor.
    pub fn parse(name: &str) -> Result<RegimeKind> {
        match name {
            "no-adv" => Ok(RegimeKind::NoAdv),
            "adv" => Ok(RegimeKind::Adv),
            "human-sup" => Ok(RegimeKind::HumanSup),
            "adv-atk-sup" => Ok(RegimeKind::AdvAtkSup),
            "adv-human-sup" => Ok(RegimeKind::AdvHumanSup),
            other => {
                let k = other
                    .strip_prefix("adv-")
                    .and_then(|rest| rest.strip_suffix('x'))
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k >= 1);
                match k {
                    Some(k) => Ok(RegimeKind::AdvKx(k)),
                    None => Err(Error::Config(format!("unknown regime {other:?}"))),
                }
            }
        }
    }

    /// Attacked copies added per training instance, if the regime augments.
    pub fn augmentation_k(&self) -> Option<usize> {
        match self {
            RegimeKind::NoAdv | RegimeKind::HumanSup => None,
            RegimeKind::Adv | RegimeKind::AdvAtkSup | RegimeKind::AdvHumanSup => Some(1),
            RegimeKind::AdvKx(k) => Some(*k),
        }
    }

    pub fn default_architecture(&self) -> Architecture {
        match self {
            RegimeKind::NoAdv | RegimeKind::Adv | RegimeKind::AdvKx(_) => Architecture::Standard,
            RegimeKind::HumanSup | RegimeKind::AdvAtkSup | RegimeKind::AdvHumanSup => {
                Architecture::Rationale
            }
        }
    }
}

/// Regime plus the architecture it trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Regime {
    pub kind: RegimeKind,
    pub architecture: Architecture,
}

impl Regime {
    /// A regime with its canonical architecture.
    pub fn new(kind: RegimeKind) -> Regime {
        Regime {
            kind,
            architecture: kind.default_architecture(),
        }
    }

    /// The six conditions compared in a reproduction run, in report order.
    pub fn all_standard_setups(k: usize) -> Vec<Regime> {
        vec![
            Regime::new(RegimeKind::NoAdv),
            Regime::new(RegimeKind::Adv),
            Regime::new(RegimeKind::AdvKx(k)),
            Regime::new(RegimeKind::AdvAtkSup),
            Regime::new(RegimeKind::HumanSup),
            Regime::new(RegimeKind::AdvHumanSup),
        ]
    }
}

/// Build one rationale target per example according to the regime.
///
/// Attack supervision targets the complement of the attack mask (all-ones on
/// clean instances); human supervision targets the stored rationale, which
/// augmentation has already remapped to be zero on attack spans.
pub fn build_targets(dataset: &[Example], regime: &Regime) -> Result<Vec<RationaleTarget>> {
    match regime.kind {
        RegimeKind::NoAdv | RegimeKind::Adv | RegimeKind::AdvKx(_) => {
            Ok(vec![RationaleTarget::None; dataset.len()])
        }
        RegimeKind::AdvAtkSup => {
            if !dataset.iter().any(|ex| ex.attack_mask().is_some()) {
                return Err(Error::Config(
                    "regime adv-atk-sup requires attacked instances with attack masks".into(),
                ));
            }
            Ok(dataset
                .iter()
                .map(|ex| match ex.attack_mask() {
                    Some(mask) => RationaleTarget::NonAttack(mask.iter().map(|&m| !m).collect()),
                    None => RationaleTarget::NonAttack(vec![true; ex.document().len()]),
                })
                .collect())
        }
        RegimeKind::HumanSup | RegimeKind::AdvHumanSup => dataset
            .iter()
            .map(|ex| match ex.human_rationale() {
                Some(rat) => Ok(RationaleTarget::Human(rat.to_vec())),
                None => Err(Error::Config(format!(
                    "regime {} requires human rationales, but instance {} has none",
                    regime.kind.name(),
                    ex.id()
                ))),
            })
            .collect(),
    }
}

/// Adam with bias correction (beta1 = 0.9, beta2 = 0.999).
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// Apply one update. When `skip_extractor` is set the extractor slice of
    /// the flat layout is left untouched, moments included.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads, skip_extractor: bool) {
        let mut flat = params.to_flat();
        let g = grads.to_flat();
        assert_eq!(flat.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let start = if skip_extractor {
            params.n_extractor_params()
        } else {
            0
        };
        for i in start..flat.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            flat[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        params.set_from_flat(&flat);
    }
}

/// Patience-based stopping on validation accuracy with a minimum epoch
/// floor. Improvement is strict, so ties keep the earliest checkpoint.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    min_epochs: f64,
    best: f64,
    best_interval: usize,
    streak: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_epochs: usize) -> EarlyStopper {
        EarlyStopper {
            patience,
            min_epochs: min_epochs as f64,
            best: f64::NEG_INFINITY,
            best_interval: 0,
            streak: 0,
        }
    }

    /// Record one validation point; returns (improved, stop).
    pub fn record(&mut self, interval: usize, epoch: f64, accuracy: f64) -> (bool, bool) {
        let improved = accuracy > self.best;
        if improved {
            self.best = accuracy;
            self.best_interval = interval;
            self.streak = 0;
        } else {
            self.streak += 1;
        }
        let stop = self.streak >= self.patience && epoch >= self.min_epochs;
        (improved, stop)
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_interval, self.best)
    }
}

/// One validation measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub interval: usize,
    pub epoch: f64,
    pub val_accuracy: f64,
    /// Mean training loss over the batches since the previous validation.
    pub train_loss: f64,
}

/// What one training run did and which checkpoint it kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub regime: String,
    pub architecture: Architecture,
    pub seed: u64,
    pub lambda2: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub augmented_train_size: usize,
    pub skipped_instances: usize,
    pub pretrain_epochs: usize,
    pub val_points: Vec<ValPoint>,
    pub best_interval: usize,
    pub best_val_accuracy: f64,
    pub stopped_epoch: f64,
}

struct EncodedItem {
    enc: EncodedInput,
    label: bool,
    target: RationaleTarget,
}

fn encode_dataset(
    vocab: &Vocab,
    dataset: &[Example],
    targets: Vec<RationaleTarget>,
) -> Result<Vec<EncodedItem>> {
    dataset
        .iter()
        .zip(targets)
        .map(|(ex, target)| {
            let input = build_input_for(ex)?;
            Ok(EncodedItem {
                enc: EncodedInput::encode(vocab, &input),
                label: ex.label(),
                target,
            })
        })
        .collect()
}

fn hard_accuracy(params: &ModelParams, items: &[EncodedItem], architecture: Architecture) -> f64 {
    let mode = match architecture {
        Architecture::Standard => MaskMode::Ones,
        Architecture::Rationale => MaskMode::Hard,
    };
    let correct = items
        .iter()
        .filter(|item| {
            let yhat = forward(params, &item.enc, mode).yhat;
            (yhat >= 0.5) == item.label
        })
        .count();
    correct as f64 / items.len() as f64
}

/// Vocabulary over the training corpus plus every resource word, in a
/// deterministic order.
pub fn build_vocab(dataset: &[Example], resources: &LexicalResources) -> Vocab {
    let mut words: Vec<&str> = Vec::new();
    for ex in dataset {
        words.extend(ex.document().tokens.iter().map(|t| t.as_str()));
        words.extend(ex.query().iter().map(|t| t.as_str()));
    }
    let mut resource_words: Vec<&str> = resources.embeddings.words().collect();
    resource_words.sort_unstable();
    words.extend(resource_words);
    Vocab::build(words)
}

/// Train the predictor alone on full input (mask fixed to ones) for
/// `hyper.pretrain_epochs` epochs. Extractor parameters are untouched.
/// Returns the mean training loss per epoch.
pub fn pretrain_predictor(
    params: &mut ModelParams,
    dataset: &[Example],
    hyper: &Hyper,
) -> Result<Vec<f64>> {
    hyper.validate()?;
    let targets = vec![RationaleTarget::None; dataset.len()];
    let items = encode_dataset(&params.vocab, dataset, targets)?;
    pretrain_encoded(params, &items, hyper)
}

fn pretrain_encoded(
    params: &mut ModelParams,
    items: &[EncodedItem],
    hyper: &Hyper,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(params.n_params(), hyper.learning_rate);
    let mut rng = stream(hyper.seed, &["pretrain"]);
    let mut epoch_losses = Vec::with_capacity(hyper.pretrain_epochs);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for _ in 0..hyper.pretrain_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| (&items[i].enc, items[i].label, &items[i].target));
            // extractor untouched: Ones mode yields zero extractor gradient
            // and the step skips the extractor slice outright
            let (loss, grads) = grad_batch(params, batch, hyper, Architecture::Standard);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite pretraining loss {loss}"
                )));
            }
            epoch_loss += loss;
            adam.step(params, &grads, true);
        }
        epoch_losses.push(epoch_loss / items.len() as f64);
    }
    Ok(epoch_losses)
}

/// Split, augment, supervise, pretrain and optimize per the regime; returns
/// the best-validation checkpoint and the run report.
///
/// The validation split is 10% of the clean dataset (at least one instance),
/// held out before augmentation and always evaluated clean.
pub fn train(
    dataset: &[Example],
    regime: &Regime,
    hyper: &Hyper,
    resources: &LexicalResources,
) -> Result<(ModelParams, TrainReport)> {
    hyper.validate()?;
    if dataset.len() < 2 {
        return Err(Error::Config(
            "training requires at least two instances for a train/validation split".into(),
        ));
    }

    // seeded 10% validation split
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    indices.shuffle(&mut stream(hyper.seed, &["split"]));
    let val_count = usize::max(1, (dataset.len() as f64 * 0.1).round() as usize);
    let (val_idx, train_idx) = indices.split_at(val_count);
    let val_set: Dataset = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    let train_set: Dataset = train_idx.iter().map(|&i| dataset[i].clone()).collect();
    if train_set.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }

    let (augmented, skips) = match regime.kind.augmentation_k() {
        Some(k) => augment_dataset(&train_set, k, resources, hyper.seed),
        None => (train_set.clone(), 0),
    };
    let targets = build_targets(&augmented, regime)?;

    let vocab = build_vocab(&augmented, resources);
    let mut params = ModelParams::init(
        vocab.clone(),
        hyper.dim,
        hyper.window,
        &mut stream(hyper.seed, &["init"]),
    );

    let train_items = encode_dataset(&vocab, &augmented, targets)?;
    let val_items = encode_dataset(
        &vocab,
        &val_set,
        vec![RationaleTarget::None; val_set.len()],
    )?;

    let pretrain_epochs = if regime.architecture == Architecture::Rationale {
        hyper.pretrain_epochs
    } else {
        0
    };
    if pretrain_epochs > 0 {
        pretrain_encoded(&mut params, &train_items, hyper)?;
    }

    let batches_per_epoch = train_items.len().div_ceil(hyper.batch_size);
    let interval_batches = usize::max(
        1,
        (hyper.val_interval * batches_per_epoch as f64).round() as usize,
    );

    let mut adam = Adam::new(params.n_params(), hyper.learning_rate);
    let mut stopper = EarlyStopper::new(hyper.patience, hyper.min_epochs);
    let mut best_params = params.clone();
    let mut val_points = Vec::new();
    let mut shuffle_rng = stream(hyper.seed, &["shuffle"]);
    let skip_extractor = regime.architecture == Architecture::Standard;

    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut batches_done = 0usize;
    let mut interval_index = 0usize;
    let mut loss_since_val = 0.0;
    let mut instances_since_val = 0usize;
    let mut pending = ParamGrads::zeros_like(&params);
    let mut pending_batches = 0usize;
    let mut stopped = false;
    let mut stopped_epoch = 0.0;

    'epochs: for _epoch in 0..hyper.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| (&train_items[i].enc, train_items[i].label, &train_items[i].target));
            let (loss, grads) = grad_batch(&params, batch, hyper, regime.architecture);
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss or gradient at batch {batches_done} (loss {loss})"
                )));
            }
            loss_since_val += loss;
            instances_since_val += chunk.len();

            pending.add_assign(&grads);
            pending_batches += 1;
            if pending_batches == hyper.grad_accumulation {
                adam.step(&mut params, &pending, skip_extractor);
                pending.reset();
                pending_batches = 0;
            }
            batches_done += 1;

            if batches_done % interval_batches == 0 {
                interval_index += 1;
                let epoch_float = batches_done as f64 / batches_per_epoch as f64;
                if !params.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite parameters at epoch {epoch_float:.2}"
                    )));
                }
                let val_accuracy = hard_accuracy(&params, &val_items, regime.architecture);
                val_points.push(ValPoint {
                    interval: interval_index,
                    epoch: epoch_float,
                    val_accuracy,
                    train_loss: loss_since_val / instances_since_val.max(1) as f64,
                });
                loss_since_val = 0.0;
                instances_since_val = 0;
                let (improved, stop) = stopper.record(interval_index, epoch_float, val_accuracy);
                if improved {
                    best_params = params.clone();
                }
                if stop {
                    stopped = true;
                    stopped_epoch = epoch_float;
                    break 'epochs;
                }
            }
        }
    }
    if !stopped {
        stopped_epoch = batches_done as f64 / batches_per_epoch as f64;
    }
    // flush a partial accumulation window only if no validation-improved
    // checkpoint depends on it; the returned model is the best snapshot
    let (best_interval, best_val_accuracy) = stopper.best();

    let report = TrainReport {
        regime: regime.kind.name(),
        architecture: regime.architecture,
        seed: hyper.seed,
        lambda2: hyper.lambda2,
        train_size: train_set.len(),
        val_size: val_set.len(),
        augmented_train_size: augmented.len(),
        skipped_instances: skips,
        pretrain_epochs,
        val_points,
        best_interval,
        best_val_accuracy,
        stopped_epoch,
    };
    Ok((best_params, report))
}

/// One grid candidate and the validation accuracy its best checkpoint
/// reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda2: f64,
    pub best_val_accuracy: f64,
}

/// Sparsity-weight grid search: trains once per candidate and keeps the
/// model with the highest clean-validation accuracy (first candidate wins
/// ties). Standard architectures ignore lambda2, so they run once.
pub fn train_grid(
    dataset: &[Example],
    regime: &Regime,
    hyper: &Hyper,
    lambda2_grid: &[f64],
    resources: &LexicalResources,
) -> Result<(ModelParams, TrainReport, Vec<GridPoint>)> {
    let candidates: Vec<f64> = if regime.architecture == Architecture::Standard {
        vec![hyper.lambda2]
    } else if lambda2_grid.is_empty() {
        vec![hyper.lambda2]
    } else {
        lambda2_grid.to_vec()
    };

    let mut best: Option<(ModelParams, TrainReport)> = None;
    let mut grid = Vec::with_capacity(candidates.len());
    for &lambda2 in &candidates {
        let run_hyper = Hyper { lambda2, ..hyper.clone() };
        let (params, report) = train(dataset, regime, &run_hyper, resources)?;
        grid.push(GridPoint {
            lambda2,
            best_val_accuracy: report.best_val_accuracy,
        });
        let better = best
            .as_ref()
            .map_or(true, |(_, b)| report.best_val_accuracy > b.best_val_accuracy);
        if better {
            best = Some((params, report));
        }
    }
    let (params, report) = best.expect("grid has at least one candidate");
    Ok((params, report, grid))
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model: versioned JSON tensor dump with shape metadata carried
/// by the parameter vectors themselves, plus the effective hyperparameters
/// of the run that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub regime: String,
    pub architecture: Architecture,
    pub seed: u64,
    pub config_hash: String,
    pub hyper: Hyper,
    pub params: ModelParams,
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string(checkpoint)
        .map_err(|e| Error::Config(format!("checkpoint serialization failed: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let checkpoint: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        line: 0,
        message: format!("checkpoint parse error: {e}"),
    })?;
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            checkpoint.version
        )));
    }
    if !checkpoint.params.is_finite() {
        return Err(Error::Config("checkpoint contains non-finite values".into()));
    }
    Ok(checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Instance};
    use crate::lexres::{AntonymLexicon, EmbeddingTable, PosLexicon};

    fn toks(s: &str) -> Vec<crate::corpus::Token> {
        tokenize(s).tokens
    }

    /// Separable fixture: the label is whether the document mentions a
    /// number-bearing fact.
    fn separable_dataset(n: usize) -> Dataset {
        (0..n)
            .map(|i| {
                let label = i % 2 == 0;
                let doc = if label {
                    tokenize("susan sent 5 postcards . the garden was calm .")
                } else {
                    tokenize("susan sent some postcards . the garden was calm .")
                };
                let rationale: Vec<bool> = (0..doc.len()).map(|p| p < doc.sentence_ends[0]).collect();
                Example::Clean(Instance {
                    id: format!("s{i}"),
                    document: doc,
                    query: toks("how many postcards did susan send ? || 5"),
                    label,
                    human_rationale: Some(rationale),
                })
            })
            .collect()
    }

    fn fixture_resources() -> LexicalResources {
        let embeddings = EmbeddingTable::new(vec![
            ("susan".to_string(), vec![1.0, 0.1]),
            ("helen".to_string(), vec![1.0, 0.0]),
            ("5".to_string(), vec![0.0, 1.0]),
            ("6".to_string(), vec![0.1, 1.0]),
        ])
        .unwrap();
        let mut pos = PosLexicon::default();
        pos.insert_entity("susan");
        pos.insert_entity("helen");
        LexicalResources {
            embeddings,
            antonyms: AntonymLexicon::default(),
            pos,
        }
    }

    #[test]
    fn regime_names_round_trip() {
        for regime in Regime::all_standard_setups(10) {
            let name = regime.kind.name();
            assert_eq!(RegimeKind::parse(&name).unwrap(), regime.kind);
        }
        assert_eq!(RegimeKind::parse("adv-3x").unwrap(), RegimeKind::AdvKx(3));
        assert!(RegimeKind::parse("adv-0x").is_err());
        assert!(RegimeKind::parse("bogus").is_err());
    }

    #[test]
    fn build_targets_non_attack() {
        let ds = separable_dataset(4);
        let (augmented, _) = augment_dataset(&ds, 1, &fixture_resources(), 3);
        let regime = Regime::new(RegimeKind::AdvAtkSup);
        let targets = build_targets(&augmented, &regime).unwrap();
        for (ex, target) in augmented.iter().zip(&targets) {
            let mask = target.mask().unwrap();
            assert_eq!(mask.len(), ex.document().len());
            match ex.attack_mask() {
                Some(attack) => {
                    for (m, a) in mask.iter().zip(attack) {
                        assert_eq!(*m, !*a);
                    }
                }
                None => assert!(mask.iter().all(|&m| m)),
            }
        }
    }

    #[test]
    fn build_targets_human_zero_on_attack() {
        let ds = separable_dataset(4);
        let (augmented, _) = augment_dataset(&ds, 1, &fixture_resources(), 3);
        let regime = Regime::new(RegimeKind::AdvHumanSup);
        let targets = build_targets(&augmented, &regime).unwrap();
        for (ex, target) in augmented.iter().zip(&targets) {
            let mask = target.mask().unwrap();
            if let Some(attack) = ex.attack_mask() {
                for (m, a) in mask.iter().zip(attack) {
                    assert!(!(*m && *a), "human target marks an attack token");
                }
            }
        }
    }

    #[test]
    fn build_targets_errors_name_the_regime() {
        // strip rationales
        let ds: Dataset = separable_dataset(3)
            .into_iter()
            .map(|ex| match ex {
                Example::Clean(mut i) => {
                    i.human_rationale = None;
                    Example::Clean(i)
                }
                other => other,
            })
            .collect();
        let err = build_targets(&ds, &Regime::new(RegimeKind::HumanSup)).unwrap_err();
        assert!(err.to_string().contains("human-sup"), "{err}");

        let err = build_targets(&ds, &Regime::new(RegimeKind::AdvAtkSup)).unwrap_err();
        assert!(err.to_string().contains("adv-atk-sup"), "{err}");
    }

    #[test]
    fn early_stopper_patience_semantics() {
        // validation accuracies .6 .7 .7 .7 .7 .7 .7 after the epoch floor:
        // the fifth non-improving interval triggers the stop and the first
        // .7 checkpoint is kept
        let mut stopper = EarlyStopper::new(5, 3);
        let accs = [0.6, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7];
        let mut stopped_at = None;
        for (i, &acc) in accs.iter().enumerate() {
            let interval = i + 1;
            let (_, stop) = stopper.record(interval, 3.0 + interval as f64, acc);
            if stop {
                stopped_at = Some(interval);
                break;
            }
        }
        assert_eq!(stopped_at, Some(7));
        assert_eq!(stopper.best(), (2, 0.7));
    }

    #[test]
    fn early_stopper_respects_min_epochs() {
        let mut stopper = EarlyStopper::new(2, 3);
        assert_eq!(stopper.record(1, 0.2, 0.9), (true, false));
        // two bad intervals before epoch 3: no stop yet
        assert_eq!(stopper.record(2, 0.4, 0.5), (false, false));
        assert_eq!(stopper.record(3, 0.6, 0.5), (false, false));
        // same streak past the floor: stop
        assert_eq!(stopper.record(4, 3.0, 0.5), (false, true));
    }

    #[test]
    fn pretrain_leaves_extractor_untouched() {
        let ds = separable_dataset(20);
        let resources = fixture_resources();
        let vocab = build_vocab(&ds, &resources);
        let mut rng = stream(1, &["init"]);
        let mut params = ModelParams::init(vocab, 8, 1, &mut rng);
        let before_ex = params.emb_ex.clone();
        let before_w = params.w_ex.clone();
        let hyper = Hyper {
            pretrain_epochs: 3,
            seed: 5,
            ..Hyper::default()
        };
        let losses = pretrain_predictor(&mut params, &ds, &hyper).unwrap();
        assert_eq!(losses.len(), 3);
        assert_eq!(params.emb_ex, before_ex);
        assert_eq!(params.w_ex, before_w);
        // separable fixture: loss goes down epoch over epoch
        for pair in losses.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "losses not non-increasing: {losses:?}");
        }
    }

    #[test]
    fn pretrain_zero_epochs_is_identity() {
        let ds = separable_dataset(6);
        let resources = fixture_resources();
        let vocab = build_vocab(&ds, &resources);
        let mut rng = stream(2, &["init"]);
        let mut params = ModelParams::init(vocab, 4, 1, &mut rng);
        let before = params.clone();
        let hyper = Hyper {
            pretrain_epochs: 0,
            ..Hyper::default()
        };
        pretrain_predictor(&mut params, &ds, &hyper).unwrap();
        assert_eq!(params, before);
    }

    fn quick_hyper(seed: u64) -> Hyper {
        Hyper {
            dim: 8,
            max_epochs: 4,
            min_epochs: 1,
            seed,
            ..Hyper::default()
        }
    }

    #[test]
    fn train_no_adv_keeps_dataset_size() {
        let ds = separable_dataset(30);
        let (_, report) = train(
            &ds,
            &Regime::new(RegimeKind::NoAdv),
            &quick_hyper(11),
            &fixture_resources(),
        )
        .unwrap();
        assert_eq!(report.val_size, 3);
        assert_eq!(report.train_size, 27);
        assert_eq!(report.augmented_train_size, 27);
    }

    #[test]
    fn train_regime_augmentation_accounting() {
        let ds = separable_dataset(30);
        let resources = fixture_resources();
        let (_, adv) = train(
            &ds,
            &Regime::new(RegimeKind::Adv),
            &quick_hyper(11),
            &resources,
        )
        .unwrap();
        assert_eq!(adv.augmented_train_size, 27 + 27 - adv.skipped_instances);
        assert_eq!(adv.skipped_instances, 0);

        let (_, kx) = train(
            &ds,
            &Regime::new(RegimeKind::AdvKx(3)),
            &quick_hyper(11),
            &resources,
        )
        .unwrap();
        assert_eq!(kx.augmented_train_size, 27 + 3 * 27);
    }

    #[test]
    fn train_standard_never_updates_extractor() {
        let ds = separable_dataset(20);
        let (params, _) = train(
            &ds,
            &Regime::new(RegimeKind::NoAdv),
            &quick_hyper(13),
            &fixture_resources(),
        )
        .unwrap();
        // the extractor is exactly its seeded initialization
        let init = ModelParams::init(
            params.vocab.clone(),
            8,
            1,
            &mut stream(13, &["init"]),
        );
        assert_eq!(params.emb_ex, init.emb_ex);
        assert_eq!(params.w_ex, init.w_ex);
        assert_eq!(params.b_ex, init.b_ex);
        assert_ne!(params.emb_pr, init.emb_pr);
    }

    #[test]
    fn train_is_deterministic() {
        let ds = separable_dataset(24);
        let resources = fixture_resources();
        let regime = Regime::new(RegimeKind::AdvAtkSup);
        let (p1, r1) = train(&ds, &regime, &quick_hyper(17), &resources).unwrap();
        let (p2, r2) = train(&ds, &regime, &quick_hyper(17), &resources).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(p1, p2);
        let (_, r3) = train(&ds, &regime, &quick_hyper(18), &resources).unwrap();
        assert_ne!(r1.seed, r3.seed);
    }

    #[test]
    fn train_rejects_tiny_datasets() {
        let ds = separable_dataset(1);
        let err = train(
            &ds,
            &Regime::new(RegimeKind::NoAdv),
            &quick_hyper(1),
            &fixture_resources(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn best_checkpoint_is_max_validation() {
        let ds = separable_dataset(40);
        let (_, report) = train(
            &ds,
            &Regime::new(RegimeKind::NoAdv),
            &quick_hyper(19),
            &fixture_resources(),
        )
        .unwrap();
        let max = report
            .val_points
            .iter()
            .map(|p| p.val_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(report.best_val_accuracy, max);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let ds = separable_dataset(10);
        let resources = fixture_resources();
        let vocab = build_vocab(&ds, &resources);
        let mut rng = stream(23, &["init"]);
        let params = ModelParams::init(vocab, 6, 1, &mut rng);
        let checkpoint = Checkpoint {
            version: CHECKPOINT_VERSION,
            regime: "no-adv".into(),
            architecture: Architecture::Standard,
            seed: 23,
            config_hash: "abc".into(),
            hyper: Hyper::default(),
            params,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&checkpoint, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        // f64 JSON round-trip is exact
        assert_eq!(loaded.params, checkpoint.params);
        assert_eq!(loaded.architecture, checkpoint.architecture);
    }

    #[test]
    fn checkpoint_version_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        std::fs::write(
            &path,
            r#"{"version":99,"regime":"no-adv","architecture":"standard","seed":0,"config_hash":"","hyper":{},"params":{"vocab":[],"dim":1,"window":0,"emb_ex":[0.0,0.0,0.0],"w_ex":[0.0,0.0,0.0,0.0],"b_ex":0.0,"emb_pr":[0.0,0.0,0.0],"u_pr":[0.0,0.0],"c_pr":0.0}}"#,
        )
        .unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn grid_prefers_higher_validation_and_first_on_tie() {
        let ds = separable_dataset(24);
        let resources = fixture_resources();
        let regime = Regime::new(RegimeKind::AdvAtkSup);
        let (_, report, grid) = train_grid(
            &ds,
            &regime,
            &quick_hyper(29),
            &[0.0, 0.1],
            &resources,
        )
        .unwrap();
        assert_eq!(grid.len(), 2);
        let best = grid
            .iter()
            .map(|g| g.best_val_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(report.best_val_accuracy, best);
        let first_best = grid.iter().find(|g| g.best_val_accuracy == best).unwrap();
        assert_eq!(report.lambda2, first_best.lambda2);
    }
}
