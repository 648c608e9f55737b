//! Optimization and protocol: Adam with L2 regularization, the epoch loop,
//! validation-driven early stopping, and the stratified cross-validation
//! driver that trains one fresh model per fold against a shared validation
//! split.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{
    batches, encode_instance, split_validation, stratified_folds, ClaimInstance, EmbeddingSource,
    EncodeContext, LabeledClaim, Vocabulary,
};
use crate::metrics::{evaluate, EvalReport, DEFAULT_THRESHOLD};
use crate::model::{forward, init_params, loss, predict_batch, MacConfig, MacParams};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

/// Two F1 values closer than this count as equal and defer to AUC.
pub const F1_TIE_TOLERANCE: f64 = 1e-12;

/// Everything about the optimization run that is not model architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// L2 strength added to gradients (coupled) or applied directly to
    /// weights (decoupled).
    pub weight_decay: f64,
    pub decoupled_decay: bool,
    pub patience: usize,
    pub max_epochs: usize,
    pub folds: usize,
    pub val_fraction: f64,
    pub min_token_freq: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> TrainSettings {
        TrainSettings {
            batch_size: 32,
            learning_rate: 0.001,
            weight_decay: 0.001,
            decoupled_decay: false,
            patience: 10,
            max_epochs: 300,
            folds: 5,
            val_fraction: 0.1,
            min_token_freq: 2,
            seed: 42,
        }
    }
}

/// Adam with bias correction. Moment buffers mirror the parameter list
/// given at construction, in order.
pub struct AdamState {
    lr: f64,
    weight_decay: f64,
    decoupled: bool,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64, decoupled: bool, params: &[&Tensor]) -> AdamState {
        AdamState {
            lr,
            weight_decay,
            decoupled,
            t: 0,
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over the same parameters the state was built for. With
    /// coupled decay the effective gradient is g + λθ; with decoupled decay
    /// the raw gradient drives Adam and λ·θ is subtracted separately.
    pub fn step(&mut self, named: &[(String, &Tensor)]) -> Result<()> {
        if named.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer built for {} tensors, stepping {}",
                self.m.len(),
                named.len()
            )));
        }
        self.t += 1;
        let bias1 = 1.0 - BETA1.powi(self.t as i32);
        let bias2 = 1.0 - BETA2.powi(self.t as i32);
        for (idx, (name, tensor)) in named.iter().enumerate() {
            let grad = tensor
                .grad()
                .ok_or_else(|| Error::Contract(format!("parameter {name} has no gradient")))?;
            if grad.len() != self.m[idx].len() {
                return Err(Error::Contract(format!(
                    "parameter {name} changed size under the optimizer"
                )));
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: name.clone(),
                });
            }
            let mut values = tensor.values();
            for i in 0..values.len() {
                let theta = values[i];
                let g = if self.decoupled {
                    grad[i]
                } else {
                    grad[i] + self.weight_decay * theta
                };
                let m = BETA1 * self.m[idx][i] + (1.0 - BETA1) * g;
                let v = BETA2 * self.v[idx][i] + (1.0 - BETA2) * g * g;
                self.m[idx][i] = m;
                self.v[idx][i] = v;
                let m_hat = m / bias1;
                let v_hat = v / bias2;
                let mut next = theta - self.lr * m_hat / (v_hat.sqrt() + EPSILON);
                if self.decoupled {
                    next -= self.lr * self.weight_decay * theta;
                }
                values[i] = next;
            }
            tensor.set_values(&values);
        }
        Ok(())
    }
}

/// One pass over the training instances in seeded mini-batch order. Each
/// batch accumulates per-instance gradients, averages them, applies one
/// Adam step, and re-zeroes PAD embedding rows. Returns the mean loss per
/// instance.
pub fn train_epoch(
    params: &MacParams,
    cfg: &MacConfig,
    insts: &[ClaimInstance],
    adam: &mut AdamState,
    batch_size: usize,
    order_seed: u64,
    epoch: usize,
) -> Result<f64> {
    if insts.is_empty() {
        return Err(Error::Contract("cannot train on an empty instance set".into()));
    }
    let named = params.named_tensors();
    let mut total = 0.0;
    for batch in batches(insts.len(), batch_size, order_seed, epoch) {
        params.zero_grads();
        for &idx in &batch {
            let tape = Tape::new();
            let out = forward(&tape, params, cfg, &insts[idx], false)?;
            let l = loss(&tape, &out.prob, insts[idx].label)?;
            total += l.item();
            tape.backward(&l)?;
        }
        let scale = 1.0 / batch.len() as f64;
        for (_, tensor) in &named {
            tensor.scale_grad(scale);
        }
        params.discard_pad_gradients();
        adam.step(&named)?;
        params.reset_pad_rows();
    }
    Ok(total / insts.len() as f64)
}

/// Validation-driven stopping: an epoch improves when its F1-macro beats
/// the best, or ties it within [`F1_TIE_TOLERANCE`] with a higher AUC.
/// Training stops after `patience` consecutive non-improving epochs.
pub struct EarlyStopping {
    patience: usize,
    best_f1: f64,
    best_auc: f64,
    best_epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> EarlyStopping {
        EarlyStopping {
            patience,
            best_f1: f64::NEG_INFINITY,
            best_auc: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, f1_macro: f64, auc: f64) -> StopDecision {
        debug_assert!((0.0..=1.0).contains(&f1_macro) && (0.0..=1.0).contains(&auc));
        let tied = (f1_macro - self.best_f1).abs() <= F1_TIE_TOLERANCE;
        let improved = (!tied && f1_macro > self.best_f1) || (tied && auc > self.best_auc);
        if improved {
            self.best_f1 = f1_macro;
            self.best_auc = auc;
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_f1(&self) -> f64 {
        self.best_f1
    }

    pub fn best_auc(&self) -> f64 {
        self.best_auc
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1_macro: f64,
    pub val_auc: f64,
    /// True on the final epoch of the fold.
    pub stopped: bool,
}

/// Everything one fold produced. Parameter values are stored as raw
/// vectors (canonical tensor order) so outcomes can cross threads; use
/// [`FoldOutcome::materialize_params`] to rebuild a usable model.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    /// Architecture with this fold's table sizes filled in.
    pub config: MacConfig,
    /// Metrics on the fold's held-out test split.
    pub report: EvalReport,
    pub vocab: Vocabulary,
    pub speakers: Option<Vocabulary>,
    pub publishers: Option<Vocabulary>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub param_values: Vec<Vec<f64>>,
}

impl FoldOutcome {
    pub fn materialize_params(&self) -> Result<MacParams> {
        let params = init_params(&self.config, 0, &self.vocab, None)?;
        params.load_values(&self.param_values)?;
        Ok(params)
    }
}

/// Across-fold means and sample standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub folds: usize,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_f1_macro: f64,
    pub std_f1_macro: f64,
    pub mean_f1_micro: f64,
    pub std_f1_micro: f64,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    /// Ordered by fold index regardless of worker scheduling.
    pub folds: Vec<FoldOutcome>,
    pub aggregate: AggregateReport,
}

/// Fold-level parallelism, read from the MAC_WORKERS environment variable
/// (default 1).
pub fn worker_count() -> usize {
    parse_workers(std::env::var("MAC_WORKERS").ok().as_deref())
}

fn parse_workers(raw: Option<&str>) -> usize {
    raw.and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&w| w >= 1)
        .unwrap_or(1)
}

struct FoldPlan<'a> {
    fold: usize,
    train: Vec<&'a LabeledClaim>,
    test: Vec<&'a LabeledClaim>,
}

/// The full protocol: hold out a stratified validation fraction once, run
/// stratified k-fold cross-validation on the remainder, train each fold
/// from a fresh seed with early stopping on the shared validation set, and
/// evaluate on the fold's test split. Deterministic for a fixed (corpus,
/// config, settings) triple at any worker count.
pub fn run_cv(
    claims: &[LabeledClaim],
    base_cfg: &MacConfig,
    settings: &TrainSettings,
    pretrained: Option<&EmbeddingSource>,
) -> Result<CvOutcome> {
    let labels: Vec<u8> = claims.iter().map(|c| c.label).collect();
    let (pool_idx, val_idx) = split_validation(&labels, settings.val_fraction, settings.seed)?;
    let pool_labels: Vec<u8> = pool_idx.iter().map(|&i| labels[i]).collect();
    let splits = stratified_folds(&pool_labels, settings.folds, settings.seed)?;
    let val_claims: Vec<&LabeledClaim> = val_idx.iter().map(|&i| &claims[i]).collect();
    let plans: Vec<FoldPlan> = splits
        .iter()
        .enumerate()
        .map(|(fold, (train, test))| FoldPlan {
            fold,
            train: train.iter().map(|&i| &claims[pool_idx[i]]).collect(),
            test: test.iter().map(|&i| &claims[pool_idx[i]]).collect(),
        })
        .collect();
    let val_keys: BTreeSet<&str> = val_claims.iter().map(|c| c.claim_id.as_str()).collect();
    for plan in &plans {
        for claim in plan.train.iter().chain(plan.test.iter()) {
            assert!(
                !val_keys.contains(claim.claim_id.as_str()),
                "validation claim {} leaked into fold {}",
                claim.claim_id,
                plan.fold
            );
        }
    }

    let workers = worker_count().min(plans.len()).max(1);
    let slots: Vec<Mutex<Option<Result<FoldOutcome>>>> =
        plans.iter().map(|_| Mutex::new(None)).collect();
    let cursor = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                if i >= plans.len() {
                    break;
                }
                let outcome = run_fold(&plans[i], &val_claims, base_cfg, settings, pretrained);
                *slots[i].lock().expect("fold slot") = Some(outcome);
            });
        }
    });
    let mut folds = Vec::with_capacity(plans.len());
    for slot in slots {
        let outcome = slot
            .into_inner()
            .expect("fold slot")
            .expect("every fold was claimed by a worker")?;
        folds.push(outcome);
    }
    let aggregate = aggregate_reports(&folds);
    Ok(CvOutcome { folds, aggregate })
}

fn run_fold(
    plan: &FoldPlan,
    val_claims: &[&LabeledClaim],
    base_cfg: &MacConfig,
    settings: &TrainSettings,
    pretrained: Option<&EmbeddingSource>,
) -> Result<FoldOutcome> {
    // Vocabularies come from this fold's training claims only.
    let texts = plan.train.iter().flat_map(|c| {
        std::iter::once(c.claim_text.as_str()).chain(c.evidence.iter().map(|d| d.text.as_str()))
    });
    let vocab = Vocabulary::build(texts, settings.min_token_freq);
    let speakers = base_cfg.use_speakers.then(|| {
        Vocabulary::from_labels(plan.train.iter().filter_map(|c| c.speaker.as_deref()), 1)
    });
    let publishers = base_cfg.use_publishers.then(|| {
        Vocabulary::from_labels(
            plan.train
                .iter()
                .flat_map(|c| c.evidence.iter().map(|d| d.publisher.as_str())),
            1,
        )
    });
    let cfg = base_cfg.with_tables(
        vocab.size(),
        speakers.as_ref().map_or(2, Vocabulary::size),
        publishers.as_ref().map_or(2, Vocabulary::size),
    );
    let ctx = EncodeContext {
        vocab: &vocab,
        speakers: speakers.as_ref(),
        publishers: publishers.as_ref(),
        claim_len: cfg.claim_len,
        doc_len: cfg.doc_len,
        max_docs: cfg.max_docs,
    };
    let encode_all = |claims: &[&LabeledClaim]| -> Result<Vec<ClaimInstance>> {
        claims.iter().map(|c| encode_instance(c, &ctx)).collect()
    };
    let train_insts = encode_all(&plan.train)?;
    let test_insts = encode_all(&plan.test)?;
    let val_insts = encode_all(val_claims)?;
    let val_labels: Vec<u8> = val_insts.iter().map(|i| i.label).collect();

    let fold_seed = settings.seed.wrapping_add(plan.fold as u64 + 1);
    let params = init_params(&cfg, fold_seed, &vocab, pretrained)?;
    let mut adam = AdamState::new(
        settings.learning_rate,
        settings.weight_decay,
        settings.decoupled_decay,
        &params.tensors(),
    );
    let mut stopper = EarlyStopping::new(settings.patience);
    let mut best_values = params.snapshot_values();
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    for epoch in 1..=settings.max_epochs {
        let train_loss = train_epoch(
            &params,
            &cfg,
            &train_insts,
            &mut adam,
            settings.batch_size,
            fold_seed,
            epoch,
        )?;
        let scores: Vec<f64> = predict_batch(&params, &cfg, &val_insts)?
            .iter()
            .map(|p| p.y_hat)
            .collect();
        let val_report = evaluate(&scores, &val_labels, DEFAULT_THRESHOLD)?;
        let decision = stopper.update(epoch, val_report.f1_macro, val_report.auc);
        if decision.improved {
            best_values = params.snapshot_values();
            best_epoch = epoch;
        }
        epochs.push(EpochRecord {
            fold: plan.fold,
            epoch,
            train_loss,
            val_f1_macro: val_report.f1_macro,
            val_auc: val_report.auc,
            stopped: decision.stop || epoch == settings.max_epochs,
        });
        if decision.stop {
            break;
        }
    }
    params.load_values(&best_values)?;
    let scores: Vec<f64> = predict_batch(&params, &cfg, &test_insts)?
        .iter()
        .map(|p| p.y_hat)
        .collect();
    let test_labels: Vec<u8> = test_insts.iter().map(|i| i.label).collect();
    let report = evaluate(&scores, &test_labels, DEFAULT_THRESHOLD)?;
    Ok(FoldOutcome {
        fold: plan.fold,
        config: cfg,
        report,
        vocab,
        speakers,
        publishers,
        epochs,
        best_epoch,
        param_values: best_values,
    })
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let xs: Vec<f64> = values.collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

fn aggregate_reports(folds: &[FoldOutcome]) -> AggregateReport {
    let (mean_auc, std_auc) = mean_std(folds.iter().map(|f| f.report.auc));
    let (mean_f1_macro, std_f1_macro) = mean_std(folds.iter().map(|f| f.report.f1_macro));
    let (mean_f1_micro, std_f1_micro) = mean_std(folds.iter().map(|f| f.report.f1_micro));
    AggregateReport {
        folds: folds.len(),
        mean_auc,
        std_auc,
        mean_f1_macro,
        std_f1_macro,
        mean_f1_micro,
        std_f1_micro,
    }
}
