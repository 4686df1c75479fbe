//! Weakly supervised training: Adam, class-balanced batching, case-level
//! splits and k-fold cross-validation with early stopping on validation loss.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{EmbeddingBag, TaskSpec};
use crate::embedding::EmbeddingStore;
use crate::error::{Error, Result};
use crate::mil::{self, BagView, Gradients, MilModel, DEFAULT_ATTENTION_DIM};
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Balance {
    Oversample,
    Undersample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub folds: usize,
    pub seed: u64,
    pub balance: Balance,
    /// Attention hidden width `m`.
    pub attention_dim: usize,
    /// Train Nancy-low/high specialists without their group placeholder class.
    pub drop_placeholder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 8,
            max_epochs: 300,
            patience: 20,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            folds: 5,
            seed: 0,
            balance: Balance::Oversample,
            attention_dim: DEFAULT_ATTENTION_DIM,
            drop_placeholder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Invalid(format!("train config: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1");
        }
        if self.patience > self.max_epochs {
            return fail("patience must not exceed max_epochs");
        }
        if self.folds < 2 {
            return fail("folds must be at least 2");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive");
        }
        if self.attention_dim == 0 {
            return fail("attention_dim must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts without
/// touching the parameters or the state.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Shape {
            context: "Adam parameters vs gradients",
            expected: params.len(),
            actual: grads.len(),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient element {i} passed to Adam")));
    }
    state.t += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
    Ok(())
}

/// One epoch of class-balanced batches over `labels` (task class per bag).
///
/// Oversampling draws every class `max_count` times: whole shuffled passes
/// over the class, topped up by a sample without replacement. Undersampling
/// draws `min_count` bags per class without replacement. Draws are shuffled
/// together and cut into batches; the last batch may be short.
pub fn balanced_batches(
    labels: &[usize],
    class_names: &[String],
    batch_size: usize,
    mode: Balance,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_names.len()];
    for (i, &c) in labels.iter().enumerate() {
        by_class
            .get_mut(c)
            .ok_or_else(|| Error::Invalid(format!("label {c} outside the task's classes")))?
            .push(i);
    }
    let missing: Vec<&str> = by_class
        .iter()
        .zip(class_names)
        .filter(|(members, _)| members.is_empty())
        .map(|(_, name)| name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingClass {
            class: missing.join(", "),
        });
    }
    let counts = by_class.iter().map(Vec::len);
    let target = match mode {
        Balance::Oversample => counts.max().unwrap_or(0),
        Balance::Undersample => counts.min().unwrap_or(0),
    };
    let mut draws = Vec::with_capacity(target * by_class.len());
    for members in &mut by_class {
        let mut remaining = target;
        while remaining >= members.len() {
            members.shuffle(rng);
            draws.extend_from_slice(members);
            remaining -= members.len();
        }
        members.shuffle(rng);
        draws.extend_from_slice(&members[..remaining]);
    }
    draws.shuffle(rng);
    Ok(draws.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Preliminary,
    Final,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Preliminary => "preliminary",
            Split::Final => "final",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub preliminary: f64,
    pub final_test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.70,
            preliminary: 0.15,
            final_test: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseSplit {
    pub split: Split,
    /// Cross-validation fold, for training cases only.
    pub fold: Option<usize>,
}

/// Case-level split assignment; every slide of a case follows its case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub folds: usize,
    pub cases: BTreeMap<String, CaseSplit>,
}

impl SplitAssignment {
    pub fn get(&self, case_id: &str) -> Option<CaseSplit> {
        self.cases.get(case_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.cases.values().filter(|c| c.split == split).count()
    }
}

/// Largest-remainder allocation of `n` items to the three ratios.
fn allocate(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let r = [ratios.train, ratios.preliminary, ratios.final_test];
    let exact: Vec<f64> = r.iter().map(|x| x * n as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    for k in 0..3 {
        // guard against 69.99999 from float products
        counts[k] = (exact[k] + 1e-9).floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Seeded case-level assignment. Unique case ids are sorted, shuffled, cut
/// by ratio (largest remainder), and training cases get round-robin folds in
/// shuffled order.
pub fn make_splits<S: AsRef<str>>(
    case_ids: &[S],
    ratios: &SplitRatios,
    folds: usize,
    seed: u64,
) -> Result<SplitAssignment> {
    let r = [ratios.train, ratios.preliminary, ratios.final_test];
    if r.iter().any(|x| !(0.0..=1.0).contains(x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split ratios must be in [0, 1] and sum to 1, got {r:?}"
        )));
    }
    if folds < 2 {
        return Err(Error::Invalid("at least 2 folds are required".into()));
    }
    let unique: BTreeSet<&str> = case_ids.iter().map(|c| c.as_ref()).collect();
    let mut cases: Vec<&str> = unique.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases.shuffle(&mut rng);
    let [n_train, n_prelim, _] = allocate(cases.len(), ratios);
    if n_train < folds {
        return Err(Error::Invalid(format!(
            "{n_train} training cases cannot fill {folds} folds"
        )));
    }
    let mut out = BTreeMap::new();
    for (i, case) in cases.iter().enumerate() {
        let split = if i < n_train {
            CaseSplit {
                split: Split::Train,
                fold: Some(i % folds),
            }
        } else if i < n_train + n_prelim {
            CaseSplit {
                split: Split::Preliminary,
                fold: None,
            }
        } else {
            CaseSplit {
                split: Split::Final,
                fold: None,
            }
        };
        out.insert(case.to_string(), split);
    }
    Ok(SplitAssignment { folds, cases: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_so_far: f64,
}

pub const HISTORY_HEADER: &str = "epoch\ttrain_loss\tval_loss\tbest_so_far";

pub fn history_tsv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.epoch, r.train_loss, r.val_loss, r.best_so_far);
    }
    out
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    /// Parameters from the epoch with the lowest validation loss.
    pub model: MilModel,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub val_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub task: TaskSpec,
    pub folds: Vec<FoldResult>,
    /// Index into `folds` of the model with the lowest validation loss.
    pub deployed: usize,
}

impl TrainOutcome {
    pub fn deployed_model(&self) -> &MilModel {
        &self.folds[self.deployed].model
    }
}

/// A bag widened to `f64` with its task target.
pub struct Example {
    pub data: Vec<f64>,
    pub dim: usize,
    pub target: usize,
}

impl Example {
    pub fn view(&self) -> BagView<'_> {
        BagView::new(&self.data, self.dim).expect("validated bag")
    }
}

/// Bags labelled in `task`'s space; bags whose grade has no class are skipped.
pub fn examples_for<'a>(bags: impl IntoIterator<Item = &'a EmbeddingBag>, task: &TaskSpec) -> Vec<Example> {
    bags.into_iter()
        .filter_map(|b| {
            task.map_label(b.label).map(|target| Example {
                data: b.to_f64(),
                dim: b.dim,
                target,
            })
        })
        .collect()
}

/// Mean loss of `model` over `examples`, summed in order.
pub fn mean_loss(model: &MilModel, examples: &[Example], exec: Exec) -> Result<f64> {
    let losses = exec.map(examples, |ex| {
        let trace = mil::predict(model, &ex.view())?;
        mil::loss(&trace.slide_logits, ex.target, &model.task)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / examples.len() as f64)
}

pub fn accuracy(model: &MilModel, examples: &[Example], exec: Exec) -> Result<f64> {
    let hits = exec.map(examples, |ex| {
        mil::predict(model, &ex.view()).map(|t| argmax(&t.probs) == ex.target)
    });
    let mut n = 0usize;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / examples.len() as f64)
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and mean gradient over one batch.
pub fn batch_gradient(model: &MilModel, examples: &[Example], batch: &[usize], exec: Exec) -> Result<(f64, Gradients)> {
    let per_bag = exec.map(batch, |&i| {
        let ex = &examples[i];
        mil::backward(model, &ex.view(), ex.target)
    });
    let mut total = Gradients::zeros(model.layout());
    let mut loss = 0.0;
    for r in per_bag {
        let (l, g) = r?;
        loss += l;
        total.add_assign(&g);
    }
    let k = 1.0 / batch.len() as f64;
    total.scale(k);
    Ok((loss * k, total))
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64 + 1)
}

/// Train one fold: model from `config.seed + fold`, sampler stream from a
/// seed derived from `(config.seed, fold)`.
pub fn train_fold(
    task: &TaskSpec,
    dim: usize,
    train: &[Example],
    val: &[Example],
    fold: usize,
    config: &TrainConfig,
    exec: Exec,
) -> Result<FoldResult> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(format!(
            "fold {fold} has {} training and {} validation bags",
            train.len(),
            val.len()
        )));
    }
    let mut model = MilModel::new(
        task.clone(),
        dim,
        config.attention_dim,
        config.seed.wrapping_add(fold as u64),
    )?;
    let mut adam = AdamState::new(model.layout().len());
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(config.seed, fold));
    let labels: Vec<usize> = train.iter().map(|e| e.target).collect();
    let names = task.class_names();

    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut since_best = 0usize;
    let mut history = Vec::new();
    for epoch in 1..=config.max_epochs {
        let batches = balanced_batches(&labels, &names, config.batch_size, config.balance, &mut rng)?;
        let mut epoch_loss = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let (loss, grads) = batch_gradient(&model, train, batch, exec)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at fold {fold} epoch {epoch} batch {b}"
                )));
            }
            epoch_loss += loss;
            adam_step(model.params_mut(), &grads.data, &mut adam, config)
                .map_err(|e| Error::NonFinite(format!("fold {fold} epoch {epoch} batch {b}: {e}")))?;
        }
        let train_loss = epoch_loss / batches.len() as f64;
        let val_loss = mean_loss(&model, val, exec)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation loss at fold {fold} epoch {epoch}"
            )));
        }
        if val_loss < best.0 {
            best = (val_loss, epoch, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            best_so_far: best.0,
        });
        if since_best >= config.patience {
            break;
        }
    }
    let (best_val_loss, best_epoch, model) = best;
    let val_accuracy = accuracy(&model, val, exec)?;
    Ok(FoldResult {
        fold,
        model,
        best_epoch,
        best_val_loss,
        val_accuracy,
        history,
    })
}

/// Cross-validated training of one task on the training split of `splits`.
/// Folds run through `exec`; each fold is itself deterministic, so results
/// do not depend on the execution mode.
pub fn train_task(
    store: &EmbeddingStore,
    task: &TaskSpec,
    config: &TrainConfig,
    splits: &SplitAssignment,
    exec: Exec,
) -> Result<TrainOutcome> {
    config.validate()?;
    if store.is_empty() {
        return Err(Error::Invalid("embedding store is empty".into()));
    }
    let folds = splits.folds;
    let fold_of = |b: &EmbeddingBag| -> Result<Option<usize>> {
        let s = splits
            .get(&b.case_id)
            .ok_or_else(|| Error::Invalid(format!("case {} of slide {} has no split", b.case_id, b.slide_id)))?;
        Ok(if s.split == Split::Train { s.fold } else { None })
    };
    let mut assigned = Vec::with_capacity(store.len());
    for b in &store.bags {
        assigned.push((b, fold_of(b)?));
    }
    let results = exec.map_range(folds, |k| {
        let train = examples_for(
            assigned
                .iter()
                .filter(|(_, f)| matches!(f, Some(j) if *j != k))
                .map(|(b, _)| *b),
            task,
        );
        let val = examples_for(assigned.iter().filter(|(_, f)| *f == Some(k)).map(|(b, _)| *b), task);
        train_fold(task, store.dim, &train, &val, k, config, exec)
    });
    let folds: Vec<FoldResult> = results.into_iter().collect::<Result<_>>()?;
    let mut deployed = 0;
    for (i, f) in folds.iter().enumerate() {
        if f.best_val_loss < folds[deployed].best_val_loss {
            deployed = i;
        }
    }
    Ok(TrainOutcome {
        task: task.clone(),
        folds,
        deployed,
    })
}

/// Task spec used for `kind` under `config` (placeholder dropped if requested).
pub fn task_for(kind: crate::domain::TaskKind, config: &TrainConfig) -> Result<TaskSpec> {
    if config.drop_placeholder && kind != crate::domain::TaskKind::Neutrophil {
        TaskSpec::without_placeholder(kind)
    } else {
        Ok(TaskSpec::new(kind))
    }
}
