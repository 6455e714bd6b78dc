//! Source pre-training and target adaptation.
//!
//! Adaptation modes:
//! - `dmapl`: confident/unconfident split with the source model, then
//!   fine-tuning on `L_u + λ L_l` with dual moving-average soft labels.
//! - `source_only`: the source model, untouched.
//! - `naive_pl`: each epoch, hard-label every target instance with the current
//!   model and train one epoch of cross-entropy on those labels.
//! - `soft_label_no_split`: the dual moving-average loop with every instance
//!   treated as unlabeled and no labeled term.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::eval::Metrics;
use crate::losses::{labeled_ce, soft_ce, total_loss, LossReport};
use crate::model::{Activation, CosineSchedule, Model, ModelArch, Sgd};
use crate::numkit::{argmax, l2_normalize, Matrix, Rng};
use crate::pseudolabel::{class_feature_means, prototype_assign, CentroidBank, SoftLabelStore};
use crate::splitter::{split_target, SplitDiagnostics, SplitResult};
use crate::{Error, Result};

const INIT_STREAM: u64 = 10;
const SOURCE_BATCH_STREAM: u64 = 11;
const ADAPT_BATCH_STREAM: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dmapl,
    SourceOnly,
    NaivePl,
    SoftLabelNoSplit,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::SourceOnly,
        Mode::NaivePl,
        Mode::SoftLabelNoSplit,
        Mode::Dmapl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Dmapl => "dmapl",
            Mode::SourceOnly => "source_only",
            Mode::NaivePl => "naive_pl",
            Mode::SoftLabelNoSplit => "soft_label_no_split",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }
}

/// Training and adaptation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub p_th: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub eta_0: f64,
    pub eta_1: f64,
    /// Separate schedule for the hidden encoder layers; both must be set to
    /// take effect.
    pub backbone_eta_0: Option<f64>,
    pub backbone_eta_1: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub source_epochs: usize,
    pub adapt_epochs: usize,
    pub batch_size_source: usize,
    pub batch_size_l: usize,
    pub batch_size_u: usize,
    /// Fraction of the source training split held out for early stopping.
    pub source_val_fraction: f64,
    pub seed: u64,
    pub mode: Mode,
    pub hidden_dims: Vec<usize>,
    pub bottleneck_dim: usize,
    pub bottleneck_activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p_th: 0.9,
            alpha: 0.9,
            beta: 0.9,
            lambda: 1.0,
            eta_0: 1e-2,
            eta_1: 1e-3,
            backbone_eta_0: None,
            backbone_eta_1: None,
            momentum: 0.9,
            weight_decay: 1e-3,
            source_epochs: 20,
            adapt_epochs: 20,
            batch_size_source: 64,
            batch_size_l: 64,
            batch_size_u: 64,
            source_val_fraction: 0.1,
            seed: 0,
            mode: Mode::Dmapl,
            hidden_dims: vec![64],
            bottleneck_dim: 32,
            bottleneck_activation: Activation::Relu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        open_unit("p_th", self.p_th)?;
        open_unit("alpha", self.alpha)?;
        open_unit("beta", self.beta)?;
        open_unit("source_val_fraction", self.source_val_fraction)?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        let check_lr = |a: f64, b: f64, what: &str| {
            if a >= b && b > 0.0 && a.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{what} learning rates need eta_0 >= eta_1 > 0, got {a} and {b}"
                )))
            }
        };
        check_lr(self.eta_0, self.eta_1, "head")?;
        if let (Some(a), Some(b)) = (self.backbone_eta_0, self.backbone_eta_1) {
            check_lr(a, b, "backbone")?;
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size_l == 0 || self.batch_size_u == 0 || self.batch_size_source == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.source_epochs == 0 {
            return Err(Error::Config("source_epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets one field from `key` and a TOML literal (`0.5`, `"dmapl"`, `[32]`).
    /// Bare words are treated as strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed = parse_toml_value(value);
        let known = table.contains_key(key)
            || matches!(key, "backbone_eta_0" | "backbone_eta_1");
        if !known {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        table.insert(key.to_string(), parsed);
        let updated: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}={value}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn arch(&self, input_dim: usize, num_classes: usize) -> ModelArch {
        ModelArch {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            bottleneck_dim: self.bottleneck_dim,
            num_classes,
            bottleneck_activation: self.bottleneck_activation,
        }
    }

    fn optimizer(&self, total_steps: usize) -> Sgd {
        let head = CosineSchedule {
            eta_0: self.eta_0,
            eta_1: self.eta_1,
            total_steps,
        };
        let sgd = Sgd::new(self.momentum, self.weight_decay, head);
        match (self.backbone_eta_0, self.backbone_eta_1) {
            (Some(eta_0), Some(eta_1)) => sgd.with_backbone_schedule(CosineSchedule {
                eta_0,
                eta_1,
                total_steps,
            }),
            _ => sgd,
        }
    }
}

pub(crate) fn parse_toml_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SourceOutcome {
    pub model: Model,
    pub epochs: Vec<SourceEpoch>,
    /// 1-based epoch whose checkpoint was kept.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Mean cross-entropy over the batch; returns loss and parameter gradients.
fn ce_step(model: &Model, batch: &Matrix, labels: &[usize]) -> Result<(f64, crate::model::Gradients)> {
    let out = model.forward(batch)?;
    let (loss, grad) = labeled_ce(&out.probs, labels)?;
    if !loss.is_finite() {
        return Err(Error::Divergence("cross-entropy loss".into()));
    }
    Ok((loss, model.backward(batch, &grad)?))
}

/// (accuracy, mean cross-entropy) on a labeled set.
fn validation_scores(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    let truth = data.require_labels("validation")?;
    let probs = model.forward(data.features())?.probs;
    let correct = probs
        .iter_rows()
        .zip(truth)
        .filter(|(p, &y)| argmax(p) == y)
        .count();
    let (loss, _) = labeled_ce(&probs, truth)?;
    Ok((correct as f64 / truth.len() as f64, loss))
}

/// Cross-entropy training on labeled source data, keeping the epoch
/// checkpoint with the best validation accuracy. Accuracy ties go to the
/// lower validation loss, then to the earlier epoch.
pub fn train_source_logged(
    source_train: &Dataset,
    source_val: &Dataset,
    config: &TrainConfig,
) -> Result<SourceOutcome> {
    config.validate()?;
    let labels = source_train.require_labels("source training")?;
    source_val.require_labels("source validation")?;
    if source_train.num_classes() != source_val.num_classes() || source_train.dim() != source_val.dim() {
        return Err(Error::InvalidArgument(
            "source train and validation sets disagree on classes or dimension".into(),
        ));
    }
    if source_train.is_empty() || source_val.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let arch = config.arch(source_train.dim(), source_train.num_classes());
    let mut model = Model::new(arch, &mut Rng::with_stream(config.seed, INIT_STREAM))?;
    let mut rng = Rng::with_stream(config.seed, SOURCE_BATCH_STREAM);

    let n = source_train.len();
    let bs = config.batch_size_source;
    let steps_per_epoch = n.div_ceil(bs);
    let mut opt = config.optimizer(config.source_epochs * steps_per_epoch);

    let mut order: Vec<usize> = (0..n).collect();
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY, f64::INFINITY);
    let mut epochs = Vec::with_capacity(config.source_epochs);
    let mut t = 0;
    for epoch in 1..=config.source_epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(bs) {
            let batch = source_train.features().select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = ce_step(&model, &batch, &y)?;
            opt.step(&mut model, &grads, t)?;
            t += 1;
            loss_sum += loss;
        }
        let (val_accuracy, val_loss) = validation_scores(&model, source_val)?;
        let loss = loss_sum / steps_per_epoch as f64;
        log::info!("source epoch {epoch}: loss {loss:.4} val acc {val_accuracy:.4} val loss {val_loss:.4}");
        if val_accuracy > best.2 || (val_accuracy == best.2 && val_loss < best.3) {
            best = (model.clone(), epoch, val_accuracy, val_loss);
        }
        epochs.push(SourceEpoch {
            epoch,
            loss,
            val_accuracy,
            val_loss,
        });
    }
    Ok(SourceOutcome {
        model: best.0,
        epochs,
        best_epoch: best.1,
        best_val_accuracy: best.2,
    })
}

pub fn train_source(source_train: &Dataset, source_val: &Dataset, config: &TrainConfig) -> Result<Model> {
    train_source_logged(source_train, source_val, config).map(|o| o.model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Batch-mean losses averaged over the epoch's steps.
    pub losses: LossReport,
    pub lr_end: f64,
    /// Mean L1 mass of the soft labels at epoch end.
    pub mean_soft_label_mass: Option<f64>,
    /// Steps whose soft-label update was skipped while centroids warmed up.
    pub warmup_skipped_steps: usize,
    /// Unlabeled instances whose prototype assignment differs from the
    /// current model's argmax, over the epoch (only for dual moving-average modes).
    pub prototype_disagreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub seed: u64,
    pub config: TrainConfig,
    pub labeled_count: usize,
    pub unlabeled_count: usize,
    pub split: Option<SplitDiagnostics>,
    pub epochs: Vec<EpochRecord>,
    pub test_metrics: Option<Metrics>,
    /// Excluded from run summaries so identical runs compare equal.
    pub wall_clock_secs: f64,
}

impl RunRecord {
    fn new(config: &TrainConfig) -> Self {
        Self {
            mode: config.mode,
            seed: config.seed,
            config: config.clone(),
            labeled_count: 0,
            unlabeled_count: 0,
            split: None,
            epochs: Vec::new(),
            test_metrics: None,
            wall_clock_secs: 0.0,
        }
    }

    /// Epoch log as JSON lines.
    pub fn epochs_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub model: Model,
    pub record: RunRecord,
    /// The split computed from the source model (dmapl only).
    pub split: Option<SplitResult>,
    /// Final soft-label store and the target indices its rows refer to.
    pub soft_labels: Option<(SoftLabelStore, Vec<usize>)>,
}

/// Cycles through a fixed index set, reshuffling on every wrap-around.
struct CyclicSampler {
    items: Vec<usize>,
    pos: usize,
}

impl CyclicSampler {
    fn new(items: Vec<usize>, rng: &mut Rng) -> Self {
        let mut s = Self { items, pos: 0 };
        rng.shuffle(&mut s.items);
        s
    }

    fn take(&mut self, n: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        if self.items.is_empty() {
            return out;
        }
        while out.len() < n {
            if self.pos == self.items.len() {
                rng.shuffle(&mut self.items);
                self.pos = 0;
            }
            out.push(self.items[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Dispatches on `config.mode`.
pub fn adapt(source_model: &Model, target_train: &Dataset, config: &TrainConfig) -> Result<AdaptOutcome> {
    match config.mode {
        Mode::Dmapl => adapt_dmapl(source_model, target_train, config),
        _ => adapt_ablation(source_model, target_train, config),
    }
}

fn check_adapt_inputs(source_model: &Model, target_train: &Dataset, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if target_train.is_empty() {
        return Err(Error::InvalidArgument("target training set is empty".into()));
    }
    if target_train.dim() != source_model.arch().input_dim {
        return Err(Error::Shape(format!(
            "target features have {} columns, model expects {}",
            target_train.dim(),
            source_model.arch().input_dim
        )));
    }
    Ok(())
}

pub fn adapt_dmapl(source_model: &Model, target_train: &Dataset, config: &TrainConfig) -> Result<AdaptOutcome> {
    if config.mode != Mode::Dmapl {
        return Err(Error::Config(format!(
            "adapt_dmapl called with mode {}",
            config.mode.name()
        )));
    }
    check_adapt_inputs(source_model, target_train, config)?;
    let started = Instant::now();
    let split = split_target(source_model, target_train, config.p_th)?;
    let mut record = RunRecord::new(config);
    record.split = Some(crate::splitter::split_diagnostics(&split, None));
    let (model, store) = dual_moving_average_loop(
        source_model,
        target_train,
        &split.labeled_indices,
        &split.pseudo_labels,
        &split.unlabeled_indices,
        config,
        &mut record,
    )?;
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    let unlabeled = split.unlabeled_indices.clone();
    Ok(AdaptOutcome {
        model,
        record,
        split: Some(split),
        soft_labels: Some((store, unlabeled)),
    })
}

pub fn adapt_ablation(source_model: &Model, target_train: &Dataset, config: &TrainConfig) -> Result<AdaptOutcome> {
    check_adapt_inputs(source_model, target_train, config)?;
    let started = Instant::now();
    let mut record = RunRecord::new(config);
    let mut soft_labels = None;
    let model = match config.mode {
        Mode::Dmapl => {
            return Err(Error::Config(
                "adapt_ablation does not run the full method; use adapt_dmapl".into(),
            ))
        }
        Mode::SourceOnly => source_model.clone(),
        Mode::NaivePl => naive_pseudo_label_loop(source_model, target_train, config, &mut record)?,
        Mode::SoftLabelNoSplit => {
            let all: Vec<usize> = (0..target_train.len()).collect();
            let (model, store) =
                dual_moving_average_loop(source_model, target_train, &[], &[], &all, config, &mut record)?;
            soft_labels = Some((store, all));
            model
        }
    };
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(AdaptOutcome {
        model,
        record,
        split: None,
        soft_labels,
    })
}

#[derive(Default)]
struct EpochAccum {
    loss_l: f64,
    loss_u: f64,
    total: f64,
    steps: usize,
    warmup_skipped: usize,
    assigned: usize,
    disagreements: usize,
}

/// The fine-tuning loop shared by `dmapl` (non-empty labeled subset) and
/// `soft_label_no_split` (empty labeled subset, no labeled loss).
///
/// One epoch is a pass over the unlabeled subset in shuffled batches; the
/// labeled subset is sampled cyclically alongside. When the unlabeled subset
/// is empty, epochs pass over the labeled subset instead.
fn dual_moving_average_loop(
    source_model: &Model,
    data: &Dataset,
    labeled: &[usize],
    pseudo_labels: &[usize],
    unlabeled: &[usize],
    config: &TrainConfig,
    record: &mut RunRecord,
) -> Result<(Model, SoftLabelStore)> {
    let c = source_model.num_classes();
    let mut model = source_model.clone();
    let mut rng = Rng::with_stream(config.seed, ADAPT_BATCH_STREAM);
    let mut bank = CentroidBank::new(c, source_model.arch().bottleneck_dim, config.alpha)?;
    let mut store = SoftLabelStore::new(unlabeled.len(), c, config.beta)?;
    record.labeled_count = labeled.len();
    record.unlabeled_count = unlabeled.len();

    // Positions into `labeled` / `unlabeled`, so pseudo-labels and soft labels
    // are addressed by position.
    let mut l_sampler = CyclicSampler::new((0..labeled.len()).collect(), &mut rng);
    let mut u_order: Vec<usize> = (0..unlabeled.len()).collect();
    let drive_by_unlabeled = !unlabeled.is_empty();
    let steps_per_epoch = if drive_by_unlabeled {
        unlabeled.len().div_ceil(config.batch_size_u)
    } else {
        labeled.len().div_ceil(config.batch_size_l)
    };
    let total_steps = config.adapt_epochs * steps_per_epoch;
    let mut opt = config.optimizer(total_steps);
    let lambda = if labeled.is_empty() { 0.0 } else { config.lambda };

    let mut t = 0;
    for epoch in 1..=config.adapt_epochs {
        rng.shuffle(&mut u_order);
        let mut acc = EpochAccum::default();
        for step in 0..steps_per_epoch {
            let (l_pos, u_pos): (Vec<usize>, Vec<usize>) = if drive_by_unlabeled {
                let lo = step * config.batch_size_u;
                let hi = (lo + config.batch_size_u).min(unlabeled.len());
                (
                    l_sampler.take(config.batch_size_l, &mut rng),
                    u_order[lo..hi].to_vec(),
                )
            } else {
                let n = config
                    .batch_size_l
                    .min(labeled.len() - step * config.batch_size_l);
                (l_sampler.take(n, &mut rng), Vec::new())
            };
            let nl = l_pos.len();
            let rows: Vec<usize> = l_pos
                .iter()
                .map(|&p| labeled[p])
                .chain(u_pos.iter().map(|&p| unlabeled[p]))
                .collect();
            let batch = data.features().select_rows(&rows);
            let out = model.forward(&batch)?;

            // Pseudo-labels for the centroid means: frozen for L, current argmax for U.
            let current: Vec<usize> = out.probs.iter_rows().map(argmax).collect();
            let bar_y: Vec<usize> = l_pos
                .iter()
                .map(|&p| pseudo_labels[p])
                .chain(current[nl..].iter().copied())
                .collect();

            let mut z = Matrix::zeros(out.features.rows(), out.features.cols());
            let mut zero_norm = vec![false; z.rows()];
            for (i, f) in out.features.iter_rows().enumerate() {
                match l2_normalize(f) {
                    Ok(v) => z.row_mut(i).copy_from_slice(&v),
                    Err(Error::ZeroNorm) => zero_norm[i] = true,
                    Err(e) => return Err(e),
                }
            }
            let means = class_feature_means(&z, &bar_y, c, Some(&zero_norm))?;
            bank.update(&means)?;

            if !u_pos.is_empty() {
                if bank.is_warm() {
                    let keep: Vec<usize> = (nl..rows.len()).filter(|&i| !zero_norm[i]).collect();
                    let z_u = z.select_rows(&keep);
                    let y_tilde = prototype_assign(&bank, &z_u)?;
                    let store_idx: Vec<usize> = keep.iter().map(|&i| u_pos[i - nl]).collect();
                    store.update(&store_idx, &y_tilde)?;
                    acc.assigned += keep.len();
                    acc.disagreements += keep
                        .iter()
                        .enumerate()
                        .filter(|(r, &i)| argmax(y_tilde.row(*r)) != current[i])
                        .count();
                } else {
                    acc.warmup_skipped += 1;
                }
            }

            let mut grad = Matrix::zeros(rows.len(), c);
            let mut loss_l = 0.0;
            if nl > 0 {
                let y: Vec<usize> = l_pos.iter().map(|&p| pseudo_labels[p]).collect();
                let (l, g) = labeled_ce(&out.probs.select_rows(&(0..nl).collect::<Vec<_>>()), &y)?;
                loss_l = l;
                for i in 0..nl {
                    for (dst, src) in grad.row_mut(i).iter_mut().zip(g.row(i)) {
                        *dst = lambda * src;
                    }
                }
            }
            let mut loss_u = 0.0;
            if !u_pos.is_empty() {
                let q = store.gather(&u_pos)?;
                let probs_u = out.probs.select_rows(&(nl..rows.len()).collect::<Vec<_>>());
                let (l, g) = soft_ce(&probs_u, &q)?;
                loss_u = l;
                for i in 0..u_pos.len() {
                    grad.row_mut(nl + i).copy_from_slice(g.row(i));
                }
            }
            let report = total_loss(loss_u, loss_l, lambda);
            if !report.total.is_finite() {
                return Err(Error::Divergence("adaptation loss".into()));
            }
            let grads = model.backward(&batch, &grad)?;
            opt.step(&mut model, &grads, t)?;
            t += 1;

            acc.loss_l += report.loss_l;
            acc.loss_u += report.loss_u;
            acc.total += report.total;
            acc.steps += 1;
        }
        let steps = acc.steps.max(1) as f64;
        let mean_mass = (!store.is_empty()).then(|| {
            store.soft_labels().data().iter().sum::<f64>() / store.len() as f64
        });
        let rec = EpochRecord {
            epoch,
            steps: acc.steps,
            losses: LossReport {
                loss_l: acc.loss_l / steps,
                loss_u: acc.loss_u / steps,
                total: acc.total / steps,
                lambda,
            },
            lr_end: opt.head.lr(t),
            mean_soft_label_mass: mean_mass,
            warmup_skipped_steps: acc.warmup_skipped,
            prototype_disagreement: (acc.assigned > 0)
                .then(|| acc.disagreements as f64 / acc.assigned as f64),
        };
        log::info!(
            "adapt epoch {epoch}: L_l {:.4} L_u {:.4} total {:.4}",
            rec.losses.loss_l,
            rec.losses.loss_u,
            rec.losses.total
        );
        record.epochs.push(rec);
    }
    Ok((model, store))
}

fn naive_pseudo_label_loop(
    source_model: &Model,
    data: &Dataset,
    config: &TrainConfig,
    record: &mut RunRecord,
) -> Result<Model> {
    let mut model = source_model.clone();
    let mut rng = Rng::with_stream(config.seed, ADAPT_BATCH_STREAM);
    let n = data.len();
    let bs = config.batch_size_u;
    let steps_per_epoch = n.div_ceil(bs);
    let mut opt = config.optimizer(config.adapt_epochs * steps_per_epoch);
    let mut order: Vec<usize> = (0..n).collect();
    record.unlabeled_count = n;
    let mut t = 0;
    for epoch in 1..=config.adapt_epochs {
        let labels = crate::eval::predict(&model, data)?;
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(bs) {
            let batch = data.features().select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = ce_step(&model, &batch, &y)?;
            opt.step(&mut model, &grads, t)?;
            t += 1;
            loss_sum += loss;
        }
        let loss = loss_sum / steps_per_epoch as f64;
        record.epochs.push(EpochRecord {
            epoch,
            steps: steps_per_epoch,
            losses: LossReport {
                loss_l: loss,
                loss_u: 0.0,
                total: loss,
                lambda: 1.0,
            },
            lr_end: opt.head.lr(t),
            mean_soft_label_mass: None,
            warmup_skipped_steps: 0,
            prototype_disagreement: None,
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_domain_pair, stratified_split, DomainShiftSpec};

    fn small_config() -> TrainConfig {
        TrainConfig {
            source_epochs: 20,
            adapt_epochs: 3,
            p_th: 0.6,
            hidden_dims: vec![16],
            bottleneck_dim: 8,
            ..Default::default()
        }
    }

    fn small_data(seed: u64) -> (Dataset, Dataset, Dataset) {
        let spec = DomainShiftSpec {
            samples_per_class: 120,
            seed,
            ..Default::default()
        };
        let (src, tgt) = generate_domain_pair(&spec).unwrap();
        let (tr, val) = stratified_split(&src, 0.9, seed).unwrap();
        (tr, val, tgt)
    }

    #[test]
    fn defaults_match_documented_values() {
        let c = TrainConfig::default();
        assert_eq!((c.p_th, c.alpha, c.beta, c.lambda), (0.9, 0.9, 0.9, 1.0));
        assert_eq!((c.eta_0, c.eta_1), (1e-2, 1e-3));
        assert_eq!((c.momentum, c.weight_decay), (0.9, 1e-3));
        assert_eq!(c.source_epochs, 20);
        assert_eq!((c.batch_size_l, c.batch_size_u), (64, 64));
        c.validate().unwrap();
    }

    #[test]
    fn config_toml_and_overrides() {
        let c = TrainConfig::from_toml_str("p_th = 0.8\nmode = \"naive_pl\"\n").unwrap();
        assert_eq!(c.p_th, 0.8);
        assert_eq!(c.mode, Mode::NaivePl);
        assert_eq!(c.beta, 0.9);
        let back = TrainConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);

        let mut c = TrainConfig::default();
        c.set("lambda", "0.01").unwrap();
        c.set("mode", "soft_label_no_split").unwrap();
        c.set("hidden_dims", "[8, 8]").unwrap();
        c.set("backbone_eta_0", "0.001").unwrap();
        assert_eq!(c.lambda, 0.01);
        assert_eq!(c.mode, Mode::SoftLabelNoSplit);
        assert_eq!(c.hidden_dims, vec![8, 8]);
        assert_eq!(c.backbone_eta_0, Some(0.001));
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("alpha", "1.5").is_err());
        assert!(TrainConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn cyclic_sampler_covers_everything_each_cycle() {
        let mut rng = Rng::new(0);
        let mut s = CyclicSampler::new((0..5).collect(), &mut rng);
        let mut first: Vec<usize> = s.take(5, &mut rng);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.take(12, &mut rng).len(), 12);
    }

    #[test]
    fn source_training_is_deterministic() {
        let (tr, val, _) = small_data(1);
        let cfg = small_config();
        let a = train_source_logged(&tr, &val, &cfg).unwrap();
        let b = train_source_logged(&tr, &val, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epochs, b.epochs);
        assert!(a.best_val_accuracy >= a.epochs[0].val_accuracy);
    }

    #[test]
    fn source_only_returns_source_model() {
        let (tr, val, tgt) = small_data(2);
        let src = train_source(&tr, &val, &small_config()).unwrap();
        let cfg = TrainConfig {
            mode: Mode::SourceOnly,
            ..small_config()
        };
        let out = adapt(&src, &tgt.without_labels(), &cfg).unwrap();
        assert_eq!(out.model, src);
        assert!(out.record.epochs.is_empty());
    }

    #[test]
    fn dmapl_runs_and_is_deterministic() {
        let (tr, val, tgt) = small_data(3);
        let src = train_source(&tr, &val, &small_config()).unwrap();
        let cfg = small_config();
        let target = tgt.without_labels();
        let a = adapt(&src, &target, &cfg).unwrap();
        let b = adapt(&src, &target, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.record.epochs, b.record.epochs);
        assert_eq!(a.record.epochs.len(), 3);
        let split = a.split.unwrap();
        assert_eq!(split, split_target(&src, &target, cfg.p_th).unwrap());
        let (store, _) = a.soft_labels.unwrap();
        for i in 0..store.len() {
            let mass: f64 = store.get(i).iter().sum();
            let expected = 1.0 - cfg.beta.powi(store.update_count(i) as i32);
            assert!((mass - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn all_confident_reduces_to_supervised_fine_tuning() {
        let (tr, val, tgt) = small_data(4);
        let src = train_source(&tr, &val, &small_config()).unwrap();
        let cfg = TrainConfig {
            p_th: 1e-9,
            ..small_config()
        };
        let out = adapt(&src, &tgt.without_labels(), &cfg).unwrap();
        assert_eq!(out.record.unlabeled_count, 0);
        assert_eq!(out.record.epochs.len(), 3);
        assert!(out.record.epochs.iter().all(|e| e.losses.loss_u == 0.0));
    }

    #[test]
    fn ablation_modes_run() {
        let (tr, val, tgt) = small_data(5);
        let src = train_source(&tr, &val, &small_config()).unwrap();
        for mode in [Mode::NaivePl, Mode::SoftLabelNoSplit] {
            let cfg = TrainConfig {
                mode,
                ..small_config()
            };
            let out = adapt(&src, &tgt.without_labels(), &cfg).unwrap();
            assert_eq!(out.record.epochs.len(), 3);
            assert!(out.model.is_finite());
        }
        assert!(adapt_ablation(&src, &tgt, &small_config()).is_err());
    }
}
