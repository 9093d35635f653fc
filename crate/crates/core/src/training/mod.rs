//! Training orchestration: configuration, per-fold fitting, subject-wise
//! cross-validation, and the ablation runner.
//!
//! Every source of randomness is derived from one base seed through
//! [`derive_seed`], so a run is reproducible bit-for-bit: fold assignment,
//! validation holdout, parameter initialization, oversampling, dropout,
//! and minibatch order each get their own stream. All report files are
//! written with fixed formatting and are byte-identical across repeat
//! runs with the same configuration.

pub mod optim;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bimamba::FusionMode;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::imbalance::{
    alpha_from_frequencies, borderline_smote, focal_loss, FocalConfig, SmoteConfig,
};
use crate::metrics::{render_csv, ConfusionMatrix};
use crate::model::{ModelConfig, SequenceVariant, SleepModel};
use crate::nn::Mode;
use crate::signal_io::{make_folds, EpochDataset, FoldSplit, SleepStage, SAMPLES_PER_EPOCH};
use crate::tensor::NdArray;

use optim::{clip_global_norm, AdamState, Phase, SchedulerConfig, SchedulerState};

/// Derive an independent sub-seed from a base seed, a role label, and an
/// index. FNV-1a over the role feeds a splitmix64 finalizer, so distinct
/// roles and indices land in well-separated streams.
pub fn derive_seed(base: u64, role: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in role.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    let mut z = base ^ h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Which preset architecture to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelScale {
    /// Workstation scale (24 CNN channels, sequence width 32).
    Desk,
    /// Full scale (384 CNN channels, sequence width 128).
    Paper,
    /// Tiny scale for tests and gradient checks.
    Toy,
}

impl std::fmt::Display for ModelScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelScale::Desk => "desk",
            ModelScale::Paper => "paper",
            ModelScale::Toy => "toy",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for ModelScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(ModelScale::Desk),
            "paper" => Ok(ModelScale::Paper),
            "toy" => Ok(ModelScale::Toy),
            other => Err(Error::Config(format!(
                "unknown model scale {other:?} (expected desk, paper, or toy)"
            ))),
        }
    }
}

/// How the focal-loss class weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// Inverse class frequency of the training fold, normalized to mean 1.
    InverseFrequency,
    /// All classes weighted 1.
    Uniform,
}

/// Full training recipe. Every field has a default, so a TOML config file
/// only needs to name the fields it overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model_scale: ModelScale,
    pub variant: SequenceVariant,
    pub fusion: FusionMode,
    /// Initial learning rate for the plateau phase.
    pub lr0: f64,
    pub batch_size: usize,
    /// Hard cap on epochs per fold (early stopping usually fires first).
    pub max_epochs: usize,
    /// Stagnant epochs before training stops.
    pub early_stop: usize,
    /// Stagnant epochs before the scheduler goes cyclic.
    pub switch_after: usize,
    pub rrp_factor: f64,
    pub rrp_patience: usize,
    pub clr_base: f64,
    pub clr_max: f64,
    pub clr_step: usize,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub folds: usize,
    /// Fraction of training subjects held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub focal_gamma: f64,
    pub alpha_mode: AlphaMode,
    /// Oversample borderline minority samples in the training split.
    pub smote: bool,
    pub smote_k: usize,
    pub smote_m: usize,
    pub smote_target_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model_scale: ModelScale::Desk,
            variant: SequenceVariant::Bidirectional,
            fusion: FusionMode::GatedResidual,
            lr0: 1e-3,
            batch_size: 128,
            max_epochs: 100,
            early_stop: 30,
            switch_after: 15,
            rrp_factor: 0.5,
            rrp_patience: 5,
            clr_base: 1e-5,
            clr_max: 1e-3,
            clr_step: 5,
            grad_clip: 5.0,
            folds: 5,
            val_fraction: 0.1,
            seed: 42,
            focal_gamma: 2.0,
            alpha_mode: AlphaMode::InverseFrequency,
            smote: true,
            smote_k: 5,
            smote_m: 10,
            smote_target_ratio: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("bad training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    /// Serialize the resolved configuration (used by the CLI banner).
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("training config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be nonzero".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be nonzero".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "cross-validation needs at least 2 folds, got {}",
                self.folds
            )));
        }
        if !self.val_fraction.is_finite() || self.val_fraction <= 0.0 || self.val_fraction >= 1.0 {
            return Err(Error::Config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if !self.grad_clip.is_finite() || self.grad_clip <= 0.0 {
            return Err(Error::Config(format!(
                "grad_clip must be positive, got {}",
                self.grad_clip
            )));
        }
        self.scheduler()?;
        FocalConfig { gamma: self.focal_gamma, alpha: [1.0; SleepStage::COUNT] }.validate()?;
        self.smote_config().validate()?;
        self.model_config()?;
        Ok(())
    }

    /// Scheduler thresholds drawn from this recipe (validated).
    pub fn scheduler(&self) -> Result<SchedulerConfig> {
        let cfg = SchedulerConfig {
            lr0: self.lr0,
            rrp_factor: self.rrp_factor,
            rrp_patience: self.rrp_patience,
            switch_after: self.switch_after,
            clr_base: self.clr_base,
            clr_max: self.clr_max,
            clr_step: self.clr_step,
            early_stop: self.early_stop,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn smote_config(&self) -> SmoteConfig {
        SmoteConfig { k: self.smote_k, m: self.smote_m, target_ratio: self.smote_target_ratio }
    }

    /// The architecture this recipe trains.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut mc = match self.model_scale {
            ModelScale::Desk => ModelConfig::desk(),
            ModelScale::Paper => ModelConfig::paper(),
            ModelScale::Toy => ModelConfig::toy(),
        };
        mc.variant = self.variant;
        mc.mamba.fusion = self.fusion;
        mc.validate()?;
        Ok(mc)
    }
}

/// Hold out a validation slice of the training subjects.
///
/// Subjects are sorted, shuffled with the given seed, and the tail
/// `max(1, round(fraction · n))` become validation (capped so at least one
/// subject remains for fitting). Both lists come back sorted.
pub fn split_validation(
    train_subjects: &[String],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    let mut subjects: Vec<String> = train_subjects.to_vec();
    subjects.sort();
    subjects.dedup();
    if subjects.len() < 2 {
        return Err(Error::Config(format!(
            "validation holdout needs at least 2 training subjects, got {}",
            subjects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let n = subjects.len();
    let want = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut val = subjects.split_off(n - want);
    subjects.sort();
    val.sort();
    Ok((subjects, val))
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub phase: Phase,
}

/// Fixed-format CSV for the per-epoch log (byte-deterministic).
pub fn history_csv(rows: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_acc,lr,phase\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.8e},{}\n",
            r.epoch, r.train_loss, r.val_acc, r.lr, r.phase
        ));
    }
    out
}

/// Everything a finished fold hands back.
pub struct FoldOutcome {
    /// Test-set confusion of the best-validation snapshot.
    pub cm: ConfusionMatrix,
    pub history: Vec<EpochRecord>,
    /// The restored best-validation model.
    pub model: SleepModel,
    pub best_val_acc: f64,
}

/// Confusion matrix of `model` over the epochs named by `idx`.
pub fn evaluate_confusion(
    model: &mut SleepModel,
    ds: &EpochDataset,
    idx: &[usize],
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new();
    let chunk_len = batch_size.max(1);
    for chunk in idx.chunks(chunk_len) {
        let mut xb = Vec::with_capacity(chunk.len() * SAMPLES_PER_EPOCH);
        for &i in chunk {
            xb.extend_from_slice(ds.epoch(i));
        }
        let preds = model.predict(&xb, chunk.len())?;
        for (&i, p) in chunk.iter().zip(preds) {
            cm.record(ds.label(i), p);
        }
    }
    Ok(cm)
}

/// Fit batches swept per batch-norm recalibration (capped by the number
/// of fit batches available).
const CAL_BATCHES: usize = 24;

/// Re-estimate the batch-norm running statistics for evaluation.
///
/// Training accumulates running statistics from dropout-noised
/// activations; at rate 0.5 the noise roughly doubles the second moment,
/// so those statistics badly overestimate the variance the network
/// produces once dropout is inert, and evaluation accuracy collapses
/// while train-mode accuracy is fine. Before each evaluation, sweep a
/// fixed number of fit batches in calibrate mode — batch-statistics
/// normalization, cumulative averaging into the running buffers, no
/// dropout — so the stored statistics describe the network evaluation
/// actually runs.
fn recalibrate_bn(
    model: &mut SleepModel,
    feats: &[f64],
    order: &[usize],
    batch_size: usize,
) -> Result<()> {
    model.reset_bn();
    // Dropout is inert in calibrate mode; the RNG is never consulted.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in order.chunks(batch_size.max(1)).take(CAL_BATCHES) {
        let mut xb = Vec::with_capacity(chunk.len() * SAMPLES_PER_EPOCH);
        for &i in chunk {
            xb.extend_from_slice(&feats[i * SAMPLES_PER_EPOCH..(i + 1) * SAMPLES_PER_EPOCH]);
        }
        let g = Graph::inference();
        let x = g.constant(NdArray::from_vec(&[chunk.len(), 1, SAMPLES_PER_EPOCH], xb)?);
        let _ = model.forward(&g, &x, Mode::Calibrate, &mut rng)?;
    }
    Ok(())
}

/// Train one fold end to end and score its test subjects.
///
/// The fold's training subjects are split again into fit and validation
/// subjects; oversampling (if enabled) sees only the fit epochs. After
/// every epoch the scheduler inspects validation accuracy; each strict
/// improvement snapshots the model, and the snapshot with the best
/// validation accuracy is what gets scored on the test subjects.
pub fn train_fold(
    ds: &EpochDataset,
    split: &FoldSplit,
    cfg: &TrainConfig,
    fold: usize,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    let (fit_subjects, val_subjects) = split_validation(
        &split.train_subjects,
        cfg.val_fraction,
        derive_seed(cfg.seed, "val-split", fold as u64),
    )?;
    for s in &split.test_subjects {
        if fit_subjects.contains(s) || val_subjects.contains(s) {
            return Err(Error::Config(format!(
                "fold {fold}: test subject {s} leaked into the training split"
            )));
        }
    }

    let fit_idx = ds.indices_of_subjects(&fit_subjects);
    let val_idx = ds.indices_of_subjects(&val_subjects);
    let test_idx = ds.indices_of_subjects(&split.test_subjects);
    for (name, idx) in [("fit", &fit_idx), ("validation", &val_idx), ("test", &test_idx)] {
        if idx.is_empty() {
            return Err(Error::Data(format!("fold {fold}: the {name} split has no epochs")));
        }
    }

    // Gather the fit epochs into a flat matrix the oversampler and the
    // batcher can both index.
    let mut feats: Vec<f64> = Vec::with_capacity(fit_idx.len() * SAMPLES_PER_EPOCH);
    let mut labels: Vec<SleepStage> = Vec::with_capacity(fit_idx.len());
    for &i in &fit_idx {
        feats.extend_from_slice(ds.epoch(i));
        labels.push(ds.label(i));
    }

    // Class weights come from the real (pre-oversampling) distribution.
    let mut hist = [0usize; SleepStage::COUNT];
    for l in &labels {
        hist[l.index()] += 1;
    }
    let alpha = match cfg.alpha_mode {
        AlphaMode::InverseFrequency => alpha_from_frequencies(&hist)?,
        AlphaMode::Uniform => [1.0; SleepStage::COUNT],
    };
    let focal = FocalConfig { gamma: cfg.focal_gamma, alpha };

    if cfg.smote {
        let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "smote", fold as u64));
        let (sf, sl) =
            borderline_smote(&feats, SAMPLES_PER_EPOCH, &labels, &cfg.smote_config(), &mut srng)?;
        log::info!("fold {fold}: oversampling added {} synthetic epochs", sl.len());
        feats.extend_from_slice(&sf);
        labels.extend_from_slice(&sl);
    }

    let mut model =
        SleepModel::new(cfg.model_config()?, derive_seed(cfg.seed, "model-init", fold as u64))?;
    let mut adam = AdamState::new(&model.store);
    let sched_cfg = cfg.scheduler()?;
    let mut sched = SchedulerState::new(&sched_cfg);
    let mut drop_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout", fold as u64));

    let n_train = labels.len();
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(SleepModel, f64)> = None;

    for epoch in 0..cfg.max_epochs {
        let lr = sched.lr_for_epoch(&sched_cfg, epoch);
        let phase = sched.phase();

        let mut order: Vec<usize> = (0..n_train).collect();
        let mut orng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            "batch-order",
            ((fold as u64) << 32) | epoch as u64,
        ));
        order.shuffle(&mut orng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut xb = Vec::with_capacity(chunk.len() * SAMPLES_PER_EPOCH);
            let mut yb = Vec::with_capacity(chunk.len());
            for &i in chunk {
                xb.extend_from_slice(&feats[i * SAMPLES_PER_EPOCH..(i + 1) * SAMPLES_PER_EPOCH]);
                yb.push(labels[i]);
            }
            let g = Graph::new();
            let x = g.constant(NdArray::from_vec(&[chunk.len(), 1, SAMPLES_PER_EPOCH], xb)?);
            let logits = model.forward(&g, &x, Mode::Train, &mut drop_rng)?;
            let (loss, dlogits) = focal_loss(logits.value(), &yb, &focal)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "fold {fold} epoch {epoch}: training loss went non-finite"
                )));
            }
            let grads = g.backward_seeded(&logits, dlogits)?;
            model.store.zero_grads();
            g.accumulate_param_grads(&grads, &mut model.store);
            clip_global_norm(&mut model.store, cfg.grad_clip);
            adam.step(&mut model.store, lr);
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;

        recalibrate_bn(&mut model, &feats, &order, cfg.batch_size)?;
        let val_acc = evaluate_confusion(&mut model, ds, &val_idx, cfg.batch_size)?.accuracy();
        let tick = sched.observe(&sched_cfg, epoch, val_acc);
        history.push(EpochRecord { epoch, train_loss, val_acc, lr, phase });
        log::info!(
            "fold {fold} epoch {epoch}: loss {train_loss:.4} val_acc {val_acc:.4} lr {lr:.2e} [{phase}]"
        );
        if tick.improved {
            best = Some((model.clone(), val_acc));
        }
        if tick.stop {
            log::info!("fold {fold}: stopping after epoch {epoch} (validation stalled)");
            break;
        }
    }

    // Validation accuracy is ≥ 0, so the first epoch always improves on
    // the scheduler's initial −∞ and a snapshot exists.
    let (mut best_model, best_val_acc) = best.expect("at least one epoch ran");
    let cm = evaluate_confusion(&mut best_model, ds, &test_idx, cfg.batch_size)?;
    Ok(FoldOutcome { cm, history, model: best_model, best_val_acc })
}

/// Per-fold slice of a cross-validation outcome.
pub struct FoldSummary {
    pub fold: usize,
    pub cm: ConfusionMatrix,
    pub best_val_acc: f64,
    pub epochs_run: usize,
}

/// Cross-validation outcome: per-fold and pooled confusions.
pub struct CvOutcome {
    pub pooled: ConfusionMatrix,
    pub folds: Vec<FoldSummary>,
}

/// Subject-wise k-fold cross-validation.
///
/// Writes `fold_{i}_report.csv`, `fold_{i}_history.csv`, and
/// `fold_{i}_model.json` per fold plus `pooled_report.csv` into
/// `out_dir`. Every file is byte-deterministic for a fixed configuration.
pub fn cross_validate(ds: &EpochDataset, cfg: &TrainConfig, out_dir: &Path) -> Result<CvOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let folds = make_folds(ds.subject_ids(), cfg.folds, derive_seed(cfg.seed, "folds", 0))?;
    let mut pooled = ConfusionMatrix::new();
    let mut summaries = Vec::new();
    for (fi, split) in folds.iter().enumerate() {
        log::info!(
            "fold {fi}: {} training subjects, {} test subjects",
            split.train_subjects.len(),
            split.test_subjects.len()
        );
        let outcome = train_fold(ds, split, cfg, fi)?;
        std::fs::write(out_dir.join(format!("fold_{fi}_report.csv")), render_csv(&outcome.cm))?;
        std::fs::write(
            out_dir.join(format!("fold_{fi}_history.csv")),
            history_csv(&outcome.history),
        )?;
        outcome.model.save(&out_dir.join(format!("fold_{fi}_model.json")))?;
        pooled.merge(&outcome.cm);
        summaries.push(FoldSummary {
            fold: fi,
            cm: outcome.cm,
            best_val_acc: outcome.best_val_acc,
            epochs_run: outcome.history.len(),
        });
    }
    std::fs::write(out_dir.join("pooled_report.csv"), render_csv(&pooled))?;
    Ok(CvOutcome { pooled, folds: summaries })
}

/// One line of the ablation table (raw 0–1 scores; κ in [−1, 1]).
pub struct AblationRow {
    pub variant: SequenceVariant,
    pub acc: f64,
    pub mf1: f64,
    pub kappa: f64,
}

/// Fixed-format CSV for the ablation table (scores × 100).
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,acc,mf1,kappa\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.variant,
            r.acc * 100.0,
            r.mf1 * 100.0,
            r.kappa * 100.0
        ));
    }
    out
}

/// Train all four sequence-module variants on the first fold and tabulate
/// their test scores.
///
/// A single shared fold keeps the comparison apples-to-apples (same
/// subjects, same derived seeds) while staying affordable; the full model
/// gets its definitive score from [`cross_validate`].
pub fn run_ablation(ds: &EpochDataset, cfg: &TrainConfig, out_dir: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let folds = make_folds(ds.subject_ids(), cfg.folds, derive_seed(cfg.seed, "folds", 0))?;
    let split = &folds[0];
    let mut rows = Vec::new();
    for variant in SequenceVariant::ALL {
        let mut vcfg = cfg.clone();
        vcfg.variant = variant;
        log::info!("ablation: training variant {variant}");
        let outcome = train_fold(ds, split, &vcfg, 0)?;
        std::fs::write(
            out_dir.join(format!("ablation_{variant}_report.csv")),
            render_csv(&outcome.cm),
        )?;
        rows.push(AblationRow {
            variant,
            acc: outcome.cm.accuracy(),
            mf1: outcome.cm.macro_f1(),
            kappa: outcome.cm.kappa(),
        });
    }
    std::fs::write(out_dir.join("ablation_summary.csv"), ablation_csv(&rows))?;
    Ok(rows)
}
