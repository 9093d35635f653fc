//! Full sleep-staging model: CNN front end → channel recalibration →
//! bidirectional selective state-space block → stage head.
//!
//! An epoch enters as `[batch, 1, 3000]`, leaves the front end as a
//! `[batch, channels, time]` feature map, is transposed to time-major and
//! projected to the sequence width, runs through the sequence module
//! (switchable for ablations: none, forward-only, backward-only, or
//! bidirectional), is mean-pooled over time, and ends in five logits.
//!
//! The whole parameter set lives in one [`ParamStore`]; models serialize
//! to a self-describing JSON file carrying the configuration, every named
//! tensor, and the batch-norm running statistics, so a reloaded model is
//! bit-identical to the saved one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::bimamba::{block_forward_directions, MambaBlockParams, MambaConfig};
use crate::error::{Error, Result};
use crate::features::{trcnn_forward, TrcnnConfig, TrcnnParams, TrcnnStates};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::imbalance::{focal_loss, FocalConfig};
use crate::nn::gradcheck::{GradCheckReport, FD_STEP};
use crate::nn::{init, BnState, Mode};
use crate::signal_io::{SleepStage, SAMPLES_PER_EPOCH};
use crate::tensor::NdArray;

/// Which sequence module runs between the front end and the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceVariant {
    /// Identity passthrough — the CNN features go straight to pooling.
    NoMamba,
    /// Forward scan only.
    ForwardOnly,
    /// Backward scan only.
    BackwardOnly,
    /// Both directions fused (the full model).
    Bidirectional,
}

impl SequenceVariant {
    pub const ALL: [SequenceVariant; 4] = [
        SequenceVariant::NoMamba,
        SequenceVariant::ForwardOnly,
        SequenceVariant::BackwardOnly,
        SequenceVariant::Bidirectional,
    ];
}

impl std::fmt::Display for SequenceVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SequenceVariant::NoMamba => "no_mamba",
            SequenceVariant::ForwardOnly => "forward_only",
            SequenceVariant::BackwardOnly => "backward_only",
            SequenceVariant::Bidirectional => "bidirectional",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for SequenceVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_mamba" => Ok(SequenceVariant::NoMamba),
            "forward_only" => Ok(SequenceVariant::ForwardOnly),
            "backward_only" => Ok(SequenceVariant::BackwardOnly),
            "bidirectional" => Ok(SequenceVariant::Bidirectional),
            other => Err(Error::Config(format!(
                "unknown sequence variant {other:?} (expected no_mamba, forward_only, backward_only, or bidirectional)"
            ))),
        }
    }
}

/// Complete architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub trcnn: TrcnnConfig,
    pub mamba: MambaConfig,
    pub variant: SequenceVariant,
}

impl ModelConfig {
    /// Workstation scale: 24 CNN channels, sequence width 32.
    pub fn desk() -> Self {
        ModelConfig {
            trcnn: TrcnnConfig::desk(),
            mamba: MambaConfig::new(32, 2, 8, 4),
            variant: SequenceVariant::Bidirectional,
        }
    }

    /// Full scale: 384 CNN channels, sequence width 128, 16 states.
    pub fn paper() -> Self {
        ModelConfig {
            trcnn: TrcnnConfig::paper(),
            mamba: MambaConfig::new(128, 2, 16, 4),
            variant: SequenceVariant::Bidirectional,
        }
    }

    /// Tiny gradient-checkable scale.
    pub fn toy() -> Self {
        ModelConfig {
            trcnn: TrcnnConfig::toy(),
            mamba: MambaConfig::new(8, 2, 4, 3),
            variant: SequenceVariant::Bidirectional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trcnn.validate(SAMPLES_PER_EPOCH)?;
        self.mamba.validate()
    }
}

/// Snapshot-serializable tensor.
#[derive(Serialize, Deserialize)]
struct SavedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Snapshot-serializable batch-norm state.
#[derive(Serialize, Deserialize)]
struct SavedBn {
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    batches_seen: u64,
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<SavedTensor>,
    bn_states: Vec<SavedBn>,
}

const MODEL_FORMAT: &str = "bimamsleep-model";
const MODEL_VERSION: u32 = 1;

/// The assembled model: configuration, parameters, and mutable state.
pub struct SleepModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    trcnn: TrcnnParams,
    mamba: MambaBlockParams,
    proj_w: ParamId,
    proj_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    states: TrcnnStates,
}

impl Clone for SleepModel {
    fn clone(&self) -> Self {
        SleepModel {
            cfg: self.cfg.clone(),
            store: self.store.clone(),
            trcnn: self.trcnn.clone(),
            mamba: self.mamba.clone(),
            proj_w: self.proj_w,
            proj_b: self.proj_b,
            head_w: self.head_w,
            head_b: self.head_b,
            states: self.states.clone(),
        }
    }
}

impl SleepModel {
    /// Initialize all parameters from the given seed.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let trcnn = TrcnnParams::new(&mut store, &cfg.trcnn, &mut rng);
        let states = trcnn.fresh_states(&cfg.trcnn);
        let c = cfg.trcnn.out_channels();
        let dm = cfg.mamba.d_model;
        let proj_w = store.add("proj.w", init::linear_weight(&mut rng, dm, c));
        let proj_b = store.add("proj.b", init::bias(&mut rng, dm, c));
        let mamba = MambaBlockParams::new(&mut store, &cfg.mamba, "mamba", &mut rng);
        let head_w = store.add("head.w", init::linear_weight(&mut rng, SleepStage::COUNT, dm));
        let head_b = store.add("head.b", init::bias(&mut rng, SleepStage::COUNT, dm));
        Ok(SleepModel { cfg, store, trcnn, mamba, proj_w, proj_b, head_w, head_b, states })
    }

    /// Reset batch-norm running statistics (used when retraining from the
    /// same initialization).
    pub fn reset_bn(&mut self) {
        self.states = self.trcnn.fresh_states(&self.cfg.trcnn);
    }

    /// Batch-norm running statistics, one state per normalization unit.
    pub fn bn_states(&self) -> &[crate::nn::BnState] {
        self.states.bn_states()
    }

    /// Forward pass: `[batch, 1, 3000]` → logits `[batch, 5]`.
    pub fn forward(
        &mut self,
        g: &Graph,
        x: &Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if x.shape().len() != 3 || x.shape()[1] != 1 || x.shape()[2] != SAMPLES_PER_EPOCH {
            return Err(Error::Shape(format!(
                "model input must be [batch, 1, {SAMPLES_PER_EPOCH}], got {:?}",
                x.shape()
            )));
        }
        let store = &self.store;
        let feats =
            trcnn_forward(g, &self.cfg.trcnn, &self.trcnn, &mut self.states, store, x, mode, rng)?;
        let tm = g.to_time_major(&feats)?;
        let pw = g.param(store, self.proj_w);
        let pb = g.param(store, self.proj_b);
        let seq = g.linear(&tm, &pw, &pb)?;
        let seq = match self.cfg.variant {
            SequenceVariant::NoMamba => seq,
            SequenceVariant::ForwardOnly => {
                block_forward_directions(g, &self.cfg.mamba, &self.mamba, store, &seq, true, false)?
            }
            SequenceVariant::BackwardOnly => {
                block_forward_directions(g, &self.cfg.mamba, &self.mamba, store, &seq, false, true)?
            }
            SequenceVariant::Bidirectional => {
                block_forward_directions(g, &self.cfg.mamba, &self.mamba, store, &seq, true, true)?
            }
        };
        let pooled = g.mean_over_len(&seq)?;
        let hw = g.param(store, self.head_w);
        let hb = g.param(store, self.head_b);
        g.linear(&pooled, &hw, &hb)
    }

    /// Argmax predictions for a batch of flat epochs (evaluation mode).
    pub fn predict(&mut self, epochs: &[f64], count: usize) -> Result<Vec<SleepStage>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        if epochs.len() != count * SAMPLES_PER_EPOCH {
            return Err(Error::Shape(format!(
                "{} samples is not {count} epochs of {SAMPLES_PER_EPOCH}",
                epochs.len()
            )));
        }
        let g = Graph::inference();
        let x = g.constant(NdArray::from_vec(
            &[count, 1, SAMPLES_PER_EPOCH],
            epochs.to_vec(),
        )?);
        // Dropout is inert in eval mode; the RNG is never consulted.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.forward(&g, &x, Mode::Eval, &mut rng)?;
        let lv = logits.value();
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let row = &lv.data()[i * SleepStage::COUNT..(i + 1) * SleepStage::COUNT];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(SleepStage::ALL[best]);
        }
        Ok(out)
    }

    /// Serialize configuration, parameters, and batch-norm state to JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let saved = SavedModel {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            config: self.cfg.clone(),
            params: self
                .store
                .iter()
                .map(|p| SavedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
            bn_states: self
                .states
                .bn_states()
                .iter()
                .map(|s| SavedBn {
                    running_mean: s.running_mean.data().to_vec(),
                    running_var: s.running_var.data().to_vec(),
                    batches_seen: s.batches_seen,
                })
                .collect(),
        };
        let json = serde_json::to_string(&saved)
            .map_err(|e| Error::Config(format!("model serialization failed: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Load a model saved by [`SleepModel::save`]. Any structural mismatch
    /// — wrong format tag, unknown tensors, shape drift — is a
    /// configuration error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read model file {}: {e}", path.display())))?;
        let saved: SavedModel = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("malformed model file {}: {e}", path.display())))?;
        if saved.format != MODEL_FORMAT {
            return Err(Error::Config(format!(
                "not a model file: format tag {:?}",
                saved.format
            )));
        }
        if saved.version != MODEL_VERSION {
            return Err(Error::Config(format!(
                "unsupported model version {} (expected {MODEL_VERSION})",
                saved.version
            )));
        }
        let mut model = SleepModel::new(saved.config, 0)?;
        if saved.params.len() != model.store.len() {
            return Err(Error::Config(format!(
                "model file has {} tensors, architecture expects {}",
                saved.params.len(),
                model.store.len()
            )));
        }
        for t in saved.params {
            let id = model
                .store
                .id_by_name(&t.name)
                .ok_or_else(|| Error::Config(format!("unknown tensor {:?} in model file", t.name)))?;
            let expect = model.store.value(id).shape().to_vec();
            if t.shape != expect {
                return Err(Error::Config(format!(
                    "tensor {:?} has shape {:?}, architecture expects {expect:?}",
                    t.name, t.shape
                )));
            }
            *model.store.value_mut(id) = NdArray::from_vec(&t.shape, t.data)?;
        }
        let want_bn = model.states.bn_states().len();
        if saved.bn_states.len() != want_bn {
            return Err(Error::Config(format!(
                "model file has {} batch-norm states, architecture expects {want_bn}",
                saved.bn_states.len()
            )));
        }
        for (state, s) in model.states.bn_states_mut().iter_mut().zip(saved.bn_states) {
            let c = state.channels();
            if s.running_mean.len() != c || s.running_var.len() != c {
                return Err(Error::Config(format!(
                    "batch-norm state width {} does not match {c} channels",
                    s.running_mean.len()
                )));
            }
            *state = BnState {
                running_mean: NdArray::from_vec(&[c], s.running_mean)?,
                running_var: NdArray::from_vec(&[c], s.running_var)?,
                batches_seen: s.batches_seen,
            };
        }
        Ok(model)
    }
}

/// End-to-end finite-difference check of the tiny model: analytic
/// parameter gradients of the focal loss versus central differences.
///
/// Each tensor is probed along `directions` random directions `R`
/// (deterministic per tensor): the analytic directional derivative
/// `Σ grad ⊙ R` is compared to `(L(θ + hR) − L(θ − hR)) / 2h`. Probing
/// whole tensors keeps the difference quotient at the scale of the
/// tensor's gradient norm, where the loss's floating-point noise floor
/// cannot swamp legitimately tiny per-element gradients.
pub fn grad_check_model(tolerance: f64, directions: usize) -> Result<GradCheckReport> {
    let cfg = ModelConfig::toy();
    let mut model = SleepModel::new(cfg, 0x70f)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(41);
    let x = NdArray::from_vec(
        &[2, 1, SAMPLES_PER_EPOCH],
        (0..2 * SAMPLES_PER_EPOCH).map(|_| data_rng.random_range(-30.0..30.0)).collect(),
    )?;
    let labels = [SleepStage::N2, SleepStage::Wake];
    let fcfg = FocalConfig::default();

    // Analytic gradients: one taped forward, focal gradient as the seed.
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let mut drop_rng = ChaCha8Rng::seed_from_u64(7);
    let logits = model.forward(&g, &xv, Mode::Train, &mut drop_rng)?;
    let (_, dlogits) = focal_loss(logits.value(), &labels, &fcfg)?;
    let grads = g.backward_seeded(&logits, dlogits)?;
    model.store.zero_grads();
    g.accumulate_param_grads(&grads, &mut model.store);
    let ids: Vec<ParamId> = model.store.ids().collect();
    let analytic: Vec<NdArray> = ids.iter().map(|&id| model.store.grad(id).clone()).collect();

    // Numeric side: batch-norm in train mode depends only on the current
    // batch, so re-running the forward after a point perturbation is a
    // pure function of the parameters.
    let eval_loss = |model: &mut SleepModel| -> Result<f64> {
        let g = Graph::inference();
        let xv = g.constant(x.clone());
        let mut drop_rng = ChaCha8Rng::seed_from_u64(7);
        let logits = model.forward(&g, &xv, Mode::Train, &mut drop_rng)?;
        Ok(focal_loss(logits.value(), &labels, &fcfg)?.0)
    };

    // Relative error with a loss-scale absolute floor: tensors whose true
    // directional derivative is exactly zero (conv biases cancel under the
    // following batch norm) compare as dust against dust, and anything
    // below 1e-6 on a loss of order 1 is zero for this check's purposes.
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);

    let mut max_rel: f64 = 0.0;
    let mut dir_rng = ChaCha8Rng::seed_from_u64(0xd15e);
    for (pi, &id) in ids.iter().enumerate() {
        let len = model.store.value(id).len();
        let mut tensor_worst: f64 = 0.0;
        for _ in 0..directions.max(1) {
            let r: Vec<f64> = (0..len).map(|_| dir_rng.random_range(-1.0..1.0)).collect();
            let analytic_dir: f64 =
                analytic[pi].data().iter().zip(&r).map(|(g, ri)| g * ri).sum();
            // A max-pool argmax flip inside the probe interval poisons the
            // quotient without any gradient being wrong; shrinking the step
            // escapes the flip region, while a genuine bug fails at every
            // step. Take the best of a few step sizes.
            let mut best = f64::INFINITY;
            for step in [FD_STEP, FD_STEP * 10.0, FD_STEP * 0.1] {
                let orig = model.store.value(id).clone();
                let perturb = |m: &mut SleepModel, sign: f64| {
                    let v = m.store.value_mut(id);
                    for (vk, rk) in v.data_mut().iter_mut().zip(&r) {
                        *vk += sign * step * rk;
                    }
                };
                perturb(&mut model, 1.0);
                let lp = eval_loss(&mut model)?;
                *model.store.value_mut(id) = orig.clone();
                perturb(&mut model, -1.0);
                let lm = eval_loss(&mut model)?;
                *model.store.value_mut(id) = orig;
                let numeric = (lp - lm) / (2.0 * step);
                best = best.min(rel(analytic_dir, numeric));
                if best <= tolerance * 0.1 {
                    break;
                }
            }
            tensor_worst = tensor_worst.max(best);
        }
        if std::env::var_os("GRADCHECK_DEBUG").is_some() {
            eprintln!("  {:<22} worst rel err {:9.3e}", model.store.name(id), tensor_worst);
        }
        max_rel = max_rel.max(tensor_worst);
    }
    Ok(GradCheckReport { name: "model_end_to_end".to_string(), max_rel_err: max_rel, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_input(seed: u64, batch: usize) -> NdArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NdArray::from_vec(
            &[batch, 1, SAMPLES_PER_EPOCH],
            (0..batch * SAMPLES_PER_EPOCH).map(|_| rng.random_range(-40.0..40.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn forward_emits_five_logits_per_epoch() {
        let mut model = SleepModel::new(ModelConfig::toy(), 1).unwrap();
        let g = Graph::inference();
        let x = g.constant(sample_input(3, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = model.forward(&g, &x, Mode::Train, &mut rng).unwrap();
        assert_eq!(logits.shape(), &[4, 5]);
        assert!(logits.value().all_finite());
    }

    #[test]
    fn same_seed_same_model_different_seed_different_model() {
        let a = SleepModel::new(ModelConfig::toy(), 11).unwrap();
        let b = SleepModel::new(ModelConfig::toy(), 11).unwrap();
        let c = SleepModel::new(ModelConfig::toy(), 12).unwrap();
        for id in a.store.ids() {
            assert_eq!(a.store.value(id), b.store.value(id));
        }
        let differs = a
            .store
            .ids()
            .any(|id| a.store.value(id).data() != c.store.value(id).data());
        assert!(differs, "independent seeds should give different weights");
    }

    #[test]
    fn sequence_variants_change_the_computation() {
        let x = sample_input(5, 2);
        let mut outs = Vec::new();
        for variant in SequenceVariant::ALL {
            let mut cfg = ModelConfig::toy();
            cfg.variant = variant;
            // Same seed: every variant shares identical weights.
            let mut model = SleepModel::new(cfg, 77).unwrap();
            let g = Graph::inference();
            let xv = g.constant(x.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let y = model.forward(&g, &xv, Mode::Eval, &mut rng).unwrap();
            outs.push(y.value().data().to_vec());
        }
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                assert_ne!(
                    outs[i], outs[j],
                    "variants {} and {} produced identical logits",
                    SequenceVariant::ALL[i],
                    SequenceVariant::ALL[j]
                );
            }
        }
    }

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut model = SleepModel::new(ModelConfig::toy(), 21).unwrap();
        // Advance BN state so the round trip covers non-fresh statistics.
        let g = Graph::inference();
        let x = g.constant(sample_input(9, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = model.forward(&g, &x, Mode::Train, &mut rng).unwrap();
        model.save(&path).unwrap();

        let mut loaded = SleepModel::load(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        for id in model.store.ids() {
            assert_eq!(model.store.value(id), loaded.store.value(id));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let after = loaded.forward(&g, &x, Mode::Train, &mut rng).unwrap();
        assert_eq!(before.value().data(), after.value().data());
        // Saved bytes are deterministic.
        let path2 = dir.path().join("model2.json");
        model.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_malformed_and_mismatched_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.json");

        std::fs::write(&path, "not json at all {").unwrap();
        assert!(matches!(SleepModel::load(&path), Err(Error::Config(_))));

        std::fs::write(&path, r#"{"format":"something-else","version":1}"#).unwrap();
        assert!(matches!(SleepModel::load(&path), Err(Error::Config(_))));

        // A tensor renamed in the file must be caught.
        let model = SleepModel::new(ModelConfig::toy(), 2).unwrap();
        model.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("head.w", "head.weird");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(SleepModel::load(&path), Err(Error::Config(_))));

        assert!(matches!(
            SleepModel::load(&dir.path().join("missing.json")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn predict_labels_every_epoch() {
        let mut model = SleepModel::new(ModelConfig::toy(), 4).unwrap();
        let x = sample_input(6, 3);
        let preds = model.predict(x.data(), 3).unwrap();
        assert_eq!(preds.len(), 3);
        assert!(model.predict(&x.data()[..100], 3).is_err());
        assert!(model.predict(&[], 0).unwrap().is_empty());
    }

    #[test]
    fn end_to_end_gradients_pass_directional_finite_differences() {
        let report = grad_check_model(1e-4, 2).unwrap();
        assert!(report.passed(), "{report}");
    }
}
