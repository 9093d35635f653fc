//! Class-imbalance countermeasures: focal loss and borderline synthetic
//! oversampling.
//!
//! Sleep stages are heavily skewed (N1 in particular is rare), so the
//! training loss down-weights easy examples with the focal term
//! `(1 − p)^γ` and re-weights classes with inverse-frequency `α`. The
//! loss and its gradient with respect to the logits are computed in closed
//! form here — the gradient is handed to the tape as the seed of the
//! backward pass, and is pinned against finite differences in tests.
//!
//! Oversampling follows the borderline variant of SMOTE: only minority
//! samples that sit near the class boundary (at least half of their `m`
//! nearest neighbors belong to other classes, but not all of them) spawn
//! synthetic samples, interpolated toward one of their `k` nearest
//! same-class neighbors. Oversampling is applied to training folds only,
//! never to validation or test data.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::signal_io::SleepStage;
use crate::tensor::NdArray;

/// Focal loss hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalConfig {
    /// Focusing exponent γ ≥ 0; γ = 0 recovers weighted cross-entropy.
    pub gamma: f64,
    /// Per-class weights α, indexed by stage code.
    pub alpha: [f64; SleepStage::COUNT],
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig { gamma: 2.0, alpha: [1.0; SleepStage::COUNT] }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config(format!("focal gamma must be ≥ 0, got {}", self.gamma)));
        }
        for (i, a) in self.alpha.iter().enumerate() {
            if !a.is_finite() || *a < 0.0 {
                return Err(Error::Config(format!("alpha[{i}] must be finite and ≥ 0, got {a}")));
            }
        }
        Ok(())
    }
}

/// Inverse-frequency class weights, normalized to mean 1.
///
/// Classes absent from the histogram get weight 1 — the weight of a class
/// multiplies only that class's samples, so the value never enters the
/// loss — and are reported with a warning.
pub fn alpha_from_frequencies(hist: &[usize; SleepStage::COUNT]) -> Result<[f64; SleepStage::COUNT]> {
    if hist.iter().all(|&c| c == 0) {
        return Err(Error::Data("cannot derive class weights from an empty histogram".into()));
    }
    let mut inv = [0.0; SleepStage::COUNT];
    let mut present = 0usize;
    let mut sum = 0.0;
    for (i, &c) in hist.iter().enumerate() {
        if c > 0 {
            inv[i] = 1.0 / c as f64;
            sum += inv[i];
            present += 1;
        } else {
            log::warn!("class {} has no samples; its weight defaults to 1", SleepStage::ALL[i].label());
        }
    }
    let mean = sum / present as f64;
    let mut alpha = [1.0; SleepStage::COUNT];
    for i in 0..SleepStage::COUNT {
        if hist[i] > 0 {
            alpha[i] = inv[i] / mean;
        }
    }
    Ok(alpha)
}

/// Focal loss over a batch of logits, with its gradient.
///
/// For each sample with true class `y`, softmax probability `p = p_y`:
/// `L = −α_y (1 − p)^γ log p`, averaged over the batch. The returned
/// gradient is `∂L/∂logits`, derived through
/// `∂L/∂logit_j = [αγ(1−p)^{γ−1} log p − α(1−p)^γ / p] · p (δ_{jy} − p_j)`.
/// A sample classified perfectly (`1 − p` underflows to zero) contributes
/// zero loss and zero gradient.
pub fn focal_loss(
    logits: &NdArray,
    labels: &[SleepStage],
    cfg: &FocalConfig,
) -> Result<(f64, NdArray)> {
    cfg.validate()?;
    let c = SleepStage::COUNT;
    if logits.shape().len() != 2 || logits.shape()[1] != c {
        return Err(Error::Shape(format!(
            "logits must be [batch, {c}], got {:?}",
            logits.shape()
        )));
    }
    let b = logits.shape()[0];
    if labels.len() != b {
        return Err(Error::Shape(format!("{b} logit rows but {} labels", labels.len())));
    }
    if b == 0 {
        return Err(Error::Data("focal loss needs a nonempty batch".into()));
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("non-finite logits in focal loss".into()));
    }

    let mut total = 0.0;
    let mut grad = NdArray::zeros(&[b, c]);
    let mut p_row = [0.0; SleepStage::COUNT];
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = m + row.iter().map(|&v| libm::exp(v - m)).sum::<f64>().ln();
        for (j, &v) in row.iter().enumerate() {
            p_row[j] = libm::exp(v - lse);
        }
        let y = label.index();
        let logp = row[y] - lse;
        let p = p_row[y];
        let q = 1.0 - p;
        let a = cfg.alpha[y];

        total += -a * q.powf(cfg.gamma) * logp;
        if q > 0.0 {
            let outer = a * cfg.gamma * q.powf(cfg.gamma - 1.0) * logp - a * q.powf(cfg.gamma) / p;
            for j in 0..c {
                let delta = if j == y { 1.0 } else { 0.0 };
                grad.data_mut()[i * c + j] = outer * p * (delta - p_row[j]);
            }
        }
        // q == 0 (perfectly confident, correct): loss term is 0 and the
        // gradient row stays 0.
    }
    let scale = 1.0 / b as f64;
    Ok((total * scale, grad.map(|v| v * scale)))
}

/// Borderline oversampling parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoteConfig {
    /// Same-class neighbors to interpolate toward.
    pub k: usize,
    /// Whole-set neighbors used by the danger test.
    pub m: usize,
    /// Every class is topped up toward `target_ratio × majority count`.
    pub target_ratio: f64,
}

impl Default for SmoteConfig {
    fn default() -> Self {
        SmoteConfig { k: 5, m: 10, target_ratio: 1.0 }
    }
}

impl SmoteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 {
            return Err(Error::Config("smote k and m must be nonzero".into()));
        }
        if !self.target_ratio.is_finite() || !(0.0..=1.0).contains(&self.target_ratio) {
            return Err(Error::Config(format!(
                "smote target_ratio must lie in [0, 1], got {}",
                self.target_ratio
            )));
        }
        Ok(())
    }
}

/// Keep the `cap` smallest `(distance, index)` pairs, ordered
/// lexicographically so ties resolve deterministically by index.
fn push_neighbor(list: &mut Vec<(f64, usize)>, cap: usize, cand: (f64, usize)) {
    let pos = list.partition_point(|&(d, i)| (d, i) < cand);
    if pos < cap {
        list.insert(pos, cand);
        list.truncate(cap);
    }
}

/// Squared Euclidean distances from a block of query rows to every row of
/// the feature matrix, streamed so the matrix is read once per block.
fn block_distances(
    features: &[f64],
    d: usize,
    norms: &[f64],
    queries: &[usize],
    out: &mut [Vec<f64>],
) {
    let n = norms.len();
    for row in out.iter_mut() {
        row.clear();
        row.resize(n, 0.0);
    }
    for j in 0..n {
        let yr = &features[j * d..(j + 1) * d];
        for (qi, &q) in queries.iter().enumerate() {
            let xr = &features[q * d..(q + 1) * d];
            let mut dot = 0.0;
            for (a, b) in xr.iter().zip(yr) {
                dot += a * b;
            }
            // ‖x − y‖² = ‖x‖² + ‖y‖² − 2x·y, clamped against rounding.
            out[qi][j] = (norms[q] + norms[j] - 2.0 * dot).max(0.0);
        }
    }
}

/// Borderline synthetic oversampling over flat row-major `features`
/// (`labels.len()` rows of width `d`). Returns only the synthetic rows and
/// their labels; the caller appends them to the training set. The input is
/// never modified.
pub fn borderline_smote(
    features: &[f64],
    d: usize,
    labels: &[SleepStage],
    cfg: &SmoteConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<SleepStage>)> {
    cfg.validate()?;
    let n = labels.len();
    if d == 0 || features.len() != n * d {
        return Err(Error::Shape(format!(
            "features length {} does not match {n} rows × {d} columns",
            features.len()
        )));
    }
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature in oversampling input".into()));
    }

    let mut hist = [0usize; SleepStage::COUNT];
    for l in labels {
        hist[l.index()] += 1;
    }
    let majority = hist.iter().copied().max().unwrap();
    let norms: Vec<f64> = (0..n)
        .map(|i| features[i * d..(i + 1) * d].iter().map(|v| v * v).sum())
        .collect();

    let mut synth_features = Vec::new();
    let mut synth_labels = Vec::new();

    for stage in SleepStage::ALL {
        let count = hist[stage.index()];
        if count == 0 {
            continue;
        }
        let target = (cfg.target_ratio * majority as f64).round() as usize;
        if count >= target {
            continue;
        }
        let need = target - count;
        if count < cfg.k + 1 {
            log::warn!(
                "class {} has only {count} samples (< k + 1 = {}); skipping oversampling",
                stage.label(),
                cfg.k + 1
            );
            continue;
        }

        let members: Vec<usize> =
            (0..n).filter(|&i| labels[i] == stage).collect();
        // One streaming pass per block: m nearest overall for the danger
        // test, k nearest same-class for interpolation.
        let mut danger: Vec<usize> = Vec::new(); // positions into `members`
        let mut class_nn: Vec<Vec<usize>> = vec![Vec::new(); members.len()];
        const BLOCK: usize = 16;
        let mut dist_rows: Vec<Vec<f64>> = vec![Vec::new(); BLOCK];
        for (block_start, block) in members.chunks(BLOCK).enumerate() {
            block_distances(features, d, &norms, block, &mut dist_rows);
            for (bi, &q) in block.iter().enumerate() {
                let dists = &dist_rows[bi];
                let mut overall: Vec<(f64, usize)> = Vec::with_capacity(cfg.m + 1);
                let mut same: Vec<(f64, usize)> = Vec::with_capacity(cfg.k + 1);
                for j in 0..n {
                    if j == q {
                        continue;
                    }
                    push_neighbor(&mut overall, cfg.m, (dists[j], j));
                    if labels[j] == stage {
                        push_neighbor(&mut same, cfg.k, (dists[j], j));
                    }
                }
                let other = overall.iter().filter(|&&(_, j)| labels[j] != stage).count();
                // Borderline rule: at least half the m neighbors are from
                // other classes (in danger) but not all of them (noise).
                if 2 * other >= cfg.m && other < overall.len() {
                    danger.push(block_start * BLOCK + bi);
                }
                class_nn[block_start * BLOCK + bi] = same.into_iter().map(|(_, j)| j).collect();
            }
        }

        if danger.is_empty() {
            log::warn!(
                "class {} has no borderline samples under m = {}; skipping oversampling",
                stage.label(),
                cfg.m
            );
            continue;
        }

        for s in 0..need {
            let member_pos = danger[s % danger.len()];
            let x = members[member_pos];
            let nns = &class_nn[member_pos];
            let pick = nns[rng.random_range(0..nns.len())];
            let u: f64 = rng.random_range(0.0..1.0);
            let xr = &features[x * d..(x + 1) * d];
            let pr = &features[pick * d..(pick + 1) * d];
            synth_features.extend(xr.iter().zip(pr).map(|(a, b)| a + u * (b - a)));
            synth_labels.push(stage);
        }
    }

    Ok((synth_features, synth_labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn stages(codes: &[u8]) -> Vec<SleepStage> {
        codes.iter().map(|&c| SleepStage::from_code(c).unwrap()).collect()
    }

    /// Independent cross-entropy oracle: stable log-softmax computed from
    /// scratch, `L = −(1/B) Σ log p_y`, `∂L/∂logit = (p − onehot)/B`.
    fn ce_oracle(logits: &NdArray, labels: &[SleepStage]) -> (f64, NdArray) {
        let (b, c) = (logits.shape()[0], logits.shape()[1]);
        let mut loss = 0.0;
        let mut grad = NdArray::zeros(&[b, c]);
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.data()[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            loss -= (row[label.index()] - lse) / b as f64;
            for j in 0..c {
                let p = (row[j] - lse).exp();
                let delta = if j == label.index() { 1.0 } else { 0.0 };
                grad.data_mut()[i * c + j] = (p - delta) / b as f64;
            }
        }
        (loss, grad)
    }

    #[test]
    fn gamma_zero_unit_alpha_is_exactly_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = FocalConfig { gamma: 0.0, alpha: [1.0; 5] };
        for _ in 0..100 {
            let b = rng.random_range(1..=12);
            let logits = NdArray::from_vec(
                &[b, 5],
                (0..b * 5).map(|_| rng.random_range(-4.0..4.0)).collect(),
            )
            .unwrap();
            let labels = stages(
                &(0..b).map(|_| rng.random_range(0..5) as u8).collect::<Vec<_>>(),
            );
            let (fl, fg) = focal_loss(&logits, &labels, &cfg).unwrap();
            let (cl, cg) = ce_oracle(&logits, &labels);
            assert!((fl - cl).abs() <= 1e-12, "loss mismatch: {fl} vs {cl}");
            for (a, b) in fg.data().iter().zip(cg.data()) {
                assert!((a - b).abs() <= 1e-12, "gradient mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn uniform_logits_match_the_closed_form() {
        let logits = NdArray::zeros(&[1, 5]);
        let labels = stages(&[2]);
        let cfg = FocalConfig::default();
        let (loss, grad) = focal_loss(&logits, &labels, &cfg).unwrap();
        // p = 0.2 everywhere: L = −(0.8)² ln 0.2.
        assert_relative_eq!(loss, -(0.8_f64).powi(2) * (0.2_f64).ln(), max_relative = 1e-14);
        // outer = γ q^{γ−1} log p − q^γ/p, grad_j = outer · p (δ − p_j).
        let outer = 2.0 * 0.8 * (0.2_f64).ln() - 0.64 / 0.2;
        for j in 0..5 {
            let delta = if j == 2 { 1.0 } else { 0.0 };
            assert_relative_eq!(grad.data()[j], outer * 0.2 * (delta - 0.2), max_relative = 1e-13);
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = FocalConfig { gamma: 2.0, alpha: [0.5, 2.0, 1.0, 1.3, 0.2] };
        let b = 6;
        let mut logits = NdArray::from_vec(
            &[b, 5],
            (0..b * 5).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        let labels = stages(&(0..b).map(|_| rng.random_range(0..5) as u8).collect::<Vec<_>>());
        let (_, grad) = focal_loss(&logits, &labels, &cfg).unwrap();
        let h = 1e-5;
        for i in 0..b * 5 {
            let orig = logits.data()[i];
            logits.data_mut()[i] = orig + h;
            let (lp, _) = focal_loss(&logits, &labels, &cfg).unwrap();
            logits.data_mut()[i] = orig - h;
            let (lm, _) = focal_loss(&logits, &labels, &cfg).unwrap();
            logits.data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let denom = grad.data()[i].abs().max(numeric.abs()).max(1e-8);
            assert!(
                ((grad.data()[i] - numeric) / denom).abs() <= 1e-6,
                "logit {i}: analytic {} vs numeric {numeric}",
                grad.data()[i]
            );
        }
    }

    #[test]
    fn focusing_term_downweights_easy_examples() {
        let easy = NdArray::from_vec(&[1, 5], vec![8.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let labels = stages(&[0]);
        let ce = focal_loss(&easy, &labels, &FocalConfig { gamma: 0.0, alpha: [1.0; 5] })
            .unwrap()
            .0;
        let focal = focal_loss(&easy, &labels, &FocalConfig::default()).unwrap().0;
        assert!(
            focal < ce * 1e-4,
            "easy example should be crushed by the focal term: focal {focal}, ce {ce}"
        );
    }

    #[test]
    fn saturated_correct_prediction_gives_zero_loss_and_gradient() {
        let logits = NdArray::from_vec(&[1, 5], vec![500.0, -500.0, -500.0, -500.0, -500.0])
            .unwrap();
        let (loss, grad) = focal_loss(&logits, &stages(&[0]), &FocalConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inverse_frequency_weights_are_mean_normalized() {
        let alpha = alpha_from_frequencies(&[100, 50, 25, 200, 125]).unwrap();
        let inv = [0.01, 0.02, 0.04, 0.005, 0.008];
        let mean: f64 = inv.iter().sum::<f64>() / 5.0;
        for (a, i) in alpha.iter().zip(&inv) {
            assert_relative_eq!(*a, i / mean, max_relative = 1e-14);
        }
        assert_relative_eq!(alpha.iter().sum::<f64>() / 5.0, 1.0, max_relative = 1e-14);
        // Rarer class ⇒ larger weight.
        assert!(alpha[2] > alpha[1] && alpha[1] > alpha[0]);

        let with_hole = alpha_from_frequencies(&[10, 0, 10, 10, 10]).unwrap();
        assert_eq!(with_hole[1], 1.0);
        assert!(alpha_from_frequencies(&[0; 5]).is_err());
    }

    #[test]
    fn focal_loss_rejects_malformed_inputs() {
        let logits = NdArray::zeros(&[2, 5]);
        let cfg = FocalConfig::default();
        assert!(focal_loss(&logits, &stages(&[0]), &cfg).is_err());
        assert!(focal_loss(&NdArray::zeros(&[2, 4]), &stages(&[0, 1]), &cfg).is_err());
        let mut bad = FocalConfig::default();
        bad.gamma = -1.0;
        assert!(focal_loss(&logits, &stages(&[0, 1]), &bad).is_err());
        let nan = NdArray::from_vec(&[1, 5], vec![0.0, f64::NAN, 0.0, 0.0, 0.0]).unwrap();
        assert!(focal_loss(&nan, &stages(&[0]), &cfg).is_err());
    }

    /// Two overlapping 2-D clusters: class N2 (majority) at x ≈ 0, class
    /// N1 (minority) straddling it, so minority points near the overlap are
    /// borderline.
    fn overlap_data() -> (Vec<f64>, Vec<SleepStage>) {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        // 30 majority points on a tight grid.
        for i in 0..30 {
            features.extend([(i % 6) as f64 * 0.1, (i / 6) as f64 * 0.1]);
            labels.push(SleepStage::N2);
        }
        // 12 minority points: half inside the majority grid (borderline),
        // half far away (safe).
        for i in 0..6 {
            features.extend([0.05 + (i % 3) as f64 * 0.1, 0.05 + (i / 3) as f64 * 0.1]);
            labels.push(SleepStage::N1);
        }
        for i in 0..6 {
            features.extend([10.0 + (i % 3) as f64 * 0.1, 10.0 + (i / 3) as f64 * 0.1]);
            labels.push(SleepStage::N1);
        }
        (features, labels)
    }

    #[test]
    fn smote_tops_classes_up_to_the_target_with_in_hull_synthetics() {
        let (features, labels) = overlap_data();
        let before = features.clone();
        let cfg = SmoteConfig { k: 3, m: 6, target_ratio: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (sf, sl) = borderline_smote(&features, 2, &labels, &cfg, &mut rng).unwrap();
        // Majority 30, minority 12 → exactly 18 synthetics, all minority.
        assert_eq!(sl.len(), 18);
        assert!(sl.iter().all(|&l| l == SleepStage::N1));
        assert_eq!(sf.len(), 18 * 2);
        assert_eq!(features, before, "input must not be modified");
        // Synthetics are convex combinations of same-class points, so they
        // stay inside the class bounding box.
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for (i, l) in labels.iter().enumerate() {
            if *l == SleepStage::N1 {
                for a in 0..2 {
                    lo[a] = lo[a].min(features[i * 2 + a]);
                    hi[a] = hi[a].max(features[i * 2 + a]);
                }
            }
        }
        for row in sf.chunks(2) {
            for a in 0..2 {
                assert!(
                    row[a] >= lo[a] - 1e-12 && row[a] <= hi[a] + 1e-12,
                    "synthetic {row:?} escaped the class bounding box"
                );
            }
        }
    }

    #[test]
    fn smote_is_seed_deterministic() {
        let (features, labels) = overlap_data();
        let cfg = SmoteConfig { k: 3, m: 6, target_ratio: 1.0 };
        let (a_f, a_l) =
            borderline_smote(&features, 2, &labels, &cfg, &mut ChaCha8Rng::seed_from_u64(9))
                .unwrap();
        let (b_f, b_l) =
            borderline_smote(&features, 2, &labels, &cfg, &mut ChaCha8Rng::seed_from_u64(9))
                .unwrap();
        let (c_f, _) =
            borderline_smote(&features, 2, &labels, &cfg, &mut ChaCha8Rng::seed_from_u64(10))
                .unwrap();
        assert_eq!(a_f, b_f);
        assert_eq!(a_l, b_l);
        assert_ne!(a_f, c_f, "different seeds should interpolate differently");
    }

    #[test]
    fn smote_skips_tiny_and_well_separated_classes() {
        // Minority far from the majority: no borderline points, so the
        // danger set is empty and nothing is synthesized.
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            features.extend([i as f64 * 0.01, 0.0]);
            labels.push(SleepStage::Wake);
        }
        for i in 0..8 {
            features.extend([1000.0 + i as f64 * 0.01, 0.0]);
            labels.push(SleepStage::Rem);
        }
        let cfg = SmoteConfig { k: 3, m: 6, target_ratio: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (sf, sl) = borderline_smote(&features, 2, &labels, &cfg, &mut rng).unwrap();
        assert!(sf.is_empty() && sl.is_empty());

        // A class smaller than k + 1 is skipped outright.
        let mut labels2 = labels.clone();
        labels2[20] = SleepStage::N3; // N3 now has 1 member
        let (_, sl2) = borderline_smote(&features, 2, &labels2, &cfg, &mut rng).unwrap();
        assert!(sl2.iter().all(|&l| l != SleepStage::N3));
    }

    #[test]
    fn smote_target_ratio_controls_the_top_up() {
        let (features, labels) = overlap_data();
        let cfg = SmoteConfig { k: 3, m: 6, target_ratio: 0.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, sl) = borderline_smote(&features, 2, &labels, &cfg, &mut rng).unwrap();
        // Target = 15, minority already has 12 → 3 synthetics.
        assert_eq!(sl.len(), 3);

        let cfg = SmoteConfig { k: 3, m: 6, target_ratio: 0.3 };
        let (_, sl) = borderline_smote(&features, 2, &labels, &cfg, &mut rng).unwrap();
        assert!(sl.is_empty(), "already above a 0.3 ratio — nothing to add");
    }

    #[test]
    fn smote_validates_its_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels = stages(&[0, 1]);
        assert!(borderline_smote(&[1.0, 2.0, 3.0], 2, &labels, &SmoteConfig::default(), &mut rng)
            .is_err());
        let bad = SmoteConfig { k: 0, ..SmoteConfig::default() };
        assert!(borderline_smote(&[1.0, 2.0, 3.0, 4.0], 2, &labels, &bad, &mut rng).is_err());
        let bad = SmoteConfig { target_ratio: 1.5, ..SmoteConfig::default() };
        assert!(borderline_smote(&[1.0, 2.0, 3.0, 4.0], 2, &labels, &bad, &mut rng).is_err());
        assert!(borderline_smote(
            &[1.0, f64::NAN, 3.0, 4.0],
            2,
            &labels,
            &SmoteConfig::default(),
            &mut rng
        )
        .is_err());
    }
}
