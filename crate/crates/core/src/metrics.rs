//! Evaluation metrics for five-class sleep staging.
//!
//! Everything derives from one 5×5 confusion matrix (rows = true stage,
//! columns = predicted stage): overall accuracy, per-class
//! precision/recall/F1, macro-averaged F1 (unweighted mean over the five
//! classes), Cohen's kappa, and the macro geometric mean of the per-class
//! recalls. Undefined ratios (0/0) evaluate to 0 so a class missing from a
//! fold cannot silently inflate a score, and a degenerate kappa
//! (chance agreement exactly 1) is defined as 0.
//!
//! Reports render in two forms: a fixed-width text table with scores
//! scaled to percent, and a machine-readable `metric,class,value` CSV that
//! additionally carries kappa on its raw [−1, 1] scale.

use crate::error::{Error, Result};
use crate::signal_io::SleepStage;

const C: usize = SleepStage::COUNT;

/// A 5×5 confusion matrix; rows are true stages, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    counts: [[usize; C]; C],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tally aligned truth/prediction slices.
    pub fn from_pairs(truth: &[SleepStage], pred: &[SleepStage]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut cm = Self::new();
        for (t, p) in truth.iter().zip(pred) {
            cm.record(*t, *p);
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: SleepStage, pred: SleepStage) {
        self.counts[truth.index()][pred.index()] += 1;
    }

    /// Fold another matrix into this one.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for t in 0..C {
            for p in 0..C {
                self.counts[t][p] += other.counts[t][p];
            }
        }
    }

    pub fn count(&self, truth: SleepStage, pred: SleepStage) -> usize {
        self.counts[truth.index()][pred.index()]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    fn row_sum(&self, i: usize) -> usize {
        self.counts[i].iter().sum()
    }

    fn col_sum(&self, j: usize) -> usize {
        (0..C).map(|i| self.counts[i][j]).sum()
    }

    /// Fraction of correct predictions; an empty matrix scores 0.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..C).map(|i| self.counts[i][i]).sum::<usize>() as f64 / total as f64
    }

    /// TP / (TP + FP); 0 when the class was never predicted.
    pub fn precision(&self, s: SleepStage) -> f64 {
        let j = s.index();
        ratio(self.counts[j][j], self.col_sum(j))
    }

    /// TP / (TP + FN); 0 when the class never occurs.
    pub fn recall(&self, s: SleepStage) -> f64 {
        let i = s.index();
        ratio(self.counts[i][i], self.row_sum(i))
    }

    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1(&self, s: SleepStage) -> f64 {
        let (p, r) = (self.precision(s), self.recall(s));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// Unweighted mean of the five per-class F1 scores.
    pub fn macro_f1(&self) -> f64 {
        SleepStage::ALL.iter().map(|s| self.f1(*s)).sum::<f64>() / C as f64
    }

    /// Cohen's kappa, `(p_o − p_e) / (1 − p_e)`; when chance agreement
    /// `p_e` is exactly 1 (all mass in one truth/prediction cell) the
    /// statistic is undefined and reported as 0.
    pub fn kappa(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let n = total as f64;
        let po = self.accuracy();
        let pe = (0..C)
            .map(|i| (self.row_sum(i) as f64 / n) * (self.col_sum(i) as f64 / n))
            .sum::<f64>();
        if (1.0 - pe).abs() < 1e-15 {
            log::warn!("degenerate confusion matrix: chance agreement is 1, kappa defined as 0");
            return 0.0;
        }
        (po - pe) / (1.0 - pe)
    }

    /// Macro geometric mean of the per-class recalls,
    /// `(Π_c recall_c)^{1/5}`; any class with zero recall drives it to 0.
    pub fn mgm(&self) -> f64 {
        let recalls: Vec<f64> = SleepStage::ALL.iter().map(|s| self.recall(*s)).collect();
        if recalls.iter().any(|&r| r == 0.0) {
            return 0.0;
        }
        libm::exp(recalls.iter().map(|r| r.ln()).sum::<f64>() / C as f64)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Fixed-width text report: per-class precision/recall/F1 and the four
/// overall scores, all in percent.
pub fn render_text(title: &str, cm: &ConfusionMatrix) -> String {
    let mut out = String::new();
    out.push_str(&format!("{title}\n"));
    out.push_str(&format!("  epochs scored: {}\n", cm.total()));
    out.push_str("  stage  precision  recall      f1\n");
    for s in SleepStage::ALL {
        out.push_str(&format!(
            "  {:<5} {:>9.2} {:>7.2} {:>7.2}\n",
            s.label(),
            cm.precision(s) * 100.0,
            cm.recall(s) * 100.0,
            cm.f1(s) * 100.0,
        ));
    }
    out.push_str(&format!(
        "  ACC {:.2}  MF1 {:.2}  kappa {:.2}  MGm {:.2}\n",
        cm.accuracy() * 100.0,
        cm.macro_f1() * 100.0,
        cm.kappa() * 100.0,
        cm.mgm() * 100.0,
    ));
    out
}

/// Machine-readable `metric,class,value` report. Percent-scaled scores use
/// six decimal places; `kappa_raw` repeats kappa on its native scale.
pub fn render_csv(cm: &ConfusionMatrix) -> String {
    let mut out = String::from("metric,class,value\n");
    for s in SleepStage::ALL {
        out.push_str(&format!("f1,{},{:.6}\n", s.label(), cm.f1(s) * 100.0));
    }
    out.push_str(&format!("acc,overall,{:.6}\n", cm.accuracy() * 100.0));
    out.push_str(&format!("mf1,overall,{:.6}\n", cm.macro_f1() * 100.0));
    out.push_str(&format!("kappa,overall,{:.6}\n", cm.kappa() * 100.0));
    out.push_str(&format!("mgm,overall,{:.6}\n", cm.mgm() * 100.0));
    out.push_str(&format!("kappa_raw,overall,{:.6}\n", cm.kappa()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stage(i: usize) -> SleepStage {
        SleepStage::ALL[i]
    }

    /// Metrics computed directly from the pair lists, sharing no code with
    /// the implementation under test.
    struct Oracle {
        acc: f64,
        f1: [f64; C],
        mf1: f64,
        kappa: f64,
        mgm: f64,
    }

    fn oracle(truth: &[usize], pred: &[usize]) -> Oracle {
        let n = truth.len() as f64;
        let acc = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / n;
        let mut f1 = [0.0; C];
        let mut recalls = [0.0; C];
        for c in 0..C {
            let tp = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
            let fp = truth.iter().zip(pred).filter(|(t, p)| **t != c && **p == c).count() as f64;
            let fn_ = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p != c).count() as f64;
            let prec = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
            let rec = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
            recalls[c] = rec;
            f1[c] = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
        }
        let mf1 = f1.iter().sum::<f64>() / C as f64;
        let pe = (0..C)
            .map(|c| {
                let rt = truth.iter().filter(|&&t| t == c).count() as f64 / n;
                let rp = pred.iter().filter(|&&p| p == c).count() as f64 / n;
                rt * rp
            })
            .sum::<f64>();
        let kappa = if (1.0 - pe).abs() < 1e-15 { 0.0 } else { (acc - pe) / (1.0 - pe) };
        let mgm = if recalls.iter().any(|&r| r == 0.0) {
            0.0
        } else {
            recalls.iter().product::<f64>().powf(1.0 / C as f64)
        };
        Oracle { acc, f1, mf1, kappa, mgm }
    }

    #[test]
    fn metrics_match_the_pairwise_oracle_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n = rng.random_range(1..=400);
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..C)).collect();
            // Mix of correlated and random predictions so accuracy varies.
            let pred: Vec<usize> = truth
                .iter()
                .map(|&t| if rng.random_bool(0.6) { t } else { rng.random_range(0..C) })
                .collect();
            let cm = ConfusionMatrix::from_pairs(
                &truth.iter().map(|&t| stage(t)).collect::<Vec<_>>(),
                &pred.iter().map(|&p| stage(p)).collect::<Vec<_>>(),
            )
            .unwrap();
            let want = oracle(&truth, &pred);
            assert!((cm.accuracy() - want.acc).abs() <= 1e-12);
            for c in 0..C {
                assert!((cm.f1(stage(c)) - want.f1[c]).abs() <= 1e-12);
            }
            assert!((cm.macro_f1() - want.mf1).abs() <= 1e-12);
            assert!((cm.kappa() - want.kappa).abs() <= 1e-12);
            assert!((cm.mgm() - want.mgm).abs() <= 1e-12);
        }
    }

    #[test]
    fn product_matrices_have_zero_kappa() {
        // counts[i][j] = r_i · c_j makes observed accuracy equal chance
        // agreement exactly, so kappa must vanish.
        let r = [3usize, 1, 4, 2, 5];
        let c = [2usize, 2, 1, 3, 2];
        let mut cm = ConfusionMatrix::new();
        for i in 0..C {
            for j in 0..C {
                for _ in 0..r[i] * c[j] {
                    cm.record(stage(i), stage(j));
                }
            }
        }
        assert!(cm.kappa().abs() <= 1e-12, "kappa = {}", cm.kappa());
    }

    #[test]
    fn perfect_prediction_maxes_every_metric() {
        let truth: Vec<SleepStage> = (0..50).map(|i| stage(i % C)).collect();
        let cm = ConfusionMatrix::from_pairs(&truth, &truth).unwrap();
        assert_eq!(cm.accuracy(), 1.0);
        assert_eq!(cm.macro_f1(), 1.0);
        assert_eq!(cm.kappa(), 1.0);
        assert_eq!(cm.mgm(), 1.0);
    }

    #[test]
    fn zero_recall_in_any_class_zeroes_the_geometric_mean() {
        let mut cm = ConfusionMatrix::new();
        // Four classes perfect, N1 always missed as N2.
        for s in [0, 2, 3, 4] {
            for _ in 0..10 {
                cm.record(stage(s), stage(s));
            }
        }
        for _ in 0..10 {
            cm.record(SleepStage::N1, SleepStage::N2);
        }
        assert_eq!(cm.mgm(), 0.0);
        assert!(cm.accuracy() > 0.7, "accuracy stays high — that is the point of MGm");
    }

    #[test]
    fn degenerate_single_cell_matrix_is_defined() {
        let truth = vec![SleepStage::N2; 40];
        let cm = ConfusionMatrix::from_pairs(&truth, &truth).unwrap();
        assert_eq!(cm.accuracy(), 1.0);
        assert_eq!(cm.kappa(), 0.0, "chance agreement 1 → kappa defined as 0");
        let empty = ConfusionMatrix::new();
        assert_eq!(empty.accuracy(), 0.0);
        assert_eq!(empty.kappa(), 0.0);
        assert_eq!(empty.mgm(), 0.0);
    }

    #[test]
    fn csv_report_parses_back_with_the_expected_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth: Vec<SleepStage> = (0..200).map(|_| stage(rng.random_range(0..C))).collect();
        let pred: Vec<SleepStage> = truth
            .iter()
            .map(|&t| if rng.random_bool(0.7) { t } else { stage(rng.random_range(0..C)) })
            .collect();
        let cm = ConfusionMatrix::from_pairs(&truth, &pred).unwrap();
        let rendered = render_csv(&cm);

        let mut reader = csv::Reader::from_reader(rendered.as_bytes());
        let headers = reader.headers().unwrap().clone();
        assert_eq!(headers.iter().collect::<Vec<_>>(), vec!["metric", "class", "value"]);
        let rows: Vec<(String, String, f64)> = reader
            .records()
            .map(|r| {
                let r = r.unwrap();
                (r[0].to_string(), r[1].to_string(), r[2].parse().unwrap())
            })
            .collect();
        assert_eq!(rows.len(), C + 5);
        for (s, row) in SleepStage::ALL.iter().zip(&rows) {
            assert_eq!(row.0, "f1");
            assert_eq!(row.1, s.label());
            assert!((row.2 - cm.f1(*s) * 100.0).abs() <= 5e-7);
        }
        let find = |m: &str| rows.iter().find(|r| r.0 == m).unwrap().2;
        assert!((find("acc") - cm.accuracy() * 100.0).abs() <= 5e-7);
        assert!((find("mf1") - cm.macro_f1() * 100.0).abs() <= 5e-7);
        assert!((find("kappa") - cm.kappa() * 100.0).abs() <= 5e-7);
        assert!((find("mgm") - cm.mgm() * 100.0).abs() <= 5e-7);
        assert!((find("kappa_raw") - cm.kappa()).abs() <= 5e-7);
        // The raw row is the percent row divided by 100, modulo rounding.
        assert!((find("kappa") / 100.0 - find("kappa_raw")).abs() <= 1e-6);
    }

    #[test]
    fn text_report_names_every_stage_and_metric() {
        let truth: Vec<SleepStage> = (0..25).map(|i| stage(i % C)).collect();
        let cm = ConfusionMatrix::from_pairs(&truth, &truth).unwrap();
        let text = render_text("fold 0", &cm);
        for s in SleepStage::ALL {
            assert!(text.contains(s.label()), "missing stage {}", s.label());
        }
        for m in ["ACC", "MF1", "kappa", "MGm", "fold 0", "100.00"] {
            assert!(text.contains(m), "missing {m} in:\n{text}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Ranges: rates in [0, 1], kappa in [−1, 1]; and merging two
        /// matrices scores the same as concatenating their pairs.
        #[test]
        fn ranges_hold_and_merge_is_concatenation(
            a in proptest::collection::vec((0usize..C, 0usize..C), 1..60),
            b in proptest::collection::vec((0usize..C, 0usize..C), 1..60),
        ) {
            let to_stages = |v: &[(usize, usize)]| -> (Vec<SleepStage>, Vec<SleepStage>) {
                (v.iter().map(|&(t, _)| stage(t)).collect(), v.iter().map(|&(_, p)| stage(p)).collect())
            };
            let (ta, pa) = to_stages(&a);
            let (tb, pb) = to_stages(&b);
            let cma = ConfusionMatrix::from_pairs(&ta, &pa).unwrap();
            let cmb = ConfusionMatrix::from_pairs(&tb, &pb).unwrap();
            for cm in [&cma, &cmb] {
                prop_assert!((0.0..=1.0).contains(&cm.accuracy()));
                prop_assert!((0.0..=1.0).contains(&cm.macro_f1()));
                prop_assert!((0.0..=1.0).contains(&cm.mgm()));
                prop_assert!((-1.0..=1.0).contains(&cm.kappa()));
            }
            let mut merged = cma.clone();
            merged.merge(&cmb);
            let (tc, pc): (Vec<_>, Vec<_>) = (
                ta.iter().chain(&tb).copied().collect(),
                pa.iter().chain(&pb).copied().collect(),
            );
            let concat = ConfusionMatrix::from_pairs(&tc, &pc).unwrap();
            prop_assert_eq!(merged, concat);
        }
    }
}
