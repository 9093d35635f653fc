//! Epoch datasets: stage labels, preprocessing, subject-wise folds, and
//! the manifest that stitches recording files together.
//!
//! The unit of data is one 30-second epoch of single-channel EEG sampled
//! at 100 Hz (3000 samples). Raw recordings arrive with annotation codes
//! that still contain the merged-away N4 stage and UNKNOWN markers;
//! [`preprocess`] turns them into a clean [`EpochDataset`] of five-class
//! labels and trims the long wake stretches that pad recordings at both
//! ends. All train/test splitting is subject-wise ([`make_folds`]), never
//! epoch-wise, so no subject leaks across a split boundary.

pub mod epb;
pub mod synth;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Samples in one epoch: 30 s at 100 Hz.
pub const SAMPLES_PER_EPOCH: usize = 3000;
/// Sampling rate of every epoch in Hz.
pub const SAMPLE_RATE_HZ: u16 = 100;
/// Wake epochs retained on each side of the first/last sleep epoch.
pub const WAKE_TRIM_EPOCHS: usize = 60;

/// Raw annotation code for the legacy N4 stage (merged into N3).
pub const RAW_CODE_N4: u8 = 5;
/// Raw annotation code for unscorable/unknown epochs (dropped).
pub const RAW_CODE_UNKNOWN: u8 = 255;

/// The five sleep stages, in wire-code order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SleepStage {
    Wake = 0,
    N1 = 1,
    N2 = 2,
    N3 = 3,
    Rem = 4,
}

impl SleepStage {
    /// All stages in code order.
    pub const ALL: [SleepStage; 5] =
        [SleepStage::Wake, SleepStage::N1, SleepStage::N2, SleepStage::N3, SleepStage::Rem];

    /// Number of classes.
    pub const COUNT: usize = 5;

    /// Decode a wire code in `0..=4`.
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(SleepStage::Wake),
            1 => Ok(SleepStage::N1),
            2 => Ok(SleepStage::N2),
            3 => Ok(SleepStage::N3),
            4 => Ok(SleepStage::Rem),
            other => Err(Error::Data(format!("invalid sleep-stage code {other} (expected 0..=4)"))),
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Zero-based class index (identical to the wire code).
    pub fn index(self) -> usize {
        self as usize
    }

    /// Short display label.
    pub fn label(self) -> &'static str {
        match self {
            SleepStage::Wake => "W",
            SleepStage::N1 => "N1",
            SleepStage::N2 => "N2",
            SleepStage::N3 => "N3",
            SleepStage::Rem => "REM",
        }
    }
}

impl std::fmt::Display for SleepStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// One recording as it comes off disk: raw annotation codes (which may
/// include [`RAW_CODE_N4`] and [`RAW_CODE_UNKNOWN`]) next to raw epochs.
#[derive(Debug, Clone)]
pub struct RawAnnotatedRecording {
    pub subject_id: String,
    /// One inner vector of [`SAMPLES_PER_EPOCH`] samples per epoch.
    pub epochs: Vec<Vec<f64>>,
    /// Raw annotation code per epoch, parallel to `epochs`.
    pub labels: Vec<u8>,
}

/// Clean, label-mapped collection of epochs with subject attribution.
///
/// Samples are stored flat (`n * SAMPLES_PER_EPOCH`) and are always exactly
/// representable in `f32`, which is what the on-disk EPB format stores —
/// so serialization round-trips are bit-exact.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochDataset {
    samples: Vec<f64>,
    labels: Vec<SleepStage>,
    subject_index: Vec<u16>,
    subject_ids: Vec<String>,
}

impl EpochDataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append one epoch for `subject`; the subject table grows on first use.
    pub fn push_epoch(&mut self, subject: &str, samples: &[f64], label: SleepStage) -> Result<()> {
        if samples.len() != SAMPLES_PER_EPOCH {
            return Err(Error::Data(format!(
                "epoch has {} samples, expected {SAMPLES_PER_EPOCH}",
                samples.len()
            )));
        }
        let idx = match self.subject_ids.iter().position(|s| s == subject) {
            Some(i) => i,
            None => {
                if self.subject_ids.len() > u16::MAX as usize {
                    return Err(Error::Data("more than 65536 subjects".into()));
                }
                self.subject_ids.push(subject.to_string());
                self.subject_ids.len() - 1
            }
        };
        self.samples.extend_from_slice(samples);
        self.labels.push(label);
        self.subject_index.push(idx as u16);
        Ok(())
    }

    /// Number of epochs.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The samples of epoch `i`.
    pub fn epoch(&self, i: usize) -> &[f64] {
        &self.samples[i * SAMPLES_PER_EPOCH..(i + 1) * SAMPLES_PER_EPOCH]
    }

    pub fn label(&self, i: usize) -> SleepStage {
        self.labels[i]
    }

    pub fn labels(&self) -> &[SleepStage] {
        &self.labels
    }

    /// Index into [`EpochDataset::subject_ids`] for epoch `i`.
    pub fn subject_index(&self, i: usize) -> usize {
        self.subject_index[i] as usize
    }

    /// Subject id string of epoch `i`.
    pub fn subject_of(&self, i: usize) -> &str {
        &self.subject_ids[self.subject_index(i)]
    }

    /// Distinct subject ids in first-seen order.
    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    /// Epoch count per class, indexed by [`SleepStage::index`].
    pub fn class_histogram(&self) -> [usize; SleepStage::COUNT] {
        let mut h = [0usize; SleepStage::COUNT];
        for l in &self.labels {
            h[l.index()] += 1;
        }
        h
    }

    /// Indices of every epoch whose subject is in `subjects`.
    pub fn indices_of_subjects(&self, subjects: &[String]) -> Vec<usize> {
        let wanted: Vec<bool> =
            self.subject_ids.iter().map(|s| subjects.contains(s)).collect();
        (0..self.len()).filter(|&i| wanted[self.subject_index(i)]).collect()
    }

    /// Append every epoch of `other`, merging subject tables by id.
    pub fn extend_from(&mut self, other: &EpochDataset) -> Result<()> {
        for i in 0..other.len() {
            self.push_epoch(other.subject_of(i), other.epoch(i), other.label(i))?;
        }
        Ok(())
    }
}

/// Map raw annotation codes to five-class labels and trim bulk wake.
///
/// Per recording, in order: drop UNKNOWN epochs, merge N4 into N3, then
/// keep at most [`WAKE_TRIM_EPOCHS`] wake epochs before the first and
/// after the last sleep epoch. A recording that contains only wake keeps
/// its first and last [`WAKE_TRIM_EPOCHS`] epochs (everything, if shorter).
pub fn preprocess(recordings: &[RawAnnotatedRecording]) -> Result<EpochDataset> {
    let mut ds = EpochDataset::new();
    for rec in recordings {
        if rec.epochs.len() != rec.labels.len() {
            return Err(Error::Data(format!(
                "subject {}: {} epochs but {} labels",
                rec.subject_id,
                rec.epochs.len(),
                rec.labels.len()
            )));
        }
        // Drop UNKNOWN, then merge N4 into N3.
        let mut kept: Vec<(usize, SleepStage)> = Vec::with_capacity(rec.labels.len());
        for (i, &code) in rec.labels.iter().enumerate() {
            if code == RAW_CODE_UNKNOWN {
                continue;
            }
            let stage = if code == RAW_CODE_N4 {
                SleepStage::N3
            } else {
                SleepStage::from_code(code).map_err(|_| {
                    Error::Data(format!(
                        "subject {}: epoch {i} has invalid annotation code {code}",
                        rec.subject_id
                    ))
                })?
            };
            kept.push((i, stage));
        }
        // Trim leading/trailing wake runs.
        let first_sleep = kept.iter().position(|(_, s)| *s != SleepStage::Wake);
        let range: Vec<&(usize, SleepStage)> = match first_sleep {
            Some(lo) => {
                let hi = kept.iter().rposition(|(_, s)| *s != SleepStage::Wake).unwrap();
                let start = lo.saturating_sub(WAKE_TRIM_EPOCHS);
                let end = (hi + WAKE_TRIM_EPOCHS + 1).min(kept.len());
                kept[start..end].iter().collect()
            }
            None => {
                // All wake: keep the first and last trim windows.
                if kept.len() <= 2 * WAKE_TRIM_EPOCHS {
                    kept.iter().collect()
                } else {
                    kept[..WAKE_TRIM_EPOCHS]
                        .iter()
                        .chain(kept[kept.len() - WAKE_TRIM_EPOCHS..].iter())
                        .collect()
                }
            }
        };
        for &&(i, stage) in &range {
            let epoch = &rec.epochs[i];
            if epoch.len() != SAMPLES_PER_EPOCH {
                return Err(Error::Data(format!(
                    "subject {}: epoch {i} has {} samples, expected {SAMPLES_PER_EPOCH}",
                    rec.subject_id,
                    epoch.len()
                )));
            }
            ds.push_epoch(&rec.subject_id, epoch, stage)?;
        }
    }
    Ok(ds)
}

/// One cross-validation fold: disjoint subject lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
}

/// Subject-wise k-fold assignment.
///
/// Subjects are deduplicated, sorted, shuffled with a seeded generator,
/// and dealt round-robin, so every subject lands in exactly one test set
/// and fold sizes differ by at most one subject. Both lists come back
/// sorted for stable downstream iteration.
pub fn make_folds(subject_ids: &[String], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    let mut subjects: Vec<String> = subject_ids.to_vec();
    subjects.sort();
    subjects.dedup();
    if k == 0 || k > subjects.len() {
        return Err(Error::Config(format!(
            "cannot build {k} folds from {} subjects",
            subjects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let mut folds: Vec<FoldSplit> = (0..k)
        .map(|_| FoldSplit { train_subjects: Vec::new(), test_subjects: Vec::new() })
        .collect();
    for (i, s) in subjects.iter().enumerate() {
        for (f, fold) in folds.iter_mut().enumerate() {
            if f == i % k {
                fold.test_subjects.push(s.clone());
            } else {
                fold.train_subjects.push(s.clone());
            }
        }
    }
    for fold in &mut folds {
        fold.train_subjects.sort();
        fold.test_subjects.sort();
    }
    Ok(folds)
}

/// Parse a `path,subject_id` manifest into resolved rows.
///
/// Relative paths are resolved against the manifest's directory; an
/// optional header row with exactly those column names is skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, ',');
        let p = parts.next().unwrap_or("").trim();
        let subject = parts.next().unwrap_or("").trim();
        if lineno == 0 && p == "path" && subject == "subject_id" {
            continue;
        }
        if p.is_empty() || subject.is_empty() {
            return Err(Error::Data(format!(
                "manifest {} line {}: expected `path,subject_id`, found {line:?}",
                path.display(),
                lineno + 1
            )));
        }
        let file = if Path::new(p).is_absolute() { PathBuf::from(p) } else { base.join(p) };
        rows.push((file, subject.to_string()));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("manifest {} lists no recordings", path.display())));
    }
    Ok(rows)
}

/// Load every EPB file named by a manifest into one dataset.
///
/// Each manifest row re-attributes the file's epochs to the row's
/// subject id (one recording file per row).
pub fn load_manifest(path: &Path) -> Result<EpochDataset> {
    let rows = read_manifest(path)?;
    let mut ds = EpochDataset::new();
    let mut seen: HashMap<String, PathBuf> = HashMap::new();
    for (file, subject) in rows {
        if let Some(prev) = seen.insert(subject.clone(), file.clone()) {
            log::warn!(
                "manifest assigns subject {subject} to both {} and {}; epochs are merged",
                prev.display(),
                file.display()
            );
        }
        let part = epb::read_epb(&file)?;
        for i in 0..part.len() {
            ds.push_epoch(&subject, part.epoch(i), part.label(i))?;
        }
    }
    Ok(ds)
}

/// Load a dataset from either kind of data file, sniffed by content: a
/// file starting with the EPB magic is decoded directly, anything else is
/// treated as a `path,subject_id` manifest.
pub fn load_dataset(path: &Path) -> Result<EpochDataset> {
    let mut head = [0u8; 4];
    let n = std::fs::File::open(path)
        .and_then(|mut f| std::io::Read::read(&mut f, &mut head))
        .map_err(|e| Error::Data(format!("cannot open data file {}: {e}", path.display())))?;
    if n == head.len() && head == epb::MAGIC {
        epb::read_epb(path)
    } else {
        load_manifest(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_epoch(v: f64) -> Vec<f64> {
        vec![v; SAMPLES_PER_EPOCH]
    }

    /// Recording whose label sequence is given; epoch i is constant i.
    fn recording(subject: &str, labels: &[u8]) -> RawAnnotatedRecording {
        RawAnnotatedRecording {
            subject_id: subject.to_string(),
            epochs: (0..labels.len()).map(|i| flat_epoch(i as f64)).collect(),
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn stage_codes_round_trip_and_reject_out_of_range() {
        for stage in SleepStage::ALL {
            assert_eq!(SleepStage::from_code(stage.code()).unwrap(), stage);
        }
        assert!(SleepStage::from_code(5).is_err());
        assert!(SleepStage::from_code(255).is_err());
    }

    #[test]
    fn preprocess_maps_n4_and_drops_unknown() {
        let rec = recording("a", &[2, RAW_CODE_N4, RAW_CODE_UNKNOWN, 4]);
        let ds = preprocess(&[rec]).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.labels(), &[SleepStage::N2, SleepStage::N3, SleepStage::Rem]);
        // The UNKNOWN epoch's samples are gone; neighbors kept their data.
        assert_eq!(ds.epoch(1)[0], 1.0);
        assert_eq!(ds.epoch(2)[0], 3.0);
    }

    #[test]
    fn preprocess_rejects_invalid_codes() {
        let rec = recording("a", &[2, 9]);
        assert!(preprocess(&[rec]).is_err());
    }

    #[test]
    fn wake_trim_keeps_sixty_epochs_each_side() {
        // 100 wake, one N2, 100 wake: expect 60 + 1 + 60.
        let mut labels = vec![0u8; 100];
        labels.push(2);
        labels.extend(vec![0u8; 100]);
        let ds = preprocess(&[recording("a", &labels)]).unwrap();
        assert_eq!(ds.len(), 121);
        // The retained window starts 60 epochs before the N2 at index 100.
        assert_eq!(ds.epoch(0)[0], 40.0);
        assert_eq!(ds.label(60), SleepStage::N2);
        assert_eq!(ds.epoch(120)[0], 160.0);
    }

    #[test]
    fn wake_trim_leaves_short_leads_alone() {
        let labels = [0, 0, 2, 0];
        let ds = preprocess(&[recording("a", &labels)]).unwrap();
        assert_eq!(ds.len(), 4);
    }

    #[test]
    fn all_wake_recordings_keep_both_ends() {
        let ds = preprocess(&[recording("a", &vec![0u8; 500])]).unwrap();
        assert_eq!(ds.len(), 2 * WAKE_TRIM_EPOCHS);
        assert_eq!(ds.epoch(0)[0], 0.0);
        assert_eq!(ds.epoch(59)[0], 59.0);
        assert_eq!(ds.epoch(60)[0], 440.0);
        assert_eq!(ds.epoch(119)[0], 499.0);

        let short = preprocess(&[recording("b", &vec![0u8; 30])]).unwrap();
        assert_eq!(short.len(), 30);
    }

    #[test]
    fn histogram_counts_by_class() {
        let ds = preprocess(&[recording("a", &[0, 1, 2, 2, 3, 4, 4, 4])]).unwrap();
        assert_eq!(ds.class_histogram(), [1, 1, 2, 1, 3]);
    }

    #[test]
    fn folds_partition_subjects_exactly_once_with_balance() {
        let subjects: Vec<String> = (0..11).map(|i| format!("S{i:02}")).collect();
        let folds = make_folds(&subjects, 4, 7).unwrap();
        assert_eq!(folds.len(), 4);
        let mut seen: Vec<String> = Vec::new();
        for f in &folds {
            // Train and test are disjoint and together cover all subjects.
            for s in &f.test_subjects {
                assert!(!f.train_subjects.contains(s), "{s} in both splits");
            }
            assert_eq!(f.train_subjects.len() + f.test_subjects.len(), subjects.len());
            seen.extend(f.test_subjects.iter().cloned());
        }
        seen.sort();
        let mut want = subjects.clone();
        want.sort();
        assert_eq!(seen, want, "every subject in exactly one test set");
        let sizes: Vec<usize> = folds.iter().map(|f| f.test_subjects.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn folds_are_seed_deterministic() {
        let subjects: Vec<String> = (0..10).map(|i| format!("S{i:02}")).collect();
        assert_eq!(make_folds(&subjects, 5, 3).unwrap(), make_folds(&subjects, 5, 3).unwrap());
        assert_ne!(make_folds(&subjects, 5, 3).unwrap(), make_folds(&subjects, 5, 4).unwrap());
        assert!(make_folds(&subjects, 11, 0).is_err());
        assert!(make_folds(&subjects, 0, 0).is_err());
    }

    #[test]
    fn manifest_parses_resolves_and_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("index.csv");
        std::fs::write(&manifest, "path,subject_id\nrec0.epb,S00\n/abs/rec1.epb,S01\n").unwrap();
        let rows = read_manifest(&manifest).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].0, dir.path().join("rec0.epb"));
        assert_eq!(rows[0].1, "S00");
        assert_eq!(rows[1].0, PathBuf::from("/abs/rec1.epb"));

        std::fs::write(&manifest, "just-a-path-no-subject\n").unwrap();
        assert!(read_manifest(&manifest).is_err());
        std::fs::write(&manifest, "").unwrap();
        assert!(read_manifest(&manifest).is_err());
        assert!(read_manifest(&dir.path().join("missing.csv")).is_err());
    }
}
