//! EPB: the little-endian binary container for epoched recordings.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "EPB1"
//! version u16      1
//! n       u32      number of epochs
//! spe     u32      samples per epoch (always 3000)
//! rate    u16      sample rate in Hz (always 100)
//! labels  u8 * n   stage wire codes, each in 0..=4
//! table   u16 count, then per subject: u16 byte length + UTF-8 bytes
//! index   u16 * n  subject table index per epoch
//! samples f32 * n*spe
//! ```
//!
//! Decoding rejects wrong magic, unknown versions, short files, trailing
//! bytes, out-of-range labels or subject indices, and non-finite samples —
//! each with its own error variant so callers can report precisely.

use std::path::Path;

use crate::error::{Error, Result};
use crate::signal_io::{EpochDataset, SleepStage, SAMPLES_PER_EPOCH, SAMPLE_RATE_HZ};

/// File magic every EPB file starts with.
pub const MAGIC: [u8; 4] = *b"EPB1";
const VERSION: u16 = 1;

/// Serialize a dataset into EPB bytes.
pub fn write_epb_bytes(ds: &EpochDataset) -> Result<Vec<u8>> {
    let n = ds.len();
    if n > u32::MAX as usize {
        return Err(Error::Data(format!("{n} epochs exceed the u32 epoch counter")));
    }
    if ds.subject_ids().len() > u16::MAX as usize {
        return Err(Error::Data("subject table exceeds u16 entries".into()));
    }
    let mut out = Vec::with_capacity(16 + n * (1 + 2 + SAMPLES_PER_EPOCH * 4));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(SAMPLES_PER_EPOCH as u32).to_le_bytes());
    out.extend_from_slice(&SAMPLE_RATE_HZ.to_le_bytes());
    for i in 0..n {
        out.push(ds.label(i).code());
    }
    out.extend_from_slice(&(ds.subject_ids().len() as u16).to_le_bytes());
    for s in ds.subject_ids() {
        if s.len() > u16::MAX as usize {
            return Err(Error::Data(format!("subject id longer than u16 bytes: {s:?}")));
        }
        out.extend_from_slice(&(s.len() as u16).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    for i in 0..n {
        out.extend_from_slice(&(ds.subject_index(i) as u16).to_le_bytes());
    }
    for i in 0..n {
        for &v in ds.epoch(i) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Write a dataset to an EPB file.
pub fn write_epb(ds: &EpochDataset, path: &Path) -> Result<()> {
    std::fs::write(path, write_epb_bytes(ds)?)?;
    Ok(())
}

/// Sequential little-endian reader with truncation accounting.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.buf.len() {
            return Err(Error::Truncated { expected: self.pos + len, got: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decode EPB bytes into a dataset.
pub fn read_epb_bytes(buf: &[u8]) -> Result<EpochDataset> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic.try_into().unwrap() });
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { found: version });
    }
    let n = c.u32()? as usize;
    let spe = c.u32()? as usize;
    if spe != SAMPLES_PER_EPOCH {
        return Err(Error::Data(format!(
            "EPB declares {spe} samples per epoch, this pipeline requires {SAMPLES_PER_EPOCH}"
        )));
    }
    let rate = c.u16()?;
    if rate != SAMPLE_RATE_HZ {
        return Err(Error::Data(format!(
            "EPB declares {rate} Hz, this pipeline requires {SAMPLE_RATE_HZ} Hz"
        )));
    }
    let mut labels = Vec::with_capacity(n);
    for (i, &code) in c.take(n)?.iter().enumerate() {
        labels.push(
            SleepStage::from_code(code)
                .map_err(|_| Error::Data(format!("epoch {i}: label code {code} outside 0..=4")))?,
        );
    }
    let n_subjects = c.u16()? as usize;
    let mut subject_ids = Vec::with_capacity(n_subjects);
    for s in 0..n_subjects {
        let len = c.u16()? as usize;
        let bytes = c.take(len)?;
        let id = std::str::from_utf8(bytes)
            .map_err(|_| Error::Data(format!("subject {s}: id is not valid UTF-8")))?;
        subject_ids.push(id.to_string());
    }
    let mut subject_index = Vec::with_capacity(n);
    for i in 0..n {
        let idx = c.u16()? as usize;
        if idx >= n_subjects {
            return Err(Error::Data(format!(
                "epoch {i}: subject index {idx} outside table of {n_subjects}"
            )));
        }
        subject_index.push(idx);
    }
    let mut ds = EpochDataset::new();
    let mut epoch = vec![0.0f64; SAMPLES_PER_EPOCH];
    for i in 0..n {
        for (j, slot) in epoch.iter_mut().enumerate() {
            let v = c.f32()?;
            if !v.is_finite() {
                return Err(Error::NonFiniteSample {
                    location: format!("epoch {i}, sample {j}"),
                });
            }
            *slot = v as f64;
        }
        ds.push_epoch(&subject_ids[subject_index[i]], &epoch, labels[i])?;
    }
    if c.pos != buf.len() {
        return Err(Error::Data(format!(
            "EPB has {} trailing bytes after the sample block",
            buf.len() - c.pos
        )));
    }
    Ok(ds)
}

/// Read a dataset from an EPB file.
pub fn read_epb(path: &Path) -> Result<EpochDataset> {
    let buf = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read EPB {}: {e}", path.display())))?;
    read_epb_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three epochs over two subjects with f32-exact sample values.
    fn sample_dataset() -> EpochDataset {
        let mut ds = EpochDataset::new();
        let mk = |scale: f64| -> Vec<f64> {
            (0..SAMPLES_PER_EPOCH).map(|i| ((i as f32) * 0.25 + scale as f32) as f64).collect()
        };
        ds.push_epoch("alpha", &mk(1.0), SleepStage::Wake).unwrap();
        ds.push_epoch("alpha", &mk(-2.0), SleepStage::N3).unwrap();
        ds.push_epoch("beta", &mk(0.5), SleepStage::Rem).unwrap();
        ds
    }

    #[test]
    fn round_trip_preserves_everything() {
        let ds = sample_dataset();
        let bytes = write_epb_bytes(&ds).unwrap();
        let back = read_epb_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        // Re-serialization is byte-identical.
        assert_eq!(write_epb_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.epb");
        let ds = sample_dataset();
        write_epb(&ds, &path).unwrap();
        assert_eq!(read_epb(&path).unwrap(), ds);
        assert!(read_epb(&dir.path().join("missing.epb")).is_err());
    }

    #[test]
    fn bad_magic_is_its_own_error() {
        let mut bytes = write_epb_bytes(&sample_dataset()).unwrap();
        bytes[..4].copy_from_slice(b"EDF+");
        assert!(matches!(read_epb_bytes(&bytes), Err(Error::BadMagic { found }) if &found == b"EDF+"));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = write_epb_bytes(&sample_dataset()).unwrap();
        bytes[4..6].copy_from_slice(&7u16.to_le_bytes());
        assert!(matches!(
            read_epb_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 7 })
        ));
    }

    #[test]
    fn truncation_reports_expected_length() {
        let bytes = write_epb_bytes(&sample_dataset()).unwrap();
        // Cut in the middle of the sample block.
        let cut = bytes.len() - 5;
        match read_epb_bytes(&bytes[..cut]) {
            Err(Error::Truncated { expected, got }) => {
                assert_eq!(got, cut);
                assert!(expected > cut);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
        // Cut inside the header too.
        assert!(matches!(read_epb_bytes(&bytes[..9]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = write_epb_bytes(&sample_dataset()).unwrap();
        bytes.push(0);
        assert!(matches!(read_epb_bytes(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let mut bytes = write_epb_bytes(&sample_dataset()).unwrap();
        // First label byte sits right after the 16-byte header.
        bytes[16] = 5;
        assert!(matches!(read_epb_bytes(&bytes), Err(Error::Data(_))));
        bytes[16] = 255;
        assert!(matches!(read_epb_bytes(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn non_finite_samples_are_rejected_with_location() {
        let ds = sample_dataset();
        let mut bytes = write_epb_bytes(&ds).unwrap();
        // Overwrite the first sample of epoch 1 with NaN. The sample block
        // is the trailing n*spe f32s.
        let sample_block = bytes.len() - 3 * SAMPLES_PER_EPOCH * 4;
        let pos = sample_block + SAMPLES_PER_EPOCH * 4;
        bytes[pos..pos + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        match read_epb_bytes(&bytes) {
            Err(Error::NonFiniteSample { location }) => {
                assert_eq!(location, "epoch 1, sample 0");
            }
            other => panic!("expected NonFiniteSample, got {other:?}"),
        }
    }

    #[test]
    fn dangling_subject_index_is_rejected() {
        let ds = sample_dataset();
        let mut bytes = write_epb_bytes(&ds).unwrap();
        // Subject-index array sits right before the samples; set epoch 0's
        // index to 9 (table only has 2 entries).
        let index_block = bytes.len() - 3 * SAMPLES_PER_EPOCH * 4 - 3 * 2;
        bytes[index_block..index_block + 2].copy_from_slice(&9u16.to_le_bytes());
        assert!(matches!(read_epb_bytes(&bytes), Err(Error::Data(_))));
    }
}
