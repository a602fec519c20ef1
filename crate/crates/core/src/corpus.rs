//! Snapshot corpora: persistence, sequence sampling for training, and
//! missing-data mask management.
//!
//! On disk a corpus is a raw little-endian `f32` array file (all snapshots
//! back to back, channels-last, row-major) followed by one mask byte per
//! snapshot, plus a TOML metadata sidecar at `<path>.toml`. Loading a saved
//! corpus reproduces it bit for bit, mask and metadata included.

use crate::error::{Error, Result};
use ndarray::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

/// TOML integers are i64; seeds above that range round-trip as strings.
pub(crate) mod seed_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        if *v <= i64::MAX as u64 {
            s.serialize_i64(*v as i64)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(i64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Int(i) if i >= 0 => Ok(i as u64),
            Raw::Int(_) => Err(serde::de::Error::custom("seed must be non-negative")),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    Ks,
    Gs,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorpusMetadata {
    pub format_version: u32,
    pub problem: Problem,
    pub n_snapshots: usize,
    /// Snapshot shape, channels last: `[n, 1]` or `[h, w, 2]`.
    pub shape: Vec<usize>,
    pub dt_solver: f64,
    pub dt_koopman: f64,
    pub save_every: usize,
    #[serde(with = "seed_serde")]
    pub rng_seed: u64,
    /// Grid spacing used by finite-difference gradient losses.
    pub dx: f64,
    /// TOML echo of the generating solver configuration.
    pub config_echo: String,
}

/// One solver state at one saved time index, channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSnapshot {
    pub values: ArrayD<f32>,
    pub time_index: usize,
}

impl FieldSnapshot {
    pub fn from_f64(values: ArrayD<f64>, time_index: usize) -> Self {
        FieldSnapshot {
            values: values.mapv(|v| v as f32),
            time_index,
        }
    }

    pub fn channels(&self) -> usize {
        *self.values.shape().last().expect("snapshot has a shape")
    }
}

/// Ordered snapshot sequence with metadata and a missing-mask
/// (`true` = missing; missing snapshots are stored as all-zeros).
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotCorpus {
    /// `[n_snapshots, flat_len]`, each row one channels-last snapshot.
    pub data: Array2<f32>,
    pub metadata: CorpusMetadata,
    pub mask: Vec<bool>,
}

/// Contiguous training window: `n_s + 1` snapshots and their mask slice.
#[derive(Clone, Debug)]
pub struct SequenceSample {
    pub start_index: usize,
    /// `[n_s + 1, flat_len]`.
    pub x_seq: Array2<f32>,
    pub mask_seq: Vec<bool>,
}

impl SnapshotCorpus {
    pub fn from_snapshots(
        snapshots: Vec<FieldSnapshot>,
        metadata: CorpusMetadata,
    ) -> Result<Self> {
        let flat: usize = metadata.shape.iter().product();
        let n = snapshots.len();
        if n != metadata.n_snapshots {
            return Err(Error::ShapeMismatch(format!(
                "metadata claims {} snapshots, got {n}",
                metadata.n_snapshots
            )));
        }
        let mut data = Array2::zeros((n, flat));
        for (i, snap) in snapshots.iter().enumerate() {
            if snap.values.shape() != metadata.shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "snapshot {i} has shape {:?}, corpus shape is {:?}",
                    snap.values.shape(),
                    metadata.shape
                )));
            }
            let flat_view = snap
                .values
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order(flat)
                .unwrap();
            data.row_mut(i).assign(&flat_view);
        }
        Ok(SnapshotCorpus {
            data,
            metadata,
            mask: vec![false; n],
        })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat_len(&self) -> usize {
        self.data.ncols()
    }

    pub fn channels(&self) -> usize {
        *self.metadata.shape.last().expect("corpus has a shape")
    }

    pub fn spatial(&self) -> &[usize] {
        &self.metadata.shape[..self.metadata.shape.len() - 1]
    }

    pub fn is_masked(&self, index: usize) -> bool {
        self.mask[index]
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn snapshot(&self, index: usize) -> FieldSnapshot {
        let row = self.data.row(index).to_owned();
        FieldSnapshot {
            values: row.into_shape_with_order(IxDyn(&self.metadata.shape)).unwrap(),
            time_index: index,
        }
    }

    /// Uniformly random contiguous window of `n_s + 1` snapshots.
    pub fn sample_sequence(&self, n_s: usize, rng: &mut ChaCha8Rng) -> Result<SequenceSample> {
        if self.len() < n_s + 1 {
            return Err(Error::CorpusTooShort {
                len: self.len(),
                needed: n_s + 1,
            });
        }
        let start = rng.gen_range(0..=self.len() - n_s - 1);
        Ok(self.window(start, n_s))
    }

    /// The window starting at `start` (must satisfy `start + n_s < len`).
    pub fn window(&self, start: usize, n_s: usize) -> SequenceSample {
        assert!(start + n_s < self.len(), "window beyond corpus end");
        SequenceSample {
            start_index: start,
            x_seq: self.data.slice(s![start..start + n_s + 1, ..]).to_owned(),
            mask_seq: self.mask[start..start + n_s + 1].to_vec(),
        }
    }

    /// Zero out `floor(fraction * |region|)` snapshots chosen uniformly
    /// without replacement within `region`, and flag them in the mask.
    pub fn apply_missing_policy<F: Fn(usize) -> bool>(
        &self,
        fraction: f64,
        region: F,
        rng_seed: u64,
    ) -> Result<SnapshotCorpus> {
        assert!((0.0..=1.0).contains(&fraction), "fraction must be in [0,1]");
        let mut out = self.clone();
        if fraction == 0.0 {
            return Ok(out);
        }
        let eligible: Vec<usize> = (0..self.len()).filter(|&i| region(i)).collect();
        if eligible.is_empty() {
            return Err(Error::EmptyMaskRegion);
        }
        let count = ((fraction * eligible.len() as f64).floor() as usize).min(eligible.len());
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let chosen = rand::seq::index::sample(&mut rng, eligible.len(), count);
        for pick in chosen.iter() {
            let idx = eligible[pick];
            out.mask[idx] = true;
            out.data.row_mut(idx).fill(0.0);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = toml::to_string_pretty(&self.metadata)
            .map_err(|e| Error::Metadata(e.to_string()))?;
        fs::write(sidecar_path(path), meta)?;
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        for &v in self.data.iter() {
            file.write_all(&v.to_le_bytes())?;
        }
        for &m in &self.mask {
            file.write_all(&[u8::from(m)])?;
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SnapshotCorpus> {
        let meta_text = fs::read_to_string(sidecar_path(path)).map_err(|e| {
            Error::CorruptCorpus(format!("cannot read metadata sidecar: {e}"))
        })?;
        let metadata: CorpusMetadata =
            toml::from_str(&meta_text).map_err(|e| Error::Metadata(e.to_string()))?;
        if metadata.format_version != CORPUS_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: metadata.format_version,
                expected: CORPUS_FORMAT_VERSION,
            });
        }
        let flat: usize = metadata.shape.iter().product();
        let n = metadata.n_snapshots;
        let expected = 4 * n * flat + n;
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() != expected {
            return Err(Error::CorruptCorpus(format!(
                "file holds {} bytes, expected {expected} for {n} snapshots of {flat} floats plus mask",
                bytes.len()
            )));
        }
        let mut data = Array2::zeros((n, flat));
        for (i, chunk) in bytes[..4 * n * flat].chunks_exact(4).enumerate() {
            data[[i / flat, i % flat]] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        let mut mask = Vec::with_capacity(n);
        for &b in &bytes[4 * n * flat..] {
            match b {
                0 => mask.push(false),
                1 => mask.push(true),
                other => {
                    return Err(Error::CorruptCorpus(format!(
                        "mask byte {other} is neither 0 nor 1"
                    )))
                }
            }
        }
        Ok(SnapshotCorpus {
            data,
            metadata,
            mask,
        })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".toml");
    std::path::PathBuf::from(p)
}

/// Per-channel input scaling applied before the encoder and inverted after
/// the decoder.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub enum Normalization {
    None,
    PerChannel { mean: Vec<f64>, std: Vec<f64> },
}

impl Normalization {
    /// Standardize to zero mean, unit variance per channel; statistics are
    /// computed over unmasked snapshots only.
    pub fn fit_standardize(corpus: &SnapshotCorpus) -> Normalization {
        let channels = corpus.channels();
        let mut sum = vec![0.0f64; channels];
        let mut sumsq = vec![0.0f64; channels];
        let mut count = vec![0u64; channels];
        for i in 0..corpus.len() {
            if corpus.mask[i] {
                continue;
            }
            for (j, &v) in corpus.data.row(i).iter().enumerate() {
                let c = j % channels;
                sum[c] += v as f64;
                sumsq[c] += (v as f64) * (v as f64);
                count[c] += 1;
            }
        }
        let mut mean = vec![0.0; channels];
        let mut std = vec![1.0; channels];
        for c in 0..channels {
            if count[c] > 0 {
                mean[c] = sum[c] / count[c] as f64;
                let var = (sumsq[c] / count[c] as f64 - mean[c] * mean[c]).max(0.0);
                std[c] = var.sqrt().max(1e-12);
            }
        }
        Normalization::PerChannel { mean, std }
    }

    /// Fit the scaling appropriate for the problem: standardized inputs for
    /// the unbounded KS decoder, raw `[0,1]` data for the sigmoid GS decoder.
    pub fn for_problem(corpus: &SnapshotCorpus) -> Normalization {
        match corpus.metadata.problem {
            Problem::Ks => Normalization::fit_standardize(corpus),
            Problem::Gs => Normalization::None,
        }
    }

    fn params(&self, channels: usize) -> (Vec<f64>, Vec<f64>) {
        match self {
            Normalization::None => (vec![0.0; channels], vec![1.0; channels]),
            Normalization::PerChannel { mean, std } => {
                assert_eq!(mean.len(), channels, "normalization channel count");
                (mean.clone(), std.clone())
            }
        }
    }
}

/// Convert one channels-last snapshot row into the model layout
/// `[channels, spatial...]` (f64, normalized). Masked snapshots are
/// substituted by zeros without reading their stored values.
pub fn to_model_layout(
    row: ArrayView1<f32>,
    shape: &[usize],
    masked: bool,
    norm: &Normalization,
) -> ArrayD<f64> {
    let channels = *shape.last().unwrap();
    let spatial = &shape[..shape.len() - 1];
    let mut out_shape = vec![channels];
    out_shape.extend_from_slice(spatial);
    let mut out = ArrayD::zeros(IxDyn(&out_shape));
    if masked {
        return out;
    }
    let (mean, std) = norm.params(channels);
    let n_spatial: usize = spatial.iter().product();
    for p in 0..n_spatial {
        for c in 0..channels {
            let v = (row[p * channels + c] as f64 - mean[c]) / std[c];
            out.as_slice_mut().unwrap()[c * n_spatial + p] = v;
        }
    }
    out
}

/// Invert [`to_model_layout`]: model output `[channels, spatial...]` back to
/// a channels-last f32 snapshot (denormalized).
pub fn from_model_layout(values: &ArrayD<f64>, norm: &Normalization) -> ArrayD<f32> {
    let channels = values.shape()[0];
    let spatial = &values.shape()[1..];
    let n_spatial: usize = spatial.iter().product();
    let (mean, std) = norm.params(channels);
    let mut out_shape = spatial.to_vec();
    out_shape.push(channels);
    let mut out = ArrayD::zeros(IxDyn(&out_shape));
    let src = values.as_standard_layout();
    let flat = src.as_slice().unwrap();
    for p in 0..n_spatial {
        for c in 0..channels {
            out.as_slice_mut().unwrap()[p * channels + c] =
                (flat[c * n_spatial + p] * std[c] + mean[c]) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{phase_rng, Phase};

    fn tiny_corpus(n: usize, flat: usize) -> SnapshotCorpus {
        let data = Array2::from_shape_fn((n, flat), |(i, j)| (i * flat + j) as f32 * 0.25 - 3.0);
        SnapshotCorpus {
            data,
            metadata: CorpusMetadata {
                format_version: CORPUS_FORMAT_VERSION,
                problem: Problem::Ks,
                n_snapshots: n,
                shape: vec![flat, 1],
                dt_solver: 0.0625,
                dt_koopman: 0.25,
                save_every: 4,
                rng_seed: 0,
                dx: 0.125,
                config_echo: "test = true\n".into(),
            },
            mask: vec![false; n],
        }
    }

    #[test]
    fn sampling_respects_bounds() {
        let corpus = tiny_corpus(20, 4);
        let mut rng = phase_rng(1, 1, Phase::GenSample);
        for _ in 0..200 {
            let s = corpus.sample_sequence(6, &mut rng).unwrap();
            assert!(s.start_index + 6 < 20);
            assert_eq!(s.x_seq.nrows(), 7);
            assert_eq!(s.mask_seq.len(), 7);
        }
        // single valid window
        let c2 = tiny_corpus(7, 4);
        let s = c2.sample_sequence(6, &mut rng).unwrap();
        assert_eq!(s.start_index, 0);
        // too short
        assert!(matches!(
            c2.sample_sequence(7, &mut rng),
            Err(Error::CorpusTooShort { len: 7, needed: 8 })
        ));
    }

    #[test]
    fn missing_policy_counts_and_zeroing() {
        let corpus = tiny_corpus(120, 4);
        let masked = corpus.apply_missing_policy(0.05, |_| true, 9).unwrap();
        assert_eq!(masked.masked_indices().len(), 6);
        for i in masked.masked_indices() {
            assert!(masked.data.row(i).iter().all(|&v| v == 0.0));
        }
        for i in 0..120 {
            if !masked.mask[i] {
                assert_eq!(masked.data.row(i), corpus.data.row(i));
            }
        }
        // deterministic in the seed
        let again = corpus.apply_missing_policy(0.05, |_| true, 9).unwrap();
        assert_eq!(again.mask, masked.mask);

        // region predicate mirrors the "time instant > 250" convention
        let long = tiny_corpus(1200, 2);
        let m = long
            .apply_missing_policy(0.1, |i| i > 1000, 3)
            .unwrap();
        assert_eq!(m.masked_indices().len(), 19);
        assert!(m.masked_indices().iter().all(|&i| i > 1000));

        // no-op and error paths
        let same = corpus.apply_missing_policy(0.0, |_| false, 1).unwrap();
        assert_eq!(&same, &corpus);
        assert!(matches!(
            corpus.apply_missing_policy(0.5, |_| false, 1),
            Err(Error::EmptyMaskRegion)
        ));
    }

    #[test]
    fn normalization_ignores_masked_rows() {
        let mut corpus = tiny_corpus(10, 3);
        corpus.mask[4] = true;
        corpus.data.row_mut(4).fill(1e9);
        let norm = Normalization::fit_standardize(&corpus);
        let Normalization::PerChannel { mean, .. } = &norm else {
            panic!()
        };
        assert!(mean[0].abs() < 100.0, "masked row leaked into stats");
    }

    #[test]
    fn layout_round_trip_and_mask_substitution() {
        let shape = [4usize, 3, 2];
        let row: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
        let row = Array1::from(row);
        let norm = Normalization::PerChannel {
            mean: vec![0.5, -1.0],
            std: vec![2.0, 0.5],
        };
        let m = to_model_layout(row.view(), &shape, false, &norm);
        assert_eq!(m.shape(), &[2, 4, 3]);
        let back = from_model_layout(&m.mapv(|v| v), &norm);
        for (a, b) in back.iter().zip(row.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        let zeroed = to_model_layout(row.view(), &shape, true, &norm);
        assert!(zeroed.iter().all(|&v| v == 0.0));
    }
}
