//! On-disk corpus format: bit-exact round-trips and corruption detection.

use dakm_core::corpus::{CorpusMetadata, Problem, SnapshotCorpus, CORPUS_FORMAT_VERSION};
use dakm_core::solvers::{generate_ks_corpus, KSConfig};
use dakm_core::Error;
use ndarray::prelude::*;
use proptest::prelude::*;

fn corpus_strategy() -> impl Strategy<Value = SnapshotCorpus> {
    (2usize..10, 1usize..20, any::<u64>()).prop_flat_map(|(n, flat, seed)| {
        (
            proptest::collection::vec(-1e3f32..1e3, n * flat),
            proptest::collection::vec(any::<bool>(), n),
            Just((n, flat, seed)),
        )
            .prop_map(move |(values, mask, (n, flat, seed))| {
                let mut data = Array2::from_shape_vec((n, flat), values).unwrap();
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        data.row_mut(i).fill(0.0);
                    }
                }
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
                        rng_seed: seed,
                        dx: 0.125,
                        config_echo: "generated = \"property test\"\n".into(),
                    },
                    mask,
                }
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn save_load_round_trip_is_identity(corpus in corpus_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.dakc");
        corpus.save(&path).unwrap();
        let loaded = SnapshotCorpus::load(&path).unwrap();
        prop_assert_eq!(&loaded, &corpus);
    }
}

#[test]
fn solver_corpus_round_trip_with_paper_mask() {
    let cfg = KSConfig {
        domain_length: 16.0,
        dx: 0.5,
        n_steps: 480,
        save_every: 4,
        ..KSConfig::default()
    };
    let corpus = generate_ks_corpus(&cfg).unwrap();
    // the six-element mask pattern used for the missing-data study
    let mut masked = corpus;
    for idx in [36, 50, 61, 71, 87, 102] {
        masked.mask[idx] = true;
        masked.data.row_mut(idx).fill(0.0);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ks.dakc");
    masked.save(&path).unwrap();
    let loaded = SnapshotCorpus::load(&path).unwrap();
    assert_eq!(loaded, masked);
    assert_eq!(loaded.masked_indices(), vec![36, 50, 61, 71, 87, 102]);
}

#[test]
fn truncated_file_is_reported_corrupt() {
    let cfg = KSConfig {
        domain_length: 16.0,
        dx: 0.5,
        n_steps: 16,
        save_every: 4,
        ..KSConfig::default()
    };
    let corpus = generate_ks_corpus(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.dakc");
    corpus.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(
        SnapshotCorpus::load(&path),
        Err(Error::CorruptCorpus(_))
    ));
}

#[test]
fn format_version_mismatch_is_reported() {
    let cfg = KSConfig {
        domain_length: 16.0,
        dx: 0.5,
        n_steps: 16,
        save_every: 4,
        ..KSConfig::default()
    };
    let corpus = generate_ks_corpus(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.dakc");
    corpus.save(&path).unwrap();
    let sidecar = path.with_extension("dakc.toml");
    let text = std::fs::read_to_string(&sidecar).unwrap();
    std::fs::write(&sidecar, text.replace("format_version = 1", "format_version = 99")).unwrap();
    assert!(matches!(
        SnapshotCorpus::load(&path),
        Err(Error::FormatVersion { found: 99, expected: 1 })
    ));
}

#[test]
fn mask_bytes_are_validated() {
    let cfg = KSConfig {
        domain_length: 16.0,
        dx: 0.5,
        n_steps: 16,
        save_every: 4,
        ..KSConfig::default()
    };
    let corpus = generate_ks_corpus(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dakc");
    corpus.save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 1] = 7;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        SnapshotCorpus::load(&path),
        Err(Error::CorruptCorpus(_))
    ));
}
