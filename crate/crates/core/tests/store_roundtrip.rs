use gradspect::store::{
    read_grds, read_manifest, write_grds, write_manifest, Dtype, GrdsReader, Manifest,
    ManifestEntry, StoreError, Subset,
};
use gradspect::{GradientBundle, Matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_corpus(rng: &mut ChaCha8Rng) -> Vec<GradientBundle> {
    let layers = rng.random_range(1..=3);
    let shapes: Vec<(usize, usize)> = (0..4)
        .map(|_| (rng.random_range(1..=6), rng.random_range(1..=6)))
        .collect();
    let n = rng.random_range(1..=8);
    (0..n)
        .map(|i| {
            let layers = (0..layers)
                .map(|_| {
                    [0, 1, 2, 3].map(|p| {
                        let (r, c) = shapes[p];
                        let data = (0..r * c).map(|_| rng.random_range(-1e3..1e3)).collect();
                        Matrix::new(r, c, data).unwrap()
                    })
                })
                .collect();
            GradientBundle::new(format!("sample-{i}-é"), rng.random_range(0.0..10.0), layers)
                .unwrap()
        })
        .collect()
}

#[test]
fn random_corpora_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..50 {
        let corpus = random_corpus(&mut rng);
        let path = dir.path().join(format!("{i}.grds"));
        let bytes = write_grds(&path, &corpus, Dtype::F64).unwrap();
        assert_eq!(bytes, std::fs::metadata(&path).unwrap().len());
        let file = read_grds(&path).unwrap();
        assert_eq!(file.samples.len(), corpus.len());
        for (a, b) in file.samples.iter().zip(&corpus) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            for ((_, _, x), (_, _, y)) in a.iter().zip(b.iter()) {
                assert_eq!(x.shape(), y.shape());
                assert!(x
                    .as_slice()
                    .iter()
                    .zip(y.as_slice())
                    .all(|(u, v)| u.to_bits() == v.to_bits()));
            }
        }
    }
}

#[test]
fn identical_inputs_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = random_corpus(&mut ChaCha8Rng::seed_from_u64(1));
    write_grds(dir.path().join("a"), &corpus, Dtype::F32).unwrap();
    write_grds(dir.path().join("b"), &corpus, Dtype::F32).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("a")).unwrap(),
        std::fs::read(dir.path().join("b")).unwrap()
    );
}

#[test]
fn f32_round_trip_is_one_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.grds");
    let corpus = random_corpus(&mut ChaCha8Rng::seed_from_u64(3));
    write_grds(&path, &corpus, Dtype::F32).unwrap();
    let file = read_grds(&path).unwrap();
    assert_eq!(file.dtype, Dtype::F32);
    for (a, b) in file.samples.iter().zip(&corpus) {
        for ((_, _, x), (_, _, y)) in a.iter().zip(b.iter()) {
            for (u, v) in x.as_slice().iter().zip(y.as_slice()) {
                assert_eq!(*u, *v as f32 as f64);
            }
        }
    }
}

/// Every byte-level cut of a file must be rejected as truncated, at an
/// offset no larger than the cut.
#[test]
fn every_truncation_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.grds");
    let m = |v: f64| Matrix::new(2, 1, vec![v, -v]).unwrap();
    let b =
        |id: &str| GradientBundle::new(id, 0.5, vec![[m(1.0), m(2.0), m(3.0), m(4.0)]]).unwrap();
    write_grds(&path, &[b("a"), b("bb")], Dtype::F64).unwrap();
    let full = std::fs::read(&path).unwrap();
    for cut in 0..full.len() {
        std::fs::write(&path, &full[..cut]).unwrap();
        match read_grds(&path) {
            Err(StoreError::TruncatedFile { offset }) => {
                assert!(offset as usize <= cut, "cut {cut} offset {offset}")
            }
            other => panic!("cut {cut}: {other:?}"),
        }
    }
}

#[test]
fn truncating_last_four_bytes_reports_start_of_last_payload() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.grds");
    let m = Matrix::new(1, 1, vec![1.0]).unwrap();
    let bundle = GradientBundle::new("x", 1.0, vec![[m.clone(), m.clone(), m.clone(), m]]).unwrap();
    write_grds(&path, &[bundle], Dtype::F64).unwrap();
    let full = std::fs::read(&path).unwrap();
    std::fs::write(&path, &full[..full.len() - 4]).unwrap();
    // header 24, id 2 + 1, loss 8, three whole matrices of 13 + 8, then the
    // fourth matrix header of 13 bytes
    let expected = 24 + 3 + 8 + 3 * 21 + 13;
    assert_eq!(expected, full.len() - 8);
    match read_grds(&path) {
        Err(StoreError::TruncatedFile { offset }) => assert_eq!(offset, expected as u64),
        other => panic!("{other:?}"),
    }
}

#[test]
fn streaming_reader_without_known_length() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.grds");
    let corpus = random_corpus(&mut ChaCha8Rng::seed_from_u64(9));
    write_grds(&path, &corpus, Dtype::F64).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let reader = GrdsReader::new(&bytes[..], None).unwrap();
    let got: Vec<_> = reader.map(Result::unwrap).collect();
    assert_eq!(got, corpus);

    let cut = &bytes[..bytes.len() - 3];
    let results: Vec<_> = GrdsReader::new(cut, None).unwrap().collect();
    assert!(matches!(
        results.last(),
        Some(Err(StoreError::TruncatedFile { .. }))
    ));
}

#[test]
fn record_count_must_match_stream() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.grds");
    let corpus = random_corpus(&mut ChaCha8Rng::seed_from_u64(4));
    write_grds(&path, &corpus, Dtype::F64).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    bytes[12..20].copy_from_slice(&(count + 1).to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        read_grds(&path),
        Err(StoreError::TruncatedFile { .. })
    ));
    bytes[12..20].copy_from_slice(&(count - 1).to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        read_grds(&path),
        Err(StoreError::TrailingBytes { .. })
    ));
}

#[test]
fn manifest_round_trip_1000_entries() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let subsets = [Subset::High, Subset::Low, Subset::None];
    let manifest: Manifest = (0..1000)
        .map(|i| {
            (
                format!("id-{i}"),
                ManifestEntry {
                    dataset: format!("set{}", i % 7),
                    subset: subsets[rng.random_range(0..3)],
                    metric: "ifd".into(),
                    loss: rng.random_range(0.0..20.0),
                },
            )
        })
        .collect();
    write_manifest(&manifest, &path).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), manifest);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn single_matrix_round_trip(
        rows in 1usize..5, cols in 1usize..5, layers in 1usize..3,
        seed in any::<u64>(), id in "[a-z0-9_-]{0,12}",
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.grds");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..layers)
            .map(|_| [0; 4].map(|_| Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap()))
            .collect();
        let bundle = GradientBundle::new(id, 1.0, layers).unwrap();
        write_grds(&path, std::slice::from_ref(&bundle), Dtype::F64).unwrap();
        prop_assert_eq!(read_grds(&path).unwrap().samples, vec![bundle]);
    }
}
