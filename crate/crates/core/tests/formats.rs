mod common;

use advbin::codespace::{read_codes, write_codes, BinaryCode, BinaryCodeBatch};
use advbin::dataset::{generate_synthetic, read_dataset, write_dataset, IdentityDataset, IdentityRecord, SynthConfig};
use advbin::nn::{read_model, write_model, Activation, DenseNetSpec, Network};
use advbin::Error;
use proptest::prelude::*;

fn code_bytes(codes: &BinaryCodeBatch) -> Vec<u8> {
    let mut buf = Vec::new();
    write_codes(&mut buf, codes).unwrap();
    buf
}

fn dataset_bytes(ds: &IdentityDataset) -> Vec<u8> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, ds).unwrap();
    buf
}

fn model_bytes(net: &Network) -> Vec<u8> {
    let mut buf = Vec::new();
    write_model(&mut buf, net).unwrap();
    buf
}

proptest! {
    #[test]
    fn codes_round_trip_byte_identical(bits in 1usize..300, rows in proptest::collection::vec(any::<u64>(), 1..20)) {
        let mut batch = BinaryCodeBatch::new(bits).unwrap();
        for seed in &rows {
            let mut r = common::rng(*seed);
            batch.push(&common::random_code(bits, &mut r)).unwrap();
        }
        let bytes = code_bytes(&batch);
        let back = read_codes(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &batch);
        prop_assert_eq!(code_bytes(&back), bytes);
    }

    #[test]
    fn datasets_round_trip_byte_identical(
        dim in 1usize..6,
        recs in proptest::collection::vec((any::<u32>(), any::<u16>(), proptest::collection::vec(-1e6f32..1e6, 6)), 1..12),
    ) {
        let records = recs
            .into_iter()
            .map(|(identity, view, f)| IdentityRecord { features: f[..dim].to_vec(), identity, view })
            .collect();
        let ds = IdentityDataset::new(dim, records).unwrap();
        let bytes = dataset_bytes(&ds);
        let back = read_dataset(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(dataset_bytes(&back), bytes);
    }

    #[test]
    fn models_round_trip_byte_identical(sizes in proptest::collection::vec(1usize..6, 2..5), l2 in any::<bool>(), seed in any::<u64>()) {
        let spec = DenseNetSpec::mlp(sizes, Activation::Relu, Activation::None, l2).unwrap();
        let net = Network::new(spec, seed);
        let bytes = model_bytes(&net);
        let back = read_model(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert_eq!(model_bytes(&back), bytes);
    }
}

#[test]
fn synthetic_dataset_survives_files() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&SynthConfig::default()).unwrap();
    let path = dir.path().join("d.abcf");
    advbin::dataset::save_features(&path, &ds).unwrap();
    assert_eq!(advbin::dataset::load_features(&path).unwrap(), ds);
    assert_eq!(std::fs::read(&path).unwrap(), dataset_bytes(&ds));
}

#[test]
fn layouts_match_the_documented_headers() {
    let batch = BinaryCodeBatch::from_codes(3, &[BinaryCode::from_bits(&[1, 0, 1]).unwrap()]).unwrap();
    let bytes = code_bytes(&batch);
    assert_eq!(&bytes[..4], b"ABCB");
    assert_eq!(bytes.len(), 4 + 4 + 8 + 4 + 8);
    assert_eq!(u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()), 0b101);

    let ds = IdentityDataset::new(2, vec![IdentityRecord { features: vec![1.0, -2.0], identity: 9, view: 3 }]).unwrap();
    let bytes = dataset_bytes(&ds);
    assert_eq!(&bytes[..4], b"ABCF");
    assert_eq!(bytes.len(), 4 + 4 + 8 + 4 + (4 + 2 + 2 * 4));
    assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 9);
    assert_eq!(u16::from_le_bytes(bytes[24..26].try_into().unwrap()), 3);
    assert_eq!(f32::from_le_bytes(bytes[30..34].try_into().unwrap()), -2.0);

    let net = Network::new(DenseNetSpec::new(vec![2, 1], vec![Activation::Relu], true).unwrap(), 5);
    let bytes = model_bytes(&net);
    assert_eq!(&bytes[..4], b"ABCM");
    // magic, version, layer count, 2 sizes, 1 activation, l2 flag, seed, 3 parameters
    assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 1 + 1 + 8 + 3 * 8);
}

#[test]
fn corrupted_files_are_format_errors() {
    let batch = BinaryCodeBatch::from_codes(3, &[BinaryCode::from_bits(&[1, 0, 1]).unwrap()]).unwrap();
    let good = code_bytes(&batch);
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let mut padded = good.clone();
    let last = padded.len() - 1;
    padded[last] = 0x80;
    let mut trailing = good.clone();
    trailing.push(0);
    for bytes in [bad_magic, padded, trailing, good[..good.len() - 1].to_vec()] {
        assert!(matches!(read_codes(&mut bytes.as_slice()), Err(Error::Format(_))));
    }
}
