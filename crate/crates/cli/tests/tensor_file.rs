use maskprune::tensor_file::{decode, encode, read_tensor, read_tensor_as, write_tensor, write_tensor_as, DType, TensorError};
use proptest::prelude::*;

#[test]
fn two_by_two_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.tensor");
    write_tensor(&path, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let t = read_tensor(&path).unwrap();
    assert_eq!(t.dims, vec![2, 2]);
    assert_eq!(t.values, vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(t.dtype, DType::F64);
}

#[test]
fn bad_magic_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.tensor");
    let mut bytes = encode(DType::F64, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    bytes[..8].copy_from_slice(b"BADMAGIC");
    std::fs::write(&path, &bytes).unwrap();
    let err = read_tensor(&path).unwrap_err();
    assert!(matches!(err, TensorError::BadMagic(m) if &m == b"BADMAGIC"));
    assert_eq!(err.code(), "bad_magic");
}

#[test]
fn file_size_follows_header_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.tensor");
    let values: Vec<f64> = (0..105).map(|i| i as f64 * 0.5).collect();
    write_tensor(&path, &[3, 5, 7], &values).unwrap();
    let expected = 8 + 1 + 8 + 3 * 8 + 105 * 8;
    assert_eq!(std::fs::metadata(&path).unwrap().len(), expected as u64);
    write_tensor_as(&path, DType::F32, &[3, 5, 7], &values).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), (8 + 1 + 8 + 3 * 8 + 105 * 4) as u64);
}

#[test]
fn header_bytes_are_little_endian() {
    let bytes = encode(DType::F64, &[2, 3], &[0.0; 6]).unwrap();
    assert_eq!(&bytes[..8], b"PKTENSOR");
    assert_eq!(bytes[8], DType::F64.code());
    assert_eq!(&bytes[9..17], &2u64.to_le_bytes());
    assert_eq!(&bytes[17..25], &2u64.to_le_bytes());
    assert_eq!(&bytes[25..33], &3u64.to_le_bytes());
}

#[test]
fn error_classes_have_distinct_codes() {
    let good = encode(DType::F64, &[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();

    let mut magic = good.clone();
    magic[0] = b'X';
    let mut dtype = good.clone();
    dtype[8] = 9;
    let truncated = &good[..good.len() - 3];
    let mut trailing = good.clone();
    trailing.push(0);
    let header_only = &good[..12];

    let codes: Vec<&str> = [
        decode(&magic).unwrap_err(),
        decode(&dtype).unwrap_err(),
        decode(truncated).unwrap_err(),
        decode(&trailing).unwrap_err(),
    ]
    .iter()
    .map(|e| e.code())
    .collect();
    assert_eq!(codes, ["bad_magic", "unknown_dtype", "truncated", "trailing_bytes"]);
    assert!(matches!(
        decode(truncated).unwrap_err(),
        TensorError::Truncated { section: "payload", expected: 32, found: 29 }
    ));
    assert!(matches!(decode(header_only).unwrap_err(), TensorError::Truncated { section: "ndim", .. }));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.tensor");
    write_tensor_as(&path, DType::F32, &[1], &[1.0]).unwrap();
    let err = read_tensor_as(&path, DType::F64).unwrap_err();
    assert_eq!(err.code(), "dtype_mismatch");
}

#[test]
fn header_is_checked_before_payload() {
    // absurd dims with no payload must fail on the header, not allocate
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"PKTENSOR");
    bytes.push(DType::F64.code());
    bytes.extend_from_slice(&2u64.to_le_bytes());
    bytes.extend_from_slice(&u64::MAX.to_le_bytes());
    bytes.extend_from_slice(&u64::MAX.to_le_bytes());
    let err = decode(&bytes).unwrap_err();
    assert!(matches!(err, TensorError::Header(_)), "{err}");

    let mut zero_ndim = Vec::new();
    zero_ndim.extend_from_slice(b"PKTENSOR");
    zero_ndim.push(DType::F64.code());
    zero_ndim.extend_from_slice(&0u64.to_le_bytes());
    assert_eq!(decode(&zero_ndim).unwrap_err().code(), "bad_header");
}

#[test]
fn invalid_writes_are_rejected() {
    assert!(encode(DType::F64, &[], &[]).is_err());
    assert!(encode(DType::F64, &[3], &[1.0, 2.0]).is_err());
    assert_eq!(encode(DType::F64, &[1], &[f64::NAN]).unwrap_err().code(), "non_finite");
    assert_eq!(encode(DType::F64, &[1], &[f64::INFINITY]).unwrap_err().code(), "non_finite");
}

#[test]
fn zero_sized_dimension_round_trips() {
    let bytes = encode(DType::F64, &[0, 4], &[]).unwrap();
    let t = decode(&bytes).unwrap();
    assert_eq!(t.dims, vec![0, 4]);
    assert!(t.values.is_empty());
}

fn finite_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(-0.0),
        Just(f64::MIN_POSITIVE / 4.0),
        Just(-f64::MIN_POSITIVE / 1024.0),
        Just(f64::MAX),
    ]
}

proptest! {
    #[test]
    fn f64_round_trip_is_bit_exact(
        dims in prop::collection::vec(1usize..5, 1..4),
        seed in prop::collection::vec(finite_f64(), 64),
    ) {
        let n: usize = dims.iter().product();
        let values: Vec<f64> = (0..n).map(|i| seed[i % seed.len()]).collect();
        let t = decode(&encode(DType::F64, &dims, &values).unwrap()).unwrap();
        prop_assert_eq!(&t.dims, &dims);
        let a: Vec<u64> = t.values.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn f32_round_trip_is_bit_exact(values in prop::collection::vec(
        any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..50)
    ) {
        let wide: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let t = decode(&encode(DType::F32, &[values.len()], &wide).unwrap()).unwrap();
        let back: Vec<u32> = t.values.iter().map(|&v| (v as f32).to_bits()).collect();
        let orig: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(back, orig);
    }
}
