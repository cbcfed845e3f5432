//! Binary container round trips, corruption detection and an independent
//! writer for the weight format.

use inn_core::data::{DataError, Volume};
use inn_core::tensor::Tensor;
use inn_core::zoo::{random_init, BackboneConfig, Family};
use inn_core::{WeightStore, WeightsError};
use proptest::prelude::*;

/// Bitwise CRC-32 (IEEE, reflected), written without lookup tables.
fn crc32_reference(bytes: &[u8]) -> u32 {
    let mut crc = 0xffff_ffffu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ 0xedb8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

enum Payload<'a> {
    F32(&'a [f32]),
    F64(&'a [f64]),
}

/// Minimal second writer: header, records, trailing checksum.
fn write_reference(records: &[(&str, &[usize], Payload)]) -> Vec<u8> {
    let mut out = b"INNW".to_vec();
    out.extend(1u32.to_le_bytes());
    out.extend((records.len() as u32).to_le_bytes());
    for (name, dims, payload) in records {
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(match payload {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
        });
        out.push(dims.len() as u8);
        for &d in *dims {
            out.extend((d as u32).to_le_bytes());
        }
        match payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
        }
    }
    let crc = crc32_reference(&out);
    out.extend(crc.to_le_bytes());
    out
}

/// Header, per-record overhead and payload, plus the checksum.
fn expected_size(store: &WeightStore) -> usize {
    let records: usize = store
        .iter()
        .map(|(name, t)| {
            let elem = match t {
                inn_core::tensor::DynTensor::F32(_) => 4,
                inn_core::tensor::DynTensor::F64(_) => 8,
            };
            2 + name.len() + 2 + 4 * t.dims().len() + elem * t.len()
        })
        .sum();
    12 + records + 4
}

#[test]
fn independent_writer_loads_identically() {
    let a: Vec<f32> = (0..24).map(|i| i as f32 * 0.25 - 3.0).collect();
    let b = [f64::MIN_POSITIVE, -0.0, 1e300, std::f64::consts::PI];
    let bytes = write_reference(&[
        ("stem.conv.kernel", &[2, 3, 2, 2], Payload::F32(&a)),
        ("stats", &[4], Payload::F64(&b)),
        ("scalar", &[1], Payload::F32(&[7.5])),
    ]);
    let store = WeightStore::from_bytes(&bytes).unwrap();
    let names: Vec<&str> = store.names().collect();
    assert_eq!(names, ["stem.conv.kernel", "stats", "scalar"]);
    let ta = store.get_as::<f32>("stem.conv.kernel").unwrap();
    assert_eq!(ta.dims(), [2, 3, 2, 2]);
    assert_eq!(ta.data(), a.as_slice());
    let tb = store.get_as::<f64>("stats").unwrap();
    assert!(tb.data().iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(store.to_bytes(), bytes);
}

#[test]
fn full_inception_store_size_matches_formula() {
    let g = BackboneConfig::full(Family::InceptionV3, 3).build().unwrap();
    let store = random_init(&g, 0).unwrap();
    let bytes = store.to_bytes();
    assert_eq!(bytes.len(), expected_size(&store));
    let tail = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    assert_eq!(tail, crc32_reference(&bytes[..bytes.len() - 4]));
    assert_eq!(store.to_bytes(), bytes, "saving twice gives identical bytes");
}

#[test]
fn truncation_and_header_errors_are_distinct_and_located() {
    let mut store = WeightStore::new();
    store.insert("w", Tensor::<f32>::full(&[3], 1.0).unwrap()).unwrap();
    let bytes = store.to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(WeightStore::from_bytes(&bad), Err(WeightsError::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(WeightStore::from_bytes(&bad), Err(WeightsError::UnsupportedVersion(2))));
    let e = WeightStore::from_bytes(&bytes[..10]).unwrap_err();
    assert!(matches!(e, WeightsError::Truncated { .. }), "{e}");
    assert!(e.to_string().contains("offset"), "{e}");
    let e = WeightStore::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
    assert!(e.to_string().contains("offset") || e.to_string().contains("bytes 0.."), "{e}");
}

fn store_strategy() -> impl Strategy<Value = WeightStore> {
    let tensor = (
        prop::collection::vec(1usize..4, 1..5),
        any::<bool>(),
        any::<u64>(),
    );
    prop::collection::vec(tensor, 0..5).prop_map(|specs| {
        let mut store = WeightStore::new();
        for (i, (dims, wide, seed)) in specs.into_iter().enumerate() {
            let t = Tensor::<f64>::random_uniform(&dims, -1e3, 1e3, seed).unwrap();
            let name = format!("layer{i}.ä{seed:x}");
            if wide {
                store.insert(name, t).unwrap();
            } else {
                store.insert(name, t.cast::<f32>()).unwrap();
            }
        }
        store
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weights_round_trip_bitwise(store in store_strategy()) {
        let bytes = store.to_bytes();
        let back = WeightStore::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        for ((n1, t1), (n2, t2)) in store.iter().zip(back.iter()) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(t1.dims(), t2.dims());
            let bits = |t: &inn_core::tensor::DynTensor| -> Vec<u64> {
                t.to_f64_vec().iter().map(|v| v.to_bits()).collect()
            };
            prop_assert_eq!(t1.dtype(), t2.dtype());
            prop_assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn any_single_byte_flip_is_rejected(
        store in store_strategy(),
        pos in any::<prop::sample::Index>(),
        mask in 1u8..=255,
    ) {
        let mut bytes = store.to_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= mask;
        let e = WeightStore::from_bytes(&bytes);
        prop_assert!(e.is_err(), "flip at byte {} accepted", i);
        let msg = e.unwrap_err().to_string();
        prop_assert!(msg.contains("offset") || msg.contains("bytes 0.."), "{}", msg);
    }

    #[test]
    fn volume_round_trip_bitwise(
        d in 1usize..6, h in 1usize..33, w in 1usize..33,
        spacing in prop::array::uniform3(0.1f32..5.0),
        seed in any::<u64>(),
    ) {
        let data = Tensor::<f32>::random_uniform(&[d * h * w], -1e4, 1e4, seed).unwrap().into_data();
        let v = Volume::new([d, h, w], spacing, data).unwrap();
        let bytes = v.to_bytes();
        let back = Volume::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, v);
    }

    #[test]
    fn truncated_volume_names_offset(d in 1usize..4, h in 1usize..9, cut in any::<prop::sample::Index>()) {
        let v = Volume::new([d, h, h], [1.0; 3], vec![0.5; d * h * h]).unwrap();
        let bytes = v.to_bytes();
        let n = cut.index(bytes.len());
        let e = Volume::from_bytes(&bytes[..n]).unwrap_err();
        let is_truncated = matches!(e, DataError::Truncated { .. });
        prop_assert!(is_truncated, "{}", e);
        prop_assert!(e.to_string().contains("offset"), "{}", e);
    }
}

#[test]
fn random_volume_5x32x32_round_trips() {
    let data = Tensor::<f32>::random_uniform(&[5 * 32 * 32], 0.0, 1.0, 11).unwrap().into_data();
    let v = Volume::new([5, 32, 32], [3.0, 0.8, 0.8], data).unwrap();
    assert_eq!(Volume::from_bytes(&v.to_bytes()).unwrap(), v);
}

#[test]
fn corrupted_volume_headers_are_rejected() {
    let v = Volume::new([2, 3, 3], [1.0; 3], vec![0.0; 18]).unwrap();
    let bytes = v.to_bytes();
    let mut bad = bytes.clone();
    bad[1] = b'?';
    assert!(matches!(Volume::from_bytes(&bad), Err(DataError::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Volume::from_bytes(&bad), Err(DataError::UnsupportedVersion(9))));
    let mut bad = bytes.clone();
    bad[8..12].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(Volume::from_bytes(&bad), Err(DataError::InvalidVolume(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(Volume::from_bytes(&long).is_err());
}
