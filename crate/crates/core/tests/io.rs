use std::fs;
use std::path::Path;

use proptest::prelude::*;

use scenetok::harness::{generate_scene, SceneSpec};
use scenetok::io::{
    decode_blob, decode_pack, encode_blob, encode_pack, read_checkpoint, read_scene_bundle, read_tokens,
    write_checkpoint, write_scene_bundle, write_tokens, Tensor, TensorData,
};
use scenetok::model::{FusionConfig, PipelineConfig};
use scenetok::pipeline::{fuse, tokenize};
use scenetok::{Error, FormatError};

fn small_spec() -> SceneSpec {
    SceneSpec {
        agents: 3,
        clutter: 2,
        area_m: 40.0,
        frames: 3,
        ..SceneSpec::default()
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn blob_header_layout() {
    let t = Tensor::new(&[2, 1], TensorData::U32(vec![7, 0x0102_0304]));
    let bytes = encode_blob(&t);
    let mut expected = b"MOST".to_vec();
    expected.extend_from_slice(&1u16.to_le_bytes());
    expected.extend_from_slice(&[2, 2]);
    expected.extend_from_slice(&2u64.to_le_bytes());
    expected.extend_from_slice(&1u64.to_le_bytes());
    expected.extend_from_slice(&[7, 0, 0, 0, 4, 3, 2, 1]);
    assert_eq!(bytes, expected);
}

#[test]
fn bundle_round_trip_is_lossless_and_byte_stable() {
    let scene = generate_scene(4, &small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    write_scene_bundle(&a, &scene.bundle).unwrap();
    let back = read_scene_bundle(&a).unwrap();
    assert_eq!(back, scene.bundle);
    write_scene_bundle(&b, &back).unwrap();
    assert_eq!(files(&a), files(&b));
}

#[test]
fn missing_entry_is_reported() {
    let scene = generate_scene(5, &small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_scene_bundle(dir.path(), &scene.bundle).unwrap();
    fs::remove_file(dir.path().join("points_0001.most")).unwrap();
    match read_scene_bundle(dir.path()) {
        Err(Error::Format(e @ FormatError::ManifestMissingEntry { .. })) => assert!(e.is_io()),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn truncated_blob_is_a_header_mismatch() {
    let scene = generate_scene(6, &small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_scene_bundle(dir.path(), &scene.bundle).unwrap();
    let path = dir.path().join("points_0002.most");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    match read_scene_bundle(dir.path()) {
        Err(Error::Format(e @ FormatError::ShapeHeaderMismatch { .. })) => assert!(!e.is_io()),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn foreign_magic_and_future_version_are_rejected() {
    let mut bytes = encode_blob(&Tensor::new(&[1], TensorData::U8(vec![1])));
    bytes[6] = 9;
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    assert!(matches!(decode_blob(Path::new("x"), &bad), Err(FormatError::BadMagic { .. })));
    bytes[4] = 2;
    assert!(matches!(
        decode_blob(Path::new("x"), &bytes),
        Err(FormatError::VersionUnsupported { found: 2, .. })
    ));
}

#[test]
fn tokens_and_checkpoint_round_trip() {
    let spec = small_spec();
    let scene = generate_scene(7, &spec).unwrap();
    let config = PipelineConfig {
        frames: spec.frames,
        feature_dim: spec.feature_dim,
        fusion: FusionConfig {
            hidden: 8,
            ..FusionConfig::default()
        },
        ..PipelineConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("params.most");
    write_checkpoint(&ckpt, &scenetok::pipeline::default_params(&config)).unwrap();
    let params = read_checkpoint::<f32>(&ckpt).unwrap();
    assert_eq!(params, scenetok::pipeline::default_params(&config));

    let tokens = fuse(&tokenize(&scene.bundle, &config).unwrap(), &params).unwrap();
    let path = dir.path().join("scene.tokens");
    write_tokens(&path, &tokens).unwrap();
    assert_eq!(read_tokens(&path).unwrap(), tokens);
}

fn tensor() -> impl Strategy<Value = Tensor> {
    let dims = prop::collection::vec(0usize..4, 0..4);
    dims.prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        let data = prop_oneof![
            prop::collection::vec(any::<u8>(), n).prop_map(TensorData::U8),
            prop::collection::vec(any::<u32>(), n).prop_map(TensorData::U32),
            prop::collection::vec(-1e6f32..1e6, n).prop_map(TensorData::F32),
            prop::collection::vec(-1e12f64..1e12, n).prop_map(TensorData::F64),
        ];
        data.prop_map(move |d| Tensor::new(&dims, d))
    })
}

proptest! {
    #[test]
    fn blob_round_trip(t in tensor()) {
        let bytes = encode_blob(&t);
        prop_assert_eq!(decode_blob(Path::new("t"), &bytes).unwrap(), t);
    }

    #[test]
    fn pack_round_trip(entries in prop::collection::vec(("[a-z_.]{1,12}", tensor()), 0..5)) {
        let bytes = encode_pack(&entries);
        prop_assert_eq!(decode_pack(Path::new("p"), &bytes).unwrap(), entries);
    }

    #[test]
    fn every_truncation_is_rejected(t in tensor(), cut in 0.0f64..1.0) {
        let bytes = encode_blob(&t);
        let keep = (cut * bytes.len() as f64) as usize;
        prop_assert!(decode_blob(Path::new("t"), &bytes[..keep]).is_err());
    }
}
