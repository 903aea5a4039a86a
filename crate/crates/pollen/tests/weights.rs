use std::path::Path;

use pollen::weights::{decode_weights, encode_weights, load_weights, save_weights, MAGIC};
use pollen::Error;
use pollen_core::embed::{VitConfig, VitWeights};
use pollen_core::prep::NormalizedCrop;

fn crop(side: usize) -> NormalizedCrop {
    let t = (0..3 * side * side).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
    NormalizedCrop::new(side, t).unwrap()
}

#[test]
fn round_trip_preserves_every_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let w = VitWeights::seeded(VitConfig::tiny(), 42).unwrap();
    let path = dir.path().join("tiny.avit");
    save_weights(&w, &path).unwrap();
    let back = load_weights(&path).unwrap();
    assert_eq!(back.config, w.config);
    assert_eq!(back.tensors(), w.tensors());
    let c = crop(42);
    assert_eq!(back.forward(&c, false).unwrap().0, w.forward(&c, false).unwrap().0);
}

#[test]
fn layout_is_magic_config_tensors_crc() {
    let w = VitWeights::seeded(VitConfig::tiny(), 1).unwrap();
    let bytes = encode_weights(&w);
    assert_eq!(&bytes[..5], MAGIC);
    let field = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap());
    let c = VitConfig::tiny();
    assert_eq!(field(0) as usize, c.image_size);
    assert_eq!(field(7) as usize, c.proj_dims.len());
    let floats: usize = w.tensors().iter().map(|t| t.len()).sum();
    assert_eq!(bytes.len(), 5 + 4 * (8 + c.proj_dims.len()) + 4 * floats + 4);
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    assert_eq!(crc, crc32fast::hash(&bytes[..bytes.len() - 4]));
}

#[test]
fn corruption_is_detected() {
    let w = VitWeights::seeded(VitConfig::tiny(), 3).unwrap();
    let good = encode_weights(&w);
    let p = Path::new("w.avit");

    let mut flipped = good.clone();
    flipped[100] ^= 0x01;
    assert!(matches!(decode_weights(p, &flipped), Err(Error::Format { .. })));

    let truncated = &good[..good.len() - 9];
    assert!(matches!(decode_weights(p, truncated), Err(Error::Format { .. })));

    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(decode_weights(p, &magic), Err(Error::Format { .. })));
}

#[test]
fn mismatched_tensor_block_is_a_format_error() {
    let w = VitWeights::seeded(VitConfig::tiny(), 3).unwrap();
    let mut bytes = encode_weights(&w);
    bytes.truncate(bytes.len() - 4);
    bytes.extend_from_slice(&[0; 4]);
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    match decode_weights(Path::new("w.avit"), &bytes) {
        Err(Error::Format { message, .. }) => assert!(message.contains("config implies")),
        other => panic!("{other:?}"),
    }
}
