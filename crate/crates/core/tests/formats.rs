use sha2::{Digest, Sha256};
use symcorr::correlation::TokenMatrix;
use symcorr::lab::files::{read_episode, write_episode, EpisodeDir};
use symcorr::lab::fts::{decode_stack, encode_stack};
use symcorr::lab::pgm::{decode_mask, encode_mask};
use symcorr::lab::synth::{synth_pool, PoolSpec};
use symcorr::segmenter::{FeatureProvider, LayerStack};
use symcorr::tensor::Matrix;

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Two layers whose values exercise sign, exponent and mantissa bits.
fn pinned_stack() -> LayerStack {
    let layer = |n: usize, d: usize, offset: usize| {
        let m = Matrix::from_fn(n, d, |r, c| {
            let i = (offset + r * d + c) as i32;
            f64::from((i as f32 - 7.5) * 2f32.powi(i % 9 - 4))
        });
        TokenMatrix::new(m).unwrap()
    };
    LayerStack::new(vec![layer(1, 3, 0), layer(4, 3, 3)]).unwrap()
}

#[test]
fn feature_bytes_are_pinned() {
    let bytes = encode_stack(&pinned_stack()).unwrap();
    // magic, little-endian u32 layer count, then per-layer u32 rows and cols
    assert_eq!(&bytes[..8], b"FTS1\x02\x00\x00\x00");
    assert_eq!(&bytes[8..16], &[1, 0, 0, 0, 3, 0, 0, 0]);
    assert_eq!(bytes.len(), 8 + 2 * 8 + 15 * 4);
    // first value: -7.5 * 2^-4 as a little-endian f32
    assert_eq!(&bytes[24..28], &(-0.46875f32).to_le_bytes());
    assert_eq!(hex(&bytes), FEATURE_DIGEST);
    assert_eq!(decode_stack(&bytes).unwrap(), pinned_stack());
}

const FEATURE_DIGEST: &str = "f8d4e6ad19ef579a30e416a7c3af5cee103a45f66d691c8fd46eae7a56607087";

#[test]
fn synthetic_episodes_are_byte_identical_across_runs() {
    let spec = PoolSpec {
        seed: 11,
        ..PoolSpec::small()
    };
    let digest = |e: &symcorr::segmenter::Episode| {
        let mut h = Sha256::new();
        h.update(encode_stack(&e.query).unwrap());
        h.update(encode_mask(&e.query_truth).unwrap());
        for s in &e.supports {
            h.update(s.id.to_le_bytes());
            h.update(encode_stack(&s.layers).unwrap());
            h.update(encode_mask(&s.mask).unwrap());
        }
        h.finalize()
    };
    let a = synth_pool(&spec).unwrap();
    let b = synth_pool(&spec).unwrap();
    assert_eq!(digest(&a), digest(&b));
    let c = synth_pool(&PoolSpec { seed: 12, ..spec }).unwrap();
    assert_ne!(digest(&a), digest(&c));
}

#[test]
fn episode_directory_round_trip() {
    let e = synth_pool(&PoolSpec {
        seed: 4,
        n_high: 2,
        n_low: 3,
        ..PoolSpec::small()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_episode(dir.path(), &e).unwrap();
    assert_eq!(read_episode(dir.path()).unwrap(), e);
    assert_eq!(EpisodeDir(dir.path().to_path_buf()).episode().unwrap(), e);
    assert_eq!(
        decode_mask(&encode_mask(&e.query_truth).unwrap()).unwrap(),
        e.query_truth
    );
}
