use avtta::data::*;
use avtta::model::VideoClip;
use avtta::tensor::Tensor;
use avtta::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec() -> DatasetSpec {
    DatasetSpec { num_classes: 4, train_per_class: 3, test_per_class: 2, ..DatasetSpec::default() }
}

fn random_clip(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> VideoClip {
    let data = (0..32 * 8 * 8 * 3).map(|_| rng.random_range(lo..hi)).collect();
    VideoClip::new(Tensor::new(vec![32, 8, 8, 3], data).unwrap(), "x", Some(0)).unwrap()
}

#[test]
fn save_load_is_bitwise() {
    let ds = gen_dataset(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
    for (a, b) in ds.test.iter().zip(&back.test) {
        let bits = |c: &VideoClip| c.frames.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn fixed_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_dataset(&gen_dataset(&small_spec()).unwrap(), a.path()).unwrap();
    save_dataset(&gen_dataset(&small_spec()).unwrap(), b.path()).unwrap();
    for f in ["manifest.json", "train.bin", "test.bin", "audio.jsonl"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn truncated_payload_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&gen_dataset(&small_spec()).unwrap(), dir.path()).unwrap();
    let path = dir.path().join("test.bin");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Integrity(_))));
}

#[test]
fn flipped_byte_is_a_checksum_error() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&gen_dataset(&small_spec()).unwrap(), dir.path()).unwrap();
    let path = dir.path().join("train.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Integrity(m)) => assert!(m.contains("checksum"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn manifest_dims_mismatch_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&gen_dataset(&small_spec()).unwrap(), dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    m["spec"]["clip"]["h"] = serde_json::json!(4);
    std::fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Integrity(_))));
}

#[test]
fn pepper_severity_five_zeroes_six_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let clip = random_clip(&mut rng, 0.2, 0.8);
    let spec = CorruptionSpec::new(CorruptionKind::Pepper, 5).unwrap();
    let out = corrupt(&clip, spec, &mut rng).unwrap();
    let zeros = out.frames.data().iter().filter(|&&v| v == 0.0).count() as f64 / out.frames.len() as f64;
    assert!(zeros >= 0.06, "{zeros}");
}

#[test]
fn contrast_shrinks_channel_variance_by_c_squared() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let clip = random_clip(&mut rng, 0.3, 0.7);
    let spec = CorruptionSpec::new(CorruptionKind::Contrast, 5).unwrap();
    let c = severity_param(spec).unwrap();
    let out = corrupt(&clip, spec, &mut rng).unwrap();
    let var = |t: &Tensor, ch: usize| {
        let xs: Vec<f64> = t.data().iter().skip(ch).step_by(3).copied().collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
    };
    for ch in 0..3 {
        let ratio = var(&out.frames, ch) / var(&clip.frames, ch);
        assert!((ratio / (c * c) - 1.0).abs() < 0.05, "channel {ch}: {ratio}");
    }
}

#[test]
fn deviation_grows_with_severity() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let clips: Vec<VideoClip> = (0..100)
        .map(|_| {
            let data = (0..16 * 4 * 4 * 3).map(|_| rng.random_range(0.1..0.9)).collect();
            VideoClip::new(Tensor::new(vec![16, 4, 4, 3], data).unwrap(), "x", Some(0)).unwrap()
        })
        .collect();
    let kinds = [CorruptionKind::Gaussian, CorruptionKind::Shot, CorruptionKind::Impulse, CorruptionKind::Salt, CorruptionKind::Pepper];
    for kind in kinds {
        let mut prev = 0.0;
        for sev in 1..=5 {
            let spec = CorruptionSpec::new(kind, sev).unwrap();
            let out = corrupt_stream(&clips, spec, 99).unwrap();
            let l1: f64 = clips
                .iter()
                .zip(&out)
                .map(|(a, b)| a.frames.data().iter().zip(b.frames.data()).map(|(x, y)| (x - y).abs()).sum::<f64>())
                .sum::<f64>()
                / clips.len() as f64;
            assert!(l1 > prev, "{kind} severity {sev}: {l1} <= {prev}");
            prev = l1;
        }
    }
}

#[test]
fn corruption_is_deterministic_and_in_range() {
    let ds = gen_dataset(&small_spec()).unwrap();
    for kind in CorruptionKind::ALL {
        let spec = CorruptionSpec::new(kind, 5).unwrap();
        let a = corrupt_stream(&ds.test, spec, 5).unwrap();
        assert_eq!(a, corrupt_stream(&ds.test, spec, 5).unwrap());
        for (x, y) in a.iter().zip(&ds.test) {
            assert_eq!(x.frames.shape(), y.frames.shape());
            assert!(x.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
