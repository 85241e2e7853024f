use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tavit_core::data::*;
use tavit_core::Error;

#[test]
fn bicubic_reproduces_linear_ramps() {
    let [d, h, w] = [8usize, 12, 16];
    let f = |z: f64, y: f64, x: f64| 0.3 + 0.05 * x - 0.02 * y + 0.04 * z;
    let mut v = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                v.push(f(z as f64, y as f64, x as f64));
            }
        }
    }
    let out = bicubic_downsample_raw(&v, [d, h, w]).unwrap();
    let [od, oh, ow] = [d / 2, h / 2, w / 2];
    assert_eq!(out.len(), od * oh * ow);
    let mut checked = 0;
    for z in 1..od - 1 {
        for y in 1..oh - 1 {
            for x in 1..ow - 1 {
                // Output sample i sits halfway between inputs 2i and 2i+1.
                let want = f(2.0 * z as f64 + 0.5, 2.0 * y as f64 + 0.5, 2.0 * x as f64 + 0.5);
                let got = out[(z * oh + y) * ow + x];
                assert!((got - want).abs() <= 1e-6, "({z},{y},{x}): {got} vs {want}");
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn bicubic_extents_and_constants() {
    let (out, ext) = bicubic_downsample(&vec![0.37f32; 2 * 240 * 240], [2, 240, 240]).unwrap();
    assert_eq!(ext, [1, 120, 120]);
    assert!(out.iter().all(|&v| (v - 0.37).abs() < 1e-6));
    assert!(bicubic_downsample(&[0.0; 3 * 4 * 4], [3, 4, 4]).is_err());
    assert!(bicubic_downsample(&[0.0; 5], [2, 2, 2]).is_err());
}

#[test]
fn label_downsampling_takes_the_mode() {
    // One 2×2×2 block: four 2s and four 3s tie, the larger label wins.
    let (out, ext) = downsample_labels(&[2, 3, 2, 3, 3, 2, 3, 2], [2, 2, 2]).unwrap();
    assert_eq!((out, ext), (vec![3], [1, 1, 1]));
    let (out, _) = downsample_labels(&[0, 0, 0, 0, 0, 4, 4, 4], [2, 2, 2]).unwrap();
    assert_eq!(out, vec![0]);
}

#[test]
fn phantoms_are_deterministic() {
    let cfg = PhantomConfig {
        size: 32,
        depth: 8,
        tumor_probability: 1.0,
    };
    let a = generate_phantom(11, &cfg).unwrap();
    let b = generate_phantom(11, &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_phantom(12, &cfg).unwrap());
    assert_eq!(a.extents, [8, 32, 32]);
    for v in [&a.t1w, &a.flair, &a.t1c] {
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}

#[test]
fn enhancing_tumor_brightens_in_t1c() {
    let cfg = PhantomConfig {
        size: 32,
        depth: 16,
        tumor_probability: 1.0,
    };
    let mut seen = 0;
    for seed in 0..4 {
        let p = generate_phantom(seed, &cfg).unwrap();
        assert!(p.has_tumor);
        let idx: Vec<usize> = (0..p.labels.len())
            .filter(|&i| p.labels[i] == LABEL_ENHANCING)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let mean = |v: &[f32]| idx.iter().map(|&i| v[i] as f64).sum::<f64>() / idx.len() as f64;
        assert!(mean(&p.t1c) > mean(&p.t1w), "seed {seed}");
        seen += 1;
    }
    assert!(seen > 0);
}

#[test]
fn tumor_free_phantom_has_no_tumor_labels() {
    let cfg = PhantomConfig {
        size: 32,
        depth: 8,
        tumor_probability: 0.0,
    };
    let p = generate_phantom(5, &cfg).unwrap();
    assert!(!p.has_tumor);
    assert!(p.labels.iter().all(|&l| !is_tumor(l)));
    assert!(p.labels.contains(&LABEL_BRAIN));
}

#[test]
fn t1c_rule_values() {
    assert_eq!(t1c_rule(0.3, 0.9, LABEL_BACKGROUND), 0.3);
    assert!((t1c_rule(0.5, 0.5, LABEL_BRAIN) - 0.6).abs() < 1e-12);
    assert!((t1c_rule(0.5, 0.5, LABEL_ENHANCING) - 1.0).abs() < 1e-12);
    assert!((t1c_rule(0.5, 0.5, LABEL_NECROTIC) - 0.3).abs() < 1e-12);
    assert!((t1c_rule(0.5, 0.5, LABEL_EDEMA) - 0.7).abs() < 1e-12);
}

#[test]
fn segmentation_encoding() {
    let labels: Vec<u8> = (0..=4).collect();
    assert_eq!(seg_decode(&seg_encode(&labels).unwrap()), labels);
    assert_eq!(seg_decode_value(0.4), LABEL_EDEMA);
    assert_eq!(seg_decode_value(-1.0), LABEL_BACKGROUND);
    assert_eq!(seg_decode_value(-7.0), LABEL_BACKGROUND);
    assert_eq!(seg_decode_value(3.0), LABEL_ENHANCING);
    assert!(seg_encode(&[5]).is_err());
}

#[test]
fn double_flip_is_identity() {
    let mut v: Vec<f32> = (0..12).map(|i| i as f32).collect();
    let orig = v.clone();
    flip_rows(&mut v, 4);
    assert_eq!(&v[..4], &[3.0, 2.0, 1.0, 0.0]);
    flip_rows(&mut v, 4);
    assert_eq!(v, orig);
}

fn sample(rng: &mut ChaCha8Rng, w: usize) -> Sample {
    let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
    Sample {
        input: v(2 * w * w),
        target: v(w * w),
        seg: v(w * w),
        latent: Some(v(3 * (w / 2) * (w / 2))),
        width: w,
        latent_width: w / 2,
    }
}

proptest! {
    #[test]
    fn flips_are_joint(seed in any::<u64>(), w in 2usize..6) {
        let w = 2 * w;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let orig = sample(&mut r, w);
        let mut s = orig.clone();
        let flipped = augment_flip(&mut s, &mut r);
        let mut expect = orig.clone();
        if flipped {
            flip_rows(&mut expect.input, w);
            flip_rows(&mut expect.target, w);
            flip_rows(&mut expect.seg, w);
            flip_rows(expect.latent.as_mut().unwrap(), w / 2);
        }
        prop_assert_eq!(s, expect);
    }

    #[test]
    fn splits_partition_ids(n in 3usize..80, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("P{i:03}")).collect();
        let s = split_patients(&ids, [0.75, 0.125, 0.125], seed).unwrap();
        let mut all: Vec<String> = Split::ALL.iter().flat_map(|&x| s.get(x).to_vec()).collect();
        all.sort();
        prop_assert_eq!(all, ids);
    }

    #[test]
    fn volume_round_trip(extents in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = extents.iter().product();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let f = VolumeFile {
            extents: extents.clone(),
            data: VolumeData::Intensity((0..n).map(|_| f32::from_bits(r.gen::<u32>() & 0x7f7f_ffff)).collect()),
        };
        let bytes = f.to_bytes().unwrap();
        let back = VolumeFile::from_bytes(&bytes, Path::new("p.tav")).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back, f);
    }
}

#[test]
fn flip_pattern_is_seeded() {
    let pattern = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let base = sample(&mut ChaCha8Rng::seed_from_u64(0), 4);
        (0..32)
            .map(|_| augment_flip(&mut base.clone(), &mut r))
            .collect::<Vec<_>>()
    };
    assert_eq!(pattern(3), pattern(3));
    assert_ne!(pattern(3), pattern(4));
}

#[test]
fn apportionment() {
    let large = [400.0 / 501.0, 50.0 / 501.0, 51.0 / 501.0];
    assert_eq!(apportion(501, &large).unwrap(), vec![400, 50, 51]);
    assert_eq!(apportion(10, &[0.8, 0.1, 0.1]).unwrap(), vec![8, 1, 1]);
    // 64 × (0.75, 0.125, 0.125) is exact.
    assert_eq!(apportion(64, &[0.75, 0.125, 0.125]).unwrap(), vec![48, 8, 8]);
    // Remainders 0.5, 0.5, 0: the tie goes to the earlier fraction.
    assert_eq!(apportion(3, &[0.5, 0.5, 0.0]).unwrap(), vec![2, 1, 0]);
    assert!(apportion(10, &[0.5, 0.2, 0.2]).is_err());
}

#[test]
fn split_contracts() {
    let ids: Vec<String> = (0..10).map(|i| format!("P{i:03}")).collect();
    let a = split_patients(&ids, [0.8, 0.1, 0.1], 7).unwrap();
    assert_eq!(a, split_patients(&ids, [0.8, 0.1, 0.1], 7).unwrap());
    assert_eq!((a.train.len(), a.val.len(), a.test.len()), (8, 1, 1));
    assert!(split_patients(&ids[..2], [0.8, 0.1, 0.1], 7).is_err());
    let mut dup = ids.clone();
    dup[1] = dup[0].clone();
    assert!(split_patients(&dup, [0.8, 0.1, 0.1], 7).is_err());
}

#[test]
fn volume_files_reject_damage() {
    let f = VolumeFile {
        extents: vec![2, 3, 4],
        data: VolumeData::Labels((0..24).map(|i| (i % 5) as u8).collect()),
    };
    let bytes = f.to_bytes().unwrap();
    let p = Path::new("v.tav");
    assert_eq!(VolumeFile::from_bytes(&bytes, p).unwrap(), f);

    let mut bad = bytes.clone();
    bad[1] = b'?';
    assert!(matches!(VolumeFile::from_bytes(&bad, p), Err(Error::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(
        VolumeFile::from_bytes(&bad, p),
        Err(Error::UnsupportedVersion { found: 2, .. })
    ));
    for cut in [0, 5, 9, 14, bytes.len() - 1] {
        assert!(
            matches!(VolumeFile::from_bytes(&bytes[..cut], p), Err(Error::Truncated { .. })),
            "cut {cut}"
        );
    }
    let mut bad = bytes.clone();
    bad[20] ^= 1;
    assert!(matches!(
        VolumeFile::from_bytes(&bad, p),
        Err(Error::ChecksumMismatch { .. })
    ));

    // Header claiming 2^32-1 cubed voxels.
    let mut huge = b"TAV1".to_vec();
    huge.extend_from_slice(&1u16.to_le_bytes());
    huge.extend_from_slice(&[0, 3]);
    for _ in 0..3 {
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
    }
    assert!(matches!(
        VolumeFile::from_bytes(&huge, p),
        Err(Error::ExtentOverflow { .. } | Error::Truncated { .. })
    ));

    let zero = VolumeFile {
        extents: vec![2, 0, 4],
        data: VolumeData::Intensity(vec![]),
    };
    assert!(matches!(zero.to_bytes(), Err(Error::ZeroExtent(_))));
}

#[test]
fn volume_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = Volume::new(
        "P001",
        Modality::Flair,
        [2, 2, 3],
        (0..12).map(|i| i as f32 / 11.0).collect(),
    )
    .unwrap();
    let path = dir.path().join("v.tav");
    write_volume(&path, &v.to_file()).unwrap();
    let back = Volume::from_file(read_volume(&path).unwrap(), "P001", Modality::Flair).unwrap();
    assert_eq!(back, v);
    let seg = SegMap::new("P001", [1, 2, 2], vec![0, 1, 3, 4]).unwrap();
    assert!(Volume::from_file(seg.to_file(), "P001", Modality::T1w).is_err());
    assert!(SegMap::new("P001", [1, 1, 1], vec![5]).is_err());
}

fn small_dataset(dir: &Path) -> u64 {
    generate_dataset(
        dir,
        &GenConfig {
            patients: 6,
            image_size: 16,
            depth: 5,
            seed: 3,
            fractions: [0.5, 0.25, 0.25],
            tumor_probability: 0.9,
        },
    )
    .unwrap()
}

#[test]
fn dataset_generation_and_loading() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let h = small_dataset(a.path());
    assert_eq!(h, small_dataset(b.path()));
    assert_eq!(h, dataset_hash(a.path()).unwrap());
    let ds = Dataset::load(a.path()).unwrap();
    assert_eq!(ds.patients.len(), 6);
    assert_eq!((ds.image_size(), ds.depth()), (16, 5));
    let sizes: Vec<usize> = Split::ALL.iter().map(|&s| ds.split(s).len()).collect();
    assert_eq!(sizes, vec![3, 2, 1]);
    assert!(matches!(
        Dataset::load(&a.path().join("missing")),
        Err(Error::MissingPrerequisite(_))
    ));
}

#[test]
fn slice_batches() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let ds = Dataset::load(dir.path()).unwrap();
    let train = ds.split(Split::Train);
    let set = SliceSet::new(train.clone(), Stage::Segmentation, None).unwrap();
    assert_eq!(set.len(), 15);
    let sizes: Vec<usize> = set.batches(4).unwrap().map(|b| b.unwrap().keys.len()).collect();
    assert_eq!(sizes, vec![4, 4, 4, 3]);
    let b = set.batches(32).unwrap().next().unwrap().unwrap();
    assert_eq!(b.input.shape(), &[15, 2, 16, 16]);
    assert_eq!(b.target.data(), b.seg.data());

    let stage = Stage::Synthesis(Variant::TavitT1wFlair);
    assert!(matches!(
        SliceSet::new(train.clone(), stage, None),
        Err(Error::MissingPrerequisite(_))
    ));
    let lat: Vec<Vec<f32>> = train.iter().map(|p| vec![p.id.len() as f32; 5 * 3 * 4 * 4]).collect();
    let set = SliceSet::new(train.clone(), stage, Some((lat, [3, 4, 4]))).unwrap();
    let b = set.batch::<ChaCha8Rng>(&[0, 7], None).unwrap();
    assert_eq!(b.latent.unwrap().shape(), &[2, 3, 4, 4]);
    assert_eq!(b.keys, vec![(0, 0), (1, 2)]);

    let even = SliceSet::new(train, Stage::Latent, None).unwrap().keep_even(2).unwrap();
    assert_eq!(even.index(), &[(0, 1), (0, 3), (1, 1), (1, 3), (2, 1), (2, 3)]);
}

#[test]
fn latent_sources_follow_splits() {
    assert_eq!(LatentSource::for_split(Split::Train), LatentSource::GroundTruth);
    assert_eq!(LatentSource::for_split(Split::Val), LatentSource::GroundTruth);
    assert_eq!(LatentSource::for_split(Split::Test), LatentSource::Predicted);
    let dir = tempfile::tempdir().unwrap();
    write_latents(dir.path(), "P000", [2, 1, 2, 2], (0..8).map(|i| i as f32).collect()).unwrap();
    let (ext, v) = read_latents(dir.path(), "P000").unwrap();
    assert_eq!(ext, [2, 1, 2, 2]);
    assert_eq!(v[7], 7.0);
    assert!(matches!(
        read_latents(dir.path(), "P001"),
        Err(Error::MissingPrerequisite(_))
    ));
}
