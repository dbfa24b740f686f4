use proptest::prelude::*;
use rtda::data::{
    generate_scene, sample_from_rasters, sample_to_rasters, BatchIter, Domain, DomainSplit, Raster, SceneSample,
    ShiftConfig,
};

fn scene(seed: u64, domain: Domain) -> SceneSample {
    generate_scene(seed, domain, &ShiftConfig::new(5), 64, 64, 5).unwrap()
}

fn channel_means(s: &SceneSample) -> [f64; 3] {
    let plane = s.height * s.width;
    let d = s.image.data();
    let mut m = [0.0; 3];
    for (c, v) in m.iter_mut().enumerate() {
        *v = d[c * plane..(c + 1) * plane].iter().map(|&x| x as f64).sum::<f64>() / plane as f64;
    }
    m
}

#[test]
fn generation_is_deterministic() {
    for domain in [Domain::Source, Domain::Target] {
        let a = scene(42, domain);
        let b = scene(42, domain);
        assert_eq!(a, b);
        let bits = |s: &SceneSample| s.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
    assert_ne!(scene(1, Domain::Source).labels, scene(2, Domain::Source).labels);
}

#[test]
fn domains_share_geometry_but_not_appearance() {
    for seed in 0..20 {
        let s = scene(seed, Domain::Source);
        let t = scene(seed, Domain::Target);
        assert_eq!(s.labels, t.labels);
        assert_ne!(s.image, t.image);
    }
}

#[test]
fn identity_shift_matches_source_statistics() {
    let cfg = ShiftConfig::identity(5, 0.05);
    let mut total = 0.0;
    for seed in 0..100 {
        let s = generate_scene(seed, Domain::Source, &cfg, 64, 64, 5).unwrap();
        let t = generate_scene(seed, Domain::Target, &cfg, 64, 64, 5).unwrap();
        let (ms, mt) = (channel_means(&s), channel_means(&t));
        total += (0..3).map(|c| (ms[c] - mt[c]).abs()).sum::<f64>() / 3.0;
    }
    let mean_diff = total / 100.0;
    assert!(mean_diff < 0.01, "{mean_diff}");
}

#[test]
fn default_shift_moves_target_colours() {
    let mut total = 0.0;
    for seed in 0..20 {
        let (ms, mt) = (channel_means(&scene(seed, Domain::Source)), channel_means(&scene(seed, Domain::Target)));
        total += (0..3).map(|c| (ms[c] - mt[c]).abs()).sum::<f64>() / 3.0;
    }
    assert!(total / 20.0 > 0.02);
}

#[test]
fn every_class_appears_in_nearly_every_scene() {
    let mut present = [0usize; 5];
    for seed in 0..1000 {
        let s = scene(seed, Domain::Source);
        let mut seen = [false; 5];
        for &l in &s.labels {
            seen[l as usize] = true;
        }
        for c in 0..5 {
            present[c] += seen[c] as usize;
        }
    }
    for (c, &n) in present.iter().enumerate() {
        assert!(n >= 950, "class {c} present in {n} of 1000 scenes");
    }
}

#[test]
fn scene_files_round_trip() {
    let s = scene(9, Domain::Target);
    let (img, lbl) = sample_to_rasters(&s).unwrap();
    let img = Raster::from_bytes(&img.to_bytes()).unwrap();
    let lbl = Raster::from_bytes(&lbl.to_bytes()).unwrap();
    assert_eq!(sample_from_rasters(img, lbl, 9, Domain::Target).unwrap(), s);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ShiftConfig::new(5);
    let split = DomainSplit::generate(Domain::Target, [3, 11, 100], &cfg, 32, 32, 5).unwrap();
    split.save(dir.path(), "val").unwrap();
    assert!(dir.path().join("val/target/11.img.sdr").is_file());
    assert!(dir.path().join("val/target/11.lbl.sdr").is_file());
    let back = DomainSplit::load(dir.path(), "val", Domain::Target).unwrap();
    assert_eq!(back, split);

    let path = dir.path().join("val/target/3.img.sdr");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[1] = b'!';
    std::fs::write(&path, bytes).unwrap();
    let err = DomainSplit::load(dir.path(), "val", Domain::Target).unwrap_err();
    assert_eq!(err.to_string(), "bad magic");
}

fn splits(n: usize) -> (DomainSplit, DomainSplit) {
    let cfg = ShiftConfig::new(5);
    let s = DomainSplit::generate(Domain::Source, 0..n as u64, &cfg, 16, 16, 5).unwrap();
    let t = DomainSplit::generate(Domain::Target, 100..100 + n as u64, &cfg, 16, 16, 5).unwrap();
    (s, t)
}

#[test]
fn epoch_batches_cover_the_split() {
    let (s, t) = splits(10);
    let it = BatchIter::new(&s, &t, 4, 7).unwrap();
    let sizes: Vec<usize> = it.take(3).map(|b| b.len()).collect();
    assert_eq!(sizes, vec![4, 4, 2]);

    let b = BatchIter::new(&s, &t, 4, 7).unwrap().next().unwrap();
    assert_eq!(b.source_images.shape(), [4, 3, 16, 16]);
    assert_eq!(b.target_images.shape(), [4, 3, 16, 16]);
    assert_eq!(b.source_labels.len(), 4 * 16 * 16);
}

#[test]
fn shuffling_is_seeded() {
    let (s, t) = splits(10);
    let a: Vec<_> = BatchIter::new(&s, &t, 4, 7).unwrap().take(6).collect();
    let b: Vec<_> = BatchIter::new(&s, &t, 4, 7).unwrap().take(6).collect();
    assert_eq!(a, b);

    let it1 = BatchIter::new(&s, &t, 4, 1).unwrap();
    let it2 = BatchIter::new(&s, &t, 4, 2).unwrap();
    assert_eq!(it1.epoch_order(0), vec![3, 9, 8, 6, 7, 4, 5, 0, 2, 1]);
    assert_eq!(it2.epoch_order(0), vec![7, 9, 2, 6, 8, 5, 3, 4, 1, 0]);
    assert_ne!(it1.epoch_order(1), it1.epoch_order(0));
}

#[test]
fn skipping_matches_consuming() {
    let (s, t) = splits(10);
    let all: Vec<_> = BatchIter::new(&s, &t, 3, 5).unwrap().take(9).collect();
    for k in 0..9u64 {
        let mut it = BatchIter::new(&s, &t, 3, 5).unwrap();
        it.skip_to(k);
        assert_eq!(it.next().unwrap(), all[k as usize]);
    }
}

#[test]
fn batch_iteration_preconditions() {
    let (s, t) = splits(4);
    assert!(BatchIter::new(&s, &t, 0, 1).is_err());
    let empty = DomainSplit::from_samples(Domain::Target, vec![]).unwrap();
    assert!(BatchIter::new(&s, &empty, 2, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenes_respect_their_contract(seed in any::<u64>(), h in 16usize..48, w in 16usize..48, k in 2usize..9, target in any::<bool>()) {
        let domain = if target { Domain::Target } else { Domain::Source };
        let s = generate_scene(seed, domain, &ShiftConfig::new(k), h, w, k).unwrap();
        prop_assert_eq!(s.image.shape(), &[3, h, w]);
        prop_assert_eq!(s.labels.len(), h * w);
        prop_assert!(s.labels.iter().all(|&l| (l as usize) < k));
        prop_assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
