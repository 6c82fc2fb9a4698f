use mpatch_core::data::*;
use mpatch_core::head::PromptSet;
use mpatch_core::Tensor;
use proptest::prelude::*;

fn tiny(domain_satellite: bool, seed: u64) -> DataConfig {
    let mut c = if domain_satellite { DataConfig::satellite(seed) } else { DataConfig::natural(seed) };
    c.samples = 200;
    c
}

#[test]
fn same_config_writes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(true, 3);
    generate(&cfg).unwrap().save(dir.path().join("a")).unwrap();
    generate(&cfg).unwrap().save(dir.path().join("b")).unwrap();
    for f in [MANIFEST, MS_FILE, RGB_FILE, LABELS_FILE, CAPTIONS_FILE] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let back = MultiModalDataset::load(dir.path().join("a")).unwrap();
    assert!(back.composites_consistent().unwrap());
    assert_eq!(back.len(), 200);
}

#[test]
fn composites_recompute_exactly() {
    for sat in [false, true] {
        let ds = generate(&tiny(sat, 1)).unwrap();
        assert!(ds.composites_consistent().unwrap());
    }
}

#[test]
fn composite_arithmetic() {
    let spec = CompositeSpec { bands: [0, 1, 2], gain: 2.0, lo: 0.0, hi: 1.0 };
    assert_eq!(spec.map(0.5), 1.0);
    assert!((spec.map(0.2) - 0.4).abs() < 1e-7);
    assert_eq!(spec.map(-0.3), 0.0);
    let ms = Tensor::new(vec![4, 1, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let out = rgb_composite(&ms, &CompositeSpec { bands: [3, 2, 1], gain: 2.0, lo: 0.0, hi: 1.0 }).unwrap();
    let want = [0.8f32, 0.6, 0.4];
    assert!(out.data().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-6));
    assert!(rgb_composite(&ms, &CompositeSpec { bands: [4, 2, 1], gain: 1.0, lo: 0.0, hi: 1.0 }).is_err());
}

#[test]
fn nearest_prototype_is_perfect_without_noise() {
    let mut cfg = tiny(false, 5);
    cfg.noise = 0.0;
    cfg.channels = 8;
    cfg.composite = CompositeSpec::satellite();
    let ds = generate(&cfg).unwrap();
    let train = ds.view("train").unwrap();
    let test = ds.view("test").unwrap();
    let dim = train.ms.row_len();
    let mut protos = vec![vec![0.0f64; dim]; cfg.classes];
    let mut counts = vec![0usize; cfg.classes];
    for (r, c) in train.class_ids().into_iter().enumerate() {
        counts[c] += 1;
        for (p, &v) in protos[c].iter_mut().zip(train.ms.row(r)) {
            *p += v as f64;
        }
    }
    for (p, &n) in protos.iter_mut().zip(&counts) {
        p.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let truth = test.class_ids();
    let mut correct = 0;
    for (r, &t) in truth.iter().enumerate() {
        let row = test.ms.row(r);
        let dist = |p: &Vec<f64>| p.iter().zip(row).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
        let best = (0..cfg.classes).filter(|&c| counts[c] > 0).min_by(|&a, &b| dist(&protos[a]).total_cmp(&dist(&protos[b]))).unwrap();
        correct += (best == t) as usize;
    }
    assert_eq!(correct, truth.len());
}

#[test]
fn label_marginals_track_the_target() {
    let mut cfg = DataConfig::satellite(9);
    cfg.samples = 2000;
    let ds = generate(&cfg).unwrap();
    let target = cfg.expected_positive_rate();
    let labels = &ds.labels;
    let c = ds.num_classes();
    for ci in 0..c {
        let rate = (0..labels.rows()).filter(|&r| labels.row(r)[ci] > 0.5).count() as f64 / labels.rows() as f64;
        assert!((rate - target).abs() <= 0.2 * target, "class {ci}: {rate} vs {target}");
    }
    for r in 0..labels.rows() {
        let k = labels.row(r).iter().filter(|&&v| v > 0.5).count();
        assert!((1..=cfg.max_labels).contains(&k));
    }
}

#[test]
fn split_examples() {
    let s = split(100, [0.8, 0.1, 0.1], 4).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
    assert_eq!(s, split(100, [0.8, 0.1, 0.1], 4).unwrap());
    assert!(split(5, [0.9, 0.05, 0.05], 0).is_err());
    assert!(split(100, [0.5, 0.2, 0.2], 0).is_err());
}

#[test]
fn shared_templates_cover_every_prompt_word() {
    let tok = shared_tokenizer(8).unwrap();
    for domain in [Domain::Natural, Domain::Satellite] {
        let p = PromptSet::new(class_names(8), domain.templates()).unwrap();
        for c in 0..8 {
            for text in p.prompts_for(c) {
                assert!(!tok.encode(&text).contains(&tok.unk_id()), "{text}");
            }
        }
    }
}

proptest! {
    #[test]
    fn splits_are_disjoint_and_exhaustive(n in 10usize..300, seed in 0u64..100) {
        let s = split(n, [0.8, 0.1, 0.1], seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn every_sample_has_a_label(seed in 0u64..50) {
        let mut cfg = DataConfig::satellite(seed);
        cfg.samples = 40;
        let ds = generate(&cfg).unwrap();
        for r in 0..ds.len() {
            prop_assert!(ds.labels.row(r).iter().any(|&v| v > 0.5));
        }
    }
}
