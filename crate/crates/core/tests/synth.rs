use gridseg::loss::ConsensusMask;
use gridseg::synth::*;
use gridseg::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn prevalence_matches_configuration() {
    let params = SynthParams::default();
    let n = 400;
    let hits = (0..n)
        .filter(|&s| generate_cirrus_sample(s, MIN_SIZE, &params).unwrap().cirrus_present)
        .count();
    let rate = hits as f64 / n as f64;
    assert!((rate - params.prevalence).abs() < 0.07, "{rate}");
}

#[test]
fn contaminated_coverage_is_near_target() {
    let params = SynthParams {
        cirrus_present: Some(true),
        ..SynthParams::default()
    };
    let covs: Vec<f64> = (0..200)
        .map(|s| generate_cirrus_sample(1000 + s, MIN_SIZE, &params).unwrap().coverage())
        .collect();
    let mean = covs.iter().sum::<f64>() / covs.len() as f64;
    assert!((mean - params.coverage).abs() <= 0.1, "{mean}");
}

#[test]
fn clean_samples_have_empty_consensus() {
    let params = SynthParams {
        cirrus_present: Some(false),
        ..SynthParams::default()
    };
    let s = generate_cirrus_sample(3, MIN_SIZE, &params).unwrap();
    assert_eq!(s.intensity.max_abs(), 0.0);
    assert_eq!(s.consensus.y.max_abs(), 0.0);
    assert!(s.image.is_finite());
}

#[test]
fn samples_are_pure_functions_of_seed() {
    let params = SynthParams::default();
    let a = generate_cirrus_sample(77, 96, &params).unwrap();
    let b = generate_cirrus_sample(77, 96, &params).unwrap();
    assert_eq!(a, b);
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.image), bits(&b.image));
    assert_ne!(a.image, generate_cirrus_sample(78, 96, &params).unwrap().image);
    assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.intensity.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn consensus_is_weighted_vote() {
    let on = Tensor::ones(&[2, 2]);
    let off = Tensor::zeros(&[2, 2]);
    let equal = ConsensusMask::from_annotations(vec![on.clone(), on.clone(), on.clone(), off.clone()], vec![1.0; 4]).unwrap();
    assert!(equal.y.data().iter().all(|&v| v == 0.75));
    let experts = ConsensusMask::from_annotations(vec![on.clone(), on, off.clone(), off], vec![2.0, 2.0, 1.0, 1.0]).unwrap();
    assert!(experts.y.data().iter().all(|&v| (v - 4.0 / 6.0).abs() < 1e-15));
    assert!(ConsensusMask::from_annotations(vec![], vec![]).is_err());
}

#[test]
fn equal_weight_consensus_takes_k_plus_one_levels() {
    let params = SynthParams {
        cirrus_present: Some(true),
        ..SynthParams::default()
    };
    let s = generate_cirrus_sample(5, MIN_SIZE, &params).unwrap();
    let model = AnnotatorModel::equal(&[0.2, 0.35, 0.5], 0.01);
    let c = simulate_consensus(&s.intensity, &model, 9).unwrap();
    for &v in c.y.data() {
        let k = v * 3.0;
        assert!((k - k.round()).abs() < 1e-12, "{v}");
    }
    let again = simulate_consensus(&s.intensity, &model, 9).unwrap();
    assert_eq!(c.y, again.y);
}

#[test]
fn injected_noise_has_requested_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = Tensor::full(&[1000, 1000], 0.3);
    let noisy = add_noise(&image, 0.1, &mut rng).unwrap();
    let d: Vec<f64> = noisy.data().iter().map(|v| v - 0.3).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
    assert!((var - 0.1).abs() <= 0.005, "{var}");
}

#[test]
fn flips_and_rotations_keep_labels_consistent() {
    let params = SynthParams {
        cirrus_present: Some(true),
        ..SynthParams::default()
    };
    let s = generate_cirrus_sample(11, MIN_SIZE, &params).unwrap();
    let mask = s.consensus.y.map(|v| (v >= 0.5) as u8 as f64);
    for flip_x in [false, true] {
        for flip_y in [false, true] {
            for quarter_turns in 0..4 {
                let tr = Transform {
                    flip_x,
                    flip_y,
                    quarter_turns,
                    shift: (0, 0),
                };
                let moved = tr.apply(&mask).unwrap();
                assert_eq!(moved.sum(), mask.sum());
                let back = tr.inverse_orientation().apply(&moved).unwrap();
                let iou = gridseg::metrics::iou(back.data(), mask.data(), 0.5).unwrap();
                assert_eq!(iou, 1.0);
                assert_eq!(back, mask);
            }
        }
    }
}

#[test]
fn augmentation_moves_image_and_mask_together() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Tensor::from_fn(&[1, 16, 16], |i| i as f64);
    let cfg = AugmentConfig {
        noise_variance: 0.0,
        ..AugmentConfig::default()
    };
    for _ in 0..20 {
        let (a, b) = augment(&img, &img, &mut rng, &cfg).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn dataset_split_and_regeneration() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec::new(20, MIN_SIZE, 42);
    let m = make_dataset(&spec, dir.path()).unwrap();
    let count = |s| m.records.iter().filter(|r| r.split == s).count();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (14, 3, 3));
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.manifest, m);
    for r in &m.records {
        let loaded = ds.load(r.id).unwrap();
        let fresh = generate_cirrus_sample(r.seed, MIN_SIZE, &spec.params).unwrap();
        assert_eq!(loaded, fresh);
        assert_eq!(r.coverage, fresh.coverage());
    }
    let other = tempfile::tempdir().unwrap();
    make_dataset(&spec, other.path()).unwrap();
    for name in std::fs::read_dir(dir.path()).unwrap() {
        let name = name.unwrap().file_name();
        let a = std::fs::read(dir.path().join(&name)).unwrap();
        let b = std::fs::read(other.path().join(&name)).unwrap();
        assert!(a == b, "{name:?} differs");
    }
    let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(text.lines().any(|l| l.starts_with("id\tseed\tsplit\tcoverage")));
}

#[test]
fn default_split_sizes() {
    assert_eq!(SplitFractions::default().sizes(300).unwrap(), (210, 45, 45));
}
