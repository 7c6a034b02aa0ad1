use super::*;
use crate::kem::{kem_transform, KemConfig};
use crate::ndtensor::gradcheck::random_tensor;

fn small_config(size: usize) -> ModelConfig {
    ModelConfig {
        input_size: size,
        ..ModelConfig::default()
    }
}

fn random_mask(n: usize, seed: u64) -> MaskImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MaskImage::new(n, n, (0..n * n).map(|_| rng.gen_range(0..2u8)).collect()).unwrap()
}

fn random_inputs(cfg: &ModelConfig, seed: u64) -> (Tensor, FeatureStack) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.input_size;
    let img = random_tensor(&[3, n, n], &mut rng).map(|v| (v + 1.0) * 127.5);
    let feats = kem_transform(&img, &KemConfig::default()).unwrap();
    (img, feats)
}

fn conv_numel(cin: usize, cout: usize) -> usize {
    cout * cin * 9 + cout
}

#[test]
fn full_scale_visual_layer_counts() {
    let cfg = ModelConfig::full_scale();
    let specs = cfg.param_specs();
    let visual: Vec<usize> = specs
        .iter()
        .filter(|s| s.path.starts_with("visual.") && s.path.ends_with(".weight"))
        .map(|s| {
            let bias = specs
                .iter()
                .find(|b| b.path == s.path.replace(".weight", ".bias"))
                .unwrap();
            s.numel() + bias.numel()
        })
        .collect();
    assert_eq!(visual.len(), 10);
    // independent count from (in, out) pairs
    let pairs = [
        (3, 64),
        (64, 64),
        (64, 128),
        (128, 128),
        (128, 256),
        (256, 256),
        (256, 512),
        (512, 512),
        (512, 512),
        (512, 512),
    ];
    let expect: Vec<usize> = pairs.iter().map(|&(i, o)| conv_numel(i, o)).collect();
    assert_eq!(visual, expect);
    assert_eq!(&visual[..6], &[1792, 36928, 73856, 147584, 295168, 590080]);
    assert_eq!(visual[8], 2_359_808);
    assert_eq!(visual.iter().sum::<usize>(), 9_404_992);
}

#[test]
fn stage_shapes_follow_halving() {
    let cfg = ModelConfig {
        depth: 5,
        ..small_config(64)
    };
    let shapes = cfg.stage_shapes();
    assert_eq!(shapes, vec![(8, 32), (16, 16), (32, 8), (64, 4), (64, 2)]);
    let net = DbSfNet::new(cfg.clone(), 1).unwrap();
    let (img, _) = random_inputs(&cfg, 2);
    let theta = net.encode_branch(&img, Branch::Visual).unwrap();
    assert_eq!(theta.last().unwrap().shape(), &[64, 2, 2]);

    let desk = ModelConfig::default();
    assert_eq!(*desk.stage_shapes().last().unwrap(), (64, 4));
}

#[test]
fn validation_rejects_bad_configs() {
    assert!(ModelConfig {
        input_size: 60,
        ..ModelConfig::default()
    }
    .validate()
    .is_err());
    assert!(ModelConfig {
        depth: 0,
        ..ModelConfig::default()
    }
    .validate()
    .is_err());
    assert!(ModelConfig {
        num_classes: 1,
        ..ModelConfig::default()
    }
    .validate()
    .is_err());
    assert!(ModelConfig {
        threshold: 1.0,
        ..ModelConfig::default()
    }
    .validate()
    .is_err());
    assert!(ModelConfig {
        feature_channels: vec![1, 1],
        ..ModelConfig::default()
    }
    .validate()
    .is_err());
    assert!(ModelConfig {
        feature_channels: vec![8],
        ..ModelConfig::default()
    }
    .validate()
    .is_err());
    assert!(ModelConfig {
        fusion_scales: Some(vec![5]),
        ..ModelConfig::default()
    }
    .validate()
    .is_err());
    assert!(ModelConfig::full_scale().validate().is_ok());
}

#[test]
fn init_matches_specs_and_is_seeded() {
    let cfg = small_config(32);
    let a = ModelParams::init(&cfg, 3).unwrap();
    a.check_against(&cfg).unwrap();
    assert_eq!(
        a.num_params(),
        cfg.param_specs()
            .iter()
            .map(ParamSpec::numel)
            .sum::<usize>()
    );
    assert_eq!(a, ModelParams::init(&cfg, 3).unwrap());
    assert_ne!(a, ModelParams::init(&cfg, 4).unwrap());

    // shared layer paths start identical across variants
    let base = ModelParams::init(
        &ModelConfig {
            feature_channels: vec![],
            ..cfg.clone()
        },
        3,
    )
    .unwrap();
    assert_eq!(
        base.get("visual.stage2.conv1.weight").unwrap(),
        a.get("visual.stage2.conv1.weight").unwrap()
    );
    assert!(base.paths().all(|p| !p.starts_with("statistical.")));
}

#[test]
fn logits_have_class_shape() {
    let cfg = small_config(32);
    let net = DbSfNet::new(cfg.clone(), 5).unwrap();
    let (img, feats) = random_inputs(&cfg, 6);
    let logits = net.forward(&img, &feats).unwrap();
    assert_eq!(logits.shape(), &[2, 32, 32]);
    assert!(logits.all_finite());
    assert!(net.forward(&Tensor::image(3, 16, 16), &feats).is_err());
}

#[test]
fn zero_head_gives_uniform_softmax() {
    let cfg = small_config(32);
    let mut net = DbSfNet::new(cfg.clone(), 5).unwrap();
    net.params_mut()
        .get_mut("head.weight")
        .unwrap()
        .data_mut()
        .fill(0.0);
    let (img, feats) = random_inputs(&cfg, 6);
    let logits = net.forward(&img, &feats).unwrap();
    let p = class_probability(&logits, 1).unwrap();
    assert!(p.iter().all(|&v| v == 0.5));
}

#[test]
fn predict_mask_thresholds_class_one() {
    let logits = Tensor::from_vec(&[2, 1, 1], vec![0.0, 3f64.ln()]).unwrap();
    let p = class_probability(&logits, 1).unwrap();
    assert!((p[0] - 0.75).abs() < 1e-12);
    assert_eq!(predict_mask(&logits, 0.5).unwrap().data(), &[1]);
    assert_eq!(predict_mask(&logits, 1.0).unwrap().data(), &[0]);
    let even = Tensor::zeros(&[2, 2, 2]);
    assert_eq!(predict_mask(&even, 0.5).unwrap().count_ones(), 4);
    assert!(predict_mask(&Tensor::zeros(&[3, 2, 2]), 0.5).is_err());
}

#[test]
fn mask_image_is_binary() {
    assert!(MaskImage::new(1, 2, vec![0, 2]).is_err());
    assert!(MaskImage::new(1, 2, vec![0]).is_err());
    let m = MaskImage::new(2, 2, vec![0, 1, 1, 0]).unwrap();
    assert_eq!((m.get(0, 1), m.count_ones()), (1, 2));
}

#[test]
fn saturated_gate_is_plain_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_tensor(&[2, 3, 3], &mut rng);
    let b = random_tensor(&[3, 3, 3], &mut rng);
    let plain = feature_select(&[&a, &b], None).unwrap();
    assert_eq!(plain.output, concat_channels(&[&a, &b]).unwrap());
    assert_eq!(plain.gates, vec![1.0; 5]);

    let w1 = Tensor::zeros(&[4, 5]);
    let w2 = Tensor::zeros(&[5, 4]);
    let gate = GateParams {
        w1: &w1,
        b1: &[0.0; 4],
        w2: &w2,
        b2: &[50.0; 5],
    };
    let gated = feature_select(&[&a, &b], Some(gate)).unwrap();
    assert_eq!(gated.gates, vec![1.0; 5]);
    assert_eq!(gated.output, plain.output);

    let half = GateParams {
        w1: &w1,
        b1: &[0.0; 4],
        w2: &w2,
        b2: &[0.0; 5],
    };
    let out = feature_select(&[&a, &b], Some(half)).unwrap().output;
    for (x, y) in out.data().iter().zip(plain.output.data()) {
        assert_eq!(*x, 0.5 * y);
    }
}

#[test]
fn branches_are_independent() {
    let cfg = small_config(32);
    let net = DbSfNet::new(cfg.clone(), 11).unwrap();
    let (img, feats) = random_inputs(&cfg, 12);
    let before = net.forward_cached(&img, &feats).unwrap();

    let mut other = net.clone();
    for (p, t) in other.params_mut().iter_mut() {
        if p.starts_with("statistical.") {
            t.data_mut().iter_mut().for_each(|v| *v += 0.1);
        }
    }
    let after = other.forward_cached(&img, &feats).unwrap();
    assert_eq!(before.visual_stages(), after.visual_stages());
    assert_ne!(before.statistical_stages(), after.statistical_stages());
    assert_ne!(before.logits, after.logits);
}

#[test]
fn feature_selection_off_has_unit_gates() {
    let cfg = ModelConfig {
        feature_selection: false,
        ..small_config(32)
    };
    let net = DbSfNet::new(cfg.clone(), 13).unwrap();
    assert!(net.params().paths().all(|p| !p.contains(".gate")));
    let (img, feats) = random_inputs(&cfg, 14);
    let cache = net.forward_cached(&img, &feats).unwrap();
    assert!(cache.gates().iter().all(|g| g.iter().all(|&v| v == 1.0)));
}

#[test]
fn visual_only_ignores_features() {
    let cfg = ModelConfig {
        feature_channels: vec![],
        ..small_config(32)
    };
    let net = DbSfNet::new(cfg.clone(), 15).unwrap();
    let (img, feats) = random_inputs(&cfg, 16);
    let (_, other) = random_inputs(&cfg, 17);
    assert_eq!(
        net.forward(&img, &feats).unwrap(),
        net.forward(&img, &other).unwrap()
    );
    assert!(net
        .encode_branch(feats.tensor(), Branch::Statistical)
        .is_err());
}

#[test]
fn partial_fusion_changes_decoder_widths() {
    let cfg = ModelConfig {
        fusion_scales: Some(vec![1, 3]),
        ..small_config(32)
    };
    let plans = cfg.decoder_plan();
    let with_stats: Vec<usize> = plans
        .iter()
        .filter(|p| p.statistical.is_some())
        .map(|p| p.scale)
        .collect();
    assert_eq!(with_stats, vec![3, 1]);
    let net = DbSfNet::new(cfg.clone(), 18).unwrap();
    let (img, feats) = random_inputs(&cfg, 19);
    assert_eq!(net.forward(&img, &feats).unwrap().shape(), &[2, 32, 32]);
}

#[test]
fn network_gradients_match_finite_differences() {
    for (cfg, per_tensor) in [
        (small_config(32), 20),
        (
            ModelConfig {
                feature_selection: false,
                ..small_config(32)
            },
            5,
        ),
        (
            ModelConfig {
                feature_channels: vec![2, 5],
                fusion_scales: Some(vec![2]),
                depth: 3,
                ..small_config(16)
            },
            5,
        ),
    ] {
        let net = DbSfNet::new(cfg.clone(), 21).unwrap();
        let (img, feats) = random_inputs(&cfg, 22);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mask = random_mask(cfg.input_size, 24);
        let r = check_network_gradients(&net, &img, &feats, &mask, per_tensor, &mut rng).unwrap();
        assert!(r.passed(), "{cfg:?}: {r:?}");
        assert!(r.checked > 100);
    }
}

#[test]
fn backward_covers_every_parameter() {
    let cfg = small_config(32);
    let net = DbSfNet::new(cfg.clone(), 30).unwrap();
    let (img, feats) = random_inputs(&cfg, 31);
    let cache = net.forward_cached(&img, &feats).unwrap();
    let g = net
        .backward(&cache, &Tensor::zeros(cache.logits.shape()))
        .unwrap();
    g.check_against(&cfg).unwrap();
    assert!(g.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let cfg = ModelConfig {
        feature_channels: vec![0, 6],
        ..small_config(16)
    };
    let cfg = ModelConfig { depth: 3, ..cfg };
    let net = DbSfNet::new(cfg.clone(), 40).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &net).unwrap();
    assert_eq!(&buf[..4], CHECKPOINT_MAGIC);
    let back = read_checkpoint(buf.as_slice(), "mem").unwrap();
    assert_eq!(back, net);
    let (img, feats) = random_inputs(&cfg, 41);
    assert_eq!(
        back.forward(&img, &feats).unwrap(),
        net.forward(&img, &feats).unwrap()
    );

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(
        read_checkpoint(bad.as_slice(), "mem"),
        Err(Error::Parse { .. })
    ));
    let truncated = &buf[..buf.len() - 9];
    assert!(read_checkpoint(truncated, "mem").is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fgs");
    save_checkpoint(&path, &net).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), net);
}
