use super::*;
use crate::scan_geometry::Pose;
use crate::synthetic::{SessionConfig, WorldConfig};

fn tiny_riv() -> RivConfig {
    RivConfig {
        width: 140,
        height: 28,
        fov_up: 25f64.to_radians(),
        fov_total: 40f64.to_radians(),
        max_range: 60.0,
        ..RivConfig::default()
    }
}

fn tiny_setup() -> TrainSetup {
    let mut s = TrainSetup { riv: tiny_riv(), ..Default::default() };
    s.model.encoder = EncoderConfig { channels: 8, blocks: 4, k_interval: 2, adapter_hidden: 4, seed: 3 };
    s.model.aggregate = AggregateConfig {
        clusters: 4,
        cluster_dim: 4,
        global_dim: 4,
        token_hidden: 8,
        sinkhorn_iters: 20,
        lambda_ot: 1.0,
    };
    s.mining.h_dist = 3;
    s.mining.v_dist = 1;
    s.mining.negatives_per_positive = 4;
    s.augment = AugmentSpec { square_mask_ratio_max: 0.1, cyl_mask_width_max: 0.1, line_mask_count_max: 1, ..AugmentSpec::default() };
    s.train = TrainConfig {
        batch_size: 6,
        epochs: 1,
        max_steps: 4,
        learning_rate: 1e-2,
        pair_subsample: 0.5,
        sample_spacing: 2.5,
        monitor_every: 2,
        ..TrainConfig::default()
    };
    s
}

fn tiny_frames() -> Vec<Frame> {
    let world = World::new(WorldConfig::default()).unwrap();
    let session = world.session(&SessionConfig::default()).unwrap();
    let mut frames = synthetic_frames(&world, &session, &tiny_riv()).unwrap();
    frames.truncate(24);
    frames
}

fn at(x: f64) -> Pose {
    Pose::planar(0.0, x, 0.0, 0.0, 0.0)
}

#[test]
fn pair_labels_by_distance() {
    let cfg = TrainConfig::default();
    assert_eq!(label_pair(&at(0.0), &at(5.0), &cfg), PairLabel::Positive);
    assert_eq!(label_pair(&at(0.0), &at(20.0), &cfg), PairLabel::Ignored);
    assert_eq!(label_pair(&at(0.0), &at(40.0), &cfg), PairLabel::Negative);
}

#[test]
fn subsampling_by_travelled_distance() {
    let poses: Vec<Pose> = (0..10).map(|i| at(i as f64)).collect();
    assert_eq!(spatial_subsample(&poses, 3.0), vec![0, 3, 6, 9]);
    assert_eq!(spatial_subsample(&poses, 0.0).len(), 10);
}

#[test]
fn batch_needs_enough_frames_and_positives() {
    let frames: Vec<Frame> = (0..4)
        .map(|i| Frame { id: format!("f{i}"), pose: at(100.0 * i as f64), image: RivImage::zeros(28, 140) })
        .collect();
    let cfg = TrainConfig { batch_size: 4, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(build_batch(&frames, &[0, 1, 2], &cfg, &mut rng), Err(Error::Batch(_))));
    assert!(matches!(build_batch(&frames, &[0, 1, 2, 3], &cfg, &mut rng), Err(Error::Batch(_))));
}

#[test]
fn batch_labels_are_consistent() {
    let frames = tiny_frames();
    let setup = tiny_setup();
    let pool: Vec<usize> = (0..frames.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let b = build_batch(&frames, &pool, &setup.train, &mut rng).unwrap();
    assert_eq!(b.members.len(), 6);
    assert!(!b.mined.is_empty());
    for (i, pos) in b.labels.positives.iter().enumerate() {
        assert!(!pos.is_empty(), "anchors and partners all have a positive");
        for &j in pos {
            assert!(frames[b.members[i]].pose.distance(&frames[b.members[j]].pose) <= 10.0);
        }
    }
    for &(i, j) in &b.mined {
        assert!(b.labels.positives[i].contains(&j));
    }
}

#[test]
fn shifted_pairs_follow_the_columns() {
    let set = PatchPairSet {
        source_a: "a".into(),
        source_b: "b".into(),
        rows: 2,
        cols: 10,
        seed: 0,
        config: MiningConfig::default(),
        positives: vec![(9, 12)],
        negatives_a: vec![vec![4]],
        negatives_b: vec![vec![19]],
    };
    let s = shift_pairs(&set, 3, 1);
    assert_eq!(s.positives, vec![(2, 13)]);
    assert_eq!(s.negatives_a, vec![vec![7]]);
    assert_eq!(s.negatives_b, vec![vec![10]]);
}

#[test]
fn zero_rate_keeps_parameters_and_monitor() {
    let frames = tiny_frames();
    let mut setup = tiny_setup();
    setup.train.learning_rate = 0.0;
    setup.train.monitor_every = 1;
    let mut t = Trainer::new(setup, &frames).unwrap();
    let before = t.model().params.clone();
    t.run().unwrap();
    assert_eq!(t.model().params, before);
    let monitors: Vec<f64> = t.trace().iter().map(|r| r.monitor_l_final.unwrap()).collect();
    assert!(monitors.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn same_seed_same_trace() {
    let frames = tiny_frames();
    let a = train(tiny_setup(), &frames).unwrap();
    let b = train(tiny_setup(), &frames).unwrap();
    assert_eq!(trace_csv(&a.1), trace_csv(&b.1));
    assert_eq!(a.0, b.0);
    assert_ne!(a.0.params, ModelParams::init(&tiny_setup().model));
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let frames = tiny_frames();
    let mut t = Trainer::new(tiny_setup(), &frames).unwrap();
    t.step().unwrap();
    t.step().unwrap();
    let ckp = t.checkpoint();
    let bytes = encode_checkpoint(&ckp).unwrap();
    assert_eq!(&bytes[..4], b"CKP1");
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, ckp);
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

    let next = t.step().unwrap();
    let mut resumed = Trainer::resume(&back, &frames).unwrap();
    let again = resumed.step().unwrap();
    assert_eq!(next, again);
    assert_eq!(t.model().params, resumed.model().params);

    let mut bad = bytes.clone();
    bad.truncate(bytes.len() - 3);
    assert!(decode_checkpoint(&bad).is_err());
}

#[test]
fn resume_rejects_foreign_encoder() {
    let frames = tiny_frames();
    let t = Trainer::new(tiny_setup(), &frames).unwrap();
    let mut ckp = t.checkpoint();
    ckp.encoder_hash ^= 1;
    assert!(Trainer::resume(&ckp, &frames).is_err());
}

#[test]
fn end_to_end_gradient_matches_differences() {
    let frames = tiny_frames();
    let mut t = Trainer::new(tiny_setup(), &frames).unwrap();
    let pool: Vec<usize> = (0..frames.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = build_batch(&frames, &pool, &t.setup().train, &mut rng).unwrap();
    let (parts, grad) = t.batch_gradient(&batch).unwrap();
    assert!(parts.l_p > 0.0 && parts.l_tsap >= 0.0);
    let theta = t.model().params.to_flat();
    let g = grad.to_flat();
    let n = theta.len();
    let mut checked = 0;
    for idx in (0..n).step_by(n / 25) {
        let h = 1e-6;
        let mut eval = |delta: f64| {
            let mut p = theta.clone();
            p[idx] += delta;
            let mut params = t.model().params.clone();
            params.load_flat(&p);
            t.set_params(params).unwrap();
            t.batch_gradient(&batch).unwrap().0.l_final
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let scale = fd.abs().max(g[idx].abs()).max(1e-6);
        assert!((fd - g[idx]).abs() / scale < 1e-3, "param {idx}: analytic {} vs {fd}", g[idx]);
        checked += 1;
    }
    assert!(checked >= 25);
}
