//! Randomized invariants.

use avcontrast::augment::{spatial_augment, temporal_transform, Direction, SpatialParams, Speed, TemporalParams, VideoClip};
use avcontrast::container;
use avcontrast::contrastive::{nn_weights, similarity, Banks, MemoryBank};
use avcontrast::data::{generate_dataset, generate_instance, GenConfig, Split};
use avcontrast::eval::{linear_probe_eval, FeatureKind, FeatureTable, Standardizer};
use avcontrast::model::{Forward, Mode, Model};
use avcontrast::tasks::{OrderLabel, OrderingInstance};
use avcontrast::tensor::{Graph, Tensor};
use avcontrast::train::{checkpoint, init_state, lr_at, make_batch, ssl_forward, step_stream, LossValues, RunConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vec_in(len: impl Into<prop::collection::SizeRange>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

/// Vectors bounded away from zero length.
fn nonzero(d: usize) -> impl Strategy<Value = Vec<f64>> {
    vec_in(d).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rand::Rng::gen_range(&mut rng, -30.0..30.0)).collect();
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap()).unwrap();
        let s = g.value(g.softmax(x).unwrap()).clone();
        for r in 0..rows {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let labels: Vec<usize> = (0..rows).map(|r| r % cols).collect();
        prop_assert!(g.item(g.cross_entropy(x, &labels).unwrap()).unwrap() >= 0.0);
    }

    #[test]
    fn backward_is_bitwise_repeatable(x in vec_in(12), w in vec_in(12)) {
        let run = || {
            let g = Graph::new();
            let xv = g.param(Tensor::new(vec![3, 4], x.clone()).unwrap()).unwrap();
            let wv = g.param(Tensor::new(vec![4, 3], w.clone()).unwrap()).unwrap();
            let h = g.relu(g.matmul(xv, wv).unwrap()).unwrap();
            let l = g.cross_entropy(h, &[0, 1, 2]).unwrap();
            let grads = g.backward(l).unwrap();
            (grads.wrt(xv), grads.wrt(wv))
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn stop_gradient_equals_a_constant(x in nonzero(4), y in nonzero(4)) {
        // f(x, sg(h(x))) against f(x, c) with c the value of h(x)
        let grad = |stopped: bool| {
            let g = Graph::new();
            let xv = g.param(Tensor::new(vec![1, 4], x.clone()).unwrap()).unwrap();
            let yv = g.constant(Tensor::new(vec![1, 4], y.clone()).unwrap()).unwrap();
            let h = g.mul(g.exp(xv).unwrap(), yv).unwrap();
            let target = if stopped {
                g.stop_gradient(h).unwrap()
            } else {
                let value = g.value(h).clone();
                g.constant(value).unwrap()
            };
            let l = g.sum(g.mul(g.mul(xv, xv).unwrap(), target).unwrap()).unwrap();
            g.backward(l).unwrap().wrt(xv)
        };
        prop_assert_eq!(grad(true), grad(false));
    }

    #[test]
    fn similarity_ignores_positive_scale(d in 1usize..8, c in 0.01f64..100.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| rand::Rng::gen_range(rng, 0.1..1.0)).collect() };
        let (x, y) = (mk(&mut rng), mk(&mut rng));
        let base = similarity(&x, &y, 0.2).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
        prop_assert!((similarity(&xs, &y, 0.2).unwrap() - base).abs() <= 1e-9 * base);
    }

    #[test]
    fn neighbour_weights_sum_to_one(q in nonzero(3), n in prop::collection::vec(nonzero(3), 1..8), t in 0.05f64..2.0) {
        let refs: Vec<&[f64]> = n.iter().map(Vec::as_slice).collect();
        let w = nn_weights(&q, &refs, t).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn bank_keeps_the_last_pushes(cap in 1usize..20, extra in 0usize..30, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = MemoryBank::new(cap, 2).unwrap();
        let pushed: Vec<[f64; 2]> = (0..cap + extra).map(|_| [rand::Rng::gen(&mut rng), rand::Rng::gen(&mut rng)]).collect();
        for p in &pushed {
            bank.push_value(p).unwrap();
        }
        let held: Vec<&[f64]> = bank.iter().collect();
        let want: Vec<&[f64]> = pushed[extra..].iter().map(|p| p.as_slice()).collect();
        prop_assert_eq!(held, want);
    }

    #[test]
    fn full_window_identity_and_double_reversal(n in 1usize..40, item in 1usize..4, speed in 0usize..4, seed in any::<u64>()) {
        let src: Vec<u32> = (0..(n * item) as u32).collect();
        prop_assert_eq!(temporal_transform(&src, item, &TemporalParams::forward(0, n)).unwrap(), src.clone());
        let s = Speed::from_class(speed).unwrap();
        prop_assume!(s.factor() <= n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n / s.factor();
        let p = TemporalParams::sample_crop(&mut rng, s, Direction::Backward, len, n).unwrap();
        let once = temporal_transform(&src, item, &TemporalParams { direction: Direction::Forward, ..p }).unwrap();
        let reversed = temporal_transform(&src, item, &p).unwrap();
        let back = TemporalParams { direction: Direction::Backward, ..TemporalParams::forward(0, len) };
        prop_assert_eq!(temporal_transform(&reversed, item, &back).unwrap(), once);
    }

    #[test]
    fn spatial_augmentation_is_pure(seed in any::<u64>()) {
        let data: Vec<f64> = (0..2 * 8 * 8).map(|i| (i as f64 * 0.37).sin()).collect();
        let clip = VideoClip::new(2, 8, 8, 1, data).unwrap();
        let params = SpatialParams::sample(&mut ChaCha8Rng::seed_from_u64(seed), 8, 8, 0.5);
        prop_assert_eq!(spatial_augment(&clip, &params).unwrap(), spatial_augment(&clip, &params).unwrap());
    }

    #[test]
    fn order_labels_are_antisymmetric(a in 0usize..50, b in 0usize..50, len in 1usize..20) {
        let first = a..a + len;
        let second = b..b + len;
        let inst = OrderingInstance { label: OrderLabel::of(&first, &second), first, second };
        let swapped = inst.swapped();
        let expect = match inst.label {
            OrderLabel::Ordered => OrderLabel::Reversed,
            OrderLabel::Reversed => OrderLabel::Ordered,
            OrderLabel::Overlapping => OrderLabel::Overlapping,
        };
        prop_assert_eq!(swapped.label, expect);
        prop_assert_eq!(swapped.swapped(), inst);
    }

    #[test]
    fn direction_flip_is_an_involution(c in 0usize..2) {
        let d = Direction::from_class(c).unwrap();
        prop_assert_eq!(d.flipped().flipped(), d);
        prop_assert_ne!(d.flipped(), d);
    }

    #[test]
    fn schedule_is_continuous_and_non_negative(warmup in 1usize..200, extra in 1usize..2000, lr in 1e-6f64..1e-1, step in 0usize..4000) {
        let total = warmup + extra;
        prop_assert!(lr_at(step, warmup, total, lr) >= 0.0);
        prop_assert!(lr_at(step, warmup, total, lr) <= lr * (1.0 + 1e-12));
        // both sides of the boundary approach lr_max
        let left = lr_at(warmup - 1, warmup, total, lr);
        let right = lr_at(warmup + 1, warmup, total, lr);
        prop_assert!((lr - left) <= lr / warmup as f64 * (1.0 + 1e-9));
        prop_assert!((lr - right) <= lr * (std::f64::consts::PI / extra as f64).powi(2));
        prop_assert_eq!(lr_at(warmup, warmup, total, lr), lr);
    }

    #[test]
    fn standardized_reference_is_centred(rows in prop::collection::vec(vec_in(3), 2..30)) {
        let t = FeatureTable { kind: FeatureKind::Video, ids: (0..rows.len()).collect(), classes: vec![0; rows.len()], rows };
        let s = Standardizer::fit(&t).unwrap();
        let z = s.apply(&t).unwrap();
        let n = z.len() as f64;
        for c in 0..3 {
            let mean = z.rows.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = z.rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() <= 1e-9);
            // constant columns are left at unit scale
            prop_assert!((var - 1.0).abs() <= 1e-9 || var <= 1e-20);
        }
    }

    #[test]
    fn container_round_trips(header in prop::collection::vec(any::<u8>(), 0..64), payloads in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..100), 0..5)) {
        let sections: Vec<container::Section> = payloads
            .iter()
            .enumerate()
            .map(|(i, p)| container::Section { name: format!("s{i}"), payload: p.clone() })
            .collect();
        let bytes = container::encode(b"TESTDATA", 3, &header, &sections);
        let (h, s) = container::decode(&bytes, b"TESTDATA", 3).unwrap();
        prop_assert_eq!(h, header);
        prop_assert_eq!(s.iter().map(|x| x.payload.clone()).collect::<Vec<_>>(), payloads);
        prop_assert!(container::decode(&bytes, b"TESTDATA", 4).is_err());
    }
}

#[test]
fn parameter_count_is_a_function_of_config() {
    let cfg = RunConfig::default();
    let a = Model::new(&cfg.model, cfg.input_dims()).unwrap();
    let b = Model::new(&cfg.model, cfg.input_dims()).unwrap();
    assert_eq!(a.num_params(), b.num_params());
    assert_eq!(a.specs().len(), b.specs().len());
}

#[test]
fn checkpoint_round_trips_exactly() {
    let mut cfg = RunConfig::default();
    cfg.loss.bank_size = 8;
    let model = Model::new(&cfg.model, cfg.input_dims()).unwrap();
    let mut state = init_state(&model, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    state.banks = Banks::new(&cfg.loss, cfg.model.embed_dim).unwrap();
    for q in &mut state.banks.queues {
        for _ in 0..11 {
            let v: Vec<f64> = (0..cfg.model.embed_dim).map(|_| rand::Rng::gen(&mut rng)).collect();
            q.push_value(&v).unwrap();
        }
    }
    state.step = 17;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.avc");
    checkpoint::save(&path, &cfg, &model, &state).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.config, cfg);
    assert_eq!(back.state, state);
}

#[test]
fn fresh_model_scores_chance_on_temporal_tasks() {
    let cfg = RunConfig::default();
    let model = Model::new(&cfg.model, cfg.input_dims()).unwrap();
    let state = init_state(&model, &cfg).unwrap();
    let samples: Vec<_> = (0..cfg.train.batch_size)
        .map(|i| generate_instance(&cfg.data, cfg.seed, i * 7 % cfg.data.num_instances()))
        .collect();
    let refs: Vec<_> = samples.iter().collect();
    let batch = make_batch(&refs, &cfg, &step_stream(0, 0)).unwrap();
    let g = Graph::new();
    let vars = state.model.bind(&g, false).unwrap();
    let mut f = Forward::new(&g, &vars, &state.model.running, Mode::Train);
    let out = ssl_forward(&mut f, &model, &batch, &state.banks, &cfg).unwrap();
    let l = LossValues::read(&g, &out).unwrap();
    for (value, classes) in [(l.speed, 4.0f64), (l.direction, 2.0), (l.order, 3.0)] {
        let v = value.unwrap();
        assert!((v / classes.ln() - 1.0).abs() <= 0.1, "{v} vs ln {classes}");
    }
}

#[test]
fn raw_spectra_separate_classes() {
    let cfg = GenConfig {
        classes: 4,
        instances_per_class: 8,
        ..GenConfig::default()
    };
    let data = generate_dataset(&cfg, 3).unwrap();
    let features = |split| {
        let samples = data.split(split).unwrap();
        let rows: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| {
                let wave: Vec<f64> = s.waveform.iter().map(|&v| v as f64).collect();
                let spec = avcontrast::augment::Spectrogram::magnitude(&wave, 256, 128).unwrap();
                (0..spec.freq_bins)
                    .map(|k| (0..spec.frames).map(|t| spec.at(k, t)).sum::<f64>() / spec.frames as f64)
                    .collect()
            })
            .collect();
        FeatureTable {
            kind: FeatureKind::Audio,
            ids: samples.iter().map(|s| s.meta.instance_id).collect(),
            classes: samples.iter().map(|s| s.meta.class_id).collect(),
            rows,
        }
    };
    let (train, test) = (features(Split::Train), features(Split::Test));
    let norm = Standardizer::fit(&train).unwrap();
    let acc = linear_probe_eval(&norm.apply(&train).unwrap(), &norm.apply(&test).unwrap(), 300, 0.1).unwrap();
    assert!(acc > 0.25, "{acc}");
}
