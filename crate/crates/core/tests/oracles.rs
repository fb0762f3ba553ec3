//! Values checked against independent recomputations.

use std::f64::consts::PI;

use avcontrast::augment::{stft, Spectrogram};
use avcontrast::contrastive::{build_pairs, contrastive_loss, gather, nn_weights, LossConfig, MemoryBank, Source};
use avcontrast::data::{generate_instance, GenConfig};
use avcontrast::eval::{fingerprint_eval, knn_retrieval_eval, linear_probe_eval, FeatureKind, FeatureTable};
use avcontrast::model::{Forward, Head, InputDims, Modality, Mode, Model, ModelConfig, RunningStats, BN_MOMENTUM};
use avcontrast::tasks::{sample_temporal_params, temporal_losses, TaskBatch};
use avcontrast::tensor::{finite_diff_check, Coords, Graph, Tensor, Var};
use avcontrast::train::{AdamState, AdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn table(kind: FeatureKind, rows: Vec<Vec<f64>>, classes: Vec<usize>) -> FeatureTable {
    FeatureTable {
        kind,
        ids: (0..rows.len()).collect(),
        classes,
        rows,
    }
}

// ---- spectrograms

#[test]
fn stft_matches_direct_dft() {
    let mut r = rng(1);
    let wave = gaussian(&mut r, 700);
    let (n, hop) = (64, 20);
    let frames = stft(&wave, n, hop).unwrap();
    assert_eq!(frames.len(), 1 + (700 - n) / hop);
    let window: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
    let mut worst = 0.0f64;
    for (f, bins) in frames.iter().enumerate() {
        assert_eq!(bins.len(), n / 2 + 1);
        for (k, c) in bins.iter().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for t in 0..n {
                let x = wave[f * hop + t] * window[t];
                let a = -2.0 * PI * (k * t) as f64 / n as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            worst = worst.max((c.re - re).abs()).max((c.im - im).abs());
        }
    }
    assert!(worst <= 1e-9, "{worst}");
}

#[test]
fn parseval_per_frame() {
    let mut r = rng(2);
    let wave = gaussian(&mut r, 1000);
    let (n, hop) = (128, 50);
    let spec = Spectrogram::magnitude(&wave, n, hop).unwrap();
    let window: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
    for f in 0..spec.frames {
        let energy: f64 = (0..n).map(|t| (wave[f * hop + t] * window[t]).powi(2)).sum();
        // one-sided spectrum: interior bins stand for a conjugate pair
        let mut total = 0.0;
        for k in 0..spec.freq_bins {
            let m2 = spec.at(k, f).powi(2);
            total += if k == 0 || k == n / 2 { m2 } else { 2.0 * m2 };
        }
        assert!((total / n as f64 - energy).abs() <= 1e-9 * energy.max(1.0), "frame {f}");
    }
}

#[test]
fn bin_centred_sine_peaks_in_its_bin() {
    let n = 256;
    for k0 in [3usize, 17, 64, 120] {
        let wave: Vec<f64> = (0..4096).map(|t| (2.0 * PI * (k0 * t) as f64 / n as f64 + 0.3).sin()).collect();
        let spec = Spectrogram::magnitude(&wave, n, 64).unwrap();
        assert!((0..spec.frames).all(|f| spec.peak_bin(f) == k0), "k0 = {k0}");
    }
}

// ---- generator

/// Least-squares slope of the chirp's instantaneous frequency (Hz/s),
/// estimated from an interpolated STFT peak track restricted to frames that
/// sit inside one sweep cycle. `cycle(n)` names the cycle of sample `n`.
fn fitted_slope(wave: &[f64], sr: f64, band: (f64, f64), cycle: impl Fn(usize) -> usize) -> f64 {
    let (n, hop) = (1024, 64);
    let spec = Spectrogram::magnitude(wave, n, hop).unwrap();
    let hz = sr / n as f64;
    let (lo, hi) = ((band.0 / hz).floor() as usize, (band.1 / hz).ceil() as usize);
    let mut by_cycle: std::collections::BTreeMap<usize, Vec<(f64, f64)>> = Default::default();
    for f in 0..spec.frames {
        let (s, e) = (f * hop, f * hop + n - 1);
        if cycle(s) != cycle(e) {
            continue;
        }
        let k = (lo..=hi).max_by(|&a, &b| spec.at(a, f).total_cmp(&spec.at(b, f))).unwrap();
        let (a, b, c) = (spec.at(k - 1, f).ln(), spec.at(k, f).ln(), spec.at(k + 1, f).ln());
        let offset = 0.5 * (a - c) / (a - 2.0 * b + c);
        let t = (s as f64 + n as f64 / 2.0) / sr;
        by_cycle.entry(cycle(s)).or_default().push((t, (k as f64 + offset) * hz));
    }
    let slopes: Vec<f64> = by_cycle
        .values()
        .filter(|pts| pts.len() >= 8)
        .map(|pts| {
            let m = pts.len() as f64;
            let (mt, mf) = (pts.iter().map(|p| p.0).sum::<f64>() / m, pts.iter().map(|p| p.1).sum::<f64>() / m);
            let cov: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - mf)).sum();
            let var: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
            cov / var
        })
        .collect();
    assert!(slopes.len() >= 3);
    slopes.iter().sum::<f64>() / slopes.len() as f64
}

#[test]
fn reversed_waveform_negates_chirp_slope() {
    let cfg = GenConfig {
        classes: 4,
        instances_per_class: 2,
        samples: 65536,
        noise: 0.0,
        ..GenConfig::default()
    };
    for id in [0, 3, 5, 7] {
        let s = generate_instance(&cfg, 11, id);
        let m = &s.meta;
        let sr = m.sample_rate as f64;
        let sweep = m.chirp_slope * m.sweep_period as f64 / sr;
        let band = (m.base_freq - 10.0, m.base_freq + sweep + 10.0);
        let wave: Vec<f64> = s.waveform.iter().map(|&v| v as f64).collect();
        let cycle = |n: usize| (n + m.sweep_offset) / m.sweep_period;
        let len = wave.len();
        let fwd = fitted_slope(&wave, sr, band, cycle);
        let rev: Vec<f64> = wave.iter().rev().copied().collect();
        let back = fitted_slope(&rev, sr, band, |n| cycle(len - 1 - n));
        assert!(m.chirp_slope > 0.0);
        assert!((fwd / m.chirp_slope - 1.0).abs() < 0.1, "instance {id}: {fwd} vs {}", m.chirp_slope);
        assert!((back / m.chirp_slope + 1.0).abs() < 0.1, "instance {id}: {back} vs -{}", m.chirp_slope);
    }
}

fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut c, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64 - ma, y as f64 - mb);
        c += x * y;
        va += x * x;
        vb += y * y;
    }
    c / (va * vb).sqrt()
}

#[test]
fn same_instance_clips_correlate_more() {
    let cfg = GenConfig::default();
    let mut r = rng(3);
    let clip = cfg.clip_frames;
    let frame = cfg.height * cfg.width * cfg.channels;
    let cut = |v: &[f32], start: usize| v[start * frame..(start + clip) * frame].to_vec();
    let mut wins = 0;
    for _ in 0..50 {
        let a = r.gen_range(0..cfg.num_instances());
        let mut b = r.gen_range(0..cfg.num_instances());
        while b == a {
            b = r.gen_range(0..cfg.num_instances());
        }
        let (sa, sb) = (generate_instance(&cfg, 5, a), generate_instance(&cfg, 5, b));
        let starts: Vec<usize> = (0..3).map(|_| r.gen_range(0..=cfg.frames - clip)).collect();
        let anchor = cut(&sa.video, starts[0]);
        let same = pearson(&anchor, &cut(&sa.video, starts[1]));
        let other = pearson(&anchor, &cut(&sb.video, starts[2]));
        wins += usize::from(same > other);
    }
    assert!(wins >= 48, "{wins}/50");
}

// ---- model

#[test]
fn running_stats_follow_hand_rolled_average() {
    let mut r = rng(4);
    let g = Graph::new();
    let gamma = g.constant(Tensor::full(&[3], 1.0)).unwrap();
    let beta = g.constant(Tensor::zeros(&[3])).unwrap();
    let mut running = RunningStats::new(3);
    let (mut mean, mut var) = (vec![0.0; 3], vec![1.0; 3]);
    for _ in 0..7 {
        let rows = 5;
        let x = gaussian(&mut r, rows * 3);
        let xv = g.constant(Tensor::new(vec![rows, 3], x.clone()).unwrap()).unwrap();
        let (_, stats) = g.batch_norm_train(xv, gamma, beta, 1e-5).unwrap();
        running.update(&stats, BN_MOMENTUM);
        for c in 0..3 {
            let col: Vec<f64> = (0..rows).map(|i| x[i * 3 + c]).collect();
            let mu = col.iter().sum::<f64>() / rows as f64;
            let s2 = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (rows - 1) as f64;
            mean[c] = 0.9 * mean[c] + 0.1 * mu;
            var[c] = 0.9 * var[c] + 0.1 * s2;
        }
    }
    for c in 0..3 {
        assert!((running.mean[c] - mean[c]).abs() < 1e-12);
        assert!((running.var[c] - var[c]).abs() < 1e-12);
    }
}

fn small_model() -> (Model, avcontrast::model::ModelState) {
    let cfg = ModelConfig {
        video_channels: vec![3, 4],
        audio_channels: vec![3, 4],
        feature_dim: 6,
        hidden_dim: 8,
        embed_dim: 5,
    };
    let dims = InputDims {
        frames: 4,
        height: 4,
        width: 4,
        channels: 1,
        spec_size: 8,
    };
    let model = Model::new(&cfg, dims).unwrap();
    let state = model.init(9);
    (model, state)
}

/// Checks the gradient of `sum(w * out)` with respect to the input only.
fn input_gradcheck(shape: &[usize], seed: u64, build: impl Fn(&Model, &mut Forward, Var) -> avcontrast::Result<Var>) -> f64 {
    let (model, state) = small_model();
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let input = Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
    let weights: Vec<f64> = gaussian(&mut r, 64);
    let report = finite_diff_check(&[input], 1e-6, &Coords::Largest { per_tensor: 24 }, |g, v| {
        let params = state.bind(g, false)?;
        let mut f = Forward::new(g, &params, &state.running, Mode::Train);
        let out = build(&model, &mut f, v[0])?;
        let len = g.shape(out).iter().product::<usize>();
        let w = g.constant(Tensor::new(g.shape(out), weights[..len].to_vec())?)?;
        g.sum(g.mul(out, w)?)
    })
    .unwrap();
    assert!(report.inert.is_empty());
    report.max_rel_error
}

#[test]
fn video_encoder_input_gradient() {
    let e = input_gradcheck(&[3, 4, 4, 4, 1], 5, |m, f, x| m.encode_video(f, x));
    assert!(e <= 1e-5, "{e}");
}

#[test]
fn audio_encoder_input_gradient() {
    let e = input_gradcheck(&[3, 8, 8], 6, |m, f, x| m.encode_audio(f, x));
    assert!(e <= 1e-5, "{e}");
}

#[test]
fn projector_and_predictor_gradients() {
    let e = input_gradcheck(&[4, 6], 7, |m, f, x| m.project(f, Modality::Audio, x));
    assert!(e <= 1e-5, "{e}");
    let e = input_gradcheck(&[4, 5], 8, |m, f, x| m.predict(f, Modality::Video, x));
    assert!(e <= 1e-5, "{e}");
    let e = input_gradcheck(&[4, 12], 9, |m, f, x| m.head(f, Head::Order(Modality::Video, Modality::Audio), x));
    assert!(e <= 1e-5, "{e}");
}

#[test]
fn temporal_loss_gradient() {
    let mut r = rng(10);
    let labels: Vec<Vec<usize>> = [4, 4, 2, 2, 3, 3, 3, 3].iter().map(|&c| (0..5).map(|_| r.gen_range(0..c)).collect()).collect();
    let params: Vec<Tensor> = [4, 4, 2, 2, 3, 3, 3, 3]
        .iter()
        .map(|&c| Tensor::new(vec![5, c], gaussian(&mut r, 5 * c)).unwrap())
        .collect();
    let report = finite_diff_check(&params, 1e-5, &Coords::All, |g, v| {
        let tb = |i: usize| TaskBatch { logits: v[i], labels: &labels[i] };
        Ok(temporal_losses(g, &[tb(0), tb(1)], &[tb(2), tb(3)], &[tb(4), tb(5), tb(6), tb(7)])?.total)
    })
    .unwrap();
    assert!(report.passes(1e-5, 0.0), "{report:?}");
}

// ---- contrastive

#[test]
fn neighbour_ranks_in_small_bank() {
    let mut bank = MemoryBank::new(8, 2).unwrap();
    for c in [0.9f64, 0.1, 0.5] {
        bank.push_value(&[c, (1.0 - c * c).sqrt()]).unwrap();
    }
    assert_eq!(bank.nearest_neighbors(&[1.0, 0.0], 1, 2).unwrap(), vec![0, 2]);
}

#[test]
fn neighbour_weight_example() {
    let w = nn_weights(&[1.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]], 0.2).unwrap();
    let e5 = 5f64.exp();
    assert!((w[0] - e5 / (e5 + 1.0)).abs() < 1e-15);
    assert!((w[1] - 1.0 / (e5 + 1.0)).abs() < 1e-15);
    // the commonly quoted 0.99334 / 0.00666 are rounded loosely
    assert!((w[0] - 0.99334).abs() < 5e-5 && (w[1] - 0.00666).abs() < 5e-5);
}

#[test]
fn bank_positives_once_bank_holds_k() {
    let mut r = rng(12);
    let cfg = LossConfig::default();
    let mut bank = MemoryBank::new(16, 4).unwrap();
    let q = gaussian(&mut r, 4);
    for filled in 1..=7 {
        bank.push_value(&gaussian(&mut r, 4)).unwrap();
        let pairs = build_pairs(Source::Batch { set: 0, row: 0 }, &q, vec![], &bank, &cfg).unwrap();
        let from_bank: Vec<(usize, f64)> = pairs
            .positives
            .iter()
            .filter_map(|(s, w)| match s {
                Source::Bank(a) => Some((*a, *w)),
                Source::Batch { .. } => None,
            })
            .collect();
        assert_eq!(from_bank.len(), filled.min(5));
        // weights recomputed from the bank contents
        let raw: Vec<f64> = from_bank
            .iter()
            .map(|&(a, _)| {
                let e = bank.get(a);
                let dot: f64 = q.iter().zip(e).map(|(x, y)| x * y).sum();
                let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                (dot / (n(&q) * n(e)) / 0.2).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        for ((_, w), r) in from_bank.iter().zip(&raw) {
            assert!((w - r / total).abs() < 1e-12);
        }
        assert!((from_bank.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_positive_single_orthogonal_negative() {
    let g = Graph::new();
    let a = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
    let p = g.constant(Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap()).unwrap();
    let n = g.constant(Tensor::new(vec![1, 2], vec![0.0, 3.0]).unwrap()).unwrap();
    let l = g.item(contrastive_loss(&g, a, p, &[1.0], Some(n), 0.2).unwrap()).unwrap();
    let e5 = 5f64.exp();
    assert!((l + (e5 / (e5 + 1.0)).ln()).abs() < 1e-14);
    assert!((l - 0.0067157).abs() < 1e-6);
}

#[test]
fn duplicated_pairs_loss_decreases() {
    // Instances are random directions; each pair shares the direction and
    // adds noise orthogonal to it. A linear embedding is trained with the
    // batch contrastive loss.
    let mut r = rng(13);
    let (b, din, d) = (8, 12, 6);
    let mut views = [Vec::new(), Vec::new()];
    for _ in 0..b {
        let base = gaussian(&mut r, din);
        let bn: f64 = base.iter().map(|x| x * x).sum();
        for v in &mut views {
            let noise = gaussian(&mut r, din);
            let proj: f64 = noise.iter().zip(&base).map(|(x, y)| x * y).sum::<f64>() / bn;
            v.extend(base.iter().zip(&noise).map(|(x, n)| x + 0.3 * (n - proj * x)));
        }
    }
    let x: Vec<Tensor> = views.iter().map(|v| Tensor::new(vec![b, din], v.clone()).unwrap()).collect();
    let mut params = vec![Tensor::new(vec![din, d], gaussian(&mut r, din * d).iter().map(|v| 0.3 * v).collect()).unwrap()];
    let bank = MemoryBank::new(1, d).unwrap();
    let loss_at = |params: &[Tensor]| {
        let g = Graph::new();
        let w = g.param(params[0].clone()).unwrap();
        let e0 = g.matmul(g.constant(x[0].clone()).unwrap(), w).unwrap();
        let e1 = g.matmul(g.constant(x[1].clone()).unwrap(), w).unwrap();
        let mut losses = Vec::new();
        for i in 0..b {
            let anchor = g.slice(e0, 0, i, i + 1).unwrap();
            let pos = gather(&g, &[Source::Batch { set: 0, row: i }], &[e1], &bank).unwrap();
            let negs: Vec<Source> = (0..b).filter(|&j| j != i).map(|row| Source::Batch { set: 0, row }).collect();
            let neg = gather(&g, &negs, &[e1], &bank).unwrap();
            losses.push(contrastive_loss(&g, anchor, pos, &[1.0], Some(neg), 0.2).unwrap());
        }
        let loss = g.mean(g.concat(&losses, 0).unwrap()).unwrap();
        let value = g.item(loss).unwrap();
        let grad = g.backward(loss).unwrap().wrt(w);
        (value, grad)
    };
    let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
    let mut state = AdamState::new(&params);
    let mut history = Vec::new();
    for _ in 0..100 {
        let (l, grad) = loss_at(&params);
        history.push(l);
        opt.step(&mut params, &[grad], &mut state, 1e-2).unwrap();
    }
    let head: f64 = history[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = history[90..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
    // mostly downhill, allowing Adam's occasional overshoot
    let rises = history.windows(2).filter(|w| w[1] > w[0] + 1e-3).count();
    assert!(rises <= 10, "{rises} rises");
}

// ---- temporal sampling and optimizer

#[test]
fn temporal_labels_are_uniform() {
    let mut r = rng(20);
    let mut counts = [0usize; 8];
    for _ in 0..8000 {
        let p = sample_temporal_params(&mut r, 16, 128).unwrap();
        counts[p.speed.class() * 2 + p.direction.class()] += 1;
    }
    let sigma = (8000.0f64 * 0.125 * 0.875).sqrt();
    for c in counts {
        assert!((c as f64 - 1000.0).abs() <= 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn adamw_descends_a_parabola() {
    let opt = AdamW::default();
    let mut x = vec![Tensor::vector(vec![1.0])];
    let mut state = AdamState::new(&x);
    let mut prev = 1.0;
    for _ in 0..10 {
        let grad = Tensor::vector(vec![2.0 * x[0].data()[0]]);
        opt.step(&mut x, &[grad], &mut state, 0.05).unwrap();
        let f = x[0].data()[0].powi(2);
        assert!(f < prev);
        prev = f;
    }
}

// ---- evaluation

#[test]
fn random_features_retrieve_at_chance() {
    let mut r = rng(15);
    let (c, nq, ni, d) = (4, 400, 2000, 8);
    let mk = |r: &mut ChaCha8Rng, n: usize| {
        let rows = (0..n).map(|_| gaussian(r, d)).collect();
        let classes = (0..n).map(|_| r.gen_range(0..c)).collect();
        table(FeatureKind::Video, rows, classes)
    };
    let (q, i) = (mk(&mut r, nq), mk(&mut r, ni));
    let r1 = knn_retrieval_eval(&q, &i, &[1]).unwrap()[0].value;
    let p = 1.0 / c as f64;
    assert!((r1 - p).abs() <= 3.0 * (p * (1.0 - p) / nq as f64).sqrt(), "{r1}");
}

#[test]
fn hand_built_ranking() {
    // cosines to the query [1, 0]: 0 -> 0.6, 1 -> 1.0, 2 -> -1.0, 3 -> 0.8
    let index = table(
        FeatureKind::Video,
        vec![vec![0.6, 0.8], vec![5.0, 0.0], vec![-1.0, 0.0], vec![0.8, -0.6]],
        vec![0, 1, 1, 0],
    );
    assert_eq!(avcontrast::eval::rank_by_cosine(&[1.0, 0.0], &index.rows), vec![1, 3, 0, 2]);
    let query = table(FeatureKind::Video, vec![vec![1.0, 0.0]], vec![0]);
    let recall = knn_retrieval_eval(&query, &index, &[1, 2]).unwrap();
    assert_eq!((recall[0].value, recall[1].value), (0.0, 1.0));
}

#[test]
fn shuffled_embeddings_fingerprint_at_chance() {
    let mut r = rng(16);
    let (n, trials) = (50, 40);
    let mut hits = 0.0;
    for _ in 0..trials {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| gaussian(&mut r, 6)).collect();
        let index = table(FeatureKind::Video, rows, vec![0; n]);
        let query = table(FeatureKind::Video, (0..n).map(|_| gaussian(&mut r, 6)).collect(), vec![0; n]);
        hits += fingerprint_eval(&index, &query, &[1]).unwrap()[0].value * n as f64;
    }
    let total = (n * trials) as f64;
    let p = 1.0 / n as f64;
    assert!((hits - total * p).abs() <= 3.0 * (total * p * (1.0 - p)).sqrt(), "{hits}");
}

#[test]
fn separable_blobs_probe_perfectly() {
    let mut r = rng(17);
    let mk = |r: &mut ChaCha8Rng, n: usize| {
        let classes: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let rows = classes
            .iter()
            .map(|&c| {
                let mut v = gaussian(r, 4).iter().map(|x| 0.3 * x).collect::<Vec<_>>();
                v[0] += if c == 0 { -2.0 } else { 2.0 };
                v
            })
            .collect();
        table(FeatureKind::Fused, rows, classes)
    };
    let (train, test) = (mk(&mut r, 60), mk(&mut r, 40));
    assert_eq!(linear_probe_eval(&train, &test, 300, 0.1).unwrap(), 1.0);
}

#[test]
fn shuffled_labels_probe_at_chance() {
    let mut r = rng(18);
    let c = 3;
    let mk = |r: &mut ChaCha8Rng, n: usize| {
        let rows = (0..n).map(|_| gaussian(r, 5)).collect();
        let classes = (0..n).map(|_| r.gen_range(0..c)).collect();
        table(FeatureKind::Fused, rows, classes)
    };
    let (train, test) = (mk(&mut r, 300), mk(&mut r, 600));
    let acc = linear_probe_eval(&train, &test, 200, 0.1).unwrap();
    let p = 1.0 / c as f64;
    assert!((acc - p).abs() <= 3.0 * (p * (1.0 - p) / 600.0).sqrt(), "{acc}");
}
