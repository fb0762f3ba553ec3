//! Frozen-feature evaluation: class retrieval, fingerprint retrieval,
//! linear probes and temporal task accuracy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{manipulate, Suite};
use crate::data::{AvSample, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{Forward, Head, Mode, Model, ModelState, Modality};
use crate::rng::tag;
use crate::tensor::{Graph, Tensor, Var};
use crate::train::batch::{audio_spec, eval_crops, make_batch, video_clip};
use crate::train::RunConfig;

/// Clips encoded per graph during feature extraction.
const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Video,
    Audio,
    Fused,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [FeatureKind::Video, FeatureKind::Audio, FeatureKind::Fused];

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Video => "video",
            FeatureKind::Audio => "audio",
            FeatureKind::Fused => "fused",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown modality `{s}` (expected video|audio|fused)")))
    }
}

/// One feature row per instance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub kind: FeatureKind,
    pub ids: Vec<usize>,
    pub classes: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Row-wise concatenation of a video and an audio table over the same
    /// instances.
    pub fn fuse(video: &FeatureTable, audio: &FeatureTable) -> Result<FeatureTable> {
        if video.ids != audio.ids {
            return Err(Error::invalid("fused tables must cover the same instances"));
        }
        Ok(FeatureTable {
            kind: FeatureKind::Fused,
            ids: video.ids.clone(),
            classes: video.classes.clone(),
            rows: video
                .rows
                .iter()
                .zip(&audio.rows)
                .map(|(v, a)| v.iter().chain(a).copied().collect())
                .collect(),
        })
    }
}

/// Per-coordinate standardization with statistics of a reference table.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    /// Mean and population standard deviation; constant coordinates keep
    /// a unit scale.
    pub fn fit(table: &FeatureTable) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::invalid("cannot standardize with an empty table"));
        }
        let (n, w) = (table.len() as f64, table.width());
        let mut mean = vec![0.0; w];
        for r in &table.rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; w];
        for r in &table.rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, table: &FeatureTable) -> Result<FeatureTable> {
        if table.width() != self.mean.len() {
            return Err(Error::shape("standardize", "table width"));
        }
        let rows = table
            .rows
            .iter()
            .map(|r| r.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect())
            .collect();
        Ok(FeatureTable {
            rows,
            ..table.clone()
        })
    }
}

fn eval_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.audio.randomize_hop = false;
    c.train.spatial_augment = false;
    c
}

fn encode_chunk(model: &Model, state: &ModelState, m: Modality, shape: &[usize], data: Vec<f64>) -> Result<Vec<Vec<f64>>> {
    let g = Graph::new();
    let vars = state.bind(&g, false)?;
    let mut f = Forward::new(&g, &vars, &state.running, Mode::Eval);
    let x = g.constant(Tensor::new(shape.to_vec(), data)?)?;
    let feats = model.encode(&mut f, m, x)?;
    let t = g.value(feats);
    Ok((0..shape[0]).map(|i| t.row(i).to_vec()).collect())
}

/// Raw encoder features per sample, averaged over evenly spaced forward
/// crops.
pub fn extract_features(
    model: &Model,
    state: &ModelState,
    samples: &[AvSample],
    cfg: &RunConfig,
    m: Modality,
) -> Result<FeatureTable> {
    let cfg = eval_config(cfg);
    let dims = cfg.input_dims();
    let item: Vec<usize> = match m {
        Modality::Video => vec![dims.frames, dims.height, dims.width, dims.channels],
        Modality::Audio => vec![dims.spec_size, dims.spec_size],
    };
    let crops = cfg.eval.crops;
    // no randomness is drawn with hop randomization off
    let mut rng = crate::rng::rng_for(cfg.seed, &[tag::EVAL]);
    let mut clips: Vec<Vec<f64>> = Vec::with_capacity(samples.len() * crops);
    for s in samples {
        for p in eval_crops(s.meta.frames, dims.frames, crops)? {
            clips.push(match m {
                Modality::Video => video_clip(s, &p)?,
                Modality::Audio => audio_spec(s, &p, &cfg, &mut rng)?,
            });
        }
    }
    let mut feats = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(CHUNK) {
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(&item);
        feats.extend(encode_chunk(model, state, m, &shape, chunk.concat())?);
    }
    let rows = feats
        .chunks(crops)
        .map(|group| {
            let mut mean = vec![0.0; group[0].len()];
            for r in group {
                mean.iter_mut().zip(r).for_each(|(a, v)| *a += v / crops as f64);
            }
            mean
        })
        .collect();
    Ok(FeatureTable {
        kind: match m {
            Modality::Video => FeatureKind::Video,
            Modality::Audio => FeatureKind::Audio,
        },
        ids: samples.iter().map(|s| s.meta.instance_id).collect(),
        classes: samples.iter().map(|s| s.meta.class_id).collect(),
        rows,
    })
}

/// Raw video and audio features of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitFeatures {
    pub video: FeatureTable,
    pub audio: FeatureTable,
}

impl SplitFeatures {
    pub fn extract(model: &Model, state: &ModelState, samples: &[AvSample], cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            video: extract_features(model, state, samples, cfg, Modality::Video)?,
            audio: extract_features(model, state, samples, cfg, Modality::Audio)?,
        })
    }

    /// Standardized table of `kind`; fused rows concatenate the separately
    /// standardized modalities.
    pub fn table(&self, kind: FeatureKind, norm: &Normalizer) -> Result<FeatureTable> {
        match kind {
            FeatureKind::Video => norm.video.apply(&self.video),
            FeatureKind::Audio => norm.audio.apply(&self.audio),
            FeatureKind::Fused => FeatureTable::fuse(&norm.video.apply(&self.video)?, &norm.audio.apply(&self.audio)?),
        }
    }
}

/// Per-modality standardizers, fit on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub video: Standardizer,
    pub audio: Standardizer,
}

impl Normalizer {
    pub fn fit(train: &SplitFeatures) -> Result<Self> {
        Ok(Self {
            video: Standardizer::fit(&train.video)?,
            audio: Standardizer::fit(&train.audio)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub k: usize,
    pub value: f64,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Index rows by descending cosine similarity to `query`; ties keep index
/// order. Zero vectors have similarity 0 to everything.
pub fn rank_by_cosine(query: &[f64], index: &[Vec<f64>]) -> Vec<usize> {
    let q = unit(query);
    let mut scored: Vec<(f64, usize)> = index
        .iter()
        .enumerate()
        .map(|(i, r)| (unit(r).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>(), i))
        .collect();
    // `+ 0.0` folds -0.0 into 0.0 so that equal scores really tie.
    scored.sort_by(|a, b| (b.0 + 0.0).total_cmp(&(a.0 + 0.0)));
    scored.into_iter().map(|(_, i)| i).collect()
}

fn recall_at(query: &FeatureTable, index: &FeatureTable, ks: &[usize], hit: impl Fn(usize, usize) -> bool) -> Result<Vec<Recall>> {
    if query.is_empty() || index.is_empty() {
        return Err(Error::invalid("retrieval needs non-empty tables"));
    }
    if query.width() != index.width() {
        return Err(Error::shape("retrieval", format!("query width {} vs index width {}", query.width(), index.width())));
    }
    let mut hits = vec![0usize; ks.len()];
    for (qi, row) in query.rows.iter().enumerate() {
        let ranking = rank_by_cosine(row, &index.rows);
        let first = ranking.iter().position(|&ii| hit(qi, ii));
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first.is_some_and(|p| p < k) {
                *h += 1;
            }
        }
    }
    Ok(ks
        .iter()
        .zip(hits)
        .map(|(&k, h)| Recall {
            k,
            value: h as f64 / query.len() as f64,
        })
        .collect())
}

/// Fraction of queries with a same-class item among the top `k`.
pub fn knn_retrieval_eval(query: &FeatureTable, index: &FeatureTable, ks: &[usize]) -> Result<Vec<Recall>> {
    recall_at(query, index, ks, |q, i| query.classes[q] == index.classes[i])
}

/// Fraction of manipulated queries whose own clean instance is among the
/// top `k`.
pub fn fingerprint_eval(index: &FeatureTable, query: &FeatureTable, ks: &[usize]) -> Result<Vec<Recall>> {
    let mut a = index.ids.clone();
    let mut b = query.ids.clone();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(Error::invalid("fingerprint query and index cover different instances"));
    }
    recall_at(query, index, ks, |q, i| query.ids[q] == index.ids[i])
}

/// Softmax regression on frozen features by full-batch gradient descent
/// from zero weights; returns test accuracy.
pub fn linear_probe_eval(train: &FeatureTable, test: &FeatureTable, iters: usize, lr: f64) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("probe needs non-empty tables"));
    }
    if train.width() != test.width() {
        return Err(Error::shape("linear_probe", "train and test widths differ"));
    }
    let classes = train.classes.iter().max().unwrap() + 1;
    let distinct: std::collections::BTreeSet<_> = train.classes.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::invalid("probe needs at least two classes"));
    }
    let classes = classes.max(test.classes.iter().max().unwrap() + 1);
    let (w, n) = (train.width(), train.len() as f64);
    let mut weights = vec![0.0; w * classes];
    let mut bias = vec![0.0; classes];
    let logits = |x: &[f64], weights: &[f64], bias: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| bias[c] + x.iter().enumerate().map(|(j, v)| v * weights[j * classes + c]).sum::<f64>())
            .collect()
    };
    for _ in 0..iters {
        let mut gw = vec![0.0; w * classes];
        let mut gb = vec![0.0; classes];
        for (x, &y) in train.rows.iter().zip(&train.classes) {
            let mut p = logits(x, &weights, &bias);
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            p.iter_mut().for_each(|v| *v = (*v - max).exp());
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            p[y] -= 1.0;
            for (j, v) in x.iter().enumerate() {
                for c in 0..classes {
                    gw[j * classes + c] += v * p[c] / n;
                }
            }
            gb.iter_mut().zip(&p).for_each(|(g, d)| *g += d / n);
        }
        weights.iter_mut().zip(&gw).for_each(|(a, g)| *a -= lr * g);
        bias.iter_mut().zip(&gb).for_each(|(a, g)| *a -= lr * g);
    }
    let correct = test
        .rows
        .iter()
        .zip(&test.classes)
        .filter(|(x, &y)| argmax(&logits(x, &weights, &bias)) == y)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

/// Held-out accuracy of every temporal task head.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub speed_video: f64,
    pub speed_audio: f64,
    pub direction_video: f64,
    pub direction_audio: f64,
    /// Pairings video-video, audio-audio, video-audio, audio-video.
    pub order: [f64; 4],
}

impl TaskAccuracy {
    pub fn speed(&self) -> f64 {
        (self.speed_video + self.speed_audio) / 2.0
    }

    pub fn direction(&self) -> f64 {
        (self.direction_video + self.direction_audio) / 2.0
    }

    pub fn ordering(&self) -> f64 {
        self.order.iter().sum::<f64>() / 4.0
    }
}

fn hits(g: &Graph, logits: Var, labels: &[usize]) -> usize {
    let t = g.value(logits);
    labels.iter().enumerate().filter(|(i, &y)| argmax(t.row(*i)) == y).count()
}

/// Task accuracy on freshly labelled clips of `samples` (eval-mode batch
/// norm, no spatial augmentation), `cfg.eval.task_rounds` clips per sample.
pub fn task_accuracy(model: &Model, state: &ModelState, samples: &[AvSample], cfg: &RunConfig) -> Result<TaskAccuracy> {
    let cfg = eval_config(cfg);
    let chunk = cfg.train.batch_size.max(2);
    let mut counts = [0usize; 8];
    let mut total_views = 0usize;
    let mut total_pairs = 0usize;
    for round in 0..cfg.eval.task_rounds {
        for (c, group) in samples.chunks(chunk).enumerate() {
            let refs: Vec<&AvSample> = if group.len() == 1 {
                // batch assembly needs two samples; duplicate a lone one
                vec![&group[0], &group[0]]
            } else {
                group.iter().collect()
            };
            let batch = make_batch(&refs, &cfg, &[tag::EVAL, round as u64, c as u64])?;
            let b = batch.size;
            let g = Graph::new();
            let vars = state.bind(&g, false)?;
            let mut f = Forward::new(&g, &vars, &state.running, Mode::Eval);
            let fv = model.encode_video(&mut f, g.constant(batch.video.clone())?)?;
            let fa = model.encode_audio(&mut f, g.constant(batch.audio.clone())?)?;
            let rows = |x: Var, k: usize| g.slice(x, 0, k * b, (k + 1) * b);
            let views_v = g.slice(fv, 0, 0, 2 * b)?;
            let views_a = g.slice(fa, 0, 0, 2 * b)?;
            let speed = batch.speed.concat();
            let direction = batch.direction.concat();
            let (v, a) = (Modality::Video, Modality::Audio);
            counts[0] += hits(&g, model.head(&mut f, Head::Speed(v), views_v)?, &speed);
            counts[1] += hits(&g, model.head(&mut f, Head::Speed(a), views_a)?, &speed);
            counts[2] += hits(&g, model.head(&mut f, Head::Direction(v), views_v)?, &direction);
            counts[3] += hits(&g, model.head(&mut f, Head::Direction(a), views_a)?, &direction);
            let pairs = [
                (Head::Order(v, v), rows(fv, 2)?, rows(fv, 3)?),
                (Head::Order(a, a), rows(fa, 2)?, rows(fa, 3)?),
                (Head::Order(v, a), rows(fv, 4)?, rows(fa, 4)?),
                (Head::Order(a, v), rows(fa, 5)?, rows(fv, 5)?),
            ];
            for (i, (head, first, second)) in pairs.into_iter().enumerate() {
                let x = g.concat(&[first, second], 1)?;
                counts[4 + i] += hits(&g, model.head(&mut f, head, x)?, &batch.order[i]);
            }
            total_views += 2 * b;
            total_pairs += b;
        }
    }
    if total_views == 0 {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let tv = total_views as f64;
    let tp = total_pairs as f64;
    Ok(TaskAccuracy {
        speed_video: counts[0] as f64 / tv,
        speed_audio: counts[1] as f64 / tv,
        direction_video: counts[2] as f64 / tv,
        direction_audio: counts[3] as f64 / tv,
        order: [
            counts[4] as f64 / tp,
            counts[5] as f64 / tp,
            counts[6] as f64 / tp,
            counts[7] as f64 / tp,
        ],
    })
}

/// Class retrieval and probe accuracy for one feature kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityReport {
    pub modality: FeatureKind,
    pub retrieval: Vec<Recall>,
    pub probe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerprintReport {
    pub suite: Suite,
    pub modality: FeatureKind,
    pub recall: Vec<Recall>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub modalities: Vec<ModalityReport>,
    pub tasks: Option<TaskAccuracy>,
    pub fingerprint: Vec<FingerprintReport>,
}

impl EvalReport {
    pub fn modality(&self, kind: FeatureKind) -> Option<&ModalityReport> {
        self.modalities.iter().find(|m| m.modality == kind)
    }

    pub fn fingerprint(&self, suite: Suite, kind: FeatureKind) -> Option<&FingerprintReport> {
        self.fingerprint.iter().find(|f| f.suite == suite && f.modality == kind)
    }
}

/// Every protocol on a clean dataset: test queries against the train index,
/// probes trained on train, task heads on test, and fingerprinting of each
/// suite's manipulated test split against the clean one.
pub fn evaluate(model: &Model, state: &ModelState, cfg: &RunConfig, data: &Dataset, suites: &[Suite]) -> Result<EvalReport> {
    let train = data.split(Split::Train)?;
    let test = data.split(Split::Test)?;
    let train_f = SplitFeatures::extract(model, state, train, cfg)?;
    let test_f = SplitFeatures::extract(model, state, test, cfg)?;
    let norm = Normalizer::fit(&train_f)?;
    let mut report = EvalReport::default();
    for kind in FeatureKind::ALL {
        let index = train_f.table(kind, &norm)?;
        let query = test_f.table(kind, &norm)?;
        report.modalities.push(ModalityReport {
            modality: kind,
            retrieval: knn_retrieval_eval(&query, &index, &cfg.eval.ks)?,
            probe: linear_probe_eval(&index, &query, cfg.eval.probe_iters, cfg.eval.probe_lr)?,
        });
    }
    if cfg.train.temporal_weight != 0.0 {
        report.tasks = Some(task_accuracy(model, state, test, cfg)?);
    }
    for &suite in suites {
        let seed = crate::rng::derive_seed(cfg.seed, &[tag::MANIPULATE, suite as u64]);
        let manipulated = test
            .iter()
            .map(|s| manipulate(s, &data.manifest.config, suite, seed, &cfg.eval.manipulation))
            .collect::<Result<Vec<_>>>()?;
        let aug_f = SplitFeatures::extract(model, state, &manipulated, cfg)?;
        for kind in FeatureKind::ALL {
            report.fingerprint.push(FingerprintReport {
                suite,
                modality: kind,
                recall: fingerprint_eval(&test_f.table(kind, &norm)?, &aug_f.table(kind, &norm)?, &cfg.eval.ks)?,
            });
        }
    }
    Ok(report)
}
