//! Nearest-neighbour augmented contrastive objective over video and audio
//! embeddings, with memory banks and the ablation variants.

mod bank;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bank::{cosine, nn_weights, similarity, MemoryBank};

use crate::error::{Error, Result};
use crate::model::Modality;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ours,
    NoBankPos,
    NoBankNeg,
    HardNeg,
    EasyNeg,
    UniformW,
    Nnclr,
    Simclr,
    Simsiam,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Ours,
        Variant::NoBankPos,
        Variant::NoBankNeg,
        Variant::HardNeg,
        Variant::EasyNeg,
        Variant::UniformW,
        Variant::Nnclr,
        Variant::Simclr,
        Variant::Simsiam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::NoBankPos => "no_bank_pos",
            Variant::NoBankNeg => "no_bank_neg",
            Variant::HardNeg => "hard_neg",
            Variant::EasyNeg => "easy_neg",
            Variant::UniformW => "uniform_w",
            Variant::Nnclr => "nnclr",
            Variant::Simclr => "simclr",
            Variant::Simsiam => "simsiam",
        }
    }

    /// Whether anchors pass through the predictor MLP.
    pub fn uses_predictor(self) -> bool {
        self != Variant::Simclr
    }

    /// Whether positives and negatives are treated as constants.
    pub fn stops_gradient(self) -> bool {
        self != Variant::Simclr
    }

    fn bank_positives(self) -> bool {
        matches!(
            self,
            Variant::Ours | Variant::NoBankNeg | Variant::HardNeg | Variant::EasyNeg | Variant::UniformW
        )
    }

    fn bank_negatives(self) -> bool {
        matches!(
            self,
            Variant::Ours | Variant::NoBankPos | Variant::HardNeg | Variant::EasyNeg | Variant::UniformW
        )
    }

    fn batch_negatives(self) -> bool {
        self != Variant::Simsiam
    }

    /// Whether the variant reads the memory banks at all.
    pub fn uses_bank(self) -> bool {
        self.bank_positives() || self.bank_negatives() || self == Variant::Nnclr
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown loss variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    /// Bank neighbours added as positives.
    pub neighbors: usize,
    /// Rank percentile where bank negatives start.
    pub negative_percentile: f64,
    /// Bank negatives per anchor.
    pub bank_negatives: usize,
    pub bank_size: usize,
    pub use_vv: bool,
    pub use_av_va: bool,
    pub use_aa: bool,
    /// Cross-modal positives share the anchor's temporal view.
    pub aligned: bool,
    /// One bank fed by both modalities.
    pub shared_bank: bool,
    /// Evaluate every term with both views as anchors and average.
    pub symmetric: bool,
    pub variant: Variant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            neighbors: 5,
            negative_percentile: 0.5,
            bank_negatives: 256,
            bank_size: 2048,
            use_vv: true,
            use_av_va: true,
            use_aa: false,
            aligned: true,
            shared_bank: false,
            symmetric: true,
            variant: Variant::Ours,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("loss.temperature must be positive".into()));
        }
        if self.neighbors == 0 {
            return Err(Error::Config("loss.neighbors must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.negative_percentile) {
            return Err(Error::Config("loss.negative_percentile must lie in [0, 1]".into()));
        }
        if self.bank_size == 0 {
            return Err(Error::Config("loss.bank_size must be positive".into()));
        }
        Ok(())
    }

    /// Percentile where bank negatives start, after the variant override.
    pub fn percentile(&self) -> f64 {
        match self.variant {
            Variant::HardNeg => 0.9,
            Variant::EasyNeg => 0.2,
            _ => self.negative_percentile,
        }
    }
}

/// Where a positive or negative embedding comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    /// Row of one of the batch target matrices.
    Batch { set: usize, row: usize },
    /// Bank entry by age index.
    Bank(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSets {
    pub positives: Vec<(Source, f64)>,
    pub negatives: Vec<Source>,
}

/// Rank window `[q, q + m)` (1-based) of bank negatives for a bank of
/// `count` entries, clamped to the entries present.
pub fn negative_ranks(count: usize, percentile: f64, m: usize) -> std::ops::Range<usize> {
    if count == 0 || m == 0 {
        return 1..1;
    }
    let q = ((percentile * count as f64).ceil() as usize).clamp(1, count);
    q..(q + m).min(count + 1)
}

/// Positive and negative sets for one anchor.
///
/// `exact` is the anchor's own positive and `query` its value, used for
/// bank lookups. `batch_negatives` are the other instances' batch rows.
pub fn build_pairs(
    exact: Source,
    query: &[f64],
    batch_negatives: Vec<Source>,
    bank: &MemoryBank,
    cfg: &LossConfig,
) -> Result<PairSets> {
    let v = cfg.variant;
    let ranking = if v.uses_bank() && !bank.is_empty() {
        bank.ranking(query)?
    } else {
        Vec::new()
    };
    let mut positives = Vec::new();
    if v == Variant::Nnclr {
        match ranking.first() {
            Some(&age) => positives.push((Source::Bank(age), 1.0)),
            None => positives.push((exact, 1.0)),
        }
    } else {
        positives.push((exact, 1.0));
    }
    if v.bank_positives() && !ranking.is_empty() {
        let nn = &ranking[..cfg.neighbors.min(ranking.len())];
        let weights = if v == Variant::UniformW {
            vec![1.0; nn.len()]
        } else {
            let entries: Vec<&[f64]> = nn.iter().map(|&a| bank.get(a)).collect();
            nn_weights(query, &entries, cfg.temperature)?
        };
        positives.extend(nn.iter().zip(weights).map(|(&a, w)| (Source::Bank(a), w)));
    }
    let mut negatives = if v.batch_negatives() { batch_negatives } else { Vec::new() };
    if v.bank_negatives() {
        let ranks = negative_ranks(ranking.len(), cfg.percentile(), cfg.bank_negatives);
        negatives.extend(ranks.map(|r| Source::Bank(ranking[r - 1])));
    }
    Ok(PairSets { positives, negatives })
}

/// Stacks the rows named by `sources` into one `[len, D]` matrix.
pub fn gather(g: &Graph, sources: &[Source], sets: &[Var], bank: &MemoryBank) -> Result<Var> {
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < sources.len() {
        let mut j = i + 1;
        match sources[i] {
            Source::Batch { set, .. } => {
                while j < sources.len() && matches!(sources[j], Source::Batch { set: s, .. } if s == set) {
                    j += 1;
                }
                let rows: Vec<usize> = sources[i..j]
                    .iter()
                    .map(|s| match s {
                        Source::Batch { row, .. } => *row,
                        Source::Bank(_) => unreachable!(),
                    })
                    .collect();
                let m = *sets.get(set).ok_or_else(|| Error::invalid("batch source set out of range"))?;
                pieces.push(g.index_select(m, &rows)?);
            }
            Source::Bank(_) => {
                while j < sources.len() && matches!(sources[j], Source::Bank(_)) {
                    j += 1;
                }
                let mut data = Vec::with_capacity((j - i) * bank.dim());
                for s in &sources[i..j] {
                    if let Source::Bank(a) = s {
                        data.extend_from_slice(bank.get(*a));
                    }
                }
                pieces.push(g.constant(Tensor::new(vec![j - i, bank.dim()], data)?)?);
            }
        }
        i = j;
    }
    if pieces.len() == 1 {
        Ok(pieces[0])
    } else {
        g.concat(&pieces, 0)
    }
}

/// Weighted contrastive loss of one anchor `[1, D]`:
/// `sum_p -w_p * log(d(a, p) / (d(a, p) + sum_n d(a, n)))` with
/// `d(x, y) = exp(cos(x, y) / temperature)`.
pub fn contrastive_loss(
    g: &Graph,
    anchor: Var,
    positives: Var,
    weights: &[f64],
    negatives: Option<Var>,
    temperature: f64,
) -> Result<Var> {
    let p = g.shape(positives)[0];
    if p == 0 || weights.len() != p {
        return Err(Error::invalid("contrastive loss needs positives with one weight each"));
    }
    let unit = |x: Var| g.div(x, g.l2_norm(x)?);
    let a = unit(anchor)?;
    let at = g.transpose(a)?;
    let sp = g.matmul(unit(positives)?, at)?;
    let mut logits = g.scale(sp, 1.0 / temperature)?;
    if let Some(neg) = negatives {
        let n = g.shape(neg)[0];
        if n > 0 {
            let sn = g.matmul(a, g.transpose(unit(neg)?)?)?;
            let sn = g.scale(sn, 1.0 / temperature)?;
            let sn = g.add(sn, g.constant(Tensor::zeros(&[p, n]))?)?;
            logits = g.concat(&[logits, sn], 1)?;
        }
    }
    let log_prob = g.slice(g.log_softmax(logits)?, 1, 0, 1)?;
    let w = g.constant(Tensor::new(vec![p, 1], weights.to_vec())?)?;
    g.neg(g.sum(g.mul(log_prob, w)?)?)
}

/// Memory banks, one per modality or a single shared one.
#[derive(Clone, Debug, PartialEq)]
pub struct Banks {
    pub queues: Vec<MemoryBank>,
}

impl Banks {
    pub fn new(cfg: &LossConfig, dim: usize) -> Result<Self> {
        let n = if cfg.shared_bank { 1 } else { 2 };
        Ok(Self {
            queues: (0..n).map(|_| MemoryBank::new(cfg.bank_size, dim)).collect::<Result<_>>()?,
        })
    }

    pub fn shared(&self) -> bool {
        self.queues.len() == 1
    }

    /// Bank queried for neighbours of a `m` embedding.
    pub fn for_modality(&self, m: Modality) -> &MemoryBank {
        match m {
            Modality::Audio if !self.shared() => &self.queues[1],
            _ => &self.queues[0],
        }
    }

    /// Pushes each instance's view mean; `video` and `audio` are the two
    /// views' `[B, D]` embeddings. A shared bank receives the average of
    /// both modalities.
    pub fn update(&mut self, video: [&Tensor; 2], audio: [&Tensor; 2]) -> Result<()> {
        let b = video[0].shape()[0];
        for i in 0..b {
            let (v0, v1) = (video[0].row(i), video[1].row(i));
            let (a0, a1) = (audio[0].row(i), audio[1].row(i));
            if self.shared() {
                let vm: Vec<f64> = v0.iter().zip(v1).map(|(x, y)| (x + y) / 2.0).collect();
                let am: Vec<f64> = a0.iter().zip(a1).map(|(x, y)| (x + y) / 2.0).collect();
                self.queues[0].push(&vm, &am)?;
            } else {
                self.queues[0].push(v0, v1)?;
                self.queues[1].push(a0, a1)?;
            }
        }
        Ok(())
    }
}

/// Per-view embeddings of one batch, indexed `[view]`.
#[derive(Clone, Copy, Debug)]
pub struct ModalityViews {
    /// Projection outputs `[B, D]`.
    pub embed: [Var; 2],
    /// Anchors: predictor outputs, or the projections when the variant has
    /// no predictor.
    pub anchor: [Var; 2],
}

#[derive(Clone, Debug, Default)]
pub struct CrlTerms {
    pub vv: Option<f64>,
    pub va: Option<f64>,
    pub av: Option<f64>,
    pub aa: Option<f64>,
}

pub struct CrlLoss {
    pub total: Var,
    pub terms: CrlTerms,
}

struct Targets {
    vars: [[Var; 2]; 2],
    values: [[Tensor; 2]; 2],
}

fn midx(m: Modality) -> usize {
    match m {
        Modality::Video => 0,
        Modality::Audio => 1,
    }
}

/// Mean over anchors (and views, when symmetric) of one term. The anchor
/// of view `r` in modality `am` is contrasted with the row of the same
/// instance in `partner(r)` of modality `pm`.
fn term(
    g: &Graph,
    anchors: [Var; 2],
    am: Modality,
    pm: Modality,
    partner: impl Fn(usize) -> usize,
    targets: &Targets,
    banks: &Banks,
    cfg: &LossConfig,
) -> Result<Var> {
    let views: &[usize] = if cfg.symmetric { &[0, 1] } else { &[0] };
    let bank = banks.for_modality(pm);
    let mut losses = Vec::new();
    for &r in views {
        let p = partner(r);
        let exact_set = targets.vars[midx(pm)][p];
        let exact_vals = &targets.values[midx(pm)][p];
        let mut sets = vec![exact_set];
        if am != pm {
            sets.push(targets.vars[midx(am)][r]);
        }
        let b = exact_vals.shape()[0];
        for i in 0..b {
            let mut batch_neg: Vec<Source> = (0..b)
                .filter(|&j| j != i)
                .map(|row| Source::Batch { set: 0, row })
                .collect();
            if am != pm {
                batch_neg.extend((0..b).filter(|&j| j != i).map(|row| Source::Batch { set: 1, row }));
            }
            let pairs = build_pairs(Source::Batch { set: 0, row: i }, exact_vals.row(i), batch_neg, bank, cfg)?;
            let pos_src: Vec<Source> = pairs.positives.iter().map(|(s, _)| *s).collect();
            let weights: Vec<f64> = pairs.positives.iter().map(|(_, w)| *w).collect();
            let pos = gather(g, &pos_src, &sets, bank)?;
            let neg = if pairs.negatives.is_empty() {
                None
            } else {
                Some(gather(g, &pairs.negatives, &sets, bank)?)
            };
            let anchor = g.slice(anchors[r], 0, i, i + 1)?;
            losses.push(contrastive_loss(g, anchor, pos, &weights, neg, cfg.temperature)?);
        }
    }
    g.mean(g.concat(&losses, 0)?)
}

/// Sum of the enabled contrastive terms, each averaged over the batch.
/// Banks are read only; the caller pushes the batch afterwards.
pub fn crl_objective(g: &Graph, video: &ModalityViews, audio: &ModalityViews, banks: &Banks, cfg: &LossConfig) -> Result<CrlLoss> {
    let wrap = |v: Var| if cfg.variant.stops_gradient() { g.stop_gradient(v) } else { Ok(v) };
    let vars = [
        [wrap(video.embed[0])?, wrap(video.embed[1])?],
        [wrap(audio.embed[0])?, wrap(audio.embed[1])?],
    ];
    let values = [
        [g.value(vars[0][0]).clone(), g.value(vars[0][1]).clone()],
        [g.value(vars[1][0]).clone(), g.value(vars[1][1]).clone()],
    ];
    let targets = Targets { vars, values };
    let cross = |r: usize| if cfg.aligned { r } else { 1 - r };
    let (v, a) = (Modality::Video, Modality::Audio);

    let mut parts = Vec::new();
    let mut terms = CrlTerms::default();
    if cfg.use_vv {
        let t = term(g, video.anchor, v, v, |r| 1 - r, &targets, banks, cfg)?;
        terms.vv = Some(g.item(t)?);
        parts.push(t);
    }
    if cfg.use_av_va {
        let t = term(g, video.anchor, v, a, cross, &targets, banks, cfg)?;
        terms.va = Some(g.item(t)?);
        parts.push(t);
        let t = term(g, audio.anchor, a, v, cross, &targets, banks, cfg)?;
        terms.av = Some(g.item(t)?);
        parts.push(t);
    }
    if cfg.use_aa {
        let t = term(g, audio.anchor, a, a, |r| 1 - r, &targets, banks, cfg)?;
        terms.aa = Some(g.item(t)?);
        parts.push(t);
    }
    let total = match parts.len() {
        0 => g.constant(Tensor::scalar(0.0))?,
        1 => parts[0],
        _ => g.sum(g.concat(&parts, 0)?)?,
    };
    Ok(CrlLoss { total, terms })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(g: &Graph, v: &[f64]) -> Var {
        g.constant(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()).unwrap()
    }

    fn rows(g: &Graph, v: &[Vec<f64>]) -> Var {
        g.constant(Tensor::from_rows(v).unwrap()).unwrap()
    }

    #[test]
    fn single_positive_without_negatives_is_zero() {
        let g = Graph::new();
        let l = contrastive_loss(&g, row(&g, &[1.0, 2.0]), rows(&g, &[vec![0.3, -1.0]]), &[1.0], None, 0.2).unwrap();
        assert_eq!(g.item(l).unwrap(), 0.0);
    }

    #[test]
    fn one_positive_one_orthogonal_negative() {
        let g = Graph::new();
        let l = contrastive_loss(
            &g,
            row(&g, &[3.0, 0.0]),
            rows(&g, &[vec![2.0, 0.0]]),
            &[1.0],
            Some(rows(&g, &[vec![0.0, 0.5]])),
            0.2,
        )
        .unwrap();
        let e5 = 5f64.exp();
        assert!((g.item(l).unwrap() + (e5 / (e5 + 1.0)).ln()).abs() < 1e-12);
        assert!((g.item(l).unwrap() - 0.0067157).abs() < 1e-6);
    }

    #[test]
    fn duplicate_positive_doubles_loss() {
        let g = Graph::new();
        let neg = Some(rows(&g, &[vec![0.0, 1.0], vec![-1.0, 0.5]]));
        let one = contrastive_loss(&g, row(&g, &[1.0, 0.2]), rows(&g, &[vec![0.8, 0.1]]), &[1.0], neg, 0.2).unwrap();
        let two = contrastive_loss(
            &g,
            row(&g, &[1.0, 0.2]),
            rows(&g, &[vec![0.8, 0.1], vec![0.8, 0.1]]),
            &[1.0, 1.0],
            neg,
            0.2,
        )
        .unwrap();
        assert!((g.item(two).unwrap() - 2.0 * g.item(one).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn negative_rank_window() {
        assert_eq!(negative_ranks(10, 0.9, 100), 9..11);
        assert_eq!(negative_ranks(10, 0.5, 2), 5..7);
        assert_eq!(negative_ranks(0, 0.5, 2), 1..1);
        assert_eq!(negative_ranks(3, 0.0, 1), 1..2);
    }

    #[test]
    fn cold_start_pairs() {
        let bank = MemoryBank::new(8, 2).unwrap();
        let cfg = LossConfig::default();
        let negs = vec![Source::Batch { set: 0, row: 1 }];
        let p = build_pairs(Source::Batch { set: 0, row: 0 }, &[1.0, 0.0], negs.clone(), &bank, &cfg).unwrap();
        assert_eq!(p.positives, vec![(Source::Batch { set: 0, row: 0 }, 1.0)]);
        assert_eq!(p.negatives, negs);
    }

    #[test]
    fn warm_bank_pairs() {
        let mut bank = MemoryBank::new(16, 2).unwrap();
        for i in 0..10 {
            let t = i as f64 * 0.3;
            bank.push_value(&[t.cos(), t.sin()]).unwrap();
        }
        let cfg = LossConfig {
            bank_negatives: 3,
            ..LossConfig::default()
        };
        let p = build_pairs(Source::Batch { set: 0, row: 0 }, &[1.0, 0.1], vec![], &bank, &cfg).unwrap();
        assert_eq!(p.positives.len(), 6);
        let wsum: f64 = p.positives[1..].iter().map(|(_, w)| w).sum();
        assert!((wsum - 1.0).abs() < 1e-12);
        assert_eq!(p.negatives.len(), 3);
        let nn = bank.ranking(&[1.0, 0.1]).unwrap();
        assert_eq!(p.negatives[0], Source::Bank(nn[4]));

        let hard = LossConfig {
            variant: Variant::HardNeg,
            ..cfg.clone()
        };
        let p = build_pairs(Source::Batch { set: 0, row: 0 }, &[1.0, 0.1], vec![], &bank, &hard).unwrap();
        assert_eq!(p.negatives, vec![Source::Bank(nn[8]), Source::Bank(nn[9])]);

        let uni = LossConfig {
            variant: Variant::UniformW,
            ..cfg.clone()
        };
        let p = build_pairs(Source::Batch { set: 0, row: 0 }, &[1.0, 0.1], vec![], &bank, &uni).unwrap();
        assert!(p.positives.iter().all(|(_, w)| *w == 1.0));

        let nnclr = LossConfig {
            variant: Variant::Nnclr,
            ..cfg
        };
        let p = build_pairs(Source::Batch { set: 0, row: 0 }, &[1.0, 0.1], vec![], &bank, &nnclr).unwrap();
        assert_eq!(p.positives, vec![(Source::Bank(nn[0]), 1.0)]);
        assert!(p.negatives.is_empty());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }
}
