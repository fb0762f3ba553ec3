//! Temporal pretext tasks: playback speed, direction and clip ordering.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{Direction, Speed, TemporalParams};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Uniform speed and direction with a uniformly placed crop of `out_len`
/// items from a source of `source_len`.
pub fn sample_temporal_params(rng: &mut impl Rng, out_len: usize, source_len: usize) -> Result<TemporalParams> {
    let speed = Speed::from_class(rng.gen_range(0..4))?;
    let direction = Direction::from_class(rng.gen_range(0..2))?;
    TemporalParams::sample_crop(rng, speed, direction, out_len, source_len)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OrderLabel {
    Ordered,
    Overlapping,
    Reversed,
}

impl OrderLabel {
    pub const ALL: [OrderLabel; 3] = [OrderLabel::Ordered, OrderLabel::Overlapping, OrderLabel::Reversed];

    pub fn class(self) -> usize {
        match self {
            OrderLabel::Ordered => 0,
            OrderLabel::Overlapping => 1,
            OrderLabel::Reversed => 2,
        }
    }

    pub fn from_class(class: usize) -> Result<Self> {
        Self::ALL
            .get(class)
            .copied()
            .ok_or_else(|| Error::invalid(format!("order class {class} out of range")))
    }

    /// Relation of two timeline intervals.
    pub fn of(a: &Range<usize>, b: &Range<usize>) -> Self {
        if a.end <= b.start {
            OrderLabel::Ordered
        } else if b.end <= a.start {
            OrderLabel::Reversed
        } else {
            OrderLabel::Overlapping
        }
    }
}

/// Two clip windows on one timeline, in frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderingInstance {
    pub first: Range<usize>,
    pub second: Range<usize>,
    pub label: OrderLabel,
}

impl OrderingInstance {
    pub fn swapped(&self) -> Self {
        Self {
            first: self.second.clone(),
            second: self.first.clone(),
            label: OrderLabel::of(&self.second, &self.first),
        }
    }
}

/// Two windows of `clip` frames, uniform over the window pairs with the
/// `target` relation.
pub fn make_ordering_instance(timeline: usize, clip: usize, target: OrderLabel, rng: &mut impl Rng) -> Result<OrderingInstance> {
    if clip == 0 || timeline < 2 * clip {
        return Err(Error::invalid(format!(
            "a timeline of {timeline} cannot hold two disjoint clips of {clip}"
        )));
    }
    let starts = timeline - clip + 1;
    loop {
        let a = rng.gen_range(0..starts);
        let b = rng.gen_range(0..starts);
        let (first, second) = (a..a + clip, b..b + clip);
        if OrderLabel::of(&first, &second) == target {
            return Ok(OrderingInstance {
                first,
                second,
                label: target,
            });
        }
    }
}

/// Logits and integer targets of one classification task.
#[derive(Clone, Copy, Debug)]
pub struct TaskBatch<'a> {
    pub logits: Var,
    pub labels: &'a [usize],
}

#[derive(Clone, Copy, Debug)]
pub struct TemporalLosses {
    pub speed: Var,
    pub direction: Var,
    pub order: Var,
    pub total: Var,
}

fn mean_ce(g: &Graph, tasks: &[TaskBatch], classes: usize) -> Result<Var> {
    if tasks.is_empty() {
        return Err(Error::invalid("no task batches"));
    }
    let mut parts = Vec::with_capacity(tasks.len());
    for t in tasks {
        let shape = g.shape(t.logits);
        if shape.len() != 2 || shape[1] != classes {
            return Err(Error::shape("temporal_losses", format!("logits {shape:?} for {classes} classes")));
        }
        if let Some(&bad) = t.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        parts.push(g.cross_entropy(t.logits, t.labels)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.mean(g.concat(&parts, 0)?)
    }
}

/// Cross-entropy per task, averaged over modalities (speed, direction) or
/// pairings (order); `total` is their sum.
pub fn temporal_losses(g: &Graph, speed: &[TaskBatch], direction: &[TaskBatch], order: &[TaskBatch]) -> Result<TemporalLosses> {
    let speed = mean_ce(g, speed, 4)?;
    let direction = mean_ce(g, direction, 2)?;
    let order = mean_ce(g, order, 3)?;
    let total = g.add(g.add(speed, direction)?, order)?;
    Ok(TemporalLosses {
        speed,
        direction,
        order,
        total,
    })
}

/// `contrastive + weight * temporal`.
pub fn ssl_objective(g: &Graph, contrastive: Var, temporal: Var, weight: f64) -> Result<Var> {
    if !weight.is_finite() {
        return Err(Error::NonFinite { op: "ssl_objective" });
    }
    if weight == 0.0 {
        return Ok(contrastive);
    }
    g.add(contrastive, g.scale(temporal, weight)?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn interval_relations() {
        assert_eq!(OrderLabel::of(&(0..16), &(32..48)), OrderLabel::Ordered);
        assert_eq!(OrderLabel::of(&(0..16), &(8..24)), OrderLabel::Overlapping);
        assert_eq!(OrderLabel::of(&(32..48), &(0..16)), OrderLabel::Reversed);
        assert_eq!(OrderLabel::of(&(0..16), &(16..32)), OrderLabel::Ordered);
    }

    #[test]
    fn instances_match_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..300 {
            let target = OrderLabel::ALL[i % 3];
            let inst = make_ordering_instance(128, 16, target, &mut rng).unwrap();
            assert_eq!(OrderLabel::of(&inst.first, &inst.second), target);
            assert!(inst.first.end <= 128 && inst.second.end <= 128);
        }
        assert!(make_ordering_instance(31, 16, OrderLabel::Ordered, &mut rng).is_err());
    }

    #[test]
    fn uniform_logits_give_log_class_count() {
        let g = Graph::new();
        let z = |n: usize, c: usize| g.constant(Tensor::zeros(&[n, c])).unwrap();
        let (l4, l2, l3) = (z(3, 4), z(3, 2), z(3, 3));
        let labels = [0, 1, 1];
        let t = |logits| TaskBatch { logits, labels: &labels };
        let out = temporal_losses(&g, &[t(l4), t(l4)], &[t(l2)], &[t(l3), t(l3), t(l3), t(l3)]).unwrap();
        assert!((g.item(out.speed).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((g.item(out.direction).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((g.item(out.order).unwrap() - 3f64.ln()).abs() < 1e-12);
        let bad = [0, 5, 1];
        assert!(temporal_losses(&g, &[TaskBatch { logits: l4, labels: &bad }], &[t(l2)], &[t(l3)]).is_err());
    }

    #[test]
    fn objective_mixes_terms() {
        let g = Graph::new();
        let c = g.constant(Tensor::scalar(1.0)).unwrap();
        let t = g.constant(Tensor::scalar(2.0)).unwrap();
        assert_eq!(g.item(ssl_objective(&g, c, t, 0.5).unwrap()).unwrap(), 2.0);
        assert_eq!(g.item(ssl_objective(&g, c, t, 0.0).unwrap()).unwrap(), 1.0);
    }
}
