//! The full self-supervised objective for one batch.

use super::batch::Batch;
use super::config::RunConfig;
use crate::contrastive::{crl_objective, Banks, CrlTerms, ModalityViews};
use crate::error::Result;
use crate::model::{Forward, Head, Model, Modality};
use crate::tasks::{ssl_objective, temporal_losses, TaskBatch, TemporalLosses};
use crate::tensor::{Graph, Tensor, Var};

pub struct SslOutput {
    pub total: Var,
    pub crl: Option<(Var, CrlTerms)>,
    pub temporal: Option<TemporalLosses>,
    /// Projection outputs per view, when a contrastive term is active.
    pub embed_video: Option<[Var; 2]>,
    pub embed_audio: Option<[Var; 2]>,
}

fn views(f: &mut Forward, model: &Model, m: Modality, features: Var, b: usize, predictor: bool) -> Result<ModalityViews> {
    let g = f.graph;
    let both = g.slice(features, 0, 0, 2 * b)?;
    let e = model.project(f, m, both)?;
    let embed = [g.slice(e, 0, 0, b)?, g.slice(e, 0, b, 2 * b)?];
    let anchor = if predictor {
        let p = model.predict(f, m, e)?;
        [g.slice(p, 0, 0, b)?, g.slice(p, 0, b, 2 * b)?]
    } else {
        embed
    };
    Ok(ModalityViews { embed, anchor })
}

/// Encodes the batch and assembles `L_crl + temporal_weight * L_temp`.
pub fn ssl_forward(f: &mut Forward, model: &Model, batch: &Batch, banks: &Banks, cfg: &RunConfig) -> Result<SslOutput> {
    let g = f.graph;
    let b = batch.size;
    let loss = &cfg.loss;
    let use_temp = cfg.train.temporal_weight != 0.0;
    let use_crl = loss.use_vv || loss.use_av_va || loss.use_aa;
    let n = if use_temp { 6 * b } else { 2 * b };
    let input = |t: &Tensor| -> Result<Var> {
        let v = g.constant(t.clone())?;
        if n < t.shape()[0] {
            g.slice(v, 0, 0, n)
        } else {
            Ok(v)
        }
    };
    let fv = model.encode_video(f, input(&batch.video)?)?;
    let fa = model.encode_audio(f, input(&batch.audio)?)?;

    let mut out = SslOutput {
        total: fv,
        crl: None,
        temporal: None,
        embed_video: None,
        embed_audio: None,
    };
    let crl_total = if use_crl {
        let predictor = loss.variant.uses_predictor();
        let v = views(f, model, Modality::Video, fv, b, predictor)?;
        let a = views(f, model, Modality::Audio, fa, b, predictor)?;
        let crl = crl_objective(g, &v, &a, banks, loss)?;
        out.embed_video = Some(v.embed);
        out.embed_audio = Some(a.embed);
        out.crl = Some((crl.total, crl.terms));
        crl.total
    } else {
        g.constant(Tensor::scalar(0.0))?
    };

    out.total = if use_temp {
        let rows = |x: Var, k: usize| g.slice(x, 0, k * b, (k + 1) * b);
        let views_v = g.slice(fv, 0, 0, 2 * b)?;
        let views_a = g.slice(fa, 0, 0, 2 * b)?;
        let speed: Vec<usize> = batch.speed.concat();
        let direction: Vec<usize> = batch.direction.concat();
        let sv = model.head(f, Head::Speed(Modality::Video), views_v)?;
        let sa = model.head(f, Head::Speed(Modality::Audio), views_a)?;
        let dv = model.head(f, Head::Direction(Modality::Video), views_v)?;
        let da = model.head(f, Head::Direction(Modality::Audio), views_a)?;
        let pairs = [
            (Head::Order(Modality::Video, Modality::Video), rows(fv, 2)?, rows(fv, 3)?),
            (Head::Order(Modality::Audio, Modality::Audio), rows(fa, 2)?, rows(fa, 3)?),
            (Head::Order(Modality::Video, Modality::Audio), rows(fv, 4)?, rows(fa, 4)?),
            (Head::Order(Modality::Audio, Modality::Video), rows(fa, 5)?, rows(fv, 5)?),
        ];
        let mut order_logits = Vec::with_capacity(4);
        for (head, first, second) in pairs {
            let x = g.concat(&[first, second], 1)?;
            order_logits.push(model.head(f, head, x)?);
        }
        let order: Vec<TaskBatch> = order_logits
            .iter()
            .zip(&batch.order)
            .map(|(&logits, labels)| TaskBatch { logits, labels })
            .collect();
        let t = temporal_losses(
            g,
            &[
                TaskBatch { logits: sv, labels: &speed },
                TaskBatch { logits: sa, labels: &speed },
            ],
            &[
                TaskBatch {
                    logits: dv,
                    labels: &direction,
                },
                TaskBatch {
                    logits: da,
                    labels: &direction,
                },
            ],
            &order,
        )?;
        out.temporal = Some(t);
        ssl_objective(g, crl_total, t.total, cfg.train.temporal_weight)?
    } else {
        crl_total
    };
    Ok(out)
}

/// Scalar values of every loss term, for logging.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub crl: Option<f64>,
    pub vv: Option<f64>,
    pub va: Option<f64>,
    pub av: Option<f64>,
    pub aa: Option<f64>,
    pub speed: Option<f64>,
    pub direction: Option<f64>,
    pub order: Option<f64>,
}

impl LossValues {
    pub fn read(g: &Graph, out: &SslOutput) -> Result<Self> {
        let mut v = LossValues {
            total: g.item(out.total)?,
            ..Default::default()
        };
        if let Some((total, terms)) = &out.crl {
            v.crl = Some(g.item(*total)?);
            v.vv = terms.vv;
            v.va = terms.va;
            v.av = terms.av;
            v.aa = terms.aa;
        }
        if let Some(t) = &out.temporal {
            v.speed = Some(g.item(t.speed)?);
            v.direction = Some(g.item(t.direction)?);
            v.order = Some(g.item(t.order)?);
        }
        Ok(v)
    }
}
