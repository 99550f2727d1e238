//! Retrieval evaluation: query/gallery construction on the unseen
//! domain, Euclidean ranking with deterministic tie-breaks, mean average
//! precision and CMC curves, and batched eval-mode embedding extraction.

use crate::data::Dataset;
use crate::error::Error;
use crate::float::Float;
use crate::model::{forward, BackboneConfig, ModelParams};
use crate::norm::{Binder, Mode};
use crate::tensor::Tape;
use crate::Result;

/// One embedded instance with its retrieval labels.
#[derive(Clone, Debug)]
pub struct Record {
    pub embedding: Vec<f64>,
    pub id: usize,
    /// Camera surrogate; a query never matches a gallery record sharing
    /// both id and camera.
    pub cam: usize,
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub map: f64,
    /// `cmc[k]` = fraction of queries whose first correct match ranks
    /// `<= k+1`.
    pub cmc: Vec<f64>,
    /// Queries dropped for lack of any valid gallery match.
    pub excluded: usize,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// mAP and CMC over a query/gallery split. Gallery entries are ranked by
/// Euclidean distance with ties broken by gallery index; same-id
/// same-camera entries are filtered per the standard ReID protocol.
pub fn evaluate(query: &[Record], gallery: &[Record], max_rank: usize) -> Result<EvalResult> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Data("query and gallery must be nonempty".into()));
    }
    if max_rank == 0 {
        return Err(Error::Data("max_rank must be positive".into()));
    }
    let mut ap_sum = 0.0;
    let mut included = 0usize;
    let mut excluded = 0usize;
    let mut cmc_hits = vec![0.0; max_rank];
    for q in query {
        // (distance, gallery index) over the valid gallery entries
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(gallery.len());
        let mut num_matches = 0usize;
        for (gi, g) in gallery.iter().enumerate() {
            if g.id == q.id && g.cam == q.cam {
                continue;
            }
            if g.id == q.id {
                num_matches += 1;
            }
            order.push((euclidean(&q.embedding, &g.embedding), gi));
        }
        if num_matches == 0 {
            excluded += 1;
            continue;
        }
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit: Option<usize> = None;
        for (rank0, &(_, gi)) in order.iter().enumerate() {
            if gallery[gi].id == q.id {
                hits += 1;
                precision_sum += hits as f64 / (rank0 + 1) as f64;
                first_hit.get_or_insert(rank0);
            }
        }
        ap_sum += precision_sum / num_matches as f64;
        included += 1;
        let first = first_hit.expect("num_matches > 0 guarantees a hit");
        for k in first..max_rank {
            cmc_hits[k] += 1.0;
        }
    }
    if included == 0 {
        return Err(Error::Data(
            "every query was excluded: no valid gallery matches".into(),
        ));
    }
    Ok(EvalResult {
        map: ap_sum / included as f64,
        cmc: cmc_hits.iter().map(|&h| h / included as f64).collect(),
        excluded,
    })
}

/// Query/gallery sample indices on the unseen domain: image-index parity
/// defines two pseudo-cameras; even-parity images are queries, odd are
/// gallery.
pub fn unseen_split(dataset: &Dataset) -> (Vec<usize>, Vec<usize>) {
    let unseen = dataset.spec.unseen_domain();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.domain != unseen {
            continue;
        }
        if s.img_idx % 2 == 0 {
            query.push(i);
        } else {
            gallery.push(i);
        }
    }
    (query, gallery)
}

/// Embeds the chosen samples in eval mode, in fixed-size chunks, and
/// attaches retrieval labels. Embeddings are produced by the mean path so
/// no domain labels are consumed.
pub fn embed_records<F: Float>(
    cfg: &BackboneConfig,
    params: &mut ModelParams<F>,
    dataset: &Dataset,
    indices: &[usize],
    l2_normalize: bool,
) -> Result<Vec<Record>> {
    let mut records = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(16) {
        let (x, _, _) = dataset.stack::<F>(chunk)?;
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let mut bd = Binder::new(&mut tape);
        let out = forward(&mut bd, cfg, params, xv, &[], Mode::Eval)?;
        let e = tape.shape(out.embedding)[1];
        let vals = tape.value(out.embedding);
        for (row, &si) in chunk.iter().enumerate() {
            let mut embedding: Vec<f64> = vals[row * e..(row + 1) * e]
                .iter()
                .map(|&v| v.to_f64())
                .collect();
            if l2_normalize {
                let norm = embedding.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for v in &mut embedding {
                    *v /= norm;
                }
            }
            let s = &dataset.samples[si];
            records.push(Record {
                embedding,
                id: s.id,
                cam: s.img_idx % 2,
            });
        }
    }
    Ok(records)
}

/// Full unseen-domain evaluation of a model: embed the parity split and
/// rank it.
pub fn evaluate_model<F: Float>(
    cfg: &BackboneConfig,
    params: &mut ModelParams<F>,
    dataset: &Dataset,
    l2_normalize: bool,
    max_rank: usize,
) -> Result<EvalResult> {
    let (q_idx, g_idx) = unseen_split(dataset);
    let query = embed_records(cfg, params, dataset, &q_idx, l2_normalize)?;
    let gallery = embed_records(cfg, params, dataset, &g_idx, l2_normalize)?;
    evaluate(&query, &gallery, max_rank)
}
