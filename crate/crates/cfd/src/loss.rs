//! Training objective: identity cross-entropy, batch-hard triplet loss,
//! per-stage domain classification losses, and their weighted sum.

use crate::error::shape_err;
use crate::float::Float;
use crate::tensor::{Tape, Var};
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// One weight per backbone stage.
    pub lambda: [f64; 4],
    pub triplet_margin: f64,
    /// Label smoothing on the identity loss (0 disables it).
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: [0.1; 4],
            triplet_margin: 0.3,
            label_smoothing: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self
            .lambda
            .iter()
            .chain(std::iter::once(&self.triplet_margin))
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(shape_err("loss weights must be finite and nonnegative".to_string()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(shape_err("label smoothing must be in [0,1)".to_string()));
        }
        Ok(())
    }
}

/// Mean cross-entropy over identity logits, optionally label-smoothed.
pub fn id_loss<F: Float>(
    t: &mut Tape<F>,
    logits: Var,
    labels: &[usize],
    smoothing: f64,
) -> Result<Var> {
    t.cross_entropy_smoothed(logits, labels, smoothing)
}

/// Cross-entropy over domain logits of one stage.
pub fn domain_loss<F: Float>(t: &mut Tape<F>, logits: Var, domains: &[usize]) -> Result<Var> {
    t.cross_entropy(logits, domains)
}

/// Outcome flags of a triplet-loss evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct TripletInfo {
    /// Set when the batch holds a single class; the loss is defined as 0.
    pub degenerate: bool,
}

/// Batch-hard triplet loss with Euclidean distances.
///
/// For every anchor the hardest (farthest) positive and hardest (closest)
/// negative are mined on the current values; the hinge
/// `max(0, d⁺ − d⁻ + margin)` is averaged over anchors. Mining is a
/// piecewise-constant index choice, so gradients flow through the chosen
/// pairs only.
pub fn triplet_loss<F: Float>(
    t: &mut Tape<F>,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
) -> Result<(Var, TripletInfo)> {
    let shape = t.shape(embeddings).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(shape_err(format!(
            "triplet_loss: embeddings {:?} vs {} labels",
            shape,
            labels.len()
        )));
    }
    let (n, e) = (shape[0], shape[1]);
    if n < 2 {
        return Err(shape_err("triplet_loss needs a batch of at least 2".to_string()));
    }
    let distinct = {
        let mut l = labels.to_vec();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        // degenerate batch: no negatives exist
        let zero = t.scalar(F::zero());
        let zero = t.scale(zero, F::one());
        return Ok((zero, TripletInfo { degenerate: true }));
    }

    // mine hardest pairs on the data
    let data = t.value(embeddings);
    let dist2 = |a: usize, b: usize| -> f64 {
        let mut acc = 0.0;
        for j in 0..e {
            let d = (data[a * e + j] - data[b * e + j]).to_f64();
            acc += d * d;
        }
        acc
    };
    let mut anchors = Vec::new();
    let mut hardest_pos = Vec::new();
    let mut hardest_neg = Vec::new();
    for a in 0..n {
        let mut hp: Option<(usize, f64)> = None;
        let mut hn: Option<(usize, f64)> = None;
        for b in 0..n {
            if b == a {
                continue;
            }
            let d = dist2(a, b);
            if labels[b] == labels[a] {
                if hp.map_or(true, |(_, best)| d > best) {
                    hp = Some((b, d));
                }
            } else if hn.map_or(true, |(_, best)| d < best) {
                hn = Some((b, d));
            }
        }
        if let (Some((p, _)), Some((q, _))) = (hp, hn) {
            anchors.push(a);
            hardest_pos.push(p);
            hardest_neg.push(q);
        }
    }
    if anchors.is_empty() {
        // classes present but no anchor has a positive
        let zero = t.scalar(F::zero());
        let zero = t.scale(zero, F::one());
        return Ok((zero, TripletInfo { degenerate: true }));
    }

    // distances for the chosen pairs, built on the graph
    let ea = t.gather_rows(embeddings, &anchors)?;
    let ep = t.gather_rows(embeddings, &hardest_pos)?;
    let en = t.gather_rows(embeddings, &hardest_neg)?;
    let dist = |t: &mut Tape<F>, x: Var, y: Var| -> Result<Var> {
        let d = t.sub(x, y)?;
        let sq = t.mul(d, d)?;
        let s = t.reduce_sum(sq, &[1])?;
        // tiny floor keeps sqrt differentiable at coincident embeddings
        let s = t.add_scalar(s, F::from_f64(1e-12));
        Ok(t.sqrt(s))
    };
    let dpos = dist(t, ea, ep)?;
    let dneg = dist(t, ea, en)?;
    let diff = t.sub(dpos, dneg)?;
    let shifted = t.add_scalar(diff, F::from_f64(margin));
    let hinge = t.relu(shifted);
    let mean = t.reduce_mean(hinge, &[0, 1])?;
    let loss = t.reshape(mean, &[1])?;
    Ok((loss, TripletInfo { degenerate: false }))
}

/// `L = (id + triplet) + Σᵢ λᵢ·domainᵢ`. Stage indices accompany each
/// domain loss so disabled stages contribute nothing.
pub fn total_loss<F: Float>(
    t: &mut Tape<F>,
    id: Var,
    triplet: Var,
    domain_losses: &[(usize, Var)],
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let mut total = t.add(id, triplet)?;
    for &(stage, dl) in domain_losses {
        if stage >= 4 {
            return Err(shape_err(format!("stage index {} out of range", stage)));
        }
        let weighted = t.scale(dl, F::from_f64(w.lambda[stage]));
        total = t.add(total, weighted)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorData;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn id_loss_uniform_and_saturated() {
        let mut t = tape();
        let uniform = t.constant(&TensorData::zeros(&[3, 7]));
        let l = id_loss(&mut t, uniform, &[0, 1, 2], 0.0).unwrap();
        assert!((t.value(l)[0] - (7.0f64).ln()).abs() < 1e-12);

        let mut hot = TensorData::zeros(&[2, 4]);
        hot.data[1] = 1e3;
        hot.data[4 + 2] = 1e3;
        let z = t.constant(&hot);
        let l2 = id_loss(&mut t, z, &[1, 2], 0.0).unwrap();
        assert!(t.value(l2)[0].abs() < 1e-9);
    }

    #[test]
    fn domain_loss_single_class_is_zero() {
        let mut t = tape();
        let z = t.constant(&TensorData::zeros(&[4, 1]));
        let l = domain_loss(&mut t, z, &[0, 0, 0, 0]).unwrap();
        assert!(t.value(l)[0].abs() < 1e-15);
        let z3 = t.constant(&TensorData::zeros(&[2, 3]));
        let l3 = domain_loss(&mut t, z3, &[0, 2]).unwrap();
        assert!((t.value(l3)[0] - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn triplet_separated_clusters_is_zero() {
        let mut t = tape();
        let mut e = TensorData::zeros(&[4, 2]);
        // two tight clusters 10 apart
        e.data = vec![0.0, 0.0, 0.0, 0.0, 10.0, 0.0, 10.0, 0.0];
        let emb = t.constant(&e);
        let (l, info) = triplet_loss(&mut t, emb, &[0, 0, 1, 1], 0.3).unwrap();
        assert!(!info.degenerate);
        assert_eq!(t.value(l)[0], 0.0);
    }

    #[test]
    fn triplet_identical_embeddings_is_margin() {
        let mut t = tape();
        let emb = t.constant(&TensorData::full(&[4, 3], 2.0));
        let (l, _) = triplet_loss(&mut t, emb, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((t.value(l)[0] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn triplet_single_class_degenerate() {
        let mut t = tape();
        let emb = t.constant(&TensorData::full(&[3, 2], 1.0));
        let (l, info) = triplet_loss(&mut t, emb, &[5, 5, 5], 0.3).unwrap();
        assert!(info.degenerate);
        assert_eq!(t.value(l)[0], 0.0);
    }

    #[test]
    fn triplet_matches_bruteforce_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (n, e) = (6, 4);
        let labels = [0, 0, 1, 1, 2, 2];
        let margin = 0.3;
        let data: Vec<f64> = (0..n * e).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // brute-force: exhaustive hardest-pair search per anchor
        let dist = |a: usize, b: usize| -> f64 {
            (0..e)
                .map(|j| (data[a * e + j] - data[b * e + j]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut expect = 0.0;
        for a in 0..n {
            let dp = (0..n)
                .filter(|&b| b != a && labels[b] == labels[a])
                .map(|b| dist(a, b))
                .fold(f64::MIN, f64::max);
            let dn = (0..n)
                .filter(|&b| labels[b] != labels[a])
                .map(|b| dist(a, b))
                .fold(f64::MAX, f64::min);
            expect += (dp - dn + margin).max(0.0);
        }
        expect /= n as f64;
        let mut t = tape();
        let emb = t.constant(&TensorData::new(vec![n, e], data).unwrap());
        let (l, _) = triplet_loss(&mut t, emb, &labels, margin).unwrap();
        assert!((t.value(l)[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn total_loss_weighting() {
        let mut t = tape();
        let id = t.scalar(1.0);
        let tri = t.scalar(0.5);
        let d = t.scalar(2.0);
        let w = LossWeights {
            lambda: [1.0; 4],
            triplet_margin: 0.3,
            ..LossWeights::default()
        };
        let total = total_loss(
            &mut t,
            id,
            tri,
            &[(0, d), (1, d), (2, d), (3, d)],
            &w,
        )
        .unwrap();
        assert!((t.value(total)[0] - (1.5 + 8.0)).abs() < 1e-12);

        let zero_w = LossWeights {
            lambda: [0.0; 4],
            triplet_margin: 0.3,
            ..LossWeights::default()
        };
        let reid_only = total_loss(&mut t, id, tri, &[(0, d)], &zero_w).unwrap();
        assert!((t.value(reid_only)[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights {
            lambda: [-0.1, 0.0, 0.0, 0.0],
            triplet_margin: 0.3,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
