//! Normalization layers: plain BN and IN baselines, centering
//! calibration, calibrated-and-standardized batch normalization (CSBN)
//! with per-domain statistics and an inference-time mean path, and
//! calibrated instance normalization (CIN) with a restitution gate.
//!
//! All layer functions are graph builders: they bind their parameters as
//! leaves on the caller's tape through a [`Binder`] so a single backward
//! pass reaches every learnable vector.

use crate::error::shape_err;
use crate::float::Float;
use crate::tensor::{Tape, TensorData, Var};
use crate::Result;
use serde::{Deserialize, Serialize};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pooling used by the centering calibration (the paper's "max average
/// pooling layer" is read as max pooling; avg is selectable).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibPool {
    Avg,
    Max,
}

/// Inference-time aggregation of per-domain BN branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanPath {
    /// Average affine parameters and running statistics, then run one BN.
    ParamsAndStats,
    /// Average the per-domain standardized maps (each using its own
    /// running statistics), then apply the averaged affine.
    StatsOnly,
}

/// Binds named parameters as gradient leaves and remembers the mapping so
/// the optimizer can fetch gradients after backward.
pub struct Binder<'t, F: Float> {
    pub tape: &'t mut Tape<F>,
    pub binds: Vec<(String, Var)>,
}

impl<'t, F: Float> Binder<'t, F> {
    pub fn new(tape: &'t mut Tape<F>) -> Self {
        Self {
            tape,
            binds: Vec::new(),
        }
    }

    pub fn bind(&mut self, name: impl Into<String>, t: &TensorData<F>) -> Var {
        let v = self.tape.leaf(t);
        self.binds.push((name.into(), v));
        v
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.binds.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Per-layer BN parameters: one affine pair and one running-statistic
/// pair per domain, plus calibration vectors shared across domains.
/// Everything is stored as `[1, c, 1, 1]` so it broadcasts over a batch.
#[derive(Clone, Debug)]
pub struct BnParams<F> {
    pub gamma: Vec<TensorData<F>>,
    pub beta: Vec<TensorData<F>>,
    pub omega_m: TensorData<F>,
    pub omega_gamma: TensorData<F>,
    pub omega_beta: TensorData<F>,
    pub running_mean: Vec<TensorData<F>>,
    pub running_var: Vec<TensorData<F>>,
    pub eps: f64,
    pub momentum: f64,
}

impl<F: Float> BnParams<F> {
    pub fn new(channels: usize, domains: usize) -> Self {
        assert!(domains >= 1, "BnParams needs at least one domain");
        let shape = [1, channels, 1, 1];
        Self {
            gamma: vec![TensorData::full(&shape, F::one()); domains],
            beta: vec![TensorData::zeros(&shape); domains],
            omega_m: TensorData::zeros(&shape),
            omega_gamma: TensorData::zeros(&shape),
            omega_beta: TensorData::zeros(&shape),
            running_mean: vec![TensorData::zeros(&shape); domains],
            running_var: vec![TensorData::full(&shape, F::one()); domains],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn domains(&self) -> usize {
        self.gamma.len()
    }

    pub fn channels(&self) -> usize {
        self.omega_m.shape[1]
    }

    fn check_domain(&self, d: usize) -> Result<()> {
        if d >= self.domains() {
            return Err(shape_err(format!(
                "unknown domain id {} (K = {})",
                d,
                self.domains()
            )));
        }
        Ok(())
    }
}

/// IN parameters: affine plus the three calibration vectors of CIN,
/// stored as `[1, c, 1, 1]`.
#[derive(Clone, Debug)]
pub struct InParams<F> {
    pub gamma: TensorData<F>,
    pub beta: TensorData<F>,
    pub omega_u: TensorData<F>,
    pub omega_v: TensorData<F>,
    pub omega_o: TensorData<F>,
    pub eps: f64,
}

impl<F: Float> InParams<F> {
    pub fn new(channels: usize) -> Self {
        let shape = [1, channels, 1, 1];
        Self {
            gamma: TensorData::full(&shape, F::one()),
            beta: TensorData::zeros(&shape),
            omega_u: TensorData::zeros(&shape),
            omega_v: TensorData::zeros(&shape),
            omega_o: TensorData::zeros(&shape),
            eps: DEFAULT_EPS,
        }
    }
}

fn check_image(t: &Tape<impl Float>, x: Var) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape(x);
    if s.len() != 4 {
        return Err(shape_err(format!("expected n×c×h×w input, got {:?}", s)));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Spatial pooling keepdims: `n×c×h×w -> n×c×1×1`.
fn spatial_pool<F: Float>(t: &mut Tape<F>, x: Var, kind: CalibPool) -> Result<Var> {
    match kind {
        CalibPool::Avg => t.reduce_mean(x, &[2, 3]),
        CalibPool::Max => t.reduce_max(x, &[2, 3]),
    }
}

/// `(x - mean) / sqrt(var + eps)`.
fn standardize<F: Float>(t: &mut Tape<F>, x: Var, mean: Var, var: Var, eps: f64) -> Result<Var> {
    let centered = t.sub(x, mean)?;
    let ve = t.add_scalar(var, F::from_f64(eps));
    let sd = t.sqrt(ve);
    let inv = t.reciprocal(sd);
    t.mul(centered, inv)
}

fn affine<F: Float>(t: &mut Tape<F>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let scaled = t.mul(x, gamma)?;
    t.add(scaled, beta)
}

/// `Sigmoid(w ⊙ x + b)` with channel vectors broadcast spatially.
fn gate<F: Float>(t: &mut Tape<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let wx = t.mul(w, x)?;
    let pre = t.add(wx, b)?;
    Ok(t.sigmoid(pre))
}

/// Centering calibration `F + ω_m ⊙ pool(F)` (graph-level, `ω_m` already
/// bound).
pub fn centering_calibration<F: Float>(
    t: &mut Tape<F>,
    x: Var,
    omega_m: Var,
    pool_kind: CalibPool,
) -> Result<Var> {
    let (_, c, _, _) = check_image(t, x)?;
    if t.shape(omega_m) != [1, c, 1, 1] {
        return Err(shape_err(format!(
            "omega_m shape {:?} does not match {} channels",
            t.shape(omega_m),
            c
        )));
    }
    let pooled = spatial_pool(t, x, pool_kind)?;
    let scaled = t.mul(omega_m, pooled)?;
    t.add(x, scaled)
}

/// Exponential-moving-average update of one domain's running statistics
/// from the batch statistics observed on the tape.
fn update_running<F: Float>(
    state: &mut BnParams<F>,
    domain: usize,
    batch_mean: &[F],
    batch_var: &[F],
) {
    let m = F::from_f64(state.momentum);
    let keep = F::one() - m;
    for (r, &b) in state.running_mean[domain].data.iter_mut().zip(batch_mean) {
        *r = keep * *r + m * b;
    }
    for (r, &b) in state.running_var[domain].data.iter_mut().zip(batch_var) {
        *r = keep * *r + m * b;
    }
}

/// Plain batch normalization of a single-domain batch.
///
/// Train mode standardizes with the batch statistics of `domain` and
/// updates its running statistics; eval mode uses the stored running
/// statistics. The affine pair of `domain` is applied last.
pub fn batch_norm<F: Float>(
    bd: &mut Binder<F>,
    prefix: &str,
    x: Var,
    state: &mut BnParams<F>,
    domain: usize,
    mode: Mode,
) -> Result<Var> {
    state.check_domain(domain)?;
    let (n, _, h, w) = check_image(bd.tape, x)?;
    let normalized = match mode {
        Mode::Train => {
            if n * h * w < 2 {
                return Err(shape_err(
                    "batch_norm train mode needs at least two elements per channel".to_string(),
                ));
            }
            let (mean, var) = bd.tape.reduce_stats(x, &[0, 2, 3])?;
            let (bm, bv) = (bd.tape.value(mean).to_vec(), bd.tape.value(var).to_vec());
            update_running(state, domain, &bm, &bv);
            standardize(bd.tape, x, mean, var, state.eps)?
        }
        Mode::Eval => {
            let mean = bd.tape.constant(&state.running_mean[domain]);
            let var = bd.tape.constant(&state.running_var[domain]);
            standardize(bd.tape, x, mean, var, state.eps)?
        }
    };
    let gamma = bd.bind(format!("{prefix}.gamma{domain}"), &state.gamma[domain]);
    let beta = bd.bind(format!("{prefix}.beta{domain}"), &state.beta[domain]);
    affine(bd.tape, normalized, gamma, beta)
}

/// Per-sample per-channel standardization over spatial axes plus affine.
pub fn instance_norm<F: Float>(
    bd: &mut Binder<F>,
    prefix: &str,
    x: Var,
    state: &InParams<F>,
) -> Result<Var> {
    let (_, _, h, w) = check_image(bd.tape, x)?;
    if h * w < 2 {
        return Err(shape_err("instance_norm needs h·w >= 2".to_string()));
    }
    let (mean, var) = bd.tape.reduce_stats(x, &[2, 3])?;
    let normalized = standardize(bd.tape, x, mean, var, state.eps)?;
    let gamma = bd.bind(format!("{prefix}.gamma"), &state.gamma);
    let beta = bd.bind(format!("{prefix}.beta"), &state.beta);
    affine(bd.tape, normalized, gamma, beta)
}

/// Effective single-domain BN aggregates for unseen-domain inference:
/// arithmetic means of the per-domain affine pairs and running
/// statistics.
pub fn csbn_inference_mean_path<F: Float>(
    state: &BnParams<F>,
) -> (TensorData<F>, TensorData<F>, TensorData<F>, TensorData<F>) {
    let k = state.domains();
    let c = state.channels();
    let inv_k = F::from_f64(1.0 / k as f64);
    let mut out = [
        TensorData::zeros(&[1, c, 1, 1]),
        TensorData::zeros(&[1, c, 1, 1]),
        TensorData::zeros(&[1, c, 1, 1]),
        TensorData::zeros(&[1, c, 1, 1]),
    ];
    for d in 0..k {
        for (src, dst) in [
            (&state.gamma[d], 0usize),
            (&state.beta[d], 1),
            (&state.running_mean[d], 2),
            (&state.running_var[d], 3),
        ] {
            for (o, &s) in out[dst].data.iter_mut().zip(src.data.iter()) {
                *o += s * inv_k;
            }
        }
    }
    let [gamma, beta, mean, var] = out;
    (gamma, beta, mean, var)
}

/// Calibrated-and-standardized batch normalization.
///
/// Centering calibration, then per-domain standardization and affine,
/// then a shared sigmoid gate on the calibrated feature. Train mode uses
/// the batch statistics of each domain slice (and updates that domain's
/// running statistics); eval mode aggregates all domains through the
/// mean path so no domain label is needed.
#[allow(clippy::too_many_arguments)]
pub fn csbn<F: Float>(
    bd: &mut Binder<F>,
    prefix: &str,
    x: Var,
    state: &mut BnParams<F>,
    domains: &[usize],
    mode: Mode,
    pool_kind: CalibPool,
    mean_path: MeanPath,
) -> Result<Var> {
    let (n, _, h, w) = check_image(bd.tape, x)?;
    let omega_m = bd.bind(format!("{prefix}.omega_m"), &state.omega_m);
    let calibrated = centering_calibration(bd.tape, x, omega_m, pool_kind)?;

    let standardized_affine = match mode {
        Mode::Train => {
            if domains.len() != n {
                return Err(shape_err(format!(
                    "{} domain ids for a batch of {}",
                    domains.len(),
                    n
                )));
            }
            for &d in domains {
                state.check_domain(d)?;
            }
            let mut present: Vec<usize> = domains.to_vec();
            present.sort_unstable();
            present.dedup();
            let mut scattered: Option<Var> = None;
            for d in present {
                let rows: Vec<usize> = (0..n).filter(|&i| domains[i] == d).collect();
                if rows.len() * h * w < 2 {
                    return Err(shape_err(format!(
                        "domain {} sub-batch too small for train-mode statistics",
                        d
                    )));
                }
                let slice = bd.tape.gather_rows(calibrated, &rows)?;
                let (mean, var) = bd.tape.reduce_stats(slice, &[0, 2, 3])?;
                let (bm, bv) = (bd.tape.value(mean).to_vec(), bd.tape.value(var).to_vec());
                update_running(state, d, &bm, &bv);
                let normalized = standardize(bd.tape, slice, mean, var, state.eps)?;
                let gamma = bd.bind(format!("{prefix}.gamma{d}"), &state.gamma[d]);
                let beta = bd.bind(format!("{prefix}.beta{d}"), &state.beta[d]);
                let y = affine(bd.tape, normalized, gamma, beta)?;
                let placed = bd.tape.scatter_rows(y, &rows, n)?;
                scattered = Some(match scattered {
                    None => placed,
                    Some(acc) => bd.tape.add(acc, placed)?,
                });
            }
            scattered.expect("train batch cannot be empty")
        }
        Mode::Eval => {
            // affine aggregation happens on-tape so gradients still reach
            // the per-domain parameters during eval-mode checks
            let k = state.domains();
            let inv_k = F::from_f64(1.0 / k as f64);
            let mut gsum: Option<Var> = None;
            let mut bsum: Option<Var> = None;
            for d in 0..k {
                let g = bd.bind(format!("{prefix}.gamma{d}"), &state.gamma[d]);
                let b = bd.bind(format!("{prefix}.beta{d}"), &state.beta[d]);
                gsum = Some(match gsum {
                    None => g,
                    Some(a) => bd.tape.add(a, g)?,
                });
                bsum = Some(match bsum {
                    None => b,
                    Some(a) => bd.tape.add(a, b)?,
                });
            }
            let gamma_bar = bd.tape.scale(gsum.unwrap(), inv_k);
            let beta_bar = bd.tape.scale(bsum.unwrap(), inv_k);
            let normalized = match mean_path {
                MeanPath::ParamsAndStats => {
                    let (_, _, mean_bar, var_bar) = csbn_inference_mean_path(state);
                    let mean = bd.tape.constant(&mean_bar);
                    let var = bd.tape.constant(&var_bar);
                    standardize(bd.tape, calibrated, mean, var, state.eps)?
                }
                MeanPath::StatsOnly => {
                    // average the per-domain standardized maps instead of
                    // averaging the statistics first
                    let mut acc: Option<Var> = None;
                    for d in 0..k {
                        let mean = bd.tape.constant(&state.running_mean[d]);
                        let var = bd.tape.constant(&state.running_var[d]);
                        let nd = standardize(bd.tape, calibrated, mean, var, state.eps)?;
                        acc = Some(match acc {
                            None => nd,
                            Some(a) => bd.tape.add(a, nd)?,
                        });
                    }
                    bd.tape.scale(acc.unwrap(), inv_k)
                }
            };
            affine(bd.tape, normalized, gamma_bar, beta_bar)?
        }
    };

    let omega_gamma = bd.bind(format!("{prefix}.omega_gamma"), &state.omega_gamma);
    let omega_beta = bd.bind(format!("{prefix}.omega_beta"), &state.omega_beta);
    let g = gate(bd.tape, calibrated, omega_gamma, omega_beta)?;
    bd.tape.mul(standardized_affine, g)
}

/// Calibrated instance normalization.
///
/// `R̂ = x + ω_u ⊙ pool(x)`; the spatial statistics come from the
/// *uncalibrated* input; the restitution gate is
/// `Sigmoid(ω_v ⊙ R̂ + ω_o)`.
pub fn cin<F: Float>(
    bd: &mut Binder<F>,
    prefix: &str,
    x: Var,
    state: &InParams<F>,
    pool_kind: CalibPool,
) -> Result<Var> {
    let (_, _, h, w) = check_image(bd.tape, x)?;
    if h * w < 2 {
        return Err(shape_err("cin needs h·w >= 2".to_string()));
    }
    let omega_u = bd.bind(format!("{prefix}.omega_u"), &state.omega_u);
    let calibrated = centering_calibration(bd.tape, x, omega_u, pool_kind)?;
    let (mean, var) = bd.tape.reduce_stats(x, &[2, 3])?;
    let normalized = standardize(bd.tape, calibrated, mean, var, state.eps)?;
    let gamma = bd.bind(format!("{prefix}.gamma"), &state.gamma);
    let beta = bd.bind(format!("{prefix}.beta"), &state.beta);
    let scaled = affine(bd.tape, normalized, gamma, beta)?;
    let omega_v = bd.bind(format!("{prefix}.omega_v"), &state.omega_v);
    let omega_o = bd.bind(format!("{prefix}.omega_o"), &state.omega_o);
    let g = gate(bd.tape, calibrated, omega_v, omega_o)?;
    bd.tape.mul(scaled, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> TensorData<f64> {
        let n: usize = shape.iter().product();
        TensorData::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// CSBN train mode with identity affine and zero calibration: each
    /// domain slice must come out standardized (gate contributes a flat
    /// factor of 1/2).
    #[test]
    fn csbn_per_domain_pre_affine_statistics_are_standard() {
        let (c, hw) = (3usize, 4usize);
        let domains = [0usize, 0, 1, 1, 2, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = randn(&mut rng, &[6, c, hw, hw]);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(&x);
        let mut bd = Binder::new(&mut tape);
        let mut state = BnParams::new(c, 3);
        let y = csbn(
            &mut bd, "p", xv, &mut state, &domains, Mode::Train,
            CalibPool::Avg, MeanPath::ParamsAndStats,
        )
        .unwrap();
        let out = tape.value(y).to_vec();
        for d in 0..3 {
            for ch in 0..c {
                let mut vals = Vec::new();
                for (i, &di) in domains.iter().enumerate() {
                    if di != d {
                        continue;
                    }
                    for p in 0..hw * hw {
                        // undo the sigmoid(0) = 1/2 gate
                        vals.push(2.0 * out[(i * c + ch) * hw * hw + p]);
                    }
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-6, "domain {d} channel {ch} mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "domain {d} channel {ch} var {var}");
            }
        }
    }

    /// IN output is invariant to a per-sample-per-channel shift.
    #[test]
    fn instance_norm_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x = randn(&mut rng, &[2, 3, 4, 4]);
        let mut shifted = x.clone();
        for i in 0..2 {
            for ch in 0..3 {
                let delta = rng.gen_range(-5.0..5.0);
                for p in 0..16 {
                    shifted.data[(i * 3 + ch) * 16 + p] += delta;
                }
            }
        }
        let state = InParams::new(3);
        let run = |input: &TensorData<f64>| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(input);
            let mut bd = Binder::new(&mut tape);
            let y = instance_norm(&mut bd, "p", xv, &state).unwrap();
            tape.value(y).to_vec()
        };
        let (a, b) = (run(&x), run(&shifted));
        for (va, vb) in a.iter().zip(&b) {
            assert!((va - vb).abs() < 1e-6, "{va} vs {vb}");
        }
    }

    /// With zero centering, zero gate slope and a saturating gate bias,
    /// CIN reduces to plain IN.
    #[test]
    fn cin_degenerate_parameters_reduce_to_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = randn(&mut rng, &[2, 3, 4, 4]);
        let mut state = InParams::new(3);
        for v in &mut state.gamma.data {
            *v = 1.3;
        }
        for v in &mut state.beta.data {
            *v = -0.2;
        }
        for v in &mut state.omega_o.data {
            *v = 40.0; // sigmoid(40) == 1 to double precision
        }
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(&x);
        let mut bd = Binder::new(&mut tape);
        let a = cin(&mut bd, "a", xv, &state, CalibPool::Avg).unwrap();
        let b = instance_norm(&mut bd, "b", xv, &state).unwrap();
        let (av, bv) = (tape.value(a).to_vec(), tape.value(b).to_vec());
        for (x, y) in av.iter().zip(&bv) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    /// Running statistics follow the EMA recurrence exactly: after T
    /// identical batches, mean_T = (1-(1-m)^T) mu and
    /// var_T = (1-m)^T + (1-(1-m)^T) v.
    #[test]
    fn running_statistics_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let x = randn(&mut rng, &[4, 2, 3, 3]);
        let mut state = BnParams::<f64>::new(2, 1);
        let m = state.momentum;
        // reference batch statistics
        let (mu, v) = {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(&x);
            let (mean, var) = tape.reduce_stats(xv, &[0, 2, 3]).unwrap();
            (tape.value(mean).to_vec(), tape.value(var).to_vec())
        };
        for t in 1..=10usize {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(&x);
            let mut bd = Binder::new(&mut tape);
            batch_norm(&mut bd, "p", xv, &mut state, 0, Mode::Train).unwrap();
            let decay = (1.0 - m).powi(t as i32);
            for (r, &b) in state.running_mean[0].data.iter().zip(&mu) {
                let expect = (1.0 - decay) * b;
                assert!((r - expect).abs() < 1e-12, "t={t}: {r} vs {expect}");
            }
            for (r, &b) in state.running_var[0].data.iter().zip(&v) {
                let expect = decay + (1.0 - decay) * b;
                assert!((r - expect).abs() < 1e-12, "t={t}: {r} vs {expect}");
            }
        }
    }

    /// The eval path never reads the domain labels: any labels give
    /// bitwise identical output.
    #[test]
    fn csbn_eval_ignores_domain_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let x = randn(&mut rng, &[4, 3, 4, 4]);
        let mut state = BnParams::new(3, 2);
        for d in 0..2 {
            for v in &mut state.running_mean[d].data {
                *v = rng.gen_range(-0.5..0.5);
            }
            for v in &mut state.running_var[d].data {
                *v = rng.gen_range(0.5..1.5);
            }
            for v in &mut state.gamma[d].data {
                *v = rng.gen_range(0.5..1.5);
            }
        }
        let mut run = |labels: &[usize], path: MeanPath| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(&x);
            let mut bd = Binder::new(&mut tape);
            let y = csbn(&mut bd, "p", xv, &mut state, labels, Mode::Eval, CalibPool::Avg, path)
                .unwrap();
            tape.value(y).to_vec()
        };
        for path in [MeanPath::ParamsAndStats, MeanPath::StatsOnly] {
            let a = run(&[0, 0, 0, 0], path);
            let b = run(&[1, 0, 1, 0], path);
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    /// Mean-path aggregates are the arithmetic means of the per-domain
    /// parameters and statistics.
    #[test]
    fn mean_path_aggregates() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let mut state = BnParams::<f64>::new(2, 3);
        for d in 0..3 {
            for t in [&mut state.gamma[d], &mut state.beta[d], &mut state.running_mean[d]] {
                for v in &mut t.data {
                    *v = rng.gen_range(-1.0..1.0);
                }
            }
            for v in &mut state.running_var[d].data {
                *v = rng.gen_range(0.5..1.5);
            }
        }
        let (g, b, m, v) = csbn_inference_mean_path(&state);
        for c in 0..2 {
            let avg = |f: &dyn Fn(usize) -> f64| (f(0) + f(1) + f(2)) / 3.0;
            assert!((g.data[c] - avg(&|d| state.gamma[d].data[c])).abs() < 1e-12);
            assert!((b.data[c] - avg(&|d| state.beta[d].data[c])).abs() < 1e-12);
            assert!((m.data[c] - avg(&|d| state.running_mean[d].data[c])).abs() < 1e-12);
            assert!((v.data[c] - avg(&|d| state.running_var[d].data[c])).abs() < 1e-12);
        }
    }

    /// Centering calibration with max pooling adds omega ⊙ spatial max.
    #[test]
    fn centering_calibration_max_pool_manual() {
        let x = TensorData::new(
            vec![1, 2, 2, 2],
            vec![1.0, -2.0, 3.0, 0.5, -1.0, -4.0, -0.5, -2.0],
        )
        .unwrap();
        let omega = TensorData::new(vec![1, 2, 1, 1], vec![0.5, 2.0]).unwrap();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(&x);
        let ov = tape.constant(&omega);
        let y = centering_calibration(&mut tape, xv, ov, CalibPool::Max).unwrap();
        let got = tape.value(y).to_vec();
        // channel 0 max = 3, channel 1 max = -0.5
        let want = [
            1.0 + 1.5, -2.0 + 1.5, 3.0 + 1.5, 0.5 + 1.5,
            -1.0 - 1.0, -4.0 - 1.0, -0.5 - 1.0, -2.0 - 1.0,
        ];
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    /// Too-small sub-batches and unknown domain ids are rejected.
    #[test]
    fn csbn_input_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let x = randn(&mut rng, &[2, 3, 1, 1]);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(&x);
        let mut bd = Binder::new(&mut tape);
        let mut state = BnParams::new(3, 2);
        // 1x1 spatial with one sample per domain: too small
        let r = csbn(
            &mut bd, "p", xv, &mut state, &[0, 1], Mode::Train,
            CalibPool::Avg, MeanPath::ParamsAndStats,
        );
        assert!(r.is_err());
        let r = csbn(
            &mut bd, "p", xv, &mut state, &[0, 5], Mode::Train,
            CalibPool::Avg, MeanPath::ParamsAndStats,
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
