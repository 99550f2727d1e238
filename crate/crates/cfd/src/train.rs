//! Training loop: SGD-with-momentum or Adam over the tape gradients,
//! step decay at two thirds of the epochs, divergence detection, and a
//! run directory holding config snapshot, per-epoch CSV log, checkpoint
//! and final metrics.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{OptimizerKind, RunConfig};
use crate::data::{generate, sample_batch, Dataset};
use crate::error::Error;
use crate::eval::{evaluate_model, EvalResult};
use crate::float::Float;
use crate::loss::{domain_loss, id_loss, total_loss, triplet_loss};
use crate::model::{forward, save_checkpoint, ModelParams};
use crate::norm::{Binder, Mode};
use crate::tensor::Tape;
use crate::Result;

/// Per-epoch mean loss components.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub id_loss: f64,
    pub triplet_loss: f64,
    pub domain_loss: f64,
    pub total_loss: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub seed: u64,
}

enum Optimizer {
    Sgd {
        momentum: f64,
        velocity: HashMap<String, Vec<f64>>,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        m: HashMap<String, Vec<f64>>,
        v: HashMap<String, Vec<f64>>,
    },
}

impl Optimizer {
    fn new(kind: OptimizerKind, momentum: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd {
                momentum,
                velocity: HashMap::new(),
            },
            OptimizerKind::Adam => Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                t: 0,
                m: HashMap::new(),
                v: HashMap::new(),
            },
        }
    }

    /// Called once per step before any `update`.
    fn begin_step(&mut self) {
        if let Optimizer::Adam { t, .. } = self {
            *t += 1;
        }
    }

    fn update<F: Float>(&mut self, name: &str, param: &mut [F], grad: &[f64], lr: f64) {
        match self {
            Optimizer::Sgd { momentum, velocity } => {
                let vel = velocity
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; param.len()]);
                for i in 0..param.len() {
                    vel[i] = *momentum * vel[i] + grad[i];
                    param[i] -= F::from_f64(lr * vel[i]);
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                let mb = m
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; param.len()]);
                let vb = v
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; param.len()]);
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for i in 0..param.len() {
                    mb[i] = *beta1 * mb[i] + (1.0 - *beta1) * grad[i];
                    vb[i] = *beta2 * vb[i] + (1.0 - *beta2) * grad[i] * grad[i];
                    let mhat = mb[i] / bc1;
                    let vhat = vb[i] / bc2;
                    param[i] -= F::from_f64(lr * mhat / (vhat.sqrt() + *eps));
                }
            }
        }
    }
}

fn scalar_of<F: Float>(tape: &Tape<F>, v: crate::tensor::Var) -> f64 {
    tape.value(v)[0].to_f64()
}

/// Trains a fresh model on a freshly generated dataset, fully determined
/// by `(config, seed)`. Returns the trained parameters, the dataset and
/// the per-epoch loss trace.
pub fn train<F: Float>(
    config: &RunConfig,
    seed: u64,
) -> Result<(ModelParams<F>, Dataset, TrainReport)> {
    config.validate()?;
    let dataset = generate(&config.data)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15) ^ 0xa5a5);
    let mut params = ModelParams::<F>::new(&config.backbone, &mut init_rng)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545f4914f6cdd1d) ^ 0x5a5a);

    let mut optimizer = Optimizer::new(config.optim.optimizer, config.optim.momentum);
    let decay_at = config.optim.epochs * 2 / 3;
    let mut epochs = Vec::with_capacity(config.optim.epochs);

    for epoch in 0..config.optim.epochs {
        let lr = if epoch >= decay_at && decay_at > 0 {
            config.optim.lr * 0.1
        } else {
            config.optim.lr
        };
        let mut sums = [0.0f64; 4];
        for step in 0..config.optim.steps_per_epoch {
            let indices = sample_batch(&dataset, &mut batch_rng, config.optim.p, config.optim.k_imgs)?;
            let (x, ids, domains) = dataset.stack::<F>(&indices)?;

            let mut tape = Tape::new();
            let xv = tape.constant(&x);
            let mut bd = Binder::new(&mut tape);
            let out = forward(&mut bd, &config.backbone, &mut params, xv, &domains, Mode::Train)?;
            let binds = std::mem::take(&mut bd.binds);

            let lid = id_loss(&mut tape, out.id_logits, &ids, config.loss.label_smoothing)?;
            let (ltri, _) =
                triplet_loss(&mut tape, out.embedding, &ids, config.loss.triplet_margin)?;
            let mut dlosses = Vec::new();
            for &(stage, logits) in &out.domain_logits {
                dlosses.push((stage, domain_loss(&mut tape, logits, &domains)?));
            }
            let ltotal = total_loss(&mut tape, lid, ltri, &dlosses, &config.loss)?;

            let (vid, vtri, vtot) = (
                scalar_of(&tape, lid),
                scalar_of(&tape, ltri),
                scalar_of(&tape, ltotal),
            );
            let vdom: f64 = dlosses.iter().map(|&(_, d)| scalar_of(&tape, d)).sum();
            if !vtot.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    what: format!("total loss = {vtot}"),
                });
            }
            sums[0] += vid;
            sums[1] += vtri;
            sums[2] += vdom;
            sums[3] += vtot;

            tape.backward(ltotal)?;
            let mut grads: HashMap<String, Vec<f64>> = HashMap::new();
            for (name, var) in &binds {
                if let Some(g) = tape.grad(*var) {
                    if g.iter().any(|&v| !v.to_f64().is_finite()) {
                        return Err(Error::Diverged {
                            epoch,
                            step,
                            what: format!("non-finite gradient in '{name}'"),
                        });
                    }
                    grads.insert(name.clone(), g.iter().map(|&v| v.to_f64()).collect());
                }
            }
            drop(tape);

            // Global-norm gradient clipping: instance statistics divide
            // by per-image spatial variance, whose gradient grows as 1/σ
            // on near-flat channels; one oversized step can kill the
            // activations for good.
            if config.optim.grad_clip > 0.0 {
                let sq: f64 = grads
                    .values()
                    .flat_map(|g| g.iter())
                    .map(|&v| v * v)
                    .sum();
                let norm = sq.sqrt();
                if norm > config.optim.grad_clip {
                    let scale = config.optim.grad_clip / norm;
                    for g in grads.values_mut() {
                        for v in g.iter_mut() {
                            *v *= scale;
                        }
                    }
                }
            }

            optimizer.begin_step();
            params.visit_mut(&mut |name, t, trainable| {
                if !trainable {
                    return;
                }
                if let Some(g) = grads.get(&name) {
                    optimizer.update(&name, &mut t.data, g, lr);
                }
            });
            // GeM below p = 1 loses the pooling interpretation and can
            // destabilize the 1/p exponent; clamp after each step
            if params.gem_p.data[0] < F::one() {
                params.gem_p.data[0] = F::one();
            }
        }
        let n = config.optim.steps_per_epoch as f64;
        epochs.push(EpochStats {
            epoch,
            id_loss: sums[0] / n,
            triplet_loss: sums[1] / n,
            domain_loss: sums[2] / n,
            total_loss: sums[3] / n,
        });
    }
    Ok((params, dataset, TrainReport { epochs, seed }))
}

/// Trains, evaluates on the unseen split, and writes every artifact of
/// the run into `run_dir`: `config.toml`, `log.csv`, `model.ckpt`,
/// `metrics.txt`.
pub fn train_run<F: Float>(
    config: &RunConfig,
    seed: u64,
    run_dir: &Path,
) -> Result<(TrainReport, EvalResult)> {
    std::fs::create_dir_all(run_dir)?;
    let (mut params, dataset, report) = train::<F>(config, seed)?;

    std::fs::write(run_dir.join("config.toml"), config.to_toml()?)?;
    let mut log = String::from("epoch,id_loss,triplet_loss,domain_loss,total_loss\n");
    for e in &report.epochs {
        log.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            e.epoch, e.id_loss, e.triplet_loss, e.domain_loss, e.total_loss
        ));
    }
    std::fs::write(run_dir.join("log.csv"), log)?;
    save_checkpoint(&run_dir.join("model.ckpt"), &config.backbone, &mut params)?;

    let result = evaluate_model(&config.backbone, &mut params, &dataset, config.l2_normalize, 10)?;
    std::fs::write(run_dir.join("metrics.txt"), metrics_text(seed, &result))?;
    Ok((report, result))
}

/// Structured key-value metrics text.
pub fn metrics_text(seed: u64, r: &EvalResult) -> String {
    let mut out = String::new();
    out.push_str(&format!("seed {seed}\n"));
    out.push_str(&format!("map {:.6}\n", r.map));
    for (k, v) in r.cmc.iter().enumerate() {
        out.push_str(&format!("cmc{} {:.6}\n", k + 1, v));
    }
    out.push_str(&format!("excluded_queries {}\n", r.excluded));
    out
}
