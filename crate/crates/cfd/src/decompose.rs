//! The calibrated feature decomposition block: input-position
//! normalization, soft and hard attention splits, id-position
//! normalization on the pure-id branch, and the two fusion outputs.
//!
//! The complement of each split is computed as `x − gate⊙x` rather than
//! `(1−gate)⊙x`; the two agree algebraically and the former keeps the
//! reconstruction `gate⊙x + complement == x` within one ulp.

use crate::attention::{attention_gate, AttentionKind, ChannelAttention, SpatialAttention};
use crate::float::Float;
use crate::norm::{self, Binder, BnParams, CalibPool, InParams, MeanPath, Mode};
use crate::tensor::Var;
use crate::Result;
use serde::{Deserialize, Serialize};

/// Which normalization operator sits at a given position of the block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    None,
    Bn,
    In,
    #[default]
    Csbn,
    Cin,
}

/// Normalization parameters for one position, matching its [`NormKind`].
#[derive(Clone, Debug)]
pub enum NormParams<F> {
    None,
    Bn(BnParams<F>),
    In(InParams<F>),
    Csbn(BnParams<F>),
    Cin(InParams<F>),
}

impl<F: Float> NormParams<F> {
    pub fn new(kind: NormKind, channels: usize, domains: usize) -> Self {
        match kind {
            NormKind::None => NormParams::None,
            NormKind::Bn => NormParams::Bn(BnParams::new(channels, 1)),
            NormKind::In => NormParams::In(InParams::new(channels)),
            NormKind::Csbn => NormParams::Csbn(BnParams::new(channels, domains)),
            NormKind::Cin => NormParams::Cin(InParams::new(channels)),
        }
    }
}

/// One decomposition module instance.
#[derive(Clone, Debug)]
pub struct CfdParams<F> {
    pub attn_a: ChannelAttention<F>,
    pub attn_b: ChannelAttention<F>,
    pub spatial_a: Option<SpatialAttention<F>>,
    pub spatial_b: Option<SpatialAttention<F>>,
    pub input_norm: NormParams<F>,
    pub id_norm: NormParams<F>,
    pub attention_kind: AttentionKind,
    pub calib_pool: CalibPool,
    pub mean_path: MeanPath,
    /// Blocks domain-loss gradients on the entangled feature's copy in
    /// the domain output.
    pub stop_grad_entangled: bool,
    pub enabled: bool,
}

/// Soft split `R = gate⊙F̃`, `R⁻ = F̃ − R`.
pub fn decompose_soft<F: Float>(bd: &mut Binder<F>, x: Var, gate: Var) -> Result<(Var, Var)> {
    let r = bd.tape.mul(gate, x)?;
    let rm = bd.tape.sub(x, r)?;
    Ok((r, rm))
}

/// Hard split `R* = gate⊙R`, `R⁺ = R − R*`.
pub fn decompose_hard<F: Float>(bd: &mut Binder<F>, r: Var, gate: Var) -> Result<(Var, Var)> {
    let rs = bd.tape.mul(gate, r)?;
    let rp = bd.tape.sub(r, rs)?;
    Ok((rs, rp))
}

/// Applies the configured normalization at one position.
#[allow(clippy::too_many_arguments)]
pub fn apply_norm<F: Float>(
    bd: &mut Binder<F>,
    prefix: &str,
    x: Var,
    norm: &mut NormParams<F>,
    domains: &[usize],
    mode: Mode,
    calib_pool: CalibPool,
    mean_path: MeanPath,
) -> Result<Var> {
    match norm {
        NormParams::None => Ok(x),
        NormParams::Bn(state) => norm::batch_norm(bd, prefix, x, state, 0, mode),
        NormParams::In(state) => norm::instance_norm(bd, prefix, x, state),
        NormParams::Csbn(state) => norm::csbn(bd, prefix, x, state, domains, mode, calib_pool, mean_path),
        NormParams::Cin(state) => norm::cin(bd, prefix, x, state, calib_pool),
    }
}

/// Output pair of the block: the id-relevant feature continues down the
/// backbone, the domain-relevant feature goes to the stage's domain head.
pub struct Decomposed {
    pub id_feature: Var,
    pub domain_feature: Option<Var>,
}

/// Full calibrated decomposition forward.
///
/// `F̃ = norm_in(F)`; soft split by gate `a`; hard split of the entangled
/// part by gate `b`; `R^I = norm_id(R⁺) + R*`; `R^D = R⁻ + R*`. A
/// disabled module passes its input through and yields no domain feature.
pub fn cfd_forward<F: Float>(
    bd: &mut Binder<F>,
    prefix: &str,
    x: Var,
    p: &mut CfdParams<F>,
    domains: &[usize],
    mode: Mode,
) -> Result<Decomposed> {
    if !p.enabled {
        return Ok(Decomposed {
            id_feature: x,
            domain_feature: None,
        });
    }
    let f_tilde = apply_norm(
        bd,
        &format!("{prefix}.input_norm"),
        x,
        &mut p.input_norm,
        domains,
        mode,
        p.calib_pool,
        p.mean_path,
    )?;
    let gate_a = attention_gate(
        bd,
        &format!("{prefix}.attn_a"),
        f_tilde,
        p.attention_kind,
        &p.attn_a,
        p.spatial_a.as_ref(),
    )?;
    let (r, r_minus) = decompose_soft(bd, f_tilde, gate_a)?;
    let gate_b = attention_gate(
        bd,
        &format!("{prefix}.attn_b"),
        r,
        p.attention_kind,
        &p.attn_b,
        p.spatial_b.as_ref(),
    )?;
    let (r_star, r_plus) = decompose_hard(bd, r, gate_b)?;
    let r_plus_tilde = apply_norm(
        bd,
        &format!("{prefix}.id_norm"),
        r_plus,
        &mut p.id_norm,
        domains,
        mode,
        p.calib_pool,
        p.mean_path,
    )?;
    let id_feature = bd.tape.add(r_plus_tilde, r_star)?;
    let star_for_domain = if p.stop_grad_entangled {
        bd.tape.detach(r_star)
    } else {
        r_star
    };
    let domain_feature = bd.tape.add(r_minus, star_for_domain)?;
    Ok(Decomposed {
        id_feature,
        domain_feature: Some(domain_feature),
    })
}

/// Previous-feature-decomposition baseline: a single soft split, the
/// gated part is the id feature (normalized at the id position), the
/// complement is the domain feature. No entangled branch.
pub fn pfd_forward<F: Float>(
    bd: &mut Binder<F>,
    prefix: &str,
    x: Var,
    p: &mut CfdParams<F>,
    domains: &[usize],
    mode: Mode,
) -> Result<Decomposed> {
    if !p.enabled {
        return Ok(Decomposed {
            id_feature: x,
            domain_feature: None,
        });
    }
    let f_tilde = apply_norm(
        bd,
        &format!("{prefix}.input_norm"),
        x,
        &mut p.input_norm,
        domains,
        mode,
        p.calib_pool,
        p.mean_path,
    )?;
    let gate_a = attention_gate(
        bd,
        &format!("{prefix}.attn_a"),
        f_tilde,
        p.attention_kind,
        &p.attn_a,
        p.spatial_a.as_ref(),
    )?;
    let (r_plus, r_minus) = decompose_soft(bd, f_tilde, gate_a)?;
    let id_feature = apply_norm(
        bd,
        &format!("{prefix}.id_norm"),
        r_plus,
        &mut p.id_norm,
        domains,
        mode,
        p.calib_pool,
        p.mean_path,
    )?;
    Ok(Decomposed {
        id_feature,
        domain_feature: Some(r_minus),
    })
}

impl<F: Float> CfdParams<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        channels: usize,
        domains: usize,
        reduction: usize,
        attention_kind: AttentionKind,
        input_norm: NormKind,
        id_norm: NormKind,
        calib_pool: CalibPool,
        mean_path: MeanPath,
        stop_grad_entangled: bool,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let spatial = matches!(attention_kind, AttentionKind::S | AttentionKind::Sc);
        // Gate `a` starts open and gate `b` starts closed, so a fresh
        // module is near the identity for the id path and does not
        // attenuate the backbone signal before the gates are learned.
        Self {
            attn_a: ChannelAttention::with_bias(channels, reduction, 2.0, rng),
            attn_b: ChannelAttention::with_bias(channels, reduction, -2.0, rng),
            spatial_a: spatial.then(|| SpatialAttention::with_bias(2.0, rng)),
            spatial_b: spatial.then(|| SpatialAttention::with_bias(-2.0, rng)),
            input_norm: NormParams::new(input_norm, channels, domains),
            id_norm: NormParams::new(id_norm, channels, domains),
            attention_kind,
            calib_pool,
            mean_path,
            stop_grad_entangled,
            enabled: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::attention_gate;
    use crate::tensor::{Tape, TensorData};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn32(rng: &mut ChaCha8Rng, shape: &[usize]) -> TensorData<f32> {
        let n: usize = shape.iter().product();
        TensorData::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn ulp_diff(a: f32, b: f32) -> u32 {
        // map the float line onto a monotone integer line
        let key = |x: f32| {
            let i = x.to_bits() as i32;
            if i < 0 {
                i32::MIN.wrapping_sub(i)
            } else {
                i
            }
        };
        key(a).abs_diff(key(b))
    }

    /// Both splits conserve their input to within 1 ulp, for every
    /// attention kind, across 100 random inputs.
    #[test]
    fn splits_conserve_within_one_ulp() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for kind in [AttentionKind::C, AttentionKind::S, AttentionKind::Sc] {
            for _ in 0..100 {
                let c = rng.gen_range(2..5usize);
                let x = randn32(&mut rng, &[2, c, 4, 4]);
                let spatial = matches!(kind, AttentionKind::S | AttentionKind::Sc);
                let ca = crate::attention::ChannelAttention::<f32>::new(c, 1, &mut rng);
                let sa = spatial.then(|| crate::attention::SpatialAttention::new(&mut rng));
                let mut tape = Tape::<f32>::new();
                let xv = tape.constant(&x);
                let mut bd = Binder::new(&mut tape);
                let gate = attention_gate(&mut bd, "p", xv, kind, &ca, sa.as_ref()).unwrap();
                let (r, r_minus) = decompose_soft(&mut bd, xv, gate).unwrap();
                let sum_soft = bd.tape.add(r, r_minus).unwrap();
                let gate_b = attention_gate(&mut bd, "q", r, kind, &ca, sa.as_ref()).unwrap();
                let (r_star, r_plus) = decompose_hard(&mut bd, r, gate_b).unwrap();
                let sum_hard = bd.tape.add(r_star, r_plus).unwrap();
                for (&got, &want) in tape.value(sum_soft).iter().zip(tape.value(xv)) {
                    assert!(ulp_diff(got, want) <= 1, "soft split: {got} vs {want}");
                }
                for (&got, &want) in tape.value(sum_hard).iter().zip(tape.value(r)) {
                    assert!(ulp_diff(got, want) <= 1, "hard split: {got} vs {want}");
                }
            }
        }
    }

    fn params(kind: AttentionKind, stop_grad: bool, rng: &mut ChaCha8Rng) -> CfdParams<f64> {
        CfdParams::new(
            3,
            2,
            1,
            kind,
            NormKind::Csbn,
            NormKind::Cin,
            CalibPool::Avg,
            MeanPath::ParamsAndStats,
            stop_grad,
            rng,
        )
    }

    #[test]
    fn disabled_module_is_the_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let x: TensorData<f64> = {
            let n = 2 * 3 * 16;
            TensorData::new(vec![2, 3, 4, 4], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let mut p = params(AttentionKind::C, false, &mut rng);
        p.enabled = false;
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(&x);
        let mut bd = Binder::new(&mut tape);
        let out = cfd_forward(&mut bd, "p", xv, &mut p, &[0, 1], Mode::Train).unwrap();
        assert_eq!(out.id_feature, xv);
        assert!(out.domain_feature.is_none());
        assert!(bd.binds.is_empty());
    }

    #[test]
    fn forward_shapes_match_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let n = 4 * 3 * 16;
        let x: TensorData<f64> =
            TensorData::new(vec![4, 3, 4, 4], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
        for kind in [AttentionKind::C, AttentionKind::S, AttentionKind::Sc] {
            let mut p = params(kind, false, &mut rng);
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(&x);
            let mut bd = Binder::new(&mut tape);
            let out = cfd_forward(&mut bd, "p", xv, &mut p, &[0, 1, 0, 1], Mode::Train).unwrap();
            assert_eq!(tape.shape(out.id_feature), &[4, 3, 4, 4]);
            assert_eq!(tape.shape(out.domain_feature.unwrap()), &[4, 3, 4, 4]);
        }
    }

    /// With the stop-gradient switch on, the domain output carries no
    /// gradient into the second-split attention weights; with it off, it
    /// does.
    #[test]
    fn stop_grad_blocks_entangled_domain_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let n = 4 * 3 * 16;
        let x: TensorData<f64> =
            TensorData::new(vec![4, 3, 4, 4], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
        let grad_norm = |stop: bool| -> f64 {
            let mut rng2 = ChaCha8Rng::seed_from_u64(55);
            let mut p = params(AttentionKind::C, stop, &mut rng2);
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(&x);
            let mut bd = Binder::new(&mut tape);
            let out = cfd_forward(&mut bd, "p", xv, &mut p, &[0, 1, 0, 1], Mode::Train).unwrap();
            let dom = out.domain_feature.unwrap();
            let s = bd.tape.reduce_sum(dom, &[0, 1, 2, 3]).unwrap();
            let s = bd.tape.reshape(s, &[1]).unwrap();
            let w1 = bd.var("p.attn_b.c.w1").unwrap();
            tape.backward(s).unwrap();
            tape.grad(w1)
                .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
                .unwrap_or(0.0)
        };
        assert_eq!(grad_norm(true), 0.0);
        assert!(grad_norm(false) > 0.0);
    }

    #[test]
    fn pfd_has_single_split_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let n = 4 * 3 * 16;
        let x: TensorData<f64> =
            TensorData::new(vec![4, 3, 4, 4], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
        let mut p = params(AttentionKind::C, false, &mut rng);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(&x);
        let mut bd = Binder::new(&mut tape);
        let out = pfd_forward(&mut bd, "p", xv, &mut p, &[0, 1, 0, 1], Mode::Train).unwrap();
        // the second-split attention is never consulted
        assert!(bd.var("p.attn_b.c.w1").is_none());
        assert_eq!(tape.shape(out.id_feature), &[4, 3, 4, 4]);
        assert!(out.domain_feature.is_some());
    }
}
