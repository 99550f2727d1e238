//! Toy four-stage convolutional backbone with decomposition modules
//! insertable after each stage, GeM pooling, a BNNeck embedding head,
//! per-stage domain heads, and a lossless checkpoint format.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{init_he_uniform, init_uniform, AttentionKind};
use crate::decompose::{apply_norm, cfd_forward, pfd_forward, CfdParams, Decomposed, NormKind};
use crate::error::{shape_err, Error};
use crate::float::Float;
use crate::norm::{batch_norm, Binder, BnParams, CalibPool, MeanPath, Mode};
use crate::tensor::{TensorData, Var};
use crate::Result;

pub const CHECKPOINT_MAGIC: &str = "CFD-CHECKPOINT v1";

/// Which decomposition runs inside an enabled stage module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecompositionKind {
    /// Two-stage calibrated decomposition with the entangled branch.
    Cfd,
    /// Single-split baseline: gated part is id, complement is domain.
    Pfd,
    /// No split; the module only applies its configured normalizations.
    None,
}

/// Static architecture description. The parameter count and every tensor
/// shape are pure functions of this struct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub widths: [usize; 4],
    pub strides: [usize; 4],
    /// Input extents `[channels, height, width]`.
    pub input: [usize; 3],
    /// 1-based stages that carry a decomposition module.
    pub cfd_stages: Vec<usize>,
    pub decomposition: DecompositionKind,
    pub attention: AttentionKind,
    pub input_norm: NormKind,
    pub id_norm: NormKind,
    /// Channel-attention bottleneck reduction ratio.
    pub reduction: usize,
    pub embed_dim: usize,
    pub num_ids: usize,
    /// Number of training domains K.
    pub num_domains: usize,
    pub calib_pool: CalibPool,
    pub mean_path: MeanPath,
    pub stop_grad_entangled: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 128],
            strides: [1, 2, 2, 1],
            input: [3, 32, 16],
            cfd_stages: vec![1, 2, 3, 4],
            decomposition: DecompositionKind::Cfd,
            attention: AttentionKind::C,
            input_norm: NormKind::Csbn,
            id_norm: NormKind::Cin,
            reduction: 16,
            embed_dim: 128,
            num_ids: 20,
            num_domains: 3,
            calib_pool: CalibPool::Max,
            mean_path: MeanPath::ParamsAndStats,
            stop_grad_entangled: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if self.widths.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("stage widths must be nondecreasing".into()));
        }
        if self.strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("strides must be positive".into()));
        }
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::Config("input extents must be positive".into()));
        }
        for &s in &self.cfd_stages {
            if !(1..=4).contains(&s) {
                return Err(Error::Config(format!(
                    "cfd_stages must be a subset of {{1,2,3,4}}, got {s}"
                )));
            }
        }
        let mut sorted = self.cfd_stages.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.cfd_stages.len() {
            return Err(Error::Config("cfd_stages contains duplicates".into()));
        }
        if self.reduction == 0 || self.embed_dim == 0 || self.num_ids == 0 || self.num_domains == 0
        {
            return Err(Error::Config(
                "reduction, embed_dim, num_ids and num_domains must be positive".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialized config; stored in checkpoints
    /// so weights can never be loaded under a mismatched architecture.
    pub fn digest(&self) -> Result<String> {
        let text = toml::to_string(self)
            .map_err(|e| Error::Config(format!("config not serializable: {e}")))?;
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        Ok(format!("{:x}", h.finalize()))
    }

    pub fn has_module(&self, stage: usize) -> bool {
        self.cfd_stages.contains(&stage)
    }

    fn has_domain_head(&self, stage: usize) -> bool {
        self.has_module(stage) && self.decomposition != DecompositionKind::None
    }
}

/// One backbone stage: two 3×3 convolutions with biases, an optional
/// decomposition module and an optional domain head.
#[derive(Clone, Debug)]
pub struct StageParams<F> {
    pub conv1: TensorData<F>,
    pub bias1: TensorData<F>,
    pub conv2: TensorData<F>,
    pub bias2: TensorData<F>,
    pub cfd: Option<CfdParams<F>>,
    /// `(weight [c×K], bias [1×K])` of the stage's domain classifier.
    pub domain_head: Option<(TensorData<F>, TensorData<F>)>,
}

/// Every learnable tensor and running statistic of the model.
#[derive(Clone, Debug)]
pub struct ModelParams<F> {
    pub stages: Vec<StageParams<F>>,
    /// GeM exponent, shape `[1]`, initialized to 3.
    pub gem_p: TensorData<F>,
    /// Projection `(weight, bias)` when `embed_dim != widths[3]`.
    pub proj: Option<(TensorData<F>, TensorData<F>)>,
    /// BNNeck over the embedding (single-domain BN).
    pub feat_bn: BnParams<F>,
    pub classifier_w: TensorData<F>,
    pub classifier_b: TensorData<F>,
}

impl<F: Float> ModelParams<F> {
    pub fn new(cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut c_in = cfg.input[0];
        for (idx, &c_out) in cfg.widths.iter().enumerate() {
            let stage_no = idx + 1;
            let fan1 = c_in * 9;
            let fan2 = c_out * 9;
            let cfd = cfg.has_module(stage_no).then(|| {
                CfdParams::new(
                    c_out,
                    cfg.num_domains,
                    cfg.reduction,
                    cfg.attention,
                    cfg.input_norm,
                    cfg.id_norm,
                    cfg.calib_pool,
                    cfg.mean_path,
                    cfg.stop_grad_entangled,
                    rng,
                )
            });
            let domain_head = cfg.has_domain_head(stage_no).then(|| {
                (
                    init_uniform(&[c_out, cfg.num_domains], c_out, rng),
                    TensorData::zeros(&[1, cfg.num_domains]),
                )
            });
            stages.push(StageParams {
                conv1: init_he_uniform(&[c_out, c_in, 3, 3], fan1, rng),
                bias1: TensorData::zeros(&[1, c_out, 1, 1]),
                conv2: init_he_uniform(&[c_out, c_out, 3, 3], fan2, rng),
                bias2: TensorData::zeros(&[1, c_out, 1, 1]),
                cfd,
                domain_head,
            });
            c_in = c_out;
        }
        let proj = (cfg.embed_dim != cfg.widths[3]).then(|| {
            (
                init_uniform(&[cfg.widths[3], cfg.embed_dim], cfg.widths[3], rng),
                TensorData::zeros(&[1, cfg.embed_dim]),
            )
        });
        Ok(Self {
            stages,
            gem_p: TensorData::full(&[1], F::from_f64(3.0)),
            proj,
            feat_bn: BnParams::new(cfg.embed_dim, 1),
            classifier_w: init_uniform(&[cfg.embed_dim, cfg.num_ids], cfg.embed_dim, rng),
            classifier_b: TensorData::zeros(&[1, cfg.num_ids]),
        })
    }

    /// Visits every tensor as `(name, tensor, trainable)` in a fixed
    /// order shared by the optimizer, gradient checks and checkpoints.
    /// The names match the ones bound on the tape during `forward`.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut TensorData<F>, bool)) {
        for (idx, stage) in self.stages.iter_mut().enumerate() {
            let s = idx + 1;
            f(format!("stage{s}.conv1"), &mut stage.conv1, true);
            f(format!("stage{s}.bias1"), &mut stage.bias1, true);
            f(format!("stage{s}.conv2"), &mut stage.conv2, true);
            f(format!("stage{s}.bias2"), &mut stage.bias2, true);
            if let Some(cfd) = stage.cfd.as_mut() {
                let p = format!("stage{s}.cfd");
                f(format!("{p}.attn_a.c.w1"), &mut cfd.attn_a.w1, true);
                f(format!("{p}.attn_a.c.w2"), &mut cfd.attn_a.w2, true);
                f(format!("{p}.attn_a.c.bias"), &mut cfd.attn_a.bias, true);
                f(format!("{p}.attn_b.c.w1"), &mut cfd.attn_b.w1, true);
                f(format!("{p}.attn_b.c.w2"), &mut cfd.attn_b.w2, true);
                f(format!("{p}.attn_b.c.bias"), &mut cfd.attn_b.bias, true);
                if let Some(sa) = cfd.spatial_a.as_mut() {
                    f(format!("{p}.attn_a.s.kernel"), &mut sa.kernel, true);
                    f(format!("{p}.attn_a.s.bias"), &mut sa.bias, true);
                }
                if let Some(sb) = cfd.spatial_b.as_mut() {
                    f(format!("{p}.attn_b.s.kernel"), &mut sb.kernel, true);
                    f(format!("{p}.attn_b.s.bias"), &mut sb.bias, true);
                }
                visit_norm(&format!("{p}.input_norm"), &mut cfd.input_norm, f);
                visit_norm(&format!("{p}.id_norm"), &mut cfd.id_norm, f);
            }
            if let Some((w, b)) = stage.domain_head.as_mut() {
                f(format!("domain_head{s}.w"), w, true);
                f(format!("domain_head{s}.b"), b, true);
            }
        }
        f("gem_p".into(), &mut self.gem_p, true);
        if let Some((w, b)) = self.proj.as_mut() {
            f("proj.w".into(), w, true);
            f("proj.b".into(), b, true);
        }
        f("feat_bn.gamma0".into(), &mut self.feat_bn.gamma[0], true);
        f("feat_bn.beta0".into(), &mut self.feat_bn.beta[0], true);
        f(
            "feat_bn.running_mean0".into(),
            &mut self.feat_bn.running_mean[0],
            false,
        );
        f(
            "feat_bn.running_var0".into(),
            &mut self.feat_bn.running_var[0],
            false,
        );
        f("classifier.w".into(), &mut self.classifier_w, true);
        f("classifier.b".into(), &mut self.classifier_b, true);
    }

    /// Total number of stored scalars (trainable or not).
    pub fn numel(&mut self) -> usize {
        let mut n = 0;
        self.visit_mut(&mut |_, t, _| n += t.numel());
        n
    }
}

fn visit_norm<F: Float>(
    prefix: &str,
    norm: &mut crate::decompose::NormParams<F>,
    f: &mut impl FnMut(String, &mut TensorData<F>, bool),
) {
    use crate::decompose::NormParams;
    match norm {
        NormParams::None => {}
        NormParams::Bn(state) => {
            f(format!("{prefix}.gamma0"), &mut state.gamma[0], true);
            f(format!("{prefix}.beta0"), &mut state.beta[0], true);
            f(
                format!("{prefix}.running_mean0"),
                &mut state.running_mean[0],
                false,
            );
            f(
                format!("{prefix}.running_var0"),
                &mut state.running_var[0],
                false,
            );
        }
        NormParams::Csbn(state) => {
            let k = state.gamma.len();
            for d in 0..k {
                f(format!("{prefix}.gamma{d}"), &mut state.gamma[d], true);
                f(format!("{prefix}.beta{d}"), &mut state.beta[d], true);
            }
            f(format!("{prefix}.omega_m"), &mut state.omega_m, true);
            f(format!("{prefix}.omega_gamma"), &mut state.omega_gamma, true);
            f(format!("{prefix}.omega_beta"), &mut state.omega_beta, true);
            for d in 0..k {
                f(
                    format!("{prefix}.running_mean{d}"),
                    &mut state.running_mean[d],
                    false,
                );
                f(
                    format!("{prefix}.running_var{d}"),
                    &mut state.running_var[d],
                    false,
                );
            }
        }
        NormParams::In(state) => {
            f(format!("{prefix}.gamma"), &mut state.gamma, true);
            f(format!("{prefix}.beta"), &mut state.beta, true);
        }
        NormParams::Cin(state) => {
            f(format!("{prefix}.gamma"), &mut state.gamma, true);
            f(format!("{prefix}.beta"), &mut state.beta, true);
            f(format!("{prefix}.omega_u"), &mut state.omega_u, true);
            f(format!("{prefix}.omega_v"), &mut state.omega_v, true);
            f(format!("{prefix}.omega_o"), &mut state.omega_o, true);
        }
    }
}

/// Graph handles produced by one forward pass.
pub struct ForwardOutput {
    /// Post-BNNeck embedding `[n × e]`, used for retrieval and triplet.
    pub embedding: Var,
    pub id_logits: Var,
    /// `(0-based stage index, logits [n × K])` per enabled stage.
    pub domain_logits: Vec<(usize, Var)>,
}

/// Full model forward. Train mode needs one domain id per sample; eval
/// mode routes every normalization through the mean path and ignores the
/// supplied ids.
pub fn forward<F: Float>(
    bd: &mut Binder<F>,
    cfg: &BackboneConfig,
    params: &mut ModelParams<F>,
    x: Var,
    domains: &[usize],
    mode: Mode,
) -> Result<ForwardOutput> {
    let xs = bd.tape.shape(x).to_vec();
    if xs.len() != 4 || xs[1] != cfg.input[0] {
        return Err(shape_err(format!(
            "expected n×{}×h×w input, got {:?}",
            cfg.input[0], xs
        )));
    }
    let n = xs[0];
    if mode == Mode::Train && domains.len() != n {
        return Err(shape_err(format!(
            "{} domain ids for a batch of {}",
            domains.len(),
            n
        )));
    }
    if params.stages.len() != 4 {
        return Err(shape_err("model must have exactly 4 stages".to_string()));
    }

    let mut h = x;
    let mut domain_logits = Vec::new();
    for idx in 0..4 {
        let s = idx + 1;
        let stage = &mut params.stages[idx];
        let w1 = bd.bind(format!("stage{s}.conv1"), &stage.conv1);
        let b1 = bd.bind(format!("stage{s}.bias1"), &stage.bias1);
        let w2 = bd.bind(format!("stage{s}.conv2"), &stage.conv2);
        let b2 = bd.bind(format!("stage{s}.bias2"), &stage.bias2);
        h = bd.tape.conv2d(h, w1, cfg.strides[idx], 1)?;
        h = bd.tape.add(h, b1)?;
        h = bd.tape.relu(h);
        h = bd.tape.conv2d(h, w2, 1, 1)?;
        h = bd.tape.add(h, b2)?;
        h = bd.tape.relu(h);

        if let Some(cfd) = stage.cfd.as_mut() {
            let prefix = format!("stage{s}.cfd");
            let out = match cfg.decomposition {
                DecompositionKind::Cfd => cfd_forward(bd, &prefix, h, cfd, domains, mode)?,
                DecompositionKind::Pfd => pfd_forward(bd, &prefix, h, cfd, domains, mode)?,
                DecompositionKind::None => {
                    // norm-only module: apply the configured
                    // normalizations without any split
                    let mut y = h;
                    if cfd.enabled {
                        y = apply_norm(
                            bd,
                            &format!("{prefix}.input_norm"),
                            y,
                            &mut cfd.input_norm,
                            domains,
                            mode,
                            cfd.calib_pool,
                            cfd.mean_path,
                        )?;
                        y = apply_norm(
                            bd,
                            &format!("{prefix}.id_norm"),
                            y,
                            &mut cfd.id_norm,
                            domains,
                            mode,
                            cfd.calib_pool,
                            cfd.mean_path,
                        )?;
                    }
                    Decomposed {
                        id_feature: y,
                        domain_feature: None,
                    }
                }
            };
            h = out.id_feature;
            if let (Some(df), Some((hw, hb))) = (out.domain_feature, stage.domain_head.as_ref()) {
                let c = bd.tape.shape(df)[1];
                let pooled = bd.tape.reduce_mean(df, &[2, 3])?;
                let flat = bd.tape.reshape(pooled, &[n, c])?;
                let w = bd.bind(format!("domain_head{s}.w"), hw);
                let b = bd.bind(format!("domain_head{s}.b"), hb);
                let z = bd.tape.matmul(flat, w)?;
                let logits = bd.tape.add(z, b)?;
                domain_logits.push((idx, logits));
            }
        }
    }

    // GeM needs nonnegative inputs; the final feature may be negative
    // when a decomposition module runs at stage 4
    let rect = bd.tape.relu(h);
    let p = bd.bind("gem_p", &params.gem_p);
    let pooled = bd.tape.gem_pool(rect, p)?;

    let mut feat = pooled;
    if let Some((pw, pb)) = params.proj.as_ref() {
        let w = bd.bind("proj.w", pw);
        let b = bd.bind("proj.b", pb);
        let z = bd.tape.matmul(feat, w)?;
        feat = bd.tape.add(z, b)?;
    }
    let e = bd.tape.shape(feat)[1];
    let as_map = bd.tape.reshape(feat, &[n, e, 1, 1])?;
    let bn = batch_norm(bd, "feat_bn", as_map, &mut params.feat_bn, 0, mode)?;
    let embedding = bd.tape.reshape(bn, &[n, e])?;

    let cw = bd.bind("classifier.w", &params.classifier_w);
    let cb = bd.bind("classifier.b", &params.classifier_b);
    let z = bd.tape.matmul(embedding, cw)?;
    let id_logits = bd.tape.add(z, cb)?;

    Ok(ForwardOutput {
        embedding,
        id_logits,
        domain_logits,
    })
}

// ---- checkpointing ----

/// Writes a plain-text manifest (format version, config digest, one line
/// per tensor with shape and trainability) followed by the flat
/// little-endian 32-bit values of every tensor in manifest order.
pub fn save_checkpoint<F: Float>(
    path: &Path,
    cfg: &BackboneConfig,
    params: &mut ModelParams<F>,
) -> Result<()> {
    let mut header = String::new();
    header.push_str(CHECKPOINT_MAGIC);
    header.push('\n');
    header.push_str(&format!("digest {}\n", cfg.digest()?));
    let mut manifest = String::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut count = 0usize;
    params.visit_mut(&mut |name, t, trainable| {
        count += 1;
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "{} {} {}\n",
            name,
            if trainable { 1 } else { 0 },
            dims.join("x")
        ));
        for &v in &t.data {
            payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    });
    header.push_str(&format!("tensors {count}\n"));
    header.push_str(&manifest);
    header.push_str("DATA\n");
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes)?;
    Ok(())
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Loads a checkpoint into params shaped by `cfg`. The file's digest,
/// manifest and payload length must all match exactly.
pub fn load_checkpoint<F: Float>(
    path: &Path,
    cfg: &BackboneConfig,
    params: &mut ModelParams<F>,
) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let marker = b"DATA\n";
    let data_at = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| ckpt_err("missing DATA marker"))?;
    let header = std::str::from_utf8(&bytes[..data_at])
        .map_err(|_| ckpt_err("header is not valid UTF-8"))?;
    let payload = &bytes[data_at + marker.len()..];

    let mut lines = header.lines();
    let magic = lines.next().ok_or_else(|| ckpt_err("empty file"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ckpt_err(format!(
            "format version mismatch: expected '{CHECKPOINT_MAGIC}', found '{magic}'"
        )));
    }
    let digest_line = lines.next().ok_or_else(|| ckpt_err("missing digest"))?;
    let digest = digest_line
        .strip_prefix("digest ")
        .ok_or_else(|| ckpt_err("malformed digest line"))?;
    let expected = cfg.digest()?;
    if digest != expected {
        return Err(ckpt_err(format!(
            "config digest mismatch: checkpoint {digest}, config {expected}"
        )));
    }
    let count_line = lines.next().ok_or_else(|| ckpt_err("missing tensor count"))?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ckpt_err("malformed tensor count"))?;
    let manifest: Vec<&str> = lines.collect();
    if manifest.len() != count {
        return Err(ckpt_err(format!(
            "manifest lists {} tensors, header promises {}",
            manifest.len(),
            count
        )));
    }

    let mut offset = 0usize;
    let mut idx = 0usize;
    let mut failure: Option<Error> = None;
    params.visit_mut(&mut |name, t, trainable| {
        if failure.is_some() {
            return;
        }
        if idx >= manifest.len() {
            failure = Some(ckpt_err(format!("tensor '{name}' missing from manifest")));
            return;
        }
        let parts: Vec<&str> = manifest[idx].split_whitespace().collect();
        idx += 1;
        if parts.len() != 3 || parts[0] != name {
            failure = Some(ckpt_err(format!(
                "manifest entry '{}' does not match expected tensor '{}'",
                manifest[idx - 1],
                name
            )));
            return;
        }
        let flag = if trainable { "1" } else { "0" };
        if parts[1] != flag {
            failure = Some(ckpt_err(format!(
                "trainability flag mismatch for tensor '{name}'"
            )));
            return;
        }
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        if parts[2] != dims.join("x") {
            failure = Some(ckpt_err(format!(
                "shape mismatch for tensor '{name}': file has {}, model needs {}",
                parts[2],
                dims.join("x")
            )));
            return;
        }
        let need = t.numel() * 4;
        if offset + need > payload.len() {
            failure = Some(ckpt_err(format!(
                "truncated payload while reading tensor '{name}'"
            )));
            return;
        }
        for (j, v) in t.data.iter_mut().enumerate() {
            let at = offset + j * 4;
            let raw = f32::from_le_bytes([
                payload[at],
                payload[at + 1],
                payload[at + 2],
                payload[at + 3],
            ]);
            *v = F::from_f64(raw as f64);
        }
        offset += need;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if offset != payload.len() {
        return Err(ckpt_err(format!(
            "payload has {} trailing bytes",
            payload.len() - offset
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            widths: [4, 8, 8, 8],
            embed_dim: 8,
            num_ids: 5,
            num_domains: 3,
            reduction: 4,
            ..BackboneConfig::default()
        }
    }

    fn batch(n: usize, cfg: &BackboneConfig) -> TensorData<f32> {
        let numel = n * cfg.input[0] * cfg.input[1] * cfg.input[2];
        TensorData {
            shape: vec![n, cfg.input[0], cfg.input[1], cfg.input[2]],
            data: (0..numel).map(|i| ((i % 97) as f32) / 97.0).collect(),
        }
    }

    fn run_forward(
        cfg: &BackboneConfig,
        params: &mut ModelParams<f32>,
        n: usize,
        mode: Mode,
    ) -> (Tape<f32>, ForwardOutput) {
        let mut tape = Tape::new();
        let x = tape.constant(&batch(n, cfg));
        let mut bd = Binder::new(&mut tape);
        let domains: Vec<usize> = (0..n).map(|i| i % cfg.num_domains).collect();
        let out = forward(&mut bd, cfg, params, x, &domains, mode).unwrap();
        (tape, out)
    }

    #[test]
    fn full_model_shapes_and_finiteness() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ModelParams::<f32>::new(&cfg, &mut rng).unwrap();
        let (tape, out) = run_forward(&cfg, &mut params, 8, Mode::Train);
        assert_eq!(tape.shape(out.embedding), [8, cfg.embed_dim]);
        assert_eq!(tape.shape(out.id_logits), [8, cfg.num_ids]);
        assert_eq!(out.domain_logits.len(), 4);
        for &(_, v) in &out.domain_logits {
            assert_eq!(tape.shape(v), [8, cfg.num_domains]);
        }
        tape.check_finite().unwrap();
    }

    #[test]
    fn plain_cnn_has_no_domain_logits() {
        let cfg = BackboneConfig {
            cfd_stages: vec![],
            decomposition: DecompositionKind::None,
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ModelParams::<f32>::new(&cfg, &mut rng).unwrap();
        let (_, out) = run_forward(&cfg, &mut params, 4, Mode::Train);
        assert!(out.domain_logits.is_empty());
    }

    #[test]
    fn single_stage_yields_single_domain_logit() {
        let cfg = BackboneConfig {
            cfd_stages: vec![3],
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ModelParams::<f32>::new(&cfg, &mut rng).unwrap();
        let (_, out) = run_forward(&cfg, &mut params, 6, Mode::Train);
        assert_eq!(out.domain_logits.len(), 1);
        assert_eq!(out.domain_logits[0].0, 2);
    }

    #[test]
    fn pfd_and_cfd_agree_before_the_module() {
        // modules only at stage 4: activations up to stage 3 and the
        // initializer stream for shared layers are identical
        let base = BackboneConfig {
            cfd_stages: vec![4],
            ..small_cfg()
        };
        let cfg_pfd = BackboneConfig {
            decomposition: DecompositionKind::Pfd,
            ..base.clone()
        };
        let mut rng_a = ChaCha8Rng::seed_from_u64(3);
        let mut rng_b = ChaCha8Rng::seed_from_u64(3);
        let mut pa = ModelParams::<f32>::new(&base, &mut rng_a).unwrap();
        let mut pb = ModelParams::<f32>::new(&cfg_pfd, &mut rng_b).unwrap();
        // disable both modules: the remaining graph must agree bitwise
        pa.stages[3].cfd.as_mut().unwrap().enabled = false;
        pb.stages[3].cfd.as_mut().unwrap().enabled = false;
        let (ta, oa) = run_forward(&base, &mut pa, 4, Mode::Train);
        let (tb, ob) = run_forward(&cfg_pfd, &mut pb, 4, Mode::Train);
        assert_eq!(ta.value(oa.embedding), tb.value(ob.embedding));
    }

    #[test]
    fn eval_forward_ignores_domain_labels() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ModelParams::<f32>::new(&cfg, &mut rng).unwrap();
        let x = batch(4, &cfg);
        let mut run = |labels: Vec<usize>| {
            let mut tape = Tape::new();
            let xv = tape.constant(&x);
            let mut bd = Binder::new(&mut tape);
            let out = forward(&mut bd, &cfg, &mut params, xv, &labels, Mode::Eval).unwrap();
            tape.value(out.embedding).to_vec()
        };
        let a = run(vec![0, 0, 0, 0]);
        let b = run(vec![2, 1, 0, 2]);
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_is_lossless_and_idempotent() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut params = ModelParams::<f32>::new(&cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &cfg, &mut params).unwrap();

        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let mut loaded = ModelParams::<f32>::new(&cfg, &mut rng2).unwrap();
        load_checkpoint(&p1, &cfg, &mut loaded).unwrap();
        let mut orig = Vec::new();
        params.visit_mut(&mut |_, t, _| orig.extend(t.data.iter().copied()));
        let mut back = Vec::new();
        loaded.visit_mut(&mut |_, t, _| back.extend(t.data.iter().copied()));
        assert_eq!(orig, back);

        save_checkpoint(&p2, &cfg, &mut loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_wrong_config_and_truncation() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut params = ModelParams::<f32>::new(&cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &cfg, &mut params).unwrap();

        let other = BackboneConfig {
            num_ids: 6,
            ..small_cfg()
        };
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let mut target = ModelParams::<f32>::new(&other, &mut rng2).unwrap();
        let err = load_checkpoint(&path, &other, &mut target).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");

        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
        let mut rng3 = ChaCha8Rng::seed_from_u64(0);
        let mut target2 = ModelParams::<f32>::new(&cfg, &mut rng3).unwrap();
        let err = load_checkpoint(&cut, &cfg, &mut target2).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let bad = BackboneConfig {
            cfd_stages: vec![5],
            ..BackboneConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = BackboneConfig {
            widths: [16, 8, 8, 8],
            ..BackboneConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
