//! Scratch driver for measuring directional benchmark cells while tuning
//! the synthetic benchmark. Not part of the test suite.

use cfd::config::{OptimizerKind, RunConfig};
use cfd::decompose::NormKind;
use cfd::eval::evaluate_model;
use cfd::model::DecompositionKind;
use cfd::train::train;

fn bench_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.backbone.widths = [8, 12, 16, 24];
    c.backbone.embed_dim = 24;
    c.backbone.reduction = 4;
    c.backbone.input = [3, 16, 8];
    c.data.extents = [3, 16, 8];
    c.optim.epochs = 15;
    c.optim.steps_per_epoch = 8;
    c.optim.p = 3;
    c.optim.k_imgs = 3;
    c
}

fn run(name: &str, cfg: &RunConfig, seeds: &[u64]) {
    let mut maps = Vec::new();
    let mut losses = Vec::new();
    for &seed in seeds {
        let (mut params, dataset, report) = train::<f32>(cfg, seed).expect("train");
        let r = evaluate_model(&cfg.backbone, &mut params, &dataset, cfg.l2_normalize, 10)
            .expect("eval");
        maps.push(100.0 * r.map);
        losses.push(report.epochs.last().map(|e| e.total_loss).unwrap_or(f64::NAN));
    }
    let strs: Vec<String> = maps.iter().map(|m| format!("{m:.2}")).collect();
    let lstrs: Vec<String> = losses.iter().map(|l| format!("{l:.2}")).collect();
    maps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = maps[maps.len() / 2];
    println!(
        "{name:<28} median {med:6.2}  [{}]  loss [{}]",
        strs.join(", "),
        lstrs.join(", ")
    );
}

fn main() {
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .map(|s| s.parse().expect("seed"))
        .collect();
    let seeds = if seeds.is_empty() { vec![1, 2, 3] } else { seeds };

    let base = bench_config();

    let mut baseline = base.clone();
    baseline.backbone.decomposition = DecompositionKind::None;
    baseline.backbone.cfd_stages = vec![];
    baseline.loss.lambda = [0.0; 4];

    let mut csbn_only = base.clone();
    csbn_only.backbone.decomposition = DecompositionKind::None;
    csbn_only.backbone.id_norm = NormKind::None;
    csbn_only.loss.lambda = [0.0; 4];
    let mut cin_only = base.clone();
    cin_only.backbone.decomposition = DecompositionKind::None;
    cin_only.backbone.input_norm = NormKind::None;
    cin_only.loss.lambda = [0.0; 4];

    let dist: f64 = std::env::var("DIST")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.25);
    let epochs: usize = std::env::var("EPOCHS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(30);

    let mut full_nodl = base.clone();
    full_nodl.loss.lambda = [0.0; 4];

    let mut cfd_nonorm = base.clone();
    cfd_nonorm.backbone.input_norm = NormKind::None;
    cfd_nonorm.backbone.id_norm = NormKind::None;
    let mut pfd_nonorm = cfd_nonorm.clone();
    pfd_nonorm.backbone.decomposition = DecompositionKind::Pfd;
    let mut pfd_norm = base.clone();
    pfd_norm.backbone.decomposition = DecompositionKind::Pfd;

    let mut full_csbn = base.clone();
    full_csbn.backbone.id_norm = NormKind::None;
    let mut full_cin = base.clone();
    full_cin.backbone.input_norm = NormKind::None;
    let mut full_bn_cin = base.clone();
    full_bn_cin.backbone.input_norm = NormKind::Bn;
    let mut full_csbn_in = base.clone();
    full_csbn_in.backbone.id_norm = NormKind::In;

    let cells: Vec<(&str, RunConfig)> = vec![
        ("baseline", baseline),
        ("csbn-only", csbn_only),
        ("cin-only", cin_only),
        ("full", base),
        ("full lambda=0", full_nodl),
        ("cfd no-norms", cfd_nonorm),
        ("pfd no-norms", pfd_nonorm),
        ("pfd norms", pfd_norm),
    ];
    let lr: f64 = std::env::var("LR")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(3.5e-4);
    let clip: f64 = std::env::var("CLIP")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(5.0);
    let strides: Vec<usize> = std::env::var("STRIDES")
        .map(|s| s.split(',').map(|v| v.parse().expect("stride")).collect())
        .unwrap_or_else(|_| vec![1, 2, 2, 1]);
    let nids: usize = std::env::var("NIDS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let imgs: usize = std::env::var("IMGS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(8);
    let noise: f64 = std::env::var("NOISE")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.01);
    let spread: f64 = std::env::var("SPREAD")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(1.0);
    for (name, mut cfg) in cells {
        cfg.data.min_style_distance = dist;
        cfg.data.style_spread = spread;
        cfg.data.num_ids = nids;
        cfg.data.images_per_id = imgs;
        cfg.data.noise = noise;
        cfg.backbone.num_ids = nids;
        cfg.optim.epochs = epochs;
        cfg.optim.lr = lr;
        if std::env::var("OPT").as_deref() == Ok("adam") {
            cfg.optim.optimizer = OptimizerKind::Adam;
        }
        cfg.optim.grad_clip = clip;
        cfg.backbone.strides = [strides[0], strides[1], strides[2], strides[3]];
        run(name, &cfg, &seeds);
    }
}
