//! Ablation harness: named experiment grids over configuration switches,
//! each cell trained and evaluated across a seed list, reported as median
//! mAP/R1 with min–max spread plus the grid's directional expectations.

use crate::config::RunConfig;
use crate::decompose::NormKind;
use crate::error::Error;
use crate::model::DecompositionKind;
use crate::train::train;
use crate::Result;

#[derive(Clone, Debug)]
pub struct CellSpec {
    pub name: String,
    pub config: RunConfig,
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub name: String,
    /// Per-seed unseen-domain mAP/R1 in percent, seed order.
    pub map: Vec<f64>,
    pub r1: Vec<f64>,
}

impl CellResult {
    pub fn map_median(&self) -> f64 {
        median(&self.map)
    }
    pub fn r1_median(&self) -> f64 {
        median(&self.r1)
    }
    pub fn map_spread(&self) -> (f64, f64) {
        spread(&self.map)
    }
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub grid: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
    /// Human-readable directional checks with pass/fail verdicts.
    pub checks: Vec<(String, bool)>,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn spread(v: &[f64]) -> (f64, f64) {
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

fn with<FN: FnOnce(&mut RunConfig)>(base: &RunConfig, name: &str, f: FN) -> CellSpec {
    let mut config = base.clone();
    f(&mut config);
    CellSpec {
        name: name.to_string(),
        config,
    }
}

/// The baseline cell: plain CNN, no modules, no domain loss.
fn baseline(base: &RunConfig) -> CellSpec {
    with(base, "baseline", |c| {
        c.backbone.decomposition = DecompositionKind::None;
        c.backbone.cfd_stages = vec![];
        c.loss.lambda = [0.0; 4];
    })
}

/// A Tab.-3-style cell from the three component switches.
fn compo_cell(base: &RunConfig, cdm: bool, csbn: bool, cin: bool) -> CellSpec {
    let name = format!(
        "cdm={} csbn={} cin={}",
        cdm as u8, csbn as u8, cin as u8
    );
    if !cdm && !csbn && !cin {
        let mut c = baseline(base);
        c.name = format!("{name} (baseline)");
        return c;
    }
    with(base, &name, |c| {
        c.backbone.decomposition = if cdm {
            DecompositionKind::Cfd
        } else {
            DecompositionKind::None
        };
        c.backbone.input_norm = if csbn { NormKind::Csbn } else { NormKind::None };
        c.backbone.id_norm = if cin { NormKind::Cin } else { NormKind::None };
        if !cdm {
            c.loss.lambda = [0.0; 4];
        }
    })
}

/// Enumerates the named grid's cells over `base`.
pub fn grid_cells(grid: &str, base: &RunConfig) -> Result<Vec<CellSpec>> {
    let cells = match grid {
        // CDM on/off × CSBN on/off × CIN on/off
        "compo" => {
            let mut v = Vec::new();
            for cdm in [false, true] {
                for csbn in [false, true] {
                    for cin in [false, true] {
                        v.push(compo_cell(base, cdm, csbn, cin));
                    }
                }
            }
            v
        }
        // normalization choice at the input-feature and pure-id positions
        "norm-placement" => {
            use NormKind::*;
            let rows: [(NormKind, NormKind); 13] = [
                (None, None),
                (None, In),
                (Bn, None),
                (Bn, In),
                (None, Bn),
                (In, None),
                (In, Bn),
                (None, Csbn),
                (Cin, None),
                (Cin, Csbn),
                (Csbn, None),
                (Csbn, Csbn),
                (Csbn, Cin),
            ];
            rows.iter()
                .map(|&(inp, idn)| {
                    with(base, &format!("input={inp:?} id={idn:?}"), |c| {
                        c.backbone.decomposition = DecompositionKind::Cfd;
                        c.backbone.input_norm = inp;
                        c.backbone.id_norm = idn;
                    })
                })
                .collect()
        }
        // where to place the module
        "stage" => {
            let mut v = vec![baseline(base)];
            for stages in [vec![1], vec![2], vec![3], vec![4], vec![1, 2, 3, 4]] {
                v.push(with(base, &format!("stages={stages:?}"), |c| {
                    c.backbone.cfd_stages = stages.clone();
                }));
            }
            v
        }
        // domain-loss effectiveness and λ sweep
        "domain-loss" => {
            let mut v = vec![baseline(base)];
            v.push(with(base, "cfd no-norms +domain-loss", |c| {
                c.backbone.input_norm = NormKind::None;
                c.backbone.id_norm = NormKind::None;
            }));
            for lambda in [0.0, 0.05, 0.1, 0.5] {
                v.push(with(base, &format!("full lambda={lambda}"), |c| {
                    c.loss.lambda = [lambda; 4];
                }));
            }
            v
        }
        // attention kind inside the module
        "attention" => {
            use crate::attention::AttentionKind::*;
            [(S, "s"), (C, "c"), (Sc, "sc")]
                .iter()
                .map(|&(k, n)| {
                    with(base, &format!("attention={n}"), |c| {
                        c.backbone.attention = k;
                    })
                })
                .collect()
        }
        // decomposition strategy with and without calibrated norms
        "pfd-vs-cfd" => {
            let mut v = Vec::new();
            for (norms, tag) in [(false, "no-norms"), (true, "norms")] {
                for (kind, kname) in [
                    (DecompositionKind::None, "none"),
                    (DecompositionKind::Pfd, "pfd"),
                    (DecompositionKind::Cfd, "cfd"),
                ] {
                    v.push(with(base, &format!("{kname} {tag}"), |c| {
                        c.backbone.decomposition = kind;
                        if kind == DecompositionKind::None {
                            c.backbone.cfd_stages = vec![];
                            c.loss.lambda = [0.0; 4];
                        }
                        if !norms {
                            c.backbone.input_norm = NormKind::None;
                            c.backbone.id_norm = NormKind::None;
                        }
                    }));
                }
            }
            v
        }
        other => {
            return Err(Error::Config(format!(
                "unknown grid '{other}' (expected compo, norm-placement, stage, domain-loss, attention or pfd-vs-cfd)"
            )))
        }
    };
    Ok(cells)
}

fn find<'a>(cells: &'a [CellResult], name: &str) -> Option<&'a CellResult> {
    cells.iter().find(|c| c.name.starts_with(name))
}

/// Directional expectations per grid, evaluated on medians.
fn checks(grid: &str, cells: &[CellResult], seeds: usize) -> Vec<(String, bool)> {
    let mut out = Vec::new();
    match grid {
        "compo" => {
            let (Some(full), Some(base)) = (find(cells, "cdm=1 csbn=1 cin=1"), find(cells, "cdm=0 csbn=0 cin=0")) else {
                return out;
            };
            let gap = full.map_median() - base.map_median();
            out.push((
                format!("full - baseline = {gap:.2} mAP >= 5"),
                gap >= 5.0,
            ));
            let per_seed = full
                .map
                .iter()
                .zip(&base.map)
                .filter(|(f, b)| *f - *b >= 5.0)
                .count();
            out.push((
                format!("full - baseline >= 5 mAP in {per_seed}/{seeds} seeds (need 4/5)"),
                per_seed * 5 >= seeds * 4,
            ));
            for single in ["cdm=0 csbn=1 cin=0", "cdm=0 csbn=0 cin=1"] {
                if let Some(cell) = find(cells, single) {
                    let ok = full.map_median() >= cell.map_median()
                        && cell.map_median() >= base.map_median();
                    out.push((
                        format!(
                            "full ({:.2}) >= {single} ({:.2}) >= baseline ({:.2})",
                            full.map_median(),
                            cell.map_median(),
                            base.map_median()
                        ),
                        ok,
                    ));
                }
            }
        }
        "pfd-vs-cfd" => {
            for tag in ["no-norms", "norms"] {
                let (Some(n), Some(p), Some(c)) = (
                    find(cells, &format!("none {tag}")),
                    find(cells, &format!("pfd {tag}")),
                    find(cells, &format!("cfd {tag}")),
                ) else {
                    continue;
                };
                let ok = c.map_median() >= p.map_median() && p.map_median() >= n.map_median();
                out.push((
                    format!(
                        "[{tag}] cfd ({:.2}) >= pfd ({:.2}) >= baseline ({:.2})",
                        c.map_median(),
                        p.map_median(),
                        n.map_median()
                    ),
                    ok,
                ));
            }
        }
        "domain-loss" => {
            if let (Some(with_dl), Some(without)) =
                (find(cells, "full lambda=0.1"), find(cells, "full lambda=0 "))
            {
                let ok = with_dl.map_median() >= without.map_median();
                out.push((
                    format!(
                        "full with domain loss ({:.2}) >= without ({:.2})",
                        with_dl.map_median(),
                        without.map_median()
                    ),
                    ok,
                ));
            }
        }
        _ => {}
    }
    out
}

/// Trains and evaluates every cell of the named grid over all seeds.
pub fn run_grid(grid: &str, base: &RunConfig, seeds: &[u64]) -> Result<GridResult> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let specs = grid_cells(grid, base)?;
    let mut cells = Vec::with_capacity(specs.len());
    for spec in &specs {
        let mut map = Vec::with_capacity(seeds.len());
        let mut r1 = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let (mut params, dataset, _) = train::<f32>(&spec.config, seed)?;
            let r = crate::eval::evaluate_model(
                &spec.config.backbone,
                &mut params,
                &dataset,
                spec.config.l2_normalize,
                10,
            )?;
            map.push(100.0 * r.map);
            r1.push(100.0 * r.cmc[0]);
        }
        cells.push(CellResult {
            name: spec.name.clone(),
            map,
            r1,
        });
    }
    let checks = checks(grid, &cells, seeds.len());
    Ok(GridResult {
        grid: grid.to_string(),
        seeds: seeds.to_vec(),
        cells,
        checks,
    })
}

/// Plain-text table of a grid result.
pub fn render(g: &GridResult) -> String {
    let mut out = String::new();
    out.push_str(&format!("grid {} over seeds {:?}\n", g.grid, g.seeds));
    out.push_str(&format!(
        "{:<32} {:>10} {:>15} {:>10}\n",
        "cell", "mAP med", "mAP min..max", "R1 med"
    ));
    for c in &g.cells {
        let (lo, hi) = c.map_spread();
        out.push_str(&format!(
            "{:<32} {:>10.2} {:>7.2}..{:<7.2} {:>10.2}\n",
            c.name,
            c.map_median(),
            lo,
            hi,
            c.r1_median()
        ));
    }
    for (desc, ok) in &g.checks {
        out.push_str(&format!(
            "check [{}] {desc}\n",
            if *ok { "pass" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_enumerate_expected_cells() {
        let base = RunConfig::default();
        assert_eq!(grid_cells("compo", &base).unwrap().len(), 8);
        assert_eq!(grid_cells("stage", &base).unwrap().len(), 6);
        assert_eq!(grid_cells("pfd-vs-cfd", &base).unwrap().len(), 6);
        assert_eq!(grid_cells("attention", &base).unwrap().len(), 3);
        assert_eq!(grid_cells("norm-placement", &base).unwrap().len(), 13);
        assert_eq!(grid_cells("domain-loss", &base).unwrap().len(), 6);
        assert!(grid_cells("nope", &base).is_err());
        for g in ["compo", "stage", "pfd-vs-cfd", "attention", "norm-placement", "domain-loss"] {
            for cell in grid_cells(g, &base).unwrap() {
                cell.config.validate().unwrap();
            }
        }
    }

    #[test]
    fn median_and_spread() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(spread(&[3.0, 1.0, 2.0]), (1.0, 3.0));
    }

    #[test]
    fn single_cell_grid_matches_train_eval() {
        // composition: one cell over one seed equals a direct train+eval
        let mut base = crate::train::tests::tiny_config();
        base.backbone.attention = crate::attention::AttentionKind::C;
        let g = run_grid("attention", &base, &[1]).unwrap();
        let cell = find(&g.cells, "attention=c").unwrap();
        let (mut params, dataset, _) = {
            let spec = grid_cells("attention", &base)
                .unwrap()
                .into_iter()
                .find(|s| s.name == "attention=c")
                .unwrap();
            train::<f32>(&spec.config, 1).unwrap()
        };
        let direct = crate::eval::evaluate_model(&base.backbone, &mut params, &dataset, false, 10)
            .unwrap();
        assert_eq!(cell.map[0], 100.0 * direct.map);
    }
}
