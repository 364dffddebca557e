use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use scalar_core::control::{projection_param_count, InjectionSet, ProjectionSpec, Sharing, Structure};
use scalar_core::data::generate_dataset;
use scalar_core::metrics::{consistency_eval, EvalOptions};
use scalar_core::train::FreezePolicy;

use crate::pipeline::{base_model, finetune, load_config, load_samples, Paths};
use crate::resolve;

/// Axes of the grid as written in the grid file; absent axes keep the
/// configured value.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    sharing: Option<Vec<String>>,
    structure: Option<Vec<String>>,
    injection: Option<Vec<String>>,
    freeze: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub sharing: Vec<Sharing>,
    pub structure: Vec<Structure>,
    pub injection: Vec<InjectionSet>,
    pub freeze: Vec<FreezePolicy>,
}

impl AblationGrid {
    /// Cells in row order: sharing, then structure, injection, freeze.
    pub fn cells(&self) -> Vec<(ProjectionSpec, FreezePolicy)> {
        let mut out = Vec::new();
        for &sharing in &self.sharing {
            for &structure in &self.structure {
                for injection in &self.injection {
                    for &f in &self.freeze {
                        out.push((
                            ProjectionSpec {
                                sharing,
                                structure,
                                injection: injection.clone(),
                            },
                            f,
                        ));
                    }
                }
            }
        }
        out
    }
}

fn axis<T: std::str::FromStr>(name: &str, given: Option<Vec<String>>, fallback: T) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    match given {
        None => Ok(vec![fallback]),
        Some(v) if v.is_empty() => bail!("empty grid: axis `{name}` lists no values"),
        Some(v) => v
            .iter()
            .map(|s| s.parse::<T>().map_err(|e| anyhow::anyhow!("grid axis `{name}`: {e}")))
            .collect(),
    }
}

/// Parses a grid document against the configured projection and freeze policy.
pub fn parse_grid(text: &str, spec: &ProjectionSpec, freeze: FreezePolicy) -> Result<AblationGrid> {
    let g: GridFile = toml::from_str(text).map_err(|e| anyhow::anyhow!("grid: {}", e.message()))?;
    if g.sharing.is_none() && g.structure.is_none() && g.injection.is_none() && g.freeze.is_none() {
        bail!("empty grid: no axis given (expected sharing, structure, injection or freeze)");
    }
    Ok(AblationGrid {
        sharing: axis("sharing", g.sharing, spec.sharing)?,
        structure: axis("structure", g.structure, spec.structure)?,
        injection: axis("injection", g.injection, spec.injection.clone())?,
        freeze: axis("freeze", g.freeze, freeze)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub consistency: f64,
    /// Mean cross-entropy over the last epoch.
    pub final_loss: f64,
    pub projection_params: usize,
    pub backbone_params: usize,
}

pub const ABLATION_HEADER: &str = "cell,consistency,final_loss,projection_params,backbone_params";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{}",
            self.cell, self.consistency, self.final_loss, self.projection_params, self.backbone_params
        )
    }
}

pub fn cmd_ablate(workdir: &Path, grid: &Path, config: &Path) -> Result<()> {
    let cfg = load_config(workdir, config)?;
    cfg.validate()?;
    let text = fs::read_to_string(resolve(workdir, grid)).with_context(|| format!("reading {}", grid.display()))?;
    let grid = parse_grid(&text, &cfg.train.projection, cfg.train.freeze)?;
    let paths = Paths::new(resolve(workdir, &cfg.out))?;
    fs::write(paths.config(), cfg.to_toml())?;
    let samples = load_samples(workdir, &cfg)?;
    let base = base_model(workdir, &cfg, &samples, Some(&paths))?;
    let eval = generate_dataset(cfg.data.eval_count, cfg.data.eval_seed);
    let modality = cfg.train.modalities[0];
    let backbone_params = base.store.numel(base.backbone.param_ids());
    let sched = &cfg.model.backbone.schedule;
    let mut rows = Vec::new();
    for (spec, freeze) in grid.cells() {
        let mut cell_cfg = cfg.clone();
        cell_cfg.train.projection = spec.clone();
        cell_cfg.train.freeze = freeze;
        cell_cfg.validate()?;
        let cell = format!("{spec}/{freeze}");
        eprintln!("ablate: {cell}");
        let (model, records) = finetune(base.clone(), &cell_cfg, &samples, None, None)?;
        let per_epoch = samples.len().div_ceil(cell_cfg.train.batch_size);
        let tail = &records[records.len().saturating_sub(per_epoch)..];
        let opts = EvalOptions {
            guidance: cell_cfg.guidance.clone(),
            ..Default::default()
        };
        let report = consistency_eval(&model, &eval, modality, &opts, None, "")?;
        rows.push(AblationRow {
            cell,
            consistency: report.consistency,
            final_loss: tail.iter().map(|r| r.ce).sum::<f64>() / tail.len().max(1) as f64,
            projection_params: projection_param_count(
                &spec,
                sched,
                cfg.model.backbone.layers,
                cfg.model.backbone.d_model,
                cfg.model.encoder.width,
            )?,
            backbone_params,
        });
    }
    let mut csv = String::from(ABLATION_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    fs::write(paths.dir.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
