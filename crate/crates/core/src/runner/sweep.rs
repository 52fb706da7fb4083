use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::EpochStats;

use super::config::{set_dotted, ExperimentConfig};
use super::run::{run_training, RunSummary};

pub const SWEEP_SUMMARY_FILE: &str = "sweep.csv";

/// One grid axis: a dotted config key and its candidate values.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

/// Reads a grid file. Every leaf must be an array of candidates; nested
/// tables become dotted keys, so both
///
/// ```toml
/// "balancer.enabled" = [true, false]
/// [train]
/// epochs = [1, 2]
/// ```
///
/// are accepted. Axes come back in sorted key order.
pub fn parse_grid(text: &str) -> Result<Vec<Axis>> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut axes = Vec::new();
    flatten("", &table, &mut axes)?;
    if axes.is_empty() {
        return Err(Error::Config("grid has no axes".into()));
    }
    axes.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(axes)
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<Axis>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            toml::Value::Array(values) if !values.is_empty() => out.push(Axis {
                key,
                values: values.clone(),
            }),
            _ => {
                return Err(Error::Config(format!(
                    "grid key {key:?} needs a non-empty array of values"
                )))
            }
        }
    }
    Ok(())
}

/// Every point of the grid, last axis varying fastest.
pub fn expand(axes: &[Axis]) -> Vec<Vec<(String, toml::Value)>> {
    let mut points = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((axis.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

/// Applies one grid point to a base config and validates the result.
pub fn configure(base: &ExperimentConfig, point: &[(String, toml::Value)]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = base
        .to_toml_string()?
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for (k, v) in point {
        set_dotted(&mut table, k, v.clone())?;
    }
    let config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Runs every grid point in order into `<dir>/run-NNN` and writes a summary
/// CSV with one row per run.
pub fn run_sweep(
    base: &ExperimentConfig,
    axes: &[Axis],
    on_run: &mut dyn FnMut(usize, &RunSummary),
) -> Result<Vec<RunSummary>> {
    let root = base.output.dir.clone();
    let points = expand(axes);
    // validate everything before spending time on the first run
    let configs = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut c = configure(base, p)?;
            c.output.dir = root.join(format!("run-{i:03}"));
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&root)?;

    let mut summaries = Vec::new();
    for (i, config) in configs.iter().enumerate() {
        let summary = run_training(config, None, &mut |_| {})?;
        on_run(i, &summary);
        summaries.push(summary);
        write_summary(&root.join(SWEEP_SUMMARY_FILE), axes, &points, &summaries)?;
    }
    Ok(summaries)
}

fn write_summary(
    path: &Path,
    axes: &[Axis],
    points: &[Vec<(String, toml::Value)>],
    summaries: &[RunSummary],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["run".to_string()];
    header.extend(axes.iter().map(|a| a.key.clone()));
    header.extend(
        [
            "loss",
            "purity",
            "agreement",
            "min_rel_size",
            "max_rel_size",
            "empty_frac",
            "audit_purity",
            "audit_max_rel_size",
            "audit_empty_frac",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for (i, (p, s)) in points.iter().zip(summaries).enumerate() {
        let mut rec = vec![format!("run-{i:03}")];
        rec.extend(p.iter().map(|(_, v)| match v {
            toml::Value::String(s) => s.clone(),
            v => v.to_string(),
        }));
        let last = s.final_epoch().cloned().unwrap_or(EpochStats {
            epoch: 0,
            loss: f64::NAN,
            confidence: f64::NAN,
            agreement: f64::NAN,
            purity: f64::NAN,
            min_rel_size: f64::NAN,
            max_rel_size: f64::NAN,
            empty_frac: f64::NAN,
        });
        rec.extend(
            [
                last.loss,
                last.purity,
                last.agreement,
                last.min_rel_size,
                last.max_rel_size,
                last.empty_frac,
                s.audit.purity,
                s.audit.sizes.max_rel,
                s.audit.sizes.empty_frac,
            ]
            .map(|x| x.to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
