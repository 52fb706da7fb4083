use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{posttrain_audit, AuditReport, EpochStats};
use crate::synthdata::{Dataset, Mixture, MixtureSpec};
use crate::tensor::{Precision, Real};

use super::checkpoint::{peek_precision, Checkpoint};
use super::config::ExperimentConfig;
use super::telemetry::{write_telemetry_file, TELEMETRY_COLUMNS, TELEMETRY_SCHEMA_VERSION};
use super::trainer::Trainer;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const AUDIT_FILE: &str = "audit.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

/// Sidecar describing how a telemetry file was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub telemetry_schema: u32,
    pub telemetry_columns: Vec<String>,
    pub code_version: String,
    pub seed: u64,
    pub precision: Precision,
    pub resumed_from_step: Option<u64>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig, resumed_from_step: Option<u64>) -> Self {
        Self {
            telemetry_schema: TELEMETRY_SCHEMA_VERSION,
            telemetry_columns: TELEMETRY_COLUMNS.iter().map(|c| c.to_string()).collect(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            precision: config.precision,
            resumed_from_step,
            config: config.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub steps: u64,
    pub history: Vec<EpochStats>,
    pub audit: AuditReport,
}

impl RunSummary {
    pub fn final_epoch(&self) -> Option<&EpochStats> {
        self.history.last()
    }
}

/// Trains to completion, writing manifest, telemetry (flushed each epoch),
/// checkpoint (refreshed each epoch) and the post-training audit into
/// `config.output.dir`. With `resume`, training continues from that
/// checkpoint; its stored config wins except for the output directory.
pub fn run_training(
    config: &ExperimentConfig,
    resume: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<RunSummary> {
    let precision = match resume {
        Some(path) => peek_precision(&std::fs::read_to_string(path)?)?,
        None => config.precision,
    };
    match precision {
        Precision::F32 => run_typed::<f32>(config, resume, on_epoch),
        Precision::F64 => run_typed::<f64>(config, resume, on_epoch),
    }
}

fn run_typed<T: Real>(
    config: &ExperimentConfig,
    resume: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<RunSummary> {
    let dir = config.output.dir.clone();
    let mut trainer = match resume {
        Some(path) => {
            let mut ckpt = Checkpoint::<T>::load(path)?;
            ckpt.config.output = config.output.clone();
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::<T>::new(config.clone())?,
    };
    std::fs::create_dir_all(&dir)?;
    trainer.set_diagnostics_dir(dir.clone());
    let resumed = resume.map(|_| trainer.step_index());
    let manifest = Manifest::new(trainer.config(), resumed);
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    write_telemetry_file(&dir.join(TELEMETRY_FILE), trainer.history())?;

    while !trainer.is_finished() {
        let report = trainer.step()?;
        if let Some(stats) = report.epoch {
            write_telemetry_file(&dir.join(TELEMETRY_FILE), trainer.history())?;
            save_atomic(&trainer.checkpoint(), &dir.join(CHECKPOINT_FILE))?;
            on_epoch(&stats);
        }
    }
    save_atomic(&trainer.checkpoint(), &dir.join(CHECKPOINT_FILE))?;

    let data = trainer.mixture().eval_dataset::<T>();
    let audit = posttrain_audit(&trainer.models().teacher, &data)?;
    std::fs::write(dir.join(AUDIT_FILE), serde_json::to_string_pretty(&audit)?)?;
    if trainer.config().output.export_embeddings {
        export_embeddings(&trainer, &data, &dir.join(EMBEDDINGS_FILE))?;
    }
    Ok(RunSummary {
        dir,
        steps: trainer.step_index(),
        history: trainer.history().to_vec(),
        audit,
    })
}

fn save_atomic<T: Real>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    ckpt.save(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Teacher embeddings `h(f(x))` of the evaluation set, one row per point.
fn export_embeddings<T: Real>(trainer: &Trainer<T>, data: &Dataset<T>, path: &Path) -> Result<()> {
    let emb = trainer.models().teacher.embed(&data.points)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..emb.cols()).map(|i| format!("e{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (r, label) in data.labels.iter().enumerate() {
        let mut rec: Vec<String> = emb.row(r).iter().map(|x| x.to_string()).collect();
        rec.push(label.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// What to run the audit on.
#[derive(Debug, Clone, PartialEq)]
pub enum AuditData {
    /// The evaluation set of the checkpoint's own mixture.
    Checkpoint,
    /// Evaluation set of another mixture.
    Mixture(MixtureSpec),
    /// Points and labels from a CSV file (`x0..,label`).
    Csv(PathBuf),
}

impl AuditData {
    /// `.csv` paths are datasets; anything else is read as a TOML mixture spec.
    pub fn from_path(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            return Ok(Self::Csv(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let spec: MixtureSpec =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(Self::Mixture(spec))
    }
}

/// Plain-inference audit of a saved checkpoint's teacher.
pub fn audit_checkpoint(path: &Path, data: &AuditData) -> Result<AuditReport> {
    let text = std::fs::read_to_string(path)?;
    match peek_precision(&text)? {
        Precision::F32 => audit_typed(Checkpoint::<f32>::from_json(&text)?, data),
        Precision::F64 => audit_typed(Checkpoint::<f64>::from_json(&text)?, data),
    }
}

fn audit_typed<T: Real>(ckpt: Checkpoint<T>, data: &AuditData) -> Result<AuditReport> {
    let dataset = match data {
        AuditData::Checkpoint => Mixture::new(ckpt.config.data.clone())?.eval_dataset::<T>(),
        AuditData::Mixture(spec) => Mixture::new(spec.clone())?.eval_dataset::<T>(),
        AuditData::Csv(p) => Dataset::<T>::read_csv(std::fs::File::open(p)?)?,
    };
    posttrain_audit(&ckpt.models.teacher, &dataset)
}
