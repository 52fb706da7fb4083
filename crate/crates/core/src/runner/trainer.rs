use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balancer::{Balancer, SIMPLEX_TOLERANCE};
use crate::error::{Error, Result};
use crate::metrics::{EpochAccumulator, EpochStats};
use crate::model::{ModelPair, ParamGroup, Schedule, ScheduleValues, Sgd};
use crate::objective::{multiview_loss, student_probabilities, teacher_targets};
use crate::synthdata::Mixture;
use crate::tensor::{Real, Tape};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;

/// What one optimization step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub schedule: ScheduleValues,
    /// `|Σ s - 1|` after this step's size update.
    pub simplex_error: f64,
    /// True when every `s_k` equalled `1/K` when this step's targets were formed.
    pub sizes_uniform: bool,
    pub epoch: Option<EpochStats>,
}

/// Written when the loss or a gradient turns non-finite.
#[derive(Debug, Serialize, Deserialize)]
pub struct Diagnostic {
    pub step: u64,
    pub loss: f64,
    pub schedule: ScheduleValues,
    pub relative_sizes: Vec<f64>,
    pub grad_norms: Vec<(String, f64)>,
}

/// Owns every piece of training state and advances it one step at a time.
pub struct Trainer<T: Real> {
    pub(crate) config: ExperimentConfig,
    mixture: Mixture,
    pub(crate) models: ModelPair<T>,
    pub(crate) optimizer: Sgd<T>,
    pub(crate) balancer: Balancer,
    schedule: Schedule,
    pub(crate) step: u64,
    pub(crate) accumulator: EpochAccumulator,
    pub(crate) history: Vec<EpochStats>,
    diagnostics_dir: Option<PathBuf>,
}

pub(crate) fn schedule_for(config: &ExperimentConfig) -> Schedule {
    let t = &config.train;
    Schedule {
        total_steps: config.total_steps(),
        warmup_steps: config.steps_per_epoch() * t.warmup_epochs as u64,
        base_lr: t.resolved_base_lr(),
        lr_floor: t.lr_floor,
        teacher_momentum_start: t.teacher_momentum,
        teacher_momentum_end: 1.0,
        centroid_wd_start: t.centroid_wd_start,
        centroid_wd_end: t.centroid_wd_end,
    }
}

impl<T: Real> Trainer<T> {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        check_precision::<T>(&config)?;
        let mixture = Mixture::new(config.data.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let models = ModelPair::new(&config.model, config.data.input_dim, &mut rng)?;
        let optimizer = Sgd::new(T::lit(config.train.sgd_momentum), &models.student.params());
        let balancer = Balancer::new(config.balancer.clone(), config.model.clusters)?;
        let accumulator = EpochAccumulator::new(config.model.clusters, config.data.classes);
        Ok(Self {
            schedule: schedule_for(&config),
            config,
            mixture,
            models,
            optimizer,
            balancer,
            step: 0,
            accumulator,
            history: Vec::new(),
            diagnostics_dir: None,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let config = ckpt.config;
        config.validate()?;
        check_precision::<T>(&config)?;
        let balancer = Balancer::from_parts(config.balancer.clone(), ckpt.relative_sizes)?;
        if ckpt.optimizer.velocity().len() != ckpt.models.student.params().len() {
            return Err(Error::State("optimizer state does not match the model".into()));
        }
        Ok(Self {
            schedule: schedule_for(&config),
            mixture: Mixture::new(config.data.clone())?,
            config,
            models: ckpt.models,
            optimizer: ckpt.optimizer,
            balancer,
            step: ckpt.step,
            accumulator: ckpt.accumulator,
            history: ckpt.history,
            diagnostics_dir: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::new(
            self.config.clone(),
            self.step,
            self.models.clone(),
            self.optimizer.clone(),
            self.balancer.sizes().clone(),
            self.accumulator.clone(),
            self.history.clone(),
        )
    }

    /// Where a diagnostic dump goes if the loss turns non-finite.
    pub fn set_diagnostics_dir(&mut self, dir: PathBuf) {
        self.diagnostics_dir = Some(dir);
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn models(&self) -> &ModelPair<T> {
        &self.models
    }

    pub fn balancer(&self) -> &Balancer {
        &self.balancer
    }

    pub fn mixture(&self) -> &Mixture {
        &self.mixture
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.total_steps()
    }

    /// One full training step: views, teacher targets through the balancer,
    /// student forward with detach rules, loss, backward, SGD, EMA.
    pub fn step(&mut self) -> Result<StepReport> {
        if self.is_finished() {
            return Err(Error::State("training already finished".into()));
        }
        let cfg = &self.config;
        let sched = self.schedule.at(self.step)?;
        let batch = self.mixture.sample_batch::<T>(
            self.step,
            cfg.train.batch_size,
            cfg.views.global,
            cfg.views.local,
        );

        let z_t = self.models.teacher.teacher_similarities(&batch.globals)?;
        let uniform_before = sizes_uniform(&self.balancer);
        let targets = teacher_targets(&z_t, &mut self.balancer, cfg.train.teacher_temperature)?;
        let uniform_after = sizes_uniform(&self.balancer);
        let sizes_uniform = match cfg.balancer.order {
            crate::balancer::UpdateOrder::UpdateThenBalance => uniform_after,
            crate::balancer::UpdateOrder::BalanceThenUpdate => uniform_before,
        };
        let simplex_error = self.balancer.sizes().simplex_error();
        if simplex_error > SIMPLEX_TOLERANCE {
            return Err(Error::StateCorruption(format!(
                "relative sizes sum to 1 ± {simplex_error:e} at step {}",
                self.step
            )));
        }
        let target_p: Vec<_> = targets.into_iter().map(|t| t.p).collect();

        let mut tape = Tape::new();
        let pass = self
            .models
            .student
            .student_similarities(&mut tape, &batch.globals, &batch.locals)?;
        let tau_s = cfg.train.student_temperature;
        let p_h = pass
            .z_h
            .iter()
            .map(|&z| student_probabilities(&mut tape, z, tau_s))
            .collect::<Result<Vec<_>>>()?;
        let p_g = pass
            .z_g
            .iter()
            .map(|&z| student_probabilities(&mut tape, z, tau_s))
            .collect::<Result<Vec<_>>>()?;
        let loss_var = multiview_loss(&mut tape, &target_p, &p_h, &p_g)?;
        tape.freeze();
        let loss = tape.value(loss_var).item()?.to_f64_lossy();
        tape.backward(loss_var)?;
        let grads: Vec<_> = pass.params.iter().map(|&v| tape.grad(v)).collect();

        let grads_finite = grads.iter().all(|g| g.is_some_and(|g| g.is_finite()));
        if !loss.is_finite() || !grads_finite {
            let dump = self.write_diagnostic(loss, sched, &grads)?;
            return Err(Error::NonFiniteLoss {
                step: self.step,
                dump,
            });
        }

        let decays: Vec<T> = self
            .models
            .student
            .param_groups()
            .into_iter()
            .map(|g| match g {
                ParamGroup::Centroids => T::lit(sched.centroid_wd),
                ParamGroup::Regular => T::lit(cfg.train.weight_decay),
            })
            .collect();
        let mut params = self.models.student.params_mut();
        self.optimizer
            .step(&mut params, &grads, T::lit(sched.lr), &decays)?;
        self.models.ema_update(T::lit(sched.teacher_momentum));

        self.accumulator.record(loss, &target_p, &batch.labels)?;
        self.step += 1;
        let epoch = if self.step.is_multiple_of(self.config.steps_per_epoch()) {
            let index = (self.step / self.config.steps_per_epoch()) as usize - 1;
            let stats = self.accumulator.finish(index)?;
            self.accumulator =
                EpochAccumulator::new(self.config.model.clusters, self.config.data.classes);
            self.history.push(stats.clone());
            Some(stats)
        } else {
            None
        };
        Ok(StepReport {
            step: self.step - 1,
            loss,
            schedule: sched,
            simplex_error,
            sizes_uniform,
            epoch,
        })
    }

    fn write_diagnostic(
        &self,
        loss: f64,
        schedule: ScheduleValues,
        grads: &[Option<&crate::tensor::Matrix<T>>],
    ) -> Result<PathBuf> {
        let names = self.models.student.param_names();
        let diag = Diagnostic {
            step: self.step,
            loss,
            schedule,
            relative_sizes: self.balancer.sizes().shares().to_vec(),
            grad_norms: names
                .into_iter()
                .zip(grads)
                .map(|(n, g)| (n, g.map_or(f64::NAN, |g| g.l2_norm().to_f64_lossy())))
                .collect(),
        };
        let dir = self
            .diagnostics_dir
            .clone()
            .unwrap_or_else(std::env::temp_dir);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("diagnostic.json");
        // non-finite values serialize as null
        std::fs::write(&path, serde_json::to_string_pretty(&diag)?)?;
        Ok(path)
    }
}

fn sizes_uniform(balancer: &Balancer) -> bool {
    let k = balancer.sizes().clusters() as f64;
    balancer.sizes().shares().iter().all(|&s| s == 1.0 / k)
}

fn check_precision<T: Real>(config: &ExperimentConfig) -> Result<()> {
    if config.precision != T::PRECISION {
        return Err(Error::Config(format!(
            "config asks for {:?} but the trainer was built for {:?}",
            config.precision,
            T::PRECISION
        )));
    }
    Ok(())
}
