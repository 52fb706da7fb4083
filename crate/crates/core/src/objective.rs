//! Assignment probabilities and the multi-view teacher-student loss.
//!
//! Views are indexed global-first: `0..G` are global views, `G..G+L` local.
//! Teacher targets exist for global views only. For every teacher view `v`
//! the projector term compares against every student view except `v`; the
//! predictor term compares against every student view including `v`.
//! Each half is averaged over its pairs and over the batch:
//!
//! ```text
//! loss = ½·Σ_h H / (G·(G+L-1)) + ½·Σ_g H / (G·(G+L))
//! ```

use serde::{Deserialize, Serialize};

use crate::balancer::Balancer;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real, Tape, Var};

pub const TEACHER_TEMPERATURE: f64 = 0.04;
pub const STUDENT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignmentSource {
    Teacher,
    StudentProjector,
    StudentPredictor,
}

/// Row-stochastic `N × K` cluster probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentProbabilities<T> {
    pub p: Matrix<T>,
    pub source: AssignmentSource,
    pub temperature: f64,
}

impl<T: Real> AssignmentProbabilities<T> {
    pub fn hard_assignments(&self) -> Vec<usize> {
        self.p.argmax_rows()
    }
}

/// Softmax of already-balanced teacher similarities.
pub fn targets_from_balanced<T: Real>(
    balanced: &[Matrix<T>],
    temperature: f64,
) -> Result<Vec<AssignmentProbabilities<T>>> {
    balanced
        .iter()
        .map(|z| {
            Ok(AssignmentProbabilities {
                p: z.softmax_rows(T::lit(temperature))?,
                source: AssignmentSource::Teacher,
                temperature,
            })
        })
        .collect()
}

/// Feeds the teacher's global-view similarities through the balancer (which
/// also advances the size estimate) and sharpens them into targets.
pub fn teacher_targets<T: Real>(
    teacher_views: &[Matrix<T>],
    balancer: &mut Balancer,
    temperature: f64,
) -> Result<Vec<AssignmentProbabilities<T>>> {
    let balanced = balancer.step(teacher_views)?;
    targets_from_balanced(&balanced, temperature)
}

/// Student probabilities on the tape.
pub fn student_probabilities<T: Real>(tape: &mut Tape<T>, z: Var, temperature: f64) -> Result<Var> {
    tape.softmax_rows(z, T::lit(temperature))
}

/// (teacher view, student view) pairs for both halves of the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewPairs {
    pub projector: Vec<(usize, usize)>,
    pub predictor: Vec<(usize, usize)>,
}

pub fn view_pairs(global: usize, local: usize) -> Result<ViewPairs> {
    if global == 0 || global + local < 2 {
        return Err(Error::Parameter(format!(
            "need G >= 2, or G >= 1 with L >= 1; got G={global}, L={local}"
        )));
    }
    let total = global + local;
    let mut projector = Vec::with_capacity(global * (total - 1));
    let mut predictor = Vec::with_capacity(global * total);
    for v in 0..global {
        for w in 0..total {
            if w != v {
                projector.push((v, w));
            }
            predictor.push((v, w));
        }
    }
    Ok(ViewPairs {
        projector,
        predictor,
    })
}

/// Multi-view cross-entropy recorded on the tape.
///
/// `targets` holds `G` teacher distributions; `p_h` and `p_g` hold `G + L`
/// student distributions each, global views first.
pub fn multiview_loss<T: Real>(
    tape: &mut Tape<T>,
    targets: &[Matrix<T>],
    p_h: &[Var],
    p_g: &[Var],
) -> Result<Var> {
    let global = targets.len();
    if p_h.len() != p_g.len() || p_h.len() < global {
        return Err(Error::shape(
            "multiview_loss",
            format!(
                "{} targets, {} projector views, {} predictor views",
                global,
                p_h.len(),
                p_g.len()
            ),
        ));
    }
    let pairs = view_pairs(global, p_h.len() - global)?;
    let sum_terms = |tape: &mut Tape<T>, pairs: &[(usize, usize)], preds: &[Var]| -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in pairs {
            let h = tape.cross_entropy_rows(&targets[v], preds[w])?;
            acc = Some(match acc {
                Some(a) => tape.add(a, h)?,
                None => h,
            });
        }
        Ok(acc.expect("at least one pair"))
    };
    let loss_h = sum_terms(tape, &pairs.projector, p_h)?;
    let loss_g = sum_terms(tape, &pairs.predictor, p_g)?;
    let half_h = tape.scale(loss_h, T::lit(0.5 / pairs.projector.len() as f64))?;
    let half_g = tape.scale(loss_g, T::lit(0.5 / pairs.predictor.len() as f64))?;
    tape.add(half_h, half_g)
}
