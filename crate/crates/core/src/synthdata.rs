//! Seeded Gaussian-mixture streams with labelled samples and augmented views.
//!
//! Class centers form a scaled orthonormal frame (random orientation), so
//! every pair of centers is exactly `separation · within_std` apart. A
//! global view adds small isotropic noise to the base point; a local view
//! zeroes a random contiguous (cyclic) block of coordinates and adds twice
//! that noise. Every batch is a pure function of `(seed, step)`.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

const CENTER_STREAM: u64 = 0;
const EVAL_STREAM: u64 = 1 << 62;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_input_dim")]
    pub input_dim: usize,
    /// Distance between class centers in units of `within_std`.
    #[serde(default = "d_separation")]
    pub separation: f64,
    #[serde(default = "d_within_std")]
    pub within_std: f64,
    #[serde(default = "d_samples")]
    pub samples_per_epoch: usize,
    /// Global-view noise as a fraction of `within_std`.
    #[serde(default = "d_global_noise")]
    pub global_noise: f64,
    /// Fraction of coordinates zeroed in a local view.
    #[serde(default = "d_mask")]
    pub local_mask_fraction: f64,
    /// Local-view noise as a multiple of the global-view noise.
    #[serde(default = "d_local_noise")]
    pub local_noise_factor: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_classes() -> usize {
    8
}
fn d_input_dim() -> usize {
    32
}
fn d_separation() -> f64 {
    10.0
}
fn d_within_std() -> f64 {
    1.0
}
fn d_samples() -> usize {
    8192
}
fn d_global_noise() -> f64 {
    0.1
}
fn d_mask() -> f64 {
    0.5
}
fn d_local_noise() -> f64 {
    2.0
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            classes: d_classes(),
            input_dim: d_input_dim(),
            separation: d_separation(),
            within_std: d_within_std(),
            samples_per_epoch: d_samples(),
            global_noise: d_global_noise(),
            local_mask_fraction: d_mask(),
            local_noise_factor: d_local_noise(),
            seed: 0,
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return bad(format!("separation must be positive, got {}", self.separation));
        }
        if !(self.within_std > 0.0) || !self.within_std.is_finite() {
            return bad(format!("within_std must be positive, got {}", self.within_std));
        }
        if self.samples_per_epoch == 0 {
            return bad("samples_per_epoch must be positive".into());
        }
        if !(self.global_noise >= 0.0) || !(self.local_noise_factor >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.local_mask_fraction) {
            return bad(format!(
                "local_mask_fraction must lie in [0, 1], got {}",
                self.local_mask_fraction
            ));
        }
        Ok(())
    }
}

/// Views of one batch. All views of row `n` derive from the same base point.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch<T> {
    pub step: u64,
    pub base: Matrix<T>,
    pub globals: Vec<Matrix<T>>,
    pub locals: Vec<Matrix<T>>,
    pub labels: Vec<usize>,
}

/// Labelled points without augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub points: Matrix<T>,
    pub labels: Vec<usize>,
}

/// A seeded mixture with materialized class centers.
#[derive(Debug, Clone)]
pub struct Mixture {
    spec: MixtureSpec,
    centers: Matrix<f64>,
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Mixture {
    pub fn new(spec: MixtureSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(spec.seed, CENTER_STREAM);
        let d = spec.input_dim;
        let radius = spec.separation * spec.within_std / std::f64::consts::SQRT_2;
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
        for _ in 0..spec.classes {
            let mut v: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
            // Gram-Schmidt while the frame fits in the space; beyond that the
            // directions are random and distances only approximately equal.
            if basis.len() < d {
                for _ in 0..2 {
                    for b in &basis {
                        let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                        v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
        let centers = Matrix::from_fn(spec.classes, d, |r, c| basis[r][c] * radius);
        Ok(Self { spec, centers })
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    pub fn centers(&self) -> &Matrix<f64> {
        &self.centers
    }

    fn draw_base(&self, rng: &mut ChaCha8Rng, n: usize) -> (Matrix<f64>, Vec<usize>) {
        let d = self.spec.input_dim;
        let mut labels = Vec::with_capacity(n);
        let mut base = Matrix::zeros(n, d);
        for r in 0..n {
            let label = rng.gen_range(0..self.spec.classes);
            labels.push(label);
            for (x, &c) in base.row_mut(r).iter_mut().zip(self.centers.row(label)) {
                *x = c + self.spec.within_std * gaussian(rng);
            }
        }
        (base, labels)
    }

    fn global_view(&self, rng: &mut ChaCha8Rng, base: &Matrix<f64>) -> Matrix<f64> {
        let sigma = self.spec.global_noise * self.spec.within_std;
        let mut out = base.clone();
        if sigma > 0.0 {
            out.data_mut()
                .iter_mut()
                .for_each(|x| *x += sigma * gaussian(rng));
        }
        out
    }

    fn local_view(&self, rng: &mut ChaCha8Rng, base: &Matrix<f64>) -> Matrix<f64> {
        let d = self.spec.input_dim;
        let sigma = self.spec.local_noise_factor * self.spec.global_noise * self.spec.within_std;
        let masked = ((self.spec.local_mask_fraction * d as f64).round() as usize).min(d);
        let mut out = base.clone();
        for r in 0..out.rows() {
            let start = rng.gen_range(0..d);
            let row = out.row_mut(r);
            for j in 0..masked {
                row[(start + j) % d] = 0.0;
            }
            if sigma > 0.0 {
                row.iter_mut().for_each(|x| *x += sigma * gaussian(rng));
            }
        }
        out
    }

    /// Batch `step` of the training stream: `global` + `local` views of `batch` samples.
    pub fn sample_batch<T: Real>(
        &self,
        step: u64,
        batch: usize,
        global: usize,
        local: usize,
    ) -> ViewBatch<T> {
        let mut rng = rng_for(self.spec.seed, step + 1);
        let (base, labels) = self.draw_base(&mut rng, batch);
        let globals = (0..global)
            .map(|_| self.global_view(&mut rng, &base).cast())
            .collect();
        let locals = (0..local)
            .map(|_| self.local_view(&mut rng, &base).cast())
            .collect();
        ViewBatch {
            step,
            base: base.cast(),
            globals,
            locals,
            labels,
        }
    }

    /// Held-out evaluation set of `samples_per_epoch` un-augmented points.
    pub fn eval_dataset<T: Real>(&self) -> Dataset<T> {
        let mut rng = rng_for(self.spec.seed, EVAL_STREAM);
        let (points, labels) = self.draw_base(&mut rng, self.spec.samples_per_epoch);
        Dataset {
            points: points.cast(),
            labels,
        }
    }

    /// Index of the closest class center for every row.
    pub fn nearest_center(&self, points: &Matrix<f64>) -> Vec<usize> {
        (0..points.rows())
            .map(|r| {
                let row = points.row(r);
                let dists: Vec<f64> = (0..self.centers.rows())
                    .map(|c| {
                        -row.iter()
                            .zip(self.centers.row(c))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .collect();
                crate::tensor::argmax(&dists)
            })
            .collect()
    }
}

impl<T: Real> Dataset<T> {
    /// CSV rows `x0, …, x{D-1}, label` with a header line.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.points.cols()).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (r, label) in self.labels.iter().enumerate() {
            let mut rec: Vec<String> = self.points.row(r).iter().map(|x| x.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let cols = rdr.headers()?.len();
        if cols < 2 {
            return Err(Error::shape("read_csv", "need at least one feature and a label"));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse_err = |field: &str| Error::Domain {
                op: "read_csv",
                detail: format!("cannot parse {field:?}"),
            };
            for field in rec.iter().take(cols - 1) {
                data.push(field.parse::<T>().map_err(|_| parse_err(field))?);
            }
            let label = &rec[cols - 1];
            labels.push(label.parse::<usize>().map_err(|_| parse_err(label))?);
        }
        let points = Matrix::from_vec(labels.len(), cols - 1, data)?;
        Ok(Self { points, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers_are_equidistant() {
        let m = Mixture::new(MixtureSpec::default()).unwrap();
        let c = m.centers();
        for a in 0..c.rows() {
            for b in a + 1..c.rows() {
                let d: f64 = c
                    .row(a)
                    .iter()
                    .zip(c.row(b))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((d - 10.0).abs() < 1e-9, "{d}");
            }
        }
    }

    #[test]
    fn no_augmentation_means_identical_views() {
        let spec = MixtureSpec {
            global_noise: 0.0,
            local_mask_fraction: 0.0,
            ..Default::default()
        };
        let m = Mixture::new(spec).unwrap();
        let b = m.sample_batch::<f64>(3, 16, 2, 3);
        for v in b.globals.iter().chain(&b.locals) {
            assert_eq!(v, &b.base);
        }
    }

    #[test]
    fn batches_are_deterministic_per_step() {
        let m = Mixture::new(MixtureSpec::default()).unwrap();
        let a = m.sample_batch::<f64>(7, 32, 2, 2);
        let b = m.sample_batch::<f64>(7, 32, 2, 2);
        assert_eq!(a, b);
        let c = m.sample_batch::<f64>(8, 32, 2, 2);
        assert_ne!(a.base, c.base);
    }

    #[test]
    fn local_views_zero_a_contiguous_block() {
        let spec = MixtureSpec {
            global_noise: 0.0,
            ..Default::default()
        };
        let m = Mixture::new(spec).unwrap();
        let b = m.sample_batch::<f64>(0, 8, 1, 1);
        for r in 0..8 {
            let zeros = b.locals[0].row(r).iter().filter(|&&x| x == 0.0).count();
            assert_eq!(zeros, 16);
            let kept: Vec<bool> = b.locals[0]
                .row(r)
                .iter()
                .zip(b.base.row(r))
                .map(|(l, x)| l == x)
                .collect();
            // exactly one kept→dropped transition around the cycle
            let transitions = (0..32).filter(|&i| kept[i] && !kept[(i + 1) % 32]).count();
            assert_eq!(transitions, 1);
        }
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = MixtureSpec {
            classes: 1,
            ..Default::default()
        };
        assert!(Mixture::new(spec).is_err());
        let spec = MixtureSpec {
            separation: 0.0,
            ..Default::default()
        };
        assert!(Mixture::new(spec).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let spec = MixtureSpec {
            samples_per_epoch: 20,
            input_dim: 4,
            classes: 3,
            ..Default::default()
        };
        let ds = Mixture::new(spec).unwrap().eval_dataset::<f64>();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::<f64>::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }
}
