use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real, Tape, Var};

/// Layer sizes of the student/teacher networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths of the encoder; the encoder has `len + 1` affine layers.
    #[serde(default = "default_encoder_hidden")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    #[serde(default = "default_head_out")]
    pub head_out: usize,
    #[serde(default = "default_clusters")]
    pub clusters: usize,
}

fn default_encoder_hidden() -> Vec<usize> {
    vec![64]
}
fn default_embedding_dim() -> usize {
    32
}
fn default_head_hidden() -> usize {
    128
}
fn default_head_out() -> usize {
    32
}
fn default_clusters() -> usize {
    64
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: default_encoder_hidden(),
            embedding_dim: default_embedding_dim(),
            head_hidden: default_head_hidden(),
            head_out: default_head_out(),
            clusters: default_clusters(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_hidden.len() > 2 {
            return Err(Error::Config(
                "encoder supports at most 2 hidden layers".into(),
            ));
        }
        let dims = [self.embedding_dim, self.head_hidden, self.head_out];
        if dims.iter().chain(&self.encoder_hidden).any(|&d| d == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.clusters < 2 {
            return Err(Error::Config(format!(
                "need at least 2 clusters, got {}",
                self.clusters
            )));
        }
        Ok(())
    }
}

/// Affine layer `x·W + b` with `W` stored input-major (`in × out`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Real> Linear<T> {
    fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        Self {
            weight: Matrix::from_fn(inputs, outputs, |_, _| T::lit(gaussian(rng) * std)),
            bias: Matrix::zeros(1, outputs),
        }
    }
}

/// Affine layers with relu between them (none after the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> Mlp<T> {
    fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        Self {
            layers: dims
                .windows(2)
                .map(|w| Linear::init(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?.bias_add(&layer.bias)?;
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Same computation recorded on `tape`; `vars` holds weight/bias leaves in layer order.
    fn forward_tape(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, pair) in vars.chunks(2).enumerate() {
            h = tape.matmul(h, pair[0])?;
            h = tape.bias_add(h, pair[1])?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    fn params(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Matrix<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    fn param_count(&self) -> usize {
        self.layers.len() * 2
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Regular,
    Centroids,
}

/// Encoder `f`, projector `h`, optional predictor `g`, and centroids `C` (`K × D`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Network<T> {
    pub encoder: Mlp<T>,
    pub projector: Mlp<T>,
    pub predictor: Option<Mlp<T>>,
    pub centroids: Matrix<T>,
}

/// Outputs of one recorded student forward pass.
#[derive(Debug, Clone)]
pub struct StudentPass {
    /// Parameter leaves in [`Network::params`] order.
    pub params: Vec<Var>,
    /// Projector similarities per view, global views first.
    pub z_h: Vec<Var>,
    /// Predictor similarities per view, global views first.
    pub z_g: Vec<Var>,
}

impl<T: Real> Network<T> {
    /// Fresh student with He-initialized layers and unit-norm Gaussian centroids.
    pub fn student(config: &ModelConfig, input_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut enc_dims = vec![input_dim];
        enc_dims.extend(&config.encoder_hidden);
        enc_dims.push(config.embedding_dim);
        let encoder = Mlp::init(&enc_dims, rng);
        let projector = Mlp::init(
            &[config.embedding_dim, config.head_hidden, config.head_out],
            rng,
        );
        let predictor = Mlp::init(
            &[config.head_out, config.head_hidden, config.head_out],
            rng,
        );
        let centroids = Matrix::from_fn(config.clusters, config.head_out, |_, _| {
            T::lit(gaussian(rng))
        })
        .row_l2_normalize()?;
        Ok(Self {
            encoder,
            projector,
            predictor: Some(predictor),
            centroids,
        })
    }

    /// Copy without the predictor.
    pub fn teacher_copy(&self) -> Self {
        Self {
            encoder: self.encoder.clone(),
            projector: self.projector.clone(),
            predictor: None,
            centroids: self.centroids.clone(),
        }
    }

    pub fn clusters(&self) -> usize {
        self.centroids.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Parameters in a fixed order: encoder, projector, predictor, centroids.
    pub fn params(&self) -> Vec<&Matrix<T>> {
        let mut out: Vec<&Matrix<T>> = self.encoder.params().collect();
        out.extend(self.projector.params());
        if let Some(g) = &self.predictor {
            out.extend(g.params());
        }
        out.push(&self.centroids);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out: Vec<&mut Matrix<T>> = self.encoder.params_mut().collect();
        out.extend(self.projector.params_mut());
        if let Some(g) = &mut self.predictor {
            out.extend(g.params_mut());
        }
        out.push(&mut self.centroids);
        out
    }

    /// Dotted names matching [`Network::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push_mlp = |prefix: &str, mlp: &Mlp<T>| {
            for i in 0..mlp.layers.len() {
                out.push(format!("{prefix}.{i}.weight"));
                out.push(format!("{prefix}.{i}.bias"));
            }
        };
        push_mlp("encoder", &self.encoder);
        push_mlp("projector", &self.projector);
        if let Some(g) = &self.predictor {
            push_mlp("predictor", g);
        }
        out.push("centroids".into());
        out
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let n = self.params().len();
        (0..n)
            .map(|i| {
                if i + 1 == n {
                    ParamGroup::Centroids
                } else {
                    ParamGroup::Regular
                }
            })
            .collect()
    }

    /// `h(f(x))`.
    pub fn embed(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        self.projector.forward(&self.encoder.forward(x)?)
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!(
                    "input has {} features, encoder expects {}",
                    x.cols(),
                    self.input_dim()
                ),
            ));
        }
        Ok(())
    }

    /// Cosine similarities `q(h(f(x)))` without recording anything.
    pub fn similarities(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let v = self.embed(x)?.row_l2_normalize()?;
        v.matmul_t(&self.centroids.row_l2_normalize()?)
    }

    /// Teacher similarities for each view. No gradient state is created.
    pub fn teacher_similarities(&self, views: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        let cn = self.centroids.row_l2_normalize()?;
        views
            .iter()
            .map(|x| self.embed(x)?.row_l2_normalize()?.matmul_t(&cn))
            .collect()
    }

    /// Hard assignments of raw (unbalanced) similarities.
    pub fn assign(&self, x: &Matrix<T>) -> Result<Vec<usize>> {
        Ok(self.similarities(x)?.argmax_rows())
    }

    /// Records the student forward pass for every view.
    ///
    /// Centroid gradients are enabled only for projector similarities of
    /// global views; local-view projector paths and every predictor path see
    /// detached centroid rows (same forward values).
    pub fn student_similarities(
        &self,
        tape: &mut Tape<T>,
        globals: &[Matrix<T>],
        locals: &[Matrix<T>],
    ) -> Result<StudentPass> {
        let predictor = self
            .predictor
            .as_ref()
            .ok_or_else(|| Error::State("student network has no predictor".into()))?;
        let params = self
            .params()
            .into_iter()
            .map(|p| tape.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let ne = self.encoder.param_count();
        let np = self.projector.param_count();
        let ng = predictor.param_count();
        let enc_vars = &params[..ne];
        let proj_vars = &params[ne..ne + np];
        let pred_vars = &params[ne + np..ne + np + ng];
        let centroid_var = params[ne + np + ng];

        let live_c = tape.row_l2_normalize(centroid_var, false)?;
        let fixed_c = tape.row_l2_normalize(centroid_var, true)?;

        let mut z_h = Vec::with_capacity(globals.len() + locals.len());
        let mut z_g = Vec::with_capacity(globals.len() + locals.len());
        let tagged = globals
            .iter()
            .map(|x| (x, true))
            .chain(locals.iter().map(|x| (x, false)));
        for (x, is_global) in tagged {
            self.check_input(x)?;
            let input = tape.constant(x.clone())?;
            let f = self.encoder.forward_tape(tape, enc_vars, input)?;
            let h = self.projector.forward_tape(tape, proj_vars, f)?;
            let hn = tape.row_l2_normalize(h, false)?;
            let c = if is_global { live_c } else { fixed_c };
            z_h.push(tape.matmul_t(hn, c)?);
            let g = predictor.forward_tape(tape, pred_vars, h)?;
            let gn = tape.row_l2_normalize(g, false)?;
            z_g.push(tape.matmul_t(gn, fixed_c)?);
        }
        Ok(StudentPass { params, z_h, z_g })
    }
}

/// Student and EMA teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ModelPair<T> {
    pub student: Network<T>,
    pub teacher: Network<T>,
}

impl<T: Real> ModelPair<T> {
    pub fn new(config: &ModelConfig, input_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let student = Network::student(config, input_dim, rng)?;
        let teacher = student.teacher_copy();
        Ok(Self { student, teacher })
    }

    /// `θ_t ← m·θ_t + (1 - m)·θ_s` for every shared parameter, centroids included.
    pub fn ema_update(&mut self, momentum: T) {
        let keep = momentum;
        let take = T::one() - momentum;
        let student = self.student.teacher_copy();
        for (t, s) in self.teacher.params_mut().into_iter().zip(student.params()) {
            for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = keep * *tv + take * sv;
            }
        }
    }
}
