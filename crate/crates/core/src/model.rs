//! The four classifier variants.
//!
//! Every variant runs `image → ReLU(Linear 784→n) → z* = f(z*, x)`. The
//! Lyapunov variants then replace `z*` by the stabilized state, and the
//! output layer is either a plain linear map or the semi-orthogonal
//! Householder layer.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deq::{deq_forward, DeqParams, DeqVars};
use crate::error::{Error, Result};
use crate::fixedpoint::{SolverConfig, SolverReport};
use crate::graph::{Graph, Var};
use crate::layers::{
    feature_forward, orthogonality_defect, Icnn, IcnnVars, Linear, LinearVars, NormKind, OrthogonalFc,
    OrthogonalFcVars, Parameterized, DEFAULT_SMOOTHING,
};
use crate::lyapunov::{stabilized_state, StabilityConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain DEQ with a linear output layer.
    #[serde(rename = "deq")]
    Deq,
    /// DEQ with the semi-orthogonal output layer.
    #[serde(rename = "deq-orth")]
    DeqOrth,
    /// Lyapunov-stabilized DEQ with a linear output layer.
    #[serde(rename = "lyadeq-no-orth")]
    LyaDeqNoOrth,
    /// Lyapunov-stabilized DEQ with the semi-orthogonal output layer.
    #[serde(rename = "lyadeq")]
    LyaDeq,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Deq, Variant::DeqOrth, Variant::LyaDeqNoOrth, Variant::LyaDeq];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Deq => "deq",
            Variant::DeqOrth => "deq-orth",
            Variant::LyaDeqNoOrth => "lyadeq-no-orth",
            Variant::LyaDeq => "lyadeq",
        }
    }

    pub fn uses_lyapunov(self) -> bool {
        matches!(self, Variant::LyaDeqNoOrth | Variant::LyaDeq)
    }

    pub fn uses_orthogonal_head(self) -> bool {
        matches!(self, Variant::DeqOrth | Variant::LyaDeq)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected deq, deq-orth, lyadeq-no-orth or lyadeq)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub state_dim: usize,
    pub classes: usize,
    pub icnn_hidden: usize,
    pub smoothing: f64,
    pub norm: NormKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 784,
            state_dim: 64,
            classes: 10,
            icnn_hidden: 64,
            smoothing: DEFAULT_SMOOTHING,
            norm: NormKind::Layer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Head {
    Linear(Linear),
    Orthogonal(OrthogonalFc),
}

#[derive(Clone, Copy, Debug)]
pub enum HeadVars {
    Linear(LinearVars),
    Orthogonal(OrthogonalFcVars),
}

impl HeadVars {
    pub fn forward(&self, g: &mut Graph, h: Var) -> Result<Var> {
        match self {
            HeadVars::Linear(p) => p.forward(g, h),
            HeadVars::Orthogonal(p) => p.forward(g, h),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub variant: Variant,
    pub config: ModelConfig,
    pub features: Linear,
    pub deq: DeqParams,
    pub icnn: Option<Icnn>,
    pub head: Head,
}

/// Graph handles for a bound model.
#[derive(Clone, Debug)]
pub struct BoundModel {
    /// Every parameter, in `visit` order.
    pub vars: Vec<Var>,
    pub features: LinearVars,
    pub deq: DeqVars,
    /// The DEQ's own parameters, in its `visit` order.
    pub deq_vars: Vec<Var>,
    pub icnn: Option<IcnnVars>,
    pub head: HeadVars,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub z_star: Var,
    /// Input to the output layer (`z*` or the stabilized state).
    pub state: Var,
    pub report: SolverReport,
}

impl ModelParams {
    pub fn init(variant: Variant, config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.state_dim;
        let features = Linear::init(&mut rng, config.input_dim, n);
        let deq = DeqParams::init(&mut rng, n, config.norm);
        let icnn = if variant.uses_lyapunov() {
            Some(Icnn::init(&mut rng, n, config.icnn_hidden, config.smoothing)?)
        } else {
            None
        };
        let head = if variant.uses_orthogonal_head() {
            if config.classes > n {
                return Err(Error::Config(format!(
                    "orthogonal output layer needs classes ({}) ≤ state dimension ({n})",
                    config.classes
                )));
            }
            Head::Orthogonal(OrthogonalFc::init(&mut rng, config.classes, n))
        } else {
            Head::Linear(Linear::init(&mut rng, n, config.classes))
        };
        Ok(Self {
            variant,
            config: config.clone(),
            features,
            deq,
            icnn,
            head,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let mut vars = Vec::new();
        let features = self.features.bind(g, trainable, &mut vars);
        let start = vars.len();
        let deq = self.deq.bind(g, trainable, &mut vars);
        let deq_vars = vars[start..].to_vec();
        let icnn = self.icnn.as_ref().map(|p| p.bind(g, trainable, &mut vars));
        let head = match &self.head {
            Head::Linear(p) => HeadVars::Linear(p.bind(g, trainable, &mut vars)),
            Head::Orthogonal(p) => HeadVars::Orthogonal(p.bind(g, trainable, &mut vars)),
        };
        BoundModel {
            vars,
            features,
            deq,
            deq_vars,
            icnn,
            head,
        }
    }

    /// Logits for `images: [batch×input_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        images: Var,
        solver: &SolverConfig,
        stability: &StabilityConfig,
        training: bool,
    ) -> Result<ForwardOutput> {
        let cols = g.value(images).dims2("model input")?.1;
        if cols != self.config.input_dim {
            return Err(Error::shape("model input", g.shape(images), &[0, self.config.input_dim]));
        }
        let x = feature_forward(g, &bound.features, images)?;
        let out = deq_forward(g, &self.deq, &bound.deq_vars, x, solver, training)?;
        let state = match &bound.icnn {
            Some(icnn) => stabilized_state(g, &bound.deq, icnn, out.z_star, x, stability, training)?,
            None => out.z_star,
        };
        let logits = bound.head.forward(g, state)?;
        Ok(ForwardOutput {
            logits,
            z_star: out.z_star,
            state,
            report: out.report,
        })
    }

    /// Logits without recording a graph.
    pub fn logits(&self, images: &Tensor, solver: &SolverConfig, stability: &StabilityConfig) -> Result<(Tensor, SolverReport)> {
        let mut g = Graph::inference();
        let bound = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &bound, x, solver, stability, false)?;
        Ok((g.value(out.logits).clone(), out.report))
    }

    /// Predicted classes.
    pub fn predict(&self, images: &Tensor, solver: &SolverConfig, stability: &StabilityConfig) -> Result<(Vec<usize>, SolverReport)> {
        let (logits, report) = self.logits(images, solver, stability)?;
        Ok((argmax_rows(&logits), report))
    }

    /// Mean cross-entropy and its gradient with respect to the images,
    /// through the whole pipeline.
    pub fn loss_input_gradient(
        &self,
        images: &Tensor,
        labels: &[usize],
        solver: &SolverConfig,
        stability: &StabilityConfig,
    ) -> Result<(f64, Tensor, SolverReport)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.param(images.clone());
        let out = self.forward(&mut g, &bound, x, solver, stability, false)?;
        let loss = g.softmax_cross_entropy(out.logits, labels)?;
        g.backward(loss)?;
        let grad = g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(images.shape()));
        Ok((g.value(loss).item()?, grad, out.report))
    }

    /// Realized output weight, `[classes×state_dim]`.
    pub fn head_weight(&self) -> Result<Tensor> {
        match &self.head {
            Head::Linear(p) => Ok(p.weight.clone()),
            Head::Orthogonal(p) => p.weight(),
        }
    }

    /// `‖W Wᵀ − I‖∞` of the orthogonal output layer, if there is one.
    pub fn orthogonality_defect(&self) -> Result<Option<f64>> {
        match &self.head {
            Head::Orthogonal(p) => Ok(Some(orthogonality_defect(&p.weight()?)?)),
            Head::Linear(_) => Ok(None),
        }
    }

    /// Smallest effective ICNN skip weight, if there is an ICNN.
    pub fn min_effective_skip(&self) -> Option<f64> {
        self.icnn
            .as_ref()
            .map(|p| p.u_raw.data().iter().map(|&u| u.max(0.0)).fold(f64::INFINITY, f64::min))
    }

    /// Running statistics of batch normalization, in a fixed order.
    pub fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("deq.norm1.running_mean", &self.deq.norm1.running_mean),
            ("deq.norm1.running_var", &self.deq.norm1.running_var),
            ("deq.norm2.running_mean", &self.deq.norm2.running_mean),
            ("deq.norm2.running_var", &self.deq.norm2.running_var),
        ]
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let (n1, n2) = (&mut self.deq.norm1, &mut self.deq.norm2);
        vec![
            ("deq.norm1.running_mean", &mut n1.running_mean),
            ("deq.norm1.running_var", &mut n1.running_var),
            ("deq.norm2.running_mean", &mut n2.running_mean),
            ("deq.norm2.running_var", &mut n2.running_var),
        ]
    }
}

impl Parameterized for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.features.visit(&mut |n, t| f(&format!("features.{n}"), t));
        self.deq.visit(&mut |n, t| f(&format!("deq.{n}"), t));
        if let Some(icnn) = &self.icnn {
            icnn.visit(&mut |n, t| f(&format!("icnn.{n}"), t));
        }
        match &self.head {
            Head::Linear(p) => p.visit(&mut |n, t| f(&format!("head.{n}"), t)),
            Head::Orthogonal(p) => p.visit(&mut |n, t| f(&format!("head.{n}"), t)),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.features.visit_mut(&mut |n, t| f(&format!("features.{n}"), t));
        self.deq.visit_mut(&mut |n, t| f(&format!("deq.{n}"), t));
        if let Some(icnn) = &mut self.icnn {
            icnn.visit_mut(&mut |n, t| f(&format!("icnn.{n}"), t));
        }
        match &mut self.head {
            Head::Linear(p) => p.visit_mut(&mut |n, t| f(&format!("head.{n}"), t)),
            Head::Orthogonal(p) => p.visit_mut(&mut |n, t| f(&format!("head.{n}"), t)),
        }
    }
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            t.row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Accuracy and solver statistics over a labelled set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub correct: usize,
    /// Percent in `[0, 100]`.
    pub accuracy: f64,
    /// Fraction of rows whose fixed point met the solver tolerance.
    pub convergence_rate: f64,
    pub mean_residual: f64,
    pub max_residual: f64,
}

/// Running tally behind an [`EvalReport`].
#[derive(Clone, Debug, Default)]
pub struct EvalTally {
    samples: usize,
    correct: usize,
    converged: usize,
    residual_sum: f64,
    residual_max: f64,
}

impl EvalTally {
    pub fn add(&mut self, predicted: &[usize], labels: &[usize], report: &SolverReport, tol: f64) {
        self.samples += labels.len();
        self.correct += predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
        for &r in &report.row_residuals {
            if r <= tol {
                self.converged += 1;
            }
            self.residual_sum += r;
            self.residual_max = self.residual_max.max(r);
        }
    }

    pub fn finish(&self) -> EvalReport {
        let n = self.samples.max(1) as f64;
        EvalReport {
            samples: self.samples,
            correct: self.correct,
            accuracy: 100.0 * self.correct as f64 / n,
            convergence_rate: self.converged as f64 / n,
            mean_residual: self.residual_sum / n,
            max_residual: self.residual_max,
        }
    }
}

/// Clean accuracy over `images`/`labels`, in batches.
pub fn evaluate(
    params: &ModelParams,
    images: &Tensor,
    labels: &[usize],
    solver: &SolverConfig,
    stability: &StabilityConfig,
    batch: usize,
) -> Result<EvalReport> {
    let mut tally = EvalTally::default();
    let batch = batch.max(1);
    let n = images.rows();
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let x = images.slice_rows(start, end);
        let (pred, report) = params.predict(&x, solver, stability)?;
        tally.add(&pred, &labels[start..end], &report, solver.tol);
        start = end;
    }
    Ok(tally.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_gradient, relative_error};
    use crate::layers::uniform;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_dim: 12,
            state_dim: 6,
            classes: 3,
            icnn_hidden: 5,
            ..Default::default()
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("resnet".parse::<Variant>().is_err());
    }

    #[test]
    fn variants_have_the_right_components() {
        let cfg = small_config();
        for v in Variant::ALL {
            let p = ModelParams::init(v, &cfg, 0).unwrap();
            assert_eq!(p.icnn.is_some(), v.uses_lyapunov());
            assert_eq!(p.orthogonality_defect().unwrap().is_some(), v.uses_orthogonal_head());
            let x = uniform(&mut ChaCha8Rng::seed_from_u64(1), &[4, 12], 0.5).map(|v| v + 0.5);
            let (logits, rep) = p.logits(&x, &SolverConfig::default(), &StabilityConfig::default()).unwrap();
            assert_eq!(logits.shape(), &[4, 3]);
            assert!(rep.converged);
        }
    }

    #[test]
    fn initialization_is_seeded() {
        let cfg = small_config();
        let a = ModelParams::init(Variant::LyaDeq, &cfg, 5).unwrap();
        let b = ModelParams::init(Variant::LyaDeq, &cfg, 5).unwrap();
        let c = ModelParams::init(Variant::LyaDeq, &cfg, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = small_config();
        let solver = SolverConfig {
            tol: 1e-11,
            max_iter: 200,
            ..Default::default()
        };
        let stab = StabilityConfig::default();
        let x = uniform(&mut ChaCha8Rng::seed_from_u64(2), &[3, 12], 0.5).map(|v| v + 0.5);
        let labels = [0, 2, 1];
        for v in Variant::ALL {
            let p = ModelParams::init(v, &cfg, 3).unwrap();
            let (_, grad, _) = p.loss_input_gradient(&x, &labels, &solver, &stab).unwrap();
            let fd = finite_difference_gradient(
                |x| {
                    let (logits, _) = p.logits(x, &solver, &stab)?;
                    let mut g = Graph::inference();
                    let l = g.constant(logits);
                    let loss = g.softmax_cross_entropy(l, &labels)?;
                    g.value(loss).item()
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(relative_error(&grad, &fd, 1e-8) <= 1e-3, "{v}");
            assert!(grad.max_abs() > 0.0);
        }
    }

    #[test]
    fn orthogonal_head_needs_room() {
        let cfg = ModelConfig {
            classes: 10,
            state_dim: 4,
            ..small_config()
        };
        assert!(ModelParams::init(Variant::LyaDeq, &cfg, 0).is_err());
    }

    #[test]
    fn evaluate_counts() {
        let cfg = small_config();
        let p = ModelParams::init(Variant::Deq, &cfg, 0).unwrap();
        let x = uniform(&mut ChaCha8Rng::seed_from_u64(4), &[7, 12], 0.5).map(|v| v + 0.5);
        let (pred, _) = p.predict(&x, &SolverConfig::default(), &StabilityConfig::default()).unwrap();
        let rep = evaluate(&p, &x, &pred, &SolverConfig::default(), &StabilityConfig::default(), 3).unwrap();
        assert_eq!(rep.samples, 7);
        assert_eq!(rep.accuracy, 100.0);
        assert_eq!(rep.convergence_rate, 1.0);
    }

    #[test]
    fn argmax_picks_first_maximum() {
        let t = Tensor::new(&[2, 3], vec![1.0, 3.0, 3.0, -1.0, -2.0, -0.5]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 2]);
    }
}
