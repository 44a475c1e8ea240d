//! Minimal differentiable double-head feed-forward network.
//!
//! The backbone is a stack of affine layers with rectifier activations. Two
//! affine heads attach to the backbone output: a classification head producing
//! logits and an anchor head projecting into a low-dimensional latent space.
//! All math is `f64`; forward and backward are pure functions of their inputs.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Architecture of the double-head network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub anchor_dim: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |field: &str, v: usize| -> Result<()> {
            if v == 0 {
                return Err(Error::InvalidConfig {
                    field: format!("network.{field}"),
                    value: "0".into(),
                    constraint: ">= 1".into(),
                });
            }
            Ok(())
        };
        check("input_dim", self.input_dim)?;
        check("num_classes", self.num_classes)?;
        check("anchor_dim", self.anchor_dim)?;
        if self.hidden_dims.is_empty() {
            return Err(Error::InvalidConfig {
                field: "network.hidden_dims".into(),
                value: "[]".into(),
                constraint: "non-empty (the anchor head attaches to a hidden layer)".into(),
            });
        }
        for (i, &d) in self.hidden_dims.iter().enumerate() {
            check(&format!("hidden_dims[{i}]"), d)?;
        }
        Ok(())
    }

    /// Output width of the backbone (the layer both heads attach to).
    pub fn backbone_out(&self) -> usize {
        *self.hidden_dims.last().expect("hidden_dims validated non-empty")
    }
}

/// One affine map `y = W x + b` with `W: out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl AffineLayer {
    /// Glorot-uniform weights, zero biases.
    fn glorot<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-limit..limit));
        AffineLayer {
            weight,
            bias: Array1::zeros(out_dim),
        }
    }

    /// Applies the affine map to a batch (rows are samples).
    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    fn scalar_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn zip_map(&self, other: &Self, f: &mut impl FnMut(f64, f64) -> f64) -> Self {
        let mut weight = self.weight.clone();
        weight.zip_mut_with(&other.weight, |a, &b| *a = f(*a, b));
        let mut bias = self.bias.clone();
        bias.zip_mut_with(&other.bias, |a, &b| *a = f(*a, b));
        AffineLayer { weight, bias }
    }
}

/// All learnable weights: backbone layers plus the two heads.
///
/// The same structure doubles as a gradient container and as momentum
/// buffers, since those are shape-congruent with the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub backbone: Vec<AffineLayer>,
    pub class_head: AffineLayer,
    pub anchor_head: AffineLayer,
}

impl ModelParameters {
    fn layers(&self) -> impl Iterator<Item = &AffineLayer> {
        self.backbone
            .iter()
            .chain([&self.class_head, &self.anchor_head])
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers().map(AffineLayer::scalar_count).sum()
    }

    /// A shape-congruent all-zero copy.
    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ModelParameters {
            backbone: self
                .backbone
                .iter()
                .map(|l| AffineLayer {
                    weight: l.weight.mapv(&f),
                    bias: l.bias.mapv(&f),
                })
                .collect(),
            class_head: AffineLayer {
                weight: self.class_head.weight.mapv(&f),
                bias: self.class_head.bias.mapv(&f),
            },
            anchor_head: AffineLayer {
                weight: self.anchor_head.weight.mapv(&f),
                bias: self.anchor_head.bias.mapv(&f),
            },
        }
    }

    /// Elementwise combination of two shape-congruent parameter sets.
    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        assert_eq!(self.backbone.len(), other.backbone.len(), "layer count mismatch");
        ModelParameters {
            backbone: self
                .backbone
                .iter()
                .zip(&other.backbone)
                .map(|(a, b)| a.zip_map(b, &mut f))
                .collect(),
            class_head: self.class_head.zip_map(&other.class_head, &mut f),
            anchor_head: self.anchor_head.zip_map(&other.anchor_head, &mut f),
        }
    }

    /// In-place `self += c * other`.
    pub fn add_scaled(&mut self, other: &Self, c: f64) {
        *self = self.zip_map(other, |a, b| a + c * b);
    }

    /// Flattens all parameters into one vector (layer order, row-major).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Rebuilds a parameter set with this one's shapes from a flat vector.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), self.param_count(), "flat length mismatch");
        let mut result = self.clone();
        let mut it = flat.iter();
        let mut fill = |layer: &mut AffineLayer| {
            for w in layer.weight.iter_mut() {
                *w = *it.next().expect("length checked");
            }
            for b in layer.bias.iter_mut() {
                *b = *it.next().expect("length checked");
            }
        };
        for l in result.backbone.iter_mut() {
            fill(l);
        }
        fill(&mut result.class_head);
        fill(&mut result.anchor_head);
        result
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    /// Largest absolute elementwise difference, for closeness assertions.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.to_flat()
            .iter()
            .zip(other.to_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Reconstructs the architecture this parameter set realizes.
    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_dim: self.backbone[0].weight.ncols(),
            hidden_dims: self.backbone.iter().map(|l| l.weight.nrows()).collect(),
            num_classes: self.class_head.weight.nrows(),
            anchor_dim: self.anchor_head.weight.nrows(),
        }
    }
}

/// Deterministic Glorot-uniform initialization; biases start at zero.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ModelParameters> {
    spec.validate()?;
    let mut rng = rng::stream(seed, rng::DOMAIN_INIT, 0, 0);
    let mut backbone = Vec::with_capacity(spec.hidden_dims.len());
    let mut in_dim = spec.input_dim;
    for &out_dim in &spec.hidden_dims {
        backbone.push(AffineLayer::glorot(out_dim, in_dim, &mut rng));
        in_dim = out_dim;
    }
    Ok(ModelParameters {
        backbone,
        class_head: AffineLayer::glorot(spec.num_classes, in_dim, &mut rng),
        anchor_head: AffineLayer::glorot(spec.anchor_dim, in_dim, &mut rng),
    })
}

/// Outputs of a forward pass plus the activations needed for backprop.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `batch x num_classes` classification logits.
    pub logits: Array2<f64>,
    /// `batch x anchor_dim` anchor-head latent embeddings.
    pub anchor_embeddings: Array2<f64>,
    /// Post-activation values per backbone stage; `[0]` is the input batch.
    activations: Vec<Array2<f64>>,
}

impl ForwardOutput {
    pub fn batch_len(&self) -> usize {
        self.logits.nrows()
    }
}

/// Runs the batch through backbone and both heads.
pub fn forward(params: &ModelParameters, batch: &Array2<f64>) -> Result<ForwardOutput> {
    let input_dim = params.backbone[0].weight.ncols();
    if batch.ncols() != input_dim {
        return Err(Error::ShapeMismatch {
            context: "forward".into(),
            expected: format!("batch with {input_dim} columns"),
            got: format!("{} columns", batch.ncols()),
        });
    }
    let mut activations = Vec::with_capacity(params.backbone.len() + 1);
    activations.push(batch.clone());
    for layer in &params.backbone {
        let h = layer.apply(activations.last().expect("nonempty")).mapv(|v| v.max(0.0));
        activations.push(h);
    }
    let hidden = activations.last().expect("nonempty");
    Ok(ForwardOutput {
        logits: params.class_head.apply(hidden),
        anchor_embeddings: params.anchor_head.apply(hidden),
        activations,
    })
}

/// Loss gradient at the network outputs; a `None` head receives zero gradient,
/// which selects the head being trained.
#[derive(Debug, Clone, Default)]
pub struct OutputGradient {
    pub logits: Option<Array2<f64>>,
    pub anchor_embeddings: Option<Array2<f64>>,
}

impl OutputGradient {
    pub fn for_logits(g: Array2<f64>) -> Self {
        OutputGradient {
            logits: Some(g),
            anchor_embeddings: None,
        }
    }

    pub fn for_anchor(g: Array2<f64>) -> Self {
        OutputGradient {
            logits: None,
            anchor_embeddings: Some(g),
        }
    }
}

fn check_head_grad(g: &Array2<f64>, rows: usize, cols: usize, head: &str) -> Result<()> {
    if g.nrows() != rows || g.ncols() != cols {
        return Err(Error::ShapeMismatch {
            context: format!("backward ({head} gradient)"),
            expected: format!("{rows} x {cols}"),
            got: format!("{} x {}", g.nrows(), g.ncols()),
        });
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("backward ({head} gradient)"),
        });
    }
    Ok(())
}

/// Exact analytic gradients of the composed function w.r.t. all parameters.
pub fn backward(
    params: &ModelParameters,
    out: &ForwardOutput,
    grad: &OutputGradient,
) -> Result<ModelParameters> {
    let n = out.batch_len();
    let hidden = out.activations.last().expect("nonempty");
    let mut grads = params.zeros_like();
    // dL/d(hidden) accumulates contributions from whichever heads carry loss.
    let mut d_hidden: Array2<f64> = Array2::zeros(hidden.raw_dim());

    if let Some(g) = &grad.logits {
        check_head_grad(g, n, params.class_head.weight.nrows(), "logits")?;
        grads.class_head.weight = g.t().dot(hidden);
        grads.class_head.bias = g.sum_axis(Axis(0));
        d_hidden = d_hidden + g.dot(&params.class_head.weight);
    }
    if let Some(g) = &grad.anchor_embeddings {
        check_head_grad(g, n, params.anchor_head.weight.nrows(), "anchor")?;
        grads.anchor_head.weight = g.t().dot(hidden);
        grads.anchor_head.bias = g.sum_axis(Axis(0));
        d_hidden = d_hidden + g.dot(&params.anchor_head.weight);
    }

    for l in (0..params.backbone.len()).rev() {
        // Rectifier mask: output > 0 iff pre-activation > 0.
        let mut d_z = d_hidden;
        d_z.zip_mut_with(&out.activations[l + 1], |g, &h| {
            if h <= 0.0 {
                *g = 0.0;
            }
        });
        grads.backbone[l].weight = d_z.t().dot(&out.activations[l]);
        grads.backbone[l].bias = d_z.sum_axis(Axis(0));
        d_hidden = d_z.dot(&params.backbone[l].weight);
    }
    Ok(grads)
}

/// SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig {
                field: format!("{prefix}.learning_rate"),
                value: self.learning_rate.to_string(),
                constraint: "> 0".into(),
            });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig {
                field: format!("{prefix}.momentum"),
                value: self.momentum.to_string(),
                constraint: "in [0, 1)".into(),
            });
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig {
                field: format!("{prefix}.weight_decay"),
                value: self.weight_decay.to_string(),
                constraint: ">= 0".into(),
            });
        }
        Ok(())
    }

    pub fn with_learning_rate(self, learning_rate: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            ..self
        }
    }
}

/// Momentum buffers, shape-congruent with the parameters they update.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: ModelParameters,
}

impl OptimizerState {
    pub fn zeros(params: &ModelParameters) -> Self {
        OptimizerState {
            velocity: params.zeros_like(),
        }
    }

    #[cfg(test)]
    pub(crate) fn velocity(&self) -> &ModelParameters {
        &self.velocity
    }
}

/// Which heads an SGD step updates; the backbone always trains. A deselected
/// head is fully frozen: neither gradient, momentum, nor weight decay touch
/// it during that step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSelection {
    pub class_head: bool,
    pub anchor_head: bool,
}

impl HeadSelection {
    pub const ALL: HeadSelection = HeadSelection {
        class_head: true,
        anchor_head: true,
    };
    pub const CLASS_ONLY: HeadSelection = HeadSelection {
        class_head: true,
        anchor_head: false,
    };
    pub const ANCHOR_ONLY: HeadSelection = HeadSelection {
        class_head: false,
        anchor_head: true,
    };
}

fn step_layer(
    param: &mut AffineLayer,
    grad: &AffineLayer,
    velocity: &mut AffineLayer,
    cfg: &OptimizerConfig,
) {
    ndarray::Zip::from(&mut velocity.weight)
        .and(&grad.weight)
        .and(&param.weight)
        .for_each(|v, &g, &p| *v = cfg.momentum * *v + g + cfg.weight_decay * p);
    ndarray::Zip::from(&mut param.weight)
        .and(&velocity.weight)
        .for_each(|p, &v| *p -= cfg.learning_rate * v);
    ndarray::Zip::from(&mut velocity.bias)
        .and(&grad.bias)
        .and(&param.bias)
        .for_each(|v, &g, &p| *v = cfg.momentum * *v + g + cfg.weight_decay * p);
    ndarray::Zip::from(&mut param.bias)
        .and(&velocity.bias)
        .for_each(|p, &v| *p -= cfg.learning_rate * v);
}

/// One SGD step with momentum and weight decay:
/// `v <- momentum*v + grad + weight_decay*param; param <- param - lr*v`.
pub fn sgd_step(
    params: &mut ModelParameters,
    grads: &ModelParameters,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
) {
    sgd_step_heads(params, grads, state, cfg, HeadSelection::ALL);
}

/// [`sgd_step`] restricted to the backbone plus the selected heads.
pub fn sgd_step_heads(
    params: &mut ModelParameters,
    grads: &ModelParameters,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    heads: HeadSelection,
) {
    for i in 0..params.backbone.len() {
        step_layer(
            &mut params.backbone[i],
            &grads.backbone[i],
            &mut state.velocity.backbone[i],
            cfg,
        );
    }
    if heads.class_head {
        step_layer(
            &mut params.class_head,
            &grads.class_head,
            &mut state.velocity.class_head,
            cfg,
        );
    }
    if heads.anchor_head {
        step_layer(
            &mut params.anchor_head,
            &grads.anchor_head,
            &mut state.velocity.anchor_head,
            cfg,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::losses::cross_entropy_batch;
    use ndarray::array;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            input_dim: 2,
            hidden_dims: vec![4],
            num_classes: 3,
            anchor_dim: 2,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = tiny_spec();
        let a = init_params(&spec, 7).unwrap();
        let b = init_params(&spec, 7).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        let c = init_params(&spec, 8).unwrap();
        assert_ne!(a.to_flat(), c.to_flat());
    }

    #[test]
    fn param_count_matches_hand_count() {
        // 2*4+4 backbone, 4*3+3 classification head, 4*2+2 anchor head.
        let params = init_params(&tiny_spec(), 0).unwrap();
        assert_eq!(params.param_count(), 37);
        assert_eq!(params.to_flat().len(), 37);
    }

    #[test]
    fn param_count_is_structural() {
        let params = init_params(&tiny_spec(), 0).unwrap();
        let scaled = params.map(|v| 1000.0 * v + 3.0);
        assert_eq!(params.param_count(), scaled.param_count());

        let mut wide = tiny_spec();
        wide.anchor_dim = 4;
        let wide_params = init_params(&wide, 0).unwrap();
        // Doubling anchor_dim adds backbone_out * anchor_dim + anchor_dim.
        assert_eq!(wide_params.param_count() - params.param_count(), 4 * 2 + 2);
    }

    #[test]
    fn spec_roundtrips_through_params() {
        let spec = NetworkSpec {
            input_dim: 5,
            hidden_dims: vec![7, 3],
            num_classes: 4,
            anchor_dim: 6,
        };
        assert_eq!(init_params(&spec, 1).unwrap().spec(), spec);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = tiny_spec();
        spec.hidden_dims = vec![];
        assert!(init_params(&spec, 0).is_err());
        let mut spec = tiny_spec();
        spec.input_dim = 0;
        assert!(init_params(&spec, 0).is_err());
    }

    #[test]
    fn zero_params_map_any_batch_to_zero_logits() {
        let params = init_params(&tiny_spec(), 3).unwrap().zeros_like();
        let batch = array![[1.5, -2.0], [0.0, 4.0], [3.0, 3.0]];
        let out = forward(&params, &batch).unwrap();
        assert!(out.logits.iter().all(|&v| v == 0.0));
        assert!(out.anchor_embeddings.iter().all(|&v| v == 0.0));
        assert_eq!(out.logits.nrows(), 3);
        assert_eq!(out.anchor_embeddings.nrows(), 3);
        assert_eq!(out.logits.ncols(), 3);
        assert_eq!(out.anchor_embeddings.ncols(), 2);
    }

    fn hand_set_params() -> ModelParameters {
        ModelParameters {
            backbone: vec![AffineLayer {
                weight: array![[1.0, -0.5], [0.25, 0.75]],
                bias: array![0.1, -0.2],
            }],
            class_head: AffineLayer {
                weight: array![[2.0, -1.0]],
                bias: array![0.05],
            },
            anchor_head: AffineLayer {
                weight: array![[0.5, 0.5]],
                bias: array![-0.1],
            },
        }
    }

    #[test]
    fn forward_matches_hand_computation() {
        let params = hand_set_params();
        let batch = array![[0.8, 0.4], [-0.5, -0.5]];
        let out = forward(&params, &batch).unwrap();
        // Sample 0: hidden = relu(0.7, 0.3); sample 1: both units dead.
        assert!((out.logits[[0, 0]] - 1.15).abs() < 1e-12);
        assert!((out.anchor_embeddings[[0, 0]] - 0.4).abs() < 1e-12);
        assert!((out.logits[[1, 0]] - 0.05).abs() < 1e-12);
        assert!((out.anchor_embeddings[[1, 0]] - (-0.1)).abs() < 1e-12);
    }

    #[test]
    fn forward_is_pure() {
        let params = init_params(&tiny_spec(), 11).unwrap();
        let batch = array![[0.3, -0.9], [2.0, 0.1]];
        let a = forward(&params, &batch).unwrap();
        let b = forward(&params, &batch).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.anchor_embeddings, b.anchor_embeddings);
    }

    #[test]
    fn forward_rejects_wrong_width_with_dimension_report() {
        let params = init_params(&tiny_spec(), 0).unwrap();
        let batch = array![[1.0, 2.0, 3.0]];
        let err = forward(&params, &batch).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2"), "report should name expected width: {msg}");
        assert!(msg.contains("3"), "report should name actual width: {msg}");
    }

    #[test]
    fn backward_zero_gradient_gives_zero_grads() {
        let params = init_params(&tiny_spec(), 5).unwrap();
        let batch = array![[0.5, -0.5], [1.0, 1.0]];
        let out = forward(&params, &batch).unwrap();
        let grads = backward(
            &params,
            &out,
            &OutputGradient::for_logits(Array2::zeros((2, 3))),
        )
        .unwrap();
        assert!(grads.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heads_only_share_the_backbone() {
        let params = init_params(&tiny_spec(), 5).unwrap();
        let batch = array![[0.5, -0.5], [1.0, 1.0]];
        let out = forward(&params, &batch).unwrap();
        let grads = backward(
            &params,
            &out,
            &OutputGradient::for_logits(Array2::from_elem((2, 3), 0.7)),
        )
        .unwrap();
        assert!(grads.anchor_head.weight.iter().all(|&v| v == 0.0));
        assert!(grads.anchor_head.bias.iter().all(|&v| v == 0.0));
        assert!(grads.class_head.weight.iter().any(|&v| v != 0.0));

        let grads = backward(
            &params,
            &out,
            &OutputGradient::for_anchor(Array2::from_elem((2, 2), 0.7)),
        )
        .unwrap();
        assert!(grads.class_head.weight.iter().all(|&v| v == 0.0));
        assert!(grads.anchor_head.weight.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_rejects_non_finite_gradients() {
        let params = init_params(&tiny_spec(), 5).unwrap();
        let batch = array![[0.5, -0.5]];
        let out = forward(&params, &batch).unwrap();
        let mut g = Array2::zeros((1, 3));
        g[[0, 1]] = f64::NAN;
        assert!(backward(&params, &out, &OutputGradient::for_logits(g)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let spec = NetworkSpec {
            input_dim: 3,
            hidden_dims: vec![5, 4],
            num_classes: 3,
            anchor_dim: 2,
        };
        let params = init_params(&spec, 99).unwrap();
        let batch = array![[0.4, -1.2, 0.9], [1.1, 0.3, -0.4], [-0.6, 0.8, 0.2]];
        let labels = vec![0, 2, 1];
        let out = forward(&params, &batch).unwrap();
        let (_, grad) = cross_entropy_batch(&out.logits, &labels).unwrap();
        let analytic = backward(&params, &out, &OutputGradient::for_logits(grad)).unwrap();
        let err = gradcheck::max_relative_error(&params, &analytic, 1e-5, |p| {
            let out = forward(p, &batch).unwrap();
            cross_entropy_batch(&out.logits, &labels).unwrap().0
        });
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn sgd_zero_gradients_leave_params_and_decay_buffers() {
        let mut params = init_params(&tiny_spec(), 1).unwrap();
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.5,
            weight_decay: 0.0,
        };
        let mut state = OptimizerState::zeros(&params);
        let g = params.map(|_| 0.25);
        sgd_step(&mut params, &g, &mut state, &cfg);
        // Velocity now holds the gradient; a zero-gradient step decays it.
        let before = params.clone();
        let zero = params.zeros_like();
        sgd_step(&mut params, &zero, &mut state, &cfg);
        let expected_velocity = g.map(|v| 0.5 * v);
        assert!(state.velocity().max_abs_diff(&expected_velocity) < 1e-15);
        let expected = before.zip_map(&expected_velocity, |p, v| p - 0.1 * v);
        assert!(params.max_abs_diff(&expected) < 1e-15);

        // With fresh zero buffers a zero-gradient step is the identity.
        let mut fresh = before.clone();
        let mut fresh_state = OptimizerState::zeros(&fresh);
        let zero = fresh.zeros_like();
        sgd_step(&mut fresh, &zero, &mut fresh_state, &cfg);
        assert_eq!(fresh.to_flat(), before.to_flat());
    }

    #[test]
    fn sgd_without_momentum_is_vanilla() {
        let mut params = init_params(&tiny_spec(), 2).unwrap();
        let before = params.clone();
        let g = params.map(|_| 0.5);
        let cfg = OptimizerConfig {
            learning_rate: 0.2,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut state = OptimizerState::zeros(&params);
        sgd_step(&mut params, &g, &mut state, &cfg);
        let expected = before.zip_map(&g, |p, grad| p - 0.2 * grad);
        assert_eq!(params.to_flat(), expected.to_flat());
    }

    #[test]
    fn sgd_momentum_compounds_over_steps() {
        let mut params = init_params(&tiny_spec(), 3).unwrap();
        let g = params.map(|_| 1.0);
        let cfg = OptimizerConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut state = OptimizerState::zeros(&params);
        sgd_step(&mut params, &g, &mut state, &cfg);
        let after_first = params.clone();
        sgd_step(&mut params, &g, &mut state, &cfg);
        // Second-step displacement is lr * (1 + momentum) * g.
        let displacement = after_first.zip_map(&params, |a, b| a - b);
        let expected = 0.01 * 1.9;
        assert!(displacement.to_flat().iter().all(|&d| (d - expected).abs() < 1e-14));
    }

    #[test]
    fn sgd_with_zero_learning_rate_is_identity() {
        let mut params = init_params(&tiny_spec(), 4).unwrap();
        let before = params.clone();
        let g = params.map(|_| 3.0);
        let cfg = OptimizerConfig {
            learning_rate: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
        };
        let mut state = OptimizerState::zeros(&params);
        for _ in 0..3 {
            sgd_step(&mut params, &g, &mut state, &cfg);
        }
        assert_eq!(params.to_flat(), before.to_flat());
    }

    #[test]
    fn weight_decay_enters_the_velocity() {
        let mut params = init_params(&tiny_spec(), 6).unwrap();
        let before = params.clone();
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.01,
        };
        let mut state = OptimizerState::zeros(&params);
        let zero = params.zeros_like();
        sgd_step(&mut params, &zero, &mut state, &cfg);
        let expected = before.map(|p| p - 0.1 * 0.01 * p);
        assert!(params.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn flat_roundtrip_is_exact() {
        let params = init_params(&tiny_spec(), 12).unwrap();
        let rebuilt = params.with_flat(&params.to_flat());
        assert_eq!(params.to_flat(), rebuilt.to_flat());
    }
}
