//! Synthetic layered model and the all-resident reference math.
//!
//! A model is a chain of dense blocks `y = act(x·W + b)` with square `W`.
//! Every execution strategy in the crate must reproduce [`reference_forward`]
//! and [`reference_train_step`] bit for bit, so the arithmetic here (loop
//! order, accumulation order) is part of the contract.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Row-major f32 tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, ModelError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(ModelError::InvalidArgument(format!(
                "shape {shape:?} holds {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; len],
        }
    }

    /// Matrix with entries uniform in `[-1, 1)`.
    pub fn random(seed: u64, stream: u64, rows: usize, cols: usize) -> Self {
        let mut rng = SplitMix64::for_stream(seed, stream);
        let values = (0..rows * cols).map(|_| rng.symmetric_f32(1.0)).collect();
        Self {
            shape: vec![rows, cols],
            values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn expect_matrix(&self, cols: usize) -> Result<usize, ModelError> {
        match self.shape.as_slice() {
            [rows, c] if *c == cols && *rows >= 1 => Ok(*rows),
            _ => Err(ModelError::ShapeMismatch {
                expected: vec![self.shape.first().copied().unwrap_or(0), cols],
                found: self.shape.clone(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f32) -> f32 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative; ReLU at exactly zero is 0.
    #[inline]
    fn slope(self, z: f32) -> f32 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One repeating partition of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBlock {
    pub index: usize,
    pub d: usize,
    /// `d×d`, row-major: `weights[i * d + j]` is `W[i][j]`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub activation: Activation,
    pub frozen: bool,
}

pub fn block_weight_bytes(d: usize) -> u64 {
    ((d * d + d) * 4) as u64
}

impl LayerBlock {
    pub fn new(
        index: usize,
        d: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
        activation: Activation,
        frozen: bool,
    ) -> Result<Self, ModelError> {
        if d == 0 || weights.len() != d * d || bias.len() != d {
            return Err(ModelError::InvalidArgument(format!(
                "block {index}: need {} weights and {d} biases, got {} and {}",
                d * d,
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            index,
            d,
            weights,
            bias,
            activation,
            frozen,
        })
    }

    /// Identity weights, zero bias.
    pub fn identity(index: usize, d: usize, activation: Activation) -> Self {
        let mut weights = vec![0.0; d * d];
        for i in 0..d {
            weights[i * d + i] = 1.0;
        }
        Self {
            index,
            d,
            weights,
            bias: vec![0.0; d],
            activation,
            frozen: false,
        }
    }

    pub fn weight_bytes(&self) -> u64 {
        block_weight_bytes(self.d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredModel {
    pub d: usize,
    pub seed: u64,
    pub blocks: Vec<LayerBlock>,
}

impl LayeredModel {
    pub fn from_blocks(seed: u64, blocks: Vec<LayerBlock>) -> Result<Self, ModelError> {
        let d = blocks
            .first()
            .map(|b| b.d)
            .ok_or_else(|| ModelError::InvalidArgument("model needs at least one block".into()))?;
        for (i, block) in blocks.iter().enumerate() {
            if block.index != i || block.d != d {
                return Err(ModelError::InvalidArgument(format!(
                    "block at position {i} has index {} and width {}",
                    block.index, block.d
                )));
            }
        }
        Ok(Self { d, seed, blocks })
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn weight_bytes_per_layer(&self) -> u64 {
        block_weight_bytes(self.d)
    }

    pub fn frozen_mask(&self) -> Vec<bool> {
        self.blocks.iter().map(|b| b.frozen).collect()
    }
}

/// Deterministic model: block `i` draws its weights, then its biases, from
/// `SplitMix64::for_stream(seed, i)`, uniform in `[-1/√d, 1/√d)`. All blocks
/// use ReLU except the last, which is linear.
pub fn build_model(
    seed: u64,
    n_layers: usize,
    d: usize,
    frozen_prefix: usize,
) -> Result<LayeredModel, ModelError> {
    if n_layers == 0 {
        return Err(ModelError::InvalidArgument("n_layers must be >= 1".into()));
    }
    if d == 0 {
        return Err(ModelError::InvalidArgument("d must be >= 1".into()));
    }
    if frozen_prefix > n_layers {
        return Err(ModelError::InvalidArgument(format!(
            "frozen_prefix {frozen_prefix} exceeds n_layers {n_layers}"
        )));
    }
    let bound = 1.0 / (d as f64).sqrt();
    let blocks = (0..n_layers)
        .map(|index| {
            let mut rng = SplitMix64::for_stream(seed, index as u64);
            let weights = (0..d * d).map(|_| rng.symmetric_f32(bound)).collect();
            let bias = (0..d).map(|_| rng.symmetric_f32(bound)).collect();
            let activation = if index + 1 == n_layers {
                Activation::Identity
            } else {
                Activation::Relu
            };
            LayerBlock {
                index,
                d,
                weights,
                bias,
                activation,
                frozen: index < frozen_prefix,
            }
        })
        .collect();
    Ok(LayeredModel { d, seed, blocks })
}

fn pre_activation(block: &LayerBlock, x: &[f32], rows: usize) -> Vec<f32> {
    let d = block.d;
    let mut z = vec![0.0f32; rows * d];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        for j in 0..d {
            let mut acc = 0.0f32;
            for (i, xv) in xr.iter().enumerate() {
                acc += xv * block.weights[i * d + j];
            }
            z[r * d + j] = acc + block.bias[j];
        }
    }
    z
}

/// `y = act(x·W + b)`; each output entry accumulates `x[r][i]·W[i][j]` in
/// ascending `i` from zero, then adds the bias.
pub fn layer_forward(block: &LayerBlock, x: &Tensor) -> Result<Tensor, ModelError> {
    let rows = x.expect_matrix(block.d)?;
    let mut y = pre_activation(block, &x.values, rows);
    for v in &mut y {
        *v = block.activation.apply(*v);
    }
    Ok(Tensor {
        shape: vec![rows, block.d],
        values: y,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub dx: Tensor,
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

/// Gradients of a block given its forward input `x` and upstream `dy`.
pub fn layer_backward(block: &LayerBlock, x: &Tensor, dy: &Tensor) -> Result<LayerGrads, ModelError> {
    let d = block.d;
    let rows = x.expect_matrix(d)?;
    if dy.shape != x.shape {
        return Err(ModelError::ShapeMismatch {
            expected: x.shape.clone(),
            found: dy.shape.clone(),
        });
    }
    let z = pre_activation(block, &x.values, rows);
    let dz: Vec<f32> = z
        .iter()
        .zip(&dy.values)
        .map(|(zv, g)| g * block.activation.slope(*zv))
        .collect();

    let mut dw = vec![0.0f32; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0f32;
            for r in 0..rows {
                acc += x.values[r * d + i] * dz[r * d + j];
            }
            dw[i * d + j] = acc;
        }
    }
    let mut db = vec![0.0f32; d];
    for (j, slot) in db.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for r in 0..rows {
            acc += dz[r * d + j];
        }
        *slot = acc;
    }
    let mut dx = vec![0.0f32; rows * d];
    for r in 0..rows {
        for i in 0..d {
            let mut acc = 0.0f32;
            for j in 0..d {
                acc += dz[r * d + j] * block.weights[i * d + j];
            }
            dx[r * d + i] = acc;
        }
    }
    Ok(LayerGrads {
        dx: Tensor {
            shape: x.shape.clone(),
            values: dx,
        },
        dw,
        db,
    })
}

pub fn reference_forward(model: &LayeredModel, x: &Tensor) -> Result<Tensor, ModelError> {
    let mut h = x.clone();
    for block in &model.blocks {
        h = layer_forward(block, &h)?;
    }
    Ok(h)
}

/// Mean squared error over every entry, and its gradient `2(y-t)/N`.
pub fn mse_loss(output: &Tensor, target: &Tensor) -> Result<(f32, Tensor), ModelError> {
    if output.shape != target.shape {
        return Err(ModelError::ShapeMismatch {
            expected: output.shape.clone(),
            found: target.shape.clone(),
        });
    }
    let n = output.values.len() as f32;
    let mut sum = 0.0f32;
    let mut grad = Vec::with_capacity(output.values.len());
    for (y, t) in output.values.iter().zip(&target.values) {
        let diff = y - t;
        sum += diff * diff;
        grad.push(2.0 * diff / n);
    }
    Ok((
        sum / n,
        Tensor {
            shape: output.shape.clone(),
            values: grad,
        },
    ))
}

/// Plain SGD, `p ← p − lr·g`.
pub fn sgd_update(block: &mut LayerBlock, grads: &LayerGrads, lr: f32) {
    for (w, g) in block.weights.iter_mut().zip(&grads.dw) {
        *w -= lr * g;
    }
    for (b, g) in block.bias.iter_mut().zip(&grads.db) {
        *b -= lr * g;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStepResult {
    pub loss: f32,
    /// `None` for frozen blocks.
    pub grads: Vec<Option<BlockGrads>>,
    pub updated: LayeredModel,
}

pub fn reference_train_step(
    model: &LayeredModel,
    x: &Tensor,
    target: &Tensor,
    lr: f32,
) -> Result<TrainStepResult, ModelError> {
    let mut inputs = Vec::with_capacity(model.n_layers());
    let mut h = x.clone();
    for block in &model.blocks {
        let next = layer_forward(block, &h)?;
        inputs.push(std::mem::replace(&mut h, next));
    }
    let (loss, mut dy) = mse_loss(&h, target)?;

    let mut updated = model.clone();
    let mut grads = vec![None; model.n_layers()];
    for layer in (0..model.n_layers()).rev() {
        let block = &model.blocks[layer];
        let g = layer_backward(block, &inputs[layer], &dy)?;
        if !block.frozen {
            sgd_update(&mut updated.blocks[layer], &g, lr);
            grads[layer] = Some(BlockGrads {
                dw: g.dw.clone(),
                db: g.db.clone(),
            });
        }
        dy = g.dx;
    }
    Ok(TrainStepResult {
        loss,
        grads,
        updated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: usize, cols: usize, values: &[f32]) -> Tensor {
        Tensor::new(vec![rows, cols], values.to_vec()).unwrap()
    }

    #[test]
    fn weight_bytes_formula() {
        let model = build_model(7, 8, 16, 0).unwrap();
        assert_eq!(model.n_layers(), 8);
        for block in &model.blocks {
            assert_eq!(block.weight_bytes(), 1088);
        }
    }

    #[test]
    fn frozen_prefix_marks_leading_blocks() {
        let model = build_model(7, 8, 16, 4).unwrap();
        let mask = model.frozen_mask();
        assert_eq!(mask, vec![true, true, true, true, false, false, false, false]);
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model(7, 8, 16, 0).unwrap();
        let b = build_model(7, 8, 16, 0).unwrap();
        let bits = |m: &LayeredModel| -> Vec<u32> {
            m.blocks
                .iter()
                .flat_map(|b| b.weights.iter().chain(&b.bias).map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&build_model(8, 8, 16, 0).unwrap()));
    }

    #[test]
    fn weights_within_bound() {
        let model = build_model(3, 4, 25, 0).unwrap();
        for block in &model.blocks {
            for w in block.weights.iter().chain(&block.bias) {
                assert!(w.abs() <= 0.2);
            }
        }
    }

    #[test]
    fn invalid_arguments() {
        assert!(build_model(1, 0, 4, 0).is_err());
        assert!(build_model(1, 4, 0, 0).is_err());
        assert!(build_model(1, 4, 4, 5).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn identity_block_passes_input_through() {
        let block = LayerBlock::identity(0, 3, Activation::Identity);
        let x = matrix(2, 3, &[1.5, -2.0, 0.25, 3.0, 0.0, -7.0]);
        assert_eq!(layer_forward(&block, &x).unwrap(), x);
    }

    #[test]
    fn relu_identity_block() {
        let block = LayerBlock::identity(0, 2, Activation::Relu);
        let x = matrix(1, 2, &[-1.0, 2.0]);
        assert_eq!(layer_forward(&block, &x).unwrap().values(), &[0.0, 2.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let block = LayerBlock::identity(0, 3, Activation::Relu);
        let x = matrix(1, 2, &[1.0, 2.0]);
        assert!(matches!(
            layer_forward(&block, &x),
            Err(ModelError::ShapeMismatch { .. })
        ));
        let flat = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(layer_forward(&block, &flat).is_err());
    }

    #[test]
    fn backward_zero_upstream() {
        let model = build_model(11, 1, 4, 0).unwrap();
        let block = &model.blocks[0];
        let x = Tensor::random(1, 0, 3, 4);
        let g = layer_backward(block, &x, &Tensor::zeros(vec![3, 4])).unwrap();
        assert!(g.dx.values().iter().all(|v| *v == 0.0));
        assert!(g.dw.iter().all(|v| *v == 0.0));
        assert!(g.db.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_scalar_chain_rule() {
        let block = LayerBlock::new(0, 1, vec![3.0], vec![0.0], Activation::Identity, false).unwrap();
        let x = matrix(1, 1, &[5.0]);
        let dy = matrix(1, 1, &[0.5]);
        let g = layer_backward(&block, &x, &dy).unwrap();
        assert_eq!(g.dx.values(), &[1.5]);
        assert_eq!(g.dw, vec![2.5]);
        assert_eq!(g.db, vec![0.5]);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        // z = 0 exactly: weight 0, bias 0.
        let block = LayerBlock::new(0, 1, vec![0.0], vec![0.0], Activation::Relu, false).unwrap();
        let x = matrix(1, 1, &[1.0]);
        let g = layer_backward(&block, &x, &matrix(1, 1, &[1.0])).unwrap();
        assert_eq!(g.db, vec![0.0]);
        assert_eq!(g.dw, vec![0.0]);
    }

    #[test]
    fn backward_shape_mismatch() {
        let block = LayerBlock::identity(0, 2, Activation::Relu);
        let x = matrix(2, 2, &[1.0; 4]);
        let dy = matrix(1, 2, &[1.0; 2]);
        assert!(layer_backward(&block, &x, &dy).is_err());
    }

    #[test]
    fn reference_forward_of_identity_chain() {
        let blocks = (0..4).map(|i| LayerBlock::identity(i, 3, Activation::Identity)).collect();
        let model = LayeredModel::from_blocks(0, blocks).unwrap();
        let x = Tensor::random(5, 5, 2, 3);
        assert_eq!(reference_forward(&model, &x).unwrap(), x);
    }

    #[test]
    fn single_layer_reference_is_layer_forward() {
        let model = build_model(2, 1, 6, 0).unwrap();
        let x = Tensor::random(9, 0, 3, 6);
        assert_eq!(
            reference_forward(&model, &x).unwrap(),
            layer_forward(&model.blocks[0], &x).unwrap()
        );
    }

    #[test]
    fn reference_forward_is_fold() {
        let model = build_model(4, 5, 7, 0).unwrap();
        let x = Tensor::random(4, 99, 2, 7);
        let folded = model
            .blocks
            .iter()
            .try_fold(x.clone(), |h, b| layer_forward(b, &h))
            .unwrap();
        assert_eq!(reference_forward(&model, &x).unwrap(), folded);
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradient() {
        let model = build_model(5, 3, 4, 0).unwrap();
        let x = Tensor::random(5, 1, 2, 4);
        let target = reference_forward(&model, &x).unwrap();
        let step = reference_train_step(&model, &x, &target, 0.1).unwrap();
        assert_eq!(step.loss, 0.0);
        for g in step.grads.iter().flatten() {
            assert!(g.dw.iter().chain(&g.db).all(|v| *v == 0.0));
        }
        assert_eq!(step.updated, model);
    }

    #[test]
    fn all_frozen_leaves_model_unchanged() {
        let model = build_model(5, 3, 4, 3).unwrap();
        let x = Tensor::random(5, 1, 2, 4);
        let target = Tensor::random(5, 2, 2, 4);
        let step = reference_train_step(&model, &x, &target, 0.5).unwrap();
        assert!(step.loss > 0.0);
        assert!(step.grads.iter().all(Option::is_none));
        assert_eq!(step.updated, model);
    }

    #[test]
    fn frozen_blocks_get_no_gradients() {
        let model = build_model(5, 4, 4, 2).unwrap();
        let x = Tensor::random(5, 1, 2, 4);
        let target = Tensor::random(5, 2, 2, 4);
        let step = reference_train_step(&model, &x, &target, 0.5).unwrap();
        assert!(step.grads[0].is_none() && step.grads[1].is_none());
        assert!(step.grads[2].is_some() && step.grads[3].is_some());
        assert_eq!(step.updated.blocks[0], model.blocks[0]);
        assert_ne!(step.updated.blocks[3], model.blocks[3]);
    }
}
