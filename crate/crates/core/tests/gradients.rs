use superpipe::model::{build_model, reference_train_step, Activation, LayeredModel, Tensor};

const EPS: f64 = 1e-6;
const REL_TOL: f64 = 1e-3;
const ABS_TOL: f64 = 1e-6;

/// Loss of the model evaluated entirely in f64.
fn loss_f64(model: &LayeredModel, weights: &[Vec<f64>], biases: &[Vec<f64>], x: &Tensor, target: &Tensor) -> f64 {
    let d = model.d;
    let rows = x.shape()[0];
    let mut h: Vec<f64> = x.values().iter().map(|&v| v as f64).collect();
    for (l, block) in model.blocks.iter().enumerate() {
        let mut y = vec![0.0f64; rows * d];
        for r in 0..rows {
            for j in 0..d {
                let mut acc = biases[l][j];
                for i in 0..d {
                    acc += h[r * d + i] * weights[l][i * d + j];
                }
                y[r * d + j] = match block.activation {
                    Activation::Relu => acc.max(0.0),
                    Activation::Identity => acc,
                };
            }
        }
        h = y;
    }
    let n = h.len() as f64;
    h.iter()
        .zip(target.values())
        .map(|(y, &t)| (y - t as f64).powi(2))
        .sum::<f64>()
        / n
}

fn close(analytic: f32, numeric: f64) -> bool {
    let diff = (analytic as f64 - numeric).abs();
    diff <= ABS_TOL || diff <= REL_TOL * numeric.abs()
}

fn check(seed: u64, n: usize, d: usize, rows: usize, frozen: usize) {
    let model = build_model(seed, n, d, frozen).unwrap();
    let x = Tensor::random(seed, 10, rows, d);
    let target = Tensor::random(seed, 11, rows, d);
    let step = reference_train_step(&model, &x, &target, 0.1).unwrap();
    let mut weights: Vec<Vec<f64>> = model.blocks.iter().map(|b| b.weights.iter().map(|&v| v as f64).collect()).collect();
    let mut biases: Vec<Vec<f64>> = model.blocks.iter().map(|b| b.bias.iter().map(|&v| v as f64).collect()).collect();
    for l in 0..n {
        let Some(g) = &step.grads[l] else {
            assert!(model.blocks[l].frozen);
            continue;
        };
        for idx in 0..d * d {
            let orig = weights[l][idx];
            weights[l][idx] = orig + EPS;
            let up = loss_f64(&model, &weights, &biases, &x, &target);
            weights[l][idx] = orig - EPS;
            let down = loss_f64(&model, &weights, &biases, &x, &target);
            weights[l][idx] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            assert!(close(g.dw[idx], numeric), "layer {l} dw[{idx}]: {} vs {numeric}", g.dw[idx]);
        }
        for idx in 0..d {
            let orig = biases[l][idx];
            biases[l][idx] = orig + EPS;
            let up = loss_f64(&model, &weights, &biases, &x, &target);
            biases[l][idx] = orig - EPS;
            let down = loss_f64(&model, &weights, &biases, &x, &target);
            biases[l][idx] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            assert!(close(g.db[idx], numeric), "layer {l} db[{idx}]: {} vs {numeric}", g.db[idx]);
        }
    }
}

#[test]
fn single_linear_block() {
    check(1, 1, 3, 2, 0);
}

#[test]
fn deep_relu_stack() {
    check(2, 4, 5, 3, 0);
}

#[test]
fn frozen_prefix_has_no_grads() {
    check(3, 5, 4, 2, 2);
}
