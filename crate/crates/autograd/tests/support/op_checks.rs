//! Finite-difference checks for every differentiable op, shared by the
//! gradient tests and the acceptance suite.
#![allow(dead_code)]

use omoq_autograd::{BatchNormState, Conv2dOptions, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
pub const MAX_REL: f64 = 1e-4;
/// Denominator floor so gradients that are numerically zero compare on an
/// absolute scale.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct OpResult {
    pub name: &'static str,
    pub probes: usize,
    pub max_rel: f64,
    /// Location and values of the worst probe.
    pub worst: String,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.probes >= 10 && self.max_rel < MAX_REL
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Reduce any op output to a scalar through a fixed random projection so
/// every output element carries a distinct weight.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = g.constant(Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)));
    let prod = g.mul(out, proj).unwrap();
    g.mean(prod)
}

fn eval_loss<F>(inputs: &[Tensor<f64>], build: &F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars);
    let l = project(&mut g, out, 7);
    g.value(l).item().unwrap()
}

/// Probes every element of every input.
fn check<F>(name: &'static str, inputs: Vec<Tensor<f64>>, build: F) -> OpResult
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let l = project(&mut g, out, 7);
    let grads = g.backward(l).unwrap();

    let mut probes = 0;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval_loss(&plus, &build) - eval_loss(&minus, &build)) / (2.0 * H);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel >= max_rel {
                max_rel = rel;
                worst = format!("input {i} element {j}: analytic {a}, numeric {numeric}");
            }
            probes += 1;
        }
    }
    OpResult {
        name,
        probes,
        max_rel,
        worst,
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(2024)
}

pub fn matmul_and_linear() -> Vec<OpResult> {
    let mut out = Vec::new();
    let mut r = rng();
    let a = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[4, 2], -1.0, 1.0);
    let bias = rand_tensor(&mut r, &[2], -1.0, 1.0);
    out.push(check("matmul", vec![a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]).unwrap()));
    out.push(check("linear", vec![a, b, bias], |g, v| g.linear(v[0], v[1], v[2]).unwrap()));
    out
}

pub fn elementwise_binary() -> Vec<OpResult> {
    let mut out = Vec::new();
    let mut r = rng();
    let a = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
    out.push(check("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap()));
    out.push(check("sub", vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap()));
    out.push(check("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap()));
    out.push(check("scale", vec![a, b], |g, v| {
        let s = g.scale(v[0], -1.7);
        g.add(s, v[1]).unwrap()
    }));
    let wide = rand_tensor(&mut r, &[3, 3], -1.0, 1.0);
    let bias = rand_tensor(&mut r, &[3], -1.0, 1.0);
    out.push(check("add_bias", vec![wide, bias], |g, v| g.add_bias(v[0], v[1]).unwrap()));
    out
}

pub fn activations() -> Vec<OpResult> {
    let mut out = Vec::new();
    let mut r = rng();
    // keep relu inputs away from the kink at zero
    let x = Tensor::from_fn(vec![12], |i| {
        let m: f64 = r.random_range(0.1..1.0);
        if i % 2 == 0 { m } else { -m }
    });
    out.push(check("relu", vec![x], |g, v| g.relu(v[0])));
    let y = rand_tensor(&mut r, &[12], -3.0, 3.0);
    out.push(check("sigmoid", vec![y.clone()], |g, v| g.sigmoid(v[0])));
    out.push(check("tanh", vec![y], |g, v| g.tanh(v[0])));
    let p = rand_tensor(&mut r, &[12], 0.2, 2.0);
    out.push(check("sqrt", vec![p], |g, v| g.sqrt(v[0]).unwrap()));
    out
}

pub fn dropout_in_train_mode_with_fixed_mask() -> Vec<OpResult> {
    let mut out = Vec::new();
    let mut r = rng();
    let x = rand_tensor(&mut r, &[4, 5], -1.0, 1.0);
    out.push(check("dropout", vec![x], |g, v| {
        let mut drng = ChaCha8Rng::seed_from_u64(99);
        g.dropout(v[0], 0.3, true, &mut drng).unwrap()
    }));
    out
}

pub fn structural_ops() -> Vec<OpResult> {
    let mut out = Vec::new();
    let mut r = rng();
    let a = rand_tensor(&mut r, &[2, 3, 2], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[2, 1, 2], -1.0, 1.0);
    out.push(check("concat", vec![a.clone(), b], |g, v| g.concat(&[v[0], v[1]], 1).unwrap()));
    out.push(check("slice", vec![a.clone()], |g, v| g.slice(v[0], 1, 1, 2).unwrap()));
    out.push(check("reshape", vec![a.clone()], |g, v| {
        let y = g.reshape(v[0], vec![6, 2]).unwrap();
        g.tanh(y)
    }));
    let c = rand_tensor(&mut r, &[2, 3, 2], -1.0, 1.0);
    out.push(check("select_rows", vec![a, c], |g, v| g.select_rows(&[true, false], v[0], v[1]).unwrap()));
    out
}

pub fn conv2d_variants() -> Vec<OpResult> {
    let mut out = Vec::new();
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 2, 5, 6], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[3], -1.0, 1.0);
    out.push(check("conv2d", vec![x.clone(), w.clone(), b.clone()], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), Conv2dOptions::default()).unwrap()
    }));
    let opts = Conv2dOptions {
        stride: (2, 1),
        padding: (1, 2),
    };
    out.push(check("conv2d_strided_padded", vec![x, w, b], move |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), opts).unwrap()
    }));
    out
}

pub fn maxpool2d() -> Vec<OpResult> {
    let mut out = Vec::new();
    // distinct, well-separated values so no perturbation changes the winner
    let mut r = rng();
    let mut vals: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| i as f64 * 0.05).collect();
    for i in (1..vals.len()).rev() {
        let j = r.random_range(0..=i);
        vals.swap(i, j);
    }
    let x = Tensor::new(vec![2, 2, 5, 4], vals).unwrap();
    out.push(check("maxpool2d", vec![x], |g, v| g.maxpool2d(v[0], 2, 2).unwrap()));
    out
}

pub fn batch_norm_train_and_eval() -> Vec<OpResult> {
    let mut out = Vec::new();
    let mut r = rng();
    let x = rand_tensor(&mut r, &[3, 2, 2, 2], -1.0, 1.0);
    let gamma = rand_tensor(&mut r, &[2], 0.5, 1.5);
    let beta = rand_tensor(&mut r, &[2], -0.5, 0.5);
    out.push(check("batch_norm_train", vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let mut st = BatchNormState::new(2);
        g.batch_norm(v[0], v[1], v[2], &mut st, true).unwrap()
    }));
    out.push(check("batch_norm_eval", vec![x, gamma.clone(), beta.clone()], |g, v| {
        let mut st = BatchNormState::new(2);
        st.running_mean = vec![0.1, -0.2];
        st.running_var = vec![0.7, 1.3];
        g.batch_norm(v[0], v[1], v[2], &mut st, false).unwrap()
    }));
    let flat = rand_tensor(&mut r, &[5, 2], -1.0, 1.0);
    out.push(check("batch_norm_2d", vec![flat, gamma, beta], |g, v| {
        let mut st = BatchNormState::new(2);
        g.batch_norm(v[0], v[1], v[2], &mut st, true).unwrap()
    }));
    out
}

pub fn layer_norm() -> Vec<OpResult> {
    let mut out = Vec::new();
    let mut r = rng();
    let x = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let gamma = rand_tensor(&mut r, &[4], 0.5, 1.5);
    let beta = rand_tensor(&mut r, &[4], -0.5, 0.5);
    out.push(check("layer_norm", vec![x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap()));
    out
}

pub fn reductions_and_losses() -> Vec<OpResult> {
    let mut out = Vec::new();
    let mut r = rng();
    let p = rand_tensor(&mut r, &[3, 4], 0.0, 1.0);
    let t = rand_tensor(&mut r, &[3, 4], 0.0, 1.0);
    out.push(check("mean", vec![p.clone()], |g, v| g.mean(v[0])));
    out.push(check("mse", vec![p.clone(), t.clone()], |g, v| g.mse_loss(v[0], v[1]).unwrap()));
    out.push(check("rmse", vec![p.clone(), t.clone()], |g, v| g.rmse_loss(v[0], v[1]).unwrap()));
    let w: Vec<f64> = (0..12).map(|i| if i % 4 == 3 { 0.0 } else { 1.0 }).collect();
    out.push(check("weighted_mse", vec![p, t], move |g, v| {
        g.weighted_mse_loss(v[0], v[1], &w).unwrap()
    }));
    out
}

pub fn all() -> Vec<OpResult> {
    [
        matmul_and_linear(),
        elementwise_binary(),
        activations(),
        dropout_in_train_mode_with_fixed_mask(),
        structural_ops(),
        conv2d_variants(),
        maxpool2d(),
        batch_norm_train_and_eval(),
        layer_norm(),
        reductions_and_losses(),
    ]
    .concat()
}
