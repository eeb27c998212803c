//! Central finite differences against the analytic backward pass for
//! every differentiable op.

use mpsl_tensor::{DType, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(dims.to_vec(), data, DType::F64).unwrap().with_requires_grad(true)
}

/// Reduces an arbitrary output to a scalar with fixed random weights so
/// every output element contributes a distinct upstream gradient.
fn project(g: &mut Graph, out: Var) -> Var {
    if g.value(out).numel() == 1 && g.dims(out).is_empty() {
        return out;
    }
    let dims = g.dims(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = random(&dims, &mut rng).with_requires_grad(false);
    let w = g.insert(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn eval(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new(7);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = build(&mut g, &vars);
    let loss = project(&mut g, out);
    g.value(loss).item()
}

fn check(dims: &[&[usize]], build: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs: Vec<Tensor> = dims.iter().map(|d| random(d, &mut rng)).collect();
    let mut g = Graph::new(7);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = build(&mut g, &vars);
    let loss = project(&mut g, out);
    let grads = g.backward(loss).unwrap();
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("input gradient").to_vec();
        for i in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * h);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-3);
            assert!(
                err < 1e-4,
                "input {k} element {i}: numeric {numeric} analytic {} (rel {err})",
                analytic[i]
            );
        }
    }
}

#[test]
fn add() {
    check(&[&[2, 3], &[2, 3]], &|g, v| g.add(v[0], v[1]).unwrap());
}

#[test]
fn add_broadcast() {
    check(&[&[2, 3, 4], &[3, 4]], &|g, v| g.add_broadcast(v[0], v[1]).unwrap());
}

#[test]
fn mul() {
    check(&[&[5], &[5]], &|g, v| g.mul(v[0], v[1]).unwrap());
}

#[test]
fn scale() {
    check(&[&[4]], &|g, v| g.scale(v[0], -2.5));
}

#[test]
fn mul_scalar() {
    check(&[&[2, 3], &[]], &|g, v| g.mul_scalar(v[0], v[1]).unwrap());
}

#[test]
fn exp() {
    check(&[&[6]], &|g, v| g.exp(v[0]));
}

#[test]
fn matmul() {
    check(&[&[2, 3, 4], &[4, 5]], &|g, v| g.matmul(v[0], v[1]).unwrap());
}

#[test]
fn bmm() {
    check(&[&[2, 3, 4], &[2, 4, 5]], &|g, v| g.bmm(v[0], v[1], false).unwrap());
}

#[test]
fn bmm_transposed() {
    check(&[&[2, 3, 4], &[2, 5, 4]], &|g, v| g.bmm(v[0], v[1], true).unwrap());
}

#[test]
fn reshape() {
    check(&[&[2, 6]], &|g, v| g.reshape(v[0], &[3, 4]).unwrap());
}

#[test]
fn permute() {
    check(&[&[2, 3, 4]], &|g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
}

#[test]
fn broadcast_to() {
    check(&[&[3]], &|g, v| g.broadcast_to(v[0], &[2, 2, 3]).unwrap());
}

#[test]
fn softmax() {
    check(&[&[3, 5]], &|g, v| g.softmax(v[0]).unwrap());
}

#[test]
fn log_softmax() {
    check(&[&[3, 5]], &|g, v| g.log_softmax(v[0]).unwrap());
}

#[test]
fn layer_norm() {
    check(&[&[2, 3, 6], &[6], &[6]], &|g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
    });
}

#[test]
fn gelu() {
    check(&[&[7]], &|g, v| g.gelu(v[0]));
}

#[test]
fn concat() {
    check(&[&[2, 1, 3], &[2, 2, 3]], &|g, v| g.concat(&[v[0], v[1]], 1).unwrap());
}

#[test]
fn slice() {
    check(&[&[2, 5, 3]], &|g, v| g.slice(v[0], 1, 1, 3).unwrap());
}

#[test]
fn mean_axis() {
    check(&[&[2, 4, 3]], &|g, v| g.mean_axis(v[0], 1).unwrap());
}

#[test]
fn global_average_pool() {
    check(&[&[3, 4, 2]], &|g, v| g.global_average_pool(v[0]).unwrap());
}

#[test]
fn sum_and_mean() {
    check(&[&[2, 3]], &|g, v| g.sum(v[0]));
    check(&[&[2, 3]], &|g, v| g.mean(v[0]).unwrap());
}

#[test]
fn pick() {
    check(&[&[3, 4]], &|g, v| g.pick(v[0], &[1, 0, 3]).unwrap());
}

#[test]
fn gather_rows_with_repeats() {
    check(&[&[5, 3]], &|g, v| g.gather_rows(v[0], &[4, 0, 4, 2], &[2, 2]).unwrap());
}

#[test]
fn l2_normalize() {
    check(&[&[3, 4]], &|g, v| g.l2_normalize(v[0]).unwrap());
}

#[test]
fn weighted_sum() {
    check(&[&[], &[]], &|g, v| g.weighted_sum(&[v[0], v[1]], &[0.25, 0.75]).unwrap());
}

#[test]
fn dropout_is_a_fixed_mask() {
    check(&[&[20]], &|g, v| g.dropout(v[0], 0.3).unwrap());
}

#[test]
fn cross_entropy_composite() {
    check(&[&[4, 3], &[3, 5]], &|g, v| {
        let logits = g.matmul(v[0], v[1]).unwrap();
        let lp = g.log_softmax(logits).unwrap();
        let picked = g.pick(lp, &[0, 4, 2, 1]).unwrap();
        let m = g.mean(picked).unwrap();
        g.scale(m, -1.0)
    });
}

#[test]
fn attention_composite() {
    check(&[&[2, 3, 4], &[4, 4]], &|g, v| {
        let q = g.matmul(v[0], v[1]).unwrap();
        let s = g.bmm(q, v[0], true).unwrap();
        let s = g.scale(s, 0.5);
        let a = g.softmax(s).unwrap();
        let o = g.bmm(a, v[0], false).unwrap();
        g.gelu(o)
    });
}
