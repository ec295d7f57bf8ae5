//! Central finite-difference checks of every differentiable primitive.

use std::sync::Arc;

use bcos_diffusion::tape::ElementwiseAffine;
use bcos_diffusion::{ConvGeometry, NodeId, Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const TRIALS: u64 = 4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..lo + 1.0))
}

/// Loss `Σ f(inputs) ⊙ r` for a fixed random `r`; returns the loss and analytic gradients.
fn loss_and_grads<F>(f: &F, inputs: &[Tensor], r: Option<&Tensor>) -> (f64, Vec<Tensor>, Tensor)
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &ids).unwrap();
    let weights = match r {
        Some(r) => r.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            rand_tensor(&mut rng, tape.shape(out))
        }
    };
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    let mut g = tape.backward(loss).unwrap();
    let grads = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    (tape.value(loss).item(), grads, weights)
}

fn check<F>(name: &str, f: F, inputs: Vec<Tensor>)
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let (_, analytic, r) = loss_and_grads(&f, &inputs, None);
    for (k, input) in inputs.iter().enumerate() {
        let mut fd = Tensor::zeros(input.shape());
        for i in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let lp = loss_and_grads(&f, &plus, Some(&r)).0;
            let lm = loss_and_grads(&f, &minus, Some(&r)).0;
            fd.data_mut()[i] = (lp - lm) / (2.0 * H);
        }
        let err = analytic[k].sub(&fd).unwrap().norm();
        let scale = fd.norm().max(analytic[k].norm()).max(1e-12);
        assert!(
            err / scale < TOL,
            "{name}: input {k} {:?}: relative error {:.3e}",
            input.shape(),
            err / scale
        );
    }
}

fn for_trials(mut body: impl FnMut(&mut ChaCha8Rng)) {
    for seed in 0..TRIALS {
        body(&mut ChaCha8Rng::seed_from_u64(seed));
    }
}

fn dims(rng: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

#[test]
fn elementwise() {
    for_trials(|rng| {
        let s = dims(rng, 2, 1, 4);
        let (a, b) = (rand_tensor(rng, &s), rand_tensor(rng, &s));
        check("add", |t, x| t.add(x[0], x[1]), vec![a.clone(), b.clone()]);
        check("sub", |t, x| t.sub(x[0], x[1]), vec![a.clone(), b.clone()]);
        check("mul", |t, x| t.mul(x[0], x[1]), vec![a.clone(), b.clone()]);
        check("div", |t, x| t.div(x[0], x[1]), vec![a.clone(), positive(rng, &s, 0.5)]);
        check("scale", |t, x| t.scale(x[0], -1.7), vec![a.clone()]);
        check("add_scalar", |t, x| t.add_scalar(x[0], 0.3), vec![a.clone()]);
        check("square", |t, x| t.square(x[0]), vec![a]);
    });
}

#[test]
fn linear_algebra_and_layout() {
    for_trials(|rng| {
        let d = dims(rng, 4, 1, 4);
        let (m, k, n, b) = (d[0], d[1], d[2], d[3]);
        check("matmul", |t, x| t.matmul(x[0], x[1]), vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])]);
        check(
            "batched matmul",
            |t, x| t.matmul(x[0], x[1]),
            vec![rand_tensor(rng, &[b, m, k]), rand_tensor(rng, &[b, k, n])],
        );
        check("transpose", |t, x| t.transpose(x[0]), vec![rand_tensor(rng, &[m, k])]);
        check("permute", |t, x| t.permute(x[0], &[2, 0, 1]), vec![rand_tensor(rng, &[m, k, n])]);
        check("reshape", |t, x| t.reshape(x[0], &[k * m, 1]), vec![rand_tensor(rng, &[m, k])]);
        check("expand", |t, x| t.expand(x[0], &[b, m, k]), vec![rand_tensor(rng, &[1, m, 1])]);
        check("sum_all", |t, x| t.sum_all(x[0]), vec![rand_tensor(rng, &[m, k])]);
        check(
            "concat",
            |t, x| t.concat(&[x[0], x[1]], 1),
            vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[m, n])],
        );
    });
}

#[test]
fn convolution_and_patch_norm() {
    for_trials(|rng| {
        let d = dims(rng, 4, 1, 3);
        let (n, c, co, kk) = (d[0], d[1], d[2], [1, 3][rng.gen_range(0..2)]);
        let stride = rng.gen_range(1..=2);
        let pad = if kk == 3 { rng.gen_range(0..=1) } else { 0 };
        let geo = ConvGeometry::new(stride, pad);
        let hw = rng.gen_range(3..=5);
        let x = rand_tensor(rng, &[n, c, hw, hw]);
        check("conv2d", move |t, v| t.conv2d(v[0], v[1], geo), vec![x.clone(), rand_tensor(rng, &[co, c, kk, kk])]);
        check("patch_norm", move |t, v| t.patch_norm(v[0], kk, kk, geo), vec![x]);
        check("upsample", |t, v| t.upsample_nearest2(v[0]), vec![rand_tensor(rng, &[n, c, 2, 3])]);
    });
}

#[test]
fn normalizations() {
    for_trials(|rng| {
        let d = dims(rng, 2, 2, 5);
        check("normalize_rows", |t, x| t.normalize_rows(x[0]), vec![rand_tensor(rng, &d)]);
        check("row_norm", |t, x| t.row_norm(x[0]), vec![rand_tensor(rng, &d)]);
        check("rms_scale", |t, x| t.rms_scale(x[0], 1e-6), vec![rand_tensor(rng, &[d[0], d[1], 2])]);
    });
}

#[test]
fn cos_power() {
    for_trials(|rng| {
        let d = dims(rng, 2, 1, 4);
        // Keep |lin| away from the kink at zero and below the norm.
        let lin = Tensor::from_fn(&[d[0], d[1]], |_| {
            let v: f64 = rng.gen_range(0.2..0.9);
            if rng.gen_bool(0.5) { v } else { -v }
        });
        let norm = positive(rng, &[d[0], 1], 1.0);
        for b in [2.0, 1.5, 3.0] {
            check("cos_power", move |t, x| t.cos_power(x[0], x[1], b, 1), vec![lin.clone(), norm.clone()]);
        }
        let lin3 = Tensor::from_fn(&[2, d[1], 3], |i| 0.3 + 0.05 * i as f64);
        check(
            "cos_power axis",
            |t, x| t.cos_power(x[0], x[1], 2.0, 1),
            vec![lin3, positive(rng, &[2, 1, 3], 2.0)],
        );
    });
}

#[test]
fn attention_pieces() {
    for_trials(|rng| {
        let (groups, rows, m) = (2, rng.gen_range(1..=3), rng.gen_range(2..=4));
        let keep: Arc<[bool]> = (0..groups * m).map(|i| i % m != 1).collect();
        check(
            "masked_softmax",
            move |t, x| t.masked_softmax(x[0], keep.clone(), rows),
            vec![rand_tensor(rng, &[groups * rows, m])],
        );
        let ids: Arc<[usize]> = vec![2, 0, 2, 1].into();
        check("gather_rows", move |t, x| t.gather_rows(x[0], ids.clone()), vec![rand_tensor(rng, &[3, m])]);
        let keep: Arc<[bool]> = vec![true, false, true].into();
        check("zero_rows", move |t, x| t.zero_rows(x[0], keep.clone()), vec![rand_tensor(rng, &[3, m])]);
    });
}

#[derive(Debug)]
struct Mix;

impl ElementwiseAffine for Mix {
    fn eval(&self, x: f64, y: f64) -> f64 {
        0.7 * x - 1.3 * y + 0.25
    }
    fn partials(&self) -> (f64, f64) {
        (0.7, -1.3)
    }
}

#[test]
fn affine2() {
    for_trials(|rng| {
        let s = dims(rng, 2, 1, 4);
        check(
            "affine2",
            |t, x| t.affine2(x[0], x[1], Arc::new(Mix)),
            vec![rand_tensor(rng, &s), rand_tensor(rng, &s)],
        );
    });
}

#[test]
fn frozen_nodes_block_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
    let sq = tape.square(x).unwrap();
    let f = tape.freeze(sq);
    let y = tape.mul(f, x).unwrap();
    let l = tape.sum_all(y).unwrap();
    let g = tape.backward(l).unwrap();
    // Only the direct path through `x` contributes: d/dx (c·x) = c.
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 4.0]);
}

#[derive(Debug)]
struct WrongPartials;

impl ElementwiseAffine for WrongPartials {
    fn eval(&self, x: f64, y: f64) -> f64 {
        2.0 * x + y
    }
    fn partials(&self) -> (f64, f64) {
        (2.0, 1.0 + 1e-4)
    }
}

#[test]
#[should_panic(expected = "relative error")]
fn checker_catches_wrong_derivative() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check(
        "wrong",
        |t, x| t.affine2(x[0], x[1], Arc::new(WrongPartials)),
        vec![rand_tensor(&mut rng, &[3]), rand_tensor(&mut rng, &[3])],
    );
}
