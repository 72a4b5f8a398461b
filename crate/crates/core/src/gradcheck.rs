//! Central finite differences, used as an independent oracle for backward().

use crate::autograd::{Graph, Var, TV_EPS};
use crate::error::Result;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Estimates `df/dx` element by element with central differences of steps
/// `h` and `2h`, combined by Richardson extrapolation so the truncation error
/// is fourth order and `h` can stay large enough to swamp `f32` rounding.
///
/// Denominators use the perturbation actually representable in `f32`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = x.data()[k];
        let mut central = |step: f32| -> Result<f64> {
            let (up, down) = (orig + step, orig - step);
            probe.data_mut()[k] = up;
            let fp = f(&probe)?;
            probe.data_mut()[k] = down;
            let fm = f(&probe)?;
            probe.data_mut()[k] = orig;
            Ok((fp - fm) / (up as f64 - down as f64))
        };
        let (d1, d2) = (central(h)?, central(2.0 * h)?);
        out.push(((4.0 * d1 - d2) / 3.0) as f32);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Element-wise `|a - b| <= atol + rtol * |b|`. Returns the first violation.
pub fn allclose(a: &Tensor, b: &Tensor, rtol: f32, atol: f32) -> std::result::Result<(), String> {
    if a.shape() != b.shape() {
        return Err(format!("shape {:?} vs {:?}", a.shape(), b.shape()));
    }
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if (x - y).abs() > atol + rtol * y.abs() {
            return Err(format!("element {i}: {x} vs {y}"));
        }
    }
    Ok(())
}

/// Every differentiable operation the randomized suite covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckedOp {
    Conv2d,
    Linear,
    MaxPool,
    Relu,
    Sigmoid,
    Flatten,
    Softmax,
    Mse,
    Tv,
    Nll,
    SoftmaxNll,
    Add,
    Scale,
    Sum,
}

pub const CHECKED_OPS: [CheckedOp; 14] = [
    CheckedOp::Conv2d,
    CheckedOp::Linear,
    CheckedOp::MaxPool,
    CheckedOp::Relu,
    CheckedOp::Sigmoid,
    CheckedOp::Flatten,
    CheckedOp::Softmax,
    CheckedOp::Mse,
    CheckedOp::Tv,
    CheckedOp::Nll,
    CheckedOp::SoftmaxNll,
    CheckedOp::Add,
    CheckedOp::Scale,
    CheckedOp::Sum,
];

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    build: Build,
    /// Difference step; piecewise-linear and bilinear ops tolerate large ones.
    h: f32,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Values at least `gap` apart, so no 2x2 window has a near tie.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| i as f32 * gap - 1.0).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("sized above")
}

fn make_case(op: CheckedOp, rng: &mut ChaCha8Rng) -> Case {
    let n = rng.gen_range(1..=3);
    let m = rng.gen_range(1..=10);
    let unary = |inputs: Vec<Tensor>, h: f32, f: fn(&mut Graph, Var) -> Result<Var>| Case {
        inputs,
        build: Box::new(move |g, v| f(g, v[0])),
        h,
    };
    match op {
        CheckedOp::Conv2d => {
            let (c, o) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let k = *[1usize, 3].choose(rng).expect("non-empty");
            let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
            Case {
                inputs: vec![
                    uniform(rng, &[n, c, h, w], -1.0, 1.0),
                    uniform(rng, &[o, c, k, k], -1.0, 1.0),
                    uniform(rng, &[o], -1.0, 1.0),
                ],
                build: Box::new(|g, v| g.conv2d(v[0], v[1], v[2])),
                h: 0.1,
            }
        }
        CheckedOp::Linear => {
            let (i, o) = (rng.gen_range(1..=12), rng.gen_range(1..=8));
            Case {
                inputs: vec![
                    uniform(rng, &[n, i], -1.0, 1.0),
                    uniform(rng, &[o, i], -1.0, 1.0),
                    uniform(rng, &[o], -1.0, 1.0),
                ],
                build: Box::new(|g, v| g.linear(v[0], v[1], v[2])),
                h: 0.1,
            }
        }
        CheckedOp::MaxPool => {
            let shape = [n, rng.gen_range(1..=3), rng.gen_range(2..=7), rng.gen_range(2..=7)];
            unary(vec![spaced(rng, &shape, 0.2)], 0.05, |g, x| g.max_pool2x2(x))
        }
        CheckedOp::Relu => {
            let mut x = uniform(rng, &[n, m], 0.25, 1.0);
            for v in x.data_mut() {
                if rng.gen_bool(0.5) {
                    *v = -*v;
                }
            }
            unary(vec![x], 0.05, |g, x| g.relu(x))
        }
        CheckedOp::Sigmoid => unary(vec![uniform(rng, &[n, m], -4.0, 4.0)], 1e-2, |g, x| {
            g.sigmoid(x)
        }),
        CheckedOp::Flatten => {
            let shape = [n, rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)];
            unary(vec![uniform(rng, &shape, -1.0, 1.0)], 0.1, |g, x| g.flatten(x))
        }
        CheckedOp::Softmax => unary(vec![uniform(rng, &[n, m.max(2)], -3.0, 3.0)], 1e-2, |g, x| {
            g.softmax(x)
        }),
        CheckedOp::Mse => {
            let shape = [n, rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)];
            Case {
                inputs: vec![uniform(rng, &shape, 0.0, 1.0), uniform(rng, &shape, 0.0, 1.0)],
                build: Box::new(|g, v| g.mse(v[0], v[1])),
                h: 0.1,
            }
        }
        CheckedOp::Tv => {
            // a ramp plus noise keeps every pixel away from the zero-gradient kink;
            // few pixels keep the f32 sum precise enough for the difference quotient
            let (n, c, h, w) = (1, 1, rng.gen_range(2..=4), rng.gen_range(2..=4));
            let (a, b) = (rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5));
            let mut x = uniform(rng, &[n, c, h, w], 0.0, 0.1);
            for (k, v) in x.data_mut().iter_mut().enumerate() {
                let (i, j) = ((k / w) % h, k % w);
                *v += a * i as f32 + b * j as f32;
            }
            unary(vec![x], 2e-2, |g, x| g.tv(x, TV_EPS))
        }
        CheckedOp::Nll | CheckedOp::SoftmaxNll => {
            let k = rng.gen_range(2..=10);
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
            if op == CheckedOp::Nll {
                Case {
                    inputs: vec![uniform(rng, &[n, k], 0.3, 1.0)],
                    build: Box::new(move |g, v| g.nll(v[0], &labels)),
                    h: 1e-2,
                }
            } else {
                Case {
                    inputs: vec![uniform(rng, &[n, k], -3.0, 3.0)],
                    build: Box::new(move |g, v| {
                        let p = g.softmax(v[0])?;
                        g.nll(p, &labels)
                    }),
                    h: 1e-2,
                }
            }
        }
        CheckedOp::Add => {
            let shape = [n, rng.gen_range(1..=8)];
            Case {
                inputs: vec![uniform(rng, &shape, -1.0, 1.0), uniform(rng, &shape, -1.0, 1.0)],
                build: Box::new(|g, v| g.add(v[0], v[1])),
                h: 0.1,
            }
        }
        CheckedOp::Scale => {
            let k = rng.gen_range(-3.0..3.0);
            Case {
                inputs: vec![uniform(rng, &[n, m], -1.0, 1.0)],
                build: Box::new(move |g, v| g.scale(v[0], k)),
                h: 0.1,
            }
        }
        CheckedOp::Sum => unary(vec![uniform(rng, &[n, m], -1.0, 1.0)], 0.1, |g, x| g.sum(x)),
    }
}

/// Builds a random instance of `op` from `seed` and compares backward()
/// against central differences for every input, under the scalar objective
/// `sum(output * r)` with fixed random `r`.
pub fn check_op(op: CheckedOp, seed: u64, rtol: f32, atol: f32) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = make_case(op, &mut rng);
    let fail = |e: crate::Error| format!("{op:?}: {e}");

    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut g, &vars).map_err(fail)?;
    let r = uniform(&mut rng, g.shape(out), -1.0, 1.0);
    let mut grads = g.backward_with(out, r.clone()).map_err(fail)?;

    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.take(v).ok_or_else(|| format!("{op:?}: no gradient for input {k}"))?;
        let objective = |probe: &Tensor| -> Result<f64> {
            let mut g = Graph::new();
            let vs: Vec<Var> = case
                .inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g.leaf(if j == k { probe.clone() } else { t.clone() }, false))
                .collect();
            let out = (case.build)(&mut g, &vs)?;
            let total: f64 = g.value(out).data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
            Ok(total)
        };
        let numeric = finite_diff_grad(objective, &case.inputs[k], case.h).map_err(fail)?;
        allclose(&analytic, &numeric, rtol, atol).map_err(|e| format!("{op:?} seed {seed} input {k}: {e}"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_vec(vec![0.3, -2.0, 5.0]);
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|&v| v as f64).sum()), &x, 1e-2).unwrap();
        allclose(&g, &Tensor::full(&[3], 1.0), 1e-3, 1e-4).unwrap();
    }

    #[test]
    fn mse_against_zero() {
        let x = Tensor::from_vec(vec![3.0]);
        let g = finite_diff_grad(
            |t| {
                let mut gr = Graph::new();
                let a = gr.leaf(t.clone(), false);
                let z = gr.leaf(Tensor::zeros(&[1]), false);
                let l = gr.mse(a, z)?;
                Ok(gr.value(l).item() as f64)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!((g.item() - 6.0).abs() < 1e-2);
    }

    #[test]
    fn every_op_passes_a_few_seeds() {
        for op in CHECKED_OPS {
            for seed in 0..5 {
                check_op(op, seed, 1e-3, 1e-4).unwrap();
            }
        }
    }
}
