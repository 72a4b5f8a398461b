//! Label inference against a client that keeps the last layers (and the labels).

use crate::autograd::Graph;
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::model::LayerStack;
use crate::optim::Optimizer;
use crate::tensor::Tensor;

/// Which parameter gradients enter the distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradScope {
    /// Weight and bias of the tail layer adjacent to the cut.
    #[default]
    FirstLayer,
    /// Every parameter tensor of the tail, concatenated.
    AllParams,
}

impl std::str::FromStr for GradScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first-layer" => Ok(GradScope::FirstLayer),
            "all-params" => Ok(GradScope::AllParams),
            other => Err(Error::Config(format!("unknown gradient scope '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelInferenceResult {
    pub predicted: u8,
    /// MSE between the clone's and the received parameter gradients, per candidate.
    pub distances: Vec<f32>,
    /// Second smallest distance minus the smallest.
    pub margin: f32,
    /// More than one candidate reached the minimum; `predicted` is the lowest.
    pub tied: bool,
}

/// Parameter gradients of `tail` for one example fed `input` and labelled `label`.
pub fn tail_param_grads(tail: &LayerStack, input: &Tensor, label: u8) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let x = g.leaf(input.clone(), false);
    let fwd = tail.forward(&mut g, x, true)?;
    let loss = g.nll(fwd.output, &[label])?;
    let mut grads = g.backward(loss)?;
    fwd.params
        .iter()
        .map(|&v| grads.take(v).ok_or(Error::MissingGradient(v.index())))
        .collect()
}

/// Number of leading parameter tensors that belong to the first parametrised layer.
fn first_layer_params(tail: &LayerStack) -> usize {
    tail.layers.iter().map(|l| l.params.len()).find(|&n| n > 0).unwrap_or(0)
}

fn grad_distance(a: &[Tensor], b: &[Tensor]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "received {} gradient tensors, clone has {}",
            b.len(),
            a.len()
        )));
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::shape("label_inference", x.shape(), y.shape()));
        }
        sum += x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| ((p - q) as f64).powi(2))
            .sum::<f64>();
        n += x.len();
    }
    Ok((sum / n.max(1) as f64) as f32)
}

/// Picks the label whose gradients on `clone` are closest to `received`.
///
/// `received` are the client tail's parameter gradients for a single example
/// (batch size one) and `input` is what the server fed that tail.
pub fn infer_label(
    received: &[Tensor],
    input: &Tensor,
    clone: &LayerStack,
    scope: GradScope,
) -> Result<LabelInferenceResult> {
    if input.batch() != 1 {
        return Err(Error::InvalidArgument(format!(
            "label inference needs one example per step, got a batch of {}",
            input.batch()
        )));
    }
    let keep = match scope {
        GradScope::FirstLayer => first_layer_params(clone),
        GradScope::AllParams => usize::MAX,
    };
    let received = &received[..keep.min(received.len())];
    let distances = (0..NUM_CLASSES as u8)
        .map(|c| {
            let mut g = tail_param_grads(clone, input, c)?;
            g.truncate(keep);
            grad_distance(&g, received)
        })
        .collect::<Result<Vec<f32>>>()?;
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let (best, second) = (distances[order[0]], distances[order[1]]);
    if distances.iter().all(|&d| d == best) {
        return Err(Error::DegenerateTie(distances.len()));
    }
    Ok(LabelInferenceResult {
        predicted: order[0] as u8,
        distances,
        margin: second - best,
        tied: second == best,
    })
}

/// One pass of ordinary training of the clone tail on `(input, label)` pairs,
/// one example per step. Returns the mean loss.
pub fn train_clone_with_inferred_labels(
    clone: &mut LayerStack,
    inputs: &[Tensor],
    labels: &[u8],
    opt: &mut Optimizer,
) -> Result<f32> {
    if inputs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0f64;
    for (x, &y) in inputs.iter().zip(labels) {
        total += crate::training::train_step(clone, opt, x, &[y])? as f64;
    }
    Ok((total / inputs.len().max(1) as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, SplitModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tail(seed: u64) -> LayerStack {
        let m = SplitModel::build(Arch::Tiny, seed);
        let start = m.tail_start(1).unwrap();
        m.into_parts(&[start]).unwrap().pop().unwrap()
    }

    #[test]
    fn single_layer_gradient_has_closed_form() {
        // dL/dW = (p - onehot(y)) a^T, dL/db = p - onehot(y)
        let t = tail(4);
        let a = Tensor::uniform(&[1, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let p = t.predict(&a).unwrap();
        let g = tail_param_grads(&t, &a, 3).unwrap();
        for k in 0..10 {
            let d = p.data()[k] - (k == 3) as u8 as f32;
            assert!((g[1].data()[k] - d).abs() < 1e-6);
            for j in 0..16 {
                assert!((g[0].data()[k * 16 + j] - d * a.data()[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn recovers_labels_through_a_depth_one_tail() {
        let victim = tail(1);
        let clone = tail(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for y in 0..10u8 {
            let a = Tensor::uniform(&[1, 16], 0.0, 1.0, &mut rng);
            let h = tail_param_grads(&victim, &a, y).unwrap();
            for scope in [GradScope::FirstLayer, GradScope::AllParams] {
                let r = infer_label(&h, &a, &clone, scope).unwrap();
                assert_eq!(r.predicted, y);
                assert_eq!(r.distances.len(), 10);
                assert!(r.margin > 0.0 && !r.tied);
            }
        }
    }

    #[test]
    fn scopes_agree_on_a_single_layer_tail() {
        let victim = tail(1);
        let clone = tail(2);
        let a = Tensor::uniform(&[1, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let h = tail_param_grads(&victim, &a, 6).unwrap();
        let first = infer_label(&h, &a, &clone, GradScope::FirstLayer).unwrap();
        let all = infer_label(&h, &a, &clone, GradScope::AllParams).unwrap();
        assert_eq!(first, all);
    }

    #[test]
    fn rejects_batches() {
        let t = tail(1);
        assert!(infer_label(&[], &Tensor::zeros(&[2, 16]), &t, GradScope::AllParams).is_err());
    }

    #[test]
    fn constant_gradients_tie() {
        // a clone with no parameters yields the same (empty) gradients for every label
        let empty = LayerStack::default();
        let x = Tensor::from_vec(vec![0.1; 10]).reshape(&[1, 10]).unwrap();
        assert!(matches!(infer_label(&[], &x, &empty, GradScope::AllParams), Err(Error::DegenerateTie(10))));
    }
}
