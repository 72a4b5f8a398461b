//! Monolithic (unsplit) training, the reference the split protocol must match.

use crate::autograd::Graph;
use crate::data::Dataset;
use crate::error::Result;
use crate::model::LayerStack;
use crate::optim::Optimizer;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mini-batch index lists for one epoch; shuffled deterministically from
/// `(seed, epoch)`. The last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// One forward/backward/update of a whole network with softmax cross-entropy.
pub fn train_step(net: &mut LayerStack, opt: &mut Optimizer, x: &Tensor, labels: &[u8]) -> Result<f32> {
    let mut g = Graph::new();
    let input = g.leaf(x.clone(), false);
    let fwd = net.forward(&mut g, input, true)?;
    let loss = g.nll(fwd.output, labels)?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    net.store_grads(&mut grads, &fwd)?;
    opt.step(&mut net.params_mut())?;
    Ok(value)
}

/// Trains for `epochs` and returns the mean loss of each epoch.
pub fn train_epochs(
    net: &mut LayerStack,
    opt: &mut Optimizer,
    ds: &Dataset,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let batches = epoch_batches(ds.len(), batch_size, seed, epoch as u64);
        let mut total = 0.0f64;
        for idx in &batches {
            let (x, y) = ds.batch(idx);
            total += train_step(net, opt, &x, &y)? as f64;
        }
        curve.push((total / batches.len().max(1) as f64) as f32);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_everything_once() {
        let b = epoch_batches(10, 3, 1, 0);
        assert_eq!(b.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, 3, 1, 0));
        assert_ne!(b, epoch_batches(10, 3, 1, 1));
    }
}
