//! A small differentiable network engine: dense/PReLU/dropout/softmax/Gaussian
//! latent layers over a flat parameter vector, losses with analytic gradients,
//! and Adam.

mod adam;
pub mod gradcheck;
pub mod loss;
mod network;

pub use adam::{adam_step, AdamState};
pub use loss::BoundLoss;
pub use network::{softmax_rows, LayerSpec, Mode, Network, NetworkSpec};

use rand::seq::SliceRandom;

use crate::rng::Rng;

/// Shuffled mini-batches covering `0..n`; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_everything_once() {
        let b = batches(10, 4, &mut crate::rng::stream(0, 0));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
