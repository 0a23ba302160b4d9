use rand::seq::SliceRandom;
use rand::Rng;

/// One epoch of mini-batches: a fresh permutation of `0..n` cut into chunks
/// of `batch_size`; the last chunk may be shorter.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
