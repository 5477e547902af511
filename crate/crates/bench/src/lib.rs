//! Shared fixtures for the benchmarks.

use pathryoshka::eval::EmbeddingSet;
use pathryoshka::image::Image;
use pathryoshka::rng::stream;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// `n` uniform-noise images of side `size`.
pub fn noise_images(n: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = stream(seed, &[]);
    (0..n)
        .map(|_| {
            let mut img = Image::new(size, size);
            img.data.iter_mut().for_each(|v| *v = rng.random());
            img
        })
        .collect()
}

/// Gaussian `[n, dim]` embeddings labeled round-robin over `classes`.
pub fn gaussian_embeddings(n: usize, dim: usize, classes: usize, seed: u64) -> EmbeddingSet {
    let mut rng = stream(seed, &[]);
    let v: Vec<f32> = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    EmbeddingSet::new(
        v,
        dim,
        Some((0..n).map(|i| i % classes).collect()),
        (0..n).map(|i| format!("e{i}")).collect(),
        "bench",
    )
    .expect("consistent fixture")
}

/// Gaussian vector of length `n`.
pub fn gaussian(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = stream(seed, &[]);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}
