#![allow(dead_code)]

use framequant::frames::Frame;
use framequant::network::{Activation, Layer, Model};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vector(rng: &mut impl Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Uniform direction with norm `radius * U^(1/d)`, i.e. uniform in the ball.
pub fn vector_in_ball(rng: &mut impl Rng, d: usize, radius: f64) -> DVector<f64> {
    let v = gaussian_vector(rng, d, 1.0).normalize();
    let r: f64 = rng.random::<f64>().powf(1.0 / d as f64);
    v * (radius * r)
}

/// `n` i.i.d. uniform unit vectors in R^d, one per row.
pub fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> DMatrix<f64> {
    let mut m = gaussian_matrix(rng, n, d, 1.0);
    for mut row in m.row_iter_mut() {
        let norm = row.norm();
        row /= norm;
    }
    m
}

pub fn random_orthogonal(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
    let qr = gaussian_matrix(rng, d, d, 1.0).qr();
    let (q, r) = (qr.q(), qr.r());
    let signs = DVector::from_fn(d, |i, _| r[(i, i)].signum());
    q * DMatrix::from_diagonal(&signs)
}

/// A randomly rotated harmonic frame with shuffled rows: a FUNTF without the
/// harmonic ordering.
pub fn random_funtf(rng: &mut impl Rng, d: usize, n: usize) -> Frame {
    let h = Frame::harmonic(d, n).unwrap();
    let rotated = h.vectors() * random_orthogonal(rng, d);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut rows = rotated.select_rows(order.iter());
    for mut row in rows.row_iter_mut() {
        let norm = row.norm();
        row /= norm;
    }
    Frame::explicit(rows).unwrap()
}

/// Biasless feed-forward network with Gaussian weights scaled by `1/sqrt(in)`
/// times `gain`.
pub fn random_fnn(rng: &mut impl Rng, widths: &[usize], gain: f64, act: Activation) -> Model {
    let layers = widths
        .windows(2)
        .map(|w| Layer::affine(gaussian_matrix(rng, w[1], w[0], gain / (w[0] as f64).sqrt()), None))
        .collect();
    Model::new(layers, act).unwrap()
}

/// Biasless residual network of `blocks` width-`k` blocks.
pub fn random_resnet(rng: &mut impl Rng, k: usize, blocks: usize, gain: f64) -> Model {
    let s = gain / (k as f64).sqrt();
    let layers = (0..blocks)
        .map(|_| Layer::residual(gaussian_matrix(rng, k, k, s), gaussian_matrix(rng, k, k, s), None))
        .collect();
    Model::new(layers, Activation::Relu).unwrap()
}

pub fn inputs(rng: &mut impl Rng, count: usize, dim: usize) -> Vec<DVector<f64>> {
    (0..count).map(|_| gaussian_vector(rng, dim, 1.0)).collect()
}

/// Largest singular value from a full SVD.
pub fn svd_norm(w: &DMatrix<f64>) -> f64 {
    w.clone().svd(false, false).singular_values.max()
}
