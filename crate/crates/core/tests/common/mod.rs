#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sbl_doa::{CMatrix, Complex64, Dictionary};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn random_cmatrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        c(re, im) * std::f64::consts::FRAC_1_SQRT_2
    })
}

/// Dictionary on `m` sorted random angles.
pub fn random_dictionary(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Dictionary {
    let mut angles: Vec<f64> = (0..m).map(|_| rng.random_range(-85.0..85.0)).collect();
    angles.sort_by(f64::total_cmp);
    angles.dedup();
    Dictionary::from_angles(angles, n, 0.5).unwrap()
}

/// Nonnegative vector with roughly a third of the entries exactly zero.
pub fn random_gamma(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    (0..m)
        .map(|_| {
            if rng.random_bool(1.0 / 3.0) {
                0.0
            } else {
                rng.random_range(0.05..3.0)
            }
        })
        .collect()
}

pub fn trace(m: &CMatrix) -> Complex64 {
    (0..m.nrows()).map(|i| m[(i, i)]).sum()
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}
