//! Data-generating processes for the Monte Carlo studies.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::design::Sample;
use crate::rng::{stream, Purpose, StreamRng};
use crate::{Error, Result};

/// Draws a `k x k` correlation matrix by the onion construction with shape
/// `eta`; `eta = 1` is uniform over all correlation matrices.
pub fn random_correlation<R: Rng + ?Sized>(k: usize, eta: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if k < 2 {
        return Err(Error::invalid(format!("random correlation needs k >= 2, got {k}")));
    }
    if !(eta > 0.0) {
        return Err(Error::invalid(format!("eta must be positive, got {eta}")));
    }
    let beta_dist = |a: f64, b: f64| Beta::new(a, b).map_err(|e| Error::invalid(e.to_string()));
    let mut shape = eta + (k as f64 - 2.0) / 2.0;
    let r12 = 2.0 * beta_dist(shape, shape)?.sample(rng) - 1.0;
    let mut r = DMatrix::from_row_slice(2, 2, &[1.0, r12, r12, 1.0]);
    for m in 2..k {
        shape -= 0.5;
        let y = beta_dist(m as f64 / 2.0, shape)?.sample(rng);
        let mut u: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v *= y.sqrt() / norm);
        let l = nalgebra::Cholesky::new(r.clone())
            .ok_or_else(|| Error::invalid("onion step produced a non-positive-definite matrix"))?
            .unpack();
        let w = &l * nalgebra::DVector::from_vec(u);
        let mut next = DMatrix::identity(m + 1, m + 1);
        next.view_mut((0, 0), (m, m)).copy_from(&r);
        for i in 0..m {
            next[(i, m)] = w[i];
            next[(m, i)] = w[i];
        }
        r = next;
    }
    Ok(r)
}

fn covariates(n: usize, k: usize, correlated: bool, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = stream(seed, &[Purpose::Covariates as u64]);
    let raw = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
    if !correlated || k < 2 {
        return Ok(raw);
    }
    let mut crng = stream(seed, &[Purpose::Correlation as u64]);
    let corr = random_correlation(k, 1.0, &mut crng)?;
    let l = nalgebra::Cholesky::new(corr)
        .ok_or_else(|| Error::invalid("random correlation matrix is not positive definite"))?
        .unpack();
    Ok(raw * l.transpose())
}

fn linear_index(z: &DMatrix<f64>) -> Vec<f64> {
    let b = 1.0 / (z.ncols() as f64).sqrt();
    z.row_iter().map(|row| row.sum() * b).collect()
}

fn normals(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `Y(0) = Y(1) + effect = Z b + u` with equal loadings `b_j = 1/sqrt(K)`.
pub fn dgp_homogeneous(n: usize, k: usize, correlated: bool, effect: f64, seed: u64) -> Result<Sample> {
    if k < 1 {
        return Err(Error::invalid("data-generating process needs k >= 1"));
    }
    let z = covariates(n, k, correlated, seed)?;
    let mut rng = stream(seed, &[Purpose::Noise as u64]);
    let u = normals(&mut rng, n);
    let y0: Vec<f64> = linear_index(&z).iter().zip(&u).map(|(m, e)| m + e).collect();
    let y1 = y0.iter().map(|v| v + effect).collect();
    Sample::new(z, y0, y1)
}

/// `Y(0) = Z b + u0`, `Y(1) = Z b + gamma + u1` with independent errors.
pub fn dgp_heterogeneous(n: usize, k: usize, gamma: f64, correlated: bool, seed: u64) -> Result<Sample> {
    if k < 1 {
        return Err(Error::invalid("data-generating process needs k >= 1"));
    }
    let z = covariates(n, k, correlated, seed)?;
    let mut rng = stream(seed, &[Purpose::Noise as u64]);
    let u0 = normals(&mut rng, n);
    let u1 = normals(&mut rng, n);
    let index = linear_index(&z);
    let y0 = index.iter().zip(&u0).map(|(m, e)| m + e).collect();
    let y1 = index.iter().zip(&u1).map(|(m, e)| m + gamma + e).collect();
    Sample::new(z, y0, y1)
}
