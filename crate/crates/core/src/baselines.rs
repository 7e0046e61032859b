//! Training-free baselines (Direct, Calibrate-before-use) and the PCA
//! used ahead of the logistic probe on the last few hidden states.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Average answer distribution over the content-free prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationVector {
    pub p_norm: Vec<f64>,
    /// Which dummy prompts were averaged (e.g. `[NA]`, `[MASK]`, empty).
    pub sources: Vec<String>,
}

impl CalibrationVector {
    pub fn from_probabilities(p_norm: Vec<f64>, sources: Vec<String>) -> Self {
        Self { p_norm, sources }
    }

    /// Averages the answer distributions obtained from each dummy prompt.
    pub fn from_dummy_prompts(distributions: &[Vec<f64>], sources: Vec<String>) -> Result<Self> {
        let first = distributions
            .first()
            .ok_or_else(|| Error::Input("no dummy-prompt distributions".into()))?;
        let c = first.len();
        let mut p_norm = vec![0.0; c];
        for dist in distributions {
            if dist.len() != c {
                return Err(Error::dim("calibration", &[c], &[dist.len()]));
            }
            for (acc, p) in p_norm.iter_mut().zip(dist) {
                *acc += p / distributions.len() as f64;
            }
        }
        let cal = Self { p_norm, sources };
        cal.check(c)?;
        Ok(cal)
    }

    pub fn check(&self, classes: usize) -> Result<()> {
        if self.p_norm.len() != classes {
            return Err(Error::dim("calibration", &[classes], &[self.p_norm.len()]));
        }
        if let Some((index, &value)) = self.p_norm.iter().enumerate().find(|(_, p)| !(**p > 0.0)) {
            return Err(Error::DegenerateCalibration { index, value });
        }
        let total: f64 = self.p_norm.iter().sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::Input(format!("calibration vector sums to {total}")));
        }
        Ok(())
    }
}

/// Softmax of the raw label logits.
pub fn direct_predict(logits: &Tensor) -> Tensor {
    let p = kernels::softmax(&logits.to_f64(), logits.len().max(1));
    Tensor::from_f64(logits.shape().to_vec(), &p)
}

/// `softmax(p / p_norm)`.
pub fn calibrate_before_use(p: &[f64], cal: &CalibrationVector) -> Result<Vec<f64>> {
    if p.len() != cal.p_norm.len() {
        return Err(Error::dim("calibrate_before_use", &[p.len()], &[cal.p_norm.len()]));
    }
    if let Some((index, &value)) = cal.p_norm.iter().enumerate().find(|(_, v)| !(**v > 1e-9)) {
        return Err(Error::DegenerateCalibration { index, value });
    }
    let ratio: Vec<f64> = p.iter().zip(&cal.p_norm).map(|(a, b)| a / b).collect();
    Ok(kernels::softmax(&ratio, ratio.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    /// `[D]`.
    pub mean: Tensor,
    /// `[k, D]`, orthonormal rows.
    pub components: Tensor,
    /// `[k]`, nonincreasing.
    pub explained_variance: Tensor,
}

impl PcaBasis {
    pub fn k(&self) -> usize {
        self.components.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// `components * (x - mean)`.
    pub fn project(&self, x: &[f32]) -> Result<Tensor> {
        let d = self.input_dim();
        if x.len() != d {
            return Err(Error::dim("pca_project", &[x.len()], &[d]));
        }
        let centered: Vec<f64> = x
            .iter()
            .zip(self.mean.data())
            .map(|(&a, &m)| f64::from(a) - f64::from(m))
            .collect();
        let coords: Vec<f64> = (0..self.k())
            .map(|i| {
                self.components
                    .row(i)
                    .iter()
                    .zip(&centered)
                    .map(|(&c, v)| f64::from(c) * v)
                    .sum()
            })
            .collect();
        Ok(Tensor::from_f64(vec![self.k()], &coords))
    }

    /// `mean + components^T * coords`.
    pub fn reconstruct(&self, coords: &[f32]) -> Result<Vec<f64>> {
        if coords.len() != self.k() {
            return Err(Error::dim("pca_reconstruct", &[coords.len()], &[self.k()]));
        }
        let mut out: Vec<f64> = self.mean.data().iter().map(|&m| f64::from(m)).collect();
        for (i, &z) in coords.iter().enumerate() {
            for (o, &c) in out.iter_mut().zip(self.components.row(i)) {
                *o += f64::from(z) * f64::from(c);
            }
        }
        Ok(out)
    }
}

pub fn pca_project(basis: &PcaBasis, x: &Tensor) -> Result<Tensor> {
    basis.project(x.data())
}

/// Top-`k` principal components of the rows of `states` (`[N, D]`).
///
/// Uses the `N x N` Gram matrix when `N < D` and the `D x D` scatter
/// matrix otherwise. Components whose variance is numerically zero are
/// completed to an orthonormal set. Each component is signed so that its
/// largest-magnitude entry is positive.
pub fn fit_pca(states: &Tensor, k: usize) -> Result<PcaBasis> {
    let (n, d) = match states.shape() {
        [n, d] => (*n, *d),
        other => return Err(Error::dim("fit_pca", other, &[])),
    };
    if n < 2 {
        return Err(Error::Input(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::Input(format!("PCA k = {k} must lie in 1..={}", n.min(d))));
    }
    let mut mean = vec![0.0f64; d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(states.row(r)) {
            *m += f64::from(v);
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, d, |r, c| f64::from(states.row(r)[c]) - mean[c]);

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigenvalues: Vec<f64> = Vec::with_capacity(k);
    if n < d {
        let gram = &centered * centered.transpose();
        let eig = SymmetricEigen::new(gram);
        let order = descending(eig.eigenvalues.as_slice());
        let top = eig.eigenvalues[order[0]].max(0.0);
        for &i in order.iter().take(k) {
            let lambda = eig.eigenvalues[i].max(0.0);
            eigenvalues.push(lambda);
            if lambda <= top * 1e-12 || lambda == 0.0 {
                continue;
            }
            let u = eig.eigenvectors.column(i);
            let v = centered.transpose() * u;
            let norm = v.norm();
            components.push(v.iter().map(|x| x / norm).collect());
        }
    } else {
        let scatter = centered.transpose() * &centered;
        let eig = SymmetricEigen::new(scatter);
        let order = descending(eig.eigenvalues.as_slice());
        for &i in order.iter().take(k) {
            eigenvalues.push(eig.eigenvalues[i].max(0.0));
            components.push(eig.eigenvectors.column(i).iter().copied().collect());
        }
    }
    complete_basis(&mut components, k, d);
    for c in &mut components {
        fix_sign(c);
    }

    let flat: Vec<f64> = components.into_iter().flatten().collect();
    let variances: Vec<f64> = eigenvalues.iter().map(|l| l / (n - 1) as f64).collect();
    Ok(PcaBasis {
        mean: Tensor::from_f64(vec![d], &mean),
        components: Tensor::from_f64(vec![k, d], &flat),
        explained_variance: Tensor::from_f64(vec![k], &variances),
    })
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Extends `basis` to `k` orthonormal vectors with Gram-Schmidt over the
/// standard basis.
fn complete_basis(basis: &mut Vec<Vec<f64>>, k: usize, d: usize) {
    let mut axis = 0;
    while basis.len() < k && axis < d {
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        axis += 1;
        for _ in 0..2 {
            for b in basis.iter() {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;

    #[test]
    fn calibrate_flips_argmax() {
        let cal = CalibrationVector::from_probabilities(vec![0.9, 0.1], vec![]);
        let out = calibrate_before_use(&[0.5, 0.5], &cal).unwrap();
        assert!(out[1] > out[0]);
    }

    #[test]
    fn degenerate_calibration_is_rejected() {
        let cal = CalibrationVector::from_probabilities(vec![1.0, 0.0], vec![]);
        let err = calibrate_before_use(&[0.5, 0.5], &cal).unwrap_err();
        assert!(matches!(err, Error::DegenerateCalibration { index: 1, .. }));
    }

    #[test]
    fn dummy_prompt_average_sums_to_one() {
        let cal = CalibrationVector::from_dummy_prompts(
            &[vec![0.7, 0.2, 0.1], vec![0.2, 0.5, 0.3], vec![0.1, 0.1, 0.8]],
            vec!["[NA]".into(), "[MASK]".into(), String::new()],
        )
        .unwrap();
        assert!((cal.p_norm.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((cal.p_norm[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn direct_is_softmax() {
        let p = direct_predict(&Tensor::zeros(vec![4]));
        assert_eq!(p.data(), &[0.25; 4]);
    }

    #[test]
    fn pca_on_a_line() {
        let pts: Vec<f32> = (0..10).flat_map(|i| [i as f32, 2.0 * i as f32]).collect();
        let basis = fit_pca(&Tensor::matrix(10, 2, pts).unwrap(), 1).unwrap();
        let c = basis.components.row(0);
        let s = 5f32.sqrt();
        assert!((c[0] - 1.0 / s).abs() < 1e-5 && (c[1] - 2.0 / s).abs() < 1e-5, "{c:?}");
        // total variance of the points
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let mx = 4.5;
        let var_x: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / 9.0;
        let total = var_x * 5.0;
        let got = f64::from(basis.explained_variance.data()[0]);
        assert!((got - total).abs() / total < 1e-5);
    }

    #[test]
    fn gram_route_completes_rank_deficient_basis() {
        // 3 points in 6-D, so the centered data has rank 2 and k = 3 needs completion.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<f32> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let basis = fit_pca(&Tensor::matrix(3, 6, pts).unwrap(), 3).unwrap();
        assert_orthonormal(&basis);
        assert!(basis.explained_variance.data()[2].abs() < 1e-6);
    }

    #[test]
    fn isotropic_variances_are_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<f32> = (0..10000 * 4)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        let basis = fit_pca(&Tensor::matrix(10000, 4, pts).unwrap(), 2).unwrap();
        let v = basis.explained_variance.data();
        assert!((v[0] - v[1]).abs() / v[1] < 0.1, "{v:?}");
    }

    #[test]
    fn project_mean_and_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<f32> = (0..40 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let basis = fit_pca(&Tensor::matrix(40, 5, pts).unwrap(), 3).unwrap();
        let z = basis.project(basis.mean.data()).unwrap();
        assert!(z.data().iter().all(|v| v.abs() < 1e-6));
        let x: Vec<f32> = basis
            .components
            .row(1)
            .iter()
            .zip(basis.mean.data())
            .map(|(c, m)| c + m)
            .collect();
        let z = basis.project(&x).unwrap();
        assert!((z.data()[1] - 1.0).abs() < 1e-5 && z.data()[0].abs() < 1e-5);
        assert!(basis.project(&[0.0; 4]).is_err());
        assert!(fit_pca(&Tensor::zeros(vec![3, 2]), 3).is_err());
    }

    pub(crate) fn assert_orthonormal(basis: &PcaBasis) {
        let k = basis.k();
        for i in 0..k {
            for j in 0..k {
                let dot: f64 = basis
                    .components
                    .row(i)
                    .iter()
                    .zip(basis.components.row(j))
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-4, "C C^T[{i},{j}] = {dot}");
            }
        }
    }
}
