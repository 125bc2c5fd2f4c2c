//! Retrieval-space evaluation metrics: Fréchet distance between Gaussian
//! fits (FID), paired distances to ground-truth gestures (M-Dist) and music
//! (MM-Dist), and mean pairwise diversity.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingTag {
    Generated,
    Real,
    Music,
}

/// N unit-sphere embeddings with a provenance tag.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    pub vectors: Tensor<f64>,
    pub tag: EmbeddingTag,
}

impl EmbeddingSet {
    pub fn new(vectors: Tensor<f64>, tag: EmbeddingTag) -> Result<Self> {
        vectors.check_finite("embedding set")?;
        Ok(EmbeddingSet { vectors, tag })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

const EIG_REJECT: f64 = -1e-6;

fn mean_and_cov(x: &Tensor<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            mean[c] += x.get(r, c);
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    // unbiased (N-1) estimator
    let mut cov = DMatrix::zeros(d, d);
    for r in 0..n {
        for i in 0..d {
            let di = x.get(r, i) - mean[i];
            for j in i..d {
                cov[(i, j)] += di * (x.get(r, j) - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[(i, j)] /= denom;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    (mean, cov)
}

/// Symmetric PSD square root by eigendecomposition; tiny negative eigenvalues
/// are clamped to zero, anything below -1e-6 rejects the input.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if !v.is_finite() {
            return Err(Error::InvalidCovariance(*v));
        }
        if *v < 0.0 {
            if *v < EIG_REJECT {
                return Err(Error::InvalidCovariance(*v));
            }
            *v = 0.0;
        }
        *v = v.sqrt();
    }
    let d = DMatrix::from_diagonal(&vals);
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two embedding sets:
/// ‖μ_A-μ_B‖² + Tr(C_A + C_B - 2(C_A C_B)^{1/2}).
pub fn fid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(
            "fid needs at least 2 samples per set".into(),
        ));
    }
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("dim {}", a.dim()),
            got: format!("dim {}", b.dim()),
            context: "fid",
        });
    }
    let (mu_a, cov_a) = mean_and_cov(&a.vectors);
    let (mu_b, cov_b) = mean_and_cov(&b.vectors);
    let mean_term: f64 = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    // Tr((C_A C_B)^{1/2}) via eig of C_A^{1/2} C_B C_A^{1/2}
    let root_a = psd_sqrt(&cov_a)?;
    let inner = &root_a * &cov_b * &root_a;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut tr_sqrt = 0.0;
    for &v in eig.eigenvalues.iter() {
        if !v.is_finite() || v < EIG_REJECT {
            return Err(Error::InvalidCovariance(v));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let value = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::InvalidCovariance(value));
    }
    Ok(value)
}

fn paired_distance(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    pairing: Option<&[usize]>,
    context: &'static str,
) -> Result<f64> {
    if a.len() != b.len() || a.dim() != b.dim() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: format!("paired {}x{}", a.len(), a.dim()),
            got: format!("{}x{}", b.len(), b.dim()),
            context,
        });
    }
    if let Some(p) = pairing {
        if p.len() != a.len() || p.iter().any(|&i| i >= b.len()) {
            return Err(Error::InvalidArgument(format!(
                "{context}: pairing must map every generated index into the target set"
            )));
        }
    }
    let mut total = 0.0;
    for i in 0..a.len() {
        let j = pairing.map_or(i, |p| p[i]);
        let d2: f64 = a
            .vectors
            .row(i)
            .iter()
            .zip(b.vectors.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        total += d2.sqrt();
    }
    Ok(total / a.len() as f64)
}

/// Mean paired distance generated ↔ ground-truth gesture embeddings.
pub fn m_dist(gen: &EmbeddingSet, gt: &EmbeddingSet, pairing: Option<&[usize]>) -> Result<f64> {
    paired_distance(gen, gt, pairing, "m_dist")
}

/// Mean paired distance generated gesture ↔ corresponding music embeddings.
pub fn mm_dist(
    gen: &EmbeddingSet,
    music: &EmbeddingSet,
    pairing: Option<&[usize]>,
) -> Result<f64> {
    paired_distance(gen, music, pairing, "mm_dist")
}

/// Mean pairwise distance within a set; exact up to `cap` samples, seeded
/// subsample beyond.
pub const DIVERSITY_EXACT_CAP: usize = 2000;

pub fn diversity_with_cap(gen: &EmbeddingSet, cap: usize, seed: u64) -> Result<f64> {
    if gen.len() < 2 {
        return Err(Error::InvalidArgument("diversity needs at least 2 samples".into()));
    }
    let indices: Vec<usize> = if gen.len() > cap {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut all: Vec<usize> = (0..gen.len()).collect();
        all.shuffle(&mut rng);
        let mut picked = all[..cap].to_vec();
        picked.sort_unstable();
        picked
    } else {
        (0..gen.len()).collect()
    };
    let mut total = 0.0;
    let mut pairs = 0u64;
    for (ii, &i) in indices.iter().enumerate() {
        for &j in &indices[ii + 1..] {
            let d2: f64 = gen
                .vectors
                .row(i)
                .iter()
                .zip(gen.vectors.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            total += d2.sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

pub fn diversity(gen: &EmbeddingSet) -> Result<f64> {
    diversity_with_cap(gen, DIVERSITY_EXACT_CAP, 0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub m_dist: f64,
    pub mm_dist: f64,
    pub div: f64,
    pub n_generated: usize,
    pub n_real: usize,
    pub n_music: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricReport {
    /// Flat key-value text, one `key = value` per line, stable order.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fid = {:.10}", self.fid);
        let _ = writeln!(s, "m_dist = {:.10}", self.m_dist);
        let _ = writeln!(s, "mm_dist = {:.10}", self.mm_dist);
        let _ = writeln!(s, "div = {:.10}", self.div);
        let _ = writeln!(s, "n_generated = {}", self.n_generated);
        let _ = writeln!(s, "n_real = {}", self.n_real);
        let _ = writeln!(s, "n_music = {}", self.n_music);
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    pub fn table(&self) -> String {
        format!(
            "{:<14}{:>10}{:>10}{:>10}{:>10}\n{:<14}{:>10.4}{:>10.4}{:>10.4}{:>10.4}\n",
            "Method", "FID", "M-Dist", "MM-Dist", "Div", "generated", self.fid, self.m_dist,
            self.mm_dist, self.div
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn, randn_tensor};

    fn set(t: Tensor<f64>) -> EmbeddingSet {
        EmbeddingSet::new(t, EmbeddingTag::Generated).unwrap()
    }

    #[test]
    fn fid_self_is_zero_and_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = set(randn_tensor(&mut rng, 50, 6, 1.0));
        let b = set(randn_tensor(&mut rng, 40, 6, 1.3));
        assert!(fid(&a, &a).unwrap().abs() <= 1e-8);
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6);
        assert!(ab >= -1e-9);
    }

    #[test]
    fn fid_diagonal_gaussians_match_closed_form() {
        // dim 4, N = 30k per set: ‖μ₁-μ₂‖² + Σ(√aᵢ-√bᵢ)²
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let dim = 4;
        let n = 30_000;
        let mu1 = [0.0, 1.0, -0.5, 2.0];
        let mu2 = [1.0, 1.0, 0.5, 2.0];
        let var1 = [1.0, 0.5, 2.0, 1.5];
        let var2 = [0.5, 1.0, 1.0, 2.5];
        let sample = |rng: &mut ChaCha20Rng, mu: &[f64], var: &[f64]| {
            let mut t = Tensor::zeros(n, dim);
            for r in 0..n {
                for c in 0..dim {
                    t.set(r, c, mu[c] + var[c].sqrt() * randn(rng));
                }
            }
            set(t)
        };
        let a = sample(&mut rng, &mu1, &var1);
        let b = sample(&mut rng, &mu2, &var2);
        let expected: f64 = mu1
            .iter()
            .zip(&mu2)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            + var1
                .iter()
                .zip(&var2)
                .map(|(x, y)| (x.sqrt() - y.sqrt()) * (x.sqrt() - y.sqrt()))
                .sum::<f64>();
        let got = fid(&a, &b).unwrap();
        assert!(
            (got - expected).abs() < 0.05 * expected,
            "fid {got} vs closed form {expected}"
        );
    }

    #[test]
    fn fid_one_dimensional_shift() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let n = 100_000;
        let mut a = Tensor::zeros(n, 1);
        let mut b = Tensor::zeros(n, 1);
        for r in 0..n {
            let v = randn(&mut rng);
            a.set(r, 0, v);
            b.set(r, 0, randn(&mut rng) + 1.0);
        }
        let got = fid(&set(a), &set(b)).unwrap();
        assert!((got - 1.0).abs() < 0.05, "1-d shifted fid {got}");
    }

    #[test]
    fn fid_needs_two_samples() {
        let a = set(Tensor::zeros(1, 3));
        let b = set(Tensor::zeros(5, 3));
        assert!(fid(&a, &b).is_err());
    }

    #[test]
    fn m_dist_basics() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let a = set(randn_tensor(&mut rng, 8, 5, 1.0));
        assert!(m_dist(&a, &a, None).unwrap().abs() < 1e-12);
        // unit offset in one coordinate -> 1
        let mut shifted = a.vectors.clone();
        for r in 0..8 {
            shifted.set(r, 0, shifted.get(r, 0) + 1.0);
        }
        assert!((m_dist(&set(shifted), &a, None).unwrap() - 1.0).abs() < 1e-12);
        // offset 1 in each of D coordinates -> sqrt(D)
        let mut all = a.vectors.clone();
        for r in 0..8 {
            for c in 0..5 {
                all.set(r, c, all.get(r, c) + 1.0);
            }
        }
        assert!((m_dist(&set(all), &a, None).unwrap() - 5f64.sqrt()).abs() < 1e-12);
        // unpaired sets rejected
        let small = set(Tensor::zeros(3, 5));
        assert!(m_dist(&a, &small, None).is_err());
    }

    #[test]
    fn pairing_map_respected() {
        let a = set(Tensor::from_vec(2, 1, vec![0.0, 10.0]).unwrap());
        let b = set(Tensor::from_vec(2, 1, vec![10.0, 0.0]).unwrap());
        assert!((m_dist(&a, &b, None).unwrap() - 10.0).abs() < 1e-12);
        assert!(m_dist(&a, &b, Some(&[1, 0])).unwrap().abs() < 1e-12);
        assert!(m_dist(&a, &b, Some(&[2, 0])).is_err());
    }

    #[test]
    fn diversity_cases() {
        let same = set(Tensor::filled(4, 3, 0.7));
        assert!(diversity(&same).unwrap().abs() < 1e-12);
        let two = set(Tensor::from_vec(2, 1, vec![0.0, 3.0]).unwrap());
        assert!((diversity(&two).unwrap() - 3.0).abs() < 1e-12);
        let three = set(Tensor::from_vec(3, 1, vec![0.0, 1.0, 2.0]).unwrap());
        assert!((diversity(&three).unwrap() - 4.0 / 3.0).abs() < 1e-12);
        let one = set(Tensor::zeros(1, 2));
        assert!(diversity(&one).is_err());
    }

    #[test]
    fn subsampled_diversity_is_seed_deterministic_estimate() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = set(randn_tensor(&mut rng, 300, 4, 1.0));
        let exact = diversity(&x).unwrap();
        let a = diversity_with_cap(&x, 100, 7).unwrap();
        let b = diversity_with_cap(&x, 100, 7).unwrap();
        assert_eq!(a, b);
        assert!((a - exact).abs() < 0.15 * exact);
    }

    #[test]
    fn metrics_rotation_invariant() {
        // build a random rotation by orthonormalizing a Gaussian matrix
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let d = 5;
        let g = randn_tensor::<f64>(&mut rng, d, d, 1.0);
        let m = DMatrix::from_row_slice(d, d, g.data());
        let qr = m.qr();
        let q = qr.q();
        let rotate = |t: &Tensor<f64>| {
            let mut out = Tensor::zeros(t.rows(), d);
            for r in 0..t.rows() {
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += q[(i, j)] * t.get(r, j);
                    }
                    out.set(r, i, acc);
                }
            }
            out
        };
        let a = randn_tensor::<f64>(&mut rng, 60, d, 1.0);
        let b = randn_tensor::<f64>(&mut rng, 60, d, 1.2);
        let (ra, rb) = (rotate(&a), rotate(&b));
        let fid0 = fid(&set(a.clone()), &set(b.clone())).unwrap();
        let fid1 = fid(&set(ra.clone()), &set(rb.clone())).unwrap();
        assert!((fid0 - fid1).abs() < 1e-6, "fid {fid0} vs {fid1}");
        let m0 = m_dist(&set(a.clone()), &set(b.clone()), None).unwrap();
        let m1 = m_dist(&set(ra.clone()), &set(rb.clone()), None).unwrap();
        assert!((m0 - m1).abs() < 1e-6);
        let d0 = diversity(&set(a)).unwrap();
        let d1 = diversity(&set(ra)).unwrap();
        assert!((d0 - d1).abs() < 1e-6);
    }

    #[test]
    fn report_kv_roundtrip_is_stable() {
        let r = MetricReport {
            fid: 1.5,
            m_dist: 0.2,
            mm_dist: 1.1,
            div: 0.9,
            n_generated: 10,
            n_real: 10,
            n_music: 10,
            config_hash: "abc".into(),
            seed: 7,
        };
        assert_eq!(r.to_kv_text(), r.to_kv_text());
        assert!(r.table().contains("M-Dist"));
    }
}
