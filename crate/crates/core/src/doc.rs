//! Degree of Conflict: how crowded the class fingerprints are.
//!
//! For unit fingerprints `f_1 … f_C` the degree of conflict is the sum of
//! pairwise cosine similarities. Because `|Σ f_i|² = C + 2·DoC ≥ 0`, the
//! lowest reachable value is `−C/2`, attained exactly when the fingerprints
//! sum to the zero vector.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::zerobias::unit_normalize_rows;

/// Symmetric pairwise cosine similarities of fingerprints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub size: usize,
    /// Row-major `size × size` entries.
    pub entries: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }

    /// Sum of the strict upper triangle.
    pub fn upper_sum(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.size {
            for j in i + 1..self.size {
                s += self.get(i, j);
            }
        }
        s
    }

    /// Largest |entry| over the block `rows × cols`.
    pub fn block_max_abs(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
        let mut m = 0.0f64;
        for i in rows {
            for j in cols.clone() {
                m = m.max(self.get(i, j).abs());
            }
        }
        m
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        for i in 0..self.size {
            let line: Vec<String> = (0..self.size).map(|j| format!("{}", self.get(i, j))).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)
    }
}

/// `S(i, j) = unit(f_i) · unit(f_j)`, with an exact unit diagonal.
pub fn similarity_matrix<T: Scalar>(fingerprints: &Tensor<T>) -> Result<SimilarityMatrix> {
    let u = unit_normalize_rows(fingerprints)?;
    let c = u.rows();
    let mut entries = vec![0.0; c * c];
    for i in 0..c {
        entries[i * c + i] = 1.0;
        for j in i + 1..c {
            let d: T = u.row(i).iter().zip(u.row(j)).map(|(&a, &b)| a * b).sum();
            let d = d.to_f64_lossy().clamp(-1.0, 1.0);
            entries[i * c + j] = d;
            entries[j * c + i] = d;
        }
    }
    Ok(SimilarityMatrix { size: c, entries })
}

/// Sum of pairwise cosine similarities of the fingerprint rows.
pub fn degree_of_conflict<T: Scalar>(fingerprints: &Tensor<T>) -> Result<f64> {
    if fingerprints.dims2()?.0 < 2 {
        return Err(invalid("degree of conflict needs at least two fingerprints"));
    }
    Ok(similarity_matrix(fingerprints)?.upper_sum())
}

/// The minimum reachable degree of conflict, `−C/2`.
pub fn optimal_doc(classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(invalid(format!("need at least two classes, got {classes}")));
    }
    Ok(-(classes as f64) / 2.0)
}

/// Mean pairwise similarity at the optimum, `−1/(C−1)`.
pub fn mean_pairwise_similarity(classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(invalid(format!("need at least two classes, got {classes}")));
    }
    Ok(-1.0 / (classes as f64 - 1.0))
}

/// Mean of the strict upper triangle of the similarity matrix.
pub fn observed_mean_similarity<T: Scalar>(fingerprints: &Tensor<T>) -> Result<f64> {
    let c = fingerprints.dims2()?.0;
    let pairs = (c * (c - 1) / 2) as f64;
    Ok(degree_of_conflict(fingerprints)? / pairs)
}

/// `C` unit vectors in `C` dimensions that sum to zero: the centred
/// standard basis, rescaled. Each pair has cosine `−1/(C−1)`.
pub fn simplex_fingerprints(classes: usize) -> Result<Tensor<f64>> {
    if classes < 2 {
        return Err(invalid("simplex needs at least two vertices"));
    }
    let c = classes as f64;
    let mut t = Tensor::from_fn(&[classes, classes], |k| {
        if k / classes == k % classes {
            1.0 - 1.0 / c
        } else {
            -1.0 / c
        }
    });
    let norm = ((c - 1.0) / c).sqrt();
    for v in t.data_mut() {
        *v /= norm;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthonormal_gives_identity() {
        let s = similarity_matrix(&Tensor::<f64>::identity(4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(s.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn collinear_pair() {
        let f = Tensor::from_rows(&[vec![1.0, 2.0, -1.0], vec![2.0, 4.0, -2.0]]).unwrap();
        assert!((similarity_matrix(&f).unwrap().get(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor::from_fn(&[6, 12], |_| rng.gen_range(-1.0..1.0));
        let s = similarity_matrix(&f).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let (a, b) = (f.row(i), f.row(j));
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((s.get(i, j) - dot / (na * nb)).abs() < 1e-12);
                assert_eq!(s.get(i, j), s.get(j, i));
            }
        }
    }

    #[test]
    fn doc_extremes() {
        let anti = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(degree_of_conflict(&anti).unwrap(), -1.0);
        let same = Tensor::from_rows(&[vec![0.3, 0.4], vec![0.3, 0.4], vec![0.3, 0.4]]).unwrap();
        assert!((degree_of_conflict(&same).unwrap() - 3.0).abs() < 1e-12);
        assert!(degree_of_conflict(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).is_err());
        let zero = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(degree_of_conflict(&zero).is_err());
    }

    #[test]
    fn closed_forms() {
        assert_eq!(optimal_doc(10).unwrap(), -5.0);
        assert_eq!(optimal_doc(18).unwrap(), -9.0);
        assert_eq!(optimal_doc(2).unwrap(), -1.0);
        assert!(optimal_doc(1).is_err());
        assert_eq!(mean_pairwise_similarity(2).unwrap(), -1.0);
        assert_eq!(mean_pairwise_similarity(18).unwrap(), -1.0 / 17.0);
        assert!(mean_pairwise_similarity(100_000).unwrap().abs() < 1e-4);
        assert!(mean_pairwise_similarity(0).is_err());
        for c in 2..40 {
            let pairs = (c * (c - 1) / 2) as f64;
            let via_doc = optimal_doc(c).unwrap() / pairs;
            assert!((via_doc - mean_pairwise_similarity(c).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn simplex_attains_optimum() {
        for c in [2, 3, 10, 34] {
            let f = simplex_fingerprints(c).unwrap();
            assert!((degree_of_conflict(&f).unwrap() - optimal_doc(c).unwrap()).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn doc_bounds_and_scale_invariance(
            rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 5), 2..8),
            scale in 0.01f64..100.0,
            pick in 0usize..8,
        ) {
            let c = rows.len();
            prop_assume!(rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
            let f = Tensor::from_rows(&rows).unwrap();
            let d = degree_of_conflict(&f).unwrap();
            prop_assert!(d >= -(c as f64) / 2.0 - 1e-9);
            prop_assert!(d <= (c * (c - 1)) as f64 / 2.0 + 1e-9);
            let s = similarity_matrix(&f).unwrap();
            prop_assert!((s.upper_sum() - d).abs() < 1e-12);
            let mut scaled = rows.clone();
            for v in &mut scaled[pick % c] { *v *= scale; }
            let d2 = degree_of_conflict(&Tensor::from_rows(&scaled).unwrap()).unwrap();
            prop_assert!((d - d2).abs() < 1e-9);
        }
    }
}
