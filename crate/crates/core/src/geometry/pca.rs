use tracing::warn;

use super::{symmetric_eigen, GeometryError, ReducerMethod, ReducerSpec};
use crate::matrix::EmbeddingMatrix;

/// Eigenvalues below this fraction of the leading one count as uninformative.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Reduction {
    pub matrix: EmbeddingMatrix,
    /// Variance captured by each output component, descending.
    pub explained_variance: Vec<f64>,
    /// Row-major `target x input` matrix of unit principal axes. Empty for
    /// external reductions.
    pub components: Vec<Vec<f64>>,
    /// Fewer informative directions than requested. Trailing components
    /// carry (numerically) zero variance.
    pub rank_deficient: bool,
}

/// Reduces `matrix` according to `spec`. PCA is computed in-process; the
/// external method must go through [`adopt_external`].
pub fn reduce(matrix: &EmbeddingMatrix, spec: &ReducerSpec) -> Result<Reduction, GeometryError> {
    match spec.method {
        ReducerMethod::Pca => pca(matrix, spec.target_dimension),
        ReducerMethod::External => Err(GeometryError::ExternalRequired),
    }
}

/// Accepts a matrix reduced by an outside tool, checking it lines up with
/// the raw input row for row.
pub fn adopt_external(
    raw: &EmbeddingMatrix,
    external: EmbeddingMatrix,
    spec: &ReducerSpec,
) -> Result<Reduction, GeometryError> {
    if raw.reduced() {
        return Err(GeometryError::AlreadyReduced);
    }
    if external.record_ids() != raw.record_ids() {
        return Err(GeometryError::ExternalMismatch(
            "record ids differ from the raw matrix".into(),
        ));
    }
    if external.dimension() != spec.target_dimension {
        return Err(GeometryError::ExternalMismatch(format!(
            "dimension {} != target {}",
            external.dimension(),
            spec.target_dimension
        )));
    }
    let dim = external.dimension();
    let name = if external.model_name().is_empty() || external.model_name() == raw.model_name() {
        format!("{}+external{}", raw.model_name(), dim)
    } else {
        external.model_name().to_string()
    };
    let matrix = external.with_data(external.as_flat().to_vec(), dim, name, true)?;
    Ok(Reduction {
        matrix,
        explained_variance: vec![],
        components: vec![],
        rank_deficient: false,
    })
}

fn pca(matrix: &EmbeddingMatrix, target: usize) -> Result<Reduction, GeometryError> {
    if matrix.reduced() {
        return Err(GeometryError::AlreadyReduced);
    }
    let n = matrix.len();
    let d = matrix.dimension();
    if target == 0 || target > d {
        return Err(GeometryError::InvalidTarget { target, input: d });
    }
    if n < target.max(2) {
        return Err(GeometryError::InsufficientRows {
            needed: target.max(2),
            found: n,
        });
    }

    let mut mean = vec![0.0; d];
    for row in matrix.rows() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered: Vec<f64> = matrix
        .rows()
        .flat_map(|row| row.iter().zip(&mean).map(|(x, m)| x - m))
        .collect();

    // Sample covariance, lower triangle then mirrored. Fixed summation order.
    let mut cov = vec![0.0; d * d];
    for row in centered.chunks_exact(d) {
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            let base = i * d;
            for j in 0..=i {
                cov[base + j] += ri * row[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }

    let eig = symmetric_eigen(&cov, d)?;
    let mut components = Vec::with_capacity(target);
    for j in 0..target {
        let mut axis = eig.vector(j);
        // Largest-magnitude loading is made positive; first index wins ties.
        let mut pivot = 0;
        for (i, v) in axis.iter().enumerate() {
            if v.abs() > axis[pivot].abs() {
                pivot = i;
            }
        }
        if axis[pivot] < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(axis);
    }

    let leading = eig.values[0].max(0.0);
    let informative = eig
        .values
        .iter()
        .filter(|&&v| leading > 0.0 && v > leading * RANK_TOLERANCE)
        .count();
    let rank_deficient = informative < target;
    if rank_deficient {
        warn!(informative, target, "reduction is rank deficient");
    }

    let mut data = Vec::with_capacity(n * target);
    for row in centered.chunks_exact(d) {
        for axis in &components {
            data.push(row.iter().zip(axis).map(|(a, b)| a * b).sum());
        }
    }
    let explained_variance = eig.values[..target].iter().map(|v| v.max(0.0)).collect();
    let name = format!("{}+pca{}", matrix.model_name(), target);
    let reduced = matrix.with_data(data, target, name, true)?;
    Ok(Reduction {
        matrix: reduced,
        explained_variance,
        components,
        rank_deficient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::euclidean;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("r{i}")).collect()
    }

    fn spec(target: usize) -> ReducerSpec {
        ReducerSpec {
            method: ReducerMethod::Pca,
            target_dimension: target,
            seed: 0,
        }
    }

    #[test]
    fn collinear_points_keep_distance_order() {
        let ts = [0.0, 1.0, 3.0, 7.0];
        let rows: Vec<Vec<f64>> = ts.iter().map(|t| vec![*t, *t, *t]).collect();
        let m = EmbeddingMatrix::new(ids(4), rows.clone(), "raw", false).unwrap();
        let out = reduce(&m, &spec(1)).unwrap();
        assert!(!out.rank_deficient);
        for a in 0..4 {
            for b in 0..4 {
                let raw = euclidean(&rows[a], &rows[b]);
                let red = euclidean(out.matrix.row(a), out.matrix.row(b));
                assert!((raw - red).abs() < 1e-9);
            }
        }
        // collinear data asked for 2 dims → flagged, not padded away
        let out2 = reduce(&m, &spec(2)).unwrap();
        assert!(out2.rank_deficient);
        assert_eq!(out2.matrix.dimension(), 2);
    }

    #[test]
    fn full_rank_projection_is_a_rotation() {
        let rows = vec![
            vec![1.0, 2.0, 0.5],
            vec![-1.0, 0.3, 2.0],
            vec![0.2, -0.7, 1.1],
            vec![3.0, 1.0, -2.0],
            vec![0.0, 0.0, 1.0],
        ];
        let m = EmbeddingMatrix::new(ids(5), rows.clone(), "raw", false).unwrap();
        let out = reduce(&m, &spec(3)).unwrap();
        let mean: Vec<f64> = (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 5.0).collect();
        for (i, row) in rows.iter().enumerate() {
            // x - mean = sum_k score_k * axis_k
            let scores = out.matrix.row(i);
            for j in 0..3 {
                let rebuilt: f64 = (0..3).map(|k| scores[k] * out.components[k][j]).sum();
                assert!((rebuilt - (row[j] - mean[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sign_convention_and_orthonormality() {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let t = i as f64;
                vec![t.sin() * 3.0, (t * 0.7).cos(), t * 0.1 - 0.5, (t * 1.3).sin()]
            })
            .collect();
        let m = EmbeddingMatrix::new(ids(12), rows, "raw", false).unwrap();
        let out = reduce(&m, &spec(3)).unwrap();
        for (p, a) in out.components.iter().enumerate() {
            let pivot = a.iter().cloned().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            assert!(pivot > 0.0);
            for (q, b) in out.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert!((dot - if p == q { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
        for w in out.explained_variance.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn rejects_double_reduction_and_bad_targets() {
        let m = EmbeddingMatrix::new(ids(3), vec![vec![1.0, 0.0]; 3], "raw", true).unwrap();
        assert_eq!(reduce(&m, &spec(1)).unwrap_err(), GeometryError::AlreadyReduced);
        let raw = EmbeddingMatrix::new(ids(3), vec![vec![1.0, 0.0]; 3], "raw", false).unwrap();
        assert!(matches!(reduce(&raw, &spec(3)), Err(GeometryError::InvalidTarget { .. })));
        let few = EmbeddingMatrix::new(ids(1), vec![vec![1.0, 0.0, 2.0]], "raw", false).unwrap();
        assert!(matches!(reduce(&few, &spec(2)), Err(GeometryError::InsufficientRows { .. })));
    }

    #[test]
    fn deterministic() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64).sqrt(), (i % 3) as f64, (i * i % 7) as f64]).collect();
        let m = EmbeddingMatrix::new(ids(20), rows, "raw", false).unwrap();
        let a = reduce(&m, &spec(2)).unwrap();
        let b = reduce(&m, &spec(2)).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.matrix.model_name(), "raw+pca2");
    }

    #[test]
    fn external_reduction_validated() {
        let raw = EmbeddingMatrix::new(ids(2), vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], "raw", false).unwrap();
        let ext = EmbeddingMatrix::new(ids(2), vec![vec![0.1, 0.2], vec![0.3, 0.4]], "umap", false).unwrap();
        let s = ReducerSpec { method: ReducerMethod::External, target_dimension: 2, seed: 0 };
        assert_eq!(reduce(&raw, &s).unwrap_err(), GeometryError::ExternalRequired);
        let out = adopt_external(&raw, ext.clone(), &s).unwrap();
        assert!(out.matrix.reduced());
        assert_eq!(out.matrix.model_name(), "umap");
        let wrong = ReducerSpec { target_dimension: 3, ..s.clone() };
        assert!(adopt_external(&raw, ext, &wrong).is_err());
    }
}
