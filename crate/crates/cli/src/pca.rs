//! Two-component principal projection and silhouette scoring.

use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    /// Fraction of total variance captured by each component.
    pub explained: [f64; 2],
}

/// Projects rows onto their two leading principal axes. Each axis is signed
/// so that its largest-magnitude loading is positive.
pub fn pca2d(rows: &[Vec<f64>]) -> Option<Projection> {
    let n = rows.len();
    let d = rows.first()?.len();
    if n < 2 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return None;
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();

    let mut axes = Vec::with_capacity(2);
    let mut explained = [0.0; 2];
    for (k, &idx) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(idx).clone_owned();
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        if pivot < 0.0 {
            v.neg_mut();
        }
        explained[k] = if total > 0.0 {
            eig.eigenvalues[idx].max(0.0) / total
        } else {
            0.0
        };
        axes.push(x.clone() * v);
    }
    let points = (0..n)
        .map(|i| [axes[0][i], axes.get(1).map_or(0.0, |a| a[i])])
        .collect();
    Some(Projection { points, explained })
}

/// Mean silhouette width of a labelled 2-D point set; `None` with fewer than
/// two clusters. Singleton clusters contribute 0.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> Option<f64> {
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 || points.len() != labels.len() {
        return None;
    }
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for (i, &p) in points.iter().enumerate() {
        let mut sums = vec![(0.0, 0usize); clusters.len()];
        for (j, &q) in points.iter().enumerate() {
            if i != j {
                let c = clusters.binary_search(&labels[j]).expect("label listed");
                sums[c].0 += dist(p, q);
                sums[c].1 += 1;
            }
        }
        let own = clusters.binary_search(&labels[i]).expect("label listed");
        if sums[own].1 == 0 {
            continue;
        }
        let a = sums[own].0 / sums[own].1 as f64;
        let b = sums
            .iter()
            .enumerate()
            .filter(|&(c, s)| c != own && s.1 > 0)
            .map(|(_, s)| s.0 / s.1 as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Some(total / points.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_dominant_axis() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = f64::from(i) - 9.5;
                vec![3.0 * t, 0.1 * (t * 1.7).sin(), 1.0]
            })
            .collect();
        let p = pca2d(&rows).unwrap();
        assert!(p.explained[0] > 0.99);
        for (i, pt) in p.points.iter().enumerate() {
            assert!((pt[0] - 3.0 * (i as f64 - 9.5)).abs() < 1e-2);
        }
    }

    #[test]
    fn silhouette_extremes() {
        let pts = [[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]];
        assert!(silhouette(&pts, &[0, 0, 1, 1]).unwrap() > 0.9);
        assert!(silhouette(&pts, &[0, 1, 0, 1]).unwrap() < 0.0);
        assert_eq!(silhouette(&pts, &[0, 0, 0, 0]), None);
    }

    #[test]
    fn rejects_ragged_or_tiny_input() {
        assert!(pca2d(&[vec![1.0]]).is_none());
        assert!(pca2d(&[vec![1.0, 2.0], vec![1.0]]).is_none());
    }
}
