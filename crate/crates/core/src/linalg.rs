//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Lower Cholesky factor, or `None` when `m` is not positive definite.
pub fn cholesky_lower(m: &Mat) -> Option<Mat> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    m.clone().cholesky().map(|c| c.l())
}

pub fn is_positive_definite(m: &Mat) -> bool {
    cholesky_lower(m).is_some()
}

/// Columns form a `g`-orthonormal basis: `Eᵀ g E = I`.
pub fn orthonormal_frame(g: &Mat) -> Option<Mat> {
    let l = cholesky_lower(g)?;
    let n = g.nrows();
    // E = L⁻ᵀ
    let lt = l.transpose();
    lt.solve_upper_triangular(&Mat::identity(n, n))
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted ascending.
pub fn sym_eigen(m: &Mat) -> (Vec<f64>, Mat) {
    let n = m.nrows();
    let eig = nalgebra::SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Orthonormal basis (columns) of `{x : A x ≈ 0}` using singular values `<= tol`.
pub fn null_space(a: &Mat, tol: f64) -> Mat {
    let n = a.ncols();
    // Work with AᵀA so that wide and tall inputs are handled alike.
    let ata = a.transpose() * a;
    let (values, vectors) = sym_eigen(&ata);
    let cols: Vec<usize> = (0..n)
        .filter(|&i| values[i].max(0.0).sqrt() <= tol)
        .collect();
    let mut out = Mat::zeros(n, cols.len());
    for (j, &i) in cols.iter().enumerate() {
        out.set_column(j, &vectors.column(i));
    }
    out
}

/// Cosines of the principal angles between the column spans of two
/// orthonormal bases, sorted descending.
pub fn principal_cosines(a: &Mat, b: &Mat) -> Vec<f64> {
    if a.ncols() == 0 || b.ncols() == 0 {
        return Vec::new();
    }
    let m = a.transpose() * b;
    let svd = m.svd(false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().map(|v| v.min(1.0)).collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Largest principal angle between two subspaces of equal dimension.
pub fn max_principal_angle(a: &Mat, b: &Mat) -> f64 {
    if a.ncols() != b.ncols() {
        return std::f64::consts::FRAC_PI_2;
    }
    principal_cosines(a, b)
        .into_iter()
        .map(|c| c.clamp(-1.0, 1.0).acos())
        .fold(0.0, f64::max)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `vᵀ g v`
pub fn quad_form(g: &Mat, v: &[f64]) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += g[(i, j)] * v[i] * v[j];
        }
    }
    acc
}

pub fn bilinear(g: &Mat, v: &[f64], w: &[f64]) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += g[(i, j)] * v[i] * w[j];
        }
    }
    acc
}

/// Uniformly distributed Euclidean unit vector (rejection from the cube).
pub fn random_unit<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = norm(&v);
        if r > 1e-3 && r <= 1.0 {
            return v.into_iter().map(|x| x / r).collect();
        }
    }
}

pub fn mat_from_rows(rows: &[&[f64]]) -> Mat {
    let n = rows.len();
    let m = if n == 0 { 0 } else { rows[0].len() };
    Mat::from_fn(n, m, |i, j| rows[i][j])
}

pub fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn mat_to_columns(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.ncols())
        .map(|j| (0..m.nrows()).map(|i| m[(i, j)]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(5);
        // degree 9 is the highest exact degree for 5 nodes
        let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(8)).sum();
        assert!((integral - 2.0 / 9.0).abs() < 1e-14);
        let total: f64 = w.iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
    }

    #[test]
    fn frame_is_orthonormal() {
        let g = mat_from_rows(&[&[4.0, 1.0], &[1.0, 3.0]]);
        let e = orthonormal_frame(&g).unwrap();
        let id = e.transpose() * &g * &e;
        assert!((id - Mat::identity(2, 2)).abs().max() < 1e-14);
    }

    #[test]
    fn null_space_of_rank_one() {
        let a = mat_from_rows(&[&[1.0, 1.0, 0.0]]);
        let ns = null_space(&a, 1e-10);
        assert_eq!(ns.ncols(), 2);
        assert!((&a * &ns).abs().max() < 1e-12);
    }

    #[test]
    fn indefinite_matrix_has_no_cholesky() {
        let m = mat_from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
        assert!(!is_positive_definite(&m));
    }
}
