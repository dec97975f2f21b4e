use super::Matrix;

/// Orthonormal basis for the column space of a tall matrix (Householder).
///
/// Returns the thin `Q` factor, `rows x cols`, with `cols <= rows`. Rank
/// deficient input still yields orthonormal columns: a zero reflector leaves
/// the corresponding identity column in place.
pub(crate) fn thin_q(y: &Matrix) -> Matrix {
    let (m, l) = y.shape();
    assert!(l <= m, "thin_q expects a tall matrix, got {m}x{l}");

    // Column-major working copy.
    let mut cols: Vec<Vec<f64>> = (0..l).map(|j| y.column(j)).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(l);

    for k in 0..l {
        let x = &cols[k][k..];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = x.to_vec();
        if norm > 0.0 {
            let alpha = if x[0] >= 0.0 { -norm } else { norm };
            v[0] -= alpha;
            let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
            if vnorm > 0.0 {
                v.iter_mut().for_each(|t| *t /= vnorm);
            } else {
                v.iter_mut().for_each(|t| *t = 0.0);
            }
        } else {
            v.iter_mut().for_each(|t| *t = 0.0);
        }
        for col in cols.iter_mut().skip(k) {
            apply_reflector(&v, &mut col[k..]);
        }
        reflectors.push(v);
    }

    // Q = H_0 H_1 ... H_{l-1} I[:, :l]
    let mut q_cols: Vec<Vec<f64>> = (0..l)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();
    for k in (0..l).rev() {
        let v = &reflectors[k];
        for col in q_cols.iter_mut() {
            apply_reflector(v, &mut col[k..]);
        }
    }

    let mut data = vec![0.0; m * l];
    for (j, col) in q_cols.iter().enumerate() {
        for (i, &val) in col.iter().enumerate() {
            data[i * l + j] = val;
        }
    }
    Matrix::from_raw(m, l, data)
}

#[inline]
fn apply_reflector(v: &[f64], x: &mut [f64]) {
    let dot: f64 = v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    if dot != 0.0 {
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi -= 2.0 * dot * vi;
        }
    }
}
