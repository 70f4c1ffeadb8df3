use crate::error::{Error, Result};

/// Sylvester construction: `H_1 = [1]`, `H_2n = [[H_n, H_n], [H_n, -H_n]]`.
pub fn sylvester_hadamard(k: usize) -> Result<Vec<Vec<f64>>> {
    if k == 0 || !k.is_power_of_two() {
        return Err(Error::Domain(format!("Hadamard size {k} is not a power of two")));
    }
    let mut m = vec![vec![1.0]];
    while m.len() < k {
        let n = m.len();
        let mut next = vec![vec![0.0; 2 * n]; 2 * n];
        for i in 0..n {
            for j in 0..n {
                let v = m[i][j];
                next[i][j] = v;
                next[i][j + n] = v;
                next[i + n][j] = v;
                next[i + n][j + n] = -v;
            }
        }
        m = next;
    }
    Ok(m)
}

pub(crate) fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `M^T v`.
pub(crate) fn mat_t_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.first().map_or(0, Vec::len)];
    for (row, &x) in m.iter().zip(v) {
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * x;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sizes() {
        assert_eq!(sylvester_hadamard(1).unwrap(), vec![vec![1.0]]);
        assert_eq!(
            sylvester_hadamard(2).unwrap(),
            vec![vec![1.0, 1.0], vec![1.0, -1.0]]
        );
    }

    #[test]
    fn orthogonality_k8() {
        let m = sylvester_hadamard(8).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let d: f64 = (0..8).map(|t| m[i][t] * m[j][t]).sum();
                assert_eq!(d, if i == j { 8.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn rejects_non_powers_of_two() {
        assert!(matches!(sylvester_hadamard(6), Err(Error::Domain(_))));
        assert!(matches!(sylvester_hadamard(0), Err(Error::Domain(_))));
    }
}
