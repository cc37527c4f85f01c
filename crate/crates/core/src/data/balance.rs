//! Symmetric matrix balancing by iterative proportional fitting.
//!
//! Each iteration rescales bin `i` by `sqrt(target / r_i)`, where `r_i` is
//! the current row sum and `target` the mean row sum of the input over
//! unmasked bins. The same vector scales rows and columns, so symmetry and
//! the zero pattern are preserved. All-zero rows are masked.

use super::ContactMap;
use crate::error::{Error, Result};

pub const DEFAULT_BALANCE_TOL: f64 = 1e-6;
pub const DEFAULT_BALANCE_MAX_ITER: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Balanced {
    pub map: ContactMap,
    /// Per-bin scaling; masked bins keep 1.
    pub bias: Vec<f64>,
    pub masked: Vec<bool>,
    pub iterations: usize,
}

fn scaled(map: &ContactMap, s: &[f64]) -> Vec<f64> {
    let n = map.n();
    let c = map.counts();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = c[i * n + j] * (s[i] * s[j]);
        }
    }
    out
}

/// Largest relative deviation of unmasked row sums from `target`.
fn residual(map: &ContactMap, s: &[f64], masked: &[bool], target: f64, sums: &mut [f64]) -> f64 {
    let n = map.n();
    let c = map.counts();
    let mut worst = 0.0f64;
    for i in 0..n {
        if masked[i] {
            sums[i] = 0.0;
            continue;
        }
        let row = &c[i * n..(i + 1) * n];
        let r = s[i] * row.iter().zip(s).map(|(v, sj)| v * sj).sum::<f64>();
        sums[i] = r;
        worst = worst.max((r / target - 1.0).abs());
    }
    worst
}

/// Balances until every unmasked row sum is within `tol` (relative) of the
/// common target.
pub fn balance_with_bias(map: &ContactMap, tol: f64, max_iter: usize) -> Result<Balanced> {
    if !(tol > 0.0) {
        return Err(Error::domain(format!("tolerance must be positive, got {tol}")));
    }
    let n = map.n();
    let sums0 = map.row_sums();
    let masked: Vec<bool> = sums0.iter().map(|&r| r == 0.0).collect();
    let active = masked.iter().filter(|m| !**m).count();
    let mut s = vec![1.0; n];
    if active == 0 {
        return Ok(Balanced {
            map: map.clone(),
            bias: s,
            masked,
            iterations: 0,
        });
    }
    let target = sums0.iter().sum::<f64>() / active as f64;
    let mut sums = vec![0.0; n];
    let mut iterations = 0;
    loop {
        let res = residual(map, &s, &masked, target, &mut sums);
        if res < tol {
            break;
        }
        if iterations == max_iter || !res.is_finite() {
            return Err(Error::Convergence {
                iterations,
                residual: res,
            });
        }
        for i in 0..n {
            if !masked[i] {
                s[i] *= (target / sums[i]).sqrt();
            }
        }
        iterations += 1;
    }
    let counts = if iterations == 0 {
        map.counts().to_vec()
    } else {
        scaled(map, &s)
    };
    Ok(Balanced {
        map: map.with_counts(counts),
        bias: s,
        masked,
        iterations,
    })
}

pub fn balance(map: &ContactMap, tol: f64, max_iter: usize) -> Result<ContactMap> {
    balance_with_bias(map, tol, max_iter).map(|b| b.map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64, zero_prob: f64) -> ContactMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = if rng.gen::<f64>() < zero_prob {
                    0.0
                } else {
                    rng.gen_range(0.1..10.0)
                };
                c[i * n + j] = v;
                c[j * n + i] = v;
            }
        }
        ContactMap::new(n, c, 1, "c").unwrap()
    }

    fn cv(values: &[f64]) -> f64 {
        let m = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
        var.sqrt() / m
    }

    #[test]
    fn balanced_input_is_a_fixed_point() {
        let m = ContactMap::new(2, vec![0.0, 2.0, 2.0, 0.0], 1, "c").unwrap();
        assert_eq!(balance(&m, 1e-6, 1000).unwrap(), m);
        let d = ContactMap::new(3, vec![1.0, 2.0, 3.0, 2.0, 3.0, 1.0, 3.0, 1.0, 2.0], 1, "c").unwrap();
        let b = balance(&d, 1e-6, 1000).unwrap();
        for (x, y) in b.counts().iter().zip(d.counts()) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn random_positive_matrix_row_sums_equalize() {
        let m = random_symmetric(8, 1, 0.0);
        let b = balance(&m, 1e-6, 1000).unwrap();
        // independent check: recompute row sums from the output directly
        let sums: Vec<f64> = (0..8).map(|i| (0..8).map(|j| b.get(i, j)).sum()).collect();
        assert!(cv(&sums) < 1e-6);
    }

    #[test]
    fn zero_rows_are_masked() {
        let mut m = random_symmetric(6, 2, 0.0).counts().to_vec();
        for k in 0..6 {
            m[2 * 6 + k] = 0.0;
            m[k * 6 + 2] = 0.0;
        }
        let m = ContactMap::new(6, m, 1, "c").unwrap();
        let b = balance_with_bias(&m, 1e-6, 1000).unwrap();
        assert!(b.masked[2]);
        assert!((0..6).all(|k| b.map.get(2, k) == 0.0));
        let sums: Vec<f64> = b
            .map
            .row_sums()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| *i != 2)
            .map(|(_, s)| s)
            .collect();
        assert!(cv(&sums) < 1e-6);
    }

    #[test]
    fn non_convergence_reports_residual() {
        let m = random_symmetric(10, 3, 0.0);
        match balance(&m, 1e-12, 1) {
            Err(Error::Convergence {
                iterations: 1,
                residual,
            }) => assert!(residual > 0.0),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn symmetry_and_zero_pattern_preserved(seed in 0u64..1000, n in 2usize..12) {
            let m = random_symmetric(n, seed, 0.2);
            // matrices with sparse rows may lack total support; only check successes
            if let Ok(b) = balance(&m, 1e-6, 1000) {
                for i in 0..n {
                    for j in 0..n {
                        prop_assert_eq!(b.get(i, j), b.get(j, i));
                        prop_assert_eq!(b.get(i, j) == 0.0, m.get(i, j) == 0.0);
                        prop_assert!(b.get(i, j) >= 0.0);
                    }
                }
            }
        }
    }
}
