//! Minimum-cost one-to-one assignment (Kuhn-Munkres with potentials).

use crate::error::{Error, Result};

/// Assigns every row of `cost` (`rows <= cols`) to a distinct column,
/// minimizing the summed cost. Returns `(row, col)` pairs in row order.
/// Ties resolve towards the lowest column index scanned first, which makes
/// the result a deterministic function of the matrix.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Dimension("ragged cost matrix".into()));
    }
    if n > m {
        return Err(Error::Dimension(format!("{n} targets but only {m} predictions")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("matching cost".into()));
    }
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect();
    out.sort_unstable();
    Ok(out)
}

pub fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r][c]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_and_empty() {
        assert_eq!(hungarian(&[vec![3.0]]).unwrap(), vec![(0, 0)]);
        assert!(hungarian(&[]).unwrap().is_empty());
        assert!(hungarian(&[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn diagonal_case() {
        let c = vec![vec![1.0, 9.0], vec![9.0, 1.0]];
        let a = hungarian(&c).unwrap();
        assert_eq!(a, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&c, &a), 2.0);
    }

    #[test]
    fn rectangular_picks_cheapest_columns() {
        let c = vec![vec![5.0, 1.0, 3.0], vec![4.0, 2.0, 0.5]];
        assert_eq!(hungarian(&c).unwrap(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn ties_are_deterministic() {
        let c = vec![vec![1.0; 3]; 2];
        let a = hungarian(&c).unwrap();
        assert_eq!(a, hungarian(&c).unwrap());
        assert_eq!(assignment_cost(&c, &a), 2.0);
    }
}
