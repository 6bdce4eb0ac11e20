//! Exact minimum-cost assignment.
//!
//! `solve_assignment` runs the O(n^3) Hungarian algorithm for the optimal
//! value and then refines to the lexicographically smallest optimal
//! permutation, matching the tie rule of `brute_force_assign`.

use crate::{Error, Result};

/// Maximum batch size accepted by the exact solver.
pub const MAX_ASSIGN_SIZE: usize = 64;

/// Maximum size accepted by the brute-force oracle.
pub const MAX_BRUTE_FORCE_SIZE: usize = 8;

// Relative slack when testing whether a partial assignment is still optimal;
// summation order differs between the refinement and the base solve.
const COST_TOL: f64 = 1e-9;

/// Minimum total cost of a perfect assignment on a square cost matrix,
/// Jonker-Volgenant style shortest augmenting paths.
fn hungarian_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    if n == 0 {
        return 0.0;
    }
    // potentials and matching are 1-indexed with a dummy 0 row/col
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
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
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=n {
        total += cost[p[j] - 1][j - 1];
    }
    total
}

fn submatrix(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|&r| cols.iter().map(|&c| cost[r][c]).collect())
        .collect()
}

/// Cost-minimizing permutation `perm` with `perm[i]` the column assigned to
/// row `i`; among optima, the lexicographically smallest permutation.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n > MAX_ASSIGN_SIZE {
        return Err(Error::contract(format!(
            "assignment size {n} exceeds exact solver budget {MAX_ASSIGN_SIZE}"
        )));
    }
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(Error::DimensionMismatch {
                context: "solve_assignment cost row",
                expected: n,
                actual: row.len(),
            });
        }
        if row.iter().any(|c| !c.is_finite()) {
            return Err(Error::contract(format!("non-finite cost in row {i}")));
        }
    }
    if n == 0 {
        return Ok(Vec::new());
    }

    let scale: f64 = cost
        .iter()
        .flatten()
        .fold(0.0f64, |m, c| m.max(c.abs()))
        .max(1.0);
    let mut perm = vec![0usize; n];
    let mut cols: Vec<usize> = (0..n).collect();
    let mut fixed_cost = 0.0;
    for i in 0..n {
        let rows: Vec<usize> = (i..n).collect();
        let target = fixed_cost + hungarian_cost(&submatrix(cost, &rows, &cols));
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (ci, &j) in cols.iter().enumerate() {
            let mut rest_cols = cols.clone();
            rest_cols.remove(ci);
            let rest = hungarian_cost(&submatrix(cost, &rest_rows, &rest_cols));
            if fixed_cost + cost[i][j] + rest <= target + COST_TOL * scale * n as f64 {
                chosen = Some((ci, j));
                break;
            }
        }
        let (ci, j) = chosen.expect("some column must preserve optimality");
        perm[i] = j;
        fixed_cost += cost[i][j];
        cols.remove(ci);
    }
    Ok(perm)
}

/// Globally minimal permutation by exhaustive search; ties broken by the
/// lexicographically smallest permutation. Oracle for [`solve_assignment`].
pub fn brute_force_assign(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n > MAX_BRUTE_FORCE_SIZE {
        return Err(Error::contract(format!(
            "brute force size {n} exceeds budget {MAX_BRUTE_FORCE_SIZE}"
        )));
    }
    for row in cost {
        if row.len() != n {
            return Err(Error::DimensionMismatch {
                context: "brute_force_assign cost row",
                expected: n,
                actual: row.len(),
            });
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut perm: Vec<usize> = (0..n).collect();
    // visit permutations in lexicographic order; strict improvement keeps
    // the lexicographically smallest optimum
    loop {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, perm.clone()));
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(best.map(|(_, p)| p).unwrap_or_default())
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Total cost of a permutation on a cost matrix.
pub fn assignment_cost(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::rng_for;

    fn random_cost(seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = rng_for(seed, "assign-test", 0);
        (0..n)
            .map(|_| (0..n).map(|_| rng.random_range(0.0..10.0)).collect())
            .collect()
    }

    #[test]
    fn diagonal_zero_cost_picks_identity() {
        let cost = vec![
            vec![0.0, 5.0, 5.0],
            vec![5.0, 0.0, 5.0],
            vec![5.0, 5.0, 0.0],
        ];
        assert_eq!(brute_force_assign(&cost).unwrap(), vec![0, 1, 2]);
        assert_eq!(solve_assignment(&cost).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn all_equal_costs_break_ties_lexicographically() {
        let cost = vec![vec![1.0; 4]; 4];
        assert_eq!(brute_force_assign(&cost).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(solve_assignment(&cost).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn solver_matches_brute_force_on_random_matrices() {
        for seed in 0..50 {
            for n in 1..=6 {
                let cost = random_cost(seed * 100 + n as u64, n);
                let bf = brute_force_assign(&cost).unwrap();
                let hg = solve_assignment(&cost).unwrap();
                assert_eq!(bf, hg, "seed {seed} n {n}");
            }
        }
    }

    #[test]
    fn solver_matches_brute_force_on_tied_integer_matrices() {
        for seed in 0..30 {
            let mut rng = rng_for(seed, "assign-ties", 0);
            let n = 5;
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.random_range(0..3) as f64).collect())
                .collect();
            let bf = brute_force_assign(&cost).unwrap();
            let hg = solve_assignment(&cost).unwrap();
            assert_eq!(bf, hg, "seed {seed}: {cost:?}");
        }
    }

    #[test]
    fn size_limits_are_enforced() {
        let big = vec![vec![0.0; 9]; 9];
        assert!(brute_force_assign(&big).is_err());
        let huge = vec![vec![0.0; 65]; 65];
        assert!(solve_assignment(&huge).is_err());
    }

    #[test]
    fn empty_matrix_gives_empty_permutation() {
        assert_eq!(solve_assignment(&[]).unwrap(), Vec::<usize>::new());
        assert_eq!(brute_force_assign(&[]).unwrap(), Vec::<usize>::new());
    }
}
