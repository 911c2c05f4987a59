//! Rectangular minimum-cost linear assignment via shortest augmenting paths
//! (the Jonker-Volgenant family). Shared by target matching in training and
//! identity association in tracking.

use ndarray::ArrayView2;

const NONE: usize = usize::MAX;

/// Optimal one-to-one assignment of `min(rows, cols)` pairs minimizing total
/// cost. Returns `(row, col)` pairs sorted by row. Costs must be finite.
pub fn min_cost_assignment(cost: ArrayView2<'_, f64>) -> Vec<(usize, usize)> {
    let (nr, nc) = cost.dim();
    if nr == 0 || nc == 0 {
        return Vec::new();
    }
    debug_assert!(cost.iter().all(|c| c.is_finite()), "non-finite cost");
    if nr > nc {
        let t = cost.t();
        let mut pairs: Vec<(usize, usize)> = solve(t.view())
            .into_iter()
            .map(|(r, c)| (c, r))
            .collect();
        pairs.sort_unstable();
        return pairs;
    }
    let mut pairs = solve(cost);
    pairs.sort_unstable();
    pairs
}

/// Core solver; requires `nr <= nc`, assigns every row.
fn solve(cost: ArrayView2<'_, f64>) -> Vec<(usize, usize)> {
    let (nr, nc) = cost.dim();
    let mut u = vec![0.0f64; nr];
    let mut v = vec![0.0f64; nc];
    let mut col4row = vec![NONE; nr];
    let mut row4col = vec![NONE; nc];

    let mut shortest = vec![f64::INFINITY; nc];
    let mut path = vec![NONE; nc];
    let mut visited_row = vec![false; nr];
    let mut visited_col = vec![false; nc];

    for cur_row in 0..nr {
        shortest.fill(f64::INFINITY);
        path.fill(NONE);
        visited_row.fill(false);
        visited_col.fill(false);

        let mut min_val = 0.0f64;
        let mut i = cur_row;
        let mut sink = NONE;
        while sink == NONE {
            visited_row[i] = true;
            let mut lowest = f64::INFINITY;
            let mut index = NONE;
            for j in 0..nc {
                if visited_col[j] {
                    continue;
                }
                let r = min_val + cost[[i, j]] - u[i] - v[j];
                if r < shortest[j] {
                    shortest[j] = r;
                    path[j] = i;
                }
                // Prefer unassigned columns on ties so augmenting stops early.
                if shortest[j] < lowest
                    || (shortest[j] == lowest && row4col[j] == NONE)
                {
                    lowest = shortest[j];
                    index = j;
                }
            }
            min_val = lowest;
            debug_assert!(min_val.is_finite(), "assignment infeasible");
            let j = index;
            if row4col[j] == NONE {
                sink = j;
            } else {
                i = row4col[j];
            }
            visited_col[j] = true;
        }

        u[cur_row] += min_val;
        for r in 0..nr {
            if visited_row[r] && r != cur_row {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for (j, vj) in v.iter_mut().enumerate() {
            if visited_col[j] {
                *vj -= min_val - shortest[j];
            }
        }

        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            std::mem::swap(&mut col4row[r], &mut j);
            if r == cur_row {
                break;
            }
        }
    }

    col4row
        .into_iter()
        .enumerate()
        .map(|(r, c)| (r, c))
        .collect()
}

/// Exhaustive minimum total cost over all one-to-one assignments. Intended
/// as a test oracle; feasible only for `min(rows, cols) <= ~8`.
pub fn brute_force_min_cost(cost: ArrayView2<'_, f64>) -> f64 {
    let (nr, nc) = cost.dim();
    if nr == 0 || nc == 0 {
        return 0.0;
    }
    if nr > nc {
        let owned = cost.t().to_owned();
        return brute_force_min_cost(owned.view());
    }
    let mut used = vec![false; nc];
    fn rec(cost: &ArrayView2<'_, f64>, row: usize, used: &mut [bool]) -> f64 {
        if row == cost.nrows() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..used.len() {
            if used[c] {
                continue;
            }
            used[c] = true;
            let total = cost[[row, c]] + rec(cost, row + 1, used);
            used[c] = false;
            if total < best {
                best = total;
            }
        }
        best
    }
    rec(&cost, 0, &mut used)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn total(cost: &Array2<f64>, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| cost[[r, c]]).sum()
    }

    #[test]
    fn identity_costs_match_diagonal() {
        let cost = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 0.0 } else { 1.0 });
        let pairs = min_cost_assignment(cost.view());
        assert_eq!(pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn permutation_costs_recovered() {
        // Cheap entries form the permutation (0->2, 1->0, 2->3, 3->1).
        let perm = [2usize, 0, 3, 1];
        let cost = Array2::from_shape_fn((4, 4), |(i, j)| {
            if perm[i] == j {
                0.0
            } else {
                1.0
            }
        });
        let pairs = min_cost_assignment(cost.view());
        for (r, c) in pairs {
            assert_eq!(perm[r], c);
        }
    }

    #[test]
    fn rectangular_assigns_short_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(nr, nc) in &[(3usize, 6usize), (6, 3), (1, 5), (5, 1), (2, 2)] {
            let cost = Array2::from_shape_fn((nr, nc), |_| rng.gen_range(-2.0..2.0));
            let pairs = min_cost_assignment(cost.view());
            assert_eq!(pairs.len(), nr.min(nc));
            let mut rows: Vec<_> = pairs.iter().map(|p| p.0).collect();
            let mut cols: Vec<_> = pairs.iter().map(|p| p.1).collect();
            rows.sort_unstable();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            assert_eq!(rows.len(), pairs.len(), "duplicate rows");
            assert_eq!(cols.len(), pairs.len(), "duplicate cols");
            let best = brute_force_min_cost(cost.view());
            assert!((total(&cost, &pairs) - best).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_brute_force_on_random_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..200 {
            let n = rng.gen_range(1..=6);
            let cost = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
            let pairs = min_cost_assignment(cost.view());
            let best = brute_force_min_cost(cost.view());
            assert!(
                (total(&cost, &pairs) - best).abs() < 1e-9,
                "trial {trial}: {} vs {best}",
                total(&cost, &pairs)
            );
        }
    }

    #[test]
    fn tied_costs_still_optimal() {
        let cost = Array2::from_elem((4, 4), 0.5);
        let pairs = min_cost_assignment(cost.view());
        assert_eq!(pairs.len(), 4);
        assert!((total(&cost, &pairs) - 2.0).abs() < 1e-12);
    }
}
