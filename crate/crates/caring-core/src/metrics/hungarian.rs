//! Minimum-cost perfect assignment on square f64 cost matrices
//! (Jonker–Volgenant style shortest augmenting paths with potentials).

/// Returns `assign` with `assign[row] = column` minimizing the total cost.
/// `cost` is row-major n×n.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    for row in cost {
        assert_eq!(row.len(), n, "cost matrix must be square");
    }
    // Potentials and matching, 1-indexed internally with a virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // column -> row (0 = free)

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
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
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        // Augment along the path.
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            assign[matched_row[j] - 1] = j - 1;
        }
    }
    assign
}

/// Exhaustive-search reference for small n.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut perm: Vec<usize> = (0..n).collect();
    permute(&mut perm, 0, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, p.to_vec()));
        }
    });
    best.map(|(_, p)| p).unwrap_or_default()
}

fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn solves_known_instance() {
        let cost = vec![
            vec![4.0, 3.0, 5.0],
            vec![3.0, 5.0, 9.0],
            vec![4.0, 1.0, 4.0],
        ];
        let assign = hungarian(&cost);
        let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        assert_eq!(total, 9.0);
        assert_eq!(assign, vec![2, 0, 1]);
    }

    #[test]
    fn matches_brute_force_cost_on_random_matrices() {
        let mut rng = crate::rng::stream_rng(500, 0);
        for trial in 0..200 {
            let n = 1 + trial % 6;
            let cost: Vec<Vec<f64>> =
                (0..n).map(|_| (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let fast = hungarian(&cost);
            let slow = brute_force_assignment(&cost);
            let total = |a: &[usize]| -> f64 {
                a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
            };
            assert!(
                (total(&fast) - total(&slow)).abs() < 1e-12,
                "n={n}: {} vs {}",
                total(&fast),
                total(&slow)
            );
        }
    }
}
