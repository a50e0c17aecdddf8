use crate::error::{invalid, Result};

fn check_square(m: &[Vec<f64>]) -> Result<usize> {
    let n = m.len();
    if n == 0 || m.iter().any(|r| r.len() != n) {
        return Err(invalid("assignment needs a non-empty square matrix"));
    }
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("assignment matrix has non-finite entries"));
    }
    Ok(n)
}

/// Row→column assignment maximizing the summed score (Kuhn–Munkres, O(n³)).
pub fn hungarian_max(score: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = check_square(score)?;
    // minimize cost = -score with 1-based potentials
    let cost = |i: usize, j: usize| -score[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
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
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    Ok(assign)
}

/// Exhaustive search over all `n!` assignments; the first maximum in lexicographic order wins.
pub fn brute_force_assignment(score: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = check_square(score)?;
    if n > 8 {
        return Err(invalid("brute-force assignment is limited to 8×8"));
    }
    fn rec(score: &[Vec<f64>], row: usize, used: &mut [bool], cur: &mut Vec<usize>, best: &mut (Vec<usize>, f64)) {
        let n = score.len();
        if row == n {
            let total: f64 = cur.iter().enumerate().map(|(i, &j)| score[i][j]).sum();
            if total > best.1 {
                *best = (cur.clone(), total);
            }
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(score, row + 1, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    rec(score, 0, &mut vec![false; n], &mut Vec::new(), &mut best);
    Ok(best)
}
