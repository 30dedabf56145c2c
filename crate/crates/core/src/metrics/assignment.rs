use crate::autodiff::Tensor;

use super::MetricError;

/// Largest sample set accepted by [`wasserstein1`].
pub const MAX_W1_SAMPLES: usize = 2000;

/// Minimum-cost perfect matching on a square row-major cost matrix by
/// shortest augmenting paths with dual potentials, `O(n^3)`.
///
/// Returns `(row_to_col, total_cost)`.
pub fn assignment(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based: index 0 is a virtual column holding the row being inserted
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
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
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_col = vec![0; n];
    for j in 1..=n {
        row_col[col_row[j] - 1] = j - 1;
    }
    // sum the matched costs directly rather than trusting the potentials
    let total = row_col.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    (row_col, total)
}

/// Exact Wasserstein-1 distance between two equal-size empirical measures
/// under Euclidean ground cost.
pub fn wasserstein1(a: &Tensor, b: &Tensor) -> Result<f64, MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::SizeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.rows();
    if n > MAX_W1_SAMPLES {
        return Err(MetricError::TooLarge {
            n,
            cap: MAX_W1_SAMPLES,
        });
    }
    if n == 0 {
        return Err(MetricError::TooFewSamples { need: 1, got: 0 });
    }
    let mut cost = Vec::with_capacity(n * n);
    for ra in a.iter_rows() {
        for rb in b.iter_rows() {
            let d2: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
            cost.push(d2.sqrt());
        }
    }
    let (_, total) = assignment(&cost, n);
    Ok(total / n as f64)
}
