//! Slow, obviously-correct reference computations.
//!
//! Nothing here shares code with the `wcord` crate; tests compare the fast
//! paths against these.

/// `n x k` times `k x m` by the textbook triple loop.
pub fn triple_loop_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[l * m + j];
            }
            c[i * m + j] = s;
        }
    }
    c
}

/// Minimum of `sum_i cost[i][p(i)] / n` over permutations, enumerated in
/// lexicographic order by recursive extension.
pub fn assignment_lexicographic(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        let n = cost.len();
        if row == n {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let n = cost.len();
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; n], 0.0, &mut best);
    best / n as f64
}

/// Same quantity, enumerating permutations by swap-based generation and
/// summing columns-first (`cost[p^-1(j)][j]`), so it shares neither the order
/// nor the accumulation pattern of [`assignment_lexicographic`].
pub fn assignment_by_swaps(cost: &[Vec<f64>]) -> f64 {
    fn permute(k: usize, p: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == p.len() {
            out.push(p.clone());
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(k + 1, p, out);
            p.swap(k, i);
        }
    }
    let n = cost.len();
    let mut perms = Vec::new();
    permute(0, &mut (0..n).collect(), &mut perms);
    perms
        .iter()
        .map(|p| {
            let mut inv = vec![0; n];
            for (i, &j) in p.iter().enumerate() {
                inv[j] = i;
            }
            (0..n).rev().map(|j| cost[inv[j]][j]).sum::<f64>() / n as f64
        })
        .fold(f64::INFINITY, f64::min)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(sym: &[f64], n: usize) -> Vec<f64> {
    let mut a = sym.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Largest singular value of a row-major `rows x cols` matrix, as the square
/// root of the top Jacobi eigenvalue of the smaller Gram matrix.
pub fn largest_singular_value(w: &[f64], rows: usize, cols: usize) -> f64 {
    let (gram, n) = if cols <= rows {
        let mut g = vec![0.0; cols * cols];
        for i in 0..cols {
            for j in 0..cols {
                g[i * cols + j] = (0..rows).map(|r| w[r * cols + i] * w[r * cols + j]).sum();
            }
        }
        (g, cols)
    } else {
        let mut g = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                g[i * rows + j] = (0..cols).map(|c| w[i * cols + c] * w[j * cols + c]).sum();
            }
        }
        (g, rows)
    };
    jacobi_eigenvalues(&gram, n)
        .into_iter()
        .fold(0.0f64, f64::max)
        .max(0.0)
        .sqrt()
}

/// Mean over rows of `-log softmax(z)[label]`, written out longhand.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        total += -(z[y].exp() / denom).ln();
    }
    total / logits.len() as f64
}

/// `sum p log(p / q)` for two discrete distributions.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// Softmax of `z / t` without max-shifting.
pub fn naive_softmax(z: &[f64], t: f64) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| (v / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
