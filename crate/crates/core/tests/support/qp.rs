//! Accelerated projected-gradient solver for the one-class dual
//! `min ½ αᵀQα  s.t.  0 ≤ α ≤ C, Σα = 1`.

pub fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d).exp()
}

pub fn gram(points: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|a| points.iter().map(|b| rbf(gamma, a, b)).collect())
        .collect()
}

pub fn objective(q: &[Vec<f64>], a: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        for j in 0..a.len() {
            s += a[i] * q[i][j] * a[j];
        }
    }
    0.5 * s
}

/// Euclidean projection onto the capped simplex: `clip(v - τ, 0, c)` with τ
/// found by bisection so the entries sum to one.
pub fn project(v: &[f64], c: f64) -> Vec<f64> {
    let sum = |t: f64| v.iter().map(|x| (x - t).clamp(0.0, c)).sum::<f64>();
    let mut lo = v.iter().cloned().fold(f64::INFINITY, f64::min) - c - 1.0;
    let mut hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sum(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    v.iter().map(|x| (x - t).clamp(0.0, c)).collect()
}

fn matvec(q: &[Vec<f64>], a: &[f64]) -> Vec<f64> {
    q.iter()
        .map(|row| row.iter().zip(a).map(|(x, y)| x * y).sum())
        .collect()
}

/// FISTA with gradient-based restarts and step `1/L`, `L` the largest row sum.
pub fn solve(q: &[Vec<f64>], c: f64, iterations: usize) -> Vec<f64> {
    let n = q.len();
    let l = q
        .iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let step = 1.0 / l;
    let mut x = project(&vec![1.0 / n as f64; n], c);
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..iterations {
        let g = matvec(q, &y);
        let z: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        let next = project(&z, c);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let restart = g
            .iter()
            .zip(next.iter().zip(&x))
            .map(|(gi, (a, b))| gi * (a - b))
            .sum::<f64>()
            > 0.0;
        if restart {
            t = 1.0;
            y = next.clone();
        } else {
            let m = (t - 1.0) / t_next;
            y = next.iter().zip(&x).map(|(a, b)| a + m * (a - b)).collect();
            t = t_next;
        }
        x = next;
    }
    x
}

/// Offset from the KKT conditions: the mean gradient over free coordinates,
/// else the midpoint of the interval the bounded coordinates allow.
pub fn offset(q: &[Vec<f64>], a: &[f64], c: f64) -> f64 {
    let g = matvec(q, a);
    let eps = 1e-10;
    let free: Vec<f64> = (0..a.len())
        .filter(|&i| a[i] > eps && a[i] < c - eps)
        .map(|i| g[i])
        .collect();
    if !free.is_empty() {
        return free.iter().sum::<f64>() / free.len() as f64;
    }
    let upper = (0..a.len())
        .filter(|&i| a[i] <= eps)
        .map(|i| g[i])
        .fold(f64::INFINITY, f64::min);
    let lower = (0..a.len())
        .filter(|&i| a[i] >= c - eps)
        .map(|i| g[i])
        .fold(f64::NEG_INFINITY, f64::max);
    match (upper.is_finite(), lower.is_finite()) {
        (true, true) => 0.5 * (upper + lower),
        (false, true) => lower,
        _ => upper,
    }
}

pub fn decision(points: &[Vec<f64>], a: &[f64], rho: f64, gamma: f64, x: &[f64]) -> f64 {
    points
        .iter()
        .zip(a)
        .map(|(p, w)| w * rbf(gamma, p, x))
        .sum::<f64>()
        - rho
}
