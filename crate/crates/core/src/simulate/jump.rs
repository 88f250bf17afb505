//! Cost of an instantaneous push of length `Δζ`.

use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on `[−1, 1]`, by Newton iteration on `P_n`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let step = p1 / dp;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `∫₀^{Δζ} g(x − s n) ds` with 16-point Gauss–Legendre quadrature.
pub fn jump_cost(g: impl Fn(&[f64; 2]) -> f64, x: &[f64; 2], direction: &[f64; 2], dz: f64) -> f64 {
    let (nodes, weights) = gauss_legendre(16);
    let half = 0.5 * dz;
    nodes
        .iter()
        .zip(&weights)
        .map(|(t, w)| {
            let s = half * (t + 1.0);
            w * g(&[x[0] - s * direction[0], x[1] - s * direction[1]])
        })
        .sum::<f64>()
        * half
}
