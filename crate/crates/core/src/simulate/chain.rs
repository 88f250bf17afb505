//! Exact simulation of a finite-state chain over a time step.

use rand::Rng;

use crate::model::GeneratorMatrix;

/// State of the chain after `dt`, started in `state`, using exponential
/// holding times with rate `−q(ι, ι)` and jump law `q(ι, κ) / −q(ι, ι)`.
/// Several jumps inside one step are followed through.
pub fn step_chain<R: Rng + ?Sized>(
    q: &GeneratorMatrix,
    state: usize,
    dt: f64,
    rng: &mut R,
) -> usize {
    let mut s = state;
    let mut left = dt;
    loop {
        let rate = q.exit_rate(s);
        if rate <= 0.0 {
            return s;
        }
        let u: f64 = rng.random();
        // 1 − u lies in (0, 1], so the logarithm is finite.
        let hold = -(1.0 - u).ln() / rate;
        if hold >= left {
            return s;
        }
        left -= hold;
        s = jump_target(q, s, rate, rng);
    }
}

fn jump_target<R: Rng + ?Sized>(q: &GeneratorMatrix, s: usize, rate: f64, rng: &mut R) -> usize {
    let mut pick = rng.random::<f64>() * rate;
    let mut last = s;
    for k in 0..q.size() {
        if k == s {
            continue;
        }
        let r = q.rate(s, k);
        if r <= 0.0 {
            continue;
        }
        last = k;
        if pick < r {
            return k;
        }
        pick -= r;
    }
    last
}
