//! Euler–Maruyama paths of the controlled regime-modulated diffusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::chain::step_chain;
use super::policy::ControlPolicy;
use crate::error::{Error, Result};
use crate::model::{PointCoefficients, ProblemSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub n_paths: usize,
    /// Censoring time; `50 / min c` when absent.
    pub horizon_cap: Option<f64>,
    pub seed: u64,
    /// Extra cap on the control rate on top of the policy's own.
    pub zeta_cap: Option<f64>,
    /// Penalty parameter of the policy, for the record.
    pub eps: f64,
    /// Detect exits between grid times through the Brownian-bridge
    /// crossing probability of each face.
    #[serde(default = "yes")]
    pub bridge_exit: bool,
}

fn yes() -> bool {
    true
}

impl SimConfig {
    pub fn new(dt: f64, n_paths: usize, seed: u64, eps: f64) -> Self {
        Self {
            dt,
            n_paths,
            horizon_cap: None,
            seed,
            zeta_cap: None,
            eps,
            bridge_exit: true,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.n_paths == 0 {
            return Err(Error::InvalidConfig("n_paths must be at least 1".into()));
        }
        if let Some(h) = self.horizon_cap {
            if !(h >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "horizon_cap must be nonnegative, got {h}"
                )));
            }
        }
        Ok(())
    }

    /// Resolved censoring time.
    pub fn horizon(&self, spec: &ProblemSpec) -> f64 {
        self.horizon_cap
            .unwrap_or_else(|| 50.0 / spec.min_discount())
    }
}

/// Initial condition `(x₀, ℓ₀, ι₀)`, 0-based indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartPoint {
    pub x: [f64; 2],
    pub regime: usize,
    pub state: usize,
}

impl StartPoint {
    pub fn new(x: &[f64], regime: usize, state: usize) -> Self {
        let mut p = [0.0; 2];
        p[..x.len()].copy_from_slice(x);
        Self {
            x: p,
            regime,
            state,
        }
    }

    fn check(&self, spec: &ProblemSpec) -> Result<()> {
        let d = spec.dim();
        if !spec.domain.contains_open(&self.x[..d]) {
            return Err(Error::OutOfDomain {
                point: self.x[..d].to_vec(),
            });
        }
        if self.regime >= spec.idx.m || self.state >= spec.idx.n {
            return Err(Error::InvalidConfig(format!(
                "start regime {} / state {} out of range",
                self.regime + 1,
                self.state + 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathEvent {
    Switch { time: f64, from: usize, to: usize },
    Jump { time: f64, from: usize, to: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub path_index: u64,
    /// Exit time, `None` when censored.
    pub exit_time: Option<f64>,
    pub censored: bool,
    /// Exit or censoring time.
    pub stop_time: f64,
    /// Exit point, or the position at the censoring time.
    pub final_point: Vec<f64>,
    pub final_regime: usize,
    pub final_state: usize,
    /// Accumulated `∫ c ds`.
    pub discount: f64,
    pub running_cost: f64,
    pub switching_cost: f64,
    /// Discounted boundary cost, or continuation value when censored.
    pub terminal_cost: f64,
    pub switches: usize,
    pub jumps: usize,
    pub max_rate: f64,
    /// Instants at which the same-time switch guard stopped a cascade.
    pub guard_hits: usize,
    pub events: Vec<PathEvent>,
}

impl PathRecord {
    pub fn total(&self) -> f64 {
        self.running_cost + self.switching_cost + self.terminal_cost
    }
}

/// `σ` with `σσᵀ = 2a` (lower Cholesky factor).
pub fn diffusion_factor(
    a: &[[f64; 2]; 2],
    dim: usize,
    state: usize,
    x: &[f64],
) -> Result<[[f64; 2]; 2]> {
    let err = || Error::NotPositiveDefinite {
        point: x[..dim].to_vec(),
        state,
    };
    let mut s = [[0.0; 2]; 2];
    let a11 = 2.0 * a[0][0];
    if dim == 1 {
        if a11 < 0.0 {
            return Err(err());
        }
        s[0][0] = a11.sqrt();
        return Ok(s);
    }
    let a12 = a[0][1] + a[1][0];
    let a22 = 2.0 * a[1][1];
    if a11 == 0.0 && a12 == 0.0 && a22 == 0.0 {
        return Ok(s);
    }
    if a11 <= 0.0 {
        return Err(err());
    }
    s[0][0] = a11.sqrt();
    s[1][0] = a12 / s[0][0];
    let rest = a22 - s[1][0] * s[1][0];
    if rest <= 0.0 {
        return Err(err());
    }
    s[1][1] = rest.sqrt();
    Ok(s)
}

/// Coefficients and `σ` per chain state, frozen when constant.
struct CoefCache {
    frozen: Vec<Option<(PointCoefficients, [[f64; 2]; 2])>>,
}

impl CoefCache {
    fn new(spec: &ProblemSpec) -> Result<Self> {
        let x = [0.0; 2];
        let frozen = spec
            .coeffs
            .states
            .iter()
            .enumerate()
            .map(|(s, st)| {
                if st.is_constant() {
                    let p = st.eval(&x[..spec.dim()]);
                    Ok(Some((p, diffusion_factor(&p.a, spec.dim(), s, &x)?)))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { frozen })
    }

    #[inline]
    fn get(
        &self,
        spec: &ProblemSpec,
        state: usize,
        x: &[f64; 2],
    ) -> Result<(PointCoefficients, [[f64; 2]; 2])> {
        match self.frozen[state] {
            Some(v) => Ok(v),
            None => {
                let d = spec.dim();
                let p = spec.coeffs.eval(state, &x[..d]);
                Ok((p, diffusion_factor(&p.a, d, state, x)?))
            }
        }
    }
}

/// Random stream of path `index`: one ChaCha8 stream per path, so results do
/// not depend on how paths are scheduled.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Path simulator bound to an instance and a policy.
pub struct PathSimulator<'a, P: ControlPolicy + ?Sized> {
    spec: &'a ProblemSpec,
    policy: &'a P,
    cfg: SimConfig,
    cache: CoefCache,
    horizon: f64,
    cap: f64,
}

impl<'a, P: ControlPolicy + ?Sized> PathSimulator<'a, P> {
    pub fn new(spec: &'a ProblemSpec, policy: &'a P, cfg: &SimConfig) -> Result<Self> {
        cfg.check()?;
        let cap = policy.rate_cap().min(cfg.zeta_cap.unwrap_or(f64::INFINITY));
        Ok(Self {
            spec,
            policy,
            cfg: cfg.clone(),
            cache: CoefCache::new(spec)?,
            horizon: cfg.horizon(spec),
            cap,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Simulates path `index` from `start`.
    pub fn run(&self, start: &StartPoint, index: u64, record_events: bool) -> Result<PathRecord> {
        let spec = self.spec;
        start.check(spec)?;
        let dim = spec.dim();
        let (lo, hi) = (spec.domain.lower(), spec.domain.upper());
        let mut rng = path_rng(self.cfg.seed, index);
        let mut x = start.x;
        let (mut regime, mut state) = (start.regime, start.state);
        let (mut t, mut r) = (0.0f64, 0.0f64);
        let mut rec = PathRecord {
            path_index: index,
            exit_time: None,
            censored: false,
            stop_time: 0.0,
            final_point: Vec::new(),
            final_regime: regime,
            final_state: state,
            discount: 0.0,
            running_cost: 0.0,
            switching_cost: 0.0,
            terminal_cost: 0.0,
            switches: 0,
            jumps: 0,
            max_rate: 0.0,
            guard_hits: 0,
            events: Vec::new(),
        };
        let total_steps = (self.horizon / self.cfg.dt - 1e-9).ceil().max(0.0) as u64;
        let mut step_no = 0u64;
        loop {
            let (p, sigma) = self.cache.get(spec, state, &x)?;
            let mut action = self.policy.action(&x, regime, state, &p)?;
            let mut cascade = 0;
            while let Some(to) = action.switch_to {
                if cascade >= spec.idx.m {
                    rec.guard_hits += 1;
                    action = crate::simulate::policy::PolicyAction::idle();
                    break;
                }
                rec.switching_cost += (-r).exp() * spec.costs.cost(regime, to);
                rec.switches += 1;
                if record_events {
                    rec.events.push(PathEvent::Switch {
                        time: t,
                        from: regime,
                        to,
                    });
                }
                regime = to;
                cascade += 1;
                action = self.policy.action(&x, regime, state, &p)?;
            }
            if step_no >= total_steps {
                rec.censored = true;
                let disc = (-r).exp();
                rec.terminal_cost = disc
                    * self
                        .policy
                        .continuation_value(&x, regime, state)
                        .unwrap_or(0.0);
                break;
            }
            let step = self.cfg.dt.min(self.horizon - step_no as f64 * self.cfg.dt);
            let rate = action.rate;
            if rate > self.cap * (1.0 + 1e-12) {
                return Err(Error::InvalidConfig(format!(
                    "control rate {rate} exceeds the cap {}",
                    self.cap
                )));
            }
            rec.max_rate = rec.max_rate.max(rate);
            let running = p.h + action.control_cost;
            let mut z = [0.0f64; 2];
            for zi in z.iter_mut().take(dim) {
                *zi = rng.sample::<f64, _>(StandardNormal) * step.sqrt();
            }
            let mut next = x;
            for a in 0..dim {
                let drift = -(p.b[a] + action.direction[a] * rate);
                let noise: f64 = (0..dim).map(|j| sigma[a][j] * z[j]).sum();
                next[a] = x[a] + drift * step + noise;
            }
            for a in 0..dim {
                let (mid, half) = (0.5 * (lo[a] + hi[a]), 0.5 * (hi[a] - lo[a]));
                if !next[a].is_finite() || (next[a] - mid).abs() > 10.0 * half {
                    return Err(Error::StepExplosion {
                        path: index,
                        time: t,
                        point: next[..dim].to_vec(),
                    });
                }
            }
            let exit = self.exit_fraction(&x, &next, &p, step, &mut rng);
            if let Some((lambda, point)) = exit {
                let disc = (-r).exp();
                rec.running_cost += disc * running * lambda * step;
                r += p.c * lambda * step;
                t += lambda * step;
                let f = self.terminal(state, &point)?;
                rec.terminal_cost = (-r).exp() * f;
                rec.exit_time = Some(t);
                x = point;
                break;
            }
            rec.running_cost += (-r).exp() * running * step;
            r += p.c * step;
            t += step;
            step_no += 1;
            x = next;
            let q = &spec.generators[regime];
            let new_state = step_chain(q, state, step, &mut rng);
            if new_state != state {
                rec.jumps += 1;
                if record_events {
                    rec.events.push(PathEvent::Jump {
                        time: t,
                        from: state,
                        to: new_state,
                    });
                }
                state = new_state;
            }
        }
        rec.final_point = x[..dim].to_vec();
        rec.final_regime = regime;
        rec.final_state = state;
        rec.discount = r;
        rec.stop_time = t;
        Ok(rec)
    }

    fn terminal(&self, state: usize, point: &[f64; 2]) -> Result<f64> {
        let d = self.spec.dim();
        Ok(match self.cache.frozen[state] {
            Some((p, _)) => p.f,
            None => self.spec.coeffs.eval(state, &point[..d]).f,
        })
    }

    /// Fraction of the step completed before leaving the domain and the
    /// exit point, if the path leaves during this step.
    fn exit_fraction(
        &self,
        x: &[f64; 2],
        next: &[f64; 2],
        p: &PointCoefficients,
        step: f64,
        rng: &mut ChaCha8Rng,
    ) -> Option<(f64, [f64; 2])> {
        let dim = self.spec.dim();
        let (lo, hi) = (self.spec.domain.lower(), self.spec.domain.upper());
        let mut lambda = f64::INFINITY;
        let mut face = None;
        for a in 0..dim {
            let d = next[a] - x[a];
            let cand = if next[a] <= lo[a] {
                Some(((lo[a] - x[a]) / d, lo[a]))
            } else if next[a] >= hi[a] {
                Some(((hi[a] - x[a]) / d, hi[a]))
            } else {
                None
            };
            if let Some((l, bound)) = cand {
                let l = if l.is_finite() {
                    l.clamp(0.0, 1.0)
                } else {
                    0.0
                };
                if l < lambda {
                    lambda = l;
                    face = Some((a, bound));
                }
            }
        }
        if let Some((axis, bound)) = face {
            let mut point = [0.0; 2];
            for a in 0..dim {
                point[a] = (x[a] + lambda * (next[a] - x[a])).clamp(lo[a], hi[a]);
            }
            point[axis] = bound;
            return Some((lambda, point));
        }
        if !self.cfg.bridge_exit {
            return None;
        }
        for a in 0..dim {
            let var = 2.0 * p.a[a][a] * step;
            for bound in [lo[a], hi[a]] {
                let u: f64 = rng.random();
                if var <= 0.0 {
                    continue;
                }
                let (d0, d1) = ((x[a] - bound).abs(), (next[a] - bound).abs());
                if u < (-2.0 * d0 * d1 / var).exp() {
                    let mut point = [0.0; 2];
                    for b in 0..dim {
                        point[b] = 0.5 * (x[b] + next[b]);
                    }
                    point[a] = bound;
                    return Some((0.5, point));
                }
            }
        }
        None
    }
}

/// Simulates one path of `policy` from `start`.
pub fn simulate_path<P: ControlPolicy + ?Sized>(
    spec: &ProblemSpec,
    policy: &P,
    cfg: &SimConfig,
    start: &StartPoint,
    path_index: u64,
) -> Result<PathRecord> {
    PathSimulator::new(spec, policy, cfg)?.run(start, path_index, true)
}
