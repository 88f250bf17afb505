//! Smooth one-sided penalty and its scaled family.
//!
//! `φ` vanishes on `t ≤ 0`, equals `t − 1` on `t ≥ 2`, and on `[0, 2]` has the
//! quadratic bump `φ''(t) = ¾ t (2 − t)`. Integrating twice from `φ(0) = φ'(0) = 0`
//! gives `φ'(t) = ¾ t² − ¼ t³` and `φ(t) = ¼ t³ − t⁴/16`, which meet the linear
//! branch with `φ(2) = 1`, `φ'(2) = 1`, `φ''(2) = 0`.

use crate::error::{Error, Result};

#[inline]
pub fn phi(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 2.0 {
        t - 1.0
    } else {
        let t3 = t * t * t;
        0.25 * t3 - t3 * t / 16.0
    }
}

#[inline]
pub fn phi1(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 2.0 {
        1.0
    } else {
        0.75 * t * t - 0.25 * t * t * t
    }
}

#[inline]
pub fn phi2(t: f64) -> f64 {
    if t <= 0.0 || t >= 2.0 {
        0.0
    } else {
        0.75 * t * (2.0 - t)
    }
}

/// The scaled penalty `ψ_ε(t) = φ(t/ε)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Penalty {
    eps: f64,
    inv: f64,
}

impl Penalty {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidEpsilon(eps));
        }
        Ok(Self {
            eps,
            inv: 1.0 / eps,
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        phi(t * self.inv)
    }

    #[inline]
    pub fn d1(&self, t: f64) -> f64 {
        phi1(t * self.inv) * self.inv
    }

    #[inline]
    pub fn d2(&self, t: f64) -> f64 {
        phi2(t * self.inv) * self.inv * self.inv
    }

    /// `ψ_ε(|γ|² − g²)` for a gradient with squared norm `grad_sq`.
    #[inline]
    pub fn hamiltonian(&self, grad_sq: f64, g: f64) -> f64 {
        self.value(grad_sq - g * g)
    }

    /// Rate of the absolutely continuous control along the feedback law,
    /// `2 ψ'_ε(|p|² − g²) |p|`.
    #[inline]
    pub fn control_rate(&self, grad_norm: f64, g: f64) -> f64 {
        2.0 * self.d1(grad_norm * grad_norm - g * g) * grad_norm
    }

    /// `l^ε(y)` evaluated at `y = 2ψ'_ε(|p|² − g²) p`, where the supremum in the
    /// conjugate is attained at `γ = p`: `2ψ'_ε|p|² − ψ_ε`.
    #[inline]
    pub fn legendre_at_gradient(&self, grad_sq: f64, g: f64) -> f64 {
        let t = grad_sq - g * g;
        2.0 * self.d1(t) * grad_sq - self.value(t)
    }

    /// Convex conjugate `l^ε(y) = sup_γ {⟨γ, y⟩ − ψ_ε(|γ|² − g²)}` for `|y| = y_norm`.
    ///
    /// The objective is isotropic, so the supremum is over `γ = s·y/|y|`,
    /// `s ≥ 0`. The 1D objective `s|y| − ψ_ε(s² − g²)` is concave, increasing
    /// on `[0, g]`, and maximized by golden-section search.
    pub fn legendre_norm(&self, y_norm: f64, g: f64) -> f64 {
        if y_norm <= 0.0 {
            return 0.0;
        }
        let g = g.max(0.0);
        let objective = |s: f64| s * y_norm - self.value(s * s - g * g);
        // Past sqrt(g² + 2ε) the slope is y − 2s/ε, negative beyond yε/2.
        let mut lo = g;
        let mut hi = (g * g + 2.0 * self.eps).sqrt().max(0.5 * y_norm * self.eps) + 1.0;
        const INV_PHI: f64 = 0.618_033_988_749_894_9;
        let mut x1 = hi - INV_PHI * (hi - lo);
        let mut x2 = lo + INV_PHI * (hi - lo);
        let mut f1 = objective(x1);
        let mut f2 = objective(x2);
        let mut iter = 0;
        while (hi - lo) > 1e-10 * hi.abs().max(1e-300) && iter < 400 {
            if f1 < f2 {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + INV_PHI * (hi - lo);
                f2 = objective(x2);
            } else {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - INV_PHI * (hi - lo);
                f1 = objective(x1);
            }
            iter += 1;
        }
        objective(0.5 * (lo + hi)).max(objective(g))
    }

    /// Conjugate for a vector argument.
    pub fn legendre(&self, y: &[f64], g: f64) -> f64 {
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.legendre_norm(norm, g)
    }
}

pub fn psi(eps: f64, t: f64) -> Result<f64> {
    Ok(Penalty::new(eps)?.value(t))
}

pub fn psi1(eps: f64, t: f64) -> Result<f64> {
    Ok(Penalty::new(eps)?.d1(t))
}

pub fn psi2(eps: f64, t: f64) -> Result<f64> {
    Ok(Penalty::new(eps)?.d2(t))
}

pub fn legendre(eps: f64, y: &[f64], g: f64) -> Result<f64> {
    Ok(Penalty::new(eps)?.legendre(y, g))
}
