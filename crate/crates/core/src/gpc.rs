//! Polynomial-chaos bookkeeping for i.i.d. uniform random variables on
//! `[−1,1]`: multi-index sets, the orthonormal Legendre product basis, and
//! the moment tensors `E[ξᵢ H]` and `E[ξᵢ HᵀH]` of the discrete evolution
//! system.
//!
//! The basis row `H(ξ) = (H_α(ξ))` ranges over nonzero multi-indices with
//! total degree at most `p`, ordered by degree and lexicographically within a
//! degree (degree-one indices appear as `e₁, e₂, …` first). Moment tensors
//! are integrated by tensorized Gauss-Legendre quadrature with `p+1` points
//! per coordinate, exact for the degree `2p+1` integrands involved, and are
//! cached at construction since they enter every time step.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};

/// Multi-index set, basis metadata, and cached moment tensors.
#[derive(Debug, Clone)]
pub struct GpcSpace {
    /// Number of random variables.
    pub r: usize,
    /// Maximal total degree.
    pub p: usize,
    /// Nonzero multi-indices in graded-lexicographic order.
    pub indices: Vec<Vec<u32>>,
    t0: Vec<DVector<f64>>,
    t1: Vec<DMatrix<f64>>,
}

/// Enumerates nonzero multi-indices `α` with `|α| ≤ p` in `r` variables,
/// degree ascending and lexicographic (first coordinate dominant) within a
/// degree.
pub fn multi_index_set(r: usize, p: usize) -> Result<Vec<Vec<u32>>> {
    if r == 0 || p == 0 {
        return Err(invalid("multi_index_set", format!("need r >= 1 and p >= 1, got ({r}, {p})")));
    }
    fn fill(out: &mut Vec<Vec<u32>>, prefix: &mut Vec<u32>, remaining: u32, slots: usize) {
        if slots == 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in (0..=remaining).rev() {
            prefix.push(first);
            fill(out, prefix, remaining - first, slots - 1);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for degree in 1..=p as u32 {
        fill(&mut out, &mut Vec::new(), degree, r);
    }
    Ok(out)
}

/// Values of the orthonormal Legendre polynomials `√(2k+1)·P_k(x)` for
/// `k = 0..=deg`.
fn legendre_orthonormal(x: f64, deg: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(deg + 1);
    p.push(1.0);
    if deg >= 1 {
        p.push(x);
    }
    for k in 1..deg {
        let next = ((2 * k + 1) as f64 * x * p[k] - k as f64 * p[k - 1]) / (k + 1) as f64;
        p.push(next);
    }
    for (k, v) in p.iter_mut().enumerate() {
        *v *= ((2 * k + 1) as f64).sqrt();
    }
    p
}

/// Gauss-Legendre nodes and weights on `[−1,1]` for the probabilistic
/// measure `dx/2`; exact for polynomials of degree `2q − 1`.
pub(crate) fn gauss_legendre(q: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; q];
    let mut weights = vec![0.0; q];
    for i in 0..q {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (q as f64 + 0.5)).cos();
        for _ in 0..100 {
            // Evaluate P_q and its derivative by the three-term recurrence.
            let (mut p0, mut p1) = (1.0, x);
            for k in 1..q {
                let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
                p0 = p1;
                p1 = p2;
            }
            let pq = if q == 1 { x } else { p1 };
            let dpq = q as f64 * (x * pq - if q == 1 { 1.0 } else { p0 }) / (x * x - 1.0);
            let dx = pq / dpq;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0, x);
        for k in 1..q {
            let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
            p0 = p1;
            p1 = p2;
        }
        let pq = if q == 1 { x } else { p1 };
        let dpq = q as f64 * (x * pq - if q == 1 { 1.0 } else { p0 }) / (x * x - 1.0);
        nodes[i] = x;
        // Probabilistic normalization: weights sum to 1.
        weights[i] = 1.0 / ((1.0 - x * x) * dpq * dpq);
    }
    (nodes, weights)
}

impl GpcSpace {
    /// Builds the space and precomputes the moment tensors.
    pub fn new(r: usize, p: usize) -> Result<Self> {
        let indices = multi_index_set(r, p)?;
        let np = indices.len();
        let (nodes, weights) = gauss_legendre(p + 1);

        let mut t0 = vec![DVector::zeros(np); r];
        let mut t1 = vec![DMatrix::zeros(np, np); r];

        // Tensorized quadrature over [−1,1]^r: iterate multi-digit counters.
        let q = nodes.len();
        let total = q.pow(r as u32);
        let mut h = vec![0.0; np];
        let mut xi = vec![0.0; r];
        for flat in 0..total {
            let mut rest = flat;
            let mut w = 1.0;
            for d in 0..r {
                let j = rest % q;
                rest /= q;
                xi[d] = nodes[j];
                w *= weights[j];
            }
            // Evaluate the basis row at this node.
            let per_dim: Vec<Vec<f64>> =
                xi.iter().map(|&x| legendre_orthonormal(x, p as usize)).collect();
            for (a, alpha) in indices.iter().enumerate() {
                let mut v = 1.0;
                for (d, &k) in alpha.iter().enumerate() {
                    v *= per_dim[d][k as usize];
                }
                h[a] = v;
            }
            for i in 0..r {
                let wx = w * xi[i];
                for a in 0..np {
                    t0[i][a] += wx * h[a];
                    // Upper triangle only; mirrored below for exact symmetry.
                    for b in a..np {
                        t1[i][(a, b)] += wx * h[a] * h[b];
                    }
                }
            }
        }
        for ti in t1.iter_mut() {
            for a in 0..np {
                for b in 0..a {
                    ti[(a, b)] = ti[(b, a)];
                }
            }
        }
        Ok(GpcSpace { r, p, indices, t0, t1 })
    }

    /// Number of basis functions, `N_p = (p+r)!/(p! r!) − 1`.
    pub fn n_p(&self) -> usize {
        self.indices.len()
    }

    /// `E[ξᵢ Hᵀ]` for random variable `i` (0-based).
    pub fn t0(&self, i: usize) -> &DVector<f64> {
        &self.t0[i]
    }

    /// `E[ξᵢ HᵀH]` for random variable `i` (0-based); symmetric.
    pub fn t1(&self, i: usize) -> &DMatrix<f64> {
        &self.t1[i]
    }

    /// `E[ξᵢ H̃ᵀH̃]` over the basis extended by the constant polynomial in
    /// position 0; used by the fine-scale gPC-Galerkin reference solver.
    pub fn extended_t1(&self, i: usize) -> DMatrix<f64> {
        let np = self.n_p();
        let mut out = DMatrix::zeros(np + 1, np + 1);
        // E[ξᵢ·1·1] = 0 at (0,0).
        for a in 0..np {
            out[(0, a + 1)] = self.t0[i][a];
            out[(a + 1, 0)] = self.t0[i][a];
            for b in 0..np {
                out[(a + 1, b + 1)] = self.t1[i][(a, b)];
            }
        }
        out
    }
}

/// Evaluates the basis row `H(ξ)`.
pub fn eval_basis(space: &GpcSpace, xi: &[f64]) -> DVector<f64> {
    debug_assert_eq!(xi.len(), space.r);
    debug_assert!(
        xi.iter().all(|v| (-1.0..=1.0).contains(v)),
        "eval_basis: point outside [−1,1]^r"
    );
    let per_dim: Vec<Vec<f64>> =
        xi.iter().map(|&x| legendre_orthonormal(x, space.p as usize)).collect();
    DVector::from_iterator(
        space.n_p(),
        space.indices.iter().map(|alpha| {
            alpha.iter().enumerate().map(|(d, &k)| per_dim[d][k as usize]).product::<f64>()
        }),
    )
}

/// Returns views of the cached moment tensors `(T0[0..r], T1[0..r])`.
pub fn moment_tensors(space: &GpcSpace) -> (&[DVector<f64>], &[DMatrix<f64>]) {
    (&space.t0, &space.t1)
}
