//! Entropy-regularized optimal transport via log-domain Sinkhorn-Knopp.
//!
//! The solver alternates the dual updates
//!
//! ```text
//! u_i = log mu_i  - logsumexp_j(-lambda * M_ij     + v_j)
//! v_j = log nu_j  - logsumexp_i(-lambda * M_ji^T   + u_i)
//! ```
//!
//! until the L1 change of `v` drops below the threshold, then materializes
//! the plan `P_ij = exp(u_i - lambda * M_ij + v_j)`. All iteration arithmetic
//! stays in log space, so costs with `lambda * |M|` up to ~700 survive
//! without overflow.

use crate::error::{CoreError, Result};
use crate::tensor::{logsumexp_rows, Tensor};

/// How the cost matrix was derived from attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostOrientation {
    /// M = 1 - Q K^T: low cost on similar pairs, plan seeks alignment.
    SimilarityMax,
    /// M = Q K^T: high cost on similar pairs, plan spreads mass.
    Adversarial,
    /// Cost supplied directly, not derived from scores.
    External,
}

/// Square cost matrix with its orientation tag.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub values: Tensor,
    pub orientation: CostOrientation,
}

impl CostMatrix {
    pub fn new(values: Tensor, orientation: CostOrientation) -> Result<Self> {
        if values.shape.len() != 2 || values.rows() != values.cols() {
            return Err(CoreError::Dimension(format!(
                "cost matrix must be square, got {:?}",
                values.shape
            )));
        }
        values.assert_finite("cost matrix")?;
        Ok(CostMatrix {
            values,
            orientation,
        })
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }
}

/// Row and column marginal distributions.
#[derive(Debug, Clone)]
pub struct Marginals {
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
}

impl Marginals {
    pub fn new(mu: Vec<f64>, nu: Vec<f64>) -> Result<Self> {
        for (name, p) in [("mu", &mu), ("nu", &nu)] {
            if p.iter().any(|&x| x < 0.0) {
                return Err(CoreError::InvalidInput(format!("{name} has negative mass")));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(CoreError::InvalidInput(format!(
                    "{name} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Marginals { mu, nu })
    }

    pub fn uniform(n: usize) -> Self {
        let w = 1.0 / n as f64;
        Marginals {
            mu: vec![w; n],
            nu: vec![w; n],
        }
    }
}

/// Solver knobs. `lambda` is the regularization strength; the threshold is
/// an L1 bound on the change of the dual vector `v` between iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub lambda: f64,
    pub eps_max: f64,
    pub max_iters: usize,
}

impl SinkhornConfig {
    pub fn new(lambda: f64) -> Self {
        SinkhornConfig {
            lambda,
            eps_max: 1e-3,
            max_iters: 50,
        }
    }

    /// The scaled-dot-product convention: lambda = 1/sqrt(d_head).
    pub fn for_head_dim(d_head: usize) -> Self {
        Self::new(1.0 / (d_head as f64).sqrt())
    }

    pub fn with_eps_max(mut self, eps_max: f64) -> Self {
        self.eps_max = eps_max;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 || self.eps_max <= 0.0 || self.max_iters < 1 {
            return Err(CoreError::InvalidInput(format!(
                "sinkhorn config lambda={} eps_max={} max_iters={}",
                self.lambda, self.eps_max, self.max_iters
            )));
        }
        Ok(())
    }
}

/// Converged (or best-effort) coupling with solver diagnostics.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: Tensor,
    pub iterations: usize,
    /// Final L1 change of the dual vector `v`.
    pub residual: f64,
    /// Log-domain scaling vectors.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// False when max_iters was hit with residual > 10 * eps_max.
    pub converged: bool,
}

impl TransportPlan {
    pub fn n(&self) -> usize {
        self.plan.rows()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let n = self.plan.cols();
        (0..self.plan.rows())
            .map(|i| self.plan.data[i * n..(i + 1) * n].iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let (r, c) = (self.plan.rows(), self.plan.cols());
        let mut sums = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                sums[j] += self.plan.data[i * c + j];
            }
        }
        sums
    }

    /// Max marginal violation against the given marginals.
    pub fn marginal_error(&self, marg: &Marginals) -> f64 {
        let row_err = self
            .row_sums()
            .iter()
            .zip(&marg.mu)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let col_err = self
            .col_sums()
            .iter()
            .zip(&marg.nu)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        row_err.max(col_err)
    }
}

/// The exact maximum-entropy coupling (1/n^2) 11^T.
pub fn uniform_plan(n: usize) -> Result<TransportPlan> {
    if n == 0 {
        return Err(CoreError::InvalidInput("uniform_plan(0)".into()));
    }
    let w = 1.0 / (n * n) as f64;
    Ok(TransportPlan {
        plan: Tensor::matrix(n, n, vec![w; n * n])?,
        iterations: 0,
        residual: 0.0,
        u: vec![0.0; n],
        v: vec![0.0; n],
        converged: true,
    })
}

/// Log-domain Sinkhorn-Knopp. Iterates the dual updates until the L1 change
/// of `v` is at or below `cfg.eps_max` or `cfg.max_iters` is reached.
/// Non-convergence is reported through [`TransportPlan::converged`], not as
/// an error: degradation-oriented callers deliberately run few iterations.
pub fn sinkhorn_log_domain(
    cost: &CostMatrix,
    marg: &Marginals,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    cfg.validate()?;
    let n = cost.n();
    if marg.mu.len() != n || marg.nu.len() != n {
        return Err(CoreError::Dimension(format!(
            "marginals of length {}/{} vs cost {n}x{n}",
            marg.mu.len(),
            marg.nu.len()
        )));
    }
    cost.values.assert_finite("sinkhorn cost")?;

    // A_ij = -lambda * M_ij
    let a = cost.values.scale(-cfg.lambda);
    let a_t = a.transpose();
    let log_mu: Vec<f64> = marg.mu.iter().map(|&x| x.ln()).collect();
    let log_nu: Vec<f64> = marg.nu.iter().map(|&x| x.ln()).collect();

    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;

    for i in 1..=cfg.max_iters {
        // u = log mu - logsumexp_rows(A + 1 v^T)
        let mut shifted = a.clone();
        for r in 0..n {
            for c in 0..n {
                shifted.data[r * n + c] += v[c];
            }
        }
        let lse_u = logsumexp_rows(&shifted)?;
        for r in 0..n {
            u[r] = log_mu[r] - lse_u[r];
        }

        // v = log nu - logsumexp_rows(A^T + 1 u^T)
        let mut shifted_t = a_t.clone();
        for r in 0..n {
            for c in 0..n {
                shifted_t.data[r * n + c] += u[c];
            }
        }
        let lse_v = logsumexp_rows(&shifted_t)?;
        let mut delta = 0.0;
        for r in 0..n {
            let nv = log_nu[r] - lse_v[r];
            delta += (nv - v[r]).abs();
            v[r] = nv;
        }

        residual = delta;
        iterations = i;
        if delta <= cfg.eps_max {
            break;
        }
    }

    // Trailing row update: the loop ends on a column (v) update, which
    // leaves row sums off by up to the residual. One more u-update pins the
    // row marginals exactly, so n-rescaled attention maps are row-stochastic
    // even when the loop is cut off early on purpose.
    {
        let mut shifted = a.clone();
        for r in 0..n {
            for c in 0..n {
                shifted.data[r * n + c] += v[c];
            }
        }
        let lse_u = logsumexp_rows(&shifted)?;
        for r in 0..n {
            u[r] = log_mu[r] - lse_u[r];
        }
    }

    // Materialize in log space, exponentiate once.
    let mut plan = Tensor::zeros(vec![n, n]);
    for r in 0..n {
        for c in 0..n {
            plan.data[r * n + c] = (u[r] + a.data[r * n + c] + v[c]).exp();
        }
    }
    plan.assert_finite("sinkhorn plan")?;

    let converged = residual <= 10.0 * cfg.eps_max;
    Ok(TransportPlan {
        plan,
        iterations,
        residual,
        u,
        v,
        converged,
    })
}

/// Shannon entropy H(P) = -sum P_ij log P_ij, with 0 log 0 := 0.
pub fn plan_entropy(p: &TransportPlan) -> Result<f64> {
    plan_entropy_of(&p.plan)
}

pub fn plan_entropy_of(plan: &Tensor) -> Result<f64> {
    let mut h = 0.0;
    for &x in &plan.data {
        if x < 0.0 {
            return Err(CoreError::InvalidInput(format!("negative plan entry {x}")));
        }
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    Ok(h)
}

/// The regularized objective <P, M> + (1/lambda) <P, log P>, i.e. transport
/// cost minus entropy over lambda; the Sinkhorn plan is its minimizer over
/// the transport polytope.
pub fn ot_objective(p: &TransportPlan, cost: &CostMatrix, lambda: f64) -> Result<f64> {
    if p.plan.shape != cost.values.shape {
        return Err(CoreError::Dimension(format!(
            "plan {:?} vs cost {:?}",
            p.plan.shape, cost.values.shape
        )));
    }
    let transport: f64 = p
        .plan
        .data
        .iter()
        .zip(&cost.values.data)
        .map(|(&pij, &mij)| pij * mij)
        .sum();
    // <P, log P> = -H(P)
    let neg_entropy = -plan_entropy(p)?;
    Ok(transport + neg_entropy / lambda)
}
