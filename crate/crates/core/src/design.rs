//! Semiparametric variance bound and budget-constrained optimal designs.
//!
//! For a design `(p, π)` over a discrete space with known `q`, the bound is
//!
//! ```text
//! V(p, π) = Σ_i q_i² / p_i · (β_i / π_i + α_i)
//! ```
//!
//! where `α_i = Var(E[Y|X,F] | X = i)` is the part of the conditional variance
//! the predictor explains and `β_i = E[Var(Y|X,F) | X = i]` the part it does
//! not. Writing `u_i = p_i π_i` the objective separates into
//! `Σ q_i² β_i / u_i + Σ q_i² α_i / p_i`, subject to `Σ p_i = 1`,
//! `Σ u_i ≤ γ` and `u_i ≤ p_i`. Without the last constraint the optimum is
//! `p ∝ q√α`, `u ∝ q√β`; when it binds the capped points get `π = 1` and
//! `p ∝ q√(α+β)`, and the uncapped ones keep `π_i = t_i / r` with
//! `t_i = √(β_i/α_i)` for a threshold `r` found by a one-dimensional root
//! search. [`optimal_design`] solves this jointly.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::CovariateSpace;

/// Floor applied to `α` and `β` before any ratio is formed.
pub const COMPONENT_FLOOR: f64 = 1e-8;
pub const BUDGET_TOL: f64 = 1e-10;
const SUM_TOL: f64 = 1e-10;

/// Sampling weights `p`, experimentation probabilities `π` and budget `γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRule {
    p: Vec<f64>,
    pi: Vec<f64>,
    gamma: f64,
}

impl DesignRule {
    pub fn new(p: Vec<f64>, pi: Vec<f64>, gamma: f64) -> Result<Self> {
        if p.len() != pi.len() || p.is_empty() {
            return Err(Error::Misaligned(format!("{} sampling weights vs {} probabilities", p.len(), pi.len())));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::invalid(format!("budget {gamma} outside [0, 1]")));
        }
        if let Some(i) = p.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("sampling weight p[{i}] = {} is not positive", p[i])));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(format!("sampling weights sum to {total}")));
        }
        if let Some(i) = pi.iter().position(|&v| !(v > 0.0 && v <= 1.0)) {
            if pi[i] == 0.0 {
                return Err(Error::DegenerateExperimentation(i));
            }
            return Err(Error::invalid(format!("experimentation probability π[{i}] = {} outside (0, 1]", pi[i])));
        }
        let rule = DesignRule { p, pi, gamma };
        let used = rule.budget_usage();
        if used > gamma + BUDGET_TOL {
            return Err(Error::invalid(format!("design uses budget {used} > γ = {gamma}")));
        }
        Ok(rule)
    }

    /// `p = q`, `π ≡ 1`: sample from the population and observe every outcome.
    pub fn full_experimentation(space: &CovariateSpace) -> Self {
        DesignRule {
            p: space.q().to_vec(),
            pi: vec![1.0; space.len()],
            gamma: 1.0,
        }
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// `E_{X~p}[π(X)]`.
    pub fn budget_usage(&self) -> f64 {
        budget_usage(self)
    }

    /// Writes `point,q,p,pi` rows.
    pub fn write_csv<W: Write>(&self, space: &CovariateSpace, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record(["point", "q", "p", "pi"])?;
        for i in 0..self.len() {
            w.write_record(&[
                space.points()[i].to_string(),
                space.q()[i].to_string(),
                self.p[i].to_string(),
                self.pi[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-point predictable (`alpha`) and unpredictable (`beta`) variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl VarianceComponents {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::Misaligned("alpha and beta lengths differ".into()));
        }
        if alpha.iter().chain(&beta).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("variance components must be finite and non-negative"));
        }
        Ok(VarianceComponents { alpha, beta })
    }

    pub fn constant(n: usize, alpha: f64, beta: f64) -> Result<Self> {
        Self::new(vec![alpha; n], vec![beta; n])
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn scaled(&self, s: f64) -> Self {
        VarianceComponents {
            alpha: self.alpha.iter().map(|a| a * s).collect(),
            beta: self.beta.iter().map(|b| b * s).collect(),
        }
    }

    /// `α + β = Var(Y | X)` per point.
    pub fn total(&self) -> Vec<f64> {
        self.alpha.iter().zip(&self.beta).map(|(a, b)| a + b).collect()
    }
}

/// `V(p, π) = Σ_i q_i²/p_i · (β_i/π_i + α_i)` for raw weight vectors.
pub fn bound_for(space: &CovariateSpace, p: &[f64], pi: &[f64], vc: &VarianceComponents) -> Result<f64> {
    let n = space.len();
    if p.len() != n || pi.len() != n || vc.len() != n {
        return Err(Error::Misaligned(format!(
            "space has {n} points; p {}, π {}, components {}",
            p.len(),
            pi.len(),
            vc.len()
        )));
    }
    let mut v = 0.0;
    for i in 0..n {
        if pi[i] == 0.0 {
            return Err(Error::DegenerateExperimentation(i));
        }
        let q = space.q()[i];
        v += q * q / p[i] * (vc.beta[i] / pi[i] + vc.alpha[i]);
    }
    Ok(v)
}

/// Efficiency bound of a design.
pub fn variance_bound(space: &CovariateSpace, design: &DesignRule, vc: &VarianceComponents) -> Result<f64> {
    bound_for(space, design.p(), design.pi(), vc)
}

pub fn budget_usage(design: &DesignRule) -> f64 {
    design.p.iter().zip(&design.pi).map(|(p, pi)| p * pi).sum()
}

/// How the `π ≤ 1` constraint is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapRule {
    /// Solve for `(p, π)` jointly with the cap as a constraint.
    Reoptimize,
    /// Keep `p ∝ q√α` and re-spend budget freed by capped points on the rest.
    RespendFixedSampling,
    /// `π = min{c·√(β/α), 1}` with `c` set as if nothing were capped.
    CapOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalDesign {
    pub design: DesignRule,
    /// Points with `π = 1`.
    pub capped: Vec<usize>,
    /// Points where `α` or `β` was raised to [`COMPONENT_FLOOR`].
    pub floored: Vec<usize>,
    /// Every `α` was at the floor, so sampling fell back to `p = q`.
    pub degenerate_alpha: bool,
}

struct Floored {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    floored: Vec<usize>,
    degenerate_alpha: bool,
}

fn floor_components(space: &CovariateSpace, vc: &VarianceComponents) -> Result<Floored> {
    if vc.len() != space.len() {
        return Err(Error::Misaligned(format!("space has {} points, components {}", space.len(), vc.len())));
    }
    let mut floored = Vec::new();
    let mut degenerate_alpha = true;
    let mut alpha = Vec::with_capacity(vc.len());
    let mut beta = Vec::with_capacity(vc.len());
    for i in 0..vc.len() {
        let (a, b) = (vc.alpha[i], vc.beta[i]);
        if a < COMPONENT_FLOOR || b < COMPONENT_FLOOR {
            floored.push(i);
        }
        if a >= COMPONENT_FLOOR {
            degenerate_alpha = false;
        }
        alpha.push(a.max(COMPONENT_FLOOR));
        beta.push(b.max(COMPONENT_FLOOR));
    }
    Ok(Floored {
        alpha,
        beta,
        floored,
        degenerate_alpha,
    })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!("budget γ = {gamma} must lie in (0, 1]")));
    }
    Ok(())
}

/// Budget-constrained minimizer of `V(p, π)`.
pub fn optimal_design(space: &CovariateSpace, vc: &VarianceComponents, gamma: f64) -> Result<OptimalDesign> {
    optimal_design_with(space, vc, gamma, CapRule::Reoptimize)
}

pub fn optimal_design_with(
    space: &CovariateSpace,
    vc: &VarianceComponents,
    gamma: f64,
    rule: CapRule,
) -> Result<OptimalDesign> {
    check_gamma(gamma)?;
    let fl = floor_components(space, vc)?;
    let q = space.q();
    let n = q.len();

    let (p, pi) = match rule {
        CapRule::Reoptimize => joint_solution(q, &fl.alpha, &fl.beta, gamma),
        CapRule::RespendFixedSampling | CapRule::CapOnly => {
            let p = normalized((0..n).map(|i| q[i] * fl.alpha[i].sqrt()).collect());
            let pi = if rule == CapRule::CapOnly {
                let ratio: Vec<f64> = (0..n).map(|i| (fl.beta[i] / fl.alpha[i]).sqrt()).collect();
                let mean_p: f64 = p.iter().zip(&ratio).map(|(p, r)| p * r).sum();
                ratio.iter().map(|r| (gamma * r / mean_p).min(1.0)).collect()
            } else {
                respend(q, &p, &fl.beta, gamma)
            };
            (p, pi)
        }
    };
    let capped = (0..n).filter(|&i| pi[i] >= 1.0).collect();
    Ok(OptimalDesign {
        design: DesignRule::new(p, pi, gamma)?,
        capped,
        floored: fl.floored,
        degenerate_alpha: fl.degenerate_alpha,
    })
}

/// Best `π` for a fixed sampling distribution `p`: `u = pπ ∝ q√β`, capped at `p`.
pub fn optimal_experimentation(
    space: &CovariateSpace,
    p: &[f64],
    vc: &VarianceComponents,
    gamma: f64,
) -> Result<DesignRule> {
    check_gamma(gamma)?;
    let fl = floor_components(space, vc)?;
    if p.len() != space.len() {
        return Err(Error::Misaligned("sampling weights do not match space".into()));
    }
    let pi = respend(space.q(), p, &fl.beta, gamma);
    DesignRule::new(p.to_vec(), pi, gamma)
}

/// `(1/γ)(Σ q√β)² + (Σ q√α)²`, the bound at the uncapped optimum. When a cap
/// binds the closed form no longer applies and the bound at the solved design
/// is returned instead.
pub fn optimal_bound_closed_form(space: &CovariateSpace, vc: &VarianceComponents, gamma: f64) -> Result<f64> {
    let opt = optimal_design(space, vc, gamma)?;
    if !opt.capped.is_empty() {
        return variance_bound(space, &opt.design, vc);
    }
    let fl = floor_components(space, vc)?;
    let q = space.q();
    let sb: f64 = (0..q.len()).map(|i| q[i] * fl.beta[i].sqrt()).sum();
    let sa: f64 = (0..q.len()).map(|i| q[i] * fl.alpha[i].sqrt()).sum();
    Ok(sb * sb / gamma + sa * sa)
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Water-filling for fixed `p`: `π_i = min{c · q_i√β_i / p_i, 1}` with
/// `Σ p_i π_i = γ`. Caps are applied in decreasing order of the uncapped
/// ratio (ties by index).
fn respend(q: &[f64], p: &[f64], beta: &[f64], gamma: f64) -> Vec<f64> {
    let n = q.len();
    let b: Vec<f64> = (0..n).map(|i| q[i] * beta[i].sqrt()).collect();
    if gamma >= 1.0 {
        return vec![1.0; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| (b[j] / p[j]).total_cmp(&(b[i] / p[i])).then(i.cmp(&j)));
    let mut capped_mass = 0.0;
    let mut free_b: f64 = b.iter().sum();
    let mut k = 0;
    let c = loop {
        let c = (gamma - capped_mass) / free_b;
        let lead = order[k];
        if k + 1 < n && c * b[lead] >= p[lead] {
            capped_mass += p[lead];
            free_b -= b[lead];
            k += 1;
        } else {
            break c;
        }
    };
    let mut pi = vec![1.0; n];
    for &i in &order[k..] {
        pi[i] = (c * b[i] / p[i]).min(1.0);
    }
    fix_budget(p, &mut pi, gamma);
    pi
}

/// Rescales the uncapped probabilities so that `Σ pπ` equals `γ` to rounding.
fn fix_budget(p: &[f64], pi: &mut [f64], gamma: f64) {
    let capped: f64 = p.iter().zip(pi.iter()).filter(|(_, &v)| v >= 1.0).map(|(p, _)| p).sum();
    let free: f64 = p.iter().zip(pi.iter()).filter(|(_, &v)| v < 1.0).map(|(p, v)| p * v).sum();
    if free > 0.0 && gamma > capped {
        let s = (gamma - capped) / free;
        for v in pi.iter_mut().filter(|v| **v < 1.0) {
            *v = (*v * s).min(1.0);
        }
    }
}

/// Joint KKT solution; see the module docs.
fn joint_solution(q: &[f64], alpha: &[f64], beta: &[f64], gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let n = q.len();
    if gamma >= 1.0 {
        let p = normalized((0..n).map(|i| q[i] * (alpha[i] + beta[i]).sqrt()).collect());
        return (p, vec![1.0; n]);
    }
    let a: Vec<f64> = (0..n).map(|i| q[i] * alpha[i].sqrt()).collect();
    let b: Vec<f64> = (0..n).map(|i| q[i] * beta[i].sqrt()).collect();
    let s: Vec<f64> = (0..n).map(|i| q[i] * (alpha[i] + beta[i]).sqrt()).collect();
    let t: Vec<f64> = (0..n).map(|i| (beta[i] / alpha[i]).sqrt()).collect();

    // ascending t; the first k points are uncapped on the segment (t[k-1], t[k]]
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| t[i].total_cmp(&t[j]).then(j.cmp(&i)));

    let mut a_pre = vec![0.0; n + 1];
    let mut b_pre = vec![0.0; n + 1];
    for (k, &i) in order.iter().enumerate() {
        a_pre[k + 1] = a_pre[k] + a[i];
        b_pre[k + 1] = b_pre[k] + b[i];
    }
    let mut s_suf = vec![0.0; n + 1];
    for k in (0..n).rev() {
        s_suf[k] = s_suf[k + 1] + s[order[k]];
    }
    let g = |k: usize, r: f64| -> f64 {
        b_pre[k] / r + (1.0 - gamma) * s_suf[k] / (1.0 + r * r).sqrt() - gamma * a_pre[k]
    };

    // g is continuous and decreasing in r; find the segment holding its root
    let mut k = n;
    for kk in 1..n {
        if g(kk, t[order[kk]]) <= 0.0 {
            k = kk;
            break;
        }
    }
    let r = if k == n {
        b_pre[n] / (gamma * a_pre[n])
    } else {
        let (mut lo, mut hi) = (t[order[k - 1]], t[order[k]]);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(k, mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        0.5 * (lo + hi)
    };

    let mut p = vec![0.0; n];
    let mut pi = vec![1.0; n];
    let cap_scale = 1.0 / (1.0 + r * r).sqrt();
    for (rank, &i) in order.iter().enumerate() {
        if rank < k && t[i] < r {
            p[i] = a[i];
            pi[i] = t[i] / r;
        } else {
            p[i] = s[i] * cap_scale;
        }
    }
    let p = normalized(p);
    fix_budget(&p, &mut pi, gamma);
    (p, pi)
}
