//! CTR and CTCVR cross-entropy losses, the in-batch dynamically weighted
//! CTCVR loss and the per-domain loss-scale diagnostic.
//!
//! The weighted CTCVR loss is `Σ_c I(N_c>0) · mean_{n∈c} l_n`, written
//! equivalently as `(1/N) Σ_n (N/N_c(n)) · l_n`. It is a sum of per-domain
//! means, not their average, so its scale grows with the number of domains
//! present in a batch.

use crate::domains::{dynamic_weights, BatchMasks, DomainId};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    None,
    Dynamic,
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

#[inline]
fn is_clamped(p: f64) -> bool {
    !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p)
}

/// `-[y ln p + (1-y) ln(1-p)]` with clamped `p`.
#[inline]
pub fn binary_cross_entropy(p: f64, label: f64) -> f64 {
    let p = clamp_prob(p);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

pub fn ctr_instance_losses(p_ctr: &[f64], y: &[f64]) -> Vec<f64> {
    p_ctr.iter().zip(y).map(|(&p, &y)| binary_cross_entropy(p, y)).collect()
}

/// Per-instance CTCVR losses on `p_ctr · p_cvr` with label `y · z`.
pub fn ctcvr_instance_losses(p_ctr: &[f64], p_cvr: &[f64], y: &[f64], z: &[f64]) -> Vec<f64> {
    p_ctr
        .iter()
        .zip(p_cvr)
        .zip(y.iter().zip(z))
        .map(|((&p, &r), (&y, &z))| binary_cross_entropy(p * r, y * z))
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn ctr_loss(p_ctr: &[f64], y: &[f64]) -> f64 {
    mean(&ctr_instance_losses(p_ctr, y))
}

/// `(1/N) Σ_n w_n l_n`; `w_n = 1` for [`Weighting::None`].
pub fn weighted_mean(losses: &[f64], masks: &BatchMasks, weighting: Weighting) -> f64 {
    match weighting {
        Weighting::None => mean(losses),
        Weighting::Dynamic => {
            let w = dynamic_weights(masks);
            let n = losses.len() as f64;
            losses.iter().zip(&w).map(|(l, w)| w * l).sum::<f64>() / n
        }
    }
}

pub fn ctcvr_loss(
    p_ctr: &[f64],
    p_cvr: &[f64],
    y: &[f64],
    z: &[f64],
    masks: &BatchMasks,
    weighting: Weighting,
) -> f64 {
    weighted_mean(&ctcvr_instance_losses(p_ctr, p_cvr, y, z), masks, weighting)
}

/// Mean loss of each non-empty domain, in flattened domain order.
pub fn per_domain_means(losses: &[f64], masks: &BatchMasks) -> Vec<(DomainId, f64)> {
    masks
        .groups()
        .iter()
        .map(|g| {
            let s: f64 = g.rows.iter().map(|&r| losses[r]).sum();
            (g.domain, s / g.count() as f64)
        })
        .collect()
}

/// `Σ_c I(N_c>0) · mean_c(l)`, the domain-level form of the weighted loss.
pub fn sum_of_domain_means(losses: &[f64], masks: &BatchMasks) -> f64 {
    per_domain_means(losses, masks).iter().map(|(_, m)| m).sum()
}

/// `∂l/∂g` of the CTR loss w.r.t. the CTR logit.
#[inline]
pub fn ctr_logit_grad(p_ctr: f64, y: f64) -> f64 {
    if is_clamped(p_ctr) {
        0.0
    } else {
        p_ctr - y
    }
}

/// `(∂l/∂g, ∂l/∂h)` of the CTCVR loss w.r.t. the CTR logit `g` and the CVR
/// logit `h`, where the CTCVR probability is `σ(g)·σ(h)`.
#[inline]
pub fn ctcvr_logit_grads(p_ctr: f64, p_cvr: f64, label: f64) -> (f64, f64) {
    let q = p_ctr * p_cvr;
    if is_clamped(q) {
        return (0.0, 0.0);
    }
    // dl/dq · dq/dg, with dq/dg = q(1-p) and dq/dh = q(1-r)
    let dl_dq_times_q = -label + (1.0 - label) * q / (1.0 - q);
    (dl_dq_times_q * (1.0 - p_ctr), dl_dq_times_q * (1.0 - p_cvr))
}

/// Loss components of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub ctr: f64,
    pub ctcvr: f64,
    pub ctcvr_weighted: f64,
    pub total: f64,
    pub alpha: f64,
    pub per_domain_ctcvr: Vec<(DomainId, f64)>,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.ctr.is_finite() && self.ctcvr.is_finite() && self.ctcvr_weighted.is_finite() && self.total.is_finite()
    }
}

/// Builds the breakdown; `total = ctr + α · (weighted or plain CTCVR)`.
pub fn breakdown(
    ctr_losses: &[f64],
    ctcvr_losses: &[f64],
    masks: &BatchMasks,
    weighting: Weighting,
    alpha: f64,
) -> LossBreakdown {
    let ctr = mean(ctr_losses);
    let ctcvr = mean(ctcvr_losses);
    let ctcvr_weighted = weighted_mean(ctcvr_losses, masks, Weighting::Dynamic);
    let used = match weighting {
        Weighting::None => ctcvr,
        Weighting::Dynamic => ctcvr_weighted,
    };
    LossBreakdown {
        ctr,
        ctcvr,
        ctcvr_weighted,
        total: ctr + alpha * used,
        alpha,
        per_domain_ctcvr: per_domain_means(ctcvr_losses, masks),
    }
}

/// Contribution of one domain to the unweighted batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainContribution {
    pub domain: DomainId,
    pub count: usize,
    pub mean_loss: f64,
    /// `Σ_{n∈c} l_n / N`, as the unweighted loss applies it.
    pub contribution: f64,
    /// `(N_c / N) · mean_loss`.
    pub scaled_mean: f64,
}

/// How much each domain actually contributes to the unweighted mean loss.
///
/// Under plain averaging a domain's losses are normalized by the batch size
/// `N` rather than its own count `N_c`, so each domain's effective loss is
/// its mean shrunk by `N_c / N`.
pub fn loss_scale_diagnostic(losses: &[f64], masks: &BatchMasks) -> Vec<DomainContribution> {
    let n = losses.len() as f64;
    masks
        .groups()
        .iter()
        .map(|g| {
            let sum: f64 = g.rows.iter().map(|&r| losses[r]).sum();
            let mean_loss = sum / g.count() as f64;
            DomainContribution {
                domain: g.domain,
                count: g.count(),
                mean_loss,
                contribution: sum / n,
                scaled_mean: g.count() as f64 / n * mean_loss,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{compute_masks, DomainRegistry};
    use crate::tensor::{sigmoid, RngState};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn ctr_loss_examples() {
        assert!(close(ctr_loss(&[0.5; 4], &[1.0, 0.0, 1.0, 0.0]), std::f64::consts::LN_2, 1e-15));
        assert!(ctr_loss(&[1.0, 0.0], &[1.0, 0.0]) <= 1e-11);
        let l = ctr_loss(&[0.9, 0.2], &[1.0, 0.0]);
        assert!(close(l, -(0.9f64.ln() + 0.8f64.ln()) / 2.0, 1e-15));
        assert!(close(l, 0.164252, 1e-6));
        assert!(binary_cross_entropy(0.0, 1.0).is_finite());
    }

    fn mixed_batch_example() -> (DomainRegistry, BatchMasks) {
        let reg = DomainRegistry::new(["t1", "t2"], ["s1", "s2"]).unwrap();
        let ids: Vec<_> = [("t1", "s1"), ("t2", "s1"), ("t1", "s1"), ("t2", "s2")]
            .iter()
            .map(|(t, s)| reg.domain_of(t, s).unwrap())
            .collect();
        let masks = compute_masks(&ids, &reg).unwrap();
        (reg, masks)
    }

    #[test]
    fn dynamic_loss_on_worked_example() {
        let (_, masks) = mixed_batch_example();
        let a = [0.3, 1.7, 0.9, 0.05];
        // Three non-empty domains; the weighted loss sums their means
        // without dividing by the domain count.
        let expected = (a[0] + a[2]) / 2.0 + a[1] + a[3];
        assert!(close(weighted_mean(&a, &masks, Weighting::Dynamic), expected, 1e-15));
        assert!(close(sum_of_domain_means(&a, &masks), expected, 1e-15));
    }

    #[test]
    fn homogeneous_dynamic_equals_plain() {
        let reg = DomainRegistry::with_counts(2, 2).unwrap();
        let ids = vec![crate::domains::DomainId::new(1, 0); 7];
        let masks = compute_masks(&ids, &reg).unwrap();
        let l = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
        assert_eq!(weighted_mean(&l, &masks, Weighting::Dynamic), weighted_mean(&l, &masks, Weighting::None));
    }

    #[test]
    fn ctcvr_uses_product_probability() {
        let (_, masks) = mixed_batch_example();
        let p = [0.5, 0.4, 0.2, 0.9];
        let r = [0.1, 0.5, 0.3, 0.8];
        let y = [1.0, 0.0, 1.0, 1.0];
        let z = [1.0, 0.0, 0.0, 1.0];
        let expected = (-(0.05f64.ln()) - (0.8f64).ln() - (0.94f64).ln() - (0.72f64).ln()) / 4.0;
        assert!(close(ctcvr_loss(&p, &r, &y, &z, &masks, Weighting::None), expected, 1e-12));
    }

    #[test]
    fn diagnostic_examples() {
        let reg = DomainRegistry::with_counts(2, 1).unwrap();
        let ids: Vec<_> = [0, 0, 1, 0].iter().map(|&t| crate::domains::DomainId::new(t, 0)).collect();
        let masks = compute_masks(&ids, &reg).unwrap();
        let a_bar = 0.8;
        let report = loss_scale_diagnostic(&[a_bar; 4], &masks);
        assert!(close(report[0].contribution, 0.75 * a_bar, 1e-15));
        assert!(close(report[1].contribution, 0.25 * a_bar, 1e-15));

        let one = compute_masks(&ids[..2], &reg).unwrap();
        let l = [0.2, 0.6];
        let r = loss_scale_diagnostic(&l, &one);
        assert_eq!(r.len(), 1);
        assert!(close(r[0].contribution, 0.4, 1e-15));
    }

    #[test]
    fn breakdown_total_follows_mode() {
        let (_, masks) = mixed_batch_example();
        let ctr = [0.1, 0.2, 0.3, 0.4];
        let cv = [1.0, 2.0, 3.0, 4.0];
        let plain = breakdown(&ctr, &cv, &masks, Weighting::None, 0.5);
        assert!(close(plain.total, 0.25 + 0.5 * 2.5, 1e-15));
        let dynamic = breakdown(&ctr, &cv, &masks, Weighting::Dynamic, 0.5);
        assert!(close(dynamic.total, 0.25 + 0.5 * (2.0 + 2.0 + 4.0), 1e-15));
        assert_eq!(dynamic.per_domain_ctcvr.len(), 3);
    }

    /// Central differences of the instance losses w.r.t. both logits.
    #[test]
    fn logit_gradients_match_finite_differences() {
        let mut rng = RngState::new(8);
        for _ in 0..200 {
            let g = rng.uniform(-4.0, 4.0);
            let h = rng.uniform(-4.0, 4.0);
            let y = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
            let label = if y == 1.0 && rng.bernoulli(0.5) { 1.0 } else { 0.0 };
            let step = 1e-6;
            let f_ctr = |g: f64| binary_cross_entropy(sigmoid(g), y);
            let num = (f_ctr(g + step) - f_ctr(g - step)) / (2.0 * step);
            assert!(close(ctr_logit_grad(sigmoid(g), y), num, 1e-7));

            let f = |g: f64, h: f64| binary_cross_entropy(sigmoid(g) * sigmoid(h), label);
            let dg = (f(g + step, h) - f(g - step, h)) / (2.0 * step);
            let dh = (f(g, h + step) - f(g, h - step)) / (2.0 * step);
            let (ag, ah) = ctcvr_logit_grads(sigmoid(g), sigmoid(h), label);
            assert!(close(ag, dg, 1e-7), "{ag} vs {dg}");
            assert!(close(ah, dh, 1e-7), "{ah} vs {dh}");
        }
    }
}
