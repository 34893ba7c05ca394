//! Stick-breaking simplex layer and the entropy sparsity term.
//!
//! Break fractions use the Kumaraswamy(1, beta) inverse CDF,
//! `v = 1 - (1 - u)^(1/beta)`. The last piece takes whatever stick remains, so
//! the output always sums to one.
//!
//! Internally the layer works on `a_j = -ln(1 - u_j) / beta`, which gives
//! `v_j = 1 - exp(-a_j)` and a remaining-stick factor `w_j = exp(-a_j)`. When
//! `u` comes from a sigmoid over `z`, `-ln(1 - u) = softplus(z)`, so nothing
//! is lost to cancellation even for saturated heads.

use crate::error::{Error, Result};

use super::layers::{sigmoid, softplus};

/// Default perturbation added to each proportion before taking logs.
pub const ENTROPY_EPS: f64 = 1e-9;

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct StickCache {
    /// `a_j` for the `c - 1` free breaks.
    pub a: Vec<f64>,
    /// `w_j = exp(-a_j)`.
    pub w: Vec<f64>,
    /// Remaining stick before break `j`, `c` entries.
    pub rem: Vec<f64>,
    pub s: Vec<f64>,
}

fn break_from_exponents(a: Vec<f64>, pieces: usize) -> StickCache {
    let mut w = Vec::with_capacity(pieces - 1);
    let mut rem = Vec::with_capacity(pieces);
    let mut s = Vec::with_capacity(pieces);
    let mut r = 1.0;
    for &aj in &a {
        let wj = (-aj).exp();
        let vj = -(-aj).exp_m1();
        rem.push(r);
        s.push(vj * r);
        w.push(wj);
        r *= wj;
    }
    rem.push(r);
    s.push(r);
    StickCache { a, w, rem, s }
}

/// Stick-breaking from break probabilities `u_j in (0, 1)` and a shared
/// concentration `beta > 0`. `u` has one entry per piece; the last entry is
/// not used because the final piece closes the stick.
pub fn stick_break(u: &[f64], beta: f64) -> Result<Vec<f64>> {
    if u.is_empty() {
        return Err(Error::Domain {
            op: "stick_break",
            reason: "need at least one piece".into(),
        });
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Domain {
            op: "stick_break",
            reason: format!("beta must be positive, got {beta}"),
        });
    }
    if let Some(bad) = u.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain {
            op: "stick_break",
            reason: format!("u must lie in (0, 1), got {bad}"),
        });
    }
    let a = u[..u.len() - 1]
        .iter()
        .map(|&uj| -(-uj).ln_1p() / beta)
        .collect();
    Ok(break_from_exponents(a, u.len()).s)
}

/// Network-side variant: `u_j = sigmoid(z_j)`, `beta = softplus(z_beta)`.
pub(crate) fn stick_from_logits(z: &[f64], beta: f64) -> StickCache {
    let a = z[..z.len() - 1].iter().map(|&zj| softplus(zj) / beta).collect();
    break_from_exponents(a, z.len())
}

/// Backward pass of [`stick_from_logits`]. Returns the gradient with respect
/// to every logit (the closing one is always zero) and to `beta`.
pub(crate) fn stick_backward(
    cache: &StickCache,
    z: &[f64],
    beta: f64,
    grad_s: &[f64],
) -> (Vec<f64>, f64) {
    let c = grad_s.len();
    let mut grad_z = vec![0.0; c];
    let mut grad_beta = 0.0;
    // gradient w.r.t. the remaining stick after the current break
    let mut grad_rem = grad_s[c - 1];
    for j in (0..c - 1).rev() {
        let w = cache.w[j];
        let v = 1.0 - w;
        let r = cache.rem[j];
        let grad_v = grad_s[j] * r;
        let grad_w = grad_rem * r;
        grad_rem = grad_s[j] * v + grad_rem * w;
        // dv/da = w, dw/da = -w
        let grad_a = (grad_v - grad_w) * w;
        grad_z[j] = grad_a * sigmoid(z[j]) / beta;
        grad_beta -= grad_a * cache.a[j] / beta;
    }
    (grad_z, grad_beta)
}

/// Shannon entropy (nats) of the normalized, perturbed proportions
/// `(|s_j| + eps) / sum_k (|s_k| + eps)`.
pub fn entropy(s: &[f64], eps: f64) -> f64 {
    let total: f64 = s.iter().map(|v| v.abs() + eps).sum();
    -s.iter()
        .map(|v| {
            let p = (v.abs() + eps) / total;
            if p > 0.0 {
                p * p.ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// Gradient of [`entropy`] with respect to `s`.
pub(crate) fn entropy_grad(s: &[f64], eps: f64) -> Vec<f64> {
    let total: f64 = s.iter().map(|v| v.abs() + eps).sum();
    let p: Vec<f64> = s.iter().map(|v| (v.abs() + eps) / total).collect();
    // dH/dp_j = -(ln p_j + 1)
    let g: Vec<f64> = p.iter().map(|&pj| -(pj.ln() + 1.0)).collect();
    let mean: f64 = g.iter().zip(&p).map(|(gj, pj)| gj * pj).sum();
    s.iter()
        .zip(&g)
        .map(|(&v, &gj)| {
            let sign = if v < 0.0 { -1.0 } else { 1.0 };
            sign * (gj - mean) / total
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_break_takes_whole_stick() {
        let s = stick_break(&[1.0 - 1e-12, 0.3, 0.6, 0.2], 1.0).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-11);
        assert!(s[1..].iter().all(|&v| v < 1e-11));
    }

    #[test]
    fn unit_beta_uses_u_directly() {
        let s = stick_break(&[0.5, 0.5, 0.5], 1.0).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15);
        assert!((s[1] - 0.25).abs() < 1e-15);
        assert!((s[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        assert!(stick_break(&[0.5, 1.0], 1.0).is_err());
        assert!(stick_break(&[0.0, 0.5], 1.0).is_err());
        assert!(stick_break(&[0.5, 0.5], 0.0).is_err());
        assert!(stick_break(&[0.5, 0.5], -1.0).is_err());
        assert!(stick_break(&[], 1.0).is_err());
    }

    #[test]
    fn logit_form_matches_probability_form() {
        let z = [0.3, -1.2, 2.0, 0.0];
        let u: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let a = stick_break(&u, 0.7).unwrap();
        let b = stick_from_logits(&z, 0.7).s;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn entropy_values() {
        assert!(entropy(&[1.0, 0.0, 0.0], 0.0).abs() < 1e-15);
        assert!(entropy(&[1.0, 0.0, 0.0], 1e-12) < 1e-9);
        let c = 7;
        let uniform = vec![1.0 / c as f64; c];
        assert!((entropy(&uniform, ENTROPY_EPS) - (c as f64).ln()).abs() < 1e-12);
        // -(0.5 ln 0.5 + 2 * 0.25 ln 0.25)
        let expected = -(0.5 * 0.5f64.ln() + 0.5 * 0.25f64.ln());
        assert!((entropy(&[0.5, 0.25, 0.25], ENTROPY_EPS) - expected).abs() < 1e-6);
        assert!((entropy(&[0.5, 0.25, 0.25], ENTROPY_EPS) - 1.0397).abs() < 1e-3);
    }

    #[test]
    fn entropy_grad_matches_differences() {
        let s = [0.6, 0.3, 0.1, 1e-4];
        let g = entropy_grad(&s, ENTROPY_EPS);
        for j in 0..s.len() {
            let h = 1e-7;
            let mut p = s;
            let mut m = s;
            p[j] += h;
            m[j] -= h;
            let fd = (entropy(&p, ENTROPY_EPS) - entropy(&m, ENTROPY_EPS)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6, "{j}: {fd} vs {}", g[j]);
        }
    }

    proptest! {
        #[test]
        fn output_is_on_simplex(
            u in proptest::collection::vec(1e-6f64..1.0 - 1e-6, 1..30),
            beta in 1e-3f64..50.0,
        ) {
            let s = stick_break(&u, beta).unwrap();
            prop_assert!(s.iter().all(|&v| v >= 0.0));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn entropy_is_bounded(raw in proptest::collection::vec(0.0f64..1.0, 1..20)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-9);
            let s: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let h = entropy(&s, 0.0);
            prop_assert!(h >= -1e-12);
            prop_assert!(h <= (s.len() as f64).ln() + 1e-9);
        }
    }
}
