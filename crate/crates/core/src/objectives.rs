//! Loss terms for the prompt bank and the basis.
//!
//! The prompt-bank objective is minimized in its purity-maximizing form,
//! `L_U + λ_reg·L_reg + λ_div·L_div` with `L_U = −mean purity`.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, ProdgError, Result};
use crate::promptbank::PromptBank;

/// Guard on vector norms in cosine similarities.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_reg: f64,
    pub lambda_div: f64,
    pub enable_u: bool,
    pub enable_reg: bool,
    pub enable_div: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_reg: 0.5, lambda_div: 0.1, enable_u: true, enable_reg: true, enable_div: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.enable_u || self.enable_reg || self.enable_div) {
            return Err(ProdgError::InvalidConfig("at least one loss term must be enabled".into()));
        }
        for (name, v) in [("lambda_reg", self.lambda_reg), ("lambda_div", self.lambda_div)] {
            if !v.is_finite() || v < 0.0 {
                return Err(ProdgError::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Effective weights `(w_u, w_reg, w_div)`; disabled terms weigh zero.
    pub fn weights(&self) -> (f64, f64, f64) {
        (
            if self.enable_u { 1.0 } else { 0.0 },
            if self.enable_reg { self.lambda_reg } else { 0.0 },
            if self.enable_div { self.lambda_div } else { 0.0 },
        )
    }

    /// Short tag such as `U+reg+div`.
    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if self.enable_u {
            parts.push("U");
        }
        if self.enable_reg {
            parts.push("reg");
        }
        if self.enable_div {
            parts.push("div");
        }
        parts.join("+")
    }
}

/// The seven non-empty loss subsets, labelled (i) … (vii).
pub fn ablation_variants(base: &LossConfig) -> [(&'static str, LossConfig); 7] {
    let with = |u, r, d| LossConfig { enable_u: u, enable_reg: r, enable_div: d, ..*base };
    [
        ("i", with(true, false, false)),
        ("ii", with(true, true, false)),
        ("iii", with(true, false, true)),
        ("iv", with(false, true, false)),
        ("v", with(false, false, true)),
        ("vi", with(false, true, true)),
        ("vii", with(true, true, true)),
    ]
}

/// Negative mean purity over the batch.
pub fn loss_u(purities: &[f64]) -> Result<f64> {
    if purities.is_empty() {
        return Err(invalid_arg("loss_U needs a nonempty batch"));
    }
    Ok(-purities.iter().sum::<f64>() / purities.len() as f64)
}

/// Mean of per-entry delta penalties over the batch's channel list
/// (channels repeat once per image).
pub fn loss_reg(bank: &PromptBank, channels: &[usize]) -> Result<f64> {
    if channels.is_empty() {
        return Err(invalid_arg("loss_reg needs a nonempty batch"));
    }
    let mut total = 0.0;
    for &c in channels {
        total += bank.entry(c)?.delta_penalty();
    }
    Ok(total / channels.len() as f64)
}

/// ε-guarded cosine similarity.
pub fn cosine(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> f64 {
    let na = a.dot(a).sqrt().max(COSINE_EPS);
    let nb = b.dot(b).sqrt().max(COSINE_EPS);
    a.dot(b) / (na * nb)
}

/// Gradients of [`cosine`] with respect to both arguments.
pub fn cosine_grad(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
    let ra = a.dot(a).sqrt();
    let rb = b.dot(b).sqrt();
    let na = ra.max(COSINE_EPS);
    let nb = rb.max(COSINE_EPS);
    let dot = a.dot(b);
    let mut ga = b.mapv(|v| v / (na * nb));
    if ra > COSINE_EPS {
        ga -= &a.mapv(|v| dot * v / (na * na * na * nb));
    }
    let mut gb = a.mapv(|v| v / (na * nb));
    if rb > COSINE_EPS {
        gb -= &b.mapv(|v| dot * v / (nb * nb * nb * na));
    }
    (ga, gb)
}

/// Mean cosine similarity over pairs of pooled feature vectors.
pub fn loss_div(pairs: &[(ArrayView1<f64>, ArrayView1<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid_arg("loss_div needs at least one pair"));
    }
    Ok(pairs.iter().map(|(a, b)| cosine(a, b)).sum::<f64>() / pairs.len() as f64)
}

/// Diversity loss over groups of K ≥ 2 variations of the same channel: the
/// mean over groups of the mean pairwise cosine within each group. Returns
/// the value and the gradient for every vector.
pub fn diversity_groups(groups: &[Vec<Array1<f64>>]) -> Result<(f64, Vec<Vec<Array1<f64>>>)> {
    if groups.is_empty() {
        return Err(invalid_arg("diversity needs at least one group"));
    }
    let g_count = groups.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(groups.len());
    for group in groups {
        let k = group.len();
        if k < 2 {
            return Err(invalid_arg("each diversity group needs at least two variations"));
        }
        let pairs = (k * (k - 1) / 2) as f64;
        let mut gg: Vec<Array1<f64>> = group.iter().map(|v| Array1::zeros(v.len())).collect();
        for i in 0..k {
            for j in (i + 1)..k {
                value += cosine(&group[i].view(), &group[j].view()) / (pairs * g_count);
                let (ga, gb) = cosine_grad(&group[i].view(), &group[j].view());
                gg[i].scaled_add(1.0 / (pairs * g_count), &ga);
                gg[j].scaled_add(1.0 / (pairs * g_count), &gb);
            }
        }
        grads.push(gg);
    }
    Ok((value, grads))
}

/// `L_U + λ_reg·L_reg + λ_div·L_div` with disabled terms contributing zero.
pub fn combined_prompt_loss(l_u: f64, l_reg: f64, l_div: f64, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if ![l_u, l_reg, l_div].iter().all(|v| v.is_finite()) {
        return Err(invalid_arg("loss terms must be finite"));
    }
    let (wu, wr, wd) = cfg.weights();
    let mut total = 0.0;
    if wu != 0.0 {
        total += wu * l_u;
    }
    if wr != 0.0 {
        total += wr * l_reg;
    }
    if wd != 0.0 {
        total += wd * l_div;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::EncoderDims;
    use crate::promptbank::BankConfig;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn loss_u_examples() {
        assert_eq!(loss_u(&[1.0, 1.0, 1.0]).unwrap(), -1.0);
        assert_abs_diff_eq!(loss_u(&[0.8, 0.6]).unwrap(), -0.7, epsilon = 1e-15);
        assert_eq!(loss_u(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(loss_u(&[]).is_err());
    }

    #[test]
    fn loss_reg_examples() {
        let dims = EncoderDims { token_count: 2, embed_dim: 2, pooled_dim: 1 };
        let mut bank = PromptBank::new(2, dims, &BankConfig { rank: 1, ..Default::default() }, 0).unwrap();
        assert_eq!(loss_reg(&bank, &[0, 1]).unwrap(), 0.0);
        {
            let t = bank.theta_mut(0).unwrap();
            t.lora_a.fill(1.0);
            t.lora_b.fill(2.0);
        }
        assert_abs_diff_eq!(bank.entry(0).unwrap().delta_penalty(), 4.0);
        assert_abs_diff_eq!(loss_reg(&bank, &[0, 1]).unwrap(), 2.0);
        let before = loss_reg(&bank, &[0, 1]).unwrap();
        bank.theta_mut(1).unwrap().delta_ppe[0] = 0.3;
        assert!(loss_reg(&bank, &[0, 1]).unwrap() >= before);
    }

    #[test]
    fn loss_div_examples() {
        let a = array![1.0, 0.0];
        let b = array![0.0, 1.0];
        let c = array![1.0, 1.0];
        assert_abs_diff_eq!(loss_div(&[(a.view(), a.view())]).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(loss_div(&[(a.view(), b.view())]).unwrap(), 0.0);
        assert_abs_diff_eq!(loss_div(&[(a.view(), c.view())]).unwrap(), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        let z = array![0.0, 0.0];
        assert_eq!(loss_div(&[(z.view(), a.view())]).unwrap(), 0.0);
    }

    #[test]
    fn combined_examples() {
        let full = LossConfig::default();
        assert_abs_diff_eq!(combined_prompt_loss(-0.7, 2.0, 0.5, &full).unwrap(), 0.35, epsilon = 1e-12);
        let only_u = LossConfig { enable_reg: false, enable_div: false, ..full };
        assert_eq!(combined_prompt_loss(-0.7, 2.0, 0.5, &only_u).unwrap(), -0.7);
        let zero = LossConfig { lambda_reg: 0.0, lambda_div: 0.0, ..full };
        assert_eq!(combined_prompt_loss(-0.7, 2.0, 0.5, &zero).unwrap(), -0.7);
        let none = LossConfig { enable_u: false, enable_reg: false, enable_div: false, ..full };
        assert!(matches!(combined_prompt_loss(-0.7, 2.0, 0.5, &none), Err(ProdgError::InvalidConfig(_))));
    }

    #[test]
    fn ablations_are_the_seven_nonempty_subsets() {
        let v = ablation_variants(&LossConfig::default());
        let mut tags: Vec<String> = v.iter().map(|(_, c)| c.tag()).collect();
        tags.sort();
        tags.dedup();
        assert_eq!(tags.len(), 7);
        assert!(v.iter().all(|(_, c)| c.validate().is_ok()));
    }

    #[test]
    fn cosine_grad_matches_finite_differences() {
        let a = array![0.3, -1.2, 2.0];
        let b = array![1.1, 0.4, -0.5];
        let (ga, gb) = cosine_grad(&a.view(), &b.view());
        let h = 1e-6;
        for i in 0..3 {
            let mut p = a.clone();
            p[i] += h;
            let mut m = a.clone();
            m[i] -= h;
            let fd = (cosine(&p.view(), &b.view()) - cosine(&m.view(), &b.view())) / (2.0 * h);
            assert_abs_diff_eq!(fd, ga[i], epsilon = 1e-8);
            let mut p = b.clone();
            p[i] += h;
            let mut m = b.clone();
            m[i] -= h;
            let fd = (cosine(&a.view(), &p.view()) - cosine(&a.view(), &m.view())) / (2.0 * h);
            assert_abs_diff_eq!(fd, gb[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn diversity_groups_reduce_to_pairs() {
        let g = vec![vec![array![1.0, 0.0], array![1.0, 1.0]], vec![array![0.0, 2.0], array![0.0, 3.0]]];
        let (v, _) = diversity_groups(&g).unwrap();
        let pairs = [(g[0][0].view(), g[0][1].view()), (g[1][0].view(), g[1][1].view())];
        assert_abs_diff_eq!(v, loss_div(&pairs).unwrap(), epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn loss_u_is_permutation_invariant(mut p in proptest::collection::vec(-1.0f64..1.0, 1..20)) {
            let a = loss_u(&p).unwrap();
            p.reverse();
            prop_assert!((a - loss_u(&p).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn loss_div_is_scale_invariant(
            a in proptest::collection::vec(0.1f64..2.0, 4),
            b in proptest::collection::vec(0.1f64..2.0, 4),
            s in 0.01f64..100.0,
        ) {
            let a = Array1::from(a);
            let b = Array1::from(b);
            let scaled = &a * s;
            let l1 = loss_div(&[(a.view(), b.view())]).unwrap();
            let l2 = loss_div(&[(scaled.view(), b.view())]).unwrap();
            prop_assert!((l1 - l2).abs() < 1e-12);
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&l1));
        }
    }
}
