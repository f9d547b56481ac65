//! Entropy of an action-value distribution from its quantile samples, and
//! the exponential-entropy loss weights derived from it.

use serde::{Deserialize, Serialize};

use crate::nn::Tensor;

pub const NORMALIZE_GUARD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyVariant {
    /// `−Σ ς̂_n · D̄_n · log ς̂_n`.
    Verbatim,
    /// `−Σ ς̂_n · log(ς̂_n / D̄_n)`, reading `ς̂_n / D̄_n` as a density.
    Density,
}

/// Entropy estimate from `(τ_n, D^{τ_n})` pairs.
///
/// Pairs are sorted by value; the sum runs over `n = 2..N`. Terms whose mass
/// `ς̂_n` is not positive (possible when the learned quantile function is not
/// monotone in τ) contribute nothing, as do density terms with `D̄_n = 0`.
pub fn estimate_entropy(taus: &[f64], values: &[f64], variant: EntropyVariant) -> f64 {
    assert_eq!(taus.len(), values.len(), "one value per level");
    let mut pairs: Vec<(f64, f64)> = values.iter().copied().zip(taus.iter().copied()).collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let mut h = 0.0;
    let mut prev_bar = pairs.first().map_or(0.0, |p| p.1);
    for n in 1..pairs.len() {
        let bar = pairs[n].1 - pairs[n - 1].1;
        let mass = 0.5 * (prev_bar + bar);
        prev_bar = bar;
        let dd = pairs[n].0 - pairs[n - 1].0;
        if mass <= 0.0 {
            continue;
        }
        h -= match variant {
            EntropyVariant::Verbatim => mass * dd * mass.ln(),
            EntropyVariant::Density => {
                if dd <= 0.0 {
                    continue;
                }
                mass * (mass / dd).ln()
            }
        };
    }
    h
}

/// Entropy of every row of a `B x N` quantile matrix.
pub fn entropy_rows(taus: &[f64], values: &Tensor, variant: EntropyVariant) -> Vec<f64> {
    (0..values.rows())
        .map(|r| estimate_entropy(taus, values.row(r), variant))
        .collect()
}

/// `H̃ = H / (|batch mean| + 1e-6)`.
pub fn normalize_entropy(h: &[f64], batch_mean: f64) -> Vec<f64> {
    let d = batch_mean.abs() + NORMALIZE_GUARD;
    h.iter().map(|v| v / d).collect()
}

/// `w = exp(−H̃)`.
pub fn entropy_weights(h_tilde: &[f64]) -> Vec<f64> {
    h_tilde.iter().map(|v| (-v).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_worked_value() {
        let taus = [0.25, 0.5, 0.75, 1.0];
        let h = estimate_entropy(&taus, &taus, EntropyVariant::Verbatim);
        assert!((h - 3.0 * 0.25 * 0.25 * 4f64.ln()).abs() < 1e-12);
        assert!((h - 0.2599).abs() < 1e-4);
    }

    #[test]
    fn duplicates_contribute_nothing() {
        let taus = [0.2, 0.4, 0.6];
        assert_eq!(estimate_entropy(&taus, &[1.0, 1.0, 1.0], EntropyVariant::Verbatim), 0.0);
        assert_eq!(estimate_entropy(&taus, &[1.0, 1.0, 1.0], EntropyVariant::Density), 0.0);
    }

    #[test]
    fn normalization_and_weights() {
        assert!((normalize_entropy(&[1.0], 2.0)[0] - 0.5).abs() < 1e-6);
        assert_eq!(normalize_entropy(&[0.0], -3.0)[0], 0.0);
        assert!(normalize_entropy(&[2.0], 0.0)[0].is_finite());
        assert_eq!(entropy_weights(&[0.0])[0], 1.0);
        assert!((entropy_weights(&[2f64.ln()])[0] - 0.5).abs() < 1e-15);
        let w = entropy_weights(&[0.1, 0.2]);
        assert!(w[0] > w[1]);
    }

    #[test]
    fn density_variant_on_uniform_distribution() {
        // U(0, 1) has zero differential entropy; the density reading recovers it.
        let n = 200;
        let taus: Vec<f64> = (1..=n).map(|k| k as f64 / n as f64).collect();
        let h = estimate_entropy(&taus, &taus, EntropyVariant::Density);
        assert!(h.abs() < 1e-9, "{h}");
        let wide: Vec<f64> = taus.iter().map(|t| 4.0 * t).collect();
        let hw = estimate_entropy(&taus, &wide, EntropyVariant::Density);
        assert!((hw - 4f64.ln() * (1.0 - 1.0 / n as f64)).abs() < 1e-9, "{hw}");
    }
}
