//! Percentile bootstrap and the one-sided Wilcoxon signed-rank test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
    /// `high - low`; tables print half of it after the `±`.
    pub width: f64,
}

impl BootstrapCi {
    pub fn half_width(&self) -> f64 {
        self.width / 2.0
    }
}

/// Percentile bootstrap CI of the accuracy of a correctness vector.
pub fn bootstrap_ci(correct: &[bool], n_boot: usize, level: f64, seed: u64) -> Result<BootstrapCi> {
    let values: Vec<f64> = correct.iter().map(|&c| f64::from(u8::from(c))).collect();
    bootstrap_mean_ci(&values, n_boot, level, seed)
}

/// Percentile bootstrap CI of a sample mean. Quantiles interpolate linearly
/// between order statistics of the resampled means.
pub fn bootstrap_mean_ci(values: &[f64], n_boot: usize, level: f64, seed: u64) -> Result<BootstrapCi> {
    if values.is_empty() || n_boot == 0 {
        return Err(Error::Input("bootstrap needs a nonempty sample and n_boot >= 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Input(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..n_boot)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let low = quantile(&means, alpha);
    let high = quantile(&means, 1.0 - alpha);
    Ok(BootstrapCi {
        mean,
        low,
        high,
        width: high - low,
    })
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroMethod {
    /// Zero differences are dropped before ranking.
    #[default]
    Wilcox,
    /// Zero differences take part in ranking but not in the statistic.
    Pratt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonOptions {
    pub zero_method: ZeroMethod,
    /// Largest nonzero count handled by exact enumeration.
    pub exact_max: usize,
}

impl Default for WilcoxonOptions {
    fn default() -> Self {
        Self {
            zero_method: ZeroMethod::Wilcox,
            exact_max: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// P(W+ >= observed) under the symmetric null.
    pub p_value: f64,
    /// Sum of the ranks of positive differences.
    pub statistic: f64,
    pub nonzero: usize,
    /// Every difference was zero; the p-value is 1 by convention.
    pub degenerate: bool,
    pub method: WilcoxonMethod,
}

/// One-sided test that paired correctness `x` beats `y`.
pub fn wilcoxon_one_sided(x_correct: &[bool], y_correct: &[bool]) -> Result<WilcoxonResult> {
    if x_correct.len() != y_correct.len() {
        return Err(Error::dim("wilcoxon", &[x_correct.len()], &[y_correct.len()]));
    }
    let diffs: Vec<f64> = x_correct
        .iter()
        .zip(y_correct)
        .map(|(&x, &y)| f64::from(u8::from(x)) - f64::from(u8::from(y)))
        .collect();
    wilcoxon_signed_rank(&diffs, WilcoxonOptions::default())
}

/// One-sided signed-rank test on paired differences, alternative "> 0".
pub fn wilcoxon_signed_rank(diffs: &[f64], options: WilcoxonOptions) -> Result<WilcoxonResult> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Input("wilcoxon differences must be finite".into()));
    }
    let ranked: Vec<f64> = match options.zero_method {
        ZeroMethod::Wilcox => diffs.iter().copied().filter(|&d| d != 0.0).collect(),
        ZeroMethod::Pratt => diffs.to_vec(),
    };
    let ranks = midranks(&ranked.iter().map(|d| d.abs()).collect::<Vec<_>>());
    // doubled midranks are integers
    let (signed, positive): (Vec<u64>, Vec<bool>) = ranked
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d != 0.0)
        .map(|(d, r)| ((2.0 * r).round() as u64, *d > 0.0))
        .unzip();
    let nonzero = signed.len();
    if nonzero == 0 {
        return Ok(WilcoxonResult {
            p_value: 1.0,
            statistic: 0.0,
            nonzero,
            degenerate: true,
            method: WilcoxonMethod::Exact,
        });
    }
    let w2: u64 = signed.iter().zip(&positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    let statistic = w2 as f64 / 2.0;
    let (p_value, method) = if nonzero <= options.exact_max {
        (exact_upper_tail(&signed, w2), WilcoxonMethod::Exact)
    } else {
        (normal_upper_tail(&signed, w2), WilcoxonMethod::Normal)
    };
    Ok(WilcoxonResult {
        p_value: p_value.clamp(0.0, 1.0),
        statistic,
        nonzero,
        degenerate: false,
        method,
    })
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Null distribution of the doubled statistic by subset-sum counting.
fn exact_upper_tail(doubled: &[u64], observed: u64) -> f64 {
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let tail: f64 = counts[observed as usize..].iter().sum();
    tail / 2f64.powi(doubled.len() as i32)
}

/// Normal approximation. Midranks make `sum r^2 / 4` the exact null
/// variance under ties; the continuity correction is half the spacing of
/// the lattice the statistic lives on.
fn normal_upper_tail(doubled: &[u64], observed: u64) -> f64 {
    let r: Vec<f64> = doubled.iter().map(|&v| v as f64 / 2.0).collect();
    let mean = r.iter().sum::<f64>() / 2.0;
    let sd = (r.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
    let spacing = doubled.iter().copied().fold(0, gcd) as f64 / 2.0;
    let z = (observed as f64 / 2.0 - mean - spacing / 2.0) / sd;
    let normal = Normal::standard();
    normal.sf(z)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
