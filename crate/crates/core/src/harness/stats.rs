use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

/// Two-sided critical value for a `level` confidence interval.
fn z_value(level: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + level / 2.0)
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize, level: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = z_value(level);
    let (k, n) = (k as f64, n as f64);
    let p = k / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Exact one-sided McNemar test that `a` beats `b` on paired outcomes:
/// `P(X >= wins)` with `X ~ Bin(discordant, 1/2)`.
pub fn mcnemar_one_sided(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "paired outcomes differ in length");
    let wins = a.iter().zip(b).filter(|(x, y)| **x && !**y).count() as u64;
    let losses = a.iter().zip(b).filter(|(x, y)| !**x && **y).count() as u64;
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let bin = Binomial::new(0.5, n).expect("valid binomial");
    if wins == 0 {
        1.0
    } else {
        bin.sf(wins - 1)
    }
}
