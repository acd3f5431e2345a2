//! One-sided paired significance tests: "method minus baseline > 0".

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

/// Largest number of non-zero differences handled by exact enumeration.
pub const WILCOXON_EXACT_LIMIT: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 paired runs, got {0}")]
    TooFew(usize),
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
}

fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(StatsError::TooFew(a.len()));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (x, y))| {
            let d = x - y;
            if d.is_finite() { Ok(d) } else { Err(StatsError::NonFinite(i)) }
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// `P(T >= t)` for the paired t statistic of `a - b` with `n - 1` degrees
/// of freedom.
pub fn paired_t_one_sided(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    let d = differences(a, b)?;
    if d.iter().all(|x| *x == 0.0) {
        return Ok(1.0);
    }
    let m = mean(&d);
    let s = sample_std(&d);
    if s <= 1e-15 * m.abs() {
        return Ok(if m > 0.0 { 0.0 } else { 1.0 });
    }
    let n = d.len() as f64;
    let t = m / (s / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("degrees of freedom >= 1");
    Ok(dist.sf(t).clamp(0.0, 1.0))
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

struct SignedRanks {
    ranks: Vec<f64>,
    w_plus: f64,
    tie_sizes: Vec<usize>,
}

fn signed_ranks(d: &[f64]) -> SignedRanks {
    let nonzero: Vec<f64> = d.iter().copied().filter(|x| *x != 0.0).collect();
    let mags: Vec<f64> = nonzero.iter().map(|x| x.abs()).collect();
    let ranks = average_ranks(&mags);
    let w_plus = nonzero.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let mut sorted = mags.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|v| **v == sorted[i]).count();
        tie_sizes.push(j);
        i += j;
    }
    SignedRanks { ranks, w_plus, tie_sizes }
}

/// Exact `P(W+ >= observed)` under the sign-flip null, by counting sign
/// assignments over doubled (integer) ranks.
pub fn wilcoxon_exact_p(d: &[f64]) -> f64 {
    let sr = signed_ranks(d);
    if sr.ranks.is_empty() {
        return 1.0;
    }
    let doubled: Vec<usize> = sr.ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let observed = (sr.w_plus * 2.0).round() as usize;
    let tail: f64 = counts[observed..].iter().sum();
    (tail / 2f64.powi(doubled.len() as i32)).clamp(0.0, 1.0)
}

/// Normal approximation with tie-corrected variance and a 0.5 continuity
/// correction.
pub fn wilcoxon_normal_p(d: &[f64]) -> f64 {
    let sr = signed_ranks(d);
    let m = sr.ranks.len() as f64;
    if m == 0.0 {
        return 1.0;
    }
    let mu = m * (m + 1.0) / 4.0;
    let ties: f64 = sr.tie_sizes.iter().map(|&t| (t.pow(3) - t) as f64).sum();
    let var = m * (m + 1.0) * (2.0 * m + 1.0) / 24.0 - ties / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (sr.w_plus - mu - 0.5) / var.sqrt();
    Normal::new(0.0, 1.0).expect("standard normal").sf(z).clamp(0.0, 1.0)
}

/// One-sided signed-rank test on `a - b`; zero differences are dropped.
pub fn wilcoxon_signed_rank_one_sided(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    let d = differences(a, b)?;
    let m = d.iter().filter(|x| **x != 0.0).count();
    Ok(match m {
        0 => 1.0,
        m if m <= WILCOXON_EXACT_LIMIT => wilcoxon_exact_p(&d),
        _ => wilcoxon_normal_p(&d),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub mean_a: f64,
    pub mean_b: f64,
    pub std_a: f64,
    pub std_b: f64,
    pub t_p: f64,
    pub wilcoxon_p: f64,
    pub n_runs: usize,
}

impl SignificanceReport {
    /// `a` is the method, `b` the baseline, paired by run.
    pub fn compute(a: &[f64], b: &[f64]) -> Result<Self, StatsError> {
        Ok(Self {
            t_p: paired_t_one_sided(a, b)?,
            wilcoxon_p: wilcoxon_signed_rank_one_sided(a, b)?,
            mean_a: mean(a),
            mean_b: mean(b),
            std_a: sample_std(a),
            std_b: sample_std(b),
            n_runs: a.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zeros(n: usize) -> Vec<f64> {
        vec![0.0; n]
    }

    /// Student-t density integrated by composite Simpson from 0 to `t`.
    fn t_sf_oracle(t: f64, df: f64) -> f64 {
        let ln_gamma = |x: f64| statrs::function::gamma::ln_gamma(x);
        let c = (ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0)).exp() / (df * std::f64::consts::PI).sqrt();
        let pdf = |x: f64| c * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
        let n = 20_000;
        let h = t / n as f64;
        let mut acc = pdf(0.0) + pdf(t);
        for i in 1..n {
            acc += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        0.5 - acc * h / 3.0
    }

    fn brute_force_wilcoxon(d: &[f64]) -> f64 {
        let sr = signed_ranks(d);
        let m = sr.ranks.len();
        let mut hits = 0u64;
        for mask in 0u64..(1 << m) {
            let w: f64 = (0..m).filter(|i| mask >> i & 1 == 1).map(|i| sr.ranks[i]).sum();
            if w >= sr.w_plus - 1e-9 {
                hits += 1;
            }
        }
        hits as f64 / (1u64 << m) as f64
    }

    #[test]
    fn t_test_examples() {
        let a = [0.5, 0.6, 0.7];
        assert_eq!(paired_t_one_sided(&a, &a).unwrap(), 1.0);
        let p = paired_t_one_sided(&[1.0, 2.0, 3.0], &zeros(3)).unwrap();
        let oracle = t_sf_oracle(2.0 * 3f64.sqrt(), 2.0);
        assert!((p - oracle).abs() < 1e-9, "{p} vs {oracle}");
        assert!((p - 0.0371).abs() < 1e-3);
        // two degrees of freedom have a closed form: 1/2 - t / (2 sqrt(2 + t^2))
        let t = 2.0 * 3f64.sqrt();
        assert!((p - (0.5 - t / (2.0 * (2.0 + t * t).sqrt()))).abs() < 1e-12);
        assert_eq!(paired_t_one_sided(&[1.0, 1.0, 1.0], &zeros(3)).unwrap(), 0.0);
        assert_eq!(paired_t_one_sided(&[-1.0, -1.0], &zeros(2)).unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        assert_eq!(paired_t_one_sided(&[1.0], &[0.0]).unwrap_err(), StatsError::TooFew(1));
        assert_eq!(
            wilcoxon_signed_rank_one_sided(&[1.0, 2.0], &[0.0]).unwrap_err(),
            StatsError::LengthMismatch(2, 1)
        );
        assert!(paired_t_one_sided(&[f64::NAN, 1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn wilcoxon_examples() {
        let a = [0.3, 0.5];
        assert_eq!(wilcoxon_signed_rank_one_sided(&a, &a).unwrap(), 1.0);
        assert_eq!(wilcoxon_signed_rank_one_sided(&[1.0, 2.0, 3.0], &zeros(3)).unwrap(), 0.125);
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(wilcoxon_signed_rank_one_sided(&ten, &zeros(10)).unwrap(), 1.0 / 1024.0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn exact_matches_enumeration_with_ties() {
        let d = [1.0, -1.0, 2.0, 2.0, -3.0, 4.0, 0.0, 4.0, 4.0, -0.5];
        assert!((wilcoxon_exact_p(&d) - brute_force_wilcoxon(&d)).abs() < 1e-12);
    }

    #[test]
    fn exact_and_normal_agree_for_moderate_m() {
        let fixtures: [&[f64]; 3] = [
            &[1.1, -0.4, 2.3, 0.7, -1.9, 3.2, 0.2, 1.5, -0.8, 2.7, 0.9],
            &[0.5, 1.5, -2.5, 3.5, 4.5, -5.5, 6.5, 7.5, 8.5, -9.5, 10.5, 11.5, 12.5, -13.5, 14.5],
            &[
                2.0, -1.0, 3.0, 4.0, -5.0, 6.0, 7.0, -8.0, 9.0, 10.0, 11.0, -12.0, 13.0, 14.0, 15.0, -16.0,
                17.0, 18.0, 19.0, 20.0,
            ],
        ];
        for d in fixtures {
            let (e, n) = (wilcoxon_exact_p(d), wilcoxon_normal_p(d));
            assert!((e - n).abs() < 0.02, "m={} exact {e} normal {n}", d.len());
        }
    }

    #[test]
    fn large_m_uses_normal_approximation() {
        let d: Vec<f64> = (1..=30).map(|i| if i % 3 == 0 { -(i as f64) } else { i as f64 }).collect();
        let p = wilcoxon_signed_rank_one_sided(&d, &zeros(30)).unwrap();
        assert_eq!(p, wilcoxon_normal_p(&d));
    }

    #[test]
    fn report_fields() {
        let r = SignificanceReport::compute(&[0.6, 0.7, 0.8], &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(r.n_runs, 3);
        assert!((r.mean_a - 0.7).abs() < 1e-12);
        assert!((r.std_a - 0.1).abs() < 1e-12);
        assert_eq!(r.std_b, 0.0);
    }

    proptest! {
        #[test]
        fn symmetric_differences_are_not_significant(half in 1usize..12, scale in 0.1f64..5.0) {
            let d: Vec<f64> = (0..2 * half).map(|i| if i % 2 == 0 { scale } else { -scale }).collect();
            let z = zeros(d.len());
            prop_assert!(paired_t_one_sided(&d, &z).unwrap() >= 0.5);
            prop_assert!(wilcoxon_signed_rank_one_sided(&d, &z).unwrap() >= 0.5);
        }

        #[test]
        fn p_values_are_probabilities(d in proptest::collection::vec(-5i32..5, 2..30)) {
            let d: Vec<f64> = d.into_iter().map(f64::from).collect();
            let z = zeros(d.len());
            let t = paired_t_one_sided(&d, &z).unwrap();
            let w = wilcoxon_signed_rank_one_sided(&d, &z).unwrap();
            prop_assert!((0.0..=1.0).contains(&t));
            prop_assert!((0.0..=1.0).contains(&w));
        }

        #[test]
        fn exact_matches_brute_force(d in proptest::collection::vec(-6i32..6, 1..12)) {
            let d: Vec<f64> = d.into_iter().map(f64::from).collect();
            prop_assert!((wilcoxon_exact_p(&d) - brute_force_wilcoxon(&d)).abs() < 1e-12);
        }
    }
}
