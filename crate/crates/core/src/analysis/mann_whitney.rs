//! Two-sided Mann-Whitney rank-sum test.
//!
//! Small samples (both sizes at most [`EXACT_LIMIT`]) use the exact
//! permutation distribution of the rank sum conditional on the observed tie
//! pattern. Larger samples use the normal approximation with tie and
//! continuity corrections.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::AnalysisError;

pub const EXACT_LIMIT: usize = 20;
/// Below this size in either group no classification is attempted.
pub const MIN_SAMPLES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Pass,
    High,
    Low,
    Inconclusive,
}

/// Which way the canary sits relative to the baseline, regardless of
/// significance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shift {
    High,
    Low,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the baseline sample.
    pub u: f64,
    pub p_value: f64,
    pub classification: Classification,
    pub shift: Shift,
    pub exact: bool,
}

/// Ranks of the pooled sample, doubled so midranks stay integral, along
/// with the tie-group sizes.
fn doubled_ranks(baseline: &[f64], canary: &[f64]) -> (Vec<u64>, Vec<u64>, Vec<u64>) {
    let mut pooled: Vec<(f64, bool)> = baseline
        .iter()
        .map(|&v| (v, true))
        .chain(canary.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks_b = Vec::with_capacity(baseline.len());
    let mut all = Vec::with_capacity(pooled.len());
    let mut ties = Vec::new();
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // positions i..=j hold ranks i+1..=j+1; doubled midrank = i + j + 2
        let r = (i + j + 2) as u64;
        for item in &pooled[i..=j] {
            all.push(r);
            if item.1 {
                ranks_b.push(r);
            }
        }
        ties.push((j - i + 1) as u64);
        i = j + 1;
    }
    (ranks_b, all, ties)
}

fn validate(baseline: &[f64], canary: &[f64]) -> Result<(), AnalysisError> {
    if baseline.is_empty() || canary.is_empty() {
        return Err(AnalysisError::EmptySample);
    }
    if baseline.iter().chain(canary).any(|v| v.is_nan()) {
        return Err(AnalysisError::NotANumber);
    }
    Ok(())
}

/// U statistic of `baseline`: pairs where the baseline value is larger,
/// ties counting one half.
pub fn u_statistic(baseline: &[f64], canary: &[f64]) -> Result<f64, AnalysisError> {
    validate(baseline, canary)?;
    let (rb, _, _) = doubled_ranks(baseline, canary);
    let n1 = baseline.len() as f64;
    Ok(rb.iter().sum::<u64>() as f64 / 2.0 - n1 * (n1 + 1.0) / 2.0)
}

/// Exact two-sided p-value: the share of all ways to split the pooled
/// ranks into groups of the observed sizes whose rank sum lies at least as
/// far from its mean as the observed one.
pub fn exact_p(baseline: &[f64], canary: &[f64]) -> Result<f64, AnalysisError> {
    validate(baseline, canary)?;
    let (rb, all, _) = doubled_ranks(baseline, canary);
    let n1 = rb.len();
    let n = all.len() as u64;
    let max_sum: usize = all.iter().sum::<u64>() as usize;
    // ways[k][s]: subsets of size k with doubled rank sum s
    let mut ways = vec![vec![0f64; max_sum + 1]; n1 + 1];
    ways[0][0] = 1.0;
    let mut reach = 0usize;
    for (idx, &r) in all.iter().enumerate() {
        let r = r as usize;
        reach += r;
        for k in (1..=n1.min(idx + 1)).rev() {
            let (lo, hi) = ways.split_at_mut(k);
            let prev = &lo[k - 1];
            let cur = &mut hi[0];
            for s in (r..=reach).rev() {
                let add = prev[s - r];
                if add != 0.0 {
                    cur[s] += add;
                }
            }
        }
    }
    // everything below is in doubled units, so the mean n1(N+1)/2 becomes n1(N+1)
    let mean2 = (n1 as u64 * (n + 1)) as i64;
    let obs: i64 = rb.iter().sum::<u64>() as i64;
    let dev = (obs - mean2).abs();
    let mut hit = 0f64;
    let mut total = 0f64;
    for (s, &w) in ways[n1].iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        total += w;
        if (s as i64 - mean2).abs() >= dev {
            hit += w;
        }
    }
    Ok((hit / total).clamp(0.0, 1.0))
}

/// Normal approximation with tie correction and a 0.5 continuity
/// correction.
pub fn normal_p(baseline: &[f64], canary: &[f64]) -> Result<f64, AnalysisError> {
    validate(baseline, canary)?;
    let (_, _, ties) = doubled_ranks(baseline, canary);
    let n1 = baseline.len() as f64;
    let n2 = canary.len() as f64;
    let n = n1 + n2;
    let u = u_statistic(baseline, canary)?;
    let mean = n1 * n2 / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>();
    let var = n1 * n2 / 12.0
        * ((n + 1.0)
            - if n > 1.0 {
                tie_term / (n * (n - 1.0))
            } else {
                0.0
            });
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    Ok((2.0 * std.sf(z)).clamp(0.0, 1.0))
}

pub fn mann_whitney(
    baseline: &[f64],
    canary: &[f64],
    alpha: f64,
) -> Result<MannWhitney, AnalysisError> {
    validate(baseline, canary)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AnalysisError::Alpha(alpha));
    }
    let u = u_statistic(baseline, canary)?;
    let exact = baseline.len() <= EXACT_LIMIT && canary.len() <= EXACT_LIMIT;
    let p_value = if exact {
        exact_p(baseline, canary)?
    } else {
        normal_p(baseline, canary)?
    };
    let mean = baseline.len() as f64 * canary.len() as f64 / 2.0;
    // a small baseline U means canary values tend to be larger
    let shift = if u < mean {
        Shift::High
    } else if u > mean {
        Shift::Low
    } else {
        Shift::None
    };
    let classification = if baseline.len() < MIN_SAMPLES || canary.len() < MIN_SAMPLES {
        Classification::Inconclusive
    } else if p_value < alpha {
        match shift {
            Shift::High => Classification::High,
            Shift::Low => Classification::Low,
            Shift::None => Classification::Pass,
        }
    } else {
        Classification::Pass
    };
    Ok(MannWhitney {
        u,
        p_value,
        classification,
        shift,
        exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_pass() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = mann_whitney(&a, &a, 0.01).unwrap();
        assert_eq!(r.u, 12.5);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        assert_eq!(r.classification, Classification::Pass);
    }

    #[test]
    fn three_versus_three() {
        let r = mann_whitney(&[1.0, 2.0, 3.0], &[10.0, 11.0, 12.0], 0.05).unwrap();
        assert_eq!(r.u, 0.0);
        assert!((r.p_value - 0.1).abs() < 1e-12);
        assert_eq!(r.shift, Shift::High);
        assert_eq!(r.classification, Classification::Inconclusive);
    }

    #[test]
    fn clear_shift_is_significant() {
        let b: Vec<f64> = (0..30).map(f64::from).collect();
        let c: Vec<f64> = (100..130).map(f64::from).collect();
        let r = mann_whitney(&b, &c, 0.01).unwrap();
        assert!(!r.exact);
        assert_eq!(r.classification, Classification::High);
        let r = mann_whitney(&c, &b, 0.01).unwrap();
        assert_eq!(r.classification, Classification::Low);
    }

    #[test]
    fn all_tied_is_p_one() {
        let a = [1.0; 30];
        assert_eq!(normal_p(&a, &a).unwrap(), 1.0);
        assert_eq!(exact_p(&a[..10], &a[..7]).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(
            mann_whitney(&[], &[1.0], 0.01),
            Err(AnalysisError::EmptySample)
        );
        assert_eq!(
            mann_whitney(&[f64::NAN], &[1.0], 0.01),
            Err(AnalysisError::NotANumber)
        );
        assert_eq!(
            mann_whitney(&[1.0], &[1.0], 0.0),
            Err(AnalysisError::Alpha(0.0))
        );
    }
}
