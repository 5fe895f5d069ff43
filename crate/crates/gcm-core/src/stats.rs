//! Nonparametric statistics: one-sided Wilcoxon signed-rank (exact for small
//! n, tie-corrected normal approximation otherwise), Benjamini-Hochberg FDR
//! step-up, and Spearman rank correlation.

use crate::error::{GcmError, Result};

/// Average ranks (1-based) of `|values|`, doubled so ties stay integral.
fn double_ranks_of_abs(values: &[f64]) -> Vec<u64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()));
    let mut dr = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]].abs() == values[idx[i]].abs() {
            j += 1;
        }
        // average rank of positions i..=j (1-based), doubled: (i+1 + j+1)
        let avg2 = (i as u64 + 1) + (j as u64 + 1);
        for &k in &idx[i..=j] {
            dr[k] = avg2;
        }
        i = j + 1;
    }
    dr
}

/// One-sided (greater) Wilcoxon signed-rank test on paired deltas.
/// Zeros are dropped first; requires at least 5 nonzero deltas. Exact
/// enumeration over all sign assignments for n <= 12, tie-corrected normal
/// approximation above that.
pub fn wilcoxon_one_sided(deltas: &[f64]) -> Result<f64> {
    let nonzero: Vec<f64> = deltas.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(GcmError::Degenerate("all deltas are zero".into()));
    }
    if nonzero.len() < 5 {
        return Err(GcmError::Input(format!(
            "need >= 5 nonzero deltas, got {}",
            nonzero.len()
        )));
    }
    let n = nonzero.len();
    let dr = double_ranks_of_abs(&nonzero);
    let w2_obs: u64 = nonzero
        .iter()
        .zip(&dr)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();

    if n <= 12 {
        // Exact: every sign pattern is equally likely under H0.
        let total = 1u64 << n;
        let mut count = 0u64;
        for mask in 0..total {
            let mut w2 = 0u64;
            for (bit, &r) in dr.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    w2 += r;
                }
            }
            if w2 >= w2_obs {
                count += 1;
            }
        }
        Ok(count as f64 / total as f64)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        // Tie correction: sum(t^3 - t)/48 over tie groups of |deltas|.
        let mut sorted: Vec<u64> = dr.clone();
        sorted.sort_unstable();
        let mut tie_term = 0f64;
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        if var <= 0.0 {
            return Err(GcmError::Degenerate("zero variance rank statistic".into()));
        }
        let w = w2_obs as f64 / 2.0;
        let z = (w - mean) / var.sqrt();
        Ok(1.0 - normal_cdf(z))
    }
}

/// Standard normal CDF (Abramowitz & Stegun 7.1.26, |error| < 1.5e-7).
pub fn normal_cdf(z: f64) -> f64 {
    let x = z / std::f64::consts::SQRT_2;
    0.5 * (1.0 + erf(x))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Benjamini-Hochberg step-up. Returns `(adjusted p in input order, reject)`
/// with `adjusted_i = min over j >= rank(i) of p_(j) * n / j`, clipped to 1,
/// and `reject <=> adjusted <= q`.
pub fn bh_fdr(p_values: &[f64], q: f64) -> Result<(Vec<f64>, Vec<bool>)> {
    for &p in p_values {
        if !(0.0..=1.0).contains(&p) || p.is_nan() {
            return Err(GcmError::Input(format!("p-value {p} outside [0,1]")));
        }
    }
    let n = p_values.len();
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted_sorted = vec![0f64; n];
    let mut running_min = 1f64;
    for rank in (0..n).rev() {
        let raw = p_values[idx[rank]] * n as f64 / (rank + 1) as f64;
        running_min = running_min.min(raw).min(1.0);
        adjusted_sorted[rank] = running_min;
    }
    let mut adjusted = vec![0f64; n];
    for (rank, &orig) in idx.iter().enumerate() {
        adjusted[orig] = adjusted_sorted[rank];
    }
    let reject = adjusted.iter().map(|&a| a <= q).collect();
    Ok((adjusted, reject))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(GcmError::Input("length mismatch".into()));
    }
    if x.len() < 2 {
        return Err(GcmError::Input("need at least 2 points".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    pearson(&rx, &ry)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0f64;
    let mut sxx = 0f64;
    let mut syy = 0f64;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(GcmError::Degenerate("constant input to correlation".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Independent oracle: recursive enumeration with freshly computed
    /// average ranks, kept separate from the implementation above.
    fn oracle_exact_p(deltas: &[f64]) -> f64 {
        let nz: Vec<f64> = deltas.iter().copied().filter(|&d| d != 0.0).collect();
        let n = nz.len();
        let mut pairs: Vec<(f64, usize)> =
            nz.iter().enumerate().map(|(i, &d)| (d.abs(), i)).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut ranks = vec![0f64; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && pairs[j + 1].0 == pairs[i].0 {
                j += 1;
            }
            let avg = ((i + 1 + j + 1) as f64) / 2.0;
            for p in &pairs[i..=j] {
                ranks[p.1] = avg;
            }
            i = j + 1;
        }
        let w_obs: f64 = nz
            .iter()
            .zip(&ranks)
            .filter(|(d, _)| **d > 0.0)
            .map(|(_, &r)| r)
            .sum();
        fn count(ranks: &[f64], i: usize, acc: f64, w_obs: f64) -> u64 {
            if i == ranks.len() {
                return if acc >= w_obs { 1 } else { 0 };
            }
            count(ranks, i + 1, acc, w_obs) + count(ranks, i + 1, acc + ranks[i], w_obs)
        }
        count(&ranks, 0, 0.0, w_obs) as f64 / (1u64 << n) as f64
    }

    #[test]
    fn all_positive_n5_is_one_over_32() {
        let d = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(wilcoxon_one_sided(&d).unwrap(), 0.03125);
        assert_eq!(oracle_exact_p(&d), 0.03125);
    }

    #[test]
    fn smallest_rank_flipped_is_two_over_32() {
        let d = [-1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(wilcoxon_one_sided(&d).unwrap(), 0.0625);
        assert_eq!(oracle_exact_p(&d), 0.0625);
    }

    #[test]
    fn symmetric_pairs_give_p_at_least_half() {
        let d = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0];
        let p = wilcoxon_one_sided(&d).unwrap();
        assert!(p >= 0.5, "p = {p}");
        assert_eq!(p, oracle_exact_p(&d));
    }

    #[test]
    fn zeros_dropped_and_all_zero_degenerate() {
        let d = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 0.0];
        assert_eq!(wilcoxon_one_sided(&d).unwrap(), 0.03125);
        assert!(matches!(
            wilcoxon_one_sided(&[0.0, 0.0]),
            Err(GcmError::Degenerate(_))
        ));
        assert!(matches!(
            wilcoxon_one_sided(&[1.0, 2.0]),
            Err(GcmError::Input(_))
        ));
    }

    #[test]
    fn exact_matches_oracle_on_random_ties() {
        let mut rng = crate::rng::substream(3, "wilcoxon");
        for _ in 0..20 {
            let d: Vec<f64> = (0..9)
                .map(|_| (rng.gen_range(-3i32..=3) as f64) + 0.5)
                .collect();
            let p = wilcoxon_one_sided(&d).unwrap();
            assert!((p - oracle_exact_p(&d)).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_and_normal_agree_near_n12() {
        // Compare the exact p at n=12 with the normal-approximation branch
        // (forced by replicating to n>12 is not comparable, so call the
        // internal pieces on the same data).
        let mut rng = crate::rng::substream(9, "wilcoxon-normal");
        for _ in 0..30 {
            let d: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d: Vec<f64> = d.into_iter().filter(|&x| x != 0.0).collect();
            if d.len() < 12 {
                continue;
            }
            let exact = wilcoxon_one_sided(&d).unwrap();
            // Normal approximation on the same deltas.
            let dr = double_ranks_of_abs(&d);
            let w: f64 = d
                .iter()
                .zip(&dr)
                .filter(|(x, _)| **x > 0.0)
                .map(|(_, &r)| r as f64 / 2.0)
                .sum();
            let n = d.len() as f64;
            let mean = n * (n + 1.0) / 4.0;
            let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
            let approx = 1.0 - normal_cdf((w - mean) / var.sqrt());
            assert!(
                (exact - approx).abs() <= 0.02,
                "exact {exact} vs normal {approx}"
            );
        }
    }

    #[test]
    fn bh_hand_worked_example() {
        let (adj, rej) = bh_fdr(&[0.01, 0.04, 0.03, 0.20], 0.05).unwrap();
        let want = [0.04, 0.05333333333333334, 0.05333333333333334, 0.20];
        for (a, w) in adj.iter().zip(want) {
            assert!((a - w).abs() < 1e-10, "{a} vs {w}");
        }
        assert_eq!(rej, vec![true, false, false, false]);
    }

    #[test]
    fn bh_degenerate_cases() {
        let (adj, _) = bh_fdr(&[0.07, 0.07, 0.07], 0.05).unwrap();
        assert!(adj.iter().all(|&a| (a - 0.07).abs() < 1e-12));
        let (adj, rej) = bh_fdr(&[0.012], 0.05).unwrap();
        assert_eq!(adj, vec![0.012]);
        assert_eq!(rej, vec![true]);
        assert!(bh_fdr(&[1.4], 0.05).is_err());
    }

    #[test]
    fn bh_monotone_and_permutation_invariant() {
        let mut rng = crate::rng::substream(17, "bh");
        let p: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (adj, _) = bh_fdr(&p, 0.1).unwrap();
        // Monotone in the sorted order.
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
        for w in order.windows(2) {
            assert!(adj[w[0]] <= adj[w[1]] + 1e-15);
        }
        // Permutation invariance.
        let perm: Vec<usize> = (0..p.len()).rev().collect();
        let p2: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let (adj2, _) = bh_fdr(&p2, 0.1).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert!((adj2[j] - adj[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [10.0, 20.0, 30.0, 40.0];
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let yr = [40.0, 30.0, 20.0, 10.0];
        assert!((spearman(&x, &yr).unwrap() + 1.0).abs() < 1e-12);
        // Hand-computed: x=[1,2,3], y=[3,1,2] -> rho = -0.5
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap() + 0.5).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-9);
        assert!((normal_cdf(1.96) - 0.9750021).abs() < 1e-5);
        assert!((normal_cdf(-1.0) - 0.1586553).abs() < 1e-5);
    }
}
