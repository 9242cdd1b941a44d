//! Convergence diagnostics: split-chain rank-normalized R-hat and effective
//! sample size, in the style of Vehtari et al. (2021).

use statrs::distribution::{ContinuousCDF, Normal};

/// Split each chain in half, dropping the middle element of odd-length
/// chains.
fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let n = c.len();
        let half = n / 2;
        if half == 0 {
            continue;
        }
        out.push(c[..half].to_vec());
        out.push(c[n - half..].to_vec());
    }
    out
}

/// Rank-normalize pooled draws: average ranks mapped through the standard
/// normal quantile function with the (r - 3/8)/(S + 1/4) offset.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let mut indexed: Vec<(f64, usize)> = Vec::with_capacity(total);
    let mut flat_index = 0usize;
    for c in chains {
        for &v in c {
            indexed.push((v, flat_index));
            flat_index += 1;
        }
    }
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut ranks = vec![0.0f64; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && indexed[j + 1].0 == indexed[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for item in &indexed[i..=j] {
            ranks[item.1] = avg_rank;
        }
        i = j + 1;
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let s = total as f64;
    let mut out = Vec::with_capacity(chains.len());
    let mut k = 0usize;
    for c in chains {
        let mut z = Vec::with_capacity(c.len());
        for _ in 0..c.len() {
            let p = (ranks[k] - 0.375) / (s + 0.25);
            z.push(normal.inverse_cdf(p));
            k += 1;
        }
        out.push(z);
    }
    out
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Potential scale reduction on already-prepared (split, transformed)
/// chains.
fn psrf(chains: &[Vec<f64>]) -> f64 {
    let c = chains.len();
    if c < 2 {
        return f64::NAN;
    }
    let n = chains[0].len();
    if n < 2 || chains.iter().any(|ch| ch.len() != n) {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|ch| mean(ch)).collect();
    let vars: Vec<f64> = chains.iter().map(|ch| sample_var(ch)).collect();
    let w = mean(&vars);
    let b = n as f64 * sample_var(&means);
    if w <= 0.0 {
        return f64::NAN;
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    (var_plus / w).sqrt()
}

/// Split-chain rank-normalized R-hat: the larger of the bulk statistic and
/// the tail statistic computed on folded draws.
pub fn rhat(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    if split.len() < 2 {
        return f64::NAN;
    }
    let bulk = psrf(&rank_normalize(&split));

    let mut pooled: Vec<f64> = split.iter().flatten().copied().collect();
    if pooled.is_empty() {
        return f64::NAN;
    }
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = {
        let n = pooled.len();
        if n % 2 == 0 {
            0.5 * (pooled[n / 2 - 1] + pooled[n / 2])
        } else {
            pooled[n / 2]
        }
    };
    let folded: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|&v| (v - median).abs()).collect())
        .collect();
    let tail = psrf(&rank_normalize(&folded));
    let combined = match (bulk.is_nan(), tail.is_nan()) {
        (true, true) => return f64::NAN,
        (true, false) => tail,
        (false, true) => bulk,
        (false, false) => bulk.max(tail),
    };
    // Values below 1 are estimation noise around the converged floor.
    combined.max(1.0)
}

/// Autocovariance at a given lag with 1/n normalization.
fn autocov(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let m = mean(x);
    let mut s = 0.0;
    for i in 0..(n - lag) {
        s += (x[i] - m) * (x[i + lag] - m);
    }
    s / n as f64
}

/// Bulk effective sample size on split rank-normalized chains, using
/// Geyer's initial monotone sequence to truncate the autocorrelation sum.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    if split.is_empty() {
        return f64::NAN;
    }
    let z = rank_normalize(&split);
    let c = z.len();
    let n = z[0].len();
    if n < 4 || z.iter().any(|ch| ch.len() != n) {
        return f64::NAN;
    }
    let chain_vars: Vec<f64> = z.iter().map(|ch| sample_var(ch)).collect();
    let mean_var = mean(&chain_vars);
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if c > 1 {
        let means: Vec<f64> = z.iter().map(|ch| mean(ch)).collect();
        var_plus += sample_var(&means);
    }
    if var_plus <= 0.0 {
        return f64::NAN;
    }

    let max_lag = n - 1;
    let mut rho = Vec::with_capacity(max_lag);
    rho.push(1.0);
    for t in 1..max_lag {
        let acov_t = z.iter().map(|ch| autocov(ch, t)).sum::<f64>() / c as f64;
        rho.push(1.0 - (mean_var - acov_t * n as f64 / (n as f64 - 1.0)) / var_plus);
    }

    // Geyer pairs: accumulate while positive, enforcing monotone decrease.
    let mut tau = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0usize;
    while t + 1 < rho.len() {
        let pair = rho[t] + rho[t + 1];
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        prev_pair = pair;
        tau += pair;
        t += 2;
    }
    let tau = (2.0 * tau - 1.0).max(1.0 / (c * n) as f64);
    ((c * n) as f64 / tau).min((c * n) as f64 * (n as f64).log10())
}
