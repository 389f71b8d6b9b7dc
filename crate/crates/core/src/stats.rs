//! Small numeric reductions shared by the budget and eval modules.

/// Pairwise (cascade) summation; result does not depend on how the caller
/// chunked the input, only on its order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 16;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Arithmetic mean, summed relative to the minimum so that a constant input
/// returns that constant exactly.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    if !lo.is_finite() {
        return pairwise_sum(xs) / xs.len() as f64;
    }
    let shifted: Vec<f64> = xs.iter().map(|x| x - lo).collect();
    lo + pairwise_sum(&shifted) / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Standard deviation with `n` (population) or `n - 1` (sample) divisor.
pub fn std_dev(xs: &[f64], population: bool) -> f64 {
    let n = xs.len();
    if n == 0 || (!population && n < 2) {
        return 0.0;
    }
    let m = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    let denom = if population { n } else { n - 1 } as f64;
    (pairwise_sum(&sq) / denom).sqrt()
}

/// Standard error of the mean, `sample_std / sqrt(n)`.
pub fn std_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    std_dev(xs, false) / (xs.len() as f64).sqrt()
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(xs: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
        let mut r = vec![0.0; xs.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, mb) = (mean(&ra), mean(&rb));
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_has_exact_mean_and_zero_std() {
        for &x in &[0.1, 0.97, 1.0 - 0.03, 224.2755 / 37.0] {
            for n in [1, 3, 17, 129, 1000] {
                let xs = vec![x; n];
                assert_eq!(mean(&xs), x);
                assert_eq!(std_dev(&xs, true), 0.0);
            }
        }
        assert_eq!(mean(&[1.0, 2.0, 3.0, 6.0]), 3.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn std_divisors() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((std_dev(&xs, true) - 1.25f64.sqrt()).abs() < 1e-15);
        assert!((std_dev(&xs, false) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn pairwise_matches_naive() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-10);
    }

    #[test]
    fn spearman_perfect() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
