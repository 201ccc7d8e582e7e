//! Small descriptive statistics shared across modules.

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with divisor `n - 1`. `None` for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    // Shifting by the first value makes constant input exactly zero.
    let shift = xs[0];
    let m = xs.iter().map(|x| x - shift).sum::<f64>() / xs.len() as f64;
    let ss: f64 = xs.iter().map(|x| (x - shift - m).powi(2)).sum();
    Some(ss / (xs.len() - 1) as f64)
}

/// Quantile by linear interpolation between order statistics
/// (position `(n - 1) * p`). Input need not be sorted.
pub fn quantile(xs: &[f64], p: f64) -> Option<f64> {
    if xs.is_empty() || !(0.0..=1.0).contains(&p) {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (v.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(v[lo] + (v[hi] - v[lo]) * frac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_and_quantiles() {
        assert_eq!(sample_variance(&[10.0, 14.0]), Some(8.0));
        assert_eq!(sample_variance(&[1.0]), None);
        assert_eq!(quantile(&[0.3, 0.1, 0.2], 0.5), Some(0.2));
        assert!((quantile(&[1.0, 2.0, 3.0, 4.0], 0.75).unwrap() - 3.25).abs() < 1e-15);
        assert_eq!(quantile(&[], 0.5), None);
    }
}
