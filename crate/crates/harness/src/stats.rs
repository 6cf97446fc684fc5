use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PercentileError {
    #[error("no samples")]
    EmptySamples,
    #[error("percentile {0} outside (0, 100]")]
    OutOfRange(f64),
}

/// Nearest-rank percentile: the value at rank ceil(p/100 * n) of the
/// ascending sort.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64, PercentileError> {
    if samples.is_empty() {
        return Err(PercentileError::EmptySamples);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(PercentileError::OutOfRange(p));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(p, sorted.len()) - 1])
}

/// Same as [`percentile`] on an already ascending slice.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> Result<f64, PercentileError> {
    if sorted.is_empty() {
        return Err(PercentileError::EmptySamples);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(PercentileError::OutOfRange(p));
    }
    Ok(sorted[nearest_rank(p, sorted.len()) - 1])
}

fn nearest_rank(p: f64, n: usize) -> usize {
    ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn definition() {
        for p in [0.1, 50.0, 100.0] {
            assert_eq!(percentile(&[10.0], p), Ok(10.0));
        }
        assert_eq!(percentile(&[4.0, 2.0, 1.0, 3.0], 50.0), Ok(2.0));
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 51.0), Ok(3.0));
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 100.0), Ok(4.0));
        assert_eq!(percentile(&[], 50.0), Err(PercentileError::EmptySamples));
        assert!(percentile(&[1.0], 0.0).is_err());
        assert!(percentile(&[1.0], 100.5).is_err());
    }
}
