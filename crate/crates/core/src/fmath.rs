//! Scalar float helpers backed by `libm`.
//!
//! Routing every transcendental through `libm` keeps results bit-identical
//! between `std` and `no_std` builds and across platforms.

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

/// In-place softmax over one row, with max-subtraction so that extreme
/// logits (|x| up to ~1e3 and far beyond) cannot overflow.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// In-place log-softmax over one row: `x - max - ln(sum(exp(x - max)))`.
pub fn log_softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter() {
        sum += exp(*v - max);
    }
    let log_z = max + ln(sum);
    for v in row.iter_mut() {
        *v -= log_z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_row_handles_extreme_logits() {
        let mut row = [1000.0, 1000.0, 1000.0];
        softmax_row(&mut row);
        for v in row {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let mut row = [-1000.0, 0.0, 1000.0];
        softmax_row(&mut row);
        assert!(row.iter().all(|v| v.is_finite()));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_matches_softmax_log() {
        let mut a = [0.3, -1.2, 2.5, 0.0];
        let mut b = a;
        softmax_row(&mut a);
        log_softmax_row(&mut b);
        for (p, lp) in a.iter().zip(b.iter()) {
            assert!((ln(*p) - lp).abs() < 1e-12);
        }
    }
}
