//! Order-independent floating-point reductions.

/// Correctly rounded sum (Shewchuk's exact partials). The result does not
/// depend on the order of `values`. Falls back to naive summation when a
/// value is not finite.
pub fn fsum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    let mut naive = 0.0;
    let mut finite = true;
    for v in values {
        naive += v;
        if !v.is_finite() {
            finite = false;
        }
        if !finite {
            continue;
        }
        let mut x = v;
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    if !finite {
        return naive;
    }
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    // Round half-even on the exact remainder.
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// `fsum(values) / n`.
pub fn exact_mean(values: &[f64]) -> f64 {
    fsum(values.iter().copied()) / values.len() as f64
}

/// Population variance about the exact mean.
pub fn population_variance(values: &[f64]) -> f64 {
    let mu = exact_mean(values);
    fsum(values.iter().map(|x| (x - mu) * (x - mu))) / values.len() as f64
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cancels_exactly() {
        assert_eq!(fsum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(fsum(vec![0.1; 10]), 1.0);
        assert_eq!(fsum([]), 0.0);
        assert!(fsum([1.0, f64::NAN]).is_nan());
    }

    #[test]
    fn variance_by_hand() {
        assert_eq!(exact_mean(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(population_variance(&[1.0, 2.0, 3.0]), 2.0 / 3.0);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }

    proptest! {
        #[test]
        fn order_independent(mut v in proptest::collection::vec(-1e6f64..1e6, 1..40), seed in 0u64..1000) {
            let a = fsum(v.iter().copied());
            let n = v.len();
            v.rotate_left(seed as usize % n);
            v.reverse();
            prop_assert_eq!(a.to_bits(), fsum(v.iter().copied()).to_bits());
        }

        #[test]
        fn duplication_keeps_the_mean(v in proptest::collection::vec(0.0f64..10.0, 1..30)) {
            let twice: Vec<f64> = v.iter().chain(v.iter()).copied().collect();
            prop_assert_eq!(exact_mean(&v).to_bits(), exact_mean(&twice).to_bits());
        }
    }
}
