//! Correctly rounded floating point summation.
//!
//! Loss means and normalization statistics go through [`ExactSum`]. The
//! result is the exact real sum rounded once, so it does not depend on the
//! order of the terms, and duplicating every term exactly doubles the result.
//! That is what makes `loss(B ++ B) == loss(B)` hold bit-for-bit.
//!
//! The algorithm keeps a list of non-overlapping partials (Shewchuk) and rounds
//! them half-even at the end, the same scheme as CPython's `math.fsum`.
//! Inputs must be finite.

#[derive(Debug, Clone, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self { partials: Vec::with_capacity(4) }
    }

    pub fn clear(&mut self) {
        self.partials.clear();
    }

    #[inline]
    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // Half-even correction when the remaining partials push past a tie.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }
}

pub fn exact_sum<I: IntoIterator<Item = f64>>(terms: I) -> f64 {
    let mut acc = ExactSum::new();
    for t in terms {
        acc.add(t);
    }
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cancellation_is_exact() {
        assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
        assert_eq!(exact_sum(std::iter::empty()), 0.0);
    }

    #[test]
    fn half_even_tie() {
        // 1 + 2^-53 is a tie between 1 and 1 + 2^-52; the extra tiny term breaks it upward.
        let eps = f64::EPSILON;
        assert_eq!(exact_sum([1.0, eps / 2.0, eps / 1e6]), 1.0 + eps);
        assert_eq!(exact_sum([1.0, eps / 2.0]), 1.0);
    }

    proptest! {
        #[test]
        fn order_independent(mut xs in prop::collection::vec(-1e6f64..1e6, 0..40), seed in any::<u64>()) {
            let a = exact_sum(xs.iter().copied());
            use rand::seq::SliceRandom;
            xs.shuffle(&mut crate::rng::seeded(seed));
            prop_assert_eq!(a.to_bits(), exact_sum(xs.iter().copied()).to_bits());
        }

        #[test]
        fn duplication_doubles(xs in prop::collection::vec(-1e6f64..1e6, 0..40)) {
            let a = exact_sum(xs.iter().copied());
            let b = exact_sum(xs.iter().chain(xs.iter()).copied());
            prop_assert_eq!((2.0 * a).to_bits(), b.to_bits());
        }
    }
}
