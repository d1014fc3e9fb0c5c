use serde::{Deserialize, Serialize};

/// Mergeable running mean and second central moment (Welford / Chan et al.).
#[derive(Debug, Default, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MCStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl MCStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(n: u64, mean: f64, m2: f64) -> Self {
        Self { n, mean, m2 }
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Self) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        let (na, nb) = (self.n as f64, other.n as f64);
        self.mean += d * nb / n as f64;
        self.m2 += other.m2 + d * d * na * nb / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn m2(&self) -> f64 {
        self.m2
    }

    /// Unbiased sample variance; 0 with fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            return f64::INFINITY;
        }
        (self.variance() / self.n as f64).sqrt()
    }
}

impl FromIterator<f64> for MCStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::new();
        for x in iter {
            s.push(x);
        }
        s
    }
}

/// `sqrt(a² + b²)` of two standard errors.
pub fn combined_stderr(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_pass(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn constant_values_have_zero_variance() {
        let s: MCStats = std::iter::repeat_n(2.5, 100).collect();
        assert_eq!(s.mean(), 2.5);
        assert_eq!(s.variance(), 0.0);
        assert_eq!(s.stderr(), 0.0);
    }

    #[test]
    fn empty_and_single() {
        let mut s = MCStats::new();
        assert_eq!(s.variance(), 0.0);
        s.push(3.0);
        assert_eq!(s.variance(), 0.0);
        let mut e = MCStats::new();
        e.merge(&s);
        assert_eq!(e, s);
        s.merge(&MCStats::new());
        assert_eq!(e, s);
    }

    proptest! {
        #[test]
        fn merge_matches_pooled_two_pass(
            a in prop::collection::vec(-1e3f64..1e3, 2..200),
            b in prop::collection::vec(-1e3f64..1e3, 2..200),
        ) {
            let mut sa: MCStats = a.iter().copied().collect();
            let sb: MCStats = b.iter().copied().collect();
            sa.merge(&sb);
            let all: Vec<f64> = a.iter().chain(&b).copied().collect();
            let (mean, var) = two_pass(&all);
            prop_assert!((sa.mean() - mean).abs() <= 1e-10 * mean.abs().max(1.0));
            prop_assert!((sa.variance() - var).abs() <= 1e-10 * var.max(1e-12));
        }

        #[test]
        fn merge_is_commutative_and_associative(
            a in prop::collection::vec(-50f64..50.0, 1..60),
            b in prop::collection::vec(-50f64..50.0, 1..60),
            c in prop::collection::vec(-50f64..50.0, 1..60),
        ) {
            let (sa, sb, sc): (MCStats, MCStats, MCStats) =
                (a.iter().copied().collect(), b.iter().copied().collect(), c.iter().copied().collect());
            let mut ab = sa; ab.merge(&sb);
            let mut ba = sb; ba.merge(&sa);
            prop_assert!((ab.mean() - ba.mean()).abs() < 1e-12 * ab.mean().abs().max(1.0));
            prop_assert!((ab.m2() - ba.m2()).abs() < 1e-9 * ab.m2().max(1.0));
            let mut ab_c = ab; ab_c.merge(&sc);
            let mut bc = sb; bc.merge(&sc);
            let mut a_bc = sa; a_bc.merge(&bc);
            prop_assert_eq!(ab_c.count(), a_bc.count());
            prop_assert!((ab_c.mean() - a_bc.mean()).abs() < 1e-12 * ab_c.mean().abs().max(1.0));
            prop_assert!((ab_c.m2() - a_bc.m2()).abs() < 1e-9 * ab_c.m2().max(1.0));
        }
    }
}
