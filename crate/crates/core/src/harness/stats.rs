//! Paired sign test over seeds.

use serde::{Deserialize, Serialize};

/// One-sided exact binomial p-value `P(X >= wins)` for `X ~ Bin(wins + losses, 1/2)`.
pub fn sign_test_p_value(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    // log C(n, k) accumulated from k = 0.
    let mut log_c = 0.0f64;
    let mut tail = 0.0;
    let half_n = n as f64 * std::f64::consts::LN_2;
    for k in 0..=n {
        if k > 0 {
            log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            tail += (log_c - half_n).exp();
        }
    }
    tail.min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

/// Tests whether `a` tends to exceed `b` pairwise; ties are dropped.
pub fn paired_sign_test(a: &[f64], b: &[f64]) -> SignTest {
    assert_eq!(a.len(), b.len(), "paired samples differ in length");
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        if x > y {
            wins += 1;
        } else if x < y {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    SignTest {
        wins,
        losses,
        ties,
        p_value: sign_test_p_value(wins, losses),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(wins: usize, n: usize) -> f64 {
        // Pascal's triangle row n, exact in f64 for small n.
        let mut row = vec![1.0f64];
        for _ in 0..n {
            let mut next = vec![1.0; row.len() + 1];
            for i in 1..row.len() {
                next[i] = row[i - 1] + row[i];
            }
            row = next;
        }
        row[wins..].iter().sum::<f64>() / 2f64.powi(n as i32)
    }

    #[test]
    fn matches_pascal_triangle() {
        for n in 0..40 {
            for w in 0..=n {
                let p = sign_test_p_value(w, n - w);
                assert!((p - brute(w, n)).abs() < 1e-12, "{w}/{n}");
            }
        }
    }

    #[test]
    fn fifty_pairs_threshold() {
        assert!(sign_test_p_value(34, 16) < 0.01);
        assert!(sign_test_p_value(33, 17) > 0.01);
        assert!((sign_test_p_value(0, 5) - 1.0).abs() < 1e-12);
        assert!((sign_test_p_value(5, 0) - 1.0 / 32.0).abs() < 1e-12);
    }

    #[test]
    fn ties_are_dropped() {
        let t = paired_sign_test(&[1.0, 2.0, 3.0, 4.0], &[0.0, 2.0, 4.0, 3.0]);
        assert_eq!((t.wins, t.losses, t.ties), (2, 1, 1));
        assert!((t.p_value - 0.5).abs() < 1e-12);
    }
}
