//! Rank correlations. Ties get average ranks (Spearman) or are corrected for
//! in the denominator (Kendall tau-b). `-inf` is an ordinary value here: all
//! `-inf` scores tie for the lowest rank.

use std::cmp::Ordering;

/// 1-based average ranks.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]].total_cmp(&xs[order[i]]) == Ordering::Equal {
            j += 1;
        }
        // positions i..=j (0-based) share rank ((i+1) + (j+1)) / 2
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks. `None` for fewer
/// than 3 points, unequal lengths, or a constant input.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return None;
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Pair counts behind Kendall's tau.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairCounts {
    pub concordant: u64,
    pub discordant: u64,
    /// tied in x only
    pub ties_x: u64,
    /// tied in y only
    pub ties_y: u64,
    pub ties_both: u64,
}

pub fn pair_counts(xs: &[f64], ys: &[f64]) -> PairCounts {
    let mut c = PairCounts::default();
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let dx = xs[i].total_cmp(&xs[j]);
            let dy = ys[i].total_cmp(&ys[j]);
            match (dx, dy) {
                (Ordering::Equal, Ordering::Equal) => c.ties_both += 1,
                (Ordering::Equal, _) => c.ties_x += 1,
                (_, Ordering::Equal) => c.ties_y += 1,
                _ if dx == dy => c.concordant += 1,
                _ => c.discordant += 1,
            }
        }
    }
    c
}

/// Kendall's tau-b, `(C - D) / sqrt((C + D + Tx)(C + D + Ty))`, by O(n²) pair
/// enumeration. `None` for fewer than 3 points, unequal lengths, or when
/// either input is constant.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return None;
    }
    let p = pair_counts(xs, ys);
    let cd = p.concordant + p.discordant;
    let denom = ((cd + p.ties_x) * (cd + p.ties_y)) as f64;
    if denom == 0.0 {
        return None;
    }
    Some((p.concordant as f64 - p.discordant as f64) / denom.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(spearman_rho(&xs, &xs), Some(1.0));
        let rev: Vec<f64> = xs.iter().rev().copied().collect();
        assert_eq!(spearman_rho(&xs, &rev), Some(-1.0));
        // d = (1, 1, 1, 1, 0): 1 - 6*4 / (5*24) = 0.8
        let r = spearman_rho(&xs, &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-15);
    }

    #[test]
    fn kendall_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(kendall_tau(&xs, &xs), Some(1.0));
        let ys = [2.0, 1.0, 4.0, 3.0, 5.0];
        let p = pair_counts(&xs, &ys);
        assert_eq!((p.concordant, p.discordant), (8, 2));
        assert_eq!(kendall_tau(&xs, &ys), Some(0.6));
    }

    #[test]
    fn undefined_cases() {
        assert_eq!(spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(kendall_tau(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(spearman_rho(&[1.0, 2.0], &[1.0, 2.0]), None);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn neg_inf_ties_lowest() {
        let r = average_ranks(&[f64::NEG_INFINITY, 3.0, f64::NEG_INFINITY, 1.0]);
        assert_eq!(r, vec![1.5, 4.0, 1.5, 3.0]);
    }

    #[test]
    fn tied_tau_b_by_hand() {
        // x = (1,1,2,3), y = (1,2,2,3): pairs
        // (0,1) tie x; (0,2) C; (0,3) C; (1,2) tie y; (1,3) C; (2,3) C
        let t = kendall_tau(&[1.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert!((t - 4.0 / 5.0).abs() < 1e-15);
    }
}
