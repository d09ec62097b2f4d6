//! Rank-based tests: Kruskal–Wallis with ε² and Mann–Whitney U with
//! rank-biserial r, plus the tail probabilities they need.

use statrs::function::erf::erfc;
use statrs::function::gamma::gamma_ur;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("need at least {needed} {what}, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("all values are tied; the statistic is undefined")]
    AllTied,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("samples have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// Upper tail of the chi-square distribution with `df` degrees of freedom.
pub fn chi_square_sf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_ur(df as f64 / 2.0, x / 2.0)
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranks {
    /// 1-based midranks in input order.
    pub ranks: Vec<f64>,
    /// Size of every tie group with more than one member.
    pub tie_groups: Vec<usize>,
}

impl Ranks {
    /// Σ (t³ − t) over tie groups.
    pub fn tie_term(&self) -> f64 {
        self.tie_groups
            .iter()
            .map(|&t| {
                let t = t as f64;
                t * t * t - t
            })
            .sum()
    }
}

pub fn ranks_with_ties(values: &[f64]) -> Result<Ranks, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty("values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite("values"));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut tie_groups = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let mid = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = mid;
        }
        if end - start > 1 {
            tie_groups.push(end - start);
        }
        start = end;
    }
    Ok(Ranks { ranks, tie_groups })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KruskalResult {
    pub h_statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub epsilon_squared: f64,
}

/// ε² = (H − k + 1)/(n − k).
pub fn epsilon_squared(h: f64, k: usize, n: usize) -> f64 {
    (h - k as f64 + 1.0) / (n as f64 - k as f64)
}

pub fn kruskal_wallis(groups: &[&[f64]]) -> Result<KruskalResult, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFew {
            what: "groups",
            needed: 2,
            got: groups.len(),
        });
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(StatsError::Empty("group"));
    }
    let all: Vec<f64> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    let n = all.len();
    if n < 3 {
        return Err(StatsError::TooFew {
            what: "observations",
            needed: 3,
            got: n,
        });
    }
    let ranks = ranks_with_ties(&all)?;
    let nf = n as f64;
    let correction = 1.0 - ranks.tie_term() / (nf * nf * nf - nf);
    if correction <= 0.0 {
        return Err(StatsError::AllTied);
    }
    let mut offset = 0;
    let mut sum = 0.0;
    for g in groups {
        let r: f64 = ranks.ranks[offset..offset + g.len()].iter().sum();
        sum += r * r / g.len() as f64;
        offset += g.len();
    }
    let h = ((12.0 / (nf * (nf + 1.0)) * sum - 3.0 * (nf + 1.0)) / correction).max(0.0);
    let k = groups.len();
    Ok(KruskalResult {
        h_statistic: h,
        df: k - 1,
        p_value: chi_square_sf(h, k - 1),
        epsilon_squared: epsilon_squared(h, k, n),
    })
}

/// Largest n₁·n₂ for which the exact null distribution is enumerated.
pub const EXACT_LIMIT: usize = 400;

#[derive(Clone, Debug, PartialEq)]
pub struct MannWhitneyResult {
    /// Wins of the first sample, ties counting one half.
    pub u_statistic: f64,
    /// Exact p when available, otherwise the normal approximation.
    pub p_value: f64,
    /// Two-sided, tie-corrected, with 0.5 continuity correction.
    pub p_normal: f64,
    /// Two-sided exact p; only for tie-free samples with n₁·n₂ ≤ [`EXACT_LIMIT`].
    pub p_exact: Option<f64>,
    pub rank_biserial: f64,
}

pub fn rank_biserial(u: f64, n1: usize, n2: usize) -> f64 {
    1.0 - 2.0 * u / (n1 * n2) as f64
}

pub fn mann_whitney(g1: &[f64], g2: &[f64]) -> Result<MannWhitneyResult, StatsError> {
    if g1.is_empty() || g2.is_empty() {
        return Err(StatsError::Empty("sample"));
    }
    let all: Vec<f64> = g1.iter().chain(g2).copied().collect();
    let ranks = ranks_with_ties(&all)?;
    let (n1, n2) = (g1.len(), g2.len());
    let (f1, f2) = (n1 as f64, n2 as f64);
    let r1: f64 = ranks.ranks[..n1].iter().sum();
    let u = r1 - f1 * (f1 + 1.0) / 2.0;

    let n = f1 + f2;
    let mean = f1 * f2 / 2.0;
    let var = f1 * f2 / 12.0 * ((n + 1.0) - ranks.tie_term() / (n * (n - 1.0)));
    let p_normal = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
        (2.0 * normal_sf(z)).min(1.0)
    };
    let p_exact = (ranks.tie_groups.is_empty() && n1 * n2 <= EXACT_LIMIT)
        .then(|| exact_two_sided(u.round() as usize, n1, n2));
    Ok(MannWhitneyResult {
        u_statistic: u,
        p_value: p_exact.unwrap_or(p_normal),
        p_normal,
        p_exact,
        rank_biserial: rank_biserial(u, n1, n2),
    })
}

/// Counts of each U value over all placements of n₁ items among n₁+n₂.
fn u_distribution(n1: usize, n2: usize) -> Vec<f64> {
    // table[i][j] = counts for sizes (i, j); built up over j for each i.
    let max = n1 * n2;
    let mut prev: Vec<Vec<f64>> = vec![vec![1.0]; n2 + 1];
    for i in 1..=n1 {
        let mut cur: Vec<Vec<f64>> = Vec::with_capacity(n2 + 1);
        cur.push(vec![1.0]);
        for j in 1..=n2 {
            // Largest item belongs to sample 1 (beats all j others) or to sample 2.
            let mut counts = vec![0.0; i * j + 1];
            for (u, c) in prev[j].iter().enumerate() {
                counts[u + j] += c;
            }
            for (u, c) in cur[j - 1].iter().enumerate() {
                counts[u] += c;
            }
            cur.push(counts);
        }
        prev = cur;
    }
    let dist = prev.pop().expect("n2 + 1 rows");
    debug_assert_eq!(dist.len(), max + 1);
    dist
}

fn exact_two_sided(u: usize, n1: usize, n2: usize) -> f64 {
    let dist = u_distribution(n1, n2);
    let total: f64 = dist.iter().sum();
    let lower: f64 = dist[..=u].iter().sum::<f64>() / total;
    let upper: f64 = dist[u..].iter().sum::<f64>() / total;
    (2.0 * lower.min(upper)).min(1.0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooFew {
            what: "pairs",
            needed: 2,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::AllTied);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation of midranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    pearson(&ranks_with_ties(x)?.ranks, &ranks_with_ties(y)?.ranks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let below = v.iter().filter(|&&y| y < x).count() as f64;
                let equal = v.iter().filter(|&&y| y == x).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    }

    #[test]
    fn ranks_simple_cases() {
        assert_eq!(
            ranks_with_ties(&[10.0, 20.0, 30.0]).unwrap().ranks,
            vec![1.0, 2.0, 3.0]
        );
        let r = ranks_with_ties(&[5.0, 5.0]).unwrap();
        assert_eq!(r.ranks, vec![1.5, 1.5]);
        assert_eq!(r.tie_groups, vec![2]);
        assert!(ranks_with_ties(&[]).is_err());
    }

    proptest! {
        #[test]
        fn ranks_match_brute_force(v in prop::collection::vec(0u8..6, 1..40)) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            prop_assert_eq!(ranks_with_ties(&v).unwrap().ranks, brute_ranks(&v));
        }

        #[test]
        fn u_is_complementary(
            a in prop::collection::vec(0u8..10, 1..15),
            b in prop::collection::vec(0u8..10, 1..15),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let ab = mann_whitney(&a, &b).unwrap();
            let ba = mann_whitney(&b, &a).unwrap();
            prop_assert!((ab.u_statistic + ba.u_statistic - (a.len() * b.len()) as f64).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab.rank_biserial));
            // U also equals the direct pair count.
            let mut wins = 0.0;
            for x in &a { for y in &b {
                if x > y { wins += 1.0 } else if x == y { wins += 0.5 }
            }}
            prop_assert!((ab.u_statistic - wins).abs() < 1e-9);
        }

        #[test]
        fn kruskal_is_rank_invariant(
            a in prop::collection::vec(-3.0f64..3.0, 2..10),
            b in prop::collection::vec(-3.0f64..3.0, 2..10),
            c in prop::collection::vec(-3.0f64..3.0, 2..10),
        ) {
            let exp = |v: &[f64]| v.iter().map(|x| x.exp()).collect::<Vec<_>>();
            let h1 = kruskal_wallis(&[&a, &b, &c]).unwrap().h_statistic;
            let h2 = kruskal_wallis(&[&exp(&a), &exp(&b), &exp(&c)]).unwrap().h_statistic;
            prop_assert!((h1 - h2).abs() < 1e-9);
        }
    }

    #[test]
    fn kruskal_hand_example() {
        let r = kruskal_wallis(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert!((r.h_statistic - 2.4).abs() < 1e-12);
        assert_eq!(r.df, 1);
        assert!((r.p_value - chi_square_sf(2.4, 1)).abs() < 1e-12);
    }

    #[test]
    fn epsilon_squared_reproduces_reported_value() {
        let e = epsilon_squared(38.517, 3, 150);
        assert!((e - 36.517 / 147.0).abs() < 1e-12);
        assert!((e - 0.248).abs() < 5e-4);
    }

    #[test]
    fn exchangeable_groups_give_no_signal() {
        let r = kruskal_wallis(&[&[1.0, 4.0, 5.0, 8.0], &[2.0, 3.0, 6.0, 7.0]]).unwrap();
        assert!(r.h_statistic < 1e-12);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kruskal_errors() {
        assert_eq!(
            kruskal_wallis(&[&[1.0, 2.0]]).unwrap_err(),
            StatsError::TooFew {
                what: "groups",
                needed: 2,
                got: 1
            }
        );
        assert_eq!(
            kruskal_wallis(&[&[1.0, 1.0], &[1.0]]).unwrap_err(),
            StatsError::AllTied
        );
        assert!(kruskal_wallis(&[&[1.0], &[]]).is_err());
    }

    #[test]
    fn rank_biserial_table_values() {
        for (u, r) in [(1825.0, -0.4600), (2096.0, -0.6768), (1665.0, -0.3320)] {
            assert!((rank_biserial(u, 50, 50) - r).abs() < 1e-12);
        }
        assert_eq!(rank_biserial(1250.0, 50, 50), 0.0);
    }

    #[test]
    fn complete_separation() {
        let r = mann_whitney(&[3.0, 4.0], &[1.0, 2.0]).unwrap();
        assert_eq!(r.u_statistic, 4.0);
        assert_eq!(r.rank_biserial, -1.0);
        // 1 of 6 placements is this extreme on each side.
        assert!((r.p_exact.unwrap() - 2.0 / 6.0).abs() < 1e-12);
    }

    /// Two-sided exact p by enumerating every split of the pooled sample.
    fn enumerated_p(a: &[f64], b: &[f64]) -> f64 {
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let n = pooled.len();
        let u_of = |mask: u32| {
            let (x, y): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| mask & (1 << i) != 0);
            let mut u = 0.0;
            for &i in &x {
                for &j in &y {
                    if pooled[i] > pooled[j] {
                        u += 1.0
                    }
                }
            }
            u
        };
        let observed = u_of((1u32 << a.len()) - 1);
        let (mut le, mut ge, mut total) = (0.0, 0.0, 0.0);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != a.len() {
                continue;
            }
            let u = u_of(mask);
            total += 1.0;
            if u <= observed {
                le += 1.0
            }
            if u >= observed {
                ge += 1.0
            }
        }
        (2.0 * f64::min(le, ge) / total).min(1.0)
    }

    #[test]
    fn exact_p_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in 1..=7 {
            for _ in 0..3 {
                let a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
                let b: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.3).collect();
                let p = mann_whitney(&a, &b).unwrap().p_exact.unwrap();
                assert!((p - enumerated_p(&a, &b)).abs() < 1e-12, "n={n}");
            }
        }
        let a = [0.1, 0.5, 0.9];
        let b = [0.2, 0.3, 0.4, 0.6, 0.7];
        assert!(
            (mann_whitney(&a, &b).unwrap().p_exact.unwrap() - enumerated_p(&a, &b)).abs() < 1e-12
        );
    }

    #[test]
    fn exact_and_normal_agree_at_ten_per_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let a: Vec<f64> = (0..10).map(|_| rng.random()).collect();
            let b: Vec<f64> = (0..10).map(|_| rng.random::<f64>() + 0.2).collect();
            let r = mann_whitney(&a, &b).unwrap();
            assert!((r.p_exact.unwrap() - r.p_normal).abs() < 0.02);
        }
    }

    #[test]
    fn ties_or_large_samples_use_normal_approximation() {
        let r = mann_whitney(&[1.0, 1.0, 2.0], &[1.0, 3.0]).unwrap();
        assert!(r.p_exact.is_none());
        assert_eq!(r.p_value, r.p_normal);
        let big: Vec<f64> = (0..21).map(f64::from).collect();
        let other: Vec<f64> = (0..20).map(|x| f64::from(x) + 0.5).collect();
        assert!(mann_whitney(&big, &other).unwrap().p_exact.is_none());
    }

    #[test]
    fn u_distribution_counts_placements() {
        let d = u_distribution(3, 4);
        assert_eq!(d.iter().sum::<f64>(), 35.0);
        assert_eq!(d.len(), 13);
        for u in 0..13 {
            assert_eq!(d[u], d[12 - u]);
        }
    }

    #[test]
    fn tails() {
        assert_eq!(chi_square_sf(0.0, 3), 1.0);
        assert_eq!(normal_sf(0.0), 0.5);
        let p = normal_sf(1.959963984540054);
        assert!((p / 0.025 - 1.0).abs() < 1e-10, "{p}");
        // chi-square(2) has sf exp(-x/2).
        assert!((chi_square_sf(3.0, 2) - (-1.5f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn chi_square_tail_matches_quadrature() {
        // df=1 density; substitute x = s² to remove the endpoint singularity:
        // ∫_0^a f(x) dx = ∫_0^√a 2/√(2π) e^{-s²/2} ds.
        let upper = 2.4f64.sqrt();
        let steps = 20_000;
        let h = upper / steps as f64;
        let g = |s: f64| 2.0 / (2.0 * std::f64::consts::PI).sqrt() * (-s * s / 2.0).exp();
        let mut simpson = g(0.0) + g(upper);
        for i in 1..steps {
            simpson += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let cdf = simpson * h / 3.0;
        assert!((chi_square_sf(2.4, 1) - (1.0 - cdf)).abs() < 1e-10);
        assert!((chi_square_sf(2.4, 1) - 0.1213).abs() < 5e-5);
    }

    #[test]
    fn correlations() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &[2.0, 4.0, 6.0, 8.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[1.0, 10.0, 100.0, 1000.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&x, &[1.0; 4]).unwrap_err(), StatsError::AllTied);
        assert!(pearson(&x, &[1.0]).is_err());
    }
}
