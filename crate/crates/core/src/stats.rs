//! Shapiro-Wilk normality test and a 2x3 two-way factor analysis with
//! permutation p-values.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("sample size {0} outside 3..=5000")]
    SampleSize(usize),
    #[error("samples have zero variance")]
    ZeroVariance,
    #[error("non-finite sample")]
    NonFinite,
    #[error("cell ({0}, {1}) has fewer than two observations")]
    EmptyCell(usize, usize),
    #[error("level out of range: ({0}, {1})")]
    Level(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShapiroWilk {
    pub w: f64,
    pub p_value: f64,
    pub n: usize,
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

/// Royston's AS R94 approximation of the Shapiro-Wilk test.
pub fn shapiro_wilk(samples: &[f64]) -> Result<ShapiroWilk, StatsError> {
    let n = samples.len();
    if !(3..=5000).contains(&n) {
        return Err(StatsError::SampleSize(n));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let range = x[n - 1] - x[0];
    if range <= 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let a = swilk_coefficients(n);

    // scale by the range, as the reference routine does, before summing
    let xs: Vec<f64> = x.iter().map(|v| (v - x[0]) / range).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let ssx: f64 = xs.iter().map(|v| (v - mean).powi(2)).sum();
    let sax: f64 = (0..n / 2).map(|i| a[i] * (xs[n - 1 - i] - xs[i])).sum();
    let w = (sax * sax / ssx).min(1.0);

    Ok(ShapiroWilk { w, p_value: swilk_p_value(w, n), n })
}

/// The first n/2 coefficients (the rest are their negatives).
fn swilk_coefficients(n: usize) -> Vec<f64> {
    const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
    const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    let nn2 = n / 2;
    if n == 3 {
        return vec![std::f64::consts::FRAC_1_SQRT_2];
    }
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let an25 = n as f64 + 0.25;
    let m: Vec<f64> = (1..=nn2).map(|i| std_normal.inverse_cdf((i as f64 - 0.375) / an25)).collect();
    let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
    let ssumm2 = summ2.sqrt();
    let rsn = 1.0 / (n as f64).sqrt();
    let a1 = poly(&C1, rsn) - m[0] / ssumm2;
    let mut a = vec![0.0; nn2];
    a[0] = a1;
    let (first, fac) = if n > 5 {
        let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
        a[1] = a2;
        (2, ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt())
    } else {
        (1, ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt())
    };
    for i in first..nn2 {
        a[i] = -m[i] / fac;
    }
    a
}

fn swilk_p_value(w: f64, n: usize) -> f64 {
    const G: [f64; 2] = [-2.273, 0.459];
    const C3: [f64; 4] = [0.544, -0.39978, 0.025054, -6.714e-4];
    const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
    const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
    const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
    if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        let stqr = std::f64::consts::FRAC_PI_3;
        return (pi6 * (w.sqrt().asin() - stqr)).max(0.0);
    }
    let an = n as f64;
    let mut y = (1.0 - w).ln();
    let (m, s) = if n <= 11 {
        let gamma = poly(&G, an);
        if y >= gamma {
            return 1e-99;
        }
        y = -(gamma - y).ln();
        (poly(&C3, an), poly(&C4, an).exp())
    } else {
        let xx = an.ln();
        (poly(&C5, xx), poly(&C6, xx).exp())
    };
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    (1.0 - std_normal.cdf((y - m) / s)).clamp(0.0, 1.0)
}

pub const DEFAULT_PERMUTATIONS: usize = 10_000;

/// One observation: level of factor A (0..2), level of factor B (0..3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub a: usize,
    pub b: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectRow {
    pub ss: f64,
    pub df: usize,
    pub ms: f64,
    /// `None` when both the effect and the residual vanish.
    pub f: Option<f64>,
    pub p_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualRow {
    pub ss: f64,
    pub df: usize,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorAnalysis {
    pub a: EffectRow,
    pub b: EffectRow,
    pub interaction: EffectRow,
    pub residual: ResidualRow,
    pub cell_means: [[f64; 3]; 2],
    pub cell_counts: [[usize; 3]; 2],
    pub permutations: usize,
    pub seed: u64,
}

const LA: usize = 2;
const LB: usize = 3;

// Residual sums of squares of the nested models, on centred data.
struct Fits {
    full: f64,
    additive: f64,
    a_only: f64,
    b_only: f64,
}

fn group_rss(obs: &[Observation], ys: &[f64], key: impl Fn(&Observation) -> usize, groups: usize) -> f64 {
    let mut sum = vec![0.0; groups];
    let mut cnt = vec![0usize; groups];
    for (o, y) in obs.iter().zip(ys) {
        sum[key(o)] += y;
        cnt[key(o)] += 1;
    }
    obs.iter()
        .zip(ys)
        .map(|(o, y)| {
            let g = key(o);
            (y - sum[g] / cnt[g] as f64).powi(2)
        })
        .sum()
}

/// Least squares for y ~ 1 + A + B with treatment coding. Returns fitted values.
fn additive_fit(obs: &[Observation], ys: &[f64]) -> Vec<f64> {
    let row = |o: &Observation| [1.0, (o.a == 1) as u8 as f64, (o.b == 1) as u8 as f64, (o.b == 2) as u8 as f64];
    let mut xtx = [[0.0f64; 4]; 4];
    let mut xty = [0.0f64; 4];
    for (o, y) in obs.iter().zip(ys) {
        let r = row(o);
        for i in 0..4 {
            xty[i] += r[i] * y;
            for j in 0..4 {
                xtx[i][j] += r[i] * r[j];
            }
        }
    }
    let beta = solve4(xtx, xty);
    obs.iter().map(|o| row(o).iter().zip(&beta).map(|(x, b)| x * b).sum()).collect()
}

/// Gaussian elimination with partial pivoting on a small SPD system.
fn solve4(mut m: [[f64; 4]; 4], mut v: [f64; 4]) -> [f64; 4] {
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, piv);
        v.swap(col, piv);
        for r in col + 1..4 {
            let f = m[r][col] / m[col][col];
            for c in col..4 {
                m[r][c] -= f * m[col][c];
            }
            v[r] -= f * v[col];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|c| m[r][c] * x[c]).sum();
        x[r] = (v[r] - s) / m[r][r];
    }
    x
}

fn fits(obs: &[Observation], ys: &[f64]) -> Fits {
    let fitted = additive_fit(obs, ys);
    Fits {
        full: group_rss(obs, ys, |o| o.a * LB + o.b, LA * LB),
        additive: ys.iter().zip(&fitted).map(|(y, f)| (y - f).powi(2)).sum(),
        a_only: group_rss(obs, ys, |o| o.a, LA),
        b_only: group_rss(obs, ys, |o| o.b, LB),
    }
}

// Type II sums of squares, each clipped at zero against rounding.
fn effect_ss(f: &Fits) -> [f64; 3] {
    [(f.b_only - f.additive).max(0.0), (f.a_only - f.additive).max(0.0), (f.additive - f.full).max(0.0)]
}

fn f_stat(ss: f64, df: usize, ms_resid: f64, scale: f64) -> Option<f64> {
    let tiny = 1e-12 * scale;
    if ms_resid <= tiny {
        return if ss <= tiny { None } else { Some(f64::INFINITY) };
    }
    Some((ss / df as f64) / ms_resid)
}

/// Two-way fixed-effects analysis of a 2x3 design. F statistics use Type II
/// sums of squares; p-values come from `permutations` seeded shuffles:
/// A within levels of B, B within levels of A, and additive-model
/// residuals for the interaction.
pub fn factor_analysis_2x3(obs: &[Observation], permutations: usize, seed: u64) -> Result<FactorAnalysis, StatsError> {
    let mut counts = [[0usize; 3]; 2];
    let mut sums = [[0.0f64; 3]; 2];
    for o in obs {
        if o.a >= LA || o.b >= LB {
            return Err(StatsError::Level(o.a, o.b));
        }
        if !o.value.is_finite() {
            return Err(StatsError::NonFinite);
        }
        counts[o.a][o.b] += 1;
        sums[o.a][o.b] += o.value;
    }
    for a in 0..LA {
        for b in 0..LB {
            if counts[a][b] < 2 {
                return Err(StatsError::EmptyCell(a, b));
            }
        }
    }
    let n = obs.len();
    let grand = obs.iter().map(|o| o.value).sum::<f64>() / n as f64;
    let ys: Vec<f64> = obs.iter().map(|o| o.value - grand).collect();
    let scale = ys.iter().map(|y| y * y).sum::<f64>().max(f64::MIN_POSITIVE);

    let df_resid = n - LA * LB;
    let dfs = [LA - 1, LB - 1, (LA - 1) * (LB - 1)];
    let observed = fits(obs, &ys);
    let ss = effect_ss(&observed);
    let ms_resid = observed.full / df_resid as f64;
    let f_obs: Vec<Option<f64>> = (0..3).map(|k| f_stat(ss[k], dfs[k], ms_resid, scale)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = [0usize; 3];
    let by_level = |key: &dyn Fn(&Observation) -> usize, levels: usize| -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); levels];
        for (i, o) in obs.iter().enumerate() {
            g[key(o)].push(i);
        }
        g
    };
    let within_b = by_level(&|o| o.b, LB);
    let within_a = by_level(&|o| o.a, LA);
    let fitted = additive_fit(obs, &ys);
    let resid: Vec<f64> = ys.iter().zip(&fitted).map(|(y, f)| y - f).collect();

    let mut perm = ys.clone();
    let mut shuffled = resid.clone();
    for _ in 0..permutations {
        for (k, groups) in [(0usize, &within_b), (1, &within_a)] {
            if f_obs[k].is_none() {
                continue;
            }
            perm.copy_from_slice(&ys);
            for g in groups.iter() {
                let mut vals: Vec<f64> = g.iter().map(|&i| ys[i]).collect();
                vals.shuffle(&mut rng);
                for (&i, v) in g.iter().zip(vals) {
                    perm[i] = v;
                }
            }
            let fp = fits(obs, &perm);
            let f = f_stat(effect_ss(&fp)[k], dfs[k], fp.full / df_resid as f64, scale);
            if f.zip(f_obs[k]).is_some_and(|(f, o)| f >= o * (1.0 - 1e-9)) {
                exceed[k] += 1;
            }
        }
        if f_obs[2].is_some() {
            shuffled.shuffle(&mut rng);
            for i in 0..n {
                perm[i] = fitted[i] + shuffled[i];
            }
            let fp = fits(obs, &perm);
            let f = f_stat(effect_ss(&fp)[2], dfs[2], fp.full / df_resid as f64, scale);
            if f.zip(f_obs[2]).is_some_and(|(f, o)| f >= o * (1.0 - 1e-9)) {
                exceed[2] += 1;
            }
        }
    }

    let row = |k: usize| EffectRow {
        ss: ss[k],
        df: dfs[k],
        ms: ss[k] / dfs[k] as f64,
        f: f_obs[k],
        p_value: match f_obs[k] {
            None => 1.0,
            Some(_) if permutations == 0 => f64::NAN,
            Some(_) => exceed[k] as f64 / permutations as f64,
        },
    };
    let mut cell_means = [[0.0; 3]; 2];
    for a in 0..LA {
        for b in 0..LB {
            cell_means[a][b] = sums[a][b] / counts[a][b] as f64;
        }
    }
    Ok(FactorAnalysis {
        a: row(0),
        b: row(1),
        interaction: row(2),
        residual: ResidualRow { ss: observed.full, df: df_resid, ms: ms_resid },
        cell_means,
        cell_counts: counts,
        permutations,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Contrast {
    pub level_x: usize,
    pub level_y: usize,
    pub mean_diff: f64,
    pub p_value: f64,
}

/// Two-sided permutation test for equal means between two levels of factor
/// B, shuffling labels only within each level of A.
pub fn protocol_contrast(obs: &[Observation], x: usize, y: usize, permutations: usize, seed: u64) -> Result<Contrast, StatsError> {
    if x >= LB || y >= LB || x == y {
        return Err(StatsError::Level(x, y));
    }
    let sel: Vec<&Observation> = obs.iter().filter(|o| o.b == x || o.b == y).collect();
    for a in 0..LA {
        for b in [x, y] {
            if sel.iter().filter(|o| o.a == a && o.b == b).count() < 2 {
                return Err(StatsError::EmptyCell(a, b));
            }
        }
    }
    let diff = |labels: &[usize]| {
        let (mut sx, mut nx, mut sy, mut ny) = (0.0, 0usize, 0.0, 0usize);
        for (o, &l) in sel.iter().zip(labels) {
            if l == x {
                sx += o.value;
                nx += 1;
            } else {
                sy += o.value;
                ny += 1;
            }
        }
        sx / nx as f64 - sy / ny as f64
    };
    let labels: Vec<usize> = sel.iter().map(|o| o.b).collect();
    let observed = diff(&labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = (0..LA).map(|a| (0..sel.len()).filter(|&i| sel[i].a == a).collect()).collect();
    let mut perm = labels.clone();
    let mut exceed = 0usize;
    for _ in 0..permutations {
        for g in &groups {
            let mut l: Vec<usize> = g.iter().map(|&i| labels[i]).collect();
            l.shuffle(&mut rng);
            for (&i, v) in g.iter().zip(l) {
                perm[i] = v;
            }
        }
        if diff(&perm).abs() >= observed.abs() * (1.0 - 1e-9) {
            exceed += 1;
        }
    }
    let p_value = if permutations == 0 { f64::NAN } else { exceed as f64 / permutations as f64 };
    Ok(Contrast { level_x: x, level_y: y, mean_diff: observed, p_value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal as NormalDist};

    #[test]
    fn constant_samples_rejected() {
        assert_eq!(shapiro_wilk(&[2.0; 10]), Err(StatsError::ZeroVariance));
        assert_eq!(shapiro_wilk(&[1.0, 2.0]), Err(StatsError::SampleSize(2)));
    }

    #[test]
    fn three_points_closed_form() {
        // evenly spaced triple is the most normal-looking n=3 sample
        let r = shapiro_wilk(&[1.0, 2.0, 3.0]).unwrap();
        assert!((r.w - 1.0).abs() < 1e-12);
        assert!((r.p_value - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn shapiro_affine_invariant(v in proptest::collection::vec(-100.0f64..100.0, 3..200), shift in -1e3f64..1e3, scale in 0.01f64..100.0) {
            prop_assume!(v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min) > 1e-3);
            let a = shapiro_wilk(&v).unwrap();
            let t: Vec<f64> = v.iter().map(|x| x * scale + shift).collect();
            let b = shapiro_wilk(&t).unwrap();
            prop_assert!((a.w - b.w).abs() < 1e-9, "{} vs {}", a.w, b.w);
            prop_assert!(a.w > 0.0 && a.w <= 1.0);
            prop_assert!((0.0..=1.0).contains(&a.p_value));
        }
    }

    fn planted(net: [f64; 2], proto: [f64; 3], per_cell: usize, seed: u64) -> Vec<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = NormalDist::new(0.0, 1.0).unwrap();
        let mut v = Vec::new();
        for a in 0..2 {
            for b in 0..3 {
                for _ in 0..per_cell {
                    v.push(Observation { a, b, value: net[a] + proto[b] + noise.sample(&mut rng) });
                }
            }
        }
        v
    }

    #[test]
    fn identical_observations_are_no_effect() {
        let obs: Vec<_> = (0..12).map(|i| Observation { a: i % 2, b: i % 3, value: 5.0 }).collect();
        let r = factor_analysis_2x3(&obs, 100, 1).unwrap();
        for row in [r.a, r.b, r.interaction] {
            assert_eq!(row.f, None);
            assert_eq!(row.p_value, 1.0);
        }
    }

    #[test]
    fn network_effect_detected() {
        let obs = planted([100.0, 80.0], [0.0; 3], 20, 11);
        let r = factor_analysis_2x3(&obs, 2000, 5).unwrap();
        assert!(r.a.p_value < 0.01);
        assert!(r.b.p_value > 0.05, "{}", r.b.p_value);
    }

    #[test]
    fn tcpros_shift_with_equal_qos_levels() {
        let obs = planted([0.0, 0.0], [10.0, 10.0, 14.0], 10, 21);
        let r = factor_analysis_2x3(&obs, 2000, 4).unwrap();
        assert!(r.b.p_value < 0.01);
        let c = protocol_contrast(&obs, 0, 1, 2000, 4).unwrap();
        assert!(c.p_value > 0.05, "{}", c.p_value);
        let c = protocol_contrast(&obs, 0, 2, 2000, 4).unwrap();
        assert!(c.p_value < 0.01);
    }

    #[test]
    fn missing_cell_is_an_error() {
        let obs = vec![Observation { a: 0, b: 0, value: 1.0 }, Observation { a: 0, b: 0, value: 2.0 }];
        assert_eq!(factor_analysis_2x3(&obs, 10, 0), Err(StatsError::EmptyCell(0, 1)));
    }

    #[test]
    fn balanced_sums_match_textbook_formulas() {
        let obs = planted([3.0, 1.0], [0.0, 2.0, -1.0], 4, 2);
        let r = factor_analysis_2x3(&obs, 0, 0).unwrap();
        let grand = obs.iter().map(|o| o.value).sum::<f64>() / obs.len() as f64;
        let mean_of = |f: &dyn Fn(&Observation) -> bool| {
            let v: Vec<f64> = obs.iter().filter(|o| f(o)).map(|o| o.value).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let ss_a: f64 = (0..2).map(|a| 12.0 * (mean_of(&|o| o.a == a) - grand).powi(2)).sum();
        let ss_b: f64 = (0..3).map(|b| 8.0 * (mean_of(&|o| o.b == b) - grand).powi(2)).sum();
        assert!((r.a.ss - ss_a).abs() < 1e-9);
        assert!((r.b.ss - ss_b).abs() < 1e-9);
        let total: f64 = obs.iter().map(|o| (o.value - grand).powi(2)).sum();
        assert!((r.a.ss + r.b.ss + r.interaction.ss + r.residual.ss - total).abs() < 1e-9);
    }

    #[test]
    fn permutation_p_is_reproducible() {
        let obs = planted([1.0, 1.2], [0.0, 0.1, 0.3], 5, 3);
        assert_eq!(factor_analysis_2x3(&obs, 300, 9).unwrap(), factor_analysis_2x3(&obs, 300, 9).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn f_invariant_under_shift(seed in any::<u64>(), shift in -1e4f64..1e4) {
            let obs = planted([0.0, 1.0], [0.0, 0.5, 1.0], 3, seed);
            let moved: Vec<_> = obs.iter().map(|o| Observation { value: o.value + shift, ..*o }).collect();
            let a = factor_analysis_2x3(&obs, 0, 0).unwrap();
            let b = factor_analysis_2x3(&moved, 0, 0).unwrap();
            for (x, y) in [(a.a.f, b.a.f), (a.b.f, b.b.f), (a.interaction.f, b.interaction.f)] {
                let (x, y) = (x.unwrap(), y.unwrap());
                prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{} vs {}", x, y);
            }
        }
    }
}
