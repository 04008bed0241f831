//! Ensemble verification metrics and the RBF maximum mean discrepancy.

use rayon::prelude::*;

use crate::error::{DaisiError, Result};
use crate::filters::Ensemble;

fn check_truth(ens: &Ensemble, truth: &[f64]) -> Result<()> {
    if truth.len() != ens.dim {
        return Err(DaisiError::DimensionMismatch {
            expected: ens.dim,
            got: truth.len(),
        });
    }
    Ok(())
}

/// RMSE of the ensemble mean against the truth over all variables.
pub fn rmse(ens: &Ensemble, truth: &[f64]) -> Result<f64> {
    check_truth(ens, truth)?;
    let m = ens.mean();
    let s: f64 = m.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((s / ens.dim as f64).sqrt())
}

/// Mean over members of each member's RMSE.
pub fn ens_rmse(ens: &Ensemble, truth: &[f64]) -> Result<f64> {
    check_truth(ens, truth)?;
    let d = ens.dim as f64;
    let total: f64 = ens
        .members
        .chunks_exact(ens.dim)
        .map(|x| (x.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d).sqrt())
        .sum();
    Ok(total / ens.len() as f64)
}

/// Fair CRPS of one variable, using the sorted-sample identity for the pair term.
fn crps_1d(values: &mut [f64], truth: f64) -> f64 {
    let j = values.len() as f64;
    let skill: f64 = values.iter().map(|x| (x - truth).abs()).sum();
    values.sort_by(f64::total_cmp);
    // sum_{i,k} |x_i - x_k| = 2 sum_i (2i - J + 1) x_(i)
    let pairs: f64 = 2.0
        * values
            .iter()
            .enumerate()
            .map(|(i, x)| (2.0 * i as f64 - j + 1.0) * x)
            .sum::<f64>();
    (skill - pairs / (2.0 * (j - 1.0))) / j
}

/// Fair (unbiased) CRPS, computed per variable and then averaged.
pub fn crps_fair(ens: &Ensemble, truth: &[f64]) -> Result<f64> {
    check_truth(ens, truth)?;
    if ens.len() < 2 {
        return Err(DaisiError::InvalidParameter(
            "fair CRPS needs at least two members".into(),
        ));
    }
    let d = ens.dim;
    let mut col = vec![0.0; ens.len()];
    let mut total = 0.0;
    for v in 0..d {
        for (c, x) in col.iter_mut().zip(ens.members.chunks_exact(d)) {
            *c = x[v];
        }
        total += crps_1d(&mut col, truth[v]);
    }
    Ok(total / d as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpreadSkill {
    /// Root-mean-square deviation from the ensemble mean over members and variables.
    pub spread: f64,
    /// `None` when the ensemble mean is exact, where the ratio is undefined.
    pub ssr: Option<f64>,
}

/// Spread and spread-skill ratio `sqrt((J+1)/J) spread / rmse`.
///
/// The state components are treated as grid points of a single field, so
/// spread and error are pooled over components before the ratio is taken.
pub fn spread_and_ssr(ens: &Ensemble, truth: &[f64]) -> Result<SpreadSkill> {
    check_truth(ens, truth)?;
    let jn = ens.len();
    if jn < 2 {
        return Err(DaisiError::InvalidParameter("spread needs at least two members".into()));
    }
    let d = ens.dim;
    let m = ens.mean();
    let ss: f64 = ens
        .members
        .chunks_exact(d)
        .map(|x| x.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    let spread = (ss / (jn * d) as f64).sqrt();
    let err = rmse(ens, truth)?;
    let factor = ((jn as f64 + 1.0) / jn as f64).sqrt();
    let ssr = (err > 0.0).then(|| factor * spread / err);
    Ok(SpreadSkill { spread, ssr })
}

/// Metrics of one assimilation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub step: usize,
    pub rmse: f64,
    pub ens_rmse: f64,
    pub crps: f64,
    pub spread: f64,
    pub ssr: Option<f64>,
    pub mmd: Option<f64>,
}

impl MetricReport {
    pub fn compute(ens: &Ensemble, truth: &[f64]) -> Result<Self> {
        let ss = spread_and_ssr(ens, truth)?;
        Ok(MetricReport {
            step: ens.step,
            rmse: rmse(ens, truth)?,
            ens_rmse: ens_rmse(ens, truth)?,
            crps: crps_fair(ens, truth)?,
            spread: ss.spread,
            ssr: ss.ssr,
            mmd: None,
        })
    }
}

/// Step-averaged metrics over an evaluation window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSummary {
    pub steps: usize,
    pub rmse: f64,
    pub ens_rmse: f64,
    pub crps: f64,
    pub spread: f64,
    /// Average over the steps where the ratio is defined.
    pub ssr: f64,
}

impl WindowSummary {
    pub fn from_reports(reports: &[MetricReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let ssrs: Vec<f64> = reports.iter().filter_map(|r| r.ssr).collect();
        Some(WindowSummary {
            steps: reports.len(),
            rmse: avg(|r| r.rmse),
            ens_rmse: avg(|r| r.ens_rmse),
            crps: avg(|r| r.crps),
            spread: avg(|r| r.spread),
            ssr: if ssrs.is_empty() {
                f64::NAN
            } else {
                ssrs.iter().sum::<f64>() / ssrs.len() as f64
            },
        })
    }
}

/// Lower median of the cross-set distances `|a_i - b_j|` for scalar samples.
///
/// Counts pairs below a threshold with two binary searches per `a_i` and
/// bisects over the bit patterns of non-negative doubles, so the result is
/// exactly the order statistic without materialising `N M` distances.
pub fn median_cross_distance_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut sb = b.to_vec();
    sb.sort_by(f64::total_cmp);
    let total = a.len() as u64 * b.len() as u64;
    let rank = (total - 1) / 2 + 1;
    let count_le = |v: f64| -> u64 {
        a.iter()
            .map(|&x| {
                let lo = sb.partition_point(|&y| y < x && x - y > v);
                let hi = sb.partition_point(|&y| y <= x || y - x <= v);
                (hi - lo) as u64
            })
            .sum()
    };
    let amin = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let amax = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let upper = (amax - sb[0]).abs().max((sb[sb.len() - 1] - amin).abs());
    let (mut lo, mut hi) = (0u64, upper.to_bits());
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if count_le(f64::from_bits(mid)) >= rank {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    f64::from_bits(lo)
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Lower median of the cross-set Euclidean distances, any dimension.
pub fn median_cross_distance(a: &[f64], b: &[f64], d: usize) -> f64 {
    if d == 1 {
        return median_cross_distance_1d(a, b);
    }
    let mut dist: Vec<f64> = a
        .chunks_exact(d)
        .flat_map(|x| b.chunks_exact(d).map(move |y| sq_dist(x, y).sqrt()))
        .collect();
    let k = (dist.len() - 1) / 2;
    *dist.select_nth_unstable_by(k, f64::total_cmp).1
}

fn kernel_sum(a: &[f64], b: &[f64], d: usize, inv: f64, skip_diag: bool) -> f64 {
    let rows: Vec<f64> = a
        .par_chunks(d)
        .enumerate()
        .map(|(i, x)| {
            b.chunks_exact(d)
                .enumerate()
                .filter(|(j, _)| !skip_diag || *j != i)
                .map(|(_, y)| (-sq_dist(x, y) * inv).exp())
                .sum::<f64>()
        })
        .collect();
    rows.iter().sum()
}

fn canonical_first(a: &[f64], b: &[f64]) -> bool {
    match a.len().cmp(&b.len()) {
        std::cmp::Ordering::Equal => {
            for (x, y) in a.iter().zip(b) {
                match x.total_cmp(y) {
                    std::cmp::Ordering::Equal => continue,
                    o => return o == std::cmp::Ordering::Less,
                }
            }
            true
        }
        o => o == std::cmp::Ordering::Less,
    }
}

/// RBF maximum mean discrepancy with the median-heuristic bandwidth
/// `sigma^2 = median(|a_i - b_j|) / 2`. Returns `sqrt(max(0, MMD^2))` of the
/// unbiased estimator; samples are row-major with dimension `d`.
pub fn mmd_rbf(a: &[f64], b: &[f64], d: usize) -> Result<f64> {
    if d == 0 || a.len() % d != 0 || b.len() % d != 0 {
        return Err(DaisiError::InvalidParameter(
            "sample sets must be N x d matrices".into(),
        ));
    }
    let (n, m) = (a.len() / d, b.len() / d);
    if n < 2 || m < 2 {
        return Err(DaisiError::InvalidParameter(
            "MMD needs at least two samples per set".into(),
        ));
    }
    // Fixed argument order makes the estimate exactly symmetric.
    let (a, b, n, m) = if canonical_first(a, b) {
        (a, b, n, m)
    } else {
        (b, a, m, n)
    };
    let median = median_cross_distance(a, b, d);
    let sigma2 = median / 2.0;
    if !(sigma2 > 0.0) {
        // Half of all cross pairs coincide; the kernel degenerates to an indicator.
        return Ok(0.0);
    }
    let inv = 1.0 / (2.0 * sigma2);
    let kxx = kernel_sum(a, a, d, inv, true) / (n * (n - 1)) as f64;
    let kyy = kernel_sum(b, b, d, inv, true) / (m * (m - 1)) as f64;
    let kxy = kernel_sum(a, b, d, inv, false) / (n * m) as f64;
    Ok((kxx + kyy - 2.0 * kxy).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ens(v: &[f64], d: usize) -> Ensemble {
        Ensemble::new(v.to_vec(), d).unwrap()
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&ens(&[3.0], 1), &[1.0]).unwrap(), 2.0);
        assert_eq!(rmse(&ens(&[0.0, 2.0], 1), &[0.0]).unwrap(), 1.0);
        assert_eq!(rmse(&ens(&[1.0, 2.0, 3.0], 3), &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(ens_rmse(&ens(&[0.0, 2.0], 1), &[0.0]).unwrap(), 1.0);
        assert!(rmse(&ens(&[1.0], 1), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn crps_examples() {
        assert_eq!(crps_fair(&ens(&[1.0, 1.0, 1.0], 1), &[1.0]).unwrap(), 0.0);
        // Skill 1; pair term over ordered pairs |0-2| + |2-0| = 4, scaled by 1/(2(J-1)) -> 2;
        // (2 - 2) / 2 = 0.
        assert!(crps_fair(&ens(&[0.0, 2.0], 1), &[1.0]).unwrap().abs() < 1e-15);
        assert!(crps_fair(&ens(&[0.0], 1), &[1.0]).is_err());
    }

    #[test]
    fn spread_examples() {
        let s = spread_and_ssr(&ens(&[2.0, 2.0, 2.0], 1), &[0.0]).unwrap();
        assert_eq!((s.spread, s.ssr), (0.0, Some(0.0)));
        let s = spread_and_ssr(&ens(&[-1.0, 1.0], 1), &[0.0]).unwrap();
        assert_eq!(s.ssr, None);
        let s = spread_and_ssr(&ens(&[0.0, 2.0], 1), &[0.0]).unwrap();
        assert_eq!(s.spread, 1.0);
        assert!((s.ssr.unwrap() - 1.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ssr_pools_components() {
        // Component spreads 1 and 3, errors 1 and 0: pooled spread sqrt(5),
        // pooled rmse sqrt(1/2).
        let s = spread_and_ssr(&ens(&[-1.0, -3.0, 1.0, 3.0], 2), &[1.0, 0.0]).unwrap();
        assert!((s.spread - 5f64.sqrt()).abs() < 1e-15);
        assert!((s.ssr.unwrap() - 1.5f64.sqrt() * 10f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mmd_point_masses() {
        let a = vec![0.0; 20];
        let b = vec![100.0; 20];
        let v = mmd_rbf(&a, &b, 1).unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-12);
        let s: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(mmd_rbf(&s, &s, 1).unwrap(), 0.0);
        assert!(mmd_rbf(&[1.0], &[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn median_1d_matches_sorting() {
        let a: Vec<f64> = (0..37).map(|i| ((i * 7919) % 101) as f64 * 0.13 - 3.0).collect();
        let b: Vec<f64> = (0..23).map(|i| ((i * 104_729) % 89) as f64 * 0.21 - 5.0).collect();
        let mut all: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |y| (x - y).abs())).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(median_cross_distance_1d(&a, &b), all[(all.len() - 1) / 2]);
        // Even count with a tie structure: lower median.
        let (a, b) = ([0.0, 1.0], [0.0, 3.0]);
        assert_eq!(median_cross_distance_1d(&a, &b), 1.0);
    }
}
