//! Normalized mean error, cumulative error curves, AUC, failure rate and
//! yaw binning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LandmarkSet;
use crate::data::BoundingBox;
use crate::error::{CoreError, Result};

pub const AUC_THRESHOLD: f64 = 0.07;
pub const CED_STEP: f64 = 1e-4;
pub const CED_MAX: f64 = 0.1;

/// Mean point-to-point distance over landmarks visible in both sets,
/// divided by `sqrt(w * h)` of `bbox`. Only x and y are compared.
pub fn nme(gt: &LandmarkSet, pred: &LandmarkSet, bbox: &BoundingBox) -> Result<f64> {
    if gt.len() != pred.len() {
        return Err(CoreError::Contract(format!(
            "ground truth has {} landmarks, prediction has {}",
            gt.len(),
            pred.len()
        )));
    }
    let d = bbox.d();
    if !(d > 0.0) || !d.is_finite() {
        return Err(CoreError::DegenerateBbox { w: bbox.w, h: bbox.h });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in 0..gt.len() {
        if !(gt.is_visible(k) && pred.is_visible(k)) {
            continue;
        }
        let (a, b) = (gt.xy(k), pred.xy(k));
        sum += (a.0 - b.0).hypot(a.1 - b.1) / d;
        n += 1;
    }
    if n == 0 {
        return Err(CoreError::EmptySample);
    }
    Ok(sum / n as f64)
}

/// Mean `|z_gt - z_pred| / d` over all landmarks.
pub fn depth_error(gt: &[f64], pred: &[f64], d: f64) -> Result<f64> {
    if gt.len() != pred.len() || gt.is_empty() {
        return Err(CoreError::Contract(format!(
            "depth vectors of length {} and {}",
            gt.len(),
            pred.len()
        )));
    }
    if !(d > 0.0) {
        return Err(CoreError::DegenerateBbox { w: d, h: d });
    }
    Ok(gt.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / (d * gt.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub id: String,
    pub nme: f64,
    pub yaw: Option<f64>,
    pub landmarks_used: usize,
}

/// Fraction of samples at or below each threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CedCurve {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
}

/// Thresholds `i * max / n` for `i = 0..=n`, `n = round(max / step)`.
pub fn ced_grid(step: f64, max: f64) -> Vec<f64> {
    let n = (max / step).round() as usize;
    (0..=n).map(|i| i as f64 * max / n as f64).collect()
}

pub fn ced_curve(results: &[EvalResult], step: f64) -> Result<CedCurve> {
    ced_curve_over(results, step, CED_MAX)
}

pub fn ced_curve_over(results: &[EvalResult], step: f64, max: f64) -> Result<CedCurve> {
    if results.is_empty() {
        return Err(CoreError::Contract("cannot build a CED from no results".into()));
    }
    if !(step > 0.0 && max > 0.0) {
        return Err(CoreError::Config("CED grid step and range must be positive".into()));
    }
    let mut errs: Vec<f64> = results.iter().map(|r| r.nme).collect();
    errs.sort_by(f64::total_cmp);
    let total = errs.len() as f64;
    let thresholds = ced_grid(step, max);
    let mut below = 0usize;
    let fractions = thresholds
        .iter()
        .map(|&t| {
            while below < errs.len() && errs[below] <= t {
                below += 1;
            }
            below as f64 / total
        })
        .collect();
    Ok(CedCurve { thresholds, fractions })
}

impl CedCurve {
    /// Step-function value at `t`: the fraction at the last grid threshold
    /// not exceeding `t`.
    pub fn at(&self, t: f64) -> f64 {
        match self.thresholds.iter().rposition(|&g| g <= t) {
            Some(i) => self.fractions[i],
            None => 0.0,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fraction\n");
        for (t, f) in self.thresholds.iter().zip(&self.fractions) {
            s.push_str(&format!("{t},{f}\n"));
        }
        s
    }
}

/// Trapezoidal area under the curve on `[0, threshold]`, divided by
/// `threshold`. A threshold between grid points closes with a partial,
/// linearly interpolated segment.
pub fn auc(curve: &CedCurve, threshold: f64) -> f64 {
    assert!(threshold > 0.0, "AUC threshold must be positive");
    let (t, f) = (&curve.thresholds, &curve.fractions);
    let mut area = 0.0;
    for i in 1..t.len() {
        if t[i - 1] >= threshold {
            break;
        }
        if t[i] <= threshold {
            area += 0.5 * (f[i - 1] + f[i]) * (t[i] - t[i - 1]);
        } else {
            let u = (threshold - t[i - 1]) / (t[i] - t[i - 1]);
            let fm = f[i - 1] + u * (f[i] - f[i - 1]);
            area += 0.5 * (f[i - 1] + fm) * (threshold - t[i - 1]);
        }
    }
    area / threshold
}

/// Fraction of samples with error strictly above `threshold`.
pub fn failure_rate(results: &[EvalResult], threshold: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(CoreError::Contract("failure rate of no results".into()));
    }
    let over = results.iter().filter(|r| r.nme > threshold).count();
    Ok(over as f64 / results.len() as f64)
}

pub fn mean_nme(results: &[EvalResult]) -> f64 {
    results.iter().map(|r| r.nme).sum::<f64>() / results.len() as f64
}

pub const YAW_BINS: [&str; 3] = ["[0,30)", "[30,60)", "[60,90]"];

/// Bin index of `|yaw|` in degrees; values past 90 fall in the last bin.
pub fn yaw_bin(yaw: f64) -> usize {
    let a = yaw.abs();
    if a < 30.0 {
        0
    } else if a < 60.0 {
        1
    } else {
        2
    }
}

/// Indices of exactly `per_bin` items from each yaw bin, drawn uniformly
/// from `seed` and returned in ascending order within each bin, bin by bin.
pub fn balanced_subset(yaws: &[Option<f64>], per_bin: usize, seed: u64) -> Result<Vec<usize>> {
    let mut bins: [Vec<usize>; 3] = Default::default();
    for (i, y) in yaws.iter().enumerate() {
        if let Some(y) = y {
            bins[yaw_bin(*y)].push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * per_bin);
    for (b, members) in bins.iter_mut().enumerate() {
        if members.len() < per_bin {
            return Err(CoreError::InsufficientBin {
                bin: YAW_BINS[b].to_string(),
                have: members.len(),
                need: per_bin,
            });
        }
        members.shuffle(&mut rng);
        let mut pick = members[..per_bin].to_vec();
        pick.sort_unstable();
        out.extend(pick);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn results(errs: &[f64]) -> Vec<EvalResult> {
        errs.iter()
            .enumerate()
            .map(|(i, &e)| EvalResult {
                id: i.to_string(),
                nme: e,
                yaw: None,
                landmarks_used: 1,
            })
            .collect()
    }

    /// Trapezoid area of one sample's step on the grid, over `[0, thr]`,
    /// for `thr` on the grid.
    fn per_sample_trapezoid(e: f64, thr: f64, step: f64) -> f64 {
        if e <= 0.0 {
            return 1.0;
        }
        let grid = ced_grid(step, CED_MAX);
        match grid.iter().position(|&g| g >= e) {
            Some(j) if grid[j] <= thr => (thr - grid[j] + 0.5 * step) / thr,
            _ => 0.0,
        }
    }

    #[test]
    fn hand_example() {
        let gt = LandmarkSet::new_2d(&[(0.0, 0.0), (1.0, 1.0)]);
        let pred = LandmarkSet::new_2d(&[(3.0, 4.0), (1.0, 1.0)]);
        let b = BoundingBox::new(0.0, 0.0, 8.0, 2.0);
        assert_eq!(nme(&gt, &pred, &b).unwrap(), 0.625);
        assert_eq!(nme(&gt, &gt, &b).unwrap(), 0.0);
    }

    #[test]
    fn nme_errors() {
        let a = LandmarkSet::new_2d(&[(0.0, 0.0)]);
        let b = LandmarkSet::new_2d(&[(0.0, 0.0), (1.0, 1.0)]);
        let bb = BoundingBox::new(0.0, 0.0, 4.0, 4.0);
        assert!(matches!(nme(&a, &b, &bb), Err(CoreError::Contract(_))));
        let zero = BoundingBox::new(0.0, 0.0, 0.0, 4.0);
        assert!(matches!(nme(&a, &a, &zero), Err(CoreError::DegenerateBbox { .. })));
    }

    #[test]
    fn invisible_pairs_are_skipped() {
        let gt = LandmarkSet::new_2d(&[(0.0, 0.0), (5.0, 5.0)]);
        let mut pred = LandmarkSet::new_2d(&[(3.0, 4.0), (0.0, 0.0)]);
        pred.points[1] = [-1.0, -1.0, 0.0];
        let b = BoundingBox::new(0.0, 0.0, 5.0, 5.0);
        assert_eq!(nme(&gt, &pred, &b).unwrap(), 1.0);
    }

    #[test]
    fn ced_counts() {
        let c = ced_curve(&results(&[0.0; 5]), CED_STEP).unwrap();
        assert!(c.fractions.iter().all(|f| *f == 1.0));
        assert_eq!(c.thresholds.len(), 1001);
        let c = ced_curve(&results(&[0.01, 0.03]), CED_STEP).unwrap();
        assert_eq!(c.at(0.02), 0.5);
        assert!(ced_curve(&[], CED_STEP).is_err());
    }

    #[test]
    fn auc_extremes_and_half() {
        let c = ced_curve(&results(&[0.0; 4]), CED_STEP).unwrap();
        assert_eq!(auc(&c, AUC_THRESHOLD), 1.0);
        let c = ced_curve(&results(&[0.0701, 0.2, 1.0]), CED_STEP).unwrap();
        assert_eq!(auc(&c, AUC_THRESHOLD), 0.0);
        let c = ced_curve(&results(&[0.0, 0.0, 0.5, 0.5]), CED_STEP).unwrap();
        assert!((auc(&c, AUC_THRESHOLD) - 0.5).abs() <= CED_STEP / AUC_THRESHOLD);
    }

    #[test]
    fn failure_rate_cases() {
        assert_eq!(failure_rate(&results(&[0.01, 0.02]), 0.07).unwrap(), 0.0);
        assert_eq!(failure_rate(&results(&[0.01, 0.02, 0.08, 0.03]), 0.07).unwrap(), 0.25);
        let mut errs = vec![0.01; 7200];
        errs[..18].iter_mut().for_each(|e| *e = 0.5);
        assert_eq!(failure_rate(&results(&errs), 0.07).unwrap(), 0.0025);
    }

    #[test]
    fn balanced_subset_counts() {
        let yaws: Vec<Option<f64>> = (0..90).map(|i| Some(i as f64 - 45.0 + if i % 2 == 0 { 45.0 } else { 0.0 })).collect();
        let pick = balanced_subset(&yaws, 5, 3).unwrap();
        let mut counts = [0; 3];
        for i in &pick {
            counts[yaw_bin(yaws[*i].unwrap())] += 1;
        }
        assert_eq!(counts, [5, 5, 5]);
        let one = [Some(10.0), Some(-45.0), Some(80.0)];
        assert_eq!(balanced_subset(&one, 1, 0).unwrap(), vec![0, 1, 2]);
        match balanced_subset(&[Some(1.0), Some(40.0)], 1, 0) {
            Err(CoreError::InsufficientBin { bin, .. }) => assert_eq!(bin, "[60,90]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn yaw_bin_edges() {
        assert_eq!(yaw_bin(29.999), 0);
        assert_eq!(yaw_bin(-30.0), 1);
        assert_eq!(yaw_bin(60.0), 2);
        assert_eq!(yaw_bin(90.0), 2);
    }

    #[test]
    fn auc_matches_per_sample_integral() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let errs: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..0.12)).collect();
        let c = ced_curve(&results(&errs), CED_STEP).unwrap();
        let oracle: f64 = errs
            .iter()
            .map(|&e| per_sample_trapezoid(e, AUC_THRESHOLD, CED_STEP))
            .sum::<f64>()
            / errs.len() as f64;
        assert!((auc(&c, AUC_THRESHOLD) - oracle).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn nme_is_scale_invariant(pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -3.0f64..3.0, -3.0f64..3.0), 2..20),
                                  s in 0.01f64..100.0) {
            let gt = LandmarkSet::new_2d(&pts.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>());
            let pr = LandmarkSet::new_2d(&pts.iter().map(|p| (p.0 + p.2, p.1 + p.3)).collect::<Vec<_>>());
            let b = BoundingBox::new(0.0, 0.0, 40.0, 25.0);
            let a = nme(&gt, &pr, &b).unwrap();
            let scaled = nme(&gt.map(s, |x, y| (x * s, y * s)), &pr.map(s, |x, y| (x * s, y * s)),
                             &BoundingBox::new(0.0, 0.0, 40.0 * s, 25.0 * s)).unwrap();
            prop_assert!((a - scaled).abs() < 1e-12);
        }

        #[test]
        fn nme_is_permutation_invariant(pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 4..12), seed in any::<u64>()) {
            let gt = LandmarkSet::new_2d(&pts);
            let pr = gt.map(1.0, |x, y| (x + 1.0, y - 2.0));
            let mut perm: Vec<usize> = (0..pts.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
            let a = nme(&gt, &pr, &b).unwrap();
            let p = nme(&gt.permuted(&perm), &pr.permuted(&perm), &b).unwrap();
            prop_assert!((a - p).abs() <= 1e-15 * a.max(1.0));
        }

        #[test]
        fn ced_matches_brute_force(errs in prop::collection::vec(0.0f64..0.15, 1..60)) {
            let c = ced_curve(&results(&errs), 1e-3).unwrap();
            for (t, f) in c.thresholds.iter().zip(&c.fractions) {
                let count = errs.iter().filter(|e| **e <= *t).count();
                prop_assert_eq!(*f, count as f64 / errs.len() as f64);
            }
            prop_assert!(c.fractions.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn failure_and_curve_sum_to_one(errs in prop::collection::vec(0.0f64..0.15, 1..300)) {
            prop_assume!(errs.iter().all(|e| *e != AUC_THRESHOLD));
            let r = results(&errs);
            let c = ced_curve(&r, CED_STEP).unwrap();
            prop_assert_eq!(failure_rate(&r, AUC_THRESHOLD).unwrap() + c.at(AUC_THRESHOLD), 1.0);
        }

        #[test]
        fn auc_monotone_under_additions(errs in prop::collection::vec(0.0f64..0.15, 1..50)) {
            let r = results(&errs);
            let base = auc(&ced_curve(&r, CED_STEP).unwrap(), AUC_THRESHOLD);
            let mut good = r.clone();
            good.extend(results(&[0.0]));
            let mut bad = r.clone();
            bad.extend(results(&[0.5]));
            prop_assert!(auc(&ced_curve(&good, CED_STEP).unwrap(), AUC_THRESHOLD) >= base);
            prop_assert!(auc(&ced_curve(&bad, CED_STEP).unwrap(), AUC_THRESHOLD) <= base);
        }
    }
}
