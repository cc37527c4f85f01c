//! Image-quality and correlation metrics for enhanced contact maps, and the
//! loop weighted score.
//!
//! Metric functions take flattened pixel slices of equal length. Callers
//! clamp predictions to `[0, 1]` first (see [`clamp_unit`]); [`evaluate`]
//! does so itself.

use std::fmt::Write as _;

use crate::data::ContactMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stabilizers for a dynamic range of 1.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 11;

pub fn clamp_unit(values: &[f64]) -> Vec<f64> {
    values.iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::domain(format!(
            "inputs differ in size: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::domain("inputs are empty"));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Means, variances and covariance with `1/N` normalization.
fn moments(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64, f64) {
    let (ma, mb) = (mean(a), mean(b));
    let n = a.len() as f64;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    (ma, mb, va / n, vb / n, cov / n)
}

fn ssim_from_moments(ma: f64, mb: f64, va: f64, vb: f64, cov: f64) -> f64 {
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// SSIM from whole-image statistics.
pub fn ssim(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let (ma, mb, va, vb, cov) = moments(pred, target);
    Ok(ssim_from_moments(ma, mb, va, vb, cov))
}

/// Mean SSIM over every `window x window` placement inside a square
/// `side x side` image. Windows larger than the image shrink to it.
pub fn ssim_windowed(pred: &[f64], target: &[f64], side: usize, window: usize) -> Result<f64> {
    check_pair(pred, target)?;
    if side * side != pred.len() || window == 0 {
        return Err(Error::domain(format!(
            "{} pixels do not form a {side} x {side} image",
            pred.len()
        )));
    }
    let w = window.min(side);
    let mut total = 0.0;
    let mut count = 0usize;
    let (mut pa, mut pb) = (Vec::with_capacity(w * w), Vec::with_capacity(w * w));
    for r in 0..=side - w {
        for c in 0..=side - w {
            pa.clear();
            pb.clear();
            for y in r..r + w {
                pa.extend_from_slice(&pred[y * side + c..y * side + c + w]);
                pb.extend_from_slice(&target[y * side + c..y * side + c + w]);
            }
            let (ma, mb, va, vb, cov) = moments(&pa, &pb);
            total += ssim_from_moments(ma, mb, va, vb, cov);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean squared error.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

/// `10 log10(1 / MSE)` for a peak value of 1; `f64::INFINITY` when the
/// inputs coincide.
pub fn psnr(pred: &[f64], target: &[f64]) -> Result<f64> {
    let e = mse(pred, target)?;
    Ok(if e == 0.0 { f64::INFINITY } else { -10.0 * e.log10() })
}

/// Pearson correlation. A constant argument yields [`Error::Undefined`].
pub fn pcc(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let (_, _, va, vb, cov) = moments(pred, target);
    if va == 0.0 {
        return Err(Error::Undefined("prediction has zero variance".into()));
    }
    if vb == 0.0 {
        return Err(Error::Undefined("target has zero variance".into()));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && values[idx[e + 1]] == values[idx[k]] {
            e += 1;
        }
        let r = (k + e) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=e] {
            ranks[i] = r;
        }
        k = e + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn srcc(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    pcc(&average_ranks(pred), &average_ranks(target))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistancePcc {
    pub distance: usize,
    /// `None` when either diagonal is constant.
    pub pcc: Option<f64>,
}

/// PCC between the `d`-th diagonals of two maps for `d = 0..=max_distance`,
/// stopping at `n - 1`.
pub fn pcc_by_distance(pred: &ContactMap, target: &ContactMap, max_distance: usize) -> Result<Vec<DistancePcc>> {
    let n = pred.n();
    if target.n() != n {
        return Err(Error::domain(format!("maps differ in size: {n} vs {}", target.n())));
    }
    let last = max_distance.min(n.saturating_sub(1));
    Ok((0..=last)
        .map(|d| {
            let a: Vec<f64> = (0..n - d).map(|i| pred.get(i, i + d)).collect();
            let b: Vec<f64> = (0..n - d).map(|i| target.get(i, i + d)).collect();
            DistancePcc {
                distance: d,
                pcc: pcc(&a, &b).ok(),
            }
        })
        .collect())
}

pub fn distance_csv(rows: &[DistancePcc]) -> String {
    let mut s = String::from("distance_bins,pcc\n");
    for r in rows {
        match r.pcc {
            Some(v) => writeln!(s, "{},{v}", r.distance),
            None => writeln!(s, "{},undefined", r.distance),
        }
        .expect("writing to a String");
    }
    s
}

/// Per-patch metrics averaged over a set of patches.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub patches: usize,
    pub ssim: f64,
    /// Mean over patches with finite PSNR; infinite when every patch is exact.
    pub psnr: f64,
    pub psnr_infinite: usize,
    /// Means over patches where the correlation is defined; `NaN` if none.
    pub pcc: f64,
    pub srcc: f64,
    pub correlation_undefined: usize,
    pub per_distance: Vec<DistancePcc>,
}

impl MetricReport {
    pub fn psnr_is_infinite(&self) -> bool {
        self.psnr.is_infinite()
    }

    pub fn to_csv(&self) -> String {
        format!(
            "patches,ssim,psnr,psnr_infinite,pcc,srcc,correlation_undefined\n{},{},{},{},{},{},{}\n",
            self.patches,
            self.ssim,
            fmt_psnr(self.psnr),
            self.psnr_infinite,
            self.pcc,
            self.srcc,
            self.correlation_undefined
        )
    }

    /// Aligned two-column text.
    pub fn to_table(&self) -> String {
        let rows = [
            ("patches", self.patches.to_string()),
            ("ssim", format!("{:.6}", self.ssim)),
            (
                "psnr",
                if self.psnr.is_infinite() {
                    "inf".into()
                } else {
                    format!("{:.6}", self.psnr)
                },
            ),
            ("psnr_infinite", self.psnr_infinite.to_string()),
            ("pcc", format!("{:.6}", self.pcc)),
            ("srcc", format!("{:.6}", self.srcc)),
            ("correlation_undefined", self.correlation_undefined.to_string()),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<width$}  {v}\n")).collect()
    }
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        v.to_string()
    }
}

/// Clamps predictions to `[0, 1]` and averages SSIM, PSNR, PCC and SRCC
/// over patch pairs.
pub fn evaluate(preds: &[Tensor], targets: &[Tensor]) -> Result<MetricReport> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::domain(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let (mut ssim_sum, mut psnr_sum, mut psnr_finite, mut psnr_inf) = (0.0, 0.0, 0usize, 0usize);
    let (mut pcc_sum, mut srcc_sum, mut defined, mut undefined) = (0.0, 0.0, 0usize, 0usize);
    for (p, t) in preds.iter().zip(targets) {
        if p.shape() != t.shape() {
            return Err(Error::domain(format!(
                "patch shapes differ: {:?} vs {:?}",
                p.shape(),
                t.shape()
            )));
        }
        let p = clamp_unit(p.data());
        let t = t.data();
        ssim_sum += ssim(&p, t)?;
        let ps = psnr(&p, t)?;
        if ps.is_infinite() {
            psnr_inf += 1;
        } else {
            psnr_sum += ps;
            psnr_finite += 1;
        }
        match (pcc(&p, t), srcc(&p, t)) {
            (Ok(a), Ok(b)) => {
                pcc_sum += a;
                srcc_sum += b;
                defined += 1;
            }
            (Err(Error::Undefined(_)), _) | (_, Err(Error::Undefined(_))) => undefined += 1,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    let avg = |s: f64, k: usize| if k == 0 { f64::NAN } else { s / k as f64 };
    Ok(MetricReport {
        patches: preds.len(),
        ssim: ssim_sum / preds.len() as f64,
        psnr: if psnr_finite == 0 {
            f64::INFINITY
        } else {
            psnr_sum / psnr_finite as f64
        },
        psnr_infinite: psnr_inf,
        pcc: avg(pcc_sum, defined),
        srcc: avg(srcc_sum, defined),
        correlation_undefined: undefined,
        per_distance: Vec::new(),
    })
}

/// Cell-line names, loop totals `N_l`, and overlaps `A_l^s` of `l`-specific
/// loops with `s`-specific super-enhancers, indexed `overlaps[s][l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopSets {
    pub lines: [String; 2],
    pub totals: [u64; 2],
    pub overlaps: [[u64; 2]; 2],
}

impl LoopSets {
    /// `counts` is `[A_0^0, A_1^0, A_0^1, A_1^1]`: grouped by super-enhancer
    /// line, loop line varying fastest.
    pub fn from_counts(lines: [String; 2], counts: [u64; 4], totals: [u64; 2]) -> Result<Self> {
        let s = Self {
            lines,
            totals,
            overlaps: [[counts[0], counts[1]], [counts[2], counts[3]]],
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for l in 0..2 {
            if self.totals[l] == 0 {
                return Err(Error::domain(format!("{} has no loops", self.lines[l])));
            }
            for s in 0..2 {
                if self.overlaps[s][l] > self.totals[l] {
                    return Err(Error::domain(format!(
                        "{} overlapping loops exceed the {} loops of {}",
                        self.overlaps[s][l], self.totals[l], self.lines[l]
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopScoreRow {
    pub enhancer_line: String,
    pub loop_line: String,
    pub overlap: u64,
    pub total: u64,
    /// `A / N`.
    pub proportion: f64,
    /// Share of the proportion across both loop lines; `None` when both
    /// proportions are zero.
    pub weight: Option<f64>,
}

pub fn loop_weighted_score(loops: &LoopSets) -> Result<Vec<LoopScoreRow>> {
    loops.validate()?;
    let mut rows = Vec::with_capacity(4);
    for s in 0..2 {
        let p: Vec<f64> = (0..2)
            .map(|l| loops.overlaps[s][l] as f64 / loops.totals[l] as f64)
            .collect();
        let denom = p[0] + p[1];
        for l in 0..2 {
            rows.push(LoopScoreRow {
                enhancer_line: loops.lines[s].clone(),
                loop_line: loops.lines[l].clone(),
                overlap: loops.overlaps[s][l],
                total: loops.totals[l],
                proportion: p[l],
                weight: (denom > 0.0).then(|| p[l] / denom),
            });
        }
    }
    Ok(rows)
}

pub fn loop_score_table(rows: &[LoopScoreRow]) -> String {
    let header = ["super_enhancers", "loops", "overlap", "total", "proportion", "weight"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.enhancer_line.clone(),
                r.loop_line.clone(),
                r.overlap.to_string(),
                r.total.to_string(),
                format!("{:.3}", r.proportion),
                r.weight.map_or("undefined".into(), |w| format!("{w:.3}")),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..6)
        .map(|c| {
            body.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[&str]| -> String {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_owned() + "\n"
    };
    let mut out = line(&header);
    for r in &body {
        out.push_str(&line(&r.iter().map(String::as_str).collect::<Vec<_>>()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen()).collect()
    }

    // Oracles use the raw-moment formulas rather than centered sums.
    fn oracle_stats(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64, f64) {
        let n = a.len() as f64;
        let sa: f64 = a.iter().sum();
        let sb: f64 = b.iter().sum();
        let saa: f64 = a.iter().map(|x| x * x).sum();
        let sbb: f64 = b.iter().map(|x| x * x).sum();
        let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let (ma, mb) = (sa / n, sb / n);
        (ma, mb, saa / n - ma * ma, sbb / n - mb * mb, sab / n - ma * mb)
    }

    fn oracle_ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|x| {
                let less = v.iter().filter(|y| *y < x).count() as f64;
                let equal = v.iter().filter(|y| *y == x).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    }

    fn oracle_pcc(a: &[f64], b: &[f64]) -> f64 {
        let (_, _, va, vb, cov) = oracle_stats(a, b);
        cov / (va * vb).sqrt()
    }

    #[test]
    fn ssim_examples() {
        let x = random(64, 1);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let z = ssim(&[0.0; 16], &[1.0; 16]).unwrap();
        assert!((z - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-18);
        assert!((z - 9.999e-5).abs() < 1e-8);
        let a = [0.5, -0.5, 0.5, -0.5];
        let b = [-0.5, 0.5, -0.5, 0.5];
        assert!(ssim(&a, &b).unwrap() < 0.0);
        assert!(ssim(&a, &b[..3]).is_err());
    }

    #[test]
    fn windowed_ssim_reduces_to_global_for_small_images() {
        let (a, b) = (random(64, 2), random(64, 3));
        assert_eq!(ssim_windowed(&a, &b, 8, 11).unwrap(), ssim(&a, &b).unwrap());
        let (a, b) = (random(144, 2), random(144, 3));
        let w = ssim_windowed(&a, &b, 12, 11).unwrap();
        assert!((-1.0..=1.0).contains(&w));
        assert!((ssim_windowed(&a, &a, 12, 11).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_examples() {
        let t = random(100, 4).iter().map(|v| v * 0.8).collect::<Vec<_>>();
        for (c, want) in [(0.1, 20.0), (0.01, 40.0)] {
            let p: Vec<f64> = t.iter().map(|v| v + c).collect();
            assert!((psnr(&p, &t).unwrap() - want).abs() < 1e-9);
        }
        assert!(psnr(&t, &t).unwrap().is_infinite());
    }

    #[test]
    fn pcc_examples() {
        let t = random(30, 5);
        let affine: Vec<f64> = t.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pcc(&affine, &t).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!((pcc(&neg, &t).unwrap() + 1.0).abs() < 1e-12);
        // hand evaluation: means 2.75 and 2.5, cov 6.5/4, var 8.75/4 and 5/4
        let want = 6.5 / (8.75f64 * 5.0).sqrt();
        assert!((pcc(&[1.0, 2.0, 3.0, 5.0], &[1.0, 2.0, 3.0, 4.0]).unwrap() - want).abs() < 1e-15);
        assert!(matches!(pcc(&[1.0; 4], &t[..4]), Err(Error::Undefined(_))));
        assert!(matches!(pcc(&t[..4], &[2.0; 4]), Err(Error::Undefined(_))));
    }

    #[test]
    fn srcc_examples() {
        let t = random(30, 6);
        let e: Vec<f64> = t.iter().map(|v| v.exp()).collect();
        assert!((srcc(&e, &t).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
        assert!((srcc(&rev, &t).unwrap() + 1.0).abs() < 1e-12);
        let ties = [1.0, 1.0, 2.0];
        let want = oracle_pcc(&oracle_ranks(&ties), &[1.0, 2.0, 3.0]);
        assert_eq!(average_ranks(&ties), [1.5, 1.5, 3.0]);
        assert!((srcc(&ties, &[1.0, 2.0, 3.0]).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn brute_force_agreement_on_random_pairs() {
        for seed in 0..20 {
            let (a, b) = (random(64, 100 + seed), random(64, 200 + seed));
            let (ma, mb, va, vb, cov) = oracle_stats(&a, &b);
            let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            assert!((ssim(&a, &b).unwrap() - s).abs() < 1e-10);
            let m: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 64.0;
            assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-10);
            assert!((pcc(&a, &b).unwrap() - oracle_pcc(&a, &b)).abs() < 1e-10);
            let r = oracle_pcc(&oracle_ranks(&a), &oracle_ranks(&b));
            assert!((srcc(&a, &b).unwrap() - r).abs() < 1e-10);
        }
    }

    fn map(n: usize, v: impl Fn(usize, usize) -> f64) -> ContactMap {
        let c = (0..n * n).map(|k| v((k / n).min(k % n), (k / n).max(k % n))).collect();
        ContactMap::new(n, c, 1, "c").unwrap()
    }

    #[test]
    fn distance_pcc_identity_and_bounds() {
        let r = random(400, 7);
        let m = map(20, |i, j| r[i * 20 + j]);
        let rows = pcc_by_distance(&m, &m, 50).unwrap();
        assert_eq!(rows.len(), 20);
        assert!(rows[..19].iter().all(|d| (d.pcc.unwrap() - 1.0).abs() < 1e-12));
        assert_eq!(rows[19].pcc, None);
        assert!(distance_csv(&rows).starts_with("distance_bins,pcc\n0,"));
        assert!(distance_csv(&rows).ends_with("19,undefined\n"));
    }

    #[test]
    fn distance_pcc_decreases_with_shorter_diagonals() {
        // a signal shared by every diagonal plus independent noise: the sample
        // correlation is noisier on short diagonals, so its mean falls
        let (n, seeds) = (30, 200);
        let mut acc = vec![0.0; 3];
        for seed in 0..seeds {
            let s = random(n * n, seed);
            let e = random(n * n, 10_000 + seed);
            let t = map(n, |i, j| s[i * n + j]);
            let p = map(n, |i, j| s[i * n + j] + 1.5 * e[i * n + j]);
            let rows = pcc_by_distance(&p, &t, n - 1).unwrap();
            for (k, d) in [0, 20, 26].into_iter().enumerate() {
                acc[k] += rows[d].pcc.unwrap() / seeds as f64;
            }
        }
        assert!(acc[0] > acc[1] && acc[1] > acc[2], "{acc:?}");
    }

    #[test]
    fn evaluate_clamps_and_averages() {
        let t: Vec<Tensor> = (0..3).map(|k| Tensor::new([1, 4, 4], random(16, k)).unwrap()).collect();
        let r = evaluate(&t, &t).unwrap();
        assert_eq!(r.ssim, 1.0);
        assert!(r.psnr_is_infinite());
        assert_eq!(r.psnr_infinite, 3);
        assert!((r.pcc - 1.0).abs() < 1e-12);
        let over: Vec<Tensor> = t
            .iter()
            .map(|x| Tensor::new([1, 4, 4], x.data().iter().map(|v| v + 5.0).collect()).unwrap())
            .collect();
        let ones = vec![Tensor::full([1, 4, 4], 1.0); 3];
        let c = evaluate(&over, &ones).unwrap();
        assert!(c.psnr_is_infinite());
        assert_eq!(c.correlation_undefined, 3);
        assert!(c.pcc.is_nan());
        assert!(r.to_csv().starts_with("patches,ssim,psnr"));
        assert!(r.to_table().contains("psnr                   inf"));
    }

    fn lines() -> [String; 2] {
        ["GM12878".to_string(), "K562".to_string()]
    }

    #[test]
    fn loop_score_published_values() {
        let l = LoopSets::from_counts(lines(), [151, 67, 50, 44], [708, 344]).unwrap();
        let rows = loop_weighted_score(&l).unwrap();
        let w: Vec<f64> = rows.iter().map(|r| r.weight.unwrap()).collect();
        for (got, want) in w.iter().zip([0.523, 0.477, 0.356, 0.644]) {
            assert!((got - want).abs() <= 0.001, "{got} vs {want}");
        }
        assert!((rows[0].proportion - 0.213).abs() <= 0.001);
        assert!((rows[3].proportion - 0.127).abs() <= 0.001);
        let table = loop_score_table(&rows);
        assert!(table.contains("0.523") && table.contains("0.644"));
    }

    #[test]
    fn loop_score_edge_cases() {
        let eq = LoopSets::from_counts(lines(), [10, 5, 0, 0], [100, 50]).unwrap();
        let rows = loop_weighted_score(&eq).unwrap();
        assert_eq!(rows[0].weight, Some(0.5));
        assert_eq!(rows[1].weight, Some(0.5));
        assert_eq!(rows[2].weight, None);
        assert!(LoopSets::from_counts(lines(), [800, 0, 0, 0], [708, 344]).is_err());
        assert!(LoopSets::from_counts(lines(), [0, 0, 0, 0], [0, 344]).is_err());
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(seed in 0u64..10_000) {
            let (a, b) = (random(64, seed), random(64, seed + 1));
            let s = ssim(&a, &b).unwrap();
            prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-15);
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn psnr_decreases_with_offset(c1 in 0.001f64..0.5, c2 in 0.001f64..0.5) {
            prop_assume!((c1 - c2).abs() > 1e-6);
            let t = vec![0.2; 16];
            let p1: Vec<f64> = t.iter().map(|v| v + c1).collect();
            let p2: Vec<f64> = t.iter().map(|v| v + c2).collect();
            let (q1, q2) = (psnr(&p1, &t).unwrap(), psnr(&p2, &t).unwrap());
            prop_assert_eq!(c1 < c2, q1 > q2);
            prop_assert!((q1 + 20.0 * c1.log10()).abs() < 1e-9);
        }

        #[test]
        fn correlation_invariances(seed in 0u64..10_000, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let (a, b) = (random(32, seed), random(32, seed + 7));
            let t: Vec<f64> = a.iter().map(|v| scale * v + shift).collect();
            prop_assert!((pcc(&t, &b).unwrap() - pcc(&a, &b).unwrap()).abs() < 1e-12);
            let m: Vec<f64> = a.iter().map(|v| v.powi(3) + scale).collect();
            prop_assert!((srcc(&m, &b).unwrap() - srcc(&a, &b).unwrap()).abs() < 1e-12);
            let r = pcc(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
        }

        #[test]
        fn weights_sum_to_one(a in 0u64..100, b in 0u64..100, c in 0u64..100, d in 0u64..100) {
            let l = LoopSets::from_counts(lines(), [a, b, c, d], [100, 100]).unwrap();
            let rows = loop_weighted_score(&l).unwrap();
            for pair in rows.chunks(2) {
                if let (Some(x), Some(y)) = (pair[0].weight, pair[1].weight) {
                    prop_assert!((x + y - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
