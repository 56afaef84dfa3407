//! Decoding, metrics, Graf angles, cross-validation and the ablation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{LandmarkSet, Point, NUM_LANDMARKS};
use crate::model::{ModelConfig, TgcnIcf, Variant};
use crate::synth::graf_label;
use crate::tensor::{Element, Tensor};
use crate::train::{mix_seed, TrainConfig, Trainer};

/// SDR thresholds in millimetres.
pub const SDR_THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];

/// Decoded landmarks with a flag per constant (uninformative) channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub landmarks: LandmarkSet,
    pub degenerate: [bool; NUM_LANDMARKS],
}

/// Vertex offset of the parabola through three samples, in `[-0.5, 0.5]`.
fn parabola_offset(left: f64, center: f64, right: f64) -> f64 {
    let curvature = left - 2.0 * center + right;
    if curvature < 0.0 {
        (0.5 * (left - right) / curvature).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Per channel: first maximum in row-major order, then a parabolic
/// sub-pixel step along each axis, then scaling by `upscale`.
pub fn decode_landmarks<T: Element>(heatmaps: &Tensor<T>, upscale: f64) -> Result<Decoded> {
    let (h, w) = match *heatmaps.shape() {
        [k, h, w] if k == NUM_LANDMARKS => (h, w),
        ref s => return Err(Error::dim(format!("expected a {NUM_LANDMARKS} x h x w stack, got {s:?}"))),
    };
    let mut points = [Point::default(); NUM_LANDMARKS];
    let mut degenerate = [false; NUM_LANDMARKS];
    for (k, plane) in heatmaps.data().chunks(h * w).enumerate() {
        let v = |i: usize| plane[i].as_f64();
        let mut best = 0;
        for i in 1..plane.len() {
            if v(i) > v(best) {
                best = i;
            }
        }
        if (0..plane.len()).all(|i| v(i) == v(0)) {
            degenerate[k] = true;
            points[k] = Point::new((w / 2) as f64 * upscale, (h / 2) as f64 * upscale);
            continue;
        }
        let (r, c) = (best / w, best % w);
        let dx = if c > 0 && c + 1 < w { parabola_offset(v(best - 1), v(best), v(best + 1)) } else { 0.0 };
        let dy = if r > 0 && r + 1 < h { parabola_offset(v(best - w), v(best), v(best + w)) } else { 0.0 };
        points[k] = Point::new((c as f64 + dx) * upscale, (r as f64 + dy) * upscale);
    }
    Ok(Decoded { landmarks: LandmarkSet::new(points), degenerate })
}

/// Per-landmark Euclidean distances in millimetres.
pub fn radial_errors(pred: &[Point], gt: &[Point], spacing: f64) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!(
            "{} predicted points against {} ground-truth points",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| p.dist(*g) * spacing).collect())
}

/// Mean radial error in millimetres.
pub fn mre(pred: &[Point], gt: &[Point], spacing: f64) -> Result<f64> {
    let d = radial_errors(pred, gt, spacing)?;
    if d.is_empty() {
        return Err(Error::Contract("mean radial error of zero points".into()));
    }
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Percentage of distances `<= t` for each threshold.
pub fn sdr(distances: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if distances.is_empty() {
        return Err(Error::Contract("detection rate of an empty distance list".into()));
    }
    let n = distances.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| 100.0 * distances.iter().filter(|&&d| d <= t).count() as f64 / n)
        .collect())
}

/// Graf angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrafAngles {
    pub alpha: f64,
    pub beta: f64,
}

/// Angle between two undirected lines, in `[0, 90]` degrees.
pub fn line_angle(a: (Point, Point), b: (Point, Point)) -> Result<f64> {
    let (u, v) = (a.1 - a.0, b.1 - b.0);
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateGeometry("coincident points define no line".into()));
    }
    let cos = ((u.x * v.x + u.y * v.y) / (nu * nv)).abs().min(1.0);
    // atan2 keeps precision near 0 and 90 degrees
    let sin = (u.x * v.y - u.y * v.x).abs() / (nu * nv);
    Ok(sin.atan2(cos).to_degrees())
}

/// Alpha: baseline vs line (3,4). Beta: baseline vs line (5,6).
pub fn graf_angles(landmarks: &LandmarkSet) -> Result<GrafAngles> {
    let base = landmarks.line(0);
    Ok(GrafAngles { alpha: line_angle(base, landmarks.line(1))?, beta: line_angle(base, landmarks.line(2))? })
}

/// 0 = normal (`alpha > 60` and `beta < 77`), 1 = abnormal.
pub fn classify_graf(angles: GrafAngles) -> u8 {
    graf_label(angles.alpha, angles.beta)
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Metrics of one evaluation set, or an aggregate over folds.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub variant: String,
    /// `None` for the cross-fold aggregate.
    pub fold: Option<usize>,
    pub mre_mm: f64,
    pub mre_sd: f64,
    /// Percentages at [`SDR_THRESHOLDS`].
    pub sdr: [f64; 3],
    /// Class-head accuracy; absent without a class head.
    pub acc: Option<f64>,
    pub n: usize,
    /// Cross-fold SDs of the SDR values (aggregate rows only).
    pub sdr_sd: [f64; 3],
    pub acc_sd: Option<f64>,
}

pub const METRICS_HEADER: &str = "variant,fold,mre_mm,mre_sd,sdr05,sdr10,sdr15,acc,n";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let fold = self.fold.map_or_else(|| "mean".to_string(), |f| f.to_string());
        let acc = self.acc.map_or_else(String::new, |a| format!("{a:.4}"));
        format!(
            "{},{},{:.4},{:.4},{:.2},{:.2},{:.2},{},{}",
            self.variant, fold, self.mre_mm, self.mre_sd, self.sdr[0], self.sdr[1], self.sdr[2], acc, self.n
        )
    }

    /// MRE non-negative, SDR within `[0, 100]` and non-decreasing.
    pub fn is_consistent(&self) -> bool {
        self.mre_mm >= 0.0
            && self.mre_sd >= 0.0
            && self.sdr.iter().all(|s| (0.0..=100.0).contains(s))
            && self.sdr.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Raw evaluation of a model on a dataset.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub predictions: Vec<LandmarkSet>,
    pub probabilities: Vec<Option<f64>>,
    /// Per image, per landmark, millimetres.
    pub radial: Vec<Vec<f64>>,
    pub degenerate_channels: usize,
}

impl Evaluation {
    pub fn per_image_mre(&self) -> Vec<f64> {
        self.radial.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect()
    }

    pub fn report(&self, data: &Dataset, variant: &str, fold: Option<usize>) -> Result<MetricsReport> {
        let all: Vec<f64> = self.radial.iter().flatten().copied().collect();
        let (mre_mm, mre_sd) = mean_sd(&all);
        let s = sdr(&all, &SDR_THRESHOLDS)?;
        let acc = if self.probabilities.iter().all(Option::is_some) && !self.probabilities.is_empty() {
            let correct = self
                .probabilities
                .iter()
                .zip(&data.samples)
                .filter(|(p, s)| u8::from(p.unwrap_or(0.0) > 0.5) == s.label)
                .count();
            Some(correct as f64 / data.len() as f64)
        } else {
            None
        };
        Ok(MetricsReport {
            variant: variant.to_string(),
            fold,
            mre_mm,
            mre_sd,
            sdr: [s[0], s[1], s[2]],
            acc,
            n: data.len(),
            sdr_sd: [0.0; 3],
            acc_sd: None,
        })
    }
}

/// Predicts and scores every sample.
pub fn evaluate<T: Element>(model: &TgcnIcf<T>, data: &Dataset) -> Result<Evaluation> {
    let upscale = model.config().backbone.upscale() as f64;
    let mut eval = Evaluation {
        predictions: Vec::with_capacity(data.len()),
        probabilities: Vec::with_capacity(data.len()),
        radial: Vec::with_capacity(data.len()),
        degenerate_channels: 0,
    };
    for s in &data.samples {
        let pred = model.predict(&s.image.cast::<T>())?;
        let decoded = decode_landmarks(&pred.heatmaps, upscale)?;
        eval.degenerate_channels += decoded.degenerate.iter().filter(|&&d| d).count();
        eval.radial.push(radial_errors(&decoded.landmarks.points, &s.landmarks.points, s.spacing)?);
        eval.predictions.push(decoded.landmarks);
        eval.probabilities.push(pred.probability);
    }
    Ok(eval)
}

/// Held-out index sets of a seeded k-fold split. With `groups`, every
/// group lands in exactly one fold.
pub fn kfold_splits(n: usize, k: usize, seed: u64, groups: Option<&[Option<String>]>) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("cannot split {n} samples into {k} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xF01D]));
    let mut folds = vec![Vec::new(); k];
    match groups {
        None => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let (base, extra) = (n / k, n % k);
            let mut start = 0;
            for (f, fold) in folds.iter_mut().enumerate() {
                let len = base + usize::from(f < extra);
                fold.extend_from_slice(&order[start..start + len]);
                start += len;
            }
        }
        Some(groups) => {
            let mut members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (i, g) in groups.iter().enumerate() {
                let key = g.clone().unwrap_or_else(|| format!("#{i}"));
                members.entry(key).or_default().push(i);
            }
            if members.len() < k {
                return Err(Error::Config(format!("{} groups cannot fill {k} folds", members.len())));
            }
            let mut keys: Vec<String> = members.keys().cloned().collect();
            keys.shuffle(&mut rng);
            for key in keys {
                let smallest = (0..k).min_by_key(|&f| (folds[f].len(), f)).expect("k >= 2");
                folds[smallest].extend_from_slice(&members[&key]);
            }
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Cross-validation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub folds: usize,
    pub grouped: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { folds: 5, grouped: false, seed: 0 }
    }
}

/// Per-fold reports and their aggregate.
#[derive(Debug, Clone)]
pub struct KfoldReport {
    pub folds: Vec<MetricsReport>,
    pub aggregate: MetricsReport,
    pub splits: Vec<Vec<usize>>,
}

/// Mean and cross-fold SD of each metric.
pub fn aggregate(variant: &str, folds: &[MetricsReport]) -> MetricsReport {
    let col = |f: &dyn Fn(&MetricsReport) -> f64| mean_sd(&folds.iter().map(f).collect::<Vec<_>>());
    let (mre_mm, mre_sd) = col(&|r| r.mre_mm);
    let sdrs: Vec<(f64, f64)> = (0..3).map(|i| col(&|r| r.sdr[i])).collect();
    let accs: Option<Vec<f64>> = folds.iter().map(|r| r.acc).collect();
    let acc = accs.as_deref().map(mean_sd);
    MetricsReport {
        variant: variant.to_string(),
        fold: None,
        mre_mm,
        mre_sd,
        sdr: [sdrs[0].0, sdrs[1].0, sdrs[2].0],
        acc: acc.map(|a| a.0),
        n: folds.iter().map(|r| r.n).sum(),
        sdr_sd: [sdrs[0].1, sdrs[1].1, sdrs[2].1],
        acc_sd: acc.map(|a| a.1),
    }
}

/// Training run hooks; receives `(variant, fold)` before each fold trains.
pub type FoldHook<'a> = &'a mut dyn FnMut(&str, usize);

/// Trains on each training split and evaluates the held-out fold.
pub fn kfold_run(
    data: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    eval: &EvalConfig,
    log: &mut dyn Write,
    hook: FoldHook<'_>,
) -> Result<KfoldReport> {
    let groups: Vec<Option<String>> = data.samples.iter().map(|s| s.group.clone()).collect();
    let splits = kfold_splits(data.len(), eval.folds, eval.seed, eval.grouped.then_some(groups.as_slice()))?;
    let name = model.variant.name();
    let mut folds = Vec::with_capacity(splits.len());
    for (f, test) in splits.iter().enumerate() {
        hook(name, f);
        let train_idx: Vec<usize> = (0..data.len()).filter(|i| test.binary_search(i).is_err()).collect();
        let net = TgcnIcf::<f32>::new(model.clone(), mix_seed(&[train.seed, f as u64]))?;
        let mut trainer = Trainer::new(net, TrainConfig { seed: mix_seed(&[train.seed, f as u64, 1]), ..train.clone() })?;
        trainer.run(&data.subset(&train_idx), log)?;
        let held = data.subset(test);
        folds.push(evaluate(&trainer.model, &held)?.report(&held, name, Some(f))?);
    }
    let aggregate = aggregate(name, &folds);
    Ok(KfoldReport { folds, aggregate, splits })
}

/// One variant's cross-validated result.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: KfoldReport,
}

/// Runs every variant under identical seeds and splits.
pub fn ablation_run(
    data: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    eval: &EvalConfig,
    log: &mut dyn Write,
    hook: FoldHook<'_>,
) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .iter()
        .map(|&variant| {
            let report = kfold_run(data, &model.with_variant(variant), train, eval, log, hook)?;
            Ok(AblationRow { variant, report })
        })
        .collect()
}

pub const ABLATION_HEADER: &str = "variant,mre_mm,sdr05,sdr10,sdr15";

/// Four metric columns per variant, each `mean±sd` across folds.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for row in rows {
        let a = &row.report.aggregate;
        let _ = writeln!(
            out,
            "{},{:.4}±{:.4},{:.2}±{:.2},{:.2}±{:.2},{:.2}±{:.2}",
            row.variant, a.mre_mm, a.mre_sd, a.sdr[0], a.sdr_sd[0], a.sdr[1], a.sdr_sd[1], a.sdr[2], a.sdr_sd[2]
        );
    }
    out
}

/// Per-fold and aggregate rows for every variant.
pub fn format_metrics_csv(reports: &[&KfoldReport]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in reports {
        for f in r.folds.iter().chain(std::iter::once(&r.aggregate)) {
            out.push_str(&f.csv_row());
            out.push('\n');
        }
    }
    out
}

/// Published full-model figures on the clinical data, for context only.
pub const REFERENCE_FOOTER: &str =
    "reference (clinical data, not reproduced): full model MRE 0.4364 ± 0.0388 mm, SDR 72.33 / 94.73 / 98.47 %";

/// Burns landmark crosses into an 8-bit copy of a `1 x n x n` image: 128
/// for ground truth, 255 for predictions (drawn last).
pub fn overlay(image: &Tensor<f32>, gt: Option<&LandmarkSet>, pred: &LandmarkSet) -> Vec<u8> {
    let n = image.shape()[2];
    let mut px: Vec<u8> = image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    // keep the image below both marker levels so markers stay distinguishable
    px.iter_mut().for_each(|p| *p = (*p).min(127) / 2);
    let mut mark = |p: &Point, level: u8| {
        let (cx, cy) = (p.x.round() as isize, p.y.round() as isize);
        for d in -2isize..=2 {
            for (x, y) in [(cx + d, cy), (cx, cy + d)] {
                if x >= 0 && y >= 0 && (x as usize) < n && (y as usize) < n {
                    px[y as usize * n + x as usize] = level;
                }
            }
        }
    };
    gt.iter().flat_map(|g| g.points.iter()).for_each(|p| mark(p, 128));
    pred.points.iter().for_each(|p| mark(p, 255));
    px
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::make_gt_heatmaps;
    use rand::Rng;

    #[test]
    fn overlay_marks_sit_above_the_dimmed_image() {
        let image = Tensor::full(&[1, 16, 16], 1.0f32);
        let gt = LandmarkSet::new([Point::new(3.0, 3.0); 6]);
        let pred = LandmarkSet::new([Point::new(12.0, 12.0); 6]);
        let px = overlay(&image, Some(&gt), &pred);
        assert_eq!(px.len(), 256);
        assert_eq!(px[3 * 16 + 3], 128);
        assert_eq!(px[3 * 16 + 5], 128);
        assert_eq!(px[12 * 16 + 12], 255);
        assert_eq!(px[8 * 16 + 8], 63);
        let bare = overlay(&image, None, &pred);
        assert_eq!(bare[3 * 16 + 3], 63);
    }

    fn one_hot(r: usize, c: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[6, 8, 8]);
        for k in 0..6 {
            t.data_mut()[k * 64 + r * 8 + c] = 1.0;
        }
        t
    }

    #[test]
    fn decode_one_hot_and_ties() {
        let d = decode_landmarks(&one_hot(2, 5), 4.0).unwrap();
        assert_eq!(d.landmarks.points[0], Point::new(20.0, 8.0));
        let mut t = one_hot(6, 6);
        for k in 0..6 {
            t.data_mut()[k * 64 + 3 * 8 + 1] = 1.0;
        }
        let d = decode_landmarks(&t, 1.0).unwrap();
        assert_eq!(d.landmarks.points[2], Point::new(1.0, 3.0));
        let flat = decode_landmarks(&Tensor::<f64>::full(&[6, 8, 8], 0.3), 4.0).unwrap();
        assert!(flat.degenerate.iter().all(|&f| f));
        assert_eq!(flat.landmarks.points[0], Point::new(16.0, 16.0));
    }

    #[test]
    fn decode_gaussian_between_pixels() {
        let lm = LandmarkSet::new([Point::new(42.0, 30.0); 6]);
        // 42 / 4 = 10.5 on the heatmap grid
        let maps = make_gt_heatmaps::<f64>(&lm, 2.0, 32, 32, 128, "t").unwrap();
        let d = decode_landmarks(&maps, 4.0).unwrap();
        let p = d.landmarks.points[0];
        assert!((p.x / 4.0 - 10.5).abs() < 0.25 && (p.y / 4.0 - 7.5).abs() < 0.25, "{p}");
    }

    #[test]
    fn mre_hand_values() {
        let gt = [Point::new(1.0, 1.0); 6];
        assert_eq!(mre(&gt, &gt, 0.1).unwrap(), 0.0);
        let mut pred = gt;
        pred[0].x += 10.0;
        assert!((mre(&pred, &gt, 0.1).unwrap() - 10.0 * 0.1 / 6.0).abs() < 1e-12);
        assert!(matches!(mre(&pred[..5], &gt, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn sdr_hand_values() {
        let s = sdr(&[0.4, 0.6, 1.2], &SDR_THRESHOLDS).unwrap();
        let expect = [100.0 / 3.0, 200.0 / 3.0, 100.0];
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(sdr(&[0.0; 4], &SDR_THRESHOLDS).unwrap(), vec![100.0; 3]);
        assert_eq!(sdr(&[0.5], &[0.5]).unwrap(), vec![100.0]);
        assert!(sdr(&[], &SDR_THRESHOLDS).is_err());
    }

    #[test]
    fn angles_and_rule() {
        let o = Point::new(0.0, 0.0);
        let lm = LandmarkSet::new([o, Point::new(0.0, 5.0), o, Point::new(5.0, 0.0), o, Point::new(0.0, -3.0)]);
        let a = graf_angles(&lm).unwrap();
        assert!((a.alpha - 90.0).abs() < 1e-12 && a.beta.abs() < 1e-12);
        let mut swapped = lm;
        swapped.points.swap(0, 1);
        swapped.points.swap(2, 3);
        assert_eq!(graf_angles(&swapped).unwrap(), a);
        let mut bad = lm;
        bad.points[1] = o;
        assert!(matches!(graf_angles(&bad), Err(Error::DegenerateGeometry(_))));
        assert_eq!(classify_graf(GrafAngles { alpha: 70.0, beta: 60.0 }), 0);
        assert_eq!(classify_graf(GrafAngles { alpha: 60.0, beta: 60.0 }), 1);
        assert_eq!(classify_graf(GrafAngles { alpha: 70.0, beta: 77.0 }), 1);
    }

    #[test]
    fn folds_partition_and_repeat() {
        let folds = kfold_splits(500, 5, 3, None).unwrap();
        assert!(folds.iter().all(|f| f.len() == 100));
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..500).collect::<Vec<_>>());
        assert_eq!(folds, kfold_splits(500, 5, 3, None).unwrap());
        assert!(matches!(kfold_splits(3, 5, 0, None), Err(Error::Config(_))));

        let groups: Vec<Option<String>> = (0..40).map(|i| Some(format!("g{}", i / 3))).collect();
        let folds = kfold_splits(40, 4, 1, Some(&groups)).unwrap();
        for f in &folds {
            for g in f.iter().map(|&i| &groups[i]) {
                assert!(folds.iter().filter(|o| o.iter().any(|&i| &groups[i] == g)).count() == 1);
            }
        }
    }

    #[test]
    fn aggregate_is_mean_of_folds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let folds: Vec<MetricsReport> = (0..5)
            .map(|f| MetricsReport {
                variant: "v".into(),
                fold: Some(f),
                mre_mm: rng.gen_range(0.0..2.0),
                mre_sd: 0.1,
                sdr: [10.0, 20.0, 30.0],
                acc: None,
                n: 10,
                sdr_sd: [0.0; 3],
                acc_sd: None,
            })
            .collect();
        let agg = aggregate("v", &folds);
        let hand = folds.iter().map(|f| f.mre_mm).sum::<f64>() / 5.0;
        assert!((agg.mre_mm - hand).abs() < 1e-12);
        assert_eq!(agg.n, 50);
        assert!(agg.acc.is_none());
        assert!(agg.csv_row().starts_with("v,mean,"));
    }
}
