//! Ground-truth heatmaps, flip augmentation, the joint loss, the training
//! loop and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, ImageSample};
use crate::error::{Error, Result};
use crate::geometry::{LandmarkSet, NUM_LANDMARKS};
use crate::model::TgcnIcf;
use crate::nn::{Adam, AdamConfig};
use crate::tensor::{decode_tgt1, encode_tgt1, ByteCursor, Element, Tensor};

/// Renders one Gaussian per landmark on an `h x w` grid. Input-pixel
/// coordinates are multiplied by `h / input_size`. `sigma == 0` gives a
/// one-hot map at the nearest grid point.
pub fn make_gt_heatmaps<T: Element>(
    landmarks: &LandmarkSet,
    sigma: f64,
    h: usize,
    w: usize,
    input_size: usize,
    name: &str,
) -> Result<Tensor<T>> {
    if !landmarks.within(input_size, input_size, 0.0) {
        return Err(Error::Data(format!("{name}: landmark outside the {input_size}x{input_size} image")));
    }
    let scale = h as f64 / input_size as f64;
    let mut out = Tensor::zeros(&[NUM_LANDMARKS, h, w]);
    let plane = h * w;
    for (k, p) in landmarks.points.iter().enumerate() {
        let (cx, cy) = (p.x * scale, p.y * scale);
        let maps = &mut out.data_mut()[k * plane..(k + 1) * plane];
        if sigma == 0.0 {
            let (x, y) = (cx.round() as usize, cy.round() as usize);
            maps[y.min(h - 1) * w + x.min(w - 1)] = T::one();
            continue;
        }
        let denom = 2.0 * sigma * sigma;
        for y in 0..h {
            let dy = y as f64 - cy;
            for x in 0..w {
                let dx = x as f64 - cx;
                maps[y * w + x] = T::of((-(dx * dx + dy * dy) / denom).exp());
            }
        }
    }
    Ok(out)
}

/// Mirrors image and landmarks about the vertical axis.
pub fn augment_hflip(sample: &ImageSample) -> ImageSample {
    let shape = sample.image.shape().to_vec();
    let w = shape[2];
    let src = sample.image.data();
    let flipped = Tensor::from_fn(&shape, |k| {
        let (row, col) = (k / w, k % w);
        src[row * w + (w - 1 - col)]
    });
    ImageSample {
        image: flipped,
        landmarks: sample.landmarks.hflip(w),
        ..sample.clone()
    }
}

/// Scalar loss components of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_landmark: f64,
    pub l_classify: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Loss graph nodes of one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub landmark: Var,
    pub classify: Option<Var>,
}

impl LossVars {
    pub fn breakdown<T: Element>(&self, tape: &Tape<T>, lambda: f64) -> LossBreakdown {
        LossBreakdown {
            l_landmark: tape.scalar_value(self.landmark).as_f64(),
            l_classify: self.classify.map_or(0.0, |c| tape.scalar_value(c).as_f64()),
            lambda,
            total: tape.scalar_value(self.total).as_f64(),
        }
    }
}

/// `l_landmark + lambda * l_classify`. With a refined stack the landmark
/// term averages the MSE of both stacks; without a logit the class term is 0.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    icf: Var,
    refined: Option<Var>,
    gt: Var,
    logit: Option<Var>,
    label: u8,
    lambda: f64,
) -> Result<LossVars> {
    let icf_mse = tape.mse_loss(icf, gt)?;
    let landmark = match refined {
        Some(r) => {
            let r_mse = tape.mse_loss(r, gt)?;
            let both = tape.add(icf_mse, r_mse)?;
            tape.scale(both, T::of(0.5))
        }
        None => icf_mse,
    };
    let classify = match logit {
        Some(l) => Some(tape.bce_with_logits(l, T::of(f64::from(label)))?),
        None => None,
    };
    let total = match classify {
        Some(c) if lambda != 0.0 => {
            let weighted = tape.scale(c, T::of(lambda));
            tape.add(landmark, weighted)?
        }
        _ => landmark,
    };
    Ok(LossVars { total, landmark, classify })
}

/// Optimizer loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub sigma: f64,
    pub hflip_prob: f64,
    pub seed: u64,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 100,
            batch_size: 2,
            lambda: 0.01,
            sigma: 2.0,
            hflip_prob: 0.5,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be a finite non-negative number");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("train.lambda must be non-negative");
        }
        if !(self.sigma > 0.0) {
            return bad("train.sigma must be positive");
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad("train.hflip_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; decorrelates derived stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

pub const LOSS_LOG_HEADER: &str = "epoch,step,l_landmark,l_classify,total";

impl StepLog {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.step, self.loss.l_landmark, self.loss.l_classify, self.loss.total
        )
    }
}

/// Mutable training state: model, optimizer and counters.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: TgcnIcf<f32>,
    pub adam: Adam,
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: TgcnIcf<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(AdamConfig { lr: config.lr, ..Default::default() }, model.params());
        Ok(Self { model, adam, config, epoch: 0, step: 0 })
    }

    fn finished(&self) -> bool {
        self.epoch >= self.config.epochs || self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Forward and backward of one sample; grads accumulate in the params.
    fn sample_step(&mut self, sample: &ImageSample, weight: f64) -> Result<LossBreakdown> {
        let bb = &self.model.config().backbone;
        let (n, hf) = (bb.input_size, bb.feature_size);
        if sample.size() != n {
            return Err(Error::Data(format!("{}: image is {} px, model expects {n}", sample.name, sample.size())));
        }
        let gt = make_gt_heatmaps::<f32>(&sample.landmarks, self.config.sigma, hf, hf, n, &sample.name)?;
        let mut tape = Tape::new();
        let p = self.model.params().bind(&mut tape);
        let x = tape.constant(sample.image.clone());
        let out = self.model.forward(&mut tape, &p, x)?;
        let gt = tape.constant(gt);
        let loss = total_loss(&mut tape, out.icf_heatmaps, out.refined, gt, out.logit, sample.label, self.config.lambda)?;
        let breakdown = loss.breakdown(&tape, self.config.lambda);
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step: self.step,
                detail: format!("{} gave {:?}", sample.name, breakdown),
            });
        }
        let scaled = tape.scale(loss.total, weight as f32);
        tape.backward(scaled)?;
        self.model.params_mut().accumulate_grads(&tape, &p);
        Ok(breakdown)
    }

    /// Runs until the epoch budget or step cap, appending one CSV row per
    /// optimizer step to `log`.
    pub fn run(&mut self, data: &Dataset, log: &mut dyn Write) -> Result<Vec<StepLog>> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut history = Vec::new();
        while !self.finished() {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, self.epoch as u64])));
            for batch in order.chunks(self.config.batch_size) {
                if self.finished() {
                    break;
                }
                self.model.params_mut().zero_grad();
                let weight = 1.0 / batch.len() as f64;
                let mut mean = LossBreakdown { lambda: self.config.lambda, ..Default::default() };
                for &i in batch {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, self.epoch as u64, i as u64]));
                    let flip = rng.gen_bool(self.config.hflip_prob);
                    let sample = if flip { augment_hflip(&data.samples[i]) } else { data.samples[i].clone() };
                    let b = self.sample_step(&sample, weight)?;
                    mean.l_landmark += b.l_landmark * weight;
                    mean.l_classify += b.l_classify * weight;
                    mean.total += b.total * weight;
                }
                self.adam.step(self.model.params_mut());
                let entry = StepLog { epoch: self.epoch, step: self.step, loss: mean };
                writeln!(log, "{}", entry.csv()).map_err(|e| Error::io("loss log", e))?;
                history.push(entry);
                self.step += 1;
            }
            if self.config.max_steps.is_none_or(|m| self.step < m) {
                self.epoch += 1;
            }
        }
        Ok(history)
    }
}

/// Loss of every sample without augmentation or parameter updates.
pub fn evaluate_loss(model: &TgcnIcf<f32>, data: &Dataset, config: &TrainConfig) -> Result<Vec<LossBreakdown>> {
    let bb = &model.config().backbone;
    data.samples
        .iter()
        .map(|s| {
            let gt = make_gt_heatmaps::<f32>(&s.landmarks, config.sigma, bb.feature_size, bb.feature_size, bb.input_size, &s.name)?;
            let mut tape = Tape::new();
            let p = model.params().bind_frozen(&mut tape);
            let x = tape.constant(s.image.clone());
            let out = model.forward(&mut tape, &p, x)?;
            let gt = tape.constant(gt);
            let loss = total_loss(&mut tape, out.icf_heatmaps, out.refined, gt, out.logit, s.label, config.lambda)?;
            Ok(loss.breakdown(&tape, config.lambda))
        })
        .collect()
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TGCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Everything persisted by [`save_checkpoint`].
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u16,
    pub epoch: u32,
    pub step: u32,
    pub adam_step: u32,
    /// Run configuration text the model was built from.
    pub config: String,
    pub params: Vec<(String, Tensor<f32>)>,
    pub moments: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer, config: &str) -> Self {
        let params = trainer.model.params();
        let mut moments = Vec::new();
        for (i, (name, t)) in params.iter().enumerate() {
            let shape = t.shape();
            for (tag, buf) in [("m", &trainer.adam.m[i]), ("v", &trainer.adam.v[i])] {
                let moment = Tensor::new(shape.to_vec(), buf.clone()).expect("moment matches its parameter");
                moments.push((format!("adam.{tag}/{name}"), moment));
            }
        }
        Self {
            version: CHECKPOINT_VERSION,
            epoch: trainer.epoch as u32,
            step: trainer.step as u32,
            adam_step: trainer.adam.step as u32,
            config: config.to_string(),
            params: params.iter().map(|(n, t)| (n.to_string(), t.clone().with_requires_grad(false))).collect(),
            moments,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.adam_step.to_le_bytes());
        buf.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.config.as_bytes());
        let params: Vec<(&str, &Tensor<f32>)> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        encode_tgt1(&mut buf, &params)?;
        let moments: Vec<(&str, &Tensor<f64>)> = self.moments.iter().map(|(n, t)| (n.as_str(), t)).collect();
        encode_tgt1(&mut buf, &moments)?;
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = cur.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let (epoch, step, adam_step) = (cur.u32()?, cur.u32()?, cur.u32()?);
        let len = cur.u32()? as usize;
        let config = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?
            .to_string();
        let params = decode_tgt1::<f32>(&mut cur)?;
        let moments = decode_tgt1::<f64>(&mut cur)?;
        if !cur.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", cur.remaining())));
        }
        Ok(Self { version, epoch, step, adam_step, config, params, moments })
    }

    /// Copies parameters and optimizer state into `trainer`. Nothing is
    /// modified unless every tensor is present with the right shape.
    pub fn restore(&self, trainer: &mut Trainer) -> Result<()> {
        let mut model = trainer.model.clone();
        model.params_mut().load_named(&self.params)?;
        let mut adam = trainer.adam.clone();
        let mut missing = Vec::new();
        for (i, (name, t)) in model.params().iter().enumerate() {
            for (tag, dst) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let key = format!("adam.{tag}/{name}");
                match self.moments.iter().find(|(n, _)| *n == key) {
                    Some((_, m)) if m.shape() == t.shape() => dst.copy_from_slice(m.data()),
                    _ => missing.push(key),
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::IncompleteCheckpoint(missing));
        }
        adam.step = u64::from(self.adam_step);
        trainer.model = model;
        trainer.adam = adam;
        trainer.epoch = self.epoch as usize;
        trainer.step = self.step as usize;
        Ok(())
    }

    /// Copies only the parameters into `model`, all or nothing.
    pub fn restore_model(&self, model: &mut TgcnIcf<f32>) -> Result<()> {
        model.params_mut().load_named(&self.params)
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.encode()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{decode_landmarks, mre};
    use crate::geometry::Point;
    use crate::model::tests::toy_config;

    fn toy_sample(seed: u64, label: u8) -> ImageSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Tensor::from_fn(&[1, 16, 16], |_| rng.gen_range(0.0..1.0f32));
        let points = std::array::from_fn(|_| Point::new(rng.gen_range(1.0..14.0), rng.gen_range(1.0..14.0)));
        ImageSample {
            name: format!("toy{seed}"),
            image,
            landmarks: LandmarkSet::new(points),
            spacing: 0.1,
            label,
            group: None,
        }
    }

    fn toy_data(n: usize) -> Dataset {
        Dataset::new((0..n).map(|i| toy_sample(i as u64, (i % 2) as u8)).collect())
    }

    fn toy_trainer(lr: f64, seed: u64) -> Trainer {
        let model = TgcnIcf::<f32>::new(toy_config(), 5).unwrap();
        Trainer::new(model, TrainConfig { lr, seed, max_steps: Some(6), ..Default::default() }).unwrap()
    }

    fn on_grid() -> LandmarkSet {
        LandmarkSet::new(std::array::from_fn(|k| Point::new(8.0 + 4.0 * k as f64, 40.0)))
    }

    #[test]
    fn gt_peak_is_one_on_grid_point() {
        let h = make_gt_heatmaps::<f64>(&on_grid(), 2.0, 32, 32, 128, "s").unwrap();
        assert_eq!(h.at(&[0, 10, 2]), 1.0);
        assert_eq!(h.at(&[0, 10, 1]), h.at(&[0, 10, 3]));
        assert_eq!(h.at(&[0, 9, 2]), h.at(&[0, 11, 2]));
    }

    #[test]
    fn gt_value_at_one_sigma() {
        let h = make_gt_heatmaps::<f64>(&on_grid(), 2.0, 32, 32, 128, "s").unwrap();
        assert!((h.at(&[0, 12, 2]) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((h.at(&[1, 10, 5]) - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn gt_sigma_zero_is_one_hot() {
        let h = make_gt_heatmaps::<f64>(&on_grid(), 0.0, 32, 32, 128, "s").unwrap();
        for k in 0..NUM_LANDMARKS {
            let plane = &h.data()[k * 1024..(k + 1) * 1024];
            assert_eq!(plane.iter().sum::<f64>(), 1.0);
            assert_eq!(plane[10 * 32 + 2 + k], 1.0);
        }
    }

    #[test]
    fn gt_rejects_out_of_bounds_landmark() {
        let mut lm = on_grid();
        lm.points[3].x = 128.5;
        match make_gt_heatmaps::<f32>(&lm, 2.0, 32, 32, 128, "img_0007") {
            Err(Error::Data(m)) => assert!(m.contains("img_0007")),
            other => panic!("expected a data error, got {other:?}"),
        }
    }

    #[test]
    fn hflip_is_an_involution() {
        let s = toy_sample(1, 0);
        let twice = augment_hflip(&augment_hflip(&s));
        assert_eq!(twice.image, s.image);
        assert_eq!(twice.landmarks, s.landmarks);
    }

    #[test]
    fn hflip_maps_left_edge_to_right_edge() {
        let mut s = toy_sample(2, 1);
        s.landmarks.points[0] = Point::new(0.0, 5.0);
        let f = augment_hflip(&s);
        assert_eq!(f.landmarks.points[0], Point::new(15.0, 5.0));
        assert_eq!(f.image.at(&[0, 3, 15]), s.image.at(&[0, 3, 0]));
        assert_eq!(f.label, 1);
    }

    #[test]
    fn mre_is_flip_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let mut pts = || LandmarkSet::new(std::array::from_fn(|_| Point::new(rng.gen_range(0.0..127.0), rng.gen_range(0.0..127.0))));
            let (pred, gt) = (pts(), pts());
            let a = mre(&pred.points, &gt.points, 0.1).unwrap();
            let b = mre(&pred.hflip(128).points, &gt.hflip(128).points, 0.1).unwrap();
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn flipped_gt_peaks_at_flipped_landmarks() {
        let s = toy_sample(4, 0);
        let f = augment_hflip(&s);
        let h = make_gt_heatmaps::<f32>(&f.landmarks, 1.0, 16, 16, 16, "f").unwrap();
        let decoded = decode_landmarks(&h, 1.0).unwrap();
        for (d, p) in decoded.landmarks.points.iter().zip(&f.landmarks.points) {
            assert!(d.dist(*p) < 0.5, "{d} vs {p}");
        }
    }

    fn loss_graph(lambda: f64, label: u8, logit: f64, seed: u64) -> (LossBreakdown, f64, f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |_: usize| rng.gen_range(0.0..1.0f64);
        let icf = Tensor::from_fn(&[6, 4, 4], &mut t);
        let refined = Tensor::from_fn(&[6, 4, 4], &mut t);
        let gt = Tensor::from_fn(&[6, 4, 4], &mut t);
        let mse = |a: &Tensor<f64>, b: &Tensor<f64>| {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64
        };
        let (m_icf, m_ref) = (mse(&icf, &gt), mse(&refined, &gt));
        let y = f64::from(label);
        let bce = -(y * (1.0 / (1.0 + (-logit).exp())).ln() + (1.0 - y) * (1.0 / (1.0 + logit.exp())).ln());
        let mut tape = Tape::<f64>::new();
        let (i, r, g) = (tape.constant(icf), tape.constant(refined), tape.constant(gt));
        let l = tape.constant(Tensor::full(&[1], logit));
        let vars = total_loss(&mut tape, i, Some(r), g, Some(l), label, lambda).unwrap();
        (vars.breakdown(&tape, lambda), m_icf, m_ref, bce)
    }

    #[test]
    fn total_loss_matches_components() {
        for seed in 0..20 {
            let (b, m_icf, m_ref, bce) = loss_graph(0.3, (seed % 2) as u8, seed as f64 / 5.0 - 2.0, seed);
            assert!((b.l_landmark - 0.5 * (m_icf + m_ref)).abs() < 1e-6);
            assert!((b.l_classify - bce).abs() < 1e-6);
            assert!((b.total - (b.l_landmark + b.lambda * b.l_classify)).abs() < 1e-6);
        }
    }

    #[test]
    fn total_loss_lambda_zero_is_landmark_only() {
        let (b, ..) = loss_graph(0.0, 1, 3.0, 7);
        assert_eq!(b.total, b.l_landmark);
    }

    #[test]
    fn total_loss_perfect_heatmaps_neutral_logit_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let gt = Tensor::from_fn(&[6, 4, 4], |k| (k % 5) as f64 / 5.0);
        let (i, r, g) = (tape.constant(gt.clone()), tape.constant(gt.clone()), tape.constant(gt));
        let l = tape.constant(Tensor::full(&[1], 0.0));
        let b = total_loss(&mut tape, i, Some(r), g, Some(l), 1, 1.0).unwrap().breakdown(&tape, 1.0);
        assert!((b.total - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_rejects_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[6, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[6, 4, 5]));
        assert!(matches!(total_loss(&mut tape, a, None, b, None, 0, 0.1), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let mut tr = toy_trainer(0.0, 1);
        let before = tr.model.params().clone();
        let log = tr.run(&toy_data(4), &mut std::io::sink()).unwrap();
        assert_eq!(log.len(), 6);
        for ((_, a), (_, b)) in before.iter().zip(tr.model.params().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = toy_data(5);
        let run = |seed| {
            let mut tr = toy_trainer(1e-3, seed);
            let mut csv = Vec::new();
            tr.run(&data, &mut csv).unwrap();
            (String::from_utf8(csv).unwrap(), tr.model.params().clone())
        };
        let (a, pa) = run(3);
        let (b, pb) = run(3);
        assert_eq!(a, b);
        for ((_, x), (_, y)) in pa.iter().zip(pb.iter()) {
            assert_eq!(x.data(), y.data());
        }
        assert_ne!(run(4).0, a);
    }

    #[test]
    fn loss_log_rows_are_additive() {
        let mut tr = toy_trainer(1e-3, 0);
        let mut csv = Vec::new();
        let log = tr.run(&toy_data(3), &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), log.len());
        for row in &log {
            let b = row.loss;
            assert!((b.total - (b.l_landmark + b.lambda * b.l_classify)).abs() < 1e-6);
        }
        assert_eq!(text.lines().next().unwrap().split(',').count(), LOSS_LOG_HEADER.split(',').count());
    }

    #[test]
    fn empty_dataset_is_a_config_error() {
        let mut tr = toy_trainer(1e-3, 0);
        assert!(matches!(tr.run(&Dataset::new(Vec::new()), &mut std::io::sink()), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_image_size_is_a_data_error() {
        let mut tr = toy_trainer(1e-3, 0);
        let mut s = toy_sample(0, 0);
        s.image = Tensor::zeros(&[1, 8, 8]);
        assert!(matches!(tr.run(&Dataset::new(vec![s]), &mut std::io::sink()), Err(Error::Data(_))));
    }

    fn probe_output(model: &TgcnIcf<f32>) -> Vec<f32> {
        let image = Tensor::from_fn(&[1, 16, 16], |k| ((k * 7) % 13) as f32 / 13.0);
        let p = model.predict(&image).unwrap();
        let mut out = p.heatmaps.data().to_vec();
        out.push(p.probability.unwrap() as f32);
        out
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut tr = toy_trainer(1e-3, 2);
        tr.run(&toy_data(4), &mut std::io::sink()).unwrap();
        let ckpt = Checkpoint::capture(&tr, "model.input_size = 16\n");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);

        let mut fresh = toy_trainer(1e-3, 2);
        fresh.model = TgcnIcf::<f32>::new(toy_config(), 99).unwrap();
        loaded.restore(&mut fresh).unwrap();
        assert_eq!(probe_output(&fresh.model), probe_output(&tr.model));
        assert_eq!(fresh.adam.m, tr.adam.m);
        assert_eq!(fresh.adam.v, tr.adam.v);
        assert_eq!((fresh.epoch, fresh.step, fresh.adam.step), (tr.epoch, tr.step, tr.adam.step));
        assert_eq!(Checkpoint::decode(&loaded.encode().unwrap()).unwrap(), loaded);
    }

    #[test]
    fn truncated_checkpoint_is_rejected_without_mutation() {
        let tr = toy_trainer(1e-3, 2);
        let bytes = Checkpoint::capture(&tr, "").encode().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut model = TgcnIcf::<f32>::new(toy_config(), 11).unwrap();
        let before = probe_output(&model);
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            match load_checkpoint(&path) {
                Err(Error::Format(_)) => {}
                other => panic!("cut at {cut}: expected a format error, got {other:?}"),
            }
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra), Err(Error::Format(_))));
        assert_eq!(probe_output(&model), before);
        Checkpoint::decode(&bytes).unwrap().restore_model(&mut model).unwrap();
        assert_ne!(probe_output(&model), before);
    }

    #[test]
    fn checkpoint_from_other_shape_is_incomplete() {
        let tr = toy_trainer(1e-3, 2);
        let ckpt = Checkpoint::capture(&tr, "");
        let mut cfg = toy_config();
        cfg.backbone.channels = 6;
        let model = TgcnIcf::<f32>::new(cfg, 0).unwrap();
        let mut other = Trainer::new(model, TrainConfig::default()).unwrap();
        let before = probe_output(&other.model);
        match ckpt.restore(&mut other) {
            Err(Error::IncompleteCheckpoint(names)) => assert!(names.iter().any(|n| n.contains("unet.out"))),
            other => panic!("expected an incomplete-checkpoint error, got {other:?}"),
        }
        assert_eq!(probe_output(&other.model), before);
        assert_eq!(other.step, 0);
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let tr = toy_trainer(1e-3, 2);
        let mut bytes = Checkpoint::capture(&tr, "").encode().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Format(m)) if m.contains("version")));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Format(m)) if m.contains("magic")));
    }
}
