//! Adam optimizer, learning-rate schedule, the training loop, and
//! full-image evaluation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{AdamSnapshot, Checkpoint, Model, NetworkConfig};
use crate::data::{augment_pair, random_crop_pair, ImagePair};
use crate::error::{Error, Result};
use crate::loss::{psnr, ssim, total_loss, LossReport, LossWeights};
use crate::nn::ParamSet;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates per parameter name, lazily allocated.
pub struct AdamState<T: Scalar> {
    pub hyper: AdamHyper,
    pub step: u64,
    moments: std::collections::BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(hyper: AdamHyper) -> Self {
        AdamState { hyper, step: 0, moments: Default::default() }
    }

    /// One bias-corrected update over every parameter of the set; errors if
    /// any parameter is missing its gradient.
    pub fn apply<M: ParamSet<T>>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut missing = Vec::new();
        let moments = &mut self.moments;
        model.visit_params("", &mut |name, param| {
            let grad = match param.grad() {
                Some(g) => g,
                None => {
                    missing.push(name.to_string());
                    return;
                }
            };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| {
                    (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()])
                });
            let mut data = param.data().to_vec();
            for i in 0..data.len() {
                let g = grad[i].as_f64();
                let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * g;
                let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                data[i] = T::from_f64(data[i].as_f64() - update);
            }
            *param = param.with_data(data);
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("missing gradients for {missing:?}")))
        }
    }
}

impl AdamState<f32> {
    pub fn snapshot(&self) -> AdamSnapshot {
        AdamSnapshot {
            step: self.step,
            moments: self
                .moments
                .iter()
                .map(|(k, (m, v))| (k.clone(), m.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn from_snapshot(snap: &AdamSnapshot, hyper: AdamHyper) -> Self {
        AdamState {
            hyper,
            step: snap.step,
            moments: snap
                .moments
                .iter()
                .map(|(k, m, v)| (k.clone(), (m.clone(), v.clone())))
                .collect(),
        }
    }
}

/// lr0 · decay_factor^floor(epoch / decay_every)
pub fn lr_at(epoch: u64, lr0: f64, decay_every: u64, decay_factor: f64) -> f64 {
    lr0 * decay_factor.powi((epoch / decay_every) as i32)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_every: u64,
    pub decay_factor: f64,
    pub crop: usize,
    pub weights: LossWeights,
    pub adam: AdamHyper,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// The published protocol, kept verbatim as a named preset.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 16,
            lr0: 1e-4,
            decay_every: 25,
            decay_factor: 0.1,
            crop: 128,
            weights: LossWeights::default(),
            adam: AdamHyper::default(),
            seed: 0,
            augment: true,
        }
    }

    /// Small-everything variant for CPU-minutes experiments.
    pub fn desk() -> Self {
        TrainConfig { batch_size: 8, crop: 32, lr0: 3e-4, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.crop == 0 {
            return Err(Error::InvalidConfig("epochs/batch/crop must be positive".into()));
        }
        if self.lr0 <= 0.0 || self.decay_factor <= 0.0 || self.decay_factor > 1.0 {
            return Err(Error::InvalidConfig("lr0 > 0, decay factor in (0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StepLog {
    pub step: u64,
    pub report: LossReport,
    pub psnr: f64,
}

pub const LOG_HEADER: &str = "step,pixel,pixel_grad,grad_branch,total,psnr";

pub fn log_csv_line(s: &StepLog) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.4}",
        s.step, s.report.pixel, s.report.pixel_grad, s.report.grad_branch, s.report.total, s.psnr
    )
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<StepLog>,
    pub final_checkpoint: Checkpoint,
}

fn stack_batch(pairs: &[ImagePair]) -> (Tensor<f32>, Tensor<f32>) {
    let s = pairs[0].clean.shape();
    let out = Shape::new(pairs.len(), s.c, s.h, s.w);
    let mut noisy = Vec::with_capacity(out.numel());
    let mut clean = Vec::with_capacity(out.numel());
    for p in pairs {
        noisy.extend_from_slice(p.noisy.data());
        clean.extend_from_slice(p.clean.data());
    }
    (Tensor::from_vec(out, noisy), Tensor::from_vec(out, clean))
}

/// Train from scratch. `steps_limit` caps total optimization steps (0 = no
/// cap); checkpoints land in `ckpt_dir` after every epoch when given.
pub fn train(
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    dataset: &[ImagePair],
    ckpt_dir: Option<&Path>,
    steps_limit: u64,
    mut on_step: Option<&mut dyn FnMut(&StepLog)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    let model = Model::new(net_cfg, cfg.seed)?;
    let adam = AdamState::new(cfg.adam);
    let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run_loop(model, adam, rng, 0, 0, cfg, dataset, ckpt_dir, steps_limit, &mut on_step)
}

/// Continue a run from a checkpoint; equivalent to never having stopped.
pub fn resume(
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    dataset: &[ImagePair],
    ckpt_dir: Option<&Path>,
    steps_limit: u64,
    mut on_step: Option<&mut dyn FnMut(&StepLog)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = ckpt.restore_model()?;
    let adam = match &ckpt.opt {
        Some(snap) => AdamState::from_snapshot(snap, cfg.adam),
        None => AdamState::new(cfg.adam),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(ckpt.rng_seed);
    rng.set_word_pos(ckpt.rng_word_pos);
    run_loop(
        model, adam, rng, ckpt.epoch, ckpt.step, cfg, dataset, ckpt_dir, steps_limit,
        &mut on_step,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_loop(
    mut model: Model<f32>,
    mut adam: AdamState<f32>,
    mut rng: ChaCha8Rng,
    start_epoch: u64,
    mut global_step: u64,
    cfg: &TrainConfig,
    dataset: &[ImagePair],
    ckpt_dir: Option<&Path>,
    steps_limit: u64,
    on_step: &mut Option<&mut dyn FnMut(&StepLog)>,
) -> Result<TrainOutcome> {
    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size) as u64;
    let mut log = Vec::new();
    'epochs: for epoch in start_epoch..cfg.epochs {
        let lr = lr_at(epoch, cfg.lr0, cfg.decay_every, cfg.decay_factor);
        for _ in 0..steps_per_epoch {
            if steps_limit > 0 && global_step >= steps_limit {
                break 'epochs;
            }
            let mut batch = Vec::with_capacity(cfg.batch_size);
            let mut batch_ids = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let pick = &dataset[rng.gen_range(0..dataset.len())];
                let size = cfg.crop.min(pick.clean.shape().h).min(pick.clean.shape().w);
                let mut p = random_crop_pair(pick, size, &mut rng)?;
                if cfg.augment {
                    p = augment_pair(&p, &mut rng);
                }
                batch_ids.push(p.id.clone());
                batch.push(p);
            }
            let (noisy, clean) = stack_batch(&batch);
            let (denoised, pred_grad) = model.forward(&noisy, true)?;
            let (total, report) = total_loss(&denoised, &clean, pred_grad.as_ref(), &cfg.weights)?;
            if !report.total.is_finite() {
                return Err(Error::NanLoss { step: global_step, lr, batch_ids });
            }
            total.backward()?;
            adam.apply(&mut model, lr)?;
            global_step += 1;
            let clamped = ops::clamp01(&denoised);
            let entry = StepLog {
                step: global_step,
                report,
                psnr: psnr(clamped.data(), clean.data()),
            };
            if let Some(cb) = on_step.as_mut() {
                cb(&entry);
            }
            log.push(entry);
        }
        if let Some(dir) = ckpt_dir {
            let ckpt = Checkpoint::capture(
                &mut model,
                Some(adam.snapshot()),
                epoch + 1,
                global_step,
                cfg.seed,
                rng.get_word_pos(),
            );
            ckpt.save(&dir.join(format!("epoch_{:03}.ckpt", epoch + 1)))?;
        }
    }
    let final_checkpoint = Checkpoint::capture(
        &mut model,
        Some(adam.snapshot()),
        cfg.epochs.min(start_epoch + (global_step / steps_per_epoch.max(1))),
        global_step,
        cfg.seed,
        rng.get_word_pos(),
    );
    Ok(TrainOutcome { model, log, final_checkpoint })
}

fn reflect_index(i: isize, n: isize) -> usize {
    // mirror without edge repetition, period 2n-2
    let p = (2 * n - 2).max(1);
    let m = ((i % p) + p) % p;
    (if m < n { m } else { p - m }) as usize
}

/// Reflect-pad H/W up to multiples of `div`.
pub fn reflect_pad_to(t: &Tensor<f32>, div: usize) -> Tensor<f32> {
    let s = t.shape();
    let (ph, pw) = (s.h.div_ceil(div) * div, s.w.div_ceil(div) * div);
    if (ph, pw) == (s.h, s.w) {
        return t.clone();
    }
    let out = Shape::new(s.n, s.c, ph, pw);
    let mut data = vec![0f32; out.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..ph {
                for j in 0..pw {
                    let si = reflect_index(i as isize, s.h as isize);
                    let sj = reflect_index(j as isize, s.w as isize);
                    data[out.idx(n, c, i, j)] = t.data()[s.idx(n, c, si, sj)];
                }
            }
        }
    }
    Tensor::from_vec(out, data)
}

fn crop_to(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let s = t.shape();
    if (s.h, s.w) == (h, w) {
        return t.clone();
    }
    let out = Shape::new(s.n, s.c, h, w);
    let mut data = vec![0f32; out.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..h {
                for j in 0..w {
                    data[out.idx(n, c, i, j)] = t.data()[s.idx(n, c, i, j)];
                }
            }
        }
    }
    Tensor::from_vec(out, data)
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Full-image inference on the noisy side of a padded copy, cropped back,
/// scored against clean.
pub fn denoise_image(model: &Model<f32>, noisy: &Tensor<f32>) -> Result<Tensor<f32>> {
    let div = model.config().spatial_divisor();
    let s = noisy.shape();
    let padded = reflect_pad_to(noisy, div);
    let (out, _) = model.forward(&padded, false)?;
    Ok(crop_to(&out, s.h, s.w))
}

pub fn evaluate(model: &Model<f32>, dataset: &[ImagePair]) -> Result<Vec<EvalRow>> {
    dataset
        .iter()
        .map(|pair| {
            let out = denoise_image(model, &pair.noisy)?;
            let s = out.shape();
            Ok(EvalRow {
                id: pair.id.clone(),
                psnr: psnr(out.data(), pair.clean.data()),
                ssim: ssim(out.data(), pair.clean.data(), s.c, s.h, s.w),
            })
        })
        .collect()
}

pub fn write_eval_csv(rows: &[EvalRow], mut w: impl std::io::Write) -> Result<()> {
    writeln!(w, "id,psnr,ssim")?;
    let (mut sp, mut ss) = (0.0, 0.0);
    for r in rows {
        writeln!(w, "{},{:.4},{:.6}", r.id, r.psnr, r.ssim)?;
        sp += r.psnr;
        ss += r.ssim;
    }
    let n = rows.len().max(1) as f64;
    writeln!(w, "mean,{:.4},{:.6}", sp / n, ss / n)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::tiny_config;
    use crate::data::{synthetic_dataset, NoiseSpec};
    use crate::tensor::Shape;

    struct OneParam {
        p: Tensor<f64>,
    }

    impl ParamSet<f64> for OneParam {
        fn visit_params(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
            f("p", &mut self.p);
        }
    }

    fn scalar_param(v: f64) -> OneParam {
        OneParam { p: Tensor::param(Shape::new(1, 1, 1, 1), vec![v]) }
    }

    fn set_grad(m: &mut OneParam, g: f64) {
        m.p.set_grad(vec![g]);
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut m = scalar_param(0.5);
        set_grad(&mut m, 0.0);
        let mut adam = AdamState::<f64>::new(AdamHyper::default());
        adam.apply(&mut m, 1e-4).unwrap();
        assert_eq!(m.p.data()[0], 0.5);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut m = scalar_param(1.0);
        set_grad(&mut m, 1.0);
        let mut adam = AdamState::<f64>::new(AdamHyper::default());
        adam.apply(&mut m, 1e-4).unwrap();
        // bias correction makes mhat = g, vhat = g² on step 1
        let expect = 1.0 - 1e-4 * 1.0 / (1.0f64.sqrt() + 1e-8);
        assert!((m.p.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn ten_step_trace_matches_reference_loop() {
        // independent scalar recurrence, written out longhand
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 1e-3);
        let grads = [1.0, -0.5, 0.25, 2.0, -1.5, 0.1, 0.9, -0.3, 0.7, -2.2];
        let mut x = 0.4f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t as i32 + 1));
            let vhat = v / (1.0 - b2.powi(t as i32 + 1));
            x -= lr * mhat / (vhat.sqrt() + eps);
        }
        let mut model = scalar_param(0.4);
        let mut adam = AdamState::<f64>::new(AdamHyper::default());
        for g in grads {
            set_grad(&mut model, g);
            adam.apply(&mut model, lr).unwrap();
        }
        assert!(
            (model.p.data()[0] - x).abs() < 1e-10,
            "adam {} vs reference {x}",
            model.p.data()[0]
        );
    }

    #[test]
    fn zero_betas_degenerate_to_sign_sgd() {
        let hyper = AdamHyper { beta1: 0.0, beta2: 0.0, eps: 1e-15 };
        for g in [3.0, -0.02, 0.5] {
            let mut m = scalar_param(1.0);
            set_grad(&mut m, g);
            let mut adam = AdamState::<f64>::new(hyper);
            adam.apply(&mut m, 0.01).unwrap();
            let moved = m.p.data()[0] - 1.0;
            assert!((moved + 0.01 * g.signum()).abs() < 1e-9, "g={g} moved {moved}");
        }
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut m = scalar_param(1.0);
        let mut adam = AdamState::<f64>::new(AdamHyper::default());
        assert!(adam.apply(&mut m, 1e-4).is_err());
    }

    #[test]
    fn lr_schedule_boundaries() {
        assert_eq!(lr_at(0, 1e-4, 25, 0.1), 1e-4);
        assert_eq!(lr_at(24, 1e-4, 25, 0.1), 1e-4);
        assert!((lr_at(25, 1e-4, 25, 0.1) - 1e-5).abs() < 1e-20);
        let mut prev = f64::INFINITY;
        for e in 0..100 {
            let lr = lr_at(e, 1e-4, 25, 0.1);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn paper_preset_values() {
        let cfg = TrainConfig::paper();
        assert_eq!(cfg.weights.alpha, 1.0);
        assert_eq!(cfg.weights.beta, 0.1);
        assert_eq!(cfg.weights.gamma, 0.2);
        assert_eq!(cfg.adam.beta1, 0.9);
        assert_eq!(cfg.adam.beta2, 0.999);
        assert_eq!(cfg.lr0, 1e-4);
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.crop), (60, 16, 128));
    }

    fn smoke_dataset(n: usize, hw: usize, seed: u64) -> Vec<ImagePair> {
        synthetic_dataset(n, hw, &NoiseSpec::gaussian(25.0 / 255.0, seed), seed)
    }

    #[test]
    fn short_training_run_reduces_loss() {
        let net = tiny_config();
        let cfg = TrainConfig {
            epochs: 100,
            batch_size: 2,
            crop: 16,
            seed: 2,
            augment: false,
            ..TrainConfig::desk()
        };
        let data = smoke_dataset(2, 16, 1);
        let out = train(&net, &cfg, &data, None, 40, None).unwrap();
        let head: f64 = out.log[..5].iter().map(|s| s.report.total).sum::<f64>() / 5.0;
        let tail: f64 = out.log[out.log.len() - 5..].iter().map(|s| s.report.total).sum::<f64>() / 5.0;
        assert!(tail < head, "loss should fall: head {head} tail {tail}");
    }

    #[test]
    fn two_seeded_runs_match_byte_for_byte() {
        let net = tiny_config();
        let cfg = TrainConfig { epochs: 1, batch_size: 2, crop: 16, seed: 5, ..TrainConfig::desk() };
        let data = smoke_dataset(4, 24, 1);
        let dir = tempfile::tempdir().unwrap();
        let a = train(&net, &cfg, &data, None, 3, None).unwrap();
        let b = train(&net, &cfg, &data, None, 3, None).unwrap();
        let (pa, pb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        a.final_checkpoint.save(&pa).unwrap();
        b.final_checkpoint.save(&pb).unwrap();
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    }

    #[test]
    fn resume_equals_uninterrupted() {
        let net = tiny_config();
        let cfg = TrainConfig { epochs: 2, batch_size: 2, crop: 16, seed: 7, ..TrainConfig::desk() };
        let data = smoke_dataset(4, 24, 2);
        let dir = tempfile::tempdir().unwrap();
        let full = train(&net, &cfg, &data, None, 0, None).unwrap();
        let half_cfg = TrainConfig { epochs: 1, ..cfg };
        let half = train(&net, &half_cfg, &data, None, 0, None).unwrap();
        let resumed = resume(&half.final_checkpoint, &cfg, &data, None, 0, None).unwrap();
        let (pa, pb) = (dir.path().join("full.ckpt"), dir.path().join("resumed.ckpt"));
        full.final_checkpoint.save(&pa).unwrap();
        resumed.final_checkpoint.save(&pb).unwrap();
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    }

    #[test]
    fn eval_clean_vs_clean_is_perfect() {
        let net = tiny_config();
        let model = Model::new(&net, 3).unwrap();
        let clean = crate::data::synthetic_clean(0, 3, 16);
        let pair = ImagePair { noisy: clean.clone(), clean: clean.clone(), id: "c".into() };
        // score the identity mapping rather than the model: metric sanity
        let rows = vec![EvalRow {
            id: pair.id.clone(),
            psnr: psnr(pair.noisy.data(), pair.clean.data()),
            ssim: ssim(pair.noisy.data(), pair.clean.data(), 3, 16, 16),
        }];
        assert!(rows[0].psnr.is_infinite());
        assert!((rows[0].ssim - 1.0).abs() < 1e-12);
        // and the untrained model still emits finite metrics on noisy input
        let noisy_pair = smoke_dataset(1, 16, 9).remove(0);
        let r = evaluate(&model, &[noisy_pair]).unwrap();
        assert!(r[0].psnr.is_finite() && r[0].ssim.is_finite());
    }

    #[test]
    fn eval_pads_odd_sizes() {
        let net = tiny_config();
        let model = Model::new(&net, 4).unwrap();
        let pair = smoke_dataset(1, 17, 10).remove(0);
        let rows = evaluate(&model, &[pair]).unwrap();
        assert!(rows[0].psnr.is_finite());
    }

    #[test]
    fn eval_twice_is_identical() {
        let net = tiny_config();
        let model = Model::new(&net, 5).unwrap();
        let data = smoke_dataset(2, 16, 11);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_eval_csv(&evaluate(&model, &data).unwrap(), &mut a).unwrap();
        write_eval_csv(&evaluate(&model, &data).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reflect_padding_mirrors_interior() {
        let s = Shape::new(1, 1, 3, 3);
        let t = Tensor::from_vec(s, (0..9).map(|v| v as f32).collect());
        let p = reflect_pad_to(&t, 4);
        let ps = p.shape();
        assert_eq!((ps.h, ps.w), (4, 4));
        // row 3 mirrors row 1, column 3 mirrors column 1
        assert_eq!(p.data()[ps.idx(0, 0, 3, 0)], t.data()[s.idx(0, 0, 1, 0)]);
        assert_eq!(p.data()[ps.idx(0, 0, 0, 3)], t.data()[s.idx(0, 0, 0, 1)]);
        assert_eq!(p.data()[ps.idx(0, 0, 3, 3)], t.data()[s.idx(0, 0, 1, 1)]);
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let net = tiny_config();
        // absurd lr forces divergence fast on tiny data
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 2,
            crop: 16,
            lr0: 1e6,
            seed: 3,
            ..TrainConfig::desk()
        };
        let data = smoke_dataset(2, 16, 3);
        match train(&net, &cfg, &data, None, 0, None) {
            Err(Error::NanLoss { step, lr, batch_ids }) => {
                assert!(lr > 0.0);
                assert!(!batch_ids.is_empty());
                let _ = step;
            }
            other => panic!("expected NaN abort, got {:?}", other.as_ref().err()),
        }
    }
}
