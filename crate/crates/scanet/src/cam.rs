//! Complementary attention: a Dense Module (spatial + channel attention over
//! a shared feature map, fused by 1×1 conv with a residual input) and a
//! Sparse Module (a small intrinsic convolution expanded by cheap per-channel
//! depthwise operations), composed sequentially with a residual around the
//! pair. Either stage can be disabled, turning it into an identity, so
//! ablations are pure configuration changes.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamSet};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Init shrink factor for convs feeding residual additions; keeps deep
/// CAM stacks near unit activation scale at initialization.
pub const RESIDUAL_GAIN: f64 = 0.2;

/// Init shrink factor for the output projections that map features back to
/// image space; keeps the network close to identity at initialization.
pub const OUTPUT_GAIN: f64 = 0.02;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct CamConfig {
    pub channels: usize,
    /// Cheap maps generated per intrinsic map in the sparse module.
    pub sparse_ratio: usize,
    pub sa_kernel: usize,
    pub ca_reduction: usize,
    pub cheap_kernel: usize,
    pub enable_dense: bool,
    pub enable_sparse: bool,
}

impl Default for CamConfig {
    fn default() -> Self {
        CamConfig {
            channels: 32,
            sparse_ratio: 3,
            sa_kernel: 7,
            ca_reduction: 8,
            cheap_kernel: 3,
            enable_dense: true,
            enable_sparse: true,
        }
    }
}

impl CamConfig {
    pub fn with_channels(self, channels: usize) -> Self {
        CamConfig { channels, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.sparse_ratio == 0 || self.ca_reduction == 0 {
            return Err(Error::InvalidConfig("cam sizes must be positive".into()));
        }
        if self.sa_kernel % 2 == 0 || self.cheap_kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "attention kernels must be odd (sa {}, cheap {})",
                self.sa_kernel, self.cheap_kernel
            )));
        }
        if self.channels % self.ca_reduction != 0 {
            return Err(Error::InvalidConfig(format!(
                "channels {} not divisible by ca_reduction {}",
                self.channels, self.ca_reduction
            )));
        }
        if self.enable_sparse && self.channels % (self.sparse_ratio + 1) != 0 {
            return Err(Error::InvalidConfig(format!(
                "channels {} not divisible by sparse_ratio+1 = {}",
                self.channels,
                self.sparse_ratio + 1
            )));
        }
        Ok(())
    }
}

/// Spatial + channel attention over a shared conv feature, residual fused:
/// out = X + conv1x1(concat(SA(U), CA(U))), U = conv_block(X).
pub struct DenseModule<T: Scalar> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub sa_conv: Conv2d<T>,
    pub ca_down: Conv2d<T>,
    pub ca_up: Conv2d<T>,
    pub fuse: Conv2d<T>,
    channels: usize,
}

impl<T: Scalar> DenseModule<T> {
    pub fn new(cfg: &CamConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let r = cfg.ca_reduction;
        DenseModule {
            conv1: Conv2d::new(c, c, 3, 1, 1, 1, rng),
            conv2: Conv2d::new(c, c, 3, 1, 1, 1, rng),
            sa_conv: Conv2d::new(2, 1, cfg.sa_kernel, 1, cfg.sa_kernel / 2, 1, rng),
            ca_down: Conv2d::new(c, c / r, 1, 1, 0, 1, rng),
            ca_up: Conv2d::new(c / r, c, 1, 1, 0, 1, rng),
            fuse: Conv2d::new_scaled(2 * c, c, 1, 1, 0, 1, RESIDUAL_GAIN, rng),
            channels: c,
        }
    }

    fn check_channels(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().c != self.channels {
            return Err(Error::ChannelMismatch {
                ctx: "dense_module",
                expected: self.channels,
                got: x.shape().c,
            });
        }
        Ok(())
    }

    /// U ⊙ sigmoid(conv(concat(channel_avg(U), channel_max(U)))).
    pub fn spatial_attention(&self, u: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_channels(u)?;
        let stats = ops::concat_channels(&ops::channel_avg(u), &ops::channel_max(u))?;
        let gate = ops::sigmoid(&self.sa_conv.forward(&stats)?);
        ops::mul_spatial_gate(u, &gate)
    }

    /// U ⊙ sigmoid(conv1x1(relu(conv1x1(gap(U))))).
    pub fn channel_attention(&self, u: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_channels(u)?;
        let squeezed = ops::relu(&self.ca_down.forward(&ops::global_avg_pool(u))?);
        let gate = ops::sigmoid(&self.ca_up.forward(&squeezed)?);
        ops::mul_channel_gate(u, &gate)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_channels(x)?;
        let u = ops::relu(&self.conv2.forward(&ops::relu(&self.conv1.forward(x)?))?);
        let sa = self.spatial_attention(&u)?;
        let ca = self.channel_attention(&u)?;
        let fused = self.fuse.forward(&ops::concat_channels(&sa, &ca)?)?;
        ops::add(x, &fused)
    }
}

impl<T: Scalar> ParamSet<T> for DenseModule<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.sa_conv.visit_params(&format!("{prefix}.sa_conv"), f);
        self.ca_down.visit_params(&format!("{prefix}.ca_down"), f);
        self.ca_up.visit_params(&format!("{prefix}.ca_up"), f);
        self.fuse.visit_params(&format!("{prefix}.fuse"), f);
    }
}

/// Intrinsic 3×3 conv to target_out/(s+1) channels, then s cheap depthwise
/// expansions; output channels are [intrinsic | cheap_1 | … | cheap_s].
pub struct SparseModule<T: Scalar> {
    pub intrinsic: Conv2d<T>,
    pub cheap: Vec<Conv2d<T>>,
    target_out: usize,
}

impl<T: Scalar> SparseModule<T> {
    pub fn new(
        in_channels: usize,
        target_out: usize,
        cfg: &CamConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let s = cfg.sparse_ratio;
        if target_out % (s + 1) != 0 {
            return Err(Error::InvalidConfig(format!(
                "sparse target_out {target_out} not divisible by s+1 = {}",
                s + 1
            )));
        }
        let intrinsic_c = target_out / (s + 1);
        let d = cfg.cheap_kernel;
        let intrinsic = Conv2d::new_scaled(in_channels, intrinsic_c, 3, 1, 1, 1, RESIDUAL_GAIN, rng);
        let cheap = (0..s)
            .map(|_| Conv2d::new(intrinsic_c, intrinsic_c, d, 1, d / 2, intrinsic_c, rng))
            .collect();
        Ok(SparseModule { intrinsic, cheap, target_out })
    }

    pub fn out_channels(&self) -> usize {
        self.target_out
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let intrinsic = ops::relu(&self.intrinsic.forward(x)?);
        let mut out = intrinsic.clone();
        for cheap in &self.cheap {
            out = ops::concat_channels(&out, &cheap.forward(&intrinsic)?)?;
        }
        debug_assert_eq!(out.shape().c, self.target_out);
        Ok(out)
    }
}

impl<T: Scalar> ParamSet<T> for SparseModule<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.intrinsic.visit_params(&format!("{prefix}.intrinsic"), f);
        for (j, cheap) in self.cheap.iter_mut().enumerate() {
            cheap.visit_params(&format!("{prefix}.cheap{j}"), f);
        }
    }
}

pub struct CamBlock<T: Scalar> {
    pub cfg: CamConfig,
    pub dense: Option<DenseModule<T>>,
    pub sparse: Option<SparseModule<T>>,
}

impl<T: Scalar> CamBlock<T> {
    pub fn new(cfg: &CamConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let dense = cfg.enable_dense.then(|| DenseModule::new(cfg, rng));
        let sparse = if cfg.enable_sparse {
            Some(SparseModule::new(cfg.channels, cfg.channels, cfg, rng)?)
        } else {
            None
        };
        Ok(CamBlock { cfg: *cfg, dense, sparse })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().c != self.cfg.channels {
            return Err(Error::ChannelMismatch {
                ctx: "cam_block",
                expected: self.cfg.channels,
                got: x.shape().c,
            });
        }
        let dm_out = match &self.dense {
            Some(dm) => dm.forward(x)?,
            None => x.clone(),
        };
        match &self.sparse {
            // The sparse stage has no internal residual; close the pair
            // with a skip from the block input.
            Some(sm) => ops::add(x, &sm.forward(&dm_out)?),
            None => Ok(dm_out),
        }
    }
}

impl<T: Scalar> ParamSet<T> for CamBlock<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some(dm) = &mut self.dense {
            dm.visit_params(&format!("{prefix}.dense"), f);
        }
        if let Some(sm) = &mut self.sparse {
            sm.visit_params(&format!("{prefix}.sparse"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::audit_values;
    use crate::nn::collect_params;
    use crate::tensor::Shape;
    use rand::SeedableRng;

    fn cfg8() -> CamConfig {
        CamConfig {
            channels: 8,
            sparse_ratio: 3,
            sa_kernel: 7,
            ca_reduction: 4,
            cheap_kernel: 3,
            enable_dense: true,
            enable_sparse: true,
        }
    }

    fn rand_input(c: usize, hw: usize, seed: u64) -> Tensor<f64> {
        let shape = Shape::new(2, c, hw, hw);
        Tensor::from_vec(shape, audit_values(seed, shape.numel()))
    }

    #[test]
    fn zero_sa_weights_halve_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut dm = DenseModule::<f64>::new(&cfg8(), &mut rng);
        dm.sa_conv.weight = Tensor::param(dm.sa_conv.weight.shape(), vec![0.0; dm.sa_conv.weight.numel()]);
        let u = rand_input(8, 6, 2);
        let out = dm.spatial_attention(&u).unwrap();
        for (o, i) in out.data().iter().zip(u.data()) {
            assert!((o - i / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_ca_weights_halve_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut dm = DenseModule::<f64>::new(&cfg8(), &mut rng);
        dm.ca_up.weight = Tensor::param(dm.ca_up.weight.shape(), vec![0.0; dm.ca_up.weight.numel()]);
        let u = rand_input(8, 5, 3);
        let out = dm.channel_attention(&u).unwrap();
        for (o, i) in out.data().iter().zip(u.data()) {
            assert!((o - i / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gate_bounds_output() {
        // |SA(U)| ≤ |U| elementwise since the gate is in (0,1)
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dm = DenseModule::<f64>::new(&cfg8(), &mut rng);
        let u = rand_input(8, 7, 4);
        let out = dm.spatial_attention(&u).unwrap();
        for (o, i) in out.data().iter().zip(u.data()) {
            assert!(o.abs() <= i.abs() + 1e-15);
        }
    }

    #[test]
    fn zero_fuse_makes_dense_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut dm = DenseModule::<f64>::new(&cfg8(), &mut rng);
        dm.fuse.weight = Tensor::param(dm.fuse.weight.shape(), vec![0.0; dm.fuse.weight.numel()]);
        let x = rand_input(8, 6, 6);
        let out = dm.forward(&x).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn channel_attention_no_cross_batch_leakage() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dm = DenseModule::<f64>::new(&cfg8(), &mut rng);
        let a = rand_input(8, 4, 20);
        // swap the two batch entries
        let s = a.shape();
        let half = s.numel() / 2;
        let mut swapped = a.data()[half..].to_vec();
        swapped.extend_from_slice(&a.data()[..half]);
        let b = Tensor::from_vec(s, swapped);
        let (oa, ob) = (dm.channel_attention(&a).unwrap(), dm.channel_attention(&b).unwrap());
        assert_eq!(&oa.data()[..half], &ob.data()[half..]);
        assert_eq!(&oa.data()[half..], &ob.data()[..half]);
    }

    #[test]
    fn sparse_channel_accounting() {
        for (c, s) in [(4usize, 1usize), (4, 3), (8, 1), (8, 3), (16, 3), (12, 2)] {
            let cfg = CamConfig {
                channels: c,
                sparse_ratio: s,
                ca_reduction: 1,
                ..CamConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let sm = SparseModule::<f64>::new(c, c, &cfg, &mut rng).unwrap();
            let x = rand_input(c, 4, 7);
            let y = sm.forward(&x).unwrap();
            // c_out = c_intrinsic·s + c_intrinsic
            let ci = c / (s + 1);
            assert_eq!(y.shape().c, ci * s + ci);
            assert_eq!(y.shape().c, c);
        }
    }

    #[test]
    fn identity_cheap_kernels_repeat_intrinsic_block() {
        let cfg = cfg8();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sm = SparseModule::<f64>::new(8, 8, &cfg, &mut rng).unwrap();
        for cheap in &mut sm.cheap {
            let ws = cheap.weight.shape();
            let mut w = vec![0.0; ws.numel()];
            for ch in 0..ws.n {
                w[ws.idx(ch, 0, 1, 1)] = 1.0;
            }
            cheap.weight = Tensor::param(ws, w);
        }
        let x = rand_input(8, 5, 8);
        let y = sm.forward(&x).unwrap();
        let plane = 25;
        let ci = 2;
        for n in 0..2 {
            for j in 0..3 {
                for c in 0..ci {
                    let a = &y.data()[((n * 8) + c) * plane..((n * 8) + c + 1) * plane];
                    let b = &y.data()
                        [((n * 8) + ci * (j + 1) + c) * plane..((n * 8) + ci * (j + 1) + c + 1) * plane];
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn disabled_block_is_identity() {
        let cfg = CamConfig { enable_dense: false, enable_sparse: false, ..cfg8() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let blk = CamBlock::<f64>::new(&cfg, &mut rng).unwrap();
        let x = rand_input(8, 6, 9);
        let y = blk.forward(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dense_only_block_equals_dense_module() {
        let cfg = CamConfig { enable_sparse: false, ..cfg8() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let blk = CamBlock::<f64>::new(&cfg, &mut rng).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(2);
        let dm = DenseModule::<f64>::new(&cfg, &mut rng2);
        let x = rand_input(8, 6, 10);
        assert_eq!(blk.forward(&x).unwrap().data(), dm.forward(&x).unwrap().data());
    }

    #[test]
    fn block_shape_preservation() {
        let cfg = cfg8();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let blk = CamBlock::<f64>::new(&cfg, &mut rng).unwrap();
        for hw in [4usize, 6, 9] {
            let x = rand_input(8, hw, hw as u64);
            assert_eq!(blk.forward(&x).unwrap().shape(), x.shape());
        }
    }

    #[test]
    fn dense_module_fd_audit() {
        use crate::audit::check_module_gradients;
        let cfg = CamConfig { channels: 4, ca_reduction: 2, sparse_ratio: 1, ..cfg8() };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut dm = DenseModule::<f64>::new(&cfg, &mut rng);
        let x = Tensor::param(Shape::new(1, 4, 5, 5), audit_values(31, 100));
        let rep = check_module_gradients(
            "dense_module",
            &mut dm,
            &x,
            &|m, inp| ops::mean(&ops::square(&m.forward(inp).unwrap())),
            6,
        );
        assert!(rep.pass, "{rep}");
    }

    #[test]
    fn all_parameters_receive_gradients() {
        let cfg = cfg8();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut blk = CamBlock::<f64>::new(&cfg, &mut rng).unwrap();
        let x = rand_input(8, 6, 41);
        let loss = ops::mean(&ops::square(&blk.forward(&x).unwrap()));
        loss.backward().unwrap();
        for (name, t) in collect_params(&mut blk) {
            let g = t.grad().unwrap_or_else(|| panic!("{name} has no grad"));
            assert!(g.iter().any(|v| *v != 0.0), "{name} gradient all zero");
        }
    }
}
