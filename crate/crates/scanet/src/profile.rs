//! Analytic parameter/MAC accounting over a network configuration, plus a
//! small wall-clock benchmark. Conventions (stated in every report header):
//! FLOPs = 2·MACs; bias adds, activations, pooling, attention gating, the
//! gradient-map operator, and other elementwise work count as 0 MACs.

use std::fmt;
use std::time::Instant;

use crate::arch::{Model, NetworkConfig, Structure};
use crate::cam::CamConfig;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
pub struct CostRow {
    pub name: String,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct CostReport {
    pub input_hw: (usize, usize),
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# cost model: conv MACs = Hout*Wout*Cout*(Cin/groups)*k^2; \
             flops = 2*MACs; bias/activation/pooling/elementwise and \
             resolution-independent vector layers = 0 MACs"
        )?;
        writeln!(f, "# input: 3x{}x{}", self.input_hw.0, self.input_hw.1)?;
        writeln!(f, "{:<44} {:>16} {:>12} {:>14}", "layer", "output", "params", "MACs")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<44} {:>16} {:>12} {:>14}",
                r.name,
                format!("{}x{}x{}", r.out_c, r.out_h, r.out_w),
                r.params,
                r.macs
            )?;
        }
        writeln!(
            f,
            "{:<44} {:>16} {:>12} {:>14}",
            "TOTAL",
            "",
            self.total_params(),
            self.total_macs()
        )?;
        write!(
            f,
            "total: {:.3} M params, {:.3} G MACs, {:.3} G FLOPs",
            self.total_params() as f64 / 1e6,
            self.total_macs() as f64 / 1e9,
            self.total_flops() as f64 / 1e9
        )
    }
}

struct CostWalk {
    rows: Vec<CostRow>,
}

impl CostWalk {
    fn conv(
        &mut self,
        name: String,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        h: usize,
        w: usize,
    ) -> (usize, usize) {
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let per_out = (c_in / groups) as u64 * (k * k) as u64;
        self.rows.push(CostRow {
            name,
            out_c: c_out,
            out_h: oh,
            out_w: ow,
            params: c_out as u64 * per_out + c_out as u64,
            macs: (oh * ow * c_out) as u64 * per_out,
        });
        (oh, ow)
    }

    // 1x1 conv on a pooled 1x1 map: resolution-independent, so costed at
    // 0 MACs to keep totals exactly linear in H*W (params still counted)
    fn vector_conv(&mut self, name: String, c_in: usize, c_out: usize) {
        self.rows.push(CostRow {
            name,
            out_c: c_out,
            out_h: 1,
            out_w: 1,
            params: (c_out * c_in + c_out) as u64,
            macs: 0,
        });
    }

    fn free(&mut self, name: String, c: usize, h: usize, w: usize) {
        self.rows.push(CostRow { name, out_c: c, out_h: h, out_w: w, params: 0, macs: 0 });
    }

    fn cam(&mut self, prefix: &str, cfg: &CamConfig, h: usize, w: usize) {
        let c = cfg.channels;
        if cfg.enable_dense {
            self.conv(format!("{prefix}.dense.conv1"), c, c, 3, 1, 1, 1, h, w);
            self.conv(format!("{prefix}.dense.conv2"), c, c, 3, 1, 1, 1, h, w);
            self.free(format!("{prefix}.dense.sa_pool"), 2, h, w);
            self.conv(
                format!("{prefix}.dense.sa_conv"),
                2,
                1,
                cfg.sa_kernel,
                1,
                cfg.sa_kernel / 2,
                1,
                h,
                w,
            );
            self.free(format!("{prefix}.dense.ca_gap"), c, 1, 1);
            self.vector_conv(format!("{prefix}.dense.ca_down"), c, c / cfg.ca_reduction);
            self.vector_conv(format!("{prefix}.dense.ca_up"), c / cfg.ca_reduction, c);
            self.conv(format!("{prefix}.dense.fuse"), 2 * c, c, 1, 1, 0, 1, h, w);
        }
        if cfg.enable_sparse {
            let s = cfg.sparse_ratio;
            let intrinsic = c / (s + 1);
            self.conv(format!("{prefix}.sparse.intrinsic"), c, intrinsic, 3, 1, 1, 1, h, w);
            for i in 0..s {
                self.conv(
                    format!("{prefix}.sparse.cheap{i}"),
                    intrinsic,
                    intrinsic,
                    cfg.cheap_kernel,
                    1,
                    cfg.cheap_kernel / 2,
                    intrinsic,
                    h,
                    w,
                );
            }
        }
    }

    fn grad_branch(&mut self, cfg: &NetworkConfig, h: usize, w: usize) {
        let base = cfg.base_channels;
        self.free("grad.gradient_map".into(), 1, h, w);
        self.conv("grad.head".into(), 1, base, 3, 1, 1, 1, h, w);
        for t in 0..cfg.grad_branch_blocks {
            self.conv(format!("grad.stage{t}.fuse"), 2 * base, base, 1, 1, 0, 1, h, w);
            self.cam(&format!("grad.stage{t}.cam"), &cfg.cam.with_channels(base), h, w);
        }
        self.conv("grad.out_conv".into(), base, 1, 1, 1, 0, 1, h, w);
        self.conv("grad_fuse".into(), 2 * base, base, 1, 1, 0, 1, h, w);
    }
}

/// Pure analytic walk mirroring the forward graph layer for layer.
pub fn count_costs(cfg: &NetworkConfig, input_hw: (usize, usize)) -> Result<CostReport> {
    cfg.validate()?;
    let (h, w) = input_hw;
    let div = cfg.spatial_divisor();
    if h % div != 0 || w % div != 0 {
        return Err(Error::InvalidInput(format!(
            "input {h}x{w} not divisible by {div}"
        )));
    }
    let base = cfg.base_channels;
    let mut walk = CostWalk { rows: Vec::new() };
    match cfg.structure {
        Structure::Unet => {
            let depth = cfg.num_scales - 1;
            walk.conv("pixel.head".into(), 3, base, 3, 1, 1, 1, h, w);
            let (mut ch, mut cw) = (h, w);
            for s in 0..depth {
                let c = base << s;
                for j in 0..cfg.cams_per_stage {
                    walk.cam(&format!("pixel.enc{s}.cam{j}"), &cfg.cam.with_channels(c), ch, cw);
                }
                (ch, cw) = walk.conv(
                    format!("pixel.enc{s}.down"),
                    c,
                    c * 2,
                    3,
                    2,
                    1,
                    1,
                    ch,
                    cw,
                );
            }
            for j in 0..cfg.cams_per_stage {
                walk.cam(
                    &format!("pixel.bottleneck.cam{j}"),
                    &cfg.cam.with_channels(base << depth),
                    ch,
                    cw,
                );
            }
            for (i, s) in (0..depth).rev().enumerate() {
                let c = base << s;
                (ch, cw) = (ch * 2, cw * 2);
                walk.conv(format!("pixel.dec{i}.up"), c * 2, c, 3, 1, 1, 1, ch, cw);
                walk.conv(format!("pixel.dec{i}.fuse"), 2 * c, c, 1, 1, 0, 1, ch, cw);
                for j in 0..cfg.cams_per_stage {
                    walk.cam(&format!("pixel.dec{i}.cam{j}"), &cfg.cam.with_channels(c), ch, cw);
                }
            }
            if cfg.enable_grad_branch {
                let (mut sh, mut sw) = (h >> depth, w >> depth);
                for (i, scale) in (0..cfg.num_scales).rev().enumerate() {
                    let c = base << scale;
                    walk.conv(format!("pixel.skip{i}.proj"), c, base, 1, 1, 0, 1, sh, sw);
                    let (mut uh, mut uw) = (sh, sw);
                    for k in 0..scale {
                        (uh, uw) = (uh * 2, uw * 2);
                        walk.conv(format!("pixel.skip{i}.up{k}"), base, base, 3, 1, 1, 1, uh, uw);
                    }
                    if scale > 0 {
                        (sh, sw) = (sh * 2, sw * 2);
                    }
                }
                walk.grad_branch(cfg, h, w);
            }
            walk.conv("final".into(), base, 3, 3, 1, 1, 1, h, w);
        }
        Structure::Cascade => {
            walk.conv("head".into(), 3, base, 3, 1, 1, 1, h, w);
            for i in 0..cfg.cascade_depth {
                walk.cam(&format!("block{i}"), &cfg.cam.with_channels(base), h, w);
            }
            if cfg.enable_grad_branch {
                let num_skips = cfg.num_scales.min(cfg.cascade_depth.max(1));
                for i in 0..num_skips {
                    walk.conv(format!("skipproj{i}"), base, base, 1, 1, 0, 1, h, w);
                }
                walk.grad_branch(cfg, h, w);
            }
            walk.conv("tail".into(), base, 3, 3, 1, 1, 1, h, w);
        }
    }
    Ok(CostReport { input_hw, rows: walk.rows })
}

/// MACs of a standard dense convolution, for ratio comparisons.
pub fn standard_conv_macs(c_in: usize, c_out: usize, k: usize, h: usize, w: usize) -> u64 {
    (h * w * c_out) as u64 * (c_in * k * k) as u64
}

/// MACs of the sparse module alone (intrinsic conv + s cheap depthwise maps).
pub fn sparse_module_macs(
    c_in: usize,
    target_out: usize,
    s: usize,
    d: usize,
    k: usize,
    h: usize,
    w: usize,
) -> u64 {
    let intrinsic = target_out / (s + 1);
    standard_conv_macs(c_in, intrinsic, k, h, w)
        + s as u64 * (h * w * intrinsic) as u64 * (d * d) as u64
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub median_ms: f64,
    pub mad_ms: f64,
    pub repeats: usize,
    pub macs: u64,
    pub machine: String,
}

impl fmt::Display for BenchResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "forward: {:.2} ms median ± {:.2} MAD over {} repeats | {:.3} G MACs | {:.2} GMAC/s | {}",
            self.median_ms,
            self.mad_ms,
            self.repeats,
            self.macs as f64 / 1e9,
            self.macs as f64 / 1e6 / self.median_ms,
            self.machine
        )
    }
}

fn machine_stamp() -> String {
    format!(
        "{}-{}, {} hw threads",
        std::env::consts::ARCH,
        std::env::consts::OS,
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    )
}

/// Median ± MAD wall-clock of forward-only inference; one warmup excluded.
pub fn benchmark_forward(
    cfg: &NetworkConfig,
    input_hw: (usize, usize),
    repeats: usize,
) -> Result<BenchResult> {
    if repeats < 3 {
        return Err(Error::InvalidInput("benchmark needs repeats >= 3".into()));
    }
    let macs = count_costs(cfg, input_hw)?.total_macs();
    let model = Model::<f32>::new(cfg, 0)?;
    let shape = Shape::new(1, 3, input_hw.0, input_hw.1);
    let x = Tensor::from_vec(
        shape,
        (0..shape.numel()).map(|i| (i % 251) as f32 / 251.0).collect(),
    );
    model.forward(&x, false)?;
    let mut times: Vec<f64> = (0..repeats)
        .map(|_| {
            let t0 = Instant::now();
            let _ = model.forward(&x, false);
            t0.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    let mut devs: Vec<f64> = times.iter().map(|t| (t - median).abs()).collect();
    devs.sort_by(f64::total_cmp);
    Ok(BenchResult {
        median_ms: median,
        mad_ms: devs[devs.len() / 2],
        repeats,
        macs,
        machine: machine_stamp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::tiny_config;
    use crate::nn::collect_params;

    #[test]
    fn one_by_one_conv_direct_formula() {
        let mut walk = CostWalk { rows: Vec::new() };
        walk.conv("c".into(), 1, 1, 1, 1, 0, 1, 4, 4);
        assert_eq!(walk.rows[0].macs, 16);
    }

    #[test]
    fn big_conv_formula_evaluation() {
        assert_eq!(standard_conv_macs(64, 64, 3, 256, 256), 2_415_919_104);
    }

    #[test]
    fn sparse_ratio_near_quarter() {
        let ratio = sparse_module_macs(64, 64, 3, 3, 3, 64, 64) as f64
            / standard_conv_macs(64, 64, 3, 64, 64) as f64;
        assert!((ratio - 0.2539).abs() / 0.2539 < 0.05, "ratio {ratio}");
    }

    #[test]
    fn totals_equal_row_sums() {
        let rep = count_costs(&NetworkConfig::default(), (64, 64)).unwrap();
        let macs: u64 = rep.rows.iter().map(|r| r.macs).sum();
        let params: u64 = rep.rows.iter().map(|r| r.params).sum();
        assert_eq!(rep.total_macs(), macs);
        assert_eq!(rep.total_params(), params);
        assert_eq!(rep.total_flops(), 2 * macs);
    }

    #[test]
    fn macs_scale_linearly_in_area() {
        let cfg = NetworkConfig::default();
        let small = count_costs(&cfg, (32, 32)).unwrap().total_macs();
        let big = count_costs(&cfg, (64, 64)).unwrap().total_macs();
        assert_eq!(big, 4 * small);
    }

    #[test]
    fn param_count_matches_live_model() {
        for cfg in [
            tiny_config(),
            crate::arch::NetworkConfig {
                structure: crate::arch::Structure::Cascade,
                ..tiny_config()
            },
        ] {
            let analytic = count_costs(&cfg, (16, 16)).unwrap().total_params();
            let mut model = Model::<f32>::new(&cfg, 0).unwrap();
            let live: u64 =
                collect_params(&mut model).iter().map(|(_, t)| t.numel() as u64).sum();
            assert_eq!(analytic, live, "cost walk drifted from the real model");
        }
    }

    #[test]
    fn toggles_are_macs_monotone() {
        for structure in [Structure::Unet, Structure::Cascade] {
            let mk = |dense: bool, sparse: bool, grad: bool| {
                let mut cfg = NetworkConfig { structure, ..NetworkConfig::default() };
                cfg.cam.enable_dense = dense;
                cfg.cam.enable_sparse = sparse;
                cfg.enable_grad_branch = grad;
                count_costs(&cfg, (64, 64)).unwrap().total_macs()
            };
            let baseline = mk(false, false, false);
            let dm = mk(true, false, false);
            let dm_sm = mk(true, true, false);
            let full = mk(true, true, true);
            assert!(baseline < dm && dm < dm_sm && dm_sm < full);
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        assert!(count_costs(&NetworkConfig::default(), (30, 30)).is_err());
    }

    #[test]
    fn tiny_benchmark_is_finite() {
        let mut cfg = tiny_config();
        cfg.enable_grad_branch = false;
        let b = benchmark_forward(&cfg, (16, 16), 3).unwrap();
        assert!(b.median_ms > 0.0 && b.median_ms.is_finite());
        assert!(b.macs > 0);
    }
}
