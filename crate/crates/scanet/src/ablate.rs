//! Toggle-grid experiment: per structure, switch on the dense module, the
//! sparse module, and the gradient branch in nesting order, then report
//! MACs, short-run PSNR, and forward runtime for each of the 8 rows.

use crate::arch::{NetworkConfig, Structure};
use crate::data::{synthetic_dataset, ImagePair, NoiseSpec};
use crate::error::Result;
use crate::profile::{benchmark_forward, count_costs};
use crate::train::{evaluate, train, TrainConfig};

#[derive(Clone, Debug)]
pub struct AblateRow {
    pub structure: Structure,
    pub dense: bool,
    pub sparse: bool,
    pub grad_branch: bool,
    pub macs: u64,
    pub psnr: f64,
    pub runtime_ms: f64,
}

pub const ABLATE_HEADER: &str = "structure,dense,sparse,grad_branch,macs,psnr,runtime_ms";

pub fn ablate_csv_line(r: &AblateRow) -> String {
    format!(
        "{},{},{},{},{},{:.4},{:.3}",
        match r.structure {
            Structure::Unet => "unet",
            Structure::Cascade => "cascade",
        },
        r.dense as u8,
        r.sparse as u8,
        r.grad_branch as u8,
        r.macs,
        r.psnr,
        r.runtime_ms
    )
}

/// The nesting mirrors the usual ablation-table layout: baseline, +DM,
/// +DM+SM, +DM+SM+grad-branch, per structure.
pub fn grid(base: &NetworkConfig) -> Vec<NetworkConfig> {
    let mut out = Vec::new();
    for structure in [Structure::Unet, Structure::Cascade] {
        for (dense, sparse, grad) in [
            (false, false, false),
            (true, false, false),
            (true, true, false),
            (true, true, true),
        ] {
            let mut cfg = NetworkConfig { structure, ..*base };
            cfg.cam.enable_dense = dense;
            cfg.cam.enable_sparse = sparse;
            cfg.enable_grad_branch = grad;
            out.push(cfg);
        }
    }
    out
}

/// Train each grid row briefly on shared synthetic data and score it on
/// held-out pairs. `macs_hw` sizes the cost report; `steps` caps training.
pub fn run(
    base: &NetworkConfig,
    tc: &TrainConfig,
    steps: u64,
    macs_hw: (usize, usize),
    train_hw: usize,
    mut progress: Option<&mut dyn FnMut(&AblateRow)>,
) -> Result<Vec<AblateRow>> {
    let spec = NoiseSpec::gaussian(25.0 / 255.0, tc.seed);
    let train_set = synthetic_dataset(12, train_hw, &spec, tc.seed);
    let held_out: Vec<ImagePair> = synthetic_dataset(4, train_hw, &spec, tc.seed + 9001);
    let mut rows = Vec::new();
    for cfg in grid(base) {
        let macs = count_costs(&cfg, macs_hw)?.total_macs();
        let outcome = train(&cfg, tc, &train_set, None, steps, None)?;
        let evals = evaluate(&outcome.model, &held_out)?;
        let psnr = evals.iter().map(|r| r.psnr).sum::<f64>() / evals.len() as f64;
        let bench = benchmark_forward(&cfg, macs_hw, 3)?;
        let row = AblateRow {
            structure: cfg.structure,
            dense: cfg.cam.enable_dense,
            sparse: cfg.cam.enable_sparse,
            grad_branch: cfg.enable_grad_branch,
            macs,
            psnr,
            runtime_ms: bench.median_ms,
        };
        if let Some(cb) = progress.as_mut() {
            cb(&row);
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::tiny_config;

    #[test]
    fn grid_has_eight_nested_rows() {
        let rows = grid(&NetworkConfig::default());
        assert_eq!(rows.len(), 8);
        for chunk in rows.chunks(4) {
            assert!(chunk.iter().all(|c| c.structure == chunk[0].structure));
            let toggles: Vec<(bool, bool, bool)> = chunk
                .iter()
                .map(|c| (c.cam.enable_dense, c.cam.enable_sparse, c.enable_grad_branch))
                .collect();
            assert_eq!(
                toggles,
                [
                    (false, false, false),
                    (true, false, false),
                    (true, true, false),
                    (true, true, true)
                ]
            );
        }
    }

    #[test]
    fn tiny_run_is_macs_monotone() {
        let base = tiny_config();
        let tc = TrainConfig { epochs: 1, batch_size: 2, crop: 8, seed: 1, ..TrainConfig::desk() };
        let rows = run(&base, &tc, 2, (16, 16), 16, None).unwrap();
        assert_eq!(rows.len(), 8);
        for chunk in rows.chunks(4) {
            for pair in chunk.windows(2) {
                assert!(pair[0].macs < pair[1].macs, "MACs must grow with each toggle");
            }
            assert!(chunk.iter().all(|r| r.psnr.is_finite() && r.runtime_ms > 0.0));
        }
    }
}
