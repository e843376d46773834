//! The full finite-difference audit: every differentiable op, every
//! composite block, both network structures end-to-end at 8×8, and all
//! three loss terms, in 64-bit mode. Shared by the CLI `gradcheck`
//! subcommand and the acceptance suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{tiny_config, Model, NetworkConfig, Structure};
use crate::audit::{audit_values, check_gradients, check_module_gradients, AuditReport};
use crate::cam::{CamBlock, CamConfig, DenseModule, SparseModule};
use crate::loss::{charbonnier, grad_branch_loss, pixel_grad_loss};
use crate::ops;
use crate::tensor::{Shape, Tensor};

fn leaf(seed: u64, shape: Shape) -> Tensor<f64> {
    Tensor::param(shape, audit_values(seed, shape.numel()))
}

fn cam_cfg() -> CamConfig {
    CamConfig {
        channels: 4,
        sparse_ratio: 1,
        sa_kernel: 3,
        ca_reduction: 2,
        cheap_kernel: 3,
        enable_dense: true,
        enable_sparse: true,
    }
}

/// One report per audited target; all must pass for criterion-level success.
pub fn full_audit() -> Vec<AuditReport> {
    let mut reports = Vec::new();
    let s = Shape::new(1, 2, 4, 4);
    let img = Shape::new(1, 3, 6, 6);

    // --- primitive ops, each driven to a scalar through mean ---
    let unary: Vec<(&str, Box<dyn Fn(&Tensor<f64>) -> Tensor<f64>>)> = vec![
        ("relu", Box::new(|x| ops::relu(x))),
        ("sigmoid", Box::new(|x| ops::sigmoid(x))),
        ("sqrt", Box::new(|x| ops::sqrt(x))),
        ("abs", Box::new(|x| ops::abs(x))),
        ("square", Box::new(|x| ops::square(x))),
        ("add_scalar", Box::new(|x| ops::add_scalar(x, 0.7))),
        ("mul_scalar", Box::new(|x| ops::mul_scalar(x, -1.3))),
        ("global_avg_pool", Box::new(|x| ops::global_avg_pool(x))),
        ("channel_avg", Box::new(|x| ops::channel_avg(x))),
        ("channel_max", Box::new(|x| ops::channel_max(x))),
        ("upsample2x", Box::new(|x| ops::upsample2x_nearest(x))),
        ("sum", Box::new(|x| ops::sum(x))),
        ("mean", Box::new(|x| ops::mean(x))),
    ];
    for (name, op) in unary {
        reports.push(check_gradients(
            name,
            &[leaf(1, s)],
            |l| ops::mean(&ops::square(&op(&l[0]))),
            1,
        ));
    }
    reports.push(check_gradients(
        "grad_map",
        &[leaf(2, img)],
        |l| ops::mean(&ops::square(&ops::grad_map(&l[0]))),
        1,
    ));
    let binary: Vec<(&str, Box<dyn Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>>)> = vec![
        ("add", Box::new(|a, b| ops::add(a, b).unwrap())),
        ("sub", Box::new(|a, b| ops::sub(a, b).unwrap())),
        ("mul", Box::new(|a, b| ops::mul(a, b).unwrap())),
        ("concat_channels", Box::new(|a, b| ops::concat_channels(a, b).unwrap())),
    ];
    for (name, op) in binary {
        reports.push(check_gradients(
            name,
            &[leaf(3, s), leaf(4, s)],
            |l| ops::mean(&ops::square(&op(&l[0], &l[1]))),
            1,
        ));
    }
    reports.push(check_gradients(
        "mul_spatial_gate",
        &[leaf(5, s), leaf(6, Shape::new(1, 1, 4, 4))],
        |l| ops::mean(&ops::square(&ops::mul_spatial_gate(&l[0], &l[1]).unwrap())),
        1,
    ));
    reports.push(check_gradients(
        "mul_channel_gate",
        &[leaf(7, s), leaf(8, Shape::new(1, 2, 1, 1))],
        |l| ops::mean(&ops::square(&ops::mul_channel_gate(&l[0], &l[1]).unwrap())),
        1,
    ));
    reports.push(check_gradients(
        "conv2d",
        &[
            leaf(9, Shape::new(1, 2, 5, 5)),
            leaf(10, Shape::new(3, 2, 3, 3)),
            leaf(11, Shape::new(1, 3, 1, 1)),
        ],
        |l| {
            ops::mean(&ops::square(
                &ops::conv2d(&l[0], &l[1], Some(&l[2]), 1, 1, 1).unwrap(),
            ))
        },
        1,
    ));
    reports.push(check_gradients(
        "depthwise_conv2d",
        &[leaf(12, Shape::new(1, 2, 5, 5)), leaf(13, Shape::new(2, 1, 3, 3))],
        |l| {
            ops::mean(&ops::square(
                &ops::conv2d(&l[0], &l[1], None, 1, 1, 2).unwrap(),
            ))
        },
        1,
    ));

    // --- composite blocks ---
    let cfg = cam_cfg();
    let x8 = leaf(20, Shape::new(1, 4, 8, 8));
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut dense = DenseModule::<f64>::new(&cfg, &mut rng);
    reports.push(check_module_gradients(
        "dense_module",
        &mut dense,
        &x8,
        &|m, x| ops::mean(&ops::square(&m.forward(x).unwrap())),
        2,
    ));
    let mut sparse = SparseModule::<f64>::new(4, 4, &cfg, &mut rng).unwrap();
    reports.push(check_module_gradients(
        "sparse_module",
        &mut sparse,
        &x8,
        &|m, x| ops::mean(&ops::square(&m.forward(x).unwrap())),
        2,
    ));
    let mut cam = CamBlock::<f64>::new(&cfg, &mut rng).unwrap();
    reports.push(check_module_gradients(
        "cam_block",
        &mut cam,
        &x8,
        &|m, x| ops::mean(&ops::square(&m.forward(x).unwrap())),
        2,
    ));

    // --- both structures end-to-end at 8×8, through the combined loss ---
    let img8 = leaf(21, Shape::new(1, 3, 8, 8));
    for (name, structure) in [("unet_end_to_end", Structure::Unet), ("cascade_end_to_end", Structure::Cascade)] {
        let cfg = NetworkConfig { structure, ..tiny_config() };
        let mut model = Model::<f64>::new(&cfg, 20).unwrap();
        reports.push(check_module_gradients(
            name,
            &mut model,
            &img8,
            &|m, x| {
                let (den, pg) = m.forward(x, true).unwrap();
                ops::add(
                    &ops::mean(&ops::square(&den)),
                    &ops::mean(&ops::square(&pg.unwrap())),
                )
                .unwrap()
            },
            1,
        ));
    }

    // --- the three loss terms w.r.t. their tensor inputs ---
    let clean_vals = audit_values(30, img.numel());
    let clean = Tensor::from_vec(img, clean_vals);
    // keep |denoised - clean| ≫ eps: the sqrt kink's curvature at small
    // diffs is steeper than central differences can resolve at step 1e-4
    let clean_far = Tensor::from_vec(
        img,
        clean.data().iter().map(|v| v * 0.1).collect::<Vec<f64>>(),
    );
    reports.push(check_gradients(
        "charbonnier_loss",
        &[leaf(31, img)],
        |l| charbonnier(&l[0], &clean_far, 1e-3).unwrap(),
        1,
    ));
    reports.push(check_gradients(
        "pixel_grad_loss",
        &[leaf(32, img)],
        |l| pixel_grad_loss(&l[0], &clean).unwrap(),
        1,
    ));
    reports.push(check_gradients(
        "grad_branch_loss",
        &[leaf(33, Shape::new(1, 1, 6, 6))],
        |l| grad_branch_loss(&l[0], &clean).unwrap(),
        1,
    ));
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_audit_passes() {
        let reports = full_audit();
        for r in &reports {
            assert!(r.pass, "{r}");
        }
        assert!(reports.len() >= 25, "suite should cover all ops and blocks");
    }
}
