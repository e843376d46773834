//! Finite-difference gradient audit. The oracle only ever calls forward
//! code: central differences with a fixed step, compared elementwise
//! against the recorded-tape gradient in 64-bit mode.

use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const FD_RTOL: f64 = 1e-4;

#[derive(Debug)]
pub struct AuditReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

impl std::fmt::Display for AuditReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<40} max_rel_err {:.3e} ({} elements)",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.checked
        )
    }
}

/// Compare the tape gradient of `f` w.r.t. each tensor in `leaves` against
/// central differences. `sample_stride` > 1 checks every k-th element of
/// large leaves; primitives are audited exhaustively with stride 1.
pub fn check_gradients(
    name: &str,
    leaves: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
    sample_stride: usize,
) -> AuditReport {
    for l in leaves {
        assert!(l.requires_grad(), "audit leaves must require grad");
        l.zero_grad();
    }
    let loss = f(leaves);
    assert_eq!(loss.numel(), 1, "audit target must be scalar");
    loss.backward().expect("backward");

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = leaf
            .grad()
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let base = leaf.data().to_vec();
        for i in (0..leaf.numel()).step_by(sample_stride.max(1)) {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += FD_STEP;
            minus[i] -= FD_STEP;
            let fp = eval_perturbed(leaves, li, plus, &f);
            let fm = eval_perturbed(leaves, li, minus, &f);
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let rel = (analytic[i] - fd).abs() / (fd.abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    AuditReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        checked,
        pass: max_rel <= FD_RTOL,
    }
}

fn eval_perturbed(
    leaves: &[Tensor<f64>],
    which: usize,
    data: Vec<f64>,
    f: &impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
) -> f64 {
    let alt: Vec<Tensor<f64>> = leaves
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if i == which {
                l.with_data(data.clone())
            } else {
                l.clone()
            }
        })
        .collect();
    f(&alt).item()
}

/// Audit a module end to end: the tape gradient of every parameter and of
/// the input leaf is compared against central differences obtained by
/// re-running the forward with one element nudged. `max_per_tensor` limits
/// how many elements of each tensor are probed (0 = all), evenly spread.
pub fn check_module_gradients<M: crate::nn::ParamSet<f64>>(
    name: &str,
    module: &mut M,
    input: &Tensor<f64>,
    forward: &dyn Fn(&mut M, &Tensor<f64>) -> Tensor<f64>,
    max_per_tensor: usize,
) -> AuditReport {
    assert!(input.requires_grad());
    crate::nn::zero_grads(module);
    input.zero_grad();
    let loss = forward(module, input);
    assert_eq!(loss.numel(), 1);
    loss.backward().expect("backward");

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;

    let mut probe = |analytic: &[f64], base: &[f64], idx: usize, eval: &mut dyn FnMut(Vec<f64>) -> f64| {
        let mut plus = base.to_vec();
        let mut minus = base.to_vec();
        plus[idx] += FD_STEP;
        minus[idx] -= FD_STEP;
        let fd = (eval(plus) - eval(minus)) / (2.0 * FD_STEP);
        let rel = (analytic[idx] - fd).abs() / (fd.abs() + 1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
        checked += 1;
    };

    // input leaf
    {
        let analytic = input.grad().unwrap_or_else(|| vec![0.0; input.numel()]);
        let base = input.data().to_vec();
        for idx in probe_indices(input.numel(), max_per_tensor) {
            probe(&analytic, &base, idx, &mut |data| {
                forward(module, &input.with_data(data)).item()
            });
        }
    }

    // parameters, one at a time, by swapping the perturbed tensor in
    let param_names: Vec<String> = {
        let mut names = Vec::new();
        module.visit_params("", &mut |n, _| names.push(n.to_string()));
        names
    };
    for pname in param_names {
        let (orig, analytic) = {
            let mut found = None;
            module.visit_params("", &mut |n, t| {
                if n == pname {
                    found = Some((t.clone(), t.grad()));
                }
            });
            let (t, g) = found.unwrap();
            let n = t.numel();
            (t, g.unwrap_or_else(|| vec![0.0; n]))
        };
        let base = orig.data().to_vec();
        for idx in probe_indices(orig.numel(), max_per_tensor) {
            probe(&analytic, &base, idx, &mut |data| {
                let perturbed = orig.with_data(data);
                module.visit_params("", &mut |n, t| {
                    if n == pname {
                        *t = perturbed.clone();
                    }
                });
                let v = forward(module, input).item();
                module.visit_params("", &mut |n, t| {
                    if n == pname {
                        *t = orig.clone();
                    }
                });
                v
            });
        }
    }

    AuditReport { name: name.to_string(), max_rel_err: max_rel, checked, pass: max_rel <= FD_RTOL }
}

fn probe_indices(numel: usize, max_per_tensor: usize) -> Vec<usize> {
    if max_per_tensor == 0 || numel <= max_per_tensor {
        (0..numel).collect()
    } else {
        (0..max_per_tensor)
            .map(|i| i * numel / max_per_tensor)
            .collect()
    }
}

/// Deterministic pseudo-random fill for audit inputs, offset away from the
/// kinks of relu/abs/sqrt so central differences stay valid.
pub fn audit_values(seed: u64, n: usize) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    (0..n)
        .map(|_| {
            s ^= s >> 12;
            s ^= s << 25;
            s ^= s >> 27;
            let u = (s.wrapping_mul(0x2545f4914f6cdd1d) >> 11) as f64 / (1u64 << 53) as f64;
            0.1 + 0.8 * u
        })
        .collect()
}
