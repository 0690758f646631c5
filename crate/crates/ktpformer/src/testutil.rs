//! Test-only helpers: seeded random tensors and the central-difference
//! gradient oracle used to audit every backward rule.

use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub(crate) const FD_STEP: f64 = 1e-6;

/// Audit analytic gradients against central finite differences.
///
/// `build` must construct the same scalar loss from the given leaves each
/// time it is called; it runs once for the analytic pass and twice per
/// perturbed element. An element passes if the absolute difference is below
/// 1e-8 (pure finite-difference noise) or the relative error is below `tol`.
pub(crate) fn fd_check<F>(build: F, inputs: &[Tensor], tol: f64)
where
    F: Fn(&mut Tape, &[VarId]) -> VarId,
{
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    assert_eq!(tape.value(loss).numel(), 1, "fd_check needs a scalar loss");
    tape.backward(loss).unwrap();
    let grads: Vec<Tensor> = ids.iter().map(|&id| tape.grad(id)).collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<VarId> = xs.iter().map(|x| t.param(x.clone())).collect();
        let l = build(&mut t, &ids);
        t.value(l).data()[0]
    };

    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let an = grads[i].data()[e];
            let abs = (an - fd).abs();
            let denom = an.abs().max(fd.abs());
            assert!(
                abs <= 1e-8 || abs / denom < tol,
                "gradient mismatch at input {i} element {e}: analytic {an}, finite-diff {fd}"
            );
        }
    }
}
