//! Central finite-difference gradient checking.
//!
//! The oracle only ever evaluates the forward pass, so it stays independent of
//! every backward rule it checks.

use super::{accumulate_grads, zero_grads, Graph, Module, Result, Rng, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Samples replaced because `θ ± h` landed on different smooth pieces.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps parameters whose true
/// gradient is zero from dividing rounding noise by zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` (gradients laid out like `module.params()`) with
/// central differences of `loss` over up to `samples` randomly chosen scalar
/// parameters.
pub fn check_module<M, F>(
    module: &mut M,
    analytic: &[Vec<f64>],
    mut loss: F,
    samples: usize,
    step: f64,
    rng: &mut Rng,
) -> GradCheckReport
where
    M: Module<f64>,
    F: FnMut(&M) -> f64,
{
    check_pieces(module, analytic, |m| (loss(m), Vec::new()), samples, step, rng)
}

/// Like [`check_module`], but `loss` also returns the tape's kink pattern.
/// A central difference whose endpoints sit on another piece than `θ` is
/// not a derivative estimate, so that parameter is swapped for a fresh draw.
fn check_pieces<M, F>(
    module: &mut M,
    analytic: &[Vec<f64>],
    mut loss: F,
    samples: usize,
    step: f64,
    rng: &mut Rng,
) -> GradCheckReport
where
    M: Module<f64>,
    F: FnMut(&M) -> (f64, Vec<bool>),
{
    let names: Vec<String> = module.params().into_iter().map(|(n, _)| n).collect();
    let sizes: Vec<usize> = module.params().iter().map(|(_, t)| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let exhaustive = total <= samples;
    let mut report = GradCheckReport {
        checked: 0,
        skipped_kinks: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
    };
    let (_, base) = loss(module);
    let mut attempts = 0;
    while report.checked < samples.min(total) && attempts < 20 * samples.max(1) {
        let flat = if exhaustive { attempts } else { rng.below(total) };
        attempts += 1;
        if exhaustive && flat >= total {
            break;
        }
        let (mut tensor, mut offset) = (0, flat);
        while offset >= sizes[tensor] {
            offset -= sizes[tensor];
            tensor += 1;
        }
        let original = module.params()[tensor].1.data()[offset];
        set(module, tensor, offset, original + step);
        let (plus, plus_kinks) = loss(module);
        set(module, tensor, offset, original - step);
        let (minus, minus_kinks) = loss(module);
        set(module, tensor, offset, original);
        if plus_kinks != base || minus_kinks != base {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[tensor][offset], numeric, 1e-6);
        report.checked += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = format!(
                "{}[{offset}] analytic {} numeric {numeric}",
                names[tensor], analytic[tensor][offset]
            );
        }
    }
    report
}

fn set<M: Module<f64>>(module: &mut M, tensor: usize, offset: usize, value: f64) {
    module.params_mut()[tensor].data_mut()[offset] = value;
}

/// Gradients currently stored on the module's parameters (zeros if absent).
pub fn collect_grads<M: Module<f64>>(module: &M) -> Vec<Vec<f64>> {
    module
        .params()
        .iter()
        .map(|(_, t)| t.grad.clone().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect()
}

/// Random tensor with entries in `[-scale, scale]`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-scale, scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Full gradient check of a network. The scalar loss is a fixed random
/// projection `sum(P ⊙ f(θ))` of the network output, so every output element
/// contributes. Gradients come from one backward pass on a training graph;
/// the numeric side re-runs `forward` on inference graphs and skips samples
/// that cross a `relu` or `minimum` boundary.
pub fn check_network<M, F>(module: &mut M, forward: F, samples: usize, step: f64, rng: &mut Rng) -> GradCheckReport
where
    M: Module<f64>,
    F: Fn(&M, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = forward(module, &mut g).expect("forward pass");
    // Scaled so the loss stays O(1) and rounding noise in the differences
    // stays far below the tolerance.
    let scale = 1.0 / (g.value(out).numel() as f64).sqrt();
    let proj = random_tensor(g.shape(out), scale, rng);
    let p = g.constant(proj.clone());
    let prod = g.mul(out, p).expect("same shape");
    let loss = g.sum(prod);
    g.backward(loss).expect("backward pass");
    zero_grads(module);
    accumulate_grads(module, &g);
    let analytic = collect_grads(module);
    let objective = |m: &M| {
        let mut g = Graph::inference();
        let out = forward(m, &mut g).expect("forward pass");
        let value = g.value(out).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum::<f64>();
        (value, g.kink_pattern())
    };
    check_pieces(module, &analytic, objective, samples, step, rng)
}
