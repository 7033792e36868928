//! Central finite-difference checks of every analytic gradient.
//!
//! Each suite draws 20 random instantiations and returns the worst relative
//! error `|g - g_num| / max(|g|, |g_num|)`, measured over the whole gradient
//! vector.

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;

use horde_core::baselines::{distill_loss, fisher_importance, mas_importance, quadratic_penalty, ImportanceState, PenaltyParams};
use horde_core::nn::{contrastive_loss, cross_entropy_loss, Activation, Dense, MlpNet, MlpSpec};
use horde_core::rng::{substream, Rng};

pub const INSTANCES: u64 = 20;
const H: f64 = 1e-5;

fn uniform(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-300 {
        diff
    } else {
        diff / denom
    }
}

/// Numeric gradient of `f` at `x`.
fn numeric(x: &Array2<f64>, f: impl Fn(&ArrayView2<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + H;
        let fp = f(&probe.view());
        probe[[r, c]] = orig - H;
        let fm = f(&probe.view());
        probe[[r, c]] = orig;
        out.push((fp - fm) / (2.0 * H));
    }
    out
}

fn small_net(rng: &mut Rng, input: usize, out: usize) -> MlpNet {
    let spec = MlpSpec {
        input_dim: input,
        hidden_dims: vec![7, 5],
        embedding_dim: out,
        activation: Activation::Relu,
    };
    MlpNet::new(&spec, rng).unwrap()
}

/// Draws inputs whose ReLU pre-activations all stay clear of the kink, so a
/// central difference never straddles it.
fn smooth_input(net: &MlpNet, rng: &mut Rng, n: usize) -> Array2<f64> {
    loop {
        let x = uniform(rng, n, net.input_dim(), 1.0);
        let trace = net.forward(&x.view()).unwrap();
        let clear = net
            .layers()
            .iter()
            .zip(&trace.pre_activations)
            .filter(|(l, _)| l.activation == Activation::Relu)
            .all(|(_, z)| z.iter().all(|v| v.abs() > 1e-4));
        if clear {
            return x;
        }
    }
}

/// Numeric gradient of `loss(net)` with respect to every parameter.
fn numeric_params(net: &MlpNet, loss: impl Fn(&MlpNet) -> f64) -> Vec<f64> {
    let mut probe = net.clone();
    let mut out = Vec::new();
    for li in 0..net.layers().len() {
        let (rows, cols) = net.layers()[li].weights.values().dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = probe.layers()[li].weights.values()[[r, c]];
                probe.layers_mut()[li].weights.values_mut()[[r, c]] = orig + H;
                let fp = loss(&probe);
                probe.layers_mut()[li].weights.values_mut()[[r, c]] = orig - H;
                let fm = loss(&probe);
                probe.layers_mut()[li].weights.values_mut()[[r, c]] = orig;
                out.push((fp - fm) / (2.0 * H));
            }
        }
    }
    out
}

/// Cross-entropy with respect to logits, and through a small MLP with
/// respect to its weights.
pub fn cross_entropy() -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = substream(7, "gc-ce", i);
        let (n, k) = (rng.random_range(1..6), rng.random_range(2..7));
        let logits = uniform(&mut rng, n, k, 3.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let (_, g) = cross_entropy_loss(&logits.view(), &labels).unwrap();
        let num = numeric(&logits, |z| cross_entropy_loss(z, &labels).unwrap().0);
        worst = worst.max(rel_err(g.as_slice().unwrap(), &num));

        let mut net = small_net(&mut rng, 4, k);
        let x = smooth_input(&net, &mut rng, n);
        let trace = net.forward(&x.view()).unwrap();
        let (_, d) = cross_entropy_loss(&trace.output.view(), &labels).unwrap();
        net.zero_grad();
        net.backward(&trace, &d);
        let analytic: Vec<f64> = net.params().flat_map(|p| p.grad().iter().copied().collect::<Vec<_>>()).collect();
        let num = numeric_params(&net, |m| {
            cross_entropy_loss(&m.infer(&x.view()).unwrap().view(), &labels).unwrap().0
        });
        worst = worst.max(rel_err(&analytic, &num));
    }
    worst
}

/// Batch-hard contrastive loss with respect to unnormalized embeddings.
pub fn contrastive() -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = substream(7, "gc-contrastive", i);
        let n = rng.random_range(4..9);
        let d = rng.random_range(2..6);
        let emb = uniform(&mut rng, n, d, 1.0);
        // At least two labels so that some anchor has a negative.
        let labels: Vec<usize> = (0..n).map(|j| if j < 2 { j } else { rng.random_range(0..3) }).collect();
        let margin = rng.random_range(0.5..1.5);
        let (_, g) = contrastive_loss(&emb.view(), &labels, margin).unwrap();
        let num = numeric(&emb, |e| contrastive_loss(e, &labels, margin).unwrap().0);
        worst = worst.max(rel_err(g.as_slice().unwrap(), &num));
    }
    worst
}

/// Temperature-scaled distillation with respect to the student logits,
/// including columns beyond the teacher's (whose gradient is zero).
pub fn distillation() -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = substream(7, "gc-distill", i);
        let n = rng.random_range(1..6);
        let k = rng.random_range(2..6);
        let extra = rng.random_range(0..3);
        let student = uniform(&mut rng, n, k + extra, 3.0);
        let teacher = uniform(&mut rng, n, k, 3.0);
        let tau = rng.random_range(0.5..4.0);
        let (_, g) = distill_loss(&student.view(), &teacher.view(), tau).unwrap();
        let num = numeric(&student, |s| distill_loss(s, &teacher.view(), tau).unwrap().0);
        worst = worst.max(rel_err(g.as_slice().unwrap(), &num));
    }
    worst
}

fn penalty_error(net: &MlpNet, omega: Vec<Array2<f64>>, rng: &mut Rng) -> f64 {
    let mut state = ImportanceState::new(PenaltyParams {
        lambda: rng.random_range(0.1..100.0),
        alpha: 0.5,
    });
    state.consolidate(omega, net).unwrap();
    // Move away from the anchor so the penalty is not trivially zero.
    let mut moved = net.clone();
    for p in moved.params_mut() {
        p.values_mut().mapv_inplace(|v| v + 0.3 * (v.sin() + 0.1));
    }
    let (_, grads) = quadratic_penalty(&moved, &state).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied().collect::<Vec<_>>()).collect();
    let num = numeric_params(&moved, |m| quadratic_penalty(m, &state).unwrap().0);
    rel_err(&analytic, &num)
}

/// EWC penalty, importance from the diagonal Fisher of a small classifier.
pub fn ewc_penalty() -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = substream(7, "gc-ewc", i);
        let backbone = small_net(&mut rng, 4, 3);
        let head = Dense::glorot(3, 4, Activation::Identity, &mut rng);
        let x = uniform(&mut rng, 12, 4, 1.0);
        let labels: Vec<usize> = (0..12).map(|_| rng.random_range(0..4)).collect();
        let omega = fisher_importance(&backbone, &head, &x.view(), &labels, 4).unwrap();
        worst = worst.max(penalty_error(&backbone, omega, &mut rng));
    }
    worst
}

/// MAS penalty, importance from output-norm sensitivities.
pub fn mas_penalty() -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = substream(7, "gc-mas", i);
        let net = small_net(&mut rng, 4, 3);
        let x = uniform(&mut rng, 6, 4, 1.0);
        let omega = mas_importance(&net, &x.view()).unwrap();
        worst = worst.max(penalty_error(&net, omega, &mut rng));
    }
    worst
}

/// MAS importance on one sample equals the absolute numeric gradient of the
/// squared output norm.
pub fn mas_sensitivity() -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = substream(7, "gc-mas-sens", i);
        let net = small_net(&mut rng, 4, 3);
        let x = smooth_input(&net, &mut rng, 1);
        let omega = mas_importance(&net, &x.view()).unwrap();
        let analytic: Vec<f64> = omega.iter().flat_map(|o| o.iter().copied().collect::<Vec<_>>()).collect();
        let num: Vec<f64> = numeric_params(&net, |m| m.infer(&x.view()).unwrap().mapv(|v| v * v).sum())
            .into_iter()
            .map(f64::abs)
            .collect();
        worst = worst.max(rel_err(&analytic, &num));
    }
    worst
}
