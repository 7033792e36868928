use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{cross_entropy_loss, log_softmax_rows, softmax_rows, Dense, MlpNet};

/// Strength and online-averaging factor of a quadratic weight penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyParams {
    pub lambda: f64,
    pub alpha: f64,
}

/// Strength and temperature of logit distillation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillParams {
    pub lambda: f64,
    pub tau: f64,
}

/// Per-parameter importance and the anchor weights it protects.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceState {
    pub omega: Vec<Array2<f64>>,
    pub anchor: Vec<Array2<f64>>,
    pub params: PenaltyParams,
}

impl ImportanceState {
    pub fn new(params: PenaltyParams) -> Self {
        Self {
            omega: Vec::new(),
            anchor: Vec::new(),
            params,
        }
    }

    pub fn is_initialized(&self) -> bool {
        !self.anchor.is_empty()
    }

    /// Folds in a new importance estimate,
    /// `omega <- alpha * omega_old + (1 - alpha) * omega_new`, and re-anchors
    /// at `net`. The first estimate is taken as is.
    pub fn consolidate(&mut self, omega_new: Vec<Array2<f64>>, net: &MlpNet) -> Result<()> {
        let anchor: Vec<Array2<f64>> = net.params().map(|p| p.values().clone()).collect();
        if omega_new.len() != anchor.len() || omega_new.iter().zip(&anchor).any(|(o, a)| o.dim() != a.dim()) {
            return Err(Error::InvalidArgument("importance does not match the network".into()));
        }
        if self.omega.is_empty() {
            self.omega = omega_new;
        } else {
            let a = self.params.alpha;
            for (old, new) in self.omega.iter_mut().zip(omega_new) {
                Zip::from(old).and(&new).for_each(|o, &n| *o = a * *o + (1.0 - a) * n);
            }
        }
        self.anchor = anchor;
        Ok(())
    }
}

/// `lambda * sum(omega * (theta - theta*)^2)` over every parameter of `net`,
/// with gradient `2 * lambda * omega * (theta - theta*)`.
pub fn quadratic_penalty(net: &MlpNet, state: &ImportanceState) -> Result<(f64, Vec<Array2<f64>>)> {
    let params: Vec<&Array2<f64>> = net.params().map(|p| p.values()).collect();
    if !state.is_initialized() {
        return Ok((0.0, params.iter().map(|p| Array2::zeros(p.raw_dim())).collect()));
    }
    if params.len() != state.anchor.len() {
        return Err(Error::dims("penalty parameter count", state.anchor.len(), params.len()));
    }
    let lambda = state.params.lambda;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(params.len());
    for ((theta, star), omega) in params.iter().zip(&state.anchor).zip(&state.omega) {
        if theta.dim() != star.dim() {
            return Err(Error::InvalidArgument(format!(
                "penalty shape mismatch: {:?} vs {:?}",
                theta.dim(),
                star.dim()
            )));
        }
        let mut g = Array2::zeros(theta.raw_dim());
        Zip::from(&mut g)
            .and(*theta)
            .and(star)
            .and(omega)
            .for_each(|g, &t, &s, &o| {
                let d = t - s;
                loss += lambda * o * d * d;
                *g = 2.0 * lambda * o * d;
            });
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Copies `layers` into a network detached from any optimizer or freeze
/// state.
fn detached(mut layers: Vec<Dense>) -> Result<MlpNet> {
    for d in &mut layers {
        d.weights = crate::nn::ParamMatrix::new(d.weights.values().clone());
    }
    MlpNet::from_layers(layers)
}

fn composed(backbone: &MlpNet, head: &Dense) -> Result<MlpNet> {
    let mut layers = backbone.layers().to_vec();
    layers.push(head.clone());
    detached(layers)
}

/// Diagonal Fisher information of the backbone parameters: squared
/// mini-batch gradients of the cross-entropy on the true labels, weighted by
/// batch size and averaged over samples.
pub fn fisher_importance(
    backbone: &MlpNet,
    head: &Dense,
    inputs: &ArrayView2<f64>,
    rows: &[usize],
    batch_size: usize,
) -> Result<Vec<Array2<f64>>> {
    if inputs.nrows() == 0 {
        return Err(Error::Empty("importance data".into()));
    }
    let mut net = composed(backbone, head)?;
    let depth = backbone.layers().len();
    let mut fisher: Vec<Array2<f64>> = backbone.params().map(|p| Array2::zeros(p.values().raw_dim())).collect();
    let n = inputs.nrows();
    for start in (0..n).step_by(batch_size.max(1)) {
        let end = (start + batch_size.max(1)).min(n);
        let x = inputs.slice(s![start..end, ..]);
        let trace = net.forward(&x)?;
        let (_, d) = cross_entropy_loss(&trace.output.view(), &rows[start..end])?;
        net.zero_grad();
        net.backward(&trace, &d);
        let bs = (end - start) as f64;
        for (f, layer) in fisher.iter_mut().zip(&net.layers()[..depth]) {
            Zip::from(f).and(layer.weights.grad()).for_each(|f, &g| *f += g * g * bs);
        }
    }
    for f in &mut fisher {
        *f /= n as f64;
    }
    Ok(fisher)
}

/// Memory-aware importance: mean over samples of
/// `|d ||f(x)||^2 / d theta|` for every parameter of `net`.
pub fn mas_importance(net: &MlpNet, inputs: &ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
    if inputs.nrows() == 0 {
        return Err(Error::Empty("importance data".into()));
    }
    let mut net = detached(net.layers().to_vec())?;
    let mut omega: Vec<Array2<f64>> = net.params().map(|p| Array2::zeros(p.values().raw_dim())).collect();
    for x in inputs.axis_chunks_iter(Axis(0), 1) {
        let trace = net.forward(&x)?;
        let d = trace.output.mapv(|v| 2.0 * v);
        net.zero_grad();
        net.backward(&trace, &d);
        for (o, p) in omega.iter_mut().zip(net.params()) {
            Zip::from(o).and(p.grad()).for_each(|o, &g| *o += g.abs());
        }
    }
    for o in &mut omega {
        *o /= inputs.nrows() as f64;
    }
    Ok(omega)
}

/// MAS importance of the backbone measured on the classifier's logits.
pub fn mas_importance_classifier(backbone: &MlpNet, head: &Dense, inputs: &ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
    let net = composed(backbone, head)?;
    let mut omega = mas_importance(&net, inputs)?;
    omega.truncate(backbone.layers().len());
    Ok(omega)
}

/// `tau^2 * mean KL(p_teacher || p_student)` on temperature-softened
/// softmaxes over the teacher's columns (the first `teacher.ncols()` student
/// columns). Returns the gradient with respect to all student logits.
pub fn distill_loss(student: &ArrayView2<f64>, teacher: &ArrayView2<f64>, tau: f64) -> Result<(f64, Array2<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("distillation temperature must be positive".into()));
    }
    let (n, k) = teacher.dim();
    if student.nrows() != n || student.ncols() < k {
        return Err(Error::dims("distillation logits", k, student.ncols()));
    }
    let mut grad = Array2::zeros(student.raw_dim());
    if n == 0 || k == 0 {
        return Ok((0.0, grad));
    }
    let zs = student.slice(s![.., ..k]).mapv(|v| v / tau);
    let zt = teacher.mapv(|v| v / tau);
    let log_ps = log_softmax_rows(&zs.view());
    let log_pt = log_softmax_rows(&zt.view());
    let pt = softmax_rows(&zt.view());
    let ps = log_ps.mapv(f64::exp);
    let mut kl = 0.0;
    Zip::from(&pt).and(&log_pt).and(&log_ps).for_each(|&p, &lp, &lq| {
        if p > 0.0 {
            kl += p * (lp - lq);
        }
    });
    let loss = tau * tau * kl.max(0.0) / n as f64;
    let scale = tau / n as f64;
    Zip::from(grad.slice_mut(s![.., ..k]))
        .and(&ps)
        .and(&pt)
        .for_each(|g, &q, &p| *g = scale * (q - p));
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, MlpSpec, ParamMatrix};
    use ndarray::array;

    fn scalar_net(w: f64) -> MlpNet {
        MlpNet::from_layers(vec![Dense::new(ParamMatrix::new(array![[w, 0.0]]), Activation::Identity)]).unwrap()
    }

    #[test]
    fn scalar_penalty() {
        let net = scalar_net(2.0);
        let state = ImportanceState {
            omega: vec![array![[3.0, 0.0]]],
            anchor: vec![array![[1.0, 0.0]]],
            params: PenaltyParams { lambda: 0.5, alpha: 0.1 },
        };
        let (loss, grad) = quadratic_penalty(&net, &state).unwrap();
        assert_eq!(loss, 1.5);
        assert_eq!(grad[0], array![[3.0, 0.0]]);
    }

    #[test]
    fn penalty_zero_at_anchor() {
        let net = MlpNet::new(&MlpSpec::slim(4), &mut crate::rng::stream(0, "p")).unwrap();
        let mut state = ImportanceState::new(PenaltyParams { lambda: 3.0, alpha: 0.5 });
        let omega = net.params().map(|p| p.values().mapv(|_| 1.0)).collect();
        state.consolidate(omega, &net).unwrap();
        let (loss, grad) = quadratic_penalty(&net, &state).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn online_consolidation() {
        let net = scalar_net(1.0);
        let mut state = ImportanceState::new(PenaltyParams { lambda: 1.0, alpha: 0.25 });
        state.consolidate(vec![array![[4.0, 8.0]]], &net).unwrap();
        assert_eq!(state.omega[0], array![[4.0, 8.0]]);
        state.consolidate(vec![array![[0.0, 4.0]]], &net).unwrap();
        assert_eq!(state.omega[0], array![[1.0, 5.0]]);
        assert!(state.consolidate(vec![array![[0.0]]], &net).is_err());
    }

    #[test]
    fn mas_single_linear_neuron() {
        // y = w x + b with w = 1.5, b = 0: d(y^2)/dw = 2 w x^2, d/db = 2 w x.
        let net = scalar_net(1.5);
        let xs = array![[2.0], [-1.0]];
        let omega = mas_importance(&net, &xs.view()).unwrap();
        let w = 1.5;
        let expect_w = (2.0 * w * 4.0 + 2.0 * w * 1.0) / 2.0;
        let expect_b = (2.0 * w * 2.0_f64).abs() / 2.0 + (2.0 * w * -1.0_f64).abs() / 2.0;
        assert!((omega[0][[0, 0]] - expect_w).abs() < 1e-12);
        assert!((omega[0][[0, 1]] - expect_b).abs() < 1e-12);
    }

    #[test]
    fn mas_zero_output_gives_zero_importance() {
        let net = scalar_net(0.0);
        let omega = mas_importance(&net, &array![[1.0], [3.0]].view()).unwrap();
        assert!(omega[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fisher_is_nonnegative_and_shaped_like_backbone() {
        let mut r = crate::rng::stream(2, "f");
        let backbone = MlpNet::new(&MlpSpec::slim(4), &mut r).unwrap();
        let head = Dense::glorot(20, 3, Activation::Identity, &mut r);
        let x = ndarray::Array2::from_shape_fn((10, 4), |(i, j)| ((i * 7 + j) % 5) as f64 - 2.0);
        let rows: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let f = fisher_importance(&backbone, &head, &x.view(), &rows, 4).unwrap();
        assert_eq!(f.len(), backbone.layers().len());
        assert!(f.iter().all(|m| m.iter().all(|&v| v >= 0.0)));
        assert!(f.iter().any(|m| m.iter().any(|&v| v > 0.0)));
    }

    #[test]
    fn distillation_basics() {
        let z = array![[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]];
        let (loss, grad) = distill_loss(&z.view(), &z.view(), 2.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| g.abs() < 1e-15));
        // Extra student columns receive no gradient.
        let t = array![[2.0, 0.0], [0.0, 1.0]];
        let (loss, grad) = distill_loss(&z.view(), &t.view(), 2.0).unwrap();
        assert!(loss > 0.0);
        assert!(grad.column(2).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn high_temperature_softens_divergence() {
        let s = array![[4.0, -1.0, 0.0]];
        let t = array![[-2.0, 3.0, 1.0]];
        let kl = |tau: f64| distill_loss(&s.view(), &t.view(), tau).unwrap().0 / (tau * tau);
        assert!(kl(10.0) < kl(1.0));
        assert!(kl(1000.0) < 1e-5);
    }
}
