use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Row-wise log-softmax using the max-shift for stability.
pub fn log_softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let (arg, max) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(ai, m), (i, &v)| if v > m { (i, v) } else { (ai, m) });
        // ln(1 + rest) keeps full precision for confident rows.
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != arg)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        let log_norm = rest.ln_1p();
        row.mapv_inplace(|v| (v - max) - log_norm);
    }
    out
}

pub fn softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    log_softmax_rows(logits).mapv_into(f64::exp)
}

/// Mean cross-entropy over the batch and its gradient `(softmax - onehot) / N`.
pub fn cross_entropy_loss(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    if n == 0 {
        return Err(Error::Empty("cross-entropy batch".into()));
    }
    if labels.len() != n {
        return Err(Error::dims("cross-entropy labels", n, labels.len()));
    }
    let k = logits.ncols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    let logp = log_softmax_rows(logits);
    let loss = -labels
        .iter()
        .enumerate()
        .map(|(i, &y)| logp[[i, y]])
        .sum::<f64>()
        / n as f64;
    let mut grad = logp.mapv_into(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0;
    }
    grad /= n as f64;
    Ok((loss, grad))
}

const NORM_EPS: f64 = 1e-12;

/// Batch-hard contrastive loss on L2-normalized rows.
///
/// For every anchor, the farthest same-label sample is pulled in with
/// `d^2` and the nearest other-label sample is pushed out with
/// `max(0, margin - d)^2`. The loss is the mean over anchors that have at
/// least one negative; it is zero when the batch holds a single label. The
/// returned gradient is with respect to the raw (unnormalized) rows.
pub fn contrastive_loss(
    embeddings: &ArrayView2<f64>,
    labels: &[usize],
    margin: f64,
) -> Result<(f64, Array2<f64>)> {
    if margin <= 0.0 || !margin.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "contrastive margin must be positive, got {margin}"
        )));
    }
    let n = embeddings.nrows();
    if labels.len() != n {
        return Err(Error::dims("contrastive labels", n, labels.len()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(
            "contrastive loss needs at least two samples".into(),
        ));
    }

    let norms: Vec<f64> = embeddings
        .axis_iter(Axis(0))
        .map(|r| r.dot(&r).sqrt().max(NORM_EPS))
        .collect();
    let mut unit = embeddings.to_owned();
    for (mut row, &nrm) in unit.axis_iter_mut(Axis(0)).zip(&norms) {
        row /= nrm;
    }
    let gram = unit.dot(&unit.t());
    let dist = |i: usize, j: usize| (gram[[i, i]] + gram[[j, j]] - 2.0 * gram[[i, j]]).max(0.0).sqrt();

    let mut d_unit = Array2::<f64>::zeros(unit.raw_dim());
    let mut total = 0.0;
    let mut anchors = 0usize;
    for a in 0..n {
        let mut hard_pos: Option<(usize, f64)> = None;
        let mut hard_neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist(a, j);
            if labels[j] == labels[a] {
                if hard_pos.is_none_or(|(_, best)| d > best) {
                    hard_pos = Some((j, d));
                }
            } else if hard_neg.is_none_or(|(_, best)| d < best) {
                hard_neg = Some((j, d));
            }
        }
        let Some((neg, d_neg)) = hard_neg else {
            continue;
        };
        anchors += 1;
        if let Some((pos, _)) = hard_pos {
            let diff = &unit.row(a) - &unit.row(pos);
            total += diff.dot(&diff);
            d_unit.row_mut(a).scaled_add(2.0, &diff);
            d_unit.row_mut(pos).scaled_add(-2.0, &diff);
        }
        let hinge = margin - d_neg;
        if hinge > 0.0 {
            total += hinge * hinge;
            if d_neg > NORM_EPS {
                let diff = &unit.row(a) - &unit.row(neg);
                let coef = -2.0 * hinge / d_neg;
                d_unit.row_mut(a).scaled_add(coef, &diff);
                d_unit.row_mut(neg).scaled_add(-coef, &diff);
            }
        }
    }
    if anchors == 0 {
        return Ok((0.0, Array2::zeros(embeddings.raw_dim())));
    }
    let scale = 1.0 / anchors as f64;
    d_unit *= scale;

    // Through the normalization: d e = (d u - u (u . d u)) / |e|
    let mut grad = d_unit;
    for ((mut g, u), &nrm) in grad
        .axis_iter_mut(Axis(0))
        .zip(unit.axis_iter(Axis(0)))
        .zip(&norms)
    {
        let proj = u.dot(&g);
        g.scaled_add(-proj, &u);
        g /= nrm;
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Array2::from_elem((3, 5), 0.7);
        let (loss, _) = cross_entropy_loss(&logits.view(), &[0, 3, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_near_zero_loss() {
        // -log(e^10 / (e^10 + e^-10)) = log(1 + e^-20)
        let (loss, _) = cross_entropy_loss(&array![[10.0, -10.0]].view(), &[0]).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((loss - expected).abs() < 1e-12 * expected);
        assert!((loss - 2.061_153_6e-9).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range_is_error() {
        let err = cross_entropy_loss(&Array2::zeros((1, 2)).view(), &[2]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 2, classes: 2 }));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&array![[1000.0, -5.0, 3.0], [0.1, 0.2, 0.3]].view());
        for row in p.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_class_identical_samples_zero() {
        let e = Array2::from_elem((4, 3), 0.5);
        let (loss, grad) = contrastive_loss(&e.view(), &[1, 1, 1, 1], 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn opposite_classes_beyond_margin_zero() {
        let e = array![[1.0, 0.0], [-1.0, 0.0]];
        let (loss, _) = contrastive_loss(&e.view(), &[0, 1], 1.0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn nonpositive_margin_rejected() {
        let e = array![[1.0, 0.0], [-1.0, 0.0]];
        assert!(contrastive_loss(&e.view(), &[0, 1], 0.0).is_err());
    }

    #[test]
    fn hand_evaluated_contrastive_terms() {
        // Unit vectors: a=(1,0), p=(0,1) same class, n=(1,0)... use distinct n
        // anchors 0,1 share label 0; sample 2 is label 1 at (cos 60, sin 60)
        let s = 3f64.sqrt() / 2.0;
        let e = array![[1.0, 0.0], [0.0, 1.0], [0.5, s]];
        let (loss, _) = contrastive_loss(&e.view(), &[0, 0, 1], 1.5).unwrap();
        // d01 = sqrt2, d02 = 1, d12 = sqrt(0.25 + (1-s)^2)
        let d12 = (0.25 + (1.0 - s) * (1.0 - s)).sqrt();
        let a0 = 2.0 + (1.5f64 - 1.0).powi(2);
        let a1 = 2.0 + (1.5 - d12).powi(2);
        // anchor 2 has no positive; nearest negative is sample 1
        let a2 = (1.5 - d12).powi(2);
        assert!((loss - (a0 + a1 + a2) / 3.0).abs() < 1e-12);
    }
}
