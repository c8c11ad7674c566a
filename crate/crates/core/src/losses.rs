//! Objectives with analytic gradients: triplet hinge, Wasserstein critic and
//! generator terms, softmax cross-entropy, and the margin ladder.

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Added under the square root of every Euclidean distance.
pub const DISTANCE_EPS: f64 = 1e-12;

/// `sqrt(||a - b||^2 + DISTANCE_EPS)`.
pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), actual: b.len() });
    }
    Ok(stable_distance(a, b))
}

#[inline]
fn stable_distance(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq + DISTANCE_EPS).sqrt()
}

/// Anchor/positive/negative rows with the labels they were drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub anchors: Matrix,
    pub positives: Matrix,
    pub negatives: Matrix,
    pub labels: Vec<TripletLabels>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletLabels {
    pub anchor: Label,
    pub positive: Label,
    pub negative: Label,
}

impl TripletLabels {
    /// Same identity and different view for the positive, different identity for the negative.
    pub fn is_valid(&self) -> bool {
        self.anchor.identity == self.positive.identity
            && self.anchor.view != self.positive.view
            && self.negative.identity != self.anchor.identity
    }
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.anchors.rows();
        let dim = self.anchors.cols();
        for m in [&self.positives, &self.negatives] {
            if m.rows() != n || m.cols() != dim {
                return Err(Error::shape("triplet roles have different shapes"));
            }
        }
        if self.labels.len() != n {
            return Err(Error::LengthMismatch { expected: n, actual: self.labels.len() });
        }
        if let Some(i) = self.labels.iter().position(|l| !l.is_valid()) {
            return Err(Error::invalid(format!("triplet {i} violates the identity/view constraints")));
        }
        Ok(())
    }

    /// All rows stacked as `[anchors; positives; negatives]`.
    pub fn stacked(&self) -> Matrix {
        Matrix::vstack(&[&self.anchors, &self.positives, &self.negatives]).expect("roles share a width")
    }

    /// Rebuilds a batch from rows stacked as by [`TripletBatch::stacked`].
    pub fn from_stacked(stacked: &Matrix, labels: Vec<TripletLabels>) -> Result<Self> {
        let n = labels.len();
        if stacked.rows() != 3 * n {
            return Err(Error::LengthMismatch { expected: 3 * n, actual: stacked.rows() });
        }
        Ok(Self {
            anchors: stacked.slice_rows(0, n),
            positives: stacked.slice_rows(n, 2 * n),
            negatives: stacked.slice_rows(2 * n, 3 * n),
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub per_triplet: Vec<f64>,
    pub active: usize,
    pub grad_anchors: Matrix,
    pub grad_positives: Matrix,
    pub grad_negatives: Matrix,
}

impl TripletLoss {
    /// Gradients stacked in the same order as [`TripletBatch::stacked`].
    pub fn stacked_grad(&self) -> Matrix {
        Matrix::vstack(&[&self.grad_anchors, &self.grad_positives, &self.grad_negatives]).expect("equal widths")
    }
}

/// Mean hinge `max(d(a,p) - d(a,n) + alpha, 0)` over the batch.
///
/// Triplets exactly at the hinge are treated as inactive and contribute no gradient.
pub fn triplet_loss(batch: &TripletBatch, alpha: f64) -> Result<TripletLoss> {
    let n = batch.anchors.rows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let dim = batch.anchors.cols();
    if batch.positives.rows() != n || batch.negatives.rows() != n || batch.positives.cols() != dim || batch.negatives.cols() != dim {
        return Err(Error::shape("triplet roles have different shapes"));
    }
    let inv_n = 1.0 / n as f64;
    let mut out = TripletLoss {
        loss: 0.0,
        per_triplet: Vec::with_capacity(n),
        active: 0,
        grad_anchors: Matrix::zeros(n, dim),
        grad_positives: Matrix::zeros(n, dim),
        grad_negatives: Matrix::zeros(n, dim),
    };
    for i in 0..n {
        let (a, p, q) = (batch.anchors.row(i), batch.positives.row(i), batch.negatives.row(i));
        let dp = stable_distance(a, p);
        let dn = stable_distance(a, q);
        let hinge = dp - dn + alpha;
        if hinge <= 0.0 {
            out.per_triplet.push(0.0);
            continue;
        }
        out.per_triplet.push(hinge);
        out.loss += hinge * inv_n;
        out.active += 1;
        let (sp, sn) = (inv_n / dp, inv_n / dn);
        let ga = out.grad_anchors.row_mut(i);
        for j in 0..dim {
            ga[j] = (a[j] - p[j]) * sp - (a[j] - q[j]) * sn;
        }
        let gp = out.grad_positives.row_mut(i);
        for j in 0..dim {
            gp[j] = -(a[j] - p[j]) * sp;
        }
        let gn = out.grad_negatives.row_mut(i);
        for j in 0..dim {
            gn[j] = (a[j] - q[j]) * sn;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticObjective {
    /// `mean(real) - mean(fake)`, the quantity the critic maximizes.
    pub value: f64,
    pub grad_real: Vec<f64>,
    pub grad_fake: Vec<f64>,
}

/// Wasserstein estimate from critic scores; gradients are of `value` itself
/// (the critic descends on its negation).
pub fn critic_objective(real_scores: &[f64], fake_scores: &[f64]) -> Result<CriticObjective> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (nr, nf) = (real_scores.len() as f64, fake_scores.len() as f64);
    let value = real_scores.iter().sum::<f64>() / nr - fake_scores.iter().sum::<f64>() / nf;
    Ok(CriticObjective {
        value,
        grad_real: vec![1.0 / nr; real_scores.len()],
        grad_fake: vec![-1.0 / nf; fake_scores.len()],
    })
}

/// `-mean(fake)`: minimizing it raises the critic's scores of generated features.
pub fn generator_objective(fake_scores: &[f64]) -> Result<(f64, Vec<f64>)> {
    if fake_scores.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = fake_scores.len() as f64;
    Ok((-fake_scores.iter().sum::<f64>() / n, vec![-1.0 / n; fake_scores.len()]))
}

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / n`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch { expected: n, actual: labels.len() });
    }
    let classes = logits.cols();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, classes);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += (log_z - row[y]) * inv_n;
        let g = grad.row_mut(i);
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = (row[k] - log_z).exp() * inv_n;
        }
        g[y] -= inv_n;
    }
    Ok((loss, grad))
}

/// Fraction of rows whose arg-max equals the label (first maximum wins).
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if logits.rows() == 0 {
        return 0.0;
    }
    let hits = logits
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().fold(0, |b, (k, v)| if *v > row[b] { k } else { b });
            best == y
        })
        .count();
    hits as f64 / logits.rows() as f64
}

/// Step schedule of triplet margins: `(start_iteration, margin)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginSchedule {
    ladder: Vec<(u64, f64)>,
}

impl MarginSchedule {
    pub fn new(ladder: Vec<(u64, f64)>) -> Result<Self> {
        match ladder.first() {
            Some((0, _)) => {}
            _ => return Err(Error::invalid("margin ladder must start at iteration 0")),
        }
        if ladder.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid("margin ladder iterations must be strictly increasing"));
        }
        if ladder.iter().any(|&(_, m)| !(m > 0.0 && m.is_finite())) {
            return Err(Error::invalid("margins must be positive"));
        }
        Ok(Self { ladder })
    }

    pub fn constant(margin: f64) -> Result<Self> {
        Self::new(vec![(0, margin)])
    }

    /// 6000 iterations: 0.2, then 0.3 at 1000, 0.4 at 2500, 0.5 at 4000.
    pub fn cuhk03() -> Self {
        Self { ladder: vec![(0, 0.2), (1000, 0.3), (2500, 0.4), (4000, 0.5)] }
    }

    /// 8000 iterations: 0.2, then 0.3 at 1000, 0.4 at 4000.
    pub fn market1501() -> Self {
        Self { ladder: vec![(0, 0.2), (1000, 0.3), (4000, 0.4)] }
    }

    /// 8000 iterations: 0.2, then 0.3 at 2000, 0.4 at 5000.
    pub fn duke_mtmc() -> Self {
        Self { ladder: vec![(0, 0.2), (2000, 0.3), (5000, 0.4)] }
    }

    /// Rescales step positions from a run of `from_total` iterations to `to_total`.
    pub fn rescaled(&self, from_total: u64, to_total: u64) -> Result<Self> {
        if from_total == 0 {
            return Err(Error::invalid("cannot rescale from a zero-length run"));
        }
        let mut ladder: Vec<(u64, f64)> = Vec::with_capacity(self.ladder.len());
        for &(start, margin) in &self.ladder {
            let s = ((start as u128 * to_total as u128) / from_total as u128) as u64;
            match ladder.last_mut() {
                Some(last) if last.0 == s => last.1 = margin,
                _ => ladder.push((s, margin)),
            }
        }
        Self::new(ladder)
    }

    pub fn ladder(&self) -> &[(u64, f64)] {
        &self.ladder
    }

    /// Margin of the last step starting at or before `iteration`.
    pub fn margin_at(&self, iteration: u64) -> f64 {
        self.ladder.iter().take_while(|(s, _)| *s <= iteration).last().map(|&(_, m)| m).expect("ladder starts at 0")
    }
}

/// Free-function form of [`MarginSchedule::margin_at`].
pub fn margin_at(schedule: &MarginSchedule, iteration: u64) -> f64 {
    schedule.margin_at(iteration)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lbl(identity: u32, view: u16) -> Label {
        Label { identity, view }
    }

    /// One-dimensional triplet with the requested distances.
    fn line_triplet(dp: f64, dn: f64) -> TripletBatch {
        TripletBatch {
            anchors: Matrix::from_rows(&[[0.0]]).unwrap(),
            positives: Matrix::from_rows(&[[dp]]).unwrap(),
            negatives: Matrix::from_rows(&[[-dn]]).unwrap(),
            labels: vec![TripletLabels { anchor: lbl(0, 0), positive: lbl(0, 1), negative: lbl(1, 0) }],
        }
    }

    #[test]
    fn distances() {
        assert!((euclidean(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 5.0).abs() < 1e-12);
        assert!(euclidean(&[1.0, 2.0], &[1.0, 2.0]).unwrap() < 1.1e-6);
        let a = crate::codespace::normalize_uniform(&crate::codespace::BinaryCode::from_bits(&[1, 0, 1, 1]).unwrap(), 1.0).unwrap();
        let b = crate::codespace::normalize_uniform(&crate::codespace::BinaryCode::from_bits(&[0, 0, 1, 0]).unwrap(), 1.0).unwrap();
        assert!((euclidean(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-9);
        assert!(euclidean(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn triplet_examples() {
        let l = triplet_loss(&line_triplet(0.2, 0.5), 0.2).unwrap();
        assert_eq!(l.loss, 0.0);
        assert_eq!(l.active, 0);
        assert!(l.grad_anchors.as_slice().iter().all(|&g| g == 0.0));

        let l = triplet_loss(&line_triplet(0.5, 0.4), 0.3).unwrap();
        assert!((l.loss - 0.4).abs() < 1e-9);
        assert_eq!(l.active, 1);
    }

    #[test]
    fn triplet_hinge_point_is_inactive() {
        let l = triplet_loss(&line_triplet(0.25, 0.5), 0.25).unwrap();
        assert!(l.loss.abs() < 1e-9);
    }

    #[test]
    fn triplet_label_validation() {
        let mut b = line_triplet(0.1, 0.2);
        assert!(b.validate().is_ok());
        b.labels[0].positive.view = 0;
        assert!(b.validate().is_err());
    }

    #[test]
    fn critic_and_generator_examples() {
        let c = critic_objective(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(c.value, 1.0);
        assert_eq!(c.grad_real, vec![0.5, 0.5]);
        assert_eq!(c.grad_fake, vec![-0.5, -0.5]);
        assert_eq!(critic_objective(&[0.3; 3], &[0.3; 5]).unwrap().value, 0.0);
        let swapped = critic_objective(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(swapped.value, -1.0);
        assert!(critic_objective(&[], &[1.0]).is_err());

        let (v, g) = generator_objective(&[0.5]).unwrap();
        assert_eq!((v, g), (-0.5, vec![-1.0]));
        let (v1, g1) = generator_objective(&[0.1, 0.4, -0.2]).unwrap();
        let (v2, g2) = generator_objective(&[1.1, 1.4, 0.8]).unwrap();
        assert!((v1 - v2 - 1.0).abs() < 1e-12);
        assert_eq!(g1, g2);
        assert!(generator_objective(&[]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy(&Matrix::zeros(1, 4), &[2]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let logits = Matrix::from_rows(&[[0.0, 60.0, 0.0]]).unwrap();
        assert!(cross_entropy(&logits, &[1]).unwrap().0 < 1e-20);
        assert!(matches!(cross_entropy(&logits, &[3]), Err(Error::LabelOutOfRange { .. })));
        assert_eq!(accuracy(&logits, &[1]), 1.0);
    }

    #[test]
    fn margin_ladders() {
        let s = MarginSchedule::cuhk03();
        assert_eq!(s.margin_at(0), 0.2);
        assert_eq!(s.margin_at(999), 0.2);
        assert_eq!(s.margin_at(1000), 0.3);
        assert_eq!(s.margin_at(2500), 0.4);
        assert_eq!(s.margin_at(5999), 0.5);
        for ladder in [MarginSchedule::cuhk03(), MarginSchedule::market1501(), MarginSchedule::duke_mtmc()] {
            let mut prev = 0.0;
            for it in (0..9000).step_by(50) {
                let m = margin_at(&ladder, it);
                assert!(m >= prev);
                prev = m;
            }
        }
        let scaled = MarginSchedule::cuhk03().rescaled(6000, 2000).unwrap();
        assert_eq!(scaled.ladder(), &[(0, 0.2), (333, 0.3), (833, 0.4), (1333, 0.5)]);
        assert!(MarginSchedule::new(vec![(5, 0.2)]).is_err());
        assert!(MarginSchedule::new(vec![(0, 0.2), (0, 0.3)]).is_err());
    }
}
