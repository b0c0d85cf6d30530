//! Unlearning objectives.
//!
//! All terms take the unlearned-path quantities as tape nodes and the
//! reference-path quantities (adapters disabled) as plain matrices, so no
//! gradient can reach the reference path.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::linalg::{self, Matrix};
use crate::model::{ModelError, ToyModel};
use crate::world::Sample;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("negative queue is empty")]
    EmptyQueue,
    #[error("anchor needs a non-empty retain batch")]
    UndefinedAnchor,
    #[error("{0} batch is empty")]
    EmptyBatch(&'static str),
    #[error("vector length {found} does not match {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid loss weights: {0}")]
    Weights(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the push term inside the forgetting objective.
    pub lambda: f64,
    /// Weight of the whole forgetting objective.
    pub alpha: f64,
    /// Weight of the retention term.
    pub beta: f64,
    /// Similarity temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 1.0,
            beta: 1.0,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(LossError::Weights(format!("tau must be > 0, got {}", self.tau)));
        }
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(LossError::Weights(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which term pushes forget-sample IVRs away from their reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PushKind {
    Contrastive,
    NegativeMse,
}

/// FIFO of unit-norm reference IVRs used as negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Normalizes and appends `z`, evicting the oldest entry when full.
    pub fn enqueue(&mut self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim {
            return Err(LossError::Dimension {
                expected: self.dim,
                found: z.len(),
            });
        }
        let n = linalg::vec_norm(z).max(crate::autodiff::NORM_EPS);
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(z.iter().map(|v| v / n).collect());
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Entries stacked as rows, oldest first.
    pub fn as_matrix(&self) -> Result<Matrix> {
        if self.entries.is_empty() {
            return Err(LossError::EmptyQueue);
        }
        let mut data = Vec::with_capacity(self.entries.len() * self.dim);
        for e in &self.entries {
            data.extend_from_slice(e);
        }
        Ok(Matrix::from_vec(self.entries.len(), self.dim, data))
    }
}

/// Mean of the reference pooled IVRs over the current retain batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub p: Matrix,
}

impl Anchor {
    pub fn from_reference(pooled: &[Matrix]) -> Result<Self> {
        let first = pooled.first().ok_or(LossError::UndefinedAnchor)?;
        let mut p = Matrix::zeros(1, first.cols());
        for z in pooled {
            p.axpy(1.0 / pooled.len() as f64, z)
                .map_err(AutodiffError::from)?;
        }
        Ok(Self { p })
    }
}

fn normalized(v: &Matrix) -> Matrix {
    let n = linalg::vec_norm(v.data()).max(crate::autodiff::NORM_EPS);
    v.scale(1.0 / n)
}

/// Contrastive push: `−log Σₖ e^{s_uk} / (e^{s_ur} + Σₖ e^{s_uk})`, with
/// `s = cos(·,·)/τ` and the queue entries as the `k`.
pub fn cvf_push_loss(
    tape: &mut Tape,
    z_u: NodeId,
    z_r: &Matrix,
    queue: &NegativeQueue,
    tau: f64,
) -> Result<NodeId> {
    let negatives = queue.as_matrix()?;
    let zu_bar = tape.l2_normalize(z_u);
    let zr_bar = tape.constant(normalized(z_r));
    let k = tape.constant(negatives);
    let s_ur = tape.matmul_nt(zu_bar, zr_bar)?;
    let s_ur = tape.scale(s_ur, 1.0 / tau);
    let s_neg = tape.matmul_nt(zu_bar, k)?;
    let s_neg = tape.scale(s_neg, 1.0 / tau);
    let all = tape.concat_cols(s_ur, s_neg)?;
    let lse_all = tape.log_sum_exp(all);
    let lse_neg = tape.log_sum_exp(s_neg);
    Ok(tape.sub(lse_all, lse_neg)?)
}

/// `1 − cos(z_u, p)`.
pub fn cvf_pull_loss(tape: &mut Tape, z_u: NodeId, anchor: &Anchor) -> Result<NodeId> {
    let p = tape.constant(anchor.p.clone());
    let c = tape.cosine(z_u, p)?;
    let one = tape.constant(Matrix::filled(1, 1, 1.0));
    Ok(tape.sub(one, c)?)
}

/// `−‖z_u − z_r‖²`.
pub fn nmse_loss(tape: &mut Tape, z_u: NodeId, z_r: &Matrix) -> Result<NodeId> {
    let r = tape.constant(z_r.clone());
    let diff = tape.sub(z_u, r)?;
    let sq = tape.frobenius_sq(diff);
    Ok(tape.scale(sq, -1.0))
}

/// Token-wise mean squared error `‖H_u − H_r‖²_F / N`, `N` = token rows.
pub fn ret_loss(tape: &mut Tape, h_u: NodeId, h_r: &Matrix) -> Result<NodeId> {
    let r = tape.constant(h_r.clone());
    let diff = tape.sub(h_u, r)?;
    let sq = tape.frobenius_sq(diff);
    Ok(tape.scale(sq, 1.0 / h_r.rows() as f64))
}

/// Negative log-likelihood of the ground-truth answer.
pub fn gum_loss(tape: &mut Tape, logits: NodeId, answer_id: usize) -> Result<NodeId> {
    Ok(tape.softmax_cross_entropy(logits, answer_id)?)
}

/// Reference-path IVRs of one sample.
#[derive(Clone, Debug)]
pub struct ReferenceIvr {
    pub h: Matrix,
    pub z: Matrix,
}

pub fn reference_ivr(model: &ToyModel, sample: &Sample) -> Result<ReferenceIvr> {
    let image = sample.image.as_ref().ok_or(ModelError::MissingImage)?;
    let (h, z) = model.extract_ivr(image, false)?;
    Ok(ReferenceIvr { h, z })
}

/// Scalar values of the loss terms for one step (batch means).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub push: f64,
    pub pull: f64,
    pub ret: f64,
    pub gum: f64,
    pub total: f64,
}

/// The total objective on a tape, plus what the caller needs afterwards.
pub struct TotalLoss {
    pub node: NodeId,
    pub breakdown: LossBreakdown,
    /// Reference pooled IVRs of the forget batch, to be enqueued after the step.
    pub forget_reference: Vec<Matrix>,
    /// Reference pooled IVRs of the retain batch.
    pub retain_reference: Vec<Matrix>,
}

/// `α(λ·push + pull) + β·RET + GUM`, each term averaged over its batch.
///
/// Forget samples contribute push and pull; retain samples contribute RET and
/// GUM and define the anchor. When the queue is empty it is first seeded with
/// the retain batch's reference IVRs.
pub fn total_loss(
    tape: &mut Tape,
    model: &ToyModel,
    forget_batch: &[&Sample],
    retain_batch: &[&Sample],
    queue: &mut NegativeQueue,
    weights: &LossWeights,
    push_kind: PushKind,
) -> Result<TotalLoss> {
    if forget_batch.is_empty() {
        return Err(LossError::EmptyBatch("forget"));
    }
    if retain_batch.is_empty() {
        return Err(LossError::EmptyBatch("retain"));
    }
    let retain_ref: Vec<ReferenceIvr> = retain_batch
        .iter()
        .map(|s| reference_ivr(model, s))
        .collect::<Result<_>>()?;
    let forget_ref: Vec<ReferenceIvr> = forget_batch
        .iter()
        .map(|s| reference_ivr(model, s))
        .collect::<Result<_>>()?;
    let anchor = Anchor::from_reference(&retain_ref.iter().map(|r| r.z.clone()).collect::<Vec<_>>())?;
    if queue.is_empty() {
        for r in &retain_ref {
            queue.enqueue(r.z.data())?;
        }
    }

    let nf = forget_batch.len() as f64;
    let nr = retain_batch.len() as f64;
    let mut push_terms = Vec::with_capacity(forget_batch.len());
    let mut pull_terms = Vec::with_capacity(forget_batch.len());
    for (s, r) in forget_batch.iter().zip(&forget_ref) {
        let image = s.image.as_ref().ok_or(ModelError::MissingImage)?;
        let h_u = model.visual_on_tape(tape, image, true, None)?;
        let z_u = tape.row_mean(h_u);
        push_terms.push(match push_kind {
            PushKind::Contrastive => cvf_push_loss(tape, z_u, &r.z, queue, weights.tau)?,
            PushKind::NegativeMse => nmse_loss(tape, z_u, &r.z)?,
        });
        pull_terms.push(cvf_pull_loss(tape, z_u, &anchor)?);
    }
    let mut ret_terms = Vec::with_capacity(retain_batch.len());
    let mut gum_terms = Vec::with_capacity(retain_batch.len());
    for (s, r) in retain_batch.iter().zip(&retain_ref) {
        let image = s.image.as_ref().ok_or(ModelError::MissingImage)?;
        let nodes = model.vqa_on_tape(tape, image, &s.question_tokens, true)?;
        ret_terms.push(ret_loss(tape, nodes.h, &r.h)?);
        gum_terms.push(gum_loss(tape, nodes.logits, s.answer_id)?);
    }

    let push = mean(tape, &push_terms, nf)?;
    let pull = mean(tape, &pull_terms, nf)?;
    let ret = mean(tape, &ret_terms, nr)?;
    let gum = mean(tape, &gum_terms, nr)?;

    let push_w = tape.scale(push, weights.lambda);
    let cvf = tape.add(push_w, pull)?;
    let cvf_w = tape.scale(cvf, weights.alpha);
    let ret_w = tape.scale(ret, weights.beta);
    let partial = tape.add(cvf_w, ret_w)?;
    let total = tape.add(partial, gum)?;

    Ok(TotalLoss {
        node: total,
        breakdown: LossBreakdown {
            push: tape.scalar(push),
            pull: tape.scalar(pull),
            ret: tape.scalar(ret),
            gum: tape.scalar(gum),
            total: tape.scalar(total),
        },
        forget_reference: forget_ref.into_iter().map(|r| r.z).collect(),
        retain_reference: retain_ref.into_iter().map(|r| r.z).collect(),
    })
}

fn mean(tape: &mut Tape, terms: &[NodeId], n: f64) -> Result<NodeId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn push_value(z_u: &[f64], z_r: &[f64], negs: &[&[f64]], tau: f64) -> f64 {
        let mut q = NegativeQueue::new(negs.len().max(1), z_u.len());
        for n in negs {
            q.enqueue(n).unwrap();
        }
        let mut tape = Tape::new();
        let u = tape.constant(Matrix::row_vector(z_u));
        let l = cvf_push_loss(&mut tape, u, &Matrix::row_vector(z_r), &q, tau).unwrap();
        tape.scalar(l)
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (linalg::vec_norm(a) * linalg::vec_norm(b))
    }

    #[test]
    fn push_symmetric_case_is_log2() {
        let l = push_value(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[&[0.0, 0.0, 1.0]], 0.1);
        assert!((l - 2f64.ln()).abs() <= 1e-10);
    }

    #[test]
    fn push_hand_case() {
        // s_ur = 1/τ = 1, s_uk = 0: −log(e⁰ / (e¹ + e⁰)) = log(1 + e).
        let l = push_value(&[1.0, 0.0], &[1.0, 0.0], &[&[0.0, 1.0]], 1.0);
        let expected = (1.0 + std::f64::consts::E).ln();
        assert!((l - expected).abs() <= 1e-10);
        assert!((l - 1.313_261_687_518_222_8).abs() <= 1e-12);
    }

    #[test]
    fn push_requires_negatives() {
        let q = NegativeQueue::new(4, 2);
        let mut tape = Tape::new();
        let u = tape.constant(Matrix::row_vector(&[1.0, 0.0]));
        assert!(matches!(
            cvf_push_loss(&mut tape, u, &Matrix::row_vector(&[1.0, 0.0]), &q, 0.1),
            Err(LossError::EmptyQueue)
        ));
    }

    #[test]
    fn pull_examples() {
        let p = Anchor {
            p: Matrix::row_vector(&[0.3, -0.4, 1.2]),
        };
        let mut tape = Tape::new();
        let u = tape.constant(p.p.scale(2.5));
        let l = cvf_pull_loss(&mut tape, u, &p).unwrap();
        assert!(tape.scalar(l).abs() <= 1e-12);
        let u = tape.constant(p.p.scale(-1.0));
        let l = cvf_pull_loss(&mut tape, u, &p).unwrap();
        assert!((tape.scalar(l) - 2.0).abs() <= 1e-12);
        let a = [0.2, 0.9, -0.3];
        let u = tape.constant(Matrix::row_vector(&a));
        let l = cvf_pull_loss(&mut tape, u, &p).unwrap();
        assert!((tape.scalar(l) - (1.0 - cos(&a, p.p.data()))).abs() <= 1e-12);
        assert!(matches!(Anchor::from_reference(&[]), Err(LossError::UndefinedAnchor)));
    }

    #[test]
    fn nmse_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(Matrix::row_vector(&[1.0, 0.0]));
        let l = nmse_loss(&mut tape, u, &Matrix::row_vector(&[1.0, 0.0])).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let l = nmse_loss(&mut tape, u, &Matrix::row_vector(&[0.0, 0.0])).unwrap();
        assert_eq!(tape.scalar(l), -1.0);
    }

    #[test]
    fn ret_examples() {
        let mut tape = Tape::new();
        let h = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let u = tape.constant(h.clone());
        let l = ret_loss(&mut tape, u, &h).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let u = tape.constant(Matrix::row_vector(&[3.0, 4.0]));
        let l = ret_loss(&mut tape, u, &Matrix::row_vector(&[0.0, 0.0])).unwrap();
        assert_eq!(tape.scalar(l), 25.0);
        let bad = tape.constant(Matrix::zeros(1, 3));
        assert!(ret_loss(&mut tape, bad, &h).is_err());
    }

    #[test]
    fn gum_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(Matrix::filled(1, 8, 0.7));
        let l = gum_loss(&mut tape, u, 3).unwrap();
        assert!((tape.scalar(l) - 8f64.ln()).abs() < 1e-14);
        let mut logits = vec![0.0; 8];
        logits[2] = 50.0;
        let u = tape.constant(Matrix::row_vector(&logits));
        let l = gum_loss(&mut tape, u, 2).unwrap();
        assert!(tape.scalar(l) <= 1e-20);
        assert!(gum_loss(&mut tape, u, 8).is_err());
    }

    #[test]
    fn queue_fifo_and_capacity() {
        let mut q = NegativeQueue::new(3, 2);
        for i in 1..=5 {
            q.enqueue(&[i as f64, 0.0]).unwrap();
        }
        assert_eq!(q.len(), 3);
        assert!(q.entries().all(|e| (linalg::vec_norm(e) - 1.0).abs() < 1e-12));
        assert!(q.enqueue(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn push_matches_softplus_form(
            zu in prop::collection::vec(-1.0f64..1.0, 4),
            zr in prop::collection::vec(-1.0f64..1.0, 4),
            n1 in prop::collection::vec(-1.0f64..1.0, 4),
            n2 in prop::collection::vec(-1.0f64..1.0, 4),
            tau in 0.05f64..2.0,
        ) {
            prop_assume!(linalg::vec_norm(&zu) > 1e-3 && linalg::vec_norm(&zr) > 1e-3);
            prop_assume!(linalg::vec_norm(&n1) > 1e-3 && linalg::vec_norm(&n2) > 1e-3);
            let l = push_value(&zu, &zr, &[&n1, &n2], tau);
            let s_ur = cos(&zu, &zr) / tau;
            let negs = [cos(&zu, &n1) / tau, cos(&zu, &n2) / tau];
            let lse = crate::autodiff::log_sum_exp(&negs);
            let alt = (s_ur - lse).exp().ln_1p();
            prop_assert!(l > 0.0);
            prop_assert!((l - alt).abs() <= 1e-10);
        }

        #[test]
        fn push_and_pull_are_scale_invariant(
            zu in prop::collection::vec(-1.0f64..1.0, 5),
            zr in prop::collection::vec(-1.0f64..1.0, 5),
            n1 in prop::collection::vec(-1.0f64..1.0, 5),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
            c in 0.01f64..100.0,
        ) {
            prop_assume!(linalg::vec_norm(&zu) > 1e-3 && linalg::vec_norm(&zr) > 1e-3);
            prop_assume!(linalg::vec_norm(&n1) > 1e-3);
            let scaled = |v: &[f64], s: f64| v.iter().map(|x| x * s).collect::<Vec<_>>();
            let l1 = push_value(&zu, &zr, &[&n1], 0.1);
            let l2 = push_value(&scaled(&zu, a), &scaled(&zr, b), &[&scaled(&n1, c)], 0.1);
            prop_assert!((l1 - l2).abs() <= 1e-9);

            let mut tape = Tape::new();
            let p1 = Anchor { p: Matrix::row_vector(&zr) };
            let p2 = Anchor { p: Matrix::row_vector(&scaled(&zr, c)) };
            let u1 = tape.constant(Matrix::row_vector(&zu));
            let u2 = tape.constant(Matrix::row_vector(&scaled(&zu, a)));
            let q1 = cvf_pull_loss(&mut tape, u1, &p1).unwrap();
            let q2 = cvf_pull_loss(&mut tape, u2, &p2).unwrap();
            let (q1, q2) = (tape.scalar(q1), tape.scalar(q2));
            prop_assert!((0.0..=2.0).contains(&q1));
            prop_assert!((q1 - q2).abs() <= 1e-9);
        }

        #[test]
        fn queue_keeps_most_recent_in_order(cap in 1usize..8, n in 0usize..30) {
            let mut q = NegativeQueue::new(cap, 2);
            for i in 0..n {
                let angle = i as f64 * 0.1;
                q.enqueue(&[3.0 * angle.cos(), 3.0 * angle.sin()]).unwrap();
            }
            prop_assert_eq!(q.len(), n.min(cap));
            let first = n - n.min(cap);
            for (k, e) in q.entries().enumerate() {
                let angle = (first + k) as f64 * 0.1;
                prop_assert!((linalg::vec_norm(e) - 1.0).abs() <= 1e-9);
                prop_assert!((e[0] - angle.cos()).abs() < 1e-12);
                prop_assert!((e[1] - angle.sin()).abs() < 1e-12);
            }
        }
    }
}
