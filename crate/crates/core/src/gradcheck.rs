//! Central-difference gradient checks for tape primitives and losses.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::linalg::{vec_norm, Matrix};
use crate::losses::{self, Anchor, LossWeights, NegativeQueue, PushKind};
use crate::model::{AdapterKind, ModelConfig, ToyModel, TrainScope};
use crate::ncu::random_orthonormal_rows;
use crate::rng::{self, StreamRng};
use crate::world::{generate_world, Modality, Split, WorldConfig};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Worst relative error of one check over all its trials.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)` between the tape gradient and central
/// differences of `loss`, over `coords` randomly chosen trainable
/// coordinates (all of them when `None`).
pub fn relative_error<F>(store: &mut ParamStore, loss: F, coords: Option<usize>, rng: &mut StreamRng) -> f64
where
    F: Fn(&ParamStore, &mut Tape) -> NodeId,
{
    let mut tape = Tape::new();
    let node = loss(store, &mut tape);
    store.zero_grads();
    tape.backward(node, store).expect("loss must be a scalar");

    let mut all: Vec<(usize, usize)> = Vec::new();
    for (k, (_, p)) in store.iter().enumerate() {
        if p.trainable {
            all.extend((0..p.value.len()).map(|i| (k, i)));
        }
    }
    if let Some(n) = coords {
        if n < all.len() {
            all = rand::seq::index::sample(rng, all.len(), n).into_iter().map(|i| all[i]).collect();
        }
    }
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let n = loss(s, &mut t);
        t.scalar(n)
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut analytic = Vec::with_capacity(all.len());
    let mut numeric = Vec::with_capacity(all.len());
    for (k, i) in all {
        let id = ids[k];
        analytic.push(store.get(id).grad.data()[i]);
        let orig = store.get(id).value.data()[i];
        store.get_mut(id).value.data_mut()[i] = orig + STEP;
        let up = eval(store);
        store.get_mut(id).value.data_mut()[i] = orig - STEP;
        let down = eval(store);
        store.get_mut(id).value.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * STEP));
    }
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    vec_norm(&diff) / vec_norm(&analytic).max(vec_norm(&numeric)).max(1e-8)
}

fn gaussian(rows: usize, cols: usize, r: &mut StreamRng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(r)).collect())
}

/// Gaussian entries pushed at least `gap` away from zero.
fn off_zero(rows: usize, cols: usize, gap: f64, r: &mut StreamRng) -> Matrix {
    gaussian(rows, cols, r).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

/// Reduces a matrix node to a scalar with fixed random weights, `l·X·r`.
fn project(tape: &mut Tape, x: NodeId, l: &Matrix, r: &Matrix) -> NodeId {
    let l = tape.constant(l.clone());
    let r = tape.constant(r.clone());
    let lx = tape.matmul(l, x).expect("shapes");
    let lxr = tape.matmul(lx, r).expect("shapes");
    tape.sum(lxr)
}

fn run<F>(name: &'static str, trials: usize, seed: u64, mut one: F) -> CheckReport
where
    F: FnMut(&mut StreamRng) -> f64,
{
    let mut r = rng::stream(seed, name);
    let max_rel_error = (0..trials).map(|_| one(&mut r)).fold(0.0, f64::max);
    CheckReport {
        name,
        trials,
        max_rel_error,
    }
}

/// Checks every differentiable tape primitive.
pub fn primitive_suite(trials: usize, seed: u64) -> Vec<CheckReport> {
    type Build = fn(&mut Tape, NodeId, NodeId) -> NodeId;
    // (name, shape of a, shape of b, inputs strictly positive, op)
    let unary_or_binary: [(&'static str, (usize, usize), (usize, usize), bool, Build); 17] = [
        ("matmul", (3, 4), (4, 2), false, |t, a, b| t.matmul(a, b).unwrap()),
        ("matmul_nt", (3, 4), (2, 4), false, |t, a, b| t.matmul_nt(a, b).unwrap()),
        ("add", (3, 4), (3, 4), false, |t, a, b| t.add(a, b).unwrap()),
        ("sub", (3, 4), (3, 4), false, |t, a, b| t.sub(a, b).unwrap()),
        ("scale", (3, 4), (1, 1), false, |t, a, _| t.scale(a, -1.7)),
        ("sum", (3, 4), (1, 1), false, |t, a, _| t.sum(a)),
        ("row_mean", (5, 3), (1, 1), false, |t, a, _| t.row_mean(a)),
        ("tanh", (3, 4), (1, 1), false, |t, a, _| t.tanh(a)),
        ("relu", (3, 4), (1, 1), false, |t, a, _| t.relu(a)),
        ("l2_normalize", (3, 4), (1, 1), false, |t, a, _| t.l2_normalize(a)),
        ("cosine", (1, 5), (1, 5), false, |t, a, b| t.cosine(a, b).unwrap()),
        ("softmax_cross_entropy", (1, 6), (1, 1), false, |t, a, _| t.softmax_cross_entropy(a, 2).unwrap()),
        ("frobenius_sq", (3, 4), (1, 1), false, |t, a, _| t.frobenius_sq(a)),
        ("log", (3, 4), (1, 1), true, |t, a, _| t.log(a).unwrap()),
        ("exp_sum", (3, 4), (1, 1), false, |t, a, _| t.exp_sum(a)),
        ("log_sum_exp", (3, 4), (1, 1), false, |t, a, _| t.log_sum_exp(a)),
        ("concat_cols", (3, 2), (3, 3), false, |t, a, b| t.concat_cols(a, b).unwrap()),
    ];
    unary_or_binary
        .iter()
        .map(|&(name, sa, sb, positive, op)| {
            run(name, trials, seed, |r| {
                let mut store = ParamStore::new();
                let draw = |s: (usize, usize), r: &mut StreamRng| {
                    let m = off_zero(s.0, s.1, 1e-3, r);
                    if positive {
                        m.map(|v| v.abs() + 0.1)
                    } else {
                        m
                    }
                };
                let a = store.insert("a", draw(sa, r), true);
                let b = store.insert("b", draw(sb, r), true);
                // Output shape from a probe pass, then fixed projection weights.
                let mut probe = Tape::new();
                let (na, nb) = (probe.param(&store, a), probe.param(&store, b));
                let out = op(&mut probe, na, nb);
                let (m, n) = probe.value(out).shape();
                let (l, rr) = (gaussian(1, m, r), gaussian(n, 1, r));
                relative_error(
                    &mut store,
                    |s, t| {
                        let (na, nb) = (t.param(s, a), t.param(s, b));
                        let out = op(t, na, nb);
                        project(t, out, &l, &rr)
                    },
                    None,
                    r,
                )
            })
        })
        .collect()
}

fn random_queue(len: usize, dim: usize, r: &mut StreamRng) -> NegativeQueue {
    let mut q = NegativeQueue::new(len.max(1), dim);
    for _ in 0..len {
        q.enqueue(gaussian(1, dim, r).data()).expect("dimension matches");
    }
    q
}

/// Checks each loss term and the full objective.
pub fn loss_suite(trials: usize, seed: u64) -> Vec<CheckReport> {
    let d = 6;
    let mut out = vec![
        run("cvf_push", trials, seed, |r| {
            let mut store = ParamStore::new();
            let z = store.insert("z_u", gaussian(1, d, r), true);
            let z_r = gaussian(1, d, r);
            let n = r.random_range(1..6);
            let q = random_queue(n, d, r);
            let tau = r.random_range(0.2..2.0);
            relative_error(&mut store, |s, t| {
                let zu = t.param(s, z);
                losses::cvf_push_loss(t, zu, &z_r, &q, tau).unwrap()
            }, None, r)
        }),
        run("cvf_pull", trials, seed, |r| {
            let mut store = ParamStore::new();
            let z = store.insert("z_u", gaussian(1, d, r), true);
            let anchor = Anchor::from_reference(&[gaussian(1, d, r), gaussian(1, d, r)]).unwrap();
            relative_error(&mut store, |s, t| {
                let zu = t.param(s, z);
                losses::cvf_pull_loss(t, zu, &anchor).unwrap()
            }, None, r)
        }),
        run("nmse", trials, seed, |r| {
            let mut store = ParamStore::new();
            let z = store.insert("z_u", gaussian(1, d, r), true);
            let z_r = gaussian(1, d, r);
            relative_error(&mut store, |s, t| {
                let zu = t.param(s, z);
                losses::nmse_loss(t, zu, &z_r).unwrap()
            }, None, r)
        }),
        run("ret", trials, seed, |r| {
            let mut store = ParamStore::new();
            let h = store.insert("h_u", gaussian(4, d, r), true);
            let h_r = gaussian(4, d, r);
            relative_error(&mut store, |s, t| {
                let hu = t.param(s, h);
                losses::ret_loss(t, hu, &h_r).unwrap()
            }, None, r)
        }),
        run("gum", trials, seed, |r| {
            let mut store = ParamStore::new();
            let l = store.insert("logits", gaussian(1, 8, r), true);
            let target = r.random_range(0..8);
            relative_error(&mut store, |s, t| {
                let logits = t.param(s, l);
                losses::gum_loss(t, logits, target).unwrap()
            }, None, r)
        }),
    ];
    for (name, kind) in [("total_contrastive", PushKind::Contrastive), ("total_nmse", PushKind::NegativeMse)] {
        out.push(total_loss_check(name, kind, trials, seed));
    }
    out
}

/// Full objective on a micro world, differentiated with respect to the
/// adapter matrices (the only parameters unlearning trains).
fn total_loss_check(name: &'static str, kind: PushKind, trials: usize, seed: u64) -> CheckReport {
    let wc = WorldConfig {
        n_entities: 12,
        n_attributes: 2,
        values_per_attribute: 4,
        answer_vocab: 4,
        forget_fraction: 0.25,
        realworld_fraction: 0.25,
        patches: 3,
        d_img: 4,
        seed,
        ..WorldConfig::default()
    };
    let world = generate_world(&wc).expect("micro world config is valid");
    let forget = world.samples_of(Split::Forget, Modality::Vqa);
    let retain = world.samples_of(Split::Retain, Modality::Vqa);
    run(name, trials, seed, |r| {
        let cfg = ModelConfig {
            d: 6,
            d_lm: 5,
            init_seed: r.random(),
            ..ModelConfig::for_world(&wc, 0)
        };
        let mut model = ToyModel::new(cfg).expect("micro model config is valid");
        let rank = 2;
        let a_mats = model
            .adapted_layers()
            .into_iter()
            .enumerate()
            .map(|(k, l)| (l, random_orthonormal_rows(rank, model.layer_dims(l).0, r.random(), k as u64).unwrap()))
            .collect();
        model.attach_adapters(a_mats, AdapterKind::Standard).unwrap();
        model.set_train_scope(TrainScope::AdapterAB);
        for ad in model.adapters().to_vec() {
            let (rows, cols) = model.params.value(ad.b).shape();
            model.params.get_mut(ad.b).value = gaussian(rows, cols, r).scale(0.5);
        }
        let fb = vec![forget[r.random_range(0..forget.len())], forget[r.random_range(0..forget.len())]];
        let rb = vec![retain[r.random_range(0..retain.len())], retain[r.random_range(0..retain.len())]];
        let queue = random_queue(4, model.config.d_lm, r);
        let weights = LossWeights {
            lambda: r.random_range(0.5..2.0),
            alpha: r.random_range(0.5..2.0),
            beta: r.random_range(0.5..2.0),
            tau: r.random_range(0.3..1.0),
        };
        let template = model.clone();
        relative_error(&mut model.params, |s, t| {
            let mut m = template.clone();
            m.params = s.clone();
            let mut q = queue.clone();
            losses::total_loss(t, &m, &fb, &rb, &mut q, &weights, kind).unwrap().node
        }, Some(40), r)
    })
}
