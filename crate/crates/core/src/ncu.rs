//! Null-space constrained adapter initialization.
//!
//! Retain-set inputs to every adapted layer are collected with adapters
//! disabled, their second-moment matrix is eigendecomposed, and the
//! eigenvectors of the `r` smallest eigenvalues become the frozen `A`
//! matrices. Updates to `B` then act only on directions the retained
//! knowledge barely excites.

use std::io::Cursor;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, ContainerWriter, ReadExt, WriteExt};
use crate::linalg::{self, LinalgError, Matrix};
use crate::model::{AdapterKind, LayerId, ModelError, ToyModel};
use crate::rng;
use crate::world::Sample;

pub const DUMP_MAGIC: [u8; 4] = *b"NSUA";
pub const BASIS_MAGIC: [u8; 4] = *b"NSUB";
/// Cap on calibration rows per layer.
pub const MAX_CALIBRATION_ROWS: usize = 4096;
const RESIDUAL_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NcuError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] codec::CodecError),
    #[error("no retain samples to calibrate on")]
    EmptyRetainSet,
    #[error("sample for entity {0} has no image")]
    MissingImage(usize),
    #[error("rank {r} out of range for layer {layer} with input dim {d}")]
    RankOutOfRange { layer: LayerId, r: usize, d: usize },
    #[error("layer mismatch: {0}")]
    LayerMismatch(String),
}

pub type Result<T> = std::result::Result<T, NcuError>;

/// Per-layer input activations, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub layers: Vec<(LayerId, Matrix)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerBasis {
    pub layer: LayerId,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// `d × r`, columns are the eigenvectors of the `r` smallest eigenvalues.
    pub u_perp: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NullSpaceBasis {
    pub r: usize,
    pub layers: Vec<LayerBasis>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerResidual {
    pub layer: String,
    pub max_residual: f64,
    pub mean_residual: f64,
}

/// Records the inputs of `layer_ids` for every retain VQA sample, with
/// adapters disabled. Layers with more than [`MAX_CALIBRATION_ROWS`] rows
/// are subsampled without replacement using `seed`.
pub fn collect_activations(model: &ToyModel, retain_samples: &[&Sample], layer_ids: &[LayerId], seed: u64) -> Result<ActivationDump> {
    if retain_samples.is_empty() {
        return Err(NcuError::EmptyRetainSet);
    }
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); layer_ids.len()];
    let mut counts = vec![0usize; layer_ids.len()];
    for s in retain_samples {
        let image = s.image.as_ref().ok_or(NcuError::MissingImage(s.entity_id))?;
        for (layer, x) in model.layer_inputs(image, false)? {
            if let Some(k) = layer_ids.iter().position(|l| *l == layer) {
                rows[k].extend_from_slice(x.data());
                counts[k] += x.rows();
            }
        }
    }
    let mut layers = Vec::with_capacity(layer_ids.len());
    for (k, &layer) in layer_ids.iter().enumerate() {
        if counts[k] == 0 {
            return Err(NcuError::LayerMismatch(format!("model has no layer {layer}")));
        }
        let d = rows[k].len() / counts[k];
        let full = Matrix::from_vec(counts[k], d, std::mem::take(&mut rows[k]));
        layers.push((layer, subsample_rows(full, MAX_CALIBRATION_ROWS, seed, k as u64)));
    }
    Ok(ActivationDump { layers })
}

fn subsample_rows(x: Matrix, cap: usize, seed: u64, index: u64) -> Matrix {
    if x.rows() <= cap {
        return x;
    }
    let mut r = rng::indexed_stream(seed, "ncu-calibration", index);
    let mut keep = rand::seq::index::sample(&mut r, x.rows(), cap).into_vec();
    keep.sort_unstable();
    let data = keep.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Matrix::from_vec(cap, x.cols(), data)
}

/// Eigendecomposes each layer's second-moment matrix and keeps the `r`
/// least-excited directions.
pub fn build_basis(dump: &ActivationDump, r: usize) -> Result<NullSpaceBasis> {
    let layers = dump
        .layers
        .iter()
        .map(|(layer, x)| {
            let d = x.cols();
            if r == 0 || r >= d {
                return Err(NcuError::RankOutOfRange { layer: *layer, r, d });
            }
            let eig = linalg::sym_eig(&linalg::covariance(x)?)?;
            Ok(LayerBasis {
                layer: *layer,
                eigenvalues: eig.values,
                u_perp: eig.vectors.leading_columns(r),
            })
        })
        .collect::<Result<_>>()?;
    Ok(NullSpaceBasis { r, layers })
}

/// Attaches adapters with `A = U_perpᵀ` (frozen) and `B = 0`.
pub fn init_lora_ncu(model: &mut ToyModel, basis: &NullSpaceBasis) -> Result<()> {
    let mut a_mats = Vec::with_capacity(basis.layers.len());
    for lb in &basis.layers {
        let (d_in, _) = checked_dims(model, lb.layer)?;
        if lb.u_perp.rows() != d_in || lb.u_perp.cols() != basis.r {
            return Err(NcuError::LayerMismatch(format!(
                "basis for {} is {:?}, layer input dim is {d_in}, r = {}",
                lb.layer,
                lb.u_perp.shape(),
                basis.r
            )));
        }
        a_mats.push((lb.layer, lb.u_perp.transpose()));
    }
    model.attach_adapters(a_mats, AdapterKind::NullSpace)?;
    Ok(())
}

/// Attaches adapters whose `A` rows span a random `r`-dimensional subspace.
pub fn init_lora_random(model: &mut ToyModel, r: usize, seed: u64) -> Result<()> {
    let mut a_mats = Vec::new();
    for (k, layer) in model.adapted_layers().into_iter().enumerate() {
        let (d_in, _) = checked_dims(model, layer)?;
        if r == 0 || r >= d_in {
            return Err(NcuError::RankOutOfRange { layer, r, d: d_in });
        }
        a_mats.push((layer, random_orthonormal_rows(r, d_in, seed, k as u64)?));
    }
    model.attach_adapters(a_mats, AdapterKind::RandomSubspace)?;
    Ok(())
}

/// `r × d` matrix with orthonormal rows from QR of a Gaussian `d × r` draw.
pub fn random_orthonormal_rows(r: usize, d: usize, seed: u64, index: u64) -> Result<Matrix> {
    let mut rng = rng::indexed_stream(seed, "lora-random", index);
    let g = Matrix::from_vec(d, r, (0..d * r).map(|_| StandardNormal.sample(&mut rng)).collect());
    Ok(linalg::qr_orthonormal(&g)?.transpose())
}

fn checked_dims(model: &ToyModel, layer: LayerId) -> Result<(usize, usize)> {
    if !model.adapted_layers().contains(&layer) {
        return Err(NcuError::LayerMismatch(format!("model has no layer {layer}")));
    }
    Ok(model.layer_dims(layer))
}

/// Relative residual `‖Ax‖ / ‖x‖` of every dump row under the model's adapters.
pub fn verify_nullspace(model: &ToyModel, dump: &ActivationDump) -> Result<Vec<LayerResidual>> {
    dump.layers
        .iter()
        .map(|(layer, x)| {
            let ad = model
                .adapter(*layer)
                .ok_or_else(|| NcuError::LayerMismatch(format!("no adapter on {layer}")))?;
            let (max_residual, mean_residual) = residuals(model.params.value(ad.a), x)?;
            Ok(LayerResidual {
                layer: layer.name(),
                max_residual,
                mean_residual,
            })
        })
        .collect()
}

/// `(max, mean)` of `‖A x_i‖ / max(‖x_i‖, 1e-12)` over the rows of `x`.
pub fn residuals(a: &Matrix, x: &Matrix) -> Result<(f64, f64)> {
    let ax = linalg::matmul_nt(x, a)?;
    let mut max = 0.0_f64;
    let mut sum = 0.0;
    for i in 0..x.rows() {
        let res = linalg::vec_norm(ax.row(i)) / linalg::vec_norm(x.row(i)).max(RESIDUAL_FLOOR);
        max = max.max(res);
        sum += res;
    }
    Ok((max, sum / x.rows().max(1) as f64))
}

fn put_layer(buf: &mut Vec<u8>, layer: LayerId) -> Result<()> {
    buf.put_str(&layer.name())?;
    Ok(())
}

fn get_layer(cur: &mut Cursor<&[u8]>) -> Result<LayerId> {
    let name = cur.get_str()?;
    LayerId::parse(&name).ok_or_else(|| NcuError::LayerMismatch(format!("unknown layer {name:?}")))
}

fn check_consumed(cur: &Cursor<&[u8]>) -> Result<()> {
    if cur.position() as usize != cur.get_ref().len() {
        return Err(codec::CodecError::Malformed("trailing bytes in section".into()).into());
    }
    Ok(())
}

impl ActivationDump {
    /// One section per layer: layer name, then the matrix.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ContainerWriter::new(DUMP_MAGIC);
        for (layer, x) in &self.layers {
            let mut buf = Vec::new();
            put_layer(&mut buf, *layer)?;
            codec::write_matrix(&mut buf, x)?;
            w.section(&buf);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let layers = codec::read_container(bytes, DUMP_MAGIC)?
            .into_iter()
            .map(|s| {
                let mut cur = Cursor::new(s);
                let layer = get_layer(&mut cur)?;
                let x = codec::read_matrix(&mut cur)?;
                check_consumed(&cur)?;
                Ok((layer, x))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

impl NullSpaceBasis {
    /// Section 0 holds `r`; then one section per layer with name,
    /// eigenvalues (as a row matrix) and `U_perp`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ContainerWriter::new(BASIS_MAGIC);
        let mut head = Vec::new();
        head.put_usize(self.r)?;
        w.section(&head);
        for lb in &self.layers {
            let mut buf = Vec::new();
            put_layer(&mut buf, lb.layer)?;
            codec::write_matrix(&mut buf, &Matrix::row_vector(&lb.eigenvalues))?;
            codec::write_matrix(&mut buf, &lb.u_perp)?;
            w.section(&buf);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = codec::read_container(bytes, BASIS_MAGIC)?;
        let (head, rest) = sections
            .split_first()
            .ok_or_else(|| codec::CodecError::Malformed("empty basis container".into()))?;
        let mut cur = Cursor::new(*head);
        let r = cur.get_usize()?;
        check_consumed(&cur)?;
        let layers = rest
            .iter()
            .map(|s| {
                let mut cur = Cursor::new(*s);
                let layer = get_layer(&mut cur)?;
                let eigenvalues = codec::read_matrix(&mut cur)?.into_vec();
                let u_perp = codec::read_matrix(&mut cur)?;
                check_consumed(&cur)?;
                if u_perp.cols() != r {
                    return Err(NcuError::LayerMismatch(format!("basis for {layer} has {} columns, r = {r}", u_perp.cols())));
                }
                Ok(LayerBasis {
                    layer,
                    eigenvalues,
                    u_perp,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { r, layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{column_projector, matmul, matmul_nt};
    use crate::model::ModelConfig;
    use crate::world::{generate_world, Modality, Split, WorldConfig};
    use rand::Rng;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng::stream(seed, "ncu-test");
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut r)).collect())
    }

    /// `n` rows confined to a random `k`-dimensional subspace of R^d.
    fn low_rank(n: usize, d: usize, k: usize, seed: u64) -> (Matrix, Matrix) {
        let span = random_orthonormal_rows(k, d, seed, 99).unwrap();
        let coeffs = gaussian(n, k, seed);
        (matmul(&coeffs, &span).unwrap(), span)
    }

    fn dump_of(x: Matrix) -> ActivationDump {
        ActivationDump {
            layers: vec![(LayerId::Projector, x)],
        }
    }

    #[test]
    fn rank_one_axis_data_gives_complement() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![-2.0, 0.0, 0.0], vec![0.5, 0.0, 0.0]]);
        let basis = build_basis(&dump_of(x), 2).unwrap();
        let p = column_projector(&basis.layers[0].u_perp);
        let expected = Matrix::diag(&[0.0, 1.0, 1.0]);
        assert!(p.max_abs_diff(&expected) <= 1e-9);
    }

    #[test]
    fn rank_checks() {
        let x = gaussian(10, 4, 1);
        assert!(matches!(build_basis(&dump_of(x.clone()), 0), Err(NcuError::RankOutOfRange { .. })));
        assert!(matches!(build_basis(&dump_of(x), 4), Err(NcuError::RankOutOfRange { .. })));
    }

    #[test]
    fn low_rank_data_has_vanishing_bottom_eigenvalues() {
        let (d, r) = (12, 4);
        let (x, _) = low_rank(200, d, d - r, 3);
        let basis = build_basis(&dump_of(x.clone()), r).unwrap();
        let ev = &basis.layers[0].eigenvalues;
        let top = *ev.last().unwrap();
        for v in &ev[..r] {
            assert!(v.abs() <= 1e-12 * top, "{v} vs {top}");
        }
        assert!(ev.windows(2).all(|w| w[0] <= w[1]));
        assert!(ev.iter().all(|&v| v >= -1e-10));
        let c = linalg::covariance(&x).unwrap();
        let trace: f64 = (0..d).map(|i| c[(i, i)]).sum();
        assert!((ev.iter().sum::<f64>() - trace).abs() <= 1e-9);
        let u = &basis.layers[0].u_perp;
        let utu = linalg::matmul_tn(u, u).unwrap();
        assert!(utu.max_abs_diff(&Matrix::identity(r)) <= 1e-9);
    }

    #[test]
    fn constructed_span_has_exact_null_space() {
        let (d, r) = (16, 5);
        let (x, span) = low_rank(300, d, d - r, 8);
        let basis = build_basis(&dump_of(x.clone()), r).unwrap();
        let a = basis.layers[0].u_perp.transpose();
        let (max, _) = residuals(&a, &x).unwrap();
        assert!(max <= 1e-8, "{max}");
        // Fresh vectors from the same span, not seen during calibration.
        let probe = matmul(&gaussian(50, d - r, 77), &span).unwrap();
        assert!(residuals(&a, &probe).unwrap().0 <= 1e-8);
        // Random subspace on the same data is far from null.
        let rand_a = random_orthonormal_rows(r, d, 4, 0).unwrap();
        let (rmax, rmean) = residuals(&rand_a, &x).unwrap();
        assert!(rmax >= 0.1, "{rmax}");
        assert!(rmean > max);
    }

    #[test]
    fn random_rows_are_orthonormal_and_seed_dependent() {
        for s in 0..20u64 {
            let a = random_orthonormal_rows(6, 20, s, 0).unwrap();
            let b = random_orthonormal_rows(6, 20, s + 1000, 0).unwrap();
            assert!(matmul_nt(&a, &a).unwrap().max_abs_diff(&Matrix::identity(6)) <= 1e-9);
            assert!(linalg::frobenius_norm(&a.sub(&b).unwrap()) > 0.1);
        }
    }

    #[test]
    fn zero_rows_do_not_blow_up_residuals() {
        let a = random_orthonormal_rows(2, 5, 0, 0).unwrap();
        let (max, mean) = residuals(&a, &Matrix::zeros(3, 5)).unwrap();
        assert_eq!((max, mean), (0.0, 0.0));
    }

    fn setup() -> (ToyModel, crate::world::World) {
        let wc = WorldConfig {
            n_entities: 20,
            forget_fraction: 0.2,
            realworld_fraction: 0.2,
            seed: 5,
            ..WorldConfig::default()
        };
        let w = generate_world(&wc).unwrap();
        (ToyModel::new(ModelConfig::for_world(&wc, 1)).unwrap(), w)
    }

    #[test]
    fn collection_matches_instrumented_forward() {
        let (m, w) = setup();
        let retain = w.samples_of(Split::Retain, Modality::Vqa);
        let layers = m.adapted_layers();
        let dump = collect_activations(&m, &retain[..1], &layers, 0).unwrap();
        let patches = w.config.patches;
        for (_, x) in &dump.layers {
            assert_eq!(x.rows(), patches);
        }
        let full = collect_activations(&m, &retain, &layers, 0).unwrap();
        for (k, (layer, x)) in full.layers.iter().enumerate() {
            assert_eq!(x.rows(), retain.len() * patches);
            let probe = m.layer_inputs(retain[3].image.as_ref().unwrap(), false).unwrap();
            let (pl, px) = &probe[k];
            assert_eq!(pl, layer);
            assert_eq!(&x.data()[3 * patches * x.cols()..4 * patches * x.cols()], px.data());
        }
        assert!(matches!(collect_activations(&m, &[], &layers, 0), Err(NcuError::EmptyRetainSet)));
    }

    #[test]
    fn activations_ignore_adapter_values() {
        let (mut m, w) = setup();
        let retain = w.samples_of(Split::Retain, Modality::Vqa);
        let layers = m.adapted_layers();
        let before = collect_activations(&m, &retain, &layers, 0).unwrap();
        init_lora_random(&mut m, 4, 0).unwrap();
        for ad in m.adapters().to_vec() {
            m.params.get_mut(ad.b).value.fill(0.7);
        }
        assert_eq!(collect_activations(&m, &retain, &layers, 0).unwrap(), before);
    }

    #[test]
    fn subsampling_is_seeded_and_capped() {
        let x = gaussian(5000, 3, 2);
        let a = subsample_rows(x.clone(), MAX_CALIBRATION_ROWS, 1, 0);
        let b = subsample_rows(x.clone(), MAX_CALIBRATION_ROWS, 1, 0);
        let c = subsample_rows(x, MAX_CALIBRATION_ROWS, 2, 0);
        assert_eq!(a.rows(), MAX_CALIBRATION_ROWS);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn ncu_init_keeps_forward_and_beats_random() {
        let (base, w) = setup();
        let retain = w.samples_of(Split::Retain, Modality::Vqa);
        let dump = collect_activations(&base, &retain, &base.adapted_layers(), 0).unwrap();
        let basis = build_basis(&dump, 8).unwrap();
        let mut ncu = base.clone();
        init_lora_ncu(&mut ncu, &basis).unwrap();
        let mut rnd = base.clone();
        init_lora_random(&mut rnd, 8, 3).unwrap();
        for s in &w.samples {
            let b = base.forward_sample(s, false).unwrap();
            assert_eq!(ncu.forward_sample(s, true).unwrap(), b);
            assert_eq!(rnd.forward_sample(s, true).unwrap(), b);
        }
        for ad in ncu.adapters() {
            let a = ncu.params.value(ad.a);
            assert!(matmul_nt(a, a).unwrap().max_abs_diff(&Matrix::identity(8)) <= 1e-9);
            assert!(!ncu.params.get(ad.a).trainable);
            assert!(ncu.params.get(ad.b).trainable);
        }
        let rn = verify_nullspace(&ncu, &dump).unwrap();
        let rr = verify_nullspace(&rnd, &dump).unwrap();
        for (n, r) in rn.iter().zip(&rr) {
            assert!(n.max_residual <= r.max_residual, "{n:?} vs {r:?}");
            assert!(n.mean_residual <= r.mean_residual);
        }
    }

    #[test]
    fn adapted_output_bound_after_arbitrary_b() {
        let (d, r) = (16, 6);
        let (x, _) = low_rank(120, d, d - r, 21);
        let basis = build_basis(&dump_of(x.clone()), r).unwrap();
        let a = basis.layers[0].u_perp.transpose();
        let (tau, _) = residuals(&a, &x).unwrap();
        let w = gaussian(d, d, 5);
        let mut rr = rng::stream(9, "b");
        for _ in 0..20 {
            let b = Matrix::from_vec(d, r, (0..d * r).map(|_| rr.random_range(-3.0..3.0)).collect());
            let bnorm = linalg::spectral_norm(&b).unwrap();
            for i in 0..x.rows() {
                let xi = x.row(i);
                let base = crate::model::adapted_layer_forward(&w, &a, &Matrix::zeros(d, r), xi).unwrap();
                let adapted = crate::model::adapted_layer_forward(&w, &a, &b, xi).unwrap();
                let dev: Vec<f64> = adapted.iter().zip(&base).map(|(p, q)| p - q).collect();
                let bound = bnorm * tau.max(1e-8) * linalg::vec_norm(xi);
                assert!(linalg::vec_norm(&dev) <= bound * (1.0 + 1e-9) + 1e-15);
            }
        }
    }

    #[test]
    fn layer_mismatch_is_rejected() {
        let (mut m, _) = setup();
        let basis = NullSpaceBasis {
            r: 2,
            layers: vec![LayerBasis {
                layer: LayerId::Projector,
                eigenvalues: vec![0.0; 5],
                u_perp: Matrix::zeros(5, 2),
            }],
        };
        assert!(init_lora_ncu(&mut m, &basis).is_err());
        assert!(matches!(init_lora_random(&mut m, 32, 0), Err(NcuError::RankOutOfRange { .. })));
    }

    #[test]
    fn files_round_trip_and_are_deterministic() {
        let (m, w) = setup();
        let retain = w.samples_of(Split::Retain, Modality::Vqa);
        let dump = collect_activations(&m, &retain, &m.adapted_layers(), 0).unwrap();
        let bytes = dump.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"NSUA");
        assert_eq!(ActivationDump::from_bytes(&bytes).unwrap(), dump);
        let basis = build_basis(&dump, 4).unwrap();
        assert_eq!(build_basis(&dump, 4).unwrap(), basis);
        let bb = basis.to_bytes().unwrap();
        assert_eq!(&bb[..4], b"NSUB");
        assert_eq!(NullSpaceBasis::from_bytes(&bb).unwrap(), basis);
        assert!(NullSpaceBasis::from_bytes(&bytes).is_err());
    }
}
