//! The model under unlearning.
//!
//! Visual module, per patch: `e = W_in x`, then `depth` layers of
//! `e = tanh(W_i e)`, then the projector `h = P e`. The rows `h` are the
//! intermediate visual representations (IVRs) and `z` is their mean.
//!
//! Language module: the question is a token sequence. In VQA the image
//! placeholder position holds `z`; every other position holds its token
//! embedding. The positions are mean-pooled, passed through two `tanh`
//! layers and read out by the answer head. QA never touches the visual
//! module.
//!
//! Low-rank adapters attach to every encoder layer and the projector:
//! `y = W x + B (A x)`.

use std::io::Cursor;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, ParamId, ParamStore, Tape};
use crate::codec::{self, CodecError, ContainerWriter, ReadExt, WriteExt};
use crate::linalg::{self, LinalgError, Matrix};
use crate::rng;
use crate::world::{Sample, WorldConfig, IMAGE_TOKEN};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NSUC";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("token {token} outside text vocabulary of size {vocab}")]
    InvalidToken { token: u32, vocab: usize },
    #[error("VQA question must contain the image token exactly once")]
    ImageTokenCount,
    #[error("QA question must not contain the image token")]
    UnexpectedImageToken,
    #[error("empty question")]
    EmptyQuestion,
    #[error("image shape {found:?}, expected (_, {expected_cols})")]
    ImageShape {
        found: (usize, usize),
        expected_cols: usize,
    },
    #[error("sample has no image")]
    MissingImage,
    #[error("invalid model configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_img: usize,
    pub d: usize,
    pub d_lm: usize,
    pub depth: usize,
    pub text_vocab: usize,
    pub answer_vocab: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Default dimensions for a world.
    pub fn for_world(world: &WorldConfig, init_seed: u64) -> Self {
        Self {
            d_img: world.d_img,
            d: 32,
            d_lm: 32,
            depth: 2,
            text_vocab: world.text_vocab(),
            answer_vocab: world.answer_vocab,
            init_seed,
        }
    }
}

/// A layer that can carry an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerId {
    Encoder(usize),
    Projector,
}

impl LayerId {
    pub fn name(&self) -> String {
        match self {
            LayerId::Encoder(i) => format!("enc.{i}"),
            LayerId::Projector => "proj".to_string(),
        }
    }

    pub fn parse(s: &str) -> Option<LayerId> {
        if s == "proj" {
            return Some(LayerId::Projector);
        }
        s.strip_prefix("enc.")?.parse().ok().map(LayerId::Encoder)
    }
}

impl std::fmt::Display for LayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

/// How the adapter `A` matrices were initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// `A = U_perpᵀ` from the retain-set covariance, frozen.
    NullSpace,
    /// `A = Qᵀ` for a random orthonormal `Q`, frozen.
    RandomSubspace,
    /// Conventional LoRA: random `A`, trained together with `B`.
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoraAdapter {
    pub layer: LayerId,
    pub a: ParamId,
    pub b: ParamId,
}

/// Which parameters receive gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainScope {
    /// Everything except adapters (memorization stage).
    AllBase,
    /// Visual module base weights only.
    VisualBase,
    /// Adapter `B` matrices only.
    AdapterB,
    /// Adapter `A` and `B` matrices.
    AdapterAB,
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    w_in: ParamId,
    encoder: Vec<ParamId>,
    projector: ParamId,
    embed: ParamId,
    body: [ParamId; 2],
    head: ParamId,
    adapters: Vec<LoraAdapter>,
    adapter_kind: Option<AdapterKind>,
}

/// Node handles for one VQA forward pass on a tape.
#[derive(Clone, Copy, Debug)]
pub struct VqaNodes {
    /// Token-level IVRs, `patches × d_lm`.
    pub h: NodeId,
    /// Pooled IVR, `1 × d_lm`.
    pub z: NodeId,
    pub logits: NodeId,
}

fn uniform(rows: usize, cols: usize, bound: f64, r: &mut impl Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| r.random_range(-bound..bound)).collect(),
    )
}

impl ToyModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.depth == 0 || config.d == 0 || config.d_lm == 0 || config.d_img == 0 {
            return Err(ModelError::Config("dimensions and depth must be >= 1".into()));
        }
        if config.text_vocab == 0 || config.answer_vocab == 0 {
            return Err(ModelError::Config("vocabularies must be non-empty".into()));
        }
        let mut r = rng::stream(config.init_seed, "model-init");
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let (d, d_lm, d_img) = (config.d, config.d_lm, config.d_img);
        let mut params = ParamStore::new();
        let w_in = params.insert("visual.w_in", uniform(d, d_img, fan(d_img), &mut r), true);
        let encoder = (0..config.depth)
            .map(|i| params.insert(format!("visual.enc.{i}"), uniform(d, d, fan(d), &mut r), true))
            .collect();
        let projector = params.insert("visual.proj", uniform(d_lm, d, fan(d), &mut r), true);
        let embed = params.insert(
            "lm.embed",
            uniform(config.text_vocab, d_lm, 1.0, &mut r),
            true,
        );
        let body = [
            params.insert("lm.body.0", uniform(d_lm, d_lm, fan(d_lm), &mut r), true),
            params.insert("lm.body.1", uniform(d_lm, d_lm, fan(d_lm), &mut r), true),
        ];
        let head = params.insert(
            "lm.head",
            uniform(d_lm, config.answer_vocab, fan(d_lm), &mut r),
            true,
        );
        Ok(Self {
            config,
            params,
            w_in,
            encoder,
            projector,
            embed,
            body,
            head,
            adapters: Vec::new(),
            adapter_kind: None,
        })
    }

    pub fn adapted_layers(&self) -> Vec<LayerId> {
        (0..self.config.depth)
            .map(LayerId::Encoder)
            .chain(std::iter::once(LayerId::Projector))
            .collect()
    }

    pub fn layer_weight(&self, layer: LayerId) -> ParamId {
        match layer {
            LayerId::Encoder(i) => self.encoder[i],
            LayerId::Projector => self.projector,
        }
    }

    /// `(d_in, d_out)` of an adaptable layer.
    pub fn layer_dims(&self, layer: LayerId) -> (usize, usize) {
        let w = self.params.value(self.layer_weight(layer));
        (w.cols(), w.rows())
    }

    pub fn visual_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_in];
        ids.extend(&self.encoder);
        ids.push(self.projector);
        ids
    }

    pub fn lm_param_ids(&self) -> Vec<ParamId> {
        vec![self.embed, self.body[0], self.body[1], self.head]
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapter_kind(&self) -> Option<AdapterKind> {
        self.adapter_kind
    }

    pub fn adapter_rank(&self) -> Option<usize> {
        self.adapters.first().map(|a| self.params.value(a.a).rows())
    }

    pub fn adapter(&self, layer: LayerId) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.layer == layer)
    }

    /// Installs adapters with the given `A` matrices and `B = 0`.
    ///
    /// Every adaptable layer must be covered exactly once.
    pub fn attach_adapters(&mut self, a_mats: Vec<(LayerId, Matrix)>, kind: AdapterKind) -> Result<()> {
        let mut layers: Vec<LayerId> = a_mats.iter().map(|(l, _)| *l).collect();
        layers.sort();
        if layers != self.adapted_layers() {
            return Err(ModelError::Config(format!(
                "adapter layers {layers:?} do not match model layers {:?}",
                self.adapted_layers()
            )));
        }
        let rank = a_mats[0].1.rows();
        let mut adapters = Vec::with_capacity(a_mats.len());
        for (layer, a) in a_mats {
            let (d_in, d_out) = self.layer_dims(layer);
            if a.cols() != d_in || a.rows() != rank || rank == 0 || rank >= d_in.max(2) {
                return Err(ModelError::Config(format!(
                    "adapter A for {layer} has shape {:?}, expected ({rank}, {d_in}) with 1 <= r < {d_in}",
                    a.shape()
                )));
            }
            let a_id = self.params.insert(format!("lora.{}.A", layer.name()), a, false);
            let b_id = self.params.insert(
                format!("lora.{}.B", layer.name()),
                Matrix::zeros(d_out, rank),
                true,
            );
            adapters.push(LoraAdapter {
                layer,
                a: a_id,
                b: b_id,
            });
        }
        adapters.sort_by_key(|a| a.layer);
        self.adapters = adapters;
        self.adapter_kind = Some(kind);
        Ok(())
    }

    pub fn set_train_scope(&mut self, scope: TrainScope) {
        self.params.freeze_all();
        let ids: Vec<ParamId> = match scope {
            TrainScope::AllBase => {
                let mut v = self.visual_param_ids();
                v.extend(self.lm_param_ids());
                v
            }
            TrainScope::VisualBase => self.visual_param_ids(),
            TrainScope::AdapterB => self.adapters.iter().map(|a| a.b).collect(),
            TrainScope::AdapterAB => self.adapters.iter().flat_map(|a| [a.a, a.b]).collect(),
            TrainScope::Frozen => Vec::new(),
        };
        for id in ids {
            self.params.set_trainable(id, true);
        }
    }

    fn check_image(&self, image: &Matrix) -> Result<()> {
        if image.cols() != self.config.d_img || image.rows() == 0 {
            return Err(ModelError::ImageShape {
                found: image.shape(),
                expected_cols: self.config.d_img,
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyQuestion);
        }
        for &t in tokens {
            if t as usize >= self.config.text_vocab {
                return Err(ModelError::InvalidToken {
                    token: t,
                    vocab: self.config.text_vocab,
                });
            }
        }
        Ok(())
    }

    /// `x Wᵀ (+ (x Aᵀ) Bᵀ)` for a batch of row activations.
    fn layer_on_tape(&self, tape: &mut Tape, x: NodeId, layer: LayerId, adapters: bool) -> Result<NodeId> {
        let w = tape.param(&self.params, self.layer_weight(layer));
        let mut y = tape.matmul_nt(x, w)?;
        if adapters {
            if let Some(ad) = self.adapter(layer) {
                let a = tape.param(&self.params, ad.a);
                let b = tape.param(&self.params, ad.b);
                let ax = tape.matmul_nt(x, a)?;
                let bax = tape.matmul_nt(ax, b)?;
                y = tape.add(y, bax)?;
            }
        }
        Ok(y)
    }

    /// Token-level IVRs on a tape; pushes each adaptable layer's input node
    /// onto `trace` when given.
    pub fn visual_on_tape(
        &self,
        tape: &mut Tape,
        image: &Matrix,
        adapters: bool,
        mut trace: Option<&mut Vec<(LayerId, NodeId)>>,
    ) -> Result<NodeId> {
        self.check_image(image)?;
        let x = tape.constant(image.clone());
        let w_in = tape.param(&self.params, self.w_in);
        let mut e = tape.matmul_nt(x, w_in)?;
        for i in 0..self.config.depth {
            if let Some(t) = trace.as_deref_mut() {
                t.push((LayerId::Encoder(i), e));
            }
            let pre = self.layer_on_tape(tape, e, LayerId::Encoder(i), adapters)?;
            e = tape.tanh(pre);
        }
        if let Some(t) = trace {
            t.push((LayerId::Projector, e));
        }
        self.layer_on_tape(tape, e, LayerId::Projector, adapters)
    }

    /// Answer logits from a question whose image slot (if any) holds `visual`.
    pub fn lm_on_tape(&self, tape: &mut Tape, visual: Option<NodeId>, tokens: &[u32]) -> Result<NodeId> {
        self.check_tokens(tokens)?;
        let image_slots = tokens.iter().filter(|&&t| t == IMAGE_TOKEN).count();
        match (visual.is_some(), image_slots) {
            (true, 1) | (false, 0) => {}
            (true, _) => return Err(ModelError::ImageTokenCount),
            (false, _) => return Err(ModelError::UnexpectedImageToken),
        }
        let mut counts = Matrix::zeros(1, self.config.text_vocab);
        for &t in tokens.iter().filter(|&&t| t != IMAGE_TOKEN) {
            counts[(0, t as usize)] += 1.0;
        }
        let embed = tape.param(&self.params, self.embed);
        let mut fused = if tokens.len() > image_slots {
            let c = tape.constant(counts);
            Some(tape.matmul(c, embed)?)
        } else {
            None
        };
        if let Some(z) = visual {
            fused = Some(match fused {
                Some(f) => tape.add(z, f)?,
                None => z,
            });
        }
        let fused = fused.expect("question is non-empty");
        let pooled = tape.scale(fused, 1.0 / tokens.len() as f64);
        let mut u = pooled;
        for &w in &self.body {
            let wn = tape.param(&self.params, w);
            let pre = tape.matmul_nt(u, wn)?;
            u = tape.tanh(pre);
        }
        let head = tape.param(&self.params, self.head);
        Ok(tape.matmul(u, head)?)
    }

    pub fn vqa_on_tape(&self, tape: &mut Tape, image: &Matrix, tokens: &[u32], adapters: bool) -> Result<VqaNodes> {
        if tokens.iter().filter(|&&t| t == IMAGE_TOKEN).count() != 1 {
            return Err(ModelError::ImageTokenCount);
        }
        let h = self.visual_on_tape(tape, image, adapters, None)?;
        let z = tape.row_mean(h);
        let logits = self.lm_on_tape(tape, Some(z), tokens)?;
        Ok(VqaNodes { h, z, logits })
    }

    pub fn qa_on_tape(&self, tape: &mut Tape, tokens: &[u32]) -> Result<NodeId> {
        self.lm_on_tape(tape, None, tokens)
    }

    pub fn forward_vqa(&self, image: &Matrix, tokens: &[u32], adapters_enabled: bool) -> Result<Matrix> {
        let mut tape = Tape::new();
        let n = self.vqa_on_tape(&mut tape, image, tokens, adapters_enabled)?;
        Ok(tape.value(n.logits).clone())
    }

    pub fn forward_qa(&self, tokens: &[u32]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let n = self.qa_on_tape(&mut tape, tokens)?;
        Ok(tape.value(n).clone())
    }

    /// Logits for a world sample, dispatching on its modality.
    pub fn forward_sample(&self, sample: &Sample, adapters_enabled: bool) -> Result<Matrix> {
        match &sample.image {
            Some(img) => self.forward_vqa(img, &sample.question_tokens, adapters_enabled),
            None => self.forward_qa(&sample.question_tokens),
        }
    }

    /// Token-level IVRs `H` and their mean `z`.
    pub fn extract_ivr(&self, image: &Matrix, adapters_enabled: bool) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let h = self.visual_on_tape(&mut tape, image, adapters_enabled, None)?;
        let z = tape.row_mean(h);
        Ok((tape.value(h).clone(), tape.value(z).clone()))
    }

    /// Inputs to every adaptable layer for one image.
    pub fn layer_inputs(&self, image: &Matrix, adapters_enabled: bool) -> Result<Vec<(LayerId, Matrix)>> {
        let mut tape = Tape::new();
        let mut trace = Vec::new();
        self.visual_on_tape(&mut tape, image, adapters_enabled, Some(&mut trace))?;
        Ok(trace
            .into_iter()
            .map(|(l, n)| (l, tape.value(n).clone()))
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.encode().expect("in-memory encoding cannot fail")
    }

    fn encode(&self) -> codec::Result<Vec<u8>> {
        let meta = CheckpointMeta {
            model: self.config.clone(),
            adapter_kind: self.adapter_kind,
            adapter_layers: self.adapters.iter().map(|a| a.layer.name()).collect(),
        };
        let mut w = ContainerWriter::new(CHECKPOINT_MAGIC);
        w.section(serde_json::to_string(&meta)?.as_bytes());
        let mut buf = Vec::new();
        buf.put_usize(self.params.len())?;
        for (_, p) in self.params.iter() {
            buf.put_str(&p.name)?;
            buf.push(u8::from(p.trainable));
            codec::write_matrix(&mut buf, &p.value)?;
        }
        w.section(&buf);
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = codec::read_container(bytes, CHECKPOINT_MAGIC)?;
        let [meta, tensors] = sections[..] else {
            return Err(CodecError::Malformed(format!(
                "checkpoint has {} sections, expected 2",
                sections.len()
            ))
            .into());
        };
        let meta: CheckpointMeta = serde_json::from_slice(meta).map_err(CodecError::from)?;
        let mut model = ToyModel::new(meta.model)?;
        let mut r = Cursor::new(tensors);
        let n = r.get_usize()?;
        let mut loaded = ParamStore::new();
        for _ in 0..n {
            let name = r.get_str()?;
            let trainable = r.get_u8()? != 0;
            let value = codec::read_matrix(&mut r)?;
            loaded.insert(name, value, trainable);
        }
        for (_, p) in model.params.clone().iter() {
            let id = loaded.id(&p.name)?;
            if loaded.value(id).shape() != p.value.shape() {
                return Err(ModelError::Config(format!("tensor {} has wrong shape", p.name)));
            }
        }
        let mut adapters = Vec::new();
        for layer_name in &meta.adapter_layers {
            let layer = LayerId::parse(layer_name)
                .ok_or_else(|| ModelError::Config(format!("bad adapter layer {layer_name}")))?;
            adapters.push(LoraAdapter {
                layer,
                a: loaded.id(&format!("lora.{layer_name}.A"))?,
                b: loaded.id(&format!("lora.{layer_name}.B"))?,
            });
        }
        model.w_in = loaded.id("visual.w_in")?;
        model.encoder = (0..model.config.depth)
            .map(|i| loaded.id(&format!("visual.enc.{i}")))
            .collect::<std::result::Result<_, _>>()?;
        model.projector = loaded.id("visual.proj")?;
        model.embed = loaded.id("lm.embed")?;
        model.body = [loaded.id("lm.body.0")?, loaded.id("lm.body.1")?];
        model.head = loaded.id("lm.head")?;
        model.params = loaded;
        model.adapters = adapters;
        model.adapter_kind = meta.adapter_kind;
        Ok(model)
    }

    /// Bit-level equality of all parameter values.
    pub fn same_weights(&self, other: &ToyModel) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|((_, a), (_, b))| a.name == b.name && bits_equal(&a.value, &b.value))
    }
}

pub fn bits_equal(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape()
        && a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    adapter_kind: Option<AdapterKind>,
    adapter_layers: Vec<String>,
}

/// `W x + B (A x)` for a single activation vector, never forming `BA`.
pub fn adapted_layer_forward(w: &Matrix, a: &Matrix, b: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    let xv = Matrix::from_vec(x.len(), 1, x.to_vec());
    if b.cols() != a.rows() || b.rows() != w.rows() || a.cols() != w.cols() {
        return Err(LinalgError::DimensionMismatch {
            op: "adapted_layer_forward",
            left: a.shape(),
            right: b.shape(),
        }
        .into());
    }
    let base = linalg::matmul(w, &xv)?;
    let ax = linalg::matmul(a, &xv)?;
    let bax = linalg::matmul(b, &ax)?;
    Ok(base.add(&bax)?.into_vec())
}
