//! Synthetic entity universe.
//!
//! Each entity has a glyph (a `patches × d_img` image) and one fact per
//! attribute. Every fact is probed twice: as a VQA sample whose question is
//! `[IMG, attribute]` and carries the glyph, and as a QA sample whose question
//! is `[name, attribute]` and carries no image. Only the glyph identifies the
//! entity in VQA, and only the name does in QA.

use std::collections::BTreeSet;
use std::io::Cursor;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecError, ContainerWriter, ReadExt, WriteExt};
use crate::linalg::Matrix;
use crate::rng;

pub const WORLD_MAGIC: [u8; 4] = *b"NSUW";

/// Text vocabulary id of the image placeholder token.
pub const IMAGE_TOKEN: u32 = 0;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

pub type Result<T> = std::result::Result<T, WorldError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_entities: usize,
    pub n_attributes: usize,
    pub values_per_attribute: usize,
    /// Size of the model's answer head; every value id must fit in it.
    pub answer_vocab: usize,
    pub forget_fraction: f64,
    pub realworld_fraction: f64,
    pub patches: usize,
    pub d_img: usize,
    pub noise_sigma: f64,
    /// Constant added to every pixel of real-world glyphs.
    pub realworld_shift: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_entities: 60,
            n_attributes: 4,
            values_per_attribute: 8,
            answer_vocab: 8,
            forget_fraction: 0.1,
            realworld_fraction: 0.15,
            patches: 16,
            d_img: 16,
            noise_sigma: 0.1,
            realworld_shift: 0.5,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WorldError::Config(m));
        if self.n_entities == 0
            || self.n_attributes == 0
            || self.values_per_attribute == 0
            || self.patches == 0
            || self.d_img == 0
        {
            return bad("all counts must be >= 1".into());
        }
        for (name, f) in [
            ("forget_fraction", self.forget_fraction),
            ("realworld_fraction", self.realworld_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {f}"));
            }
        }
        if self.forget_fraction + self.realworld_fraction >= 1.0 {
            return bad("forget_fraction + realworld_fraction must be < 1".into());
        }
        if self.values_per_attribute > self.answer_vocab {
            return bad(format!(
                "values_per_attribute {} overflows answer vocabulary {}",
                self.values_per_attribute, self.answer_vocab
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.realworld_shift.is_finite() {
            return bad("noise_sigma must be >= 0 and realworld_shift finite".into());
        }
        let (f, rw, retain) = self.split_sizes();
        if f == 0 || rw == 0 || retain == 0 {
            return bad(format!(
                "split sizes forget={f} realworld={rw} retain={retain} must all be >= 1"
            ));
        }
        Ok(())
    }

    /// `(forget, realworld, retain)` entity counts.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_entities as f64;
        let f = (self.forget_fraction * n).round() as usize;
        let rw = (self.realworld_fraction * n).round() as usize;
        (f, rw, self.n_entities.saturating_sub(f + rw))
    }

    /// Text vocabulary: image token, attribute tokens, then entity names.
    pub fn text_vocab(&self) -> usize {
        1 + self.n_attributes + self.n_entities
    }

    pub fn attribute_token(&self, attribute: usize) -> u32 {
        1 + attribute as u32
    }

    pub fn name_token(&self, entity: usize) -> u32 {
        (1 + self.n_attributes + entity) as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Vqa,
    Qa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Forget,
    Retain,
    RealWorld,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Forget, Split::Retain, Split::RealWorld];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    pub name_token: u32,
    pub glyph_seed: u64,
    /// `(attribute_id, value_id)`, one per attribute slot in order.
    pub facts: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub entity_id: usize,
    pub attribute: usize,
    pub modality: Modality,
    pub question_tokens: Vec<u32>,
    pub image: Option<Matrix>,
    pub answer_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub entities: Vec<Entity>,
    pub samples: Vec<Sample>,
    pub forget_entity_ids: Vec<usize>,
    pub retain_entity_ids: Vec<usize>,
    pub realworld_entity_ids: Vec<usize>,
    pub continual_tasks: Option<Vec<Vec<usize>>>,
}

/// Deterministic `patches × d_img` glyph.
///
/// The base pattern is a ±1 matrix determined by `glyph_seed`; Gaussian noise
/// of scale `noise_sigma` drawn from `sample_seed` is added on top.
pub fn render_glyph(
    glyph_seed: u64,
    patches: usize,
    d_img: usize,
    noise_sigma: f64,
    sample_seed: u64,
) -> Matrix {
    let mut base = rng::stream(glyph_seed, "glyph-base");
    let mut noise = rng::stream(sample_seed, "glyph-noise");
    let data = (0..patches * d_img)
        .map(|_| {
            let sign = if base.random::<bool>() { 1.0 } else { -1.0 };
            let eps: f64 = StandardNormal.sample(&mut noise);
            sign + noise_sigma * eps
        })
        .collect();
    Matrix::from_vec(patches, d_img, data)
}

pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let seed = config.seed;
    let mut fact_rng = rng::stream(seed, "facts");
    let entities: Vec<Entity> = (0..config.n_entities)
        .map(|id| Entity {
            id,
            name_token: config.name_token(id),
            glyph_seed: rng::derive_key(seed, "glyph", id as u64),
            facts: (0..config.n_attributes)
                .map(|a| (a, fact_rng.random_range(0..config.values_per_attribute)))
                .collect(),
        })
        .collect();

    let mut order: Vec<usize> = (0..config.n_entities).collect();
    order.shuffle(&mut rng::stream(seed, "splits"));
    let (n_forget, n_rw, _) = config.split_sizes();
    let mut forget: Vec<usize> = order[..n_forget].to_vec();
    let mut realworld: Vec<usize> = order[n_forget..n_forget + n_rw].to_vec();
    let mut retain: Vec<usize> = order[n_forget + n_rw..].to_vec();
    forget.sort_unstable();
    realworld.sort_unstable();
    retain.sort_unstable();

    let split_of = |id: usize| {
        if forget.binary_search(&id).is_ok() {
            Split::Forget
        } else if realworld.binary_search(&id).is_ok() {
            Split::RealWorld
        } else {
            Split::Retain
        }
    };

    let mut samples = Vec::with_capacity(2 * config.n_entities * config.n_attributes);
    for e in &entities {
        let split = split_of(e.id);
        for &(attribute, value) in &e.facts {
            let attr_token = config.attribute_token(attribute);
            let sample_seed =
                rng::derive_key(seed, "render", (e.id * config.n_attributes + attribute) as u64);
            let mut image = render_glyph(
                e.glyph_seed,
                config.patches,
                config.d_img,
                config.noise_sigma,
                sample_seed,
            );
            if split == Split::RealWorld {
                image = image.map(|v| v + config.realworld_shift);
            }
            samples.push(Sample {
                entity_id: e.id,
                attribute,
                modality: Modality::Vqa,
                question_tokens: vec![IMAGE_TOKEN, attr_token],
                image: Some(image),
                answer_id: value,
                split,
            });
            samples.push(Sample {
                entity_id: e.id,
                attribute,
                modality: Modality::Qa,
                question_tokens: vec![e.name_token, attr_token],
                image: None,
                answer_id: value,
                split,
            });
        }
    }

    Ok(World {
        config: config.clone(),
        entities,
        samples,
        forget_entity_ids: forget,
        retain_entity_ids: retain,
        realworld_entity_ids: realworld,
        continual_tasks: None,
    })
}

/// Splits the forget entities into `n_tasks` disjoint, near-equal tasks.
pub fn partition_continual(world: &World, n_tasks: usize, seed: u64) -> Result<World> {
    let n = world.forget_entity_ids.len();
    if n_tasks == 0 || n_tasks > n {
        return Err(WorldError::Config(format!(
            "cannot split {n} forget entities into {n_tasks} tasks"
        )));
    }
    let mut ids = world.forget_entity_ids.clone();
    ids.shuffle(&mut rng::stream(seed, "continual-partition"));
    let base = n / n_tasks;
    let extra = n % n_tasks;
    let mut tasks = Vec::with_capacity(n_tasks);
    let mut start = 0;
    for t in 0..n_tasks {
        let len = base + usize::from(t < extra);
        let mut task = ids[start..start + len].to_vec();
        task.sort_unstable();
        tasks.push(task);
        start += len;
    }
    let mut out = world.clone();
    out.continual_tasks = Some(tasks);
    Ok(out)
}

impl World {
    pub fn text_vocab(&self) -> usize {
        self.config.text_vocab()
    }

    pub fn answer_vocab(&self) -> usize {
        self.config.answer_vocab
    }

    pub fn entity_ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Forget => &self.forget_entity_ids,
            Split::Retain => &self.retain_entity_ids,
            Split::RealWorld => &self.realworld_entity_ids,
        }
    }

    pub fn samples_of(&self, split: Split, modality: Modality) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.split == split && s.modality == modality)
            .collect()
    }

    /// Samples of the given modality whose entity is in `ids`.
    pub fn samples_for_entities(&self, ids: &[usize], modality: Modality) -> Vec<&Sample> {
        let set: BTreeSet<usize> = ids.iter().copied().collect();
        self.samples
            .iter()
            .filter(|s| s.modality == modality && set.contains(&s.entity_id))
            .collect()
    }

    pub fn fact(&self, entity: usize, attribute: usize) -> Option<usize> {
        self.entities
            .get(entity)?
            .facts
            .iter()
            .find(|(a, _)| *a == attribute)
            .map(|(_, v)| *v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.encode().expect("in-memory encoding cannot fail")
    }

    fn encode(&self) -> codec::Result<Vec<u8>> {
        let mut w = ContainerWriter::new(WORLD_MAGIC);
        w.section(serde_json::to_string(&self.config)?.as_bytes());

        let mut buf = Vec::new();
        buf.put_usize(self.entities.len())?;
        for e in &self.entities {
            buf.put_usize(e.id)?;
            buf.put_u32(e.name_token)?;
            buf.put_u64(e.glyph_seed)?;
            buf.put_usize(e.facts.len())?;
            for &(a, v) in &e.facts {
                buf.put_usize(a)?;
                buf.put_usize(v)?;
            }
        }
        w.section(&buf);

        let mut buf = Vec::new();
        buf.put_usize(self.samples.len())?;
        for s in &self.samples {
            buf.put_usize(s.entity_id)?;
            buf.put_usize(s.attribute)?;
            buf.push(match s.modality {
                Modality::Vqa => 0,
                Modality::Qa => 1,
            });
            buf.push(match s.split {
                Split::Forget => 0,
                Split::Retain => 1,
                Split::RealWorld => 2,
            });
            buf.put_usize(s.answer_id)?;
            buf.put_usize(s.question_tokens.len())?;
            for t in &s.question_tokens {
                buf.put_u32(*t)?;
            }
            match &s.image {
                Some(m) => {
                    buf.push(1);
                    codec::write_matrix(&mut buf, m)?;
                }
                None => buf.push(0),
            }
        }
        w.section(&buf);

        let mut buf = Vec::new();
        for ids in [
            &self.forget_entity_ids,
            &self.retain_entity_ids,
            &self.realworld_entity_ids,
        ] {
            put_ids(&mut buf, ids)?;
        }
        w.section(&buf);

        let mut buf = Vec::new();
        match &self.continual_tasks {
            Some(tasks) => {
                buf.put_usize(tasks.len())?;
                for t in tasks {
                    put_ids(&mut buf, t)?;
                }
            }
            None => buf.put_u32(u32::MAX)?,
        }
        w.section(&buf);
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<World> {
        let sections = codec::read_container(bytes, WORLD_MAGIC)?;
        let [config, entities, samples, splits, tasks] = sections[..] else {
            return Err(malformed(format!("expected 5 sections, found {}", sections.len())));
        };
        let config: WorldConfig = serde_json::from_slice(config).map_err(CodecError::from)?;

        let mut r = Cursor::new(entities);
        let n = r.get_usize()?;
        let mut ents = Vec::with_capacity(n);
        for _ in 0..n {
            let id = r.get_usize()?;
            let name_token = r.get_u32()?;
            let glyph_seed = r.get_u64()?;
            let nf = r.get_usize()?;
            let mut facts = Vec::with_capacity(nf);
            for _ in 0..nf {
                facts.push((r.get_usize()?, r.get_usize()?));
            }
            ents.push(Entity {
                id,
                name_token,
                glyph_seed,
                facts,
            });
        }

        let mut r = Cursor::new(samples);
        let n = r.get_usize()?;
        let mut smp = Vec::with_capacity(n);
        for _ in 0..n {
            let entity_id = r.get_usize()?;
            let attribute = r.get_usize()?;
            let modality = match r.get_u8()? {
                0 => Modality::Vqa,
                1 => Modality::Qa,
                m => return Err(malformed(format!("bad modality tag {m}"))),
            };
            let split = match r.get_u8()? {
                0 => Split::Forget,
                1 => Split::Retain,
                2 => Split::RealWorld,
                s => return Err(malformed(format!("bad split tag {s}"))),
            };
            let answer_id = r.get_usize()?;
            let nt = r.get_usize()?;
            let mut question_tokens = Vec::with_capacity(nt);
            for _ in 0..nt {
                question_tokens.push(r.get_u32()?);
            }
            let image = match r.get_u8()? {
                0 => None,
                1 => Some(codec::read_matrix(&mut r)?),
                t => return Err(malformed(format!("bad image tag {t}"))),
            };
            smp.push(Sample {
                entity_id,
                attribute,
                modality,
                question_tokens,
                image,
                answer_id,
                split,
            });
        }

        let mut r = Cursor::new(splits);
        let forget_entity_ids = get_ids(&mut r)?;
        let retain_entity_ids = get_ids(&mut r)?;
        let realworld_entity_ids = get_ids(&mut r)?;

        let mut r = Cursor::new(tasks);
        let nt = r.get_u32()?;
        let continual_tasks = if nt == u32::MAX {
            None
        } else {
            Some((0..nt).map(|_| get_ids(&mut r)).collect::<codec::Result<Vec<_>>>()?)
        };

        Ok(World {
            config,
            entities: ents,
            samples: smp,
            forget_entity_ids,
            retain_entity_ids,
            realworld_entity_ids,
            continual_tasks,
        })
    }
}

fn malformed(msg: String) -> WorldError {
    WorldError::Codec(CodecError::Malformed(msg))
}

fn put_ids(buf: &mut Vec<u8>, ids: &[usize]) -> codec::Result<()> {
    buf.put_usize(ids.len())?;
    for &id in ids {
        buf.put_usize(id)?;
    }
    Ok(())
}

fn get_ids(r: &mut Cursor<&[u8]>) -> codec::Result<Vec<usize>> {
    let n = r.get_usize()?;
    (0..n).map(|_| r.get_usize()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            n_entities: 20,
            forget_fraction: 0.2,
            realworld_fraction: 0.2,
            seed: 3,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = generate_world(&WorldConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn default_forget_split_size() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        assert_eq!(w.forget_entity_ids.len(), 6);
        assert_eq!(w.realworld_entity_ids.len(), 9);
        assert_eq!(w.retain_entity_ids.len(), 45);
    }

    #[test]
    fn answers_match_fact_table() {
        let w = generate_world(&small()).unwrap();
        let mut table = vec![vec![usize::MAX; w.config.n_attributes]; w.config.n_entities];
        for e in &w.entities {
            for &(a, v) in &e.facts {
                table[e.id][a] = v;
            }
        }
        assert_eq!(w.samples.len(), 2 * 20 * 4);
        for s in &w.samples {
            assert_eq!(s.answer_id, table[s.entity_id][s.attribute]);
        }
    }

    #[test]
    fn modality_structure() {
        let w = generate_world(&small()).unwrap();
        for s in &w.samples {
            let name = w.entities[s.entity_id].name_token;
            match s.modality {
                Modality::Vqa => {
                    assert!(s.image.is_some());
                    assert!(!s.question_tokens.contains(&name));
                    assert_eq!(s.question_tokens[0], IMAGE_TOKEN);
                }
                Modality::Qa => {
                    assert!(s.image.is_none());
                    assert!(s.question_tokens.contains(&name));
                    assert!(!s.question_tokens.contains(&IMAGE_TOKEN));
                }
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let w = generate_world(&small()).unwrap();
        let mut all: Vec<usize> = w
            .forget_entity_ids
            .iter()
            .chain(&w.retain_entity_ids)
            .chain(&w.realworld_entity_ids)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn config_errors() {
        let overflow = WorldConfig {
            values_per_attribute: 9,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&overflow), Err(WorldError::Config(_))));
        let fractions = WorldConfig {
            forget_fraction: 0.6,
            realworld_fraction: 0.4,
            ..WorldConfig::default()
        };
        assert!(generate_world(&fractions).is_err());
        let zero = WorldConfig {
            forget_fraction: 0.0,
            ..WorldConfig::default()
        };
        assert!(generate_world(&zero).is_err());
    }

    #[test]
    fn noiseless_renders_are_identical() {
        let a = render_glyph(42, 4, 5, 0.0, 1);
        let b = render_glyph(42, 4, 5, 0.0, 2);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() == 1.0));
    }

    #[test]
    fn distinct_glyph_seeds_give_distinct_patterns() {
        for i in 0..100u64 {
            let a = render_glyph(rng::derive_key(9, "pair-a", i), 16, 16, 0.0, 0);
            let b = render_glyph(rng::derive_key(9, "pair-b", i), 16, 16, 0.0, 0);
            assert_ne!(a, b);
        }
    }

    #[test]
    fn noisy_renders_average_to_base() {
        let sigma = 0.5;
        let base = render_glyph(5, 3, 4, 0.0, 0);
        let n = 1000;
        let mut mean = Matrix::zeros(3, 4);
        for s in 0..n {
            mean.axpy(1.0 / n as f64, &render_glyph(5, 3, 4, sigma, s)).unwrap();
        }
        let bound = 3.0 * sigma / (n as f64).sqrt();
        assert!(mean.max_abs_diff(&base) <= bound);
    }

    #[test]
    fn continual_partition() {
        let cfg = WorldConfig {
            forget_fraction: 0.25,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg).unwrap();
        assert_eq!(w.forget_entity_ids.len(), 15);
        let one = partition_continual(&w, 1, 0).unwrap();
        assert_eq!(one.continual_tasks.unwrap(), vec![w.forget_entity_ids.clone()]);
        let five = partition_continual(&w, 5, 0).unwrap();
        let tasks = five.continual_tasks.unwrap();
        assert_eq!(tasks.iter().map(Vec::len).collect::<Vec<_>>(), vec![3; 5]);
        for n_tasks in 1..=15 {
            let p = partition_continual(&w, n_tasks, n_tasks as u64).unwrap();
            let tasks = p.continual_tasks.unwrap();
            let union: BTreeSet<usize> = tasks.iter().flatten().copied().collect();
            let total: usize = tasks.iter().map(Vec::len).sum();
            assert_eq!(total, union.len());
            assert_eq!(union, w.forget_entity_ids.iter().copied().collect());
            let sizes: Vec<usize> = tasks.iter().map(Vec::len).collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
        assert!(partition_continual(&w, 16, 0).is_err());
        assert!(partition_continual(&w, 0, 0).is_err());
    }

    #[test]
    fn binary_and_json_round_trip() {
        let w = partition_continual(&generate_world(&small()).unwrap(), 2, 1).unwrap();
        let bytes = w.to_bytes();
        assert_eq!(&bytes[..4], b"NSUW");
        let back = World::from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bytes(), bytes);
        let json = serde_json::to_string(&w).unwrap();
        let from_json: World = serde_json::from_str(&json).unwrap();
        assert_eq!(from_json, w);
    }
}
