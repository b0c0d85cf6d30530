//! Six-slice evaluation (Forget / Retain / Real-world × VQA / QA), ROUGE-L
//! and continual-run exports.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ToyModel};
use crate::world::{Modality, Sample, Split, World};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty evaluation slice: {0}")]
    EmptySlice(String),
    #[error("slice mixes VQA and QA samples")]
    MixedModality,
    #[error("rouge-l needs non-empty sequences")]
    EmptySequence,
    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Serializes an `f64` as a JSON number with 17 significant digits.
pub mod float17 {
    use serde::ser::Error;
    use serde::{Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        let raw = serde_json::value::RawValue::from_string(super::fmt_f64(*v)).map_err(S::Error::custom)?;
        raw.serialize(s)
    }
}

/// Index of the largest logit; ties go to the smallest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &ToyModel, sample: &Sample, adapters_enabled: bool) -> Result<usize> {
    Ok(argmax(model.forward_sample(sample, adapters_enabled)?.data()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceCount {
    pub correct: usize,
    pub total: usize,
}

impl SliceCount {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

pub fn count_correct(model: &ToyModel, samples: &[&Sample], adapters_enabled: bool) -> Result<SliceCount> {
    let Some(first) = samples.first() else {
        return Err(EvalError::EmptySlice("no samples".into()));
    };
    if samples.iter().any(|s| s.modality != first.modality) {
        return Err(EvalError::MixedModality);
    }
    let mut correct = 0;
    for s in samples {
        if predict(model, s, adapters_enabled)? == s.answer_id {
            correct += 1;
        }
    }
    Ok(SliceCount {
        correct,
        total: samples.len(),
    })
}

/// Exact fraction of samples answered correctly.
pub fn accuracy(model: &ToyModel, samples: &[&Sample], adapters_enabled: bool) -> Result<f64> {
    Ok(count_correct(model, samples, adapters_enabled)?.accuracy())
}

/// ROUGE-L F-measure between two token sequences.
pub fn rouge_l<T: PartialEq>(reference: &[T], generated: &[T]) -> Result<f64> {
    if reference.is_empty() || generated.is_empty() {
        return Err(EvalError::EmptySequence);
    }
    let lcs = lcs_len(reference, generated);
    if lcs == 0 {
        return Ok(0.0);
    }
    let recall = lcs as f64 / reference.len() as f64;
    let precision = lcs as f64 / generated.len() as f64;
    Ok(2.0 * recall * precision / (recall + precision))
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Six accuracies plus sample counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(serialize_with = "float17::serialize")]
    pub forget_vqa: f64,
    #[serde(serialize_with = "float17::serialize")]
    pub forget_qa: f64,
    #[serde(serialize_with = "float17::serialize")]
    pub retain_vqa: f64,
    #[serde(serialize_with = "float17::serialize")]
    pub retain_qa: f64,
    #[serde(serialize_with = "float17::serialize")]
    pub rw_vqa: f64,
    #[serde(serialize_with = "float17::serialize")]
    pub rw_qa: f64,
    pub counts: SliceCounts,
    /// Mean per-entity ROUGE-L of the predicted fact sequence.
    pub rouge_l: Option<RougeReport>,
    pub stage: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceCounts {
    pub forget_vqa: SliceCount,
    pub forget_qa: SliceCount,
    pub retain_vqa: SliceCount,
    pub retain_qa: SliceCount,
    pub rw_vqa: SliceCount,
    pub rw_qa: SliceCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    #[serde(serialize_with = "float17::serialize")]
    pub forget_vqa: f64,
    #[serde(serialize_with = "float17::serialize")]
    pub forget_qa: f64,
    #[serde(serialize_with = "float17::serialize")]
    pub retain_vqa: f64,
    #[serde(serialize_with = "float17::serialize")]
    pub retain_qa: f64,
    #[serde(serialize_with = "float17::serialize")]
    pub rw_vqa: f64,
    #[serde(serialize_with = "float17::serialize")]
    pub rw_qa: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// `(name, value)` for the six accuracies in a fixed order.
    pub fn accuracies(&self) -> [(&'static str, f64); 6] {
        [
            ("forget_vqa", self.forget_vqa),
            ("forget_qa", self.forget_qa),
            ("retain_vqa", self.retain_vqa),
            ("retain_qa", self.retain_qa),
            ("rw_vqa", self.rw_vqa),
            ("rw_qa", self.rw_qa),
        ]
    }
}

fn slice_name(split: Split, modality: Modality) -> String {
    format!("{split:?}/{modality:?}")
}

/// Accuracy of one split/modality slice.
pub fn slice_accuracy(model: &ToyModel, world: &World, split: Split, modality: Modality, adapters_enabled: bool) -> Result<SliceCount> {
    let samples = world.samples_of(split, modality);
    if samples.is_empty() {
        return Err(EvalError::EmptySlice(slice_name(split, modality)));
    }
    count_correct(model, &samples, adapters_enabled)
}

/// Mean over entities of ROUGE-L between the true and predicted answer
/// sequences (one answer per attribute, in attribute order).
pub fn entity_rouge(model: &ToyModel, world: &World, entity_ids: &[usize], modality: Modality, adapters_enabled: bool) -> Result<f64> {
    if entity_ids.is_empty() {
        return Err(EvalError::EmptySlice("no entities".into()));
    }
    let mut total = 0.0;
    for &id in entity_ids {
        let mut samples = world.samples_for_entities(&[id], modality);
        samples.sort_by_key(|s| s.attribute);
        let reference: Vec<usize> = samples.iter().map(|s| s.answer_id).collect();
        let generated: Vec<usize> = samples
            .iter()
            .map(|s| predict(model, s, adapters_enabled))
            .collect::<Result<_>>()?;
        total += rouge_l(&reference, &generated)?;
    }
    Ok(total / entity_ids.len() as f64)
}

/// Full report for the unlearned model (adapters enabled).
pub fn eval_suite(model: &ToyModel, world: &World) -> Result<MetricsReport> {
    eval_suite_with(model, world, true)
}

pub fn eval_suite_with(model: &ToyModel, world: &World, adapters_enabled: bool) -> Result<MetricsReport> {
    let c = |split, modality| slice_accuracy(model, world, split, modality, adapters_enabled);
    let counts = SliceCounts {
        forget_vqa: c(Split::Forget, Modality::Vqa)?,
        forget_qa: c(Split::Forget, Modality::Qa)?,
        retain_vqa: c(Split::Retain, Modality::Vqa)?,
        retain_qa: c(Split::Retain, Modality::Qa)?,
        rw_vqa: c(Split::RealWorld, Modality::Vqa)?,
        rw_qa: c(Split::RealWorld, Modality::Qa)?,
    };
    let r = |split, modality| entity_rouge(model, world, world.entity_ids(split), modality, adapters_enabled);
    let rouge = RougeReport {
        forget_vqa: r(Split::Forget, Modality::Vqa)?,
        forget_qa: r(Split::Forget, Modality::Qa)?,
        retain_vqa: r(Split::Retain, Modality::Vqa)?,
        retain_qa: r(Split::Retain, Modality::Qa)?,
        rw_vqa: r(Split::RealWorld, Modality::Vqa)?,
        rw_qa: r(Split::RealWorld, Modality::Qa)?,
    };
    Ok(MetricsReport {
        forget_vqa: counts.forget_vqa.accuracy(),
        forget_qa: counts.forget_qa.accuracy(),
        retain_vqa: counts.retain_vqa.accuracy(),
        retain_qa: counts.retain_qa.accuracy(),
        rw_vqa: counts.rw_vqa.accuracy(),
        rw_qa: counts.rw_qa.accuracy(),
        counts,
        rouge_l: Some(rouge),
        stage: None,
    })
}

/// Forget-VQA accuracy of each task's entities.
pub fn task_forget_vqa(model: &ToyModel, world: &World, tasks: &[Vec<usize>]) -> Result<Vec<f64>> {
    tasks
        .iter()
        .map(|ids| accuracy(model, &world.samples_for_entities(ids, Modality::Vqa), true))
        .collect()
}

/// Metrics recorded after one continual stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: usize,
    pub report: MetricsReport,
    /// Forget-VQA accuracy of tasks `1..=stage`.
    pub task_forget_vqa: Vec<f64>,
}

/// Stage × task grid of Forget-VQA accuracies; entry `(s, t)` exists for `t <= s`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapMatrix {
    pub rows: Vec<Vec<Option<f64>>>,
}

impl HeatmapMatrix {
    pub fn n_stages(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        self.rows.get(stage)?.get(task).copied().flatten()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinualExport {
    pub heatmap: HeatmapMatrix,
    /// Mean Forget-VQA over tasks `1..=s` at stage `s`.
    pub cumulative_forget_vqa: Vec<f64>,
    pub retain_vqa: Vec<f64>,
    pub rw_vqa: Vec<f64>,
}

pub fn export_continual(records: &[StageMetrics]) -> ContinualExport {
    let n = records.len();
    let rows: Vec<Vec<Option<f64>>> = records
        .iter()
        .map(|r| (0..n).map(|t| r.task_forget_vqa.get(t).copied()).collect())
        .collect();
    let cumulative_forget_vqa = records
        .iter()
        .map(|r| r.task_forget_vqa.iter().sum::<f64>() / r.task_forget_vqa.len().max(1) as f64)
        .collect();
    ContinualExport {
        heatmap: HeatmapMatrix { rows },
        cumulative_forget_vqa,
        retain_vqa: records.iter().map(|r| r.report.retain_vqa).collect(),
        rw_vqa: records.iter().map(|r| r.report.rw_vqa).collect(),
    }
}

impl ContinualExport {
    /// Heatmap CSV: header `stage,task_1..task_n`, empty cells above the diagonal.
    pub fn heatmap_csv(&self) -> String {
        let n = self.heatmap.n_stages();
        let mut out = String::from("stage");
        for t in 1..=n {
            out.push_str(&format!(",task_{t}"));
        }
        out.push('\n');
        for (s, row) in self.heatmap.rows.iter().enumerate() {
            out.push_str(&(s + 1).to_string());
            for cell in row {
                out.push(',');
                if let Some(v) = cell {
                    out.push_str(&fmt_f64(*v));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Per-stage curves: cumulative forget, retain and real-world VQA.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("stage,cumulative_forget_vqa,retain_vqa,rw_vqa\n");
        for s in 0..self.retain_vqa.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s + 1,
                fmt_f64(self.cumulative_forget_vqa[s]),
                fmt_f64(self.retain_vqa[s]),
                fmt_f64(self.rw_vqa[s])
            ));
        }
        out
    }
}

/// Parses a heatmap CSV back into a matrix.
pub fn parse_heatmap_csv(text: &str) -> Result<HeatmapMatrix> {
    let mut lines = text.lines();
    lines.next().ok_or_else(|| EvalError::Csv("missing header".into()))?;
    let rows = lines
        .map(|line| {
            line.split(',')
                .skip(1)
                .map(|cell| {
                    if cell.is_empty() {
                        Ok(None)
                    } else {
                        cell.parse::<f64>()
                            .map(Some)
                            .map_err(|e| EvalError::Csv(format!("{cell}: {e}")))
                    }
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(HeatmapMatrix { rows })
}
