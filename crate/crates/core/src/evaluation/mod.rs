//! Retrieval, zero-shot and keyword measurements on a frozen model.

mod keywords;
mod retrieval;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use keywords::{
    chance_hit_rate, hit_rates, nominal_chance_level, slot_hits, top_counts, KeywordRecord, KeywordReport,
};
pub use retrieval::{
    first_match_ranks, random_baseline, recall_at_k, recall_from_ranks, DirectionReport, RetrievalReport,
    BASELINE_CONVENTION, RECALL_KS,
};

use crate::codec::encode_f32;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{vq::argmax, SpeechModel};
use crate::teachers::{CaptionSample, Dataset, TeacherBundle};

const TOP_HITS: usize = 10;

/// Eval-mode embeddings of a sample list with their image ids.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEmbedding {
    pub vectors: Vec<Vec<f64>>,
    pub image_ids: Vec<usize>,
    pub keywords: Option<Vec<Vec<usize>>>,
    pub attention: Vec<Tensor>,
}

pub fn embed_corpus(model: &SpeechModel, samples: &[&CaptionSample], teachers: &TeacherBundle) -> Result<CorpusEmbedding> {
    model.check_teachers(teachers)?;
    let e = model.embed(teachers, samples)?;
    Ok(CorpusEmbedding {
        vectors: e.vectors,
        image_ids: samples.iter().map(|s| s.image_id).collect(),
        keywords: e.keywords,
        attention: e.attention,
    })
}

fn nonempty<'a>(split: &'a Dataset, op: &'static str) -> Result<Vec<&'a CaptionSample>> {
    if split.is_empty() {
        return Err(Error::DegenerateInput {
            op,
            detail: "evaluation split has no samples".into(),
        });
    }
    Ok(split.samples.iter().collect())
}

/// Symmetric retrieval between speech queries and a deduplicated gallery of
/// `(group, vector)` pairs.
fn bidirectional(
    task: &str,
    model: &SpeechModel,
    speech: &CorpusEmbedding,
    other: &[(usize, Vec<f64>)],
    labels: [&str; 2],
) -> Result<RetrievalReport> {
    let groups: Vec<usize> = other.iter().map(|(g, _)| *g).collect();
    let vectors: Vec<Vec<f64>> = other.iter().map(|(_, v)| v.clone()).collect();
    let forward = first_match_ranks(&speech.vectors, &vectors, &speech.image_ids, &groups)?;
    let backward = first_match_ranks(&vectors, &speech.vectors, &groups, &speech.image_ids)?;
    let n_groups = groups.len();
    Ok(RetrievalReport {
        task: task.to_string(),
        model: model.kind().to_string(),
        groups: n_groups,
        baseline_convention: BASELINE_CONVENTION.to_string(),
        directions: vec![
            DirectionReport::from_ranks(labels[0], &forward, vectors.len(), n_groups),
            DirectionReport::from_ranks(labels[1], &backward, speech.vectors.len(), n_groups),
        ],
    })
}

/// Speech→image and image→speech recall@{1, 5, 10}. The image gallery holds
/// one entry per image id.
pub fn eval_image_speech(model: &SpeechModel, split: &Dataset, teachers: &TeacherBundle) -> Result<RetrievalReport> {
    let samples = nonempty(split, "eval_image_speech")?;
    let speech = embed_corpus(model, &samples, teachers)?;
    let mut images: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in &samples {
        images.entry(s.image_id).or_insert_with(|| s.image_embedding());
    }
    let gallery: Vec<(usize, Vec<f64>)> = images.into_iter().collect();
    bidirectional("image-speech", model, &speech, &gallery, ["speech->image", "image->speech"])
}

/// Speech→text and text→speech recall@{1, 5, 10} against the frozen text
/// encoder's embeddings of the captions. Captions with identical token
/// sequences are one gallery entry; success means the same image.
pub fn eval_zeroshot_speech_text(
    model: &SpeechModel,
    split: &Dataset,
    teachers: &TeacherBundle,
) -> Result<RetrievalReport> {
    let samples = nonempty(split, "eval_zeroshot_speech_text")?;
    let speech = embed_corpus(model, &samples, teachers)?;
    let mut texts: BTreeMap<(usize, Vec<usize>), Vec<f64>> = BTreeMap::new();
    for s in &samples {
        if !texts.contains_key(&(s.image_id, s.tokens.clone())) {
            let v = teachers.text_embedding(&s.tokens)?;
            texts.insert((s.image_id, s.tokens.clone()), v);
        }
    }
    let gallery: Vec<(usize, Vec<f64>)> = texts.into_iter().map(|((id, _), v)| (id, v)).collect();
    bidirectional("zeroshot speech-text", model, &speech, &gallery, ["speech->text", "text->speech"])
}

/// Keyword hit rates of a cascaded model, plus the per-sample keyword
/// records and `K × (K + T)` attention maps.
pub fn eval_keywords(
    model: &SpeechModel,
    split: &Dataset,
    teachers: &TeacherBundle,
) -> Result<(KeywordReport, Vec<Tensor>)> {
    let cascaded = model.as_cascaded("eval_keywords")?;
    let samples = nonempty(split, "eval_keywords")?;
    let emb = embed_corpus(model, &samples, teachers)?;
    let keywords = emb.keywords.expect("cascaded models report keywords");
    let k = cascaded.config().keywords;
    let mut slot_counts: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); k];
    let mut records = Vec::with_capacity(samples.len());
    for (s, kw) in samples.iter().zip(keywords) {
        let hits = slot_hits(&s.tokens, &kw);
        for (slot, (&id, &hit)) in kw.iter().zip(&hits).enumerate() {
            if hit {
                *slot_counts[slot].entry(id).or_default() += 1;
            }
        }
        records.push(KeywordRecord {
            image_id: s.image_id,
            caption_seed: s.caption_seed,
            tokens: s.tokens.clone(),
            keywords: kw,
            hits,
        });
    }
    let per_slot = hit_rates(&records.iter().map(|r| r.hits.clone()).collect::<Vec<_>>())?;
    let average = per_slot.iter().sum::<f64>() / k as f64;
    let mean_len = samples.iter().map(|s| s.tokens.len()).sum::<usize>() as f64 / samples.len() as f64;
    let report = KeywordReport {
        keywords: k,
        vocab: teachers.vocab(),
        samples: samples.len(),
        average_hit_rate: average,
        slot_hit_rate: per_slot,
        chance_hit_rate: empirical_chance_hit_rate(&samples, teachers.vocab()),
        nominal_chance_level: mean_len / teachers.vocab() as f64,
        top_hits: slot_counts.iter().map(|c| top_counts(c, TOP_HITS)).collect(),
        records,
    };
    Ok((report, emb.attention))
}

/// Mean over samples of `#distinct tokens / V`: the hit rate of keywords
/// drawn uniformly at random on this split.
pub fn empirical_chance_hit_rate(samples: &[&CaptionSample], vocab: usize) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let mut t = s.tokens.clone();
            t.sort_unstable();
            t.dedup();
            t.len() as f64 / vocab as f64
        })
        .sum();
    total / samples.len() as f64
}

/// Writes one line per sample: image id, caption seed, rows, cols and the
/// attention weights as 32-bit little-endian hex.
pub fn write_attention_maps(path: impl AsRef<Path>, records: &[KeywordRecord], maps: &[Tensor]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("SCLIPATTN 1\n");
    for (r, m) in records.iter().zip(maps) {
        let v: Vec<f32> = m.data().iter().map(|&x| x as f32).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.image_id,
            r.caption_seed,
            m.rows(),
            m.cols(),
            encode_f32(&v)
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormDiagnostics {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_var: Vec<f64>,
    /// Euclidean distances between running and target statistics.
    pub mean_distance: f64,
    pub var_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub model: String,
    pub layer_weights: Vec<f64>,
    pub argmax_layer: usize,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batchnorm: Option<BatchNormDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub informative_layer: Option<usize>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Layer weights, logit scale and, for the cascaded head, how far the
/// running batch statistics are from the subword targets.
pub fn export_diagnostics(model: &SpeechModel, teachers: Option<&TeacherBundle>) -> Diagnostics {
    let weights = model.layer_weights();
    let batchnorm = match model {
        SpeechModel::Cascaded(m) if m.config().batchnorm => {
            let rs = m.running_stats();
            let (tm, tv) = m.target_statistics();
            Some(BatchNormDiagnostics {
                mean_distance: distance(&rs.mean, tm),
                var_distance: distance(&rs.var, tv),
                running_mean: rs.mean,
                running_var: rs.var,
                target_mean: tm.to_vec(),
                target_var: tv.to_vec(),
            })
        }
        _ => None,
    };
    Diagnostics {
        model: model.kind().to_string(),
        argmax_layer: argmax(&weights),
        layer_weights: weights,
        temperature: model.temperature(),
        batchnorm,
        informative_layer: teachers.map(TeacherBundle::informative_layer),
    }
}
