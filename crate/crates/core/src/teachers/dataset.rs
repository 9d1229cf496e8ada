use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::TeacherBundle;
use crate::codec::{decode_f32, encode_f32};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

const MAGIC: &str = "SCLIPDATA";
const VERSION: u32 = 1;

const STREAM_TOKENS: u64 = 11;
const STREAM_IMAGE: u64 = 12;
const STREAM_CAPTION: u64 = 13;
const MAX_REDRAWS: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub images: usize,
    pub captions_per_image: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            images: 1000,
            captions_per_image: 2,
            min_len: 4,
            max_len: 10,
            train_fraction: 0.8,
            dev_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    /// Number of images in (train, dev, test).
    pub fn split_sizes(&self) -> Result<[usize; 3]> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.images < 10 {
            return bad(format!("need at least 10 images, got {}", self.images));
        }
        if self.captions_per_image == 0 {
            return bad("captions_per_image must be at least 1".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("caption length range [{}, {}] is invalid", self.min_len, self.max_len));
        }
        let fr = [self.train_fraction, self.dev_fraction, self.test_fraction];
        if fr.iter().any(|f| !(*f >= 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {fr:?} must be non-negative and sum to 1"));
        }
        let n = self.images as f64;
        let dev = (n * self.dev_fraction).round() as usize;
        let test = (n * self.test_fraction).round() as usize;
        if dev + test >= self.images || dev == 0 || test == 0 {
            return bad(format!(
                "split fractions {fr:?} leave an empty split for {} images",
                self.images
            ));
        }
        Ok([self.images - dev - test, dev, test])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.sclip", self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Configuration(format!("unknown split {s:?} (expected train, dev or test)")))
    }
}

/// One spoken caption of one image.
///
/// Float payloads are kept at the 32-bit precision of the dataset file so an
/// in-memory corpus and its reloaded copy are identical.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionSample {
    pub image_id: usize,
    pub caption_seed: u64,
    pub tokens: Vec<usize>,
    pub durations: Vec<usize>,
    d_audio: usize,
    features: Vec<Vec<f32>>,
    image_embedding: Vec<f32>,
}

impl CaptionSample {
    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }

    pub fn layer_count(&self) -> usize {
        self.features.len()
    }

    /// `L + 1` matrices of `T × D_a`.
    pub fn layer_tensors(&self) -> Vec<Tensor> {
        let t = self.frames();
        self.features
            .iter()
            .map(|l| {
                Tensor::matrix(t, self.d_audio, l.iter().map(|&v| v as f64).collect())
                    .expect("validated on construction")
            })
            .collect()
    }

    pub fn raw_features(&self) -> &[Vec<f32>] {
        &self.features
    }

    pub fn raw_image_embedding(&self) -> &[f32] {
        &self.image_embedding
    }

    /// Image embedding renormalized to unit length in 64-bit.
    pub fn image_embedding(&self) -> Vec<f64> {
        let v: Vec<f64> = self.image_embedding.iter().map(|&x| x as f64).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn validate(&self, header: &DatasetHeader) -> Result<()> {
        let bad = |m: String| Err(Error::format("caption record", m));
        if self.tokens.is_empty() || self.tokens.len() != self.durations.len() {
            return bad(format!(
                "image {}: {} tokens but {} durations",
                self.image_id,
                self.tokens.len(),
                self.durations.len()
            ));
        }
        if self.tokens.iter().any(|&t| t >= header.vocab) {
            return bad(format!("image {}: token id outside vocabulary", self.image_id));
        }
        if self.durations.iter().any(|&d| d == 0) {
            return bad(format!("image {}: zero duration", self.image_id));
        }
        if self.image_embedding.len() != header.d_text {
            return bad(format!("image {}: image embedding width", self.image_id));
        }
        if self.image_embedding.iter().all(|&v| v == 0.0) {
            return bad(format!("image {}: zero image embedding", self.image_id));
        }
        if self.features.len() != header.layers + 1 {
            return bad(format!("image {}: expected {} layers", self.image_id, header.layers + 1));
        }
        let n = self.frames() * header.d_audio;
        if self.features.iter().any(|l| l.len() != n) {
            return bad(format!("image {}: feature block size", self.image_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub vocab: usize,
    pub d_text: usize,
    pub d_audio: usize,
    pub layers: usize,
}

impl DatasetHeader {
    pub fn for_teachers(t: &TeacherBundle) -> Self {
        Self {
            vocab: t.vocab(),
            d_text: t.d_text(),
            d_audio: t.d_audio(),
            layers: t.config().layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<CaptionSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct image ids in order of first appearance.
    pub fn image_ids(&self) -> Vec<usize> {
        let mut seen = HashSet::new();
        self.samples
            .iter()
            .filter(|s| seen.insert(s.image_id))
            .map(|s| s.image_id)
            .collect()
    }

    /// Checks that the corpus was produced by teachers with these dimensions.
    pub fn check_compatible(&self, teachers: &TeacherBundle) -> Result<()> {
        if self.header != DatasetHeader::for_teachers(teachers) {
            return Err(Error::Configuration(format!(
                "dataset header {:?} does not match teachers {:?}",
                self.header,
                DatasetHeader::for_teachers(teachers)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Draws images, their simulated image embeddings, and `G` spoken captions
/// each. Images `0..n_train` go to train, the next block to dev, the rest to
/// test. Within a split no two images share a token multiset.
pub fn generate_dataset(teachers: &TeacherBundle, config: &DatasetConfig) -> Result<DatasetSplits> {
    let sizes = config.split_sizes()?;
    let header = DatasetHeader::for_teachers(teachers);
    let mut splits: Vec<Vec<CaptionSample>> = vec![Vec::new(), Vec::new(), Vec::new()];
    let mut image_id = 0usize;
    for (split_idx, &count) in sizes.iter().enumerate() {
        let mut seen: HashSet<Vec<usize>> = HashSet::new();
        for _ in 0..count {
            let tokens = draw_unique_tokens(teachers, config, image_id, &mut seen)?;
            let image = teachers.image_embed(&tokens, derive_seed(config.seed, &[STREAM_IMAGE, image_id as u64]))?;
            let image_f32: Vec<f32> = image.iter().map(|&v| v as f32).collect();
            for c in 0..config.captions_per_image {
                let caption_seed = derive_seed(config.seed, &[STREAM_CAPTION, image_id as u64, c as u64]);
                let (layers, durations) = teachers.synthesize_speech(&tokens, caption_seed)?;
                let features = layers
                    .iter()
                    .map(|l| l.data().iter().map(|&v| v as f32).collect())
                    .collect();
                let sample = CaptionSample {
                    image_id,
                    caption_seed,
                    tokens: tokens.clone(),
                    durations,
                    d_audio: header.d_audio,
                    features,
                    image_embedding: image_f32.clone(),
                };
                sample.validate(&header)?;
                splits[split_idx].push(sample);
            }
            image_id += 1;
        }
    }
    let mut it = splits.into_iter().map(|samples| Dataset { header, samples });
    Ok(DatasetSplits {
        train: it.next().expect("three splits"),
        dev: it.next().expect("three splits"),
        test: it.next().expect("three splits"),
    })
}

fn draw_unique_tokens(
    teachers: &TeacherBundle,
    config: &DatasetConfig,
    image_id: usize,
    seen: &mut HashSet<Vec<usize>>,
) -> Result<Vec<usize>> {
    for attempt in 0..MAX_REDRAWS {
        let mut rng = seeded(derive_seed(config.seed, &[STREAM_TOKENS, image_id as u64, attempt]));
        let len = rng.random_range(config.min_len..=config.max_len);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..teachers.vocab())).collect();
        let mut key = tokens.clone();
        key.sort_unstable();
        if seen.insert(key) {
            return Ok(tokens);
        }
    }
    Err(Error::Configuration(format!(
        "could not draw a distinct token multiset for image {image_id}; the vocabulary is too small for this split"
    )))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let h = &dataset.header;
    let io = |e| Error::io(path, e);
    writeln!(w, "{MAGIC} {VERSION} {} {} {} {}", h.vocab, h.d_text, h.d_audio, h.layers).map_err(io)?;
    for s in &dataset.samples {
        write!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            s.image_id,
            s.caption_seed,
            join(&s.tokens),
            join(&s.durations),
            encode_f32(&s.image_embedding)
        )
        .map_err(io)?;
        for layer in &s.features {
            write!(w, "\t{}", encode_f32(layer)).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn parse_list(field: &str, what: &'static str) -> Result<Vec<usize>> {
    field
        .split(',')
        .map(|x| x.parse().map_err(|_| Error::format(what, format!("bad integer {x:?}"))))
        .collect()
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format("dataset header", "empty file"))?
        .map_err(|e| Error::io(path, e))?;
    let parts: Vec<&str> = first.split(' ').collect();
    if parts.len() != 6 || parts[0] != MAGIC {
        return Err(Error::format("dataset header", first.clone()));
    }
    if parts[1] != VERSION.to_string() {
        return Err(Error::format("dataset header", format!("unsupported version {}", parts[1])));
    }
    let num = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::format("dataset header", first.clone())) };
    let header = DatasetHeader {
        vocab: num(parts[2])?,
        d_text: num(parts[3])?,
        d_audio: num(parts[4])?,
        layers: num(parts[5])?,
    };
    let mut samples = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 + header.layers + 1 {
            return Err(Error::format("caption record", format!("{} fields", f.len())));
        }
        let sample = CaptionSample {
            image_id: f[0].parse().map_err(|_| Error::format("caption record", "image id"))?,
            caption_seed: f[1].parse().map_err(|_| Error::format("caption record", "caption seed"))?,
            tokens: parse_list(f[2], "token list")?,
            durations: parse_list(f[3], "duration list")?,
            d_audio: header.d_audio,
            image_embedding: decode_f32(f[4])?,
            features: f[5..].iter().map(|b| decode_f32(b)).collect::<Result<_>>()?,
        };
        sample.validate(&header)?;
        samples.push(sample);
    }
    Ok(Dataset { header, samples })
}
