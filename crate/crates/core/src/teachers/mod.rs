//! Simulated frozen encoders and the synthetic paired corpus.
//!
//! The bundle stands in for the pre-trained speech and image/text models:
//! a subword table `E` (the quantization codebook), an acoustic table `A`
//! that renders each subword as frames, per-layer mixers and noise levels
//! that play the role of hidden layers, and an orthogonal map `Q` that acts
//! as the text encoder head. Everything is fixed by the seed and the
//! dimensions, and nothing in here is ever updated by training.

mod dataset;

pub use dataset::{
    generate_dataset, read_dataset, write_dataset, CaptionSample, Dataset, DatasetConfig,
    DatasetHeader, DatasetSplits, Split,
};

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec::fingerprint;
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal_tensor, normal_vec, seeded};

const STREAM_SUBWORDS: u64 = 1;
const STREAM_ACOUSTIC: u64 = 2;
const STREAM_ORTHOGONAL: u64 = 3;
const STREAM_MIXERS: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub seed: u64,
    /// Vocabulary size `V`.
    pub vocab: usize,
    /// Teacher embedding width `D_t`.
    pub d_text: usize,
    /// Acoustic feature width `D_a`.
    pub d_audio: usize,
    /// Hidden layers beyond layer 0; features carry `layers + 1` layers.
    pub layers: usize,
    /// Low-noise layer; `None` means `layers - 2` (or 0 for shallow stacks).
    pub informative_layer: Option<usize>,
    pub sigma_base: f64,
    pub sigma_informative: f64,
    pub sigma_other: f64,
    pub image_noise: f64,
    pub min_duration: usize,
    pub max_duration: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab: 64,
            d_text: 16,
            d_audio: 32,
            layers: 4,
            informative_layer: None,
            sigma_base: 0.05,
            sigma_informative: 0.05,
            sigma_other: 0.5,
            image_noise: 0.02,
            min_duration: 2,
            max_duration: 5,
        }
    }
}

impl TeacherConfig {
    pub fn informative_layer(&self) -> usize {
        self.informative_layer
            .unwrap_or(if self.layers >= 2 { self.layers - 2 } else { 0 })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.vocab < 2 || self.d_text < 2 || self.d_audio < 2 || self.layers < 1 {
            return bad(format!(
                "teacher dimensions need V>=2, D_t>=2, D_a>=2, L>=1; got V={} D_t={} D_a={} L={}",
                self.vocab, self.d_text, self.d_audio, self.layers
            ));
        }
        if self.informative_layer() > self.layers {
            return bad(format!(
                "informative layer {} exceeds layer count {}",
                self.informative_layer(),
                self.layers
            ));
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad(format!(
                "duration range [{}, {}] is empty or starts at zero",
                self.min_duration, self.max_duration
            ));
        }
        for (name, v) in [
            ("sigma_base", self.sigma_base),
            ("sigma_informative", self.sigma_informative),
            ("sigma_other", self.sigma_other),
            ("image_noise", self.image_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.sigma_informative >= self.sigma_other {
            return bad("sigma_informative must be strictly below sigma_other".into());
        }
        Ok(())
    }
}

/// All frozen simulated encoders.
#[derive(Debug, Clone)]
pub struct TeacherBundle {
    config: TeacherConfig,
    subword_table: Tensor,
    acoustic_table: Tensor,
    mixers: Vec<Tensor>,
    noise_scales: Vec<f64>,
    orthogonal: Tensor,
    orthogonal_t: Tensor,
}

impl TeacherBundle {
    pub fn build(config: TeacherConfig) -> Result<Self> {
        config.validate()?;
        let (v, dt, da, l) = (config.vocab, config.d_text, config.d_audio, config.layers);
        let seed = config.seed;

        let subword_table = normal_tensor(&mut seeded(derive_seed(seed, &[STREAM_SUBWORDS])), &[v, dt], 1.0);
        let acoustic_table = normal_tensor(&mut seeded(derive_seed(seed, &[STREAM_ACOUSTIC])), &[v, da], 1.0);

        let raw = normal_vec(&mut seeded(derive_seed(seed, &[STREAM_ORTHOGONAL])), dt * dt, 1.0);
        let q = DMatrix::from_row_slice(dt, dt, &raw).qr().q();
        let mut q_rows = Vec::with_capacity(dt * dt);
        for i in 0..dt {
            for j in 0..dt {
                q_rows.push(q[(i, j)]);
            }
        }
        let orthogonal = Tensor::matrix(dt, dt, q_rows)?;

        let mut mixer_rng = seeded(derive_seed(seed, &[STREAM_MIXERS]));
        let mixers = (0..=l)
            .map(|_| normal_tensor(&mut mixer_rng, &[da, da], 1.0 / (da as f64).sqrt()))
            .collect();

        let informative = config.informative_layer();
        let noise_scales = (0..=l)
            .map(|i| {
                if i == informative {
                    config.sigma_informative
                } else {
                    config.sigma_other
                }
            })
            .collect();

        Self::from_parts(config, subword_table, acoustic_table, mixers, noise_scales, orthogonal)
    }

    /// Assembles a bundle from explicit tables, e.g. identity mixers for
    /// noiseless checks. `Q` must be orthogonal.
    pub fn from_parts(
        config: TeacherConfig,
        subword_table: Tensor,
        acoustic_table: Tensor,
        mixers: Vec<Tensor>,
        noise_scales: Vec<f64>,
        orthogonal: Tensor,
    ) -> Result<Self> {
        let (v, dt, da, l) = (config.vocab, config.d_text, config.d_audio, config.layers);
        let shape_err = |what: &str| Error::Configuration(format!("{what} has the wrong shape"));
        if subword_table.shape() != [v, dt] {
            return Err(shape_err("subword table"));
        }
        if acoustic_table.shape() != [v, da] {
            return Err(shape_err("acoustic table"));
        }
        if mixers.len() != l + 1 || mixers.iter().any(|m| m.shape() != [da, da]) {
            return Err(shape_err("mixer stack"));
        }
        if noise_scales.len() != l + 1 {
            return Err(shape_err("noise scale list"));
        }
        if orthogonal.shape() != [dt, dt] {
            return Err(shape_err("orthogonal map"));
        }
        let orthogonal_t = orthogonal.transpose();
        let bundle = Self {
            config,
            subword_table,
            acoustic_table,
            mixers,
            noise_scales,
            orthogonal,
            orthogonal_t,
        };
        let err = bundle.orthogonality_error();
        if err > 1e-9 {
            return Err(Error::Configuration(format!(
                "text encoder map is not orthogonal (max |QᵀQ - I| = {err:e})"
            )));
        }
        Ok(bundle)
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    pub fn d_text(&self) -> usize {
        self.config.d_text
    }

    pub fn d_audio(&self) -> usize {
        self.config.d_audio
    }

    /// Number of feature layers, `L + 1`.
    pub fn feature_layers(&self) -> usize {
        self.config.layers + 1
    }

    pub fn informative_layer(&self) -> usize {
        self.config.informative_layer()
    }

    pub fn subword_table(&self) -> &Tensor {
        &self.subword_table
    }

    pub fn acoustic_table(&self) -> &Tensor {
        &self.acoustic_table
    }

    pub fn mixers(&self) -> &[Tensor] {
        &self.mixers
    }

    pub fn noise_scales(&self) -> &[f64] {
        &self.noise_scales
    }

    pub fn orthogonal(&self) -> &Tensor {
        &self.orthogonal
    }

    /// Largest entry of `|QᵀQ - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let n = self.config.d_text;
        let q = &self.orthogonal;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| q.at(k, i) * q.at(k, j)).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    /// Per-dimension mean and population variance of the subword table.
    pub fn subword_statistics(&self) -> (Vec<f64>, Vec<f64>) {
        crate::diffcore::column_moments(&self.subword_table)
    }

    /// Hash over every frozen quantity.
    pub fn checksum(&self) -> u64 {
        let mut blocks: Vec<&[f64]> = vec![
            self.subword_table.data(),
            self.acoustic_table.data(),
            self.orthogonal.data(),
            &self.noise_scales,
        ];
        blocks.extend(self.mixers.iter().map(|m| m.data()));
        fingerprint(blocks)
    }

    fn check_tokens(&self, tokens: &[usize], op: &'static str) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Parameter(format!("{op} needs at least one token")));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Index {
                op,
                index: bad,
                extent: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Rows of the subword table for `tokens`.
    pub fn lookup(&self, tokens: &[usize]) -> Result<Tensor> {
        self.check_tokens(tokens, "lookup")?;
        let rows: Vec<&[f64]> = tokens.iter().map(|&t| self.subword_table.row(t)).collect();
        Tensor::from_rows(&rows)
    }

    /// Frozen text encoder: `l2_normalize(Q · mean(embeds))`, recorded on
    /// `g` so gradients reach `embeds` (an `N×D_t` matrix).
    pub fn text_encode(&self, g: &mut Graph, embeds: Var) -> Result<Var> {
        let ev = g.value(embeds);
        if ev.shape().len() != 2 || ev.cols() != self.config.d_text {
            return Err(Error::Dimension {
                op: "text_encode",
                left: ev.shape().to_vec(),
                right: vec![self.config.d_text],
            });
        }
        let qt = g.constant(self.orthogonal_t.clone());
        let mean = g.mean_rows(embeds);
        let rotated = g.matmul(mean, qt)?;
        g.l2_normalize(rotated)
    }

    /// [`text_encode`](Self::text_encode) applied to consecutive groups of
    /// `group` rows; returns one row per group.
    pub fn text_encode_groups(&self, g: &mut Graph, embeds: Var, group: usize) -> Result<Var> {
        let ev = g.value(embeds);
        if group == 0 || ev.rows() % group != 0 || ev.cols() != self.config.d_text {
            return Err(Error::Dimension {
                op: "text_encode_groups",
                left: ev.shape().to_vec(),
                right: vec![group, self.config.d_text],
            });
        }
        let n = ev.rows() / group;
        let qt = g.constant(self.orthogonal_t.clone());
        let mut means = Vec::with_capacity(n);
        for b in 0..n {
            let rows = g.slice_rows(embeds, b * group, group)?;
            means.push(g.mean_rows(rows));
        }
        let stacked = g.concat_rows(&means)?;
        let rotated = g.matmul(stacked, qt)?;
        g.l2_normalize(rotated)
    }

    /// Detached text embedding of a token sequence.
    pub fn text_embedding(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let rows = self.lookup(tokens)?;
        let mut g = Graph::new();
        let e = g.constant(rows);
        let out = self.text_encode(&mut g, e)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Simulated image embedding of the image described by `tokens`: the
    /// text embedding plus seeded Gaussian noise of scale `image_noise`,
    /// renormalized.
    pub fn image_embed(&self, tokens: &[usize], image_seed: u64) -> Result<Vec<f64>> {
        let text = self.text_embedding(tokens)?;
        if self.config.image_noise == 0.0 {
            return Ok(text);
        }
        let noise = normal_vec(&mut seeded(image_seed), self.config.d_text, 1.0);
        let v: Vec<f64> = text
            .iter()
            .zip(&noise)
            .map(|(t, n)| t + self.config.image_noise * n)
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > crate::diffcore::NORM_EPSILON) {
            return Err(Error::DegenerateVector {
                op: "image_embed",
                norm,
                epsilon: crate::diffcore::NORM_EPSILON,
            });
        }
        Ok(v.iter().map(|x| x / norm).collect())
    }

    /// Renders a token sequence as `L + 1` layers of `T × D_a` frames.
    ///
    /// Each token lasts a seeded duration in `[min_duration, max_duration]`
    /// frames of `A[v]` plus base noise; layer `l` sees `M_l · frame` plus
    /// its own noise of scale `σ_l`.
    pub fn synthesize_speech(&self, tokens: &[usize], caption_seed: u64) -> Result<(Vec<Tensor>, Vec<usize>)> {
        self.check_tokens(tokens, "synthesize_speech")?;
        let cfg = &self.config;
        let da = cfg.d_audio;
        let mut rng = seeded(caption_seed);
        let durations: Vec<usize> = tokens
            .iter()
            .map(|_| rng.random_range(cfg.min_duration..=cfg.max_duration))
            .collect();
        let frames: usize = durations.iter().sum();

        let mut base = Vec::with_capacity(frames * da);
        for (&tok, &dur) in tokens.iter().zip(&durations) {
            let row = self.acoustic_table.row(tok);
            for _ in 0..dur {
                let noise = normal_vec(&mut rng, da, cfg.sigma_base);
                base.extend(row.iter().zip(&noise).map(|(a, n)| a + n));
            }
        }

        let mut layers = Vec::with_capacity(cfg.layers + 1);
        for (mixer, &sigma) in self.mixers.iter().zip(&self.noise_scales) {
            let mut out = Vec::with_capacity(frames * da);
            for frame in base.chunks(da) {
                let noise = normal_vec(&mut rng, da, sigma);
                for i in 0..da {
                    let mixed: f64 = mixer.row(i).iter().zip(frame).map(|(m, f)| m * f).sum();
                    out.push(mixed + noise[i]);
                }
            }
            layers.push(Tensor::matrix(frames, da, out)?);
        }
        Ok((layers, durations))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{check_gradients, GradCheckConfig};

    fn small() -> TeacherConfig {
        TeacherConfig {
            seed: 5,
            vocab: 12,
            d_text: 6,
            d_audio: 8,
            layers: 3,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_bundles() {
        let a = TeacherBundle::build(small()).unwrap();
        let b = TeacherBundle::build(small()).unwrap();
        assert_eq!(a.subword_table(), b.subword_table());
        assert_eq!(a.acoustic_table(), b.acoustic_table());
        assert_eq!(a.orthogonal(), b.orthogonal());
        assert_eq!(a.mixers(), b.mixers());
        assert_eq!(a.checksum(), b.checksum());
        let c = TeacherBundle::build(TeacherConfig { seed: 6, ..small() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn orthogonal_map_and_informative_layer() {
        let b = TeacherBundle::build(TeacherConfig::default()).unwrap();
        assert!(b.orthogonality_error() <= 1e-9);
        let star = b.informative_layer();
        assert_eq!(star, 2);
        for (l, s) in b.noise_scales().iter().enumerate() {
            if l != star {
                assert!(b.noise_scales()[star] < *s);
            }
        }
    }

    #[test]
    fn invalid_dimensions_are_rejected() {
        for cfg in [
            TeacherConfig { vocab: 1, ..small() },
            TeacherConfig { d_text: 1, ..small() },
            TeacherConfig { d_audio: 1, ..small() },
            TeacherConfig { layers: 0, ..small() },
            TeacherConfig { min_duration: 3, max_duration: 2, ..small() },
        ] {
            assert!(matches!(TeacherBundle::build(cfg), Err(Error::Configuration(_))));
        }
    }

    #[test]
    fn text_encode_single_row_is_rotated_direction() {
        let b = TeacherBundle::build(small()).unwrap();
        let e = b.subword_table().row(3).to_vec();
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        let got = b.text_embedding(&[3]).unwrap();
        for i in 0..6 {
            let expect: f64 = (0..6).map(|j| b.orthogonal().at(i, j) * e[j]).sum::<f64>() / norm;
            assert!((got[i] - expect).abs() < 1e-12);
        }
        let n: f64 = got.iter().map(|x| x * x).sum::<f64>();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn text_encode_gradient() {
        let b = TeacherBundle::build(small()).unwrap();
        let x = crate::rng::normal_tensor(&mut seeded(4), &[3, 6], 1.0);
        let w = crate::rng::normal_tensor(&mut seeded(5), &[1, 6], 1.0);
        let report = check_gradients(
            &[x],
            |g, v| {
                let y = b.text_encode(g, v[0])?;
                let w = g.constant(w.clone());
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn text_encode_rejects_zero_mean() {
        let b = TeacherBundle::build(small()).unwrap();
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(&[2, 6]));
        assert!(matches!(b.text_encode(&mut g, e), Err(Error::DegenerateVector { .. })));
    }

    #[test]
    fn image_embedding_properties() {
        let b = TeacherBundle::build(small()).unwrap();
        let img = b.image_embed(&[1, 4, 4, 7], 99).unwrap();
        let n: f64 = img.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert_eq!(img, b.image_embed(&[1, 4, 4, 7], 99).unwrap());

        let quiet = TeacherBundle::build(TeacherConfig { image_noise: 0.0, ..small() }).unwrap();
        assert_eq!(
            quiet.image_embed(&[1, 4, 4, 7], 99).unwrap(),
            quiet.text_embedding(&[1, 4, 4, 7]).unwrap()
        );
        assert!(b.image_embed(&[12], 0).is_err());
    }

    #[test]
    fn noiseless_identity_speech_repeats_acoustic_rows() {
        let cfg = TeacherConfig {
            sigma_base: 0.0,
            sigma_informative: 0.0,
            sigma_other: 0.0,
            ..small()
        };
        let base = TeacherBundle::build(small()).unwrap();
        let ident = vec![Tensor::identity(8); 4];
        let b = TeacherBundle::from_parts(
            cfg,
            base.subword_table().clone(),
            base.acoustic_table().clone(),
            ident,
            vec![0.0; 4],
            base.orthogonal().clone(),
        )
        .unwrap();
        let tokens = [2, 9, 2];
        let (layers, durations) = b.synthesize_speech(&tokens, 17).unwrap();
        assert_eq!(layers.len(), 4);
        let t: usize = durations.iter().sum();
        let mut frame_tokens = Vec::new();
        for (&tok, &d) in tokens.iter().zip(&durations) {
            assert!((2..=5).contains(&d));
            frame_tokens.extend(std::iter::repeat(tok).take(d));
        }
        for layer in &layers {
            assert_eq!(layer.shape(), &[t, 8]);
            for (f, &tok) in frame_tokens.iter().enumerate() {
                assert_eq!(layer.row(f), b.acoustic_table().row(tok));
            }
        }
    }

    #[test]
    fn speech_is_seed_deterministic() {
        let b = TeacherBundle::build(small()).unwrap();
        let (l1, d1) = b.synthesize_speech(&[0, 5, 11], 3).unwrap();
        let (l2, d2) = b.synthesize_speech(&[0, 5, 11], 3).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(l1, l2);
        let (l3, _) = b.synthesize_speech(&[0, 5, 11], 4).unwrap();
        assert_ne!(l1, l3);
        assert_eq!(l1[0].rows(), d1.iter().sum::<usize>());
    }

    #[test]
    fn orthogonality_is_enforced_by_from_parts() {
        let b = TeacherBundle::build(small()).unwrap();
        let mut bad = b.orthogonal().clone();
        bad.data_mut()[0] += 0.1;
        assert!(TeacherBundle::from_parts(
            small(),
            b.subword_table().clone(),
            b.acoustic_table().clone(),
            b.mixers().to_vec(),
            b.noise_scales().to_vec(),
            bad,
        )
        .is_err());
    }
}
