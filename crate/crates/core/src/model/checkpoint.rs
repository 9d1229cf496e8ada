//! Line-oriented checkpoint files.
//!
//! ```text
//! SCLIPCKPT 1
//! kind cascaded
//! hparam <name> <value>
//! state step <n>
//! state best_dev_recall <f64 hex | none>
//! param <name> <dims> <f64 hex>
//! buffer <name> <dims> <f64 hex>
//! adam step <n>
//! adam_m <name> <dims> <f64 hex>
//! adam_v <name> <dims> <f64 hex>
//! end
//! ```
//!
//! Dims are `x`-separated; floats are 64-bit little-endian hex, so a reload
//! reproduces every value bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{CascadedConfig, CascadedModel, ModelKind, ParallelConfig, ParallelModel, ParamSet, SpeechModel};
use crate::codec::{decode_f64, encode_f64};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::training::AdamState;

pub const CHECKPOINT_MAGIC: &str = "SCLIPCKPT 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SpeechModel,
    /// Optimizer steps taken.
    pub step: u64,
    pub best_dev_recall: Option<f64>,
    pub optimizer: Option<AdamState>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
}

fn push_entry(out: &mut String, tag: &str, name: &str, t: &Tensor) {
    let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    let _ = writeln!(out, "{tag} {name} {} {}", dims.join("x"), encode_f64(t.data()));
}

fn render(ck: &Checkpoint) -> String {
    let mut out = String::new();
    out.push_str(CHECKPOINT_MAGIC);
    out.push('\n');
    let _ = writeln!(out, "kind {}", ck.model.kind());
    match &ck.model {
        SpeechModel::Parallel(m) => {
            let c = m.config();
            let _ = writeln!(out, "hparam feature_layers {}", c.feature_layers);
            let _ = writeln!(out, "hparam d_audio {}", c.d_audio);
            let _ = writeln!(out, "hparam d_text {}", c.d_text);
            let _ = writeln!(out, "hparam heads {}", c.heads);
        }
        SpeechModel::Cascaded(m) => {
            let c = m.config();
            let _ = writeln!(out, "hparam feature_layers {}", c.feature_layers);
            let _ = writeln!(out, "hparam d_audio {}", c.d_audio);
            let _ = writeln!(out, "hparam d_text {}", c.d_text);
            let _ = writeln!(out, "hparam heads {}", c.heads);
            let _ = writeln!(out, "hparam vocab {}", c.vocab);
            let _ = writeln!(out, "hparam keywords {}", c.keywords);
            let _ = writeln!(out, "hparam tau {}", encode_f64(&[c.tau]));
            let _ = writeln!(out, "hparam batchnorm {}", c.batchnorm);
        }
    }
    let _ = writeln!(out, "state step {}", ck.step);
    match ck.best_dev_recall {
        Some(r) => {
            let _ = writeln!(out, "state best_dev_recall {}", encode_f64(&[r]));
        }
        None => out.push_str("state best_dev_recall none\n"),
    }
    for (name, t) in ck.model.params().iter() {
        push_entry(&mut out, "param", name, t);
    }
    if let SpeechModel::Cascaded(m) = &ck.model {
        for (name, t) in m.buffers().iter() {
            push_entry(&mut out, "buffer", name, t);
        }
    }
    if let Some(opt) = &ck.optimizer {
        let _ = writeln!(out, "adam step {}", opt.step);
        for (name, t) in opt.first.iter() {
            push_entry(&mut out, "adam_m", name, t);
        }
        for (name, t) in opt.second.iter() {
            push_entry(&mut out, "adam_v", name, t);
        }
    }
    out.push_str("end\n");
    out
}

/// Writes through a temporary sibling and renames, so an existing
/// checkpoint is never left half-written.
pub fn write_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, render(ck)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Hparams(Vec<(String, String)>);

impl Hparams {
    fn raw(&self, key: &str) -> Result<&str> {
        self.0
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad(format!("missing hyperparameter {key}")))
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.raw(key)?.parse().map_err(|_| bad(format!("hyperparameter {key} is not an integer")))
    }

    fn f64(&self, key: &str) -> Result<f64> {
        match decode_f64(self.raw(key)?)?.as_slice() {
            [v] => Ok(*v),
            _ => Err(bad(format!("hyperparameter {key} must hold one float"))),
        }
    }

    fn bool(&self, key: &str) -> Result<bool> {
        self.raw(key)?.parse().map_err(|_| bad(format!("hyperparameter {key} is not a boolean")))
    }
}

fn parse_entry(rest: &str) -> Result<(String, Tensor)> {
    let mut parts = rest.split(' ');
    let (Some(name), Some(dims), Some(hex), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err(bad(format!("entry line {rest:?}")));
    };
    let shape = dims
        .split('x')
        .map(|d| d.parse::<usize>().map_err(|_| bad(format!("dims {dims:?} of {name}"))))
        .collect::<Result<Vec<_>>>()?;
    let data = decode_f64(hex)?;
    let t = Tensor::new(shape, data).map_err(|_| bad(format!("entry {name} has inconsistent size")))?;
    Ok((name.to_string(), t))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad(format!("{} does not start with {CHECKPOINT_MAGIC:?}", path.display())));
    }
    let mut kind = None;
    let mut hparams = Hparams(Vec::new());
    let mut step = None;
    let mut best = None;
    let mut params = ParamSet::new();
    let mut buffers = ParamSet::new();
    let mut adam_step = None;
    let mut first = ParamSet::new();
    let mut second = ParamSet::new();
    let mut ended = false;
    for line in lines {
        if ended {
            return Err(bad("content after end marker"));
        }
        let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
        match tag {
            "kind" => kind = Some(rest.parse::<ModelKind>().map_err(|_| bad(format!("kind {rest:?}")))?),
            "hparam" => {
                let (k, v) = rest.split_once(' ').ok_or_else(|| bad(format!("hparam line {rest:?}")))?;
                hparams.0.push((k.to_string(), v.to_string()));
            }
            "state" => match rest.split_once(' ') {
                Some(("step", v)) => step = Some(v.parse::<u64>().map_err(|_| bad("step"))?),
                Some(("best_dev_recall", "none")) => best = Some(None),
                Some(("best_dev_recall", v)) => match decode_f64(v)?.as_slice() {
                    [r] => best = Some(Some(*r)),
                    _ => return Err(bad("best_dev_recall")),
                },
                _ => return Err(bad(format!("state line {rest:?}"))),
            },
            "param" => {
                let (n, t) = parse_entry(rest)?;
                params.insert(n, t);
            }
            "buffer" => {
                let (n, t) = parse_entry(rest)?;
                buffers.insert(n, t);
            }
            "adam" => match rest.split_once(' ') {
                Some(("step", v)) => adam_step = Some(v.parse::<u64>().map_err(|_| bad("adam step"))?),
                _ => return Err(bad(format!("adam line {rest:?}"))),
            },
            "adam_m" => {
                let (n, t) = parse_entry(rest)?;
                first.insert(n, t);
            }
            "adam_v" => {
                let (n, t) = parse_entry(rest)?;
                second.insert(n, t);
            }
            "end" => ended = true,
            other => return Err(bad(format!("unknown record {other:?}"))),
        }
    }
    if !ended {
        return Err(bad("truncated file (no end marker)"));
    }
    let kind = kind.ok_or_else(|| bad("missing kind"))?;
    let model = match kind {
        ModelKind::Parallel => {
            let config = ParallelConfig {
                feature_layers: hparams.usize("feature_layers")?,
                d_audio: hparams.usize("d_audio")?,
                d_text: hparams.usize("d_text")?,
                heads: hparams.usize("heads")?,
            };
            SpeechModel::Parallel(ParallelModel::from_params(config, params)?)
        }
        ModelKind::Cascaded => {
            let config = CascadedConfig {
                feature_layers: hparams.usize("feature_layers")?,
                d_audio: hparams.usize("d_audio")?,
                d_text: hparams.usize("d_text")?,
                vocab: hparams.usize("vocab")?,
                keywords: hparams.usize("keywords")?,
                heads: hparams.usize("heads")?,
                tau: hparams.f64("tau")?,
                batchnorm: hparams.bool("batchnorm")?,
            };
            SpeechModel::Cascaded(CascadedModel::from_parts(config, params, buffers)?)
        }
    };
    let optimizer = match adam_step {
        Some(step) => {
            let state = AdamState { step, first, second };
            if !state.first.same_layout(model.params()) || !state.second.same_layout(model.params()) {
                return Err(bad("optimizer moments do not match the parameters"));
            }
            Some(state)
        }
        None if first.is_empty() && second.is_empty() => None,
        None => return Err(bad("optimizer moments without a step counter")),
    };
    Ok(Checkpoint {
        model,
        step: step.ok_or_else(|| bad("missing step"))?,
        best_dev_recall: best.ok_or_else(|| bad("missing best_dev_recall"))?,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teachers::{TeacherBundle, TeacherConfig};

    fn teachers() -> TeacherBundle {
        TeacherBundle::build(TeacherConfig {
            vocab: 10,
            d_text: 4,
            d_audio: 8,
            layers: 2,
            ..TeacherConfig::default()
        })
        .unwrap()
    }

    fn perturb(p: &mut ParamSet) {
        for (i, (_, t)) in p.iter_mut().enumerate() {
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v += ((i * 31 + j) as f64).sin() / 3.0;
            }
        }
    }

    #[test]
    fn cascaded_round_trip_is_bit_exact() {
        let t = teachers();
        let mut model = CascadedModel::new(CascadedConfig::for_teachers(&t, 3), &t, 4).unwrap();
        perturb(model.params_mut());
        model.set_running_stats(crate::model::RunningStats {
            mean: vec![0.1, 1.0 / 3.0, -2.5, 1e-300],
            var: vec![0.7, 1.1, 2.0, 3.0],
        });
        let model = SpeechModel::Cascaded(model);
        let mut first = model.params().zeros_like();
        perturb(&mut first);
        let ck = Checkpoint {
            optimizer: Some(AdamState {
                step: 17,
                second: first.clone(),
                first,
            }),
            model,
            step: 17,
            best_dev_recall: Some(0.123456789),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        write_checkpoint(&path, &ck).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let again = dir.path().join("d.ckpt");
        write_checkpoint(&again, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn parallel_round_trip_without_optimizer() {
        let t = teachers();
        let model = SpeechModel::Parallel(ParallelModel::new(ParallelConfig::for_teachers(&t), 2).unwrap());
        let ck = Checkpoint {
            model,
            step: 0,
            best_dev_recall: None,
            optimizer: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        write_checkpoint(&path, &ck).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let t = teachers();
        let model = SpeechModel::Parallel(ParallelModel::new(ParallelConfig::for_teachers(&t), 2).unwrap());
        let ck = Checkpoint {
            model,
            step: 3,
            best_dev_recall: None,
            optimizer: None,
        };
        let text = render(&ck);
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            text.replace(CHECKPOINT_MAGIC, "SCLIPCKPT 2"),
            text.replace("end\n", ""),
            text.replace("param projection", "param projectoin"),
            text.replace("hparam heads 8", "hparam heads 3"),
            text.replace("kind parallel", "kind hybrid"),
        ];
        for (i, c) in cases.iter().enumerate() {
            let p = dir.path().join(format!("{i}.ckpt"));
            fs::write(&p, c).unwrap();
            assert!(read_checkpoint(&p).is_err(), "case {i} accepted");
        }
    }
}
