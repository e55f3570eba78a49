//! Checkpoint files: a JSON Lines header carrying the training configuration
//! and history, then one line per named parameter array.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::Parameters;
use crate::jsonfmt;
use crate::model::ModelParams;
use crate::trainer::{Checkpoint, EpochStats, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "gpm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("unknown array `{0}` in checkpoint")]
    UnknownArray(String),
    #[error("array `{0}` missing from checkpoint")]
    MissingArray(String),
    #[error("array `{name}` has shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("invalid training configuration in checkpoint: {0}")]
    Config(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    record: String,
    format: String,
    version: u32,
    train_config: TrainConfig,
    history: Vec<EpochStats>,
}

#[derive(Serialize, Deserialize)]
struct ArrayRecord {
    record: String,
    name: String,
    shape: (usize, usize),
    values: Vec<f64>,
}

pub fn write_checkpoint<W: Write>(ck: &Checkpoint, w: &mut W) -> io::Result<()> {
    jsonfmt::write_line(
        w,
        &Header {
            record: "header".into(),
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            train_config: ck.train_config.clone(),
            history: ck.history.clone(),
        },
    )?;
    for (name, m) in ck.params.arrays() {
        jsonfmt::write_line(
            w,
            &ArrayRecord {
                record: "array".into(),
                name,
                shape: m.shape(),
                values: m.as_slice().to_vec(),
            },
        )?;
    }
    Ok(())
}

pub fn checkpoint_to_string(ck: &Checkpoint) -> String {
    let mut buf = Vec::new();
    write_checkpoint(ck, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("serializer emits UTF-8")
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let io_err = |source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    write_checkpoint(ck, &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    })?;
    checkpoint_from_str(&text)
}

pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint, CheckpointError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(CheckpointError::Malformed {
        line: 1,
        message: "empty checkpoint".into(),
    })?;
    let malformed = |line: usize, e: &dyn std::fmt::Display| CheckpointError::Malformed {
        line: line + 1,
        message: e.to_string(),
    };
    // version first, so old files fail with a version error rather than a schema one
    let raw: serde_json::Value = serde_json::from_str(first).map_err(|e| malformed(0, &e))?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(malformed(0, &"not a checkpoint header"));
    }
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| malformed(0, &"header has no version"))?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(CheckpointError::Version {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| malformed(0, &e))?;
    header
        .train_config
        .validate()
        .map_err(|e| CheckpointError::Config(e.to_string()))?;

    let mut stored: BTreeMap<String, (usize, ArrayRecord)> = BTreeMap::new();
    for (i, line) in lines {
        let rec: ArrayRecord = serde_json::from_str(line).map_err(|e| malformed(i, &e))?;
        if rec.record != "array" {
            return Err(malformed(i, &format!("unexpected record `{}`", rec.record)));
        }
        if rec.values.len() != rec.shape.0 * rec.shape.1 {
            return Err(malformed(
                i,
                &format!(
                    "array `{}` holds {} values for shape {:?}",
                    rec.name,
                    rec.values.len(),
                    rec.shape
                ),
            ));
        }
        stored.insert(rec.name.clone(), (i, rec));
    }

    let mut params = ModelParams::zeros(&header.train_config.model);
    // a renamed array shows up as unknown; report that before anything missing
    let expected: Vec<String> = params.arrays().into_iter().map(|(n, _)| n).collect();
    if let Some(name) = stored.keys().find(|k| !expected.contains(k)) {
        return Err(CheckpointError::UnknownArray(name.clone()));
    }
    let mut result = Ok(());
    params.visit_mut("", &mut |name, m, _| {
        if result.is_err() {
            return;
        }
        match stored.remove(&name) {
            None => result = Err(CheckpointError::MissingArray(name)),
            Some((_, rec)) if rec.shape != m.shape() => {
                result = Err(CheckpointError::Shape {
                    name,
                    expected: m.shape(),
                    found: rec.shape,
                })
            }
            Some((_, rec)) => m.as_mut_slice().copy_from_slice(&rec.values),
        }
    });
    result?;
    Ok(Checkpoint {
        train_config: header.train_config,
        history: header.history,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{predict_batch, ModelConfig};
    use crate::tensor::Matrix;
    use crate::trainer::init_params;
    use rand::{Rng, SeedableRng};

    fn checkpoint() -> Checkpoint {
        let cfg = TrainConfig {
            epochs: 2,
            model: ModelConfig {
                d: 3,
                tab_widths: vec![4, 4],
                img_widths: vec![5],
                condition_width: 4,
                decoder_width: 3,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut params = init_params(&cfg);
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        params.visit_mut("", &mut |_, m, _| {
            for v in m.as_mut_slice() {
                *v += r.random_range(0.0..0.3);
            }
        });
        Checkpoint {
            history: vec![
                EpochStats {
                    epoch: 0,
                    loss: 0.9,
                    cross_entropy: 0.7,
                    kl: 0.2,
                },
                EpochStats {
                    epoch: 1,
                    loss: 0.1 + 0.2,
                    cross_entropy: 0.25,
                    kl: 1.0 / 3.0,
                },
            ],
            train_config: cfg,
            params,
        }
    }

    fn probe(ck: &Checkpoint) -> Vec<crate::model::PotentialOutcomes> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let m = &ck.train_config.model;
        let xt = Matrix::from_vec(
            6,
            m.d_tab,
            (0..6 * m.d_tab).map(|_| r.random_range(-2.0..2.0)).collect(),
        );
        let xi = Matrix::from_vec(
            6,
            m.d_img,
            (0..6 * m.d_img).map(|_| r.random_range(-2.0..2.0)).collect(),
        );
        predict_batch(&xt, &xi, &ck.params, m).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let (a, b) = (probe(&ck), probe(&back));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.y0_hat.to_bits(), y.y0_hat.to_bits());
            assert_eq!(x.y1_hat.to_bits(), y.y1_hat.to_bits());
        }
    }

    #[test]
    fn renamed_array_is_named_in_the_error() {
        let text = checkpoint_to_string(&checkpoint());
        let tampered = text.replacen("\"decoder.output.bias\"", "\"decoder.out.bias\"", 1);
        match checkpoint_from_str(&tampered) {
            Err(CheckpointError::UnknownArray(name)) => assert_eq!(name, "decoder.out.bias"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn old_version_is_rejected() {
        let text = checkpoint_to_string(&checkpoint());
        let old = text.replacen("\"version\":1", "\"version\":0", 1);
        assert!(matches!(
            checkpoint_from_str(&old),
            Err(CheckpointError::Version { found: 0, expected: 1 })
        ));
    }

    #[test]
    fn shape_edit_is_a_shape_error() {
        let ck = checkpoint();
        let mut text = String::new();
        for line in checkpoint_to_string(&ck).lines() {
            let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
            if v["name"] == "decoder.hidden.weight" {
                // same number of values, transposed shape
                let s = v["shape"].clone();
                v["shape"] = serde_json::json!([s[1], s[0]]);
            }
            text.push_str(&v.to_string());
            text.push('\n');
        }
        match checkpoint_from_str(&text) {
            Err(CheckpointError::Shape { name, expected, found }) => {
                assert_eq!(name, "decoder.hidden.weight");
                assert_eq!((expected.1, expected.0), found);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_array_is_reported() {
        let text: String = checkpoint_to_string(&checkpoint())
            .lines()
            .filter(|l| !l.contains("\"decoder.output.weight\""))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(
            checkpoint_from_str(&text),
            Err(CheckpointError::MissingArray(n)) if n == "decoder.output.weight"
        ));
    }
}
