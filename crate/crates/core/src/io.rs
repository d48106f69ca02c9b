//! On-disk formats: packed descriptor files and JSON checkpoints.
//!
//! Descriptor file layout (all integers little-endian):
//!
//! ```text
//! 0   magic        b"LDPK"
//! 4   version      u32 = 1
//! 8   header_len   u32
//! 12  header       UTF-8 JSON {"d", "m", "classes": [{"label", "image_count"}]}
//! ..  payload      f32 LE, class-major, image-major, descriptor-major, component-minor
//! ```

use std::fs;
use std::path::Path;

use serde::de::Deserializer;
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::descriptor::LocalDescriptor;
use crate::error::{Error, Result};
use crate::pipeline::Scoring;
use crate::query::ThresholdMlp;
use crate::train::{EpisodePool, PoolClass, Split};

pub const MAGIC: &[u8; 4] = b"LDPK";
pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    d: usize,
    m: usize,
    classes: Vec<ClassHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassHeader {
    label: String,
    image_count: usize,
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Serializes a pool; descriptors are narrowed to f32.
pub fn encode_descriptor_file(pool: &EpisodePool) -> Result<Vec<u8>> {
    let header = FileHeader {
        d: pool.dim(),
        m: pool.per_image(),
        classes: pool
            .classes()
            .iter()
            .map(|c| ClassHeader {
                label: c.label.clone(),
                image_count: c.images.len(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::InvalidInput("descriptor file header too large".into()))?;
    let count: usize = pool.classes().iter().map(|c| c.images.len()).sum::<usize>()
        * pool.per_image()
        * pool.dim();
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + 4 * count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for l in pool
        .classes()
        .iter()
        .flat_map(|c| c.images.iter().flatten())
    {
        for v in l.values() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_descriptor_file(bytes: &[u8]) -> Result<EpisodePool> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_err(0, "missing LDPK magic"));
    }
    if bytes.len() < PREAMBLE {
        return Err(format_err(
            bytes.len(),
            format!("preamble needs {PREAMBLE} bytes, file has {}", bytes.len()),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let payload_start = PREAMBLE
        .checked_add(header_len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| {
            format_err(
                8,
                format!(
                    "header length {header_len} runs past end of file ({} bytes)",
                    bytes.len()
                ),
            )
        })?;
    let header: FileHeader = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
        .map_err(|e| format_err(PREAMBLE, format!("bad header JSON: {e}")))?;
    if header.d == 0 || header.m == 0 {
        return Err(format_err(PREAMBLE, "header d and m must be at least 1"));
    }
    if let Some(c) = header.classes.iter().find(|c| c.image_count == 0) {
        return Err(format_err(
            PREAMBLE,
            format!("class '{}' has image_count 0", c.label),
        ));
    }
    let mut labels = std::collections::HashSet::new();
    if let Some(c) = header
        .classes
        .iter()
        .find(|c| !labels.insert(c.label.as_str()))
    {
        return Err(format_err(
            PREAMBLE,
            format!("duplicate label '{}'", c.label),
        ));
    }

    let images: usize = header.classes.iter().map(|c| c.image_count).sum();
    let expected = 4 * header.d * header.m * images;
    let actual = bytes.len() - payload_start;
    if actual != expected {
        return Err(format_err(
            payload_start,
            format!("payload should be {expected} bytes, found {actual}"),
        ));
    }

    let mut offset = payload_start;
    let mut classes = Vec::with_capacity(header.classes.len());
    for (ci, ch) in header.classes.iter().enumerate() {
        let mut imgs = Vec::with_capacity(ch.image_count);
        for img in 0..ch.image_count {
            let mut descriptors = Vec::with_capacity(header.m);
            for idx in 0..header.m {
                let start = offset;
                let values: Vec<f64> = bytes[offset..offset + 4 * header.d]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect();
                offset += 4 * header.d;
                let l = LocalDescriptor::new(values).map_err(|_| {
                    format_err(
                        start,
                        format!("non-finite value in class {ci} image {img} descriptor {idx}"),
                    )
                })?;
                l.ensure_nonzero().map_err(|_| {
                    Error::DegenerateDescriptor(format!(
                        "zero-norm descriptor at class {ci} ('{}'), image {img}, index {idx}",
                        ch.label
                    ))
                })?;
                descriptors.push(l);
            }
            imgs.push(descriptors);
        }
        classes.push(PoolClass {
            label: ch.label.clone(),
            images: imgs,
        });
    }
    EpisodePool::new(header.d, header.m, Split::Train, classes)
}

pub fn write_descriptor_file(path: impl AsRef<Path>, pool: &EpisodePool) -> Result<()> {
    fs::write(path, encode_descriptor_file(pool)?)?;
    Ok(())
}

pub fn load_descriptor_file(path: impl AsRef<Path>) -> Result<EpisodePool> {
    decode_descriptor_file(&fs::read(path)?)
}

/// f64 written with 17 significant digits.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Precise(f64);

impl Serialize for Precise {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom(
                "checkpoint values must be finite",
            ));
        }
        let raw =
            RawValue::from_string(format!("{:.16e}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Precise {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        f64::deserialize(d).map(Precise)
    }
}

fn precise(v: &[f64]) -> Vec<Precise> {
    v.iter().copied().map(Precise).collect()
}

fn plain(v: Vec<Precise>) -> Vec<f64> {
    v.into_iter().map(|p| p.0).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    d: usize,
    hidden_dim: usize,
    lambda: Precise,
    #[serde(rename = "K")]
    k_fraction: Precise,
    score_form: String,
    mode: String,
    seed: u64,
    parameters: ParameterFile,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
struct ParameterFile {
    w1: Vec<Vec<Precise>>,
    b1: Vec<Precise>,
    w2: Vec<Vec<Precise>>,
    b2: Precise,
}

/// Trained threshold network plus the scoring settings it was trained with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub mlp: ThresholdMlp,
    pub scoring: Scoring,
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let mlp = &self.mlp;
        let file = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            d: mlp.descriptor_dim(),
            hidden_dim: mlp.hidden_dim(),
            lambda: Precise(self.scoring.lambda),
            k_fraction: Precise(self.scoring.k_fraction),
            score_form: self.scoring.rule.name().to_string(),
            mode: self.scoring.pooling.name().to_string(),
            seed: self.seed,
            parameters: ParameterFile {
                w1: mlp
                    .w1()
                    .chunks_exact(mlp.input_dim())
                    .map(precise)
                    .collect(),
                b1: precise(mlp.b1()),
                w2: vec![precise(mlp.w2())],
                b2: Precise(mlp.b2()),
            },
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format_version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint version {}",
                file.format_version
            )));
        }
        let p = file.parameters;
        let input_dim = 2 * file.d;
        if p.w1.len() != file.hidden_dim || p.w1.iter().any(|r| r.len() != input_dim) {
            return Err(Error::InvalidInput(format!(
                "W1 must be {} x {input_dim}",
                file.hidden_dim
            )));
        }
        if p.w2.len() != 1 {
            return Err(Error::InvalidInput("W2 must have exactly one row".into()));
        }
        let w1 = p.w1.into_iter().flat_map(plain).collect();
        let w2 = plain(p.w2.into_iter().next().expect("one row"));
        let mlp = ThresholdMlp::from_parts(input_dim, w1, plain(p.b1), w2, p.b2.0)?;
        if mlp.hidden_dim() != file.hidden_dim {
            return Err(Error::InvalidInput(
                "b1 length disagrees with hidden_dim".into(),
            ));
        }
        let scoring = Scoring::named(
            file.k_fraction.0,
            file.lambda.0,
            &file.score_form,
            &file.mode,
        )?;
        Ok(Self {
            mlp,
            scoring,
            seed: file.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
