//! Learnable weights: construction with variance-preserving init, name-keyed
//! access for the optimizer, and bitwise-lossless checkpoints.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::diffcore::Tensor;

const MAGIC: &[u8; 8] = b"XSFCKPT1";
const EMBED_STD: f64 = 0.1;

#[derive(Clone, Copy, PartialEq)]
enum ParamKind {
    Lookup,
    ConvV,
    LinearV,
    Gain,
    Bias,
}

/// Every parameter the model owns, keyed by a stable dotted name. Weight-
/// normed layers store direction `*.v` and per-channel gain `*.g`; gains
/// start at the direction norms so the initial effective weight equals v.
#[derive(Debug)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

fn spec(config: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let ModelConfig { f, f_prime: _, d, k, enc_layers, dec_layers, .. } = *config;
    let we = config.enc_embed_width();
    let wg = config.dec_embed_width();
    let v = config.vocab_size;
    let mut out = Vec::new();
    let lookup = |name: &str, shape: Vec<usize>, out: &mut Vec<_>| {
        out.push((name.to_string(), shape, ParamKind::Lookup));
    };
    let linear = |name: &str, a: usize, b: usize, out: &mut Vec<_>| {
        out.push((format!("{name}.v"), vec![a, b], ParamKind::LinearV));
        out.push((format!("{name}.g"), vec![b], ParamKind::Gain));
        out.push((format!("{name}.b"), vec![b], ParamKind::Bias));
    };
    let conv = |name: &str, channels: usize, out: &mut Vec<_>| {
        out.push((format!("{name}.v"), vec![2 * channels, k * channels], ParamKind::ConvV));
        out.push((format!("{name}.g"), vec![2 * channels], ParamKind::Gain));
        out.push((format!("{name}.b"), vec![2 * channels], ParamKind::Bias));
    };
    lookup("word_emb", vec![v, f], &mut out);
    lookup("pos_src", vec![config.max_src_positions, f], &mut out);
    lookup("pos_tgt", vec![config.max_tgt_positions, f], &mut out);
    linear("enc.in", we, d, &mut out);
    for i in 0..enc_layers {
        conv(&format!("enc.{i}.conv"), d, &mut out);
    }
    linear("enc.out", d, we, &mut out);
    linear("dec.in", wg, d, &mut out);
    for i in 0..dec_layers {
        conv(&format!("dec.{i}.conv"), d, &mut out);
        linear(&format!("dec.{i}.attn_q"), d, we, &mut out);
        linear(&format!("dec.{i}.attn_o"), we, d, &mut out);
    }
    linear("out", d, v, &mut out);
    out
}

fn channel_norms(v: &Tensor, kind: ParamKind) -> Vec<f64> {
    let (rows, cols) = (v.shape()[0], v.shape()[1]);
    match kind {
        ParamKind::ConvV => (0..rows)
            .map(|r| v.values()[r * cols..(r + 1) * cols].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect(),
        ParamKind::LinearV => (0..cols)
            .map(|c| (0..rows).map(|r| v.at(r, c).powi(2)).sum::<f64>().sqrt())
            .collect(),
        _ => unreachable!("gains only follow weight directions"),
    }
}

impl ModelParams {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        let mut last_direction: Option<(Tensor, ParamKind)> = None;
        for (name, shape, kind) in spec(&config) {
            let tensor = match kind {
                ParamKind::Lookup => Tensor::randn(&shape, EMBED_STD, &mut rng),
                ParamKind::ConvV => {
                    let fan_in = shape[1] as f64;
                    let std = (4.0 * (1.0 - config.dropout) / fan_in).sqrt();
                    let t = Tensor::randn(&shape, std, &mut rng);
                    last_direction = Some((t.clone(), kind));
                    t
                }
                ParamKind::LinearV => {
                    let std = (1.0 / shape[0] as f64).sqrt();
                    let t = Tensor::randn(&shape, std, &mut rng);
                    last_direction = Some((t.clone(), kind));
                    t
                }
                ParamKind::Gain => {
                    let (v, vkind) = last_direction.take().expect("gain follows its direction");
                    Tensor::new(&shape, channel_norms(&v, vkind))
                }
                ParamKind::Bias => Tensor::zeros(&shape),
            };
            tensors.insert(name, tensor.with_grad());
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn total_values(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        let json = serde_json::to_vec(&self.config).map_err(std::io::Error::other)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        out.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            out.write_all(&(name.len() as u64).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(tensor.shape().len() as u64).to_le_bytes())?;
            for &dim in tensor.shape() {
                out.write_all(&(dim as u64).to_le_bytes())?;
            }
            for x in tensor.values() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| short("header"))?;
        if &magic != MAGIC {
            return Err(ModelError::BadCheckpoint("unrecognized header".into()));
        }
        let json_len = read_u64(&mut input)? as usize;
        let mut json = vec![0u8; json_len];
        input.read_exact(&mut json).map_err(|_| short("config"))?;
        let config: ModelConfig = serde_json::from_slice(&json)
            .map_err(|e| ModelError::BadCheckpoint(format!("config: {e}")))?;
        config.validate()?;
        let count = read_u64(&mut input)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u64(&mut input)? as usize;
            if name_len > 4096 {
                return Err(ModelError::BadCheckpoint(format!("name of {name_len} bytes")));
            }
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name).map_err(|_| short("name"))?;
            let name = String::from_utf8(name)
                .map_err(|_| ModelError::BadCheckpoint("non-utf8 name".into()))?;
            let rank = read_u64(&mut input)? as usize;
            if rank > 4 {
                return Err(ModelError::BadCheckpoint(format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut input)? as usize);
            }
            let numel: usize = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(
                || ModelError::BadCheckpoint(format!("{name}: shape overflows")),
            )?;
            let mut values = vec![0.0; numel];
            for x in values.iter_mut() {
                *x = read_f64(&mut input).map_err(|_| short(&name))?;
            }
            tensors.insert(name, Tensor::new(&shape, values).with_grad());
        }
        if input.bytes().next().is_some() {
            return Err(ModelError::BadCheckpoint("trailing bytes".into()));
        }
        let expected = spec(&config);
        if expected.len() != tensors.len() {
            return Err(ModelError::BadCheckpoint(format!(
                "expected {} parameters for this config, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape, _) in expected {
            match tensors.get(&name) {
                None => return Err(ModelError::BadCheckpoint(format!("missing {name}"))),
                Some(t) if t.shape() != shape => {
                    return Err(ModelError::BadCheckpoint(format!(
                        "{name}: shape {:?} does not fit config ({shape:?})",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(ModelParams { config, tensors })
    }
}

fn short(what: &str) -> ModelError {
    ModelError::BadCheckpoint(format!("file ends inside {what}"))
}

fn read_u64(input: &mut impl Read) -> Result<u64, ModelError> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf).map_err(|_| short("length field"))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(input: &mut impl Read) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}
