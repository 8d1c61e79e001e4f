use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::conditions::text::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{Grads, ParamSet};
use crate::tensor::Tensor;

use super::optim::AdamW;

const MAGIC: &[u8; 4] = b"OHCK";
const VERSION: u32 = 1;
pub const LOSS_HISTORY: usize = 1000;

/// Condition activation counts over the samples of one stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exposure {
    pub samples: u64,
    pub text: u64,
    pub audio: u64,
    pub pose: u64,
    pub motion: u64,
}

impl Exposure {
    pub fn rate(&self, count: u64) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            count as f64 / self.samples as f64
        }
    }

    pub fn rates(&self) -> [f64; 3] {
        [
            self.rate(self.text),
            self.rate(self.audio),
            self.rate(self.pose),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub opt: AdamW<f32>,
    /// Optimizer steps taken over the whole run.
    pub step: u64,
    /// Index of the stage in progress; equals the plan count once done.
    pub stage: usize,
    pub stage_step: u64,
    pub rng: ChaCha8Rng,
    pub losses: VecDeque<f64>,
    pub exposure: Exposure,
}

impl PartialEq for TrainState {
    fn eq(&self, o: &Self) -> bool {
        self.model == o.model
            && self.opt == o.opt
            && (self.step, self.stage, self.stage_step) == (o.step, o.stage, o.stage_step)
            && self.rng == o.rng
            && self.losses == o.losses
            && self.exposure == o.exposure
    }
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let opt = AdamW::new(&model.params, [0.9, 0.95]);
        Self {
            model,
            opt,
            step: 0,
            stage: 0,
            stage_step: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
            losses: VecDeque::new(),
            exposure: Exposure::default(),
        }
    }

    pub fn push_loss(&mut self, loss: f64) {
        if self.losses.len() == LOSS_HISTORY {
            self.losses.pop_front();
        }
        self.losses.push_back(loss);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let m = &self.model;
        let header = Header {
            model_hash: m.cfg.hash(),
            model: m.cfg.clone(),
            codec: m.codec.clone(),
            vocab: m.vocab.clone(),
            tensors: m
                .params
                .iter()
                .map(|(_, n, t)| TensorMeta {
                    name: n.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
            train: TrainMeta {
                step: self.step,
                stage: self.stage,
                stage_step: self.stage_step,
                opt_step: self.opt.step,
                betas: [self.opt.beta1, self.opt.beta2],
                eps: self.opt.eps,
                rng_seed: self
                    .rng
                    .get_seed()
                    .iter()
                    .map(|b| format!("{b:02x}"))
                    .collect(),
                rng_stream: self.rng.get_stream(),
                rng_word_pos: self.rng.get_word_pos().to_string(),
                losses: self.losses.iter().copied().collect(),
                exposure: self.exposure,
            },
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for block in [m.params.tensors(), &self.opt.m.tensors, &self.opt.v.tensors] {
            for t in block {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let h: Header = serde_json::from_slice(&json)?;
        if h.model.hash() != h.model_hash {
            return Err(Error::Format(format!(
                "config hash {} does not match stored {}",
                h.model.hash(),
                h.model_hash
            )));
        }
        let mut read_block = || -> Result<Vec<Tensor<f32>>> {
            h.tensors
                .iter()
                .map(|m| {
                    let mut buf = vec![0u8; m.rows * m.cols * 4];
                    r.read_exact(&mut buf)?;
                    let data = buf
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Ok(Tensor::from_vec(m.rows, m.cols, data))
                })
                .collect()
        };
        let weights = read_block()?;
        let mom1 = read_block()?;
        let mom2 = read_block()?;
        let mut params = ParamSet::new();
        for (m, t) in h.tensors.iter().zip(weights) {
            params.insert(m.name.clone(), t);
        }
        let model = Model {
            cfg: h.model,
            codec: h.codec,
            vocab: h.vocab.reindex(),
            params,
        };
        model.validate()?;
        let expected = crate::model::init_params(&model.cfg, &mut ChaCha8Rng::seed_from_u64(0));
        for (_, name, t) in expected.iter() {
            match model.params.by_name(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(Error::Format(format!(
                        "parameter {name} missing or misshaped"
                    )))
                }
            }
        }
        let tr = h.train;
        let seed_bytes: Vec<u8> = (0..tr.rng_seed.len() / 2)
            .map(|i| u8::from_str_radix(&tr.rng_seed[2 * i..2 * i + 2], 16))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = seed_bytes
            .try_into()
            .map_err(|_| Error::Format("rng seed length".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(tr.rng_stream);
        rng.set_word_pos(
            tr.rng_word_pos
                .parse()
                .map_err(|e| Error::Format(format!("rng position: {e}")))?,
        );
        Ok(Self {
            opt: AdamW {
                beta1: tr.betas[0],
                beta2: tr.betas[1],
                eps: tr.eps,
                step: tr.opt_step,
                m: Grads { tensors: mom1 },
                v: Grads { tensors: mom2 },
            },
            model,
            step: tr.step,
            stage: tr.stage,
            stage_step: tr.stage_step,
            rng,
            losses: tr.losses.into(),
            exposure: tr.exposure,
        })
    }
}

/// Model-only view of a checkpoint.
pub fn load_model(path: &Path) -> Result<Model> {
    Ok(TrainState::load(path)?.model)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainMeta {
    step: u64,
    stage: usize,
    stage_step: u64,
    opt_step: u64,
    betas: [f64; 2],
    eps: f64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    losses: Vec<f64>,
    exposure: Exposure,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_hash: String,
    model: ModelConfig,
    codec: CodecConfig,
    vocab: Vocab,
    tensors: Vec<TensorMeta>,
    train: TrainMeta,
}
