//! Checkpoints: a text manifest plus a raw `f32` payload.
//!
//! ```text
//! ragforge-checkpoint 1
//! vocab 3200
//! enc_dim 128
//! gen_dim 48
//! hidden 48
//! seed 0
//! step 2000
//! mode end2end
//! tensor question.embed 3200 128
//! ...
//! ```
//!
//! The payload holds every listed tensor, row-major, little-endian `f32`,
//! in manifest order. Parameters are kept at `f32` precision during
//! training, so a save/load round trip is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::{DualEncoderParams, EncoderParams};
use crate::error::{Error, Result};
use crate::model::{GeneratorParams, ModelDims, ModelParams};
use crate::tensor::Matrix;
use crate::trainer::TrainMode;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PAYLOAD_FILE: &str = "tensors.bin";
const HEADER: &str = "ragforge-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub seed: u64,
    pub step: u64,
    pub mode: TrainMode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSpec {
    fn len(&self) -> Option<usize> {
        self.rows.checked_mul(self.cols)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub version: u32,
    pub dims: ModelDims,
    pub seed: u64,
    pub step: u64,
    pub mode: TrainMode,
    pub tensors: Vec<TensorSpec>,
}

/// Names and shapes every checkpoint of the given dims must list, in order.
pub fn expected_tensors(dims: ModelDims) -> Vec<TensorSpec> {
    let ModelDims {
        vocab: v,
        enc_dim: d,
        gen_dim: dg,
        hidden: h,
    } = dims;
    let spec = |name: &str, rows, cols| TensorSpec {
        name: name.to_string(),
        rows,
        cols,
    };
    vec![
        spec("question.embed", v, d),
        spec("question.proj", d, d),
        spec("question.bias", 1, d),
        spec("passage.embed", v, d),
        spec("passage.proj", d, d),
        spec("passage.bias", 1, d),
        spec("generator.embed", v + 2, dg),
        spec("generator.hidden", h, 3 * dg),
        spec("generator.hidden_bias", 1, h),
        spec("generator.output", v + 1, h),
    ]
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = format!("{HEADER} {}\n", self.version);
        let d = &self.dims;
        for (k, v) in [
            ("vocab", d.vocab as u64),
            ("enc_dim", d.enc_dim as u64),
            ("gen_dim", d.gen_dim as u64),
            ("hidden", d.hidden as u64),
            ("seed", self.seed),
            ("step", self.step),
        ] {
            let _ = writeln!(s, "{k} {v}");
        }
        let _ = writeln!(s, "mode {}", self.mode);
        for t in &self.tensors {
            let _ = writeln!(s, "tensor {} {} {}", t.name, t.rows, t.cols);
        }
        s
    }

    /// Parses a manifest and checks the tensor list against the dims.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| bad("empty manifest"))?;
        let version = match first.split_whitespace().collect::<Vec<_>>()[..] {
            [HEADER, v] => v
                .parse::<u32>()
                .map_err(|_| bad(format!("bad format version {v:?}")))?,
            _ => return Err(bad("missing checkpoint header")),
        };
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }

        let mut fields: [Option<u64>; 6] = [None; 6];
        const KEYS: [&str; 6] = ["vocab", "enc_dim", "gen_dim", "hidden", "seed", "step"];
        let mut mode = None;
        let mut tensors = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let words: Vec<&str> = line.split_whitespace().collect();
            match words[..] {
                ["tensor", name, rows, cols] => {
                    let dim = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| bad(format!("line {lineno}: bad shape for tensor {name}")))
                    };
                    tensors.push(TensorSpec {
                        name: name.to_string(),
                        rows: dim(rows)?,
                        cols: dim(cols)?,
                    });
                }
                ["mode", m] => {
                    mode = Some(m.parse::<TrainMode>().map_err(|e| bad(format!("line {lineno}: {e}")))?);
                }
                [key, value] => {
                    let slot = KEYS
                        .iter()
                        .position(|k| *k == key)
                        .ok_or_else(|| bad(format!("line {lineno}: unknown key {key:?}")))?;
                    if fields[slot].is_some() {
                        return Err(bad(format!("line {lineno}: duplicate key {key:?}")));
                    }
                    fields[slot] = Some(
                        value
                            .parse()
                            .map_err(|_| bad(format!("line {lineno}: bad value for {key}")))?,
                    );
                }
                _ => return Err(bad(format!("line {lineno}: malformed line"))),
            }
        }
        let get = |i: usize| fields[i].ok_or_else(|| bad(format!("missing key {:?}", KEYS[i])));
        let dim = |i: usize| -> Result<usize> {
            let v = get(i)?;
            usize::try_from(v)
                .ok()
                .filter(|&v| v > 0 && v <= 1 << 24)
                .ok_or_else(|| bad(format!("{} out of range", KEYS[i])))
        };
        let dims = ModelDims {
            vocab: dim(0)?,
            enc_dim: dim(1)?,
            gen_dim: dim(2)?,
            hidden: dim(3)?,
        };
        if dims.vocab < 2 {
            return Err(bad("vocab must be at least 2"));
        }
        let manifest = Manifest {
            version,
            dims,
            seed: get(4)?,
            step: get(5)?,
            mode: mode.ok_or_else(|| bad("missing key \"mode\""))?,
            tensors,
        };
        manifest.check_tensors()?;
        Ok(manifest)
    }

    fn check_tensors(&self) -> Result<()> {
        let expected = expected_tensors(self.dims);
        for (i, want) in expected.iter().enumerate() {
            let got = self
                .tensors
                .get(i)
                .ok_or_else(|| bad(format!("tensor {} missing from manifest", want.name)))?;
            if got.name != want.name {
                return Err(bad(format!(
                    "expected tensor {} at position {i}, found {}",
                    want.name, got.name
                )));
            }
            if (got.rows, got.cols) != (want.rows, want.cols) {
                return Err(bad(format!(
                    "tensor {} has shape {}x{} but the dims require {}x{}",
                    got.name, got.rows, got.cols, want.rows, want.cols
                )));
            }
        }
        if let Some(extra) = self.tensors.get(expected.len()) {
            return Err(bad(format!("unexpected tensor {}", extra.name)));
        }
        Ok(())
    }

    /// Payload size in bytes implied by the tensor list.
    pub fn payload_len(&self) -> Option<usize> {
        self.tensors
            .iter()
            .try_fold(0usize, |acc, t| acc.checked_add(t.len()?.checked_mul(4)?))
    }
}

fn tensors_of(p: &ModelParams) -> [&[f64]; 10] {
    let (q, d, g) = (&p.encoders.question, &p.encoders.passage, &p.generator);
    [
        q.embed.as_slice(),
        q.proj.as_slice(),
        &q.bias,
        d.embed.as_slice(),
        d.proj.as_slice(),
        &d.bias,
        g.embed.as_slice(),
        g.hidden.as_slice(),
        &g.hidden_bias,
        g.output.as_slice(),
    ]
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        let dims = self.params.dims();
        Manifest {
            version: CHECKPOINT_VERSION,
            dims,
            seed: self.seed,
            step: self.step,
            mode: self.mode,
            tensors: expected_tensors(dims),
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let tensors = tensors_of(&self.params);
        let n: usize = tensors.iter().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(4 * n);
        for x in tensors.iter().flat_map(|t| t.iter()) {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        out
    }

    /// Rebuilds a checkpoint from manifest text and payload bytes.
    pub fn from_parts(manifest: &str, payload: &[u8]) -> Result<Self> {
        let m = Manifest::parse(manifest)?;
        let want = m.payload_len().ok_or_else(|| bad("tensor sizes overflow"))?;
        if payload.len() != want {
            return Err(bad(format!(
                "payload is {} bytes but the manifest lists {want}",
                payload.len()
            )));
        }
        let mut rest = payload;
        let mut mats = Vec::with_capacity(m.tensors.len());
        for t in &m.tensors {
            let (head, tail) = rest.split_at(t.rows * t.cols * 4);
            rest = tail;
            let data: Vec<f64> = head
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            if data.iter().any(|x| !x.is_finite()) {
                return Err(bad(format!("tensor {} holds non-finite values", t.name)));
            }
            mats.push(Matrix::from_vec(t.rows, t.cols, data));
        }
        let mut it = mats.into_iter();
        let mut next = || it.next().expect("tensor count checked by manifest");
        let mut encoder = || EncoderParams {
            embed: next(),
            proj: next(),
            bias: next().as_slice().to_vec(),
        };
        let question = encoder();
        let passage = encoder();
        let generator = GeneratorParams {
            embed: next(),
            hidden: next(),
            hidden_bias: next().as_slice().to_vec(),
            output: next(),
        };
        Ok(Checkpoint {
            params: ModelParams {
                encoders: DualEncoderParams { question, passage },
                generator,
            },
            seed: m.seed,
            step: m.step,
            mode: m.mode,
        })
    }

    /// Writes `manifest.txt` and `tensors.bin` into `dir`, creating it.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let payload = dir.join(PAYLOAD_FILE);
        std::fs::write(&payload, self.payload()).map_err(|e| Error::io(&payload, e))?;
        // Manifest last, so a manifest never describes a missing payload.
        let manifest = dir.join(MANIFEST_FILE);
        std::fs::write(&manifest, self.manifest().render()).map_err(|e| Error::io(&manifest, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let payload = dir.join(PAYLOAD_FILE);
        let bytes = std::fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
        Self::from_parts(&text, &bytes)
    }
}
