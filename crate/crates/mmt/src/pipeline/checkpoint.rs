//! Binary checkpoints: named parameter tensors with the config snapshot,
//! optimizer state and validation history. Save/load is bit-exact.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::config::model_config_from_canonical;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MMTCKPT1";
const VERSION: u32 = 1;

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub entries: Vec<(String, Tensor<f32>, Tensor<f32>)>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerSnapshot>,
    /// (epoch, validation BLEU) per epoch.
    pub history: Vec<(u32, f64)>,
}

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u32(b.len() as u32)?;
        self.out.write_all(b)?;
        Ok(())
    }
    fn tensor(&mut self, t: &Tensor<f32>) -> Result<()> {
        self.u32(t.rank() as u32)?;
        for &d in t.shape() {
            self.u32(d as u32)?;
        }
        for x in t.data() {
            self.out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("{}: truncated file", self.path)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: non-UTF-8 string", self.path)))
    }
    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer {
            out: BufWriter::new(fs::File::create(path)?),
        };
        w.out.write_all(MAGIC)?;
        w.u32(VERSION)?;
        let canonical = self.config.canonical_string();
        w.u64(self.config.config_hash())?;
        w.bytes(canonical.as_bytes())?;
        w.u32(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.bytes(name.as_bytes())?;
            w.tensor(t)?;
        }
        match &self.optimizer {
            None => w.u32(0)?,
            Some(opt) => {
                w.u32(1)?;
                w.u64(opt.step)?;
                w.u32(opt.entries.len() as u32)?;
                for (name, m, v) in &opt.entries {
                    w.bytes(name.as_bytes())?;
                    w.tensor(m)?;
                    w.tensor(v)?;
                }
            }
        }
        w.u32(self.history.len() as u32)?;
        for (epoch, bleu) in &self.history {
            w.u32(*epoch)?;
            w.f64(*bleu)?;
        }
        w.out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader {
            buf: &bytes,
            pos: 0,
            path: path.display().to_string(),
        };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: missing MMTCKPT1 magic",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: version {version}, this build reads {VERSION}",
                path.display()
            )));
        }
        let stored_hash = r.u64()?;
        let canonical = r.string()?;
        let config = model_config_from_canonical(&canonical)?;
        if config.config_hash() != stored_hash {
            return Err(Error::Checkpoint(format!(
                "{}: config hash mismatch (stored {stored_hash:#x}, recomputed {:#x})",
                path.display(),
                config.config_hash()
            )));
        }
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            tensors.push((name, r.tensor()?));
        }
        let optimizer = if r.u32()? == 1 {
            let step = r.u64()?;
            let m = r.u32()? as usize;
            let mut entries = Vec::with_capacity(m);
            for _ in 0..m {
                let name = r.string()?;
                let mom = r.tensor()?;
                let vel = r.tensor()?;
                entries.push((name, mom, vel));
            }
            Some(OptimizerSnapshot { step, entries })
        } else {
            None
        };
        let h = r.u32()? as usize;
        let mut history = Vec::with_capacity(h);
        for _ in 0..h {
            let epoch = r.u32()?;
            let bleu = r.f64()?;
            history.push((epoch, bleu));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: {} trailing bytes",
                path.display(),
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            tensors,
            optimizer,
            history,
        })
    }

    /// Architecture guard: the loaded config must hash identically to the
    /// expected one.
    pub fn verify_matches(&self, expected: &ModelConfig) -> Result<()> {
        if self.config.config_hash() != expected.config_hash() {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint is {}/{} d_model {}, expected {}/{} d_model {}",
                self.config.family.label(),
                self.config.visual_mode.label(),
                self.config.d_model,
                expected.family.label(),
                expected.visual_mode.label(),
                expected.d_model
            )));
        }
        Ok(())
    }
}
