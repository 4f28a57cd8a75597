//! Versioned little-endian checkpoint files.
//!
//! Layout: magic `SGNCKPT1`, version `u32`, architecture descriptor (`u32`
//! length + UTF-8), step `u64`, seed `u64`, rng state (`u32` length + bytes),
//! generator parameters as `f64` in declaration order. An extension block
//! follows: config hash `u64`, named scalar extras (`u32` count, then
//! text + `f64` each), then optional optimizer state, frozen (EMA) parameters
//! and learned-score network, each behind a `u8` presence flag.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{AdamState, MlpNet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGNCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated: need {n} bytes, {} left", self.remaining()),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(Error::Format { offset: self.pos as u64, msg: "overflow".into() })?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub(crate) fn text(&mut self) -> Result<String> {
        let at = self.pos as u64;
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format { offset: at, msg: "invalid UTF-8".into() })
    }
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Serializes a ChaCha8 generator position (seed, stream, word position).
pub fn rng_to_blob(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut b = Vec::with_capacity(56);
    b.extend_from_slice(&rng.get_seed());
    b.extend_from_slice(&rng.get_stream().to_le_bytes());
    b.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    b
}

pub fn rng_from_blob(blob: &[u8]) -> Result<ChaCha8Rng> {
    if blob.len() != 56 {
        return Err(Error::Format { offset: 0, msg: format!("rng blob has {} bytes, expected 56", blob.len()) });
    }
    let seed: [u8; 32] = blob[..32].try_into().expect("32 bytes");
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(u64::from_le_bytes(blob[32..40].try_into().expect("8 bytes")));
    rng.set_word_pos(u128::from_le_bytes(blob[40..56].try_into().expect("16 bytes")));
    Ok(rng)
}

/// Learned-score network state carried in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNetState {
    pub net: MlpNet,
    pub adam: AdamState,
    pub data_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    pub rng_state: Vec<u8>,
    pub net: MlpNet,
    pub config_hash: u64,
    /// Named scalars such as the gradient-clipping reference.
    pub extras: Vec<(String, f64)>,
    pub optimizer: Option<AdamState>,
    pub frozen: Option<Vec<f64>>,
    pub score: Option<ScoreNetState>,
}

fn put_adam(out: &mut Vec<u8>, a: &AdamState) {
    out.extend_from_slice(&a.step_count().to_le_bytes());
    put_f64s(out, &[a.beta1, a.beta2, a.eps]);
    for m in a.first_moments() {
        put_f64s(out, m);
    }
    for v in a.second_moments() {
        put_f64s(out, v);
    }
}

fn read_adam(cur: &mut Cursor<'_>, net: &MlpNet) -> Result<AdamState> {
    let step = cur.u64()?;
    let (b1, b2, eps) = (cur.f64()?, cur.f64()?, cur.f64()?);
    let mut st = AdamState::new(net.params(), b1, b2, eps);
    let lens: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let m = lens.iter().map(|&n| cur.f64s(n)).collect::<Result<Vec<_>>>()?;
    let v = lens.iter().map(|&n| cur.f64s(n)).collect::<Result<Vec<_>>>()?;
    st.restore(step, m, v)?;
    Ok(st)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_text(&mut out, &self.net.descriptor());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.rng_state.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.rng_state);
        put_f64s(&mut out, &self.net.flat_params());

        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.extras.len() as u32).to_le_bytes());
        for (k, v) in &self.extras {
            put_text(&mut out, k);
            out.extend_from_slice(&v.to_le_bytes());
        }
        match &self.optimizer {
            Some(a) => {
                out.push(1);
                put_adam(&mut out, a);
            }
            None => out.push(0),
        }
        match &self.frozen {
            Some(f) => {
                out.push(1);
                put_f64s(&mut out, f);
            }
            None => out.push(0),
        }
        match &self.score {
            Some(s) => {
                out.push(1);
                put_text(&mut out, &s.net.descriptor());
                put_f64s(&mut out, &[s.data_scale]);
                put_f64s(&mut out, &s.net.flat_params());
                put_adam(&mut out, &s.adam);
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(buf);
        if cur.take(8).map_err(|_| Error::Format { offset: 0, msg: "file too short for magic".into() })?
            != CHECKPOINT_MAGIC
        {
            return Err(Error::Format { offset: 0, msg: "bad checkpoint magic".into() });
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format { offset: 8, msg: format!("unsupported checkpoint version {version}") });
        }
        let at = cur.offset() as u64;
        let desc = cur.text()?;
        let mut net = MlpNet::from_descriptor(&desc).map_err(|e| Error::Format { offset: at, msg: e.to_string() })?;
        let step = cur.u64()?;
        let seed = cur.u64()?;
        let n = cur.u32()? as usize;
        let rng_state = cur.take(n)?.to_vec();
        let flat = cur.f64s(net.param_count())?;
        net.set_flat_params(&flat)?;
        let config_hash = cur.u64()?;
        let n_extras = cur.u32()? as usize;
        let mut extras = Vec::with_capacity(n_extras.min(1024));
        for _ in 0..n_extras {
            let k = cur.text()?;
            extras.push((k, cur.f64()?));
        }
        let optimizer = match cur.u8()? {
            0 => None,
            _ => Some(read_adam(&mut cur, &net)?),
        };
        let frozen = match cur.u8()? {
            0 => None,
            _ => Some(cur.f64s(net.param_count())?),
        };
        let score = match cur.u8()? {
            0 => None,
            _ => {
                let at = cur.offset() as u64;
                let desc = cur.text()?;
                let mut snet =
                    MlpNet::from_descriptor(&desc).map_err(|e| Error::Format { offset: at, msg: e.to_string() })?;
                let data_scale = cur.f64()?;
                let flat = cur.f64s(snet.param_count())?;
                snet.set_flat_params(&flat)?;
                let adam = read_adam(&mut cur, &snet)?;
                Some(ScoreNetState { net: snet, adam, data_scale })
            }
        };
        if cur.remaining() != 0 {
            return Err(Error::Format { offset: cur.offset() as u64, msg: "trailing bytes".into() });
        }
        Ok(Checkpoint { step, seed, rng_state, net, config_hash, extras, optimizer, frozen, score })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    pub fn extra(&self, key: &str) -> Option<f64> {
        self.extras.iter().find(|(k, _)| k == key).map(|e| e.1)
    }

    /// Errors unless the stored generator matches `descriptor`.
    pub fn expect_architecture(&self, descriptor: &str) -> Result<()> {
        let have = self.net.descriptor();
        if have != descriptor {
            return Err(Error::Config(format!("checkpoint architecture '{have}' does not match '{descriptor}'")));
        }
        Ok(())
    }
}
