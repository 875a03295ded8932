//! `SCPD` model files.
//!
//! ```text
//! "SCPD" | version: u32 | tag: u8 | body
//! ```
//!
//! Tags: 0 = MLP predicting noise, 1 = MLP denoiser, 2 = analytic Gaussian,
//! 3 = analytic mixture. Numbers are little-endian; floats are f64.

use std::path::Path;

use crate::error::{Error, Result};
use crate::schedule::NoiseLevel;

use super::{AnalyticGaussianScore, GmmScore, MlpDenoiser, Parameterization, ScoreModel};

pub const SCPD_MAGIC: &[u8; 4] = b"SCPD";
pub const SCPD_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ModelTag {
    MlpEpsilon = 0,
    MlpDenoiser = 1,
    Gaussian = 2,
    Gmm = 3,
}

impl ModelTag {
    pub(crate) fn for_parameterization(p: Parameterization) -> Self {
        match p {
            Parameterization::Epsilon => ModelTag::MlpEpsilon,
            Parameterization::Denoiser => ModelTag::MlpDenoiser,
        }
    }
}

pub(crate) fn envelope(tag: ModelTag, body: impl FnOnce(&mut Vec<u8>)) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SCPD_MAGIC);
    put_u32(&mut out, SCPD_VERSION);
    out.push(tag as u8);
    body(&mut out);
    out
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        put_f64(out, *v);
    }
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(self.what, format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.what, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::format(
                self.what,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ))
        }
    }
}

/// Any model that can live in an `SCPD` file.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Gaussian(AnalyticGaussianScore),
    Gmm(GmmScore),
    Mlp(MlpDenoiser),
}

impl AnyModel {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "SCPD");
        if r.take(4)? != SCPD_MAGIC {
            return Err(Error::format("SCPD", "bad magic"));
        }
        let version = r.u32()?;
        if version != SCPD_VERSION {
            return Err(Error::format("SCPD", format!("unsupported version {version}")));
        }
        let model = match r.u8()? {
            0 => AnyModel::Mlp(MlpDenoiser::decode(&mut r, Parameterization::Epsilon)?),
            1 => AnyModel::Mlp(MlpDenoiser::decode(&mut r, Parameterization::Denoiser)?),
            2 => AnyModel::Gaussian(AnalyticGaussianScore::decode(&mut r)?),
            3 => AnyModel::Gmm(GmmScore::decode(&mut r)?),
            t => return Err(Error::format("SCPD", format!("unknown model tag {t}"))),
        };
        r.finish()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        AnyModel::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    fn inner(&self) -> &dyn ScoreModel {
        match self {
            AnyModel::Gaussian(m) => m,
            AnyModel::Gmm(m) => m,
            AnyModel::Mlp(m) => m,
        }
    }
}

impl ScoreModel for AnyModel {
    fn dim(&self) -> usize {
        self.inner().dim()
    }
    fn evaluate(&self, x: &[f64], level: &NoiseLevel) -> Result<Vec<f64>> {
        self.inner().evaluate(x, level)
    }
    fn jvp(&self, x: &[f64], level: &NoiseLevel, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.inner().jvp(x, level, v)
    }
    fn to_model_space(&self, x0: &[f64]) -> Vec<f64> {
        self.inner().to_model_space(x0)
    }
    fn to_bytes(&self) -> Vec<u8> {
        self.inner().to_bytes()
    }
}

impl From<AnalyticGaussianScore> for AnyModel {
    fn from(m: AnalyticGaussianScore) -> Self {
        AnyModel::Gaussian(m)
    }
}

impl From<GmmScore> for AnyModel {
    fn from(m: GmmScore) -> Self {
        AnyModel::Gmm(m)
    }
}

impl From<MlpDenoiser> for AnyModel {
    fn from(m: MlpDenoiser) -> Self {
        AnyModel::Mlp(m)
    }
}
