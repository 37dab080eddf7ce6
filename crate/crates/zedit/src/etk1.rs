//! ETK1 container: magic `ETK1`, a little-endian `u16` version, then any
//! number of sections `[tag: 4 bytes][length: u64][payload]`. All integers
//! and floats are little-endian; floats are stored as raw IEEE-754 bits so
//! a write/read cycle is bit-exact.
//!
//! Section tags:
//! - `TRAJ` noise trajectory
//! - `TNSR` row-major matrix of signals
//! - `PCBN` principal-component bundle
//! - `LAMP` averaged eigenvalue profile

use std::fs;
use std::path::Path;

use zedit_core::zeus::{PcParams, PcSet};
use zedit_core::{Condition, LambdaProfile, NoiseTrajectory, PcBundle, Vector};

use crate::error::CliError;

pub const MAGIC: &[u8; 4] = b"ETK1";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FormatError {
    #[error("not an ETK1 file")]
    BadMagic,
    #[error("unsupported ETK1 version {0}")]
    Version(u16),
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("section {0} not found")]
    Missing(String),
    #[error("malformed {section} section: {reason}")]
    Malformed { section: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub tag: [u8; 4],
    pub payload: Vec<u8>,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn floats<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }
    fn condition(&mut self, c: &Condition) {
        match c {
            Condition::Unconditional => self.u8(0),
            Condition::ComponentWeights(w) => {
                self.u8(1);
                self.u32(w.len());
                self.floats(w);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    tag: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() < n {
            return Err(FormatError::Truncated(self.tag));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        if self.bytes.len() / 8 < n {
            return Err(FormatError::Truncated(self.tag));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn vector(&mut self, n: usize) -> Result<Vector, FormatError> {
        Ok(Vector::from_vec(self.floats(n)?))
    }
    fn condition(&mut self) -> Result<Condition, FormatError> {
        match self.u8()? {
            0 => Ok(Condition::Unconditional),
            1 => {
                let n = self.u32()?;
                Ok(Condition::ComponentWeights(self.floats(n)?))
            }
            other => Err(self.malformed(format!("unknown condition tag {other}"))),
        }
    }
    fn malformed(&self, reason: impl Into<String>) -> FormatError {
        FormatError::Malformed { section: self.tag.to_string(), reason: reason.into() }
    }
    fn finish(self) -> Result<(), FormatError> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(self.malformed(format!("{} trailing bytes", self.bytes.len())))
        }
    }
}

pub fn encode(sections: &[Section]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for s in sections {
        out.extend_from_slice(&s.tag);
        out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&s.payload);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Section>, FormatError> {
    let mut r = Reader { bytes, tag: "header" };
    if r.take(4).map_err(|_| FormatError::BadMagic)? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let mut sections = Vec::new();
    while !r.bytes.is_empty() {
        r.tag = "section header";
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let len = r.u64()?;
        r.tag = "section payload";
        let len = usize::try_from(len).map_err(|_| FormatError::Truncated("section payload"))?;
        sections.push(Section { tag, payload: r.take(len)?.to_vec() });
    }
    Ok(sections)
}

fn find<'a>(sections: &'a [Section], tag: &[u8; 4]) -> Result<&'a Section, FormatError> {
    sections
        .iter()
        .find(|s| &s.tag == tag)
        .ok_or_else(|| FormatError::Missing(String::from_utf8_lossy(tag).into_owned()))
}

pub fn trajectory_section(tr: &NoiseTrajectory) -> Section {
    let mut w = Writer::default();
    w.u32(tr.t_start);
    w.u32(tr.dim());
    w.u64(tr.seed);
    w.u64(tr.schedule_id);
    w.f64(tr.guidance_src);
    w.condition(&tr.cond_src);
    w.floats(tr.x_start.iter());
    for z in &tr.z {
        w.floats(z.iter());
    }
    w.floats(tr.residual.iter());
    Section { tag: *b"TRAJ", payload: w.0 }
}

pub fn read_trajectory(sections: &[Section]) -> Result<NoiseTrajectory, FormatError> {
    let mut r = Reader { bytes: &find(sections, b"TRAJ")?.payload, tag: "TRAJ" };
    let t_start = r.u32()?;
    let dim = r.u32()?;
    let seed = r.u64()?;
    let schedule_id = r.u64()?;
    let guidance_src = r.f64()?;
    let cond_src = r.condition()?;
    if t_start == 0 {
        return Err(r.malformed("t_start is zero"));
    }
    let x_start = r.vector(dim)?;
    let z = (1..t_start).map(|_| r.vector(dim)).collect::<Result<_, _>>()?;
    let residual = r.vector(dim)?;
    r.finish()?;
    Ok(NoiseTrajectory { t_start, x_start, z, residual, cond_src, guidance_src, schedule_id, seed })
}

/// Signals as rows.
pub fn tensor_section(rows: &[Vector]) -> Section {
    let mut w = Writer::default();
    w.u32(rows.len());
    w.u32(rows.first().map_or(0, |r| r.len()));
    for row in rows {
        w.floats(row.iter());
    }
    Section { tag: *b"TNSR", payload: w.0 }
}

pub fn read_tensor(sections: &[Section]) -> Result<Vec<Vector>, FormatError> {
    let mut r = Reader { bytes: &find(sections, b"TNSR")?.payload, tag: "TNSR" };
    let n = r.u32()?;
    let dim = r.u32()?;
    let rows = (0..n).map(|_| r.vector(dim)).collect::<Result<_, _>>()?;
    r.finish()?;
    Ok(rows)
}

pub fn bundle_section(b: &PcBundle) -> Section {
    let mut w = Writer::default();
    let p = &b.params;
    w.u32(p.n_pcs);
    w.u32(p.iters);
    w.f64(p.probe_c);
    w.f64(p.rho);
    match &p.mask {
        None => w.u8(0),
        Some(m) => {
            w.u8(1);
            w.u32(m.len());
            for i in m {
                w.u32(*i);
            }
        }
    }
    w.u64(b.schedule_id);
    w.condition(&b.cond);
    w.f64(b.guidance);
    w.u64(b.seed);
    w.u32(b.sets.len());
    w.u32(b.sets.first().map_or(0, |s| s.vectors.first().map_or(0, |v| v.len())));
    for set in &b.sets {
        w.u32(set.t);
        w.floats(&set.lambdas);
        for v in &set.vectors {
            w.floats(v.iter());
        }
    }
    Section { tag: *b"PCBN", payload: w.0 }
}

pub fn read_bundle(sections: &[Section]) -> Result<PcBundle, FormatError> {
    let mut r = Reader { bytes: &find(sections, b"PCBN")?.payload, tag: "PCBN" };
    let n_pcs = r.u32()?;
    let iters = r.u32()?;
    let probe_c = r.f64()?;
    let rho = r.f64()?;
    let mask = match r.u8()? {
        0 => None,
        1 => {
            let n = r.u32()?;
            Some((0..n).map(|_| r.u32()).collect::<Result<_, _>>()?)
        }
        other => return Err(r.malformed(format!("unknown mask flag {other}"))),
    };
    let schedule_id = r.u64()?;
    let cond = r.condition()?;
    let guidance = r.f64()?;
    let seed = r.u64()?;
    let n_sets = r.u32()?;
    let dim = r.u32()?;
    let mut sets = Vec::with_capacity(n_sets.min(1 << 16));
    for _ in 0..n_sets {
        let t = r.u32()?;
        let lambdas = r.floats(n_pcs)?;
        let vectors = (0..n_pcs).map(|_| r.vector(dim)).collect::<Result<_, _>>()?;
        sets.push(PcSet { t, vectors, lambdas });
    }
    r.finish()?;
    Ok(PcBundle { params: PcParams { n_pcs, iters, probe_c, rho, mask }, schedule_id, cond, guidance, seed, sets })
}

pub fn profile_section(p: &LambdaProfile) -> Section {
    let mut w = Writer::default();
    w.u32(p.n_pcs);
    w.u32(p.timesteps.len());
    for (t, row) in p.timesteps.iter().zip(&p.values) {
        w.u32(*t);
        w.floats(row);
    }
    Section { tag: *b"LAMP", payload: w.0 }
}

pub fn read_profile(sections: &[Section]) -> Result<LambdaProfile, FormatError> {
    let mut r = Reader { bytes: &find(sections, b"LAMP")?.payload, tag: "LAMP" };
    let n_pcs = r.u32()?;
    let n_t = r.u32()?;
    let mut timesteps = Vec::with_capacity(n_t.min(1 << 16));
    let mut values = Vec::with_capacity(n_t.min(1 << 16));
    for _ in 0..n_t {
        timesteps.push(r.u32()?);
        values.push(r.floats(n_pcs)?);
    }
    r.finish()?;
    Ok(LambdaProfile { n_pcs, timesteps, values })
}

pub fn write_file(path: &Path, sections: &[Section]) -> Result<(), CliError> {
    fs::write(path, encode(sections)).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<Section>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
