//! Binary network checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "PINNPI\0" followed by the format version (1)
//! activation   u8
//! n_widths     u32, then n_widths × u32
//! problem_len  u32, then problem_len bytes of UTF-8 TOML (may be empty)
//! n_params     u64, then n_params × f64
//! ```
//!
//! The optional problem section names the catalog entry the net was trained
//! on, so a checkpoint alone is enough to rebuild the greedy policy.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, ValueNet};
use crate::error::{Error, Result};
use crate::problems::{ControlProblem, ProblemSpec};

const MAGIC: &[u8; 7] = b"PINNPI\0";
const VERSION: u8 = 1;

/// Problem reference stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRef {
    pub seed: u64,
    pub problem: ProblemSpec,
}

impl ProblemRef {
    pub fn build(&self) -> Result<ControlProblem> {
        self.problem.build(self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: ValueNet,
    pub problem: Option<ProblemRef>,
}

pub fn write_checkpoint(w: &mut impl Write, net: &ValueNet, problem: Option<&ProblemRef>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, net.activation().tag()])?;
    w.write_all(&(net.widths().len() as u32).to_le_bytes())?;
    for &width in net.widths() {
        w.write_all(&(width as u32).to_le_bytes())?;
    }
    let text = match problem {
        Some(p) => toml::to_string(p).map_err(|e| Error::Format(format!("problem reference: {e}")))?,
        None => String::new(),
    };
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    w.write_all(&(net.n_params() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(8 * net.n_params());
    for p in net.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let head: [u8; 9] = read_exact(r)?;
    if &head[..7] != MAGIC {
        return Err(Error::Format("not a network checkpoint (bad magic)".into()));
    }
    if head[7] != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", head[7])));
    }
    let activation = Activation::from_tag(head[8])
        .ok_or_else(|| Error::Format(format!("unknown activation tag {}", head[8])))?;
    let n_widths = u32::from_le_bytes(read_exact(r)?) as usize;
    if !(2..=64).contains(&n_widths) {
        return Err(Error::Format(format!("implausible layer count {n_widths}")));
    }
    let mut widths = Vec::with_capacity(n_widths);
    for _ in 0..n_widths {
        widths.push(u32::from_le_bytes(read_exact(r)?) as usize);
    }
    let text_len = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut text = vec![0u8; text_len];
    r.read_exact(&mut text)
        .map_err(|_| Error::Format("truncated problem section".into()))?;
    let problem = if text_len == 0 {
        None
    } else {
        let text = String::from_utf8(text).map_err(|_| Error::Format("problem section is not UTF-8".into()))?;
        Some(toml::from_str(&text).map_err(|e| Error::Format(format!("problem section: {e}")))?)
    };
    let n_params = u64::from_le_bytes(read_exact(r)?) as usize;
    let mut net = ValueNet::zeros(&widths, activation).map_err(|e| Error::Format(e.to_string()))?;
    if net.n_params() != n_params {
        return Err(Error::Format(format!(
            "architecture {widths:?} needs {} parameters, file declares {n_params}",
            net.n_params()
        )));
    }
    let mut raw = vec![0u8; 8 * n_params];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format("truncated parameter block".into()))?;
    for (p, chunk) in net.params_mut().iter_mut().zip(raw.chunks_exact(8)) {
        *p = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
    }
    Ok(Checkpoint { net, problem })
}

pub fn save_checkpoint(path: impl AsRef<Path>, net: &ValueNet, problem: Option<&ProblemRef>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, net, problem)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut cur = bytes.as_slice();
    let ck = read_checkpoint(&mut cur)?;
    if !cur.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after parameters", cur.len())));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let net = ValueNet::init(&[3, 7, 5, 1], Activation::Tanh, 11).unwrap();
        let pr = ProblemRef {
            seed: 7,
            problem: ProblemSpec::Lqr {
                d: 3,
                m: None,
                seed: Some(7),
                u_max: 10.0,
                sigma_scale: 0.1,
                lambda: 1.0,
            },
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net, Some(&pr)).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.net, net);
        assert_eq!(back.problem, Some(pr));

        let mut bare = Vec::new();
        write_checkpoint(&mut bare, &net, None).unwrap();
        assert_eq!(read_checkpoint(&mut bare.as_slice()).unwrap().problem, None);
    }

    #[test]
    fn rejects_corrupt_files() {
        let net = ValueNet::init(&[1, 2, 1], Activation::Square, 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net, None).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Format(_))));

        let mut bad = buf.clone();
        bad[7] = 9;
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Format(_))));

        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_checkpoint(&mut &short[..]), Err(Error::Format(_))));
    }
}
