//! Checkpoint container.
//!
//! Layout:
//!
//! ```text
//! trajmask-checkpoint 1\n
//! header-bytes = <decimal length>\n
//! <header: TOML with `step`, `seed` and the full `[config]` table>
//! <u32 array count>
//! per array:
//!   u32 name length, UTF-8 name
//!   u8 dtype (1 = f64)
//!   u32 rank, u64 per dimension
//!   little-endian payload, row-major
//! ```
//!
//! Arrays are the model parameters in declaration order, then
//! `adam.first.<name>` and `adam.second.<name>` for every parameter. All
//! integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamSet;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamState;
use crate::tensor::Mat;
use crate::trainer::TrainConfig;

const MAGIC: &str = "trajmask-checkpoint 1";
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub optimizer: AdamState,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    seed: u64,
    adam_steps: u64,
    config: TrainConfig,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad("truncated file"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line"))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8"))?;
        self.pos += nl + 1;
        Ok(line)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn write_array(out: &mut Vec<u8>, name: &str, m: &Mat) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_array(r: &mut Reader) -> Result<(String, Mat)> {
    let len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(len)?)
        .map_err(|_| bad("array name is not UTF-8"))?
        .to_string();
    if r.u8()? != DTYPE_F64 {
        return Err(bad(format!("{name}: unsupported dtype")));
    }
    let rank = r.u32()?;
    if rank != 2 {
        return Err(bad(format!("{name}: rank {rank}, expected 2")));
    }
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let count = rows.checked_mul(cols).ok_or_else(|| bad("array too large"))?;
    let bytes = r.take(count.checked_mul(8).ok_or_else(|| bad("array too large"))?)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((name, Mat::from_vec(rows, cols, data)))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            step: self.step,
            seed: self.config.seed,
            adam_steps: self.optimizer.steps,
            config: self.config.clone(),
        };
        let header = toml::to_string(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(format!("header-bytes = {}\n", header.len()).as_bytes());
        out.extend_from_slice(header.as_bytes());

        let n = self.params.len();
        out.extend_from_slice(&((3 * n) as u32).to_le_bytes());
        for (_, name, m) in self.params.iter() {
            write_array(&mut out, name, m);
        }
        for (i, (_, name, _)) in self.params.iter().enumerate() {
            write_array(&mut out, &format!("adam.first.{name}"), &self.optimizer.first[i]);
        }
        for (i, (_, name, _)) in self.params.iter().enumerate() {
            write_array(&mut out, &format!("adam.second.{name}"), &self.optimizer.second[i]);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.line()? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len_line = r.line()?;
        let len: usize = len_line
            .strip_prefix("header-bytes = ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing header length"))?;
        let header = std::str::from_utf8(r.take(len)?).map_err(|_| bad("header is not UTF-8"))?;
        let header: Header = toml::from_str(header).map_err(|e| bad(format!("header: {e}")))?;

        let count = r.u32()? as usize;
        if !count.is_multiple_of(3) {
            return Err(bad("array count is not a multiple of 3"));
        }
        let n = count / 3;
        let mut params = ParamSet::new();
        for _ in 0..n {
            let (name, m) = read_array(&mut r)?;
            params.add(name, m);
        }
        let mut moments = |prefix: &str| -> Result<Vec<Mat>> {
            (0..n)
                .map(|i| {
                    let (name, m) = read_array(&mut r)?;
                    let expect = format!("{prefix}{}", params.name(crate::autograd::ParamId(i)));
                    if name != expect || m.shape() != params.values()[i].shape() {
                        return Err(bad(format!("expected {expect}, found {name}")));
                    }
                    Ok(m)
                })
                .collect()
        };
        let first = moments("adam.first.")?;
        let second = moments("adam.second.")?;
        if r.pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        let ckpt = Checkpoint {
            config: header.config,
            params,
            optimizer: AdamState {
                first,
                second,
                steps: header.adam_steps,
            },
            step: header.step,
        };
        // rejects parameter sets that do not fit the stored model config
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.model.clone(), self.params.clone())
    }

    /// Human-readable summary: config, step and array shapes.
    pub fn describe(&self) -> String {
        let mut s = format!(
            "step = {}\nseed = {}\nparameters = {}\n\n[config]\n{}\n[arrays]\n",
            self.step,
            self.config.seed,
            self.params.numel(),
            self.config.to_toml_string()
        );
        for (_, name, m) in self.params.iter() {
            s.push_str(&format!("{name} = {}x{}\n", m.rows(), m.cols()));
        }
        s
    }
}
