//! Binary checkpoint format.
//!
//! ```text
//! "SKXC" | u32 version (1) | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | rank x u32 extents | payload
//! ```
//!
//! All integers and floats are little-endian. The first tensor is named
//! `topology`; it has rank 1 and its payload is the JSON text of the
//! topology, one byte per element. Every other payload is f32.

use std::fs;
use std::path::Path;

use super::{FusionTopology, ModelError, Result, SkipcrossNet};
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 4] = b"SKXC";
const VERSION: u32 = 1;
const TOPOLOGY: &str = "topology";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn push_header(out: &mut Vec<u8>, name: &str, shape: &[usize]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

pub fn encode<T: Element>(net: &SkipcrossNet<T>) -> Vec<u8> {
    let topo = serde_json::to_vec(net.topology()).expect("topology serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.params().len() as u32 + 1).to_le_bytes());
    push_header(&mut out, TOPOLOGY, &[topo.len()]);
    out.extend_from_slice(&topo);
    for (name, p) in net.params() {
        let value = p.value();
        push_header(&mut out, name, value.shape());
        for &v in value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(corrupt(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn header(&mut self) -> Result<(String, Vec<usize>)> {
        let len = self.u16("name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| corrupt("tensor name is not UTF-8"))?
            .to_string();
        let rank = self.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| self.u32("extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        Ok((name, shape))
    }
}

/// Parsed checkpoint: topology plus named f32 tensors in file order.
pub struct Decoded {
    pub topology: FusionTopology,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(corrupt("bad magic, not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    if count == 0 {
        return Err(corrupt("no topology record"));
    }
    let (name, shape) = r.header()?;
    if name != TOPOLOGY || shape.len() != 1 {
        return Err(corrupt("first record must be the rank-1 topology"));
    }
    let topology: FusionTopology = serde_json::from_slice(r.take(shape[0], "topology")?)
        .map_err(|e| corrupt(format!("topology: {e}")))?;
    let mut tensors = Vec::with_capacity(count - 1);
    for _ in 1..count {
        let (name, shape) = r.header()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| corrupt(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Decoded { topology, tensors })
}

/// Validates every tensor against `net` before touching any parameter.
fn assign<T: Element>(net: &SkipcrossNet<T>, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    if tensors.len() != net.params().len() {
        return Err(corrupt(format!(
            "{} tensors in file, network has {}",
            tensors.len(),
            net.params().len()
        )));
    }
    for (name, t) in &tensors {
        let p = net
            .param(name)
            .ok_or_else(|| corrupt(format!("unexpected tensor `{name}`")))?;
        if p.shape() != t.shape() {
            return Err(corrupt(format!(
                "`{name}` has shape {:?}, network expects {:?}",
                t.shape(),
                p.shape()
            )));
        }
    }
    for (name, t) in tensors {
        net.param(&name).unwrap().set_value(t.cast())?;
    }
    Ok(())
}

pub fn save_weights<T: Element>(net: &SkipcrossNet<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(net)).map_err(io(path))
}

/// Builds the recorded topology and fills it with the stored weights.
pub fn load_weights<T: Element>(path: &Path) -> Result<SkipcrossNet<T>> {
    let decoded = decode(&fs::read(path).map_err(io(path))?)?;
    let net = SkipcrossNet::build(&decoded.topology, 0)?;
    assign(&net, decoded.tensors)?;
    Ok(net)
}

/// Loads weights into an existing network whose topology must match the
/// recorded one.
pub fn load_weights_into<T: Element>(net: &SkipcrossNet<T>, path: &Path) -> Result<()> {
    let decoded = decode(&fs::read(path).map_err(io(path))?)?;
    if &decoded.topology != net.topology() {
        return Err(ModelError::TopologyMismatch {
            expected: serde_json::to_string(net.topology()).unwrap(),
            found: serde_json::to_string(&decoded.topology).unwrap(),
        });
    }
    assign(net, decoded.tensors)
}
