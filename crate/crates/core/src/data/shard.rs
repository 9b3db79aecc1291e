//! Binary sample shards.
//!
//! Layout (all integers and doubles little-endian):
//!
//! ```text
//! magic "TRJSHARD" | version u32 | sample count u64
//! per sample:
//!   domain u8 | agent slots u32 | mask u8 × n
//!   real agent count u32 | agent ids i64 × count
//!   tensor history | tensor future | tensor lane ids (as f64)
//!   graph count u32 | tensor adjacency × count
//! tensor: rank u32 | dims u32 × rank | f64 × product(dims)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use trajformer_autodiff::Tensor;

use crate::data::sample::{Domain, TrajectorySample};
use crate::error::{Error, Result};
use crate::graph::SceneGraph;

pub const SHARD_MAGIC: &[u8; 8] = b"TRJSHARD";
pub const SHARD_VERSION: u32 = 1;

pub(crate) fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_u32::<LE>(t.rank() as u32)?;
    for &d in t.shape() {
        w.write_u32::<LE>(d as u32)?;
    }
    for &v in t.data() {
        w.write_f64::<LE>(v)?;
    }
    Ok(())
}

pub(crate) fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rank = r.read_u32::<LE>().map_err(format_err)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u32::<LE>().map_err(format_err)? as usize);
    }
    let len: usize = shape.iter().product();
    if len > 1 << 28 {
        return Err(Error::Format(format!("tensor of shape {shape:?} too large")));
    }
    let mut data = vec![0.0; len];
    r.read_f64_into::<LE>(&mut data).map_err(format_err)?;
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

fn format_err(e: std::io::Error) -> Error {
    Error::Format(format!("truncated or corrupt container: {e}"))
}

pub fn encode_samples(w: &mut impl Write, samples: &[TrajectorySample]) -> std::io::Result<()> {
    w.write_all(SHARD_MAGIC)?;
    w.write_u32::<LE>(SHARD_VERSION)?;
    w.write_u64::<LE>(samples.len() as u64)?;
    for s in samples {
        w.write_u8(match s.domain {
            Domain::Source => 0,
            Domain::Target => 1,
        })?;
        w.write_u32::<LE>(s.mask.len() as u32)?;
        for &m in &s.mask {
            w.write_u8(m as u8)?;
        }
        w.write_u32::<LE>(s.agent_ids.len() as u32)?;
        for &id in &s.agent_ids {
            w.write_i64::<LE>(id)?;
        }
        write_tensor(w, &s.history)?;
        write_tensor(w, &s.future)?;
        let frames = s.lane_ids.len() / s.mask.len().max(1);
        let lanes = Tensor::new([frames, s.mask.len()], s.lane_ids.iter().map(|&l| l as f64).collect())
            .expect("lane ids cover every frame and agent slot");
        write_tensor(w, &lanes)?;
        w.write_u32::<LE>(s.adjacency.len() as u32)?;
        for g in &s.adjacency {
            write_tensor(w, g.adjacency())?;
        }
    }
    Ok(())
}

pub fn decode_samples(r: &mut impl Read) -> Result<Vec<TrajectorySample>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(format_err)?;
    if &magic != SHARD_MAGIC {
        return Err(Error::Format("not a sample shard (bad magic)".into()));
    }
    let version = r.read_u32::<LE>().map_err(format_err)?;
    if version != SHARD_VERSION {
        return Err(Error::Format(format!("unsupported shard version {version}")));
    }
    let count = r.read_u64::<LE>().map_err(format_err)? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let domain = match r.read_u8().map_err(format_err)? {
            0 => Domain::Source,
            1 => Domain::Target,
            d => return Err(Error::Format(format!("unknown domain tag {d}"))),
        };
        let n = r.read_u32::<LE>().map_err(format_err)? as usize;
        let mut mask = Vec::with_capacity(n);
        for _ in 0..n {
            mask.push(r.read_u8().map_err(format_err)? != 0);
        }
        let ids = r.read_u32::<LE>().map_err(format_err)? as usize;
        if ids > n {
            return Err(Error::Format("more agent ids than slots".into()));
        }
        let mut agent_ids = Vec::with_capacity(ids);
        for _ in 0..ids {
            agent_ids.push(r.read_i64::<LE>().map_err(format_err)?);
        }
        let history = read_tensor(r)?;
        let future = read_tensor(r)?;
        let lanes = read_tensor(r)?;
        let graphs = r.read_u32::<LE>().map_err(format_err)? as usize;
        let mut adjacency = Vec::with_capacity(graphs.min(1024));
        for _ in 0..graphs {
            adjacency.push(SceneGraph::from_adjacency(read_tensor(r)?)?);
        }
        let sample = TrajectorySample {
            history,
            future,
            agent_ids,
            lane_ids: lanes.data().iter().map(|&v| v as i64).collect(),
            adjacency,
            domain,
            mask,
        };
        sample.validate_layout()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Writes a shard atomically (temporary file, then rename).
pub fn write_shard(path: &Path, samples: &[TrajectorySample]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        encode_samples(&mut w, samples).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_shard(path: &Path) -> Result<Vec<TrajectorySample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_samples(&mut BufReader::new(file))
}
