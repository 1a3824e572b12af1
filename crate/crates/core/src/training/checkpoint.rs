use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::OptimState;
use crate::bayesnet::{NetConfig, NetworkParams, PriorSnapshot};
use crate::diffengine::Tensor;
use crate::error::{Error, Result};
use crate::formats::{read_file, read_tensor, write_file_atomic, write_tensor, AnyTensor, ByteReader, ByteWriter};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Echo of the configuration that produced this checkpoint.
    pub config_text: String,
    pub geometry_hash: u64,
    pub params: NetworkParams<f32>,
    /// Posterior of the first phase; immutable once set.
    pub prior: Option<PriorSnapshot>,
    pub optim: OptimState,
    pub rng: RngState,
    /// Byte length of the training log when this checkpoint was written.
    pub log_offset: u64,
}

fn write_net_config(w: &mut ByteWriter, c: &NetConfig) {
    w.u32(c.c1 as u32);
    w.u32(c.c2 as u32);
    w.u32(c.groups as u32);
    w.f64(c.slope);
    w.u32(c.k_iters as u32);
    w.f64(c.head_scale);
}

fn read_net_config(r: &mut ByteReader<'_>) -> Result<NetConfig> {
    Ok(NetConfig {
        c1: r.u32()? as usize,
        c2: r.u32()? as usize,
        groups: r.u32()? as usize,
        slope: r.f64()?,
        k_iters: r.u32()? as usize,
        head_scale: r.f64()?,
    })
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(&c.config_text);
    w.u64(c.geometry_hash);
    write_net_config(&mut w, &c.params.config);
    w.bytes(&c.rng.seed);
    w.u64(c.rng.stream);
    w.bytes(&c.rng.word_pos.to_le_bytes());
    w.u64(c.log_offset);
    let o = &c.optim;
    w.u64(o.step);
    for v in [o.lr, o.beta1, o.beta2, o.eps] {
        w.f64(v);
    }
    w.u32(c.params.tensors.len() as u32);
    for (i, t) in c.params.tensors.iter().enumerate() {
        write_tensor(&mut w, t.shape(), t.data());
        write_tensor(&mut w, &[o.m[i].len()], &o.m[i]);
        write_tensor(&mut w, &[o.v[i].len()], &o.v[i]);
    }
    match &c.prior {
        None => w.u8(0),
        Some(p) => {
            w.u8(1);
            w.u32(p.means.len() as u32);
            for (m, s) in p.means.iter().zip(&p.sigmas) {
                write_tensor(&mut w, &[m.len()], m);
                write_tensor(&mut w, &[s.len()], s);
            }
        }
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    write_file_atomic(path, &encode_checkpoint(c))
}

fn f64_vec(r: &ByteReader<'_>, t: AnyTensor, len: usize) -> Result<Vec<f64>> {
    match t {
        AnyTensor::F64 { data, .. } if data.len() == len => Ok(data),
        _ => Err(r.malformed("expected a double-precision vector of matching length")),
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes, path);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
        });
    }
    let body = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..body]) != stored {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
        });
    }
    let mut r = ByteReader::new(&bytes[..body], path);
    r.take(8)?;
    let config_text = r.str()?;
    let geometry_hash = r.u64()?;
    let net = read_net_config(&mut r)?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let log_offset = r.u64()?;
    let step = r.u64()?;
    let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let n = r.u32()? as usize;
    let (mut tensors, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n.min(1 << 16) {
        let t = match read_tensor(&mut r)? {
            AnyTensor::F32 { dims, data } => Tensor::new(&dims, data)?,
            AnyTensor::F64 { .. } => return Err(r.malformed("network parameters must be single precision")),
        };
        let len = t.len();
        let mt = read_tensor(&mut r)?;
        m.push(f64_vec(&r, mt, len)?);
        let vt = read_tensor(&mut r)?;
        v.push(f64_vec(&r, vt, len)?);
        tensors.push(t);
    }
    let params = NetworkParams::from_tensors(net, tensors)?;
    let prior = match r.u8()? {
        0 => None,
        1 => {
            let pairs = params.variational_pairs();
            let count = r.u32()? as usize;
            if count != pairs.len() {
                return Err(r.malformed("prior snapshot does not match the network layout"));
            }
            let (mut means, mut sigmas) = (Vec::new(), Vec::new());
            for &(mi, _) in &pairs {
                let len = params.tensors[mi].len();
                let mt = read_tensor(&mut r)?;
                means.push(f64_vec(&r, mt, len)?);
                let st = read_tensor(&mut r)?;
                sigmas.push(f64_vec(&r, st, len)?);
            }
            Some(PriorSnapshot { means, sigmas })
        }
        _ => return Err(r.malformed("invalid prior flag")),
    };
    if r.remaining() != 0 {
        return Err(r.malformed("trailing bytes before the checksum"));
    }
    Ok(Checkpoint {
        config_text,
        geometry_hash,
        params,
        prior,
        optim: OptimState {
            m,
            v,
            step,
            lr,
            beta1,
            beta2,
            eps,
        },
        rng: RngState { seed, stream, word_pos },
        log_offset,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?, path)
}
