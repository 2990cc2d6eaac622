//! Binary model checkpoints.
//!
//! All integers and floats are little-endian. Layout:
//!
//! ```text
//! magic        8 bytes  "OXDGMCK\0"
//! version      u32      1
//! spec_len     u32
//! spec         spec_len bytes of UTF-8 JSON (the NetworkSpec)
//! n_blocks     u32
//! per block:
//!   batch_writes, free, clamped, held, samples_per_epoch, epochs   6 x u64
//!   weight_kind  u8     0 = quantized, 1 = float
//!   quantized:   codes      n_v*n_h x u32, row-major (visible index outer)
//!                bit_flips  n_v*n_h*bits x u32, bit index innermost
//!   float:       weights    n_v*n_h x f64, row-major
//!   v_bias       n_v x f64
//!   h_bias       n_h x f64
//!   visible layer, then hidden layer, each:
//!     state devices then reference devices, one record per neuron:
//!       state u8 (0 = HRS, 1 = LRS), resistance f64, switch_count u64
//! ```
//!
//! Momentum velocity is not stored; a loaded model can be evaluated and
//! audited but training restarts with zero velocity.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::device::{DeviceState, OxRamDevice};
use crate::dgm::{DgmModel, NetworkSpec};
use crate::error::{Error, Result};
use crate::neuron::{NeuronLayer, NeuronLayerConfig};
use crate::rbm::{BlockParams, Presentations, RbmBlock, Tallies, WeightStore};
use crate::synapse::{DenseWeights, SynapseArray};

pub const MAGIC: &[u8; 8] = b"OXDGMCK\0";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &DgmModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_model(&mut out, model).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(out)
}

fn write_model(out: &mut Vec<u8>, model: &DgmModel) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_u32::<LE>(VERSION)?;
    let spec = serde_json::to_vec(model.spec()).map_err(std::io::Error::other)?;
    out.write_u32::<LE>(spec.len() as u32)?;
    out.write_all(&spec)?;
    out.write_u32::<LE>(model.blocks().len() as u32)?;
    for b in model.blocks() {
        let t = b.tallies();
        for v in [
            t.batch_writes,
            t.presentations.free,
            t.presentations.clamped,
            t.presentations.held,
            t.samples_per_epoch,
            t.epochs,
        ] {
            out.write_u64::<LE>(v)?;
        }
        match b.weights() {
            WeightStore::Quantized(a) => {
                out.write_u8(0)?;
                for &c in a.codes().iter().chain(a.bit_flip_counts()) {
                    out.write_u32::<LE>(c)?;
                }
            }
            WeightStore::Float(w) => {
                out.write_u8(1)?;
                for i in 0..w.n_visible() {
                    for &x in w.visible_row(i) {
                        out.write_f64::<LE>(x)?;
                    }
                }
            }
        }
        for &x in b.v_bias().iter().chain(b.h_bias()) {
            out.write_f64::<LE>(x)?;
        }
        for layer in [b.visible(), b.hidden()] {
            for d in layer.state_devices().iter().chain(layer.ref_devices()) {
                out.write_u8(d.state().as_bit() as u8)?;
                out.write_f64::<LE>(d.resistance())?;
                out.write_u64::<LE>(d.switch_count())?;
            }
        }
    }
    Ok(())
}

pub fn save(model: &DgmModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<DgmModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

fn truncated(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated or unreadable: {e}"))
}

fn read_u32s(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<u32>> {
    (0..n).map(|_| r.read_u32::<LE>().map_err(truncated)).collect()
}

fn read_f64s(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| r.read_f64::<LE>().map_err(truncated)).collect()
}

fn read_devices(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<OxRamDevice>> {
    (0..n)
        .map(|_| {
            let state = match r.read_u8().map_err(truncated)? {
                0 => DeviceState::Hrs,
                1 => DeviceState::Lrs,
                s => return Err(Error::Checkpoint(format!("bad device state byte {s}"))),
            };
            let resistance = r.read_f64::<LE>().map_err(truncated)?;
            if !(resistance.is_finite() && resistance > 0.0) {
                return Err(Error::Checkpoint(format!("bad device resistance {resistance}")));
            }
            let count = r.read_u64::<LE>().map_err(truncated)?;
            Ok(OxRamDevice::from_parts(state, resistance, count))
        })
        .collect()
}

fn read_layer(r: &mut Cursor<&[u8]>, params: &BlockParams, size: usize) -> Result<NeuronLayer> {
    let state = read_devices(r, size)?;
    let refs = read_devices(r, size)?;
    let config = NeuronLayerConfig {
        size,
        gain: params.gain,
        ref_mode: params.ref_mode.clone(),
    };
    NeuronLayer::from_parts(config, params.storage.clone(), state, refs)
}

fn read_block(r: &mut Cursor<&[u8]>, params: &BlockParams) -> Result<RbmBlock> {
    let (nv, nh) = (params.n_visible, params.n_hidden);
    let mut t = [0u64; 6];
    for v in &mut t {
        *v = r.read_u64::<LE>().map_err(truncated)?;
    }
    let tallies = Tallies {
        batch_writes: t[0],
        presentations: Presentations {
            free: t[1],
            clamped: t[2],
            held: t[3],
        },
        samples_per_epoch: t[4],
        epochs: t[5],
    };
    let weights = match (r.read_u8().map_err(truncated)?, &params.quant) {
        (0, Some(q)) => {
            let codes = read_u32s(r, nv * nh)?;
            let flips = read_u32s(r, nv * nh * q.bits as usize)?;
            WeightStore::Quantized(SynapseArray::from_parts(nv, nh, q.clone(), codes, flips)?)
        }
        (1, None) => {
            let w = read_f64s(r, nv * nh)?;
            WeightStore::Float(DenseWeights::from_fn(nv, nh, |i, j| w[i * nh + j]))
        }
        (k, _) => return Err(Error::Checkpoint(format!("weight kind {k} disagrees with spec"))),
    };
    let v_bias = read_f64s(r, nv)?;
    let h_bias = read_f64s(r, nh)?;
    let visible = read_layer(r, params, nv)?;
    let hidden = read_layer(r, params, nh)?;
    let mut block = RbmBlock::from_parts(params.rbm.clone(), weights, visible, hidden, v_bias, h_bias)?;
    block.restore_tallies(tallies);
    Ok(block)
}

pub fn from_bytes(bytes: &[u8]) -> Result<DgmModel> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.read_u32::<LE>().map_err(truncated)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let spec_len = r.read_u32::<LE>().map_err(truncated)? as usize;
    let start = r.position() as usize;
    let raw = bytes
        .get(start..start + spec_len)
        .ok_or_else(|| Error::Checkpoint("truncated spec".into()))?;
    let spec: NetworkSpec = serde_json::from_slice(raw).map_err(|e| Error::Checkpoint(format!("spec: {e}")))?;
    spec.validate()?;
    r.set_position((start + spec_len) as u64);
    let n_blocks = r.read_u32::<LE>().map_err(truncated)? as usize;
    if n_blocks != spec.blocks.len() {
        return Err(Error::Checkpoint(format!(
            "{n_blocks} blocks stored, spec has {}",
            spec.blocks.len()
        )));
    }
    let blocks = spec
        .blocks
        .iter()
        .map(|p| read_block(&mut r, p))
        .collect::<Result<Vec<_>>>()?;
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    DgmModel::from_parts(spec, blocks)
}
