//! Versioned model-state archives.
//!
//! Layout of a `F2M-CKPT-1` file:
//!
//! ```text
//! [0..10)   magic  b"F2M-CKPT-1"
//! [10]      dtype tag: 4 (f32) or 8 (f64)
//! [11..19)  u64 LE header byte length
//! [...]     JSON header: taxonomy, network config, counters, rng state,
//!           tensor directory (name, shape)
//! [...]     raw little-endian tensor data in directory order; each
//!           parameter contributes value, Adam first moment and Adam second
//!           moment; batch-norm running statistics follow as buffers
//! ```
//!
//! Round-trips are bitwise: save -> load -> save produces identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::Taxonomy;
use crate::networks::{NetConfig, Networks};
use crate::nn::Scalar;
use crate::training::ModelState;

pub const MAGIC: &[u8; 10] = b"F2M-CKPT-1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic) in {0}")]
    BadMagic(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("dtype mismatch: file stores {file}-byte floats, expected {expected}")]
    Dtype { file: u8, expected: u8 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub taxonomy: Taxonomy,
    pub net_config: NetConfig,
    pub epoch: usize,
    pub global_step: usize,
    pub opt_steps: [u64; 3],
    pub rng_seed: Vec<u8>,
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub tensors: Vec<TensorEntry>,
}

fn push_tensor<F: Scalar>(
    dir: &mut Vec<TensorEntry>,
    data: &mut Vec<u8>,
    name: String,
    arr: &ndarray::ArrayViewD<'_, F>,
) {
    dir.push(TensorEntry {
        name,
        shape: arr.shape().to_vec(),
    });
    for &v in arr.iter() {
        v.write_le(data);
    }
}

/// Serializes the complete model state. Takes `&mut` only because the
/// parameter walk is uniform over mutable visitors; values are unchanged.
pub fn save<F: Scalar>(state: &mut ModelState<F>, path: &Path) -> Result<(), CheckpointError> {
    let mut dir = Vec::new();
    let mut data = Vec::new();
    state.nets.visit_params(&mut |name, p| {
        push_tensor(&mut dir, &mut data, format!("{name}"), &p.value.view());
        push_tensor(&mut dir, &mut data, format!("{name}.adam_m"), &p.adam_m.view());
        push_tensor(&mut dir, &mut data, format!("{name}.adam_v"), &p.adam_v.view());
    });
    state.nets.visit_buffers(&mut |name, buf| {
        push_tensor(&mut dir, &mut data, name, &buf.view());
    });

    let header = CheckpointHeader {
        taxonomy: state.taxonomy.clone(),
        net_config: state.nets.config.clone(),
        epoch: state.epoch,
        global_step: state.global_step,
        opt_steps: state.opt_steps,
        rng_seed: state.rng.get_seed().to_vec(),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos(),
        tensors: dir,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;

    let mut out = Vec::with_capacity(19 + header_json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.push(F::BYTE_WIDTH);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&data);

    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Reads just the header; validates the magic and dtype tag.
pub fn peek_header(path: &Path) -> Result<(CheckpointHeader, u8), CheckpointError> {
    let mut file = std::fs::File::open(path)?;
    let mut prefix = [0u8; 19];
    file.read_exact(&mut prefix)
        .map_err(|_| CheckpointError::BadMagic(path.display().to_string()))?;
    if &prefix[..10] != MAGIC {
        return Err(CheckpointError::BadMagic(path.display().to_string()));
    }
    let dtype = prefix[10];
    let header_len = u64::from_le_bytes(prefix[11..19].try_into().expect("8 bytes")) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|e| CheckpointError::Format(format!("truncated header: {e}")))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| CheckpointError::Format(e.to_string()))?;
    Ok((header, dtype))
}

/// Restores a model state saved with [`save`].
pub fn load<F: Scalar>(path: &Path) -> Result<ModelState<F>, CheckpointError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 19 || &bytes[..10] != MAGIC {
        return Err(CheckpointError::BadMagic(path.display().to_string()));
    }
    let dtype = bytes[10];
    if dtype != F::BYTE_WIDTH {
        return Err(CheckpointError::Dtype {
            file: dtype,
            expected: F::BYTE_WIDTH,
        });
    }
    let header_len = u64::from_le_bytes(bytes[11..19].try_into().expect("8 bytes")) as usize;
    let header_end = 19 + header_len;
    if bytes.len() < header_end {
        return Err(CheckpointError::Format("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[19..header_end])
        .map_err(|e| CheckpointError::Format(e.to_string()))?;

    // construct the network skeleton, then overwrite every tensor
    let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
    let mut nets: Networks<F> = Networks::init(header.net_config.clone(), &mut seed_rng)
        .map_err(|e| CheckpointError::Format(e.to_string()))?;

    let elem = F::BYTE_WIDTH as usize;
    let mut offset = header_end;
    let mut cursor = 0usize;
    let mut read_into = |name: &str,
                         view: &mut ndarray::ArrayViewMutD<'_, F>|
     -> Result<(), CheckpointError> {
        let entry = header.tensors.get(cursor).ok_or_else(|| {
            CheckpointError::Format(format!("missing tensor entry for {name}"))
        })?;
        if entry.name != name {
            return Err(CheckpointError::Format(format!(
                "tensor order mismatch: file has '{}', model expects '{name}'",
                entry.name
            )));
        }
        if entry.shape != view.shape() {
            return Err(CheckpointError::Format(format!(
                "shape mismatch for {name}: file {:?}, model {:?}",
                entry.shape,
                view.shape()
            )));
        }
        let n = view.len();
        let end = offset + n * elem;
        if bytes.len() < end {
            return Err(CheckpointError::Format(format!(
                "truncated tensor data at {name}"
            )));
        }
        for (i, v) in view.iter_mut().enumerate() {
            let at = offset + i * elem;
            *v = F::read_le(&bytes[at..at + elem]);
        }
        offset = end;
        cursor += 1;
        Ok(())
    };

    let mut status: Result<(), CheckpointError> = Ok(());
    nets.visit_params(&mut |name, p| {
        if status.is_err() {
            return;
        }
        status = (|| {
            read_into(&name, &mut p.value.view_mut())?;
            read_into(&format!("{name}.adam_m"), &mut p.adam_m.view_mut())?;
            read_into(&format!("{name}.adam_v"), &mut p.adam_v.view_mut())?;
            Ok(())
        })();
    });
    status?;
    let mut status: Result<(), CheckpointError> = Ok(());
    nets.visit_buffers(&mut |name, mut buf| {
        if status.is_err() {
            return;
        }
        status = read_into(&name, &mut buf);
    });
    status?;
    if cursor != header.tensors.len() {
        return Err(CheckpointError::Format(format!(
            "file holds {} tensors, model consumed {cursor}",
            header.tensors.len()
        )));
    }

    let mut seed = [0u8; 32];
    if header.rng_seed.len() != 32 {
        return Err(CheckpointError::Format("rng seed must be 32 bytes".into()));
    }
    seed.copy_from_slice(&header.rng_seed);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng_stream);
    rng.set_word_pos(header.rng_word_pos);

    Ok(ModelState {
        taxonomy: header.taxonomy,
        nets,
        epoch: header.epoch,
        global_step: header.global_step,
        opt_steps: header.opt_steps,
        rng,
    })
}
