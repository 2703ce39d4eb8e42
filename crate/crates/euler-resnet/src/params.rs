//! Flat binary (de)serialization of network parameters.
//!
//! The format is a fixed header followed by raw little-endian `f64` values:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "EULERNET"
//! 8       4     format version, u32 LE (currently 1)
//! 12      4     depth, u32 LE
//! 16      4     width, u32 LE
//! 20      4     input_dim, u32 LE
//! 24      4     num_classes, u32 LE
//! 28      1     use_bn, 0 or 1
//! 29      7     reserved, zero
//! 36      8     h, f64 LE
//! 44      8     init_scale, f64 LE
//! 52      8     seed, u64 LE
//! 60      ...   parameter values, f64 LE
//! ```
//!
//! Values follow the deterministic layer order: embedding weights (row-major)
//! and bias; for each block in depth order its affine1 weights and bias, then
//! (when batch norm is on) gamma, beta, running mean, running variance, then
//! affine2 weights and bias; finally head weights and bias. Batch-norm
//! running statistics are included because they are part of what an
//! eval-mode network computes. The total length is implied by the header;
//! trailing or missing bytes are a format error.

use crate::error::{Error, Result};
use crate::layers::{Network, NetworkConfig};
use std::path::Path;

const MAGIC: &[u8; 8] = b"EULERNET";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 60;

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(HEADER_LEN);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    let c = &net.config;
    bytes.extend_from_slice(&(c.depth as u32).to_le_bytes());
    bytes.extend_from_slice(&(c.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(c.input_dim as u32).to_le_bytes());
    bytes.extend_from_slice(&(c.num_classes as u32).to_le_bytes());
    bytes.push(c.use_bn as u8);
    bytes.extend_from_slice(&[0u8; 7]);
    bytes.extend_from_slice(&c.h.to_le_bytes());
    bytes.extend_from_slice(&c.init_scale.to_le_bytes());
    bytes.extend_from_slice(&c.seed.to_le_bytes());
    debug_assert_eq!(bytes.len(), HEADER_LEN);

    visit_values(net, &mut |v| bytes.extend_from_slice(&v.to_le_bytes()));

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))
}

pub fn load_network(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |reason: String| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(parse_err(format!(
            "file too short for a parameter header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[0..8] != MAGIC {
        return Err(parse_err("bad magic, not a parameter file".to_string()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let f64_at = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != VERSION {
        return Err(parse_err(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let use_bn = match bytes[28] {
        0 => false,
        1 => true,
        other => return Err(parse_err(format!("use_bn byte must be 0 or 1, got {other}"))),
    };
    let config = NetworkConfig {
        depth: u32_at(12) as usize,
        width: u32_at(16) as usize,
        input_dim: u32_at(20) as usize,
        num_classes: u32_at(24) as usize,
        use_bn,
        h: f64_at(36),
        init_scale: f64_at(44),
        seed: u64::from_le_bytes(bytes[52..60].try_into().unwrap()),
    };
    config.validate().map_err(|e| parse_err(format!("header config invalid: {e}")))?;

    let mut net = Network::allocate(config)?;
    let mut count = 0usize;
    visit_values_mut(&mut net, &mut |_| count += 1);
    let expected_len = HEADER_LEN + 8 * count;
    if bytes.len() != expected_len {
        return Err(parse_err(format!(
            "expected {expected_len} bytes for this header, got {}",
            bytes.len()
        )));
    }

    let mut off = HEADER_LEN;
    visit_values_mut(&mut net, &mut |v| {
        *v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
    });
    Ok(net)
}

fn visit_values(net: &Network, f: &mut dyn FnMut(f64)) {
    let matrix =
        |m: &crate::tensor::Matrix, f: &mut dyn FnMut(f64)| m.data().iter().for_each(|&v| f(v));
    matrix(&net.embed.weight, f);
    net.embed.bias.iter().for_each(|&v| f(v));
    for block in &net.blocks {
        matrix(&block.affine1.weight, f);
        block.affine1.bias.iter().for_each(|&v| f(v));
        if let Some(bn) = &block.batch_norm {
            bn.gamma.iter().for_each(|&v| f(v));
            bn.beta.iter().for_each(|&v| f(v));
            bn.running_mean.iter().for_each(|&v| f(v));
            bn.running_var.iter().for_each(|&v| f(v));
        }
        matrix(&block.affine2.weight, f);
        block.affine2.bias.iter().for_each(|&v| f(v));
    }
    matrix(&net.head.weight, f);
    net.head.bias.iter().for_each(|&v| f(v));
}

fn visit_values_mut(net: &mut Network, f: &mut dyn FnMut(&mut f64)) {
    let matrix = |m: &mut crate::tensor::Matrix, f: &mut dyn FnMut(&mut f64)| {
        m.data_mut().iter_mut().for_each(|v| f(v))
    };
    matrix(&mut net.embed.weight, f);
    net.embed.bias.iter_mut().for_each(|v| f(v));
    for block in &mut net.blocks {
        matrix(&mut block.affine1.weight, f);
        block.affine1.bias.iter_mut().for_each(|v| f(v));
        if let Some(bn) = &mut block.batch_norm {
            bn.gamma.iter_mut().for_each(|v| f(v));
            bn.beta.iter_mut().for_each(|v| f(v));
            bn.running_mean.iter_mut().for_each(|v| f(v));
            bn.running_var.iter_mut().for_each(|v| f(v));
        }
        matrix(&mut block.affine2.weight, f);
        block.affine2.bias.iter_mut().for_each(|v| f(v));
    }
    matrix(&mut net.head.weight, f);
    net.head.bias.iter_mut().for_each(|v| f(v));
}
