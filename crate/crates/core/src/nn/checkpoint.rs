//! Checkpoint layout:
//!
//! ```text
//! "QFW1"                      4 bytes
//! manifest length             u32 little-endian
//! manifest                    UTF-8, `key=value` lines: role, layers, step
//! parameters                  f32 little-endian, per layer weights then biases
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{MlpSpec, NnError, PolicyWeights, Role};

pub const MAGIC: &[u8; 4] = b"QFW1";

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

pub fn write_weights<W: Write>(weights: &PolicyWeights, mut out: W) -> Result<(), NnError> {
    let layers: Vec<String> = weights.spec.layer_sizes.iter().map(|n| n.to_string()).collect();
    let manifest = format!(
        "role={}\nlayers={}\nstep={}\n",
        weights.role.tag(),
        layers.join(","),
        weights.version
    );
    out.write_all(MAGIC)?;
    out.write_all(&(manifest.len() as u32).to_le_bytes())?;
    out.write_all(manifest.as_bytes())?;
    let mut buf = Vec::with_capacity(weights.spec.param_count() * 4);
    for v in weights.flat() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_weights<R: Read>(mut input: R) -> Result<PolicyWeights, NnError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|_| bad("file too short for header"))?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len).map_err(|_| bad("missing manifest length"))?;
    let len = u32::from_le_bytes(len) as usize;
    if len > 1 << 16 {
        return Err(bad(format!("manifest length {len} is implausible")));
    }
    let mut manifest = vec![0u8; len];
    input.read_exact(&mut manifest).map_err(|_| bad("truncated manifest"))?;
    let manifest = String::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;

    let (mut role, mut layers, mut step) = (None, None, None);
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("manifest line {line:?}")))?;
        match k {
            "role" => role = Some(Role::from_tag(v).ok_or_else(|| bad(format!("unknown role {v:?}")))?),
            "layers" => {
                let sizes = v
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("layer sizes {v:?}")))?;
                layers = Some(MlpSpec::new(&sizes)?);
            }
            "step" => step = Some(v.parse::<u64>().map_err(|_| bad(format!("step {v:?}")))?),
            _ => {}
        }
    }
    let spec = layers.ok_or_else(|| bad("manifest has no layers"))?;
    let role = role.ok_or_else(|| bad("manifest has no role"))?;

    let expected = spec.param_count() * 4;
    let mut blob = Vec::with_capacity(expected);
    input.read_to_end(&mut blob)?;
    if blob.len() != expected {
        return Err(NnError::Shape {
            expected: format!("{expected} parameter bytes for {:?}", spec.layer_sizes),
            got: format!("{} bytes", blob.len()),
        });
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite("checkpoint parameter"));
    }
    let mut weights = PolicyWeights::zeros(spec, role);
    weights.set_flat(&values)?;
    weights.version = step.unwrap_or(0);
    Ok(weights)
}

pub fn save_weights(weights: &PolicyWeights, path: impl AsRef<Path>) -> Result<(), NnError> {
    write_weights(weights, BufWriter::new(File::create(path)?))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<PolicyWeights, NnError> {
    read_weights(BufReader::new(File::open(path)?))
}
