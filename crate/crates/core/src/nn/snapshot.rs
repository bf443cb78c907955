//! Parameter snapshot files: a JSON header next to a flat little-endian
//! float64 blob. Used for closure and surrogate checkpoints.

use super::mlp::{Activation, MlpParams};
use super::spectral::SpectralOperatorParams;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SnapshotHeader {
    Mlp {
        widths: Vec<usize>,
        activation: Activation,
        seed: Option<u64>,
        n_params: usize,
        tag: String,
    },
    Spectral {
        grid: Vec<usize>,
        modes: Vec<usize>,
        width: usize,
        in_channels: usize,
        out_channels: usize,
        n_layers: usize,
        activation: Activation,
        seed: Option<u64>,
        n_params: usize,
        tag: String,
    },
}

pub fn write_f64_blob(path: &Path, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_f64_blob(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!(
            "{} has {} bytes, not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes `<stem>.json` and `<stem>.f64`.
pub fn save_mlp(stem: &Path, net: &MlpParams, seed: Option<u64>, tag: &str) -> Result<()> {
    let header = SnapshotHeader::Mlp {
        widths: net.widths.clone(),
        activation: net.activation,
        seed,
        n_params: net.params.len(),
        tag: tag.to_string(),
    };
    fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&header)?,
    )?;
    write_f64_blob(&stem.with_extension("f64"), &net.params)
}

pub fn load_mlp(stem: &Path) -> Result<MlpParams> {
    let header: SnapshotHeader =
        serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
    let params = read_f64_blob(&stem.with_extension("f64"))?;
    match header {
        SnapshotHeader::Mlp {
            widths,
            activation,
            n_params,
            ..
        } => {
            if n_params != params.len() {
                return Err(Error::Checkpoint(format!(
                    "blob has {} params, header says {n_params}",
                    params.len()
                )));
            }
            let net = MlpParams {
                widths,
                activation,
                params,
            };
            net.check()?;
            Ok(net)
        }
        _ => Err(Error::Checkpoint("expected an MLP snapshot".into())),
    }
}

pub fn save_spectral(
    stem: &Path,
    op: &SpectralOperatorParams,
    seed: Option<u64>,
    tag: &str,
) -> Result<()> {
    let header = SnapshotHeader::Spectral {
        grid: op.grid.clone(),
        modes: op.modes.clone(),
        width: op.width,
        in_channels: op.in_channels,
        out_channels: op.out_channels,
        n_layers: op.n_layers,
        activation: op.activation,
        seed,
        n_params: op.params.len(),
        tag: tag.to_string(),
    };
    fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&header)?,
    )?;
    write_f64_blob(&stem.with_extension("f64"), &op.params)
}

pub fn load_spectral(stem: &Path) -> Result<SpectralOperatorParams> {
    let header: SnapshotHeader =
        serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
    let params = read_f64_blob(&stem.with_extension("f64"))?;
    match header {
        SnapshotHeader::Spectral {
            grid,
            modes,
            width,
            in_channels,
            out_channels,
            n_layers,
            activation,
            n_params,
            ..
        } => {
            if n_params != params.len() {
                return Err(Error::Checkpoint(format!(
                    "blob has {} params, header says {n_params}",
                    params.len()
                )));
            }
            Ok(SpectralOperatorParams {
                grid,
                modes,
                width,
                in_channels,
                out_channels,
                n_layers,
                activation,
                params,
            })
        }
        _ => Err(Error::Checkpoint("expected a spectral snapshot".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn mlp_roundtrip() {
        let dir = std::env::temp_dir().join("cb_snap_mlp_test");
        fs::create_dir_all(&dir).unwrap();
        let mut rng = StreamRng::new(4);
        let net = MlpParams::init(&[1, 8, 1], Activation::SiLU, &mut rng);
        let stem = dir.join("closure");
        save_mlp(&stem, &net, Some(4), "test").unwrap();
        let back = load_mlp(&stem).unwrap();
        assert_eq!(net, back);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn spectral_roundtrip() {
        let dir = std::env::temp_dir().join("cb_snap_spec_test");
        fs::create_dir_all(&dir).unwrap();
        let mut rng = StreamRng::new(9);
        let op = SpectralOperatorParams::init(
            &[8],
            &[2],
            2,
            2,
            1,
            1,
            Activation::SiLU,
            &mut rng,
        )
        .unwrap();
        let stem = dir.join("surrogate");
        save_spectral(&stem, &op, None, "exp1").unwrap();
        let back = load_spectral(&stem).unwrap();
        assert_eq!(op, back);
        fs::remove_dir_all(&dir).ok();
    }
}
