//! Checkpoint container.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "PACKPT01"
//! count   u32      number of parameter records
//! record  repeated:
//!   name_len u32, name bytes (utf-8)
//!   ndim     u32, dims ndim x u64
//!   data     prod(dims) x f64
//! ```
//!
//! A JSON sidecar at `<path>.json` carries the two config records (backbone
//! and head) so a checkpoint is self-describing. Loading validates every
//! stored shape against the configs' parameter template and reports all
//! mismatches by name.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{ModelParams, Tensor};
use crate::partnet::{param_template, BackboneConfig, PartNetConfig};

const MAGIC: &[u8; 8] = b"PACKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    backbone: BackboneConfig,
    partnet: PartNetConfig,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    bcfg: &BackboneConfig,
    pcfg: &PartNetConfig,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;

    let sidecar = Sidecar {
        backbone: bcfg.clone(),
        partnet: *pcfg,
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, BackboneConfig, PartNetConfig)> {
    let sidecar: Sidecar = serde_json::from_str(
        &std::fs::read_to_string(sidecar_path(path)).map_err(|e| {
            Error::Data(format!(
                "missing checkpoint sidecar {}: {e}",
                sidecar_path(path).display()
            ))
        })?,
    )?;

    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::Data("unreasonable parameter name length".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Data("parameter name is not utf-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        if ndim > 8 {
            return Err(Error::Data(format!("parameter {name} has rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        params.insert(name, Tensor::new(shape, data)?)?;
    }

    // Validate against the template implied by the sidecar configs.
    let template = param_template(&sidecar.backbone, &sidecar.partnet)?;
    let mut problems = Vec::new();
    for (name, shape) in &template {
        match params.get(name) {
            None => problems.push(format!("missing {name}")),
            Some(t) if t.shape() != shape.as_slice() => problems.push(format!(
                "{name}: stored {:?}, config expects {:?}",
                t.shape(),
                shape
            )),
            _ => {}
        }
    }
    if params.len() != template.len() {
        problems.push(format!(
            "checkpoint has {} parameters, config expects {}",
            params.len(),
            template.len()
        ));
    }
    if !problems.is_empty() {
        return Err(Error::Data(format!(
            "checkpoint {} incompatible: {}",
            path.display(),
            problems.join("; ")
        )));
    }
    Ok((params, sidecar.backbone, sidecar.partnet))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partnet::{init_params, AttentionKind};

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let bcfg = BackboneConfig::default();
        let pcfg = PartNetConfig::partnet(4, 64, AttentionKind::Sigmoid);
        let params = init_params(&bcfg, &pcfg, 42).unwrap();
        save_checkpoint(&path, &params, &bcfg, &pcfg).unwrap();
        let (loaded, b2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
        assert_eq!(bcfg, b2);
        assert_eq!(pcfg, p2);
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let bcfg = BackboneConfig::default();
        let pcfg = PartNetConfig::partnet(4, 64, AttentionKind::Sigmoid);
        let params = init_params(&bcfg, &pcfg, 42).unwrap();
        save_checkpoint(&path, &params, &bcfg, &pcfg).unwrap();

        // Rewrite the sidecar to claim a different part count.
        let other = PartNetConfig::partnet(8, 64, AttentionKind::Sigmoid);
        let sidecar = serde_json::json!({ "backbone": bcfg, "partnet": other });
        std::fs::write(
            sidecar_path(&path),
            serde_json::to_string(&sidecar).unwrap(),
        )
        .unwrap();

        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("detector.4"), "{err}");
    }

    #[test]
    fn truncated_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let bcfg = BackboneConfig::default();
        let pcfg = PartNetConfig::partnet(2, 64, AttentionKind::Sigmoid);
        let params = init_params(&bcfg, &pcfg, 1).unwrap();
        save_checkpoint(&path, &params, &bcfg, &pcfg).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
