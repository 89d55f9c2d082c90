//! RV3D: a JSON header sidecar (`<file>.json`) next to a raw payload of
//! little-endian f32 values in x-fastest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Domain, Grid, Shape3, Volume3D};
use crate::error::{CsrdError, Result};

pub const RV3D_DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rv3dHeader {
    pub shape: Shape3,
    pub spacing_mm: [f64; 3],
    pub domain: Domain,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_rv3d(path: &Path, vol: &Volume3D) -> Result<()> {
    vol.validate()?;
    let header = Rv3dHeader {
        shape: vol.shape(),
        spacing_mm: vol.spacing,
        domain: vol.domain,
        dtype: RV3D_DTYPE.to_string(),
        name: Some(vol.name.clone()),
    };
    let mut payload = Vec::with_capacity(vol.data().len() * 4);
    for v in vol.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CsrdError::io(dir, e))?;
        }
    }
    fs::write(path, payload).map_err(|e| CsrdError::io(path, e))?;
    let hpath = header_path(path);
    let text = serde_json::to_string_pretty(&header).map_err(|e| CsrdError::json(&hpath, e))?;
    fs::write(&hpath, text).map_err(|e| CsrdError::io(&hpath, e))
}

pub fn read_rv3d(path: &Path) -> Result<Volume3D> {
    let hpath = header_path(path);
    let text = fs::read_to_string(&hpath).map_err(|e| CsrdError::io(&hpath, e))?;
    let header: Rv3dHeader = serde_json::from_str(&text).map_err(|e| CsrdError::json(&hpath, e))?;
    if header.dtype != RV3D_DTYPE {
        return Err(CsrdError::Dimension(format!(
            "{}: unsupported dtype '{}'",
            hpath.display(),
            header.dtype
        )));
    }
    let bytes = fs::read(path).map_err(|e| CsrdError::io(path, e))?;
    if bytes.len() != header.shape.len() * 4 {
        return Err(CsrdError::Dimension(format!(
            "{}: payload holds {} bytes, header shape {} needs {}",
            path.display(),
            bytes.len(),
            header.shape,
            header.shape.len() * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let name = header.name.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    Volume3D::new(
        Grid::from_vec(header.shape, data)?,
        header.spacing_mm,
        header.domain,
        name,
    )
}
