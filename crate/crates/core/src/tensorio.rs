//! Named tensors in safetensors files.

use std::collections::BTreeMap;
use std::path::Path;

use safetensors::{Dtype, SafeTensors};
use tashr_tensor::{Real, Tensor};

use crate::error::{Error, Result};

fn bad(path: &Path, detail: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {detail}", path.display()))
}

/// Writes f32 tensors when `T` is 4 bytes wide, f64 otherwise.
pub fn write_tensors<T: Real>(path: impl AsRef<Path>, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    let path = path.as_ref();
    let wide = std::mem::size_of::<T>() == 8;
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(name, t)| {
            let mut raw = Vec::with_capacity(t.len() * if wide { 8 } else { 4 });
            for v in t.data() {
                let x = v.to_f64_lossy();
                if wide {
                    raw.extend_from_slice(&x.to_le_bytes());
                } else {
                    raw.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
            (name.clone(), raw, t.shape().to_vec())
        })
        .collect();
    let dtype = if wide { Dtype::F64 } else { Dtype::F32 };
    let views = bytes
        .iter()
        .map(|(n, raw, shape)| {
            safetensors::tensor::TensorView::new(dtype, shape.clone(), raw)
                .map(|v| (n.as_str(), v))
                .map_err(|e| bad(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = safetensors::serialize(views, None).map_err(|e| bad(path, e))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads every f32/f64 tensor in the file, converted to `T`.
pub fn read_tensors<T: Real>(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor<T>>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(path, e))?;
    let mut out = BTreeMap::new();
    for name in st.names() {
        let view = st.tensor(name).map_err(|e| bad(path, e))?;
        let data: Vec<T> = match view.dtype() {
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            other => return Err(bad(path, format!("tensor {name} has unsupported dtype {other:?}"))),
        };
        out.insert(name.to_string(), Tensor::new(view.shape(), data)?);
    }
    Ok(out)
}
