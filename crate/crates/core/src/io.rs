//! Tensor archives, raw saliency maps and heatmap images.
//!
//! Tensor archive layout: the magic `DSTA`, a `u32` format version, a `u64`
//! header length, a JSON header (dtype, per-tensor name/shape/offset/length,
//! free-form metadata), then the raw little-endian tensor data.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"DSTA";
pub const ARCHIVE_VERSION: u32 = 1;
pub const RAW_MAP_MAGIC: &[u8; 4] = b"VDSM";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArchiveHeader {
    dtype: String,
    tensors: Vec<EntryHeader>,
    meta: serde_json::Value,
}

/// Named tensors plus metadata, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorArchive<S> {
    pub tensors: Vec<(String, Tensor<S>)>,
    pub meta: serde_json::Value,
}

impl<S: Scalar> TensorArchive<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn save_archive<S: Scalar>(path: &Path, tensors: &[(String, &Tensor<S>)], meta: &serde_json::Value) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut data = Vec::new();
    let width = std::mem::size_of::<S>();
    for (name, t) in tensors {
        entries.push(EntryHeader { name: name.clone(), shape: t.shape().to_vec(), offset: data.len(), len: t.numel() * width });
        for &v in t.data() {
            v.write_le_bytes(&mut data);
        }
    }
    let header = serde_json::to_vec(&ArchiveHeader { dtype: S::DTYPE.to_string(), tensors: entries, meta: meta.clone() })
        .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + data.len());
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    write_atomic(path, &out)
}

/// Write via a sibling temporary file so a crash never leaves a truncated file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Load an archive, converting from the stored dtype when it differs from `S`.
pub fn load_archive<S: Scalar>(path: &Path) -> Result<TensorArchive<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Format { what: "tensor archive", message: format!("{}: {m}", path.display()) };
    if bytes.len() < 16 || &bytes[..4] != ARCHIVE_MAGIC {
        return Err(bad("missing magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != ARCHIVE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header".into()))?;
    let header: ArchiveHeader = serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(e.to_string()))?;
    let data = &bytes[body..];
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(format!("unknown dtype {other}"))),
    };
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if e.len != n * width || e.offset.checked_add(e.len).is_none_or(|end| end > data.len()) {
            return Err(bad(format!("tensor `{}` has an inconsistent extent", e.name)));
        }
        let raw = &data[e.offset..e.offset + e.len];
        let values: Vec<S> = if width == std::mem::size_of::<S>() && header.dtype == S::DTYPE {
            raw.chunks_exact(width).map(S::from_le_bytes_slice).collect()
        } else if width == 4 {
            raw.chunks_exact(4).map(|c| S::of(f32::from_le_bytes_slice(c) as f64)).collect()
        } else {
            raw.chunks_exact(8).map(|c| S::of(f64::from_le_bytes_slice(c))).collect()
        };
        tensors.push((e.name, Tensor::from_vec(&e.shape, values)?));
    }
    Ok(TensorArchive { tensors, meta: header.meta })
}

/// Copy tensors into same-named store entries; every store entry must be
/// present with a matching shape.
pub fn restore_params<S: Scalar>(store: &mut ParamStore<S>, archive: &TensorArchive<S>, prefix: &str) -> Result<()> {
    let mut mismatches = Vec::new();
    let mut updates = Vec::new();
    for id in store.ids() {
        let name = &store.entry(id).name;
        match archive.get(&format!("{prefix}{name}")) {
            None => mismatches.push(format!("{name}: missing")),
            Some(t) if t.shape() != store.value(id).shape() => {
                mismatches.push(format!("{name}: expected {:?}, found {:?}", store.value(id).shape(), t.shape()))
            }
            Some(t) => updates.push((id, t.clone())),
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::Incompatible { mismatches });
    }
    for (id, t) in updates {
        store.set(id, t)?;
    }
    Ok(())
}

pub fn store_tensors<'a, S: Scalar>(store: &'a ParamStore<S>, prefix: &str) -> Vec<(String, &'a Tensor<S>)> {
    store.ids().map(|id| (format!("{prefix}{}", store.entry(id).name), store.value(id))).collect()
}

/// Initialize every stream backbone from an archive of backbone tensors
/// named without a stream prefix (`conv1.weight`, `layer1.0.bn1.running_mean`, ...).
/// Returns the number of tensors loaded; all mismatches are reported together.
pub fn load_pretrained_backbone<S: Scalar>(store: &mut ParamStore<S>, path: &Path) -> Result<usize> {
    let archive = load_archive::<S>(path)?;
    let mut mismatches = Vec::new();
    let mut updates = Vec::new();
    for id in store.ids() {
        let name = &store.entry(id).name;
        let Some(suffix) = ["rgb.backbone.", "depth.backbone."].iter().find_map(|p| name.strip_prefix(p)) else { continue };
        match archive.get(suffix) {
            None => mismatches.push(format!("{suffix}: missing (needed by {name})")),
            Some(t) if t.shape() != store.value(id).shape() => {
                mismatches.push(format!("{suffix}: expected {:?}, found {:?}", store.value(id).shape(), t.shape()))
            }
            Some(t) => updates.push((id, t.clone())),
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::Incompatible { mismatches });
    }
    let n = updates.len();
    for (id, t) in updates {
        store.set(id, t)?;
    }
    Ok(n)
}

/// Write a `height`×`width` map: magic `VDSM`, `u32` height, `u32` width,
/// then row-major `f32`, all little-endian.
pub fn write_raw_map(path: &Path, height: usize, width: usize, values: &[f32]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape("raw map", &[height, width], &[values.len()]));
    }
    let mut out = Vec::with_capacity(12 + 4 * values.len());
    out.extend_from_slice(RAW_MAP_MAGIC);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Returns `(height, width, values)`.
pub fn read_raw_map(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format { what: "raw map", message: format!("{}: {m}", path.display()) };
    if bytes.len() < 12 || &bytes[..4] != RAW_MAP_MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 12 + 4 * h * w {
        return Err(bad("payload length does not match the header"));
    }
    let values = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((h, w, values))
}

/// Gray level 128 for a constant map.
pub const CONSTANT_MAP_GRAY: u8 = 128;

/// 8-bit heatmap, each value divided by the map maximum.
pub fn heatmap<S: Scalar>(height: usize, width: usize, values: &[S]) -> GrayImage {
    let v: Vec<f64> = values.iter().map(|x| x.as_f64()).collect();
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let constant = max <= min || max <= 0.0;
    GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let val = v[y as usize * width + x as usize];
        Luma([if constant { CONSTANT_MAP_GRAY } else { (255.0 * val.max(0.0) / max).round() as u8 }])
    })
}

/// Blend a heatmap (as red intensity) over an RGB frame of the same size.
pub fn overlay(frame: &RgbImage, heat: &GrayImage) -> RgbImage {
    RgbImage::from_fn(heat.width(), heat.height(), |x, y| {
        let a = heat.get_pixel(x, y)[0] as f32 / 255.0;
        let p = frame.get_pixel(x, y);
        let mix = |c: u8, target: f32| ((1.0 - 0.6 * a) * c as f32 + 0.6 * a * target).round() as u8;
        Rgb([mix(p[0], 255.0), mix(p[1], 0.0), mix(p[2], 0.0)])
    })
}

/// Read a video frame and blend `heat` over it at the heatmap resolution.
pub fn overlay_frame(frame_path: &Path, heat: &GrayImage) -> Result<RgbImage> {
    let bytes = fs::read(frame_path).map_err(|e| Error::io(frame_path, e))?;
    let frame = image::load_from_memory(&bytes)
        .map_err(|e| Error::Image { path: frame_path.to_path_buf(), message: e.to_string() })?
        .into_rgb8();
    let frame = if frame.dimensions() == heat.dimensions() {
        frame
    } else {
        imageops::resize(&frame, heat.width(), heat.height(), FilterType::Triangle)
    };
    Ok(overlay(&frame, heat))
}

/// Write an image, format chosen by extension.
pub fn save_image(path: &Path, img: impl Into<image::DynamicImage>) -> Result<()> {
    img.into().save(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}
