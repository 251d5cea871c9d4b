//! On-disk formats: tensor blobs, named-tensor packs, scene bundle
//! directories, token files and fusion checkpoints.
//!
//! Every binary file starts with `b"MOST"`, a little-endian `u16` version,
//! then either a single tensor (blob) or dtype code `0` followed by a `u32`
//! count of `(u16 name length, UTF-8 name, tensor)` entries (pack). A tensor
//! is `u8 dtype, u8 ndim, ndim × u64 dims`, then the little-endian payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::fuse::{FusionParams, Scalar};
use crate::model::{
    AgentBox, CameraFrame, ElementKind, Extrinsics, FusionConfig, Intrinsics, PipelineConfig, PointCloudFrame,
    SceneBundle, SceneElement,
};
use crate::pipeline::SceneTokens;

pub const MAGIC: [u8; 4] = *b"MOST";
pub const FORMAT_VERSION: u16 = 1;
pub const MANIFEST: &str = "manifest.toml";
const PACK_CODE: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    U32(Vec<u32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn code(&self) -> u8 {
        match self {
            TensorData::U8(_) => 1,
            TensorData::U32(_) => 2,
            TensorData::F32(_) => 3,
            TensorData::F64(_) => 4,
        }
    }

    fn width(code: u8) -> Option<usize> {
        match code {
            1 => Some(1),
            2 | 3 => Some(4),
            4 => Some(8),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::U8(v) => v.len(),
            TensorData::U32(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::U8(_) => "u8",
            TensorData::U32(_) => "u32",
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: &[usize], data: TensorData) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.iter().map(|&d| d as u64).collect(),
            data,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        self.shape.iter().map(|&d| d as usize).collect()
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.data.code());
        out.push(self.shape.len() as u8);
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn expect(self, path: &Path, what: &str, dtype: &str, dims: &[Option<usize>]) -> Result<Self> {
        let shape_ok = self.shape.len() == dims.len()
            && self.shape.iter().zip(dims).all(|(s, d)| d.is_none_or(|d| *s == d as u64));
        if self.data.dtype_name() != dtype || !shape_ok {
            return Err(FormatError::malformed(
                path,
                format!(
                    "{what}: expected {dtype} {dims:?}, found {} {:?}",
                    self.data.dtype_name(),
                    self.shape
                ),
            )
            .into());
        }
        Ok(self)
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::malformed(self.path, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    /// Magic and version; returns the byte after them (dtype or pack code).
    fn header(&mut self) -> Result<u8, FormatError> {
        let magic = self.bytes.get(..4).unwrap_or(self.bytes);
        if magic != MAGIC {
            let mut found = [0u8; 4];
            found[..magic.len()].copy_from_slice(magic);
            return Err(FormatError::BadMagic {
                path: self.path.to_path_buf(),
                found,
            });
        }
        self.pos = 4;
        let version = self.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(FormatError::VersionUnsupported {
                path: self.path.to_path_buf(),
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        self.u8("dtype")
    }

    /// Tensor whose dtype byte was already consumed. With `exact` the payload
    /// must end the file.
    fn tensor(&mut self, code: u8, exact: bool) -> Result<Tensor, FormatError> {
        let width = TensorData::width(code)
            .ok_or_else(|| FormatError::malformed(self.path, format!("unknown dtype code {code}")))?;
        let ndim = self.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64("shape")?);
        }
        let expected = shape
            .iter()
            .try_fold(width as u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::malformed(self.path, "shape overflows"))?;
        let found = self.remaining() as u64;
        if found < expected || (exact && found != expected) {
            return Err(FormatError::ShapeHeaderMismatch {
                path: self.path.to_path_buf(),
                expected,
                found,
            });
        }
        let raw = self.take(expected as usize, "payload")?;
        let data = match code {
            1 => TensorData::U8(raw.to_vec()),
            2 => TensorData::U32(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
            3 => TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(Tensor { shape, data })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|e| FormatError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    fs::write(path, bytes).map_err(|e| FormatError::io(path, e))
}

fn preamble() -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out
}

pub fn encode_blob(tensor: &Tensor) -> Vec<u8> {
    let mut out = preamble();
    tensor.encode(&mut out);
    out
}

pub fn decode_blob(path: &Path, bytes: &[u8]) -> Result<Tensor, FormatError> {
    let mut r = Reader { path, bytes, pos: 0 };
    let code = r.header()?;
    if code == PACK_CODE {
        return Err(FormatError::malformed(path, "expected a single tensor, found a pack"));
    }
    r.tensor(code, true)
}

pub fn write_blob(path: &Path, tensor: &Tensor) -> Result<()> {
    Ok(write_file(path, &encode_blob(tensor))?)
}

pub fn read_blob(path: &Path) -> Result<Tensor> {
    Ok(decode_blob(path, &read_file(path)?)?)
}

pub fn encode_pack(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = preamble();
    out.push(PACK_CODE);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        tensor.encode(&mut out);
    }
    out
}

pub fn decode_pack(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Tensor)>, FormatError> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.header()? != PACK_CODE {
        return Err(FormatError::malformed(path, "expected a named-tensor pack"));
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| FormatError::malformed(path, "tensor name is not UTF-8"))?
            .to_string();
        let code = r.u8("dtype")?;
        out.push((name, r.tensor(code, false)?));
    }
    if r.remaining() != 0 {
        return Err(FormatError::malformed(path, format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

pub fn write_pack(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    Ok(write_file(path, &encode_pack(entries))?)
}

pub fn read_pack(path: &Path) -> Result<Vec<(String, Tensor)>> {
    Ok(decode_pack(path, &read_file(path)?)?)
}

fn take_entry(entries: &mut Vec<(String, Tensor)>, path: &Path, name: &str) -> Result<Tensor> {
    match entries.iter().position(|(n, _)| n == name) {
        Some(i) => Ok(entries.swap_remove(i).1),
        None => Err(FormatError::malformed(path, format!("missing tensor {name:?}")).into()),
    }
}

// ---- scene bundles --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u16,
    frames: usize,
    agents: String,
    frame: Vec<FrameEntry>,
    #[serde(default)]
    camera: Vec<CameraEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameEntry {
    index: usize,
    points: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraEntry {
    id: u32,
    frame: usize,
    height: usize,
    width: usize,
    dim: usize,
    valid: bool,
    features: String,
    /// fx, fy, cx, cy
    intrinsics: [f64; 4],
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

/// Writes `bundle` as a directory: `manifest.toml` plus one blob per frame
/// and camera map, and an agent pack.
pub fn write_scene_bundle(dir: &Path, bundle: &SceneBundle) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        frames: bundle.frames.len(),
        agents: "agents.most".into(),
        frame: Vec::new(),
        camera: Vec::new(),
    };
    for frame in &bundle.frames {
        let name = format!("points_{:04}.most", frame.frame_index);
        let flat = frame.points.iter().flatten().copied().collect();
        write_blob(&dir.join(&name), &Tensor::new(&[frame.points.len(), 3], TensorData::F64(flat)))?;
        manifest.frame.push(FrameEntry {
            index: frame.frame_index,
            points: name,
        });
    }
    for cam in &bundle.cameras {
        let name = format!("camera_{:03}_frame_{:04}.most", cam.camera_id, cam.frame_index);
        write_blob(
            &dir.join(&name),
            &Tensor::new(&[cam.height, cam.width, cam.dim], TensorData::F32(cam.features.clone())),
        )?;
        let k = &cam.intrinsics;
        manifest.camera.push(CameraEntry {
            id: cam.camera_id,
            frame: cam.frame_index,
            height: cam.height,
            width: cam.width,
            dim: cam.dim,
            valid: cam.valid,
            features: name,
            intrinsics: [k.fx, k.fy, k.cx, k.cy],
            rotation: cam.extrinsics.rotation,
            translation: cam.extrinsics.translation,
        });
    }
    let n = bundle.agents.len();
    let rows = bundle.agents.iter().flat_map(|a| a.row()).collect();
    let ids = bundle
        .agents
        .iter()
        .flat_map(|a| [a.track_id, a.frame_index as u32, a.class])
        .collect();
    write_pack(
        &dir.join(&manifest.agents),
        &[
            ("boxes".into(), Tensor::new(&[n, 7], TensorData::F64(rows))),
            ("ids".into(), Tensor::new(&[n, 3], TensorData::U32(ids))),
        ],
    )?;
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    Ok(write_file(&dir.join(MANIFEST), text.as_bytes())?)
}

fn entry_path(dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(FormatError::ManifestMissingEntry { path }.into())
    }
}

/// Reads a bundle directory without validating it.
pub fn read_scene_bundle_unchecked(dir: &Path) -> Result<SceneBundle> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| FormatError::io(&manifest_path, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| FormatError::malformed(&manifest_path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(FormatError::VersionUnsupported {
            path: manifest_path,
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        }
        .into());
    }
    let mut bundle = SceneBundle::default();
    for entry in &manifest.frame {
        let path = entry_path(dir, &entry.points)?;
        let t = read_blob(&path)?.expect(&path, "points", "f64", &[None, Some(3)])?;
        let TensorData::F64(flat) = t.data else { unreachable!() };
        bundle.frames.push(PointCloudFrame {
            frame_index: entry.index,
            points: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        });
    }
    for entry in &manifest.camera {
        let path = entry_path(dir, &entry.features)?;
        let dims = [Some(entry.height), Some(entry.width), Some(entry.dim)];
        let t = read_blob(&path)?.expect(&path, "camera features", "f32", &dims)?;
        let TensorData::F32(features) = t.data else { unreachable!() };
        let [fx, fy, cx, cy] = entry.intrinsics;
        bundle.cameras.push(CameraFrame {
            camera_id: entry.id,
            frame_index: entry.frame,
            height: entry.height,
            width: entry.width,
            dim: entry.dim,
            features,
            intrinsics: Intrinsics { fx, fy, cx, cy },
            extrinsics: Extrinsics {
                rotation: entry.rotation,
                translation: entry.translation,
            },
            valid: entry.valid,
        });
    }
    let path = entry_path(dir, &manifest.agents)?;
    let mut entries = read_pack(&path)?;
    let boxes = take_entry(&mut entries, &path, "boxes")?.expect(&path, "agent boxes", "f64", &[None, Some(7)])?;
    let n = boxes.shape[0] as usize;
    let ids = take_entry(&mut entries, &path, "ids")?.expect(&path, "agent ids", "u32", &[Some(n), Some(3)])?;
    let (TensorData::F64(rows), TensorData::U32(ids)) = (boxes.data, ids.data) else { unreachable!() };
    for (r, id) in rows.chunks_exact(7).zip(ids.chunks_exact(3)) {
        bundle.agents.push(AgentBox {
            track_id: id[0],
            frame_index: id[1] as usize,
            center: [r[0], r[1], r[2]],
            size: [r[3], r[4], r[5]],
            heading: r[6],
            class: id[2],
        });
    }
    if manifest.frames != bundle.frames.len() {
        return Err(FormatError::malformed(
            &manifest_path,
            format!("manifest declares {} frames, lists {}", manifest.frames, bundle.frames.len()),
        )
        .into());
    }
    Ok(bundle)
}

/// Reads and validates a bundle directory.
pub fn read_scene_bundle(dir: &Path) -> Result<SceneBundle> {
    let bundle = read_scene_bundle_unchecked(dir)?;
    let config = PipelineConfig {
        frames: bundle.frames.len(),
        ..PipelineConfig::default()
    };
    Ok(crate::model::validate_bundle(bundle, &config)?.into_inner())
}

// ---- token files -----------------------------------------------------------

pub fn meta_path(tokens: &Path) -> PathBuf {
    let mut name = tokens.as_os_str().to_owned();
    name.push(".meta");
    PathBuf::from(name)
}

/// Writes `F_elem` as a blob at `path` and the element metadata as a pack at
/// `path.meta`.
pub fn write_tokens(path: &Path, tokens: &SceneTokens) -> Result<()> {
    if !tokens.embeddings.iter().all(|v| v.is_finite()) {
        return Err(Error::ShapeMismatch("token embeddings must be finite".into()));
    }
    let (n, t, d) = (tokens.len(), tokens.frames, tokens.dim);
    write_blob(path, &Tensor::new(&[n, d], TensorData::F32(tokens.embeddings.clone())))?;
    let e = &tokens.elements;
    let meta = [
        ("token_id", Tensor::new(&[n], TensorData::U32(e.iter().map(|e| e.token_id).collect()))),
        ("kind", Tensor::new(&[n], TensorData::U8(e.iter().map(|e| e.kind.code()).collect()))),
        ("source_id", Tensor::new(&[n], TensorData::U32(e.iter().map(|e| e.source_id).collect()))),
        (
            "frame_valid",
            Tensor::new(&[n, t], TensorData::U8(e.iter().flat_map(|e| e.frame_valid.iter().map(|v| *v as u8)).collect())),
        ),
        (
            "boxes",
            Tensor::new(&[n, t, 7], TensorData::F64(e.iter().flat_map(|e| e.boxes.iter().flatten().copied()).collect())),
        ),
    ];
    let meta: Vec<(String, Tensor)> = meta.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    write_pack(&meta_path(path), &meta)
}

pub fn read_tokens(path: &Path) -> Result<SceneTokens> {
    let emb = read_blob(path)?.expect(path, "embeddings", "f32", &[None, None])?;
    let (n, d) = (emb.shape[0] as usize, emb.shape[1] as usize);
    let mpath = meta_path(path);
    let mut meta = read_pack(&mpath)?;
    let valid = take_entry(&mut meta, &mpath, "frame_valid")?.expect(&mpath, "frame_valid", "u8", &[Some(n), None])?;
    let t = valid.shape[1] as usize;
    let ids = take_entry(&mut meta, &mpath, "token_id")?.expect(&mpath, "token_id", "u32", &[Some(n)])?;
    let kinds = take_entry(&mut meta, &mpath, "kind")?.expect(&mpath, "kind", "u8", &[Some(n)])?;
    let sources = take_entry(&mut meta, &mpath, "source_id")?.expect(&mpath, "source_id", "u32", &[Some(n)])?;
    let boxes = take_entry(&mut meta, &mpath, "boxes")?.expect(&mpath, "boxes", "f64", &[Some(n), Some(t), Some(7)])?;
    let (
        TensorData::F32(embeddings),
        TensorData::U8(valid),
        TensorData::U32(ids),
        TensorData::U8(kinds),
        TensorData::U32(sources),
        TensorData::F64(boxes),
    ) = (emb.data, valid.data, ids.data, kinds.data, sources.data, boxes.data)
    else {
        unreachable!()
    };
    let mut elements = Vec::with_capacity(n);
    for i in 0..n {
        let kind = ElementKind::from_code(kinds[i])
            .ok_or_else(|| FormatError::malformed(&mpath, format!("unknown element kind {}", kinds[i])))?;
        elements.push(SceneElement {
            token_id: ids[i],
            kind,
            source_id: sources[i],
            boxes: boxes[i * t * 7..(i + 1) * t * 7]
                .chunks_exact(7)
                .map(|c| c.try_into().unwrap())
                .collect(),
            frame_valid: valid[i * t..(i + 1) * t].iter().map(|v| *v != 0).collect(),
        });
    }
    Ok(SceneTokens {
        dim: d,
        frames: t,
        embeddings,
        elements,
    })
}

// ---- checkpoints -----------------------------------------------------------

fn tensor_from<F: Scalar>(shape: &[usize], data: &[F]) -> Tensor {
    let data = if F::DTYPE_NAME == "f32" {
        TensorData::F32(data.iter().map(|v| v.as_f64() as f32).collect())
    } else {
        TensorData::F64(data.iter().map(|v| v.as_f64()).collect())
    };
    Tensor::new(shape, data)
}

/// Stores architecture (`arch`: frames, dim, hidden, heads, attention),
/// `layer_norm_eps`, and every named parameter tensor.
pub fn write_checkpoint<F: Scalar>(path: &Path, params: &FusionParams<F>) -> Result<()> {
    let arch = [
        params.frames as u32,
        params.dim as u32,
        params.hidden() as u32,
        params.heads() as u32,
        params.attention as u32,
    ];
    let mut entries = vec![
        ("arch".to_string(), Tensor::new(&[5], TensorData::U32(arch.to_vec()))),
        (
            "layer_norm_eps".to_string(),
            Tensor::new(&[1], TensorData::F64(vec![params.time_block.norm.eps.as_f64()])),
        ),
    ];
    for t in params.tensors() {
        entries.push((t.name.clone(), tensor_from(&t.shape, t.data)));
    }
    write_pack(path, &entries)
}

pub fn read_checkpoint<F: Scalar>(path: &Path) -> Result<FusionParams<F>> {
    let mut entries = read_pack(path)?;
    let arch = take_entry(&mut entries, path, "arch")?.expect(path, "arch", "u32", &[Some(5)])?;
    let eps = take_entry(&mut entries, path, "layer_norm_eps")?.expect(path, "layer_norm_eps", "f64", &[Some(1)])?;
    let (TensorData::U32(arch), TensorData::F64(eps)) = (arch.data, eps.data) else { unreachable!() };
    let [frames, dim, hidden, heads, attention] = [0, 1, 2, 3, 4].map(|i| arch[i] as usize);
    if heads == 0 || dim % heads != 0 {
        return Err(FormatError::malformed(path, format!("{heads} heads do not divide dimension {dim}")).into());
    }
    let config = FusionConfig {
        hidden,
        heads,
        layer_norm_eps: eps[0],
        attention: attention != 0,
    };
    let mut params = FusionParams::<F>::init(&config, frames, dim, 0);
    for slot in params.tensors_mut() {
        let t = take_entry(&mut entries, path, &slot.name)?;
        let dims: Vec<Option<usize>> = slot.shape.iter().map(|d| Some(*d)).collect();
        let dtype = t.data.dtype_name();
        if dtype != "f32" && dtype != "f64" {
            return Err(FormatError::malformed(path, format!("{}: dtype {dtype}", slot.name)).into());
        }
        let t = t.expect(path, &slot.name, dtype, &dims)?;
        match t.data {
            TensorData::F32(v) => slot.data.iter_mut().zip(v).for_each(|(d, s)| *d = F::of(s as f64)),
            TensorData::F64(v) => slot.data.iter_mut().zip(v).for_each(|(d, s)| *d = F::of(s)),
            _ => unreachable!(),
        }
    }
    if let Some((name, _)) = entries.first() {
        return Err(FormatError::malformed(path, format!("unexpected tensor {name:?}")).into());
    }
    if !params.is_finite() {
        return Err(FormatError::malformed(path, "non-finite parameter").into());
    }
    Ok(params)
}

pub fn read_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    let config = PipelineConfig::from_toml(&text)?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_layout_is_fixed() {
        let t = Tensor::new(&[2], TensorData::U32(vec![1, 258]));
        let bytes = encode_blob(&t);
        let mut expected = b"MOST".to_vec();
        expected.extend_from_slice(&[1, 0, 2, 1]);
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&[1, 0, 0, 0, 2, 1, 0, 0]);
        assert_eq!(bytes, expected);
        assert_eq!(decode_blob(Path::new("x"), &bytes).unwrap(), t);
    }

    #[test]
    fn truncated_payload_reports_byte_counts() {
        let t = Tensor::new(&[4], TensorData::F64(vec![1.0; 4]));
        let mut bytes = encode_blob(&t);
        bytes.truncate(bytes.len() - 5);
        match decode_blob(Path::new("x"), &bytes) {
            Err(FormatError::ShapeHeaderMismatch { expected, found, .. }) => {
                assert_eq!((expected, found), (32, 27));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_magic_and_version() {
        let t = Tensor::new(&[1], TensorData::U8(vec![7]));
        let mut bytes = encode_blob(&t);
        bytes[4] = 9;
        assert!(matches!(
            decode_blob(Path::new("x"), &bytes),
            Err(FormatError::VersionUnsupported { found: 9, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_blob(Path::new("x"), &bytes),
            Err(FormatError::BadMagic { found: [b'X', b'O', b'S', b'T'], .. })
        ));
        assert!(matches!(decode_blob(Path::new("x"), b"MO"), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn pack_round_trip() {
        let entries = vec![
            ("a".to_string(), Tensor::new(&[0, 3], TensorData::F32(vec![]))),
            ("b".to_string(), Tensor::new(&[2, 1], TensorData::F64(vec![-0.0, f64::MIN_POSITIVE]))),
        ];
        let bytes = encode_pack(&entries);
        let back = decode_pack(Path::new("p"), &bytes).unwrap();
        assert_eq!(encode_pack(&back), bytes);
    }
}
