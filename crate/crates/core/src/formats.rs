//! On-disk containers: RAWT tensors, G4D Gaussian fields, parameter files
//! and 8-bit PNG images. All integers are little-endian; every file is
//! written through a temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{sh_coeff_count, DeformationDelta, GaussianField, GaussianPrimitive, DEFORM_DIM, GEOMETRY_DIM};
use crate::nn::{ParamEntry, ParamStore};
use crate::tensor::Image;

pub const RAWT_MAGIC: &[u8; 4] = b"RAWT";
pub const RAWT_VERSION: u16 = 1;
pub const G4D_MAGIC: &[u8; 4] = b"G4D\0";
pub const PARAMS_MAGIC: &[u8; 4] = b"PRM\0";

/// A decoded RAWT block. Values are stored as `f32` on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("{} values for dims {dims:?}", data.len())));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: data.iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.dims.len() > u16::MAX as usize {
            return Err(Error::Shape(format!("rank {} too large", self.dims.len())));
        }
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(RAWT_MAGIC);
        out.extend_from_slice(&RAWT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u16).to_le_bytes());
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Decodes one block starting at `bytes[0]`; `base` is the block's offset
    /// within the enclosing file and is used in error locations. Returns the
    /// tensor and the number of bytes consumed.
    pub fn decode(bytes: &[u8], base: usize) -> Result<(Self, usize)> {
        let mut r = Reader { bytes, pos: 0, base };
        let magic = r.take(4, "RAWT magic")?;
        if magic != RAWT_MAGIC {
            return Err(Error::data(format!("byte {base}"), "missing RAWT magic"));
        }
        let version = r.u16("RAWT version")?;
        if version != RAWT_VERSION {
            return Err(Error::data(
                format!("byte {}", base + 4),
                format!("unsupported RAWT version {version}"),
            ));
        }
        let rank = r.u16("RAWT rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("RAWT dimension")? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::data(format!("byte {}", base + 8), "RAWT payload size overflows"))?;
        let payload = r.take(count, "RAWT payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((Self { dims, data }, r.pos))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::data(
                format!("byte {}", self.base + self.bytes.len()),
                format!(
                    "file truncated: {what} needs {n} bytes at offset {}, {} available",
                    self.base + self.pos,
                    self.bytes.len() - self.pos.min(self.bytes.len())
                ),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes `bytes` to a temporary file next to `path` and renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::RejectedInput(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn write_rawt(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    write_atomic(path, &RawTensor::from_f64(dims, data)?.encode()?)
}

/// Reads a file holding exactly one RAWT block.
pub fn read_rawt(path: &Path) -> Result<RawTensor> {
    let bytes = fs::read(path)?;
    let (t, used) = RawTensor::decode(&bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::data(
            format!("byte {used}"),
            format!("{} trailing bytes after the RAWT block", bytes.len() - used),
        ));
    }
    Ok(t)
}

/// Single-channel image as a `[H, W]` RAWT block.
pub fn write_depth(path: &Path, depth: &Image) -> Result<()> {
    if depth.channels != 1 {
        return Err(Error::Shape(format!("depth map has {} channels", depth.channels)));
    }
    write_rawt(path, &[depth.height, depth.width], &depth.data)
}

pub fn read_depth(path: &Path) -> Result<Image> {
    let t = read_rawt(path)?;
    match t.dims[..] {
        [h, w] => Image::from_vec(w, h, 1, t.to_f64()),
        _ => Err(Error::data("byte 6", format!("depth map has dims {:?}", t.dims))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct G4dHeader {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub sh_degree: usize,
    pub timestamps: Vec<f64>,
}

/// Encodes a field: magic, `u32` header length, JSON header, the canonical
/// block `M × (11 + C)` and, for dynamic fields, the track block `T × M × 10`.
pub fn encode_g4d(field: &GaussianField) -> Result<Vec<u8>> {
    field.validate()?;
    let header = G4dHeader {
        m: field.len(),
        t: field.frame_count(),
        c: field.color_dim(),
        sh_degree: field.sh_degree,
        timestamps: field.timestamps.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::data("header", e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(G4D_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let rows: Vec<f64> = field.canonical.iter().flat_map(|p| p.to_row()).collect();
    out.extend(RawTensor::from_f64(&[header.m, GEOMETRY_DIM + header.c], &rows)?.encode()?);
    if !field.is_static() {
        let tracks: Vec<f64> = field.tracks.iter().flatten().flat_map(|d| d.to_row()).collect();
        out.extend(RawTensor::from_f64(&[header.t, header.m, DEFORM_DIM], &tracks)?.encode()?);
    }
    Ok(out)
}

pub fn decode_g4d(bytes: &[u8]) -> Result<GaussianField> {
    let mut r = Reader { bytes, pos: 0, base: 0 };
    if r.take(4, "G4D magic")? != G4D_MAGIC {
        return Err(Error::data("byte 0", "missing G4D magic"));
    }
    let len = r.u32("G4D header length")? as usize;
    let json = r.take(len, "G4D header")?;
    let header: G4dHeader = serde_json::from_slice(json).map_err(|e| {
        Error::data(
            format!("header line {} column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    if header.c != sh_coeff_count(header.sh_degree) {
        return Err(Error::data(
            "header.C",
            format!("{} color values do not match SH degree {}", header.c, header.sh_degree),
        ));
    }
    if header.timestamps.len() != header.t {
        return Err(Error::data("header.timestamps", format!("expected {} entries", header.t)));
    }
    let at = r.pos;
    let (canon, used) = RawTensor::decode(&bytes[at..], at)?;
    let width = GEOMETRY_DIM + header.c;
    if canon.dims != [header.m, width] {
        return Err(Error::data(
            format!("byte {at}"),
            format!("canonical block dims {:?}, header says [{}, {width}]", canon.dims, header.m),
        ));
    }
    let mut pos = at + used;
    let canonical = canon
        .to_f64()
        .chunks(width)
        .map(GaussianPrimitive::from_row)
        .collect::<Result<Vec<_>>>()?;
    let field = if header.t > 1 {
        let (tr, used) = RawTensor::decode(&bytes[pos..], pos)?;
        if tr.dims != [header.t, header.m, DEFORM_DIM] {
            return Err(Error::data(
                format!("byte {pos}"),
                format!(
                    "track block dims {:?}, header says [{}, {}, {DEFORM_DIM}]",
                    tr.dims, header.t, header.m
                ),
            ));
        }
        pos += used;
        let values = tr.to_f64();
        let tracks = values
            .chunks(header.m * DEFORM_DIM)
            .map(|frame| frame.chunks(DEFORM_DIM).map(DeformationDelta::from_row).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        GaussianField::new_dynamic(canonical, tracks, header.timestamps)
    } else {
        GaussianField::new_static(canonical)
    };
    if pos != bytes.len() {
        return Err(Error::data(format!("byte {pos}"), "trailing bytes after the last block"));
    }
    field.map_err(|e| Error::data("canonical block", e.to_string()))
}

pub fn write_g4d(path: &Path, field: &GaussianField) -> Result<()> {
    write_atomic(path, &encode_g4d(field)?)
}

pub fn read_g4d(path: &Path) -> Result<GaussianField> {
    decode_g4d(&fs::read(path)?)
}

/// Rounds every value of the field to `f32` precision, which is what a G4D
/// round trip preserves.
pub fn quantize_field(field: &GaussianField) -> Result<GaussianField> {
    decode_g4d(&encode_g4d(field)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamsHeader {
    entries: Vec<ParamEntry>,
    config: serde_json::Value,
}

/// Parameter file: magic, `u32` header length, JSON header listing every
/// parameter's name, offset and shape plus a free-form `config`, then all
/// values as one rank-1 RAWT block.
pub fn encode_params(store: &ParamStore, config: serde_json::Value) -> Result<Vec<u8>> {
    let header = ParamsHeader {
        entries: store.entries().to_vec(),
        config,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::data("header", e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend(RawTensor::from_f64(&[store.len()], &store.values)?.encode()?);
    Ok(out)
}

/// Returns the stored config and the values, checked against the layout of
/// `store`.
pub fn decode_params(bytes: &[u8], store: &ParamStore) -> Result<(serde_json::Value, Vec<f64>)> {
    let mut r = Reader { bytes, pos: 0, base: 0 };
    if r.take(4, "parameter magic")? != PARAMS_MAGIC {
        return Err(Error::data("byte 0", "missing parameter-file magic"));
    }
    let len = r.u32("parameter header length")? as usize;
    let header: ParamsHeader =
        serde_json::from_slice(r.take(len, "parameter header")?).map_err(|e| Error::data("header", e.to_string()))?;
    if header.entries != store.entries() {
        return Err(Error::data("header.entries", "layer shapes do not match the model"));
    }
    let at = r.pos;
    let (t, used) = RawTensor::decode(&bytes[at..], at)?;
    if t.dims != [store.len()] || at + used != bytes.len() {
        return Err(Error::data(format!("byte {at}"), "parameter block does not match the header"));
    }
    Ok((header.config, t.to_f64()))
}

/// 8-bit RGB PNG of the first three channels, clamped to [0, 1].
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::Shape(format!("PNG export needs 3 channels, got {}", img.channels)));
    }
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| Error::Shape("image buffer size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(out.into_inner())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds colors to the 8-bit levels a PNG stores.
pub fn quantize_image(img: &Image) -> Image {
    Image {
        data: img.data.iter().map(|&v| f64::from(to_u8(v)) / 255.0).collect(),
        ..img.clone()
    }
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect();
    Image::from_vec(w as usize, h as usize, 3, data)
}
