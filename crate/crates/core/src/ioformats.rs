//! File formats: binary Netpbm (P5/P6), the SMT1 named-tensor container and
//! false-color heatmaps.
//!
//! SMT1 layout, all integers unsigned 32-bit little-endian:
//!
//! ```text
//! "SMT1" count { name_len name[name_len] rank dims[rank] f32le[prod(dims)] }*count
//! ```
//!
//! Every writer goes through a temporary file in the destination directory
//! that is renamed into place only after the whole payload is written.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{ColorImage, GrayImage, LabelMap};
use crate::sbdm::{SbdmParams, UpBlock};
use crate::tensor::{ConvKernel, Tensor};

pub const SMT1_MAGIC: [u8; 4] = *b"SMT1";

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

// ---------------------------------------------------------------- Netpbm

struct NetpbmHeader {
    magic: [u8; 2],
    width: usize,
    height: usize,
    payload_start: usize,
}

fn parse_netpbm_header(bytes: &[u8]) -> Result<NetpbmHeader> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::MalformedHeader("missing Netpbm magic number".into()));
    }
    let magic = [bytes[0], bytes[1]];
    match magic[1] {
        b'5' | b'6' => {}
        b'1'..=b'4' | b'7' => {
            return Err(Error::UnsupportedVariant(format!(
                "P{} (only binary P5 and P6 are supported)",
                magic[1] as char
            )))
        }
        _ => return Err(Error::MalformedHeader("missing Netpbm magic number".into())),
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // at least one whitespace byte, then optional comments
        let mut saw_space = false;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => {
                    saw_space = true;
                    pos += 1;
                }
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let name = ["width", "height", "maxval"][i];
        if !saw_space || start == pos {
            return Err(Error::MalformedHeader(format!("expected {name}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v| v <= u32::MAX as u64)
            .ok_or_else(|| Error::MalformedHeader(format!("{name} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::MalformedHeader("expected whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::MalformedHeader(format!("maxval {maxval} outside 1..=65535")));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval as u32));
    }
    Ok(NetpbmHeader {
        magic,
        width: width as usize,
        height: height as usize,
        payload_start: pos,
    })
}

fn netpbm_payload<'a>(bytes: &'a [u8], header: &NetpbmHeader, samples: usize, what: &str) -> Result<&'a [u8]> {
    let need = header
        .width
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(samples))
        .ok_or_else(|| Error::MalformedHeader("image dimensions overflow".into()))?;
    let body = &bytes[header.payload_start..];
    if body.len() < need {
        return Err(Error::TruncatedPayload(format!(
            "{what}: expected {need} bytes, found {}",
            body.len()
        )));
    }
    Ok(&body[..need])
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let header = parse_netpbm_header(bytes)?;
    if header.magic != *b"P5" {
        return Err(Error::UnsupportedVariant("expected P5 (binary graymap), found P6".into()));
    }
    let data = netpbm_payload(bytes, &header, 1, "PGM")?;
    GrayImage::new(header.width, header.height, data.to_vec())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ColorImage> {
    let header = parse_netpbm_header(bytes)?;
    if header.magic != *b"P6" {
        return Err(Error::UnsupportedVariant("expected P6 (binary pixmap), found P5".into()));
    }
    let data = netpbm_payload(bytes, &header, 3, "PPM")?;
    ColorImage::new(header.width, header.height, data.to_vec())
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn encode_ppm(image: &ColorImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_pgm(&std::fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pgm(image))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ColorImage> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &ColorImage) -> Result<()> {
    write_atomic(path.as_ref(), &encode_ppm(image))
}

/// Label maps are stored as P5 graymaps with the label as the gray level.
pub fn label_map_to_gray(labels: &LabelMap) -> Result<GrayImage> {
    let data = labels
        .data
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} does not fit in 8 bits"))))
        .collect::<Result<Vec<u8>>>()?;
    GrayImage::new(labels.width, labels.height, data)
}

pub fn gray_to_label_map(image: &GrayImage) -> LabelMap {
    LabelMap {
        width: image.width,
        height: image.height,
        data: image.data.iter().map(|&v| v as u32).collect(),
    }
}

pub fn read_label_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    Ok(gray_to_label_map(&read_pgm(path)?))
}

pub fn write_label_pgm(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    write_pgm(path, &label_map_to_gray(labels)?)
}

// ---------------------------------------------------------------- SMT1

/// A dense `f32` array of arbitrary rank.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    dims: Vec<u32>,
    data: Vec<f32>,
}

fn element_count(dims: &[u32]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
}

impl StoredTensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        match element_count(&dims) {
            Some(n) if n == data.len() => Ok(Self { dims, data }),
            _ => Err(Error::SizeMismatch {
                entry: "<new>".into(),
                detail: format!("dims {dims:?} do not describe {} values", data.len()),
            }),
        }
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Rank-3 `[C, H, W]`; a rank-2 `[H, W]` entry is read as one channel.
    pub fn to_tensor(&self, name: &str) -> Result<Tensor> {
        let (c, h, w) = match self.dims[..] {
            [c, h, w] => (c, h, w),
            [h, w] => (1, h, w),
            _ => {
                return Err(Error::SizeMismatch {
                    entry: name.into(),
                    detail: format!("expected rank 2 or 3, found dims {:?}", self.dims),
                })
            }
        };
        Tensor::new(c as usize, h as usize, w as usize, self.data.clone())
    }
}

impl From<&Tensor> for StoredTensor {
    fn from(t: &Tensor) -> Self {
        let (c, h, w) = t.shape();
        Self {
            dims: vec![c as u32, h as u32, w as u32],
            data: t.data().to_vec(),
        }
    }
}

/// Ordered named tensors with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    entries: Vec<(String, StoredTensor)>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: StoredTensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::DuplicateName(name));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, tensor: &Tensor) -> Result<()> {
        self.insert(name, StoredTensor::from(tensor))
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&StoredTensor> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.into()))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.require(name)?.to_tensor(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = SMT1_MAGIC.to_vec();
        out.extend(u32_len(self.entries.len(), "entry count")?.to_le_bytes());
        for (name, t) in &self.entries {
            out.extend(u32_len(name.len(), "name length")?.to_le_bytes());
            out.extend(name.as_bytes());
            out.extend(u32_len(t.dims.len(), "rank")?.to_le_bytes());
            for d in &t.dims {
                out.extend(d.to_le_bytes());
            }
            for v in &t.data {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = match r.take(4) {
            Some(m) => m.try_into().expect("four bytes"),
            None => {
                let mut m = [0u8; 4];
                m[..bytes.len()].copy_from_slice(bytes);
                return Err(Error::BadMagic(m));
            }
        };
        if magic != SMT1_MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let count = r.u32().ok_or_else(|| Error::TruncatedPayload("container header".into()))?;
        let mut container = Self::new();
        for i in 0..count {
            let at = |what: &str| Error::TruncatedPayload(format!("entry #{i} ({what})"));
            let len = r.u32().ok_or_else(|| at("name length"))? as usize;
            let raw = r.take(len).ok_or_else(|| at("name"))?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| Error::MalformedHeader(format!("entry #{i} name is not valid UTF-8")))?
                .to_owned();
            let trunc = |what: &str| Error::TruncatedPayload(format!("entry {name:?} ({what})"));
            let rank = r.u32().ok_or_else(|| trunc("rank"))? as usize;
            if rank > r.remaining() / 4 {
                return Err(trunc("dims"));
            }
            let dims = (0..rank).map(|_| r.u32().expect("checked above")).collect::<Vec<u32>>();
            let n = element_count(&dims).ok_or_else(|| Error::SizeMismatch {
                entry: name.clone(),
                detail: format!("dims {dims:?} overflow"),
            })?;
            let payload = n
                .checked_mul(4)
                .and_then(|b| r.take(b))
                .ok_or_else(|| trunc(&format!("{n} values")))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            container.insert(name, StoredTensor { dims, data })?;
        }
        if r.remaining() != 0 {
            return Err(Error::SizeMismatch {
                entry: "<container>".into(),
                detail: format!("{} trailing bytes after the last entry", r.remaining()),
            });
        }
        Ok(container)
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if n > self.remaining() {
            return None;
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
    }
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<TensorContainer> {
    TensorContainer::decode(&std::fs::read(path)?)
}

pub fn write_tensors(path: impl AsRef<Path>, container: &TensorContainer) -> Result<()> {
    write_atomic(path.as_ref(), &container.encode()?)
}

// ---------------------------------------------------------------- checkpoints

/// One `<kernel>.weight` entry `[out, in_per_group, kh, kw]` and one
/// `<kernel>.bias` entry `[out]` per kernel, in [`SbdmParams::kernel_names`]
/// order.
pub fn params_to_container(params: &SbdmParams) -> Result<TensorContainer> {
    let mut c = TensorContainer::new();
    for (name, k) in params.kernel_names().into_iter().zip(params.kernels()) {
        let (kh, kw) = k.kernel_size();
        let dims = [k.out_channels(), k.in_per_group(), kh, kw].map(|d| d as u32).to_vec();
        c.insert(format!("{name}.weight"), StoredTensor::new(dims, k.weights.clone())?)?;
        c.insert(format!("{name}.bias"), StoredTensor::new(vec![k.out_channels() as u32], k.bias.clone())?)?;
    }
    Ok(c)
}

fn kernel_from(c: &TensorContainer, name: &str, grouped: bool) -> Result<ConvKernel> {
    let wname = format!("{name}.weight");
    let w = c.require(&wname)?;
    let b = c.require(&format!("{name}.bias"))?;
    let [out, in_per_group, kh, kw] = w.dims()[..] else {
        return Err(Error::SizeMismatch {
            entry: wname,
            detail: format!("expected rank 4, found dims {:?}", w.dims()),
        });
    };
    let groups = if grouped { out as usize } else { 1 };
    ConvKernel::grouped(
        groups,
        in_per_group as usize,
        out as usize,
        kh as usize,
        kw as usize,
        w.data().to_vec(),
        b.data().to_vec(),
    )
}

/// Inverse of [`params_to_container`]; the level count is inferred from the
/// entry names and the architecture from the stored dims.
pub fn params_from_container(c: &TensorContainer) -> Result<SbdmParams> {
    let mut levels = Vec::new();
    while c.get(&format!("level{}.reduce.weight", levels.len())).is_some() {
        let i = levels.len();
        levels.push(UpBlock {
            reduce: kernel_from(c, &format!("level{i}.reduce"), false)?,
            refine: kernel_from(c, &format!("level{i}.refine"), false)?,
        });
    }
    if levels.is_empty() {
        return Err(Error::MissingTensor("level0.reduce.weight".into()));
    }
    let params = SbdmParams {
        levels,
        fuse1: kernel_from(c, "fuse1", false)?,
        fuse2: kernel_from(c, "fuse2", false)?,
        mix: kernel_from(c, "mix", true)?,
    };
    params.validate()?;
    Ok(params)
}

// ---------------------------------------------------------------- heatmaps

/// Jet breakpoints: blue, cyan, green, yellow, red at 0, ¼, ½, ¾, 1.
const JET: [[f32; 3]; 5] = [
    [0.0, 0.0, 255.0],
    [0.0, 255.0, 255.0],
    [0.0, 255.0, 0.0],
    [255.0, 255.0, 0.0],
    [255.0, 0.0, 0.0],
];

/// Color of one value, clamped to `[0, 1]`; NaN maps to blue.
pub fn heatmap_color(v: f32) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let s = v * 4.0;
    let i = (s.floor() as usize).min(3);
    let t = s - i as f32;
    let (a, b) = (JET[i], JET[i + 1]);
    [0, 1, 2].map(|k| (a[k] + (b[k] - a[k]) * t).round() as u8)
}

/// Renders a single-channel map.
pub fn render_heatmap(map: &Tensor) -> Result<ColorImage> {
    if map.channels() != 1 {
        return Err(Error::shape("render_heatmap", "1 channel", format!("{} channels", map.channels())));
    }
    let data = map.data().iter().flat_map(|&v| heatmap_color(v)).collect();
    ColorImage::new(map.width(), map.height(), data)
}
