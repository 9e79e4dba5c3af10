//! Loading, normalizing, tiling and writing 3D image stacks.
//!
//! Stacks live in memory as `f64` voxels indexed `(z, y, x)` in their
//! native intensity scale. The only on-disk format is a multi-page
//! grayscale TIFF with one page per z-slice. Stack metadata (voxel spacing
//! and provenance) travels in the first page's `ImageDescription` tag as
//! JSON.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;
use tiff::ColorType;

use crate::autograd::bilinear_matrix;
use crate::error::{Error, Result};

/// Smallest slice edge accepted for model input.
pub const MIN_SLICE_EDGE: usize = 32;
/// Default network input edge.
pub const MODEL_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    #[serde(rename = "8")]
    Eight,
    #[serde(rename = "16")]
    Sixteen,
}

impl BitDepth {
    pub fn bits(self) -> u8 {
        match self {
            BitDepth::Eight => 8,
            BitDepth::Sixteen => 16,
        }
    }

    pub fn max_value(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StackMetadata {
    /// `(dx, dy, dz)` in µm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, String>,
}

/// Intensity range recorded by [`normalize_stack`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormRange {
    pub min: f64,
    pub max: f64,
}

impl NormRange {
    pub fn denormalize(&self, v: f64) -> f64 {
        self.min + v * (self.max - self.min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeStack {
    voxels: Array3<f64>,
    bit_depth: BitDepth,
    norm: Option<NormRange>,
    pub meta: StackMetadata,
}

impl VolumeStack {
    /// Builds a raw (unnormalized) stack; values must lie within the bit
    /// depth's range.
    pub fn new(voxels: Array3<f64>, bit_depth: BitDepth) -> Result<Self> {
        if voxels.is_empty() {
            return Err(Error::invalid("stack has no voxels"));
        }
        let max = bit_depth.max_value();
        if let Some(v) = voxels.iter().find(|v| !(0.0..=max).contains(*v)) {
            return Err(Error::invalid(format!(
                "intensity {v} outside [0, {max}] for {}-bit data",
                bit_depth.bits()
            )));
        }
        Ok(VolumeStack {
            voxels: voxels.as_standard_layout().into_owned(),
            bit_depth,
            norm: None,
            meta: StackMetadata::default(),
        })
    }

    pub fn from_slices(slices: &[Array2<f64>], bit_depth: BitDepth) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::invalid("no slices"))?;
        let (h, w) = first.dim();
        let mut vox = Array3::zeros((slices.len(), h, w));
        for (z, s) in slices.iter().enumerate() {
            if s.dim() != (h, w) {
                return Err(Error::ShapeMismatch(format!("slice {z} is {:?}, expected {:?}", s.dim(), (h, w))));
            }
            vox.index_axis_mut(Axis(0), z).assign(s);
        }
        VolumeStack::new(vox, bit_depth)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.meta.spacing = Some(spacing);
        self
    }

    pub fn width(&self) -> usize {
        self.voxels.dim().2
    }

    pub fn height(&self) -> usize {
        self.voxels.dim().1
    }

    pub fn depth(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn bit_depth(&self) -> BitDepth {
        self.bit_depth
    }

    pub fn spacing(&self) -> Option<[f64; 3]> {
        self.meta.spacing
    }

    pub fn voxels(&self) -> &Array3<f64> {
        &self.voxels
    }

    pub fn slice(&self, z: usize) -> ArrayView2<'_, f64> {
        self.voxels.index_axis(Axis(0), z)
    }

    pub fn norm_range(&self) -> Option<NormRange> {
        self.norm
    }

    pub fn is_normalized(&self) -> bool {
        self.norm.is_some()
    }

    /// Maps a normalized stack back to its native intensity scale.
    /// Raw stacks are returned unchanged.
    pub fn denormalize(&self) -> VolumeStack {
        match self.norm {
            None => self.clone(),
            Some(r) => VolumeStack {
                voxels: self.voxels.mapv(|v| r.denormalize(v)),
                bit_depth: self.bit_depth,
                norm: None,
                meta: self.meta.clone(),
            },
        }
    }

    /// Rebuilds a stack of the same kind (bit depth, normalization, metadata)
    /// around new voxels.
    pub(crate) fn with_voxels(&self, voxels: Array3<f64>) -> VolumeStack {
        VolumeStack {
            voxels,
            bit_depth: self.bit_depth,
            norm: self.norm,
            meta: self.meta.clone(),
        }
    }

    /// Voxels rounded and clamped to the integer range of the bit depth.
    pub fn quantized(&self) -> Array3<f64> {
        let max = self.bit_depth.max_value();
        self.denormalize().voxels.mapv(|v| v.round().clamp(0.0, max))
    }
}

/// Result of [`normalize_stack`].
#[derive(Debug, Clone)]
pub struct Normalized {
    pub stack: VolumeStack,
    /// Set when the stack was constant and mapped to zeros.
    pub warning: Option<String>,
}

/// Per-stack min-max normalization to `[0, 1]`.
pub fn normalize_stack(s: &VolumeStack) -> Normalized {
    let raw = s.denormalize();
    let min = raw.voxels.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.voxels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = NormRange { min, max };
    if max == min {
        let warning = format!("constant stack (value {min}); normalized to zeros");
        log::warn!("{warning}");
        return Normalized {
            stack: VolumeStack {
                voxels: Array3::zeros(raw.voxels.raw_dim()),
                bit_depth: raw.bit_depth,
                norm: Some(range),
                meta: raw.meta,
            },
            warning: Some(warning),
        };
    }
    let span = max - min;
    Normalized {
        stack: VolumeStack {
            voxels: raw.voxels.mapv(|v| (v - min) / span),
            bit_depth: raw.bit_depth,
            norm: Some(range),
            meta: raw.meta,
        },
        warning: None,
    }
}

/// A normalized 2D frame at network resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFrame {
    data: Array2<f64>,
    pub native_width: usize,
    pub native_height: usize,
}

impl ModelFrame {
    /// Wraps square `[0,1]` data. Values are checked, not clamped.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (h, w) = data.dim();
        if h != w || h == 0 {
            return Err(Error::ShapeMismatch(format!("model frame must be square, got {h}x{w}")));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("model frame value {v} outside [0,1]")));
        }
        Ok(ModelFrame {
            native_width: w,
            native_height: h,
            data,
        })
    }

    pub(crate) fn clamped(data: Array2<f64>, native_height: usize, native_width: usize) -> Self {
        ModelFrame {
            data: data.mapv(|v| v.clamp(0.0, 1.0)),
            native_width,
            native_height,
        }
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn model_size(&self) -> usize {
        self.data.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FramePolicy {
    Resize,
    Tile,
}

/// How a native slice maps onto model frames; serializable as the sidecar
/// manifest of a tiled stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLayout {
    pub policy: FramePolicy,
    pub native_height: usize,
    pub native_width: usize,
    pub model_size: usize,
    /// Top-left `(y, x)` of every frame in native coordinates.
    pub offsets: Vec<(usize, usize)>,
}

impl FrameLayout {
    pub fn for_slice(policy: FramePolicy, height: usize, width: usize, model_size: usize) -> Result<Self> {
        if height < MIN_SLICE_EDGE || width < MIN_SLICE_EDGE {
            return Err(Error::invalid(format!(
                "slice {width}x{height} is smaller than {MIN_SLICE_EDGE}x{MIN_SLICE_EDGE}"
            )));
        }
        let offsets = match policy {
            FramePolicy::Resize => vec![(0, 0)],
            FramePolicy::Tile => {
                let ys = tile_starts(height, model_size);
                let xs = tile_starts(width, model_size);
                ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect()
            }
        };
        Ok(FrameLayout {
            policy,
            native_height: height,
            native_width: width,
            model_size,
            offsets,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Evenly spaced tile starts covering `len` with tiles of `tile`.
fn tile_starts(len: usize, tile: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let n = len.div_ceil(tile);
    let span = (len - tile) as f64;
    (0..n)
        .map(|i| (span * i as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

/// Frames for one native slice plus the layout that inverts them.
#[derive(Debug, Clone)]
pub struct FrameSet {
    pub frames: Vec<ModelFrame>,
    pub layout: FrameLayout,
}

/// Converts a normalized slice into model frames.
pub fn to_model_frames(slice: ArrayView2<'_, f64>, policy: FramePolicy, model_size: usize) -> Result<FrameSet> {
    let (h, w) = slice.dim();
    let layout = FrameLayout::for_slice(policy, h, w, model_size)?;
    let frames = match policy {
        FramePolicy::Resize => {
            let data = if (h, w) == (model_size, model_size) {
                slice.to_owned()
            } else {
                let rows = bilinear_matrix(model_size, h);
                let cols = bilinear_matrix(model_size, w);
                rows.dot(&slice).dot(&cols.t())
            };
            vec![ModelFrame::clamped(data, h, w)]
        }
        FramePolicy::Tile => layout
            .offsets
            .iter()
            .map(|&(y0, x0)| {
                // edge replication when the slice is narrower than a tile
                let data = Array2::from_shape_fn((model_size, model_size), |(y, x)| {
                    slice[[(y0 + y).min(h - 1), (x0 + x).min(w - 1)]]
                });
                ModelFrame::clamped(data, h, w)
            })
            .collect(),
    };
    Ok(FrameSet { frames, layout })
}

/// Reassembles a native slice; overlapping tiles are averaged uniformly.
pub fn from_model_frames(frames: &[Array2<f64>], layout: &FrameLayout) -> Result<Array2<f64>> {
    if frames.len() != layout.offsets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} frames for a layout of {}",
            frames.len(),
            layout.offsets.len()
        )));
    }
    let m = layout.model_size;
    if let Some(f) = frames.iter().find(|f| f.dim() != (m, m)) {
        return Err(Error::ShapeMismatch(format!("frame {:?}, expected {m}x{m}", f.dim())));
    }
    let (h, w) = (layout.native_height, layout.native_width);
    match layout.policy {
        FramePolicy::Resize => {
            if (h, w) == (m, m) {
                return Ok(frames[0].clone());
            }
            let rows = bilinear_matrix(h, m);
            let cols = bilinear_matrix(w, m);
            Ok(rows.dot(&frames[0]).dot(&cols.t()))
        }
        FramePolicy::Tile => {
            let mut sum = Array2::<f64>::zeros((h, w));
            let mut count = Array2::<f64>::zeros((h, w));
            for (f, &(y0, x0)) in frames.iter().zip(&layout.offsets) {
                let (th, tw) = (m.min(h - y0), m.min(w - x0));
                let mut acc = sum.slice_mut(s![y0..y0 + th, x0..x0 + tw]);
                acc += &f.slice(s![..th, ..tw]);
                count.slice_mut(s![y0..y0 + th, x0..x0 + tw]).mapv_inplace(|c| c + 1.0);
            }
            Ok(sum / count)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
struct Description {
    #[serde(default)]
    axsr: StackMetadata,
}

fn tiff_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Tiff {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Integer pages of a multi-page grayscale TIFF.
pub(crate) struct RawPages {
    pub bits: u8,
    pub height: usize,
    pub width: usize,
    pub pages: Vec<Vec<u32>>,
    pub description: Option<String>,
}

pub(crate) fn read_pages(path: &Path, allowed_bits: &[u8]) -> Result<RawPages> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file))
        .map_err(|e| tiff_err(path, e))?
        .with_limits(Limits::unlimited());
    let description = dec.get_tag_ascii_string(Tag::ImageDescription).ok();
    let mut pages = Vec::new();
    let mut dims: Option<(u32, u32, u8)> = None;
    loop {
        let page = pages.len() + 1;
        let bits = match dec.colortype().map_err(|e| tiff_err(path, e))? {
            ColorType::Gray(b) if allowed_bits.contains(&b) => b,
            other => {
                return Err(Error::BadPage {
                    page,
                    message: format!("unsupported color type {other:?} (grayscale {allowed_bits:?}-bit expected)"),
                })
            }
        };
        let (w, h) = dec.dimensions().map_err(|e| tiff_err(path, e))?;
        match dims {
            None => dims = Some((w, h, bits)),
            Some((w0, h0, _)) if (w0, h0) != (w, h) => {
                return Err(Error::BadPage {
                    page,
                    message: format!("page is {w}x{h} but page 1 is {w0}x{h0}"),
                })
            }
            Some((_, _, b0)) if b0 != bits => {
                return Err(Error::BadPage {
                    page,
                    message: format!("page is {bits}-bit but page 1 is {b0}-bit"),
                })
            }
            _ => {}
        }
        let data: Vec<u32> = match dec.read_image().map_err(|e| tiff_err(path, e))? {
            DecodingResult::U8(v) => v.into_iter().map(u32::from).collect(),
            DecodingResult::U16(v) => v.into_iter().map(u32::from).collect(),
            DecodingResult::U32(v) => v,
            _ => {
                return Err(Error::BadPage {
                    page,
                    message: "unsupported sample format".into(),
                })
            }
        };
        pages.push(data);
        if !dec.more_images() {
            break;
        }
        dec.next_image().map_err(|e| tiff_err(path, e))?;
    }
    let (w, h, bits) = dims.expect("at least one page");
    Ok(RawPages {
        bits,
        height: h as usize,
        width: w as usize,
        pages,
        description,
    })
}

fn parse_description(text: &str) -> StackMetadata {
    if let Ok(d) = serde_json::from_str::<Description>(text) {
        return d.axsr;
    }
    // ImageJ hyperstack descriptions carry only the z step
    let dz = text
        .lines()
        .find_map(|l| l.strip_prefix("spacing="))
        .and_then(|v| v.trim().parse::<f64>().ok());
    StackMetadata {
        spacing: dz.map(|dz| [1.0, 1.0, dz]),
        provenance: BTreeMap::new(),
    }
}

/// Reads a multi-page 8- or 16-bit grayscale TIFF.
pub fn load_stack(path: impl AsRef<Path>) -> Result<VolumeStack> {
    let path = path.as_ref();
    let raw = read_pages(path, &[8, 16])?;
    let bit_depth = if raw.bits == 8 { BitDepth::Eight } else { BitDepth::Sixteen };
    let depth = raw.pages.len();
    let mut vox = Array3::zeros((depth, raw.height, raw.width));
    for (z, page) in raw.pages.iter().enumerate() {
        for (dst, &v) in vox.index_axis_mut(Axis(0), z).iter_mut().zip(page) {
            *dst = f64::from(v);
        }
    }
    let mut stack = VolumeStack::new(vox, bit_depth)?;
    if let Some(d) = raw.description.as_deref() {
        stack.meta = parse_description(d);
    }
    Ok(stack)
}

fn description_json(meta: &StackMetadata) -> Result<String> {
    Ok(serde_json::to_string(&Description { axsr: meta.clone() })?)
}

/// Writes the stack, denormalized and requantized to its bit depth.
pub fn save_stack(stack: &VolumeStack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let q = stack.quantized();
    let (depth, h, w) = q.dim();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| tiff_err(path, e))?;
    let desc = description_json(&stack.meta)?;
    for z in 0..depth {
        let plane = q.index_axis(Axis(0), z);
        match stack.bit_depth {
            BitDepth::Eight => {
                let data: Vec<u8> = plane.iter().map(|&v| v as u8).collect();
                let mut img = enc
                    .new_image::<colortype::Gray8>(w as u32, h as u32)
                    .map_err(|e| tiff_err(path, e))?;
                if z == 0 {
                    img.encoder()
                        .write_tag(Tag::ImageDescription, desc.as_str())
                        .map_err(|e| tiff_err(path, e))?;
                }
                img.write_data(&data).map_err(|e| tiff_err(path, e))?;
            }
            BitDepth::Sixteen => {
                let data: Vec<u16> = plane.iter().map(|&v| v as u16).collect();
                let mut img = enc
                    .new_image::<colortype::Gray16>(w as u32, h as u32)
                    .map_err(|e| tiff_err(path, e))?;
                if z == 0 {
                    img.encoder()
                        .write_tag(Tag::ImageDescription, desc.as_str())
                        .map_err(|e| tiff_err(path, e))?;
                }
                img.write_data(&data).map_err(|e| tiff_err(path, e))?;
            }
        }
    }
    Ok(())
}

/// Writes an integer label volume as 8-, 16- or 32-bit pages depending on
/// the largest label.
pub fn save_labels(labels: &Array3<u32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (depth, h, w) = labels.dim();
    let max = labels.iter().copied().max().unwrap_or(0);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| tiff_err(path, e))?;
    for z in 0..depth {
        let plane = labels.index_axis(Axis(0), z);
        let r = if max <= u8::MAX as u32 {
            let d: Vec<u8> = plane.iter().map(|&v| v as u8).collect();
            enc.write_image::<colortype::Gray8>(w as u32, h as u32, &d)
        } else if max <= u16::MAX as u32 {
            let d: Vec<u16> = plane.iter().map(|&v| v as u16).collect();
            enc.write_image::<colortype::Gray16>(w as u32, h as u32, &d)
        } else {
            let d: Vec<u32> = plane.iter().copied().collect();
            enc.write_image::<colortype::Gray32>(w as u32, h as u32, &d)
        };
        r.map_err(|e| tiff_err(path, e))?;
    }
    Ok(())
}

/// Reads an integer label volume (8/16/32-bit pages).
pub fn load_labels(path: impl AsRef<Path>) -> Result<(Array3<u32>, StackMetadata)> {
    let path = path.as_ref();
    let raw = read_pages(path, &[8, 16, 32])?;
    let mut vol = Array3::zeros((raw.pages.len(), raw.height, raw.width));
    for (z, page) in raw.pages.iter().enumerate() {
        for (dst, &v) in vol.index_axis_mut(Axis(0), z).iter_mut().zip(page) {
            *dst = v;
        }
    }
    let meta = raw.description.as_deref().map(parse_description).unwrap_or_default();
    Ok((vol, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(depth: usize, h: usize, w: usize, bd: BitDepth, seed: u64) -> VolumeStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max = bd.max_value() as u32;
        let vox = Array3::from_shape_fn((depth, h, w), |_| f64::from(rng.random_range(0..=max)));
        VolumeStack::new(vox, bd).unwrap()
    }

    #[test]
    fn tiff_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (bd, seed) in [(BitDepth::Eight, 1), (BitDepth::Sixteen, 2)] {
            let s = random_stack(5, 40, 33, bd, seed).with_spacing([0.5, 0.5, 2.0]);
            let p = dir.path().join(format!("s{}.tif", bd.bits()));
            save_stack(&s, &p).unwrap();
            let back = load_stack(&p).unwrap();
            assert_eq!(back.voxels(), s.voxels());
            assert_eq!(back.bit_depth(), bd);
            assert_eq!(back.spacing(), Some([0.5, 0.5, 2.0]));
        }
    }

    #[test]
    fn thirty_six_pages() {
        let dir = tempfile::tempdir().unwrap();
        let s = random_stack(36, 256, 256, BitDepth::Eight, 3);
        let p = dir.path().join("s.tif");
        save_stack(&s, &p).unwrap();
        let back = load_stack(&p).unwrap();
        assert_eq!((back.depth(), back.bit_depth()), (36, BitDepth::Eight));
    }

    #[test]
    fn single_page() {
        let dir = tempfile::tempdir().unwrap();
        let s = random_stack(1, 32, 32, BitDepth::Eight, 4);
        let p = dir.path().join("s.tif");
        save_stack(&s, &p).unwrap();
        assert_eq!(load_stack(&p).unwrap().depth(), 1);
    }

    #[test]
    fn mixed_page_sizes_name_the_page() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mixed.tif");
        {
            let mut enc = TiffEncoder::new(File::create(&p).unwrap()).unwrap();
            enc.write_image::<colortype::Gray8>(256, 256, &vec![0u8; 256 * 256]).unwrap();
            enc.write_image::<colortype::Gray8>(128, 128, &vec![0u8; 128 * 128]).unwrap();
        }
        match load_stack(&p) {
            Err(Error::BadPage { page, .. }) => assert_eq!(page, 2),
            other => panic!("expected page error, got {other:?}"),
        }
    }

    #[test]
    fn rgb_pages_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.tif");
        {
            let mut enc = TiffEncoder::new(File::create(&p).unwrap()).unwrap();
            enc.write_image::<colortype::RGB8>(4, 4, &[0u8; 48]).unwrap();
        }
        assert!(matches!(load_stack(&p), Err(Error::BadPage { page: 1, .. })));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(load_stack("/nonexistent/x.tif"), Err(Error::Io { .. })));
    }

    #[test]
    fn normalize_full_range_and_midpoint() {
        let vox = Array3::from_shape_fn((2, 2, 2), |(z, y, x)| [0.0, 255.0, 51.0, 102.0][(z * 4 + y * 2 + x) % 4]);
        let n = normalize_stack(&VolumeStack::new(vox.clone(), BitDepth::Eight).unwrap());
        assert!(n.warning.is_none());
        for (a, b) in n.stack.voxels().iter().zip(vox.iter()) {
            assert_eq!(*a, b / 255.0);
        }

        let vox = Array3::from_shape_vec((1, 1, 3), vec![10.0, 60.0, 110.0]).unwrap();
        let n = normalize_stack(&VolumeStack::new(vox, BitDepth::Eight).unwrap());
        assert_eq!(n.stack.voxels()[[0, 0, 1]], 0.5);
    }

    #[test]
    fn constant_stack_warns_and_zeroes() {
        let s = VolumeStack::new(Array3::from_elem((3, 4, 4), 7.0), BitDepth::Eight).unwrap();
        let n = normalize_stack(&s);
        assert!(n.warning.is_some());
        assert!(n.stack.voxels().iter().all(|&v| v == 0.0));
        assert_eq!(n.stack.denormalize().voxels(), s.voxels());
    }

    #[test]
    fn normalize_range_and_denormalize() {
        let s = random_stack(4, 16, 16, BitDepth::Eight, 9);
        let n = normalize_stack(&s).stack;
        let min = n.voxels().iter().copied().fold(f64::INFINITY, f64::min);
        let max = n.voxels().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((min, max), (0.0, 1.0));
        let back = n.denormalize();
        for (a, b) in back.voxels().iter().zip(s.voxels()) {
            assert!((a - b).abs() < 0.5);
        }
    }

    #[test]
    fn exact_tiling_of_512() {
        let slice = Array2::from_shape_fn((512, 512), |(y, x)| ((y * 7 + x * 3) % 97) as f64 / 96.0);
        let set = to_model_frames(slice.view(), FramePolicy::Tile, 256).unwrap();
        assert_eq!(set.layout.offsets, vec![(0, 0), (0, 256), (256, 0), (256, 256)]);
        assert_eq!(set.frames[3].data()[[0, 0]], slice[[256, 256]]);
        let frames: Vec<_> = set.frames.into_iter().map(ModelFrame::into_data).collect();
        assert_eq!(from_model_frames(&frames, &set.layout).unwrap(), slice);
    }

    #[test]
    fn resize_at_model_size_is_identity() {
        let slice = Array2::from_shape_fn((256, 256), |(y, x)| ((y + x) % 11) as f64 / 10.0);
        let set = to_model_frames(slice.view(), FramePolicy::Resize, 256).unwrap();
        assert_eq!(set.frames.len(), 1);
        assert_eq!(set.frames[0].data(), &slice);
    }

    #[test]
    fn tiling_300_overlaps_by_212() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let slice = Array2::from_shape_fn((300, 300), |_| rng.random::<f64>());
        let set = to_model_frames(slice.view(), FramePolicy::Tile, 256).unwrap();
        assert_eq!(set.layout.offsets, vec![(0, 0), (0, 44), (44, 0), (44, 44)]);
        assert_eq!(256 - 44, 212);
        let frames: Vec<_> = set.frames.into_iter().map(ModelFrame::into_data).collect();
        let back = from_model_frames(&frames, &set.layout).unwrap();
        let err = back.iter().zip(slice.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "round-trip error {err}");
    }

    #[test]
    fn small_slices_are_rejected() {
        let slice = Array2::<f64>::zeros((31, 64));
        assert!(to_model_frames(slice.view(), FramePolicy::Tile, 256).is_err());
    }

    #[test]
    fn narrow_slice_tiles_with_padding() {
        let slice = Array2::from_shape_fn((40, 300), |(y, x)| ((y + x) % 5) as f64 / 4.0);
        let set = to_model_frames(slice.view(), FramePolicy::Tile, 64).unwrap();
        let frames: Vec<_> = set.frames.into_iter().map(ModelFrame::into_data).collect();
        assert_eq!(from_model_frames(&frames, &set.layout).unwrap(), slice);
    }

    #[test]
    fn layout_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let l = FrameLayout::for_slice(FramePolicy::Tile, 300, 512, 256).unwrap();
        let p = dir.path().join("layout.json");
        l.save(&p).unwrap();
        assert_eq!(FrameLayout::load(&p).unwrap(), l);
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Array3::from_shape_fn((3, 5, 6), |(z, y, x)| ((z * 31 + y * 7 + x) % 300) as u32);
        let p = dir.path().join("labels.tif");
        save_labels(&vol, &p).unwrap();
        assert_eq!(load_labels(&p).unwrap().0, vol);
    }
}
