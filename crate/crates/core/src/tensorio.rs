//! Data model and bit-exact file I/O for tensors, images, and vessel masks.
//!
//! Tensors use a minimal self-describing format: magic `TNSR`, a `u32` rank,
//! `rank` little-endian `u32` dims, then the row-major `f32` payload, also
//! little-endian. Images are ingested from PNG only; vessel masks are
//! 1-channel PNGs thresholded at 0.5.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

pub const TENSOR_MAGIC: [u8; 4] = *b"TNSR";

const PNG_SIGNATURE: [u8; 8] = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a];

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("bad magic bytes (expected \"TNSR\")")]
    BadMagic,
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("non-finite value at flat index {index}")]
    NonFiniteValue { index: usize },
    #[error("tensor dims {dims:?} imply {expected} values, data has {found}")]
    ShapeMismatch {
        dims: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("tensor dims must be positive, got {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("image channel count must be 1 or 3, got {0}")]
    BadChannelCount(usize),
    #[error("image is already grayscale")]
    AlreadyGrayscale,
    #[error("not a PNG file")]
    NotPng,
    #[error("image decode: {0}")]
    Decode(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

type Result<T> = std::result::Result<T, TensorIoError>;

/// Dense row-major float tensor. Holds heatmap channels (rank 2, `[h, w]`),
/// heatmap stacks (rank 3, `[c, h, w]`) and dense descriptor maps
/// (rank 3, `[h, w, d]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(TensorIoError::ZeroDim(dims));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorIoError::ShapeMismatch {
                expected,
                found: data.len(),
                dims,
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorIoError::NonFiniteValue { index });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, vec![0.0; len])
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Element of a rank-2 tensor indexed as `[row, col]`.
    pub fn at2(&self, row: usize, col: usize) -> f32 {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.dims[1] + col]
    }

    /// Element of a rank-3 tensor indexed as `[i, j, k]`.
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f32 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&TENSOR_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != TENSOR_MAGIC {
            return Err(TensorIoError::BadMagic);
        }
        let need = |expected: usize| -> Result<()> {
            if bytes.len() < expected {
                Err(TensorIoError::TruncatedFile {
                    expected,
                    found: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(8)?;
        let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        need(8 + 4 * rank)?;
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            let off = 8 + 4 * i;
            dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
        }
        if dims.contains(&0) {
            return Err(TensorIoError::ZeroDim(dims));
        }
        let count: usize = dims.iter().product();
        let payload = 8 + 4 * rank;
        need(payload + 4 * count)?;
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let off = payload + 4 * i;
            data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        }
        Self::new(dims, data)
    }
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Tensor::from_bytes(&fs::read(path)?)
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, tensor.to_bytes())?;
    Ok(())
}

/// Interleaved row-major float image with values in `[0, 1]` and 1 or 3
/// channels. Values are clamped on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(TensorIoError::BadChannelCount(channels));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(TensorIoError::ShapeMismatch {
                dims: vec![height, width, channels],
                expected,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorIoError::NonFiniteValue { index });
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::new(
            width,
            height,
            channels,
            vec![0.0; width * height * channels],
        )
        .expect("zero image is valid")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f32) {
        self.data[(y * self.width + x) * self.channels + c] = value.clamp(0.0, 1.0);
    }
}

/// BT.601 luma conversion of a 3-channel image.
///
/// A 1-channel input is rejected with [`TensorIoError::AlreadyGrayscale`] so
/// callers can notice redundant conversions; [`ensure_grayscale`] is the
/// pass-through variant used by the pipeline.
pub fn to_grayscale(img: &Image) -> Result<Image> {
    match img.channels {
        1 => Err(TensorIoError::AlreadyGrayscale),
        3 => {
            let mut out = Vec::with_capacity(img.width * img.height);
            for px in img.data.chunks_exact(3) {
                out.push(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
            }
            Image::new(img.width, img.height, 1, out)
        }
        other => Err(TensorIoError::BadChannelCount(other)),
    }
}

/// Like [`to_grayscale`] but passes 1-channel images through unchanged.
pub fn ensure_grayscale(img: &Image) -> Image {
    match to_grayscale(img) {
        Ok(gray) => gray,
        Err(TensorIoError::AlreadyGrayscale) => img.clone(),
        Err(_) => unreachable!("channel invariant enforced on construction"),
    }
}

pub fn load_png(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || bytes[..8] != PNG_SIGNATURE {
        return Err(TensorIoError::NotPng);
    }
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?;
    let gray = matches!(
        decoded.color(),
        image::ColorType::L8
            | image::ColorType::L16
            | image::ColorType::La8
            | image::ColorType::La16
    );
    if gray {
        let buf = decoded.to_luma32f();
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        Image::new(w, h, 1, buf.into_raw())
    } else {
        let buf = decoded.to_rgb32f();
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        Image::new(w, h, 3, buf.into_raw())
    }
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let to_u8 = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    match img.channels {
        1 => {
            let buf: Vec<u8> = img.data.iter().copied().map(to_u8).collect();
            let out = image::GrayImage::from_raw(img.width as u32, img.height as u32, buf)
                .expect("buffer sized by construction");
            out.save_with_format(path, image::ImageFormat::Png)?;
        }
        _ => {
            let buf: Vec<u8> = img.data.iter().copied().map(to_u8).collect();
            let out = image::RgbImage::from_raw(img.width as u32, img.height as u32, buf)
                .expect("buffer sized by construction");
            out.save_with_format(path, image::ImageFormat::Png)?;
        }
    }
    Ok(())
}

/// Boolean vessel-segmentation mask with the same dims as the image it
/// annotates.
#[derive(Debug, Clone, PartialEq)]
pub struct VesselMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl VesselMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(TensorIoError::ShapeMismatch {
                dims: vec![height, width],
                expected: width * height,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Threshold a 1-channel image at 0.5.
    pub fn from_image(img: &Image) -> Result<Self> {
        if img.channels() != 1 {
            return Err(TensorIoError::BadChannelCount(img.channels()));
        }
        let data = img.data().iter().map(|&v| v >= 0.5).collect();
        Self::new(img.width(), img.height(), data)
    }

    pub fn to_image(&self) -> Image {
        let data = self
            .data
            .iter()
            .map(|&v| if v { 1.0 } else { 0.0 })
            .collect();
        Image::new(self.width, self.height, 1, data).expect("mask image is valid")
    }
}

pub fn load_mask(path: &Path) -> Result<VesselMask> {
    let img = load_png(path)?;
    let gray = ensure_grayscale(&img);
    VesselMask::from_image(&gray)
}

pub fn save_mask(path: &Path, mask: &VesselMask) -> Result<()> {
    save_png(path, &mask.to_image())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_tensor_reads_back() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let parsed = Tensor::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(parsed.dims(), &[2, 2]);
        assert_eq!(parsed.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(parsed.at2(0, 0), 1.0);
        assert_eq!(parsed.at2(0, 1), 0.0);
    }

    #[test]
    fn file_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tns");
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, 9.5, -0.125]).unwrap();
        write_tensor(&path, &t).unwrap();
        let first = fs::read(&path).unwrap();
        let read = read_tensor(&path).unwrap();
        assert_eq!(read, t);
        write_tensor(&path, &read).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = Tensor::new(vec![1], vec![1.0]).unwrap().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Tensor::from_bytes(&bytes),
            Err(TensorIoError::BadMagic)
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .to_bytes();
        assert!(matches!(
            Tensor::from_bytes(&bytes[..bytes.len() - 3]),
            Err(TensorIoError::TruncatedFile { .. })
        ));
    }

    #[test]
    fn nan_payload_rejected() {
        let mut bytes = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().to_bytes();
        let nan = f32::NAN.to_le_bytes();
        let off = bytes.len() - 4;
        bytes[off..].copy_from_slice(&nan);
        assert!(matches!(
            Tensor::from_bytes(&bytes),
            Err(TensorIoError::NonFiniteValue { index: 1 })
        ));
    }

    #[test]
    fn grayscale_known_values() {
        let img = Image::new(
            3,
            1,
            3,
            vec![
                1.0, 1.0, 1.0, // white
                1.0, 0.0, 0.0, // red
                0.5, 0.5, 0.5, // gray fixed point
            ],
        )
        .unwrap();
        let gray = to_grayscale(&img).unwrap();
        assert!((gray.get(0, 0, 0) - 1.0).abs() < 1e-6);
        assert!((gray.get(1, 0, 0) - 0.299).abs() < 1e-6);
        assert!((gray.get(2, 0, 0) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn grayscale_input_flagged() {
        let img = Image::new(1, 1, 1, vec![0.25]).unwrap();
        assert!(matches!(
            to_grayscale(&img),
            Err(TensorIoError::AlreadyGrayscale)
        ));
        assert_eq!(ensure_grayscale(&img), img);
    }

    #[test]
    fn non_png_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        fs::write(&path, b"definitely not a png").unwrap();
        assert!(matches!(load_png(&path), Err(TensorIoError::NotPng)));
    }

    #[test]
    fn png_roundtrip_preserves_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = Image::new(2, 2, 3, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.size(), (2, 2));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mask = VesselMask::new(3, 2, vec![true, false, true, false, false, true]).unwrap();
        save_mask(&path, &mask).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);
    }

    fn tensor_strategy() -> impl Strategy<Value = Tensor> {
        (1usize..=4)
            .prop_flat_map(|rank| proptest::collection::vec(1usize..=64, rank))
            .prop_filter("bounded element count", |dims| {
                dims.iter().product::<usize>() <= 4096
            })
            .prop_flat_map(|dims| {
                let count = dims.iter().product::<usize>();
                proptest::collection::vec(-1e6f32..1e6, count)
                    .prop_map(move |data| Tensor::new(dims.clone(), data).unwrap())
            })
    }

    proptest! {
        #[test]
        fn read_write_identity(t in tensor_strategy()) {
            let parsed = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(parsed, t);
        }

        #[test]
        fn grayscale_stays_in_unit_range(
            px in proptest::collection::vec(0.0f32..=1.0, 3 * 16)
        ) {
            let img = Image::new(4, 4, 3, px).unwrap();
            let gray = to_grayscale(&img).unwrap();
            prop_assert!(gray.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
