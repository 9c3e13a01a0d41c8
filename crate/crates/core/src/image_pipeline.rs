//! PNG decode/encode, `[-1, 1]` normalization, bilinear resizing and dataset
//! ingestion.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, Rgb32FImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, validation, Error, Result};
use crate::nn::device;

/// A square RGB raster, channels-first, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Vec<f32>,
    size: usize,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    /// Builds an image from `3 * size * size` channels-first values.
    pub fn new(data: Vec<f32>, size: usize) -> Result<Self> {
        check_resolution(size)?;
        if data.len() != Self::CHANNELS * size * size {
            return validation(format!(
                "image data has {} values, expected 3x{size}x{size}",
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return validation(format!("image value {v} outside [-1, 1]"));
        }
        Ok(Self { data, size })
    }

    pub fn filled(value: f32, size: usize) -> Result<Self> {
        Self::new(vec![value; Self::CHANNELS * size * size], size)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.size + y) * self.size + x]
    }

    /// `[1, 3, H, W]` tensor of the requested dtype.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 3, self.size, self.size), &device())?.to_dtype(dtype)?)
    }

    /// Converts a `[3, H, W]` or `[1, 3, H, W]` tensor, clamping into range.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 if t.dims()[0] == 1 => t.squeeze(0)?,
            3 => t.clone(),
            _ => return validation(format!("expected a single 3xHxW image, got shape {:?}", t.dims())),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 || h != w {
            return validation(format!("expected 3xNxN image tensor, got {c}x{h}x{w}"));
        }
        let data = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect();
        Self::new(data, h)
    }

    /// Stacks images into an `[N, 3, H, W]` batch.
    pub fn batch(images: &[&ImageTensor], dtype: DType) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Validation("empty image batch".into()))?;
        if images.iter().any(|i| i.size != first.size) {
            return validation("images in a batch must share one resolution");
        }
        let data: Vec<f32> = images.iter().flat_map(|i| i.data.iter().copied()).collect();
        Ok(Tensor::from_vec(data, (images.len(), 3, first.size, first.size), &device())?.to_dtype(dtype)?)
    }

    /// Splits an `[N, 3, H, W]` batch.
    pub fn unbatch(t: &Tensor) -> Result<Vec<ImageTensor>> {
        (0..t.dims()[0]).map(|i| Self::from_tensor(&t.get(i)?)).collect()
    }

    fn to_rgb8(&self) -> RgbImage {
        let n = self.size;
        ImageBuffer::from_fn(n as u32, n as u32, |x, y| {
            let px = |c: usize| {
                let v = self.get(c, y as usize, x as usize);
                ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
            };
            Rgb([px(0), px(1), px(2)])
        })
    }

    /// Interleaved 8-bit RGB rows, `size * size * 3` bytes.
    pub fn to_rgb8_bytes(&self) -> Vec<u8> {
        self.to_rgb8().into_raw()
    }

    /// Inverse of [`ImageTensor::to_rgb8_bytes`], with the same mapping as the
    /// file decoder.
    pub fn from_rgb8_bytes(bytes: &[u8], size: usize) -> Result<Self> {
        check_resolution(size)?;
        if bytes.len() != 3 * size * size {
            return validation(format!("expected {} RGB bytes for {size}x{size}, got {}", 3 * size * size, bytes.len()));
        }
        let mut data = vec![0f32; 3 * size * size];
        for (i, px) in bytes.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * size * size + i] = (2.0 * (px[c] as f32 / 255.0) - 1.0).clamp(-1.0, 1.0);
            }
        }
        Self::new(data, size)
    }

    /// Encodes as an 8-bit PNG.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Validation(format!("png encode: {e}")))?;
        Ok(out.into_inner())
    }
}

pub fn check_resolution(resolution: usize) -> Result<()> {
    if resolution == 0 || !resolution.is_power_of_two() {
        return validation(format!("resolution {resolution} is not a positive power of two"));
    }
    Ok(())
}

/// Decodes PNG (or any format the decoder recognises) bytes into a
/// `resolution x resolution` image. `origin` is only used for error messages.
pub fn decode_image(bytes: &[u8], resolution: usize, origin: &Path) -> Result<ImageTensor> {
    check_resolution(resolution)?;
    let decoded = image::load_from_memory(bytes).map_err(|e| Error::Decode {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb: Rgb32FImage = decoded.to_rgb32f();
    let resized = if rgb.width() as usize == resolution && rgb.height() as usize == resolution {
        rgb
    } else {
        image::imageops::resize(&rgb, resolution as u32, resolution as u32, FilterType::Triangle)
    };
    let n = resolution;
    let mut data = vec![0f32; 3 * n * n];
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            // The decoder yields p/255; map to 2p/255 - 1.
            data[(c * n + y as usize) * n + x as usize] = (2.0 * px.0[c] - 1.0).clamp(-1.0, 1.0);
        }
    }
    ImageTensor::new(data, n)
}

pub fn load_image(path: impl AsRef<Path>, resolution: usize) -> Result<ImageTensor> {
    let path = path.as_ref();
    check_resolution(resolution)?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_image(&bytes, resolution, path)
}

/// Writes an 8-bit PNG; the write goes through a temporary file and a rename.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = img.to_png_bytes()?;
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct ImageDataset {
    items: Vec<ImageTensor>,
    manifest: Vec<ManifestEntry>,
}

impl ImageDataset {
    /// Builds an in-memory dataset; the manifest hashes the raw pixel data.
    pub fn from_images(items: Vec<ImageTensor>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyDataset(PathBuf::from("<memory>")));
        }
        let size = items[0].size();
        if items.iter().any(|i| i.size() != size) {
            return validation("all dataset images must share one resolution");
        }
        let manifest = items
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let bytes: Vec<u8> = img.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                ManifestEntry {
                    path: PathBuf::from(format!("<memory>/{i}")),
                    sha256: hex::encode(Sha256::digest(&bytes)),
                }
            })
            .collect();
        Ok(Self { items, manifest })
    }

    pub fn items(&self) -> &[ImageTensor] {
        &self.items
    }

    pub fn manifest(&self) -> &[ManifestEntry] {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.items[0].size()
    }

    /// JSON-lines manifest, one `{path, sha256}` object per row.
    pub fn manifest_jsonl(&self) -> String {
        self.manifest
            .iter()
            .map(|e| serde_json::to_string(e).expect("manifest entries serialize") + "\n")
            .collect()
    }

    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.manifest_jsonl().as_bytes())
    }
}

/// Loads every image in `dir` (non-recursive). Files are sorted by name,
/// then shuffled with `seed`, so the order depends only on the directory
/// contents and the seed. Any undecodable file fails the whole call.
pub fn ingest_dataset(dir: impl AsRef<Path>, resolution: usize, seed: u64) -> Result<ImageDataset> {
    let dir = dir.as_ref();
    check_resolution(resolution)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && !is_hidden(p))
        .collect();
    paths.sort();

    let mut loaded = Vec::new();
    let mut corrupt = Vec::new();
    for path in paths {
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        match decode_image(&bytes, resolution, &path) {
            Ok(img) => loaded.push((
                img,
                ManifestEntry {
                    path: path.clone(),
                    sha256: hex::encode(Sha256::digest(&bytes)),
                },
            )),
            Err(Error::Decode { message, .. }) => corrupt.push((path, message)),
            Err(e) => return Err(e),
        }
    }
    if !corrupt.is_empty() {
        return Err(Error::CorruptFiles(corrupt));
    }
    if loaded.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    loaded.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (items, manifest) = loaded.into_iter().unzip();
    Ok(ImageDataset { items, manifest })
}

fn is_hidden(p: &Path) -> bool {
    p.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with('.'))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_png(path: &Path, w: u32, h: u32, px: [u8; 3]) {
        RgbImage::from_pixel(w, h, Rgb(px)).save(path).unwrap();
    }

    #[test]
    fn black_and_white_map_to_range_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let black = dir.path().join("black.png");
        let white = dir.path().join("white.png");
        write_png(&black, 64, 64, [0, 0, 0]);
        write_png(&white, 64, 64, [255, 255, 255]);
        let b = load_image(&black, 64).unwrap();
        let w = load_image(&white, 64).unwrap();
        assert_eq!(b.data().len(), 3 * 64 * 64);
        assert!(b.data().iter().all(|&v| v == -1.0));
        assert!(w.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn raw_rgb_matches_png_path() {
        let bytes: Vec<u8> = (0..3 * 8 * 8).map(|i| (i * 37 % 256) as u8).collect();
        let img = ImageTensor::from_rgb8_bytes(&bytes, 8).unwrap();
        assert_eq!(img.to_rgb8_bytes(), bytes);
        let png = RgbImage::from_raw(8, 8, bytes.clone()).unwrap();
        let mut buf = std::io::Cursor::new(Vec::new());
        png.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        assert_eq!(decode_image(buf.get_ref(), 8, Path::new("mem")).unwrap(), img);
        assert!(ImageTensor::from_rgb8_bytes(&bytes[1..], 8).is_err());
    }

    #[test]
    fn constant_gray_survives_bilinear_upscale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gray.png");
        write_png(&p, 4, 4, [128, 128, 128]);
        let img = load_image(&p, 8).unwrap();
        let expected = 2.0 * 128.0 / 255.0 - 1.0;
        assert_eq!(img.size(), 8);
        for &v in img.data() {
            assert!((v as f64 - expected).abs() < 1e-6, "{v} vs {expected}");
        }
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image(dir.path().join("nope.png"), 64), Err(Error::NotFound(_))));
        let junk = dir.path().join("junk.png");
        fs::write(&junk, b"definitely not an image").unwrap();
        assert!(matches!(load_image(&junk, 64), Err(Error::Decode { .. })));
        let ok = dir.path().join("ok.png");
        write_png(&ok, 4, 4, [1, 2, 3]);
        assert!(matches!(load_image(&ok, 48), Err(Error::Validation(_))));
    }

    #[test]
    fn save_maps_endpoints_to_bytes() {
        let dir = tempfile::tempdir().unwrap();
        for (value, byte) in [(-1.0f32, 0u8), (1.0, 255)] {
            let p = dir.path().join(format!("{byte}.png"));
            save_image(&ImageTensor::filled(value, 16).unwrap(), &p).unwrap();
            let back = image::open(&p).unwrap().to_rgb8();
            assert!(back.pixels().all(|px| px.0 == [byte; 3]));
        }
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let img = ImageTensor::filled(0.0, 4).unwrap();
        let err = save_image(&img, "/nonexistent-dir/x/y.png").unwrap_err();
        assert!(matches!(err, Error::Io { .. } | Error::NotFound(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn save_load_round_trip_within_quantization(seed in any::<u64>(), log_size in 1usize..5) {
            use rand::Rng;
            let size = 1 << log_size;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..3 * size * size).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
            let img = ImageTensor::new(data, size).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("rt.png");
            save_image(&img, &p).unwrap();
            let back = load_image(&p, size).unwrap();
            let max_err = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
            // Half a quantization step in [0,255] is 1/255 in [-1,1].
            prop_assert!(max_err <= 1.0 / 255.0 + 1e-6, "max error {max_err}");
        }
    }

    #[test]
    fn ingest_is_deterministic_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..5u8 {
            write_png(&dir.path().join(format!("img{i}.png")), 8, 8, [i * 40, 10, 200 - i * 30]);
        }
        let a = ingest_dataset(dir.path(), 8, 7).unwrap();
        let b = ingest_dataset(dir.path(), 8, 7).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a.manifest(), b.manifest());
        assert_eq!(a.items(), b.items());
        let rows: Vec<ManifestEntry> = a
            .manifest_jsonl()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.sha256.len() == 64));

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(ingest_dataset(empty.path(), 8, 7), Err(Error::EmptyDataset(_))));

        let mixed = tempfile::tempdir().unwrap();
        write_png(&mixed.path().join("a.png"), 8, 8, [1, 1, 1]);
        write_png(&mixed.path().join("b.png"), 8, 8, [2, 2, 2]);
        fs::write(mixed.path().join("broken.png"), b"\x89PNG garbage").unwrap();
        match ingest_dataset(mixed.path(), 8, 7) {
            Err(Error::CorruptFiles(files)) => {
                assert_eq!(files.len(), 1);
                assert!(files[0].0.ends_with("broken.png"));
            }
            other => panic!("expected corrupt-file error, got {other:?}"),
        }
    }
}
