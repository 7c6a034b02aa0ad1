//! Binary PPM/PGM images and masks.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use crate::dbsfnet::MaskImage;
use crate::error::{Error, Result};
use crate::ndtensor::Tensor;

/// Decoded samples, already stretched by the decoder to the full range of
/// their storage type (`full` is 255 or 65535).
struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    full: u32,
    maxval: u32,
    samples: Vec<u32>,
}

fn decode<R: BufRead>(r: R, source: &str) -> Result<Raster> {
    let dec = PnmDecoder::new(r).map_err(|e| Error::parse(source, e.to_string()))?;
    let maxval = dec.header().maximal_sample();
    let img = DynamicImage::from_decoder(dec).map_err(|e| Error::parse(source, e.to_string()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, full, samples): (usize, u32, Vec<u32>) = match img {
        DynamicImage::ImageLuma8(b) => (1, 255, b.into_raw().into_iter().map(u32::from).collect()),
        DynamicImage::ImageLuma16(b) => {
            (1, 65535, b.into_raw().into_iter().map(u32::from).collect())
        }
        DynamicImage::ImageRgb8(b) => (3, 255, b.into_raw().into_iter().map(u32::from).collect()),
        DynamicImage::ImageRgb16(b) => {
            (3, 65535, b.into_raw().into_iter().map(u32::from).collect())
        }
        other => {
            return Err(Error::parse(
                source,
                format!("unsupported pixel layout {:?}", other.color()),
            ))
        }
    };
    Ok(Raster {
        width,
        height,
        channels,
        full,
        maxval,
        samples,
    })
}

/// Reads a PPM (or PGM, replicated to three channels) as a `3 × H × W`
/// tensor scaled to `[0, 255]`.
pub fn read_image_from<R: BufRead>(r: R, source: &str) -> Result<Tensor> {
    let ras = decode(r, source)?;
    let plane = ras.width * ras.height;
    let k = 255.0 / ras.full as f64;
    let mut t = Tensor::image(3, ras.height, ras.width);
    for p in 0..plane {
        for c in 0..3 {
            let s = ras.samples[p * ras.channels + c.min(ras.channels - 1)];
            t.data_mut()[c * plane + p] = s as f64 * k;
        }
    }
    Ok(t)
}

/// Reads a single-channel PGM whose samples are `0` or `maxval`; anything
/// else is rejected.
pub fn read_mask_from<R: BufRead>(r: R, source: &str) -> Result<MaskImage> {
    let ras = decode(r, source)?;
    if ras.channels != 1 {
        return Err(Error::parse(source, "mask must be a single-channel PGM"));
    }
    let mut data = Vec::with_capacity(ras.samples.len());
    for &s in &ras.samples {
        match s {
            0 => data.push(0),
            v if v == ras.full => data.push(1),
            v => {
                let raw = (v as u64 * ras.maxval as u64) / ras.full as u64;
                return Err(Error::parse(
                    source,
                    format!("non-binary mask value {raw} (maxval {})", ras.maxval),
                ));
            }
        }
    }
    MaskImage::new(ras.height, ras.width, data)
}

fn encode<W: Write>(
    w: W,
    bytes: &[u8],
    width: usize,
    height: usize,
    color: ExtendedColorType,
    sub: PnmSubtype,
) -> Result<()> {
    PnmEncoder::new(w)
        .with_subtype(sub)
        .write_image(bytes, width as u32, height as u32, color)
        .map_err(|e| Error::Data(format!("encoding PNM: {e}")))
}

/// Writes a `3 × H × W` tensor as binary PPM; values are rounded and clamped
/// to `[0, 255]`.
pub fn write_image_to<W: Write>(w: W, image: &Tensor) -> Result<()> {
    let (c, h, wd) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(
            "write_image",
            format!("expected 3 channels, got {c}"),
        ));
    }
    let plane = h * wd;
    let mut bytes = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            bytes.push(image.data()[ch * plane + p].round().clamp(0.0, 255.0) as u8);
        }
    }
    encode(
        w,
        &bytes,
        wd,
        h,
        ExtendedColorType::Rgb8,
        PnmSubtype::Pixmap(SampleEncoding::Binary),
    )
}

/// Writes a mask as binary PGM with foreground 255.
pub fn write_mask_to<W: Write>(w: W, mask: &MaskImage) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    encode(
        w,
        &bytes,
        mask.width,
        mask.height,
        ExtendedColorType::L8,
        PnmSubtype::Graymap(SampleEncoding::Binary),
    )
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    read_image_from(open(path)?, &path.display().to_string())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskImage> {
    let path = path.as_ref();
    read_mask_from(open(path)?, &path.display().to_string())
}

pub fn save_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_image_to(&mut w, image)?;
    w.flush()?;
    Ok(())
}

pub fn save_mask(path: impl AsRef<Path>, mask: &MaskImage) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_mask_to(&mut w, mask)?;
    w.flush()?;
    Ok(())
}
