//! Binary PPM (P6) and PGM (P5) files with 8-bit samples.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, DynamicImage, ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};

/// An 8-bit image with `channels` interleaved samples per pixel (1 or 3).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Image {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        debug_assert_eq!(data.len(), 3 * width * height);
        Image {
            width,
            height,
            channels: 3,
            data,
        }
    }

    /// Writes P6 for colour images and P5 for grey ones.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let (subtype, color) = if self.channels == 3 {
            (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
        } else {
            (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
        };
        PnmEncoder::new(BufWriter::new(file))
            .with_subtype(subtype)
            .write_image(&self.data, self.width as u32, self.height as u32, color)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let dec = PnmDecoder::new(BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))?;
        let img = DynamicImage::from_decoder(dec).map_err(|e| Error::format(path, e.to_string()))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img.color() {
            ColorType::Rgb8 => Ok(Image::rgb(w, h, img.into_rgb8().into_raw())),
            ColorType::L8 => Ok(Image::gray(w, h, img.into_luma8().into_raw())),
            c => Err(Error::format(path, format!("unsupported sample layout {c:?}"))),
        }
    }

    pub fn read_gray(path: &Path) -> Result<Self> {
        let img = Self::read(path)?;
        if img.channels != 1 {
            return Err(Error::format(path, "expected a greymap (P5)"));
        }
        Ok(img)
    }

    pub fn read_rgb(path: &Path) -> Result<Self> {
        let img = Self::read(path)?;
        if img.channels != 3 {
            return Err(Error::format(path, "expected a pixmap (P6)"));
        }
        Ok(img)
    }
}
