//! PNG raster I/O and crash-safe file writes.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::color::RgbImage;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("cannot read image {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("cannot write image {path}: {reason}")]
    Unwritable { path: PathBuf, reason: String },
}

/// Loads a PNG as 8-bit RGB; alpha and higher bit depths are dropped.
pub fn load_png(path: &Path) -> Result<RgbImage, ImageIoError> {
    let img = image::open(path).map_err(|e| ImageIoError::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(RgbImage::new(w as usize, h as usize, rgb.into_raw()).expect("image crate yields w*h*3 bytes"))
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, image::ImageError> {
    let mut out = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(
        encoder,
        image.data(),
        image.width() as u32,
        image.height() as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(out)
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<(), ImageIoError> {
    let unwritable = |reason: String| ImageIoError::Unwritable {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = encode_png(image).map_err(|e| unwritable(e.to_string()))?;
    write_atomic(path, &bytes).map_err(|e| unwritable(e.to_string()))
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

/// Writes `bytes` under a temporary name and renames into place, so readers
/// never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    write_atomic_with(path, |w| w.write_all(bytes))
}

/// Streaming variant of [`write_atomic`].
pub fn write_atomic_with<F>(path: &Path, fill: F) -> io::Result<()>
where
    F: FnOnce(&mut io::BufWriter<fs::File>) -> io::Result<()>,
{
    let tmp = temp_sibling(path);
    let result = (|| {
        let mut w = io::BufWriter::new(fs::File::create(&tmp)?);
        fill(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        Ok(())
    })();
    match result {
        Ok(()) => fs::rename(&tmp, path),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}
