//! Exhaustive 256³ RGB look-up tables.
//!
//! Any pixel-wise color map can be baked into a [`Lut`]; applying it then costs
//! one indexed read per pixel. On disk a table is the 4-byte magic `SNL1`, a
//! version byte `0x01`, and the 256³ RGB output triples in index order
//! `((r * 256) + g) * 256 + b`.

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::color::RgbImage;
use crate::io::write_atomic_with;
use crate::stain::{StainMapping, TemplateParams};

pub const LUT_MAGIC: &[u8; 4] = b"SNL1";
pub const LUT_VERSION: u8 = 1;
pub const LUT_ENTRIES: usize = 256 * 256 * 256;
/// Header plus payload.
pub const LUT_FILE_BYTES: usize = 5 + 3 * LUT_ENTRIES;

#[derive(Debug, Error)]
pub enum LutError {
    #[error("not an SNL1 look-up table (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported look-up table version {0}")]
    BadVersion(u8),
    #[error("look-up table file is truncated")]
    TruncatedFile,
    #[error("look-up table file has trailing bytes")]
    TrailingData,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[inline]
pub fn lut_index(rgb: [u8; 3]) -> usize {
    ((rgb[0] as usize) << 16) | ((rgb[1] as usize) << 8) | rgb[2] as usize
}

#[derive(Clone, PartialEq, Eq)]
pub struct Lut {
    entries: Box<[u8]>,
}

impl std::fmt::Debug for Lut {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Lut").field("entries", &LUT_ENTRIES).finish()
    }
}

impl Lut {
    /// Evaluates `f` on every RGB value.
    pub fn bake<F>(f: F) -> Lut
    where
        F: Fn([u8; 3]) -> [u8; 3] + Sync,
    {
        let mut entries = vec![0u8; 3 * LUT_ENTRIES].into_boxed_slice();
        entries
            .par_chunks_mut(3 * 256 * 256)
            .enumerate()
            .for_each(|(r, plane)| {
                for (gb, out) in plane.chunks_exact_mut(3).enumerate() {
                    let rgb = [r as u8, (gb >> 8) as u8, (gb & 0xff) as u8];
                    out.copy_from_slice(&f(rgb));
                }
            });
        Lut { entries }
    }

    pub fn identity() -> Lut {
        Lut::bake(|rgb| rgb)
    }

    #[inline]
    pub fn get(&self, rgb: [u8; 3]) -> [u8; 3] {
        let i = 3 * lut_index(rgb);
        [self.entries[i], self.entries[i + 1], self.entries[i + 2]]
    }

    /// Raw payload in index order.
    pub fn as_bytes(&self) -> &[u8] {
        &self.entries
    }

    pub fn apply(&self, image: &RgbImage) -> RgbImage {
        let mut out = image.clone();
        out.data_mut().par_chunks_mut(3 * 4096).for_each(|chunk| {
            for px in chunk.chunks_exact_mut(3) {
                let i = 3 * lut_index([px[0], px[1], px[2]]);
                px.copy_from_slice(&self.entries[i..i + 3]);
            }
        });
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(LUT_MAGIC)?;
        w.write_all(&[LUT_VERSION])?;
        w.write_all(&self.entries)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Lut, LutError> {
        let mut header = [0u8; 5];
        read_exact_or_truncated(&mut r, &mut header)?;
        let magic = [header[0], header[1], header[2], header[3]];
        if &magic != LUT_MAGIC {
            return Err(LutError::BadMagic(magic));
        }
        if header[4] != LUT_VERSION {
            return Err(LutError::BadVersion(header[4]));
        }
        let mut entries = vec![0u8; 3 * LUT_ENTRIES].into_boxed_slice();
        read_exact_or_truncated(&mut r, &mut entries)?;
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(LutError::TrailingData);
        }
        Ok(Lut { entries })
    }
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), LutError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => LutError::TruncatedFile,
        _ => LutError::Io(e),
    })
}

/// Bakes the fixed-template Macenko reconstruction from `source` to `target`.
pub fn bake_lut(source_template: &TemplateParams, target_template: &TemplateParams) -> Lut {
    let mapping = StainMapping::new(source_template, target_template);
    Lut::bake(|rgb| mapping.map_pixel(rgb))
}

pub fn apply_lut(image: &RgbImage, lut: &Lut) -> RgbImage {
    lut.apply(image)
}

pub fn write_lut(lut: &Lut, path: &Path) -> Result<(), LutError> {
    write_atomic_with(path, |w| lut.write_to(w))?;
    Ok(())
}

pub fn read_lut(path: &Path) -> Result<Lut, LutError> {
    Lut::read_from(BufReader::new(File::open(path)?))
}
