//! `CNV1` checkpoints: magic, version byte, class count, then for every weight
//! layer its kernel dims `(kh, kw, cin, cout)` followed by the kernel and bias
//! as little-endian `f32`. All integers are little-endian `u32`.

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;

use super::spec::{ConvParams, NetworkParams, NetworkSpec};
use super::ConvNetError;
use crate::io::write_atomic_with;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CNV1";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint<W: Write>(spec: &NetworkSpec, params: &NetworkParams<f32>, mut w: W) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&(spec.num_classes as u32).to_le_bytes())?;
    for (conv, p) in spec.convs().zip(&params.layers) {
        for d in [conv.kernel, conv.kernel, conv.in_channels, conv.out_channels] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.kernel.iter().chain(&p.bias) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ConvNetError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ConvNetError::TruncatedFile,
        _ => ConvNetError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize, ConvNetError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>, ConvNetError> {
    let mut bytes = vec![0u8; n * 4];
    read_exact(r, &mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Reads a checkpoint of the canonical topology (any layer widths).
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(NetworkSpec, NetworkParams<f32>), ConvNetError> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ConvNetError::BadMagic(magic));
    }
    let mut version = [0u8; 1];
    read_exact(&mut r, &mut version)?;
    if version[0] != CHECKPOINT_VERSION {
        return Err(ConvNetError::BadVersion(version[0]));
    }
    let num_classes = read_u32(&mut r)?;
    // Placeholder widths; the real ones are read layer by layer below.
    let template = NetworkSpec::with_widths(num_classes.max(2), [1; 6])?;
    if num_classes < 2 {
        return Err(ConvNetError::InvalidClassCount(num_classes));
    }

    let mut widths = [0usize; 6];
    let mut layers = Vec::new();
    let mut prev_out = 3;
    for (i, conv) in template.convs().enumerate() {
        let dims = [
            read_u32(&mut r)?,
            read_u32(&mut r)?,
            read_u32(&mut r)?,
            read_u32(&mut r)?,
        ];
        let [kh, kw, cin, cout] = dims;
        let last = i == 6;
        let ok =
            kh == conv.kernel && kw == conv.kernel && cin == prev_out && cout > 0 && (!last || cout == num_classes);
        if !ok {
            return Err(ConvNetError::ShapeMismatch(format!(
                "weight layer {i} has dims {dims:?}"
            )));
        }
        if !last {
            widths[i] = cout;
        }
        prev_out = cout;
        let kernel = read_f32s(&mut r, kh * kw * cin * cout)?;
        let bias = read_f32s(&mut r, cout)?;
        layers.push(ConvParams { kernel, bias });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(ConvNetError::ShapeMismatch(
            "trailing bytes after the last weight layer".into(),
        ));
    }
    let spec = NetworkSpec::with_widths(num_classes, widths)?;
    Ok((spec, NetworkParams { layers }))
}

pub fn save_checkpoint(spec: &NetworkSpec, params: &NetworkParams<f32>, path: &Path) -> Result<(), ConvNetError> {
    write_atomic_with(path, |w| write_checkpoint(spec, params, w))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkSpec, NetworkParams<f32>), ConvNetError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnet::{forward, Tensor};

    fn small() -> (NetworkSpec, NetworkParams<f32>) {
        let spec = NetworkSpec::with_widths(4, [3, 4, 5, 6, 7, 8]).unwrap();
        let params = NetworkParams::he_init(&spec, 12);
        (spec, params)
    }

    fn bytes_of(spec: &NetworkSpec, params: &NetworkParams<f32>) -> Vec<u8> {
        let mut out = Vec::new();
        write_checkpoint(spec, params, &mut out).unwrap();
        out
    }

    #[test]
    fn round_trip_preserves_forward_output() {
        let (spec, params) = small();
        let bytes = bytes_of(&spec, &params);
        assert_eq!(bytes.len(), 9 + 7 * 16 + 4 * spec.parameter_count());
        let (spec2, params2) = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(params2, params);
        let input = Tensor::<f32>::from_vec(
            1,
            150,
            150,
            3,
            (0..150 * 150 * 3).map(|i| (i % 255) as f32 / 255.0).collect(),
        );
        let a = forward(&spec, &params, &input).unwrap();
        let b = forward(&spec2, &params2, &input).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (spec, params) = small();
        let bytes = bytes_of(&spec, &params);

        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(read_checkpoint(&bad[..]), Err(ConvNetError::BadMagic(_))));

        assert!(matches!(
            read_checkpoint(&bytes[..bytes.len() - 10]),
            Err(ConvNetError::TruncatedFile)
        ));
        assert!(matches!(
            read_checkpoint(&bytes[..30]),
            Err(ConvNetError::TruncatedFile)
        ));

        let mut bad = bytes.clone();
        // first layer kernel height
        bad[9..13].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(read_checkpoint(&bad[..]), Err(ConvNetError::ShapeMismatch(_))));

        let mut long = bytes;
        long.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            read_checkpoint(&long[..]),
            Err(ConvNetError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let (spec, params) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cnv");
        save_checkpoint(&spec, &params, &path).unwrap();
        let (s, p) = load_checkpoint(&path).unwrap();
        assert_eq!((s, p), (spec, params));
    }
}
