//! Volume type and on-disk formats: the VOL1 container and a minimal
//! uncompressed NIfTI-1 reader.
//!
//! VOL1 layout (little-endian): magic `VOL1`, 3×u32 dims, 3×f32 spacing in
//! mm, then the row-major f32 payload.

use crate::error::{Error, Result};
use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// A 3D scalar grid with voxel spacing metadata. Data is row-major over
/// `shape = [nx, ny, nz]` (z fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "volume shape {:?} expects {} voxels, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("volume dims must be positive".to_string()));
        }
        if spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::shape("voxel spacing must be positive".to_string()));
        }
        Ok(Volume { shape, spacing, data })
    }

    pub fn zeros(shape: [usize; 3], spacing: [f32; 3]) -> Self {
        Volume { shape, spacing, data: vec![0.0; shape.iter().product()] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.idx(x, y, z)]
    }
}

const VOL1_MAGIC: &[u8; 4] = b"VOL1";

pub fn write_vol1(path: &Path, v: &Volume) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(VOL1_MAGIC)?;
    for &d in &v.shape {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &s in &v.spacing {
        w.write_f32::<LittleEndian>(s)?;
    }
    for &x in &v.data {
        w.write_f32::<LittleEndian>(x)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_vol1(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(format!("{}: truncated VOL1 header", path.display())))?;
    if &magic != VOL1_MAGIC {
        return Err(Error::format(format!("{}: bad VOL1 magic {:?}", path.display(), magic)));
    }
    let mut shape = [0usize; 3];
    for d in &mut shape {
        *d = r.read_u32::<LittleEndian>()? as usize;
    }
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        *s = r.read_f32::<LittleEndian>()?;
    }
    let n: usize = shape.iter().product();
    let mut data = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|_| Error::format(format!("{}: truncated VOL1 payload", path.display())))?;
    Ok(Volume::new(shape, spacing, data)?)
}

/// Minimal NIfTI-1 reader: uncompressed single-file (`.nii`), 3-D, float32 or
/// int16 data, magic `n+1` at byte 344. Both endiannesses are handled via the
/// `sizeof_hdr` field.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 348];
    r.read_exact(&mut header)
        .map_err(|_| Error::format(format!("{}: truncated NIfTI-1 header", path.display())))?;

    if &header[344..347] != b"n+1" {
        return Err(Error::format(format!(
            "{}: bad NIfTI-1 magic (expected \"n+1\" at offset 344)",
            path.display()
        )));
    }
    let sizeof_hdr_le = LittleEndian::read_i32(&header[0..4]);
    let swapped = match sizeof_hdr_le {
        348 => false,
        _ if sizeof_hdr_le.swap_bytes() == 348 => true,
        _ => {
            return Err(Error::format(format!(
                "{}: sizeof_hdr is {} in either byte order, expected 348",
                path.display(),
                sizeof_hdr_le
            )))
        }
    };
    let rd_i16 = |buf: &[u8]| {
        let v = LittleEndian::read_i16(buf);
        if swapped {
            v.swap_bytes()
        } else {
            v
        }
    };
    let rd_f32 = |buf: &[u8]| {
        if swapped {
            f32::from_bits(LittleEndian::read_u32(buf).swap_bytes())
        } else {
            LittleEndian::read_f32(buf)
        }
    };

    let ndim = rd_i16(&header[40..42]);
    if ndim != 3 {
        return Err(Error::Unsupported(format!(
            "{}: only 3-D NIfTI volumes are supported, dim[0] = {}",
            path.display(),
            ndim
        )));
    }
    let nx = rd_i16(&header[42..44]) as usize;
    let ny = rd_i16(&header[44..46]) as usize;
    let nz = rd_i16(&header[46..48]) as usize;
    let datatype = rd_i16(&header[70..72]);
    let pixdim = [
        rd_f32(&header[80..84]),
        rd_f32(&header[84..88]),
        rd_f32(&header[88..92]),
    ];
    let vox_offset = rd_f32(&header[108..112]) as usize;
    if vox_offset < 348 {
        return Err(Error::format(format!("{}: vox_offset {} < 348", path.display(), vox_offset)));
    }
    // skip the gap between header and payload (extensions)
    let mut gap = vec![0u8; vox_offset - 348];
    r.read_exact(&mut gap)
        .map_err(|_| Error::format(format!("{}: truncated before vox_offset", path.display())))?;

    let n = nx * ny * nz;
    // payload is column-major (x fastest); transpose to the row-major layout
    let colmajor: Vec<f32> = match datatype {
        16 => {
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)
                .map_err(|_| Error::format(format!("{}: truncated float32 payload", path.display())))?;
            raw.chunks_exact(4)
                .map(|c| {
                    if swapped {
                        f32::from_bits(LittleEndian::read_u32(c).swap_bytes())
                    } else {
                        LittleEndian::read_f32(c)
                    }
                })
                .collect()
        }
        4 => {
            let mut raw = vec![0u8; n * 2];
            r.read_exact(&mut raw)
                .map_err(|_| Error::format(format!("{}: truncated int16 payload", path.display())))?;
            raw.chunks_exact(2).map(|c| rd_i16(c) as f32).collect()
        }
        other => {
            return Err(Error::Unsupported(format!(
                "{}: NIfTI datatype {} not supported (float32=16 or int16=4 only)",
                path.display(),
                other
            )))
        }
    };
    let mut data = vec![0f32; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                data[(x * ny + y) * nz + z] = colmajor[(z * ny + y) * nx + x];
            }
        }
    }
    let spacing = [
        if pixdim[0] > 0.0 { pixdim[0] } else { 1.0 },
        if pixdim[1] > 0.0 { pixdim[1] } else { 1.0 },
        if pixdim[2] > 0.0 { pixdim[2] } else { 1.0 },
    ];
    Volume::new([nx, ny, nz], spacing, data)
}

/// Read a volume by file extension: `.nii` → NIfTI-1, anything else → VOL1.
pub fn read_volume(path: &Path) -> Result<Volume> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => read_nifti(path),
        _ => read_vol1(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vol1_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vol");
        let v = Volume::new([2, 3, 4], [1.5, 1.5, 1.5], (0..24).map(|i| i as f32 * 0.25).collect()).unwrap();
        write_vol1(&p, &v).unwrap();
        let v2 = read_vol1(&p).unwrap();
        assert_eq!(v, v2);
        let first = std::fs::read(&p).unwrap();
        write_vol1(&p, &v2).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
    }

    #[test]
    fn vol1_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vol");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(read_vol1(&p).is_err());
        let q = dir.path().join("trunc.vol");
        let v = Volume::new([4, 4, 4], [1.0; 3], vec![0.0; 64]).unwrap();
        write_vol1(&q, &v).unwrap();
        let bytes = std::fs::read(&q).unwrap();
        std::fs::write(&q, &bytes[..bytes.len() - 5]).unwrap();
        assert!(read_vol1(&q).is_err());
    }

    /// Build a NIfTI-1 file byte-by-byte from the standard header offsets;
    /// this is independent of the reader's own parsing tables.
    fn write_nifti_fixture(path: &Path, dims: [i16; 3], datatype: i16, payload: &[u8]) {
        let mut h = vec![0u8; 352]; // 348 header + 4 extension flag bytes
        h[0..4].copy_from_slice(&348i32.to_le_bytes()); // sizeof_hdr
        h[40..42].copy_from_slice(&3i16.to_le_bytes()); // dim[0]
        h[42..44].copy_from_slice(&dims[0].to_le_bytes());
        h[44..46].copy_from_slice(&dims[1].to_le_bytes());
        h[46..48].copy_from_slice(&dims[2].to_le_bytes());
        h[48..50].copy_from_slice(&1i16.to_le_bytes());
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        let bitpix: i16 = if datatype == 16 { 32 } else { 16 };
        h[72..74].copy_from_slice(&bitpix.to_le_bytes());
        h[80..84].copy_from_slice(&1.5f32.to_le_bytes()); // pixdim[1..3]
        h[84..88].copy_from_slice(&1.5f32.to_le_bytes());
        h[88..92].copy_from_slice(&1.5f32.to_le_bytes());
        h[108..112].copy_from_slice(&352f32.to_le_bytes()); // vox_offset
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(payload);
        std::fs::write(path, h).unwrap();
    }

    #[test]
    fn nifti_reads_float32_and_transposes_to_row_major() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        // 2x2x2, column-major payload: value encodes (x,y,z) as x + 10y + 100z
        let mut payload = Vec::new();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    payload.extend_from_slice(&((x + 10 * y + 100 * z) as f32).to_le_bytes());
                }
            }
        }
        write_nifti_fixture(&p, [2, 2, 2], 16, &payload);
        let v = read_nifti(&p).unwrap();
        assert_eq!(v.shape, [2, 2, 2]);
        assert_eq!(v.spacing, [1.5, 1.5, 1.5]);
        assert_eq!(v.at(1, 0, 1), 101.0);
        assert_eq!(v.at(0, 1, 0), 10.0);
    }

    #[test]
    fn nifti_rejects_bad_magic_and_unknown_datatype() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        let payload: Vec<u8> = (0..8i16).flat_map(|i| i.to_le_bytes()).collect();
        write_nifti_fixture(&p, [2, 2, 2], 4, &payload);
        assert!(read_nifti(&p).is_ok(), "int16 must be accepted");

        // corrupt the magic
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[344] = b'x';
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_nifti(&p).is_err());

        // unsupported datatype (float64 = 64)
        write_nifti_fixture(&p, [2, 2, 2], 64, &vec![0u8; 64]);
        match read_nifti(&p) {
            Err(Error::Unsupported(_)) => {}
            other => panic!("expected Unsupported, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn full_scan_geometry_voxel_count() {
        assert_eq!(113usize * 137 * 113, 1_749_353);
    }
}
