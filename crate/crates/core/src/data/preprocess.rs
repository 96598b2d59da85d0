//! Intensity scaling and train-time augmentation.

use super::volume::Volume;
use rand::Rng;

/// Min-max rescale to [0,1]. A constant volume maps to all zeros (with a
/// warning) so degenerate synthetic configs keep the pipeline alive.
pub fn minmax_scale(v: &Volume) -> Volume {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &x in &v.data {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if hi <= lo {
        log::warn!("minmax_scale: constant volume, mapping to all zeros");
        return Volume { shape: v.shape, spacing: v.spacing, data: vec![0.0; v.data.len()] };
    }
    let inv = 1.0 / (hi - lo);
    Volume {
        shape: v.shape,
        spacing: v.spacing,
        data: v.data.iter().map(|&x| (x - lo) * inv).collect(),
    }
}

/// Random rigid augmentation: per-axis rotation in [-max_deg, max_deg] and
/// per-axis translation in [-max_mm, max_mm] (converted to voxels via
/// spacing), trilinear resampling with zero fill, clamped to [0,1].
pub const AUGMENT_MAX_DEG: f64 = 8.0;
pub const AUGMENT_MAX_MM: f64 = 8.0;

pub fn augment<R: Rng>(v: &Volume, rng: &mut R) -> Volume {
    let angles = [
        rng.random_range(-AUGMENT_MAX_DEG..=AUGMENT_MAX_DEG).to_radians(),
        rng.random_range(-AUGMENT_MAX_DEG..=AUGMENT_MAX_DEG).to_radians(),
        rng.random_range(-AUGMENT_MAX_DEG..=AUGMENT_MAX_DEG).to_radians(),
    ];
    let shift_vox = [
        rng.random_range(-AUGMENT_MAX_MM..=AUGMENT_MAX_MM) / v.spacing[0] as f64,
        rng.random_range(-AUGMENT_MAX_MM..=AUGMENT_MAX_MM) / v.spacing[1] as f64,
        rng.random_range(-AUGMENT_MAX_MM..=AUGMENT_MAX_MM) / v.spacing[2] as f64,
    ];
    transform(v, angles, shift_vox)
}

/// Rigid transform with fixed angles (radians, per axis) and translation in
/// voxels. Rotation is about the volume center; translation is applied after
/// rotation. Output voxels falling outside the input are zero.
pub fn transform(v: &Volume, angles: [f64; 3], shift_vox: [f64; 3]) -> Volume {
    let rot = rotation_matrix(angles);
    // inverse of the rotation is its transpose
    let inv = [
        [rot[0][0], rot[1][0], rot[2][0]],
        [rot[0][1], rot[1][1], rot[2][1]],
        [rot[0][2], rot[1][2], rot[2][2]],
    ];
    let [nx, ny, nz] = v.shape;
    let c = [
        (nx as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nz as f64 - 1.0) / 2.0,
    ];
    let mut out = vec![0f32; v.data.len()];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let q = [
                    x as f64 - c[0] - shift_vox[0],
                    y as f64 - c[1] - shift_vox[1],
                    z as f64 - c[2] - shift_vox[2],
                ];
                let p = [
                    inv[0][0] * q[0] + inv[0][1] * q[1] + inv[0][2] * q[2] + c[0],
                    inv[1][0] * q[0] + inv[1][1] * q[1] + inv[1][2] * q[2] + c[1],
                    inv[2][0] * q[0] + inv[2][1] * q[1] + inv[2][2] * q[2] + c[2],
                ];
                let val = trilinear(v, p);
                out[(x * ny + y) * nz + z] = val.clamp(0.0, 1.0);
            }
        }
    }
    Volume { shape: v.shape, spacing: v.spacing, data: out }
}

fn rotation_matrix(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (sa, ca) = angles[0].sin_cos();
    let (sb, cb) = angles[1].sin_cos();
    let (sc, cc) = angles[2].sin_cos();
    // Rz(c) * Ry(b) * Rx(a)
    [
        [cb * cc, sa * sb * cc - ca * sc, ca * sb * cc + sa * sc],
        [cb * sc, sa * sb * sc + ca * cc, ca * sb * sc - sa * cc],
        [-sb, sa * cb, ca * cb],
    ]
}

fn trilinear(v: &Volume, p: [f64; 3]) -> f32 {
    let [nx, ny, nz] = v.shape;
    let x0 = p[0].floor();
    let y0 = p[1].floor();
    let z0 = p[2].floor();
    let (fx, fy, fz) = (p[0] - x0, p[1] - y0, p[2] - z0);
    let mut acc = 0.0f64;
    for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
        if wx == 0.0 {
            continue;
        }
        let xi = x0 as i64 + dx;
        if xi < 0 || xi >= nx as i64 {
            continue;
        }
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            let yi = y0 as i64 + dy;
            if yi < 0 || yi >= ny as i64 {
                continue;
            }
            for (dz, wz) in [(0i64, 1.0 - fz), (1, fz)] {
                if wz == 0.0 {
                    continue;
                }
                let zi = z0 as i64 + dz;
                if zi < 0 || zi >= nz as i64 {
                    continue;
                }
                acc += wx * wy * wz * v.at(xi as usize, yi as usize, zi as usize) as f64;
            }
        }
    }
    acc as f32
}
