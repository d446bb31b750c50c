//! Input featurizations: 1D Fourier time basis, positional encoding,
//! real spherical harmonics, and the multi-resolution 3D hash grid.

use crate::geom::Scalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EncodingError {
    #[error("time {0} outside normalized range [-1, 1]")]
    OutOfRangeTime(f64),
    #[error("direction norm {0} is not unit")]
    NotUnitVector(f64),
    #[error("hash grid config invalid: {0}")]
    BadConfig(String),
}

/// Conventional primes for 3D spatial hashing.
pub const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

/// Fourier time basis `F(t)` with linearly increasing log-scale frequencies
/// and a leading constant term.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FourierBasisConfig {
    pub num_frequencies: usize,
}

impl Default for FourierBasisConfig {
    fn default() -> Self {
        FourierBasisConfig { num_frequencies: 6 }
    }
}

impl FourierBasisConfig {
    pub fn output_dim(&self) -> usize {
        2 * self.num_frequencies + 1
    }
}

/// `[1, sin(2^0 π t), cos(2^0 π t), …, sin(2^{K-1} π t), cos(2^{K-1} π t)]`.
pub fn fourier_basis(t_norm: f64, cfg: &FourierBasisConfig) -> Result<Vec<f64>, EncodingError> {
    if t_norm.abs() > 1.0 + 1e-9 {
        return Err(EncodingError::OutOfRangeTime(t_norm));
    }
    let mut out = Vec::with_capacity(cfg.output_dim());
    out.push(1.0);
    for k in 0..cfg.num_frequencies {
        let arg = (1u64 << k) as f64 * std::f64::consts::PI * t_norm;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Per component: `sin(2^ℓ π x), cos(2^ℓ π x)` for `ℓ = 0…L-1`.
/// Output layout groups all frequencies of one input component together.
pub fn positional_encoding(x: &[f64], num_levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * num_levels * x.len());
    for &c in x {
        for l in 0..num_levels {
            let arg = (1u64 << l) as f64 * std::f64::consts::PI * c;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

pub const fn positional_encoding_dim(input_dim: usize, num_levels: usize) -> usize {
    2 * num_levels * input_dim
}

/// Real spherical harmonics basis up to `degree` (degree² values), written
/// generically so dual numbers can extract exact Jacobians.
pub fn sh_basis_generic<S: Scalar>(x: S, y: S, z: S, degree: usize, out: &mut [S]) {
    debug_assert!(degree >= 1 && degree <= 4);
    debug_assert_eq!(out.len(), degree * degree);
    out[0] = S::from_f64(0.28209479177387814);
    if degree < 2 {
        return;
    }
    let c1 = S::from_f64(0.4886025119029199);
    out[1] = c1 * y;
    out[2] = c1 * z;
    out[3] = c1 * x;
    if degree < 3 {
        return;
    }
    let c2a = S::from_f64(1.0925484305920792);
    let c2b = S::from_f64(0.31539156525252005);
    let c2c = S::from_f64(0.5462742152960396);
    let one = S::from_f64(1.0);
    let three = S::from_f64(3.0);
    out[4] = c2a * x * y;
    out[5] = c2a * y * z;
    out[6] = c2b * (three * z * z - one);
    out[7] = c2a * x * z;
    out[8] = c2c * (x * x - y * y);
    if degree < 4 {
        return;
    }
    let c3a = S::from_f64(0.5900435899266435);
    let c3b = S::from_f64(2.890611442640554);
    let c3c = S::from_f64(0.4570457994644658);
    let c3d = S::from_f64(0.3731763325901154);
    let c3e = S::from_f64(1.445305721320277);
    let five = S::from_f64(5.0);
    out[9] = c3a * y * (three * x * x - y * y);
    out[10] = c3b * x * y * z;
    out[11] = c3c * y * (five * z * z - one);
    out[12] = c3d * z * (five * z * z - three);
    out[13] = c3c * x * (five * z * z - one);
    out[14] = c3e * z * (x * x - y * y);
    out[15] = c3a * x * (x * x - three * y * y);
}

/// Spherical harmonics encoding of a unit direction.
pub fn sh_encoding(d: &[f64; 3], degree: usize) -> Result<Vec<f64>, EncodingError> {
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if (norm - 1.0).abs() > 1e-4 {
        return Err(EncodingError::NotUnitVector(norm));
    }
    let mut out = vec![0.0; degree * degree];
    sh_basis_generic(d[0], d[1], d[2], degree, &mut out);
    Ok(out)
}

/// Multi-resolution hash grid layout. The table for one grid holds
/// `num_levels * 2^table_size_log2` rows of `features_per_entry` values.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub num_levels: usize,
    pub base_resolution: usize,
    pub per_level_scale: f64,
    pub table_size_log2: usize,
    pub features_per_entry: usize,
}

impl HashGridConfig {
    pub fn static_default() -> Self {
        HashGridConfig {
            num_levels: 12,
            base_resolution: 16,
            per_level_scale: 1.45,
            table_size_log2: 17,
            features_per_entry: 2,
        }
    }

    pub fn proposal_default() -> Self {
        HashGridConfig {
            num_levels: 6,
            base_resolution: 16,
            per_level_scale: 1.75,
            table_size_log2: 15,
            features_per_entry: 1,
        }
    }

    pub fn table_rows(&self) -> usize {
        self.num_levels << self.table_size_log2
    }

    pub fn output_dim(&self) -> usize {
        self.num_levels * self.features_per_entry
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.per_level_scale.powi(level as i32)).floor() as usize
    }

    pub fn validate(&self) -> Result<(), EncodingError> {
        if self.num_levels == 0 || self.features_per_entry == 0 {
            return Err(EncodingError::BadConfig("empty grid".into()));
        }
        let mut prev = 0usize;
        for l in 0..self.num_levels {
            let r = self.level_resolution(l);
            if r <= prev {
                return Err(EncodingError::BadConfig(format!(
                    "resolutions not strictly increasing at level {l}"
                )));
            }
            prev = r;
        }
        Ok(())
    }

    /// Table slot for an integer corner at `level`.
    #[inline]
    pub fn hash_corner(&self, level: usize, ix: u64, iy: u64, iz: u64) -> usize {
        let mask = (1u64 << self.table_size_log2) - 1;
        let h = ix
            .wrapping_mul(HASH_PRIMES[0])
            ^ iy.wrapping_mul(HASH_PRIMES[1])
            ^ iz.wrapping_mul(HASH_PRIMES[2]);
        (level << self.table_size_log2) + (h & mask) as usize
    }
}

/// Per-query trilinear interpolation data for one level: the 8 touched
/// table rows and their weights, plus the weight gradients w.r.t. the
/// position in the `[-2, 2]` input domain.
pub struct CornerSet {
    pub rows: [usize; 8],
    pub weights: [f64; 8],
    /// d(weight)/d(x_domain) per corner and axis.
    pub weight_grads: [[f64; 3]; 8],
}

/// Computes the 8 corners for `x` (components in the contracted `[-2, 2]`
/// domain, mapped internally to `[0, 1]`) at `level`.
pub fn corner_set(cfg: &HashGridConfig, level: usize, x: [f64; 3]) -> CornerSet {
    let res = cfg.level_resolution(level) as f64;
    // domain [-2,2] -> [0,1] -> grid coordinates
    let mut cell = [0u64; 3];
    let mut frac = [0.0f64; 3];
    // d(grid coord)/d(x_domain)
    let dgrid = res / 4.0;
    for a in 0..3 {
        let u = ((x[a] + 2.0) / 4.0).clamp(0.0, 1.0);
        let g = (u * res).min(res - 1e-9).max(0.0);
        cell[a] = g.floor() as u64;
        frac[a] = g - g.floor();
    }
    let mut rows = [0usize; 8];
    let mut weights = [0.0f64; 8];
    let mut weight_grads = [[0.0f64; 3]; 8];
    for c in 0..8 {
        let dx = (c & 1) as u64;
        let dy = ((c >> 1) & 1) as u64;
        let dz = ((c >> 2) & 1) as u64;
        rows[c] = cfg.hash_corner(level, cell[0] + dx, cell[1] + dy, cell[2] + dz);
        let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
        let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
        let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
        weights[c] = wx * wy * wz;
        let sx = if dx == 1 { 1.0 } else { -1.0 };
        let sy = if dy == 1 { 1.0 } else { -1.0 };
        let sz = if dz == 1 { 1.0 } else { -1.0 };
        weight_grads[c] = [
            sx * wy * wz * dgrid,
            sy * wx * wz * dgrid,
            sz * wx * wy * dgrid,
        ];
    }
    CornerSet {
        rows,
        weights,
        weight_grads,
    }
}

/// Reference (non-differentiable) hash grid lookup against a raw table
/// slice of `table_rows() * features_per_entry` values.
pub fn hash_grid_encode_ref(cfg: &HashGridConfig, table: &[f64], x: [f64; 3]) -> Vec<f64> {
    let f = cfg.features_per_entry;
    let mut out = vec![0.0; cfg.output_dim()];
    for level in 0..cfg.num_levels {
        let cs = corner_set(cfg, level, x);
        for c in 0..8 {
            let base = cs.rows[c] * f;
            for k in 0..f {
                out[level * f + k] += cs.weights[c] * table[base + k];
            }
        }
    }
    out
}
