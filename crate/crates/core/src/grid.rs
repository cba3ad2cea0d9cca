//! Dense 2D scalar fields and the `LDCG` grid file format.
//!
//! A [`Grid`] holds one channel: an image plane, a confidence map, a
//! threshold map, a scale map or a binary map stored as `0.0`/`1.0`.
//! [`Tensor3`] stacks channels for feature maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    /// Builds a grid from row-major data. Rejects empty dims, length
    /// mismatches and non-finite values.
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("grid dims must be >= 1, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::argument(format!("non-finite value at index {i}")));
        }
        Ok(Grid { height, width, data })
    }

    /// Internal constructor for values already known to be valid.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Grid { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "grid dims must be >= 1");
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "grid dims must be >= 1");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid::from_raw(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        pairwise_sum(&self.data)
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub(crate) fn check_same_dims(&self, other: &Grid, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Pads on the bottom and right by edge replication.
    pub fn pad_replicate(&self, height: usize, width: usize) -> Grid {
        assert!(height >= self.height && width >= self.width);
        Grid::from_fn(height, width, |r, c| {
            self.get(r.min(self.height - 1), c.min(self.width - 1))
        })
    }

    /// Copies the `height`x`width` window with top-left corner at (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Grid {
        assert!(top + height <= self.height && left + width <= self.width);
        Grid::from_fn(height, width, |r, c| self.get(top + r, left + c))
    }

    pub fn flip_horizontal(&self) -> Grid {
        Grid::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }
}

/// Elementwise product of two same-sized grids.
pub fn hadamard(a: &Grid, b: &Grid) -> Result<Grid> {
    a.check_same_dims(b, "hadamard")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Grid::from_raw(a.height, a.width, data))
}

/// Block-mean downsampling by an integer factor.
///
/// Inputs whose dims are not multiples of `factor` are first padded on the
/// bottom/right by edge replication to the next multiple.
pub fn downsample_avg(g: &Grid, factor: usize) -> Result<Grid> {
    if factor == 0 {
        return Err(Error::argument("downsample factor must be positive"));
    }
    let h = g.height.div_ceil(factor) * factor;
    let w = g.width.div_ceil(factor) * factor;
    let padded;
    let src = if (h, w) != g.dims() {
        padded = g.pad_replicate(h, w);
        &padded
    } else {
        g
    };
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; oh * ow];
    for r in 0..h {
        let orow = &mut out[(r / factor) * ow..(r / factor + 1) * ow];
        let srow = &src.data[r * w..(r + 1) * w];
        for (c, v) in srow.iter().enumerate() {
            orow[c / factor] += v;
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    Ok(Grid::from_raw(oh, ow, out))
}

/// Bilinear resampling to `height`x`width` with pixel-centre alignment and
/// edge clamping.
pub fn resize_bilinear(g: &Grid, height: usize, width: usize) -> Grid {
    let sy = g.height as f64 / height as f64;
    let sx = g.width as f64 / width as f64;
    let coord = |dst: usize, scale: f64, len: usize| {
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..width).map(|c| coord(c, sx, g.width)).collect();
    Grid::from_fn(height, width, |r, c| {
        let (r0, r1, fy) = coord(r, sy, g.height);
        let (c0, c1, fx) = cols[c];
        let top = g.get(r0, c0) * (1.0 - fx) + g.get(r0, c1) * fx;
        let bottom = g.get(r1, c0) * (1.0 - fx) + g.get(r1, c1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Sum with pairwise reduction, so batch reductions do not drift with length.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// A stack of same-sized channels, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "tensor {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Tensor3 {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_grid(g: &Grid) -> Self {
        Tensor3 {
            channels: 1,
            height: g.height,
            width: g.width,
            data: g.data.clone(),
        }
    }

    pub fn from_grids(grids: &[Grid]) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::argument("no channels given"))?;
        let mut data = Vec::with_capacity(grids.len() * first.len());
        for g in grids {
            first.check_same_dims(g, "stacking channels")?;
            data.extend_from_slice(&g.data);
        }
        Ok(Tensor3 {
            channels: grids.len(),
            height: first.height,
            width: first.width,
            data,
        })
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copies channel `c` out as a grid.
    pub fn to_grid(&self, c: usize) -> Grid {
        Grid::from_raw(self.height, self.width, self.channel(c).to_vec())
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }
}

const GRID_MAGIC: &[u8; 4] = b"LDCG";
const GRID_VERSION: u8 = 1;
const GRID_HEADER: usize = 13;

/// Serializes a grid to the `LDCG v1` byte layout.
pub fn encode_grid(g: &Grid) -> Vec<u8> {
    let mut buf = Vec::with_capacity(GRID_HEADER + 8 * g.len());
    buf.extend_from_slice(GRID_MAGIC);
    buf.push(GRID_VERSION);
    buf.extend_from_slice(&(g.height as u32).to_le_bytes());
    buf.extend_from_slice(&(g.width as u32).to_le_bytes());
    for v in &g.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_grid(bytes: &[u8]) -> Result<Grid> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len(), "truncated magic"));
    }
    if &bytes[..4] != GRID_MAGIC {
        return Err(Error::format(0, "bad magic, expected `LDCG`"));
    }
    if bytes.len() < GRID_HEADER {
        return Err(Error::format(bytes.len(), "truncated header"));
    }
    if bytes[4] != GRID_VERSION {
        return Err(Error::format(4, format!("unsupported version {}", bytes[4])));
    }
    let height = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if height == 0 || width == 0 {
        return Err(Error::format(5, format!("empty dims {height}x{width}")));
    }
    let payload = &bytes[GRID_HEADER..];
    let need = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::format(5, "dims overflow"))?;
    if payload.len() < need {
        return Err(Error::format(
            bytes.len(),
            format!("truncated payload: {height}x{width} needs {need} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(Error::format(GRID_HEADER + need, "trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity(height * width);
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(GRID_HEADER + 8 * i, "non-finite value"));
        }
        data.push(v);
    }
    Ok(Grid::from_raw(height, width, data))
}

pub fn write_grid(path: &Path, g: &Grid) -> Result<()> {
    fs::write(path, encode_grid(g)).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes).map_err(|e| e.in_file(path))
}
