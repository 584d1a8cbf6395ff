//! Voxel grids: intensity images, binary masks and probability maps.
//!
//! All grids are row-major over `(depth, height, width)`; `depth == 1` is a 2D
//! slice.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(depth: usize, height: usize, width: usize) -> Result<Self> {
        if depth == 0 || height == 0 || width == 0 {
            return Err(Error::structural(format!("degenerate shape {depth}x{height}x{width}")));
        }
        Ok(Self { depth, height, width })
    }

    pub const fn plane(height: usize, width: usize) -> Self {
        Self { depth: 1, height, width }
    }

    pub fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_2d(&self) -> bool {
        self.depth == 1
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.width;
        let y = (idx / self.width) % self.height;
        let z = idx / (self.width * self.height);
        (z, y, x)
    }

    pub(crate) fn expect_eq(&self, other: &Shape) -> Result<()> {
        if self != other {
            return Err(Error::structural(format!("shape mismatch: {self} vs {other}")));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.depth, self.height, self.width)
    }
}

fn check_len(shape: Shape, len: usize) -> Result<()> {
    if shape.len() != len {
        return Err(Error::structural(format!("{} voxels do not fill shape {shape}", len)));
    }
    Ok(())
}

/// Intensity image with finite voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    shape: Shape,
    voxels: Vec<f64>,
}

impl ImageVolume {
    pub fn new(shape: Shape, voxels: Vec<f64>) -> Result<Self> {
        check_len(shape, voxels.len())?;
        crate::numcore::check_finite(&voxels)?;
        Ok(Self { shape, voxels })
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self { shape, voxels: vec![value; shape.len()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.voxels[self.shape.index(z, y, x)]
    }
}

/// Binary label grid; every voxel is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskVolume {
    shape: Shape,
    voxels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(shape: Shape, voxels: Vec<u8>) -> Result<Self> {
        check_len(shape, voxels.len())?;
        if let Some(i) = voxels.iter().position(|&v| v > 1) {
            return Err(Error::structural(format!("mask voxel {i} has label {}", voxels[i])));
        }
        Ok(Self { shape, voxels })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, voxels: vec![0; shape.len()] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut voxels = Vec::with_capacity(shape.len());
        for z in 0..shape.depth {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    voxels.push(f(z, y, x) as u8);
                }
            }
        }
        Self { shape, voxels }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.voxels[self.shape.index(z, y, x)] == 1
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().map(|&v| v as usize).sum()
    }

    /// Writes the mask as binary PGM (P5, maxval 1). Slices of a 3D mask are
    /// stacked vertically.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        let rows = self.shape.depth * self.shape.height;
        write!(out, "P5\n{} {}\n1\n", self.shape.width, rows)?;
        out.write_all(&self.voxels)?;
        Ok(())
    }

    /// Parses a P5 PGM written by [`MaskVolume::write_pgm`] as a 2D mask.
    pub fn read_pgm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(pos as u64, "truncated PGM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P5" || fields[3] != "1" {
            return Err(Error::format(0, "expected a P5 PGM with maxval 1"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(0, format!("bad dimension {s}")));
        let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
        let shape = Shape::new(1, h, w)?;
        let payload = bytes.get(pos..pos + shape.len()).ok_or_else(|| Error::format(pos as u64, "truncated PGM payload"))?;
        MaskVolume::new(shape, payload.to_vec())
    }
}

/// Probability grid with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    shape: Shape,
    voxels: Vec<f64>,
}

impl ProbVolume {
    pub fn new(shape: Shape, voxels: Vec<f64>) -> Result<Self> {
        check_len(shape, voxels.len())?;
        if let Some(i) = voxels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::numeric(Some(i), format!("probability {} outside [0, 1]", voxels[i])));
        }
        Ok(Self { shape, voxels })
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self { shape, voxels: vec![value; shape.len()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    /// Voxelwise `p >= threshold`.
    pub fn threshold(&self, threshold: f64) -> MaskVolume {
        MaskVolume {
            shape: self.shape,
            voxels: self.voxels.iter().map(|&p| (p >= threshold) as u8).collect(),
        }
    }
}

impl From<&MaskVolume> for ProbVolume {
    fn from(mask: &MaskVolume) -> Self {
        ProbVolume { shape: mask.shape, voxels: mask.voxels.iter().map(|&v| v as f64).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_grids() {
        let s = Shape::plane(2, 2);
        assert!(Shape::new(0, 2, 2).is_err());
        assert!(MaskVolume::new(s, vec![0, 1, 2, 0]).is_err());
        assert!(MaskVolume::new(s, vec![0, 1, 0]).is_err());
        assert!(ProbVolume::new(s, vec![0.0, 1.0, 1.5, 0.2]).is_err());
        assert!(ImageVolume::new(s, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn coords_round_trip() {
        let s = Shape::new(3, 4, 5).unwrap();
        for i in 0..s.len() {
            let (z, y, x) = s.coords(i);
            assert_eq!(s.index(z, y, x), i);
        }
    }

    #[test]
    fn pgm_round_trip() {
        let m = MaskVolume::from_fn(Shape::plane(3, 5), |_, y, x| (x + y) % 2 == 0);
        let mut buf = Vec::new();
        m.write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n5 3\n1\n"));
        assert_eq!(MaskVolume::read_pgm(&buf).unwrap(), m);
        assert!(MaskVolume::read_pgm(&buf[..buf.len() - 1]).is_err());
    }
}
