//! Binary rasters on the planning grid, 4-connected labeling, and PGM I/O.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PgmError {
    #[error("not a PGM file (expected P2 or P5 magic)")]
    BadMagic,
    #[error("malformed PGM header: {0}")]
    Header(String),
    #[error("unsupported PGM maxval {0} (expected 1 or 255)")]
    MaxVal(u32),
    #[error("PGM pixel data truncated: expected {expected} values, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid PGM pixel value {0:?}")]
    Pixel(String),
}

/// Row-major binary raster; row 0 is the top row.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    cells: Vec<bool>,
}

pub(crate) const NEIGHBORS_4: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            cells: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                cells.push(f(x, y));
            }
        }
        Self { width, height, cells }
    }

    pub fn from_cells(width: usize, height: usize, cells: Vec<bool>) -> Self {
        assert_eq!(cells.len(), width * height, "cell count does not match dimensions");
        Self { width, height, cells }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.width + x]
    }

    /// Like [`Mask::get`] but `false` outside the raster.
    #[inline]
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.cells[y * self.width + x] = v;
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, v: bool) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                self.set(x, y, v);
            }
        }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    fn same_dims(&self, other: &Mask) {
        assert!(
            self.width == other.width && self.height == other.height,
            "mask dimensions differ: {}x{} vs {}x{}",
            self.width,
            self.height,
            other.width,
            other.height
        );
    }

    /// Number of cells set in both masks.
    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.same_dims(other);
        self.cells.iter().zip(&other.cells).filter(|(a, b)| **a && **b).count()
    }

    /// Number of cells set here but not in `other`.
    pub fn difference_count(&self, other: &Mask) -> usize {
        self.same_dims(other);
        self.cells.iter().zip(&other.cells).filter(|(a, b)| **a && !**b).count()
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the set cells.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    /// Shifts by whole cells; cells pushed off the raster are dropped.
    pub fn translated(&self, dx: isize, dy: isize) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| {
            self.get_signed(x as isize - dx, y as isize - dy)
        })
    }

    pub fn mirrored_x(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    pub fn mirrored_y(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| self.get(x, self.height - 1 - y))
    }

    /// Swaps the axes (mirror about the main diagonal).
    pub fn transposed(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |x, y| self.get(y, x))
    }

    /// One of the 8 symmetries of the square: bit 0 mirrors x, bit 1
    /// mirrors y, bit 2 transposes (applied last).
    pub fn dihedral(&self, k: u8) -> Mask {
        let mut m = self.clone();
        if k & 1 != 0 {
            m = m.mirrored_x();
        }
        if k & 2 != 0 {
            m = m.mirrored_y();
        }
        if k & 4 != 0 {
            m = m.transposed();
        }
        m
    }

    /// Labels 4-connected components of cells whose value equals `value`.
    /// Returns per-cell labels (`0` = not part of any component, components
    /// numbered from 1 in row-major discovery order) and the component count.
    pub fn label_components(&self, value: bool) -> (Vec<u32>, usize) {
        let mut labels = vec![0u32; self.cells.len()];
        let mut count = 0u32;
        let mut stack = Vec::new();
        for start in 0..self.cells.len() {
            if self.cells[start] != value || labels[start] != 0 {
                continue;
            }
            count += 1;
            labels[start] = count;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (x, y) = ((i % self.width) as isize, (i / self.width) as isize);
                for (dx, dy) in NEIGHBORS_4 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= self.width as isize || ny >= self.height as isize {
                        continue;
                    }
                    let j = ny as usize * self.width + nx as usize;
                    if self.cells[j] == value && labels[j] == 0 {
                        labels[j] = count;
                        stack.push(j);
                    }
                }
            }
        }
        (labels, count as usize)
    }

    /// Number of 4-connected components of set cells.
    pub fn component_count(&self) -> usize {
        self.label_components(true).1
    }

    /// Plain PGM (`P2`, maxval 1).
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n1\n", self.width, self.height);
        for y in 0..self.height {
            let row: Vec<&str> = (0..self.width)
                .map(|x| if self.get(x, y) { "1" } else { "0" })
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    /// Reads `P2` or `P5` with maxval 1 (1 → set) or 255 (≥128 → set).
    pub fn from_pgm(bytes: &[u8]) -> Result<Mask, PgmError> {
        let binary = match bytes.get(..2) {
            Some(b"P2") => false,
            Some(b"P5") => true,
            _ => return Err(PgmError::BadMagic),
        };
        let mut pos = 2;
        let mut header = [0u32; 3];
        for slot in header.iter_mut() {
            // skip whitespace and comments
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while let Some(&b) = bytes.get(pos) {
                            pos += 1;
                            if b == b'\n' {
                                break;
                            }
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
                pos += 1;
            }
            let tok = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
            *slot = tok
                .parse()
                .map_err(|_| PgmError::Header(format!("expected a number at byte {start}")))?;
        }
        let [width, height, maxval] = header;
        if width == 0 || height == 0 {
            return Err(PgmError::Header("zero dimension".into()));
        }
        let threshold = match maxval {
            1 => 1,
            255 => 128,
            other => return Err(PgmError::MaxVal(other)),
        };
        let n = width as usize * height as usize;
        let values: Vec<u32> = if binary {
            // exactly one whitespace byte separates the header from raster data
            let data = bytes.get(pos + 1..).unwrap_or(&[]);
            if data.len() < n {
                return Err(PgmError::Truncated {
                    expected: n,
                    found: data.len(),
                });
            }
            data[..n].iter().map(|&b| b as u32).collect()
        } else {
            let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| PgmError::Pixel("non-UTF-8 data".into()))?;
            let mut vals = Vec::with_capacity(n);
            for tok in text.split_ascii_whitespace().take(n) {
                vals.push(tok.parse::<u32>().map_err(|_| PgmError::Pixel(tok.to_string()))?);
            }
            if vals.len() < n {
                return Err(PgmError::Truncated {
                    expected: n,
                    found: vals.len(),
                });
            }
            vals
        };
        if let Some(v) = values.iter().find(|&&v| v > maxval) {
            return Err(PgmError::Pixel(v.to_string()));
        }
        Ok(Mask::from_cells(
            width as usize,
            height as usize,
            values.into_iter().map(|v| v >= threshold).collect(),
        ))
    }

    /// Packs cells row-major, least significant bit first.
    pub fn to_packed_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.cells.len().div_ceil(8)];
        for (i, &c) in self.cells.iter().enumerate() {
            if c {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_packed_bits(width: usize, height: usize, bits: &[u8]) -> Mask {
        let n = width * height;
        assert!(bits.len() * 8 >= n, "not enough packed bits");
        Mask::from_cells(width, height, (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect())
    }

    /// Cells as `0.0`/`1.0` values.
    pub fn to_f32(&self) -> Vec<f32> {
        self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_and_variants() {
        let m = Mask::from_fn(5, 3, |x, y| (x + y) % 2 == 0);
        assert_eq!(Mask::from_pgm(m.to_pgm().as_bytes()).unwrap(), m);

        let p2 = b"P2\n# comment\n3 1\n255\n0 127 128\n";
        let got = Mask::from_pgm(p2).unwrap();
        assert_eq!(got.cells(), &[false, false, true]);

        let mut p5 = b"P5\n2 2\n255\n".to_vec();
        p5.extend_from_slice(&[255, 0, 200, 10]);
        assert_eq!(Mask::from_pgm(&p5).unwrap().cells(), &[true, false, true, false]);

        assert_eq!(Mask::from_pgm(b"P2\n2 2\n7\n0 0 0 0"), Err(PgmError::MaxVal(7)));
        assert!(matches!(
            Mask::from_pgm(b"P2\n2 2\n1\n0 0 1"),
            Err(PgmError::Truncated { .. })
        ));
        assert_eq!(Mask::from_pgm(b"P6\n"), Err(PgmError::BadMagic));
    }

    #[test]
    fn components_are_four_connected() {
        // diagonal contact does not join components
        let m = Mask::from_cells(2, 2, vec![true, false, false, true]);
        assert_eq!(m.component_count(), 2);
        let m = Mask::from_cells(2, 2, vec![true, true, false, true]);
        assert_eq!(m.component_count(), 1);
    }

    #[test]
    fn packed_bits_round_trip() {
        let m = Mask::from_fn(7, 3, |x, y| x * y % 3 == 1);
        assert_eq!(Mask::from_packed_bits(7, 3, &m.to_packed_bits()), m);
    }
}
