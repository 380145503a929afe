//! Dense row-major containers shared by the compiler-side modules.

use std::fmt;

/// Row-major `int32` matrix.
#[derive(Clone, PartialEq, Eq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    data: Vec<i32>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<i32>) -> Self {
        assert_eq!(data.len(), rows * cols, "element count mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<i32>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat {
            rows: r,
            cols: c,
            data,
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: i32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    /// Zero-pad to `pr x pc`. The original values keep their coordinates.
    pub fn pad_to(&self, pr: usize, pc: usize) -> Mat {
        assert!(pr >= self.rows && pc >= self.cols);
        let mut out = Mat::zeros(pr, pc);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(r, c, self.get(r, c));
            }
        }
        out
    }

    /// The top-left `rows x cols` sub-matrix.
    pub fn unpad(&self, rows: usize, cols: usize) -> Mat {
        assert!(rows <= self.rows && cols <= self.cols);
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                out.set(r, c, self.get(r, c));
            }
        }
        out
    }

    pub fn row(&self, r: usize) -> &[i32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<i32>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// Raw little-endian bytes, row-major, no header (the `.bin` file format).
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parse a `.bin` payload; the byte length must equal `rows*cols*4`.
    pub fn from_le_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Result<Mat, String> {
        if bytes.len() != rows * cols * 4 {
            return Err(format!(
                "expected {} bytes for a {}x{} int32 matrix, got {}",
                rows * cols * 4,
                rows,
                cols,
                bytes.len()
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Mat { rows, cols, data })
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

/// CHW `int32` tensor used by the host-side reshaping code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<i32>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<i32>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Tensor3 {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> i32 {
        self.data[(c * self.height + h) * self.width + w]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, v: i32) {
        self.data[(c * self.height + h) * self.width + w] = v;
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }
}

/// Round `n` up to the next multiple of `m`.
pub fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}
