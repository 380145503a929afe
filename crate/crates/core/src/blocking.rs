//! Block-matrix mathematics: decomposition of padded matrices into `bs x bs`
//! blocks, the element/block index relation, and expansion of matrix-level
//! GEMM/ALU operations into sets of atomic block operations.
//!
//! Index conventions: a padded `m x n` matrix is an `alpha x beta` grid of
//! blocks with `alpha = m/bs`, `beta = n/bs`; block `k = i*beta + j` holds
//! elements `(i*bs+u, j*bs+v)`. A GEMM triple `(l, p, m)` names the ACC, INP,
//! and WGT block touched by one atomic multiply-accumulate.

use thiserror::Error;

use crate::matrix::Mat;

#[derive(Debug, Error)]
pub enum BlockError {
    #[error("matrix {rows}x{cols} is not divisible into {bs}x{bs} blocks")]
    Divisibility { rows: usize, cols: usize, bs: usize },
    #[error("index ({i}, {j}) out of range for a {rows}x{cols} matrix")]
    OutOfRange {
        i: usize,
        j: usize,
        rows: usize,
        cols: usize,
    },
    #[error("block shapes disagree: {0}")]
    ShapeMismatch(String),
}

/// One `bs x bs` tile, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    bs: usize,
    data: Vec<i32>,
}

impl Block {
    pub fn zeros(bs: usize) -> Self {
        Block {
            bs,
            data: vec![0; bs * bs],
        }
    }

    pub fn bs(&self) -> usize {
        self.bs
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> i32 {
        self.data[u * self.bs + v]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, x: i32) {
        self.data[u * self.bs + v] = x;
    }
}

/// The scalar-to-block conversion `b * I_bs` used by scalar GEMM.
pub fn diag_block(bs: usize, b: i32) -> Block {
    let mut blk = Block::zeros(bs);
    for d in 0..bs {
        blk.set(d, d, b);
    }
    blk
}

/// A matrix viewed as a grid of blocks, block `k = i*block_cols + j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMatrix {
    pub block_rows: usize,
    pub block_cols: usize,
    pub bs: usize,
    pub blocks: Vec<Block>,
}

impl BlockMatrix {
    pub fn block(&self, k: usize) -> &Block {
        &self.blocks[k]
    }
}

pub fn to_blocks(mat: &Mat, bs: usize) -> Result<BlockMatrix, BlockError> {
    if !mat.rows.is_multiple_of(bs) || !mat.cols.is_multiple_of(bs) {
        return Err(BlockError::Divisibility {
            rows: mat.rows,
            cols: mat.cols,
            bs,
        });
    }
    let block_rows = mat.rows / bs;
    let block_cols = mat.cols / bs;
    let mut blocks = Vec::with_capacity(block_rows * block_cols);
    for i in 0..block_rows {
        for j in 0..block_cols {
            let mut blk = Block::zeros(bs);
            for u in 0..bs {
                for v in 0..bs {
                    blk.set(u, v, mat.get(i * bs + u, j * bs + v));
                }
            }
            blocks.push(blk);
        }
    }
    Ok(BlockMatrix {
        block_rows,
        block_cols,
        bs,
        blocks,
    })
}

/// Inverse of [`to_blocks`].
pub fn reassemble(bm: &BlockMatrix) -> Mat {
    let mut mat = Mat::zeros(bm.block_rows * bm.bs, bm.block_cols * bm.bs);
    for i in 0..bm.block_rows {
        for j in 0..bm.block_cols {
            let blk = bm.block(i * bm.block_cols + j);
            for u in 0..bm.bs {
                for v in 0..bm.bs {
                    mat.set(i * bm.bs + u, j * bm.bs + v, blk.get(u, v));
                }
            }
        }
    }
    mat
}

/// Element `(i, j)` of an `m x n` matrix lives at block `k`, offset `(u, v)`:
/// `k = floor(i/bs)*beta + floor(j/bs)`, `u = i mod bs`, `v = j mod bs`.
pub fn matrix_to_block_index(
    i: usize,
    j: usize,
    bs: usize,
    rows: usize,
    cols: usize,
) -> Result<(usize, (usize, usize)), BlockError> {
    if i >= rows || j >= cols {
        return Err(BlockError::OutOfRange { i, j, rows, cols });
    }
    let beta = cols / bs;
    Ok(((i / bs) * beta + j / bs, (i % bs, j % bs)))
}

/// One atomic `GEMM(C<l>, A<p>, B<m>)`: `l` indexes ACC, `p` INP, `m` WGT.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GemmTriple {
    pub l: usize,
    pub p: usize,
    pub m: usize,
}

/// Expansion of `C := C + A x B` over an `alpha x lambda x beta` block grid.
///
/// Emits exactly `{(i*beta+j, i*lambda+k, k*beta+j)}` in lexicographic
/// `(i, j, k)` order. The order carries no semantics (the operations are
/// independent); it is fixed for reproducible output.
pub fn expand_bgemm(alpha: usize, lambda: usize, beta: usize) -> Vec<GemmTriple> {
    let mut out = Vec::with_capacity(alpha * beta * lambda);
    for i in 0..alpha {
        for j in 0..beta {
            for k in 0..lambda {
                out.push(GemmTriple {
                    l: i * beta + j,
                    p: i * lambda + k,
                    m: k * beta + j,
                });
            }
        }
    }
    out
}

/// Expansion of `C := C + A*b`. Every WGT reference is the single diagonal
/// block `b * I_bs` (index 0 of a one-block region), and the output pairs
/// each block column of A with itself, so the shape is `alpha x lambda`.
pub fn expand_bgemm_scalar(alpha: usize, lambda: usize) -> Vec<GemmTriple> {
    let mut out = Vec::with_capacity(alpha * lambda);
    for i in 0..alpha {
        for k in 0..lambda {
            out.push(GemmTriple {
                l: i * lambda + k,
                p: i * lambda + k,
                m: 0,
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AluPairSrc {
    Vector(usize),
    Scalar(i32),
}

/// One atomic vector ALU application: destination vector index plus either a
/// source vector index or an immediate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AluPair {
    pub dst: usize,
    pub src: AluPairSrc,
}

/// Expansion of one row-level ALU op over `beta` segments: vector-vector
/// pairs `(s, s)` or vector-scalar pairs `(s, c)` for `s < beta`.
pub fn expand_balu(beta: usize, scalar: Option<i32>) -> Vec<AluPair> {
    (0..beta)
        .map(|s| AluPair {
            dst: s,
            src: match scalar {
                Some(c) => AluPairSrc::Scalar(c),
                None => AluPairSrc::Vector(s),
            },
        })
        .collect()
}

/// Expansion of `ADD_ACC(X, Y)` for `alpha x beta`-block matrices sharing one
/// ACC image (X at rows `0..alpha*bs`, Y right after): per matrix row, the
/// `beta` per-segment ADD pairs. Vector `v = row*beta + segment`.
pub fn expand_add_acc(alpha: usize, beta: usize, bs: usize) -> Vec<Vec<AluPair>> {
    let rows = alpha * bs;
    (0..rows)
        .map(|r| {
            (0..beta)
                .map(|s| AluPair {
                    dst: r * beta + s,
                    src: AluPairSrc::Vector((rows + r) * beta + s),
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_of_a_two_by_four() {
        // A 2x4 matrix with bs=2 splits into A<0> (left) and A<1> (right).
        let m = Mat::from_vec(2, 4, vec![10, 11, 12, 13, 20, 21, 22, 23]);
        let bm = to_blocks(&m, 2).unwrap();
        assert_eq!((bm.block_rows, bm.block_cols), (1, 2));
        let a0 = bm.block(0);
        assert_eq!(
            [a0.get(0, 0), a0.get(0, 1), a0.get(1, 0), a0.get(1, 1)],
            [10, 11, 20, 21]
        );
        let a1 = bm.block(1);
        assert_eq!(
            [a1.get(0, 0), a1.get(0, 1), a1.get(1, 0), a1.get(1, 1)],
            [12, 13, 22, 23]
        );
    }

    #[test]
    fn single_block_equals_matrix() {
        let m = Mat::from_vec(3, 3, (0..9).collect());
        let bm = to_blocks(&m, 3).unwrap();
        assert_eq!(bm.blocks.len(), 1);
        assert_eq!(reassemble(&bm), m);
    }

    #[test]
    fn indivisible_matrix_rejected() {
        let m = Mat::zeros(3, 4);
        assert!(matches!(
            to_blocks(&m, 2),
            Err(BlockError::Divisibility { .. })
        ));
    }

    #[test]
    fn reassembly_is_identity() {
        // Inverse-composition oracle on a random-ish 6x8 matrix.
        let data: Vec<i32> = (0..48).map(|x| (x * 7919 % 101) - 50).collect();
        let m = Mat::from_vec(6, 8, data);
        assert_eq!(reassemble(&to_blocks(&m, 2).unwrap()), m);
    }

    #[test]
    fn index_relation_worked_example() {
        // (1, 2) with bs=2, beta=2 lands at block 1, offset (1, 0).
        assert_eq!(matrix_to_block_index(1, 2, 2, 2, 4).unwrap(), (1, (1, 0)));
        assert_eq!(matrix_to_block_index(0, 0, 2, 2, 4).unwrap(), (0, (0, 0)));
        assert!(matrix_to_block_index(2, 0, 2, 2, 4).is_err());
    }

    #[test]
    fn index_relation_agrees_with_to_blocks() {
        let data: Vec<i32> = (0..24).map(|x| x * 3 - 11).collect();
        let m = Mat::from_vec(4, 6, data);
        let bm = to_blocks(&m, 2).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let (k, (u, v)) = matrix_to_block_index(i, j, 2, 4, 6).unwrap();
                assert_eq!(bm.block(k).get(u, v), m.get(i, j));
            }
        }
    }

    #[test]
    fn bgemm_expansion_one_by_two_by_two() {
        let triples = expand_bgemm(1, 2, 2);
        let expected = [
            GemmTriple { l: 0, p: 0, m: 0 },
            GemmTriple { l: 0, p: 1, m: 2 },
            GemmTriple { l: 1, p: 0, m: 1 },
            GemmTriple { l: 1, p: 1, m: 3 },
        ];
        assert_eq!(triples, expected);
    }

    #[test]
    fn bgemm_expansion_trivial_and_row_slice() {
        assert_eq!(expand_bgemm(1, 1, 1), vec![GemmTriple { l: 0, p: 0, m: 0 }]);
        // i=0, j=0 slice of the 2x4x4 grid.
        let triples = expand_bgemm(2, 4, 4);
        let slice: Vec<_> = triples.iter().filter(|t| t.l == 0).copied().collect();
        assert_eq!(
            slice,
            vec![
                GemmTriple { l: 0, p: 0, m: 0 },
                GemmTriple { l: 0, p: 1, m: 4 },
                GemmTriple { l: 0, p: 2, m: 8 },
                GemmTriple { l: 0, p: 3, m: 12 },
            ]
        );
    }

    #[test]
    fn bgemm_completeness() {
        let (a, l, b) = (3, 4, 5);
        let triples = expand_bgemm(a, l, b);
        assert_eq!(triples.len(), a * l * b);
        let set: std::collections::BTreeSet<_> = triples.iter().collect();
        assert_eq!(set.len(), triples.len(), "no duplicate triples");
    }

    #[test]
    fn scalar_gemm_uses_one_diagonal_block() {
        let blk = diag_block(2, 3);
        assert_eq!(
            [blk.get(0, 0), blk.get(0, 1), blk.get(1, 0), blk.get(1, 1)],
            [3, 0, 0, 3]
        );
        let triples = expand_bgemm_scalar(1, 2);
        assert_eq!(
            triples,
            vec![
                GemmTriple { l: 0, p: 0, m: 0 },
                GemmTriple { l: 1, p: 1, m: 0 },
            ]
        );
        assert!(triples.iter().all(|t| t.m == 0));
    }

    #[test]
    fn balu_expansion() {
        assert_eq!(
            expand_balu(2, None),
            vec![
                AluPair {
                    dst: 0,
                    src: AluPairSrc::Vector(0)
                },
                AluPair {
                    dst: 1,
                    src: AluPairSrc::Vector(1)
                },
            ]
        );
        assert_eq!(
            expand_balu(1, Some(7)),
            vec![AluPair {
                dst: 0,
                src: AluPairSrc::Scalar(7)
            }]
        );
    }

    #[test]
    fn add_acc_expansion_covers_every_row() {
        // 2x2 matrices, bs=2: one block each, X at image rows 0..2, Y at 2..4.
        let rows = expand_add_acc(1, 1, 2);
        assert_eq!(rows.len(), 2);
        assert_eq!(
            rows[0],
            vec![AluPair {
                dst: 0,
                src: AluPairSrc::Vector(2)
            }]
        );
        assert_eq!(
            rows[1],
            vec![AluPair {
                dst: 1,
                src: AluPairSrc::Vector(3)
            }]
        );
    }
}
