//! Penalty blocks, their embedding into the full coefficient space, and the
//! penalty total `S_lambda = sum_j lambda_j S_j`.
//!
//! Blocks may overlap arbitrary coefficient ranges (adaptive smooths need
//! this); `tr(S_lambda^- S_j)` is computed on the connected component of
//! blocks that touch `S_j`, which is where the block diagonal structure of
//! `S_lambda` keeps the cost at the component size rather than `p`.

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, SymMatrix};

/// One penalty block: a small dense symmetric PSD matrix plus its placement
/// in the full coefficient vector.
#[derive(Debug, Clone)]
pub struct PenaltyBlock {
    pub matrix: SymMatrix,
    pub offset: usize,
    pub label: String,
}

impl PenaltyBlock {
    pub fn new(matrix: SymMatrix, offset: usize, label: impl Into<String>) -> Self {
        PenaltyBlock {
            matrix,
            offset,
            label: label.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.n()
    }

    /// Coefficient index range `[offset, offset + q)` this block touches.
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.dim()
    }

    /// Quadratic form `beta' S_j beta` using only the block rows.
    pub fn quad_form(&self, beta: &DVector<f64>) -> f64 {
        let sub = beta.rows(self.offset, self.dim()).into_owned();
        self.matrix.quad_form(&sub)
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }
}

/// Ordered collection of penalty blocks over a `p`-dimensional coefficient
/// space; block `j` is scaled by the `j`-th smoothing parameter.
#[derive(Debug, Clone)]
pub struct PenaltySet {
    blocks: Vec<PenaltyBlock>,
    p: usize,
}

impl PenaltySet {
    pub fn new(blocks: Vec<PenaltyBlock>, p: usize) -> Result<Self> {
        for b in &blocks {
            if b.offset + b.dim() > p {
                return Err(Error::OutOfRange {
                    offset: b.offset,
                    offset_end: b.offset + b.dim(),
                    p,
                });
            }
        }
        Ok(PenaltySet { blocks, p })
    }

    pub fn empty(p: usize) -> Self {
        PenaltySet { blocks: Vec::new(), p }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[PenaltyBlock] {
        &self.blocks
    }

    pub fn block(&self, j: usize) -> &PenaltyBlock {
        &self.blocks[j]
    }

    /// Index of the block with the given label.
    pub fn find(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    /// `sum_j S_j` embedded in the full space (the lambda-independent total).
    pub fn unweighted_total(&self) -> SymMatrix {
        let ones = vec![1.0; self.blocks.len()];
        self.assemble(&ones).expect("unit weights are positive")
    }

    /// `S_lambda = sum_j lambda_j S_j`.
    pub fn assemble(&self, lambda: &[f64]) -> Result<SymMatrix> {
        if lambda.len() != self.blocks.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} smoothing parameters for {} blocks",
                lambda.len(),
                self.blocks.len()
            )));
        }
        for (j, &l) in lambda.iter().enumerate() {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::NonPositiveLambda { index: j, value: l });
            }
        }
        let mut total = DMatrix::zeros(self.p, self.p);
        for (block, &l) in self.blocks.iter().zip(lambda) {
            let q = block.dim();
            let m = block.matrix.as_matrix();
            for i in 0..q {
                for j in 0..q {
                    total[(block.offset + i, block.offset + j)] += l * m[(i, j)];
                }
            }
        }
        Ok(SymMatrix::symmetrize(total))
    }

    /// Like [`assemble`](Self::assemble) but yields the zero matrix when the
    /// set has no blocks (ordinary unpenalized regression).
    pub fn assemble_or_empty(&self, lambda: &[f64], p: usize) -> Result<SymMatrix> {
        if self.blocks.is_empty() {
            Ok(SymMatrix::zeros(p))
        } else {
            self.assemble(lambda)
        }
    }

    /// Rank of `sum_j S_j`, the structural rank of every admissible
    /// `S_lambda` under the lambda-invariant null space condition.
    pub fn structural_rank(&self, rank_tol: f64) -> usize {
        if self.blocks.is_empty() {
            return 0;
        }
        self.unweighted_total().eigen(rank_tol).rank
    }

    /// Sorted coefficient indices of the connected component of blocks whose
    /// ranges (transitively) overlap block `j`.
    pub fn component_indices(&self, j: usize) -> Vec<usize> {
        let mut in_comp = vec![false; self.blocks.len()];
        in_comp[j] = true;
        loop {
            let mut grew = false;
            for a in 0..self.blocks.len() {
                if in_comp[a] {
                    continue;
                }
                let ra = self.blocks[a].range();
                let touches = self.blocks.iter().enumerate().any(|(b, blk)| {
                    in_comp[b] && ra.start < blk.range().end && blk.range().start < ra.end
                });
                if touches {
                    in_comp[a] = true;
                    grew = true;
                }
            }
            if !grew {
                break;
            }
        }
        let mut idx: Vec<usize> = Vec::new();
        for (b, blk) in self.blocks.iter().enumerate() {
            if in_comp[b] {
                idx.extend(blk.range());
            }
        }
        idx.sort_unstable();
        idx.dedup();
        idx
    }

    /// `tr(S_lambda^- S_j)` computed on the connected component containing
    /// block `j`; the rest of `S_lambda` is block diagonal to it and drops
    /// out of the pseudo-inverse.
    pub fn trace_pinv_total_times(&self, lambda: &[f64], j: usize, rank_tol: f64) -> Result<f64> {
        let idx = self.component_indices(j);
        let pos_of: std::collections::HashMap<usize, usize> =
            idx.iter().enumerate().map(|(a, &i)| (i, a)).collect();
        let q = idx.len();
        let mut sub = DMatrix::zeros(q, q);
        for (b, blk) in self.blocks.iter().enumerate() {
            // offsets present in `idx` can only belong to component blocks
            let Some(&first) = pos_of.get(&blk.offset) else {
                continue;
            };
            let m = blk.matrix.as_matrix();
            for r in 0..blk.dim() {
                for c in 0..blk.dim() {
                    sub[(first + r, first + c)] += lambda[b] * m[(r, c)];
                }
            }
        }
        let sub = SymMatrix::symmetrize(sub);
        // Rank of the component is lambda-invariant; inverting exactly that
        // many eigenvalues keeps the trace stable when smoothing parameters
        // within one component differ by many orders of magnitude.
        let mut unweighted = DMatrix::zeros(q, q);
        for (_, blk) in self.blocks.iter().enumerate() {
            let Some(&first) = pos_of.get(&blk.offset) else {
                continue;
            };
            let m = blk.matrix.as_matrix();
            for r in 0..blk.dim() {
                for c in 0..blk.dim() {
                    unweighted[(first + r, first + c)] += m[(r, c)];
                }
            }
        }
        let comp_rank = SymMatrix::symmetrize(unweighted).eigen(rank_tol).rank;
        let pinv = linalg::pseudo_inverse_fixed_rank(&sub, comp_rank)?;
        let blk = &self.blocks[j];
        let first = pos_of[&blk.offset];
        let mut tr = 0.0;
        let pm = pinv.as_matrix();
        let bm = blk.matrix.as_matrix();
        for r in 0..blk.dim() {
            for c in 0..blk.dim() {
                tr += pm[(first + r, first + c)] * bm[(c, r)];
            }
        }
        Ok(tr)
    }

    /// Checks that the rank of `S_lambda` is invariant over `trials` random
    /// log-uniform draws of lambda in `[1e-4, 1e4]` and equals the rank of
    /// `sum_j S_j`. A failure means Theorem-style positivity of the update
    /// numerator cannot be relied on.
    pub fn nullspace_stable(&self, trials: usize, rank_tol: f64) -> bool {
        if self.blocks.is_empty() {
            return true;
        }
        // A null block cannot move the total in its own direction: its
        // lambda has no effect on rank and the update numerator for it is
        // identically zero. Flag such configurations.
        if self.blocks.iter().any(|b| b.matrix.eigen(rank_tol).rank == 0) {
            return false;
        }
        let total = self.unweighted_total();
        let total_eig = total.eigen(rank_tol);
        let reference = total_eig.rank;
        let total_scale = total_eig.spectral_radius();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_5a11);
        for _ in 0..trials.max(2) {
            let lambda: Vec<f64> = (0..self.blocks.len())
                .map(|_| 10f64.powf(rng.random_range(-4.0..4.0)))
                .collect();
            let s = match self.assemble(&lambda) {
                Ok(s) => s,
                Err(_) => return false,
            };
            // S_lambda dominates lambda_min * sum_j S_j on the range space,
            // so thresholding eigenvalues against that floor keeps the rank
            // decision meaningful across an eight-decade lambda spread where
            // a plain relative threshold would swallow small-lambda
            // directions.
            let lambda_min = lambda.iter().cloned().fold(f64::INFINITY, f64::min);
            let thr = rank_tol * lambda_min * total_scale;
            let eig = s.eigen(rank_tol);
            let rank = eig.values.iter().filter(|&&v| v > thr).count();
            if rank != reference {
                return false;
            }
        }
        true
    }
}

/// Pads a block out with zeros to a full `p x p` matrix.
pub fn embed(block: &PenaltyBlock, p: usize) -> Result<SymMatrix> {
    let q = block.dim();
    if block.offset + q > p {
        return Err(Error::OutOfRange {
            offset: block.offset,
            offset_end: block.offset + q,
            p,
        });
    }
    let mut out = DMatrix::zeros(p, p);
    let m = block.matrix.as_matrix();
    for i in 0..q {
        for j in 0..q {
            out[(block.offset + i, block.offset + j)] = m[(i, j)];
        }
    }
    SymMatrix::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ident_block(q: usize, offset: usize, label: &str) -> PenaltyBlock {
        PenaltyBlock::new(SymMatrix::identity(q), offset, label)
    }

    #[test]
    fn embed_trivial_cases() {
        let b = ident_block(2, 0, "a");
        let e = embed(&b, 2).unwrap();
        assert_eq!(e.as_matrix(), &DMatrix::identity(2, 2));

        let b = ident_block(2, 1, "a");
        let e = embed(&b, 4).unwrap();
        let expect = DMatrix::from_diagonal(&DVector::from_row_slice(&[0.0, 1.0, 1.0, 0.0]));
        assert_eq!(e.as_matrix(), &expect);
    }

    #[test]
    fn embed_rejects_out_of_range() {
        let b = ident_block(3, 2, "a");
        assert!(matches!(embed(&b, 4), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn embed_preserves_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q = 3;
        let p = 7;
        let offset = 2;
        let block = PenaltyBlock::new(
            SymMatrix::from_gram(&DMatrix::from_fn(4, q, |_, _| rng.random_range(-1.0..1.0))),
            offset,
            "s",
        );
        let full = embed(&block, p).unwrap();
        for _ in 0..20 {
            let beta = DVector::from_fn(p, |_, _| rng.random_range(-2.0..2.0));
            let gamma = beta.rows(offset, q).into_owned();
            assert_relative_eq!(
                full.quad_form(&beta),
                block.matrix.quad_form(&gamma),
                epsilon = 1e-12,
                max_relative = 1e-12
            );
            assert_relative_eq!(
                block.quad_form(&beta),
                block.matrix.quad_form(&gamma),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn assemble_trivial_cases() {
        let set = PenaltySet::new(vec![ident_block(2, 0, "a")], 2).unwrap();
        let s = set.assemble(&[2.0]).unwrap();
        assert_eq!(s.as_matrix(), &(DMatrix::identity(2, 2) * 2.0));

        let set = PenaltySet::new(vec![ident_block(1, 0, "a"), ident_block(1, 1, "b")], 2).unwrap();
        let s = set.assemble(&[1.0, 3.0]).unwrap();
        let expect = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 3.0]));
        assert_eq!(s.as_matrix(), &expect);
    }

    #[test]
    fn assemble_rejects_non_positive_lambda() {
        let set = PenaltySet::new(vec![ident_block(2, 0, "a")], 2).unwrap();
        assert!(matches!(
            set.assemble(&[0.0]),
            Err(Error::NonPositiveLambda { index: 0, .. })
        ));
        assert!(matches!(
            set.assemble(&[-1.0]),
            Err(Error::NonPositiveLambda { index: 0, .. })
        ));
    }

    #[test]
    fn assemble_matches_elementwise_sum_oracle_on_overlapping_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = 6;
        let blocks = vec![
            PenaltyBlock::new(
                SymMatrix::from_gram(&DMatrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0))),
                0,
                "a",
            ),
            PenaltyBlock::new(
                SymMatrix::from_gram(&DMatrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0))),
                2,
                "b",
            ),
        ];
        let set = PenaltySet::new(blocks.clone(), p).unwrap();
        let lambda = [0.7, 3.1];
        let s = set.assemble(&lambda).unwrap();
        let mut oracle = DMatrix::zeros(p, p);
        for (b, &l) in blocks.iter().zip(&lambda) {
            oracle += embed(b, p).unwrap().as_matrix() * l;
        }
        assert_relative_eq!((s.as_matrix() - oracle).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn nullspace_stable_for_single_and_disjoint_blocks() {
        let set = PenaltySet::new(vec![ident_block(3, 0, "a")], 3).unwrap();
        assert!(set.nullspace_stable(5, 1e-7));
    }

    #[test]
    fn nullspace_stable_flags_null_block() {
        // {diag(1,0), diag(1,0)} keeps rank 1 for every lambda: stable.
        let d10 = SymMatrix::from_diagonal(&[1.0, 0.0]);
        let stable = PenaltySet::new(
            vec![
                PenaltyBlock::new(d10.clone(), 0, "a"),
                PenaltyBlock::new(d10.clone(), 0, "b"),
            ],
            2,
        )
        .unwrap();
        assert!(stable.nullspace_stable(8, 1e-7));

        // A zero block leaves rank(S_lambda) = rank(sum S_j) = 1 for every
        // draw, yet its lambda has a degenerate update; flagged false.
        let zero = SymMatrix::zeros(2);
        let degenerate = PenaltySet::new(
            vec![
                PenaltyBlock::new(d10, 0, "a"),
                PenaltyBlock::new(zero, 0, "b"),
            ],
            2,
        )
        .unwrap();
        assert!(!degenerate.nullspace_stable(8, 1e-7));
    }

    #[test]
    fn trace_pinv_total_matches_full_dimension_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let p = 8;
            let blocks = vec![
                PenaltyBlock::new(
                    SymMatrix::from_gram(&DMatrix::from_fn(4, 3, |_, _| {
                        rng.random_range(-1.0..1.0)
                    })),
                    0,
                    "a",
                ),
                PenaltyBlock::new(
                    SymMatrix::from_gram(&DMatrix::from_fn(4, 3, |_, _| {
                        rng.random_range(-1.0..1.0)
                    })),
                    1,
                    "b",
                ),
                PenaltyBlock::new(
                    SymMatrix::from_gram(&DMatrix::from_fn(4, 2, |_, _| {
                        rng.random_range(-1.0..1.0)
                    })),
                    6,
                    "c",
                ),
            ];
            let set = PenaltySet::new(blocks, p).unwrap();
            let lambda: Vec<f64> = (0..3).map(|_| 10f64.powf(rng.random_range(-2.0..2.0))).collect();
            for j in 0..3 {
                let fast = set.trace_pinv_total_times(&lambda, j, 1e-9).unwrap();
                let full = linalg::pseudo_inverse(&set.assemble(&lambda).unwrap(), 1e-9).unwrap();
                let emb = embed(set.block(j), p).unwrap();
                let oracle = (full.as_matrix() * emb.as_matrix()).trace();
                assert_relative_eq!(fast, oracle, epsilon = 1e-8, max_relative = 1e-8);
            }
        }
    }

    proptest! {
        // assemble is linear in lambda.
        #[test]
        fn assemble_linear_in_lambda(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = 5;
            let blocks = vec![
                PenaltyBlock::new(
                    SymMatrix::from_gram(&DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0))),
                    0, "a"),
                PenaltyBlock::new(
                    SymMatrix::from_gram(&DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0))),
                    2, "b"),
            ];
            let set = PenaltySet::new(blocks, p).unwrap();
            let l1: Vec<f64> = (0..2).map(|_| rng.random_range(0.1..10.0)).collect();
            let l2: Vec<f64> = (0..2).map(|_| rng.random_range(0.1..10.0)).collect();
            let sum: Vec<f64> = l1.iter().zip(&l2).map(|(a, b)| a + b).collect();
            let lhs = set.assemble(&sum).unwrap();
            let rhs = set.assemble(&l1).unwrap().add(&set.assemble(&l2).unwrap());
            prop_assert!((lhs.as_matrix() - rhs.as_matrix()).norm() <= 1e-10);
        }
    }

    #[test]
    fn derivative_of_total_in_lambda_is_embedded_block() {
        // finite differences of assemble at h = 1e-6 against embed
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let p = 5;
        let blocks = vec![
            PenaltyBlock::new(
                SymMatrix::from_gram(&DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0))),
                0,
                "a",
            ),
            PenaltyBlock::new(
                SymMatrix::from_gram(&DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0))),
                3,
                "b",
            ),
        ];
        let set = PenaltySet::new(blocks, p).unwrap();
        let lambda = vec![1.3, 0.4];
        let h = 1e-6;
        for j in 0..2 {
            let mut up = lambda.clone();
            let mut dn = lambda.clone();
            up[j] += h;
            dn[j] -= h;
            let diff = (set.assemble(&up).unwrap().as_matrix()
                - set.assemble(&dn).unwrap().as_matrix())
                / (2.0 * h);
            let exact = embed(set.block(j), p).unwrap();
            let rel = (&diff - exact.as_matrix()).norm() / exact.as_matrix().norm().max(1.0);
            assert!(rel <= 1e-6, "fd derivative mismatch {rel}");
        }
    }
}
