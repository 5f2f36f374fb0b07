//! Class-agnostic segment proposals: disjoint binary masks covering the image.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};

/// `N` binary masks over an `H × W` image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProposalSet {
    /// `N × H × W`, entries 0 or 1.
    masks: Array3<u8>,
}

impl ProposalSet {
    /// Wraps raw masks without checking the partition property; see
    /// [`validate_partition`].
    pub fn from_masks(masks: Array3<u8>) -> Result<Self> {
        if masks.dim().0 == 0 {
            return Err(Error::Proposals("a proposal set needs at least one mask".into()));
        }
        if masks.iter().any(|&v| v > 1) {
            return Err(Error::Proposals("mask entries must be 0 or 1".into()));
        }
        Ok(ProposalSet { masks })
    }

    /// Builds the partition whose proposal `n` is `{p : assignment[p] == n}`.
    pub fn from_assignment(assignment: &Array2<usize>, n: usize) -> Result<Self> {
        let (h, w) = assignment.dim();
        let mut masks = Array3::<u8>::zeros((n, h, w));
        for ((y, x), &a) in assignment.indexed_iter() {
            if a >= n {
                return Err(Error::Proposals(format!("assignment {a} out of range for {n} proposals")));
            }
            masks[[a, y, x]] = 1;
        }
        Self::from_masks(masks)
    }

    pub fn len(&self) -> usize {
        self.masks.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.masks.dim().1
    }

    pub fn width(&self) -> usize {
        self.masks.dim().2
    }

    pub fn masks(&self) -> &Array3<u8> {
        &self.masks
    }

    pub fn mask(&self, n: usize) -> ArrayView2<'_, u8> {
        self.masks.index_axis(ndarray::Axis(0), n)
    }

    /// Pixel count of every proposal.
    pub fn areas(&self) -> Vec<usize> {
        (0..self.len())
            .map(|n| self.mask(n).iter().filter(|&&v| v == 1).count())
            .collect()
    }

    /// Appends empty masks until there are `n` proposals.
    pub fn padded_to(&self, n: usize) -> Result<Self> {
        let (have, h, w) = self.masks.dim();
        if n < have {
            return Err(Error::Proposals(format!(
                "cannot pad {have} proposals down to {n}"
            )));
        }
        let mut masks = Array3::<u8>::zeros((n, h, w));
        masks
            .slice_mut(ndarray::s![..have, .., ..])
            .assign(&self.masks);
        Ok(ProposalSet { masks })
    }

    /// Same proposals in the order `perm` (`perm[i]` = old index of new proposal `i`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let (_, h, w) = self.masks.dim();
        let mut masks = Array3::<u8>::zeros((perm.len(), h, w));
        for (i, &p) in perm.iter().enumerate() {
            masks
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&self.mask(p));
        }
        ProposalSet { masks }
    }
}

/// `tiles_y × tiles_x` rectangular tiles; the last tile on each axis absorbs
/// the remainder rows or columns.
pub fn generate_grid_proposals(
    height: usize,
    width: usize,
    tiles_y: usize,
    tiles_x: usize,
) -> Result<ProposalSet> {
    if tiles_y == 0 || tiles_x == 0 {
        return Err(Error::Proposals("grid needs at least one tile per axis".into()));
    }
    if tiles_y > height || tiles_x > width {
        return Err(Error::Proposals(format!(
            "{tiles_y}x{tiles_x} tiles do not fit a {height}x{width} image"
        )));
    }
    let (th, tw) = (height / tiles_y, width / tiles_x);
    let assignment = Array2::from_shape_fn((height, width), |(y, x)| {
        (y / th).min(tiles_y - 1) * tiles_x + (x / tw).min(tiles_x - 1)
    });
    ProposalSet::from_assignment(&assignment, tiles_y * tiles_x)
}

/// Labels 4-connected components of constant value. Components are numbered
/// in raster order of their first pixel.
pub fn connected_components(mask: &Array2<u8>) -> (Array2<usize>, usize) {
    let (h, w) = mask.dim();
    let mut label = Array2::from_elem((h, w), usize::MAX);
    let mut count = 0;
    let mut stack = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if label[[y0, x0]] != usize::MAX {
                continue;
            }
            let value = mask[[y0, x0]];
            label[[y0, x0]] = count;
            stack.push((y0, x0));
            while let Some((y, x)) = stack.pop() {
                let mut visit = |ny: usize, nx: usize| {
                    if label[[ny, nx]] == usize::MAX && mask[[ny, nx]] == value {
                        label[[ny, nx]] = count;
                        stack.push((ny, nx));
                    }
                };
                if y > 0 {
                    visit(y - 1, x);
                }
                if y + 1 < h {
                    visit(y + 1, x);
                }
                if x > 0 {
                    visit(y, x - 1);
                }
                if x + 1 < w {
                    visit(y, x + 1);
                }
            }
            count += 1;
        }
    }
    (label, count)
}

/// One proposal per 4-connected region of constant label (background
/// included). The class values themselves are discarded.
pub fn generate_oracle_proposals(mask: &Array2<u8>, max_n: usize) -> Result<ProposalSet> {
    if mask.is_empty() {
        return Err(Error::Proposals("empty mask".into()));
    }
    let (labels, count) = connected_components(mask);
    if count > max_n {
        return Err(Error::TooManyComponents { count, max_n });
    }
    ProposalSet::from_assignment(&labels, count)
}

/// Accepts iff every pixel is covered by exactly one proposal; otherwise
/// reports the first offending pixel in raster order.
pub fn validate_partition(proposals: &ProposalSet) -> Result<()> {
    let (n, h, w) = proposals.masks.dim();
    for y in 0..h {
        for x in 0..w {
            let count = (0..n)
                .filter(|&k| proposals.masks[[k, y, x]] == 1)
                .count();
            if count != 1 {
                return Err(Error::Partition { row: y, col: x, count });
            }
        }
    }
    Ok(())
}

const CACHE_MAGIC: &[u8; 4] = b"PROP";

/// Cache encoding: `PROP`, `u32` N, H, W (little-endian), then the N·H·W mask
/// bits row-major, most significant bit first, zero-padded to a whole byte.
pub fn proposal_cache_bytes(proposals: &ProposalSet) -> Vec<u8> {
    let (n, h, w) = proposals.masks.dim();
    let mut out = Vec::with_capacity(16 + (n * h * w).div_ceil(8));
    out.extend_from_slice(CACHE_MAGIC);
    for v in [n, h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for chunk in proposals.masks.as_slice().expect("standard layout").chunks(8) {
        let byte = chunk
            .iter()
            .enumerate()
            .fold(0u8, |acc, (i, &bit)| acc | (bit << (7 - i)));
        out.push(byte);
    }
    out
}

pub fn parse_proposal_cache(bytes: &[u8]) -> Result<ProposalSet> {
    if bytes.len() < 16 || &bytes[..4] != CACHE_MAGIC {
        return Err(Error::format("proposal cache", "missing PROP header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (n, h, w) = (word(4), word(8), word(12));
    let total = n * h * w;
    let body = &bytes[16..];
    if body.len() != total.div_ceil(8) {
        return Err(Error::format(
            "proposal cache",
            format!("expected {} payload bytes, found {}", total.div_ceil(8), body.len()),
        ));
    }
    let bits = (0..total).map(|i| (body[i / 8] >> (7 - i % 8)) & 1).collect();
    ProposalSet::from_masks(Array3::from_shape_vec((n, h, w), bits).expect("length checked"))
}

pub fn write_proposal_cache(path: &Path, proposals: &ProposalSet) -> Result<()> {
    fs::write(path, proposal_cache_bytes(proposals))?;
    Ok(())
}

pub fn read_proposal_cache(path: &Path) -> Result<ProposalSet> {
    parse_proposal_cache(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_even_split() {
        let p = generate_grid_proposals(4, 4, 2, 2).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.areas(), vec![4, 4, 4, 4]);
        validate_partition(&p).unwrap();
    }

    #[test]
    fn grid_remainder_goes_to_last_tile() {
        let p = generate_grid_proposals(5, 5, 2, 2).unwrap();
        assert_eq!(p.areas(), vec![4, 6, 6, 9]);
        assert_eq!(p.mask(3)[[4, 4]], 1);
        assert_eq!(p.mask(1)[[0, 4]], 1);
        validate_partition(&p).unwrap();
    }

    #[test]
    fn grid_single_tile_and_errors() {
        let p = generate_grid_proposals(4, 4, 1, 1).unwrap();
        assert!(p.mask(0).iter().all(|&v| v == 1));
        assert!(generate_grid_proposals(4, 4, 0, 1).is_err());
        assert!(generate_grid_proposals(4, 4, 5, 1).is_err());
    }

    fn square_on_background() -> Array2<u8> {
        let mut m = Array2::zeros((6, 6));
        m.slice_mut(ndarray::s![1..4, 2..5]).fill(5);
        m
    }

    #[test]
    fn oracle_square_and_complement() {
        let p = generate_oracle_proposals(&square_on_background(), 10).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.areas(), vec![27, 9]);
        assert_eq!(p.mask(1)[[1, 2]], 1);
        validate_partition(&p).unwrap();
    }

    #[test]
    fn oracle_background_only_and_two_blobs() {
        let p = generate_oracle_proposals(&Array2::zeros((3, 4)), 1).unwrap();
        assert_eq!(p.len(), 1);
        let mut m = Array2::zeros((4, 7));
        m[[1, 1]] = 2;
        m[[2, 1]] = 2;
        m[[1, 5]] = 2;
        let p = generate_oracle_proposals(&m, 3).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.areas(), vec![25, 2, 1]);
        assert!(matches!(
            generate_oracle_proposals(&m, 2),
            Err(Error::TooManyComponents { count: 3, max_n: 2 })
        ));
    }

    #[test]
    fn validation_reports_first_bad_pixel() {
        let mut masks = Array3::<u8>::zeros((2, 2, 2));
        masks.index_axis_mut(ndarray::Axis(0), 0).fill(1);
        masks[[1, 0, 0]] = 1;
        let p = ProposalSet::from_masks(masks.clone()).unwrap();
        assert!(matches!(
            validate_partition(&p),
            Err(Error::Partition { row: 0, col: 0, count: 2 })
        ));
        masks[[1, 0, 0]] = 0;
        masks[[0, 1, 1]] = 0;
        let p = ProposalSet::from_masks(masks).unwrap();
        assert!(matches!(
            validate_partition(&p),
            Err(Error::Partition { row: 1, col: 1, count: 0 })
        ));
    }

    #[test]
    fn padding_keeps_partition() {
        let p = generate_grid_proposals(4, 4, 2, 1).unwrap().padded_to(5).unwrap();
        assert_eq!(p.len(), 5);
        assert_eq!(p.areas(), vec![8, 8, 0, 0, 0]);
        validate_partition(&p).unwrap();
        assert!(p.padded_to(3).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let p = generate_oracle_proposals(&square_on_background(), 4).unwrap().padded_to(3).unwrap();
        let bytes = proposal_cache_bytes(&p);
        assert_eq!(&bytes[..4], b"PROP");
        assert_eq!(bytes.len(), 16 + (3 * 36usize).div_ceil(8));
        assert_eq!(parse_proposal_cache(&bytes).unwrap(), p);
        assert!(parse_proposal_cache(&bytes[..bytes.len() - 1]).is_err());
    }

    fn mask_strategy() -> impl Strategy<Value = Array2<u8>> {
        (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0u8..4, h * w)
                .prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn generators_always_partition(
            mask in mask_strategy(),
            ty in 1usize..4,
            tx in 1usize..4,
        ) {
            let p = generate_oracle_proposals(&mask, usize::MAX).unwrap();
            prop_assert!(validate_partition(&p).is_ok());
            let (h, w) = mask.dim();
            if ty <= h && tx <= w {
                prop_assert!(validate_partition(&generate_grid_proposals(h, w, ty, tx).unwrap()).is_ok());
            }
        }

        #[test]
        fn oracle_is_class_agnostic(mask in mask_strategy(), perm in Just([3u8, 0, 2, 1])) {
            let relabeled = mask.mapv(|v| perm[v as usize]);
            prop_assert_eq!(
                generate_oracle_proposals(&mask, usize::MAX).unwrap(),
                generate_oracle_proposals(&relabeled, usize::MAX).unwrap()
            );
        }

        #[test]
        fn cache_bytes_round_trip(mask in mask_strategy(), pad in 0usize..3) {
            let p = generate_oracle_proposals(&mask, usize::MAX).unwrap();
            let p = p.padded_to(p.len() + pad).unwrap();
            prop_assert_eq!(parse_proposal_cache(&proposal_cache_bytes(&p)).unwrap(), p);
        }
    }
}
