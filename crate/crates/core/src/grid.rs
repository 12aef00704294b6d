//! Patch-grid geometry, token indexing, and the token-grid data model.
//!
//! A canvas is an `h_p x w_p` grid of patches per frame, `f` frames
//! deep; each patch is an `m_side x m_side` block of discrete visual
//! tokens. Storage is frame-major, then row-major, then col-major —
//! a layout convention only; generation order always comes from an
//! [`crate::plan::OrderPlan`].

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NWIT_MAGIC: &[u8; 4] = b"NWIT";
pub const NWIT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    /// Patch rows per frame.
    pub h_p: usize,
    /// Patch cols per frame.
    pub w_p: usize,
    /// Frames (1 for images).
    pub f: usize,
    /// Tokens per patch side.
    pub m_side: usize,
    /// Visual codebook size.
    pub vocab: usize,
}

impl GridDims {
    pub fn new(h_p: usize, w_p: usize, f: usize, m_side: usize, vocab: usize) -> Result<Self> {
        if h_p < 1 || w_p < 1 || f < 1 || m_side < 1 || vocab < 2 {
            return Err(Error::Geometry(format!(
                "invalid grid dims {h_p}x{w_p}x{f}, m_side {m_side}, vocab {vocab}"
            )));
        }
        Ok(GridDims {
            h_p,
            w_p,
            f,
            m_side,
            vocab,
        })
    }

    /// Tokens per patch.
    pub fn m(&self) -> usize {
        self.m_side * self.m_side
    }

    /// Total patches.
    pub fn n(&self) -> usize {
        self.h_p * self.w_p * self.f
    }

    pub fn contains(&self, c: PatchCoord) -> bool {
        c.row < self.h_p && c.col < self.w_p && c.frame < self.f
    }

    /// Same spatial/patch layout, different frame count.
    pub fn with_frames(&self, f: usize) -> Result<Self> {
        GridDims::new(self.h_p, self.w_p, f, self.m_side, self.vocab)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchCoord {
    pub row: usize,
    pub col: usize,
    pub frame: usize,
}

impl PatchCoord {
    pub fn new(row: usize, col: usize, frame: usize) -> Self {
        PatchCoord { row, col, frame }
    }

    /// 2D helper for single-frame grids.
    pub fn image(row: usize, col: usize) -> Self {
        PatchCoord { row, col, frame: 0 }
    }
}

/// Frame-major, then row-major, then col-major index in [0, N).
pub fn linear_index(c: PatchCoord, d: &GridDims) -> Result<usize> {
    if !d.contains(c) {
        return Err(Error::Range(format!(
            "patch ({},{},{}) outside {}x{}x{}",
            c.row, c.col, c.frame, d.h_p, d.w_p, d.f
        )));
    }
    Ok(c.frame * d.h_p * d.w_p + c.row * d.w_p + c.col)
}

/// Inverse of [`linear_index`].
pub fn coord_of(index: usize, d: &GridDims) -> Result<PatchCoord> {
    if index >= d.n() {
        return Err(Error::Range(format!("patch index {} of {}", index, d.n())));
    }
    let per_frame = d.h_p * d.w_p;
    Ok(PatchCoord {
        frame: index / per_frame,
        row: (index % per_frame) / d.w_p,
        col: index % d.w_p,
    })
}

/// Maps (patch, local token in row-major m_side x m_side layout) to the
/// token's block position (row, col) on the frame canvas.
pub fn token_slot(c: PatchCoord, local: usize, d: &GridDims) -> Result<(usize, usize)> {
    if !d.contains(c) {
        return Err(Error::Range(format!(
            "patch ({},{},{}) outside {}x{}x{}",
            c.row, c.col, c.frame, d.h_p, d.w_p, d.f
        )));
    }
    if local >= d.m() {
        return Err(Error::Range(format!(
            "local token {} of {} per patch",
            local,
            d.m()
        )));
    }
    Ok((
        c.row * d.m_side + local / d.m_side,
        c.col * d.m_side + local % d.m_side,
    ))
}

/// Discrete visual tokens for a whole canvas or video: N patches of M
/// token ids each, stored in linear-index patch order, row-major
/// within each patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    dims: GridDims,
    tokens: Vec<u16>,
}

impl TokenGrid {
    pub fn zeros(dims: GridDims) -> Self {
        TokenGrid {
            tokens: vec![0; dims.n() * dims.m()],
            dims,
        }
    }

    pub fn from_tokens(dims: GridDims, tokens: Vec<u16>) -> Result<Self> {
        if tokens.len() != dims.n() * dims.m() {
            return Err(Error::Shape(format!(
                "{} tokens for {} patches x {}",
                tokens.len(),
                dims.n(),
                dims.m()
            )));
        }
        for &t in &tokens {
            if (t as usize) >= dims.vocab {
                return Err(Error::Range(format!(
                    "token {} out of vocab {}",
                    t, dims.vocab
                )));
            }
        }
        Ok(TokenGrid { dims, tokens })
    }

    pub fn dims(&self) -> &GridDims {
        &self.dims
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn patch(&self, c: PatchCoord) -> Result<&[u16]> {
        let i = linear_index(c, &self.dims)?;
        let m = self.dims.m();
        Ok(&self.tokens[i * m..(i + 1) * m])
    }

    pub fn set_patch(&mut self, c: PatchCoord, tokens: &[u16]) -> Result<()> {
        let m = self.dims.m();
        if tokens.len() != m {
            return Err(Error::Shape(format!(
                "patch needs {} tokens, got {}",
                m,
                tokens.len()
            )));
        }
        for &t in tokens {
            if (t as usize) >= self.dims.vocab {
                return Err(Error::Range(format!(
                    "token {} out of vocab {}",
                    t, self.dims.vocab
                )));
            }
        }
        let i = linear_index(c, &self.dims)?;
        self.tokens[i * m..(i + 1) * m].copy_from_slice(tokens);
        Ok(())
    }

    /// Token at a canvas position (frame, token row, token col).
    pub fn canvas_token(&self, frame: usize, tr: usize, tc: usize) -> Result<u16> {
        let d = &self.dims;
        if frame >= d.f || tr >= d.h_p * d.m_side || tc >= d.w_p * d.m_side {
            return Err(Error::Range(format!(
                "canvas position ({frame},{tr},{tc}) outside grid"
            )));
        }
        let c = PatchCoord::new(tr / d.m_side, tc / d.m_side, frame);
        let local = (tr % d.m_side) * d.m_side + tc % d.m_side;
        Ok(self.patch(c)?[local])
    }

    pub fn set_canvas_token(&mut self, frame: usize, tr: usize, tc: usize, tok: u16) -> Result<()> {
        let d = self.dims;
        if frame >= d.f || tr >= d.h_p * d.m_side || tc >= d.w_p * d.m_side {
            return Err(Error::Range(format!(
                "canvas position ({frame},{tr},{tc}) outside grid"
            )));
        }
        if (tok as usize) >= d.vocab {
            return Err(Error::Range(format!("token {tok} out of vocab {}", d.vocab)));
        }
        let i = linear_index(PatchCoord::new(tr / d.m_side, tc / d.m_side, frame), &d)?;
        let local = (tr % d.m_side) * d.m_side + tc % d.m_side;
        self.tokens[i * d.m() + local] = tok;
        Ok(())
    }

    /// Serializes to the NWIT byte format: magic "NWIT", version u32 LE,
    /// u32 LE h_p, w_p, f, m_side, vocab, then N*M token ids as u16 LE.
    pub fn to_nwit_bytes(&self) -> Result<Vec<u8>> {
        let d = &self.dims;
        if d.vocab > u16::MAX as usize + 1 {
            return Err(Error::Format(format!(
                "vocab {} does not fit u16 tokens",
                d.vocab
            )));
        }
        let mut out = Vec::with_capacity(4 + 6 * 4 + self.tokens.len() * 2);
        out.extend_from_slice(NWIT_MAGIC);
        for v in [NWIT_VERSION, d.h_p as u32, d.w_p as u32, d.f as u32, d.m_side as u32, d.vocab as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_nwit_bytes(bytes: &[u8]) -> Result<Self> {
        let take_u32 = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::Format("truncated NWIT header".into()))
        };
        if bytes.get(0..4) != Some(NWIT_MAGIC.as_slice()) {
            return Err(Error::Format("bad NWIT magic".into()));
        }
        let version = take_u32(4)?;
        if version != NWIT_VERSION {
            return Err(Error::Format(format!("NWIT version {version} unsupported")));
        }
        let dims = GridDims::new(
            take_u32(8)? as usize,
            take_u32(12)? as usize,
            take_u32(16)? as usize,
            take_u32(20)? as usize,
            take_u32(24)? as usize,
        )?;
        let count = dims.n() * dims.m();
        let body = bytes
            .get(28..28 + count * 2)
            .ok_or_else(|| Error::Format("truncated NWIT body".into()))?;
        if bytes.len() != 28 + count * 2 {
            return Err(Error::Format("trailing bytes after NWIT body".into()));
        }
        let tokens = body
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        TokenGrid::from_tokens(dims, tokens)
    }

    pub fn write_nwit(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&self.to_nwit_bytes()?)?;
        Ok(())
    }

    pub fn read_nwit(path: &Path) -> Result<Self> {
        Self::from_nwit_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(h: usize, w: usize, f: usize) -> GridDims {
        GridDims::new(h, w, f, 4, 64).unwrap()
    }

    #[test]
    fn linear_index_examples() {
        let d1 = dims(3, 3, 1);
        assert_eq!(linear_index(PatchCoord::image(0, 0), &d1).unwrap(), 0);
        assert_eq!(linear_index(PatchCoord::image(2, 2), &d1).unwrap(), 8);
        let d2 = dims(3, 3, 2);
        assert_eq!(linear_index(PatchCoord::new(1, 1, 1), &d2).unwrap(), 13);
    }

    #[test]
    fn linear_index_rejects_out_of_range() {
        let d = dims(3, 3, 1);
        assert!(matches!(
            linear_index(PatchCoord::image(3, 0), &d),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            linear_index(PatchCoord::new(0, 0, 1), &d),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn coord_roundtrip_is_exhaustive_on_small_grids() {
        for (h, w, f) in [(1, 1, 1), (3, 3, 1), (2, 4, 3), (4, 4, 2)] {
            let d = dims(h, w, f);
            for i in 0..d.n() {
                let c = coord_of(i, &d).unwrap();
                assert_eq!(linear_index(c, &d).unwrap(), i);
            }
        }
    }

    #[test]
    fn token_slot_examples() {
        let d = dims(3, 3, 1);
        assert_eq!(token_slot(PatchCoord::image(0, 0), 0, &d).unwrap(), (0, 0));
        assert_eq!(token_slot(PatchCoord::image(0, 1), 0, &d).unwrap(), (0, 4));
        assert_eq!(token_slot(PatchCoord::image(1, 0), 5, &d).unwrap(), (5, 1));
        assert!(matches!(
            token_slot(PatchCoord::image(0, 0), 16, &d),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn token_slot_is_a_bijection_on_small_grids() {
        for (h, w, f) in [(1, 1, 1), (2, 3, 1), (4, 4, 2)] {
            let d = dims(h, w, f);
            let mut seen = std::collections::HashSet::new();
            for i in 0..d.n() {
                let c = coord_of(i, &d).unwrap();
                for m in 0..d.m() {
                    let (tr, tc) = token_slot(c, m, &d).unwrap();
                    assert!(tr < d.h_p * d.m_side && tc < d.w_p * d.m_side);
                    assert!(seen.insert((c.frame, tr, tc)), "slot reused");
                }
            }
            assert_eq!(seen.len(), d.n() * d.m());
        }
    }

    #[test]
    fn nwit_bytes_are_bit_exact() {
        let d = GridDims::new(1, 2, 1, 2, 64).unwrap();
        let g = TokenGrid::from_tokens(d, vec![1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        let bytes = g.to_nwit_bytes().unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"NWIT");
        for v in [1u32, 1, 2, 1, 2, 64] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        for t in [1u16, 2, 3, 4, 5, 6, 7, 8] {
            expected.extend_from_slice(&t.to_le_bytes());
        }
        assert_eq!(bytes, expected);
        assert_eq!(TokenGrid::from_nwit_bytes(&bytes).unwrap(), g);
    }

    #[test]
    fn nwit_rejects_bad_magic_and_truncation() {
        let d = dims(1, 1, 1);
        let g = TokenGrid::zeros(d);
        let mut bytes = g.to_nwit_bytes().unwrap();
        assert!(TokenGrid::from_nwit_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(TokenGrid::from_nwit_bytes(&bytes).is_err());
    }

    #[test]
    fn canvas_token_addressing_matches_patch_layout() {
        let d = dims(2, 2, 1);
        let mut g = TokenGrid::zeros(d);
        g.set_canvas_token(0, 5, 6, 9).unwrap();
        // Canvas (5, 6) is patch (1, 1), local row 1 col 2.
        assert_eq!(g.patch(PatchCoord::image(1, 1)).unwrap()[6], 9);
        assert_eq!(g.canvas_token(0, 5, 6).unwrap(), 9);
    }
}
