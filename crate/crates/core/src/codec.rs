//! Deterministic mock visual codec, procedural pattern datasets with
//! toy captions, and a rule-based pattern classifier.
//!
//! Every token id maps to a distinct 4x4 grayscale pixel block, so
//! decode followed by encode is exact inversion. The pattern families
//! double as the training corpus and as the evaluation oracle: the
//! classifier rules mirror the generators and accept nothing else.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridDims, TokenGrid};
use crate::numerics::CounterRng;

/// Pixels per token block side.
pub const M_PIX: usize = 4;

/// Largest codebook this block scheme can keep pairwise distinct.
pub const MAX_VOCAB: usize = 64;

/// Toy caption vocabulary: family words, period words, and sixteen
/// value words encoding token ids as two base-16 digits.
pub const TEXT_WORDS: [&str; 23] = [
    "constant", "hstripes", "vstripes", "checker", "ramp", "period2", "period4", "v0", "v1",
    "v2", "v3", "v4", "v5", "v6", "v7", "v8", "v9", "v10", "v11", "v12", "v13", "v14", "v15",
];

pub fn text_vocab() -> usize {
    TEXT_WORDS.len()
}

pub fn word_id(word: &str) -> Result<u16> {
    TEXT_WORDS
        .iter()
        .position(|w| *w == word)
        .map(|i| i as u16)
        .ok_or_else(|| Error::Range(format!("word {word:?} not in the toy vocabulary")))
}

pub fn caption_from_text(text: &str) -> Result<Vec<u16>> {
    text.split_whitespace().map(word_id).collect()
}

pub fn caption_to_text(tokens: &[u16]) -> Result<String> {
    let words: Result<Vec<&str>> = tokens
        .iter()
        .map(|&t| {
            TEXT_WORDS
                .get(t as usize)
                .copied()
                .ok_or_else(|| Error::Range(format!("caption token {t} out of vocabulary")))
        })
        .collect();
    Ok(words?.join(" "))
}

/// Procedural codebook: intensity level (id mod 16) * 17, pattern
/// (id div 16) in {flat, horizontal stripes, vertical stripes,
/// checker}. Modulated cells add 32, clamped at 255; the one intensity
/// the clamp would collapse to flat (255) modulates down instead so
/// all blocks stay pairwise distinct.
#[derive(Debug, Clone)]
pub struct Codebook {
    vocab: usize,
    blocks: Vec<Vec<u8>>,
}

impl Codebook {
    pub fn new(vocab: usize) -> Result<Self> {
        if !(2..=MAX_VOCAB).contains(&vocab) {
            return Err(Error::Config(format!(
                "codebook vocab {vocab} outside 2..={MAX_VOCAB}"
            )));
        }
        let blocks: Vec<Vec<u8>> = (0..vocab).map(block_pixels).collect();
        for a in 0..vocab {
            for b in a + 1..vocab {
                assert_ne!(blocks[a], blocks[b], "codebook blocks {a} and {b} collide");
            }
        }
        Ok(Codebook { vocab, blocks })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// m_pix x m_pix pixel block of one token id, row-major.
    pub fn block(&self, id: u16) -> Result<&[u8]> {
        self.blocks
            .get(id as usize)
            .map(|b| b.as_slice())
            .ok_or_else(|| Error::Range(format!("token {id} out of vocab {}", self.vocab)))
    }

    /// Nearest block under squared error; ties break to the lowest id.
    pub fn nearest(&self, pixels: &[u8]) -> u16 {
        debug_assert_eq!(pixels.len(), M_PIX * M_PIX);
        let mut best = 0u16;
        let mut best_d = u64::MAX;
        for (id, block) in self.blocks.iter().enumerate() {
            let mut d = 0u64;
            for (a, b) in block.iter().zip(pixels.iter()) {
                let diff = *a as i64 - *b as i64;
                d += (diff * diff) as u64;
            }
            if d < best_d {
                best_d = d;
                best = id as u16;
            }
        }
        best
    }
}

fn block_pixels(id: usize) -> Vec<u8> {
    let intensity = ((id % 16) * 17) as i32;
    let on = if intensity + 32 <= 255 {
        intensity + 32
    } else {
        intensity - 32
    };
    let pattern = id / 16;
    let mut px = vec![0u8; M_PIX * M_PIX];
    for r in 0..M_PIX {
        for c in 0..M_PIX {
            let modulated = match pattern {
                0 => false,
                1 => r % 2 == 0,
                2 => c % 2 == 0,
                _ => (r + c) % 2 == 0,
            };
            px[r * M_PIX + c] = if modulated { on as u8 } else { intensity as u8 };
        }
    }
    px
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> u8 {
        self.pixels[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.pixels[r * self.width + c] = v;
    }

    /// Binary PPM (P6, 8-bit, grayscale replicated to RGB).
    pub fn ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for &p in &self.pixels {
            out.extend_from_slice(&[p, p, p]);
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.ppm_bytes())?;
        Ok(())
    }
}

/// Paints one frame of a token grid through the codebook.
pub fn decode_image(book: &Codebook, grid: &TokenGrid, frame: usize) -> Result<GrayImage> {
    let d = grid.dims();
    if frame >= d.f {
        return Err(Error::Range(format!("frame {frame} of {}", d.f)));
    }
    if d.vocab > book.vocab() {
        return Err(Error::Config(format!(
            "grid vocab {} exceeds codebook {}",
            d.vocab,
            book.vocab()
        )));
    }
    let mut img = GrayImage::new(d.w_p * d.m_side * M_PIX, d.h_p * d.m_side * M_PIX);
    for tr in 0..d.h_p * d.m_side {
        for tc in 0..d.w_p * d.m_side {
            let block = book.block(grid.canvas_token(frame, tr, tc)?)?;
            for r in 0..M_PIX {
                for c in 0..M_PIX {
                    img.set(tr * M_PIX + r, tc * M_PIX + c, block[r * M_PIX + c]);
                }
            }
        }
    }
    Ok(img)
}

/// Inverts [`decode_image`]: maps each block to its nearest codebook
/// entry. Exact on codec output because blocks are pairwise distinct.
pub fn encode_image(book: &Codebook, img: &GrayImage, m_side: usize) -> Result<TokenGrid> {
    let span = m_side * M_PIX;
    if img.width % span != 0 || img.height % span != 0 || img.width == 0 || img.height == 0 {
        return Err(Error::Geometry(format!(
            "image {}x{} not divisible into {span}-pixel patches",
            img.width, img.height
        )));
    }
    let dims = GridDims::new(img.height / span, img.width / span, 1, m_side, book.vocab())?;
    let mut grid = TokenGrid::zeros(dims);
    let mut block = vec![0u8; M_PIX * M_PIX];
    for tr in 0..dims.h_p * dims.m_side {
        for tc in 0..dims.w_p * dims.m_side {
            for r in 0..M_PIX {
                for c in 0..M_PIX {
                    block[r * M_PIX + c] = img.at(tr * M_PIX + r, tc * M_PIX + c);
                }
            }
            grid.set_canvas_token(0, tr, tc, book.nearest(&block))?;
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatternFamily {
    Constant,
    HStripes,
    VStripes,
    Checker,
    Ramp,
}

impl PatternFamily {
    pub fn word(&self) -> &'static str {
        match self {
            PatternFamily::Constant => "constant",
            PatternFamily::HStripes => "hstripes",
            PatternFamily::VStripes => "vstripes",
            PatternFamily::Checker => "checker",
            PatternFamily::Ramp => "ramp",
        }
    }
}

/// One synthetic sample: family plus its parameters. The rendered grid
/// is a deterministic function of (spec, dims).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub family: PatternFamily,
    /// Full stripe/checker cycle in tokens (2 or 4).
    pub period: usize,
    pub base: u16,
    pub delta: u16,
}

impl PatternSpec {
    fn second(&self, vocab: usize) -> u16 {
        ((self.base as usize + self.delta as usize) % vocab) as u16
    }

    pub fn render(&self, dims: &GridDims) -> Result<TokenGrid> {
        let vocab = dims.vocab;
        if (self.base as usize) >= vocab || self.delta as usize >= vocab {
            return Err(Error::Range(format!(
                "pattern params base {} delta {} for vocab {vocab}",
                self.base, self.delta
            )));
        }
        let mut grid = TokenGrid::zeros(*dims);
        let half = (self.period / 2).max(1);
        let b = self.second(vocab);
        for frame in 0..dims.f {
            for tr in 0..dims.h_p * dims.m_side {
                for tc in 0..dims.w_p * dims.m_side {
                    let tok = match self.family {
                        PatternFamily::Constant => self.base,
                        PatternFamily::HStripes => {
                            if (tr / half) % 2 == 0 {
                                self.base
                            } else {
                                b
                            }
                        }
                        PatternFamily::VStripes => {
                            if (tc / half) % 2 == 0 {
                                self.base
                            } else {
                                b
                            }
                        }
                        PatternFamily::Checker => {
                            if (tr / half + tc / half) % 2 == 0 {
                                self.base
                            } else {
                                b
                            }
                        }
                        PatternFamily::Ramp => {
                            ((self.base as usize + tc * self.delta as usize) % vocab) as u16
                        }
                    };
                    grid.set_canvas_token(frame, tr, tc, tok)?;
                }
            }
        }
        Ok(grid)
    }

    /// Toy caption naming the family and its structural parameters
    /// (period and step, spelled as two base-16 value words). The base
    /// token is content, not structure, and stays out of the caption.
    pub fn caption(&self) -> Vec<u16> {
        let hex = |v: u16| {
            [
                word_id(&format!("v{}", v / 16)).unwrap(),
                word_id(&format!("v{}", v % 16)).unwrap(),
            ]
        };
        let mut words = vec![word_id(self.family.word()).unwrap()];
        match self.family {
            PatternFamily::Constant => {}
            PatternFamily::HStripes | PatternFamily::VStripes | PatternFamily::Checker => {
                words.push(word_id(&format!("period{}", self.period)).unwrap());
                words.extend(hex(self.delta));
            }
            PatternFamily::Ramp => {
                words.extend(hex(self.delta));
            }
        }
        words
    }
}

/// Pattern-parameter pool for dataset sampling. Base tokens are always
/// uniform over the vocabulary; periods and deltas draw from these
/// lists. The default covers the full legal space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSpace {
    pub periods: Vec<usize>,
    pub deltas: Vec<u16>,
}

impl ParamSpace {
    pub fn full(vocab: usize) -> Self {
        ParamSpace {
            periods: vec![2, 4],
            deltas: (1..vocab as u16).collect(),
        }
    }
}

/// Deterministic dataset: weighted family mix, params sampled per item.
pub fn synth_dataset(
    mix: &[(PatternFamily, f64)],
    count: usize,
    dims: &GridDims,
    seed: u64,
) -> Result<Vec<(TokenGrid, Vec<u16>, PatternSpec)>> {
    synth_dataset_in(mix, count, dims, seed, &ParamSpace::full(dims.vocab))
}

/// [`synth_dataset`] with a restricted parameter pool.
pub fn synth_dataset_in(
    mix: &[(PatternFamily, f64)],
    count: usize,
    dims: &GridDims,
    seed: u64,
    space: &ParamSpace,
) -> Result<Vec<(TokenGrid, Vec<u16>, PatternSpec)>> {
    if count < 1 || mix.is_empty() {
        return Err(Error::Config("synth_dataset needs a mix and count >= 1".into()));
    }
    let total: f64 = mix.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return Err(Error::Config("mix weights must sum to a positive value".into()));
    }
    let vocab = dims.vocab;
    if space.periods.iter().any(|&p| p != 2 && p != 4) || space.periods.is_empty() {
        return Err(Error::Config("periods must draw from {2, 4}".into()));
    }
    if space.deltas.is_empty()
        || space.deltas.iter().any(|&d| d == 0 || d as usize >= vocab)
    {
        return Err(Error::Config("deltas must draw from 1..vocab".into()));
    }
    // A half-vocab step renders as two alternating columns, which the
    // stripe rule would claim first; ramps exclude it.
    let ramp_deltas: Vec<u16> = space
        .deltas
        .iter()
        .copied()
        .filter(|&d| d as usize != vocab / 2)
        .collect();
    let wants_ramp = mix
        .iter()
        .any(|(f, w)| *f == PatternFamily::Ramp && *w > 0.0);
    if wants_ramp && ramp_deltas.is_empty() {
        return Err(Error::Config("no legal ramp delta in the pool".into()));
    }

    let mut out = Vec::with_capacity(count);
    let mut rng = CounterRng::new(seed, "synth");
    for _ in 0..count {
        let mut pick = rng.uniform() as f64 * total;
        let mut family = mix[mix.len() - 1].0;
        for (f, w) in mix {
            if pick < *w {
                family = *f;
                break;
            }
            pick -= w;
        }
        let base = rng.below(vocab as u64) as u16;
        let period = *rng.choice(&space.periods);
        let delta = match family {
            PatternFamily::Constant => 0,
            PatternFamily::Ramp => *rng.choice(&ramp_deltas),
            _ => *rng.choice(&space.deltas),
        };
        let spec = PatternSpec {
            family,
            period,
            base,
            delta,
        };
        let grid = spec.render(dims)?;
        let caption = spec.caption();
        out.push((grid, caption, spec));
    }
    Ok(out)
}

fn classify_frame(grid: &TokenGrid, frame: usize) -> Option<PatternFamily> {
    let d = grid.dims();
    let vocab = d.vocab;
    let th = d.h_p * d.m_side;
    let tw = d.w_p * d.m_side;
    let tok = |r: usize, c: usize| grid.canvas_token(frame, r, c).expect("in range");

    let all_equal = (0..th).all(|r| (0..tw).all(|c| tok(r, c) == tok(0, 0)));
    if all_equal {
        return Some(PatternFamily::Constant);
    }

    let rows_constant = (0..th).all(|r| (0..tw).all(|c| tok(r, c) == tok(r, 0)));
    if rows_constant {
        for half in [1usize, 2] {
            if th <= half {
                continue;
            }
            let a = tok(0, 0);
            let b = tok(half, 0);
            if a != b
                && (0..th).all(|r| tok(r, 0) == if (r / half) % 2 == 0 { a } else { b })
            {
                return Some(PatternFamily::HStripes);
            }
        }
        return None;
    }

    let cols_constant = (0..tw).all(|c| (0..th).all(|r| tok(r, c) == tok(0, c)));
    if cols_constant {
        for half in [1usize, 2] {
            if tw <= half {
                continue;
            }
            let a = tok(0, 0);
            let b = tok(0, half);
            if a != b
                && (0..tw).all(|c| tok(0, c) == if (c / half) % 2 == 0 { a } else { b })
            {
                return Some(PatternFamily::VStripes);
            }
        }
        if tw >= 2 {
            let base = tok(0, 0) as usize;
            let delta = (tok(0, 1) as usize + vocab - base) % vocab;
            if delta != 0 && (0..tw).all(|c| tok(0, c) as usize == (base + c * delta) % vocab) {
                return Some(PatternFamily::Ramp);
            }
        }
        return None;
    }

    for half in [1usize, 2] {
        if tw <= half || th <= half {
            continue;
        }
        let a = tok(0, 0);
        let b = tok(0, half);
        if a != b
            && (0..th).all(|r| {
                (0..tw).all(|c| tok(r, c) == if (r / half + c / half) % 2 == 0 { a } else { b })
            })
        {
            return Some(PatternFamily::Checker);
        }
    }
    None
}

/// Strict rule-based detector; `None` means no family matches exactly.
/// Every frame must match the same family.
pub fn classify_pattern(grid: &TokenGrid) -> Option<PatternFamily> {
    let first = classify_frame(grid, 0)?;
    for frame in 1..grid.dims().f {
        if classify_frame(grid, frame) != Some(first) {
            return None;
        }
    }
    Some(first)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PatchCoord;

    fn dims(h: usize, w: usize) -> GridDims {
        GridDims::new(h, w, 1, 4, 64).unwrap()
    }

    #[test]
    fn codebook_blocks_are_distinct_and_match_examples() {
        let book = Codebook::new(64).unwrap();
        // Flat block 0 is all black, flat block 15 is all white.
        assert!(book.block(0).unwrap().iter().all(|&p| p == 0));
        assert!(book.block(15).unwrap().iter().all(|&p| p == 255));
        assert!(Codebook::new(1).is_err());
        assert!(Codebook::new(65).is_err());
    }

    #[test]
    fn decode_examples() {
        let book = Codebook::new(64).unwrap();
        let d = GridDims::new(1, 1, 1, 1, 64).unwrap();
        let all_zero = TokenGrid::zeros(d);
        let img = decode_image(&book, &all_zero, 0).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 0));

        let white = TokenGrid::from_tokens(d, vec![15]).unwrap();
        let img = decode_image(&book, &white, 0).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 255));
    }

    #[test]
    fn roundtrip_is_exact_over_the_full_token_range() {
        let book = Codebook::new(64).unwrap();
        // A canvas holding every token id.
        let d = dims(2, 2);
        let tokens: Vec<u16> = (0..64u16).collect();
        let grid = TokenGrid::from_tokens(d, tokens).unwrap();
        let back = encode_image(&book, &decode_image(&book, &grid, 0).unwrap(), 4).unwrap();
        assert_eq!(grid, back);
    }

    #[test]
    fn roundtrip_on_random_grids() {
        let book = Codebook::new(64).unwrap();
        let d = dims(2, 3);
        let mut rng = CounterRng::new(5, "roundtrip");
        for _ in 0..100 {
            let tokens: Vec<u16> = (0..d.n() * d.m()).map(|_| rng.below(64) as u16).collect();
            let grid = TokenGrid::from_tokens(d, tokens).unwrap();
            let back = encode_image(&book, &decode_image(&book, &grid, 0).unwrap(), 4).unwrap();
            assert_eq!(grid, back);
        }
    }

    #[test]
    fn tiled_codebook_block_encodes_to_its_own_id() {
        let book = Codebook::new(64).unwrap();
        let block = book.block(7).unwrap().to_vec();
        let mut img = GrayImage::new(16, 16);
        for r in 0..16 {
            for c in 0..16 {
                img.set(r, c, block[(r % M_PIX) * M_PIX + c % M_PIX]);
            }
        }
        let grid = encode_image(&book, &img, 4).unwrap();
        assert!(grid.tokens().iter().all(|&t| t == 7));
    }

    #[test]
    fn encode_ties_break_to_the_lowest_id() {
        let book = Codebook::new(64).unwrap();
        // Top half intensity 51 (block 3), bottom half 68 (block 4):
        // equidistant from both flat entries, farther from everything else.
        let mut pixels = vec![51u8; M_PIX * M_PIX];
        for r in 2..M_PIX {
            for c in 0..M_PIX {
                pixels[r * M_PIX + c] = 68;
            }
        }
        let dist = |id: usize| -> u64 {
            book.block(id as u16)
                .unwrap()
                .iter()
                .zip(pixels.iter())
                .map(|(a, b)| {
                    let d = *a as i64 - *b as i64;
                    (d * d) as u64
                })
                .sum()
        };
        let best = (0..64).map(dist).min().unwrap();
        let argmins: Vec<usize> = (0..64).filter(|&id| dist(id) == best).collect();
        assert_eq!(argmins, vec![3, 4], "construction must tie exactly 3 and 4");
        assert_eq!(book.nearest(&pixels), 3);
    }

    #[test]
    fn encode_rejects_bad_geometry() {
        let book = Codebook::new(64).unwrap();
        let img = GrayImage::new(15, 16);
        assert!(matches!(encode_image(&book, &img, 4), Err(Error::Geometry(_))));
    }

    #[test]
    fn vstripes_render_alternates_columns() {
        let spec = PatternSpec {
            family: PatternFamily::VStripes,
            period: 2,
            base: 4,
            delta: 5,
        };
        let grid = spec.render(&dims(1, 2)).unwrap();
        for c in 0..8 {
            let want = if c % 2 == 0 { 4 } else { 9 };
            assert_eq!(grid.canvas_token(0, 0, c).unwrap(), want);
        }
    }

    #[test]
    fn synth_is_deterministic_and_classifies_as_itself() {
        let d = dims(2, 2);
        let mix = [
            (PatternFamily::Constant, 1.0),
            (PatternFamily::HStripes, 1.0),
            (PatternFamily::VStripes, 1.0),
            (PatternFamily::Checker, 1.0),
            (PatternFamily::Ramp, 1.0),
        ];
        let a = synth_dataset(&mix, 200, &d, 99).unwrap();
        let b = synth_dataset(&mix, 200, &d, 99).unwrap();
        for ((ga, ca, _), (gb, cb, _)) in a.iter().zip(b.iter()) {
            assert_eq!(ga, gb);
            assert_eq!(ca, cb);
        }
        for (grid, _, spec) in &a {
            assert_eq!(
                classify_pattern(grid),
                Some(spec.family),
                "sample {spec:?} misclassified"
            );
        }
    }

    #[test]
    fn synth_histogram_tracks_the_requested_mix() {
        let d = dims(1, 1);
        let mix = [
            (PatternFamily::VStripes, 3.0),
            (PatternFamily::Checker, 1.0),
        ];
        let data = synth_dataset(&mix, 10_000, &d, 7).unwrap();
        let v = data
            .iter()
            .filter(|(_, _, s)| s.family == PatternFamily::VStripes)
            .count() as f64
            / data.len() as f64;
        assert!((v - 0.75).abs() < 0.02, "vstripes fraction {v}");
    }

    #[test]
    fn random_grids_classify_as_unknown() {
        let d = dims(4, 4);
        let mut rng = CounterRng::new(3, "noise");
        let mut unknown = 0;
        let trials = 10_000;
        for _ in 0..trials {
            let tokens: Vec<u16> = (0..d.n() * d.m()).map(|_| rng.below(64) as u16).collect();
            let grid = TokenGrid::from_tokens(d, tokens).unwrap();
            if classify_pattern(&grid).is_none() {
                unknown += 1;
            }
        }
        assert!(unknown as f64 / trials as f64 >= 0.99);
    }

    #[test]
    fn one_flipped_token_breaks_a_constant_grid() {
        let d = dims(2, 2);
        let spec = PatternSpec {
            family: PatternFamily::Constant,
            period: 2,
            base: 11,
            delta: 0,
        };
        let mut grid = spec.render(&d).unwrap();
        assert_eq!(classify_pattern(&grid), Some(PatternFamily::Constant));
        let mut patch = grid.patch(PatchCoord::image(1, 0)).unwrap().to_vec();
        patch[5] = 12;
        grid.set_patch(PatchCoord::image(1, 0), &patch).unwrap();
        assert_eq!(classify_pattern(&grid), None);
    }

    #[test]
    fn video_frames_must_agree_on_the_family() {
        let d = GridDims::new(2, 2, 2, 4, 64).unwrap();
        let spec = PatternSpec {
            family: PatternFamily::Checker,
            period: 2,
            base: 3,
            delta: 9,
        };
        let mut grid = spec.render(&d).unwrap();
        assert_eq!(classify_pattern(&grid), Some(PatternFamily::Checker));
        // Corrupt frame 1 only.
        for c in 0..8 {
            grid.set_canvas_token(1, 0, c, 1).unwrap();
        }
        assert_eq!(classify_pattern(&grid), None);
    }

    #[test]
    fn ppm_bytes_have_the_p6_header_and_rgb_triples() {
        let mut img = GrayImage::new(2, 1);
        img.set(0, 0, 7);
        img.set(0, 1, 250);
        let bytes = img.ppm_bytes();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[7, 7, 7, 250, 250, 250]);
    }
}
