//! Deterministic codecs between raw data and model tokens: a word-level
//! vocabulary with mask/pad specials for text, and a lossless pixel-patch
//! codec for images (the desk-scale stand-in for a VAE).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const BOS: usize = 2;
pub const SPECIALS: [&str; 3] = ["[PAD]", "[MASK]", "[BOS]"];

/// Word-level vocabulary; specials first, then sorted words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub fn from_words<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        let mut list: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_lowercase())
            .collect();
        list.sort();
        list.dedup();
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(list);
        Vocabulary { words: all }
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenRange { id, vocab: self.words.len() })
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::UnknownWord { word: word.to_string() })
    }

    /// One word per line, specials first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for w in &self.words {
            writeln!(f, "{w}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut s = String::new();
        std::fs::File::open(path)?.read_to_string(&mut s)?;
        let words: Vec<String> = s.lines().map(str::to_string).collect();
        if words.len() < SPECIALS.len()
            || words[..SPECIALS.len()] != SPECIALS.map(str::to_string)
        {
            return Err(Error::Corrupt { detail: "vocabulary file missing specials".into() });
        }
        Ok(Vocabulary { words })
    }
}

/// Fixed-length token sequence: `[BOS] words.. [PAD]..`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSequence {
    pub ids: Vec<usize>,
    pub valid_len: usize,
    pub truncated: bool,
}

impl TextSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// All-pad sequence used for null-text conditioning.
    pub fn null(l_txt: usize) -> Self {
        TextSequence { ids: vec![PAD; l_txt], valid_len: 0, truncated: false }
    }
}

pub fn encode_text(caption: &str, vocab: &Vocabulary, l_txt: usize) -> Result<TextSequence> {
    let words: Vec<String> = caption.split_whitespace().map(str::to_lowercase).collect();
    let mut ids = Vec::with_capacity(l_txt);
    ids.push(BOS);
    let mut truncated = false;
    for w in &words {
        if ids.len() == l_txt {
            truncated = true;
            break;
        }
        ids.push(vocab.id(w)?);
    }
    let valid_len = ids.len();
    ids.resize(l_txt, PAD);
    Ok(TextSequence { ids, valid_len, truncated })
}

pub fn decode_text(seq: &TextSequence, vocab: &Vocabulary) -> String {
    decode_inner(seq, vocab, false)
}

/// Like [`decode_text`] but renders `[MASK]` positions as `␣?`.
pub fn decode_text_debug(seq: &TextSequence, vocab: &Vocabulary) -> String {
    decode_inner(seq, vocab, true)
}

fn decode_inner(seq: &TextSequence, vocab: &Vocabulary, debug: bool) -> String {
    let mut out: Vec<&str> = Vec::new();
    for &id in &seq.ids {
        match id {
            PAD | BOS => {}
            MASK => {
                if debug {
                    out.push("␣?");
                }
            }
            _ => out.push(vocab.word(id).unwrap_or("?")),
        }
    }
    out.join(" ")
}

// ---- pixel image and patch codec -------------------------------------------

/// H×W×3 image with channel values in [-1, 1], row-major (y, x, c).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Image::new(height, width);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamp(&mut self) {
        for v in self.data.iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
    }

    /// Quantize to bytes with the same mapping the dataset files use.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::shape("image", format!("{} bytes for {height}x{width}", bytes.len())));
        }
        let data = bytes.iter().map(|&b| f32::from(b) / 255.0 * 2.0 - 1.0).collect();
        Ok(Image { height, width, data })
    }

    /// Binary PPM (P6), the on-disk image format of the sampler.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let header_err = || Error::Corrupt { detail: format!("bad PPM header in {}", path.display()) };
        if !buf.starts_with(b"P6") {
            return Err(header_err());
        }
        // header: three whitespace-separated fields after the magic
        let mut fields = Vec::new();
        let mut i = 2;
        while fields.len() < 3 && i < buf.len() {
            while i < buf.len() && buf[i].is_ascii_whitespace() {
                i += 1;
            }
            let start = i;
            while i < buf.len() && !buf[i].is_ascii_whitespace() {
                i += 1;
            }
            fields.push(std::str::from_utf8(&buf[start..i]).map_err(|_| header_err())?.to_string());
        }
        i += 1; // single whitespace after maxval
        let w: usize = fields.first().ok_or_else(header_err)?.parse().map_err(|_| header_err())?;
        let h: usize = fields.get(1).ok_or_else(header_err)?.parse().map_err(|_| header_err())?;
        if fields.get(2).map(String::as_str) != Some("255") {
            return Err(header_err());
        }
        Image::from_bytes(h, w, buf.get(i..i + h * w * 3).ok_or_else(header_err)?)
    }
}

/// Grid of flattened p×p×3 patches.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatchGrid<T> {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub image_size: (usize, usize),
    pub tokens: Tensor<T>,
}

impl<T: Scalar> ImagePatchGrid<T> {
    pub fn token_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

pub fn patchify<T: Scalar>(image: &Image, patch: usize) -> Result<ImagePatchGrid<T>> {
    if !image.height.is_multiple_of(patch) || !image.width.is_multiple_of(patch) {
        return Err(Error::shape(
            "patchify",
            format!("{}x{} not divisible by {patch}", image.height, image.width),
        ));
    }
    let rows = image.height / patch;
    let cols = image.width / patch;
    let dim = patch * patch * 3;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for gy in 0..rows {
        for gx in 0..cols {
            for py in 0..patch {
                for px in 0..patch {
                    let rgb = image.get(gy * patch + py, gx * patch + px);
                    data.extend(rgb.iter().map(|&v| T::from_f64(f64::from(v))));
                }
            }
        }
    }
    Ok(ImagePatchGrid {
        rows,
        cols,
        patch,
        image_size: (image.height, image.width),
        tokens: Tensor::new(vec![rows * cols, dim], data)?,
    })
}

pub fn unpatchify<T: Scalar>(grid: &ImagePatchGrid<T>) -> Image {
    let mut image = Image::new(grid.image_size.0, grid.image_size.1);
    let p = grid.patch;
    let dim = grid.token_dim();
    for gy in 0..grid.rows {
        for gx in 0..grid.cols {
            let tok = &grid.tokens.data()[(gy * grid.cols + gx) * dim..][..dim];
            for py in 0..p {
                for px in 0..p {
                    let base = (py * p + px) * 3;
                    image.set(
                        gy * p + py,
                        gx * p + px,
                        [
                            tok[base].as_f64() as f32,
                            tok[base + 1].as_f64() as f32,
                            tok[base + 2].as_f64() as f32,
                        ],
                    );
                }
            }
        }
    }
    image
}

/// Rebuild a patch grid around raw token values (used by the sampler).
pub fn grid_from_tokens<T: Scalar>(
    tokens: Tensor<T>,
    rows: usize,
    cols: usize,
    patch: usize,
) -> Result<ImagePatchGrid<T>> {
    let dim = patch * patch * 3;
    if tokens.shape() != [rows * cols, dim] {
        return Err(Error::shape("grid_from_tokens", format!("{:?}", tokens.shape())));
    }
    Ok(ImagePatchGrid { rows, cols, patch, image_size: (rows * patch, cols * patch), tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn tiny_vocab() -> Vocabulary {
        Vocabulary::from_words(["a", "red", "circle", "on", "the", "left"])
    }

    #[test]
    fn specials_have_fixed_ids_and_words_are_sorted() {
        let v = tiny_vocab();
        assert_eq!(v.word(PAD).unwrap(), "[PAD]");
        assert_eq!(v.word(MASK).unwrap(), "[MASK]");
        assert_eq!(v.word(BOS).unwrap(), "[BOS]");
        assert_eq!(v.size(), 9);
        let mut words: Vec<&str> = (3..v.size()).map(|i| v.word(i).unwrap()).collect();
        let sorted = {
            let mut s = words.clone();
            s.sort();
            s
        };
        assert_eq!(words, sorted);
        words.dedup();
        assert_eq!(words.len(), 6);
    }

    #[test]
    fn encode_is_bos_prefixed_and_padded() {
        let v = tiny_vocab();
        let seq = encode_text("a red circle", &v, 8).unwrap();
        assert_eq!(seq.ids[0], BOS);
        assert_eq!(seq.valid_len, 4);
        assert_eq!(&seq.ids[4..], &[PAD; 4]);
        assert_eq!(decode_text(&seq, &v), "a red circle");
    }

    #[test]
    fn empty_caption_is_bos_then_pad() {
        let v = tiny_vocab();
        let seq = encode_text("", &v, 8).unwrap();
        assert_eq!(seq.valid_len, 1);
        assert_eq!(seq.ids[0], BOS);
        assert!(seq.ids[1..].iter().all(|&i| i == PAD));
        assert_eq!(decode_text(&seq, &v), "");
    }

    #[test]
    fn oov_word_is_named() {
        let v = tiny_vocab();
        let err = encode_text("a purple circle", &v, 8).unwrap_err();
        assert!(err.to_string().contains("purple"), "{err}");
    }

    #[test]
    fn long_caption_truncates_with_flag() {
        let v = tiny_vocab();
        let seq = encode_text("a red circle on the left", &v, 4).unwrap();
        assert!(seq.truncated);
        assert_eq!(seq.valid_len, 4);
    }

    #[test]
    fn mask_renders_only_in_debug_mode() {
        let v = tiny_vocab();
        let mut seq = encode_text("a red circle", &v, 8).unwrap();
        seq.ids[2] = MASK;
        assert_eq!(decode_text(&seq, &v), "a circle");
        assert_eq!(decode_text_debug(&seq, &v), "a ␣? circle");
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = tiny_vocab();
        let dir = std::env::temp_dir().join("unidiff_vocab_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn constant_image_patchifies_to_constant_tokens() {
        let img = Image::filled(16, 16, [0.25, -0.5, 1.0]);
        let grid = patchify::<f32>(&img, 2).unwrap();
        assert_eq!(grid.rows, 8);
        assert_eq!(grid.cols, 8);
        assert_eq!(grid.token_dim(), 12);
        for tok in grid.tokens.data().chunks_exact(12) {
            for px in tok.chunks_exact(3) {
                assert_eq!(px, &[0.25, -0.5, 1.0]);
            }
        }
    }

    #[test]
    fn patchify_rejects_indivisible_dims() {
        let img = Image::new(15, 16);
        assert!(patchify::<f32>(&img, 2).is_err());
    }

    #[test]
    fn patchify_round_trip_is_exact() {
        let mut rng = RngState::new(3);
        for &size in &[16usize, 32] {
            let mut img = Image::new(size, size);
            for v in img.data.iter_mut() {
                *v = (rng.uniform_f64() * 2.0 - 1.0) as f32;
            }
            let grid = patchify::<f32>(&img, 2).unwrap();
            assert_eq!(unpatchify(&grid), img);
        }
    }

    #[test]
    fn ppm_round_trip() {
        let mut rng = RngState::new(5);
        let bytes: Vec<u8> = (0..16 * 16 * 3).map(|_| rng.below(256) as u8).collect();
        let img = Image::from_bytes(16, 16, &bytes).unwrap();
        let dir = std::env::temp_dir().join("unidiff_ppm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("img.ppm");
        img.write_ppm(&path).unwrap();
        let back = Image::read_ppm(&path).unwrap();
        assert_eq!(back, img);
    }
}
