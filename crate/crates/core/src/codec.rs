//! Latent-map tokenization, synthetic sequence generators and the CVTK
//! dataset format.
//!
//! A latent map has `frames × bands × channels` cells. Patchifying stacks
//! each `p × p` neighborhood into one token of size `channels · p²`, and the
//! token grid is flattened row-major so all bands of one time slice sit next
//! to each other.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Dense `frames × bands × channels` latent map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMap {
    pub frames: usize,
    pub bands: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl LatentMap {
    pub fn new(frames: usize, bands: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != frames * bands * channels {
            return Err(Error::Geometry(format!(
                "{frames}x{bands}x{channels} map needs {} values, got {}",
                frames * bands * channels,
                values.len()
            )));
        }
        Ok(Self { frames, bands, channels, values })
    }

    pub fn zeros(frames: usize, bands: usize, channels: usize) -> Self {
        Self { frames, bands, channels, values: vec![0.0; frames * bands * channels] }
    }

    fn at(&self, f: usize, b: usize, c: usize) -> f32 {
        self.values[(f * self.bands + b) * self.channels + c]
    }

    /// Right-pad with zero frames up to `frames`.
    pub fn pad_frames_to(&self, frames: usize) -> Result<Self> {
        if frames < self.frames {
            return Err(Error::Geometry(format!("cannot pad {} frames down to {frames}", self.frames)));
        }
        let mut values = self.values.clone();
        values.resize(frames * self.bands * self.channels, 0.0);
        Ok(Self { frames, values, ..*self })
    }
}

/// How the frame axis is padded before patchifying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FramePadding {
    /// Next multiple of the patch size.
    ToPatch,
    /// Fixed latent frame count.
    ToLength(usize),
}

/// Tokenization geometry of one latent map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub frames: usize,
    pub bands: usize,
    pub channels: usize,
    pub patch: usize,
    pub padding: FramePadding,
}

impl Geometry {
    /// 10 s of 64-band mel at 10 ms hop, VAE compression 4 with 8 latent
    /// channels, patch 4; 1000 mel frames are padded to 1024 (256 latent
    /// frames) which yields 256 tokens of size 128.
    pub fn audio_10s() -> Self {
        Self::from_spectrogram(1000, 64, 4, 8, 4, 1024)
    }

    /// Geometry of the latent map for a `mel_frames × mel_bands`
    /// spectrogram compressed by `compression`, padded to `padded_mel_frames`.
    pub fn from_spectrogram(
        mel_frames: usize,
        mel_bands: usize,
        compression: usize,
        channels: usize,
        patch: usize,
        padded_mel_frames: usize,
    ) -> Self {
        Self {
            frames: mel_frames.div_ceil(compression),
            bands: mel_bands / compression,
            channels,
            patch,
            padding: FramePadding::ToLength(padded_mel_frames / compression),
        }
    }

    pub fn padded_frames(&self) -> usize {
        match self.padding {
            FramePadding::ToPatch => self.frames.div_ceil(self.patch) * self.patch,
            FramePadding::ToLength(n) => n.max(self.frames),
        }
    }

    pub fn token_count(&self) -> usize {
        (self.padded_frames() / self.patch) * (self.bands / self.patch)
    }

    pub fn token_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    fn validate(&self) -> Result<()> {
        let p = self.patch;
        if p == 0 || !self.padded_frames().is_multiple_of(p) || !self.bands.is_multiple_of(p) {
            return Err(Error::Geometry(format!(
                "extents {}x{} not divisible by patch {p}",
                self.padded_frames(),
                self.bands
            )));
        }
        Ok(())
    }
}

/// Provenance carried alongside a token sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeqMeta {
    pub source: String,
    pub pad_frames: usize,
}

/// `n` continuous tokens of dimension `dim` plus condition embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub n: usize,
    pub dim: usize,
    pub tokens: Vec<f32>,
    pub cond_len: usize,
    pub cond_dim: usize,
    pub condition: Vec<f32>,
    pub meta: SeqMeta,
}

impl TokenSequence {
    pub fn new(n: usize, dim: usize, tokens: Vec<f32>) -> Result<Self> {
        if tokens.len() != n * dim {
            return Err(Error::Geometry(format!("{n} tokens of dim {dim} need {} values", n * dim)));
        }
        Ok(Self { n, dim, tokens, cond_len: 0, cond_dim: 0, condition: Vec::new(), meta: SeqMeta::default() })
    }

    pub fn with_condition(mut self, cond_len: usize, cond_dim: usize, condition: Vec<f32>) -> Result<Self> {
        if condition.len() != cond_len * cond_dim {
            return Err(Error::Geometry("condition size mismatch".into()));
        }
        self.cond_len = cond_len;
        self.cond_dim = cond_dim;
        self.condition = condition;
        Ok(self)
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }

    pub fn condition_row(&self, j: usize) -> &[f32] {
        &self.condition[j * self.cond_dim..(j + 1) * self.cond_dim]
    }

    /// Class index of a one-hot synthetic condition (argmax of the first row).
    pub fn class_label(&self) -> Option<usize> {
        if self.cond_len == 0 {
            return None;
        }
        let row = self.condition_row(0);
        row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i)
    }
}

/// Stack `p × p × c` neighborhoods into tokens and flatten row-major.
pub fn patchify_flatten(map: &LatentMap, patch: usize) -> Result<TokenSequence> {
    if patch == 0 || !map.frames.is_multiple_of(patch) || !map.bands.is_multiple_of(patch) {
        return Err(Error::Geometry(format!(
            "extents {}x{} not divisible by patch {patch}",
            map.frames, map.bands
        )));
    }
    let (rows, cols) = (map.frames / patch, map.bands / patch);
    let dim = map.channels * patch * patch;
    let mut tokens = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for dr in 0..patch {
                for dc in 0..patch {
                    for ch in 0..map.channels {
                        tokens.push(map.at(r * patch + dr, c * patch + dc, ch));
                    }
                }
            }
        }
    }
    TokenSequence::new(rows * cols, dim, tokens)
}

/// Pad per `geom`, then patchify; records the pad count in the metadata.
pub fn tokenize(map: &LatentMap, geom: &Geometry) -> Result<TokenSequence> {
    geom.validate()?;
    if map.frames != geom.frames || map.bands != geom.bands || map.channels != geom.channels {
        return Err(Error::Geometry(format!(
            "map {}x{}x{} does not match geometry {}x{}x{}",
            map.frames, map.bands, map.channels, geom.frames, geom.bands, geom.channels
        )));
    }
    let padded = map.pad_frames_to(geom.padded_frames())?;
    let mut seq = patchify_flatten(&padded, geom.patch)?;
    seq.meta.pad_frames = geom.padded_frames() - geom.frames;
    Ok(seq)
}

/// Exact inverse of [`tokenize`]: unflatten, unpatchify and strip the
/// padded frames recorded in `seq.meta`.
pub fn unflatten_unpatchify(seq: &TokenSequence, geom: &Geometry) -> Result<LatentMap> {
    geom.validate()?;
    let p = geom.patch;
    let frames = geom.padded_frames();
    if seq.n != geom.token_count() || seq.dim != geom.token_dim() || seq.tokens.len() != frames * geom.bands * geom.channels {
        return Err(Error::Geometry(format!(
            "{} tokens of dim {} do not fill a {frames}x{}x{} map",
            seq.n, seq.dim, geom.bands, geom.channels
        )));
    }
    if seq.meta.pad_frames > frames {
        return Err(Error::Geometry("pad count exceeds frame count".into()));
    }
    let cols = geom.bands / p;
    let c = geom.channels;
    let mut map = LatentMap::zeros(frames, geom.bands, c);
    for (t, tok) in seq.tokens.chunks_exact(seq.dim).enumerate() {
        let (r, col) = (t / cols, t % cols);
        for dr in 0..p {
            for dc in 0..p {
                for ch in 0..c {
                    let (f, b) = (r * p + dr, col * p + dc);
                    map.values[(f * geom.bands + b) * c + ch] = tok[(dr * p + dc) * c + ch];
                }
            }
        }
    }
    let keep = frames - seq.meta.pad_frames;
    map.values.truncate(keep * geom.bands * c);
    map.frames = keep;
    Ok(map)
}

/// Kind of synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProcessKind {
    /// `x¹ ~ N(b_k, σ²I)`, `xⁱ = A xⁱ⁻¹ + b_k + σ ε`.
    GaussianAr,
    /// Class-dependent sinusoids over a latent map, then patchified.
    SinusoidMap,
}

/// Ground-truth parameters of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProcess {
    pub kind: ProcessKind,
    pub dim: usize,
    /// `dim × dim` transition matrix, row-major (gaussian-ar).
    pub transition: Vec<f64>,
    /// One offset vector per class.
    pub offsets: Vec<Vec<f64>>,
    pub noise_std: f64,
    /// Rows of the stored one-hot condition.
    pub cond_len: usize,
    /// Overrides the random first token when set.
    #[serde(default)]
    pub start: Option<Vec<f64>>,
    /// Patch size for sinusoid-map (bands = channels = patch).
    #[serde(default)]
    pub patch: usize,
}

impl SyntheticProcess {
    pub fn classes(&self) -> usize {
        self.offsets.len()
    }

    pub fn gaussian_ar(transition: Vec<f64>, offsets: Vec<Vec<f64>>, noise_std: f64) -> Result<Self> {
        let dim = offsets.first().map_or(0, Vec::len);
        if dim == 0 || transition.len() != dim * dim || offsets.iter().any(|o| o.len() != dim) {
            return Err(Error::Argument("inconsistent gaussian-ar dimensions".into()));
        }
        Ok(Self {
            kind: ProcessKind::GaussianAr,
            dim,
            transition,
            offsets,
            noise_std,
            cond_len: 2,
            start: None,
            patch: 0,
        })
    }

    /// Random gaussian-ar process: `A = rho · Q` for a random orthogonal `Q`
    /// (spectral radius exactly `rho`), offsets `~ N(0, offset_scale²)`.
    pub fn random_gaussian_ar(dim: usize, classes: usize, rho: f64, offset_scale: f64, noise_std: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) || classes == 0 || dim == 0 {
            return Err(Error::Argument("need dim ≥ 1, classes ≥ 1 and 0 ≤ rho < 1".into()));
        }
        let m = nalgebra::DMatrix::from_fn(dim, dim, |_, _| rng.normal());
        let q = m.qr().q();
        let transition = (0..dim * dim).map(|i| rho * q[(i / dim, i % dim)]).collect();
        let offsets = (0..classes).map(|_| (0..dim).map(|_| offset_scale * rng.normal()).collect()).collect();
        Self::gaussian_ar(transition, offsets, noise_std)
    }

    /// Sinusoid latent maps with `patch × patch` bands/channels per row;
    /// class `k` oscillates at frequency `offsets[k][0]` (cycles per frame).
    pub fn sinusoid_map(patch: usize, freqs: &[f64], noise_std: f64) -> Self {
        Self {
            kind: ProcessKind::SinusoidMap,
            dim: patch * patch * patch,
            transition: Vec::new(),
            offsets: freqs.iter().map(|&f| vec![f]).collect(),
            noise_std,
            cond_len: 2,
            start: None,
            patch,
        }
    }

    fn step(&self, prev: &[f64], k: usize, rng: &mut Rng) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|r| {
                let ax: f64 = (0..d).map(|c| self.transition[r * d + c] * prev[c]).sum();
                ax + self.offsets[k][r] + self.noise_std * rng.normal()
            })
            .collect()
    }

    /// Stationary mean `(I − A)⁻¹ b_k` by fixed-point iteration.
    pub fn stationary_mean(&self, k: usize) -> Vec<f64> {
        let d = self.dim;
        let mut m = vec![0.0; d];
        for _ in 0..10_000 {
            let next: Vec<f64> = (0..d)
                .map(|r| (0..d).map(|c| self.transition[r * d + c] * m[c]).sum::<f64>() + self.offsets[k][r])
                .collect();
            let delta = next.iter().zip(&m).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            m = next;
            if delta < 1e-14 {
                break;
            }
        }
        m
    }

    /// Stationary covariance, the fixed point of `Σ = AΣAᵀ + σ²I`.
    pub fn stationary_cov(&self) -> Vec<f64> {
        let d = self.dim;
        let a = nalgebra::DMatrix::from_row_slice(d, d, &self.transition);
        let q = nalgebra::DMatrix::<f64>::identity(d, d) * self.noise_std.powi(2);
        let mut s = q.clone();
        for _ in 0..100_000 {
            let next = &a * &s * a.transpose() + &q;
            let delta = (&next - &s).abs().max();
            s = next;
            if delta < 1e-15 {
                break;
            }
        }
        (0..d * d).map(|i| s[(i / d, i % d)]).collect()
    }
}

fn one_hot_condition(k: usize, classes: usize, cond_len: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; cond_len * classes];
    for j in 0..cond_len {
        c[j * classes + k] = 1.0;
    }
    c
}

/// Draw one length-`n` sequence of class `k`.
pub fn gen_synthetic(proc: &SyntheticProcess, n: usize, k: usize, rng: &mut Rng) -> Result<TokenSequence> {
    if n == 0 {
        return Err(Error::Argument("sequence length must be at least 1".into()));
    }
    if k >= proc.classes() {
        return Err(Error::Range(format!("class {k} of {}", proc.classes())));
    }
    let tokens: Vec<f32> = match proc.kind {
        ProcessKind::GaussianAr => {
            let mut x = match &proc.start {
                Some(s) => s.clone(),
                None => (0..proc.dim).map(|r| proc.offsets[k][r] + proc.noise_std * rng.normal()).collect(),
            };
            let mut out = Vec::with_capacity(n * proc.dim);
            out.extend(x.iter().map(|&v| v as f32));
            for _ in 1..n {
                x = proc.step(&x, k, rng);
                out.extend(x.iter().map(|&v| v as f32));
            }
            out
        }
        ProcessKind::SinusoidMap => {
            let p = proc.patch;
            let freq = proc.offsets[k][0];
            let phase = 2.0 * std::f64::consts::PI * rng.uniform();
            let frames = n * p;
            let mut values = Vec::with_capacity(frames * p * p);
            for f in 0..frames {
                for b in 0..p {
                    for c in 0..p {
                        let shift = 0.3 * b as f64 + 0.7 * c as f64;
                        let v = (2.0 * std::f64::consts::PI * freq * f as f64 + phase + shift).sin();
                        values.push((v + proc.noise_std * rng.normal()) as f32);
                    }
                }
            }
            let map = LatentMap::new(frames, p, p, values)?;
            patchify_flatten(&map, p)?.tokens
        }
    };
    let classes = proc.classes();
    TokenSequence::new(n, proc.dim, tokens)?.with_condition(proc.cond_len, classes, one_hot_condition(k, classes, proc.cond_len))
}

const MAGIC: &[u8; 4] = b"CVTK";
const VERSION: u32 = 1;

/// Write sequences in the CVTK layout (little-endian).
pub fn save_dataset(seqs: &[TokenSequence], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(seqs, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset(seqs: &[TokenSequence], w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(seqs.len()).map_err(|_| Error::Range("too many records".into()))?.to_le_bytes())?;
    for s in seqs {
        for v in [s.n, s.dim, s.cond_len, s.cond_dim] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in s.condition.iter().chain(&s.tokens) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Streaming CVTK reader; yields records in file order.
pub struct DatasetReader<R> {
    inner: R,
    offset: u64,
    remaining: u32,
    index: u32,
    failed: bool,
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut head = [0u8; 12];
        let got = read_up_to(&mut inner, &mut head)?;
        if got < 4 || &head[..4] != MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad magic, expected \"CVTK\"".into() });
        }
        if got < 12 {
            return Err(Error::Format { offset: got as u64, msg: "truncated header".into() });
        }
        let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
        }
        let count = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
        Ok(Self { inner, offset: 12, remaining: count, index: 0, failed: false })
    }

    /// Records announced by the header.
    pub fn declared(&self) -> u32 {
        self.remaining + self.index
    }

    fn read_exact_at(&mut self, buf: &mut [u8]) -> Result<()> {
        let got = read_up_to(&mut self.inner, buf)?;
        if got < buf.len() {
            return Err(Error::Format {
                offset: self.offset + got as u64,
                msg: format!("record {} truncated", self.index),
            });
        }
        self.offset += got as u64;
        Ok(())
    }

    fn read_record(&mut self) -> Result<TokenSequence> {
        let mut head = [0u8; 16];
        self.read_exact_at(&mut head)?;
        let field = |i: usize| u32::from_le_bytes(head[i * 4..i * 4 + 4].try_into().expect("4 bytes")) as usize;
        let (n, dim, cond_len, cond_dim) = (field(0), field(1), field(2), field(3));
        let mut floats = |count: usize| -> Result<Vec<f32>> {
            let mut bytes = vec![0u8; count * 4];
            self.read_exact_at(&mut bytes)?;
            Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
        };
        let condition = floats(cond_len * cond_dim)?;
        let tokens = floats(n * dim)?;
        let mut seq = TokenSequence::new(n, dim, tokens)?.with_condition(cond_len, cond_dim, condition)?;
        seq.meta.source = format!("record {}", self.index);
        Ok(seq)
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..])? {
            0 => break,
            k => got += k,
        }
    }
    Ok(got)
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<TokenSequence>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 || self.failed {
            return None;
        }
        let rec = self.read_record();
        self.failed = rec.is_err();
        self.remaining -= 1;
        self.index += 1;
        Some(rec)
    }
}

pub fn open_dataset(path: impl AsRef<Path>) -> Result<DatasetReader<BufReader<File>>> {
    DatasetReader::new(BufReader::new(File::open(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<TokenSequence>> {
    open_dataset(path)?.collect()
}
