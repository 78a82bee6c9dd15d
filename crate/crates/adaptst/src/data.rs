//! Synthetic multilingual speech translation corpus.
//!
//! Sentences are random symbol strings; each "language" is a bijective
//! transform of the source string (identity, reversal, alphabet rotation,
//! or position interleaving), so translation quality is fully measurable.
//! "Audio" renders each source symbol as a few noisy copies of a per-symbol
//! prototype vector, giving the encoder a real alignment problem (variable
//! frame counts) without real audio.
//!
//! Per-language training-set fractions simulate the high/low-resource split;
//! dev and test stay full-size everywhere.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ── vocabulary ────────────────────────────────────────────────────────────

/// Token id layout: eos, bos, mask, then one tag per language, then the
/// content alphabet.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Vocab {
    pub n_langs: usize,
    pub n_symbols: usize,
}

impl Vocab {
    pub const EOS: usize = 0;
    pub const BOS: usize = 1;
    pub const MASK: usize = 2;

    pub fn n_special(&self) -> usize {
        3 + self.n_langs
    }

    pub fn size(&self) -> usize {
        3 + self.n_langs + self.n_symbols
    }

    pub fn lang_token(&self, lang: usize) -> usize {
        debug_assert!(lang < self.n_langs);
        3 + lang
    }

    pub fn content(&self, symbol: usize) -> usize {
        debug_assert!(symbol < self.n_symbols);
        3 + self.n_langs + symbol
    }

    pub fn to_symbol(&self, id: usize) -> Option<usize> {
        id.checked_sub(3 + self.n_langs).filter(|&s| s < self.n_symbols)
    }

    pub fn encode(&self, symbols: &[usize]) -> Vec<usize> {
        symbols.iter().map(|&s| self.content(s)).collect()
    }
}

// ── language transforms ───────────────────────────────────────────────────

/// The bijection a language applies to source symbol strings. Languages
/// cycle through the four shapes; shift amounts and interleave parity vary
/// with the language index so later languages are not clones of earlier.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Transform {
    Copy,
    Reverse,
    /// Rotate the alphabet by k.
    Shift(usize),
    /// Even positions first, then odd; or the other way around.
    Interleave { odd_first: bool },
}

pub fn transform_for(lang: usize) -> Transform {
    match lang % 4 {
        0 => Transform::Copy,
        1 => Transform::Reverse,
        2 => Transform::Shift(1 + lang / 4),
        _ => Transform::Interleave { odd_first: lang >= 4 },
    }
}

pub fn apply_transform(t: Transform, n_symbols: usize, src: &[usize]) -> Vec<usize> {
    match t {
        Transform::Copy => src.to_vec(),
        Transform::Reverse => src.iter().rev().copied().collect(),
        Transform::Shift(k) => src.iter().map(|&s| (s + k) % n_symbols).collect(),
        Transform::Interleave { odd_first } => {
            let (a, b): (Vec<usize>, Vec<usize>) = (0..src.len()).partition(|i| i % 2 == 0);
            let order = if odd_first { [b, a] } else { [a, b] };
            order.iter().flatten().map(|&i| src[i]).collect()
        }
    }
}

// ── corpus config ─────────────────────────────────────────────────────────

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_langs: usize,
    /// Content alphabet size.
    pub n_symbols: usize,
    pub feat_dim: usize,
    /// Frames rendered per source symbol, jittered by ±1 per token.
    pub frames_per_token: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Utterances generated per language before applying `fractions`.
    pub n_train_per_lang: usize,
    pub n_dev_per_lang: usize,
    pub n_test_per_lang: usize,
    /// Kept fraction of each language's training data (floor semantics).
    pub fractions: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_langs: 8,
            n_symbols: 30,
            feat_dim: 16,
            frames_per_token: 4,
            min_len: 3,
            max_len: 10,
            n_train_per_lang: 400,
            n_dev_per_lang: 40,
            n_test_per_lang: 60,
            fractions: vec![1.0, 1.0, 0.5, 0.5, 0.2, 0.2, 0.1, 0.1],
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab { n_langs: self.n_langs, n_symbols: self.n_symbols }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_langs == 0 {
            return bad("need at least one language".into());
        }
        if self.n_symbols < 2 {
            return bad("alphabet rotation needs at least two symbols".into());
        }
        if self.feat_dim == 0 {
            return bad("feat_dim must be positive".into());
        }
        if self.frames_per_token < 2 {
            return bad("frames_per_token must be at least 2 so jitter keeps one frame".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        if self.n_train_per_lang == 0 || self.n_dev_per_lang == 0 || self.n_test_per_lang == 0 {
            return bad("every split needs at least one utterance per language".into());
        }
        if self.fractions.len() != self.n_langs {
            return bad(format!(
                "{} fractions for {} languages",
                self.fractions.len(),
                self.n_langs
            ));
        }
        for (l, &f) in self.fractions.iter().enumerate() {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("fraction {f} for language {l} outside (0, 1]"));
            }
            if (f * self.n_train_per_lang as f64).floor() < 1.0 {
                return bad(format!(
                    "fraction {f} of {} training utterances floors to zero",
                    self.n_train_per_lang
                ));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("bad noise_std {}", self.noise_std));
        }
        Ok(())
    }
}

// ── utterances and corpus ─────────────────────────────────────────────────

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Utterance {
    pub lang: usize,
    /// Source symbols, 0-based into the content alphabet.
    pub src: Vec<usize>,
    /// Target symbols under the language's transform.
    pub tgt: Vec<usize>,
    /// Rendered features, row-major [n_frames × feat_dim].
    #[serde(skip)]
    pub frames: Vec<f32>,
    pub n_frames: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

pub struct Corpus {
    pub config: DataConfig,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[Utterance] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    /// Utterances of one language within a split, in corpus order.
    pub fn of_lang(&self, s: Split, lang: usize) -> Vec<&Utterance> {
        self.split(s).iter().filter(|u| u.lang == lang).collect()
    }
}

/// One seed, many independent streams: stream 0 draws symbol prototypes,
/// streams 1.. drive per-language splits and shuffles.
fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gen_utterance(cfg: &DataConfig, protos: &[Vec<f32>], lang: usize, rng: &mut ChaCha8Rng) -> Utterance {
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.n_symbols)).collect();
    let tgt = apply_transform(transform_for(lang), cfg.n_symbols, &src);
    let mut frames = Vec::new();
    let mut n_frames = 0;
    for &s in &src {
        let reps = (cfg.frames_per_token as i64 + rng.gen_range(-1i64..=1)) as usize;
        for _ in 0..reps {
            for c in 0..cfg.feat_dim {
                let noise: f64 = StandardNormal.sample(rng);
                frames.push(protos[s][c] + (noise * cfg.noise_std) as f32);
            }
            n_frames += 1;
        }
    }
    Utterance { lang, src, tgt, frames, n_frames }
}

/// Generate the full corpus. Training data is drawn at full size per
/// language, shuffled, then cut to floor(fraction × n): every low-resource
/// set is a subset of what the full-resource run would have seen.
pub fn generate(cfg: &DataConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut protos_rng = rng_for(cfg.seed, 0);
    let protos: Vec<Vec<f32>> = (0..cfg.n_symbols)
        .map(|_| {
            (0..cfg.feat_dim)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut protos_rng);
                    v as f32
                })
                .collect()
        })
        .collect();

    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    for lang in 0..cfg.n_langs {
        let base = 1 + 4 * lang as u64;
        let mut full: Vec<Utterance> = {
            let mut rng = rng_for(cfg.seed, base);
            (0..cfg.n_train_per_lang)
                .map(|_| gen_utterance(cfg, &protos, lang, &mut rng))
                .collect()
        };
        let keep = (cfg.fractions[lang] * cfg.n_train_per_lang as f64).floor() as usize;
        let mut shuffle_rng = rng_for(cfg.seed, base + 3);
        full.shuffle(&mut shuffle_rng);
        full.truncate(keep);
        train.extend(full);

        let mut rng = rng_for(cfg.seed, base + 1);
        dev.extend((0..cfg.n_dev_per_lang).map(|_| gen_utterance(cfg, &protos, lang, &mut rng)));
        let mut rng = rng_for(cfg.seed, base + 2);
        test.extend((0..cfg.n_test_per_lang).map(|_| gen_utterance(cfg, &protos, lang, &mut rng)));
    }
    Ok(Corpus { config: cfg.clone(), train, dev, test })
}

/// Drop utterances whose rendered length or token count would not fit the
/// model. Returns the survivors and how many were dropped.
pub fn filter_long(
    utts: Vec<Utterance>,
    max_frames: usize,
    max_tokens: usize,
) -> (Vec<Utterance>, usize) {
    let before = utts.len();
    let kept: Vec<Utterance> = utts
        .into_iter()
        .filter(|u| u.n_frames <= max_frames && u.src.len() <= max_tokens && u.tgt.len() <= max_tokens)
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

// ── span masking ──────────────────────────────────────────────────────────

/// Probability of opening a mask span at a position, tuned so spans of
/// length 1..=3 (mean 2) cover 30% of a long sequence:
/// 2p / (2p + (1-p)) = 0.3.
pub const SPAN_START_P: f64 = 0.3 / 1.7;

/// Renewal span masking: scan left to right, open a span with probability
/// `SPAN_START_P`, draw its length uniformly from 1..=3, replace those
/// tokens with `mask_id`, and resume after the span.
pub fn span_mask(tokens: &[usize], mask_id: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = tokens.to_vec();
    let mut i = 0;
    while i < out.len() {
        if rng.gen::<f64>() < SPAN_START_P {
            let span = rng.gen_range(1..=3usize);
            let end = (i + span).min(out.len());
            for cell in out[i..end].iter_mut() {
                *cell = mask_id;
            }
            i += span;
        } else {
            i += 1;
        }
    }
    out
}

// ── supervised examples ───────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Frames to target-language text, tagged with the language token.
    St,
    /// Frames to source symbols.
    Asr,
    /// Span-masked source tokens to clean source tokens.
    Denoise,
}

/// One teacher-forced training example. `prefix` and `targets` are the
/// decoder input and its shifted supervision; always the same length.
#[derive(Clone, PartialEq, Debug)]
pub struct Example {
    pub enc_frames: Option<(Vec<f32>, usize)>,
    pub enc_tokens: Option<Vec<usize>>,
    pub prefix: Vec<usize>,
    pub targets: Vec<usize>,
    /// Language index for adapter routing; None for shared-task examples.
    pub lang: Option<usize>,
}

impl Example {
    pub fn target_tokens(&self) -> usize {
        self.targets.len()
    }
}

fn teacher_forced(start: usize, content: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut prefix = Vec::with_capacity(content.len() + 1);
    prefix.push(start);
    prefix.extend_from_slice(content);
    let mut targets = content.to_vec();
    targets.push(Vocab::EOS);
    (prefix, targets)
}

pub fn st_example(u: &Utterance, v: &Vocab) -> Example {
    let content = v.encode(&u.tgt);
    let (prefix, targets) = teacher_forced(v.lang_token(u.lang), &content);
    Example {
        enc_frames: Some((u.frames.clone(), u.n_frames)),
        enc_tokens: None,
        prefix,
        targets,
        lang: Some(u.lang),
    }
}

pub fn asr_example(u: &Utterance, v: &Vocab) -> Example {
    let content = v.encode(&u.src);
    let (prefix, targets) = teacher_forced(Vocab::BOS, &content);
    Example {
        enc_frames: Some((u.frames.clone(), u.n_frames)),
        enc_tokens: None,
        prefix,
        targets,
        lang: None,
    }
}

pub fn denoise_example(u: &Utterance, v: &Vocab, rng: &mut ChaCha8Rng) -> Example {
    let clean = v.encode(&u.src);
    let corrupted = span_mask(&clean, Vocab::MASK, rng);
    let (prefix, targets) = teacher_forced(Vocab::BOS, &clean);
    Example {
        enc_frames: None,
        enc_tokens: Some(corrupted),
        prefix,
        targets,
        lang: None,
    }
}

// ── persistence ───────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct UttRecord {
    lang: usize,
    src: Vec<usize>,
    tgt: Vec<usize>,
    n_frames: usize,
    /// Frame offset (in rows) into the split's .bin file.
    offset: usize,
}

/// Write a corpus as a directory: config.json, plus per split a .jsonl of
/// utterance records and a .bin of little-endian f32 frames.
pub fn save_dir(corpus: &Corpus, dir: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::io(dir.display().to_string(), e);
    fs::create_dir_all(dir).map_err(io)?;
    let cfg_path = dir.join("config.json");
    let cfg_json = serde_json::to_string_pretty(&corpus.config)
        .map_err(|e| Error::json(cfg_path.display().to_string(), e))?;
    fs::write(&cfg_path, cfg_json).map_err(io)?;

    for split in Split::ALL {
        let utts = corpus.split(split);
        let mut records = String::new();
        let mut frames: Vec<u8> = Vec::new();
        let mut offset = 0;
        for u in utts {
            let rec = UttRecord {
                lang: u.lang,
                src: u.src.clone(),
                tgt: u.tgt.clone(),
                n_frames: u.n_frames,
                offset,
            };
            records.push_str(
                &serde_json::to_string(&rec)
                    .map_err(|e| Error::json(dir.display().to_string(), e))?,
            );
            records.push('\n');
            for v in &u.frames {
                frames.extend_from_slice(&v.to_le_bytes());
            }
            offset += u.n_frames;
        }
        fs::write(dir.join(format!("{}.jsonl", split.name())), records).map_err(io)?;
        fs::write(dir.join(format!("{}.bin", split.name())), frames).map_err(io)?;
    }
    Ok(())
}

pub fn load_dir(dir: &Path) -> Result<Corpus> {
    let cfg_path = dir.join("config.json");
    let cfg_text = fs::read_to_string(&cfg_path)
        .map_err(|e| Error::io(cfg_path.display().to_string(), e))?;
    let config: DataConfig = serde_json::from_str(&cfg_text)
        .map_err(|e| Error::json(cfg_path.display().to_string(), e))?;
    config.validate()?;

    let mut splits: BTreeMap<&str, Vec<Utterance>> = BTreeMap::new();
    for split in Split::ALL {
        let jsonl_path = dir.join(format!("{}.jsonl", split.name()));
        let text = fs::read_to_string(&jsonl_path)
            .map_err(|e| Error::io(jsonl_path.display().to_string(), e))?;
        let bin_path = dir.join(format!("{}.bin", split.name()));
        let mut bytes = Vec::new();
        fs::File::open(&bin_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(bin_path.display().to_string(), e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Corpus(format!(
                "{}: frame payload length {} is not a multiple of 4",
                bin_path.display(),
                bytes.len()
            )));
        }
        let all_frames: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let mut utts = Vec::new();
        for line in text.lines() {
            let rec: UttRecord = serde_json::from_str(line)
                .map_err(|e| Error::json(jsonl_path.display().to_string(), e))?;
            let start = rec.offset * config.feat_dim;
            let end = start + rec.n_frames * config.feat_dim;
            if end > all_frames.len() {
                return Err(Error::Corpus(format!(
                    "{}: frame slice {}..{} beyond payload {}",
                    bin_path.display(),
                    start,
                    end,
                    all_frames.len()
                )));
            }
            utts.push(Utterance {
                lang: rec.lang,
                src: rec.src,
                tgt: rec.tgt,
                frames: all_frames[start..end].to_vec(),
                n_frames: rec.n_frames,
            });
        }
        splits.insert(split.name(), utts);
    }
    Ok(Corpus {
        config,
        train: splits.remove("train").unwrap(),
        dev: splits.remove("dev").unwrap(),
        test: splits.remove("test").unwrap(),
    })
}

// ──────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DataConfig {
        DataConfig {
            n_langs: 8,
            n_symbols: 10,
            feat_dim: 4,
            frames_per_token: 4,
            min_len: 2,
            max_len: 6,
            n_train_per_lang: 20,
            n_dev_per_lang: 4,
            n_test_per_lang: 5,
            fractions: vec![1.0, 1.0, 0.5, 0.5, 0.2, 0.2, 0.1, 0.1],
            noise_std: 0.1,
            seed: 11,
        }
    }

    #[test]
    fn vocab_layout_is_contiguous() {
        let v = Vocab { n_langs: 8, n_symbols: 30 };
        assert_eq!(v.size(), 41);
        assert_eq!(v.n_special(), 11);
        assert_eq!(Vocab::EOS, 0);
        assert_eq!(Vocab::BOS, 1);
        assert_eq!(Vocab::MASK, 2);
        assert_eq!(v.lang_token(0), 3);
        assert_eq!(v.lang_token(7), 10);
        assert_eq!(v.content(0), 11);
        assert_eq!(v.content(29), 40);
        assert_eq!(v.to_symbol(11), Some(0));
        assert_eq!(v.to_symbol(40), Some(29));
        assert_eq!(v.to_symbol(10), None);
        assert_eq!(v.to_symbol(41), None);
        assert_eq!(v.encode(&[0, 29, 3]), vec![11, 40, 14]);
    }

    /// Independent inverse of every transform; round-tripping proves
    /// bijectivity on the sequences we generate.
    fn invert(t: Transform, n_symbols: usize, out: &[usize]) -> Vec<usize> {
        match t {
            Transform::Copy => out.to_vec(),
            Transform::Reverse => out.iter().rev().copied().collect(),
            Transform::Shift(k) => out
                .iter()
                .map(|&s| (s + n_symbols - (k % n_symbols)) % n_symbols)
                .collect(),
            Transform::Interleave { odd_first } => {
                let n = out.len();
                let evens = n.div_ceil(2);
                let odds = n - evens;
                let (first, second) = if odd_first { (odds, evens) } else { (evens, odds) };
                let mut src = vec![0; n];
                for (j, &v) in out[..first].iter().enumerate() {
                    let pos = if odd_first { 2 * j + 1 } else { 2 * j };
                    src[pos] = v;
                }
                for (j, &v) in out[first..first + second].iter().enumerate() {
                    let pos = if odd_first { 2 * j } else { 2 * j + 1 };
                    src[pos] = v;
                }
                src
            }
        }
    }

    #[test]
    fn transforms_are_bijective() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for lang in 0..8 {
            let t = transform_for(lang);
            for _ in 0..50 {
                let len = rng.gen_range(1..9);
                let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..10)).collect();
                let out = apply_transform(t, 10, &src);
                assert_eq!(out.len(), src.len());
                assert!(out.iter().all(|&s| s < 10));
                assert_eq!(invert(t, 10, &out), src, "lang {lang} {t:?} on {src:?}");
            }
        }
    }

    #[test]
    fn transform_hand_cases() {
        assert_eq!(apply_transform(Transform::Copy, 10, &[1, 2, 3]), vec![1, 2, 3]);
        assert_eq!(apply_transform(Transform::Reverse, 10, &[1, 2, 3]), vec![3, 2, 1]);
        assert_eq!(apply_transform(Transform::Shift(2), 10, &[0, 8, 9]), vec![2, 0, 1]);
        assert_eq!(
            apply_transform(Transform::Interleave { odd_first: false }, 10, &[1, 2, 3, 4, 5]),
            vec![1, 3, 5, 2, 4]
        );
        assert_eq!(
            apply_transform(Transform::Interleave { odd_first: true }, 10, &[1, 2, 3, 4, 5]),
            vec![2, 4, 1, 3, 5]
        );
        // the four shapes cycle with the language index
        assert_eq!(transform_for(0), Transform::Copy);
        assert_eq!(transform_for(1), Transform::Reverse);
        assert_eq!(transform_for(2), Transform::Shift(1));
        assert_eq!(transform_for(3), Transform::Interleave { odd_first: false });
        assert_eq!(transform_for(6), Transform::Shift(2));
        assert_eq!(transform_for(7), Transform::Interleave { odd_first: true });
    }

    #[test]
    fn generation_respects_fractions_with_floor() {
        let corpus = generate(&small_cfg()).unwrap();
        // floor(20 × f) per language: 20, 20, 10, 10, 4, 4, 2, 2
        let want = [20, 20, 10, 10, 4, 4, 2, 2];
        for lang in 0..8 {
            assert_eq!(corpus.of_lang(Split::Train, lang).len(), want[lang], "lang {lang}");
            assert_eq!(corpus.of_lang(Split::Dev, lang).len(), 4);
            assert_eq!(corpus.of_lang(Split::Test, lang).len(), 5);
        }
        assert_eq!(corpus.train.len(), want.iter().sum::<usize>());
    }

    #[test]
    fn low_resource_sets_are_subsets_of_full_resource_runs() {
        let mut full_cfg = small_cfg();
        full_cfg.fractions = vec![1.0; 8];
        let full = generate(&full_cfg).unwrap();
        let part = generate(&small_cfg()).unwrap();
        for u in &part.train {
            assert!(
                full.train
                    .iter()
                    .any(|f| f.lang == u.lang && f.src == u.src && f.frames == u.frames),
                "subsampled utterance missing from the full set"
            );
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = generate(&small_cfg()).unwrap();
        let b = generate(&small_cfg()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        let frames_bits = |c: &Corpus| -> Vec<u32> {
            c.train.iter().flat_map(|u| u.frames.iter().map(|f| f.to_bits())).collect()
        };
        assert_eq!(frames_bits(&a), frames_bits(&b));
        let mut other = small_cfg();
        other.seed = 12;
        let c = generate(&other).unwrap();
        assert_ne!(frames_bits(&a), frames_bits(&c));
    }

    #[test]
    fn utterances_obey_their_language_transform() {
        let corpus = generate(&small_cfg()).unwrap();
        for split in Split::ALL {
            for u in corpus.split(split) {
                let want = apply_transform(transform_for(u.lang), 10, &u.src);
                assert_eq!(u.tgt, want);
                assert!(u.src.len() >= 2 && u.src.len() <= 6);
                assert_eq!(u.frames.len(), u.n_frames * 4);
                assert!(u.n_frames >= 3 * u.src.len() && u.n_frames <= 5 * u.src.len());
            }
        }
    }

    #[test]
    fn frames_cluster_around_symbol_prototypes() {
        // same symbol, same prototype: frames of equal symbols across
        // utterances should be far closer than frames of different symbols
        let mut cfg = small_cfg();
        cfg.noise_std = 0.05;
        let corpus = generate(&cfg).unwrap();
        let mut by_symbol: BTreeMap<usize, Vec<&[f32]>> = BTreeMap::new();
        for u in &corpus.dev {
            // frames_per_token jitters ±1, so only single-symbol lookups
            // are unambiguous; use the first frame of the first symbol
            by_symbol.entry(u.src[0]).or_default().push(&u.frames[..4]);
        }
        let dist = |a: &[f32], b: &[f32]| -> f32 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
        };
        let mut same = Vec::new();
        let mut diff = Vec::new();
        let symbols: Vec<_> = by_symbol.keys().copied().collect();
        for &s in &symbols {
            let group = &by_symbol[&s];
            if group.len() >= 2 {
                same.push(dist(group[0], group[1]));
            }
        }
        for w in symbols.windows(2) {
            diff.push(dist(by_symbol[&w[0]][0], by_symbol[&w[1]][0]));
        }
        let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
        assert!(!same.is_empty() && !diff.is_empty());
        assert!(
            mean(&same) * 3.0 < mean(&diff),
            "same-symbol {} vs cross-symbol {}",
            mean(&same),
            mean(&diff)
        );
    }

    #[test]
    fn filter_long_drops_only_oversized() {
        let corpus = generate(&small_cfg()).unwrap();
        let n = corpus.train.len();
        let (kept, dropped) = filter_long(corpus.train, 16, 100);
        assert_eq!(kept.len() + dropped, n);
        assert!(dropped > 0, "cap of 16 frames must drop some 6-symbol utterances");
        assert!(kept.iter().all(|u| u.n_frames <= 16));
        let (all, zero) = filter_long(kept.clone(), 1000, 1000);
        assert_eq!(zero, 0);
        assert_eq!(all.len(), kept.len());
    }

    #[test]
    fn config_validation_rejects_degenerate_setups() {
        let mut c = small_cfg();
        c.fractions = vec![1.0; 7];
        assert!(c.validate().is_err(), "fraction count mismatch");
        let mut c = small_cfg();
        c.fractions[7] = 0.01;
        assert!(c.validate().is_err(), "floor(0.01 × 20) is zero");
        let mut c = small_cfg();
        c.fractions[0] = 1.5;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.min_len = 7;
        c.max_len = 6;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.frames_per_token = 1;
        assert!(c.validate().is_err());
        assert!(small_cfg().validate().is_ok());
    }

    // ── span masking ──────────────────────────────────────────────────

    /// Exact expected number of masked tokens for a length-n sequence,
    /// by dynamic programming over the renewal process.
    fn expected_masked(n: usize) -> f64 {
        let p = SPAN_START_P;
        let mut m = vec![0.0f64; n + 1];
        for k in 1..=n {
            let mut spans = 0.0;
            for span in 1..=3usize {
                let used = span.min(k);
                spans += (used as f64 + m[k - used]) / 3.0;
            }
            m[k] = p * spans + (1.0 - p) * m[k - 1];
        }
        m[n]
    }

    #[test]
    fn span_mask_rate_matches_dp_oracle() {
        let n = 9;
        let trials = 60_000;
        let tokens: Vec<usize> = (11..11 + n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut total = 0usize;
        for _ in 0..trials {
            let masked = span_mask(&tokens, Vocab::MASK, &mut rng);
            total += masked.iter().filter(|&&t| t == Vocab::MASK).count();
        }
        let got = total as f64 / trials as f64;
        let want = expected_masked(n);
        // binomial-ish std error per trial is < 2 tokens; 60k trials pin
        // the mean to ~0.01
        assert!((got - want).abs() < 0.05, "mean masked {got} vs oracle {want}");
    }

    #[test]
    fn span_mask_approaches_thirty_percent_on_long_sequences() {
        let n = 20_000;
        let tokens = vec![11usize; n];
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let mut total = 0usize;
        let reps = 20;
        for _ in 0..reps {
            let masked = span_mask(&tokens, Vocab::MASK, &mut rng);
            total += masked.iter().filter(|&&t| t == Vocab::MASK).count();
        }
        let rate = total as f64 / (n * reps) as f64;
        assert!((rate - 0.3).abs() < 0.01, "asymptotic mask rate {rate}");
        // and the DP oracle agrees in the limit
        assert!((expected_masked(4000) / 4000.0 - 0.3).abs() < 1e-3);
    }

    #[test]
    fn span_mask_touches_nothing_but_masked_positions() {
        let tokens: Vec<usize> = (11..31).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        for _ in 0..50 {
            let masked = span_mask(&tokens, Vocab::MASK, &mut rng);
            assert_eq!(masked.len(), tokens.len());
            for (a, b) in tokens.iter().zip(&masked) {
                assert!(*b == Vocab::MASK || b == a);
            }
        }
    }

    // ── examples ──────────────────────────────────────────────────────

    fn hand_utterance() -> Utterance {
        // language 1 reverses
        Utterance {
            lang: 1,
            src: vec![0, 3, 2],
            tgt: vec![2, 3, 0],
            frames: vec![0.5; 3 * 4 * 4],
            n_frames: 12,
        }
    }

    #[test]
    fn st_example_tags_language_and_shifts_targets() {
        let v = Vocab { n_langs: 8, n_symbols: 10 };
        let e = st_example(&hand_utterance(), &v);
        // lang 1 token is 4; content base is 11
        assert_eq!(e.prefix, vec![4, 13, 14, 11]);
        assert_eq!(e.targets, vec![13, 14, 11, Vocab::EOS]);
        assert_eq!(e.prefix.len(), e.targets.len());
        assert_eq!(e.lang, Some(1));
        let (frames, t) = e.enc_frames.as_ref().unwrap();
        assert_eq!(*t, 12);
        assert_eq!(frames.len(), 12 * 4);
        assert!(e.enc_tokens.is_none());
    }

    #[test]
    fn asr_example_recovers_the_source() {
        let v = Vocab { n_langs: 8, n_symbols: 10 };
        let e = asr_example(&hand_utterance(), &v);
        assert_eq!(e.prefix, vec![Vocab::BOS, 11, 14, 13]);
        assert_eq!(e.targets, vec![11, 14, 13, Vocab::EOS]);
        assert_eq!(e.lang, None);
    }

    #[test]
    fn denoise_example_masks_input_but_not_supervision() {
        let v = Vocab { n_langs: 8, n_symbols: 10 };
        let u = Utterance {
            lang: 0,
            src: (0..9).collect(),
            tgt: (0..9).collect(),
            frames: vec![],
            n_frames: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let mut saw_mask = false;
        for _ in 0..20 {
            let e = denoise_example(&u, &v, &mut rng);
            assert!(e.enc_frames.is_none());
            let enc = e.enc_tokens.as_ref().unwrap();
            assert_eq!(enc.len(), 9);
            let clean = v.encode(&u.src);
            for (a, b) in enc.iter().zip(&clean) {
                assert!(*a == Vocab::MASK || a == b);
            }
            saw_mask |= enc.contains(&Vocab::MASK);
            assert_eq!(e.prefix[0], Vocab::BOS);
            assert_eq!(e.targets[..9], clean[..]);
            assert_eq!(*e.targets.last().unwrap(), Vocab::EOS);
        }
        assert!(saw_mask, "twenty draws should mask at least once");
    }

    // ── persistence ───────────────────────────────────────────────────

    #[test]
    fn save_and_load_round_trip_bitwise() {
        let corpus = generate(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dir(&corpus, dir.path()).unwrap();
        let loaded = load_dir(dir.path()).unwrap();
        assert_eq!(loaded.config, corpus.config);
        for split in Split::ALL {
            let (a, b) = (corpus.split(split), loaded.split(split));
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.lang, y.lang);
                assert_eq!(x.src, y.src);
                assert_eq!(x.tgt, y.tgt);
                assert_eq!(x.n_frames, y.n_frames);
                let xb: Vec<u32> = x.frames.iter().map(|f| f.to_bits()).collect();
                let yb: Vec<u32> = y.frames.iter().map(|f| f.to_bits()).collect();
                assert_eq!(xb, yb);
            }
        }
    }

    #[test]
    fn load_rejects_truncated_payload() {
        let corpus = generate(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dir(&corpus, dir.path()).unwrap();
        let bin = dir.path().join("train.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_dir(dir.path()).is_err());
    }
}
