//! Dataset (de)serialization: a little-endian binary file with a versioned
//! header (seed, vocabularies, stats, counts, unique-question manifest) and
//! length-prefixed example records, plus a JSONL mirror for inspection.

use super::grid::{GridSpec, GRID_CELLS};
use super::render::{ChannelStats, CHANNELS, IMG_BYTES};
use super::{Dataset, Example, Question, Split, Q_VOCAB_SIZE, Q_WORDS};
use crate::lang::{self, VOCAB_SIZE};
use base64::Engine;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"SYGETDS1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a dataset file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("corrupt field {what}: {detail}")]
    Corrupt { what: &'static str, detail: String },
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    fn str8(&mut self, s: &str) {
        assert!(s.len() <= u8::MAX as usize);
        self.u8(s.len() as u8);
        self.bytes(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.buf.len() {
            return Err(FormatError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f32(&mut self, what: &'static str) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn str8(&mut self, what: &'static str) -> Result<String, FormatError> {
        let n = self.u8(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| FormatError::Corrupt { what, detail: e.to_string() })
    }
}

/// Serialize the full dataset to its binary image.
pub fn to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer { buf: Vec::with_capacity(64 + ds.examples.len() * (IMG_BYTES + 32)) };
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(ds.seed);
    w.u32(ds.n_supervised);
    w.f32(ds.p_empty);

    // Unique-question manifest.
    w.u16(ds.questions.len() as u16);
    for q in &ds.questions {
        w.u16(q.uid);
        w.u8(q.template);
        w.u8(q.supervised as u8);
        w.u8(q.tokens.len() as u8);
        for &t in &q.tokens {
            w.u16(t);
        }
        w.u8(q.program.len() as u8);
        w.bytes(&q.program);
    }

    // Vocabularies.
    w.u8(Q_VOCAB_SIZE as u8);
    for word in Q_WORDS {
        w.str8(word);
    }
    w.u8(VOCAB_SIZE as u8);
    for t in lang::vocabulary() {
        w.str8(t.name);
    }

    // Standardization stats.
    for ch in 0..CHANNELS {
        w.f32(ds.stats.mean[ch]);
    }
    for ch in 0..CHANNELS {
        w.f32(ds.stats.std[ch]);
    }

    // Split counts then records.
    for split in super::SPLITS {
        w.u32(ds.split_examples(split).len() as u32);
    }
    w.u32(ds.examples.len() as u32);
    for e in &ds.examples {
        let q = &ds.questions[e.question as usize];
        let mut r = Writer { buf: Vec::with_capacity(IMG_BYTES + 64) };
        r.u16(e.question);
        r.u8(q.tokens.len() as u8);
        for &t in &q.tokens {
            r.u16(t);
        }
        r.u8(1); // ground-truth program present
        r.u8(q.program.len() as u8);
        r.bytes(&q.program);
        r.bytes(&e.grid.to_bytes());
        r.bytes(&e.image);
        r.u8(e.answer as u8);
        r.u8(e.split.tag());
        r.u8(e.supervised as u8);
        w.u32(r.buf.len() as u32);
        w.bytes(&r.buf);
    }
    w.buf
}

pub fn from_bytes(buf: &[u8]) -> Result<Dataset, FormatError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let seed = r.u64("seed")?;
    let n_supervised = r.u32("n_supervised")?;
    let p_empty = r.f32("p_empty")?;

    let n_questions = r.u16("question count")? as usize;
    let mut questions = Vec::with_capacity(n_questions);
    for _ in 0..n_questions {
        let uid = r.u16("question uid")?;
        let template = r.u8("template id")?;
        let supervised = r.u8("supervised flag")? != 0;
        let n_tok = r.u8("question length")? as usize;
        let mut tokens = Vec::with_capacity(n_tok);
        for _ in 0..n_tok {
            tokens.push(r.u16("question token")?);
        }
        let n_prog = r.u8("program length")? as usize;
        let program = r.take(n_prog, "program tokens")?.to_vec();
        let text = tokens
            .iter()
            .map(|&t| Q_WORDS.get(t as usize).copied().unwrap_or("<UNK>"))
            .collect::<Vec<_>>()
            .join(" ");
        questions.push(Question { uid, template, text, tokens, program, supervised });
    }

    let n_words = r.u8("question vocab size")? as usize;
    for i in 0..n_words {
        let w = r.str8("question vocab word")?;
        if Q_WORDS.get(i).copied() != Some(w.as_str()) {
            return Err(FormatError::Corrupt {
                what: "question vocab",
                detail: format!("word {i} is {w:?}"),
            });
        }
    }
    let n_prog_tokens = r.u8("program vocab size")? as usize;
    for i in 0..n_prog_tokens {
        let w = r.str8("program vocab word")?;
        if lang::token_name(i as u8) != w {
            return Err(FormatError::Corrupt {
                what: "program vocab",
                detail: format!("token {i} is {w:?}"),
            });
        }
    }

    let mut stats = ChannelStats { mean: [0.0; CHANNELS], std: [0.0; CHANNELS] };
    for ch in 0..CHANNELS {
        stats.mean[ch] = r.f32("mean")?;
    }
    for ch in 0..CHANNELS {
        stats.std[ch] = r.f32("std")?;
    }

    let mut split_counts = [0u32; 3];
    for c in split_counts.iter_mut() {
        *c = r.u32("split count")?;
    }
    let n_examples = r.u32("example count")? as usize;
    if n_examples != split_counts.iter().sum::<u32>() as usize {
        return Err(FormatError::Corrupt {
            what: "example count",
            detail: format!("{n_examples} != sum of split counts"),
        });
    }
    let mut examples = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let rec_len = r.u32("record length")? as usize;
        let rec_end = r.pos + rec_len;
        let question = r.u16("record question uid")?;
        let n_tok = r.u8("record question length")? as usize;
        for _ in 0..n_tok {
            r.u16("record question token")?;
        }
        let has_prog = r.u8("record program flag")?;
        if has_prog != 0 {
            let n_prog = r.u8("record program length")? as usize;
            r.take(n_prog, "record program")?;
        }
        let grid_bytes: [u8; GRID_CELLS] =
            r.take(GRID_CELLS, "record grid")?.try_into().unwrap();
        let grid = GridSpec::from_bytes(&grid_bytes).ok_or(FormatError::Corrupt {
            what: "record grid",
            detail: "cell byte out of range".into(),
        })?;
        let image = r.take(IMG_BYTES, "record image")?.to_vec();
        let answer = r.u8("record answer")? != 0;
        let split = Split::from_tag(r.u8("record split")?).ok_or(FormatError::Corrupt {
            what: "record split",
            detail: "unknown split tag".into(),
        })?;
        let supervised = r.u8("record supervised flag")? != 0;
        if r.pos != rec_end {
            let consumed = rec_len as i64 - (rec_end as i64 - r.pos as i64);
            return Err(FormatError::Corrupt {
                what: "record length",
                detail: format!("declared {rec_len}, consumed {consumed}"),
            });
        }
        if question as usize >= questions.len() {
            return Err(FormatError::Corrupt {
                what: "record question uid",
                detail: format!("{question} out of range"),
            });
        }
        examples.push(Example { question, grid, image, answer, split, supervised });
    }
    if r.pos != buf.len() {
        return Err(FormatError::Corrupt {
            what: "trailer",
            detail: format!("{} unread bytes", buf.len() - r.pos),
        });
    }
    Ok(Dataset { seed, n_supervised, p_empty, questions, examples, stats })
}

pub fn write_binary(ds: &Dataset, path: &Path) -> Result<(), FormatError> {
    let bytes = to_bytes(ds);
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<Dataset, FormatError> {
    let buf = std::fs::read(path)?;
    from_bytes(&buf)
}

/// JSONL mirror: a header object, then one object per example with the
/// image base64-encoded.
pub fn write_jsonl(ds: &Dataset, path: &Path) -> Result<(), FormatError> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    let header = serde_json::json!({
        "magic": std::str::from_utf8(MAGIC).unwrap(),
        "version": FORMAT_VERSION,
        "seed": ds.seed,
        "n_supervised": ds.n_supervised,
        "p_empty": ds.p_empty,
        "question_vocab": Q_WORDS,
        "program_vocab": lang::vocabulary().iter().map(|t| t.name).collect::<Vec<_>>(),
        "mean": ds.stats.mean,
        "std": ds.stats.std,
        "counts": super::SPLITS
            .iter()
            .map(|&s| (s.name(), ds.split_examples(s).len()))
            .collect::<std::collections::BTreeMap<_, _>>(),
    });
    writeln!(out, "{header}")?;
    let b64 = base64::engine::general_purpose::STANDARD;
    for e in &ds.examples {
        let q = &ds.questions[e.question as usize];
        let line = serde_json::json!({
            "question_uid": e.question,
            "template": q.template,
            "question": q.tokens,
            "question_text": q.text,
            "program": q.program,
            "program_text": lang::to_text(&q.program),
            "grid": e.grid.to_bytes(),
            "image_b64": b64.encode(&e.image),
            "answer": if e.answer { "yes" } else { "no" },
            "split": e.split.name(),
            "supervised": e.supervised,
        });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}
