//! Log parsing, variable masking, template extraction and feature-hash
//! instance embeddings.
//!
//! Embedding hash: FNV-1a over the token's UTF-8 bytes (64-bit offset basis
//! `0xcbf29ce484222325`, prime `0x100000001b3`). The index hash starts from
//! `OFFSET ^ 0x9E3779B97F4A7C15 ^ seed`, the sign hash from
//! `OFFSET ^ 0xC2B2AE3D27D4EB4F ^ seed`. A token lands in slot
//! `(h1 ^ (h1 >> 32)) mod d` with sign `-1` when the top bit of `h2` is set.

use crate::error::{Error, Result};
use rayon::prelude::*;
use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const WILDCARD: &str = "<*>";
pub const DEFAULT_DIM: usize = 64;

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
pub const INDEX_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
pub const SIGN_SALT: u64 = 0xC2B2_AE3D_27D4_EB4F;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogFormat {
    /// Alert tag first ("-" is normal), message after.
    BglStyle,
    /// `label,timestamp,message` with optional header.
    CsvLabeled,
}

impl std::str::FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bgl_style" | "bgl" => Ok(LogFormat::BglStyle),
            "csv_labeled" | "csv" => Ok(LogFormat::CsvLabeled),
            other => Err(Error::Config(format!("unknown log format `{other}`"))),
        }
    }
}

impl std::fmt::Display for LogFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LogFormat::BglStyle => "bgl_style",
            LogFormat::CsvLabeled => "csv_labeled",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub line_no: usize,
    pub raw: String,
    pub label: u8,
    pub timestamp: Option<i64>,
    /// Message tokens after variable masking.
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub template_id: usize,
    pub masked_tokens: Vec<String>,
}

/// Append-only exact-match template store with dense ids in first-seen order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TemplateTable {
    templates: Vec<Template>,
    index: HashMap<Vec<String>, usize>,
}

impl TemplateTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn get(&self, id: usize) -> Option<&Template> {
        self.templates.get(id)
    }
}

/// Look up `tokens` or insert them under the next dense id.
pub fn extract_template(tokens: &[String], table: &mut TemplateTable) -> Template {
    if let Some(&id) = table.index.get(tokens) {
        return table.templates[id].clone();
    }
    let id = table.templates.len();
    let t = Template {
        template_id: id,
        masked_tokens: tokens.to_vec(),
    };
    table.index.insert(tokens.to_vec(), id);
    table.templates.push(t.clone());
    t
}

fn is_integer(tok: &str) -> bool {
    let digits = tok.strip_prefix(['-', '+']).unwrap_or(tok);
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

fn is_hex(tok: &str) -> bool {
    let (body, prefixed) = match tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        Some(b) => (b, true),
        None => (tok, false),
    };
    body.len() >= 4
        && body.bytes().all(|b| b.is_ascii_hexdigit())
        // plain words such as "face" or "added" are not variables
        && (prefixed || body.bytes().any(|b| b.is_ascii_digit()))
}

fn is_ipv4(tok: &str) -> bool {
    let addr = match tok.rsplit_once(':') {
        Some((a, port)) if is_integer(port) => a,
        _ => tok,
    };
    let parts: Vec<&str> = addr.split('.').collect();
    parts.len() == 4
        && parts
            .iter()
            .all(|p| !p.is_empty() && p.len() <= 3 && p.bytes().all(|b| b.is_ascii_digit()) && p.parse::<u16>().map_or(false, |v| v <= 255))
}

fn is_path(tok: &str) -> bool {
    tok.contains('/')
}

pub fn is_variable(tok: &str) -> bool {
    is_integer(tok) || is_hex(tok) || is_ipv4(tok) || is_path(tok)
}

/// Replace variable-looking tokens with [`WILDCARD`], order preserved.
pub fn mask_variables<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| {
            let t = t.as_ref();
            if is_variable(t) {
                WILDCARD.to_string()
            } else {
                t.to_string()
            }
        })
        .collect()
}

fn fnv1a(bytes: &[u8], start: u64) -> u64 {
    let mut h = start;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Slot and sign a token contributes to under `seed`.
pub fn hash_token(token: &str, d: usize, seed: u64) -> (usize, f32) {
    let h1 = fnv1a(token.as_bytes(), FNV_OFFSET ^ INDEX_SALT ^ seed);
    let h2 = fnv1a(token.as_bytes(), FNV_OFFSET ^ SIGN_SALT ^ seed);
    let idx = ((h1 ^ (h1 >> 32)) % d as u64) as usize;
    let sign = if h2 >> 63 == 1 { -1.0 } else { 1.0 };
    (idx, sign)
}

/// Signed feature-hash bag-of-tokens vector, L2-normalized.
///
/// Only an empty token list yields the zero vector: when the signed sum of a
/// non-empty list cancels exactly, the unsigned slot counts are used instead.
pub fn embed_tokens<S: AsRef<str>>(tokens: &[S], d: usize, seed: u64) -> Result<Vec<f32>> {
    if d < 2 {
        return Err(Error::InvalidDimension(d));
    }
    if tokens.is_empty() {
        return Ok(vec![0.0; d]);
    }
    let mut signed = vec![0f64; d];
    let mut counts = vec![0f64; d];
    for t in tokens {
        let (i, s) = hash_token(t.as_ref(), d, seed);
        signed[i] += s as f64;
        counts[i] += 1.0;
    }
    let mut acc = signed;
    let mut norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        norm = counts.iter().map(|v| v * v).sum::<f64>().sqrt();
        acc = counts;
    }
    Ok(acc.iter().map(|v| (v / norm) as f32).collect())
}

/// Parse one line; `line_no` is carried into the record unchanged.
pub fn parse_labeled_line(line: &str, line_no: usize, format: LogFormat) -> Result<LogRecord> {
    let trimmed = line.trim_end_matches(['\r', '\n']);
    if trimmed.trim().is_empty() {
        return Err(Error::MalformedLine("empty line".into()));
    }
    match format {
        LogFormat::BglStyle => {
            let mut fields = trimmed.split_whitespace();
            let tag = fields.next().ok_or_else(|| Error::MalformedLine(trimmed.into()))?;
            let rest: Vec<&str> = fields.collect();
            if rest.is_empty() {
                return Err(Error::MalformedLine(format!("no message after tag: {trimmed}")));
            }
            let label = u8::from(tag != "-");
            let timestamp = rest.first().and_then(|t| t.parse::<i64>().ok());
            Ok(LogRecord {
                line_no,
                raw: trimmed.to_string(),
                label,
                timestamp,
                tokens: mask_variables(&rest),
            })
        }
        LogFormat::CsvLabeled => {
            let mut parts = trimmed.splitn(3, ',');
            let (Some(lab), Some(ts), Some(msg)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::MalformedLine(format!("expected label,timestamp,message: {trimmed}")));
            };
            let label = match lab.trim() {
                "0" => 0,
                "1" => 1,
                other => return Err(Error::MalformedLine(format!("bad label `{other}`"))),
            };
            let ts = ts.trim();
            let timestamp = if ts.is_empty() {
                None
            } else {
                Some(ts.parse::<i64>().map_err(|_| Error::MalformedLine(format!("bad timestamp `{ts}`")))?)
            };
            let msg = msg.trim();
            let msg = msg
                .strip_prefix('"')
                .and_then(|m| m.strip_suffix('"'))
                .unwrap_or(msg);
            let words: Vec<&str> = msg.split_whitespace().collect();
            if words.is_empty() {
                return Err(Error::MalformedLine(format!("empty message: {trimmed}")));
            }
            Ok(LogRecord {
                line_no,
                raw: trimmed.to_string(),
                label,
                timestamp,
                tokens: mask_variables(&words),
            })
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IngestOptions {
    pub format: LogFormat,
    pub d: usize,
    pub seed: u64,
    /// Lines per parallel chunk; 0 means sequential.
    pub chunk_lines: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            format: LogFormat::BglStyle,
            d: DEFAULT_DIM,
            seed: 0,
            chunk_lines: 4096,
        }
    }
}

/// Parsed corpus: one row of `embeddings` per kept record.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<LogRecord>,
    pub template_ids: Vec<usize>,
    pub templates: TemplateTable,
    pub d: usize,
    /// Row-major `records.len() x d`.
    pub embeddings: Vec<f32>,
    pub skipped: usize,
}

impl Corpus {
    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn is_csv_header(line: &str) -> bool {
    line.split(',').next().map(|f| f.trim().eq_ignore_ascii_case("label")).unwrap_or(false)
}

type LineResult = Option<(LogRecord, Vec<f32>)>;

fn process_line(line_no: usize, line: &str, opts: &IngestOptions) -> Result<LineResult> {
    if line.trim().is_empty() {
        return Ok(None);
    }
    match parse_labeled_line(line, line_no, opts.format) {
        Ok(rec) => {
            let emb = embed_tokens(&rec.tokens, opts.d, opts.seed)?;
            Ok(Some((rec, emb)))
        }
        Err(Error::MalformedLine(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Ingest text already in memory. Blank lines are dropped silently;
/// malformed lines are skipped and counted.
pub fn ingest_str(text: &str, opts: &IngestOptions) -> Result<Corpus> {
    if opts.d < 2 {
        return Err(Error::InvalidDimension(opts.d));
    }
    let mut lines: Vec<(usize, &str)> = text.lines().enumerate().map(|(i, l)| (i + 1, l)).collect();
    if opts.format == LogFormat::CsvLabeled {
        if let Some(&(_, first)) = lines.first() {
            if is_csv_header(first) {
                lines.remove(0);
            }
        }
    }
    let blank = lines.iter().filter(|(_, l)| l.trim().is_empty()).count();
    let parsed: Vec<LineResult> = if opts.chunk_lines == 0 {
        lines
            .iter()
            .map(|&(n, l)| process_line(n, l, opts))
            .collect::<Result<_>>()?
    } else {
        lines
            .par_chunks(opts.chunk_lines)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&(n, l)| process_line(n, l, opts))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect()
    };
    let mut corpus = Corpus {
        records: Vec::new(),
        template_ids: Vec::new(),
        templates: TemplateTable::new(),
        d: opts.d,
        embeddings: Vec::new(),
        skipped: 0,
    };
    let mut dropped = 0;
    // Templates are assigned sequentially after the parallel pass so ids are
    // independent of chunking.
    for item in parsed {
        match item {
            Some((rec, emb)) => {
                let t = extract_template(&rec.tokens, &mut corpus.templates);
                corpus.template_ids.push(t.template_id);
                corpus.embeddings.extend_from_slice(&emb);
                corpus.records.push(rec);
            }
            None => dropped += 1,
        }
    }
    corpus.skipped = dropped - blank;
    Ok(corpus)
}

pub fn ingest_file(path: &Path, opts: &IngestOptions) -> Result<Corpus> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    ingest_str(&text, opts)
}

/// Paths of the three files making up an embedding cache rooted at `base`.
#[derive(Clone, Debug)]
pub struct EmbeddingFiles {
    pub data: PathBuf,
    pub meta: PathBuf,
    pub labels: PathBuf,
}

impl EmbeddingFiles {
    pub fn at(base: &Path) -> Self {
        let with = |ext: &str| {
            let mut s = base.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        Self {
            data: base.to_path_buf(),
            meta: with(".meta"),
            labels: with(".labels"),
        }
    }
}

/// Write row-major f32 little-endian rows plus `.meta` and `.labels` sidecars.
pub fn write_embeddings(base: &Path, embeddings: &[f32], d: usize, labels: &[u8]) -> Result<()> {
    if d == 0 || embeddings.len() != labels.len() * d {
        return Err(Error::ShapeMismatch(format!(
            "{} floats for {} labels at d={d}",
            embeddings.len(),
            labels.len()
        )));
    }
    let files = EmbeddingFiles::at(base);
    let mut w = BufWriter::new(File::create(&files.data)?);
    for v in embeddings {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    fs::write(&files.meta, format!("version=1\ncount={}\nd={d}\n", labels.len()))?;
    let mut lw = BufWriter::new(File::create(&files.labels)?);
    for l in labels {
        writeln!(lw, "{l}")?;
    }
    lw.flush()?;
    Ok(())
}

pub(crate) fn parse_kv(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("expected key=value, got `{line}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub(crate) fn kv_usize(map: &HashMap<String, String>, key: &str) -> Result<usize> {
    map.get(key)
        .ok_or_else(|| Error::Format(format!("missing `{key}`")))?
        .parse()
        .map_err(|_| Error::Format(format!("bad value for `{key}`")))
}

/// Precomputed embeddings: `(row-major floats, d, labels)`.
pub fn read_embeddings(base: &Path) -> Result<(Vec<f32>, usize, Vec<u8>)> {
    let files = EmbeddingFiles::at(base);
    let meta = parse_kv(&fs::read_to_string(&files.meta)?)?;
    if meta.get("version").map(String::as_str) != Some("1") {
        return Err(Error::Format("unsupported embedding version".into()));
    }
    let count = kv_usize(&meta, "count")?;
    let d = kv_usize(&meta, "d")?;
    let bytes = fs::read(&files.data)?;
    if bytes.len() != count * d * 4 {
        return Err(Error::Format(format!(
            "expected {} bytes of embeddings, found {}",
            count * d * 4,
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let labels = read_labels(&files.labels)?;
    if labels.len() != count {
        return Err(Error::Format(format!("{} labels for {count} rows", labels.len())));
    }
    Ok((data, d, labels))
}

/// One `0`/`1` label per line.
pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        match line.trim() {
            "" => continue,
            "0" => out.push(0),
            "1" => out.push(1),
            other => return Err(Error::Format(format!("bad label `{other}`"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn bgl_normal_and_alert_lines() {
        let r = parse_labeled_line(
            "- 1117838570 R02-M1-N0 RAS KERNEL INFO instruction cache parity error corrected",
            1,
            LogFormat::BglStyle,
        )
        .unwrap();
        assert_eq!(r.label, 0);
        assert_eq!(r.timestamp, Some(1117838570));
        assert_eq!(r.tokens[0], WILDCARD);
        assert_eq!(r.tokens.last().unwrap(), "corrected");

        let r = parse_labeled_line("KERNDTLB 1117838573 R02 data TLB error", 2, LogFormat::BglStyle).unwrap();
        assert_eq!(r.label, 1);
        assert_eq!(r.tokens, toks(&["<*>", "R02", "data", "TLB", "error"]));
    }

    #[test]
    fn empty_line_is_malformed() {
        assert!(matches!(parse_labeled_line("", 1, LogFormat::BglStyle), Err(Error::MalformedLine(_))));
        assert!(matches!(parse_labeled_line("-", 1, LogFormat::BglStyle), Err(Error::MalformedLine(_))));
        assert!(matches!(parse_labeled_line("1,12", 1, LogFormat::CsvLabeled), Err(Error::MalformedLine(_))));
    }

    #[test]
    fn csv_lines() {
        let r = parse_labeled_line("1,1700000000,disk /dev/sda1 failed, retrying", 3, LogFormat::CsvLabeled).unwrap();
        assert_eq!(r.label, 1);
        assert_eq!(r.timestamp, Some(1700000000));
        assert_eq!(r.tokens, toks(&["disk", "<*>", "failed,", "retrying"]));
        let r = parse_labeled_line("0,,\"link up\"", 4, LogFormat::CsvLabeled).unwrap();
        assert_eq!(r.timestamp, None);
        assert_eq!(r.tokens, toks(&["link", "up"]));
    }

    #[test]
    fn masking_rules() {
        assert_eq!(mask_variables(&["error", "code", "1234"]), toks(&["error", "code", "<*>"]));
        assert_eq!(mask_variables(&["disk", "/dev/sda1", "failed"]), toks(&["disk", "<*>", "failed"]));
        assert_eq!(mask_variables(&["link", "up"]), toks(&["link", "up"]));
        assert_eq!(
            mask_variables(&["0xdeadbeef", "10.0.0.12", "10.0.0.12:8080", "a3f9", "face", "abc"]),
            toks(&["<*>", "<*>", "<*>", "<*>", "face", "abc"])
        );
        assert_eq!(mask_variables(&["256.1.1.1x", "1.2.3"]), toks(&["256.1.1.1x", "1.2.3"]));
    }

    #[test]
    fn embedding_matches_hand_evaluated_hash() {
        // Expected values from an independent script applying FNV-1a by hand:
        // "error" -> slot 7, sign +; "disk" -> slot 3, sign -.
        let v = embed_tokens(&["error", "disk"], 8, 0).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert_eq!(v, vec![0.0, 0.0, 0.0, -h, 0.0, 0.0, 0.0, h]);
        assert_eq!(hash_token("error", 8, 0), (7, 1.0));
        assert_eq!(hash_token("disk", 8, 0), (3, -1.0));
    }

    #[test]
    fn embedding_edge_cases() {
        let empty: [&str; 0] = [];
        assert_eq!(embed_tokens(&empty, 8, 0).unwrap(), vec![0.0; 8]);
        let a = embed_tokens(&["error"], 64, 3).unwrap();
        let b = embed_tokens(&["error"], 64, 3).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(matches!(embed_tokens(&["x"], 1, 0), Err(Error::InvalidDimension(1))));
        // a pair sharing a slot with opposite signs cancels exactly at d=2
        let words: Vec<String> = (0..64).map(|i| format!("w{i}")).collect();
        let pair = words
            .iter()
            .flat_map(|a| words.iter().map(move |b| (a, b)))
            .find(|(a, b)| {
                let (ia, sa) = hash_token(a, 2, 0);
                let (ib, sb) = hash_token(b, 2, 0);
                ia == ib && sa != sb
            })
            .expect("cancelling pair");
        let v = embed_tokens(&[pair.0, pair.1], 2, 0).unwrap();
        assert!((crate::tensor::l2_norm(&v) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn template_ids_are_dense_first_seen() {
        let mut table = TemplateTable::new();
        assert_eq!(extract_template(&toks(&["error", "<*>"]), &mut table).template_id, 0);
        assert_eq!(extract_template(&toks(&["error", "<*>"]), &mut table).template_id, 0);
        assert_eq!(table.len(), 1);
        assert_eq!(extract_template(&toks(&["link", "up"]), &mut table).template_id, 1);
    }

    const SAMPLE: &str = "- 1 node1 link up\n\nKERNDTLB 2 node2 data TLB error 0x1f2e\n- 3 node1 disk /dev/sda ok\nbroken\n- 4 node3 link up\n";

    #[test]
    fn blank_dropped_malformed_counted() {
        let c = ingest_str(SAMPLE, &IngestOptions { d: 16, ..Default::default() }).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c.skipped, 1);
        assert_eq!(c.labels(), vec![0, 1, 0, 0]);
        assert_eq!(c.records.iter().map(|r| r.line_no).collect::<Vec<_>>(), vec![1, 3, 4, 6]);
        assert_eq!(c.template_ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn csv_header_is_optional() {
        let with = ingest_str(
            "label,timestamp,message\n0,1,link up\n1,2,disk fail\n",
            &IngestOptions { format: LogFormat::CsvLabeled, d: 8, ..Default::default() },
        )
        .unwrap();
        let without = ingest_str(
            "0,1,link up\n1,2,disk fail\n",
            &IngestOptions { format: LogFormat::CsvLabeled, d: 8, ..Default::default() },
        )
        .unwrap();
        assert_eq!(with.labels(), without.labels());
        assert_eq!(with.embeddings, without.embeddings);
    }

    #[test]
    fn embedding_cache_round_trip() {
        let dir = std::env::temp_dir().join(format!("logmilp-emb-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let base = dir.join("x.f32");
        let c = ingest_str(SAMPLE, &IngestOptions { d: 16, ..Default::default() }).unwrap();
        write_embeddings(&base, &c.embeddings, 16, &c.labels()).unwrap();
        let (data, d, labels) = read_embeddings(&base).unwrap();
        assert_eq!(d, 16);
        assert_eq!(labels, c.labels());
        assert_eq!(data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), c.embeddings.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        fs::remove_dir_all(&dir).unwrap();
    }

    proptest! {
        #[test]
        fn embedding_norm_is_one(words in proptest::collection::vec("[a-z]{1,8}", 1..12), seed in 0u64..4) {
            let v = embed_tokens(&words, 64, seed).unwrap();
            let n = crate::tensor::l2_norm(&v);
            prop_assert!((n - 1.0).abs() < 1e-6);
        }

        #[test]
        fn parallel_ingest_matches_sequential(n in 1usize..200, chunk in 1usize..17) {
            let text: String = (0..n)
                .map(|i| if i % 7 == 3 { format!("ALERT {i} node{} fault {}\n", i % 5, i * 31) } else { format!("- {i} node{} op {} ok\n", i % 3, i % 11) })
                .collect();
            let seq = ingest_str(&text, &IngestOptions { chunk_lines: 0, d: 16, ..Default::default() }).unwrap();
            let par = ingest_str(&text, &IngestOptions { chunk_lines: chunk, d: 16, ..Default::default() }).unwrap();
            prop_assert_eq!(&seq, &par);
            let expect: Vec<u8> = (0..n).map(|i| u8::from(i % 7 == 3)).collect();
            prop_assert_eq!(seq.labels(), expect);
        }
    }
}
