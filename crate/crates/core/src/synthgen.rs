//! Seeded synthetic log corpora with planted anomalous lines.
//!
//! Lines look like `TAG TIMESTAMP NODE message...` where `TAG` is `-` for
//! normal lines and an alert category for anomalous ones. Messages come from
//! templates with variable slots (integers, hex ids, addresses, paths).
//! Anomalies arrive in bursts of consecutive lines.

use crate::error::{Error, Result};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

const BASE_TIMESTAMP: i64 = 1_117_838_570;
const DISTRACTORS: usize = 3;
const DONOR_WORDS: usize = 1;
const ANOMALY_WORDS_PER_TEMPLATE: usize = 2;

const NORMAL_WORDS: &[&str] = &[
    "instruction", "cache", "parity", "corrected", "generating", "core", "ciod", "message", "received",
    "from", "node", "job", "started", "finished", "link", "up", "down", "packet", "sent", "buffer", "flushed",
    "scheduler", "queue", "worker", "thread", "allocated", "released", "memory", "block", "page", "mapped",
    "session", "opened", "closed", "user", "login", "request", "served", "disk", "mounted", "volume",
    "checkpoint", "written", "heartbeat", "ok", "network", "interface", "config", "loaded", "service",
    "registered", "lease", "renewed", "torus", "receiver", "sender", "retry", "timer", "expired", "sync",
    "completed", "rank", "task", "file", "read", "write", "socket", "connected", "client", "state",
    "changed", "power", "fan", "speed", "temperature", "normal", "idle", "polling",
];

const ANOMALY_WORDS: &[&str] = &[
    "fatal", "failure", "panic", "exception", "machine", "check", "unrecoverable", "corrupted", "segfault",
    "lost", "refused", "abort", "timeout", "overflow", "invalid", "halted", "critical", "uncorrectable",
];

const ALERT_TAGS: &[&str] = &[
    "KERNDTLB", "KERNSTOR", "APPSEV", "KERNMNTF", "KERNTERM", "MMCS", "APPREAD", "KERNPAN", "LINKDISC", "MONILL",
];

const SLOTS: &[&str] = &["{int}", "{hex}", "{ip}", "{path}"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_lines: usize,
    pub vocab_normal: usize,
    pub vocab_anom: usize,
    pub anomaly_rate: f64,
    /// Relative frequency of anomaly runs of length 1, 2 and 3.
    pub burst_weights: [f64; 3],
    pub distractor_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_lines: 50_000,
            vocab_normal: 50,
            vocab_anom: 5,
            anomaly_rate: 0.02,
            burst_weights: [1.0, 1.0, 1.0],
            distractor_rate: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_lines == 0 || self.vocab_normal == 0 || self.vocab_anom == 0 {
            return bad("n_lines, vocab_normal and vocab_anom must be >= 1".into());
        }
        if self.vocab_normal <= DISTRACTORS && self.distractor_rate < 1.0 && self.distractor_rate > 0.0 {
            return bad(format!("vocab_normal must exceed {DISTRACTORS} when distractor_rate is in (0, 1)"));
        }
        for (name, r) in [("anomaly_rate", self.anomaly_rate), ("distractor_rate", self.distractor_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        if self.anomaly_rate == 1.0 {
            return bad("anomaly_rate must be < 1".into());
        }
        if self.burst_weights.iter().any(|w| !(*w >= 0.0)) || self.burst_weights.iter().sum::<f64>() <= 0.0 {
            return bad("burst_weights must be non-negative with a positive sum".into());
        }
        Ok(())
    }

    fn mean_burst(&self) -> f64 {
        let s: f64 = self.burst_weights.iter().sum();
        self.burst_weights.iter().enumerate().map(|(i, w)| (i + 1) as f64 * w).sum::<f64>() / s
    }

    /// Probability that a normal step starts a burst so that the expected
    /// anomalous fraction equals `anomaly_rate`.
    pub fn burst_start_prob(&self) -> f64 {
        let f = self.anomaly_rate;
        let mu = self.mean_burst();
        f / (mu * (1.0 - f) + f)
    }
}

#[derive(Clone, Debug)]
struct SynthTemplate {
    tag: &'static str,
    parts: Vec<&'static str>,
}

fn make_template(rng: &mut ChaCha8Rng, words: &[&'static str], len: usize, slots: usize) -> Vec<&'static str> {
    let mut parts: Vec<&'static str> = words.choose_multiple(rng, len).copied().collect();
    for _ in 0..slots {
        let at = rng.gen_range(0..=parts.len());
        parts.insert(at, SLOTS[rng.gen_range(0..SLOTS.len())]);
    }
    parts
}

struct Vocabulary {
    normal: Vec<SynthTemplate>,
    anomalous: Vec<SynthTemplate>,
}

fn vocabulary(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vocabulary {
    let normal: Vec<SynthTemplate> = (0..spec.vocab_normal)
        .map(|_| {
            let len = rng.gen_range(3..=6);
            let slots = rng.gen_range(0..=2);
            SynthTemplate {
                tag: "-",
                parts: make_template(rng, NORMAL_WORDS, len, slots),
            }
        })
        .collect();
    let anomalous = (0..spec.vocab_anom)
        .map(|a| {
            // Borrow words from a distractor so anomalies resemble frequent lines.
            let donor = &normal[a % normal.len().min(DISTRACTORS)];
            let donor_words: Vec<&'static str> = donor.parts.iter().copied().filter(|p| !SLOTS.contains(p)).collect();
            let mut parts: Vec<&'static str> = donor_words.choose_multiple(rng, DONOR_WORDS.min(donor_words.len())).copied().collect();
            if parts.is_empty() {
                parts.push(NORMAL_WORDS[rng.gen_range(0..NORMAL_WORDS.len())]);
            }
            parts.extend(ANOMALY_WORDS.choose_multiple(rng, ANOMALY_WORDS_PER_TEMPLATE).copied());
            parts.shuffle(rng);
            let at = rng.gen_range(0..=parts.len());
            parts.insert(at, SLOTS[rng.gen_range(0..SLOTS.len())]);
            SynthTemplate {
                tag: ALERT_TAGS[a % ALERT_TAGS.len()],
                parts,
            }
        })
        .collect();
    Vocabulary { normal, anomalous }
}

fn fill_slot(slot: &str, rng: &mut ChaCha8Rng, out: &mut String) {
    match slot {
        "{int}" => {
            let _ = write!(out, "{}", rng.gen_range(0..100_000u32));
        }
        "{hex}" => {
            let _ = write!(out, "0x{:08x}", rng.gen::<u32>());
        }
        "{ip}" => {
            let _ = write!(
                out,
                "10.{}.{}.{}:{}",
                rng.gen_range(0..256),
                rng.gen_range(0..256),
                rng.gen_range(1..255),
                rng.gen_range(1024..65535)
            );
        }
        "{path}" => {
            let dirs = ["var", "log", "tmp", "scratch", "home", "dev", "proc"];
            let _ = write!(
                out,
                "/{}/{}/f{}",
                dirs[rng.gen_range(0..dirs.len())],
                dirs[rng.gen_range(0..dirs.len())],
                rng.gen_range(0..1000)
            );
        }
        w => out.push_str(w),
    }
}

/// A generated corpus: the log text and the exact per-line labels.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub text: String,
    pub labels: Vec<u8>,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = vocabulary(spec, &mut rng);
    let p_burst = spec.burst_start_prob();
    let burst_len = WeightedIndex::new(spec.burst_weights).expect("validated weights");
    let mut text = String::with_capacity(spec.n_lines * 64);
    let mut labels = Vec::with_capacity(spec.n_lines);
    let mut pending = 0usize;
    let mut ts = BASE_TIMESTAMP;
    while labels.len() < spec.n_lines {
        if pending == 0 && rng.gen_bool(p_burst) {
            pending = burst_len.sample(&mut rng) + 1;
        }
        let tpl = if pending > 0 {
            pending -= 1;
            &vocab.anomalous[rng.gen_range(0..vocab.anomalous.len())]
        } else if spec.vocab_normal > DISTRACTORS && !rng.gen_bool(spec.distractor_rate) {
            &vocab.normal[rng.gen_range(DISTRACTORS..vocab.normal.len())]
        } else {
            &vocab.normal[rng.gen_range(0..spec.vocab_normal.min(DISTRACTORS))]
        };
        ts += rng.gen_range(0..3);
        let _ = write!(text, "{} {} R{:02}-M{}-N{}", tpl.tag, ts, rng.gen_range(0..8), rng.gen_range(0..2), rng.gen_range(0..4));
        for p in &tpl.parts {
            text.push(' ');
            fill_slot(p, &mut rng, &mut text);
        }
        text.push('\n');
        labels.push((tpl.tag != "-") as u8);
    }
    Ok(SynthCorpus { text, labels })
}

/// Write the log to `path` and the labels, one per line, to `path.labels`.
pub fn write_corpus(path: &Path, corpus: &SynthCorpus) -> Result<()> {
    std::fs::write(path, &corpus.text)?;
    let mut labels = String::with_capacity(corpus.labels.len() * 2);
    for y in &corpus.labels {
        labels.push(if *y == 1 { '1' } else { '0' });
        labels.push('\n');
    }
    std::fs::write(labels_path(path), labels)?;
    Ok(())
}

pub fn labels_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels");
    s.into()
}

/// Bag labels of a sliding-window bagging of the generated corpus, derived
/// from the generator's own labels with prefix sums.
pub fn oracle_bags(spec: &SynthSpec, window: usize, stride: usize) -> Result<Vec<u8>> {
    let labels = generate(spec)?.labels;
    Ok(oracle_from_labels(&labels, window, stride))
}

pub fn oracle_from_labels(labels: &[u8], window: usize, stride: usize) -> Vec<u8> {
    let n = labels.len();
    let mut prefix = vec![0usize; n + 1];
    for (i, &y) in labels.iter().enumerate() {
        prefix[i + 1] = prefix[i] + y as usize;
    }
    let any = |a: usize, b: usize| (prefix[b.min(n)] - prefix[a] > 0) as u8;
    let full = if n >= window { (n - window) / stride + 1 } else { 0 };
    let mut out: Vec<u8> = (0..full).map(|j| any(j * stride, j * stride + window)).collect();
    let covered = if full > 0 { (full - 1) * stride + window } else { 0 };
    if covered < n {
        out.push(any(full * stride, n));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagging::sliding_bags;
    use crate::ingest::{ingest_str, IngestOptions};

    fn small(seed: u64, n: usize) -> SynthSpec {
        SynthSpec {
            seed,
            n_lines: n,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate(&small(3, 2000)).unwrap();
        let b = generate(&small(3, 2000)).unwrap();
        assert_eq!(a.text, b.text);
        assert_ne!(a.text, generate(&small(4, 2000)).unwrap().text);
    }

    #[test]
    fn zero_rate_is_all_normal() {
        let c = generate(&SynthSpec {
            anomaly_rate: 0.0,
            ..small(1, 3000)
        })
        .unwrap();
        assert!(c.text.lines().all(|l| l.starts_with("- ")));
        assert!(c.labels.iter().all(|&y| y == 0));
        assert!(oracle_from_labels(&c.labels, 20, 20).iter().all(|&y| y == 0));
    }

    #[test]
    fn anomaly_count_within_binomial_interval() {
        for seed in 0..5 {
            let c = generate(&small(seed, 10_000)).unwrap();
            let n: usize = c.labels.iter().map(|&y| y as usize).sum();
            assert!((164..=236).contains(&n), "seed {seed}: {n}");
        }
    }

    #[test]
    fn labels_survive_reparsing() {
        let c = generate(&small(5, 3000)).unwrap();
        let corpus = ingest_str(&c.text, &IngestOptions::default()).unwrap();
        assert_eq!(corpus.skipped, 0);
        assert_eq!(corpus.labels(), c.labels);
    }

    #[test]
    fn anomalous_templates_share_normal_tokens() {
        let spec = small(9, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let v = vocabulary(&spec, &mut rng);
        for a in &v.anomalous {
            assert!(a.parts.iter().any(|p| NORMAL_WORDS.contains(p)));
        }
    }

    #[test]
    fn single_anomaly_marks_covering_windows() {
        let mut labels = vec![0u8; 30];
        labels[11] = 1;
        // windows of 6 with stride 3 starting at 0,3,..,24: those covering 11
        let o = oracle_from_labels(&labels, 6, 3);
        let expected: Vec<u8> = (0..9).map(|j| (j * 3 <= 11 && 11 < j * 3 + 6) as u8).collect();
        assert_eq!(o, expected);
        assert_eq!(o.iter().filter(|&&y| y == 1).count(), 2);
    }

    #[test]
    fn oracle_matches_bagging_on_random_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for i in 0..20 {
            let spec = SynthSpec {
                seed: i,
                n_lines: rng.gen_range(1..600),
                anomaly_rate: rng.gen_range(0.0..0.2),
                ..SynthSpec::default()
            };
            let w = rng.gen_range(1..25);
            let s = rng.gen_range(1..=w);
            let c = generate(&spec).unwrap();
            let emb = vec![0.5f32; c.labels.len() * 2];
            let ds = sliding_bags(&emb, &c.labels, 2, w, s).unwrap();
            assert_eq!(oracle_bags(&spec, w, s).unwrap(), ds.labels(), "spec {i}");
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            SynthSpec { n_lines: 0, ..SynthSpec::default() },
            SynthSpec { anomaly_rate: 1.5, ..SynthSpec::default() },
            SynthSpec { vocab_anom: 0, ..SynthSpec::default() },
        ] {
            assert!(matches!(generate(&spec), Err(Error::InvalidSpec(_))));
        }
    }
}
