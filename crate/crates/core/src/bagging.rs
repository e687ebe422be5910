//! Grouping instance embeddings into fixed-width bags.
//!
//! A bag's label is the maximum of its valid instance labels. Instance labels
//! travel with the bag for offline localization scoring only.

use crate::error::{Error, Result};
use crate::ingest::{kv_usize, parse_kv};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const DEFAULT_WINDOW: usize = 20;
pub const DEFAULT_STRIDE: usize = 20;
pub const DEFAULT_BLOCK: usize = 10;
pub const DEFAULT_PER_BAG: usize = 20;

const BAG_MAGIC: &[u8] = b"LMBAG1\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    /// Row-major `W x d`; padded rows are zero.
    pub embeddings: Vec<f32>,
    pub mask: Vec<bool>,
    pub label: u8,
    /// Hidden per-position labels (zero on padding). Evaluation only.
    pub instance_labels: Vec<u8>,
    /// First and last source line numbers (1-based, inclusive).
    pub source_span: (usize, usize),
}

impl Bag {
    pub fn width(&self) -> usize {
        self.mask.len()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn valid_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }

    /// Valid positions carrying an anomalous instance label.
    pub fn anomalous_positions(&self) -> Vec<usize> {
        self.valid_positions().filter(|&i| self.instance_labels[i] == 1).collect()
    }

    pub fn row(&self, i: usize, d: usize) -> &[f32] {
        &self.embeddings[i * d..(i + 1) * d]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::All => "all",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            "all" => Split::All,
            other => return Err(Error::Format(format!("unknown split `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BagDataset {
    pub bags: Vec<Bag>,
    pub window: usize,
    pub d: usize,
    pub split: Split,
}

impl BagDataset {
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.bags.iter().map(|b| b.label).collect()
    }

    pub fn positives(&self) -> usize {
        self.bags.iter().filter(|b| b.label == 1).count()
    }
}

fn check_input(embeddings: &[f32], labels: &[u8], d: usize) -> Result<usize> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if d == 0 || embeddings.len() != n * d {
        return Err(Error::ShapeMismatch(format!(
            "{} floats for {n} instances at d={d}",
            embeddings.len()
        )));
    }
    Ok(n)
}

/// Pack instances `[start, end)` into a `window`-wide padded bag.
fn make_bag(
    embeddings: &[f32],
    labels: &[u8],
    line_nos: &[usize],
    d: usize,
    window: usize,
    start: usize,
    end: usize,
) -> Bag {
    let len = end - start;
    let mut emb = vec![0f32; window * d];
    emb[..len * d].copy_from_slice(&embeddings[start * d..end * d]);
    let mut mask = vec![false; window];
    let mut inst = vec![0u8; window];
    for i in 0..len {
        mask[i] = true;
        inst[i] = labels[start + i];
    }
    Bag {
        embeddings: emb,
        mask,
        label: inst.iter().copied().max().unwrap_or(0),
        instance_labels: inst,
        source_span: (line_nos[start], line_nos[end - 1]),
    }
}

/// Window start offsets (0-based) and lengths for `n` instances.
pub fn window_ranges(n: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= n {
        out.push((start, start + window));
        start += stride;
    }
    let covered = out.last().map_or(0, |&(_, e)| e);
    if covered < n {
        // one trailing partial window from the next stride position
        let s = if out.is_empty() { 0 } else { start };
        out.push((s, n));
    }
    out
}

/// Sliding windows over consecutive instances with a trailing padded window.
pub fn sliding_bags(embeddings: &[f32], labels: &[u8], d: usize, window: usize, stride: usize) -> Result<BagDataset> {
    let line_nos: Vec<usize> = (1..=labels.len()).collect();
    sliding_bags_with_lines(embeddings, labels, &line_nos, d, window, stride)
}

/// As [`sliding_bags`] with explicit source line numbers for the spans.
pub fn sliding_bags_with_lines(
    embeddings: &[f32],
    labels: &[u8],
    line_nos: &[usize],
    d: usize,
    window: usize,
    stride: usize,
) -> Result<BagDataset> {
    if window < 1 || stride < 1 || stride > window {
        return Err(Error::InvalidWindow { window, stride });
    }
    let n = check_input(embeddings, labels, d)?;
    assert_eq!(line_nos.len(), n);
    let bags = window_ranges(n, window, stride)
        .into_iter()
        .map(|(s, e)| make_bag(embeddings, labels, line_nos, d, window, s, e))
        .collect();
    Ok(BagDataset {
        bags,
        window,
        d,
        split: Split::All,
    })
}

/// Mean-pool consecutive `block`-line blocks into instances (label = OR),
/// then group `per_bag` instances per bag.
pub fn block_bags(embeddings: &[f32], labels: &[u8], d: usize, block: usize, per_bag: usize) -> Result<BagDataset> {
    if block < 1 || per_bag < 1 {
        return Err(Error::InvalidWindow {
            window: per_bag,
            stride: block,
        });
    }
    let n = check_input(embeddings, labels, d)?;
    let mut inst_emb = Vec::new();
    let mut inst_lab = Vec::new();
    let mut first_lines = Vec::new();
    let mut last_lines = Vec::new();
    for start in (0..n).step_by(block) {
        let end = (start + block).min(n);
        let mut mean = vec![0f32; d];
        for r in start..end {
            for (m, &v) in mean.iter_mut().zip(&embeddings[r * d..(r + 1) * d]) {
                *m += v;
            }
        }
        let cnt = (end - start) as f32;
        mean.iter_mut().for_each(|m| *m /= cnt);
        inst_emb.extend(mean);
        inst_lab.push(labels[start..end].iter().copied().max().unwrap_or(0));
        first_lines.push(start + 1);
        last_lines.push(end);
    }
    let m = inst_lab.len();
    let mut bags = Vec::new();
    for s in (0..m).step_by(per_bag) {
        let e = (s + per_bag).min(m);
        let mut bag = make_bag(&inst_emb, &inst_lab, &first_lines, d, per_bag, s, e);
        bag.source_span = (first_lines[s], last_lines[e - 1]);
        bags.push(bag);
    }
    Ok(BagDataset {
        bags,
        window: per_bag,
        d,
        split: Split::All,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Contiguous train/val/test split by bag count; `shuffle` permutes first.
pub fn split_dataset(
    ds: &BagDataset,
    ratios: SplitRatios,
    shuffle: bool,
    seed: u64,
) -> Result<(BagDataset, BagDataset, BagDataset)> {
    let r = [ratios.train, ratios.val, ratios.test];
    if r.iter().any(|&x| !(x > 0.0)) || ((r[0] + r[1] + r[2]) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(format!("{r:?}")));
    }
    let n = ds.len();
    if n < 3 {
        return Err(Error::TooFewBags(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let n_train = ((n as f64 * r[0] + 1e-9).floor() as usize).max(1);
    let n_val = ((n as f64 * r[1] + 1e-9).floor() as usize).max(1);
    let (n_train, n_val) = if n_train + n_val >= n {
        // keep at least one test bag
        let n_train = n_train.min(n - 2);
        (n_train, (n - 1 - n_train).min(n_val).max(1))
    } else {
        (n_train, n_val)
    };
    let take = |idx: &[usize], split| BagDataset {
        bags: idx.iter().map(|&i| ds.bags[i].clone()).collect(),
        window: ds.window,
        d: ds.d,
        split,
    };
    Ok((
        take(&order[..n_train], Split::Train),
        take(&order[n_train..n_train + n_val], Split::Val),
        take(&order[n_train + n_val..], Split::Test),
    ))
}

/// Write the bag cache: magic, key=value header terminated by `end`, then per
/// bag `W` mask bytes, the label byte, `W` instance label bytes, the source
/// span as two u64 LE, and the `W x d` f32 LE matrix.
pub fn write_bag_cache(path: &Path, ds: &BagDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BAG_MAGIC)?;
    write!(
        w,
        "count={}\nW={}\nd={}\nsplit={}\nend\n",
        ds.len(),
        ds.window,
        ds.d,
        ds.split.as_str()
    )?;
    for bag in &ds.bags {
        let mask: Vec<u8> = bag.mask.iter().map(|&m| u8::from(m)).collect();
        w.write_all(&mask)?;
        w.write_all(&[bag.label])?;
        w.write_all(&bag.instance_labels)?;
        w.write_all(&(bag.source_span.0 as u64).to_le_bytes())?;
        w.write_all(&(bag.source_span.1 as u64).to_le_bytes())?;
        for v in &bag.embeddings {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_bag_cache(path: &Path) -> Result<BagDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = vec![0u8; BAG_MAGIC.len()];
    r.read_exact(&mut magic)?;
    if magic != BAG_MAGIC {
        return Err(Error::Format("not a bag cache (bad magic)".into()));
    }
    let mut header = String::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated bag cache header".into()));
        }
        if line.trim() == "end" {
            break;
        }
        header.push_str(&line);
    }
    let kv = parse_kv(&header)?;
    let count = kv_usize(&kv, "count")?;
    let window = kv_usize(&kv, "W")?;
    let d = kv_usize(&kv, "d")?;
    let split = Split::parse(kv.get("split").map(String::as_str).unwrap_or("all"))?;
    let mut bags = Vec::with_capacity(count);
    let mut buf8 = [0u8; 8];
    for _ in 0..count {
        let mut mask = vec![0u8; window];
        r.read_exact(&mut mask)?;
        let mut label = [0u8; 1];
        r.read_exact(&mut label)?;
        let mut inst = vec![0u8; window];
        r.read_exact(&mut inst)?;
        r.read_exact(&mut buf8)?;
        let s0 = u64::from_le_bytes(buf8) as usize;
        r.read_exact(&mut buf8)?;
        let s1 = u64::from_le_bytes(buf8) as usize;
        let mut raw = vec![0u8; window * d * 4];
        r.read_exact(&mut raw)?;
        let embeddings = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        bags.push(Bag {
            embeddings,
            mask: mask.iter().map(|&m| m != 0).collect(),
            label: label[0],
            instance_labels: inst,
            source_span: (s0, s1),
        });
    }
    Ok(BagDataset { bags, window, d, split })
}
