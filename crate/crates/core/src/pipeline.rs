//! End-to-end runs: load or ingest input, bag, split, train, evaluate.

use crate::bagging::{block_bags, read_bag_cache, sliding_bags_with_lines, split_dataset, write_bag_cache, BagDataset};
use crate::config::{BagMode, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, LocalizationResult, MetricsReport};
use crate::ingest::{ingest_file, read_embeddings, EmbeddingFiles, IngestOptions};
use crate::model::{load_checkpoint, save_checkpoint, ModelParams};
use crate::training::{fit, FitResult};
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FILE: &str = "model.lmckpt";
pub const TRAIN_LOG_FILE: &str = "train.log";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective.cfg";

const BAG_MAGIC: &[u8] = b"LMBAG1";

fn is_bag_cache(path: &Path) -> Result<bool> {
    let mut buf = [0u8; 6];
    let mut f = std::fs::File::open(path)?;
    let n = f.read(&mut buf)?;
    Ok(n == buf.len() && buf == BAG_MAGIC)
}

pub fn ingest_options(cfg: &RunConfig) -> IngestOptions {
    IngestOptions {
        format: cfg.format,
        d: cfg.model.d,
        seed: cfg.hash_seed,
        ..IngestOptions::default()
    }
}

fn bag_embeddings(cfg: &RunConfig, emb: &[f32], labels: &[u8], line_nos: &[usize], d: usize) -> Result<BagDataset> {
    match cfg.bagging {
        BagMode::Sliding => sliding_bags_with_lines(emb, labels, line_nos, d, cfg.window, cfg.stride),
        BagMode::Block => block_bags(emb, labels, d, cfg.block, cfg.per_bag),
    }
}

/// Bags from `input`, which may be a bag cache, an embedding cache (data
/// file with a `.meta` sidecar) or a raw log.
pub fn load_dataset(cfg: &RunConfig, input: &Path) -> Result<BagDataset> {
    if !input.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("input {} not found", input.display()),
        )));
    }
    let ds = if is_bag_cache(input)? {
        read_bag_cache(input)?
    } else if EmbeddingFiles::at(input).meta.exists() {
        let (emb, d, labels) = read_embeddings(input)?;
        let line_nos: Vec<usize> = (1..=labels.len()).collect();
        bag_embeddings(cfg, &emb, &labels, &line_nos, d)?
    } else {
        let corpus = ingest_file(input, &ingest_options(cfg))?;
        let line_nos: Vec<usize> = corpus.records.iter().map(|r| r.line_no).collect();
        bag_embeddings(cfg, &corpus.embeddings, &corpus.labels(), &line_nos, corpus.d)?
    };
    if ds.d != cfg.model.d {
        return Err(Error::Config(format!("input has d={}, config has d={}", ds.d, cfg.model.d)));
    }
    Ok(ds)
}

fn required_input(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.input.clone().ok_or_else(|| Error::Config("no input given (`input` key or --input)".into()))
}

/// Train/validation/test splits of the configured input.
pub fn load_splits(cfg: &RunConfig) -> Result<(BagDataset, BagDataset, BagDataset)> {
    let ds = load_dataset(cfg, &required_input(cfg)?)?;
    if let Some(cache) = &cfg.cache {
        write_bag_cache(cache, &ds)?;
    }
    split_dataset(&ds, cfg.ratios, cfg.shuffle, cfg.seed)
}

pub struct TrainOutcome {
    pub fit: FitResult,
    pub checkpoint: PathBuf,
    pub log: String,
    pub effective: RunConfig,
}

/// Train and write `model.lmckpt`, `train.log` and `effective.cfg` into
/// `run_dir`.
pub fn train_run(cfg: &RunConfig, run_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, val, _) = load_splits(cfg)?;
    let init = ModelParams::<f32>::init(cfg.model)?;
    let fit = fit(init, &train, &val, &cfg.train)?;
    std::fs::create_dir_all(run_dir)?;
    let checkpoint = run_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &fit.params)?;
    let mut log = String::from("epoch\tL_cls\tL_proto\tL_attn\tL_con\tL_total\tval_f1\n");
    for r in &fit.reports {
        log.push_str(&r.log_line());
        log.push('\n');
    }
    std::fs::write(run_dir.join(TRAIN_LOG_FILE), &log)?;
    let mut effective = cfg.clone();
    effective.checkpoint = Some(checkpoint.clone());
    std::fs::write(run_dir.join(EFFECTIVE_CONFIG_FILE), effective.to_text())?;
    Ok(TrainOutcome {
        fit,
        checkpoint,
        log,
        effective,
    })
}

fn required_checkpoint(cfg: &RunConfig) -> Result<ModelParams<f32>> {
    let path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("no checkpoint given (`checkpoint` key or --checkpoint)".into()))?;
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint {} not found", path.display()),
        )));
    }
    load_checkpoint(&path)
}

/// Evaluate the configured checkpoint on the configured input's splits.
pub fn eval_run(cfg: &RunConfig) -> Result<(MetricsReport, Vec<LocalizationResult>)> {
    cfg.validate()?;
    let params = required_checkpoint(cfg)?;
    if params.config.d != cfg.model.d {
        return Err(Error::Config(format!("checkpoint has d={}, config has d={}", params.config.d, cfg.model.d)));
    }
    let (_, val, test) = load_splits(cfg)?;
    evaluate(&params, &val, &test, cfg.k, cfg.delta_sr, &cfg.dataset, cfg.seed)
}

/// Per positive test bag: id, head, top-k positions with weights, both
/// probabilities and the drop, sorted by descending drop.
pub fn localization_report(results: &[LocalizationResult]) -> String {
    let mut rows: Vec<&LocalizationResult> = results.iter().collect();
    rows.sort_by(|a, b| b.drop().total_cmp(&a.drop()).then(a.bag.cmp(&b.bag)));
    let mut out = String::from("bag\thead\ts_top\tp_orig\tp_pert\tdrop\n");
    for r in rows {
        let top: Vec<String> = r
            .s_top
            .iter()
            .zip(&r.weights)
            .map(|(i, w)| format!("{}:{w:.6}", i + 1))
            .collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            r.bag,
            r.head + 1,
            top.join(","),
            r.p_orig,
            r.p_pert,
            r.drop()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_sorted_by_drop() {
        let mk = |bag, o, p| LocalizationResult {
            bag,
            head: 0,
            s_top: vec![1, 0],
            weights: vec![0.7, 0.3],
            p_orig: o,
            p_pert: p,
        };
        let rep = localization_report(&[mk(0, 0.9, 0.8), mk(1, 0.9, 0.1), mk(2, 0.5, 0.6)]);
        let bags: Vec<&str> = rep.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
        assert_eq!(bags, ["1", "0", "2"]);
        assert!(rep.contains("2:0.700000,1:0.300000"));
    }
}
