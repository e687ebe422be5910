//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 4-6 drive the `logmilp` binary end to end on seeded synthetic
//! corpora (five training runs); the rest exercise the library directly.

use logmilp::bagging::{read_bag_cache, sliding_bags, write_bag_cache, Bag};
use logmilp::config::RunConfig;
use logmilp::eval::{loc_at_k, localize, read_metrics_csv, success_rate, MetricsReport};
use logmilp::ingest::ingest_str;
use logmilp::model::{encode, forward, forward_all, load_checkpoint, prototype_stats, save_checkpoint, ModelConfig, ModelParams};
use logmilp::pipeline::{ingest_options, load_dataset};
use logmilp::synthgen::{generate, oracle_bags, SynthSpec};
use logmilp::tensor::Tensor;
use logmilp::training::{
    attention_entropy_loss, batch_loss, consistency_loss, focal_loss, loss_and_grads, proto_loss, train_epoch,
    TrainConfig, TrainState,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

/// Outcome of one criterion: pass flag and a one-line detail.
type Verdict = (bool, String);

fn check(ok: bool, what: impl Into<String>, failures: &mut Vec<String>) {
    if !ok {
        failures.push(what.into());
    }
}

fn verdict(failures: Vec<String>, detail: String) -> Verdict {
    if failures.is_empty() {
        (true, detail)
    } else {
        (false, format!("{detail}; failed: {}", failures.join("; ")))
    }
}

// ---------------------------------------------------------------- 1

fn rank_oracle_top(row: &[f64], mask: &[bool], k: usize) -> Vec<usize> {
    // i is in the top k iff fewer than k valid positions beat it
    (0..row.len())
        .filter(|&i| mask[i])
        .filter(|&i| {
            let beaten = (0..row.len()).filter(|&j| mask[j] && (row[j] > row[i] || (row[j] == row[i] && j < i))).count();
            beaten < k
        })
        .collect()
}

fn oracle_head(attn: &[f64], k_heads: usize, mask: &[bool]) -> usize {
    let w = mask.len();
    let ent: Vec<f64> = (0..k_heads)
        .map(|k| (0..w).filter(|&i| mask[i] && attn[k * w + i] > 0.0).map(|i| -attn[k * w + i] * attn[k * w + i].ln()).sum())
        .collect();
    (0..k_heads).fold(0, |best, k| if ent[k] < ent[best] { k } else { best })
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut failures = Vec::new();
    for case in 0..200 {
        let k = rng.gen_range(1..=5);
        let k_heads = rng.gen_range(1..=3);
        let n_bags = rng.gen_range(1..=6);
        let mut pairs = Vec::new();
        let (mut hits, mut denom) = (0usize, 0usize);
        for _ in 0..n_bags {
            let w = rng.gen_range(1..=10);
            let mut mask: Vec<bool> = (0..w).map(|_| rng.gen_bool(0.8)).collect();
            let anchor = rng.gen_range(0..w);
            mask[anchor] = true;
            // coarse levels force ties
            let mut attn = vec![0.0; k_heads * w];
            for h in 0..k_heads {
                let raw: Vec<f64> = (0..w).map(|i| if mask[i] { rng.gen_range(1..=4) as f64 } else { 0.0 }).collect();
                let s: f64 = raw.iter().sum();
                for i in 0..w {
                    attn[h * w + i] = raw[i] / s;
                }
            }
            let s_a: Vec<usize> = (0..w).filter(|&i| mask[i] && rng.gen_bool(0.3)).collect();
            let (head, s_top) = localize(&attn, k_heads, &mask, k);
            let want_head = oracle_head(&attn, k_heads, &mask);
            let want_top = rank_oracle_top(&attn[want_head * w..(want_head + 1) * w], &mask, k);
            let mut got_sorted = s_top.clone();
            got_sorted.sort();
            if head != want_head || got_sorted != want_top {
                failures.push(format!("case {case}: localize"));
            }
            if !s_a.is_empty() {
                hits += want_top.iter().filter(|i| s_a.iter().any(|a| a == *i)).count();
                denom += k.min(s_a.len());
            }
            pairs.push((s_top, s_a));
        }
        match loc_at_k(&pairs, k) {
            Ok(v) => check(denom > 0 && v == hits as f64 / denom as f64, format!("case {case}: loc_at_k"), &mut failures),
            Err(_) => check(denom == 0, format!("case {case}: loc_at_k error"), &mut failures),
        }
    }
    for case in 0..200 {
        let n = rng.gen_range(1..=12);
        // dyadic grid keeps every difference exact
        let p_orig: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=64) as f64 / 64.0).collect();
        let p_pert: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=64) as f64 / 64.0).collect();
        let delta = rng.gen_range(0..=16) as f64 / 64.0;
        let mut count = 0usize;
        for i in 0..n {
            if p_orig[i] - p_pert[i] > delta {
                count += 1;
            }
        }
        let got = success_rate(&p_orig, &p_pert, delta).unwrap();
        check(got == count as f64 / n as f64, format!("case {case}: success_rate"), &mut failures);
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 5.0, format!("runtime {secs:.2}s >= 5s"), &mut failures);
    verdict(failures, format!("400 randomized cases exact, {secs:.2}s"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Verdict {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_uniform: f64 = 0.0;
    let mut worst_onehot: f64 = 0.0;
    for _ in 0..50 {
        let w = rng.gen_range(2..=20);
        let k = rng.gen_range(1..=4);
        let valid = rng.gen_range(2..=w);
        let mask: Vec<bool> = (0..w).map(|i| i < valid).collect();
        let uniform: Vec<f64> = (0..k * w).map(|j| if j % w < valid { 1.0 / valid as f64 } else { 0.0 }).collect();
        let l = attention_entropy_loss(&[uniform], &[mask.clone()], k, 1e-8);
        worst_uniform = worst_uniform.max((l - 1.0).abs());
        let hot = rng.gen_range(0..valid);
        let onehot: Vec<f64> = (0..k * w).map(|j| if j % w == hot { 1.0 } else { 0.0 }).collect();
        worst_onehot = worst_onehot.max(attention_entropy_loss(&[onehot], &[mask], k, 1e-8));
    }
    check(worst_uniform <= 1e-6, format!("uniform entropy off by {worst_uniform:e}"), &mut failures);
    check(worst_onehot <= 1e-4, format!("one-hot entropy {worst_onehot:e}"), &mut failures);
    let f = focal_loss(&[0.9], &[1], 2.0, 0.25);
    check((f - 2.634e-4).abs() <= 1e-7, format!("focal {f:e}"), &mut failures);
    let hinges = [
        (proto_loss(&[0.9], &[0.0], &[1], 0.7, 0.5, 1.0), 0.0),
        (proto_loss(&[0.5], &[0.0], &[1], 0.7, 0.5, 1.0), 0.2),
        (proto_loss(&[0.0], &[0.2], &[0], 0.7, 0.5, 1.0), 0.3),
        (consistency_loss(&[0.9], &[0.4], &[1], 0.3), 0.0),
        (consistency_loss(&[0.5], &[0.4], &[1], 0.3), 0.2),
        (consistency_loss(&[0.5], &[0.55], &[1], 0.3), 0.35),
    ];
    for (i, (got, want)) in hinges.iter().enumerate() {
        check((got - want).abs() <= 1e-7, format!("hinge example {i}: {got} vs {want}"), &mut failures);
    }
    // decomposition on every batch of two training epochs
    let spec = SynthSpec { seed: 11, n_lines: 3000, ..SynthSpec::default() };
    let corpus = generate(&spec).unwrap();
    let cfg = RunConfig::default();
    let ing = ingest_str(&corpus.text, &ingest_options(&cfg)).unwrap();
    let ds = sliding_bags(&ing.embeddings, &ing.labels(), ing.d, 20, 20).unwrap();
    let mut params = ModelParams::<f32>::init(ModelConfig { seed: 11, ..cfg.model }).unwrap();
    let tc = TrainConfig { seed: 11, ..TrainConfig::default() };
    let mut state = TrainState::new(&params, &tc);
    let mut worst_gap: f64 = 0.0;
    let mut batches = 0;
    for _ in 0..2 {
        let r = train_epoch(&mut params, &ds, &tc, &mut state).unwrap();
        worst_gap = worst_gap.max(r.max_identity_gap);
        batches += r.batches;
    }
    check(worst_gap <= 1e-5, format!("L_total identity gap {worst_gap:e}"), &mut failures);
    verdict(
        failures,
        format!(
            "uniform |L-1|={worst_uniform:.1e}, one-hot={worst_onehot:.1e}, focal={f:.4e}, 6 hinges, identity gap {worst_gap:.1e} over {batches} batches"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn tiny_bag(rng: &mut ChaCha8Rng, w: usize, d: usize, label: u8) -> Bag {
    let valid = rng.gen_range(3..=w);
    let mask: Vec<bool> = (0..w).map(|i| i < valid).collect();
    let mut embeddings = vec![0f32; w * d];
    for v in embeddings[..valid * d].iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut instance_labels = vec![0u8; w];
    if label == 1 {
        instance_labels[rng.gen_range(0..valid)] = 1;
    }
    Bag { embeddings, mask, label, instance_labels, source_span: (1, w) }
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let cfg = ModelConfig { d: 8, d_h: 16, n_proto: 4, k_heads: 2, d_a: 8, heads_enc: 4, h_c: 16, seed: 303 };
    let mut params = ModelParams::<f64>::init(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    // move off the zero-bias / unit-gain initialization
    for t in params.tensors.iter_mut() {
        t.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    }
    let bags: Vec<Bag> = [1u8, 0, 1, 0].iter().map(|&y| tiny_bag(&mut rng, 6, 8, y)).collect();
    let refs: Vec<&Bag> = bags.iter().collect();
    let tc = TrainConfig::default();
    let (_, grads) = loss_and_grads(&params, &refs, &tc).unwrap();
    let coords: Vec<(usize, usize)> =
        params.tensors.iter().enumerate().flat_map(|(t, x)| (0..x.len()).map(move |i| (t, i))).collect();
    let picked: Vec<(usize, usize)> = coords.choose_multiple(&mut rng, 100).copied().collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &(t, i) in &picked {
        let orig = params.tensors[t].data[i];
        params.tensors[t].data[i] = orig + h;
        let up = batch_loss(&params, &refs, &tc).unwrap().total;
        params.tensors[t].data[i] = orig - h;
        let down = batch_loss(&params, &refs, &tc).unwrap().total;
        params.tensors[t].data[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[t][i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    let mut failures = Vec::new();
    check(worst < 1e-3, format!("max relative error {worst:e}"), &mut failures);
    check(secs < 30.0, format!("runtime {secs:.1}s >= 30s"), &mut failures);
    verdict(failures, format!("100 coordinates, max relative error {worst:.2e}, {secs:.2}s"))
}

// ---------------------------------------------------------------- 4-6

struct Run {
    train_log: Vec<u8>,
    epochs: usize,
    train_time: Duration,
    report: MetricsReport,
    csv_row: String,
    checkpoint: PathBuf,
}

fn logmilp(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_logmilp")).args(args).output().expect("spawn logmilp");
    if !out.status.success() {
        panic!("logmilp {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn synth(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join(format!("synth{seed}.log"));
    if !path.exists() {
        let seed = seed.to_string();
        logmilp(&["synth", "--seed", &seed, "--lines", "50000", "--anomaly-rate", "0.02", "--out", path.to_str().unwrap()]);
    }
    path
}

fn train_and_eval(dir: &Path, name: &str, seed: u64, extra: &[&str]) -> Run {
    let corpus = synth(dir, seed);
    let run_dir = dir.join(name);
    let seed_s = seed.to_string();
    let mut args = vec!["train", "--seed", &seed_s, "--input", corpus.to_str().unwrap(), "--out", run_dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let t0 = Instant::now();
    logmilp(&args);
    let train_time = t0.elapsed();
    let train_log = std::fs::read(run_dir.join("train.log")).unwrap();
    let epochs = String::from_utf8_lossy(&train_log).lines().count() - 1;
    let checkpoint = run_dir.join("model.lmckpt");
    let csv = run_dir.join("metrics.csv");
    logmilp(&[
        "eval",
        "--seed",
        &seed_s,
        "--input",
        corpus.to_str().unwrap(),
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    let csv_row = std::fs::read_to_string(&csv).unwrap().lines().nth(1).unwrap().to_string();
    let report = read_metrics_csv(&csv).unwrap().remove(0);
    Run { train_log, epochs, train_time, report, csv_row, checkpoint }
}

fn describe(r: &Run) -> String {
    format!(
        "F1={:.4} Loc@3={:.4} SR={:.4} AUC={:.4} epochs={} train {:.0}s",
        r.report.f1,
        r.report.loc_at_k,
        r.report.sr,
        r.report.auc,
        r.epochs,
        r.train_time.as_secs_f64()
    )
}

fn criterion_4(full: &Run) -> Verdict {
    let mut failures = Vec::new();
    check(full.report.f1 >= 0.95, "F1 < 0.95", &mut failures);
    check(full.report.loc_at_k >= 0.85, "Loc@3 < 0.85", &mut failures);
    check(full.report.sr >= 0.85, "SR < 0.85", &mut failures);
    check(full.epochs <= 50, "more than 50 epochs", &mut failures);
    check(full.train_time <= Duration::from_secs(300), "training over 5 min", &mut failures);
    verdict(failures, format!("seed 7: {}", describe(full)))
}

fn criterion_5(full: &Run, ablated: &Run) -> Verdict {
    let mut failures = Vec::new();
    let sr_drop = full.report.sr - ablated.report.sr;
    let f1_change = ablated.report.f1 - full.report.f1;
    check(sr_drop >= 0.5, format!("SR drop {sr_drop:.4} < 0.5"), &mut failures);
    check(f1_change.abs() <= 0.05, format!("F1 change {f1_change:.4} outside +-0.05"), &mut failures);
    verdict(failures, format!("no consistency: {}; SR drop {sr_drop:.4}, F1 change {f1_change:+.4}", describe(ablated)))
}

fn criterion_6(dir: &Path, full: &Run, again: &Run, seeds: &[&Run]) -> Verdict {
    let mut failures = Vec::new();
    check(full.train_log == again.train_log, "training logs differ", &mut failures);
    check(full.csv_row == again.csv_row, "metrics rows differ", &mut failures);
    let csv = dir.join("three_seeds.csv");
    let mut text = String::from("dataset,seed,auc,precision,recall,f1,loc_at_k,sr,tau,k,delta_sr\n");
    for r in seeds {
        text.push_str(&r.csv_row);
        text.push('\n');
    }
    std::fs::write(&csv, text).unwrap();
    let summary = String::from_utf8(logmilp(&["summary", "--input", csv.to_str().unwrap()]).stdout).unwrap();
    let table: Vec<String> = summary.lines().skip(1).map(|l| l.replace('\t', " ")).collect();
    check(table.len() == 6, "summary table incomplete", &mut failures);
    verdict(failures, format!("byte-identical reruns; seeds 7,8,9 mean (std): {}", table.join(", ")))
}

// ---------------------------------------------------------------- 7

fn criterion_7(dir: &Path, full: &Run) -> Verdict {
    let mut failures = Vec::new();
    let params = load_checkpoint(&full.checkpoint).unwrap();
    let copy = dir.join("copy.lmckpt");
    save_checkpoint(&copy, &params).unwrap();
    let reloaded = load_checkpoint(&copy).unwrap();
    check(reloaded == params, "checkpoint tensors differ", &mut failures);
    check(std::fs::read(&copy).unwrap() == std::fs::read(&full.checkpoint).unwrap(), "checkpoint bytes differ", &mut failures);
    let mut cfg = RunConfig::default();
    cfg.set("seed", "7").unwrap();
    let ds = load_dataset(&cfg, &synth(dir, 7)).unwrap();
    let sample = &ds.bags[..200];
    let a = forward_all(&params, sample, 64).unwrap();
    let b = forward_all(&reloaded, sample, 64).unwrap();
    check(a == b, "forward outputs differ after reload", &mut failures);
    let cache = dir.join("bags.bin");
    write_bag_cache(&cache, &ds).unwrap();
    check(read_bag_cache(&cache).unwrap() == ds, "bag cache round trip differs", &mut failures);

    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for case in 0..20 {
        let spec = SynthSpec {
            seed: rng.gen(),
            n_lines: rng.gen_range(1..3000),
            vocab_normal: rng.gen_range(4..60),
            vocab_anom: rng.gen_range(1..8),
            anomaly_rate: rng.gen_range(0.0..0.2),
            burst_weights: [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.1..2.0)],
            distractor_rate: rng.gen_range(0.0..1.0),
        };
        let w = rng.gen_range(1..30);
        let s = rng.gen_range(1..=w);
        let corpus = generate(&spec).unwrap();
        let ing = ingest_str(&corpus.text, &ingest_options(&cfg)).unwrap();
        let bags = sliding_bags(&ing.embeddings, &ing.labels(), ing.d, w, s).unwrap();
        check(oracle_bags(&spec, w, s).unwrap() == bags.labels(), format!("synth spec {case}: oracle labels differ"), &mut failures);
    }
    verdict(failures, format!("checkpoint and {} bags bit-identical, 20 synth specs agree with bagging", ds.len()))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Verdict {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let cfg = |seed| ModelConfig { d: 12, d_h: 16, n_proto: 4, k_heads: 3, d_a: 8, heads_enc: 4, h_c: 8, seed };
    let random_mask = |rng: &mut ChaCha8Rng, w: usize| {
        let mut m: Vec<bool> = (0..w).map(|_| rng.gen_bool(0.7)).collect();
        let i = rng.gen_range(0..w);
        m[i] = true;
        m
    };
    let random_bag = |rng: &mut ChaCha8Rng, mask: &[bool]| {
        let w = mask.len();
        let mut embeddings = vec![0f32; w * 12];
        for i in (0..w).filter(|&i| mask[i]) {
            embeddings[i * 12..(i + 1) * 12].iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        Bag { embeddings, mask: mask.to_vec(), label: 0, instance_labels: vec![0; w], source_span: (1, w) }
    };
    let cases = 50;
    let mut counts = [0usize; 5];
    for case in 0..cases {
        let w = rng.gen_range(1..=10);
        let mask = random_mask(&mut rng, w);

        // attention normalization and masking
        let p64 = ModelParams::<f64>::init(cfg(case)).unwrap();
        let bag = random_bag(&mut rng, &mask);
        let out = &forward(&p64, &[&bag]).unwrap()[0];
        let attn_ok = (0..3).all(|k| {
            let head = out.head(k);
            (head.iter().sum::<f64>() - 1.0).abs() < 1e-9 && (0..w).all(|i| mask[i] || head[i] == 0.0)
        });
        check(attn_ok, format!("case {case}: attention normalization"), &mut failures);
        counts[0] += attn_ok as usize;

        // prototype statistics
        let n_proto = rng.gen_range(1..6);
        let scale = 10f64.powf(rng.gen_range(-2.0..2.0));
        let z = Tensor::from_vec(w, 5, (0..w * 5).map(|_| scale * rng.gen_range(-1.0..1.0)).collect());
        let protos = Tensor::from_vec(n_proto, 5, (0..n_proto * 5).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let st = prototype_stats(&z, &mask, &protos).unwrap();
        let stats_ok = (0..w).filter(|&i| mask[i]).all(|i| {
            (0..n_proto).all(|j| (1.0 / 3.0 - 1e-12..=1.0).contains(&st.sim[i * n_proto + j])) && st.b[i] == 1.0 - st.m[i]
        }) && st.m_bag >= st.v_bag
            && (0.0..=1.0).contains(&st.e_bag);
        check(stats_ok, format!("case {case}: prototype statistics"), &mut failures);
        counts[1] += stats_ok as usize;

        // permutation equivariance of encode
        let h = Tensor::from_vec(w, 16, (0..w * 16).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut perm: Vec<usize> = (0..w).collect();
        perm.shuffle(&mut rng);
        let mut hp = Tensor::zeros(w, 16);
        let mp: Vec<bool> = perm.iter().map(|&s| mask[s]).collect();
        for (i, &s) in perm.iter().enumerate() {
            hp.row_mut(i).copy_from_slice(h.row(s));
        }
        let ze = encode(&p64, &h, &mask).unwrap();
        let zp = encode(&p64, &hp, &mp).unwrap();
        let equi = perm
            .iter()
            .enumerate()
            .filter(|&(i, _)| mp[i])
            .all(|(i, &s)| (0..16).all(|j| (zp.at(i, j) - ze.at(s, j)).abs() < 1e-9));
        check(equi, format!("case {case}: permutation equivariance"), &mut failures);
        counts[2] += equi as usize;

        // batch independence: alone vs. inside a batch of eight, bit-identical
        let p32 = ModelParams::<f32>::init(cfg(case)).unwrap();
        let batch: Vec<Bag> = (0..8)
            .map(|_| {
                let m = random_mask(&mut rng, w);
                random_bag(&mut rng, &m)
            })
            .collect();
        let refs: Vec<&Bag> = batch.iter().collect();
        let together = forward(&p32, &refs).unwrap();
        let indep = batch.iter().zip(&together).all(|(b, t)| &forward(&p32, &[b]).unwrap()[0] == t);
        check(indep, format!("case {case}: batch independence"), &mut failures);
        counts[3] += indep as usize;

        // b_i = 1 - m_i and M_bag >= V_bag on full forward outputs too
        let fw_ok = (0..w).filter(|&i| mask[i]).all(|i| out.stats.b[i] == 1.0 - out.stats.m[i])
            && out.stats.m_bag >= out.stats.v_bag
            && (0.0..=1.0).contains(&out.stats.e_bag);
        check(fw_ok, format!("case {case}: forward statistics"), &mut failures);
        counts[4] += fw_ok as usize;
    }
    verdict(
        failures,
        format!(
            "{cases} cases each: attention {}/{cases}, prototype stats {}/{cases}, equivariance {}/{cases}, batch independence {}/{cases}, forward stats {}/{cases}",
            counts[0], counts[1], counts[2], counts[3], counts[4]
        ),
    )
}

// ---------------------------------------------------------------- main

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a name filter
    // that does not mention this suite skips it.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        println!("{} criterion {n} ({name}): {}", if v.0 { "PASS" } else { "FAIL" }, v.1);
        results.push((n, name, v));
    };
    report(1, "metric oracles", criterion_1());
    report(2, "loss identities", criterion_2());
    report(3, "gradient check", criterion_3());
    let full = train_and_eval(dir.path(), "full7", 7, &[]);
    report(4, "end-to-end synthetic run", criterion_4(&full));
    let ablated = train_and_eval(dir.path(), "noconsistency7", 7, &["--no-consistency"]);
    report(5, "ablation direction", criterion_5(&full, &ablated));
    let again = train_and_eval(dir.path(), "full7_rerun", 7, &[]);
    let s8 = train_and_eval(dir.path(), "full8", 8, &[]);
    let s9 = train_and_eval(dir.path(), "full9", 9, &[]);
    println!("     seed 8: {}", describe(&s8));
    println!("     seed 9: {}", describe(&s9));
    report(6, "determinism and three seeds", criterion_6(dir.path(), &full, &again, &[&full, &s8, &s9]));
    report(7, "round trips", criterion_7(dir.path(), &full));
    report(8, "structural invariants", criterion_8());
    let failed: Vec<u32> = results.iter().filter(|r| !r.2 .0).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(", failing: {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
