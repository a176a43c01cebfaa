//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use calltok::classify::{chance_level, cross_entropy, delta_drop, Task};
use calltok::corpus::{CorpusManifest, PaddingMode, SampleRecord, Split, SAMPLES_PER_FRAME};
use calltok::gvq::{GvqModel, TemperatureSchedule};
use calltok::optim::{finite_diff_grad, relative_error};
use calltok::seqdist::{category_means, levenshtein, DistanceKind};
use calltok::tokens::effective_frames;
use calltok::trainer::{train_quantizer, TrainConfig};
use calltok::vq::usage_from_counts;
use calltok::{
    Codebook, CodebookInit, Corpus, EmbeddingTensor, QuantizerKind, QuantizerModel, SynthConfig,
};
use calltok_cli::{
    cmd_classify, cmd_dist_report, cmd_synth, cmd_tokenize, cmd_train, run_with_threads, RunConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < budget, format!("took {t:.2?}, budget {budget:?}"))
}

// (dataset, task, n_C, chance, linear, vq, gvq, delta_vq, delta_gvq)
const TABLE: [(&str, &str, usize, f64, f64, f64, f64, f64, f64); 8] = [
    (
        "Bosshard", "CTID", 7, 14.30, 48.81, 35.20, 35.52, 27.88, 27.23,
    ),
    (
        "Wierucka", "CTID", 12, 8.30, 74.36, 54.91, 26.23, 26.16, 64.72,
    ),
    (
        "Abzaliev", "CTID", 14, 7.14, 41.07, 25.24, 9.78, 38.54, 76.20,
    ),
    ("IMV", "CTID", 11, 9.10, 61.75, 40.65, 24.94, 34.17, 59.60),
    (
        "Bosshard", "CLID", 8, 12.50, 45.52, 31.31, 24.65, 31.22, 45.85,
    ),
    (
        "Wierucka", "CLID", 8, 12.50, 49.60, 42.24, 18.29, 14.83, 63.13,
    ),
    (
        "Abzaliev", "CLID", 80, 1.25, 59.09, 17.35, 2.90, 70.64, 95.09,
    ),
    ("IMV", "CLID", 10, 10.00, 61.28, 35.51, 13.23, 42.05, 78.42),
];

fn delta_arithmetic() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (ds, task, _, _, lin, vq, gvq, dvq, dgvq) in TABLE {
        for (tok, published) in [(vq, dvq), (gvq, dgvq)] {
            let d = delta_drop(lin, tok).map_err(|e| e.to_string())?;
            let err = (d - published).abs();
            worst = worst.max(err);
            ensure(err <= 0.02, format!("{ds} {task}: {d:.4} vs {published}"))?;
        }
    }
    within_budget(start, Duration::from_secs(1))?;
    Ok(format!("16 cells, max |error| {worst:.4}"))
}

fn chance_levels() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (ds, task, n, chance, ..) in TABLE {
        let err = (chance_level(n) - chance).abs();
        worst = worst.max(err);
        ensure(
            err <= 0.05,
            format!("{ds} {task}: {} vs {chance}", chance_level(n)),
        )?;
    }
    within_budget(start, Duration::from_secs(1))?;
    Ok(format!("8 rows, max |error| {worst:.4}"))
}

fn gradient_checks() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 3];
    for _ in 0..100 {
        // VQ codebook loss w.r.t. the codebook.
        let (v, d) = (rng.random_range(2..8), rng.random_range(1..6));
        let params: Vec<f64> = (0..v * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cb = Codebook::new(params.clone(), v, d).map_err(|e| e.to_string())?;
        let (token, _) = cb.quantize_frame(&x).map_err(|e| e.to_string())?;
        let row = cb.codebook_grad(&x, token).map_err(|e| e.to_string())?;
        let mut analytic = vec![0.0; v * d];
        analytic[row.row * d..(row.row + 1) * d].copy_from_slice(&row.grad);
        let numeric = finite_diff_grad(
            |p: &[f64]| {
                Codebook::new(p.to_vec(), v, d)
                    .unwrap()
                    .vq_loss(&x, 0.25)
                    .unwrap()
                    .codebook_loss
            },
            &params,
            1e-6,
        )
        .map_err(|e| e.to_string())?;
        worst[0] = worst[0].max(relative_error(&analytic, &numeric));

        // GVQ total loss w.r.t. W and b with pinned Gumbel noise.
        let (v, d, b) = (
            rng.random_range(2..7),
            rng.random_range(1..5),
            rng.random_range(1..6),
        );
        let params: Vec<f64> = (0..d * v + v)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let codebook = vec![0.0; v * d];
        let frames: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let frame_refs: Vec<&[f64]> = frames.iter().map(|f| &f[..]).collect();
        let noise = calltok::gvq::sample_gumbel(&mut rng, b * v);
        let tau = rng.random_range(0.5..2.0);
        let (kl, div) = (rng.random_range(0.0..2.0), rng.random_range(0.0..0.5));
        let build = |p: &[f64]| {
            GvqModel::from_parts(
                d,
                v,
                p.to_vec(),
                codebook.clone(),
                kl,
                div,
                TemperatureSchedule::default(),
                0,
            )
            .unwrap()
        };
        let model = build(&params);
        let fwd = model
            .forward(&frame_refs, &noise, tau)
            .map_err(|e| e.to_string())?;
        let (_, analytic) = model.backward(&fwd).map_err(|e| e.to_string())?;
        let numeric = finite_diff_grad(
            |p: &[f64]| {
                let m = build(p);
                m.loss(&m.forward(&frame_refs, &noise, tau).unwrap())
                    .unwrap()
                    .total
            },
            &params,
            1e-6,
        )
        .map_err(|e| e.to_string())?;
        worst[1] = worst[1].max(relative_error(&analytic, &numeric));

        // Linear-probe cross-entropy w.r.t. W and b.
        let (f, c, n) = (
            rng.random_range(1..6),
            rng.random_range(2..6),
            rng.random_range(1..10),
        );
        let params: Vec<f64> = (0..f * c + c)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..f).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let refs: Vec<&[f64]> = feats.iter().map(|x| &x[..]).collect();
        let (_, analytic) = cross_entropy(&params, &refs, &labels, c);
        let numeric = finite_diff_grad(
            |p: &[f64]| cross_entropy(p, &refs, &labels, c).0,
            &params,
            1e-6,
        )
        .map_err(|e| e.to_string())?;
        worst[2] = worst[2].max(relative_error(&analytic, &numeric));
    }
    for (name, w) in ["vq", "gvq", "linear"].iter().zip(worst) {
        ensure(w < 1e-4, format!("{name} relative error {w:e}"))?;
    }
    within_budget(start, Duration::from_secs(30))?;
    Ok(format!(
        "100 points each, max relative error vq {:.1e}, gvq {:.1e}, linear {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

fn lev_oracle(a: &[u8], b: &[u8]) -> usize {
    fn go(
        a: &[u8],
        b: &[u8],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize), usize>,
    ) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
        let del = go(a, b, i + 1, j, memo) + 1;
        let ins = go(a, b, i, j + 1, memo) + 1;
        let v = sub.min(del).min(ins);
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

fn levenshtein_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seq = |rng: &mut ChaCha8Rng| -> Vec<u8> {
        let n = rng.random_range(0..=12);
        (0..n).map(|_| rng.random_range(0..5)).collect()
    };
    for i in 0..5000 {
        let (a, b) = (seq(&mut rng), seq(&mut rng));
        let (got, want) = (levenshtein(&a, &b), lev_oracle(&a, &b));
        ensure(
            got == want,
            format!("pair {i}: {a:?} {b:?} gave {got}, oracle {want}"),
        )?;
    }
    for i in 0..1000 {
        let (a, b, c) = (seq(&mut rng), seq(&mut rng), seq(&mut rng));
        let ab = levenshtein(&a, &b);
        ensure(ab == levenshtein(&b, &a), format!("triple {i}: asymmetric"))?;
        ensure(levenshtein(&a, &a) == 0, format!("triple {i}: d(a,a) != 0"))?;
        ensure(
            (ab == 0) == (a == b),
            format!("triple {i}: identity of indiscernibles"),
        )?;
        ensure(
            levenshtein(&a, &c) <= ab + levenshtein(&b, &c),
            format!("triple {i}: triangle inequality"),
        )?;
    }
    within_budget(start, Duration::from_secs(10))?;
    Ok("5000 oracle pairs equal, axioms hold on 1000 triples".into())
}

fn quantization_correctness() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ties = 0;
    for i in 0..10_000 {
        let v = rng.random_range(2..=64);
        let d = rng.random_range(1..=8);
        // Small integer grids make exact distance ties common.
        let coarse = i % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> f32 {
            if coarse {
                rng.random_range(-2i32..=2) as f32
            } else {
                rng.random_range(-3.0f32..3.0)
            }
        };
        let vectors: Vec<f32> = (0..v * d).map(|_| draw(&mut rng)).collect();
        let x: Vec<f32> = (0..d).map(|_| draw(&mut rng)).collect();
        let cb = Codebook::new(vectors.clone(), v, d).map_err(|e| e.to_string())?;
        let (got, _) = cb.quantize_frame(&x).map_err(|e| e.to_string())?;
        let dists: Vec<f64> = vectors
            .chunks(d)
            .map(|c| {
                c.iter()
                    .zip(&x)
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum()
            })
            .collect();
        let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
        let want = dists.iter().position(|&q| q == min).unwrap();
        if dists.iter().filter(|&&q| q == min).count() > 1 {
            ties += 1;
        }
        ensure(
            got == want,
            format!("instance {i}: got {got}, brute force {want}"),
        )?;
    }
    within_budget(start, Duration::from_secs(10))?;
    Ok(format!("10000 instances equal ({ties} with tied minima)"))
}

fn cluster_corpus(
    centers: &[Vec<f32>],
    n_samples: usize,
    frames: usize,
    noise: f64,
    seed: u64,
) -> Corpus<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = centers[0].len();
    let mut records = Vec::new();
    let mut tensors = Vec::new();
    for s in 0..n_samples {
        let split = match s % 5 {
            0..=2 => Split::Train,
            3 => Split::Val,
            _ => Split::Test,
        };
        let mut values = Vec::with_capacity(frames * d);
        for f in 0..frames {
            let c = &centers[(s + f * 3) % centers.len()];
            for &cv in c {
                let z: f64 = rng.sample(StandardNormal);
                values.push(cv + (noise * z) as f32);
            }
        }
        records.push(SampleRecord {
            sample_id: format!("c{s:04}"),
            embedding_path: format!("emb/c{s:04}.cemb"),
            raw_length: frames as u64 * SAMPLES_PER_FRAME,
            calltype_label: 0,
            caller_label: 0,
            split,
        });
        tensors.push(EmbeddingTensor::new(1, frames, d, values).unwrap());
    }
    let manifest = CorpusManifest {
        dataset_name: "clusters".into(),
        n_calltype: 1,
        n_caller: 1,
        records,
    };
    Corpus::from_parts(manifest, tensors, PaddingMode::Unpadded).unwrap()
}

fn vq_convergence() -> Check {
    let start = Instant::now();
    // Eight even-parity corners of the unit 4-cube: pairwise distance >= sqrt(2).
    let centers: Vec<Vec<f32>> = (0u32..16)
        .filter(|m| m.count_ones() % 2 == 0)
        .map(|m| (0..4).map(|b| ((m >> b) & 1) as f32).collect())
        .collect();
    let corpus = cluster_corpus(&centers, 640, 8, 0.05, 11);
    let mut config = TrainConfig {
        max_epochs: 20,
        learning_rate: 1e-3,
        vocab_size: 8,
        seed: 1,
        ..TrainConfig::default()
    };
    config.vq.init = CodebookInit::KMeansPlusPlus;
    let out = train_quantizer(&corpus, &config).map_err(|e| e.to_string())?;
    let QuantizerModel::Vq(cb) = &out.model else {
        return Err("expected a VQ model".into());
    };
    let mut worst: f64 = 0.0;
    for (i, c) in centers.iter().enumerate() {
        let best = (0..8)
            .map(|k| {
                cb.vector(k)
                    .iter()
                    .zip(c)
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(best);
        ensure(
            best <= 0.05,
            format!("center {i}: nearest code at {best:.4}"),
        )?;
    }
    ensure(out.history.epochs.len() <= 20, "more than 20 epochs")?;
    within_budget(start, Duration::from_secs(60))?;
    Ok(format!(
        "every center has a code within {worst:.4} (<= 0.05)"
    ))
}

fn synth_corpus(cfg: &SynthConfig) -> Corpus<f32> {
    let s = calltok::corpus::generate_synthetic(cfg).unwrap();
    Corpus::from_parts(s.manifest, s.tensors, PaddingMode::Unpadded).unwrap()
}

fn gvq_diversity() -> Check {
    let start = Instant::now();
    let uniform = usage_from_counts(&[7; 50])
        .map_err(|e| e.to_string())?
        .perplexity;
    ensure(
        uniform == 50.0,
        format!("uniform usage perplexity {uniform}"),
    )?;
    let single = usage_from_counts(&[0, 0, 12, 0])
        .map_err(|e| e.to_string())?
        .perplexity;
    ensure(single == 1.0, format!("single-code perplexity {single}"))?;

    let corpus = synth_corpus(&SynthConfig {
        samples_per_pair: 10,
        seed: 21,
        ..SynthConfig::default()
    });
    let run = |div: f64| {
        let mut c = TrainConfig {
            quantizer_kind: QuantizerKind::Gvq,
            learning_rate: 1e-2,
            seed: 5,
            ..TrainConfig::default()
        };
        c.gvq.kl_weight = 0.0;
        c.gvq.diversity_weight = div;
        train_quantizer(&corpus, &c).map_err(|e| e.to_string())
    };
    let with = run(0.5)?;
    let without = run(0.0)?;
    let a = with.history.epochs.last().unwrap().normalized_perplexity;
    let b = without.history.epochs.last().unwrap().normalized_perplexity;
    ensure(
        a > b,
        format!("normalized perplexity {a:.4} (div 0.5) not above {b:.4} (div 0)"),
    )?;
    ensure(a > 0.8, format!("normalized perplexity {a:.4} <= 0.8"))?;
    within_budget(start, Duration::from_secs(120))?;
    Ok(format!(
        "final normalized perplexity {a:.4} (div 0.5) vs {b:.4} (div 0); PPL checks exact"
    ))
}

fn category_ordering() -> Check {
    let start = Instant::now();
    let corpus = synth_corpus(&SynthConfig {
        samples_per_pair: 20,
        seed: 31,
        ..SynthConfig::default()
    });
    let config = TrainConfig {
        seed: 2,
        ..TrainConfig::default()
    };
    let out = train_quantizer(&corpus, &config).map_err(|e| e.to_string())?;
    let seqs =
        calltok::tokens::tokenize_corpus(&corpus, &out.model, None).map_err(|e| e.to_string())?;
    let file = calltok::TokenFile {
        header: None,
        sequences: seqs,
    };
    let report = category_means(&file, &corpus.manifest, DistanceKind::Normalized)
        .map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for l in &report.layers {
        let first = l.categories[0].mean.ok_or("category (i) empty")?;
        let last = l.categories[3].mean.ok_or("category (iv) empty")?;
        ensure(
            first < last,
            format!("layer {}: (i) {first:.4} >= (iv) {last:.4}", l.layer),
        )?;
        parts.push(format!("L{} {first:.3}<{last:.3}", l.layer));
    }
    within_budget(start, Duration::from_secs(120))?;
    Ok(parts.join(", "))
}

fn base_config(dir: &Path, seed: u64) -> RunConfig {
    RunConfig {
        corpus_root: Some(dir.join("corpus")),
        output_dir: Some(dir.join("out")),
        seed,
        ..RunConfig::default()
    }
}

/// synth -> train (VQ grid, GVQ single point) -> tokenize -> dist-report ->
/// classify. Returns the classification of the real and shuffled labels.
fn pipeline(
    cfg: &RunConfig,
    full_vq_grid: bool,
) -> Result<(calltok_cli::ClassifyOutcome, Vec<PathBuf>), String> {
    let err = |e: calltok_cli::CliError| e.to_string();
    let mut synth = cfg.clone();
    synth.output_dir = cfg.corpus_root.clone();
    let mut written = cmd_synth(&synth).map_err(err)?.written;
    for kind in [QuantizerKind::Vq, QuantizerKind::Gvq] {
        let mut c = cfg.clone();
        c.quantizer = kind;
        c.single_point = kind == QuantizerKind::Gvq || !full_vq_grid;
        written.extend(cmd_train(&c).map_err(err)?.written);
        written.extend(cmd_tokenize(&c).map_err(err)?.written);
        written.extend(cmd_dist_report(&c).map_err(err)?.written);
    }
    let classified = cmd_classify(cfg).map_err(err)?;
    written.extend(classified.outcome.written.iter().cloned());
    Ok((classified, written))
}

fn end_to_end() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = base_config(dir.path(), 41);
    let (real, _) = pipeline(&cfg, true)?;
    let mut shuffled_cfg = cfg.clone();
    shuffled_cfg.shuffle_labels = true;
    shuffled_cfg.output_dir = Some(dir.path().join("shuffled"));
    shuffled_cfg.vq_tokens = Some(dir.path().join("out/tokens_vq.jsonl"));
    shuffled_cfg.gvq_tokens = Some(dir.path().join("out/tokens_gvq.jsonl"));
    let shuffled = cmd_classify(&shuffled_cfg).map_err(|e| e.to_string())?;

    let row = |o: &calltok_cli::ClassifyOutcome| {
        o.summary
            .iter()
            .find(|r| r.task == Task::Ctid)
            .cloned()
            .unwrap()
    };
    let ctid = row(&real);
    let knn = ctid.vq.ok_or("no VQ k-NN score")?.1;
    let linear = ctid.linear.ok_or("no linear score")?.1;
    let gvq = ctid.gvq.ok_or("no GVQ k-NN score")?.1;
    let control = row(&shuffled).vq.ok_or("no shuffled score")?.1;
    ensure(knn >= 95.0, format!("CTID k-NN test UAR {knn:.2} < 95"))?;
    ensure(
        (control - 25.0).abs() <= 10.0,
        format!("shuffled control UAR {control:.2} not within 25 +- 10"),
    )?;
    ensure(
        real.scores
            .iter()
            .all(|s| (0.0..=100.0).contains(&s.test_uar)),
        "UAR outside [0, 100]",
    )?;
    ensure(
        (ctid.chance - 25.0).abs() < 1e-12,
        format!("chance {} for 4 call types", ctid.chance),
    )?;
    within_budget(start, Duration::from_secs(300))?;
    Ok(format!(
        "CTID test UAR: VQ k-NN {knn:.2}, GVQ k-NN {gvq:.2}, linear {linear:.2}; shuffled control {control:.2}"
    ))
}

fn trim_formula() -> Check {
    let start = Instant::now();
    let ex = [(48000, 150), (16000, 50), (10000, 31)];
    for (raw, want) in ex {
        let got = effective_frames(raw, 48000, 150).map_err(|e| e.to_string())?;
        ensure(got == want, format!("raw {raw}: {got} != {want}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..1000 {
        let n = rng.random_range(1..=64);
        let raws: Vec<u64> = (0..n).map(|_| rng.random_range(1..2_000_000)).collect();
        let longest = *raws.iter().max().unwrap();
        let padded = rng.random_range(1..=10_000);
        for &r in &raws {
            let e = effective_frames(r, longest, padded).map_err(|e| e.to_string())?;
            ensure(
                (1..=padded).contains(&e),
                format!("config {i}: {e} outside [1, {padded}]"),
            )?;
            if r == longest {
                ensure(
                    e == padded,
                    format!("config {i}: longest keeps {e} of {padded}"),
                )?;
            }
        }
    }
    within_budget(start, Duration::from_secs(1))?;
    Ok("3 examples exact, longest-in-batch keeps all frames in 1000 configs".into())
}

fn snapshot(root: &Path, files: &[PathBuf]) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    files
        .iter()
        .map(|p| {
            let rel = p
                .strip_prefix(root)
                .map_err(|e| e.to_string())?
                .to_path_buf();
            Ok((
                rel,
                std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?,
            ))
        })
        .collect()
}

fn determinism() -> Check {
    let start = Instant::now();
    let mut runs = Vec::new();
    for threads in [1usize, 4] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cfg = base_config(dir.path(), 51);
        cfg.synth.samples_per_pair = 10;
        cfg.dump_matrix = true;
        let (_, written) =
            run_with_threads(threads, || pipeline(&cfg, true)).map_err(|e| e.to_string())??;
        runs.push(snapshot(dir.path(), &written)?);
    }
    let (a, b) = (&runs[0], &runs[1]);
    ensure(a.keys().eq(b.keys()), "runs wrote different file sets")?;
    for (path, bytes) in a {
        ensure(
            &b[path] == bytes,
            format!("{} differs between 1 and 4 threads", path.display()),
        )?;
    }
    let n_tokens = a
        .keys()
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .count();
    let n_csv = a
        .keys()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .count();
    let n_ckpt = a
        .keys()
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .count();
    ensure(
        n_tokens == 2 && n_ckpt == 2 && n_csv >= 5,
        "expected token files, CSVs and checkpoints",
    )?;
    within_budget(start, Duration::from_secs(600))?;
    Ok(format!(
        "{} artifacts byte-identical across 1 and 4 threads",
        a.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("delta arithmetic reproduction", delta_arithmetic),
        ("chance-level reproduction", chance_levels),
        ("gradient checks", gradient_checks),
        ("Levenshtein oracle equivalence", levenshtein_oracle),
        ("quantization correctness", quantization_correctness),
        ("VQ convergence", vq_convergence),
        ("GVQ diversity behavior", gvq_diversity),
        ("category ordering", category_ordering),
        ("end-to-end classification", end_to_end),
        ("trim formula", trim_formula),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = t.elapsed();
        match result {
            Ok(msg) => println!("PASS {:>2} {name}: {msg} [{elapsed:.2?}]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {msg} [{elapsed:.2?}]", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
