//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nlq_core::anchors::{build_lattice, AnchorConfig};
use nlq_core::cli;
use nlq_core::data::features::{decode_matrix, encode_matrix};
use nlq_core::data::annotations::{format_annotations, parse_annotations};
use nlq_core::data::{
    generate_synthetic, prepare_samples, read_features, write_features, Dataset, QueryAnnotation, Sample, SyntheticSpec,
};
use nlq_core::eval::{evaluate, EvalOptions};
use nlq_core::inference::{
    predict_sample, rerank, PredictOptions, PredictedSpan, PredictionMode, QueryPrediction, RerankChannel,
};
use nlq_core::losses::{alignment_loss, boundary_loss, total_loss};
use nlq_core::nn::{
    decode_checkpoint, encode_checkpoint, gradcheck, load_checkpoint, EncoderConfig, ForwardMode, GradcheckOptions,
    GroundingModel, Matrix,
};
use nlq_core::span::{iou, TimeSpan, Units};
use nlq_core::trainer::{
    sample_loss, sample_objective, train, validate_model, Objective, Targets, TrainConfig, BEST_CHECKPOINT,
    LAST_CHECKPOINT, STEPS_LOG,
};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// 1 ------------------------------------------------------------------------

/// IoU from the case analysis of how two closed intervals can sit.
fn iou_oracle(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (la, lb) = (a.1 - a.0, b.1 - b.0);
    if a.1 <= b.0 || b.1 <= a.0 {
        return 0.0;
    }
    let inter = if a.0 <= b.0 && b.1 <= a.1 {
        lb
    } else if b.0 <= a.0 && a.1 <= b.1 {
        la
    } else if a.0 < b.0 {
        a.1 - b.0
    } else {
        b.1 - a.0
    };
    let union = a.1.max(b.1) - a.0.min(b.0);
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn criterion_iou() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let draw = |rng: &mut ChaCha8Rng| {
            // every fourth pair on a coarse grid to hit touching and nested cases exactly
            let (s, l) = if i % 4 == 0 {
                (rng.random_range(0..20) as f64, rng.random_range(0..8) as f64)
            } else {
                (rng.random_range(0.0..100.0), rng.random_range(0.0..30.0))
            };
            (s, s + l)
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let got = iou(&TimeSpan::raw(a.0, a.1, Units::Seconds), &TimeSpan::raw(b.0, b.1, Units::Seconds)).unwrap();
        worst = worst.max((got - iou_oracle(a, b)).abs());
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-12 && elapsed < Duration::from_secs(1),
        format!("max |diff| = {worst:.2e} over 10000 pairs in {elapsed:.2?}"),
    )
}

// 2 ------------------------------------------------------------------------

fn criterion_lattice() -> Outcome {
    let start = Instant::now();
    let set = build_lattice(&AnchorConfig::new(vec![0.01, 0.03], 600).unwrap()).map_err(|e| e.to_string())?;
    let in_range = set.spans.iter().all(|a| a.start >= 0.0 && a.end <= 600.0 && a.start <= a.end);
    let mut widths: Vec<f64> = Vec::new();
    for t in 0..600 {
        for k in 0..2 {
            let a = set.get(t, k);
            if a.start > 0.0 && a.end < 600.0 {
                widths.push(a.end - a.start);
                if a.end - a.start != set.window_sizes[k] {
                    return Err(format!("anchor ({t},{k}) width {} != {}", a.end - a.start, set.window_sizes[k]));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        set.len() == 1200 && in_range && set.window_sizes == vec![6.0, 18.0] && elapsed < Duration::from_secs(1),
        format!(
            "{} anchors, all in [0, 600]: {in_range}, widths {:?}, {} unclipped anchors checked, {elapsed:.2?}",
            set.len(),
            set.window_sizes,
            widths.len()
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn criterion_losses() -> Outcome {
    let align = alignment_loss(&[1.0, 0.0], &[1.0 - 1e-7, 0.5]).map_err(|e| e.to_string())?;
    let pred = [TimeSpan::raw(20.0, 50.0, Units::Index)];
    let gt = TimeSpan::raw(25.0, 45.0, Units::Index);
    let box_ = boundary_loss(&pred, &gt, &[true], 1.0, 100.0).map_err(|e| e.to_string())?;
    let total = total_loss(align, box_, 1.0);
    let exact = total.total == align + 1.0 * box_ && total_loss(align, box_, 0.0).total == align;
    check(
        (align - 0.346574).abs() <= 1e-6 && (box_ - 0.0025).abs() <= 1e-9 && exact && (total.total - 0.349074).abs() <= 1e-6,
        format!("align {align:.7}, box {box_:.10}, total {:.7}, composition exact: {exact}", total.total),
    )
}

// 4 ------------------------------------------------------------------------

fn criterion_gradcheck() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let config = EncoderConfig {
        hidden_dim: 8,
        num_heads: 2,
        intra_layers: 1,
        cross_layers: 2,
        video_input_dim: 6,
        text_input_dim: 5,
        num_scales: 2,
        ..Default::default()
    };
    let mut model = GroundingModel::init(&config, 11).map_err(|e| e.to_string())?;
    let anchors = AnchorConfig::new(vec![0.25, 0.5], 8).unwrap();
    let targets = Targets::new(PredictionMode::Anchor, &anchors).unwrap();
    let video = random_matrix(&mut rng, 8, 6);
    let text = random_matrix(&mut rng, 4, 5);
    let gt = TimeSpan::raw(1.3, 4.6, Units::Index);
    let obj = Objective::from(&TrainConfig::default());
    let (_, analytic) = sample_objective(&model, &targets, &video, &text, &[true; 4], &gt, &obj, ForwardMode::Eval)
        .map_err(|e| e.to_string())?;
    let opts = GradcheckOptions {
        samples: usize::MAX,
        ..Default::default()
    };
    let report = gradcheck(
        &mut model,
        &analytic,
        |m: &GroundingModel| sample_loss(m, &targets, &video, &text, &gt, &obj),
        &opts,
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check(
        report.max_rel_error < 1e-4 && report.per_block.len() == model.params.len() && elapsed < Duration::from_secs(120),
        format!(
            "max rel error {:.2e} at {} over {} scalars in {} blocks, {elapsed:.2?}",
            report.max_rel_error,
            report.worst_parameter,
            report.checked,
            report.per_block.len()
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn brute_recall(preds: &[QueryPrediction], gts: &[(String, f64, f64)], n: usize, m: f64) -> f64 {
    let mut hits = 0usize;
    for (q, s, e) in gts {
        let Some(p) = preds.iter().find(|p| &p.query_id == q) else { continue };
        let mut hit = false;
        for (rank, span) in p.proposals.iter().enumerate() {
            if rank >= n {
                break;
            }
            if iou_oracle((span.start_sec, span.end_sec), (*s, *e)) > m {
                hit = true;
            }
        }
        hits += hit as usize;
    }
    if gts.is_empty() {
        0.0
    } else {
        hits as f64 / gts.len() as f64
    }
}

fn criterion_metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ranks = [1usize, 5];
    let ious = [0.3, 0.5];
    for instance in 0..500 {
        let num_queries = rng.random_range(1..25);
        let mut anns = Vec::new();
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for q in 0..num_queries {
            // half-second grid makes IoU land exactly on thresholds now and then
            let s = rng.random_range(0..40) as f64 * 0.5;
            let e = s + rng.random_range(1..12) as f64 * 0.5;
            let qid = format!("q{q}");
            anns.push(QueryAnnotation {
                video_id: "v".into(),
                query_id: qid.clone(),
                text: String::new(),
                start_sec: s,
                end_sec: e,
                duration_sec: 100.0,
            });
            gts.push((qid.clone(), s, e));
            if rng.random_bool(0.1) {
                continue;
            }
            let proposals = (0..rng.random_range(0..9))
                .map(|_| {
                    let ps = rng.random_range(0..44) as f64 * 0.5;
                    PredictedSpan {
                        start_sec: ps,
                        end_sec: ps + rng.random_range(0..12) as f64 * 0.5,
                        score: 0.0,
                    }
                })
                .collect();
            preds.push(QueryPrediction {
                query_id: qid,
                video_id: "v".into(),
                proposals,
            });
        }
        let report = evaluate(&preds, &anns, &EvalOptions::default()).map_err(|e| e.to_string())?;
        for &n in &ranks {
            for &m in &ious {
                let got = report.recall(n, m).unwrap();
                let want = brute_recall(&preds, &gts, n, m);
                if got != want {
                    return Err(format!("instance {instance}: R@{n},IoU={m} = {got}, oracle {want}"));
                }
            }
        }
        let r = |n, m| report.recall(n, m).unwrap();
        if r(5, 0.3) < r(1, 0.3) || r(5, 0.5) < r(1, 0.5) || r(1, 0.3) < r(1, 0.5) || r(5, 0.3) < r(5, 0.5) {
            return Err(format!("instance {instance}: monotonicity violated"));
        }
    }
    Ok("500 random prediction sets match the brute-force oracle exactly; monotone in n and m".into())
}

// 6 and 7 ------------------------------------------------------------------

struct Learned {
    model: GroundingModel,
    anchors: AnchorConfig,
    val: Vec<Sample>,
}

fn criterion_learning(scratch: &Path) -> (Outcome, Option<Learned>) {
    let start = Instant::now();
    let spec = SyntheticSpec {
        num_videos: 250,
        frames_per_video: 256,
        feature_dim: 32,
        text_dim: 16,
        tokens_per_query: 8,
        queries_per_video: 4,
        span_fraction_range: (0.03, 0.08),
        noise_sigma: 0.5,
        seed: 42,
    };
    let run = || -> nlq_core::Result<(f64, f64, usize, String, Learned)> {
        let (train_set, val_set) = generate_synthetic(&spec)?.split_off_videos(50)?;
        let anchors = AnchorConfig::new(vec![0.02, 0.06], 128)?;
        let train_samples = prepare_samples(&train_set, 128)?;
        let val = prepare_samples(&val_set, 128)?;
        let encoder = EncoderConfig {
            hidden_dim: 64,
            num_heads: 4,
            intra_layers: 1,
            cross_layers: 2,
            ..Default::default()
        };
        let config = TrainConfig {
            epochs: 30,
            batch_size: 8,
            base_lr: 1e-3,
            warmup_steps: 100,
            mu: 10.0,
            seed: 42,
            ..Default::default()
        };
        let opts = PredictOptions::default();
        let out = train(&train_samples, &val, &encoder, &config, &anchors, &opts, scratch)?;
        let (model, _) = load_checkpoint(&out.best_checkpoint)?;
        let report = validate_model(&model, &anchors, &opts, &val)?;
        let last = out.epochs.last().map(|e| e.to_json().to_string()).unwrap_or_default();
        Ok((
            report.recall(1, 0.5).unwrap(),
            report.recall(5, 0.5).unwrap(),
            out.best_epoch,
            last,
            Learned { model, anchors, val },
        ))
    };
    match run() {
        Err(e) => (Err(format!("training failed: {e}")), None),
        Ok((r1, r5, best_epoch, last, learned)) => {
            let elapsed = start.elapsed();
            let outcome = check(
                r1 >= 0.60 && r5 >= 0.90 && elapsed < Duration::from_secs(15 * 60),
                format!(
                    "val R@1 IoU=0.5 {r1:.3} (>= 0.60), R@5 IoU=0.5 {r5:.3} (>= 0.90), best epoch {best_epoch}, {} queries, {elapsed:.1?}; final epoch {last}",
                    learned.val.len()
                ),
            );
            (outcome, Some(learned))
        }
    }
}

fn criterion_rerank(learned: Option<&Learned>) -> Outcome {
    let l = learned.ok_or("no trained model from the learning criterion")?;
    let lattice = build_lattice(&l.anchors).map_err(|e| e.to_string())?;
    let opts = PredictOptions::default();
    let thresholds = [0.3, 0.5];
    let mut base_hits = [0usize; 2];
    let mut rerank_hits = [0usize; 2];
    for s in &l.val {
        let ranked = predict_sample(&l.model, &lattice, s, &opts).map_err(|e| e.to_string())?;
        let gt = &s.gt_sec;
        let oracle: Vec<f64> = ranked.iter().map(|p| iou(&p.span_sec, gt).unwrap()).collect();
        let channel = RerankChannel {
            name: "true_iou".into(),
            weight: 1.0,
            scores: oracle,
        };
        let reranked = rerank(ranked.clone(), &[channel]).map_err(|e| e.to_string())?;
        for (j, &m) in thresholds.iter().enumerate() {
            base_hits[j] += (iou(&ranked[0].span_sec, gt).unwrap() > m) as usize;
            rerank_hits[j] += (iou(&reranked[0].span_sec, gt).unwrap() > m) as usize;
        }
    }
    let n = l.val.len() as f64;
    check(
        rerank_hits[0] >= base_hits[0] && rerank_hits[1] >= base_hits[1],
        format!(
            "R@1 IoU=0.3 {:.3} -> {:.3}, R@1 IoU=0.5 {:.3} -> {:.3}",
            base_hits[0] as f64 / n,
            rerank_hits[0] as f64 / n,
            base_hits[1] as f64 / n,
            rerank_hits[1] as f64 / n
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn cli_ok(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["nlq"];
    argv.extend_from_slice(args);
    match cli::run(argv.clone()) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", argv.join(" "))),
    }
}

fn criterion_determinism(scratch: &Path) -> Outcome {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let train_dir = scratch.join("train");
    let val_dir = scratch.join("val");
    cli_ok(&[
        "gen-data", "--out", &s(&train_dir), "--val-out", &s(&val_dir), "--val-videos", "2", "--num-videos", "8",
        "--frames", "64", "--dim", "8", "--text-dim", "6", "--tokens", "4", "--span-min", "0.05", "--span-max", "0.15",
        "--seed", "3",
    ])?;
    let config = scratch.join("run.json");
    fs::write(
        &config,
        r#"{"encoder": {"hidden_dim": 16, "num_heads": 2, "intra_layers": 1, "cross_layers": 1},
            "train": {"epochs": 3, "batch_size": 3, "base_lr": 0.001, "warmup_steps": 5},
            "anchors": {"scales": [0.1, 0.25], "num_frames": 32}}"#,
    )
    .map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for r in 0..2 {
        let out = scratch.join(format!("run{r}"));
        cli_ok(&[
            "train", "--config", &s(&config), "--data", &s(&train_dir), "--val", &s(&val_dir), "--out", &s(&out), "--seed",
            "9",
        ])?;
        let steps = fs::read_to_string(out.join(STEPS_LOG)).map_err(|e| e.to_string())?;
        let first10: Vec<String> = steps.lines().take(10).map(str::to_string).collect();
        let last = fs::read(out.join(LAST_CHECKPOINT)).map_err(|e| e.to_string())?;
        let best = fs::read(out.join(BEST_CHECKPOINT)).map_err(|e| e.to_string())?;
        runs.push((first10, last, best));
    }
    let (a, b) = (&runs[0], &runs[1]);
    check(
        a.0.len() == 10 && a.0 == b.0 && a.1 == b.1 && a.2 == b.2,
        format!(
            "{} logged steps compared, step logs equal: {}, final checkpoints ({} bytes) equal: {}",
            a.0.len(),
            a.0 == b.0,
            a.1.len(),
            a.1 == b.1 && a.2 == b.2
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn criterion_round_trips(scratch: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // feature container
    let mut features = BTreeMap::new();
    for i in 0..5 {
        features.insert(format!("video {i}"), random_matrix(&mut rng, 3 + i, 7));
    }
    let dir = scratch.join("features");
    let manifest = write_features(&dir, &features).map_err(|e| e.to_string())?;
    let back = read_features(&dir).map_err(|e| e.to_string())?;
    let mut features_ok = back.len() == features.len();
    for (id, m) in &back {
        let original = fs::read(dir.join(&manifest.files[id])).map_err(|e| e.to_string())?;
        let re = encode_matrix(m).map_err(|e| e.to_string())?;
        features_ok &= re == original && decode_matrix(id, &original).map_err(|e| e.to_string())? == *m;
    }

    // checkpoint
    let config = EncoderConfig {
        hidden_dim: 16,
        num_heads: 2,
        intra_layers: 1,
        cross_layers: 2,
        video_input_dim: 6,
        text_input_dim: 5,
        num_scales: 2,
        ..Default::default()
    };
    let mut model = GroundingModel::init(&config, 5).map_err(|e| e.to_string())?;
    model.params.round_to_f32();
    let meta = serde_json::json!({"note": "round trip"});
    let bytes = encode_checkpoint(&model, &meta).map_err(|e| e.to_string())?;
    let (loaded, meta_back) = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
    let bytes_again = encode_checkpoint(&loaded, &meta_back).map_err(|e| e.to_string())?;
    let video = random_matrix(&mut rng, 12, 6);
    let text = random_matrix(&mut rng, 4, 5);
    let out_a = model.infer(&video, &[true; 12], &text, &[true; 4]).map_err(|e| e.to_string())?;
    let out_b = loaded.infer(&video, &[true; 12], &text, &[true; 4]).map_err(|e| e.to_string())?;
    let same_outputs = out_a.confidence.data().iter().zip(out_b.confidence.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        && out_a.offsets.data().iter().zip(out_b.offsets.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    let checkpoint_ok = bytes == bytes_again && meta_back == meta && same_outputs;

    // annotations
    let ds: Dataset = generate_synthetic(&SyntheticSpec {
        num_videos: 20,
        seed: 9,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let text = format_annotations(&ds.annotations).map_err(|e| e.to_string())?;
    let parsed = parse_annotations(&text).map_err(|e| e.to_string())?;
    let annotations_ok = parsed == ds.annotations;

    check(
        features_ok && checkpoint_ok && annotations_ok,
        format!(
            "feature files bitwise: {features_ok}, checkpoint bytes and eval outputs bitwise: {checkpoint_ok}, annotations field-exact: {annotations_ok}"
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a filter that
    // does not mention this suite skips it
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let scratch = tempfile::tempdir().expect("scratch directory");
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id: usize, name: &'static str, outcome: Outcome| {
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("[{tag}] criterion {id} {name}: {detail}");
        results.push((id, name, outcome));
    };
    record(1, "iou oracle", criterion_iou());
    record(2, "anchor lattice", criterion_lattice());
    record(3, "loss hand values", criterion_losses());
    record(4, "gradient check", criterion_gradcheck());
    record(5, "metric oracle", criterion_metric_oracle());
    let learn_dir = scratch.path().join("learning");
    let (learning, learned) = criterion_learning(&learn_dir);
    record(6, "end-to-end learning", learning);
    record(7, "rerank oracle channel", criterion_rerank(learned.as_ref()));
    let det_dir = scratch.path().join("determinism");
    fs::create_dir_all(&det_dir).unwrap();
    record(8, "determinism", criterion_determinism(&det_dir));
    record(9, "format round trips", criterion_round_trips(scratch.path()));

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
