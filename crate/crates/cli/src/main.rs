//! `mcrlab`: corpus generation, pretraining, evaluation, benchmarking and
//! ablation runs.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Arg, ArgAction, ArgMatches, Command};
use mcrlab_core::alignment::{export_embeddings, modality_gap, EmbeddingRow};
use mcrlab_core::config::{load_config, Arm, ExperimentConfig, InputMode};
use mcrlab_core::data::{
    build_vocabulary, generate_corpus, load_manifest, prepare_studies, split_train_test, synthetic_vocabulary,
    write_corpus, PreparedStudy, StudyPair, SyntheticSpec,
};
use mcrlab_core::encoders::Modality;
use mcrlab_core::evaluation::{
    evaluate_index, embed_corpus, grouped_csv, nlg_csv, recall_csv, topk_dump, train_and_evaluate, write_json,
    Direction,
};
use mcrlab_core::preprocessing::Vocabulary;
use mcrlab_core::training::{
    load_checkpoint, resource_report, save_checkpoint, tokens_per_sample, train_until, TrainState,
};
use mcrlab_core::{McrError, Result};
use serde_json::{json, Value};

const CHECKPOINT: &str = "checkpoint.ckpt";

fn config_args() -> Vec<Arg> {
    ExperimentConfig::default_fields()
        .into_iter()
        .map(|(key, default)| {
            let id: &'static str = Box::leak(key.clone().into_boxed_str());
            Arg::new(id)
                .long(id)
                .alias(key.replace('_', "-"))
                .value_name("VALUE")
                .help(format!("config field `{key}` [default: {default}]"))
                .help_heading("Config")
        })
        .collect()
}

fn common_args() -> Vec<Arg> {
    vec![
        Arg::new("workdir")
            .long("workdir")
            .value_name("DIR")
            .default_value(".")
            .help("base directory for every relative path"),
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("TOML config file; missing keys take their defaults"),
    ]
}

fn split_args() -> Vec<Arg> {
    vec![
        Arg::new("data")
            .long("data")
            .value_name("DIR")
            .default_value("data")
            .help("corpus directory holding manifest.jsonl"),
        Arg::new("test_size")
            .long("test-size")
            .value_name("N")
            .default_value("200")
            .value_parser(clap::value_parser!(usize))
            .help("studies held out for evaluation"),
        Arg::new("split_seed")
            .long("split-seed")
            .value_name("SEED")
            .default_value("0")
            .value_parser(clap::value_parser!(u64))
            .help("seed of the train/test split"),
    ]
}

fn ks_arg() -> Arg {
    Arg::new("ks")
        .long("ks")
        .value_name("LIST")
        .default_value("1,5,10")
        .help("comma-separated recall cutoffs")
}

fn cli() -> Command {
    let spec = SyntheticSpec::default();
    Command::new("mcrlab")
        .about("Masked contrastive reconstruction pretraining and cross-modal retrieval")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("gen-data")
                .about("Write a synthetic paired image/report corpus")
                .args(common_args())
                .arg(Arg::new("out").long("out").value_name("DIR").default_value("data"))
                .arg(
                    Arg::new("n_studies")
                        .long("n-studies")
                        .value_name("N")
                        .default_value(spec.n_studies.to_string())
                        .value_parser(clap::value_parser!(usize)),
                )
                .arg(
                    Arg::new("noise")
                        .long("noise")
                        .value_name("STD")
                        .default_value(spec.noise.to_string())
                        .value_parser(clap::value_parser!(f32)),
                )
                .arg(
                    Arg::new("corpus_seed")
                        .long("corpus-seed")
                        .value_name("SEED")
                        .default_value(spec.seed.to_string())
                        .value_parser(clap::value_parser!(u64)),
                )
                .arg(
                    Arg::new("image_size")
                        .long("image-size")
                        .value_name("PIXELS")
                        .default_value(spec.image_size.to_string())
                        .value_parser(clap::value_parser!(usize)),
                ),
        )
        .subcommand(
            Command::new("pretrain")
                .about("Train a model and write checkpoints and a loss log")
                .args(common_args())
                .args(split_args())
                .arg(Arg::new("out").long("out").value_name("DIR").default_value("runs/pretrain"))
                .arg(
                    Arg::new("arm")
                        .long("arm")
                        .value_name("a-f")
                        .help("ablation arm; sets input_mode, align_strategy and the reconstruction weights"),
                )
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .action(ArgAction::SetTrue)
                        .help("continue from the checkpoint in --out"),
                )
                .arg(
                    Arg::new("stop_after")
                        .long("stop-after")
                        .value_name("EPOCHS")
                        .value_parser(clap::value_parser!(usize))
                        .help("stop once this many epochs are complete [default: epochs]"),
                )
                .args(config_args()),
        )
        .subcommand(
            Command::new("eval")
                .about("Score retrieval, retrieved-report text metrics, sentence groups and the modality gap")
                .args(common_args())
                .args(split_args())
                .arg(
                    Arg::new("run")
                        .long("run")
                        .value_name("DIR")
                        .default_value("runs/pretrain")
                        .help("pretraining output directory"),
                )
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("FILE")
                        .help("checkpoint to load [default: <run>/checkpoint.ckpt]"),
                )
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_name("PART")
                        .default_value("test")
                        .value_parser(["test", "train", "all"]),
                )
                .arg(ks_arg())
                .arg(
                    Arg::new("k_max")
                        .long("k-max")
                        .value_name("K")
                        .default_value("10")
                        .value_parser(clap::value_parser!(usize)),
                )
                .arg(
                    Arg::new("dump_queries")
                        .long("dump-queries")
                        .value_name("N")
                        .default_value("5")
                        .value_parser(clap::value_parser!(usize))
                        .help("studies to write top-K dumps for"),
                )
                .arg(
                    Arg::new("dump_k")
                        .long("dump-k")
                        .value_name("K")
                        .default_value("3")
                        .value_parser(clap::value_parser!(usize)),
                )
                .arg(Arg::new("out").long("out").value_name("DIR").help("[default: <run>/eval]")),
        )
        .subcommand(
            Command::new("benchmark")
                .about("Token accounting and timed steps for both input modes")
                .args(common_args())
                .arg(
                    Arg::new("data")
                        .long("data")
                        .value_name("DIR")
                        .help("corpus to sample batches from [default: synthetic, generated in memory]"),
                )
                .arg(
                    Arg::new("probe_steps")
                        .long("probe-steps")
                        .value_name("N")
                        .default_value("20")
                        .value_parser(clap::value_parser!(usize)),
                )
                .arg(Arg::new("out").long("out").value_name("DIR").default_value("runs/benchmark"))
                .args(config_args()),
        )
        .subcommand(
            Command::new("ablate")
                .about("Train and evaluate the ablation arms over several seeds")
                .args(common_args())
                .args(split_args())
                .arg(
                    Arg::new("arms")
                        .long("arms")
                        .value_name("LIST")
                        .default_value("a,b,c,d,e,f"),
                )
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_name("LIST")
                        .default_value("0,1,2"),
                )
                .arg(ks_arg())
                .arg(Arg::new("out").long("out").value_name("DIR").default_value("runs/ablate"))
                .args(config_args()),
        )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = match name {
        "gen-data" => cmd_gen_data(sub),
        "pretrain" => cmd_pretrain(sub),
        "eval" => cmd_eval(sub),
        "benchmark" => cmd_benchmark(sub),
        "ablate" => cmd_ablate(sub),
        _ => unreachable!("clap rejects unknown subcommands"),
    };
    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn workdir(m: &ArgMatches) -> PathBuf {
    PathBuf::from(m.get_one::<String>("workdir").expect("defaulted"))
}

fn path_arg(m: &ArgMatches, id: &str) -> PathBuf {
    workdir(m).join(m.get_one::<String>(id).expect("defaulted"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| McrError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| McrError::io(path, e))
}

/// Config from `--config`, the seed variable and explicitly given config flags.
fn resolve_config(m: &ArgMatches) -> Result<ExperimentConfig> {
    let mut overrides = Vec::new();
    for (key, _) in ExperimentConfig::default_fields() {
        if let Some(v) = m.get_one::<String>(&key) {
            overrides.push((key, v.clone()));
        }
    }
    let path = m.get_one::<String>("config").map(|p| workdir(m).join(p));
    load_config(path.as_deref(), &overrides)
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    let items: Vec<T> = raw
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| McrError::config(what, format!("cannot parse `{s}`")))
        })
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(McrError::config(what, "list is empty"));
    }
    Ok(items)
}

fn load_vocab_or_build(data: &Path, train: &[StudyPair], cfg: &ExperimentConfig) -> Result<Vocabulary> {
    let path = data.join("vocab.txt");
    if path.exists() {
        Vocabulary::load(&path)
    } else {
        Ok(build_vocabulary(train.iter().map(|p| p.report.as_str()), cfg.vocab_size))
    }
}

fn load_split(m: &ArgMatches) -> Result<(PathBuf, Vec<StudyPair>, Vec<StudyPair>)> {
    let data = path_arg(m, "data");
    let pairs = load_manifest(&data.join("manifest.jsonl"))?;
    let test_size = *m.get_one::<usize>("test_size").expect("defaulted");
    let seed = *m.get_one::<u64>("split_seed").expect("defaulted");
    let (train, test) = split_train_test(&pairs, test_size, seed)?;
    Ok((data, train, test))
}

fn write_summary(dir: &Path, summary: &Value) -> Result<()> {
    write_json(&dir.join("summary.json"), summary)
}

fn cmd_gen_data(m: &ArgMatches) -> Result<Value> {
    let start = Instant::now();
    let out = path_arg(m, "out");
    let spec = SyntheticSpec {
        n_studies: *m.get_one::<usize>("n_studies").expect("defaulted"),
        noise: *m.get_one::<f32>("noise").expect("defaulted"),
        seed: *m.get_one::<u64>("corpus_seed").expect("defaulted"),
        image_size: *m.get_one::<usize>("image_size").expect("defaulted"),
        ..SyntheticSpec::default()
    };
    let (pairs, truth) = generate_corpus(&spec)?;
    let vocab = synthetic_vocabulary(&spec.catalog);
    write_corpus(&out, &pairs, Some(&truth), &vocab)?;
    let summary = json!({
        "command": "gen-data",
        "n_studies": pairs.len(),
        "n_images": pairs.iter().map(|p| p.images.len()).sum::<usize>(),
        "vocab_size": vocab.len(),
        "noise": spec.noise,
        "corpus_seed": spec.seed,
        "artifacts": ["manifest.jsonl", "ground_truth.jsonl", "vocab.txt", "images/"],
        "timing": {"wall_seconds": start.elapsed().as_secs_f64()},
    });
    write_summary(&out, &summary)?;
    Ok(summary)
}

fn last_log_row(path: &Path) -> Result<Option<Value>> {
    if !path.exists() {
        return Ok(None);
    }
    let f = fs::File::open(path).map_err(|e| McrError::io(path, e))?;
    let mut last = None;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| McrError::io(path, e))?;
        if !line.trim().is_empty() {
            last = Some(line);
        }
    }
    Ok(last.and_then(|l| serde_json::from_str(&l).ok()))
}

fn cmd_pretrain(m: &ArgMatches) -> Result<Value> {
    let start = Instant::now();
    let mut cfg = resolve_config(m)?;
    let arm = m.get_one::<String>("arm").map(|a| a.parse::<Arm>()).transpose()?;
    if let Some(a) = arm {
        cfg = a.apply(&cfg);
    }
    let out = path_arg(m, "out");
    ensure_dir(&out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;

    let (data, train_pairs, _) = load_split(m)?;
    let vocab = load_vocab_or_build(&data, &train_pairs, &cfg)?;
    vocab.save(&out.join("vocab.txt"))?;
    let studies = prepare_studies(&train_pairs, &vocab, &cfg)?;

    let ckpt = out.join(CHECKPOINT);
    let resume = m.get_flag("resume") && ckpt.exists();
    let mut state = if resume {
        load_checkpoint(&ckpt, Some(&cfg))?
    } else {
        TrainState::new(&cfg)?
    };
    let start_step = state.step;
    let log_path = out.join("loss_log.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(&log_path)
        .map_err(|e| McrError::io(&log_path, e))?;
    let until = m.get_one::<usize>("stop_after").copied().unwrap_or(cfg.epochs);
    train_until(&mut state, &studies, until, Some(&mut log as &mut dyn Write), |s| {
        save_checkpoint(s, &ckpt)
    })?;
    if state.step == start_step {
        save_checkpoint(&state, &ckpt)?;
    }

    let summary = json!({
        "command": "pretrain",
        "arm": arm.map(|a| a.letter().to_string()),
        "components": arm.map(|a| a.components()),
        "input_mode": cfg.input_mode,
        "align_strategy": cfg.align_strategy,
        "lambda_vrc": cfg.lambda_vrc,
        "lambda_mim": cfg.lambda_mim,
        "lambda_mrm": cfg.lambda_mrm,
        "config_hash": cfg.hash(),
        "n_train": studies.len(),
        "resumed_from_step": resume.then_some(start_step),
        "steps": state.step,
        "epochs": state.epoch,
        "tau": state.model.tau(&state.store),
        "last_log_row": last_log_row(&log_path)?,
        "artifacts": ["config.toml", "vocab.txt", "loss_log.jsonl", CHECKPOINT],
        "timing": {"wall_seconds": start.elapsed().as_secs_f64()},
    });
    write_summary(&out, &summary)?;
    Ok(summary)
}

fn cmd_eval(m: &ArgMatches) -> Result<Value> {
    let start = Instant::now();
    let run = path_arg(m, "run");
    let ckpt = m
        .get_one::<String>("checkpoint")
        .map(|p| workdir(m).join(p))
        .unwrap_or_else(|| run.join(CHECKPOINT));
    let state = load_checkpoint(&ckpt, None)?;
    let cfg = state.cfg().clone();
    let out = m
        .get_one::<String>("out")
        .map(|p| workdir(m).join(p))
        .unwrap_or_else(|| run.join("eval"));
    ensure_dir(&out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;

    let (data, train_pairs, test_pairs) = load_split(m)?;
    let pairs: Vec<StudyPair> = match m.get_one::<String>("split").expect("defaulted").as_str() {
        "train" => train_pairs,
        "test" => test_pairs,
        _ => train_pairs.into_iter().chain(test_pairs).collect(),
    };
    let vocab_path = run.join("vocab.txt");
    let vocab = if vocab_path.exists() {
        Vocabulary::load(&vocab_path)?
    } else {
        load_vocab_or_build(&data, &pairs, &cfg)?
    };
    let studies = prepare_studies(&pairs, &vocab, &cfg)?;
    let ks: Vec<usize> = parse_list(m.get_one::<String>("ks").expect("defaulted"), "ks")?;
    let k_max = *m.get_one::<usize>("k_max").expect("defaulted");

    let index = embed_corpus(&state.model, &state.store, &studies, 64)?;
    let texts: Vec<&str> = studies.iter().map(|s| s.report.as_str()).collect();
    let sentences: Vec<usize> = studies.iter().map(|s| s.n_sentences).collect();
    let report = evaluate_index(&index, &texts, &sentences, &ks, k_max)?;

    write_json(&out.join("recall.json"), &report.recall)?;
    write_text(&out.join("recall.csv"), &recall_csv(&report.recall))?;
    write_json(&out.join("nlg.json"), &report.nlg)?;
    write_text(&out.join("nlg.csv"), &nlg_csv(&report.nlg))?;
    write_json(&out.join("grouped.json"), &report.grouped)?;
    write_text(&out.join("grouped.csv"), &grouped_csv(&report.grouped))?;
    write_json(&out.join("gap.json"), &modality_gap(index.images.view(), index.reports.view())?)?;

    let n_dump = (*m.get_one::<usize>("dump_queries").expect("defaulted")).min(studies.len());
    let dump_k = *m.get_one::<usize>("dump_k").expect("defaulted");
    let mut dumps = Vec::new();
    for s in &studies[..n_dump] {
        for d in Direction::BOTH {
            dumps.push(topk_dump(&index, &texts, d, &s.study_id, 0, dump_k)?);
        }
    }
    write_json(&out.join("topk.json"), &dumps)?;

    let rows: Vec<EmbeddingRow> = index
        .image_owner
        .iter()
        .zip(&index.image_view)
        .map(|(&o, &v)| (index.report_ids[o].clone(), Modality::Vision, Some(v)))
        .chain(index.report_ids.iter().map(|id| (id.clone(), Modality::Text, None)))
        .enumerate()
        .map(|(row, (study_id, modality, view))| EmbeddingRow {
            study_id,
            modality,
            row,
            view,
        })
        .collect();
    let matrix = ndarray::concatenate(ndarray::Axis(0), &[index.images.view(), index.reports.view()])
        .map_err(|e| McrError::Shape(e.to_string()))?;
    export_embeddings(matrix.view(), &rows, &out.join("embeddings.bin"), &out.join("embeddings.jsonl"))?;

    let recall: serde_json::Map<String, Value> = report
        .recall
        .iter()
        .map(|r| (format!("{}@{}", r.direction.tag(), r.k), json!(r.recall)))
        .collect();
    let summary = json!({
        "command": "eval",
        "checkpoint_step": state.step,
        "config_hash": cfg.hash(),
        "align_strategy": cfg.align_strategy,
        "input_mode": cfg.input_mode,
        "n_reports": report.n_reports,
        "n_images": report.n_images,
        "recall": recall,
        "modality_gap": report.modality_gap,
        "artifacts": [
            "recall.json", "recall.csv", "nlg.json", "nlg.csv", "grouped.json", "grouped.csv",
            "gap.json", "topk.json", "embeddings.bin", "embeddings.jsonl"
        ],
        "timing": {"wall_seconds": start.elapsed().as_secs_f64()},
    });
    write_summary(&out, &summary)?;
    Ok(summary)
}

fn benchmark_studies(m: &ArgMatches, cfg: &ExperimentConfig) -> Result<Vec<PreparedStudy>> {
    let (pairs, vocab) = match m.get_one::<String>("data") {
        Some(d) => {
            let dir = workdir(m).join(d);
            let pairs = load_manifest(&dir.join("manifest.jsonl"))?;
            let vocab = load_vocab_or_build(&dir, &pairs, cfg)?;
            (pairs, vocab)
        }
        None => {
            let spec = SyntheticSpec {
                n_studies: cfg.batch_size * 2,
                image_size: cfg.image_size,
                channels: cfg.channels,
                seed: cfg.seed,
                ..SyntheticSpec::default()
            };
            let (pairs, _) = generate_corpus(&spec)?;
            (pairs, synthetic_vocabulary(&spec.catalog))
        }
    };
    prepare_studies(&pairs, &vocab, cfg)
}

fn cmd_benchmark(m: &ArgMatches) -> Result<Value> {
    let cfg = resolve_config(m)?;
    let out = path_arg(m, "out");
    ensure_dir(&out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let studies = benchmark_studies(m, &cfg)?;
    let probe = *m.get_one::<usize>("probe_steps").expect("defaulted");
    let masked = resource_report(&cfg, InputMode::MaskedOnly, &studies, probe)?;
    let dual = resource_report(&cfg, InputMode::DualInput, &studies, probe)?;
    let (mi, mt) = tokens_per_sample(&cfg, InputMode::MaskedOnly);
    let (di, dt) = tokens_per_sample(&cfg, InputMode::DualInput);
    let reports = json!({"masked_only": masked, "dual_input": dual});
    write_json(&out.join("resource_reports.json"), &reports)?;
    let summary = json!({
        "command": "benchmark",
        "config_hash": cfg.hash(),
        "image_tokens_per_sample": {"masked_only": mi, "dual_input": di},
        "text_tokens_per_sample": {"masked_only": mt, "dual_input": dt},
        "image_token_ratio": mi as f64 / di as f64,
        "text_token_ratio": mt as f64 / dt as f64,
        "params_total": masked.params_total,
        "peak_allocation_proxy": {
            "masked_only": masked.peak_allocation_proxy,
            "dual_input": dual.peak_allocation_proxy,
        },
        "artifacts": ["config.toml", "resource_reports.json"],
        "timing": {
            "wall_seconds_per_step": {
                "masked_only": masked.wall_seconds_per_step,
                "dual_input": dual.wall_seconds_per_step,
            },
            "step_time_ratio": masked.wall_seconds_per_step / dual.wall_seconds_per_step,
            "masked_only_faster": masked.wall_seconds_per_step < dual.wall_seconds_per_step,
        },
    });
    write_summary(&out, &summary)?;
    Ok(summary)
}

fn cmd_ablate(m: &ArgMatches) -> Result<Value> {
    let start = Instant::now();
    let base = resolve_config(m)?;
    let arms: Vec<Arm> = parse_list(m.get_one::<String>("arms").expect("defaulted"), "arms")?;
    let seeds: Vec<u64> = parse_list(m.get_one::<String>("seeds").expect("defaulted"), "seeds")?;
    let ks: Vec<usize> = parse_list(m.get_one::<String>("ks").expect("defaulted"), "ks")?;
    let out = path_arg(m, "out");
    ensure_dir(&out)?;
    write_text(&out.join("config.toml"), &base.to_toml())?;

    let (data, train_pairs, test_pairs) = load_split(m)?;
    let vocab = load_vocab_or_build(&data, &train_pairs, &base)?;
    let train_set = prepare_studies(&train_pairs, &vocab, &base)?;
    let test_set = prepare_studies(&test_pairs, &vocab, &base)?;

    let mut rows = Vec::new();
    let mut csv = String::from("arm,components,seed,input_mode,align_strategy");
    for d in Direction::BOTH {
        for k in &ks {
            csv.push_str(&format!(",{}@{k}", d.tag()));
        }
    }
    csv.push_str(",modality_gap\n");
    for &arm in &arms {
        for &seed in &seeds {
            let cfg = arm.apply(&ExperimentConfig { seed, ..base.clone() });
            log::info!("arm {} seed {seed}: {}", arm.letter(), arm.components());
            let (_, report) = train_and_evaluate(&cfg, &train_set, &test_set, &ks, 1)?;
            let recall: serde_json::Map<String, Value> = report
                .recall
                .iter()
                .map(|r| (format!("{}@{}", r.direction.tag(), r.k), json!(r.recall)))
                .collect();
            csv.push_str(&format!(
                "{},{},{seed},{},{}",
                arm.letter(),
                arm.components(),
                json!(cfg.input_mode).as_str().unwrap_or_default(),
                json!(cfg.align_strategy).as_str().unwrap_or_default()
            ));
            for d in Direction::BOTH {
                for &k in &ks {
                    csv.push_str(&format!(",{:.4}", report.recall(d, k).unwrap_or(f64::NAN)));
                }
            }
            csv.push_str(&format!(",{:.6}\n", report.modality_gap));
            rows.push(json!({
                "arm": arm.letter().to_string(),
                "components": arm.components(),
                "seed": seed,
                "input_mode": cfg.input_mode,
                "align_strategy": cfg.align_strategy,
                "lambda_mim": cfg.lambda_mim,
                "lambda_mrm": cfg.lambda_mrm,
                "recall": recall,
                "modality_gap": report.modality_gap,
            }));
        }
    }
    let mean: Vec<Value> = arms
        .iter()
        .map(|a| {
            let mine: Vec<&Value> = rows.iter().filter(|r| r["arm"] == a.letter().to_string()).collect();
            let avg = |f: &dyn Fn(&Value) -> f64| mine.iter().map(|r| f(r)).sum::<f64>() / mine.len() as f64;
            let mut recall = serde_json::Map::new();
            for d in Direction::BOTH {
                for k in &ks {
                    let key = format!("{}@{k}", d.tag());
                    recall.insert(key.clone(), json!(avg(&|r: &Value| r["recall"][&key].as_f64().unwrap_or(f64::NAN))));
                }
            }
            json!({
                "arm": a.letter().to_string(),
                "components": a.components(),
                "recall": recall,
                "modality_gap": avg(&|r: &Value| r["modality_gap"].as_f64().unwrap_or(f64::NAN)),
            })
        })
        .collect();
    write_json(&out.join("ablation.json"), &json!({"runs": rows, "seed_mean": mean}))?;
    write_text(&out.join("ablation.csv"), &csv)?;
    let summary = json!({
        "command": "ablate",
        "config_hash": base.hash(),
        "arms": arms.iter().map(|a| a.letter().to_string()).collect::<Vec<_>>(),
        "seeds": seeds,
        "n_train": train_set.len(),
        "n_test": test_set.len(),
        "seed_mean": mean,
        "artifacts": ["config.toml", "ablation.json", "ablation.csv"],
        "timing": {"wall_seconds": start.elapsed().as_secs_f64()},
    });
    write_summary(&out, &summary)?;
    Ok(summary)
}
