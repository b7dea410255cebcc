use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use hlora_core::bench::{emit_report, format_table, run_bench, BenchSpec};
use hlora_core::data::{fit_codec, TaskSuite};
use hlora_core::model::{Architecture, Model};
use hlora_core::text;
use hlora_core::train::{
    conflict_sweep, evaluate, log_eval, run_protocol_stage, sweep_csv, MetricsLog, Stage, SWEEP_HEADER, SWEEP_TAG,
};
use hlora_core::{Error, Result, TaskType};
use serde::Serialize;

use crate::checkpoint::{arch_name, Checkpoint};
use crate::config::RunConfig;
use crate::{pgm, ArchArg, BenchArgs, GenerateArgs, SweepArgs, TaskArg, TrainArgs};

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Passes the model through the checkpoint encoding so that continuing in
/// process matches resuming from the file.
fn round_trip(model: &Model, cfg: &RunConfig) -> Result<(Model, Vec<u8>)> {
    let bytes = Checkpoint::from_model(model, cfg).to_bytes();
    let model = Checkpoint::from_bytes(&bytes)?.to_model(cfg)?;
    Ok((model, bytes))
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let stages = args
        .stage
        .iter()
        .map(|s| s.parse::<Stage>())
        .collect::<Result<Vec<_>>>()?;
    let cfg = load_config(args.config.as_deref(), args.seed)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    ensure_dir(&out)?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;

    let mut model = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.check_config(&cfg, args.force)?;
            ck.to_model(&cfg)?
        }
        None => {
            let mc = cfg.model_config();
            let codec = fit_codec(cfg.seed, mc.codebook_size, mc.d_code)?;
            let arch = if stages.first() == Some(&Stage::Mixed) {
                Architecture::SharedLora
            } else {
                Architecture::HLora
            };
            round_trip(&Model::new(mc, arch, codec, cfg.seed)?, &cfg)?.0
        }
    };
    let suite = TaskSuite::build(cfg.seed, cfg.suite_size(), &model.codec)?;
    let protocol = cfg.protocol();
    let run_id = format!("seed{}", cfg.seed);
    let metrics_path = out.join(&cfg.output.metrics);
    for stage in stages {
        let mut log = MetricsLog::default();
        let report = run_protocol_stage(&mut model, &suite, stage, &protocol, cfg.seed, &mut log, &run_id)?;
        let m = evaluate(&model, &suite.comp_val, &suite.gen_val)?;
        log_eval(&mut log, &run_id, stage.tag(), report.steps, &m);
        log.append_to(&metrics_path)?;
        let (first, last) = report.loss_ends(10);
        let (next, bytes) = round_trip(&model, &cfg)?;
        let ck_path = out.join(format!("{}.ckpt", stage.tag()));
        std::fs::write(&ck_path, bytes).map_err(|e| io_err(&ck_path, e))?;
        println!(
            "stage {stage}: {} steps, loss {first:.4} -> {last:.4}, comp exact {:.3}, gen index {:.3}, gen mse {:.4}; wrote {}",
            report.steps,
            m.comp_accuracy,
            m.gen_index_accuracy,
            m.gen_mse,
            ck_path.display()
        );
        model = next;
    }
    Ok(())
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    if !args.ckpt.is_file() {
        return Err(Error::Io(format!("{}: no such checkpoint", args.ckpt.display())));
    }
    let ck = Checkpoint::load(&args.ckpt)?;
    let cfg = match &args.config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            ck.check_config(&cfg, args.force)?;
            cfg
        }
        None => ck.config.clone(),
    };
    let model = ck.to_model(&cfg)?;
    let task = match args.task {
        TaskArg::Comp => TaskType::Comprehension,
        TaskArg::Gen => TaskType::Generation,
    };
    let image = args.image.as_deref().map(pgm::read).transpose()?;
    let words = text::tokenize(args.prompt.as_deref().unwrap_or(""))?;
    if image.is_none() && words.is_empty() {
        return Err(Error::Config("give --prompt, --image or both".into()));
    }
    let seq = model.build_sequence(image.as_ref(), &words, None, task)?;
    let max_new = args.max_new.unwrap_or(cfg.model.max_seq);
    let out = match model.generate(&seq, task, max_new) {
        Ok(g) => g,
        Err(Error::Truncated { partial }) => {
            println!("partial: {}", render_tokens(&model, &partial));
            return Err(Error::Truncated { partial });
        }
        Err(e) => return Err(e),
    };
    match task {
        TaskType::Comprehension => {
            let answer: Vec<usize> = out.tokens.iter().copied().filter(|&t| t != text::EOS).collect();
            println!("{}", text::detokenize(&answer));
        }
        TaskType::Generation => {
            let (Some(img), Some(idx)) = (&out.image, &out.indices) else {
                return Err(Error::Check("generation produced no image".into()));
            };
            pgm::write(&args.out, img)?;
            let (rows, cols) = idx.shape();
            let list: Vec<String> = idx.indices().iter().map(usize::to_string).collect();
            let idx_path = PathBuf::from(format!("{}.indices.txt", args.out.display()));
            write_file(&idx_path, &format!("# hlora-indices v1\n{rows} {cols}\n{}\n", list.join(" ")))?;
            println!("{}", render_tokens(&model, &out.tokens));
            println!("wrote {} and {}", args.out.display(), idx_path.display());
        }
    }
    Ok(())
}

fn render_tokens(model: &Model, ids: &[usize]) -> String {
    let v = &model.vocab;
    ids.iter()
        .map(|&t| {
            if t == v.start_img() {
                "<img>".to_string()
            } else if t == v.end_img() {
                "</img>".to_string()
            } else if v.is_vq(t) {
                format!("v{}", t - v.vq_base())
            } else {
                text::detokenize(&[t])
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Serialize)]
struct BenchEcho<'a> {
    format: &'a str,
    experts: &'a [usize],
    rank: usize,
    d_in: usize,
    d_out: usize,
    tokens: usize,
    repetitions: usize,
    warmup: usize,
    include_backward: bool,
    min_pass_ns: u64,
    seed: u64,
}

/// `run{n}` where `n - 1` runs are already in the file.
fn next_run_id(csv: &Path) -> String {
    let ids: BTreeSet<String> = std::fs::read_to_string(csv)
        .unwrap_or_default()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("run_id,"))
        .filter_map(|l| l.split(',').next().map(str::to_string))
        .collect();
    format!("run{}", ids.len() + 1)
}

pub fn bench(args: &BenchArgs) -> Result<()> {
    let spec = BenchSpec {
        experts: args.experts.clone(),
        rank: args.rank,
        d_in: args.dim,
        d_out: args.dim,
        tokens: args.tokens,
        repetitions: args.repetitions,
        warmup: args.warmup,
        include_backward: !args.forward_only,
        seed: args.seed,
        ..BenchSpec::default()
    };
    spec.validate()?;
    let echo = BenchEcho {
        format: "hlora-bench-config v1",
        experts: &spec.experts,
        rank: spec.rank,
        d_in: spec.d_in,
        d_out: spec.d_out,
        tokens: spec.tokens,
        repetitions: spec.repetitions,
        warmup: spec.warmup,
        include_backward: spec.include_backward,
        min_pass_ns: spec.min_pass_ns,
        seed: spec.seed,
    };
    let echo_path = args.csv.with_extension("config.toml");
    write_file(&echo_path, &toml::to_string(&echo).expect("bench config serializes"))?;
    let results = run_bench(&spec)?;
    print!("{}", format_table(&results));
    let run_id = next_run_id(&args.csv);
    emit_report(&results, &args.csv, &run_id)?;
    println!("appended {run_id} to {}", args.csv.display());
    Ok(())
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref(), args.seed)?;
    if let Some(r) = &args.ratios {
        cfg.sweep.ratios = r.clone();
    }
    let sweep_cfg = cfg.sweep_config()?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    ensure_dir(&out)?;
    write_file(&out.join("sweep_config.toml"), &cfg.to_toml())?;
    let mc = cfg.model_config();
    let codec = fit_codec(cfg.seed, mc.codebook_size, mc.d_code)?;
    let suite = TaskSuite::build(cfg.seed, cfg.suite_size(), &codec)?;
    let archs: &[Architecture] = match args.arch {
        ArchArg::Shared => &[Architecture::SharedLora],
        ArchArg::Hlora => &[Architecture::HLora],
        ArchArg::Both => &[Architecture::SharedLora, Architecture::HLora],
    };
    for &arch in archs {
        let name = arch_name(arch);
        let make = || Model::new(mc.clone(), arch, codec.clone(), cfg.seed);
        let mut log = MetricsLog::default();
        let run_id = format!("sweep-{name}-seed{}", cfg.seed);
        let points = conflict_sweep(&make, &suite, &sweep_cfg, cfg.seed, &mut log, &run_id)?;
        let csv = format!(
            "{SWEEP_TAG}\n{SWEEP_HEADER}\n{}",
            sweep_csv(arch, sweep_cfg.primary, cfg.seed, &points)
        );
        let path = out.join(format!("sweep_{name}.csv"));
        write_file(&path, &csv)?;
        write_file(&out.join(format!("sweep_{name}_metrics.csv")), &log.to_csv())?;
        for p in &points {
            println!(
                "{name} ratio {:.2}: comp {:.3} gen {:.3}",
                p.ratio, p.comp_metric, p.gen_metric
            );
        }
        println!("wrote {}", path.display());
    }
    Ok(())
}
