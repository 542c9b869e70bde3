//! `spt`: dataset generation, pretraining, fine-tuning, evaluation,
//! prediction and gradient checks for the self-prompting segmentation model.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::json;
use spt_core::checkpoint::{self, same_architecture};
use spt_core::dataset::{read_dataset, write_dataset, Dataset};
use spt_core::metrics::{self, EmptyPredictor, MaskPredictor, OraclePredictor};
use spt_core::pgm::{mask_to_pgm, read_image};
use spt_core::train::EpochRecord;
use spt_core::{gradcheck, pretrain, train, PromptSet, RunConfig, SptError, SptModel};
use spt_tensor::GradCheckOptions;

const EXIT_CONFIG: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("JSON run configuration; dotted flags override it")];
    for path in RunConfig::field_paths() {
        args.push(
            Arg::new(path.clone())
                .long(path.clone())
                .value_name("VALUE")
                .allow_hyphen_values(true)
                .help_heading("Configuration (lists are comma-separated)")
                .help(format!("override {path}")),
        );
    }
    args
}

fn cli() -> Command {
    let path = |name: &'static str, help: &'static str| Arg::new(name).long(name).value_name("PATH").help(help);
    Command::new("spt")
        .about("Self-drafting promptable defect segmentation with parameter-efficient fine-tuning")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("gen-data")
                .about("Write the synthetic train/eval dataset as PGM pairs plus index.json")
                .arg(path("out", "output directory").required(true))
                .args(config_args()),
        )
        .subcommand(
            Command::new("pretrain")
                .about("Train the base model on the object domain and write it as a frozen checkpoint")
                .arg(path("out", "base checkpoint to write").required(true))
                .arg(path("log", "JSON-lines training log (default: <out>.log.jsonl)"))
                .args(config_args()),
        )
        .subcommand(
            Command::new("train")
                .about("Fine-tune on a generated dataset; writes a checkpoint and a JSON-lines log")
                .arg(path("data", "dataset directory").required(true))
                .arg(path("out", "checkpoint to write").required(true))
                .arg(path("base", "pretrained base checkpoint (default: random base weights)"))
                .arg(path("log", "JSON-lines training log (default: <out>.log.jsonl)"))
                .args(config_args()),
        )
        .subcommand(
            Command::new("eval")
                .about("Score a checkpoint on the eval split under every prompt mode")
                .arg(path("checkpoint", "checkpoint to evaluate").required_unless_present_any(["oracle", "empty"]))
                .arg(path("data", "dataset directory").required(true))
                .arg(path("out", "report prefix: writes <out>.json and <out>.txt"))
                .arg(Arg::new("oracle").long("oracle").action(ArgAction::SetTrue).help("predict the ground truth (harness self-test)"))
                .arg(Arg::new("empty").long("empty").action(ArgAction::SetTrue).help("predict empty masks (harness self-test)"))
                .arg(
                    Arg::new("workers")
                        .long("workers")
                        .value_name("N")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("1")
                        .help("evaluation threads"),
                )
                .args(config_args()),
        )
        .subcommand(
            Command::new("predict")
                .about("Segment one image; writes <out>.draft.pgm, <out>.refine.pgm and <out>.meta.json")
                .arg(path("checkpoint", "checkpoint to use").required(true))
                .arg(path("image", "P5 PGM image").required(true))
                .arg(
                    Arg::new("prompts")
                        .long("prompts")
                        .value_name("JSON")
                        .required(true)
                        .help(r#"prompts, e.g. {"points":[[12,20,1]],"boxes":[[4,4,30,30]]}"#),
                )
                .arg(path("out", "output prefix").required(true)),
        )
        .subcommand(
            Command::new("grad-check")
                .about("Compare analytic and finite-difference gradients on sampled trainable coordinates")
                .arg(
                    Arg::new("probes")
                        .long("probes")
                        .value_name("N")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("24")
                        .help("coordinates per PEFT kind (three kinds are checked)"),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_name("N")
                        .value_parser(clap::value_parser!(u64))
                        .default_value("0"),
                )
                .args(config_args()),
        )
}

fn load_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {p}"))?;
            RunConfig::parse_unvalidated(&text)?
        }
        None => RunConfig::default(),
    };
    for path in RunConfig::field_paths() {
        if let Some(v) = m.get_one::<String>(&path) {
            cfg.set_path(&path, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn arg_path(m: &ArgMatches, name: &str) -> Option<PathBuf> {
    m.get_one::<String>(name).map(PathBuf::from)
}

fn log_path(m: &ArgMatches, out: &Path) -> PathBuf {
    arg_path(m, "log").unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes each record as it arrives so a diverged run keeps its history.
fn epoch_logger(path: &Path) -> Result<impl FnMut(&EpochRecord)> {
    use std::io::Write;
    let mut file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(move |r: &EpochRecord| {
        let line = r.to_json_line();
        eprintln!("{line}");
        let _ = writeln!(file, "{line}");
    })
}

fn cmd_gen_data(m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m)?;
    let out = arg_path(m, "out").expect("required");
    let data = Dataset::generate(&cfg.data)?;
    write_dataset(&out, &data, &cfg.data)?;
    println!("wrote {} train and {} eval samples to {}", data.train.len(), data.eval.len(), out.display());
    Ok(())
}

fn cmd_pretrain(m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m)?;
    let out = arg_path(m, "out").expect("required");
    let log = epoch_logger(&log_path(m, &out))?;
    let (model, _) = pretrain::pretrain_base(&cfg, log)?;
    checkpoint::save(&out, &model, &pretrain::base_config(&cfg))?;
    println!("wrote base checkpoint {}", out.display());
    Ok(())
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m)?;
    let data_dir = arg_path(m, "data").expect("required");
    let out = arg_path(m, "out").expect("required");
    let (index, data) = read_dataset(&data_dir).with_context(|| format!("reading dataset {}", data_dir.display()))?;
    if index.size != cfg.model.image_size {
        bail!(SptError::Config(format!(
            "dataset images are {}px but model.image_size is {}",
            index.size, cfg.model.image_size
        )));
    }
    let mut model = match arg_path(m, "base") {
        Some(p) => pretrain::model_from_base(&cfg, checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?)?,
        None => {
            eprintln!("note: no --base given; fine-tuning starts from random base weights");
            SptModel::new(&cfg)?
        }
    };
    let log = epoch_logger(&log_path(m, &out))?;
    let result = train::train(&mut model, &data.train, &data.eval, &cfg, log);
    // On divergence the model holds the last good parameters; keep them.
    checkpoint::save(&out, &model, &cfg)?;
    result?;
    println!("wrote checkpoint {}", out.display());
    Ok(())
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m)?;
    let data_dir = arg_path(m, "data").expect("required");
    let workers = *m.get_one::<usize>("workers").expect("defaulted");
    let (_, data) = read_dataset(&data_dir).with_context(|| format!("reading dataset {}", data_dir.display()))?;
    let model;
    let predictor: &dyn MaskPredictor = if m.get_flag("oracle") {
        &OraclePredictor
    } else if m.get_flag("empty") {
        &EmptyPredictor
    } else {
        let ckpt = checkpoint::load(&arg_path(m, "checkpoint").expect("required"))?;
        if !same_architecture(&ckpt.header.config, &cfg) {
            bail!(SptError::Schema(
                "checkpoint was written for a different model configuration; pass the same model/peft/vra/sdt settings".into()
            ));
        }
        model = ckpt.into_model(Some(&cfg))?;
        &model
    };
    let instances = metrics::build_instances(&data.eval, &cfg.eval.modes, cfg.data.min_area, cfg.eval.point_seed);
    let size = cfg.model.image_size;
    let band = cfg.eval.biou_band.unwrap_or_else(|| metrics::default_band(size, size));
    let report = metrics::evaluate(predictor, &data.eval, &instances, band, workers)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(prefix) = arg_path(m, "out") {
        fs::write(with_suffix(&prefix, ".json"), report.to_json())?;
        fs::write(with_suffix(&prefix, ".txt"), &table)?;
    }
    Ok(())
}

fn cmd_predict(m: &ArgMatches) -> Result<()> {
    let model = checkpoint::load(&arg_path(m, "checkpoint").expect("required"))?.into_model(None)?;
    let image = read_image(&arg_path(m, "image").expect("required"))?;
    let prompts = PromptSet::from_json(m.get_one::<String>("prompts").expect("required"))?;
    let out = arg_path(m, "out").expect("required");
    let start = Instant::now();
    let pred = model.predict(&image, &prompts)?;
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    if let Some(draft) = &pred.draft {
        fs::write(with_suffix(&out, ".draft.pgm"), mask_to_pgm(draft))?;
    }
    fs::write(with_suffix(&out, ".refine.pgm"), mask_to_pgm(&pred.refine))?;
    let meta = json!({
        "iou_pred": pred.iou_pred,
        "draft": pred.draft.is_some(),
        "refine_pixels": pred.refine.count(),
        "elapsed_ms": elapsed_ms,
    });
    fs::write(with_suffix(&out, ".meta.json"), serde_json::to_string_pretty(&meta)?)?;
    println!("refine mask: {} pixels, iou_pred {:.4}", pred.refine.count(), pred.iou_pred);
    Ok(())
}

fn cmd_grad_check(m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m)?;
    let probes = *m.get_one::<usize>("probes").expect("defaulted");
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let start = Instant::now();
    let report = gradcheck::check_model(&cfg, probes, seed, GradCheckOptions::default())?;
    for k in &report.kinds {
        println!("{:<8} {} probes  max rel error {:.3e}", format!("{:?}", k.kind).to_lowercase(), k.probes.len(), k.max_rel_error);
    }
    println!(
        "max relative error {:.3e} over {} probes (tolerance {:.0e}) in {:.1}s: {}",
        report.max_rel_error,
        report.probe_count(),
        report.tolerance,
        start.elapsed().as_secs_f64(),
        if report.passed() { "ok" } else { "FAILED" }
    );
    if !report.passed() {
        bail!("gradient check failed");
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<SptError>() {
            return match e {
                SptError::Io(_) => EXIT_IO,
                SptError::Diverged { .. } => EXIT_DIVERGED,
                _ => EXIT_CONFIG,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_CONFIG
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let result = match matches.subcommand() {
        Some(("gen-data", m)) => cmd_gen_data(m),
        Some(("pretrain", m)) => cmd_pretrain(m),
        Some(("train", m)) => cmd_train(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("predict", m)) => cmd_predict(m),
        Some(("grad-check", m)) => cmd_grad_check(m),
        _ => unreachable!("subcommand required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors embed their source in the message; skip repeats.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
