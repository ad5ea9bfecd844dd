//! `infomask` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::colearning::{load_checkpoint, run_training, step_rng, TrainConfig, Trainer};
use crate::data::{gen_dataset, Dataset};
use crate::error::{bail, Result};
use crate::evalcli::{evaluate, heatmap, line_chart, model_gradcheck, Series};
use crate::masking::{extract_cls_weights, informed_mask, sample_tube, Order};
use crate::numerics::load_tns;
use crate::objectives::LossRecord;

#[derive(Parser, Debug)]
#[command(name = "infomask", version, about = "Attention-informed dual video masking lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Which {
    High,
    Low,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic video-caption corpus.
    GenData {
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training config whose encoder section fixes the video geometry.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run co-learning.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint written by an identical config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Retrieval metrics of a checkpoint, written to report.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// DSL temperature; defaults to 1% of the score scale.
        #[arg(long)]
        tau_dsl: Option<f64>,
    },
    /// Informed mask from an attention dump `[M, H, T, T]`.
    Maskgen {
        #[arg(long)]
        attention: PathBuf,
        #[arg(long, value_enum, default_value_t = Which::High)]
        kind: Which,
        /// Mask ratio; 0.7 for high and 0.5 for low when absent.
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        a_s: Option<usize>,
        #[arg(long)]
        a_e: Option<usize>,
        /// Seeds the tube draw when no range is given.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// Random coordinates per tensor besides the largest-gradient one.
        #[arg(long, default_value_t = 2)]
        coords: usize,
    },
    /// SVG charts from `losses.jsonl` and `attention.csv`.
    Report {
        /// Directory holding the traces.
        #[arg(long)]
        run: PathBuf,
        /// Output directory; the run directory by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_json(&fs::read_to_string(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn load_or_generate(dir: Option<&Path>, cfg: &TrainConfig) -> Result<Dataset> {
    match dir {
        Some(d) => {
            let data = Dataset::load(d)?;
            let (m, c) = (&data.manifest, &cfg.encoder);
            if (m.image_height, m.image_width, m.n_frames) != (c.image_height, c.image_width, c.n_frames) {
                bail!(Config, "dataset {} was rendered for a different encoder geometry", d.display());
            }
            Ok(data)
        }
        None => gen_dataset(cfg.data.count, cfg.data.seed, &cfg.encoder),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { count, seed, config, out } => {
            let cfg = read_config(config.as_deref())?;
            let data = gen_dataset(count, seed, &cfg.encoder)?;
            data.save(&out)?;
            println!("wrote {} pairs to {} (hash {})", data.len(), out.display(), data.hash()?);
        }
        Command::Train { config, seed, steps, out, data, resume } => {
            let mut cfg = read_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            cfg.validate()?;
            let mut trainer = match resume {
                Some(p) => Trainer::from_checkpoint(load_checkpoint(&p, Some(&cfg))?),
                None => Trainer::new(cfg.clone())?,
            };
            let dataset = load_or_generate(data.as_deref(), &cfg)?;
            let art = run_training(&mut trainer, &dataset, Some(&out))?;
            if let Some(last) = art.losses.last() {
                println!("step {} total {:.6}", last.step, last.total);
            }
            for p in &art.checkpoints {
                println!("checkpoint {}", p.display());
            }
        }
        Command::Eval { checkpoint, data, out, tau_dsl } => {
            let ck = load_checkpoint(&checkpoint, None)?;
            let dataset = load_or_generate(data.as_deref(), &ck.config)?;
            let report = evaluate(&ck.params, &ck.config, &dataset, tau_dsl)?;
            fs::create_dir_all(&out)?;
            write_json(&out.join("report.json"), &report)?;
            let bars = |name: &'static str, r: &crate::evalcli::RetrievalReport| Series {
                name,
                points: vec![(1.0, r.r_at.r1), (5.0, r.r_at.r5), (10.0, r.r_at.r10)],
            };
            let series = [
                bars("t2v", &report.t2v),
                bars("v2t", &report.v2t),
                bars("t2v dsl", &report.t2v_dsl),
                bars("v2t dsl", &report.v2t_dsl),
            ];
            fs::write(out.join("recall.svg"), line_chart("recall at K", "K", &series))?;
            println!(
                "t2v R@1 {:.2} R@5 {:.2} R@10 {:.2} MdR {} | rsum {:.2} (dsl {:.2})",
                report.t2v.r_at.r1,
                report.t2v.r_at.r5,
                report.t2v.r_at.r10,
                report.t2v.mdr,
                report.rsum(),
                report.rsum_dsl()
            );
        }
        Command::Maskgen { attention, kind, ratio, a_s, a_e, seed, out, svg } => {
            let (_, attn) = load_tns(&attention)?;
            if attn.ndim() != 4 {
                bail!(Dimension, "attention dump must be [M, H, T, T], got {:?}", attn.shape());
            }
            let m = attn.shape()[0];
            let (s, e) = match (a_s, a_e) {
                (Some(s), Some(e)) => (s, e),
                (None, None) => sample_tube(m, &mut step_rng(seed, 0)),
                _ => bail!(Config, "give both --a-s and --a-e or neither"),
            };
            let w = extract_cls_weights(&attn, s, e)?;
            let (order, r) = match kind {
                Which::High => (Order::Descending, ratio.unwrap_or(0.7)),
                Which::Low => (Order::Ascending, ratio.unwrap_or(0.5)),
            };
            let mask = informed_mask(&w, r, order)?;
            let text = serde_json::to_string(&mask)?;
            match out {
                Some(p) => fs::write(p, format!("{text}\n"))?,
                None => println!("{text}"),
            }
            if let Some(p) = svg {
                let cols = (w.weights.len() as f64).sqrt().round() as usize;
                fs::write(p, heatmap(&format!("CLS weights, frames {s}..={e}"), &w.weights, cols))?;
            }
        }
        Command::Gradcheck { seed, config, h, coords } => {
            let cfg = read_config(config.as_deref())?;
            let report = model_gradcheck(&cfg, seed, h, coords)?;
            for t in &report.tensors {
                println!("{:<40} {:>7} {:.3e}", t.name, t.numel, t.max_rel_err);
            }
            println!("tensors {} loss {:.6}", report.tensors.len(), report.loss);
            println!("max rel err {:.3e}", report.max_rel_err);
            if report.max_rel_err > 1e-4 {
                bail!(NonFinite, "gradient check failed: max rel err {:.3e} > 1e-4", report.max_rel_err);
            }
        }
        Command::Report { run, out } => {
            let out = out.unwrap_or_else(|| run.clone());
            let losses: Vec<LossRecord> = match fs::read_to_string(run.join("losses.jsonl")) {
                Ok(text) => text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(serde_json::from_str)
                    .collect::<std::result::Result<_, _>>()?,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
                Err(e) => return Err(e.into()),
            };
            let attention: Vec<(f64, f64, f64)> = match fs::read_to_string(run.join("attention.csv")) {
                Ok(text) => text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(parse_row).collect::<Result<_>>()?,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
                Err(e) => return Err(e.into()),
            };
            if losses.is_empty() && attention.is_empty() {
                bail!(Input, "no data in {}", run.display());
            }
            fs::create_dir_all(&out)?;
            if !losses.is_empty() {
                let pick = |f: fn(&LossRecord) -> f64| losses.iter().map(|r| (r.step as f64, f(r))).collect();
                let series = [
                    Series { name: "total", points: pick(|r| r.total) },
                    Series { name: "L_vtc", points: pick(|r| r.vtc) },
                    Series { name: "L_vtc_H", points: pick(|r| r.vtc_h) },
                    Series { name: "L_vvc_H", points: pick(|r| r.vvc_h) },
                    Series { name: "L_vtc_L", points: pick(|r| r.vtc_l) },
                    Series { name: "L_vvc_L", points: pick(|r| r.vvc_l) },
                    Series { name: "L_adv", points: pick(|r| r.adv) },
                ];
                fs::write(out.join("losses.svg"), line_chart("training losses", "step", &series))?;
            }
            if !attention.is_empty() {
                let series = [
                    Series { name: "top 30%", points: attention.iter().map(|r| (r.0, r.1)).collect() },
                    Series { name: "bottom 30%", points: attention.iter().map(|r| (r.0, r.2)).collect() },
                ];
                fs::write(out.join("attention.svg"), line_chart("mean CLS attention", "step", &series))?;
            }
            println!("charts written to {}", out.display());
        }
    }
    Ok(())
}

fn parse_row(line: &str) -> Result<(f64, f64, f64)> {
    let v: Vec<f64> = line
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| crate::Error::Input(format!("bad attention row {line:?}: {e}")))?;
    if v.len() != 3 {
        bail!(Input, "attention row {line:?} needs 3 fields");
    }
    Ok((v[0], v[1], v[2]))
}

/// Parses `argv` and runs it. Returns the process exit code: 0 on success,
/// 2 on usage errors, 1 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
