use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmpagl::config::RunConfig;
use cmpagl::demo::{grad_check_suite, loss_demo};
use cmpagl::eval::{gen_hub_corpus, GroundTruth, MetricsReport};
use cmpagl::gswin::{image_encode, GswinWeights};
use cmpagl::io::{read_matrix, read_ppm, tensor_to_csv, write_matrix, MatrixFormat};
use cmpagl::smr::{query_weights, smr_rerank, Positivity, SmrParams};
use cmpagl::tensor::{ParamInit, Tensor};
use cmpagl::{Direction, Error, SimilarityMatrix};

#[derive(Parser)]
#[command(name = "cmpagl", version, about = "Cross-modal retrieval toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct SmrArgs {
    /// Candidate depth of the rerank block.
    #[arg(long)]
    k: Option<usize>,
    /// Weight of the reverse-rank term.
    #[arg(long)]
    gamma1: Option<f64>,
    /// Weight of the extreme-difference-ratio term.
    #[arg(long)]
    gamma2: Option<f64>,
    /// Map similarities with (s+1)/2 first: auto, always or never.
    #[arg(long)]
    positivity: Option<Positivity>,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a PPM (P6) image and print the stage ledger and feature.
    EncodeDemo {
        #[command(flatten)]
        common: Common,
        /// Input image; a seeded random image is used when absent.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Write the feature vector as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the four training objectives on a seeded batch.
    LossDemo {
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic loss gradients with central differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        batches: usize,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Exit with a numeric error when any relative error reaches this.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Rerank a similarity matrix (images × texts).
    Rerank {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        smr: SmrArgs,
        matrix: PathBuf,
        #[arg(long, default_value = "i2t")]
        direction: Direction,
        /// Write the reweighted matrix here (`.bin`/`.simm` for binary)
        /// instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the final per-query rankings as CSV.
        #[arg(long)]
        rankings: Option<PathBuf>,
        /// Print the weight breakdown of every reranked candidate.
        #[arg(long)]
        weights: bool,
    },
    /// Recall@1/5/10 in both directions and their mean.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        smr: SmrArgs,
        matrix: PathBuf,
        ground_truth: PathBuf,
        /// Score the reranked rankings instead of the raw ones.
        #[arg(long)]
        rerank: bool,
        /// Also write the CSV row to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean recall of the rerank over a grid of (gamma1, gamma2).
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Candidate depth of the rerank block.
        #[arg(long)]
        k: Option<usize>,
        /// Map similarities with (s+1)/2 first: auto, always or never.
        #[arg(long)]
        positivity: Option<Positivity>,
        matrix: PathBuf,
        ground_truth: PathBuf,
        /// Smallest grid value (inclusive).
        #[arg(long)]
        min: Option<f64>,
        /// Largest grid value (inclusive).
        #[arg(long)]
        max: Option<f64>,
        /// Grid spacing.
        #[arg(long)]
        step: Option<f64>,
        /// Hold gamma2 at this value instead of sweeping it.
        #[arg(long)]
        fix_gamma2: Option<f64>,
        /// Write the CSV here instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus: embeddings, similarity matrix, ground truth.
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        images: usize,
        #[arg(long, default_value_t = 5)]
        captions: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0.4)]
        noise: f64,
        /// Probability that a text becomes a hub.
        #[arg(long, default_value_t = 0.0)]
        hub_fraction: f64,
        /// Score added to every pair involving a hub text.
        #[arg(long, default_value_t = 0.8)]
        hub_offset: f64,
        /// Matrix format: csv or bin.
        #[arg(long, default_value = "csv")]
        format: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the fully resolved configuration.
    ShowConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parameter(_) | Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        Error::Dimension(_) | Error::State(_) | Error::Data(_) | Error::Parse(_) | Error::Io(_) => 2,
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn smr_params(cfg: &mut RunConfig, a: &SmrArgs, dir: Direction) -> SmrParams {
    cfg.smr_k = a.k.unwrap_or(cfg.smr_k);
    cfg.gamma1 = a.gamma1.unwrap_or(cfg.gamma1);
    cfg.gamma2 = a.gamma2.unwrap_or(cfg.gamma2);
    cfg.positivity = a.positivity.unwrap_or(cfg.positivity);
    SmrParams {
        positivity: cfg.positivity,
        ..SmrParams::new(cfg.smr_k, cfg.gamma1, cfg.gamma2, dir)
    }
}

fn write_out(path: &Path, contents: &str) -> Result<(), Error> {
    cmpagl::io::write_bytes(path, contents)
}

fn load_matrix(path: &Path) -> Result<SimilarityMatrix, Error> {
    read_matrix(path, MatrixFormat::from_path(path))
}

/// Reranked rankings for both directions, each computed independently.
fn reranked_report(
    s: &SimilarityMatrix,
    gt: &GroundTruth,
    k: usize,
    gamma1: f64,
    gamma2: f64,
    positivity: Positivity,
) -> Result<MetricsReport, Error> {
    let run = |dir| {
        let p = SmrParams {
            positivity,
            ..SmrParams::new(k, gamma1, gamma2, dir)
        };
        smr_rerank(s, &p).map(|r| r.rankings)
    };
    MetricsReport::from_rankings(&run(Direction::ImageToText)?, &run(Direction::TextToImage)?, gt)
}

fn run(cmd: Command) -> Result<String, Error> {
    let mut out = String::new();
    match cmd {
        Command::EncodeDemo { common, image, out: dest } => {
            let cfg = load_config(&common)?;
            let img = match &image {
                Some(p) => read_ppm(p)?,
                None => ParamInit::new(cfg.seed)
                    .uniform(&[cfg.image_size, cfg.image_size, 3], 1)
                    .map(|v| 0.5 + 0.5 * v),
            };
            let g = cfg.gswin();
            let size = img.shape()[0];
            let weights = GswinWeights::init(&g, size, cfg.seed)?;
            let enc = image_encode(&img, &g, &weights)?;
            let s = img.shape();
            let _ = writeln!(out, "input {}x{}x{}", s[0], s[1], s[2]);
            for r in &enc.stages {
                let (gh, gw, gc) = r.global_window;
                let _ = writeln!(
                    out,
                    "stage {} {}x{}x{} blocks {} gwg_depth {} global_window {gh}x{gw}x{gc}",
                    r.stage, r.height, r.width, r.channels, r.blocks, r.gwg_depth
                );
            }
            let t = enc.tokens.shape();
            let _ = writeln!(out, "final_tokens {}x{}x{}", t[0], t[1], t[2]);
            let _ = writeln!(out, "blocks_run {}", enc.blocks_run);
            let feature = Tensor::new(vec![1, enc.feature.len()], enc.feature)?;
            let _ = writeln!(out, "feature_dim {}", feature.len());
            let csv = tensor_to_csv(&feature)?;
            match dest {
                Some(p) => write_out(&p, &csv)?,
                None => out.push_str(csv.lines().nth(1).unwrap_or_default()),
            }
            if !out.ends_with('\n') {
                out.push('\n');
            }
        }
        Command::LossDemo { common } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            let r = loss_demo(&cfg)?;
            let _ = writeln!(out, "batch {} masked_tokens {}", r.batch, r.masked_tokens);
            for (name, v) in [
                ("itc", r.itc),
                ("triplet", r.triplet),
                ("mlm", r.mlm),
                ("itm", r.itm),
                ("total", r.total),
            ] {
                let _ = writeln!(out, "{name:<8}{v:.12}");
            }
        }
        Command::GradCheck {
            common,
            batches,
            batch_size,
            dim,
            eps,
            tolerance,
        } => {
            let cfg = load_config(&common)?;
            let r = grad_check_suite(batches, batch_size, dim, cfg.alpha, cfg.tau, eps, cfg.seed)?;
            let _ = writeln!(out, "batches {} eps {eps:e}", r.batches);
            let _ = writeln!(out, "triplet_wrt_s    {:.3e}", r.triplet);
            let _ = writeln!(out, "itc_wrt_images   {:.3e}", r.itc_images);
            let _ = writeln!(out, "itc_wrt_texts    {:.3e}", r.itc_texts);
            if !(r.max() < tolerance) {
                print!("{out}");
                return Err(Error::Numeric(format!(
                    "max relative error {:.3e} ≥ tolerance {tolerance:e}",
                    r.max()
                )));
            }
        }
        Command::Rerank {
            common,
            smr,
            matrix,
            direction,
            out: dest,
            rankings,
            weights,
        } => {
            let mut cfg = load_config(&common)?;
            let p = smr_params(&mut cfg, &smr, direction);
            let s = load_matrix(&matrix)?;
            let r = smr_rerank(&s, &p)?;
            if weights {
                let _ = writeln!(out, "query,candidate,rank,similarity,w_fwd,w_rev,w_md,weight,score");
                for q in 0..s.query_count(direction) {
                    for c in query_weights(&s, q, &p)? {
                        let _ = writeln!(
                            out,
                            "{q},{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
                            c.candidate, c.rank, c.similarity, c.w_fwd, c.w_rev, c.w_md, c.weight, c.score
                        );
                    }
                }
            }
            if let Some(path) = rankings {
                let mut csv = String::new();
                for (q, order) in r.rankings.iter().enumerate() {
                    let list: Vec<String> = order.iter().map(usize::to_string).collect();
                    let _ = writeln!(csv, "{q},{}", list.join(","));
                }
                write_out(&path, &csv)?;
            }
            match dest {
                Some(path) => write_matrix(&path, &r.s_opt, MatrixFormat::from_path(&path))?,
                None if !weights => out.push_str(&cmpagl::io::matrix_to_csv(
                    r.s_opt.rows(),
                    r.s_opt.cols(),
                    r.s_opt.values(),
                )),
                None => {}
            }
        }
        Command::Eval {
            common,
            smr,
            matrix,
            ground_truth,
            rerank,
            out: dest,
        } => {
            let mut cfg = load_config(&common)?;
            let s = load_matrix(&matrix)?;
            let gt = GroundTruth::load(&ground_truth)?;
            gt.check_matrix(&s)?;
            let report = if rerank {
                let p = smr_params(&mut cfg, &smr, Direction::ImageToText);
                reranked_report(&s, &gt, p.k, p.gamma1, p.gamma2, p.positivity)?
            } else {
                MetricsReport::evaluate(&s, &gt)?
            };
            out.push_str(&report.table());
            out.push('\n');
            let csv = format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row());
            out.push_str(&csv);
            if let Some(path) = dest {
                write_out(&path, &csv)?;
            }
        }
        Command::Sweep {
            common,
            k,
            positivity,
            matrix,
            ground_truth,
            min,
            max,
            step,
            fix_gamma2,
            out: dest,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.smr_k = k.unwrap_or(cfg.smr_k);
            cfg.positivity = positivity.unwrap_or(cfg.positivity);
            cfg.sweep_min = min.unwrap_or(cfg.sweep_min);
            cfg.sweep_max = max.unwrap_or(cfg.sweep_max);
            cfg.sweep_step = step.unwrap_or(cfg.sweep_step);
            cfg.validate()?;
            let s = load_matrix(&matrix)?;
            let gt = GroundTruth::load(&ground_truth)?;
            gt.check_matrix(&s)?;
            let grid = cfg.sweep_grid();
            let g2_axis = match fix_gamma2 {
                Some(g) => vec![g],
                None => grid.clone(),
            };
            let mut csv = format!("gamma1,gamma2,{}\n", MetricsReport::csv_header());
            let mut best: Option<(f64, f64, f64)> = None;
            for &g1 in &grid {
                for &g2 in &g2_axis {
                    let r = reranked_report(&s, &gt, cfg.smr_k, g1, g2, cfg.positivity)?;
                    let _ = writeln!(csv, "{g1:.2},{g2:.2},{}", r.csv_row());
                    if best.is_none_or(|(_, _, m)| r.mr > m) {
                        best = Some((g1, g2, r.mr));
                    }
                }
            }
            if let Some((g1, g2, m)) = best {
                eprintln!("best gamma1 {g1:.2} gamma2 {g2:.2} mR {m:.2}");
            }
            match dest {
                Some(path) => write_out(&path, &csv)?,
                None => out.push_str(&csv),
            }
        }
        Command::GenSynth {
            common,
            images,
            captions,
            dim,
            noise,
            hub_fraction,
            hub_offset,
            format,
            out: dir,
        } => {
            let cfg = load_config(&common)?;
            let fmt = match format.as_str() {
                "csv" => MatrixFormat::Csv,
                "bin" => MatrixFormat::Bin,
                other => {
                    return Err(Error::Parameter(format!(
                        "unknown matrix format {other:?} (expected csv or bin)"
                    )))
                }
            };
            let (corpus, s, hubs) =
                gen_hub_corpus(images, captions, dim, noise, hub_fraction, hub_offset, cfg.seed)?;
            std::fs::create_dir_all(&dir)?;
            write_out(&dir.join("images.csv"), &tensor_to_csv(&corpus.images)?)?;
            write_out(&dir.join("texts.csv"), &tensor_to_csv(&corpus.texts)?)?;
            let name = if fmt == MatrixFormat::Bin { "matrix.bin" } else { "matrix.csv" };
            write_matrix(&dir.join(name), &s, fmt)?;
            corpus.gt.save(&dir.join("gt.tsv"))?;
            let _ = writeln!(
                out,
                "wrote {} images, {} texts, {}x{} matrix, {} hub texts to {}",
                images,
                images * captions,
                s.rows(),
                s.cols(),
                hubs.len(),
                dir.display()
            );
        }
        Command::ShowConfig { common } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            out.push_str(&cfg.dump());
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
