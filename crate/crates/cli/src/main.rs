//! Command-line driver for the registration pipeline and the loss lab.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use retreg_core::batchgen::IndexSets;
use retreg_core::descriptors::{match_mutual, sample_descriptors, write_matches_csv};
use retreg_core::geometry::RansacConfig;
use retreg_core::harness::SynthConfig;
use retreg_core::keypoints::{
    extract_keypoints, read_keypoints_csv, write_keypoints_csv, DetectConfig, HeatmapSet,
};
use retreg_core::losses::{
    evaluate as evaluate_loss, finite_difference_check, optimize_embeddings,
    view_matching_accuracy, EmbeddingSet, LossConfig, LossKind, OptimizeConfig,
};
use retreg_core::pipeline::{
    evaluate_dataset, export_synth_dataset, ingest_pairings, overlay_checkerboard, register_pair,
    write_records_csv, write_summary_json, RunConfig,
};
use retreg_core::tensorio::{load_png, read_tensor, save_png};

#[derive(Parser)]
#[command(
    name = "retreg",
    version,
    about = "Retinal image registration pipeline and contrastive-loss laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DetectArgs {
    /// Intensity threshold for keypoint extraction.
    #[arg(long, default_value_t = 0.35)]
    threshold: f64,
    /// Odd NMS window size in pixels.
    #[arg(long, default_value_t = 5)]
    nms_window: usize,
    /// Gaussian sigma used for heatmap synthesis.
    #[arg(long, default_value_t = 3.0)]
    sigma: f64,
}

impl DetectArgs {
    fn build(&self) -> Result<DetectConfig> {
        let cfg = DetectConfig {
            intensity_threshold: self.threshold,
            nms_window: self.nms_window,
            gaussian_sigma_px: self.sigma,
        };
        cfg.validate().context("invalid detect config")?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    detect: DetectArgs,
    /// RANSAC inlier threshold in pixels at matching resolution.
    #[arg(long, default_value_t = 3.0)]
    inlier_threshold: f64,
    /// RANSAC iteration cap.
    #[arg(long, default_value_t = 2000)]
    ransac_iterations: usize,
    /// Matching resolution `WxH` (defaults to each heatmap's own dims).
    #[arg(long, value_parser = parse_size)]
    matching_resolution: Option<(usize, usize)>,
    /// Native resolution `WxH` (defaults to the fixed image dims).
    #[arg(long, value_parser = parse_size)]
    native_resolution: Option<(usize, usize)>,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_size(text: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got `{text}`"))?;
    let parse = |v: &str| v.parse::<usize>().map_err(|e| e.to_string());
    Ok((parse(w)?, parse(h)?))
}

impl RunArgs {
    fn build(&self) -> Result<RunConfig> {
        Ok(RunConfig {
            detect: self.detect.build()?,
            ransac: RansacConfig {
                inlier_threshold_px: self.inlier_threshold,
                max_iterations: self.ransac_iterations,
                seed: self.seed,
            },
            matching_resolution: self.matching_resolution,
            native_resolution: self.native_resolution,
            threads: self.threads,
            seed: self.seed,
            ..RunConfig::default()
        })
    }
}

#[derive(Args)]
struct LossInstanceArgs {
    /// Loss to evaluate: supcon | mp-infonce | mp-npair | fastap.
    #[arg(long)]
    loss: String,
    /// Augmented view count N (batch holds N+1 images).
    #[arg(long, default_value_t = 2)]
    views: usize,
    /// Keypoints per view.
    #[arg(long, default_value_t = 4)]
    keypoints: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Softmax temperature.
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    /// FastAP histogram bins.
    #[arg(long, default_value_t = 10)]
    bins: usize,
}

impl LossInstanceArgs {
    fn kind(&self) -> Result<LossKind> {
        LossKind::parse(&self.loss).with_context(|| format!("unknown loss `{}`", self.loss))
    }

    fn config(&self) -> Result<LossConfig> {
        let cfg = LossConfig {
            tau: self.tau,
            bins: self.bins,
            ..LossConfig::default()
        };
        cfg.validate().context("invalid loss config")?;
        Ok(cfg)
    }

    fn instance(&self) -> Result<EmbeddingSet> {
        Ok(EmbeddingSet::random(
            IndexSets::new(self.views, self.keypoints),
            self.dim,
            self.seed,
        )?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Extract keypoints from a heatmap tensor into a CSV.
    ExtractKeypoints {
        /// Heatmap tensor `[3, h, w]` (.tns).
        #[arg(long)]
        heatmaps: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        detect: DetectArgs,
    },
    /// Mutually match two keypoint/descriptor-map sets into a CSV.
    Match {
        #[arg(long)]
        fixed_keypoints: PathBuf,
        #[arg(long)]
        fixed_descriptors: PathBuf,
        #[arg(long)]
        moving_keypoints: PathBuf,
        #[arg(long)]
        moving_descriptors: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Register a single pair from a pairing file.
    Register {
        #[arg(long)]
        pairings: PathBuf,
        /// Pair id (defaults to the first pair).
        #[arg(long)]
        pair_id: Option<String>,
        /// Output JSON record (stdout when omitted).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Write a checkerboard overlay PNG of fixed vs. warped moving.
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a whole pairing file and emit summary reports.
    Evaluate {
        #[arg(long)]
        pairings: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        /// Abort on pairing-file row errors instead of skipping rows.
        #[arg(long)]
        strict: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Check analytic loss gradients against central finite differences.
    LossCheck {
        #[command(flatten)]
        instance: LossInstanceArgs,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
    },
    /// Optimize free embeddings under a loss and report matching accuracy.
    TrainEmbed {
        #[command(flatten)]
        instance: LossInstanceArgs,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
        /// Output JSON report (stdout when omitted).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic dataset in the layout `evaluate` ingests.
    SynthGen {
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 60)]
        keypoints: usize,
        #[arg(long, default_value_t = 0.6)]
        overlap: f64,
        /// Descriptor noise sigma.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Fraction of moving descriptors replaced by outliers.
        #[arg(long, default_value_t = 0.0)]
        outliers: f64,
        /// Canvas size `WxH`.
        #[arg(long, value_parser = parse_size, default_value = "256x256")]
        canvas: (usize, usize),
        #[arg(long, default_value_t = 32)]
        descriptor_dim: usize,
        #[command(flatten)]
        detect: DetectArgs,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::ExtractKeypoints {
            heatmaps,
            output,
            detect,
        } => {
            let tensor = read_tensor(&heatmaps)
                .with_context(|| format!("reading {}", heatmaps.display()))?;
            let set = HeatmapSet::from_tensor(&tensor)?;
            let kps = extract_keypoints(&set, &detect.build()?);
            write_keypoints_csv(&output, &kps)?;
            eprintln!("{} keypoints -> {}", kps.len(), output.display());
        }
        Command::Match {
            fixed_keypoints,
            fixed_descriptors,
            moving_keypoints,
            moving_descriptors,
            output,
        } => {
            let fixed_kps = read_keypoints_csv(&fixed_keypoints)?;
            let moving_kps = read_keypoints_csv(&moving_keypoints)?;
            let fixed_map = read_tensor(&fixed_descriptors)?;
            let moving_map = read_tensor(&moving_descriptors)?;
            let fixed_descs = sample_descriptors(&fixed_map, &fixed_kps)?;
            let moving_descs = sample_descriptors(&moving_map, &moving_kps)?;
            let matches = match_mutual(&fixed_kps, &fixed_descs, &moving_kps, &moving_descs);
            write_matches_csv(&output, &matches)?;
            eprintln!("{} matches -> {}", matches.len(), output.display());
        }
        Command::Register {
            pairings,
            pair_id,
            output,
            overlay,
            run,
        } => {
            let cfg = run.build()?;
            let set = ingest_pairings(&pairings)?;
            for warning in &set.warnings {
                eprintln!("warning: {warning}");
            }
            let record = match pair_id {
                Some(id) => set
                    .records
                    .iter()
                    .find(|r| r.pair_id == id)
                    .with_context(|| format!("pair `{id}` not found"))?,
                None => set.records.first().context("pairing file has no rows")?,
            };
            let result = register_pair(record, &cfg)?;
            let json = serde_json::to_string_pretty(&result.record)?;
            match output {
                Some(path) => std::fs::write(&path, json)?,
                None => println!("{json}"),
            }
            if let Some(overlay_path) = overlay {
                let Some(h) = result.record.homography else {
                    bail!("pair did not register; no overlay to write");
                };
                let fixed = load_png(&record.fixed)?;
                let moving = load_png(&record.moving)?;
                let warped = retreg_core::geometry::warp_image(&moving, &h, fixed.size())?;
                save_png(&overlay_path, &overlay_checkerboard(&fixed, &warped, 32))?;
                eprintln!("overlay -> {}", overlay_path.display());
            }
        }
        Command::Evaluate {
            pairings,
            output_dir,
            strict,
            run,
        } => {
            let cfg = run.build()?;
            let set = ingest_pairings(&pairings)?;
            for warning in &set.warnings {
                eprintln!("warning: {warning}");
            }
            if !set.row_errors.is_empty() {
                for err in &set.row_errors {
                    eprintln!("row error: {err}");
                }
                if strict {
                    bail!("{} row errors in strict mode", set.row_errors.len());
                }
            }
            let summary = evaluate_dataset(&set.records, &cfg)?;
            std::fs::create_dir_all(&output_dir)?;
            write_summary_json(&output_dir.join("summary.json"), &summary)?;
            write_records_csv(&output_dir.join("pairs.csv"), &summary.records)?;
            println!(
                "{} of {} pairs registered; raw IoU {:.3}, normalized {:.3}",
                summary.raw.pairs, summary.total_pairs, summary.raw.iou, summary.normalized.iou
            );
            if let Some(score) = summary.registration_score {
                println!("registration score {score:.3}");
            }
            if let Some(v) = summary.vtkrs {
                println!("vtkrs {v:.3}");
            }
            eprintln!("reports -> {}", output_dir.display());
        }
        Command::LossCheck { instance, epsilon } => {
            let kind = instance.kind()?;
            let cfg = instance.config()?;
            let e = instance.instance()?;
            let report = finite_difference_check(kind, &e, &cfg, epsilon);
            println!(
                "{}",
                serde_json::json!({
                    "loss": kind.name(),
                    "value": report.value,
                    "max_fd_rel_error": report.max_rel_error,
                    "instance_seed": instance.seed,
                })
            );
        }
        Command::TrainEmbed {
            instance,
            steps,
            learning_rate,
            output,
        } => {
            let kind = instance.kind()?;
            let cfg = instance.config()?;
            let e0 = instance.instance()?;
            let initial = evaluate_loss(kind, &e0, &cfg).value;
            let trace =
                optimize_embeddings(kind, e0, &cfg, &OptimizeConfig::new(steps, learning_rate))?;
            let accuracy = view_matching_accuracy(&trace.embeddings, 0, 1);
            let report = serde_json::json!({
                "loss": kind.name(),
                "steps": steps,
                "learning_rate": learning_rate,
                "initial_loss": initial,
                "final_loss": trace.loss_history.last(),
                "view01_matching_accuracy": accuracy,
                "instance_seed": instance.seed,
            });
            match output {
                Some(path) => std::fs::write(&path, serde_json::to_string_pretty(&report)?)?,
                None => println!("{report}"),
            }
        }
        Command::SynthGen {
            output_dir,
            pairs,
            seed,
            keypoints,
            overlap,
            noise,
            outliers,
            canvas,
            descriptor_dim,
            detect,
        } => {
            let configs: Vec<SynthConfig> = (0..pairs as u64)
                .map(|i| SynthConfig {
                    n_keypoints: keypoints,
                    overlap_frac: overlap,
                    desc_noise_sigma: noise,
                    outlier_frac: outliers,
                    seed: seed.wrapping_add(i),
                    canvas,
                    descriptor_dim,
                })
                .collect();
            let csv = export_synth_dataset(&output_dir, &configs, &detect.build()?)?;
            println!("{}", csv.display());
        }
    }
    Ok(())
}
