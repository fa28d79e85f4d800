use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::info;

use fgs::denoiser::{Condition, Denoiser};
use fgs::diffusion::make_schedule;
use fgs::eval::benchmark::{table_variants, Benchmark, Variant};
use fgs::eval::checkpoint::{
    checkpoint_schedule, edit_result_to_checkpoint, load_checkpoint, params_from_checkpoint,
    params_to_checkpoint, save_checkpoint,
};
use fgs::eval::config::{DenoiserChoice, ExperimentConfig};
use fgs::eval::export::{export_pgm, export_svg_plot, PlotLabels, Series};
use fgs::eval::metrics::median;
use fgs::eval::scene::{from_latent, gen_dataset, to_latent, SIDE};
use fgs::eval::sweep::{
    csv_string, misalignment_study, run_grid, sweep, write_curve_csv, MetricsRow,
};
use fgs::nnmodel::{train, Architecture, LearnedDenoiser};
use fgs::pipeline::{run_baseline, run_fgs, EditRequest};
use fgs::tensor::Grid;

#[derive(Parser)]
#[command(
    name = "fgs",
    version,
    about = "Dual-path diffusion editing with faithfulness guidance on toy models"
)]
struct Cli {
    /// Experiment config (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed` and `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write procedural scenes as PGM files plus an index CSV.
    GenData {
        #[arg(long, default_value_t = 60)]
        n: usize,
    },
    /// Train the attention denoiser and save it as a checkpoint.
    Train,
    /// Edit one scene (or the configured vector) with the baseline and the full method.
    Edit,
    /// Run the hyperparameter sweep, or the method comparison table with `--table`.
    Sweep {
        #[arg(long)]
        table: bool,
    },
    /// Mean CFG/FG direction cosine per timestep over many edits.
    Misalign,
    /// Plot median metrics per grid point of a sweep CSV.
    Export {
        csv: PathBuf,
        #[arg(long, default_value = "faithfulness_unedited")]
        metric: String,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match cli.command {
        Command::GenData { n } => gen_data(&cfg, n, &cli.out),
        Command::Train => train_model(&cfg, &cli.out),
        Command::Edit => edit(&cfg, &cli.out),
        Command::Sweep { table } => run_sweep(&cfg, table, &cli.out),
        Command::Misalign => misalign(&cfg, &cli.out),
        Command::Export { csv, metric } => export(&csv, &metric, &cli.out),
    }
}

fn gen_data(cfg: &ExperimentConfig, n: usize, out: &Path) -> anyhow::Result<()> {
    let scenes = gen_dataset(cfg.benchmark.seed, n)?;
    let mut index = csv::Writer::from_path(out.join("scenes.csv"))?;
    index.write_record(["scene", "class", "shape", "slot", "layout", "file"])?;
    for (i, s) in scenes.iter().enumerate() {
        let file = format!("scene_{i:04}.pgm");
        export_pgm(&s.image, &out.join(&file))?;
        let (shape, slot) = (
            format!("{:?}", s.class.shape).to_lowercase(),
            format!("{:?}", s.class.slot).to_lowercase(),
        );
        index.write_record([
            i.to_string(),
            s.class.id().to_string(),
            shape,
            slot,
            s.layout.to_string(),
            file,
        ])?;
    }
    index.flush()?;
    info!("wrote {n} scenes to {}", out.display());
    Ok(())
}

fn train_model(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let sched = make_schedule(cfg.benchmark.schedule, cfg.benchmark.steps)?;
    let data: Vec<(Grid, Condition)> = gen_dataset(cfg.train.seed ^ 0x7a11, cfg.train_samples)?
        .into_iter()
        .map(|s| (to_latent(&s.image), Condition::Class(s.class.id())))
        .collect();
    let arch = Architecture {
        height: SIDE,
        width: SIDE,
        conditions: fgs::eval::scene::NUM_CLASSES,
    };
    let outcome = train(&data, arch, &cfg.train, &sched)?;
    let path = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join("model.fgs1"));
    save_checkpoint(
        &path,
        &params_to_checkpoint(
            &outcome.params,
            cfg.train.seed,
            cfg.benchmark.schedule,
            cfg.benchmark.steps,
        )?,
    )?;
    let mut w = csv::Writer::from_path(out.join("losses.csv"))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in outcome.losses.iter().enumerate() {
        w.write_record([i.to_string(), fgs::eval::sweep::format_sig6(*l)])?;
    }
    w.flush()?;
    info!("saved {}", path.display());
    Ok(())
}

fn benchmark(cfg: &ExperimentConfig) -> anyhow::Result<Benchmark> {
    match cfg.denoiser {
        DenoiserChoice::Analytic => Ok(Benchmark::build(cfg.benchmark.clone())?),
        DenoiserChoice::Learned => {
            let Some(path) = &cfg.checkpoint else {
                bail!("model.denoiser = learned needs model.checkpoint")
            };
            let ckpt =
                load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            let (schedule, steps) = checkpoint_schedule(&ckpt)?;
            let denoiser = LearnedDenoiser::new(params_from_checkpoint(&ckpt)?)?;
            let config = fgs::eval::benchmark::BenchmarkConfig {
                schedule,
                steps,
                ..cfg.benchmark.clone()
            };
            Ok(Benchmark::with_denoiser(config, Box::new(denoiser))?)
        }
    }
}

fn edit(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    if let Some(input) = &cfg.edit.input {
        return edit_vector(cfg, input);
    }
    let bench = benchmark(cfg)?;
    let scene = &bench
        .scenes
        .get(cfg.edit.scene)
        .with_context(|| format!("scene {} out of range", cfg.edit.scene))?;
    export_pgm(&scene.image, &out.join("input.pgm"))?;
    for variant in [
        Variant::baseline(cfg.guidance.injection.tau())?,
        Variant::fgs(cfg.guidance.clone()),
    ] {
        let (result, m) = bench.edit(cfg.edit.scene, &variant, cfg.seed)?;
        let tag = if variant.use_fg { "fgs" } else { "baseline" };
        export_pgm(
            &from_latent(&result.edited),
            &out.join(format!("edited_{tag}.pgm")),
        )?;
        export_pgm(
            &from_latent(&result.recon),
            &out.join(format!("recon_{tag}.pgm")),
        )?;
        save_checkpoint(
            &out.join(format!("edit_{tag}.fgs1")),
            &edit_result_to_checkpoint(&result, cfg.seed, bench.sched.kind())?,
        )?;
        println!(
            "{:<20} faithfulness whole {:.5} unedited {:.5} | selfsim {:.5} | editability whole {:.4} edited {:.4}",
            variant.label, m.faithfulness_whole, m.faithfulness_unedited, m.structure_selfsim, m.editability_whole, m.editability_edited
        );
    }
    Ok(())
}

fn edit_vector(cfg: &ExperimentConfig, input: &[f64]) -> anyhow::Result<()> {
    let denoiser = cfg.mixture_denoiser()?;
    if denoiser.latent_shape().1 != input.len() {
        bail!(
            "edit.input has {} values, the mixture has dimension {}",
            input.len(),
            denoiser.latent_shape().1
        );
    }
    let sched = make_schedule(cfg.benchmark.schedule, cfg.benchmark.steps)?;
    let input = Grid::vector(input.to_vec())?;
    let req = EditRequest {
        input: &input,
        source: Condition::Class(cfg.edit.source),
        target: Condition::Class(cfg.edit.target),
        guidance: &cfg.guidance,
        recon_mode: cfg.benchmark.recon_mode,
        denoiser: &denoiser,
        sched: &sched,
        seed: cfg.seed,
    };
    for (label, result) in [("baseline", run_baseline(&req)?), ("fgs", run_fgs(&req)?)] {
        let dist = result.edited.sub(&input)?.norm();
        println!(
            "{label:<9} recon {:?} edited {:?} |edited - input| {dist:.5}",
            result.recon.data(),
            result.edited.data()
        );
    }
    Ok(())
}

fn summarize(rows: &[MetricsRow]) {
    let mut groups: Vec<(&str, Vec<&MetricsRow>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|(label, _)| *label == r.variant) {
            Some((_, g)) => g.push(r),
            None => groups.push((&r.variant, vec![r])),
        }
    }
    println!(
        "{:<22} {:>12} {:>12} {:>12} {:>12}",
        "variant", "faith_unedit", "selfsim", "edit_whole", "edit_edited"
    );
    for (label, g) in groups {
        let med = |f: fn(&MetricsRow) -> f64| {
            median(&g.iter().map(|r| f(r)).collect::<Vec<_>>()).unwrap_or(f64::NAN)
        };
        println!(
            "{label:<22} {:>12.5} {:>12.5} {:>12.4} {:>12.4}",
            med(|r| r.metrics.faithfulness_unedited),
            med(|r| r.metrics.structure_selfsim),
            med(|r| r.metrics.editability_whole),
            med(|r| r.metrics.editability_edited)
        );
    }
}

fn run_sweep(cfg: &ExperimentConfig, table: bool, out: &Path) -> anyhow::Result<()> {
    let bench = benchmark(cfg)?;
    let (rows, name) = if table {
        (
            run_grid(
                &bench,
                &table_variants(&cfg.guidance, cfg.noise_scale)?,
                cfg.seed,
            )?,
            "table.csv",
        )
    } else {
        (sweep(&bench, &cfg.sweep, cfg.seed)?, "sweep.csv")
    };
    fs::write(out.join(name), csv_string(&rows)?)?;
    summarize(&rows);
    info!("wrote {} rows to {}", rows.len(), out.join(name).display());
    Ok(())
}

fn misalign(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let bench = benchmark(cfg)?;
    let curve = misalignment_study(
        &bench,
        &Variant::fg(cfg.guidance.clone()),
        cfg.misalign_runs,
        cfg.seed,
    )?;
    let mut buf = Vec::new();
    write_curve_csv(&curve, &mut buf)?;
    fs::write(out.join("misalign.csv"), buf)?;
    let series = Series {
        name: "cos(d_cfg, d_fg)".into(),
        points: curve.iter().map(|&(t, c)| (t as f64, c)).collect(),
    };
    let labels = PlotLabels {
        title: format!("CFG/FG direction cosine, {} runs", cfg.misalign_runs),
        x: "t".into(),
        y: "cosine_mean".into(),
    };
    export_svg_plot(&out.join("misalign.svg"), &labels, &[series])?;
    for (t, c) in &curve {
        println!("t={t:<4} cos={c:+.4}");
    }
    Ok(())
}

fn export(csv_path: &Path, metric: &str, out: &Path) -> anyhow::Result<()> {
    let mut reader = csv::Reader::from_path(csv_path)
        .with_context(|| format!("reading {}", csv_path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("column {name} missing"))
    };
    let (variant_col, metric_col) = (col("variant")?, col(metric)?);
    // axis name -> (value -> metric samples)
    let mut axes: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let label = &record[variant_col];
        let Some((axis, value)) = label.split_once('=') else {
            continue;
        };
        let v: f64 = record[metric_col]
            .parse()
            .with_context(|| format!("bad {metric} value"))?;
        axes.entry(axis.to_string())
            .or_default()
            .entry(value.to_string())
            .or_default()
            .push(v);
    }
    if axes.is_empty() {
        bail!("no swept grid points in {}", csv_path.display());
    }
    for (axis, points) in axes {
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for (value, samples) in &points {
            // non-numeric axes (perturbation kinds) are plotted by position
            let x = value.parse().unwrap_or(pts.len() as f64);
            pts.push((x, median(samples).expect("non-empty group")));
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let labels = PlotLabels {
            title: format!("median {metric} vs {axis}"),
            x: axis.clone(),
            y: metric.to_string(),
        };
        let path = out.join(format!("sweep_{axis}.svg"));
        export_svg_plot(
            &path,
            &labels,
            &[Series {
                name: metric.to_string(),
                points: pts,
            }],
        )?;
        info!("wrote {}", path.display());
    }
    Ok(())
}
