use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use symcorr::correlation::deviation;
use symcorr::correlation::Correlation;
use symcorr::lab::config::KvConfig;
use symcorr::lab::files::{read_episode, write_episode};
use symcorr::lab::pgm::write_mask;
use symcorr::lab::report::{emit_report, render_svg, ChartMetric};
use symcorr::lab::sweep::{dilution_sweep, Method, ModelSpec, SweepConfig};
use symcorr::lab::synth::{synth_pool, PoolSpec};
use symcorr::lab::toy::{gradient_suite, separable_spec, toy_model, GradCheckConfig};
use symcorr::pruning::{greedy_select, multilayer_terms, topk_select, PruneConfig};
use symcorr::segmenter::{
    bce_loss, forward_episode, miou, train_toy, Episode, PipelineConfig, Pooling, SegModel,
    TrainConfig,
};
use symcorr::{Error, Result};

#[derive(Parser)]
#[command(name = "symcorr", version, about = "Symmetric Correlation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for every random draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct WithEpisode {
    #[command(flatten)]
    common: Common,
    /// Episode directory to read instead of synthesizing one.
    #[arg(long)]
    episode: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic episode directory.
    Synth(Common),
    /// Per-layer contribution index of every support.
    Contrib(WithEpisode),
    /// Rank and select supports before attention.
    Prune(WithEpisode),
    /// Run the segmentation pipeline on one episode.
    Segment(WithEpisode),
    /// Sweep the pool size and report deviation and mIoU per method.
    Dilution(Common),
    /// Compare tape gradients with finite differences.
    Gradcheck(Common),
    /// Train on one separable synthetic episode.
    Train(WithEpisode),
}

fn load_config(common: &Common) -> Result<KvConfig> {
    match &common.config {
        Some(p) => KvConfig::load(p),
        None => Ok(KvConfig::default()),
    }
}

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out)?;
    Ok(&common.out)
}

/// Episode from `--episode` or synthesized from `base` plus config keys.
fn episode(args: &WithEpisode, cfg: &mut KvConfig, base: PoolSpec) -> Result<Episode> {
    match &args.episode {
        Some(dir) => read_episode(dir),
        None => {
            let mut spec = PoolSpec {
                seed: args.common.seed,
                ..base
            };
            spec.apply_config(cfg)?;
            synth_pool(&spec)
        }
    }
}

fn model_for(
    e: &Episode,
    cfg: &mut KvConfig,
    seed: u64,
    default_method: Method,
) -> Result<SegModel> {
    let method = cfg.take("method")?.unwrap_or(default_method);
    let mut spec = ModelSpec::default();
    spec.apply_config(cfg)?;
    spec.build(method, e.num_layers(), e.query.dim(), seed)
}

fn synth(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    let mut spec = PoolSpec {
        seed: c.seed,
        ..PoolSpec::small()
    };
    spec.apply_config(&mut cfg)?;
    cfg.finish()?;
    let e = synth_pool(&spec)?;
    let out = out_dir(c)?;
    write_episode(out, &e)?;
    println!(
        "wrote episode with {} supports to {}",
        e.supports.len(),
        out.display()
    );
    Ok(())
}

fn contrib(a: &WithEpisode) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    let e = episode(a, &mut cfg, PoolSpec::small())?;
    let model = model_for(&e, &mut cfg, a.common.seed, Method::Symmetric)?;
    let designated: usize = cfg.take("designated")?.unwrap_or(0);
    cfg.finish()?;
    let pipeline = PipelineConfig {
        prune: PruneConfig::disabled(),
        ..PipelineConfig::default()
    };
    let run = forward_episode(&e, &model, &pipeline)?;
    let mut table = String::from("layer,support_id,delta\n");
    let mut dev = String::from("layer,designated_id,mean_others,deviation\n");
    let mut devs = Vec::new();
    for (l, r) in run.reports.iter().enumerate() {
        for (id, d) in run.kept_ids.iter().zip(&r.per_support_delta) {
            let _ = writeln!(table, "{l},{id},{d:.6}");
        }
        if r.per_support_delta.len() >= 2 {
            let r = r.clone().with_designated(designated)?;
            let (m, d) = (
                r.mean_others.unwrap_or_default(),
                deviation(&r, designated)?,
            );
            let _ = writeln!(dev, "{l},{},{m:.6},{d:.6}", run.kept_ids[designated]);
            devs.push(d);
        }
    }
    let out = out_dir(&a.common)?;
    fs::write(out.join("contrib.csv"), table)?;
    if devs.is_empty() {
        println!("single support: deviation undefined");
    } else {
        fs::write(out.join("deviation.csv"), dev)?;
        println!(
            "mean deviation over layers: {:.6}",
            devs.iter().sum::<f64>() / devs.len() as f64
        );
    }
    Ok(())
}

fn prune(a: &WithEpisode) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    let e = episode(
        a,
        &mut cfg,
        PoolSpec {
            n_high: 10,
            n_low: 40,
            upper_bound: false,
            ..PoolSpec::small()
        },
    )?;
    let model = model_for(&e, &mut cfg, a.common.seed, Method::Symmetric)?;
    let keep: usize = cfg.take("keep")?.unwrap_or(PruneConfig::default().keep);
    let algorithm: String = cfg.take("algorithm")?.unwrap_or_else(|| "greedy".into());
    cfg.finish()?;
    let projectors = model
        .correlations
        .iter()
        .map(|c| match c {
            Correlation::Symmetric { heads, .. } => Ok(heads.clone()),
            _ => Err(Error::Contract(
                "pruning needs Symmetric Correlation layers".into(),
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    let pools: Vec<Vec<_>> = (0..e.num_layers())
        .map(|l| {
            e.supports
                .iter()
                .map(|s| s.layers.layers()[l].clone())
                .collect()
        })
        .collect();
    let terms = multilayer_terms(&pools, e.query.layers(), &projectors)?;
    let keep = keep.min(terms.len());
    let result = match algorithm.as_str() {
        "greedy" => greedy_select(&terms, keep)?,
        "topk" => topk_select(&terms, keep)?,
        other => {
            return Err(Error::Config(format!(
                "unknown algorithm '{other}' (greedy or topk)"
            )))
        }
    };
    let mut table = String::from("rank,support_id,term\n");
    for (rank, &i) in result.selected.iter().enumerate() {
        let _ = writeln!(table, "{rank},{},{:.6}", e.supports[i].id, terms[i]);
    }
    let out = out_dir(&a.common)?;
    fs::write(out.join("prune.csv"), table)?;
    fs::write(
        out.join("prune.txt"),
        format!(
            "kept = {}\nobjective = {:.6}\nevaluations = {}\n",
            result.selected.len(),
            result.objective,
            result.evaluations
        ),
    )?;
    println!(
        "kept {} of {} supports, objective {:.6}, {} evaluations",
        result.selected.len(),
        terms.len(),
        result.objective,
        result.evaluations
    );
    Ok(())
}

fn segment(a: &WithEpisode) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    let e = episode(a, &mut cfg, PoolSpec::small())?;
    let model = model_for(&e, &mut cfg, a.common.seed, Method::Symmetric)?;
    let prune: bool = cfg.take("prune")?.unwrap_or(true);
    let pooling: Pooling = cfg.take("pooling")?.unwrap_or_default();
    cfg.finish()?;
    let pipeline = PipelineConfig {
        prune: if prune {
            PruneConfig::default()
        } else {
            PruneConfig::disabled()
        },
        pooling,
    };
    let run = forward_episode(&e, &model, &pipeline)?;
    let loss = bce_loss(&run.prediction.probs, &e.query_truth)?;
    let score = miou(
        std::slice::from_ref(&run.prediction),
        std::slice::from_ref(&e.query_truth),
        &[e.category.as_str()],
    )?;
    let out = out_dir(&a.common)?;
    write_mask(&out.join("prediction.pgm"), &run.prediction.binary)?;
    let ids: Vec<String> = run.kept_ids.iter().map(u32::to_string).collect();
    fs::write(
        out.join("segment.txt"),
        format!(
            "miou = {score:.6}\nloss = {loss:.6}\nkept_ids = {}\n",
            ids.join(", ")
        ),
    )?;
    println!(
        "mIoU {score:.6}, loss {loss:.6}, {} supports used",
        ids.len()
    );
    Ok(())
}

fn dilution(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    let mut sweep = SweepConfig {
        seed: c.seed,
        ..SweepConfig::default()
    };
    sweep.apply_config(&mut cfg)?;
    cfg.finish()?;
    let result = dilution_sweep(&sweep)?;
    let out = out_dir(c)?;
    emit_report(
        &result,
        &out.join("dilution.csv"),
        &out.join("dilution.svg"),
    )?;
    fs::write(
        out.join("dilution_miou.svg"),
        render_svg(&result, ChartMetric::Miou)?,
    )?;
    println!("config {} over {} trials", result.config_hash, sweep.trials);
    for r in &result.rows {
        let delta = r
            .delta
            .map_or_else(|| "-".to_string(), |d| format!("{d:.4}"));
        println!(
            "{:>16} N={:<4} delta {delta:>8} mIoU {:.4}",
            r.method.name(),
            r.n,
            r.miou
        );
    }
    Ok(())
}

fn gradcheck(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    let mut g = GradCheckConfig {
        seed: c.seed,
        ..GradCheckConfig::default()
    };
    cfg.set_if("points", &mut g.points)?;
    cfg.set_if("step", &mut g.step)?;
    cfg.set_if("tolerance", &mut g.tolerance)?;
    cfg.set_if("heads", &mut g.heads)?;
    cfg.set_if("hidden", &mut g.hidden)?;
    g.spec.apply_config(&mut cfg)?;
    cfg.finish()?;
    let errors = gradient_suite(&g)?;
    let mut table = String::from("point,max_rel_err\n");
    for (p, e) in errors.iter().enumerate() {
        let _ = writeln!(table, "{p},{e:.3e}");
    }
    fs::write(out_dir(c)?.join("gradcheck.csv"), table)?;
    let worst = errors.iter().copied().fold(0.0, f64::max);
    println!("{} points, worst relative error {worst:.3e}", errors.len());
    if worst > g.tolerance {
        return Err(Error::Evaluation(format!(
            "gradient check failed: {worst:.3e} exceeds {:.1e}",
            g.tolerance
        )));
    }
    Ok(())
}

fn train(a: &WithEpisode) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    let spec = separable_spec(a.common.seed);
    let e = episode(a, &mut cfg, spec.clone())?;
    let mut t = TrainConfig::default();
    cfg.set_if("lr", &mut t.sgd.lr)?;
    cfg.set_if("momentum", &mut t.sgd.momentum)?;
    cfg.set_if("weight_decay", &mut t.sgd.weight_decay)?;
    cfg.set_if("steps", &mut t.steps)?;
    cfg.finish()?;
    let model_spec = PoolSpec {
        dim: e.query.dim(),
        tokens_per_layer: e.query.layers().iter().map(|l| l.tokens()).collect(),
        ..spec
    };
    let model = toy_model(&model_spec, a.common.seed)?;
    let outcome = train_toy(std::slice::from_ref(&e), model, &t)?;
    let mut table = String::from("step,loss\n");
    for (s, l) in outcome.losses.iter().enumerate() {
        let _ = writeln!(table, "{s},{l:.9}");
    }
    fs::write(out_dir(&a.common)?.join("loss.csv"), table)?;
    let (first, last) = (outcome.losses[0], outcome.losses[outcome.losses.len() - 1]);
    println!(
        "loss {first:.6} -> {last:.6} ({:.2}% of initial) after {} steps",
        100.0 * last / first,
        t.steps
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(c) => synth(c),
        Command::Contrib(a) => contrib(a),
        Command::Prune(a) => prune(a),
        Command::Segment(a) => segment(a),
        Command::Dilution(c) => dilution(c),
        Command::Gradcheck(c) => gradcheck(c),
        Command::Train(a) => train(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
