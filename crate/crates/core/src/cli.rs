//! Command-line pipeline. Every verb works inside one experiment directory
//! (`--out`): `generate` writes volumes and a manifest there, `split` the fold
//! plans, `train` the checkpoints, `evaluate` the per-fold results,
//! `attribute` the saliency outputs, and `report` the final tables.

use crate::attribution::{
    export_axial_slice, integrated_gradients, mean_abs_maps, modality_contribution, write_attribution_csv,
    AttributionResult, AttributionRow,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::data::split::SplitPlan;
use crate::data::synthetic::generate_synthetic;
use crate::data::{read_manifest, stratified_split, write_manifest, write_vol1, LoadedDataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict, train};
use crate::fusion::{build_model, FusionStrategy, MultiModalModel};
use crate::report::{read_results_csv, render_markdown, write_results_csv, write_summary_csv, ResultRow};
use crate::seed::derive_seed;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mmfusion", about = "Multi-modal 3D CNN classification pipeline", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides any seed in the configuration.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Experiment directory holding all inputs and outputs.
    #[arg(long)]
    out: PathBuf,
    /// Worker count (execution is currently sequential; values above 1 are
    /// accepted and logged).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired-volume cohort and its manifest.
    Generate(Common),
    /// Compute stratified train/val/test fold plans from the manifest.
    Split(Common),
    /// Train one model per strategy and fold.
    Train(Common),
    /// Evaluate trained models under each pairing scheme.
    Evaluate(Common),
    /// Integrated-gradients attribution on fold-0 test subjects.
    Attribute(Common),
    /// Aggregate per-fold results into summary tables.
    Report(Common),
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn check_out_dir(out: &Path) -> Result<()> {
    if !out.is_dir() {
        return Err(Error::config(format!(
            "output directory {} does not exist",
            out.display()
        )));
    }
    Ok(())
}

fn note_jobs(jobs: usize) {
    if jobs > 1 {
        log::info!("--jobs {jobs} requested; running sequentially");
    }
}

fn manifest_path(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    match &cfg.manifest {
        Some(rel) => out.join(rel),
        None => out.join("manifest.csv"),
    }
}

fn cmd_generate(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    check_out_dir(&common.out)?;
    let mut syn = cfg
        .synthetic
        .clone()
        .ok_or_else(|| Error::config("configuration has no `synthetic` section".to_string()))?;
    syn.seed = common.seed;
    // generate fully in memory before touching the filesystem, so a failing
    // run leaves no partial cohort behind
    let ds = generate_synthetic(&syn)?;
    let vol_dir = common.out.join("volumes");
    std::fs::create_dir_all(&vol_dir)?;
    let mut records: Vec<SubjectRecord> = Vec::with_capacity(ds.records.len());
    for (i, r) in ds.records.iter().enumerate() {
        let pet_rel = format!("volumes/{}_pet.vol", r.subject_id);
        let mri_rel = format!("volumes/{}_mri.vol", r.subject_id);
        write_vol1(&common.out.join(&pet_rel), &ds.pet[i])?;
        write_vol1(&common.out.join(&mri_rel), &ds.mri[i])?;
        records.push(SubjectRecord { pet_path: pet_rel, mri_path: mri_rel, ..r.clone() });
    }
    write_manifest(&manifest_path(&cfg, &common.out), &records)?;
    std::fs::write(common.out.join("config.json"), cfg.to_pretty_json()?)?;
    println!("generated {} subjects into {}", records.len(), common.out.display());
    Ok(())
}

fn cmd_split(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    check_out_dir(&common.out)?;
    let records = read_manifest(&manifest_path(&cfg, &common.out))?;
    let task_records: Vec<SubjectRecord> = records
        .into_iter()
        .filter(|r| r.diagnosis.label(cfg.backbone.num_classes).is_some())
        .collect();
    let plans = stratified_split(&task_records, common.seed, cfg.folds)?;
    std::fs::write(common.out.join("splits.json"), serde_json::to_string_pretty(&plans)?)?;
    println!("wrote {} fold plans to {}", plans.len(), common.out.join("splits.json").display());
    Ok(())
}

fn load_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<(LoadedDataset, Vec<SplitPlan>)> {
    let data = LoadedDataset::from_manifest(&manifest_path(cfg, out))?.filter_for_task(cfg.backbone.num_classes);
    let text = std::fs::read_to_string(out.join("splits.json"))
        .map_err(|_| Error::data(format!("missing splits.json in {}; run `split` first", out.display())))?;
    let plans: Vec<SplitPlan> = serde_json::from_str(&text)?;
    Ok((data, plans))
}

fn indices(data: &LoadedDataset, ids: &[String]) -> Result<Vec<usize>> {
    let by_id = data.index_by_id();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::data(format!("split references unknown subject '{id}'")))
        })
        .collect()
}

fn strategy_slug(s: FusionStrategy) -> &'static str {
    match s {
        FusionStrategy::SinglePet => "single_pet",
        FusionStrategy::SingleMri => "single_mri",
        FusionStrategy::Early => "early",
        FusionStrategy::Middle => "middle",
        FusionStrategy::Late => "late",
    }
}

fn checkpoint_path(out: &Path, strategy: FusionStrategy, fold: usize) -> PathBuf {
    out.join("models").join(format!("{}_fold{fold}.ckpt", strategy_slug(strategy)))
}

fn build_for(cfg: &ExperimentConfig, strategy: FusionStrategy, seed: u64) -> Result<MultiModalModel> {
    let exchange = (strategy == FusionStrategy::Middle).then(|| cfg.exchange.clone());
    build_model(strategy, &cfg.backbone, exchange, seed)
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    check_out_dir(&common.out)?;
    note_jobs(common.jobs);
    let (data, plans) = load_experiment(&cfg, &common.out)?;
    std::fs::create_dir_all(common.out.join("models"))?;
    std::fs::write(common.out.join("config.json"), cfg.to_pretty_json()?)?;
    for &strategy in &cfg.strategies {
        for plan in plans.iter().take(cfg.folds) {
            let slug = strategy_slug(strategy);
            let fold = plan.fold;
            log::info!("training {slug} fold {fold}");
            let model_seed = derive_seed(common.seed, &format!("model/{slug}/fold{fold}"));
            let mut model = build_for(&cfg, strategy, model_seed)?;
            let train_idx = indices(&data, &plan.train)?;
            let val_idx = indices(&data, &plan.val)?;
            let train_seed = derive_seed(common.seed, &format!("train/{slug}/fold{fold}"));
            let history = train(&mut model, &data, &train_idx, &val_idx, &cfg.train, train_seed)?;
            save_checkpoint(&checkpoint_path(&common.out, strategy, fold), &model)?;
            std::fs::write(
                common.out.join("models").join(format!("{slug}_fold{fold}_history.json")),
                serde_json::to_string_pretty(&history)?,
            )?;
            println!("trained {slug} fold {fold}: best val bacc {:.4}", history.best_val_bacc);
        }
    }
    Ok(())
}

fn cmd_evaluate(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    check_out_dir(&common.out)?;
    note_jobs(common.jobs);
    let (data, plans) = load_experiment(&cfg, &common.out)?;
    let mut rows = Vec::new();
    for &strategy in &cfg.strategies {
        for plan in plans.iter().take(cfg.folds) {
            let ckpt = checkpoint_path(&common.out, strategy, plan.fold);
            let mut model = load_checkpoint(&ckpt)?;
            let test_idx = indices(&data, &plan.test)?;
            for &scheme in &cfg.eval_schemes {
                let eval_seed = derive_seed(common.seed, &format!("eval/{}/fold{}", strategy_slug(strategy), plan.fold));
                let result = evaluate(&mut model, &data, &test_idx, scheme, cfg.train.batch_size, eval_seed)?;
                println!(
                    "{} fold {} {}: bacc {:.4} ± {:.4}",
                    strategy_slug(strategy),
                    plan.fold,
                    scheme.label(),
                    result.bacc_mean,
                    result.bacc_std
                );
                rows.push(ResultRow::from_eval(strategy, plan.fold, &result));
            }
        }
    }
    write_results_csv(&common.out.join("results.csv"), &rows)?;
    println!("wrote {}", common.out.join("results.csv").display());
    Ok(())
}

fn cmd_attribute(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    check_out_dir(&common.out)?;
    note_jobs(common.jobs);
    let (data, plans) = load_experiment(&cfg, &common.out)?;
    let plan = &plans[0];
    let test_idx = indices(&data, &plan.test)?;
    for &strategy in &cfg.strategies {
        let slug = strategy_slug(strategy);
        let mut model = load_checkpoint(&checkpoint_path(&common.out, strategy, plan.fold))?;
        let dir = common.out.join("attribution").join(slug);
        std::fs::create_dir_all(&dir)?;
        let id_map: Vec<usize> = (0..test_idx.len()).collect();
        let preds = predict(&mut model, &data, &test_idx, &id_map, &id_map, cfg.train.batch_size)?;
        let mut rows = Vec::new();
        let mut results: Vec<AttributionResult> = Vec::new();
        for (k, &i) in test_idx.iter().enumerate() {
            let r = &data.records[i];
            let label = r.diagnosis.label(cfg.backbone.num_classes).expect("task-filtered");
            let ig = integrated_gradients(
                &mut model,
                &data.pet[i],
                &data.mri[i],
                label,
                cfg.attribution_steps,
                cfg.attribution_chunk,
            )?;
            rows.push(AttributionRow {
                subject_id: r.subject_id.clone(),
                class: label,
                correct: preds[k] == label,
                contribution: modality_contribution(&ig),
                residual: ig.residual,
            });
            export_axial_slice(&dir.join(format!("{}_pet_axial.pgm", r.subject_id)), &ig.pet_map, ig.shape)?;
            export_axial_slice(&dir.join(format!("{}_mri_axial.pgm", r.subject_id)), &ig.mri_map, ig.shape)?;
            results.push(ig);
        }
        let (mean_pet, mean_mri, shape) = mean_abs_maps(&results.iter().collect::<Vec<_>>())?;
        export_axial_slice(&dir.join("mean_pet_axial.pgm"), &mean_pet, shape)?;
        export_axial_slice(&dir.join("mean_mri_axial.pgm"), &mean_mri, shape)?;
        write_attribution_csv(&dir.join("summary.csv"), &rows)?;
        println!("wrote attribution for {} subjects to {}", rows.len(), dir.display());
    }
    Ok(())
}

fn cmd_report(common: &Common) -> Result<()> {
    check_out_dir(&common.out)?;
    let rows = read_results_csv(&common.out.join("results.csv"))?;
    std::fs::write(common.out.join("report.md"), render_markdown(&rows))?;
    write_summary_csv(&common.out.join("summary.csv"), &rows)?;
    println!("wrote {} and {}", common.out.join("report.md").display(), common.out.join("summary.csv").display());
    Ok(())
}

/// Parse arguments from the process environment and run the selected verb.
pub fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate(c) => cmd_generate(c),
        Command::Split(c) => cmd_split(c),
        Command::Train(c) => cmd_train(c),
        Command::Evaluate(c) => cmd_evaluate(c),
        Command::Attribute(c) => cmd_attribute(c),
        Command::Report(c) => cmd_report(c),
    }
}

/// Map an error to the process exit code: 2 for configuration or format
/// problems, 1 for runtime failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Format(_) | Error::Unsupported(_) => 2,
        _ => 1,
    }
}
