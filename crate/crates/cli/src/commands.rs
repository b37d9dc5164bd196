use std::collections::BTreeMap;
use std::fmt::Write as _;

use forensic_transfer::data::{generate, load_manifest, merge_sources};
use forensic_transfer::eval::{evaluate, evaluate_set, export_scatter, mean_std, shot_accuracy, TargetSets};
use forensic_transfer::model::init_model;
use forensic_transfer::trainer::{finetune_on, train_source};
use forensic_transfer::{
    load_checkpoint, save_checkpoint, ArchConfig, CheckpointMeta, DatasetManifest, FewShotSpec,
    ModelParams, ResidualConfig, Split, SynthSpec, TrainConfig,
};

use crate::config::{ExperimentConfig, Variant};
use crate::error::{usage, CliError};
use crate::run_dir::RunDir;

pub fn gen_data(cfg: &ExperimentConfig, run: &RunDir) -> Result<(), CliError> {
    let manifest = generate(&cfg.data, &run.path)?;
    log::info!(
        "wrote {} images of {} to {}",
        manifest.entries.len(),
        cfg.data.manipulation,
        run.path.display()
    );
    Ok(())
}

fn load_sources(cfg: &ExperimentConfig) -> Result<DatasetManifest, CliError> {
    if cfg.paths.sources.is_empty() {
        return Err(usage("at least one --source manifest is required"));
    }
    let manifests = cfg
        .paths
        .sources
        .iter()
        .map(|p| load_manifest(p))
        .collect::<Result<Vec<_>, _>>()?;
    if manifests.len() == 1 {
        Ok(manifests.into_iter().next().expect("one manifest"))
    } else {
        Ok(merge_sources(&manifests)?)
    }
}

fn load_target(cfg: &ExperimentConfig) -> Result<DatasetManifest, CliError> {
    let path = cfg
        .paths
        .target
        .as_ref()
        .ok_or_else(|| usage("a --target manifest is required"))?;
    Ok(load_manifest(path)?)
}

fn load_source_checkpoint(cfg: &ExperimentConfig) -> Result<(ModelParams, CheckpointMeta), CliError> {
    let path = cfg
        .paths
        .checkpoint
        .as_ref()
        .ok_or_else(|| usage("a --checkpoint is required"))?;
    Ok(load_checkpoint(path)?)
}

fn checkpoint_meta(arch: &ArchConfig, tc: &TrainConfig, variant: Variant) -> CheckpointMeta {
    CheckpointMeta::new(arch.clone(), tc.loss.gamma, tc.residual)
        .with("variant", variant)
        .with("seed", tc.seed)
}

pub fn train(cfg: &ExperimentConfig, run: &RunDir) -> Result<(), CliError> {
    let data = load_sources(cfg)?;
    let tc = cfg.train_config();
    let mut model = init_model(&cfg.arch)?;
    let mut report = train_source(&mut model, &data, &tc)?;
    report.checkpoint = Some("model.ftck".into());
    let meta = checkpoint_meta(&cfg.arch, &tc, cfg.variant)
        .with("command", "train")
        .with("domains", data.domains().join(","))
        .with("best_epoch", report.best_epoch);
    save_checkpoint(&model, &meta, &run.file("model.ftck"))?;
    report.write_csv(&run.file("train_log.csv"))?;
    run.write("train_report.json", json(&report)?)?;
    let eval = evaluate(&model, &data, Split::Test, &tc.residual)?;
    log::info!("source test accuracy {:.4}", eval.accuracy);
    run.write("eval_test.json", eval.to_json()?)?;
    Ok(())
}

/// Fine-tuning recipe for a checkpoint: preprocessing always follows the
/// checkpoint so inputs match what the model was trained on.
fn finetune_config(cfg: &ExperimentConfig, residual: ResidualConfig) -> TrainConfig {
    let mut tc = cfg.train_config();
    if tc.residual != residual {
        log::warn!("using the checkpoint's preprocessing {residual:?}");
        tc.residual = residual;
    }
    tc
}

pub fn finetune(cfg: &ExperimentConfig, run: &RunDir) -> Result<(), CliError> {
    let (source, meta) = load_source_checkpoint(cfg)?;
    let target = load_target(cfg)?;
    source.ensure_arch_input(target.channels, target.size)?;
    let tc = finetune_config(cfg, meta.residual);
    let sets = TargetSets::load(&target, &tc.residual)?;

    let mut table = String::from("shots,run,seed,accuracy\n");
    let mut summary = String::from("shots,mean,std\n");
    for &shots in &cfg.shots {
        let mut accs = Vec::with_capacity(cfg.runs);
        for r in 0..cfg.runs {
            let seed = cfg.train.seed + r as u64;
            let run_tc = TrainConfig { seed, ..tc.clone() };
            let spec = FewShotSpec {
                shots,
                seed,
                ..cfg.few_shot.clone()
            };
            let mut model = source.clone();
            let report = finetune_on(&mut model, &sets.train, &sets.val, &spec, &run_tc)?;
            let eval = evaluate_set(&model, &sets.test)?;
            log::info!("shots {shots} run {r}: accuracy {:.4}", eval.accuracy);
            let tag = format!("k{shots}-r{r}");
            run.write(&format!("eval-{tag}.json"), eval.to_json()?)?;
            if shots > 0 {
                report.write_csv(&run.file(&format!("train-{tag}.csv")))?;
                let meta = CheckpointMeta {
                    provenance: BTreeMap::new(),
                    ..meta.clone()
                }
                .with("command", "finetune")
                .with("shots", shots)
                .with("seed", seed);
                save_checkpoint(&model, &meta, &run.file(&format!("model-{tag}.ftck")))?;
            }
            let _ = writeln!(table, "{shots},{r},{seed},{:.6}", eval.accuracy);
            accs.push(eval.accuracy);
        }
        let (mean, std) = mean_std(&accs);
        let _ = writeln!(summary, "{shots},{mean:.6},{std:.6}");
    }
    run.write("shots.csv", table)?;
    run.write("summary.csv", summary)?;
    Ok(())
}

pub fn eval(cfg: &ExperimentConfig, run: &RunDir) -> Result<(), CliError> {
    let (model, meta) = load_source_checkpoint(cfg)?;
    let target = load_target(cfg)?;
    let report = evaluate(&model, &target, cfg.split, &meta.residual)?;
    log::info!("{} accuracy {:.4}", cfg.split, report.accuracy);
    run.write("eval.json", report.to_json()?)?;
    export_scatter(&model, &target, cfg.split, &meta.residual, &run.file("scatter.csv"))?;
    Ok(())
}

/// Source and target corpora for an ablation, generated into the run
/// directory when a pairing is named.
fn ablation_data(cfg: &ExperimentConfig, run: &RunDir) -> Result<(DatasetManifest, DatasetManifest), CliError> {
    let Some(pair) = cfg.pair else {
        return Ok((load_sources(cfg)?, load_target(cfg)?));
    };
    let (src, tgt) = pair.manipulations();
    let source = SynthSpec {
        manipulation: src,
        ..cfg.data.clone()
    };
    let target = SynthSpec {
        manipulation: tgt,
        n_per_class: cfg.target_per_class,
        seed: cfg.data.seed + 1,
        ..cfg.data.clone()
    };
    Ok((
        generate(&source, &run.file("data/source"))?,
        generate(&target, &run.file("data/target"))?,
    ))
}

struct Corpora<'a> {
    source: &'a DatasetManifest,
    target: &'a DatasetManifest,
}

impl Corpora<'_> {
    /// Trains one source model and returns its accuracy at every shot count.
    fn run(&self, arch: &ArchConfig, tc: &TrainConfig, shots: &[usize]) -> Result<Vec<f64>, CliError> {
        let mut model = init_model(arch)?;
        train_source(&mut model, self.source, tc)?;
        let sets = TargetSets::load(self.target, &tc.residual)?;
        shots
            .iter()
            .map(|&k| Ok(shot_accuracy(&model, &sets, k, tc.seed, tc)?))
            .collect()
    }
}

pub fn ablate(cfg: &ExperimentConfig, run: &RunDir) -> Result<(), CliError> {
    let (source, target) = ablation_data(cfg, run)?;
    ensure_same_input(&source, &target)?;
    let corpora = Corpora {
        source: &source,
        target: &target,
    };

    let mut table = String::from("variant,shots,run,seed,accuracy\n");
    let mut summary = String::from("variant,shots,mean,std\n");
    for variant in cfg.ablate_variants() {
        let mut accs = vec![Vec::new(); cfg.shots.len()];
        for r in 0..cfg.runs {
            let seed = cfg.train.seed + r as u64;
            let tc = TrainConfig {
                seed,
                ..variant.apply(&cfg.train)
            };
            let arch = ArchConfig { seed, ..cfg.arch.clone() };
            let row = corpora.run(&arch, &tc, &cfg.shots)?;
            for (i, (&k, &acc)) in cfg.shots.iter().zip(&row).enumerate() {
                log::info!("{variant} run {r} shots {k}: accuracy {acc:.4}");
                let _ = writeln!(table, "{variant},{k},{r},{seed},{acc:.6}");
                accs[i].push(acc);
            }
        }
        for (&k, a) in cfg.shots.iter().zip(&accs) {
            let (mean, std) = mean_std(a);
            let _ = writeln!(summary, "{variant},{k},{mean:.6},{std:.6}");
        }
    }
    run.write("ablation.csv", table)?;
    run.write("summary.csv", summary)?;

    if !cfg.latent_sweep.is_empty() {
        let mut table = String::from("latent,shots,run,seed,accuracy\n");
        for &latent in &cfg.latent_sweep {
            let mut sized = cfg.clone();
            sized.set_latent(latent);
            for r in 0..cfg.runs {
                let seed = cfg.train.seed + r as u64;
                let tc = TrainConfig { seed, ..cfg.train.clone() };
                let arch = ArchConfig { seed, ..sized.arch.clone() };
                let row = corpora.run(&arch, &tc, &cfg.shots)?;
                for (&k, acc) in cfg.shots.iter().zip(row) {
                    log::info!("latent {latent} run {r} shots {k}: accuracy {acc:.4}");
                    let _ = writeln!(table, "{latent},{k},{r},{seed},{acc:.6}");
                }
            }
        }
        run.write("latent.csv", table)?;
    }
    Ok(())
}

fn ensure_same_input(source: &DatasetManifest, target: &DatasetManifest) -> Result<(), CliError> {
    if (source.size, source.channels) != (target.size, target.channels) {
        return Err(usage(format!(
            "source images are {}x{}x{} but target images are {}x{}x{}",
            source.channels, source.size, source.size, target.channels, target.size, target.size
        )));
    }
    Ok(())
}

fn json<T: serde::Serialize>(value: &T) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(value).map_err(forensic_transfer::Error::from)? + "\n")
}
