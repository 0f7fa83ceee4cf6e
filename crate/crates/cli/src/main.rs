//! Command-line pipelines: fit -> synth -> train -> attack -> eval ->
//! defend, with persisted run directories and deterministic configs.

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::path::{Path, PathBuf};

use xraykit::attack::{
    run_baseline, AttackConfig, AttackResult, Baseline, PlacementStrategy,
};
use xraykit::defense::{
    adversarial_train, augment_manifest, eval_adv_detector, pgd_adversarial_train,
    train_adv_detector, AdvTrainParams, AugmentSpec,
};
use xraykit::detector::{
    train_detector, DetectorConfig, LossMode, ToyDetector, TrainParams,
};
use xraykit::error::Error as CoreError;
use xraykit::metrics::{evaluate_detector, plot_histograms, EvalReport, PerturbMode};
use xraykit::physics::{fit_converter, load_samples, FitQuality, MaterialId, MaterialModel};
use xraykit::placement::ReinforceConfig;
use xraykit::scene::{
    generate_scene, load_manifest, place_objects, save_annotations, save_image, save_manifest,
    Dataset, DatasetManifest, ManifestEntry, SceneSpec, Split,
};

const DATASET_ROOT_ENV: &str = "XRAYKIT_DATASET_ROOT";

#[derive(Parser)]
#[command(name = "xraykit", version, about = "X-ray security imaging toolkit")]
struct Cli {
    /// Output directory for run artifacts and the config snapshot.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Worker threads for parallel sections (0 = core count).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a depth-to-color converter from calibration samples.
    Fit(FitArgs),
    /// Generate synthetic luggage scenes and a dataset manifest.
    Synth(SynthArgs),
    /// Train the toy detector on a manifest.
    Train(TrainArgs),
    /// Run an attack (or baseline) against a trained detector.
    Attack(AttackArgs),
    /// Evaluate a detector on clean, attacked, or perturbed data.
    Eval(EvalArgs),
    /// Countermeasures: augment, advdetect, advtrain, pgdtrain.
    Defend(DefendArgs),
    /// Export meshes as printable binary STL.
    ExportStl(ExportStlArgs),
    /// Check assertions over saved evaluation reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Calibration CSV: depth_mm,c1,c2,c3 with a one-line header.
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, default_value = "iron")]
    material: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    canvas: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// 160 px canvas and small clutter counts.
    #[arg(long)]
    mini: bool,
    /// Build a severity-graded test set (layouts x severities 0..=4) using
    /// meshes from this attack result directory (vanilla objects if absent).
    #[arg(long)]
    severity_from: Option<PathBuf>,
    /// Number of layouts for the severity set.
    #[arg(long)]
    layouts: Option<usize>,
    /// Emit severity levels 0..=4 per layout instead of plain scenes.
    #[arg(long)]
    severity_set: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use the 160 px detector configuration.
    #[arg(long)]
    mini: bool,
    /// Trunk widths, comma separated.
    #[arg(long)]
    channels: Option<String>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    detector: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "xadv")]
    baseline: String,
    #[arg(long, default_value = "reinforce")]
    placement: String,
    #[arg(long, default_value = "untargeted")]
    mode: String,
    #[arg(long, default_value = "iron")]
    material: String,
    #[arg(long)]
    num_objects: Option<usize>,
    #[arg(long)]
    footprint: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_share: Option<usize>,
    #[arg(long)]
    z_max: Option<f64>,
    #[arg(long)]
    reinforce_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep total object area constant as the count changes.
    #[arg(long)]
    constant_total_area: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detector: PathBuf,
    /// Clean dataset manifest (also supplies scenes for --perturb).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Attack result directory (evaluates its composited images).
    #[arg(long)]
    attack_dir: Option<PathBuf>,
    /// Placement perturbation: best | change | random.
    #[arg(long)]
    perturb: Option<String>,
    /// Restrict to manifest entries of this severity (0..=4).
    #[arg(long)]
    severity: Option<u8>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Also render TP/FP confidence histograms as PNG.
    #[arg(long)]
    plot: bool,
    #[arg(long, default_value = "eval")]
    setting: String,
}

#[derive(Args)]
struct DefendArgs {
    /// augment | advdetect | advtrain | pgdtrain
    #[arg(long)]
    mode: String,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    detector: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Attack result directory with adversarial images (advdetect).
    #[arg(long)]
    adv_dir: Option<PathBuf>,
    /// Second attack directory evaluated cross-generator (advdetect).
    #[arg(long)]
    cross_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    num_objects: Option<usize>,
    #[arg(long)]
    footprint: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct ExportStlArgs {
    /// One OBJ-subset mesh file.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Attack result directory: exports every object_*.obj.
    #[arg(long)]
    attack_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Assertion spec JSON: named reports plus comparisons over them.
    #[arg(long)]
    spec: PathBuf,
}

/// Assertion failure in `report`, mapped to exit code 4.
#[derive(Debug)]
struct AssertionFailure(String);

impl std::fmt::Display for AssertionFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "assertion failed: {}", self.0)
    }
}

impl std::error::Error for AssertionFailure {}

fn main() {
    let cli = Cli::parse();
    let _ = xraykit::exec::configure_workers(cli.workers);
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<AssertionFailure>().is_some() {
        return 4;
    }
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::MissingArtifact(_)) => 3,
        Some(
            CoreError::InsufficientData(_)
            | CoreError::Domain(_)
            | CoreError::Parse { .. }
            | CoreError::Validation(_),
        ) => 2,
        _ => 1,
    }
}

/// Resolves a path against XRAYKIT_DATASET_ROOT when relative and not found
/// as given.
fn resolve(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Ok(root) = std::env::var(DATASET_ROOT_ENV) {
            let candidate = Path::new(&root).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

/// Loads the optional config file as a flat JSON object.
fn load_config(path: &Option<PathBuf>) -> anyhow::Result<serde_json::Value> {
    match path {
        None => Ok(json!({})),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

/// Flag value, then config-file value, then default.
fn pick<T: serde::de::DeserializeOwned>(
    flag: Option<T>,
    cfg: &serde_json::Value,
    key: &str,
    default: T,
) -> T {
    if let Some(v) = flag {
        return v;
    }
    cfg.get(key)
        .cloned()
        .and_then(|v| serde_json::from_value(v).ok())
        .unwrap_or(default)
}

fn write_snapshot(run_dir: &Path, command: &str, resolved: serde_json::Value) -> anyhow::Result<()> {
    std::fs::create_dir_all(run_dir)?;
    let snapshot = json!({
        "tool": "xraykit",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "params": resolved,
    });
    std::fs::write(
        run_dir.join("config_snapshot.json"),
        serde_json::to_string_pretty(&snapshot)? + "\n",
    )?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli.config)?;
    match cli.command {
        Command::Fit(args) => cmd_fit(args, &cli.run_dir),
        Command::Synth(args) => cmd_synth(args, &cfg, &cli.run_dir),
        Command::Train(args) => cmd_train(args, &cfg, &cli.run_dir),
        Command::Attack(args) => cmd_attack(args, &cfg, &cli.run_dir),
        Command::Eval(args) => cmd_eval(args, &cfg, &cli.run_dir),
        Command::Defend(args) => cmd_defend(args, &cfg, &cli.run_dir),
        Command::ExportStl(args) => cmd_export_stl(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_fit(args: FitArgs, run_dir: &Option<PathBuf>) -> anyhow::Result<()> {
    let samples_path = resolve(&args.samples);
    let samples = load_samples(&samples_path)?;
    let material: MaterialId = args.material.parse()?;
    let model = fit_converter(&samples, material)?;
    model.save(&args.out)?;
    println!("fitted {} from {} samples", args.material, samples.len());
    println!("{:<12} {:>10} {:>10} {:>10} {:>10}", "channel", "a", "b", "q", "R^2");
    for (name, law, quality) in [
        ("hue", &model.channel_laws[0], &model.fit_quality[0]),
        ("saturation", &model.channel_laws[1], &model.fit_quality[1]),
        ("value", &model.channel_laws[2], &model.fit_quality[2]),
    ] {
        let r2 = match quality {
            FitQuality::Constant => "constant".to_string(),
            FitQuality::RSquared(v) => format!("{v:.4}"),
        };
        println!("{:<12} {:>10.5} {:>10.5} {:>10.5} {:>10}", name, law.a, law.b, law.q, r2);
    }
    if let Some(dir) = run_dir {
        write_snapshot(
            dir,
            "fit",
            json!({"samples": samples_path, "material": args.material, "out": args.out}),
        )?;
    }
    Ok(())
}

/// Reads meshes `object_*.obj` from an attack directory.
fn load_attack_meshes(dir: &Path) -> anyhow::Result<Vec<xraykit::geometry::Mesh>> {
    let mut meshes = Vec::new();
    let mut idx = 0;
    loop {
        let path = dir.join(format!("object_{idx}.obj"));
        if !path.exists() {
            break;
        }
        meshes.push(xraykit::geometry::load_mesh(&path)?);
        idx += 1;
    }
    if meshes.is_empty() {
        return Err(CoreError::MissingArtifact(dir.join("object_0.obj")).into());
    }
    Ok(meshes)
}

fn cmd_synth(args: SynthArgs, cfg: &serde_json::Value, run_dir: &Option<PathBuf>) -> anyhow::Result<()> {
    let split: Split = args.split.parse()?;
    let mut spec = if args.mini { SceneSpec::mini() } else { SceneSpec::default() };
    let canvas = pick(args.canvas, cfg, "canvas", 0usize);
    if canvas > 0 {
        spec.canvas = canvas;
    }
    let seed = pick(args.seed, cfg, "seed", 0u64);
    let count = pick(args.count, cfg, "count", if args.mini { 200 } else { 500 });

    let out_dir = &args.out_dir;
    std::fs::create_dir_all(out_dir)?;

    let mut entries = Vec::new();
    if args.severity_set {
        // XAD-style layout: per layout, severities 0..=4 with 0..=4 placed
        // objects.
        let layouts = pick(args.layouts, cfg, "layouts", 30usize);
        let attack_cfg = AttackConfig::default();
        let meshes = match &args.severity_from {
            Some(dir) => load_attack_meshes(&resolve(dir))?,
            None => (0..4).map(|_| attack_cfg.initial_mesh()).collect(),
        };
        let material = attack_cfg.material_model()?;
        for layout in 0..layouts {
            let scene = generate_scene(&spec, seed + layout as u64)?;
            let footprint = attack_cfg.effective_footprint();
            let region = xraykit::placement::build_region(
                &scene.annotations[0],
                footprint,
                scene.size(),
                attack_cfg.n_grid,
                attack_cfg.margin(),
            )?;
            let corners = xraykit::placement::place_fix(&region, scene.size(), 4);
            for severity in 0..=4usize {
                let image = place_objects(
                    &scene,
                    &meshes[..severity],
                    &corners[..severity],
                    &material,
                )?;
                let image_name = format!("layout_{layout:04}_s{severity}.png");
                let ann_name = format!("layout_{layout:04}_s{severity}.json");
                save_image(&image, &out_dir.join(&image_name))?;
                save_annotations(&scene.annotations, &out_dir.join(&ann_name))?;
                entries.push(ManifestEntry {
                    image: image_name.into(),
                    annotation: ann_name.into(),
                    severity: severity as u8,
                });
            }
        }
    } else {
        for i in 0..count {
            let scene = generate_scene(&spec, seed + i as u64)?;
            let image_name = format!("scene_{i:04}.png");
            let ann_name = format!("scene_{i:04}.json");
            save_image(&scene.base_image, &out_dir.join(&image_name))?;
            save_annotations(&scene.annotations, &out_dir.join(&ann_name))?;
            entries.push(ManifestEntry {
                image: image_name.into(),
                annotation: ann_name.into(),
                severity: 0,
            });
        }
    }
    let manifest = DatasetManifest {
        split,
        class_names: spec.class_names.clone(),
        entries,
        root: out_dir.clone(),
    };
    let manifest_path = out_dir.join("manifest.txt");
    save_manifest(&manifest, &manifest_path)?;
    println!(
        "wrote {} entries to {}",
        manifest.entries.len(),
        manifest_path.display()
    );
    if let Some(dir) = run_dir {
        write_snapshot(
            dir,
            "synth",
            json!({"out_dir": out_dir, "split": args.split, "count": count, "seed": seed,
                   "canvas": spec.canvas, "severity_set": args.severity_set}),
        )?;
    }
    Ok(())
}

fn load_dataset(manifest_path: &Path) -> anyhow::Result<(Dataset, DatasetManifest)> {
    let path = resolve(manifest_path);
    let loaded = load_manifest(&path)?;
    for warning in &loaded.warnings {
        eprintln!("warning: {warning}");
    }
    let dataset = Dataset::from_manifest(&loaded.manifest)?;
    Ok((dataset, loaded.manifest))
}

fn detector_config_from(args: &TrainArgs, dataset: &Dataset, input_size: usize) -> DetectorConfig {
    let mut config = DetectorConfig {
        input_size,
        num_classes: dataset.class_names.len() + 1,
        ..DetectorConfig::default()
    };
    if let Some(ch) = &args.channels {
        config.channels = ch
            .split(',')
            .filter_map(|c| c.trim().parse().ok())
            .collect();
    }
    config
}

fn cmd_train(args: TrainArgs, cfg: &serde_json::Value, run_dir: &Option<PathBuf>) -> anyhow::Result<()> {
    let (dataset, _) = load_dataset(&args.manifest)?;
    if dataset.is_empty() {
        return Err(CoreError::InsufficientData("empty training manifest".into()).into());
    }
    let input_size = dataset.images[0].dim().1;
    let config = detector_config_from(&args, &dataset, input_size);
    let params = TrainParams {
        epochs: pick(args.epochs, cfg, "epochs", 30),
        batch_size: pick(args.batch_size, cfg, "batch_size", 8),
        lr: pick(args.lr, cfg, "lr", 0.02),
        ..TrainParams::default()
    };
    let seed = pick(args.seed, cfg, "seed", 0u64);
    let started = std::time::Instant::now();
    let (detector, log) = train_detector(&dataset, &config, &params, seed)?;
    detector.save(&args.out)?;
    let final_map = log.map_curve.last().map(|(_, m)| *m).unwrap_or(0.0);
    println!(
        "trained {} epochs on {} images in {:.1}s; train-subset mAP {:.2}",
        params.epochs,
        dataset.len(),
        started.elapsed().as_secs_f64(),
        final_map
    );
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("train_log.json"), serde_json::to_string_pretty(&log)? + "\n")?;
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&json!({
                "train_subset_map": final_map,
                "epochs": params.epochs,
                "images": dataset.len(),
            }))? + "\n",
        )?;
        write_snapshot(
            dir,
            "train",
            json!({"manifest": args.manifest, "out": args.out, "epochs": params.epochs,
                   "batch_size": params.batch_size, "lr": params.lr, "seed": seed,
                   "config": config}),
        )?;
    }
    Ok(())
}

fn attack_config_from(args: &AttackArgs, cfg: &serde_json::Value) -> anyhow::Result<AttackConfig> {
    let mode = match args.mode.as_str() {
        "untargeted" => LossMode::Untargeted,
        "targeted" | "targeted_background" => LossMode::TargetedBackground,
        other => return Err(CoreError::Validation(format!("unknown mode {other:?}")).into()),
    };
    let mut attack_cfg = AttackConfig {
        lr: pick(args.lr, cfg, "attack_lr", 0.1),
        iterations: pick(args.iterations, cfg, "iterations", 24),
        beta: pick(args.beta, cfg, "beta", 0.1),
        num_objects: pick(args.num_objects, cfg, "num_objects", 4),
        footprint: pick(args.footprint, cfg, "footprint", 20),
        material: args.material.parse()?,
        mode,
        batch_share: pick(args.batch_share, cfg, "batch_share", 10),
        z_max: pick(args.z_max, cfg, "z_max", 8.0),
        constant_total_area: args.constant_total_area,
        ..AttackConfig::default()
    };
    attack_cfg.reinforce = ReinforceConfig {
        n_iters: pick(args.reinforce_iters, cfg, "reinforce_iters", 200),
        ..ReinforceConfig::default()
    };
    Ok(attack_cfg)
}

fn cmd_attack(args: AttackArgs, cfg: &serde_json::Value, run_dir: &Option<PathBuf>) -> anyhow::Result<()> {
    let (dataset, _) = load_dataset(&args.manifest)?;
    let detector = ToyDetector::load(&resolve(&args.detector))?;
    let attack_cfg = attack_config_from(&args, cfg)?;
    let baseline: Baseline = args.baseline.parse()?;
    let placement: PlacementStrategy = args.placement.parse()?;
    let seed = pick(args.seed, cfg, "seed", 0u64);

    let scenes = dataset.to_scenes();
    let started = std::time::Instant::now();
    let results = match baseline {
        Baseline::XAdv => xraykit::attack::run_attack(&scenes, &detector, &attack_cfg, placement, seed)?,
        other => run_baseline(&scenes, &detector, &attack_cfg, other, seed)?,
    };
    std::fs::create_dir_all(&args.out_dir)?;
    let mut attacked_images = Vec::new();
    let mut offset = 0usize;
    for (gi, result) in results.iter().enumerate() {
        let group_dir = args.out_dir.join(format!("group_{gi:02}"));
        result.save(&group_dir, &scenes[offset..offset + result.images.len()])?;
        attacked_images.extend(result.images.iter().cloned());
        offset += result.images.len();
    }
    let annotations: Vec<_> = dataset.annotations.clone();
    let clean = evaluate_detector(&detector, &dataset.images, &annotations, "clean")?;
    let attacked = evaluate_detector(&detector, &attacked_images, &annotations, &args.baseline)?;
    println!("{}", clean.to_table());
    println!("{}", attacked.to_table());
    println!(
        "attack finished in {:.1}s: clean mAP {:.2} -> attacked mAP {:.2} (fn {} -> {})",
        started.elapsed().as_secs_f64(),
        clean.map,
        attacked.map,
        clean.fn_count,
        attacked.fn_count
    );
    clean.save(&args.out_dir.join("clean_report.json"))?;
    attacked.save(&args.out_dir.join("attack_report.json"))?;
    let summary = json!({
        "baseline": args.baseline,
        "placement": args.placement,
        "mode": args.mode,
        "material": args.material,
        "clean_map": clean.map,
        "attack_map": attacked.map,
        "clean_fn": clean.fn_count,
        "attack_fn": attacked.fn_count,
        "groups": results.len(),
        "attack_config": attack_cfg,
        "seed": seed,
    });
    std::fs::write(
        args.out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    if let Some(dir) = run_dir {
        write_snapshot(dir, "attack", summary)?;
    }
    Ok(())
}

/// Rebuilds enough of an attack result from a saved group directory to
/// re-composite placements.
fn reload_attack_group(
    group_dir: &Path,
    material: MaterialModel,
) -> anyhow::Result<AttackResult> {
    let meshes = load_attack_meshes(group_dir)?;
    let locations = xraykit::attack::load_locations(&group_dir.join("locations.csv"))?;
    let (images, _) = xraykit::attack::load_attacked_dataset(group_dir)?;
    Ok(AttackResult {
        mesh_ori: meshes[0].clone(),
        meshes,
        patches: None,
        locations,
        loss_trace: Vec::new(),
        images,
        perceptual: 0.0,
        material,
        pixel_pitch: 1.0,
        mode: LossMode::Untargeted,
    })
}

fn cmd_eval(args: EvalArgs, cfg: &serde_json::Value, run_dir: &Option<PathBuf>) -> anyhow::Result<()> {
    let detector = ToyDetector::load(&resolve(&args.detector))?;
    let seed = pick(args.seed, cfg, "seed", 0u64);

    let report = if let Some(perturb) = &args.perturb {
        let mode: PerturbMode = perturb.parse()?;
        let attack_dir = args
            .attack_dir
            .as_ref()
            .ok_or_else(|| anyhow!("--perturb requires --attack-dir"))?;
        let manifest = args
            .manifest
            .as_ref()
            .ok_or_else(|| anyhow!("--perturb requires --manifest for the clean scenes"))?;
        let (dataset, _) = load_dataset(manifest)?;
        let scenes = dataset.to_scenes();
        let summary_path = resolve(attack_dir).join("summary.json");
        let material = attack_material(&summary_path)?;
        let mut offset = 0usize;
        let mut all_images = Vec::new();
        let mut all_annotations = Vec::new();
        let mut gi = 0;
        loop {
            let group_dir = resolve(attack_dir).join(format!("group_{gi:02}"));
            if !group_dir.exists() {
                break;
            }
            let result = reload_attack_group(&group_dir, material.clone())?;
            let n = result.locations.len();
            let group_scenes = &scenes[offset..offset + n];
            let images =
                xraykit::metrics::perturbed_images(&result, group_scenes, mode, seed)?;
            all_images.extend(images);
            all_annotations.extend(group_scenes.iter().map(|s| s.annotations.clone()));
            offset += n;
            gi += 1;
        }
        if gi == 0 {
            return Err(CoreError::MissingArtifact(resolve(attack_dir).join("group_00")).into());
        }
        let mut report =
            evaluate_detector(&detector, &all_images, &all_annotations, &args.setting)?;
        report.setting = format!("{} perturb-{perturb}", args.setting);
        report
    } else if let Some(attack_dir) = &args.attack_dir {
        let mut images = Vec::new();
        let mut annotations = Vec::new();
        let mut gi = 0;
        loop {
            let group_dir = resolve(attack_dir).join(format!("group_{gi:02}"));
            if !group_dir.exists() {
                break;
            }
            let (imgs, anns) = xraykit::attack::load_attacked_dataset(&group_dir)?;
            images.extend(imgs);
            annotations.extend(anns);
            gi += 1;
        }
        if gi == 0 {
            return Err(CoreError::MissingArtifact(resolve(attack_dir).join("group_00")).into());
        }
        evaluate_detector(&detector, &images, &annotations, &args.setting)?
    } else {
        let manifest = args
            .manifest
            .as_ref()
            .ok_or_else(|| anyhow!("--manifest or --attack-dir is required"))?;
        let (dataset, _) = load_dataset(manifest)?;
        let (images, annotations): (Vec<_>, Vec<_>) = match args.severity {
            None => (dataset.images.clone(), dataset.annotations.clone()),
            Some(level) => {
                let idx: Vec<usize> = (0..dataset.len())
                    .filter(|&i| dataset.severities[i] == level)
                    .collect();
                if idx.is_empty() {
                    return Err(CoreError::Validation(format!(
                        "no manifest entries with severity {level}"
                    ))
                    .into());
                }
                (
                    idx.iter().map(|&i| dataset.images[i].clone()).collect(),
                    idx.iter().map(|&i| dataset.annotations[i].clone()).collect(),
                )
            }
        };
        let setting = match args.severity {
            Some(level) => format!("{} severity-{level}", args.setting),
            None => args.setting.clone(),
        };
        evaluate_detector(&detector, &images, &annotations, &setting)?
    };

    print!("{}", report.to_table());
    report.save(&args.out)?;
    std::fs::write(
        args.out.with_extension("txt"),
        report.to_table(),
    )?;
    if args.plot {
        plot_histograms(&report, &args.out.with_extension("png"))?;
    }
    if let Some(dir) = run_dir {
        write_snapshot(
            dir,
            "eval",
            json!({"detector": args.detector, "out": args.out, "setting": report.setting,
                   "map": report.map, "fn": report.fn_count, "seed": seed}),
        )?;
    }
    Ok(())
}

fn attack_material(summary_path: &Path) -> anyhow::Result<MaterialModel> {
    if summary_path.exists() {
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(summary_path)?)?;
        if let Some(name) = summary["material"].as_str() {
            let id: MaterialId = name.parse()?;
            if let Some(model) = MaterialModel::builtin(&id) {
                return Ok(model);
            }
        }
    }
    Ok(MaterialModel::iron())
}

fn cmd_defend(args: DefendArgs, cfg: &serde_json::Value, run_dir: &Option<PathBuf>) -> anyhow::Result<()> {
    let seed = pick(args.seed, cfg, "seed", 0u64);
    match args.mode.as_str() {
        "augment" => {
            let manifest_path = args.manifest.as_ref().ok_or_else(|| anyhow!("--manifest required"))?;
            let out_dir = args.out_dir.as_ref().ok_or_else(|| anyhow!("--out-dir required"))?;
            let loaded = load_manifest(&resolve(manifest_path))?;
            let spec = AugmentSpec {
                patch_size: pick(args.patch_size, cfg, "patch_size", 20),
                ..AugmentSpec::default()
            };
            let path = augment_manifest(&loaded.manifest, &spec, seed, out_dir)?;
            println!("augmented manifest at {}", path.display());
            if let Some(dir) = run_dir {
                write_snapshot(dir, "defend-augment", json!({"manifest": manifest_path, "out": path, "seed": seed}))?;
            }
        }
        "advdetect" => {
            let manifest_path = args.manifest.as_ref().ok_or_else(|| anyhow!("--manifest required"))?;
            let adv_dir = args.adv_dir.as_ref().ok_or_else(|| anyhow!("--adv-dir required"))?;
            let (dataset, _) = load_dataset(manifest_path)?;
            let mut adv_images = Vec::new();
            let mut gi = 0;
            loop {
                let group_dir = resolve(adv_dir).join(format!("group_{gi:02}"));
                if !group_dir.exists() {
                    break;
                }
                let (imgs, _) = xraykit::attack::load_attacked_dataset(&group_dir)?;
                adv_images.extend(imgs);
                gi += 1;
            }
            if adv_images.is_empty() {
                return Err(CoreError::MissingArtifact(resolve(adv_dir).join("group_00")).into());
            }
            // Disjoint halves: train on the first half, test on the second.
            let half_clean = dataset.images.len() / 2;
            let half_adv = adv_images.len() / 2;
            let model = train_adv_detector(
                &dataset.images[..half_clean.max(1)],
                &adv_images[..half_adv.max(1)],
                seed,
            )?;
            let mut test_images = Vec::new();
            let mut labels = Vec::new();
            for img in &dataset.images[half_clean..] {
                test_images.push(img.clone());
                labels.push(false);
            }
            for img in &adv_images[half_adv..] {
                test_images.push(img.clone());
                labels.push(true);
            }
            let (acc, auc) = eval_adv_detector(&model, &test_images, &labels);
            println!("adversarial detection: ACC {:.4} AUC {:.4}", acc, auc);
            let mut summary = json!({"acc": acc, "auc": auc, "seed": seed});
            if let Some(cross_dir) = &args.cross_dir {
                let mut cross_images = Vec::new();
                let mut gi = 0;
                loop {
                    let group_dir = resolve(cross_dir).join(format!("group_{gi:02}"));
                    if !group_dir.exists() {
                        break;
                    }
                    let (imgs, _) = xraykit::attack::load_attacked_dataset(&group_dir)?;
                    cross_images.extend(imgs);
                    gi += 1;
                }
                let mut cross_test = Vec::new();
                let mut cross_labels = Vec::new();
                for img in &dataset.images[half_clean..] {
                    cross_test.push(img.clone());
                    cross_labels.push(false);
                }
                for img in &cross_images {
                    cross_test.push(img.clone());
                    cross_labels.push(true);
                }
                let (cacc, cauc) = eval_adv_detector(&model, &cross_test, &cross_labels);
                println!("cross-generator: ACC {:.4} AUC {:.4}", cacc, cauc);
                summary["cross_acc"] = json!(cacc);
                summary["cross_auc"] = json!(cauc);
            }
            if let Some(out) = &args.out {
                model.save(out)?;
            }
            if let Some(dir) = run_dir {
                std::fs::create_dir_all(dir)?;
                std::fs::write(
                    dir.join("summary.json"),
                    serde_json::to_string_pretty(&summary)? + "\n",
                )?;
                write_snapshot(dir, "defend-advdetect", summary)?;
            }
        }
        "advtrain" | "pgdtrain" => {
            let manifest_path = args.manifest.as_ref().ok_or_else(|| anyhow!("--manifest required"))?;
            let detector_path = args.detector.as_ref().ok_or_else(|| anyhow!("--detector required"))?;
            let out = args.out.as_ref().ok_or_else(|| anyhow!("--out required"))?;
            let (dataset, _) = load_dataset(manifest_path)?;
            let base = ToyDetector::load(&resolve(detector_path))?;
            let epochs = pick(args.epochs, cfg, "defense_epochs", 4);
            let hardened = if args.mode == "advtrain" {
                let attack_cfg = AttackConfig {
                    iterations: pick(args.iterations, cfg, "iterations", 8),
                    num_objects: pick(args.num_objects, cfg, "num_objects", 4),
                    footprint: pick(args.footprint, cfg, "footprint", 20),
                    ..AttackConfig::default()
                };
                let hardened = adversarial_train(
                    &dataset,
                    &base,
                    &attack_cfg,
                    &AdvTrainParams::default(),
                    epochs,
                    seed,
                )?;
                let cfg_hash = format!("{:08x}", {
                    use std::hash::{Hash, Hasher};
                    let mut h = std::collections::hash_map::DefaultHasher::new();
                    serde_json::to_string(&attack_cfg)?.hash(&mut h);
                    h.finish() as u32
                });
                hardened.save_with_provenance(
                    out,
                    json!({"defense": "advtrain", "seed": seed, "epochs": epochs,
                           "attack_config_hash": cfg_hash}),
                )?;
                hardened
            } else {
                let epsilon = pick(args.epsilon, cfg, "epsilon", 8.0 / 255.0);
                let steps = pick(args.steps, cfg, "steps", 10);
                let hardened = pgd_adversarial_train(
                    &dataset,
                    &base,
                    epsilon,
                    steps,
                    &AdvTrainParams::default(),
                    epochs,
                    seed,
                )?;
                hardened.save_with_provenance(
                    out,
                    json!({"defense": "pgdtrain", "seed": seed, "epochs": epochs,
                           "epsilon": epsilon, "steps": steps}),
                )?;
                hardened
            };
            let report = evaluate_detector(
                &hardened,
                &dataset.images,
                &dataset.annotations,
                &format!("{} clean", args.mode),
            )?;
            println!("hardened detector clean mAP {:.2}", report.map);
            if let Some(dir) = run_dir {
                write_snapshot(
                    dir,
                    "defend",
                    json!({"mode": args.mode, "out": out, "epochs": epochs,
                           "clean_map": report.map, "seed": seed}),
                )?;
            }
        }
        other => return Err(CoreError::Validation(format!("unknown defend mode {other:?}")).into()),
    }
    Ok(())
}

fn cmd_export_stl(args: ExportStlArgs) -> anyhow::Result<()> {
    match (&args.mesh, &args.attack_dir) {
        (Some(mesh_path), None) => {
            let out = args.out.ok_or_else(|| anyhow!("--out required with --mesh"))?;
            let mesh = xraykit::geometry::load_mesh(&resolve(mesh_path))?;
            xraykit::geometry::export_stl(&mesh, &out)?;
            println!("exported {} facets to {}", mesh.faces().len(), out.display());
        }
        (None, Some(dir)) => {
            let out_dir = args.out_dir.ok_or_else(|| anyhow!("--out-dir required with --attack-dir"))?;
            std::fs::create_dir_all(&out_dir)?;
            let meshes = load_attack_meshes(&resolve(dir))?;
            for (i, mesh) in meshes.iter().enumerate() {
                let out = out_dir.join(format!("object_{i}.stl"));
                xraykit::geometry::export_stl(mesh, &out)?;
                println!("exported {} facets to {}", mesh.faces().len(), out.display());
            }
        }
        _ => return Err(anyhow!("pass exactly one of --mesh or --attack-dir")),
    }
    Ok(())
}

fn report_field(reports: &serde_json::Map<String, serde_json::Value>, expr: &str) -> anyhow::Result<f64> {
    if let Ok(v) = expr.parse::<f64>() {
        return Ok(v);
    }
    let (name, field) = expr
        .split_once('.')
        .ok_or_else(|| anyhow!("field reference {expr:?} must be <report>.<field> or a number"))?;
    let report = reports
        .get(name)
        .ok_or_else(|| anyhow!("unknown report {name:?}"))?;
    report
        .get(field)
        .and_then(serde_json::Value::as_f64)
        .ok_or_else(|| anyhow!("report {name:?} has no numeric field {field:?}"))
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let spec: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(resolve(&args.spec))?)?;
    let mut reports = serde_json::Map::new();
    if let Some(map) = spec["reports"].as_object() {
        for (name, path) in map {
            let path = PathBuf::from(path.as_str().ok_or_else(|| anyhow!("report path must be a string"))?);
            let resolved = resolve(&path);
            if !resolved.exists() {
                return Err(CoreError::MissingArtifact(resolved).into());
            }
            let report = EvalReport::load(&resolved)?;
            reports.insert(name.clone(), serde_json::to_value(&report)?);
        }
    }
    let assertions = spec["assertions"]
        .as_array()
        .ok_or_else(|| anyhow!("spec needs an assertions array"))?;
    let mut failures = Vec::new();
    for (i, assertion) in assertions.iter().enumerate() {
        let left_expr = assertion["left"].as_str().unwrap_or_default();
        let right_expr = assertion["right"].as_str().map(str::to_string).unwrap_or_else(|| {
            assertion["right"].as_f64().map(|v| v.to_string()).unwrap_or_default()
        });
        let op = assertion["op"].as_str().unwrap_or("<=");
        let offset = assertion["offset"].as_f64().unwrap_or(0.0);
        let label = assertion["label"].as_str().unwrap_or(left_expr);
        let left = report_field(&reports, left_expr)?;
        let right = report_field(&reports, &right_expr)? + offset;
        let ok = match op {
            "<=" => left <= right,
            "<" => left < right,
            ">=" => left >= right,
            ">" => left > right,
            "==" => (left - right).abs() < 1e-9,
            other => return Err(anyhow!("unknown op {other:?} in assertion {i}")),
        };
        println!(
            "{}: {} ({left:.4} {op} {right:.4})",
            if ok { "PASS" } else { "FAIL" },
            label
        );
        if !ok {
            failures.push(label.to_string());
        }
    }
    if !failures.is_empty() {
        return Err(AssertionFailure(failures.join("; ")).into());
    }
    Ok(())
}
