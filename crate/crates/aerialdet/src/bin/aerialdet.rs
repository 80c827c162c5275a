//! Command-line surface of the toolkit.
//!
//! One subcommand per capability: `crop` tiles scenes, `eval` scores result
//! files, `check` re-derives the numerical guarantees, `demo` dumps the
//! architecture of a random-parameter forward pass, and `micro-train`
//! overfits the toy detector on synthetic scenes.
//!
//! Exit codes: 0 on success, 2 on input errors, 3 when a self-check fails.
//! The only environment variable honored is the log filter (`RUST_LOG`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use aerialdet::bvr::{attention_weights, bvr_head_forward};
use aerialdet::detector::{
    detector_forward, evaluate_loss, micro_train, save_checkpoint, DetectorConfig, DetectorParams, Sgd,
};
use aerialdet::dota::{
    crop_scene, parse_annotation_file, parse_manifest, quad_to_hbb, read_results, write_patches,
    CATEGORIES,
};
use aerialdet::eval::{evaluate, ApMethod, GroundTruth};
use aerialdet::numerics::graph::Graph;
use aerialdet::numerics::tensor::Tensor;
use aerialdet::selfcheck::run_self_check_injected;
use aerialdet::{Error, Result};

const EXIT_INPUT: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(
    name = "aerialdet",
    version,
    about = "Aerial-scene detection toolkit: tile scenes, score detections, \
             inspect the fusion/attention mechanisms, self-check the numerics, \
             and micro-train on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut manifest scenes into overlapping square patches with remapped annotations
    Crop {
        /// Scene manifest: one `scene_id width height` per line
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding one `<scene_id>.txt` annotation file per scene
        #[arg(long, value_name = "DIR")]
        ann_dir: PathBuf,
        /// Output directory for patch annotations and the patch manifest
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Patch side length in pixels
        #[arg(long, default_value_t = 1024)]
        window: usize,
        /// Horizontal/vertical overlap between neighboring patches
        #[arg(long, default_value_t = 500)]
        overlap: usize,
        /// Keep a clipped box only if at least this fraction of its area survives
        #[arg(long, default_value_t = 0.5)]
        min_kept: f64,
    },
    /// Score per-category result files against ground-truth annotations
    Eval {
        /// Directory of per-category result files (as written by `Task_*.txt` convention)
        #[arg(long, value_name = "DIR")]
        results: PathBuf,
        /// Directory of per-scene ground-truth annotation files
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
        /// IoU threshold for a detection to claim a ground-truth box
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// AP integration: eleven_point or all_point
        #[arg(long, default_value = "eleven_point")]
        method: String,
        /// Also write the table as CSV
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
    },
    /// Re-derive the numerical guarantees (gradients, attention, tiling, AP)
    Check {
        /// Seed for every random draw; the same seed reproduces the report exactly
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one backward pass on purpose; the gradient suite must then fail
        #[arg(long, default_value_t = false)]
        inject_fault: bool,
        /// Also write the report as JSON
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
    },
    /// Random-parameter forward pass: feature shapes, attention statistics, routing gates
    Demo {
        /// Input side length (positive multiple of 32)
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Conditional fusion on/off (adds the extra finest level P2')
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        drm: bool,
        /// Key-point attention on/off
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        bvr: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Detector configuration JSON; explicit flags win on conflicts
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
    },
    /// Overfit the toy detector on a handful of synthetic scenes
    MicroTrain {
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the loss trace and final checkpoint
        #[arg(long, value_name = "DIR", default_value = "micro-train-out")]
        out: PathBuf,
        /// Detector configuration JSON
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Crop { manifest, ann_dir, out, window, overlap, min_kept } => {
            cmd_crop(&manifest, &ann_dir, &out, window, overlap, min_kept)
        }
        Command::Eval { results, gt, iou, method, csv } => {
            cmd_eval(&results, &gt, iou, &method, csv.as_deref())
        }
        Command::Check { seed, inject_fault, json } => cmd_check(seed, inject_fault, json.as_deref()),
        Command::Demo { size, drm, bvr, seed, config } => {
            cmd_demo(size, drm, bvr, seed, config.as_deref())
        }
        Command::MicroTrain { steps, seed, out, config } => {
            cmd_micro_train(steps, seed, &out, config.as_deref())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<DetectorConfig> {
    let Some(path) = path else {
        return Ok(DetectorConfig::default());
    };
    let text = std::fs::read_to_string(path)?;
    let cfg: DetectorConfig = serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_crop(
    manifest: &Path,
    ann_dir: &Path,
    out: &Path,
    window: usize,
    overlap: usize,
    min_kept: f64,
) -> Result<ExitCode> {
    let scenes = parse_manifest(manifest)?;
    if scenes.is_empty() {
        log::warn!("manifest {} lists no scenes; writing an empty patch set", manifest.display());
        write_patches(out, &[])?;
        return Ok(ExitCode::SUCCESS);
    }
    let mut patches = Vec::new();
    let mut failed = 0usize;
    for meta in &scenes {
        let ann_path = ann_dir.join(format!("{}.txt", meta.id));
        let annotations = match parse_annotation_file(&ann_path) {
            Ok(a) => a,
            Err(e) => {
                log::error!("scene {}: {e}", meta.id);
                failed += 1;
                continue;
            }
        };
        let scene_patches = crop_scene(meta, &annotations, window, overlap, min_kept)?;
        log::info!(
            "scene {} ({}x{}): {} annotations into {} patches",
            meta.id,
            meta.width,
            meta.height,
            annotations.len(),
            scene_patches.len()
        );
        patches.extend(scene_patches);
    }
    write_patches(out, &patches)?;
    println!(
        "wrote {} patches from {} of {} scenes to {}",
        patches.len(),
        scenes.len() - failed,
        scenes.len(),
        out.display()
    );
    if failed > 0 {
        log::error!("{failed} scene(s) skipped for unreadable annotations");
        return Ok(ExitCode::from(EXIT_INPUT));
    }
    Ok(ExitCode::SUCCESS)
}

/// Ground truth from one `<image_id>.txt` per image, sorted for determinism.
fn read_ground_truth(dir: &Path) -> Result<Vec<GroundTruth>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for path in files {
        let image_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid(format!("unusable file name {}", path.display())))?
            .to_string();
        for ann in parse_annotation_file(&path)? {
            out.push(GroundTruth {
                image_id: image_id.clone(),
                category: ann.category.clone(),
                bbox: quad_to_hbb(&ann.quad),
                difficult: ann.difficult,
            });
        }
    }
    Ok(out)
}

fn cmd_eval(
    results: &Path,
    gt: &Path,
    iou: f64,
    method: &str,
    csv: Option<&Path>,
) -> Result<ExitCode> {
    if !(0.0..=1.0).contains(&iou) {
        return Err(Error::invalid(format!("IoU threshold must lie in [0, 1], got {iou}")));
    }
    let method: ApMethod = method.parse()?;
    let detections = read_results(results)?;
    let ground_truth = read_ground_truth(gt)?;
    for cat in detections
        .iter()
        .map(|d| &d.category)
        .chain(ground_truth.iter().map(|g| &g.category))
    {
        if !CATEGORIES.contains(&cat.as_str()) {
            return Err(Error::invalid(format!(
                "category {cat:?} is not in the fixed vocabulary of {} classes",
                CATEGORIES.len()
            )));
        }
    }
    log::info!("{} detections against {} ground-truth boxes", detections.len(), ground_truth.len());
    let report = evaluate(&detections, &ground_truth, &CATEGORIES, iou, method);
    print!("{}", report.render_text());
    if let Some(path) = csv {
        std::fs::write(path, report.render_csv())?;
        log::info!("CSV table written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(seed: u64, inject_fault: bool, json: Option<&Path>) -> Result<ExitCode> {
    if inject_fault {
        log::warn!("fault injection on: the op-gradient suite is expected to fail");
    }
    let report = run_self_check_injected(seed, inject_fault);
    print!("{}", report.render_text());
    if let Some(path) = json {
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::invalid(format!("serializing report: {e}")))?;
        std::fs::write(path, text)?;
        log::info!("JSON report written to {}", path.display());
    }
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(EXIT_CHECK) })
}

fn shape_row(label: &str, shape: [usize; 4]) -> String {
    format!("  {label:<10} {} x {} x {} x {}", shape[0], shape[1], shape[2], shape[3])
}

fn cmd_demo(size: usize, drm: bool, bvr: bool, seed: u64, config: Option<&Path>) -> Result<ExitCode> {
    let mut cfg = load_config(config)?;
    cfg.drm = drm;
    cfg.bvr = bvr;
    cfg.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = DetectorParams::init(&cfg, &mut rng)?;
    // two distinct random patches in one batch
    let image = Tensor::randn([2, 3, size, size], 1.0, &mut rng);

    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let iv = g.leaf(image.clone());
    let fwd = detector_forward(&mut g, iv, &vars, &cfg)?;

    println!(
        "detector: {} classes, width {}, fusion {}, attention {} (top-{} keys), input 2 x 3 x {size} x {size}",
        cfg.classes,
        cfg.channels,
        if cfg.drm { "on" } else { "off" },
        if cfg.bvr { "on" } else { "off" },
        cfg.k_max,
    );

    println!("backbone:");
    for (name, var) in ["C2", "C3", "C4", "C5"].iter().zip(fwd.backbone) {
        println!("{}", shape_row(name, g.value(var).shape()));
    }
    println!("pyramid:");
    if let Some(p2p) = fwd.p2_prime {
        println!("{}", shape_row("P2'", g.value(p2p).shape()));
    }
    for (name, var) in ["P2", "P3", "P4", "P5", "P6"].iter().zip(fwd.pyramid) {
        println!("{}", shape_row(name, g.value(var).shape()));
    }
    println!("head outputs (class / box / center-ness):");
    for lv in &fwd.levels {
        let mut row = String::new();
        let _ = write!(row, "  {:<4} stride {:<3}", lv.name, lv.stride);
        for (tag, v) in [("cls", lv.head.cls), ("box", lv.head.reg), ("ctr", lv.head.ctr)] {
            let s = g.value(v).shape();
            let _ = write!(row, "  {tag} {}x{}x{}x{}", s[0], s[1], s[2], s[3]);
        }
        println!("{row}");
    }

    if cfg.bvr {
        let bvr_cfg = cfg.bvr_config();
        let bvr_vars = vars.bvr.expect("attention on but unbound");
        let bvr_params = params.bvr.as_ref().expect("attention on but no parameters");
        // pre-enhancement features in level order
        let mut pre = Vec::new();
        if let Some(p) = fwd.p2_prime {
            pre.push(p);
        }
        pre.extend(fwd.pyramid);
        println!("attention (per level, image 0: keys, weight range, row-sum error):");
        for (lv, feature) in fwd.levels.iter().zip(pre) {
            let head = bvr_head_forward(&mut g, feature, &bvr_vars, &bvr_cfg)?;
            let cells: Vec<Vec<(usize, usize)>> = head.keys.iter().map(|k| k.cells.clone()).collect();
            let weights = attention_weights(
                g.value(feature),
                g.value(head.point.corner_offsets),
                bvr_params,
                &cells,
                &bvr_cfg,
            )?;
            let rows: Vec<&f64> = weights[0].iter().flatten().collect();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &&v in &rows {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let worst_sum = weights[0]
                .iter()
                .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
                .fold(0.0f64, f64::max);
            println!(
                "  {:<4} {} keys, weights [{lo:.4}, {hi:.4}], max |sum-1| {worst_sum:.1e}",
                lv.name,
                head.keys[0].len(),
            );
        }
    }

    if let Some(routing) = fwd.routing {
        let gates = g.value(routing);
        println!("fusion routing gate per image (distinct patches):");
        for b in 0..gates.shape()[0] {
            println!("  image {b}: {:.6}", gates.at(b, 0, 0, 0));
        }
        // the gates react to the batch content: duplicating one patch
        // changes nothing per-image, but distinct patches get distinct gates
        let dup = Tensor::stack_batch(&[image.batch_item(0), image.batch_item(0)])?;
        let mut g2 = Graph::new();
        let vars2 = params.bind(&mut g2);
        let iv2 = g2.leaf(dup);
        let fwd2 = detector_forward(&mut g2, iv2, &vars2, &cfg)?;
        let dup_gates = g2.value(fwd2.routing.expect("fusion on"));
        println!("fusion routing gate per image (image 0 duplicated):");
        for b in 0..dup_gates.shape()[0] {
            println!("  image {b}: {:.6}", dup_gates.at(b, 0, 0, 0));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_micro_train(steps: usize, seed: u64, out: &Path, config: Option<&Path>) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = DetectorParams::init(&cfg, &mut rng)?;
    let scenes = aerialdet::detector::synthetic_dataset(8, 64, cfg.classes, seed ^ 0x5ce)?;
    let mut opt = Sgd::new(cfg.optimizer)?;

    let first_images = Tensor::stack_batch(&[scenes[0].image.clone(), scenes[1].image.clone()])?;
    let first_objects = vec![scenes[0].objects.clone(), scenes[1].objects.clone()];
    let initial = evaluate_loss(&params, &first_images, &first_objects)?;
    println!(
        "initial: loss {:.4} (cls {:.4}, box {:.4}, ctr {:.4})",
        initial.loss, initial.cls, initial.reg, initial.ctr
    );

    let t0 = Instant::now();
    let trace = micro_train(&mut params, &mut opt, &scenes, steps)?;
    for (i, r) in trace.iter().enumerate() {
        if steps <= 20 || (i + 1) % 10 == 0 || i + 1 == steps {
            println!(
                "step {:>4}: loss {:.4} (cls {:.4}, box {:.4}, ctr {:.4})",
                i + 1,
                r.loss,
                r.cls,
                r.reg,
                r.ctr
            );
        }
    }
    let secs = t0.elapsed().as_secs_f64();

    std::fs::create_dir_all(out)?;
    let ckpt = out.join("detector.json");
    save_checkpoint(&ckpt, &params)?;
    let trace_path = out.join("loss_trace.json");
    let json = serde_json::to_string_pretty(&trace)
        .map_err(|e| Error::invalid(format!("serializing trace: {e}")))?;
    std::fs::write(&trace_path, json)?;

    if let Some(last) = trace.last() {
        println!(
            "{steps} steps in {secs:.1} s; loss {:.4} -> {:.4} ({:.1}% of initial)",
            initial.loss,
            last.loss,
            100.0 * last.loss / initial.loss
        );
    } else {
        println!("no steps requested; initial loss only");
    }
    println!("checkpoint {}, trace {}", ckpt.display(), trace_path.display());
    Ok(ExitCode::SUCCESS)
}
