use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use wvt_core::backbone::{count_params_flops, Model, ModelConfig};
use wvt_core::config::RunConfig;
use wvt_core::data::{self, Manifest, Split};
use wvt_core::eval::{self, detections_to_rows};
use wvt_core::tensor::{grad_check_at, Tape, Tensor};
use wvt_core::train::{self, Dataset};
use wvt_core::video::{Normalization, SamplingSpec};
use wvt_core::{par, selftest};

#[derive(Parser)]
#[command(
    name = "wvt",
    version,
    about = "Window-enhanced video transformer for dense-scene action detection"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Preset name (full, tiny, toy, gradcheck) or key=value config file.
    #[arg(long, default_value = "toy")]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Extra `key=value` overrides, applied after the config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dense-classroom dataset under --out.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_clips: Option<usize>,
    },
    /// Train on a generated dataset and evaluate on its test split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding manifest.txt and gt.csv.
        #[arg(long)]
        data: PathBuf,
    },
    /// Frame-mAP of a detections CSV, or of a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of the end-to-end loss on a generated clip,
    /// probing up to 64 coordinates of every parameter tensor.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
    },
    /// Run the invariant suite.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
    /// Class counts and box histograms of a GT CSV.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write WEA window selections (CSV) and response maps (PGM) for one clip.
    DumpAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        clip: Option<String>,
    },
    /// Train and evaluate once per value of one configuration axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Required for `window` and `frames`; `ablation` runs every scheme x fusion pair.
        #[arg(long, value_delimiter = ',', required_if_eq_any([("axis", "window"), ("axis", "frames")]))]
        values: Vec<usize>,
    },
    /// Forward latency and parameter / FLOP counts.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        iters: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Window,
    Frames,
    Ablation,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let path = Path::new(&self.config);
        let mut cfg = if path.is_file() {
            RunConfig::load(path)?
        } else {
            RunConfig::from_preset(&self.config)?
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("override {o:?} is not key=value"))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.scene.seed = s;
        }
        cfg.validate()?;
        for line in cfg.to_lines() {
            info!("config {line}");
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_split(data_dir: &Path, split: Split, cfg: &ModelConfig) -> Result<Dataset> {
    Ok(Dataset::load(
        &data_dir.join(data::MANIFEST_FILE),
        &data_dir.join(data::GT_FILE),
        Some(split),
        cfg,
    )?)
}

fn scene_cols(data_dir: &Path) -> Result<usize> {
    let m = Manifest::read(&data_dir.join(data::MANIFEST_FILE))?;
    Ok(train::scene_from_manifest(&m)?.cols)
}

fn ap_csv(r: &eval::ApResult) -> String {
    let mut s = String::from("class_id,ap,gt_count\n");
    for (c, (ap, n)) in r.per_class_ap.iter().zip(&r.counts).enumerate() {
        let ap = ap
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "absent".into());
        s.push_str(&format!("{c},{ap},{n}\n"));
    }
    s.push_str(&format!(
        "mean,{:.6},{}\n",
        r.map,
        r.counts.iter().sum::<usize>()
    ));
    s
}

fn cmd_gen_data(common: &Common, n_clips: Option<usize>) -> Result<()> {
    let cfg = common.resolve()?;
    let out = common.out_dir()?;
    let n = n_clips.unwrap_or(cfg.n_clips);
    let g = data::generate_dataset(&cfg.scene, n, out)?;
    println!(
        "wrote {n} clips, {} and {}",
        g.manifest_path.display(),
        g.gt_path.display()
    );
    Ok(())
}

fn cmd_train(common: &Common, data_dir: &Path) -> Result<()> {
    let cfg = common.resolve()?;
    let out = common.out_dir()?;
    let tr = load_split(data_dir, Split::Train, &cfg.model)?;
    let te = load_split(data_dir, Split::Test, &cfg.model)?;
    info!("{} train / {} test clips", tr.len(), te.len());
    let mut log_csv = String::from("epoch,loss\n");
    let exp = train::run_experiment(
        &cfg.model,
        &cfg.train,
        &tr,
        &te,
        scene_cols(data_dir)?,
        |e, l| {
            info!("epoch {e} loss {l:.5}");
            log_csv.push_str(&format!("{e},{l:.6}\n"));
        },
    )?;
    write_text(&out.join("train_log.csv"), &log_csv)?;
    write_text(&out.join("config.txt"), &(cfg.to_lines().join("\n") + "\n"))?;
    exp.model.save(&out.join("checkpoint"))?;
    eval::write_det_csv(
        &out.join("detections.csv"),
        &detections_to_rows(&exp.detections),
    )?;
    write_text(&out.join("map.csv"), &ap_csv(&exp.eval.all))?;
    write_text(&out.join("map_back_row.csv"), &ap_csv(&exp.eval.back_row))?;
    println!(
        "frame-mAP@0.5 {:.4} (back row {:.4}) after {} steps in {:.1}s",
        exp.eval.all.map, exp.eval.back_row.map, exp.report.steps, exp.report.seconds
    );
    Ok(())
}

fn cmd_eval(
    common: &Common,
    dets: Option<&Path>,
    gt: Option<&Path>,
    ckpt: Option<&Path>,
    data_dir: Option<&Path>,
) -> Result<()> {
    let cfg = common.resolve()?;
    let out = common.out_dir()?;
    let result = match (dets, gt, ckpt, data_dir) {
        (Some(d), Some(g), None, None) => eval::frame_map_files(d, g, cfg.model.num_classes)?,
        (None, None, Some(c), Some(dd)) => {
            let model = Model::<f32>::load(c)?;
            let te = load_split(dd, Split::Test, &model.cfg)?;
            let mode = if cfg.train.eval_jitter > 0.0 {
                wvt_core::head::ProposalMode::Jitter(cfg.train.eval_jitter)
            } else {
                wvt_core::head::ProposalMode::Exact
            };
            let d = train::predict(&model, &te, mode, cfg.train.seed, cfg.train.batch_size)?;
            eval::write_det_csv(&out.join("detections.csv"), &detections_to_rows(&d))?;
            let r = train::evaluate(
                &d,
                &te.ground_truth(),
                model.cfg.num_classes,
                scene_cols(dd)?,
            )?;
            write_text(&out.join("map_back_row.csv"), &ap_csv(&r.back_row))?;
            r.all
        }
        _ => bail!("eval needs either --detections and --gt, or --checkpoint and --data"),
    };
    write_text(&out.join("map.csv"), &ap_csv(&result))?;
    println!("frame-mAP@0.5 {:.6}", result.map);
    Ok(())
}

/// Coordinates probed per parameter tensor, evenly strided over larger ones.
const GRADCHECK_PER_TENSOR: usize = 64;

fn cmd_gradcheck(common: &Common, tol: f64, eps: f64) -> Result<()> {
    let cfg = common.resolve()?;
    let mc = &cfg.model;
    let model = Model::<f64>::new(mc, cfg.train.seed)?;
    let scene = data::SceneSpec {
        seed: cfg.train.seed,
        ..cfg.scene.clone()
    };
    let (raw, anns) = data::render_clip(&scene, 0);
    let sampling = SamplingSpec::new(mc.frames, mc.sampling_stride)?;
    let clip = raw
        .to_video::<f64>(sampling, &Normalization::default())?
        .data;
    let anns = &anns[..anns.len().min(2)];
    let rois: Vec<_> = anns.iter().map(|a| (0, a.bbox)).collect();
    let mut labels = Tensor::<f64>::zeros(&[rois.len(), mc.num_classes]);
    for (r, a) in anns.iter().enumerate() {
        for &c in &a.class_ids {
            labels.data_mut()[r * mc.num_classes + c] = 1.0;
        }
    }
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, t) in model.store.names().iter().zip(model.store.tensors()) {
        let step = t.len().div_ceil(GRADCHECK_PER_TENSOR);
        let idx: Vec<usize> = (0..t.len()).step_by(step).collect();
        let id = model.store.id_of(name).context("parameter lookup")?;
        let r = grad_check_at(
            |tape: &mut Tape<f64>, x| {
                let mut p = model.store.attach_frozen(tape);
                p.replace(id, x);
                let c = tape.constant(clip.clone());
                model.loss(tape, &p, c, &rois, &labels)
            },
            t,
            eps,
            &idx,
        )?;
        info!("{name}: max rel err {:.3e}", r.max_rel_err);
        worst = worst.max(r.max_rel_err);
        checked += idx.len();
    }
    println!("max rel err {worst:.3e} over {checked} parameter coordinates");
    if worst > tol {
        bail!("gradient check failed: {worst:.3e} > {tol:e}");
    }
    Ok(())
}

fn cmd_selftest(common: &Common) -> Result<()> {
    common.resolve()?;
    let checks = selftest::run_all()?;
    let mut failed = 0;
    for c in &checks {
        println!(
            "{} {} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        failed += !c.passed as usize;
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn cmd_stats(common: &Common, gt: &Path, manifest: Option<&Path>) -> Result<()> {
    let cfg = common.resolve()?;
    let out = common.out_dir()?;
    let rows = eval::read_gt_csv(gt)?;
    let res = match manifest {
        Some(m) => data::resolutions(&Manifest::read(m)?),
        None => Default::default(),
    };
    let k = rows
        .iter()
        .map(|r| r.class_id + 1)
        .max()
        .unwrap_or(0)
        .max(cfg.model.num_classes);
    let stats = data::dataset_stats(&rows, k, &res)?;
    stats.write_csv(out)?;
    for (c, n) in &stats.class_counts {
        println!("class {c}: {n}");
    }
    println!("{} boxes; tables in {}", stats.boxes, out.display());
    Ok(())
}

fn pgm(values: &[f32], w: usize, h: usize) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        values
            .iter()
            .map(|&v| ((v - lo) / span * 255.0).round() as u8),
    );
    out
}

fn cmd_dump_attn(
    common: &Common,
    data_dir: &Path,
    ckpt: Option<&Path>,
    clip: Option<&str>,
) -> Result<()> {
    let cfg = common.resolve()?;
    let out = common.out_dir()?;
    let model = match ckpt {
        Some(c) => Model::<f32>::load(c)?,
        None => Model::<f32>::new(&cfg.model, cfg.train.seed)?,
    };
    let ds = Dataset::load(
        &data_dir.join(data::MANIFEST_FILE),
        &data_dir.join(data::GT_FILE),
        None,
        &model.cfg,
    )?;
    let sample = match clip {
        Some(id) => ds
            .samples
            .iter()
            .find(|s| s.clip_id == id)
            .with_context(|| format!("clip {id} not in dataset"))?,
        None => ds.samples.first().context("empty dataset")?,
    };
    let mut tape = Tape::new();
    let p = model.store.attach_frozen(&mut tape);
    let v = tape.constant(sample.video.data.clone());
    let trace = model.features(&mut tape, &p, v)?;
    let [_, gh, gw] = model.cfg.token_grid()?;
    let mut csv = String::from("block,frame,x,y,w\n");
    let mut n = 0;
    for (b, t) in trace.wea.iter().enumerate() {
        let Some(t) = t else { continue };
        for (f, c) in t.selection.coords.iter().enumerate() {
            csv.push_str(&format!("{b},{f},{},{},{}\n", c.x, c.y, t.selection.window));
            let map = &t.response.data()[f * gh * gw..(f + 1) * gh * gw];
            let path = out.join(format!("response_b{b}_f{f}.pgm"));
            fs::write(&path, pgm(map, gw, gh))
                .with_context(|| format!("writing {}", path.display()))?;
            n += 1;
        }
    }
    if n == 0 {
        bail!("model has no WEA blocks");
    }
    write_text(&out.join("windows.csv"), &csv)?;
    println!(
        "{n} window selections for {} in {}",
        sample.clip_id,
        out.display()
    );
    Ok(())
}

fn cmd_sweep(common: &Common, data_dir: &Path, axis: Axis, values: &[usize]) -> Result<()> {
    let cfg = common.resolve()?;
    let out = common.out_dir()?;
    let cols = scene_cols(data_dir)?;
    let name = match axis {
        Axis::Window => "window",
        Axis::Frames => "frames",
        Axis::Ablation => {
            let tr = load_split(data_dir, Split::Train, &cfg.model)?;
            let te = load_split(data_dir, Split::Test, &cfg.model)?;
            let rows = train::run_ablation(&cfg.model, &cfg.train, &tr, &te, cols, |r| {
                println!(
                    "{}/{} mAP {:.4} back row {:.4}",
                    r.scheme, r.fusion, r.eval.all.map, r.eval.back_row.map
                )
            })?;
            return write_text(&out.join("sweep_ablation.csv"), &train::ablation_csv(&rows));
        }
    };
    let mut csv = format!("{name},map,back_row_map,status\n");
    let mut ok = 0;
    for &v in values {
        let mut mc = cfg.model.clone();
        match axis {
            Axis::Window => mc.window = v,
            Axis::Frames => mc.frames = v,
            Axis::Ablation => unreachable!(),
        }
        if let Err(e) = mc.validate() {
            log::warn!("{name}={v}: {e}");
            csv.push_str(&format!(
                "{v},,,invalid: {}\n",
                e.to_string().replace(',', ";")
            ));
            continue;
        }
        let tr = load_split(data_dir, Split::Train, &mc)?;
        let te = load_split(data_dir, Split::Test, &mc)?;
        let exp = train::run_experiment(&mc, &cfg.train, &tr, &te, cols, |e, l| {
            info!("{name}={v} epoch {e} loss {l:.5}")
        })?;
        println!(
            "{name}={v} mAP {:.4} back row {:.4}",
            exp.eval.all.map, exp.eval.back_row.map
        );
        csv.push_str(&format!(
            "{v},{:.6},{:.6},ok\n",
            exp.eval.all.map, exp.eval.back_row.map
        ));
        ok += 1;
    }
    write_text(&out.join(format!("sweep_{name}.csv")), &csv)?;
    if ok == 0 {
        bail!("no valid {name} setting among {values:?}");
    }
    Ok(())
}

fn cmd_bench(common: &Common, iters: usize) -> Result<()> {
    let cfg = common.resolve()?;
    let out = common.out_dir()?;
    let mc = &cfg.model;
    let counts = count_params_flops(mc)?;
    let model = Model::<f32>::new(mc, cfg.train.seed)?;
    let clip = selftest::random_clip(mc, 0).cast::<f32>();
    let mut times = Vec::with_capacity(iters.max(1));
    for _ in 0..iters.max(1) {
        let t = Instant::now();
        let mut tape = Tape::new();
        let p = model.store.attach_frozen(&mut tape);
        let c = tape.constant(clip.clone());
        model.detect(&mut tape, &p, c, &[(0, [0.1, 0.1, 0.5, 0.5])])?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    let full = count_params_flops(&ModelConfig::full())?;
    let csv = format!(
        "config,params,flops,forward_ms,threads\n{},{},{},{:.3},{}\nfull,{},{},,\n",
        cfg.preset,
        counts.params,
        counts.flops,
        median * 1e3,
        par::threads(),
        full.params,
        full.flops
    );
    write_text(&out.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData { common, n_clips } => cmd_gen_data(common, *n_clips),
        Cmd::Train { common, data } => cmd_train(common, data),
        Cmd::Eval {
            common,
            detections,
            gt,
            checkpoint,
            data,
        } => cmd_eval(
            common,
            detections.as_deref(),
            gt.as_deref(),
            checkpoint.as_deref(),
            data.as_deref(),
        ),
        Cmd::Gradcheck {
            common,
            tolerance,
            eps,
        } => cmd_gradcheck(common, *tolerance, *eps),
        Cmd::Selftest { common } => cmd_selftest(common),
        Cmd::Stats {
            common,
            gt,
            manifest,
        } => cmd_stats(common, gt, manifest.as_deref()),
        Cmd::DumpAttn {
            common,
            data,
            checkpoint,
            clip,
        } => cmd_dump_attn(common, data, checkpoint.as_deref(), clip.as_deref()),
        Cmd::Sweep {
            common,
            data,
            axis,
            values,
        } => cmd_sweep(common, data, *axis, values),
        Cmd::Bench { common, iters } => cmd_bench(common, *iters),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    par::init_threads(None);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
