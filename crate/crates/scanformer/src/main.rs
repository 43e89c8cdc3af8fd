use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use scanformer::checkpoint::Checkpoint;
use scanformer::dataset::{dump_scene, PoseJson};
use scanformer::evaluation::{efficiency_bench, evaluate_held_out, model_intrinsics, report_csv, scan_images, source_images};
use scanformer::image_io::{read_png_dir, write_png};
use scanformer::service::{self, AppState, ServiceConfig};
use scanformer::training::{run, RunOptions, Trainer};
use scanformer::{config, ply, IoError, Result};
use scanformer_core::model::Model;
use scanformer_core::scene::make_scene;
use scanformer_core::train::{scene_seed, TrainConfig};

#[derive(Parser)]
#[command(name = "scanformer", version, about = "Multi-view reconstruction and novel-view generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on procedural scenes. The config file is merged over defaults,
    /// then RNG_CONFIG (a JSON object) over that.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines log, appended to.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Score held-out scenes and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 50)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render one view of the scene seen by the source images.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of source PNGs, used in file-name order.
        #[arg(long)]
        images: PathBuf,
        /// Camera-to-world pose JSON in the normalised frame.
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pointmap: Option<PathBuf>,
        #[arg(long, default_value_t = 60.0)]
        fov: f64,
    },
    /// Accumulate a point cloud from cached queries on a sphere.
    Scan {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 16)]
        views: usize,
        #[arg(long, default_value_t = 0.5)]
        conf_quantile: f64,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long, default_value_t = 60.0)]
        fov: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint forward versus cached query: FLOPs, time and peak memory.
    Bench {
        /// Randomly initialised desk model when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// HTTP scanning service.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = 16)]
        max_sessions: usize,
    },
    /// Write the rendered rig of a procedural scene as RNGT.
    DumpScene {
        /// Index into the training pool of the resolved config.
        #[arg(long)]
        index: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model<f32>, TrainConfig)> {
    let ckpt = Checkpoint::load(path, None)?;
    let train = ckpt.train.clone().unwrap_or_else(|| TrainConfig { model: ckpt.model.config().clone(), ..TrainConfig::default() });
    Ok((ckpt.model, train))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config: file, out, log, resume, stop_at } => {
            let mut trainer = match resume {
                Some(p) => Trainer::resume(Checkpoint::load(p, None)?)?,
                None => Trainer::new(config::from_env(file.as_deref())?)?,
            };
            let records = run(&mut trainer, &RunOptions { out: Some(out), log, stop_at })?;
            let last = records.last();
            println!(
                "{}",
                json!({"steps": trainer.state.step, "updates": trainer.state.updates, "final_total": last.map(|r| r.total)})
            );
        }
        Command::Eval { ckpt, scenes, seed, out, csv } => {
            if scenes == 0 {
                return Err(IoError::Usage("--scenes must be at least 1".into()));
            }
            let (model, train) = load_model(&ckpt)?;
            let (report, _) = evaluate_held_out(&model, &train, scenes, seed)?;
            write_json(&out, &json!({"seed": seed, "report": report}))?;
            if let Some(p) = csv {
                std::fs::write(p, report_csv(&report)?)?;
            }
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Render { ckpt, images, pose, out, pointmap, fov } => {
            let (model, _) = load_model(&ckpt)?;
            let cfg = model.config().clone();
            let sources = source_images(&read_png_dir(&images)?, &cfg)?;
            let refs: Vec<&[f32]> = sources.iter().map(Vec::as_slice).collect();
            let intr = model_intrinsics(&cfg, fov);
            let pj: PoseJson = serde_json::from_slice(&std::fs::read(&pose)?)?;
            let target = pj.to_pose(intr)?;
            let stage1 = model.forward_stage1(&refs, &intr)?;
            let (maps, _) = model.forward_stage2(&target, &stage1.cache)?;
            write_png(&out, maps.width, maps.height, &maps.rgb_unit())?;
            if let Some(p) = pointmap {
                service::maps_container(&maps, &target)?.write(p)?;
            }
            let poses: Vec<PoseJson> = stage1.poses.iter().map(PoseJson::from_pose).collect();
            println!("{}", json!({"source_poses": poses}));
        }
        Command::Scan { ckpt, images, views, conf_quantile, radius, fov, out } => {
            if views == 0 {
                return Err(IoError::Usage("--views must be at least 1".into()));
            }
            let (model, _) = load_model(&ckpt)?;
            let (_, cloud) = scan_images(&model, &read_png_dir(&images)?, fov, views, radius, conf_quantile)?;
            ply::write(&out, &cloud)?;
            println!("{}", json!({"points": cloud.len()}));
        }
        Command::Bench { ckpt, queries, seed } => {
            let model = match ckpt {
                Some(p) => load_model(&p)?.0,
                None => Model::new(TrainConfig::default().model)?,
            };
            let report = efficiency_bench(&model, queries, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Serve { ckpt, host, port, max_sessions } => {
            let (model, _) = load_model(&ckpt)?;
            let app = AppState::new(model, ServiceConfig { max_sessions, ..ServiceConfig::default() });
            let rt = tokio::runtime::Runtime::new()?;
            let addr = SocketAddr::new(host, port);
            eprintln!("listening on http://{addr}");
            rt.block_on(service::serve(app, addr))?;
        }
        Command::DumpScene { index, config: file, out } => {
            let cfg = config::from_env(file.as_deref())?;
            dump_scene(&out, &make_scene(scene_seed(cfg.seed, index)), &cfg.rig)?;
        }
    }
    Ok(())
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({"error": kind, "message": message}));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end().to_string()),
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
