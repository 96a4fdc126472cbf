use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use rivlpr::aggregate::{read_descriptors, write_descriptors, DescriptorMeta};
use rivlpr::config::PipelineConfig;
use rivlpr::evaluate::{run_protocol, DescriptorDb};
use rivlpr::mining::{mine_pair, write_pairs};
use rivlpr::riv::{project_scan, read_riv, write_riv, RivImage};
use rivlpr::scan_geometry::{format_poses, load_poses, load_scan, write_scan, Pose, Scan, ScanFormat};
use rivlpr::synthetic::World;
use rivlpr::trainer::{read_checkpoint, write_checkpoint, Frame, Model, Trainer};
use rivlpr::Error;

const MANIFEST: &str = "manifest.txt";
const POSES: &str = "poses.txt";

/// Range-image LiDAR place recognition.
#[derive(Parser)]
#[command(name = "rivlpr", version)]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed and the mining seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Project every scan of a directory into RIV1 images plus a manifest.
    Project {
        scan_dir: PathBuf,
        /// Poses of the scans in file-name order; `<scan_dir>/poses.txt` if present.
        #[arg(long)]
        poses: Option<PathBuf>,
    },
    /// Mine patch correspondences between two scans.
    Mine {
        scan_a: PathBuf,
        scan_b: PathBuf,
        /// Two poses: scan_a then scan_b.
        #[arg(long)]
        poses: PathBuf,
    },
    /// Describe a directory written by `project` into a DSC1 file.
    Describe {
        riv_dir: PathBuf,
        /// Trained parameters; the configured model at initialization otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train on one or more scan directories, each with its poses.txt.
    Train {
        #[arg(required = true)]
        scan_dirs: Vec<PathBuf>,
        /// Poses for a single scan directory.
        #[arg(long)]
        poses: Option<PathBuf>,
    },
    /// Evaluate a query DSC1 file against a database DSC1 file.
    Eval {
        db: PathBuf,
        queries: PathBuf,
        /// Checkpoint the descriptors must match in dimension.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Radius of the looser `nearby` flag in matches.csv, meters.
        #[arg(long, default_value_t = 50.0)]
        nearby_radius: f64,
    },
    /// Render the synthetic benchmark sessions as scan directories.
    Synth,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
            Error::Alignment(_) => 3,
            Error::Protocol(_) => 4,
            Error::ShapeMismatch(_) => 5,
            _ => 1,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RIVLPR_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("rivlpr: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::new(1, e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let out = cli.out.ok_or_else(|| Failure::new(2, "--out is required"))?;
    match cli.command {
        Command::Project { scan_dir, poses } => project(&cfg, &scan_dir, poses.as_deref(), &out),
        Command::Mine { scan_a, scan_b, poses } => mine(&cfg, &scan_a, &scan_b, &poses, cli.seed.unwrap_or(0), &out),
        Command::Describe { riv_dir, checkpoint } => describe(&cfg, &riv_dir, checkpoint.as_deref(), &out),
        Command::Train { scan_dirs, poses } => train(&cfg, &scan_dirs, poses.as_deref(), &out),
        Command::Eval { db, queries, checkpoint, nearby_radius } => {
            eval(&cfg, &db, &queries, checkpoint.as_deref(), nearby_radius, &out)
        }
        Command::Synth => synth(&cfg, &out),
    }
}

fn scan_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Failure::new(2, format!("{}: no such directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && ScanFormat::from_path(p).is_some())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::new(2, format!("{}: no scans", dir.display())));
    }
    Ok(files)
}

fn dir_poses(dir: &Path, explicit: Option<&Path>, count: usize) -> CliResult<Option<Vec<Pose>>> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => dir.join(POSES),
    };
    if explicit.is_none() && !path.exists() {
        return Ok(None);
    }
    let poses = load_poses(&path)?;
    if poses.len() != count {
        return Err(Error::ShapeMismatch(format!("{} poses for {count} scans", poses.len())).into());
    }
    Ok(Some(poses))
}

fn read_scan(path: &Path, pose: Option<&Pose>) -> rivlpr::Result<Scan> {
    let format = ScanFormat::from_path(path).expect("filtered by extension");
    let mut scan = load_scan(path, format)?;
    if let Some(p) = pose {
        scan.timestamp = p.timestamp;
    }
    Ok(scan)
}

fn project(cfg: &PipelineConfig, scan_dir: &Path, poses: Option<&Path>, out: &Path) -> CliResult<()> {
    let files = scan_files(scan_dir)?;
    let poses = dir_poses(scan_dir, poses, files.len())?;
    let images: Vec<Option<(String, RivImage)>> = files
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let projected = read_scan(f, poses.as_ref().map(|p| &p[i]))
                .and_then(|scan| Ok((scan.id.clone(), project_scan(&scan, &cfg.riv)?)));
            projected.map_err(|e| log::warn!("skipping {}: {e}", f.display())).ok()
        })
        .collect();
    if images.iter().all(Option::is_none) {
        return Err(Failure::new(2, "no scan could be projected"));
    }
    fs::create_dir_all(out)?;
    let mut manifest = String::from("# id\tfile\n");
    let mut kept = Vec::new();
    for (i, (id, img)) in images.iter().enumerate().filter_map(|(i, x)| x.as_ref().map(|x| (i, x))) {
        let file = format!("{id}.riv");
        write_riv(&out.join(&file), img)?;
        let _ = writeln!(manifest, "{id}\t{file}");
        if let Some(p) = &poses {
            kept.push(p[i]);
        }
    }
    fs::write(out.join(MANIFEST), manifest)?;
    if poses.is_some() {
        fs::write(out.join(POSES), format_poses(&kept))?;
    }
    println!("projected {} of {} scans into {}", images.iter().flatten().count(), files.len(), out.display());
    Ok(())
}

fn mine(cfg: &PipelineConfig, a: &Path, b: &Path, poses: &Path, seed: u64, out: &Path) -> CliResult<()> {
    let poses = load_poses(poses)?;
    if poses.len() != 2 {
        return Err(Error::ShapeMismatch(format!("expected 2 poses, found {}", poses.len())).into());
    }
    for p in [a, b] {
        if ScanFormat::from_path(p).is_none() {
            return Err(Failure::new(2, format!("{}: not a .bin or .csv scan", p.display())));
        }
    }
    let sa = read_scan(a, Some(&poses[0]))?;
    let sb = read_scan(b, Some(&poses[1]))?;
    let set = mine_pair(&sa, &sb, &poses[0], &poses[1], &cfg.riv, &cfg.mining, seed)?;
    write_pairs(out, &set)?;
    println!("{} positives written to {}", set.positives.len(), out.display());
    Ok(())
}

fn read_manifest(dir: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Failure::new(2, format!("{}: no manifest", dir.display())));
    }
    let mut rows = Vec::new();
    for (n, line) in fs::read_to_string(&path)?.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, file) = line
            .split_once('\t')
            .ok_or_else(|| Error::MalformedFile { path: path.clone(), reason: format!("line {}: expected `id<TAB>file`", n + 1) })?;
        rows.push((id.to_string(), dir.join(file)));
    }
    if rows.is_empty() {
        return Err(Failure::new(2, format!("{}: no images", dir.display())));
    }
    Ok(rows)
}

fn load_model(cfg: &PipelineConfig, checkpoint: Option<&Path>) -> CliResult<(Model, PipelineConfig)> {
    match checkpoint {
        Some(p) => {
            let ckp = read_checkpoint(p)?;
            let mut cfg = *cfg;
            cfg.riv = ckp.setup.riv;
            Ok((Model::with_params(ckp.setup.model, ckp.params)?, cfg))
        }
        None => Ok((Model::new(cfg.model)?, *cfg)),
    }
}

fn describe(cfg: &PipelineConfig, riv_dir: &Path, checkpoint: Option<&Path>, out: &Path) -> CliResult<()> {
    let rows = read_manifest(riv_dir)?;
    let (model, cfg) = load_model(cfg, checkpoint)?;
    let poses = match dir_poses(riv_dir, None, rows.len())? {
        Some(p) => p,
        None => {
            log::warn!("{}: no poses, writing identity poses", riv_dir.display());
            vec![Pose::planar(0.0, 0.0, 0.0, 0.0, 0.0); rows.len()]
        }
    };
    let descs = rows
        .par_iter()
        .map(|(_, file)| {
            let img = read_riv(file)?;
            if (img.height(), img.width()) != (cfg.riv.height, cfg.riv.width) {
                return Err(Error::ShapeMismatch(format!(
                    "{}: {}x{} image, model expects {}x{}",
                    file.display(),
                    img.height(),
                    img.width(),
                    cfg.riv.height,
                    cfg.riv.width
                )));
            }
            model.describe(&img)
        })
        .collect::<rivlpr::Result<Vec<_>>>()?;
    let metas: Vec<DescriptorMeta> =
        rows.iter().zip(&poses).map(|((id, _), pose)| DescriptorMeta { id: id.clone(), pose: *pose }).collect();
    write_descriptors(out, &descs, &metas)?;
    println!("{} descriptors of dimension {} written to {}", descs.len(), model.descriptor_dim(), out.display());
    Ok(())
}

fn load_frames(cfg: &PipelineConfig, dir: &Path, poses: Option<&Path>) -> CliResult<Vec<Frame>> {
    let files = scan_files(dir)?;
    let poses = dir_poses(dir, poses, files.len())?
        .ok_or_else(|| Failure::new(2, format!("{}: training needs {POSES}", dir.display())))?;
    Ok(files
        .par_iter()
        .zip(&poses)
        .map(|(f, pose)| {
            let scan = read_scan(f, Some(pose))?;
            Ok(Frame { id: scan.id.clone(), pose: *pose, image: project_scan(&scan, &cfg.riv)? })
        })
        .collect::<rivlpr::Result<Vec<_>>>()?)
}

fn train(cfg: &PipelineConfig, dirs: &[PathBuf], poses: Option<&Path>, out: &Path) -> CliResult<()> {
    if poses.is_some() && dirs.len() != 1 {
        return Err(Failure::new(1, "--poses needs exactly one scan directory"));
    }
    let mut frames = Vec::new();
    for d in dirs {
        frames.extend(load_frames(cfg, d, poses)?);
    }
    let mut trainer = Trainer::new(cfg.train_setup(), &frames)?;
    let last = trainer.run()?;
    write_checkpoint(out, &trainer.checkpoint())?;
    fs::write(trace_path(out), trainer.trace_csv())?;
    println!(
        "{} steps, final L_P {:.4} L_TSAP {:.4} L {:.4}; checkpoint {}",
        trainer.step_index(),
        last.l_p,
        last.l_tsap,
        last.l_final,
        out.display()
    );
    Ok(())
}

fn trace_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".trace.csv");
    PathBuf::from(s)
}

fn load_db(path: &Path) -> CliResult<DescriptorDb> {
    if !path.exists() {
        return Err(Failure::new(2, format!("{}: not found", path.display())));
    }
    let (d, m) = read_descriptors(path)?;
    Ok(DescriptorDb::new(d, m)?)
}

fn eval(
    cfg: &PipelineConfig,
    db: &Path,
    queries: &Path,
    checkpoint: Option<&Path>,
    nearby_radius: f64,
    out: &Path,
) -> CliResult<()> {
    let db = load_db(db)?;
    let queries = load_db(queries)?;
    if db.is_empty() || queries.is_empty() {
        return Err(Failure::new(2, "empty descriptor file"));
    }
    if let Some(p) = checkpoint {
        let (model, _) = load_model(cfg, Some(p))?;
        for (name, d) in [("database", &db), ("queries", &queries)] {
            if d.dim() != model.descriptor_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "{name} descriptors have dimension {}, checkpoint produces {}",
                    d.dim(),
                    model.descriptor_dim()
                ))
                .into());
            }
        }
    }
    let report = run_protocol(&db, &queries, &cfg.eval)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), report.to_json())?;
    fs::write(out.join("pr.csv"), report.pr_csv())?;
    fs::write(out.join("pr.svg"), report.pr_svg())?;
    fs::write(out.join("matches.csv"), report.matches_csv(&db, &queries, nearby_radius))?;
    println!("{}", report.to_json());
    Ok(())
}

fn synth(cfg: &PipelineConfig, out: &Path) -> CliResult<()> {
    let syn = cfg.synthetic;
    let world = World::new(syn.world)?;
    let [ta, tb] = syn.train_sessions();
    for (name, session) in
        [("reference", syn.reference), ("revisit", syn.revisit), ("train_reference", ta), ("train_revisit", tb)]
    {
        let session = world.session(&session)?;
        let dir = out.join(name);
        fs::create_dir_all(&dir)?;
        (0..session.len()).into_par_iter().try_for_each(|k| {
            let scan = world.scan(&session, k, &cfg.riv);
            write_scan(&dir.join(format!("{}.bin", scan.id)), &scan, ScanFormat::XyzrBin)
        })?;
        fs::write(dir.join(POSES), format_poses(&session.poses))?;
        println!("{name}: {} scans", session.len());
    }
    Ok(())
}
