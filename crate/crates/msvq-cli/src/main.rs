//! `msvq`: train, encode, decode, evaluate, and prepare data for the
//! multi-scale VQ video codec. Hyperparameters live in a TOML config file;
//! flags carry only paths and seeds.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use msvq::data::{
    read_clip_dir, segment_frames, split_dataset, synth_clip, write_clip_dir, ClipRecord,
    Manifest, Split, CLIP_FPS, CLIP_FRAMES,
};
use msvq::{
    bitstream, evaluate, load_checkpoint, rate_report, train, ConvStackExtractor, Error,
    FeatureExtractor, MetricConfig, ModelConfig, NamedTensors, TrainConfig, TrainState,
    VideoClip,
};

#[derive(Parser)]
#[command(name = "msvq", version, about = "Multi-scale VQ video codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a codec from a config file, on a dataset or synthetic clips.
    Train(TrainArgs),
    /// Compress one clip directory into a .msvq container.
    Encode(EncodeArgs),
    /// Reconstruct P6 frames from a .msvq container.
    Decode(DecodeArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Generate synthetic moving-rectangle clips plus a manifest.
    Synth(SynthArgs),
    /// Resize, segment, and split a tree of PPM frames into a dataset.
    Ingest(IngestArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with [model], [train], [data], [perceptual] sections.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory holding manifest.tsv and clip directories.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Train on this many generated clips instead of a dataset.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Weights container for the vgg16 extractor.
    #[arg(long)]
    vgg_weights: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Clip directory of PPM frames.
    #[arg(long = "in")]
    input: PathBuf,
    /// Container file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Container file to read.
    #[arg(long = "in")]
    input: PathBuf,
    /// Directory for the reconstructed frames.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory holding manifest.tsv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    split: EvalSplit,
    /// Report file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    Val,
    Test,
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Number of clips to generate.
    #[arg(long)]
    clips: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct IngestArgs {
    /// Source tree: either a directory of .ppm frames (one video) or
    /// class/video/*.ppm subdirectories.
    #[arg(long)]
    frames: PathBuf,
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
}

fn default_clip_frames() -> usize {
    CLIP_FRAMES
}
fn default_clip_side() -> usize {
    64
}

/// Geometry of synthetic training clips.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataConfig {
    #[serde(default = "default_clip_frames")]
    clip_frames: usize,
    #[serde(default = "default_clip_side")]
    clip_height: usize,
    #[serde(default = "default_clip_side")]
    clip_width: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            clip_frames: default_clip_frames(),
            clip_height: default_clip_side(),
            clip_width: default_clip_side(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ExtractorKind {
    #[default]
    Proxy,
    Vgg16,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PerceptualConfig {
    #[serde(default)]
    extractor: ExtractorKind,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    perceptual: PerceptualConfig,
}

fn load_config(path: &Path) -> Result<FileConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("config {}: {e}", path.display())))?;
    let cfg: FileConfig = toml::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("config {}: {e}", path.display())))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    if cfg.data.clip_frames == 0 || cfg.data.clip_height == 0 || cfg.data.clip_width == 0 {
        return Err(Error::InvalidConfig("clip geometry must be positive".into()));
    }
    Ok(cfg)
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Encode(args) => cmd_encode(args),
        Cmd::Decode(args) => cmd_decode(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Ingest(args) => cmd_ingest(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Internal(_) | Error::NonFinite(_) => 3,
                _ => 2,
            }
        }
    }
}

/// Offset between the training seed and the seeds of generated clips, so
/// synthetic data never reuses the model/codebook initialization streams.
const SYNTH_SEED_OFFSET: u64 = 0x53594e54;

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }

    let clips: Vec<VideoClip<f32>> = match (&args.data, args.synthetic) {
        (Some(dir), None) => {
            let manifest = Manifest::load(&dir.join("manifest.tsv"))?;
            let records: Vec<&ClipRecord> = manifest.split(Split::Train).collect();
            if records.is_empty() {
                return Err(Error::Data("manifest has no train-split clips".into()));
            }
            records
                .iter()
                .map(|r| read_clip_dir(&dir.join(&r.path)))
                .collect::<Result<_, _>>()?
        }
        (None, Some(n)) => {
            if n == 0 {
                return Err(Error::InvalidInput("--synthetic needs at least one clip".into()));
            }
            (0..n)
                .map(|i| {
                    synth_clip(
                        cfg.train.seed.wrapping_add(SYNTH_SEED_OFFSET).wrapping_add(i as u64),
                        cfg.data.clip_frames,
                        cfg.data.clip_height,
                        cfg.data.clip_width,
                    )
                })
                .collect::<Result<_, _>>()?
        }
        _ => unreachable!("clap enforces exactly one data source"),
    };

    let vgg;
    let proxy;
    let extractor: Option<&dyn FeatureExtractor<f32>> = if cfg.model.gamma > 0.0 {
        match cfg.perceptual.extractor {
            ExtractorKind::Proxy => {
                proxy = ConvStackExtractor::proxy(0);
                Some(&proxy)
            }
            ExtractorKind::Vgg16 => {
                let path = args.vgg_weights.as_ref().ok_or_else(|| {
                    Error::InvalidConfig(
                        "the vgg16 extractor needs --vgg-weights WEIGHTS.ntc".into(),
                    )
                })?;
                vgg = ConvStackExtractor::vgg16(&NamedTensors::load(path)?, true)?;
                Some(&vgg)
            }
        }
    } else {
        None
    };

    let mut state = TrainState::<f32>::init(&cfg.model, &cfg.train)?;
    let outcome = train(&mut state, &cfg.train, &clips, extractor, Some(&args.out), None)?;

    let mut log = String::new();
    for r in &outcome.records {
        log.push_str(&r.to_line());
        log.push('\n');
    }
    std::fs::write(args.out.join("train_log.txt"), log)?;

    let last = outcome.checkpoints.last().expect("train always writes an exit checkpoint");
    if let Some(r) = outcome.records.last() {
        println!("trained {} steps, final total loss {}", state.step, r.total);
    }
    println!("checkpoint {}", last.display());
    Ok(())
}

fn cmd_encode(args: EncodeArgs) -> Result<(), Error> {
    let loaded = load_checkpoint::<f32>(&args.ckpt)?;
    let clip = read_clip_dir::<f32>(&args.input)?;
    let model = &loaded.state.model;
    let (top, bottom) = model.encode_indices(&clip, &loaded.state.codebooks)?;
    let bytes = bitstream::serialize(
        top.as_ref().map(|g| (g, model.config().codebook_size_top as u32)),
        (&bottom, model.config().codebook_size_bottom as u32),
        clip.dims(),
    )?;
    std::fs::write(&args.out, &bytes)?;
    let rate = rate_report(&bitstream::deserialize(&bytes)?)?;
    println!(
        "wrote {} ({} bytes): theoretical_bpp={} deflate_bpp={} compression_ratio={}",
        args.out.display(),
        bytes.len(),
        rate.theoretical_bpp,
        rate.deflate_bpp,
        rate.compression_ratio,
    );
    Ok(())
}

fn cmd_decode(args: DecodeArgs) -> Result<(), Error> {
    let loaded = load_checkpoint::<f32>(&args.ckpt)?;
    let bytes = std::fs::read(&args.input)
        .map_err(|e| Error::Data(format!("{}: {e}", args.input.display())))?;
    let decoded = bitstream::deserialize(&bytes)?;
    let cfg = loaded.state.model.config();

    let container_levels = decoded.header.levels.len() as u8;
    if container_levels != cfg.levels {
        return Err(Error::Bitstream(format!(
            "container has {} levels but the checkpoint model has {}",
            container_levels, cfg.levels
        )));
    }
    let ks: Vec<u32> = decoded.header.levels.iter().map(|l| l.k).collect();
    let expected: Vec<u32> = if cfg.levels == 2 {
        vec![cfg.codebook_size_top as u32, cfg.codebook_size_bottom as u32]
    } else {
        vec![cfg.codebook_size_bottom as u32]
    };
    if ks != expected {
        return Err(Error::Bitstream(format!(
            "container codebook sizes {ks:?} do not match checkpoint sizes {expected:?}"
        )));
    }

    let recon = loaded.state.model.decode_indices(
        decoded.top.as_ref(),
        &decoded.bottom,
        &loaded.state.codebooks,
        CLIP_FPS,
    )?;
    write_clip_dir(&args.out, &recon)?;
    let (t, h, w) = recon.dims();
    println!("decoded {t} frames of {w}x{h} into {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let loaded = load_checkpoint::<f32>(&args.ckpt)?;
    let manifest = Manifest::load(&args.data.join("manifest.tsv"))?;
    let split = match args.split {
        EvalSplit::Val => Split::Val,
        EvalSplit::Test => Split::Test,
    };
    let mut items: Vec<(String, VideoClip<f32>)> = Vec::new();
    for r in manifest.split(split) {
        items.push((r.id.clone(), read_clip_dir(&args.data.join(&r.path))?));
    }
    let report = evaluate(
        &loaded.state.model,
        &loaded.state.codebooks,
        &items,
        &MetricConfig::default(),
    )?;
    std::fs::write(&args.out, report.render())?;
    println!(
        "{} clips: mean_psnr_db={} mean_ssim={} mean_theoretical_bpp={} mean_deflate_bpp={}",
        report.per_clip.len(),
        report.mean_psnr_db,
        report.mean_ssim,
        report.mean_theoretical_bpp,
        report.mean_deflate_bpp,
    );
    Ok(())
}

const SPLIT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    if args.clips == 0 {
        return Err(Error::InvalidInput("--clips must be at least 1".into()));
    }
    std::fs::create_dir_all(&args.out)?;
    let mut records = Vec::with_capacity(args.clips);
    for i in 0..args.clips {
        let name = format!("clip_{i:04}");
        let clip: VideoClip<f32> =
            synth_clip(args.seed.wrapping_add(i as u64), CLIP_FRAMES, 64, 64)?;
        write_clip_dir(&args.out.join(&name), &clip)?;
        records.push(ClipRecord {
            id: name.clone(),
            class: "synthetic".into(),
            path: name,
            frames: CLIP_FRAMES as u32,
            fps: CLIP_FPS,
            split: Split::Train,
        });
    }
    let manifest = split_dataset(&Manifest::new(records)?, SPLIT_RATIOS, args.seed)?;
    manifest.save(&args.out.join("manifest.tsv"))?;
    println!("wrote {} clips and manifest.tsv to {}", args.clips, args.out.display());
    Ok(())
}

fn cmd_ingest(args: IngestArgs) -> Result<(), Error> {
    let videos = discover_videos(&args.frames)?;
    std::fs::create_dir_all(&args.out)?;
    let mut records = Vec::new();
    for (class, video_name, dir) in &videos {
        let files = msvq::data::list_frame_files(dir)?;
        let images: Vec<_> = files
            .iter()
            .map(|p| msvq::data::ppm::read_ppm(p))
            .collect::<Result<Vec<_>, _>>()?;
        for (j, range) in segment_frames(images.len()).into_iter().enumerate() {
            let clip: VideoClip<f32> =
                msvq::data::frames_to_clip(&images[range], (64, 64))?;
            let name = format!("{class}_{video_name}_{j:02}");
            write_clip_dir(&args.out.join(&name), &clip)?;
            records.push(ClipRecord {
                id: name.clone(),
                class: class.clone(),
                path: name,
                frames: CLIP_FRAMES as u32,
                fps: CLIP_FPS,
                split: Split::Train,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "{}: no video reached the {CLIP_FRAMES}-frame minimum",
            args.frames.display()
        )));
    }
    let n = records.len();
    let manifest = split_dataset(&Manifest::new(records)?, SPLIT_RATIOS, 0)?;
    manifest.save(&args.out.join("manifest.tsv"))?;
    println!("ingested {} clips from {} videos into {}", n, videos.len(), args.out.display());
    Ok(())
}

/// (class, video, frame dir) triples, sorted for determinism. A directory
/// that itself holds .ppm files is a single video of class "default".
fn discover_videos(root: &Path) -> Result<Vec<(String, String, PathBuf)>, Error> {
    let has_frames = |dir: &Path| -> Result<bool, Error> {
        let entries =
            std::fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
        Ok(entries
            .filter_map(|e| e.ok())
            .any(|e| e.path().extension().is_some_and(|x| x == "ppm")))
    };
    if has_frames(root)? {
        let name = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".into());
        return Ok(vec![("default".into(), name, root.to_path_buf())]);
    }
    let mut out = Vec::new();
    let mut classes: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::Data(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    for class_dir in classes {
        let class = class_dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut videos: Vec<PathBuf> = std::fs::read_dir(&class_dir)
            .map_err(|e| Error::Data(format!("{}: {e}", class_dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        videos.sort();
        for video_dir in videos {
            let video = video_dir.file_name().unwrap().to_string_lossy().into_owned();
            out.push((class.clone(), video, video_dir));
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no frame directories found", root.display())));
    }
    Ok(out)
}
