use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wfm_core::data::{list_split, load_rgb, save_rgb, write_toy_corpus, SemanticMap, Split};
use wfm_core::generator::composite;
use wfm_core::masks::{generate_mask, load_mask_png, mask_file_name, save_mask_png, MaskKind, MaskSpec, RatioInterval};
use wfm_core::metrics::{evaluate, EvalGrid, EvalOptions, MetricsReport};
use wfm_core::train::{apply_preset, fit, load_generator, TrainConfig, DATA_ROOT_ENV};
use wfm_core::Tensor;

#[derive(Parser)]
#[command(name = "wfm", version, about = "Panorama inpainting with windowed Fourier mixers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Ablation preset applied on top of the config.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the 5x5 mask grid.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root; defaults to $WFM_DATA_ROOT.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Replace kept pixels with the input before scoring.
        #[arg(long)]
        composite: bool,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "metrics.json")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate at most this many scenes.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Fill the holes of one image.
    Inpaint {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// 8-bit mask, 255 = hole.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the raw generator output instead of the composite.
        #[arg(long)]
        raw: bool,
    },
    /// Write N mask PNGs.
    MakeMasks {
        #[arg(long)]
        kind: String,
        /// Ratio interval as fractions, e.g. 0.1,0.2.
        #[arg(long)]
        interval: String,
        #[arg(long)]
        n: usize,
        /// WxH, e.g. 512x256.
        #[arg(long)]
        size: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Semantic PNG (NYU40 colors); required for segmentation masks.
        #[arg(long)]
        semantic: Option<PathBuf>,
    },
    /// Render a procedural room corpus.
    ToyData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        size: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Format a metrics JSON file.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Md,
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("size `{s}` is not WxH"))?;
    Ok((w.trim().parse()?, h.trim().parse()?))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, preset, resume } => train(&config, preset.as_deref(), resume.as_deref()),
        Command::Eval {
            ckpt,
            data,
            composite,
            split,
            out,
            seed,
            limit,
        } => eval(&ckpt, data, composite, &split, &out, seed, limit),
        Command::Inpaint {
            ckpt,
            image,
            mask,
            out,
            raw,
        } => inpaint(&ckpt, &image, &mask, &out, raw),
        Command::MakeMasks {
            kind,
            interval,
            n,
            size,
            seed,
            out,
            semantic,
        } => make_masks(&kind, &interval, n, &size, seed, &out, semantic.as_deref()),
        Command::ToyData { n, size, seed, out } => {
            let (w, h) = parse_size(&size)?;
            let index = write_toy_corpus(&out, n, h, w, seed)?;
            println!("wrote {} scenes to {}", index.scenes.len(), out.display());
            Ok(())
        }
        Command::Report { input, format } => {
            let report = MetricsReport::from_json(&fs::read_to_string(&input)?)?;
            match format {
                Format::Csv => print!("{}", report.to_csv()?),
                Format::Md => print!("{}", report.to_markdown()),
            }
            Ok(())
        }
    }
}

fn train(config: &Path, preset: Option<&str>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(p) = preset {
        apply_preset(&mut cfg, p)?;
        cfg.validate()?;
    }
    let out = fit(cfg, resume)?;
    let st = &out.state;
    println!(
        "finished at epoch {} step {}; checkpoint {}",
        st.epoch,
        st.step,
        st.config.output_dir.join("last.wfm").display()
    );
    Ok(())
}

fn eval(
    ckpt: &Path,
    data: Option<PathBuf>,
    composite: bool,
    split: &str,
    out: &Path,
    seed: u64,
    limit: Option<usize>,
) -> Result<()> {
    let (gen, ps, cfg) = load_generator(ckpt)?;
    let root = match data {
        Some(d) => d,
        None => std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .with_context(|| format!("--data not given and ${DATA_ROOT_ENV} is empty"))?,
    };
    let mut entries = list_split(&root, split.parse::<Split>()?, &cfg.data.lighting)?;
    if let Some(l) = limit {
        entries.truncate(l);
    }
    let (h, w) = (cfg.height, cfg.width);
    let model = |x: &Tensor<f32>, m: &Tensor<f32>| gen.generate(&ps, x, m);
    let grid = EvalGrid {
        seed,
        ..EvalGrid::default()
    };
    let report = evaluate(
        &model,
        entries.iter().map(|e| e.load(h, w)),
        &grid,
        EvalOptions { composite },
    )?;
    fs::write(out, report.to_json()?)?;
    print!("{}", report.to_markdown());
    println!("metrics written to {}", out.display());
    Ok(())
}

fn inpaint(ckpt: &Path, image: &Path, mask: &Path, out: &Path, raw: bool) -> Result<()> {
    let (gen, ps, _) = load_generator(ckpt)?;
    let x = load_rgb(image)?;
    let m = load_mask_png(mask)?;
    if (x.height(), x.width()) != (m.height(), m.width()) {
        bail!(
            "image is {}x{} but mask is {}x{}",
            x.width(),
            x.height(),
            m.width(),
            m.height()
        );
    }
    let y = gen.generate(&ps, &x, &m)?;
    let y = if raw { y } else { composite(&x, &y, &m)? };
    save_rgb(out, &y)?;
    Ok(())
}

fn make_masks(
    kind: &str,
    interval: &str,
    n: usize,
    size: &str,
    seed: u64,
    out: &Path,
    semantic: Option<&Path>,
) -> Result<()> {
    let kind: MaskKind = kind.parse()?;
    let interval: RatioInterval = interval.parse()?;
    let (w, h) = parse_size(size)?;
    let sem = match semantic {
        Some(p) => {
            let img = wfm_core::data::load_rgb(p)?;
            let rgb = wfm_core::data::tensor_to_rgb(&img)?;
            Some(SemanticMap::from_rgb(&rgb).resize(h, w))
        }
        None if kind == MaskKind::Segmentation => bail!("segmentation masks need --semantic"),
        None => None,
    };
    fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = MaskSpec {
        kind,
        interval,
        height: h,
        width: w,
    };
    for i in 0..n {
        let m = generate_mask(&spec, sem.as_ref(), &mut rng)?;
        save_mask_png(&out.join(mask_file_name(kind, &interval, seed, i)), &m)?;
    }
    println!("wrote {n} {kind} masks to {}", out.display());
    Ok(())
}
