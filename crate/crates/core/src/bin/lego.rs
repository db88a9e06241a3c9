//! Command-line front end for the pipeline: corpus rendering, autoencoder
//! training, tokenization, pretraining, and downstream evaluation.

use std::path::PathBuf;

use anyhow::{bail, Context};
use candle_core::Device;
use clap::{Args, Parser, Subcommand};

use lego_core::codebook::{write_tokens_file, TextKnowledgeCodebook};
use lego_core::corpus;
use lego_core::tvqvae::{train_tvqvae, Tvqvae, TvqvaeConfig, TvqvaeTrainConfig};
use lego_core::util::image::Image;

#[derive(Parser)]
#[command(name = "lego", version, about = "Codebook-guided self-supervised pretraining for scene text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic corpus utilities.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Autoencoder (tokenizer) training and inspection.
    #[command(subcommand)]
    Tvqvae(TvqvaeCommand),
    /// Frozen-tokenizer queries.
    #[command(subcommand)]
    Codebook(CodebookCommand),
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Renders a word-image dataset: `images/*.png` plus `manifest.jsonl`.
    Render(CorpusRenderArgs),
}

#[derive(Args)]
struct CorpusRenderArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Root seed; the same seed reproduces the corpus byte for byte.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional word list (one lowercase alphanumeric word per line,
    /// at most 10 characters); defaults to the built-in list.
    #[arg(long)]
    wordlist: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TvqvaeCommand {
    /// Trains the autoencoder on a rendered corpus and writes the frozen
    /// codebook file.
    Train(TvqvaeTrainArgs),
    /// Reconstructs an image through a trained codebook file.
    Reconstruct(TvqvaeReconstructArgs),
    /// Prints a codebook file's header and codebook statistics.
    Inspect(TvqvaeInspectArgs),
}

#[derive(Args)]
struct TvqvaeTrainArgs {
    /// Corpus directory produced by `corpus render`.
    #[arg(long)]
    corpus: PathBuf,
    /// Output codebook file.
    #[arg(long)]
    out: PathBuf,
    /// Optional TOML config overriding the model/training defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the root training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TvqvaeReconstructArgs {
    /// Trained codebook file.
    #[arg(long)]
    model: PathBuf,
    /// Input PNG (must match the model geometry, default 32x128).
    #[arg(long)]
    image: PathBuf,
    /// Output PNG: the input and its reconstruction side by side, with the
    /// token indices printed to stdout.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TvqvaeInspectArgs {
    /// Trained codebook file.
    #[arg(long)]
    model: PathBuf,
    /// Decode this codebook entry through the decoder and report the
    /// resulting patch; omit for header and codebook statistics only.
    #[arg(long)]
    index: Option<usize>,
    /// Where to write the decoded patch PNG when `--index` is given.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CodebookCommand {
    /// Tokenizes every image of a corpus: one JSON record per image with
    /// its source id and 8 indices.
    Tokenize(CodebookTokenizeArgs),
}

#[derive(Args)]
struct CodebookTokenizeArgs {
    /// Trained codebook file.
    #[arg(long)]
    model: PathBuf,
    /// Corpus directory produced by `corpus render`.
    #[arg(long)]
    corpus: PathBuf,
    /// Output `tokens.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

/// Both halves of `tvqvae train`'s optional TOML config file.
#[derive(Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TvqvaeFileConfig {
    #[serde(default)]
    model: Option<TvqvaeConfig>,
    #[serde(default)]
    train: Option<TvqvaeTrainConfig>,
}

fn main() -> anyhow::Result<()> {
    // Single-threaded math when byte-for-byte reproducibility across runs
    // matters more than speed. Must happen before any compute pool spins up.
    if std::env::var("LEGO_DETERMINISTIC").as_deref() == Ok("1") {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let cli = Cli::parse();
    match cli.command {
        Command::Corpus(CorpusCommand::Render(args)) => corpus_render(args),
        Command::Tvqvae(TvqvaeCommand::Train(args)) => tvqvae_train(args),
        Command::Tvqvae(TvqvaeCommand::Reconstruct(args)) => tvqvae_reconstruct(args),
        Command::Tvqvae(TvqvaeCommand::Inspect(args)) => tvqvae_inspect(args),
        Command::Codebook(CodebookCommand::Tokenize(args)) => codebook_tokenize(args),
    }
}

fn corpus_render(args: CorpusRenderArgs) -> anyhow::Result<()> {
    let words = match &args.wordlist {
        Some(path) => corpus::load_wordlist(path)
            .with_context(|| format!("loading wordlist {}", path.display()))?,
        None => corpus::default_wordlist(),
    };
    let manifest = corpus::build_corpus(&words, args.count, args.seed, &args.out)?;
    let val = manifest.iter().filter(|e| e.split == "val").count();
    println!(
        "wrote {} images ({} train / {val} val) to {}",
        manifest.len(),
        manifest.len() - val,
        args.out.display()
    );
    Ok(())
}

fn tvqvae_train(args: TvqvaeTrainArgs) -> anyhow::Result<()> {
    let file_cfg: TvqvaeFileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TvqvaeFileConfig::default(),
    };
    let model_cfg = file_cfg.model.unwrap_or_default();
    let mut train_cfg = file_cfg.train.unwrap_or_default();
    if let Some(epochs) = args.epochs {
        train_cfg.epochs = epochs;
    }
    if let Some(seed) = args.seed {
        train_cfg.seed = seed;
    }

    let manifest = corpus::load_manifest(&args.corpus)?;
    let samples = manifest
        .iter()
        .map(|e| corpus::load_sample(&args.corpus, e))
        .collect::<lego_core::Result<Vec<_>>>()?;
    println!(
        "training on {} images: {} epochs, batch {}, lr {}",
        samples.len(),
        train_cfg.epochs,
        train_cfg.batch_size,
        train_cfg.lr
    );
    let (model, logs) = train_tvqvae(&samples, &model_cfg, &train_cfg, &Device::Cpu)?;
    for log in &logs {
        println!(
            "epoch {:>3}: total {:.5} pixel {:.5} perceptual {:.5} \
             codebook {:.5} commitment {:.5} utilization {:.3}",
            log.epoch, log.total, log.pixel, log.perceptual, log.codebook,
            log.commitment, log.utilization
        );
    }
    model.save(&args.out)?;
    println!("saved codebook file to {}", args.out.display());
    println!("content hash {}", model.content_hash()?);
    Ok(())
}

fn tvqvae_reconstruct(args: TvqvaeReconstructArgs) -> anyhow::Result<()> {
    let model = Tvqvae::load(&args.model, &Device::Cpu)?;
    let image = Image::load_png(&args.image)?;
    if image.height() != model.cfg().img_h || image.width() != model.cfg().img_w {
        bail!(
            "image is {}x{}, model expects {}x{}",
            image.height(),
            image.width(),
            model.cfg().img_h,
            model.cfg().img_w
        );
    }
    let batch = Image::batch_to_tensor(std::slice::from_ref(&image), &Device::Cpu)?;
    let (recon, indices) = model.reconstruct(&batch)?;
    let recon_img = Image::from_chw_tensor(&recon.squeeze(0)?)?;

    // Input on top, reconstruction below, one separator row.
    let (h, w) = (image.height(), image.width());
    let mut side = Image::filled(2 * h + 1, w, 0.5);
    for y in 0..h {
        for x in 0..w {
            side.set_pixel(y, x, image.pixel(y, x));
            side.set_pixel(h + 1 + y, x, recon_img.pixel(y, x));
        }
    }
    side.save_png(&args.out)?;
    println!("indices: {:?}", indices[0]);
    println!("wrote input/reconstruction pair to {}", args.out.display());
    Ok(())
}

fn tvqvae_inspect(args: TvqvaeInspectArgs) -> anyhow::Result<()> {
    let model = Tvqvae::load(&args.model, &Device::Cpu)?;
    let cfg = model.cfg();
    let (gh, gw) = cfg.grid();
    println!("codebook file {}", args.model.display());
    println!("  codes        {}", cfg.n_codes);
    println!("  dim          {}", cfg.dim);
    println!("  patch        {}x{} ({gh}x{gw} grid)", cfg.r1, cfg.r2);
    println!("  image        {}x{}", cfg.img_h, cfg.img_w);
    println!("  encoder      hidden {} / {} blocks", cfg.hidden, cfg.n_blocks);
    println!("  content hash {}", model.content_hash()?);

    let emb = model.embeddings().flatten_all()?.to_vec1::<f32>()?;
    let d = cfg.dim;
    let norms: Vec<f64> = emb
        .chunks_exact(d)
        .map(|row| row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt())
        .collect();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = norms.iter().cloned().fold(0.0f64, f64::max);
    println!("  row norms    min {min:.4} mean {mean:.4} max {max:.4}");

    if let Some(k) = args.index {
        if k >= cfg.n_codes {
            bail!("index {k} out of range for {} codes", cfg.n_codes);
        }
        println!("  entry {k}: norm {:.4}", norms[k]);
        // Decode an image whose every slot carries this entry: what the
        // decoder renders for this code in isolation.
        let row = model.embeddings().narrow(0, k, 1)?; // (1, D)
        let tiled = row
            .unsqueeze(0)?
            .broadcast_as((1, cfg.n_patches(), cfg.dim))?
            .contiguous()?;
        let decoded = model.decode(&tiled)?;
        let img = Image::from_chw_tensor(&decoded.squeeze(0)?)?;
        let means = img.channel_means();
        println!(
            "  decoded patch channel means: [{:.3}, {:.3}, {:.3}]",
            means[0], means[1], means[2]
        );
        if let Some(out) = &args.out {
            img.save_png(out)?;
            println!("  wrote decoded patch image to {}", out.display());
        }
    }
    Ok(())
}

fn codebook_tokenize(args: CodebookTokenizeArgs) -> anyhow::Result<()> {
    let cb = TextKnowledgeCodebook::load(&args.model, &Device::Cpu)?;
    let manifest = corpus::load_manifest(&args.corpus)?;
    let mut sequences = Vec::with_capacity(manifest.len());
    for entry in &manifest {
        let sample = corpus::load_sample(&args.corpus, entry)?;
        sequences.push(cb.tokenize(&sample.image, &sample.sample_id)?);
    }
    write_tokens_file(&args.out, &sequences)?;
    println!(
        "tokenized {} images with codebook {} -> {}",
        sequences.len(),
        cb.content_hash(),
        args.out.display()
    );
    Ok(())
}
