//! `adaptreid`: generate the synthetic two-domain dataset, train in any of
//! the three modes, export translation grids, and evaluate retrieval and
//! attention quality. Every command takes one config file plus repeatable
//! `--set section.key=value` overrides; exit codes distinguish config errors
//! (2), data errors (3) and numeric aborts (4).

use adaptreid_core::config::RunConfig;
use adaptreid_core::data::{
    build_domain_pools, generate_synthetic_dataset, load_manifest, stack_images, stack_masks,
    write_synthetic_dataset, Domain, DomainPools, LabeledImage, MANIFEST_NAME,
};
use adaptreid_core::error::{Error, Result};
use adaptreid_core::eval::{
    attention_iou, cmc, export_ranking_grid, extract_embeddings, foreground_preservation,
    map_score, rank_queries, write_embeddings_csv, write_metrics_csv, Embedder, IdCam,
};
use adaptreid_core::model::Side;
use adaptreid_core::nn::Tape;
use adaptreid_core::train::{
    load_joint, load_reid, peek_kind, train, CheckpointKind, NoopObserver,
};
use adaptreid_core::translate::{export_translation_grid, translate_s2t};
use clap::{Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "adaptreid", version, about = "attention-guided domain translation with joint re-ID")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain dataset with ground-truth masks.
    GenData {
        #[arg(short, long)]
        config: PathBuf,
        /// Override a config value, e.g. --set synthetic.num_identities=12
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train in the configured mode, writing a self-describing run directory.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Export per-image translation grids (input | mask | raw | x_b | x_f | composed).
    Translate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint: CMC/mAP, attention IoU and foreground
    /// preservation where measurable, ranking grids, embedding export.
    Evaluate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData { config, set } => cmd_gen_data(&config, &set),
        Command::Train { config, set } => cmd_train(&config, &set),
        Command::Translate { config, checkpoint, input_dir, out_dir, set } => {
            cmd_translate(&config, &checkpoint, &input_dir, &out_dir, &set)
        }
        Command::Evaluate { config, checkpoint, set } => cmd_evaluate(&config, &checkpoint, &set),
    };
    if let Err(err) = outcome {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn cmd_gen_data(config_path: &Path, overrides: &[String]) -> Result<()> {
    let config = RunConfig::load(config_path, overrides)?;
    let (source, target) = generate_synthetic_dataset(&config.synthetic)?;
    let manifest = write_synthetic_dataset(&config.paths.data_dir, &source, &target)?;
    println!(
        "wrote {} source + {} target images under {}",
        source.len(),
        target.len(),
        config.paths.data_dir.display()
    );
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn load_dataset(config: &RunConfig) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let manifest = config.paths.data_dir.join(MANIFEST_NAME);
    if !manifest.exists() {
        return Err(Error::Data(format!(
            "no dataset manifest at {} (run `adaptreid gen-data` first)",
            manifest.display()
        )));
    }
    let all = load_manifest(&manifest, Some(config.image_hw()))?;
    let (mut source, mut target) = (Vec::new(), Vec::new());
    for img in all {
        match img.domain {
            Domain::Source => source.push(img),
            Domain::Target => target.push(img),
        }
    }
    Ok((source, target))
}

fn pools(config: &RunConfig) -> Result<DomainPools> {
    let (source, target) = load_dataset(config)?;
    build_domain_pools(&source, &target, &config.eval.protocol)
}

fn cmd_train(config_path: &Path, overrides: &[String]) -> Result<()> {
    let config = RunConfig::load(config_path, overrides)?;
    let pools = pools(&config)?;
    let run_dir = config.run_dir();
    if run_dir.exists() {
        return Err(Error::Config(format!(
            "run directory {} already exists; choose another paths.run_name",
            run_dir.display()
        )));
    }
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let snapshot = run_dir.join("config.snapshot");
    fs::write(&snapshot, config.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;
    println!(
        "training mode={} on {} labeled source / {} target images -> {}",
        config.train.mode,
        pools.source_train.len(),
        pools.target_train.len(),
        run_dir.display()
    );
    let outcome = train(
        &config.train,
        &config.network,
        &config.weights,
        &pools.source_train,
        &pools.target_train,
        &run_dir,
        &mut NoopObserver,
    )?;
    for stage in &outcome.stages {
        println!("stage {}: losses {}", stage.dir.display(), stage.loss_csv.display());
    }
    println!("final checkpoint: {}", outcome.reid_checkpoint().display());
    Ok(())
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_lowercase).as_deref(),
                    Some("png" | "jpg" | "jpeg")
                )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("{} contains no images", dir.display())));
    }
    Ok(files)
}

fn cmd_translate(
    config_path: &Path,
    checkpoint: &Path,
    input_dir: &Path,
    out_dir: &Path,
    overrides: &[String],
) -> Result<()> {
    let config = RunConfig::load(config_path, overrides)?;
    if peek_kind(checkpoint)? != CheckpointKind::Joint {
        return Err(Error::Checkpoint(
            "translation needs a checkpoint that contains the generator networks".into(),
        ));
    }
    let state = load_joint(checkpoint)?;
    let files = list_images(input_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (h, w) = config.image_hw();
    for file in &files {
        let img = image::open(file)
            .map_err(|e| Error::Image { path: file.clone(), source: e })?
            .into_rgb8();
        let img = if (img.height() as usize, img.width() as usize) != (h, w) {
            image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle)
        } else {
            img
        };
        let tensor = adaptreid_core::data::io::rgb8_to_tensor(&img);
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let out = out_dir.join(format!("{stem}_grid.png"));
        export_translation_grid(&state.models, &state.store, &tensor, Side::Source, &out)?;
    }
    println!("wrote {} translation grids to {}", files.len(), out_dir.display());
    Ok(())
}

fn cmd_evaluate(config_path: &Path, checkpoint: &Path, overrides: &[String]) -> Result<()> {
    let config = RunConfig::load(config_path, overrides)?;
    let pools = pools(&config)?;
    if pools.target_query.is_empty() {
        return Err(Error::Data("evaluation split has no queries".into()));
    }
    let eval_dir = checkpoint
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("eval");
    fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;

    enum Loaded {
        Joint(adaptreid_core::train::JointState),
        Reid(adaptreid_core::train::ReidState),
    }
    let loaded = match peek_kind(checkpoint)? {
        CheckpointKind::Joint => Loaded::Joint(load_joint(checkpoint)?),
        CheckpointKind::Reid => Loaded::Reid(load_reid(checkpoint)?),
    };
    let (embedder, store): (&dyn Embedder, _) = match &loaded {
        Loaded::Joint(s) => (&s.models, &s.store),
        Loaded::Reid(s) => (&s.net, &s.store),
    };

    let query_refs: Vec<&LabeledImage> = pools.target_query.iter().collect();
    let gallery_refs: Vec<&LabeledImage> = pools.target_gallery.iter().collect();
    let query_emb = extract_embeddings(embedder, store, &query_refs)?;
    let gallery_emb = extract_embeddings(embedder, store, &gallery_refs)?;
    let qm: Vec<IdCam> = query_refs.iter().map(|i| IdCam::from(*i)).collect();
    let gm: Vec<IdCam> = gallery_refs.iter().map(|i| IdCam::from(*i)).collect();
    let rankings = rank_queries(&query_emb, &qm, &gallery_emb, &gm)?;
    let cmc_out = cmc(&rankings, &config.eval.cmc_ks)?;
    let map_out = map_score(&rankings)?;

    let mut rows: Vec<(String, Option<usize>, f64)> = config
        .eval
        .cmc_ks
        .iter()
        .zip(&cmc_out.values)
        .map(|(&k, &v)| ("cmc".to_string(), Some(k), v))
        .collect();
    rows.push(("map".into(), None, map_out.value));

    // attention and preservation metrics need a joint model and ground truth
    if let Loaded::Joint(state) = &loaded {
        let have_masks = pools.source_test.iter().all(|i| i.gt_mask.is_some())
            && !pools.source_test.is_empty();
        if state.attention_enabled && have_masks {
            let refs: Vec<&LabeledImage> = pools.source_test.iter().collect();
            let mut maps_all = Vec::new();
            for chunk in refs.chunks(32) {
                let batch = stack_images(chunk)?;
                let mut t = Tape::new(false);
                let x = t.leaf(batch);
                let a = state.models.forward_attention(&mut t, &state.store, Side::Source, x)?;
                maps_all.push(t.value(a).clone());
            }
            let maps = concat_batches(&maps_all)?;
            let gts = stack_masks(&refs)?;
            rows.push((
                "attn_iou".into(),
                None,
                attention_iou(&maps, &gts, config.eval.attn_iou_threshold)?,
            ));
        }
        if have_masks {
            let refs: Vec<&LabeledImage> = pools.source_test.iter().collect();
            let mut inputs = Vec::new();
            let mut composed = Vec::new();
            for chunk in refs.chunks(32) {
                let batch = stack_images(chunk)?;
                let mut t = Tape::new(false);
                let x = t.leaf(batch.clone());
                let out = translate_s2t(&state.models, &mut t, &state.store, x)?;
                inputs.push(batch);
                composed.push(t.value(out.composed).clone());
            }
            let inputs = concat_batches(&inputs)?;
            let composed = concat_batches(&composed)?;
            let gts = stack_masks(&refs)?;
            rows.push(("fg_mae".into(), None, foreground_preservation(&inputs, &composed, &gts)?));
        }
    }

    let metrics_path = eval_dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &rows)?;

    let emb_path = eval_dir.join("embeddings.csv");
    let mut all_refs = query_refs.clone();
    all_refs.extend(gallery_refs.iter().copied());
    let mut all_emb = query_emb.data().to_vec();
    all_emb.extend_from_slice(gallery_emb.data());
    let dim = query_emb.shape()[1];
    let all_emb = adaptreid_core::Tensor::from_vec(&[all_refs.len(), dim], all_emb);
    write_embeddings_csv(&emb_path, &all_refs, &all_emb)?;

    let grid_queries = config.eval.ranking_grid_queries.min(query_refs.len());
    if grid_queries > 0 {
        let sub = adaptreid_core::eval::RankingResult {
            queries: rankings.queries[..grid_queries].to_vec(),
        };
        export_ranking_grid(
            &query_refs[..grid_queries],
            &sub,
            &gallery_refs,
            config.eval.ranking_top_k,
            &eval_dir.join("ranking_grid.png"),
        )?;
    }

    for (metric, k, v) in &rows {
        match k {
            Some(k) => println!("{metric}@{k}: {v:.4}"),
            None => println!("{metric}: {v:.4}"),
        }
    }
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

fn concat_batches(batches: &[adaptreid_core::Tensor]) -> Result<adaptreid_core::Tensor> {
    let first = batches
        .first()
        .ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::new();
    let mut n = 0;
    for b in batches {
        n += b.shape()[0];
        data.extend_from_slice(b.data());
    }
    shape[0] = n;
    Ok(adaptreid_core::Tensor::from_vec(&shape, data))
}
