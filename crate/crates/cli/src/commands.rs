use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use image::RgbImage;

use crate::config::RunConfig;
use crate::run::{latest_checkpoint, RunDir};
use fashion_rag::dataset::{
    generate_toy_dataset, make_unpaired_assignment, write_assignment, CaptionSpec, Split,
};
use fashion_rag::diffusion::{
    generate, load_checkpoint, sample_seed, train_stage1, train_stage2, Example, FashionRag, GenerationInput,
    TrainConfig, TrainOutput,
};
use fashion_rag::metrics::{
    clip_i, clip_t, distribution_realism, pairwise_fidelity, read_eval_manifest, write_eval_manifest, DualEncoder,
    EvalEntry, MetricReport, ProjectionFeatures, Setting,
};
use fashion_rag::pipeline::{load_split, prepare_samples, Catalog, PreparedSample, RetrievalScope};
use fashion_rag::retrieval::{
    encode_text_query, load_index, retrieve_top_k, save_index, ColorStatsImageEncoder, ColorWordTextEncoder,
    RetrievalFilter,
};
use fashion_rag::{Category, Error, Result};

const GENERATION_BATCH: usize = 8;

pub fn toydata(out: &Path, n: usize, seed: u64, config: &RunConfig) -> Result<()> {
    let summary = generate_toy_dataset(out, n, seed, &config.profile.dims())?;
    println!(
        "wrote {} train / {} test samples and {} catalog garments to {}",
        summary.train,
        summary.test,
        summary.garments.len() + summary.catalog_only,
        out.display()
    );
    Ok(())
}

pub fn index_build(config: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let root = config.require_data_root()?;
    let (catalog, report) = Catalog::build(&root)?;
    let out = out.or_else(|| config.index.clone()).unwrap_or_else(|| root.join("index.frix"));
    save_index(&catalog.index, &out)?;
    println!(
        "indexed {} garments ({} failed) with `{}` -> {}",
        catalog.index.len(),
        report.failed(),
        catalog.index.encoder_tag(),
        out.display()
    );
    Ok(())
}

pub fn index_query(config: &RunConfig, caption: &str, k: usize, category: Option<Category>) -> Result<()> {
    let path = config
        .index
        .clone()
        .unwrap_or_else(|| config.data_root.join("index.frix"));
    let index = load_index(&path)?;
    let query = encode_text_query(caption, &ColorWordTextEncoder)?;
    let filter = RetrievalFilter {
        category,
        ..Default::default()
    };
    for (id, score) in retrieve_top_k(&index, &query, k, &filter)?.entries {
        println!("{id}\t{score:.6}");
    }
    Ok(())
}

fn train_config(config: &RunConfig, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: config.batch_size,
        lr: config.lr,
        weight_decay: 0.01,
        seed: config.seed,
        cond_dropout: config.cond_dropout,
        checkpoint_every: config.checkpoint_every,
    }
}

fn training_examples(model: &FashionRag, config: &RunConfig, root: &Path) -> Result<Vec<Example>> {
    let catalog = Catalog::open(root, config.index.as_deref())?;
    let (train, _) = load_split(root, Split::Train, model)?;
    let scope = RetrievalScope {
        exclude_own: config.exclude_own,
        ..Default::default()
    };
    let spec = CaptionSpec::new(config.n_c)?;
    Ok(prepare_samples(model, train, &catalog, spec, &scope, None)?
        .into_iter()
        .map(|p| p.example)
        .collect())
}

pub fn train(stage: u8, config: &RunConfig, argv: &str) -> Result<()> {
    let root = config.require_data_root()?;
    let (mut model, init) = match stage {
        1 => (FashionRag::new(config.profile, config.seed, DType::F32, &Device::Cpu)?, None),
        _ => {
            let ckpt = config
                .checkpoint
                .clone()
                .or_else(|| latest_checkpoint(&config.runs_dir, "stage1-"))
                .ok_or_else(|| Error::config("checkpoint", "stage 2 needs a stage-1 checkpoint"))?;
            let loaded = load_checkpoint(&ckpt, DType::F32, &Device::Cpu)?;
            if loaded.meta.profile != config.profile {
                return Err(Error::config("profile", "differs from the checkpoint's profile"));
            }
            (loaded.model, Some(ckpt))
        }
    };
    let data = training_examples(&model, config, &root)?;
    let run = RunDir::create(&config.runs_dir)?;
    let mut inputs: Vec<&Path> = vec![&root];
    if let Some(c) = &init {
        inputs.push(c);
    }
    run.write_manifest(argv, config, &inputs)?;
    let out = TrainOutput {
        checkpoint_dir: run.checkpoints(),
        loss_log: run.reports().join(format!("stage{stage}-loss.tsv")),
    };
    let report = if stage == 1 {
        train_stage1(&mut model, &data, &train_config(config, config.stage1_steps), Some(&out))?
    } else {
        train_stage2(&mut model, &data, &train_config(config, config.stage2_steps), Some(&out))?
    };
    let n = report.losses.len();
    println!(
        "stage {stage}: {n} steps on {} examples, loss {:.4} -> {:.4}",
        data.len(),
        report.mean_loss(0..n.min(20)),
        report.mean_loss(n.saturating_sub(20)..n)
    );
    println!("loss log: {}", out.loss_log.display());
    if let Some(c) = report.checkpoints.last() {
        println!("checkpoint: {}", c.display());
    }
    Ok(())
}

fn eval_model(config: &RunConfig) -> Result<(FashionRag, PathBuf)> {
    let ckpt = config
        .checkpoint
        .clone()
        .or_else(|| latest_checkpoint(&config.runs_dir, "stage2-"))
        .or_else(|| latest_checkpoint(&config.runs_dir, "stage1-"))
        .ok_or_else(|| Error::config("checkpoint", "no checkpoint given and none found under runs_dir"))?;
    let loaded = load_checkpoint(&ckpt, DType::F32, &Device::Cpu)?;
    Ok((loaded.model, ckpt))
}

/// Test-split samples prepared for one (setting, N_c) cell.
fn eval_samples(model: &FashionRag, config: &RunConfig, root: &Path, catalog: &Catalog, n_c: usize, reports: &Path) -> Result<Vec<PreparedSample>> {
    let (test, _) = load_split(root, Split::Test, model)?;
    let scope = RetrievalScope::evaluation(&test);
    let assignment = match config.setting {
        Setting::Paired => None,
        Setting::Unpaired => {
            let anns: Vec<_> = test.iter().map(|s| s.annotation.clone()).collect();
            let a = make_unpaired_assignment(&anns, config.unpaired_seed)?;
            write_assignment(&a, &reports.join("unpaired.tsv"))?;
            Some(a)
        }
    };
    prepare_samples(model, test, catalog, CaptionSpec::new(n_c)?, &scope, assignment.as_ref())
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Generates one cell and writes its images and evaluation manifest.
fn generate_cell(
    model: &FashionRag,
    samples: &[PreparedSample],
    config: &RunConfig,
    n_r: usize,
    out_dir: &Path,
) -> Result<(Vec<RgbImage>, Vec<EvalEntry>)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut images = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(GENERATION_BATCH) {
        let inputs: Vec<GenerationInput<'_>> = chunk
            .iter()
            .map(|p| GenerationInput {
                example: &p.example,
                image: &p.loaded.image,
                mask: &p.loaded.mask,
                seed: sample_seed(config.seed, &p.example.sample_id),
            })
            .collect();
        images.extend(generate(model, &inputs, n_r, &config.guidance)?);
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (p, img) in samples.iter().zip(&images) {
        let path = out_dir.join(format!("{}.png", p.example.sample_id));
        save_png(img, &path)?;
        entries.push(EvalEntry {
            sample_id: p.example.sample_id.clone(),
            generated: path,
            reference: p.loaded.annotation.image.clone(),
            caption: p.example.caption.clone(),
            retrieved_ids: p.example.retrieved_ids.iter().take(n_r).cloned().collect(),
        });
    }
    write_eval_manifest(&out_dir.join("manifest.tsv"), &entries)?;
    Ok((images, entries))
}

fn open_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?
        .to_rgb8())
}

/// Metrics of generated images against their references.
fn score(
    generated: &[RgbImage],
    entries: &[EvalEntry],
    catalog: &Catalog,
    setting: Setting,
    echo: Vec<(String, String)>,
) -> Result<MetricReport> {
    let mut references = Vec::with_capacity(entries.len());
    for (e, g) in entries.iter().zip(generated) {
        let r = open_rgb(&e.reference)?;
        references.push(if r.dimensions() == g.dimensions() {
            r
        } else {
            image::imageops::resize(&r, g.width(), g.height(), image::imageops::FilterType::Triangle)
        });
    }
    let mut garments: HashMap<&str, RgbImage> = HashMap::new();
    for id in entries.iter().flat_map(|e| e.retrieved_ids.iter()) {
        if !garments.contains_key(id.as_str()) {
            garments.insert(id, catalog.image(id)?);
        }
    }
    let retrieved: Vec<Vec<RgbImage>> = entries
        .iter()
        .map(|e| e.retrieved_ids.iter().map(|id| garments[id.as_str()].clone()).collect())
        .collect();
    let (lpips, ssim) = match setting {
        Setting::Paired => {
            let (l, s) = pairwise_fidelity(generated, &references)?;
            (Some(l), Some(s))
        }
        Setting::Unpaired => (None, None),
    };
    let (fid, kid) = distribution_realism(generated, &references, &ProjectionFeatures::default())?;
    let image_tower = ColorStatsImageEncoder;
    let enc = DualEncoder::new(&image_tower, &ColorWordTextEncoder)?;
    let captions: Vec<String> = entries.iter().map(|e| e.caption.clone()).collect();
    Ok(MetricReport {
        setting,
        lpips,
        ssim,
        fid,
        kid,
        clip_t: clip_t(generated, &captions, &enc)?,
        clip_i: clip_i(generated, &retrieved, &enc)?,
        n_samples: generated.len(),
        config: echo,
    })
}

fn cell_label(setting: Setting, n_c: usize, n_r: usize) -> String {
    format!("{setting}-nc{n_c}-nr{n_r}")
}

fn echo(config: &RunConfig, ckpt: &Path, n_c: usize, n_r: usize) -> Vec<(String, String)> {
    vec![
        ("checkpoint".into(), ckpt.display().to_string()),
        ("n_c".into(), n_c.to_string()),
        ("n_r".into(), n_r.to_string()),
        ("guidance.text".into(), config.guidance.text_scale.to_string()),
        ("guidance.pose".into(), config.guidance.pose_scale.to_string()),
        ("guidance.steps".into(), config.guidance.steps.to_string()),
        ("seed".into(), config.seed.to_string()),
        ("features".into(), ProjectionFeatures::default().tag().to_string()),
    ]
}

pub fn generate_cmd(config: &RunConfig, argv: &str) -> Result<()> {
    let root = config.require_data_root()?;
    let (model, ckpt) = eval_model(config)?;
    let catalog = Catalog::open(&root, config.index.as_deref())?;
    let run = RunDir::create(&config.runs_dir)?;
    run.write_manifest(argv, config, &[&root, &ckpt])?;
    let samples = eval_samples(&model, config, &root, &catalog, config.n_c, &run.reports())?;
    let dir = run.images().join(cell_label(config.setting, config.n_c, config.n_r));
    let (images, _) = generate_cell(&model, &samples, config, config.n_r, &dir)?;
    println!("generated {} images in {}", images.len(), dir.display());
    Ok(())
}

pub fn evaluate(config: &RunConfig, manifest: Option<&Path>, argv: &str) -> Result<()> {
    let root = config.require_data_root()?;
    let catalog = Catalog::open(&root, config.index.as_deref())?;
    let run = RunDir::create(&config.runs_dir)?;
    let (generated, entries, ckpt, label) = match manifest {
        Some(m) => {
            run.write_manifest(argv, config, &[&root, m])?;
            let entries = read_eval_manifest(m)?;
            let generated = entries.iter().map(|e| open_rgb(&e.generated)).collect::<Result<Vec<_>>>()?;
            (generated, entries, m.to_path_buf(), "manifest".to_string())
        }
        None => {
            let (model, ckpt) = eval_model(config)?;
            run.write_manifest(argv, config, &[&root, &ckpt])?;
            let samples = eval_samples(&model, config, &root, &catalog, config.n_c, &run.reports())?;
            let label = cell_label(config.setting, config.n_c, config.n_r);
            let (g, e) = generate_cell(&model, &samples, config, config.n_r, &run.images().join(&label))?;
            (g, e, ckpt, label)
        }
    };
    let report = score(&generated, &entries, &catalog, config.setting, echo(config, &ckpt, config.n_c, config.n_r))?;
    let path = run.reports().join(format!("{label}.txt"));
    report.write(&path)?;
    print!("{}", report.to_key_values());
    println!("report: {}", path.display());
    Ok(())
}

pub fn ablate(config: &RunConfig, n_cs: &[usize], n_rs: &[usize], argv: &str) -> Result<()> {
    let root = config.require_data_root()?;
    for &n_c in n_cs {
        if !(1..=3).contains(&n_c) {
            return Err(Error::config("grid.nc", format!("{n_c} is outside 1..=3")));
        }
    }
    for &n_r in n_rs {
        if n_r > 3 {
            return Err(Error::config("grid.nr", format!("{n_r} is outside 0..=3")));
        }
    }
    let (model, ckpt) = eval_model(config)?;
    let catalog = Catalog::open(&root, config.index.as_deref())?;
    let run = RunDir::create(&config.runs_dir)?;
    run.write_manifest(argv, config, &[&root, &ckpt])?;
    let mut table = format!("n_c\tn_r\t{}\n", MetricReport::table_header());
    println!("n_c\tn_r\t{}", MetricReport::table_header());
    for &n_c in n_cs {
        let samples = eval_samples(&model, config, &root, &catalog, n_c, &run.reports())?;
        for &n_r in n_rs {
            let label = cell_label(config.setting, n_c, n_r);
            let (g, e) = generate_cell(&model, &samples, config, n_r, &run.images().join(&label))?;
            let report = score(&g, &e, &catalog, config.setting, echo(config, &ckpt, n_c, n_r))?;
            report.write(&run.reports().join(format!("{label}.txt")))?;
            let row = format!("{n_c}\t{n_r}\t{}", report.table_row());
            println!("{row}");
            table.push_str(&row);
            table.push('\n');
        }
    }
    let path = run.reports().join("ablation.tsv");
    std::fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    println!("table: {}", path.display());
    Ok(())
}
