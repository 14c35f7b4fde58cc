//! Subcommand implementations. Human-readable progress goes to stderr;
//! eval and bench print machine-readable JSON on stdout.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossview_core::adapter::{AdapterState, AdapterVariant, UnifiedModel};
use crossview_core::consistent::{
    baselines, dp, read_candidates, tokenize_candidates, transretriever, CandidateSequence,
    TrajectoryPrediction,
};
use crossview_core::encoder::{encode_image, EncoderConfig, ViewEncoder};
use crossview_core::geodata::export::{export_trajectory, read_trajectory};
use crossview_core::geodata::manifest::{ingest, Ingested};
use crossview_core::geodata::synthetic::{generate_scene, SceneSpec};
use crossview_core::geodata::{gps_to_utm, GpsPoint};
use crossview_core::retrieval::{
    frame_to_frame, make_small_gallery, recall, seq_to_image, GalleryIndex, GeoRecord,
    GroundTruth, RetrievalResult,
};
use crossview_core::tensor::Tensor;
use crossview_core::training::{
    plan_pair_batches, MetricsSink, Stage, Stage1Trainer, Stage2Trainer, TrainSchedule,
    TripletBatchPlan,
};

pub fn log(msg: &str) {
    eprintln!("[crossview] {msg}");
}

/// Print machine-readable output, tolerating a closed pipe.
fn emit_stdout(payload: &serde_json::Value) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(payload)?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

// ---- model file layout -------------------------------------------------

fn street_encoder_path(models: &Path) -> PathBuf {
    models.join("street_encoder.tmck")
}

fn aerial_encoder_path(models: &Path) -> PathBuf {
    models.join("aerial_encoder.tmck")
}

fn street_adapter_path(models: &Path) -> PathBuf {
    models.join("street_adapter.tmck")
}

fn aerial_adapter_path(models: &Path) -> PathBuf {
    models.join("aerial_adapter.tmck")
}

fn retriever_path(models: &Path) -> PathBuf {
    models.join("retriever.tmck")
}

// ---- dataset helpers ----------------------------------------------------

/// Select video indices: "all", "first:K", "last:K", or comma-separated ids.
pub fn select_videos(ingested: &Ingested, selector: &str) -> Result<Vec<usize>> {
    let n = ingested.manifest.videos.len();
    if selector == "all" {
        return Ok((0..n).collect());
    }
    if let Some(k) = selector.strip_prefix("first:") {
        let k: usize = k.parse().context("first:K selector")?;
        return Ok((0..k.min(n)).collect());
    }
    if let Some(k) = selector.strip_prefix("last:") {
        let k: usize = k.parse().context("last:K selector")?;
        return Ok((n.saturating_sub(k)..n).collect());
    }
    selector
        .split(',')
        .map(|id| {
            ingested
                .manifest
                .videos
                .iter()
                .position(|v| v.id == id)
                .with_context(|| format!("unknown video id {id}"))
        })
        .collect()
}

fn strided<T: Clone>(items: &[T], stride: usize) -> Vec<T> {
    items.iter().step_by(stride.max(1)).cloned().collect()
}

// ---- gen ----------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn cmd_gen(
    out: &Path,
    videos: usize,
    frames: usize,
    tile: usize,
    k: usize,
    grid: (usize, usize),
    tile_m: f64,
    step_m: f64,
    jitter: f32,
    seed: u64,
) -> Result<()> {
    let spec = SceneSpec {
        large_grid: grid,
        k,
        tile_px: tile,
        tile_m,
        videos,
        frames_per_video: frames,
        frame_step_m: step_m,
        brightness_jitter: jitter,
        ..Default::default()
    };
    let manifest = generate_scene(&spec, seed, out)?;
    log(&format!(
        "generated {} videos, {} small tiles, {} large tiles under {}",
        manifest.videos.len(),
        manifest.tiles.len(),
        manifest.large_tiles.len(),
        out.display()
    ));
    Ok(())
}

// ---- train ---------------------------------------------------------------

pub struct TrainArgs {
    pub stage: Stage,
    pub data: Option<PathBuf>,
    pub models: PathBuf,
    pub candidates_dir: Option<PathBuf>,
    pub schedule: TrainSchedule,
    pub holdout: usize,
    pub variant: AdapterVariant,
    pub aerial_variant: Option<AdapterVariant>,
    pub metrics: Option<PathBuf>,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
}

fn open_metrics(path: &Option<PathBuf>) -> Result<Option<MetricsSink<std::fs::File>>> {
    Ok(match path {
        Some(p) => Some(MetricsSink::new(std::fs::File::create(p)?)),
        None => None,
    })
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    std::fs::create_dir_all(&args.models)?;
    match args.stage {
        Stage::Image => train_image(args),
        Stage::Adapter => train_adapter(args),
        Stage::Retriever => train_retriever_cmd(args),
    }
}

fn encoder_config(args: &TrainArgs, image_size: usize) -> EncoderConfig {
    EncoderConfig {
        image_size,
        patch_size: (image_size / 4).max(1),
        depth: args.depth,
        model_dim: args.dim,
        heads: args.heads,
        mlp_ratio: 4,
        embed_dim: args.embed_dim,
    }
}

fn train_image(args: TrainArgs) -> Result<()> {
    let data = args.data.as_ref().context("--data required for stage image")?;
    let ingested = ingest(&data.join("manifest.json"))?;
    for w in &ingested.warnings {
        log(&format!("warning: {w}"));
    }
    let manifest = &ingested.manifest;
    let train_count = manifest.videos.len().saturating_sub(args.holdout);
    if train_count == 0 {
        bail!("holdout leaves no training videos");
    }

    // (street image, tile id) pairs; tiles cached by id.
    let mut tile_cache: HashMap<String, Tensor> = HashMap::new();
    let mut pairs: Vec<(Tensor, String)> = Vec::new();
    for v in &manifest.videos[..train_count] {
        for f in strided(&v.frames, args.schedule.frame_stride) {
            if !tile_cache.contains_key(&f.tile_id) {
                let tile = manifest.tile(&f.tile_id).context("tile lookup")?;
                tile_cache.insert(f.tile_id.clone(), ingested.load_image(&tile.image)?);
            }
            pairs.push((ingested.load_image(&f.image)?, f.tile_id.clone()));
        }
    }
    log(&format!("stage 1: {} pairs from {} videos", pairs.len(), train_count));

    let mut rng = ChaCha8Rng::seed_from_u64(args.schedule.seed);
    let config = encoder_config(&args, manifest.tile_px);
    let street = ViewEncoder::init(config, &mut rng)?;
    let aerial = ViewEncoder::init(config, &mut rng)?;
    let mut trainer =
        Stage1Trainer::new(street, aerial, args.schedule.lr, args.schedule.alpha);
    let mut sink = open_metrics(&args.metrics)?;

    let tile_ids: Vec<String> = pairs.iter().map(|(_, id)| id.clone()).collect();
    for epoch in 0..args.schedule.epochs {
        let batches = plan_pair_batches(&tile_ids, args.schedule.batch, &mut rng);
        let mut epoch_loss = 0.0f64;
        let mut steps = 0usize;
        for batch_idx in batches {
            let batch: Vec<(Tensor, Tensor)> = batch_idx
                .iter()
                .map(|&i| (pairs[i].0.clone(), tile_cache[&pairs[i].1].clone()))
                .collect();
            let plan =
                TripletBatchPlan::new(batch_idx.iter().map(|&i| pairs[i].1.clone()).collect())?;
            let stats = trainer.step(&batch, &plan)?;
            epoch_loss += stats.loss as f64;
            steps += 1;
            if let Some(sink) = sink.as_mut() {
                sink.record(&stats)?;
            }
        }
        log(&format!("stage 1 epoch {}: mean loss {:.4}", epoch, epoch_loss / steps.max(1) as f64));
    }

    trainer.street.save(&street_encoder_path(&args.models))?;
    trainer.aerial.save(&aerial_encoder_path(&args.models))?;
    log(&format!("saved encoders under {}", args.models.display()));
    Ok(())
}

fn train_adapter(args: TrainArgs) -> Result<()> {
    let data = args.data.as_ref().context("--data required for stage adapter")?;
    let ingested = ingest(&data.join("manifest.json"))?;
    let manifest = &ingested.manifest;
    let train_count = manifest.videos.len().saturating_sub(args.holdout);
    if train_count < 2 {
        bail!("need at least 2 training videos for within-batch negatives");
    }

    let street_enc = ViewEncoder::load(&street_encoder_path(&args.models))?;
    let aerial_enc = ViewEncoder::load(&aerial_encoder_path(&args.models))?;
    let street_digest = street_enc.weights_digest();
    let aerial_digest = aerial_enc.weights_digest();

    let max_frames = manifest
        .videos
        .iter()
        .map(|v| strided(&v.frames, args.schedule.frame_stride).len())
        .max()
        .unwrap_or(1);
    let mut rng = ChaCha8Rng::seed_from_u64(args.schedule.seed);
    let street_variant = args.variant;
    let aerial_variant = args.aerial_variant.unwrap_or(args.variant);
    let street_adapter = AdapterState::init(
        &mut rng,
        street_enc.config.depth,
        street_enc.config.model_dim,
        max_frames,
        street_variant,
    );
    let aerial_adapter = AdapterState::init(
        &mut rng,
        aerial_enc.config.depth,
        aerial_enc.config.model_dim,
        manifest.k * manifest.k,
        aerial_variant,
    );
    let street = UnifiedModel::new(street_enc, street_adapter)?;
    let aerial = UnifiedModel::new(aerial_enc, aerial_adapter)?;
    let mut trainer = Stage2Trainer::new(street, aerial, &args.schedule);
    let mut sink = open_metrics(&args.metrics)?;

    // Preload videos and large tiles.
    let mut videos: Vec<(String, Vec<Tensor>, Tensor)> = Vec::with_capacity(train_count);
    for v in &manifest.videos[..train_count] {
        let frames: Vec<Tensor> = strided(&v.frames, args.schedule.frame_stride)
            .iter()
            .map(|f| ingested.load_image(&f.image))
            .collect::<crossview_core::Result<_>>()?;
        let large = manifest.large(&v.large_id).context("large lookup")?;
        videos.push((v.id.clone(), frames, ingested.load_image(&large.image)?));
    }
    log(&format!("stage 2: {} video/large pairs", videos.len()));

    let mut order: Vec<usize> = (0..videos.len()).collect();
    for epoch in 0..args.schedule.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut steps = 0usize;
        for chunk in order.chunks(args.schedule.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<(Vec<Tensor>, Tensor)> =
                chunk.iter().map(|&i| (videos[i].1.clone(), videos[i].2.clone())).collect();
            let plan = TripletBatchPlan::new(chunk.iter().map(|&i| videos[i].0.clone()).collect())?;
            let stats = trainer.step(&batch, &plan)?;
            epoch_loss += stats.loss as f64;
            steps += 1;
            if let Some(sink) = sink.as_mut() {
                sink.record(&stats)?;
            }
        }
        log(&format!("stage 2 epoch {}: mean loss {:.4}", epoch, epoch_loss / steps.max(1) as f64));
    }

    if trainer.street.encoder.weights_digest() != street_digest
        || trainer.aerial.encoder.weights_digest() != aerial_digest
    {
        bail!("freeze contract violated: encoder weights changed during stage 2");
    }
    trainer.street.adapter.save(&street_adapter_path(&args.models))?;
    trainer.aerial.adapter.save(&aerial_adapter_path(&args.models))?;
    log(&format!(
        "saved adapters (street norm {:.4}, aerial norm {:.4})",
        trainer.street.adapter.param_norm(),
        trainer.aerial.adapter.param_norm()
    ));
    Ok(())
}

fn train_retriever_cmd(args: TrainArgs) -> Result<()> {
    let dir = args
        .candidates_dir
        .as_ref()
        .context("--candidates-dir required for stage retriever")?;
    let mut data = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    entries.sort();
    for path in &entries {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let seq: CandidateSequence = serde_json::from_reader(file)
            .with_context(|| format!("parsing labeled sequence {}", path.display()))?;
        data.push(seq);
    }
    if data.is_empty() {
        bail!("no labeled candidate sequences in {}", dir.display());
    }
    log(&format!("retriever: {} labeled sequences", data.len()));

    let config = transretriever::RetrieverConfig::default();
    let mut model =
        transretriever::TransRetriever::init(config, &mut ChaCha8Rng::seed_from_u64(args.schedule.seed))?;
    let history = transretriever::train_retriever(
        &mut model,
        &data,
        args.schedule.epochs,
        args.schedule.lr,
        args.schedule.seed,
    )?;
    if let Some(first) = history.first() {
        log(&format!(
            "retriever loss: {:.4} -> {:.4} over {} epochs",
            first,
            history.last().unwrap(),
            history.len()
        ));
    }
    model.save(&retriever_path(&args.models))?;
    Ok(())
}

// ---- galleries -------------------------------------------------------------

pub fn cmd_build_gallery(data: &Path, models: &Path, level: &str, out: &Path) -> Result<()> {
    let ingested = ingest(&data.join("manifest.json"))?;
    let manifest = &ingested.manifest;
    match level {
        "small" => {
            let aerial = ViewEncoder::load(&aerial_encoder_path(models))?;
            let mut embeddings = Vec::with_capacity(manifest.tiles.len());
            let mut geo = Vec::with_capacity(manifest.tiles.len());
            for t in &manifest.tiles {
                let img = ingested.load_image(&t.image)?;
                embeddings.push(encode_image(&aerial, &img, &t.id)?);
                geo.push(GeoRecord { lat: t.lat, lon: t.lon, children: vec![] });
            }
            let gallery = GalleryIndex::build(&embeddings, geo)?;
            gallery.save(out)?;
            log(&format!("small gallery: {} tiles -> {}", gallery.len(), out.display()));
        }
        "large" => {
            let enc = ViewEncoder::load(&aerial_encoder_path(models))?;
            let adapter = AdapterState::load(&aerial_adapter_path(models))?;
            let unified = UnifiedModel::new(enc, adapter)?;
            let mut embeddings = Vec::with_capacity(manifest.large_tiles.len());
            let mut geo = Vec::with_capacity(manifest.large_tiles.len());
            for l in &manifest.large_tiles {
                let img = ingested.load_image(&l.image)?;
                embeddings.push(unified.encode_large_aerial(&img, &l.id)?);
                geo.push(GeoRecord { lat: l.lat, lon: l.lon, children: l.children.clone() });
            }
            let gallery = GalleryIndex::build(&embeddings, geo)?;
            gallery.save(out)?;
            log(&format!("large gallery: {} items -> {}", gallery.len(), out.display()));
        }
        other => bail!("unknown gallery level {other} (small|large)"),
    }
    Ok(())
}

// ---- inference -------------------------------------------------------------

pub fn cmd_infer_seq(
    data: &Path,
    models: &Path,
    gallery: &Path,
    top_t: usize,
    videos: &str,
    frame_stride: usize,
    out: &Path,
) -> Result<()> {
    let ingested = ingest(&data.join("manifest.json"))?;
    let enc = ViewEncoder::load(&street_encoder_path(models))?;
    let adapter = AdapterState::load(&street_adapter_path(models))?;
    let unified = UnifiedModel::new(enc, adapter)?;
    let index = GalleryIndex::load(gallery)?;
    let chosen = select_videos(&ingested, videos)?;
    let mut results = Vec::with_capacity(chosen.len());
    for &vi in &chosen {
        let v = &ingested.manifest.videos[vi];
        let frames: Vec<Tensor> = strided(&v.frames, frame_stride)
            .iter()
            .map(|f| ingested.load_image(&f.image))
            .collect::<crossview_core::Result<_>>()?;
        results.push(seq_to_image(&unified, &v.id, &frames, &index, top_t)?);
    }
    let file = std::io::BufWriter::new(std::fs::File::create(out)?);
    serde_json::to_writer_pretty(file, &results)?;
    log(&format!("sequence retrieval for {} videos -> {}", results.len(), out.display()));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_infer_frames(
    data: &Path,
    models: &Path,
    small_gallery: &Path,
    seq_results: Option<&Path>,
    large_gallery: Option<&Path>,
    top_t: usize,
    candidates: usize,
    videos: &str,
    emit_labels: bool,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let ingested = ingest(&data.join("manifest.json"))?;
    let street = ViewEncoder::load(&street_encoder_path(models))?;
    let small = GalleryIndex::load(small_gallery)?;
    let seq_ranked: Option<Vec<RetrievalResult>> = match seq_results {
        Some(p) => {
            let file = std::io::BufReader::new(std::fs::File::open(p)?);
            Some(serde_json::from_reader(file)?)
        }
        None => None,
    };
    let large = match large_gallery {
        Some(p) => Some(GalleryIndex::load(p)?),
        None => None,
    };

    for &vi in &select_videos(&ingested, videos)? {
        let v = &ingested.manifest.videos[vi];
        let frames = ingested.video_frames(v)?;
        // Hierarchical gallery when sequence results are available.
        let gallery = match (&seq_ranked, &large) {
            (Some(ranked), Some(large)) => {
                let r = ranked
                    .iter()
                    .find(|r| r.query_id == v.id)
                    .with_context(|| format!("no sequence result for {}", v.id))?;
                make_small_gallery(&small, large, r, top_t)?
            }
            (None, None) => small.clone(),
            _ => bail!("hierarchical mode needs both --seq-results and --large-gallery"),
        };
        let per_frame = frame_to_frame(&street, &v.id, &frames, &gallery, candidates)?;

        let results_path = out_dir.join(format!("{}.results.json", v.id));
        let file = std::io::BufWriter::new(std::fs::File::create(&results_path)?);
        serde_json::to_writer_pretty(file, &per_frame)?;

        let labels = if emit_labels {
            let mut labels = Vec::with_capacity(per_frame.len());
            for (fi, r) in per_frame.iter().enumerate() {
                let truth = gps_to_utm(GpsPoint::new(v.frames[fi].lat, v.frames[fi].lon)?)?;
                let best = r
                    .ids
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da = dist_to(&gallery, a, &truth);
                        let db = dist_to(&gallery, b, &truth);
                        da.partial_cmp(&db).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                labels.push(best);
            }
            Some(labels)
        } else {
            None
        };
        let seq = tokenize_candidates(&per_frame, &gallery, labels)?;
        let cand_path = out_dir.join(format!("{}.candidates.json", v.id));
        crossview_core::consistent::write_candidates(&cand_path, &seq)?;
        if emit_labels {
            let labeled_path = out_dir.join(format!("{}.labeled.json", v.id));
            let file = std::io::BufWriter::new(std::fs::File::create(&labeled_path)?);
            serde_json::to_writer_pretty(file, &seq)?;
        }
    }
    log(&format!("frame retrieval written under {}", out_dir.display()));
    Ok(())
}

fn dist_to(gallery: &GalleryIndex, id: &str, truth: &crossview_core::geodata::UtmPoint) -> f64 {
    match gallery.geo_of(id) {
        Some(g) => {
            let p = GpsPoint::new(g.lat, g.lon).and_then(gps_to_utm);
            match p {
                Ok(u) => ((u.easting - truth.easting).powi(2)
                    + (u.northing - truth.northing).powi(2))
                .sqrt(),
                Err(_) => f64::INFINITY,
            }
        }
        None => f64::INFINITY,
    }
}

// ---- retrieve ----------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn cmd_retrieve(
    candidates: &Path,
    method: &str,
    models: Option<&Path>,
    lambda: f64,
    sigma: f64,
    out_geojson: Option<&Path>,
    out_json: Option<&Path>,
) -> Result<()> {
    // Accept both the bare interchange array and a labeled sequence object.
    let seq = match read_candidates(candidates) {
        Ok(seq) => seq,
        Err(_) => {
            let file = std::io::BufReader::new(std::fs::File::open(candidates)?);
            serde_json::from_reader::<_, CandidateSequence>(file)
                .with_context(|| format!("parsing candidates {}", candidates.display()))?
        }
    };
    let pred: TrajectoryPrediction = match method {
        "nn" => baselines::nn_baseline(&seq, lambda),
        "ds" => baselines::dominant_sets_baseline(&seq, sigma, lambda),
        "dp" => dp::dp_oracle(&seq, lambda),
        "transretriever" => {
            let models = models.context("--models required for transretriever")?;
            let model = transretriever::TransRetriever::load(&retriever_path(models))?;
            transretriever::greedy_decode(&model, &seq, lambda)?
        }
        other => bail!("unknown method {other} (nn|ds|dp|transretriever)"),
    };
    log(&format!("method {} objective {:.3}", method, pred.objective));
    if let Some(path) = out_json {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, &pred)?;
    }
    if let Some(path) = out_geojson {
        export_trajectory(&pred, method, path)?;
    }
    Ok(())
}

// ---- eval ----------------------------------------------------------------

pub fn cmd_eval_seq(data: &Path, results: &Path, gallery: &Path, out_json: bool) -> Result<()> {
    let ingested = ingest(&data.join("manifest.json"))?;
    let file = std::io::BufReader::new(std::fs::File::open(results)?);
    let results: Vec<RetrievalResult> = serde_json::from_reader(file)?;
    let index = GalleryIndex::load(gallery)?;
    let mut truth = HashMap::new();
    for v in &ingested.manifest.videos {
        truth.insert(v.id.clone(), v.large_id.clone());
    }
    let report = recall(&results, &GroundTruth::Ids(truth), &index)?;
    let payload = serde_json::json!({
        "subcommand": "eval", "mode": "seq",
        "r_at_1": report.r_at_1, "r_at_5": report.r_at_5,
        "r_at_10": report.r_at_10, "r_at_1pct": report.r_at_1pct,
        "k_1pct": report.k_1pct,
        "gallery_size": report.gallery_size, "queries": report.queries,
        "threshold_m": serde_json::Value::Null,
    });
    if out_json {
        emit_stdout(&payload)?;
    }
    log(&format!("seq R@1 {:.3} R@5 {:.3}", report.r_at_1, report.r_at_5));
    Ok(())
}

pub fn cmd_eval_frames(
    data: &Path,
    results_dir: &Path,
    gallery: &Path,
    threshold_m: f64,
    out_json: bool,
) -> Result<()> {
    let ingested = ingest(&data.join("manifest.json"))?;
    let index = GalleryIndex::load(gallery)?;
    let mut results = Vec::new();
    let mut truth = HashMap::new();
    for v in &ingested.manifest.videos {
        let path = results_dir.join(format!("{}.results.json", v.id));
        if !path.exists() {
            continue;
        }
        let file = std::io::BufReader::new(std::fs::File::open(&path)?);
        let per_frame: Vec<RetrievalResult> = serde_json::from_reader(file)?;
        for (fi, r) in per_frame.into_iter().enumerate() {
            truth.insert(r.query_id.clone(), GpsPoint::new(v.frames[fi].lat, v.frames[fi].lon)?);
            results.push(r);
        }
    }
    if results.is_empty() {
        bail!("no *.results.json files under {}", results_dir.display());
    }
    let report = recall(&results, &GroundTruth::Gps { truth, threshold_m }, &index)?;
    let payload = serde_json::json!({
        "subcommand": "eval", "mode": "frame",
        "r_at_1": report.r_at_1, "r_at_5": report.r_at_5,
        "r_at_10": report.r_at_10, "r_at_1pct": report.r_at_1pct,
        "k_1pct": report.k_1pct,
        "gallery_size": report.gallery_size, "queries": report.queries,
        "threshold_m": threshold_m,
    });
    if out_json {
        emit_stdout(&payload)?;
    }
    log(&format!("frame R@1 {:.3} over {} queries", report.r_at_1, report.queries));
    Ok(())
}

// ---- plot ----------------------------------------------------------------

pub fn cmd_plot(data: &Path, video: &str, preds: &[PathBuf], out: &Path) -> Result<()> {
    use crossview_core::plot::{write_plot, PlotSeries};
    let ingested = ingest(&data.join("manifest.json"))?;
    let v = ingested
        .manifest
        .video(video)
        .with_context(|| format!("unknown video {video}"))?;
    let truth_gps: Vec<(f64, f64)> = v.frames.iter().map(|f| (f.lat, f.lon)).collect();
    let truth = PlotSeries::from_gps(&v.id, &truth_gps)?;
    let mut series = Vec::with_capacity(preds.len());
    for p in preds {
        let pts = read_trajectory(p)?;
        let label = p.file_stem().and_then(|s| s.to_str()).unwrap_or("pred");
        series.push(PlotSeries::from_gps(label, &pts)?);
    }
    write_plot(out, &truth, &series)?;
    log(&format!("plot -> {}", out.display()));
    Ok(())
}

// ---- bench ----------------------------------------------------------------

pub fn cmd_bench(models: &Path, images: usize, seed: u64) -> Result<()> {
    let enc = ViewEncoder::load(&street_encoder_path(models))?;
    let size = enc.config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<(String, Tensor)> = (0..images)
        .map(|i| {
            let data = (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            (format!("bench{i}"), Tensor::new(&[size, size, 3], data).unwrap())
        })
        .collect();
    let start = std::time::Instant::now();
    let embeddings = crossview_core::encoder::encode_batch(&enc, &batch)?;
    let seconds = start.elapsed().as_secs_f64();
    let payload = serde_json::json!({
        "subcommand": "bench",
        "images": embeddings.len(),
        "seconds": seconds,
        "images_per_s": embeddings.len() as f64 / seconds,
        "image_size": size,
        "seed": seed,
    });
    emit_stdout(&payload)?;
    Ok(())
}
