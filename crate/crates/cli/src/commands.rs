use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use grove_core::dataio::{load_checkpoint, read_embeddings, read_manifest, save_checkpoint, write_embeddings};
use grove_core::dataio::{Direction, EmbeddingDataset, RetrievalTask, Split};
use grove_core::error::GroveError;
use grove_core::gplvm::{train, EpochLoss, GroveModel, Modality, TrainConfig};
use grove_core::inference::{batch_embed, LatentFitConfig, ProbabilisticEmbedding};
use grove_core::metrics::{calibration_report, first_hit_ranks, select_uncertain, DiagGaussian, Distance};
use grove_core::numerics::Matrix;
use log::info;
use serde_json::{json, Value};

use crate::Command;

pub fn run(command: Command) -> Result<Value> {
    match command {
        Command::Train {
            images,
            texts,
            manifest,
            config,
            out,
            seed,
        } => cmd_train(&images, &texts, &manifest, &config, &out, seed),
        Command::Embed {
            ckpt,
            input,
            modality,
            out,
            restarts,
            steps,
            seed,
        } => cmd_embed(&ckpt, &input, modality, &out, restarts, steps, seed),
        Command::Retrieve {
            ckpt,
            queries,
            gallery,
            direction,
            manifest,
            distance,
            out,
        } => cmd_retrieve(&ckpt, &queries, &gallery, direction, &manifest, distance, &out),
        Command::Calibrate {
            ckpt,
            queries,
            gallery,
            direction,
            manifest,
            bins,
            out,
        } => cmd_calibrate(&ckpt, &queries, &gallery, direction, &manifest, bins, &out),
        Command::Select {
            ckpt,
            pool,
            modality,
            k,
            out,
        } => cmd_select(&ckpt, &pool, modality, k as usize, &out),
    }
}

/// `dir/stem.<suffix>` for an output path `dir/stem.ext`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn trace_csv(trace: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,loss_total,loss_emb,loss_kl\n");
    for r in trace {
        let _ = writeln!(s, "{},{},{},{}", r.epoch + 1, r.loss_total, r.loss_emb, r.loss_kl);
    }
    s
}

fn cmd_train(images: &Path, texts: &Path, manifest: &Path, config: &Path, out: &Path, seed: Option<u64>) -> Result<Value> {
    let mut cfg = TrainConfig::from_file(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let ds = read_manifest(manifest, images, texts)?;
    let records = ds.split_records(Split::Train);
    if records.is_empty() {
        return Err(GroveError::EmptyDataset(format!("{}: no train records", manifest.display())).into());
    }
    let pairs = ds.paired(&records);
    info!(
        "training on {} pairs (image D={}, text D={}) for {} epochs",
        pairs.len(),
        pairs.image.cols(),
        pairs.text.cols(),
        cfg.epochs
    );
    let (model, trace) = train(&pairs, &cfg)?;
    save_checkpoint(&model, out)?;
    let trace_path = sibling(out, "trace.csv");
    write_text(&trace_path, &trace_csv(&trace))?;
    Ok(json!({
        "command": "train",
        "checkpoint": out,
        "trace": trace_path,
        "pairs": pairs.len(),
        "epochs": trace.len(),
        "seed": cfg.seed,
        "initial_loss_total": trace.first().map(|r| r.loss_total),
        "final_loss_total": trace.last().map(|r| r.loss_total),
    }))
}

fn load_model(ckpt: &Path) -> Result<GroveModel> {
    let model = load_checkpoint(ckpt)?;
    info!("loaded {}", ckpt.display());
    Ok(model)
}

fn check_dim(model: &GroveModel, z: &Matrix, modality: Modality, source: &Path) -> Result<()> {
    let expected = model.gp(modality).out_dims();
    if z.cols() != expected {
        return Err(GroveError::ShapeMismatch(format!(
            "{}: rows have D = {}, expected D = {expected} for the {modality} model",
            source.display(),
            z.cols()
        ))
        .into());
    }
    Ok(())
}

fn embed_rows(
    model: &GroveModel,
    z: &Matrix,
    modality: Modality,
    fit: &LatentFitConfig,
    source: &Path,
) -> Result<Vec<ProbabilisticEmbedding>> {
    check_dim(model, z, modality, source)?;
    info!("embedding {} {modality} rows", z.rows());
    Ok(batch_embed(model, z, modality, fit)?)
}

fn cmd_embed(
    ckpt: &Path,
    input: &Path,
    modality: Modality,
    out: &Path,
    restarts: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<Value> {
    let model = load_model(ckpt)?;
    let mut fit = LatentFitConfig::for_model(&model.config);
    if let Some(r) = restarts {
        fit.restarts = r;
    }
    if let Some(s) = steps {
        fit.steps = s;
    }
    if let Some(s) = seed {
        fit.seed = s;
    }
    fit.validate()?;
    let (z, _) = read_embeddings(input)?;
    let emb = embed_rows(&model, &z, modality, &fit, input)?;
    let d = model.gp(modality).out_dims();
    let means = Matrix::from_fn(emb.len(), d, |i, j| emb[i].mean[j]);
    let vars = Matrix::from_fn(emb.len(), d, |i, j| emb[i].variance[j]);
    let var_path = sibling(out, "var.grve");
    let csv_path = sibling(out, "uncertainty.csv");
    write_embeddings(&means, out)?;
    write_embeddings(&vars, &var_path)?;
    let mut csv = String::from("row,uncertainty\n");
    for (i, e) in emb.iter().enumerate() {
        let _ = writeln!(csv, "{i},{}", e.uncertainty);
    }
    write_text(&csv_path, &csv)?;
    let mean_u = if emb.is_empty() {
        None
    } else {
        Some(emb.iter().map(|e| e.uncertainty).sum::<f64>() / emb.len() as f64)
    };
    Ok(json!({
        "command": "embed",
        "modality": modality.to_string(),
        "rows": emb.len(),
        "dim": d,
        "means": out,
        "variances": var_path,
        "uncertainty": csv_path,
        "mean_uncertainty": mean_u,
        "seed": fit.seed,
    }))
}

struct Evaluation {
    task: RetrievalTask,
    queries: Vec<ProbabilisticEmbedding>,
    gallery: Vec<DiagGaussian>,
}

fn evaluate(ckpt: &Path, queries: &Path, gallery: &Path, direction: Direction, manifest: &Path) -> Result<Evaluation> {
    let model = load_model(ckpt)?;
    let (image_file, text_file) = match direction {
        Direction::ImageToText => (queries, gallery),
        Direction::TextToImage => (gallery, queries),
    };
    let ds: EmbeddingDataset = read_manifest(manifest, image_file, text_file)?;
    let task = ds.retrieval_task(Split::Test, direction)?;
    let fit = LatentFitConfig::for_model(&model.config);
    let (qm, gm) = (direction.query_modality(), direction.gallery_modality());
    let q = embed_rows(&model, &ds.modality(qm).select_rows(&task.query_rows), qm, &fit, queries)?;
    let g = embed_rows(&model, &ds.modality(gm).select_rows(&task.gallery_rows), gm, &fit, gallery)?;
    Ok(Evaluation {
        task,
        queries: q,
        gallery: g.iter().map(DiagGaussian::from).collect(),
    })
}

fn cmd_retrieve(
    ckpt: &Path,
    queries: &Path,
    gallery: &Path,
    direction: Direction,
    manifest: &Path,
    distance: Distance,
    out: &Path,
) -> Result<Value> {
    let ev = evaluate(ckpt, queries, gallery, direction, manifest)?;
    let qg: Vec<DiagGaussian> = ev.queries.iter().map(DiagGaussian::from).collect();
    let ranks = first_hit_ranks(&qg, &ev.gallery, &ev.task.truth, distance)?;
    let recall = ranks.iter().filter(|&&r| r == 1).count() as f64 / ranks.len() as f64;
    let summary = json!({
        "command": "retrieve",
        "direction": direction.to_string(),
        "distance": distance.to_string(),
        "split": "test",
        "queries": ranks.len(),
        "gallery": ev.gallery.len(),
        "recall_at_1": recall,
        "report": out,
    });
    let report = json!({
        "direction": direction.to_string(),
        "distance": distance.to_string(),
        "split": "test",
        "recall_at_1": recall,
        "query_rows": ev.task.query_rows,
        "gallery_rows": ev.task.gallery_rows,
        "first_hit_rank": ranks,
    });
    write_text(out, &serde_json::to_string_pretty(&report)?)?;
    Ok(summary)
}

fn cmd_calibrate(
    ckpt: &Path,
    queries: &Path,
    gallery: &Path,
    direction: Direction,
    manifest: &Path,
    bins: usize,
    out: &Path,
) -> Result<Value> {
    if bins < 2 {
        return Err(crate::UsageError(format!("--bins must be at least 2, got {bins}")).into());
    }
    let ev = evaluate(ckpt, queries, gallery, direction, manifest)?;
    let qg: Vec<DiagGaussian> = ev.queries.iter().map(DiagGaussian::from).collect();
    let ranks = first_hit_ranks(&qg, &ev.gallery, &ev.task.truth, Distance::W2)?;
    let hits: Vec<bool> = ranks.iter().map(|&r| r == 1).collect();
    let u: Vec<f64> = ev.queries.iter().map(|e| e.uncertainty).collect();
    let report = calibration_report(&u, &hits, bins)?;
    write_text(out, &report.to_csv())?;
    let recall = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
    Ok(json!({
        "command": "calibrate",
        "direction": direction.to_string(),
        "distance": "w2",
        "split": "test",
        "queries": hits.len(),
        "bins": bins,
        "recall_at_1": recall,
        "spearman": report.spearman.value,
        "spearman_degenerate": report.spearman.degenerate,
        "r_squared": report.r_squared.value,
        "r_squared_degenerate": report.r_squared.degenerate,
        "neg_sr2": report.neg_sr2,
        "csv": out,
    }))
}

fn cmd_select(ckpt: &Path, pool: &Path, modality: Modality, k: usize, out: &Path) -> Result<Value> {
    let model = load_model(ckpt)?;
    let (z, _) = read_embeddings(pool)?;
    check_dim(&model, &z, modality, pool)?;
    if k > z.rows() {
        return Err(GroveError::KTooLarge { k, n: z.rows() }.into());
    }
    let fit = LatentFitConfig::for_model(&model.config);
    let emb = embed_rows(&model, &z, modality, &fit, pool)?;
    let u: Vec<f64> = emb.iter().map(|e| e.uncertainty).collect();
    let picked = select_uncertain(&u, k)?;
    let mut csv = String::from("rank,row,uncertainty\n");
    for (r, &i) in picked.iter().enumerate() {
        let _ = writeln!(csv, "{},{i},{}", r + 1, u[i]);
    }
    write_text(out, &csv)?;
    Ok(json!({
        "command": "select",
        "modality": modality.to_string(),
        "pool": z.rows(),
        "k": k,
        "csv": out,
        "min_selected_uncertainty": picked.last().map(|&i| u[i]),
    }))
}
