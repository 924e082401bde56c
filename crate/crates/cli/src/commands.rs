use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use spicer_core::experiment::{
    evaluate, mean_map_roughness, reconstruct as reconstruct_with, score_against_truth, simulate_split, tv_outcome, Method,
    GRAPPA_KERNEL,
};
use spicer_core::metrics::{reference_region, ImageScores, MetricsSummary, Region};
use spicer_core::storage::{load_dataset, save_arrays, save_dataset, write_atomic, SaveOptions};
use spicer_core::training::{load_checkpoint, save_checkpoint, train_validated, train_with, EpochReport};
use spicer_core::{grappa, spicer_reconstruct, ComplexImage, Error, TrainingPair};

use crate::config::{require_file, ExperimentConfig};
use crate::{png, CliError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum BaselineMethod {
    ZeroFilled,
    Tv,
    Grappa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum EvalMethod {
    ZeroFilled,
    Tv,
    Grappa,
    Spicer,
}

fn ensure_out(cfg: &ExperimentConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(format!("cannot create {}: {e}", cfg.out.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn write_png(path: &Path, img: &image::GrayImage) -> Result<(), CliError> {
    Ok(write_atomic(path, &png::encode(img))?)
}

fn load_pairs(path: &Path, what: &str) -> Result<Vec<TrainingPair>, CliError> {
    require_file(path, what)?;
    Ok(load_dataset(path)?)
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    // both files are always written, and containers cannot be empty
    if cfg.simulation.n_train == 0 || cfg.simulation.n_test == 0 {
        return Err(CliError::config("n_train and n_test must both be at least 1"));
    }
    let (train, test) = simulate_split(&cfg.simulation)?;
    ensure_out(cfg)?;
    let opts = SaveOptions {
        seed: cfg.seed,
        precision: cfg.precision,
    };
    save_dataset(&train, cfg.out.join("train.spcr"), &opts)?;
    save_dataset(&test, cfg.out.join("test.spcr"), &opts)?;

    // one line per distinct mask
    let mut rates: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for p in train.iter().chain(&test) {
        for m in [p.y.mask(), p.y_prime.mask()] {
            rates.insert((m.offset(), m.selected_lines().len()), m.sampling_rate());
        }
    }
    let h = cfg.simulation.height;
    let mut masks = Vec::new();
    for (&(offset, lines), &rate) in &rates {
        println!("mask offset {offset}: {lines}/{h} lines, sampling rate {rate:.4}");
        masks.push(json!({ "offset": offset, "lines": lines, "sampling_rate": rate }));
    }
    println!(
        "wrote {} training and {} test pairs to {}",
        train.len(),
        test.len(),
        cfg.out.display()
    );
    write_json(
        &cfg.out.join("simulate.json"),
        &json!({ "config": cfg.simulation, "masks": masks }),
    )
}

#[derive(Serialize, Deserialize)]
pub struct LossSummary {
    pub epochs: usize,
    pub loss_history: Vec<f64>,
    pub lr: Vec<f64>,
    pub lambda: f64,
    #[serde(rename = "K")]
    pub steps: usize,
    /// Mean `‖DS‖²` of the maps estimated on the held-out split, when one
    /// is available.
    pub heldout_map_roughness: Option<f64>,
    /// Mean loss on the validation pairs after each epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<Vec<f64>>,
    /// Epoch stored in model.spck when a validation set was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_epoch: Option<usize>,
}

pub fn train(cfg: &ExperimentConfig, resume: Option<&Path>, val_data: Option<&Path>) -> Result<(), CliError> {
    let pairs = load_pairs(&cfg.train_data, "training dataset")?;
    let resume = match resume {
        Some(path) => {
            require_file(path, "checkpoint")?;
            Some(load_checkpoint(path)?)
        }
        None => None,
    };
    let validation = match val_data {
        Some(path) => Some(load_pairs(path, "validation dataset")?),
        None => None,
    };
    ensure_out(cfg)?;
    let total = cfg.training.epochs;
    let line = |r: &EpochReport| format!("epoch {:>3}/{total}  loss {:.6}  lr {:.1e}", r.epoch + 1, r.mean_loss, r.lr);
    // the summary always describes the full run; model.spck may hold an earlier epoch
    let (ckpt, last, validation_loss) = match validation {
        Some(val) => {
            let run = train_validated(&pairs, &val, &cfg.training, &mut |r, v| println!("{}  val {v:.6}", line(r)))?;
            save_checkpoint(&run.last, cfg.out.join("model_last.spck"))?;
            println!("selected epoch {}", run.selected.epoch);
            (run.selected, Some((run.last.epoch, run.last.loss_history)), Some(run.validation_loss))
        }
        None => (train_with(&pairs, &cfg.training, resume, &mut |r| println!("{}", line(r)))?, None, None),
    };
    save_checkpoint(&ckpt, cfg.out.join("model.spck"))?;

    let heldout_map_roughness = if cfg.test_data.is_file() {
        Some(mean_map_roughness(&load_dataset(&cfg.test_data)?, &ckpt.params)?)
    } else {
        None
    };
    let (epochs, loss_history) = last.unwrap_or_else(|| (ckpt.epoch, ckpt.loss_history.clone()));
    let summary = LossSummary {
        epochs,
        lr: (0..epochs).map(|e| cfg.training.lr_at(e)).collect(),
        loss_history,
        lambda: cfg.training.lambda_smooth,
        steps: cfg.training.steps,
        heldout_map_roughness,
        selected_epoch: validation_loss.as_ref().map(|_| ckpt.epoch),
        validation_loss,
    };
    write_json(&cfg.out.join("loss.json"), &summary)?;
    write_png(&cfg.out.join("loss.png"), &png::loss_curve(&summary.loss_history))?;
    if let Some(r) = heldout_map_roughness {
        println!("held-out map roughness {r:.6}");
    }
    Ok(())
}

fn select(pairs: &[TrainingPair], index: Option<usize>) -> Result<Vec<usize>, CliError> {
    match index {
        Some(i) if i >= pairs.len() => Err(CliError::config(format!(
            "index {i} is out of range for {} samples",
            pairs.len()
        ))),
        Some(i) => Ok(vec![i]),
        None if pairs.is_empty() => Err(CliError::config("dataset holds no samples")),
        None => Ok((0..pairs.len()).collect()),
    }
}

/// PNGs, optional error map and scores for one reconstruction.
fn emit_image(out: &Path, stem: &str, pair: &TrainingPair, x: &ComplexImage, display: &[bool]) -> Result<Option<ImageScores>, CliError> {
    match pair.ground_truth() {
        Some(truth) => {
            let region = reference_region(truth);
            write_png(&out.join(format!("{stem}.png")), &png::magnitude(x, Some(&region)))?;
            write_png(&out.join(format!("{stem}_error.png")), &png::error_map(x, truth))?;
            Ok(Some(score_against_truth(pair, x, Region::Fov)?))
        }
        None => {
            write_png(&out.join(format!("{stem}.png")), &png::magnitude(x, Some(display)))?;
            Ok(None)
        }
    }
}

pub fn reconstruct(cfg: &ExperimentConfig, input: Option<PathBuf>, index: Option<usize>) -> Result<(), CliError> {
    require_file(&cfg.checkpoint, "checkpoint")?;
    let input = input.unwrap_or_else(|| cfg.test_data.clone());
    let ckpt = load_checkpoint(&cfg.checkpoint)?;
    let pairs = load_pairs(&input, "input dataset")?;
    let indices = select(&pairs, index)?;
    let spec = ckpt.params.spec;
    let (nc, h, w) = pairs[0].shape();
    if spec.n_coils != nc {
        return Err(CliError::config(format!(
            "checkpoint expects {} coils but {} holds {nc}",
            spec.n_coils,
            input.display()
        )));
    }
    ensure_out(cfg)?;
    let mut images = Vec::new();
    let mut cases = Vec::new();
    for &i in &indices {
        let (x, maps, _) = spicer_reconstruct(&pairs[i].y, &ckpt.params)?;
        let scores = emit_image(&cfg.out, &format!("recon_{i}"), &pairs[i], &x, maps.fov())?;
        if let Some(s) = &scores {
            println!("sample {i}: PSNR {:.4} dB  SSIM {:.4}  NMSE {:.6}", s.psnr, s.ssim, s.nmse);
        } else {
            println!("sample {i}: no reference, error map skipped");
        }
        cases.push(json!({ "index": i, "scores": scores }));
        images.push((format!("recon_{i}"), x));
    }
    let arrays: Vec<(&str, Vec<usize>, &[spicer_core::C64])> =
        images.iter().map(|(n, x)| (n.as_str(), vec![h, w], x.data())).collect();
    save_arrays(cfg.out.join("recon.spcr"), &arrays, cfg.precision)?;
    write_json(&cfg.out.join("reconstruct.json"), &cases)
}

pub fn baseline(cfg: &ExperimentConfig, methods: &[BaselineMethod], input: Option<PathBuf>) -> Result<(), CliError> {
    let input = input.unwrap_or_else(|| cfg.test_data.clone());
    let pairs = load_pairs(&input, "input dataset")?;
    if pairs.is_empty() {
        return Err(CliError::config("dataset holds no samples"));
    }
    let (_, h, w) = pairs[0].shape();
    ensure_out(cfg)?;
    let mut summaries = Vec::new();
    for &method in methods {
        let name = match method {
            BaselineMethod::ZeroFilled => "zero_filled",
            BaselineMethod::Tv => "tv",
            BaselineMethod::Grappa => "grappa",
        };
        let mut images = Vec::new();
        let mut scores = Vec::new();
        let mut histories = Vec::new();
        let mut passthrough = true;
        for (i, pair) in pairs.iter().enumerate() {
            let x = match method {
                BaselineMethod::ZeroFilled => reconstruct_with(pair, &Method::ZeroFilled)?,
                BaselineMethod::Tv => {
                    let o = tv_outcome(pair, &cfg.tv)?;
                    for warning in &o.warnings {
                        eprintln!("sample {i}: {warning}");
                    }
                    histories.push(o.objective);
                    o.image
                }
                BaselineMethod::Grappa => {
                    let filled = grappa(&pair.y, GRAPPA_KERNEL, cfg.grappa_ridge)?;
                    let acquired = pair.y.mask().row_indicator();
                    for k in 0..pair.y.n_coils() {
                        for (r, &taken) in acquired.iter().enumerate() {
                            let a = &pair.y.data().coil(k)[r * w..(r + 1) * w];
                            let b = &filled.data().coil(k)[r * w..(r + 1) * w];
                            if taken && a.iter().zip(b).any(|(u, v)| u.re.to_bits() != v.re.to_bits() || u.im.to_bits() != v.im.to_bits()) {
                                passthrough = false;
                            }
                        }
                    }
                    spicer_core::zero_filled_recon(&filled, None)?
                }
            };
            let display = vec![true; h * w];
            if let Some(s) = emit_image(&cfg.out, &format!("{name}_{i}"), pair, &x, &display)? {
                scores.push(s);
            }
            images.push((format!("{name}_{i}"), x));
        }
        let arrays: Vec<(&str, Vec<usize>, &[spicer_core::C64])> =
            images.iter().map(|(n, x)| (n.as_str(), vec![h, w], x.data())).collect();
        save_arrays(cfg.out.join(format!("{name}.spcr")), &arrays, cfg.precision)?;
        if method == BaselineMethod::Tv {
            let monotone = histories.iter().all(|h| h.windows(2).all(|p| p[1] <= p[0]));
            write_json(
                &cfg.out.join("tv_history.json"),
                &json!({ "tau": cfg.tv.tau, "monotone": monotone, "objective": histories }),
            )?;
            println!("tv objective histories monotone: {monotone}");
        }
        if method == BaselineMethod::Grappa {
            println!("grappa acquired lines unchanged: {passthrough}");
            write_json(&cfg.out.join("grappa_check.json"), &json!({ "acquired_unchanged": passthrough }))?;
        }
        if scores.len() == pairs.len() {
            let summary = MetricsSummary::from_scores(name, &scores, Region::Fov);
            println!("{}", summary.table_row());
            summaries.push(summary);
        }
    }
    if !summaries.is_empty() {
        write_json(&cfg.out.join("baseline_metrics.json"), &summaries)?;
    }
    Ok(())
}

const TABLE_HEADER: &str = "method             PSNR (dB)        SSIM              NMSE";

fn table(rows: &[MetricsSummary]) -> String {
    let mut text = String::from(TABLE_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.table_row());
        text.push('\n');
    }
    text
}

pub fn eval(cfg: &ExperimentConfig, methods: &[EvalMethod], input: Option<PathBuf>) -> Result<(), CliError> {
    let input = input.unwrap_or_else(|| cfg.test_data.clone());
    let pairs = load_pairs(&input, "test dataset")?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty test split".into()).into());
    }
    if pairs.iter().any(|p| p.ground_truth().is_none()) {
        return Err(CliError::config(format!("{} carries no reference images", input.display())));
    }
    let explicit = !methods.is_empty();
    let methods = if explicit {
        methods.to_vec()
    } else {
        vec![EvalMethod::ZeroFilled, EvalMethod::Tv, EvalMethod::Grappa, EvalMethod::Spicer]
    };
    let ckpt = if methods.contains(&EvalMethod::Spicer) && (explicit || cfg.checkpoint.is_file()) {
        require_file(&cfg.checkpoint, "checkpoint")?;
        Some(load_checkpoint(&cfg.checkpoint)?)
    } else {
        None
    };
    ensure_out(cfg)?;
    let mut rows = Vec::new();
    let mut cases = BTreeMap::new();
    for m in methods {
        let method = match m {
            EvalMethod::ZeroFilled => Method::ZeroFilled,
            EvalMethod::Tv => Method::Tv(cfg.tv),
            EvalMethod::Grappa => Method::Grappa {
                kernel_hw: GRAPPA_KERNEL,
                ridge: cfg.grappa_ridge,
            },
            EvalMethod::Spicer => match &ckpt {
                Some(c) => Method::Spicer(&c.params),
                None => {
                    eprintln!("no checkpoint at {}; skipping spicer", cfg.checkpoint.display());
                    continue;
                }
            },
        };
        match evaluate(&pairs, &method, cfg.region) {
            Ok((summary, scores)) => {
                cases.insert(method.name(), scores);
                rows.push(summary);
            }
            Err(e @ Error::InsufficientAcs { .. }) if !explicit => eprintln!("skipping {}: {e}", method.name()),
            Err(e) => return Err(e.into()),
        }
    }
    let text = table(&rows);
    print!("{text}");
    write_json(&cfg.out.join("metrics.json"), &rows)?;
    write_json(&cfg.out.join("metrics_cases.json"), &cases)?;
    write_text(&cfg.out.join("metrics.txt"), &text)
}

pub fn report(cfg: &ExperimentConfig, runs: &[PathBuf]) -> Result<(), CliError> {
    let read = |path: &Path| -> Result<Option<serde_json::Value>, CliError> {
        if !path.is_file() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))
    };
    let mut entries = Vec::new();
    let mut text = String::new();
    for dir in runs {
        if !dir.is_dir() {
            return Err(CliError::config(format!("run directory {} does not exist", dir.display())));
        }
        let loss: Option<LossSummary> = read(&dir.join("loss.json"))?
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| CliError::io(format!("{}: {e}", dir.join("loss.json").display())))?;
        let metrics: Option<Vec<MetricsSummary>> = read(&dir.join("metrics.json"))?
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| CliError::io(format!("{}: {e}", dir.join("metrics.json").display())))?;
        text.push_str(&format!("run {}\n", dir.display()));
        if let Some(l) = &loss {
            text.push_str(&format!(
                "  lambda {}  epochs {}  final loss {:.6}  held-out roughness {}\n",
                l.lambda,
                l.epochs,
                l.loss_history.last().copied().unwrap_or(f64::NAN),
                l.heldout_map_roughness.map_or("n/a".to_string(), |r| format!("{r:.6}"))
            ));
        }
        if let Some(m) = &metrics {
            for line in table(m).lines() {
                text.push_str(&format!("  {line}\n"));
            }
        }
        entries.push((dir.clone(), loss, metrics));
    }
    let mut by_roughness: Vec<(String, f64, f64)> = entries
        .iter()
        .filter_map(|(d, l, _)| {
            let l = l.as_ref()?;
            Some((d.display().to_string(), l.lambda, l.heldout_map_roughness?))
        })
        .collect();
    by_roughness.sort_by(|a, b| a.2.total_cmp(&b.2));
    if !by_roughness.is_empty() {
        text.push_str("held-out map roughness, smoothest first:\n");
        for (d, lambda, r) in &by_roughness {
            text.push_str(&format!("  {r:.6}  lambda {lambda}  {d}\n"));
        }
    }
    print!("{text}");
    ensure_out(cfg)?;
    let runs_json: Vec<_> = entries
        .iter()
        .map(|(d, l, m)| json!({ "dir": d, "loss": l, "metrics": m }))
        .collect();
    let ordering: Vec<_> = by_roughness
        .iter()
        .map(|(d, lambda, r)| json!({ "dir": d, "lambda": lambda, "heldout_map_roughness": r }))
        .collect();
    write_json(
        &cfg.out.join("report.json"),
        &json!({ "runs": runs_json, "roughness_ordering": ordering }),
    )?;
    write_text(&cfg.out.join("report.txt"), &text)
}
