use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dmamba::checkpoint::Checkpoint;
use dmamba::detector::{
    affiliation_metrics, binarize, events_from_labels, pot_threshold, reconstruct, score, AffiliationResult, PotConfig,
    PotResult,
};
use dmamba::gradcheck::{model_reports, op_reports, MODEL_TOLERANCE, OP_TOLERANCE};
use dmamba::trainer::train_with;
use dmamba::{Series, Tensor};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::data::{load_csv, load_labels};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const SCORES_FILE: &str = "scores.csv";
pub const THRESHOLD_FILE: &str = "threshold.json";
pub const SENSITIVITY_FILE: &str = "risk_sensitivity.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const DECOMPOSE_DIR: &str = "decompose";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot write {}", path.display()))?,
    ))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| anyhow!("missing {flag} (flag or config)"))
}

/// Loads a series with the checkpoint's columns so test data lines up with
/// the features the model was trained on.
fn load_for(ck: &Checkpoint, path: &Path, cfg: &RunConfig) -> Result<Series> {
    let columns = if ck.feature_names.is_empty() {
        cfg.data.columns.as_deref()
    } else {
        Some(&ck.feature_names[..])
    };
    let series = load_csv(path, columns, cfg.data.downsample, false)?;
    if series.dims() != ck.state.config.features {
        bail!(
            "{} has {} feature columns, checkpoint expects {}",
            path.display(),
            series.dims(),
            ck.state.config.features
        );
    }
    Ok(series)
}

fn checkpoint_path(cfg: &RunConfig, given: Option<&Path>) -> PathBuf {
    given.map_or_else(|| cfg.out.join(CHECKPOINT_FILE), Path::to_path_buf)
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub final_loss: f64,
}

/// Trains on `data.train_path`, scores the training series for calibration and
/// writes the checkpoint plus a JSONL log (one start record, one per epoch).
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    let path = required(&cfg.data.train_path, "--train")?;
    let series = load_csv(
        path,
        cfg.data.columns.as_deref(),
        cfg.data.downsample,
        cfg.data.drop_constant,
    )?;
    let mut model = cfg.model.clone();
    model.features = series.dims();

    let log_path = cfg.out.join(TRAIN_LOG_FILE);
    let mut log = create(&log_path)?;
    let start = json!({
        "event": "start",
        "seed": cfg.train.seed,
        "rows": series.len(),
        "features": series.names,
        "model": model,
        "train": cfg.train,
    });
    writeln!(log, "{start}")?;
    let mut io_error = None;
    let outcome = train_with(&series, &model, &cfg.train, |rec| {
        let line = json!({
            "event": "epoch",
            "epoch": rec.epoch,
            "mean_loss": rec.mean_loss,
            "clipped_steps": rec.clipped_steps,
            "wall_ms": rec.wall_ms,
        });
        eprintln!("epoch {:>3}  loss {:.6e}", rec.epoch, rec.mean_loss);
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e).with_context(|| format!("cannot write {}", log_path.display()));
    }

    let calibration = score(&series, &outcome.state)?;
    let ck = Checkpoint {
        state: outcome.state,
        seed: Some(cfg.train.seed),
        feature_names: series.names.clone(),
        calibration_scores: calibration.scores,
    };
    let ck_path = cfg.out.join(CHECKPOINT_FILE);
    fs::create_dir_all(&cfg.out)?;
    ck.save(&ck_path)
        .with_context(|| format!("cannot write {}", ck_path.display()))?;
    Ok(TrainSummary {
        checkpoint: ck_path,
        final_loss: outcome.log.last().map_or(f64::NAN, |r| r.mean_loss),
    })
}

#[derive(Debug, Serialize)]
struct ThresholdDoc {
    seed: Option<u64>,
    q: f64,
    init_quantile: f64,
    threshold: f64,
    initial_threshold: f64,
    peaks: usize,
    calibration_scores: usize,
    fallback: bool,
    gamma: Option<f64>,
    sigma: Option<f64>,
}

impl ThresholdDoc {
    fn new(seed: Option<u64>, pot: &PotConfig, r: &PotResult, n: usize) -> Self {
        Self {
            seed,
            q: pot.risk,
            init_quantile: pot.init_quantile,
            threshold: r.threshold,
            initial_threshold: r.initial_threshold,
            peaks: r.peaks,
            calibration_scores: n,
            fallback: r.fallback,
            gamma: r.fit.map(|f| f.gamma),
            sigma: r.fit.map(|f| f.sigma),
        }
    }
}

pub struct DetectSummary {
    pub scores: PathBuf,
    pub threshold: f64,
    pub alarms: usize,
}

/// Scores `data.test_path`, fits the POT threshold on the checkpoint's
/// calibration scores and writes the score CSV and threshold JSON. Each risk
/// level in `risk_sweep` adds an entry to a sensitivity report.
pub fn detect(cfg: &RunConfig, checkpoint: Option<&Path>, risk_sweep: &[f64]) -> Result<DetectSummary> {
    let ck_path = checkpoint_path(cfg, checkpoint);
    let ck = Checkpoint::load(&ck_path).with_context(|| format!("cannot load checkpoint {}", ck_path.display()))?;
    let path = required(&cfg.data.test_path, "--test")?;
    let series = load_for(&ck, path, cfg)?;
    let labels = match &cfg.data.label_path {
        Some(p) => Some(load_labels(p, cfg.data.downsample, series.len())?),
        None => None,
    };

    let trace = score(&series, &ck.state)?;
    let pot = pot_threshold(&ck.calibration_scores, &cfg.pot)?;
    let (pred, events) = binarize(&trace, pot.threshold);

    let scores_path = cfg.out.join(SCORES_FILE);
    let mut w = create(&scores_path)?;
    let seed = ck.seed.map_or_else(|| "unknown".to_string(), |s| s.to_string());
    writeln!(
        w,
        "# seed={seed} q={} threshold={} fallback={}",
        cfg.pot.risk, pot.threshold, pot.fallback
    )?;
    match &labels {
        Some(_) => writeln!(w, "timestep,score,label,prediction")?,
        None => writeln!(w, "timestep,score,prediction")?,
    }
    for (t, (s, p)) in trace.scores.iter().zip(&pred).enumerate() {
        match &labels {
            Some(l) => writeln!(w, "{t},{s},{},{p}", l[t])?,
            None => writeln!(w, "{t},{s},{p}")?,
        }
    }
    w.flush()?;
    write_json(
        &cfg.out.join(THRESHOLD_FILE),
        &ThresholdDoc::new(ck.seed, &cfg.pot, &pot, ck.calibration_scores.len()),
    )?;

    if !risk_sweep.is_empty() {
        let truth = labels.as_deref().map(events_from_labels);
        let mut rows = Vec::new();
        for &q in risk_sweep {
            let pc = PotConfig { risk: q, ..cfg.pot };
            let r = pot_threshold(&ck.calibration_scores, &pc)?;
            let (p, ev) = binarize(&trace, r.threshold);
            let mut row = json!({
                "q": q,
                "threshold": r.threshold,
                "fallback": r.fallback,
                "alarms": p.iter().filter(|&&v| v == 1).count(),
                "events": ev.len(),
            });
            if let Some(truth) = truth.as_ref().filter(|t| !t.is_empty()) {
                let m = affiliation_metrics(&ev, truth, trace.len())?;
                row["p_af"] = json!(m.precision);
                row["r_af"] = json!(m.recall);
                row["f1_af"] = json!(m.f1);
            }
            rows.push(row);
        }
        write_json(
            &cfg.out.join(SENSITIVITY_FILE),
            &json!({ "seed": ck.seed, "levels": rows }),
        )?;
    }

    Ok(DetectSummary {
        scores: scores_path,
        threshold: pot.threshold,
        alarms: events.len(),
    })
}

/// Contents of a score CSV written by [`detect`].
pub struct ScoreFile {
    pub seed: Option<u64>,
    pub q: f64,
    pub threshold: f64,
    pub fallback: bool,
    pub scores: Vec<f64>,
    pub labels: Option<Vec<u8>>,
    pub predictions: Vec<u8>,
}

pub fn read_scores(path: &Path) -> Result<ScoreFile> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let meta = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| anyhow!("{}: missing `# seed=...` header line", path.display()))?;
    let field = |key: &str| -> Result<&str> {
        meta.split_whitespace()
            .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
            .ok_or_else(|| anyhow!("{}: header lacks `{key}`", path.display()))
    };
    let seed = field("seed")?.parse().ok();
    let q = field("q")?
        .parse()
        .with_context(|| format!("{}: bad q", path.display()))?;
    let threshold = field("threshold")?
        .parse()
        .with_context(|| format!("{}: bad threshold", path.display()))?;
    let fallback = field("fallback")? == "true";

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let score_col = col("score").ok_or_else(|| anyhow!("{}: no score column", path.display()))?;
    let pred_col = col("prediction").ok_or_else(|| anyhow!("{}: no prediction column", path.display()))?;
    let label_col = col("label");
    let (mut scores, mut predictions, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        let num = |c: usize| -> Result<f64> {
            rec[c]
                .parse()
                .with_context(|| format!("{}: row {}, column \"{}\"", path.display(), i + 1, header[c]))
        };
        scores.push(num(score_col)?);
        predictions.push(u8::from(num(pred_col)? != 0.0));
        if let Some(c) = label_col {
            labels.push(u8::from(num(c)? != 0.0));
        }
    }
    Ok(ScoreFile {
        seed,
        q,
        threshold,
        fallback,
        scores,
        labels: label_col.map(|_| labels),
        predictions,
    })
}

/// Affiliation metrics of a score CSV's predictions against labels from
/// `data.label_path`, or from the CSV's own label column.
pub fn evaluate(cfg: &RunConfig, scores: Option<&Path>) -> Result<AffiliationResult> {
    let path = scores.map_or_else(|| cfg.out.join(SCORES_FILE), Path::to_path_buf);
    let file = read_scores(&path)?;
    let labels = match (&cfg.data.label_path, file.labels) {
        (Some(p), _) => load_labels(p, cfg.data.downsample, file.predictions.len())?,
        (None, Some(l)) => l,
        (None, None) => bail!("no labels: pass --labels or score with labels"),
    };
    let truth = events_from_labels(&labels);
    if truth.is_empty() {
        bail!("labels contain no anomalous rows; affiliation metrics are undefined");
    }
    let m = affiliation_metrics(&events_from_labels(&file.predictions), &truth, labels.len())?;
    write_json(
        &cfg.out.join(METRICS_FILE),
        &json!({
            "p_af": m.precision,
            "r_af": m.recall,
            "f1_af": m.f1,
            "threshold": file.threshold,
            "q": file.q,
            "seed": file.seed,
            "flags": {
                "precision_defined": m.precision_defined,
                "threshold_fallback": file.fallback,
            },
        }),
    )?;
    Ok(m)
}

fn write_trace(path: &Path, seed: &str, names: &[String], values: &Tensor) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "# seed={seed}")?;
    writeln!(w, "timestep,{}", names.join(","))?;
    for t in 0..values.rows() {
        write!(w, "{t}")?;
        for c in 0..values.cols() {
            write!(w, ",{}", values.get(t, c))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every stage of the decomposition, in the input's units, as one CSV
/// per stage under `decompose/`: `tau_hp`, `s_hp`, `tau_ma_<l>` per block,
/// `tau_fused`, `seasonal` and `reconstruction`, plus the estimated moving
/// average period per window and block in `periods.csv`.
pub fn decompose(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let ck_path = checkpoint_path(cfg, checkpoint);
    let ck = Checkpoint::load(&ck_path).with_context(|| format!("cannot load checkpoint {}", ck_path.display()))?;
    let path = cfg
        .data
        .test_path
        .as_deref()
        .or(cfg.data.train_path.as_deref())
        .ok_or_else(|| anyhow!("missing --test or --train"))?;
    let series = load_for(&ck, path, cfg)?;
    let (t, d) = (series.len(), series.dims());
    let blocks = ck.state.config.blocks;

    let mut stages: Vec<(String, Tensor)> = ["tau_hp", "s_hp"]
        .iter()
        .map(|s| s.to_string())
        .chain((1..=blocks).map(|l| format!("tau_ma_{l}")))
        .chain(
            ["tau_fused", "seasonal", "reconstruction"]
                .iter()
                .map(|s| s.to_string()),
        )
        .map(|name| (name, Tensor::zeros(&[t, d])))
        .collect();
    let mut periods = Vec::new();
    for (o, dec, _) in reconstruct(&series, &ck.state)? {
        let parts: Vec<&Tensor> = [&dec.tau_hp, &dec.s_hp]
            .into_iter()
            .chain(dec.tau_ma_per_block.iter())
            .chain([&dec.tau_fused, &dec.seasonal, &dec.reconstruction])
            .collect();
        for ((_, full), part) in stages.iter_mut().zip(parts) {
            for r in 0..part.rows() {
                for c in 0..d {
                    full.set(o + r, c, part.get(r, c));
                }
            }
        }
        periods.push((o, dec.periods.clone()));
    }

    let dir = cfg.out.join(DECOMPOSE_DIR);
    let seed = ck.seed.map_or_else(|| "unknown".to_string(), |s| s.to_string());
    let norm = &ck.state.normalizer;
    for (name, values) in &stages {
        let raw = match name.as_str() {
            "tau_hp" | "tau_fused" | "reconstruction" => norm.invert(values),
            _ => norm.invert_scale(values),
        };
        write_trace(&dir.join(format!("{name}.csv")), &seed, &series.names, &raw)?;
    }
    let mut w = create(&dir.join("periods.csv"))?;
    writeln!(w, "# seed={seed}")?;
    let cols: Vec<String> = (1..=blocks).map(|l| format!("block_{l}")).collect();
    writeln!(w, "offset,{}", cols.join(","))?;
    for (o, p) in periods {
        let p: Vec<String> = p.iter().map(usize::to_string).collect();
        writeln!(w, "{o},{}", p.join(","))?;
    }
    w.flush()?;
    Ok(dir)
}

/// Op-level and model-level gradient checks; fails if any check exceeds its
/// tolerance.
pub fn gradcheck(cfg: &RunConfig, seed: u64) -> Result<()> {
    let mut rows = Vec::new();
    let mut failed = 0;
    for (kind, reports, tol) in [
        ("op", op_reports(seed)?, OP_TOLERANCE),
        ("model", model_reports(seed)?, MODEL_TOLERANCE),
    ] {
        for r in reports {
            let pass = r.passes(tol);
            failed += usize::from(!pass);
            println!(
                "{} {kind:<5} {:<28} max rel err {:.2e} (tol {tol:.0e})",
                if pass { "PASS" } else { "FAIL" },
                r.name,
                r.max_rel_error
            );
            rows.push(json!({
                "kind": kind,
                "name": r.name,
                "max_rel_error": r.max_rel_error,
                "analytic": r.analytic,
                "numeric": r.numeric,
                "tolerance": tol,
                "pass": pass,
            }));
        }
    }
    write_json(&cfg.out.join(GRADCHECK_FILE), &json!({ "seed": seed, "checks": rows }))?;
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}
