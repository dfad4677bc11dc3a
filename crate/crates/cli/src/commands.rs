use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Component, Path, PathBuf};

use ngebm::attacks::{attack_sweep, Norm};
use ngebm::checkpoint::Checkpoint;
use ngebm::data::Dataset;
use ngebm::energy::{egm, ScoreKind};
use ngebm::metrics::{auroc, histogram, score_dataset, write_scores_csv};
use ngebm::nn::Model;
use ngebm::sampler::{sgld_chain, uniform_init};
use ngebm::trainer::{evaluate, resume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

pub struct Context {
    pub config: ExperimentConfig,
    config_text: String,
    config_path: PathBuf,
    base_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    checkpoint: Option<PathBuf>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(path.to_path_buf(), e)
}

fn is_contained(p: &Path) -> bool {
    p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

impl Context {
    pub fn load(config_path: PathBuf, out: Option<PathBuf>, seed: Option<u64>, checkpoint: Option<PathBuf>) -> Result<Self, CliError> {
        let text = fs::read_to_string(&config_path)
            .map_err(|e| CliError::Config(format!("{}: {e}", config_path.display())))?;
        let mut config = ExperimentConfig::from_toml(&text)?;
        let base_dir = config_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let out_dir = match (out, &config.out_dir) {
            (Some(o), _) => o,
            (None, Some(o)) => base_dir.join(o),
            (None, None) => {
                let stem = config_path.file_stem().unwrap_or_default();
                base_dir.join("runs").join(stem)
            }
        };
        if let Some(seed) = seed {
            config.train.seed = seed;
        }
        if let Some(d) = &config.train.checkpoint_dir {
            if !is_contained(d) {
                return Err(CliError::Config(format!(
                    "train.checkpoint_dir `{}` must be a relative path inside the output directory",
                    d.display()
                )));
            }
        } else if config.train.checkpoint_interval > 0 {
            config.train.checkpoint_dir = Some(PathBuf::from("checkpoints"));
        }
        config.validate()?;
        Ok(Self {
            seed: config.train.seed,
            config,
            config_text: text,
            config_path,
            base_dir,
            out_dir,
            checkpoint,
        })
    }

    fn ensure_dir(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(io_err(dir))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoint.ckpt"))
    }

    fn load_model(&self) -> Result<(Model, PathBuf), CliError> {
        let path = self.checkpoint_path();
        Ok((Checkpoint::load(&path)?.model, path))
    }

    fn train_set(&self) -> Result<Dataset, CliError> {
        self.config.data.train.load(&self.base_dir)
    }

    fn eval_set(&self) -> Result<Dataset, CliError> {
        match &self.config.data.eval {
            Some(src) => src.load(&self.base_dir),
            None => self.train_set(),
        }
    }

    fn config_sha(&self) -> String {
        hex(&Sha256::digest(self.config_text.as_bytes()))
    }

    /// Writes `config.toml` and `manifest_<command>.json` into `dir`.
    fn manifest(&self, dir: &Path, command: &str, seed: u64, checkpoint: Option<&Path>, outputs: &[String], summary: Value) -> Result<(), CliError> {
        let cfg_copy = dir.join("config.toml");
        fs::write(&cfg_copy, &self.config_text).map_err(io_err(&cfg_copy))?;
        let ckpt = match checkpoint {
            Some(p) => json!({ "path": p.display().to_string(), "sha256": sha256_file(p)? }),
            None => Value::Null,
        };
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "config_path": self.config_path.display().to_string(),
            "config_sha256": self.config_sha(),
            "checkpoint": ckpt,
            "outputs": outputs,
            "summary": summary,
        });
        let path = dir.join(format!("manifest_{command}.json"));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest is plain JSON");
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    fs::File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn finish(mut w: BufWriter<fs::File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(io_err(path))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> ngebm::Result<()>) -> Result<(), CliError> {
    let mut w = create(path)?;
    f(&mut w)?;
    finish(w, path)
}

pub fn train(ctx: &Context) -> Result<String, CliError> {
    let cfg = &ctx.config;
    let train_set = ctx.train_set()?;
    let eval_set = match &cfg.data.eval {
        Some(src) => Some(src.load(&ctx.base_dir)?),
        None => None,
    };
    let spec = cfg.model.spec(train_set.input_shape(), train_set.num_classes)?;
    if ctx.checkpoint.is_some() && cfg.repeats > 1 {
        return Err(CliError::Usage("--checkpoint (resume) cannot be combined with repeats > 1".into()));
    }
    let mut lines = Vec::new();
    for r in 0..cfg.repeats {
        let seed = ctx.seed + r;
        let dir = if cfg.repeats == 1 {
            ctx.out_dir.clone()
        } else {
            ctx.out_dir.join(format!("seed_{seed}"))
        };
        ctx.ensure_dir(&dir)?;
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        tc.checkpoint_dir = tc.checkpoint_dir.map(|d| dir.join(d));
        let start = match &ctx.checkpoint {
            Some(p) => Checkpoint::load(p)?,
            None => Checkpoint::init(spec.clone(), &tc)?,
        };
        let (mut ckpt, log) = resume(&tc, start, &train_set, eval_set.as_ref())?;
        ckpt.meta = json!({
            "mode": tc.loss.mode.as_str(),
            "seed": seed,
            "config_sha256": ctx.config_sha(),
        });
        let ckpt_path = dir.join("checkpoint.ckpt");
        ckpt.save(&ckpt_path)?;
        let log_path = dir.join("runlog.csv");
        write_with(&log_path, |w| log.write_csv(w))?;
        let last = log.last();
        let summary = json!({
            "epochs": ckpt.epoch,
            "final_loss": last.map(|r| r.loss_total),
            "final_eval_accuracy": last.map(|r| r.eval_accuracy),
            "final_mean_egm": last.map(|r| r.mean_egm),
            "diverged_chains": log.records.iter().map(|r| r.diverged_chains).sum::<usize>(),
            "skipped_batches": log.records.iter().map(|r| r.skipped_batches).sum::<usize>(),
        });
        ctx.manifest(
            &dir,
            "train",
            seed,
            Some(&ckpt_path),
            &["checkpoint.ckpt".into(), "runlog.csv".into(), "config.toml".into()],
            summary,
        )?;
        lines.push(format!(
            "seed {seed}: {} epochs -> {}",
            ckpt.epoch,
            dir.display()
        ));
    }
    Ok(lines.join("; "))
}

pub fn eval(ctx: &Context) -> Result<String, CliError> {
    let (model, ckpt) = ctx.load_model()?;
    let ds = ctx.eval_set()?;
    let ev = evaluate(&model, &ds, ctx.config.metrics.ece_bins)?;
    ctx.ensure_dir(&ctx.out_dir)?;
    let summary = json!({
        "n": ds.len(),
        "accuracy": ev.accuracy,
        "mean_confidence": ev.mean_confidence,
        "ece": ev.ece.ece,
        "ece_bins": ev.ece.n_bins,
    });
    let path = ctx.out_dir.join("eval.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("plain JSON") + "\n").map_err(io_err(&path))?;
    ctx.manifest(&ctx.out_dir, "eval", ctx.seed, Some(&ckpt), &["eval.json".into()], summary)?;
    Ok(format!(
        "accuracy {:.4}, mean confidence {:.4}, ECE {:.4}",
        ev.accuracy, ev.mean_confidence, ev.ece.ece
    ))
}

pub fn calibrate(ctx: &Context) -> Result<String, CliError> {
    let (model, ckpt) = ctx.load_model()?;
    let ds = ctx.eval_set()?;
    let ev = evaluate(&model, &ds, ctx.config.metrics.ece_bins)?;
    ctx.ensure_dir(&ctx.out_dir)?;
    write_with(&ctx.out_dir.join("ece.csv"), |w| ev.ece.write_csv(w))?;
    ctx.manifest(
        &ctx.out_dir,
        "calibrate",
        ctx.seed,
        Some(&ckpt),
        &["ece.csv".into()],
        json!({ "ece": ev.ece.ece, "bins": ev.ece.n_bins, "n": ds.len() }),
    )?;
    Ok(format!("ECE {:.4} over {} bins", ev.ece.ece, ev.ece.n_bins))
}

pub fn ood(ctx: &Context, only: Option<ScoreKind>) -> Result<String, CliError> {
    let (model, ckpt) = ctx.load_model()?;
    let in_set = ctx.eval_set()?;
    let out_set = ctx
        .config
        .data
        .ood
        .as_ref()
        .ok_or_else(|| CliError::Config("`ood` needs a [data.ood] section".into()))?
        .load(&ctx.base_dir)?;
    let m = &ctx.config.metrics;
    let kinds: Vec<ScoreKind> = match only {
        Some(k) => vec![k],
        None => m.score_kinds.clone(),
    };
    ctx.ensure_dir(&ctx.out_dir)?;
    let mut outputs = vec!["auroc.csv".to_string()];
    let mut table = String::from("score,auroc,n_in,n_out\n");
    let mut summary = serde_json::Map::new();
    for kind in kinds {
        let s_in = score_dataset(&model, &in_set, kind, m.batch_size)?;
        let s_out = score_dataset(&model, &out_set, kind, m.batch_size)?;
        let roc = auroc(&s_in, &s_out)?;
        let name = kind.as_str();
        table.push_str(&format!("{name},{},{},{}\n", roc.auroc, s_in.len(), s_out.len()));
        summary.insert(name.into(), json!(roc.auroc));

        let lo = s_in.iter().chain(&s_out).cloned().fold(f64::INFINITY, f64::min);
        let hi = s_in.iter().chain(&s_out).cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = if lo < hi { Some((lo, hi)) } else { None };
        let files = [
            format!("scores_{name}.csv"),
            format!("roc_{name}.csv"),
            format!("hist_{name}_in.csv"),
            format!("hist_{name}_out.csv"),
        ];
        write_with(&ctx.out_dir.join(&files[0]), |w| write_scores_csv(w, &s_in, &s_out))?;
        write_with(&ctx.out_dir.join(&files[1]), |w| roc.write_csv(w))?;
        let h_in = histogram(&s_in, m.hist_bins, range)?;
        let h_out = histogram(&s_out, m.hist_bins, range)?;
        write_with(&ctx.out_dir.join(&files[2]), |w| h_in.write_csv(w))?;
        write_with(&ctx.out_dir.join(&files[3]), |w| h_out.write_csv(w))?;
        outputs.extend(files);
    }
    let path = ctx.out_dir.join("auroc.csv");
    fs::write(&path, &table).map_err(io_err(&path))?;
    ctx.manifest(&ctx.out_dir, "ood", ctx.seed, Some(&ckpt), &outputs, Value::Object(summary.clone()))?;
    Ok(summary
        .iter()
        .map(|(k, v)| format!("AUROC[{k}] {:.4}", v.as_f64().unwrap_or(f64::NAN)))
        .collect::<Vec<_>>()
        .join(", "))
}

pub fn attack(ctx: &Context, only: Option<Norm>) -> Result<String, CliError> {
    let (model, ckpt) = ctx.load_model()?;
    let ds = ctx.eval_set()?;
    let sweep = &ctx.config.attack;
    let norms = match only {
        Some(n) => vec![n],
        None => sweep.norms.clone(),
    };
    ctx.ensure_dir(&ctx.out_dir)?;
    let mut outputs = Vec::new();
    let mut summary = serde_json::Map::new();
    for norm in norms {
        let report = attack_sweep(&model, &ds, &sweep.epsilons, &sweep.base(norm), ctx.seed, sweep.batch_size)?;
        let file = format!("attack_{}.csv", norm.as_str());
        write_with(&ctx.out_dir.join(&file), |w| report.write_csv(w))?;
        summary.insert(
            norm.as_str().into(),
            json!(report.rows.iter().map(|r| [r.epsilon, r.adversarial_accuracy]).collect::<Vec<_>>()),
        );
        outputs.push(file);
    }
    ctx.manifest(&ctx.out_dir, "attack", ctx.seed, Some(&ckpt), &outputs, Value::Object(summary))?;
    Ok(format!("wrote {}", outputs.join(", ")))
}

pub fn hist_egm(ctx: &Context) -> Result<String, CliError> {
    let (model, ckpt) = ctx.load_model()?;
    let ds = ctx.train_set()?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let parts = idx
        .par_chunks(ctx.config.metrics.batch_size)
        .map(|c| egm(&model, &ds.inputs.select_rows(c)?))
        .collect::<ngebm::Result<Vec<_>>>()?;
    let values: Vec<f64> = parts.into_iter().flatten().collect();
    let hist = histogram(&values, ctx.config.metrics.hist_bins, None)?;
    ctx.ensure_dir(&ctx.out_dir)?;
    write_with(&ctx.out_dir.join("egm_hist.csv"), |w| hist.write_csv(w))?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    ctx.manifest(
        &ctx.out_dir,
        "hist-egm",
        ctx.seed,
        Some(&ckpt),
        &["egm_hist.csv".into()],
        json!({ "mean_egm": mean, "n": values.len(), "bins": hist.counts.len() }),
    )?;
    Ok(format!("mean EGM {mean:.4} over {} examples", values.len()))
}

pub fn sample(ctx: &Context, n: Option<usize>) -> Result<String, CliError> {
    let (model, ckpt) = ctx.load_model()?;
    let sc = &ctx.config.sample;
    let n = n.unwrap_or(sc.n);
    if n == 0 {
        return Err(CliError::Usage("--n must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let x0 = uniform_init(&model.spec.input_shape, n, sc.sgld.init_low, sc.sgld.init_high, &mut rng)?;
    let out = sgld_chain(&model, &x0, &sc.sgld, &mut rng)?;
    let kept = out.kept_rows();
    let samples = out.samples.select_rows(&kept).map_err(ngebm::Error::from)?;
    ctx.ensure_dir(&ctx.out_dir)?;
    let path = ctx.out_dir.join("samples.csv");
    let mut w = create(&path)?;
    let d = samples.row_len();
    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    let mut text = header.join(",") + "\n";
    for r in 0..samples.rows() {
        let row: Vec<String> = samples.row(r).iter().map(|v| v.to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    w.write_all(text.as_bytes()).map_err(io_err(&path))?;
    finish(w, &path)?;
    let final_egm = if kept.is_empty() {
        f64::NAN
    } else {
        let e = egm(&model, &samples)?;
        e.iter().sum::<f64>() / e.len() as f64
    };
    let report = &out.report;
    let stats = json!({
        "requested": n,
        "kept": kept.len(),
        "diverged": report.rows.len(),
        "first_divergence_step": report.step,
        "divergence_magnitude": report.magnitude,
        "divergence_reason": report.reason.map(|r| format!("{r:?}")),
        "steps_executed": out.steps_executed,
        "mean_final_egm": if final_egm.is_finite() { json!(final_egm) } else { Value::Null },
    });
    let stats_path = ctx.out_dir.join("sample_stats.json");
    fs::write(&stats_path, serde_json::to_string_pretty(&stats).expect("plain JSON") + "\n").map_err(io_err(&stats_path))?;
    ctx.manifest(
        &ctx.out_dir,
        "sample",
        ctx.seed,
        Some(&ckpt),
        &["samples.csv".into(), "sample_stats.json".into()],
        stats,
    )?;
    Ok(format!("{} of {n} chains kept, {} diverged", kept.len(), report.rows.len()))
}
