use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use voltcast_core::asm::{detect_anomalies, AnomalyReport};
use voltcast_core::data::{apply_standardizer, load_csv, SeriesFrame};
use voltcast_core::eval::{bench_attention_scaling, evaluate, run_ablation, EvalOptions, Units};
use voltcast_core::hybrid::{train_pipeline, ForecastResult, HybridModel, Regime};
use voltcast_core::synth::{self, SynthKind};
use voltcast_core::training::TrainHistory;
use voltcast_core::{Error, Result};

use crate::cli::{Command, KindArg, ModeArg, UnitsArg};
use crate::config::{ForecastMode, RunConfig, Verbosity};

/// Argument ids given explicitly on the command line.
pub struct Given(pub HashSet<String>);

impl Given {
    fn has(&self, id: &str) -> bool {
        self.0.contains(id)
    }
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub threads: usize,
}

impl Ctx {
    fn say(&self, text: impl AsRef<str>) {
        if self.cfg.verbosity != Verbosity::Quiet {
            println!("{}", text.as_ref().trim_end());
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn checkpoint(&self, arg: &Option<PathBuf>) -> PathBuf {
        arg.clone().unwrap_or_else(|| self.out("checkpoint"))
    }

    fn frame(&self, explicit: Option<&Path>) -> Result<SeriesFrame> {
        match explicit.or(self.cfg.data.as_deref()) {
            Some(path) => load_csv(path, &self.cfg.schema),
            None => Ok(synth::generate(&self.cfg.synth)?.0),
        }
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            split: self.cfg.pipeline.split,
            stride: self.cfg.eval.stride,
            ar_order: self.cfg.eval.ar_order,
            units: self.cfg.eval.units,
            threads: self.threads,
        }
    }
}

/// Folds explicitly given subcommand flags into the configuration.
pub fn apply_flags(cfg: &mut RunConfig, command: &Command, given: &Given) {
    match command {
        Command::Synth(a) => {
            if given.has("kind") {
                cfg.synth.kind = match a.kind {
                    KindArg::Seasonal => SynthKind::Seasonal,
                    KindArg::Spiky => SynthKind::Spiky,
                    KindArg::Negative => SynthKind::Negative,
                };
            }
            if given.has("length") {
                cfg.synth.length = a.length;
            }
            if given.has("events") {
                cfg.synth.events = a.events;
            }
        }
        Command::Train(a) => {
            if given.has("epochs") {
                cfg.pipeline.dat_training.max_epochs = a.epochs;
            }
        }
        Command::Forecast(a) => {
            if given.has("horizon") {
                cfg.forecast.horizon = a.horizon;
            }
            if given.has("mode") {
                cfg.forecast.mode = match a.mode {
                    ModeArg::Single => ForecastMode::Single,
                    ModeArg::Iterative => ForecastMode::Iterative,
                };
            }
        }
        Command::Eval(crate::cli::EvalArgs { scoring, .. })
        | Command::Ablate(crate::cli::AblateArgs { scoring, .. }) => {
            if given.has("stride") {
                cfg.eval.stride = scoring.stride;
            }
            if given.has("ar_order") {
                cfg.eval.ar_order = scoring.ar_order;
            }
            if given.has("units") {
                cfg.eval.units = match scoring.units {
                    UnitsArg::Standardized => Units::Standardized,
                    UnitsArg::Original => Units::Original,
                };
            }
        }
        Command::Bench(a) => {
            if given.has("lengths") {
                cfg.bench.lengths = a.lengths.clone();
            }
            if given.has("d_model") {
                cfg.bench.d_model = a.d_model;
            }
            if given.has("repeats") {
                cfg.bench.repeats = a.repeats;
            }
        }
        Command::Detect(_) => {}
    }
}

pub fn run(ctx: &Ctx, command: &Command) -> Result<()> {
    std::fs::create_dir_all(&ctx.cfg.out).map_err(|e| Error::io(&ctx.cfg.out, e))?;
    match command {
        Command::Synth(_) => synth_cmd(ctx),
        Command::Train(a) => train(ctx, a.data.data.as_deref()),
        Command::Detect(a) => detect(ctx, &ctx.checkpoint(&a.checkpoint.checkpoint), a.data.data.as_deref()),
        Command::Forecast(a) => forecast(
            ctx,
            &ctx.checkpoint(&a.checkpoint.checkpoint),
            a.history.as_deref().or(a.data.data.as_deref()),
        ),
        Command::Eval(a) => eval(ctx, &ctx.checkpoint(&a.checkpoint.checkpoint), a.data.data.as_deref()),
        Command::Ablate(a) => ablate(ctx, a.data.data.as_deref()),
        Command::Bench(_) => bench(ctx),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn kind_name(kind: SynthKind) -> &'static str {
    match kind {
        SynthKind::Seasonal => "seasonal",
        SynthKind::Spiky => "spiky",
        SynthKind::Negative => "negative",
    }
}

fn synth_cmd(ctx: &Ctx) -> Result<()> {
    let spec = &ctx.cfg.synth;
    let path = ctx.out(&format!("{}.csv", kind_name(spec.kind)));
    let side = synth::write(spec, &path)?;
    ctx.say(format!(
        "wrote {} ({} rows, {} events; sidecar {})",
        path.display(),
        spec.length,
        side.events.len(),
        synth::sidecar_path(&path).display()
    ));
    Ok(())
}

fn loss_curve(histories: &[(&str, Option<&TrainHistory>)]) -> String {
    let mut s = String::from("model,epoch,train_loss,val_loss\n");
    for (name, h) in histories {
        let Some(h) = h else { continue };
        let init_val = h.initial_val_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(s, "{name},0,{},{init_val}", h.initial_train_loss).expect("writing to a String");
        for e in &h.epochs {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            writeln!(s, "{name},{},{},{val}", e.epoch, e.train_loss).expect("writing to a String");
        }
    }
    s
}

fn history_line(name: &str, h: &TrainHistory) -> String {
    let best = h.best_epoch.checked_sub(1).and_then(|i| h.epochs.get(i));
    match best {
        Some(b) => format!(
            "{name}: {} epochs, best epoch {} (train {:.6}{})",
            h.epochs.len(),
            b.epoch,
            b.train_loss,
            b.val_loss.map(|v| format!(", val {v:.6}")).unwrap_or_default()
        ),
        None => format!("{name}: {} epochs, initial parameters kept", h.epochs.len()),
    }
}

fn train(ctx: &Ctx, data: Option<&Path>) -> Result<()> {
    let frame = ctx.frame(data)?;
    let (model, report) = train_pipeline(&frame, &ctx.cfg.pipeline)?;
    let ckpt = ctx.out("checkpoint");
    model.save(&ckpt)?;
    write_json(&ctx.out("train_report.json"), &report)?;
    write_json(&ctx.out("config.json"), &ctx.cfg)?;
    write_text(
        &ctx.out("loss_curve.csv"),
        &loss_curve(&[
            ("normal", Some(&report.normal)),
            ("asm", Some(&report.asm)),
            ("extreme", report.extreme.as_ref()),
        ]),
    )?;
    ctx.say(history_line("normal", &report.normal));
    ctx.say(history_line("asm", &report.asm));
    match (&report.extreme, &report.extreme_absent_reason) {
        (Some(h), _) => ctx.say(format!(
            "{} from {} windows",
            history_line("extreme", h),
            report.extreme_windows
        )),
        (None, reason) => ctx.say(format!(
            "extreme: not trained ({})",
            reason.as_deref().unwrap_or("unknown")
        )),
    }
    ctx.say(format!(
        "threshold {:.6}, {} flagged training windows; checkpoint {}",
        report.threshold,
        report.training_flags,
        ckpt.display()
    ));
    Ok(())
}

#[derive(Serialize)]
struct FlaggedRegion {
    start: usize,
    end_exclusive: usize,
    start_time: String,
    end_time: String,
}

#[derive(Serialize)]
struct DetectOutput {
    #[serde(with = "voltcast_core::util::f64_or_inf")]
    threshold: f64,
    window_len: usize,
    windows: usize,
    flagged_windows: usize,
    flagged_points: usize,
    regions: Vec<FlaggedRegion>,
    /// Reconstruction error of the window starting at each row.
    errors: Vec<f64>,
}

fn detect_output(frame: &SeriesFrame, report: &AnomalyReport) -> DetectOutput {
    let ts = frame.timestamps();
    DetectOutput {
        threshold: report.threshold,
        window_len: report.window_len,
        windows: report.errors.len(),
        flagged_windows: report.flag_count(),
        flagged_points: report.flagged_points().len(),
        regions: report
            .runs()
            .into_iter()
            .map(|r| FlaggedRegion {
                start_time: frame.format_timestamp(ts[r.start]),
                end_time: frame.format_timestamp(ts[r.end - 1]),
                start: r.start,
                end_exclusive: r.end,
            })
            .collect(),
        errors: report.errors.clone(),
    }
}

fn detect(ctx: &Ctx, ckpt: &Path, data: Option<&Path>) -> Result<()> {
    let model = HybridModel::load(ckpt)?;
    let frame = ctx.frame(data)?;
    let z = apply_standardizer(&frame, model.standardizer())?;
    let report = detect_anomalies(&z, model.asm(), model.threshold())?;
    let out = detect_output(&frame, &report);
    write_json(&ctx.out("anomaly_report.json"), &out)?;
    let mut csv = String::from("timestamp,error,flagged\n");
    for (i, (e, f)) in report.errors.iter().zip(&report.flags).enumerate() {
        writeln!(
            csv,
            "{},{e},{}",
            frame.format_timestamp(frame.timestamps()[i]),
            u8::from(*f)
        )
        .expect("writing to a String");
    }
    write_text(&ctx.out("anomaly_scores.csv"), &csv)?;
    ctx.say(format!(
        "flagged {} of {} windows ({} points in {} regions) at threshold {:.6}",
        out.flagged_windows,
        out.windows,
        out.flagged_points,
        out.regions.len(),
        report.threshold
    ));
    Ok(())
}

fn regime_name(r: Regime) -> &'static str {
    match r {
        Regime::Normal => "normal",
        Regime::Extreme => "extreme",
        Regime::Blend => "blend",
    }
}

fn forecast(ctx: &Ctx, ckpt: &Path, history: Option<&Path>) -> Result<()> {
    let model = HybridModel::load(ckpt)?;
    let frame = ctx.frame(history)?;
    let l = model.input_len();
    if frame.len() < l {
        return Err(Error::usage(format!(
            "history has {} rows, the model needs the last {l}",
            frame.len()
        )));
    }
    let window = frame.slice(frame.len() - l..frame.len());
    let result: ForecastResult = match ctx.cfg.forecast.mode {
        ForecastMode::Single => model.forecast_single_step(&window)?,
        ForecastMode::Iterative => model.forecast_multi_step(&window, ctx.cfg.forecast.horizon)?,
    };
    write_json(&ctx.out("forecast.json"), &result)?;
    let mut csv = String::from("timestamp,prediction,regime\n");
    for ((t, v), r) in result.timestamps.iter().zip(&result.values).zip(&result.regime) {
        writeln!(csv, "{t},{v},{}", regime_name(*r)).expect("writing to a String");
    }
    write_text(&ctx.out("forecast.csv"), &csv)?;
    ctx.say(format!(
        "{} steps from {} to {} in {} dispatches; anomaly gate {}",
        result.values.len(),
        result.timestamps.first().map_or("-", String::as_str),
        result.timestamps.last().map_or("-", String::as_str),
        result.diagnostics.dispatches,
        if result.anomaly_triggered { "triggered" } else { "quiet" }
    ));
    Ok(())
}

fn eval(ctx: &Ctx, ckpt: &Path, data: Option<&Path>) -> Result<()> {
    let model = HybridModel::load(ckpt)?;
    let frame = ctx.frame(data)?;
    let report = evaluate(&model, &frame, &ctx.eval_options())?;
    let text = report.to_text();
    write_json(&ctx.out("eval.json"), &report)?;
    write_text(&ctx.out("eval.txt"), &text)?;
    ctx.say(text);
    Ok(())
}

fn ablate(ctx: &Ctx, data: Option<&Path>) -> Result<()> {
    let frame = ctx.frame(data)?;
    let report = run_ablation(&frame, &ctx.cfg.pipeline, &ctx.eval_options())?;
    let text = report.to_text();
    write_json(&ctx.out("ablation.json"), &report)?;
    write_text(&ctx.out("ablation.txt"), &text)?;
    ctx.say(text);
    Ok(())
}

fn bench(ctx: &Ctx) -> Result<()> {
    let b = &ctx.cfg.bench;
    let report = bench_attention_scaling(&b.lengths, b.d_model, b.repeats)?;
    let text = report.to_text();
    write_text(&ctx.out("scaling.csv"), &report.to_csv())?;
    write_json(&ctx.out("scaling.json"), &report)?;
    write_text(&ctx.out("scaling.txt"), &text)?;
    ctx.say(text);
    Ok(())
}

#[cfg(test)]
mod tests {
    use clap::{CommandFactory, Parser};

    use super::*;
    use crate::cli::Cli;

    /// Applying every flag at its displayed default must leave the config untouched.
    #[test]
    fn displayed_defaults_match_config_defaults() {
        for sub in ["synth", "train", "detect", "forecast", "eval", "ablate", "bench"] {
            let cli = Cli::try_parse_from(["voltcast", sub]).unwrap();
            let ids = Cli::command()
                .find_subcommand(sub)
                .unwrap()
                .get_arguments()
                .map(|a| a.get_id().to_string())
                .collect();
            let mut cfg = RunConfig::default();
            apply_flags(&mut cfg, &cli.command, &Given(ids));
            assert_eq!(cfg, RunConfig::default(), "{sub}");
            assert_eq!(cli.out, RunConfig::default().out);
        }
    }
}
