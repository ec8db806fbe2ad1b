use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use ebfgate_core::eval::{build_arm, ne_curve, train_predict_online, window_labels};
use ebfgate_core::segment::{read_assignments, write_assignments};
use ebfgate_core::sim::{inject_logging_artifacts, RegimeSpec};
use ebfgate_core::stats::write_stats_snapshot;
use ebfgate_core::{
    compare_policies, gate, segment_stream, CostLedger, Error, Event, GatePolicy, GroundTruth, RunConfig, Segment,
    SegmentTable, Simulator, WindowLabel,
};

use crate::report;
use crate::{Cli, Command, EvaluateArgs, GateArgs, GenerateArgs, ReportArgs, SegmentArgs};

/// 1 for validation failures, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

struct Ctx {
    workdir: PathBuf,
    config: RunConfig,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    fn read_text(&self, p: &Path) -> Result<String> {
        let path = self.path(p);
        fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))
    }

    fn create(&self, p: &Path) -> Result<BufWriter<File>> {
        let path = self.path(p);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let file = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        Ok(BufWriter::new(file))
    }

    fn write_json<T: serde::Serialize>(&self, p: &Path, value: &T) -> Result<()> {
        let mut w = self.create(p)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn read_events(&self, p: &Path) -> Result<Vec<Event>> {
        let path = self.path(p);
        let file = File::open(&path).with_context(|| format!("reading {}", path.display()))?;
        let (events, stats) = ebfgate_core::event::read_events(BufReader::new(file))
            .map_err(anyhow::Error::from)
            .with_context(|| format!("in {}", path.display()))?;
        if stats.unknown_fields > 0 {
            eprintln!(
                "warning: {} unknown field(s) ignored in {}",
                stats.unknown_fields,
                path.display()
            );
        }
        Ok(events)
    }

    fn read_table(&self, p: &Path) -> Result<SegmentTable> {
        let path = self.path(p);
        let file = File::open(&path).with_context(|| format!("reading {}", path.display()))?;
        let assignments = read_assignments(BufReader::new(file))
            .map_err(anyhow::Error::from)
            .with_context(|| format!("in {}", path.display()))?;
        Ok(SegmentTable::from_assignments(assignments))
    }

    /// `.json` files are parsed as JSON, anything else as TOML.
    fn read_policy(&self, p: &Path) -> Result<GatePolicy> {
        let text = self.read_text(p)?;
        let policy = if p.extension().is_some_and(|e| e == "json") {
            GatePolicy::from_json(&text)
        } else {
            GatePolicy::from_toml(&text)
        }
        .map_err(anyhow::Error::from)
        .with_context(|| format!("in {}", p.display()))?;
        policy
            .validate(&self.config.schema)
            .map_err(anyhow::Error::from)
            .with_context(|| format!("in {}", p.display()))?;
        Ok(policy)
    }

    fn configured_policy(&self, explicit: Option<&PathBuf>) -> Result<GatePolicy> {
        match explicit.or(self.config.policy.as_ref()) {
            Some(p) => self.read_policy(p),
            None => Err(Error::Config("no policy given (flag or `policy` config key)".into()).into()),
        }
    }

    fn segments_for(&self, events: &[Event], table: &SegmentTable, causal: bool) -> Vec<Segment> {
        events
            .iter()
            .map(|e| {
                if causal {
                    table.as_of(&e.user_id, e.timestamp_ms / self.config.epoch_ms)
                } else {
                    table.latest(&e.user_id)
                }
            })
            .collect()
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => {
            let path = cli.workdir.join(p);
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_toml(&text)
                .map_err(anyhow::Error::from)
                .with_context(|| format!("in {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    let ctx = Ctx {
        workdir: cli.workdir,
        config,
    };
    match cli.command {
        Command::Generate(args) => generate(&ctx, args),
        Command::Segment(args) => segment(&ctx, args),
        Command::Gate(args) => gate_cmd(&ctx, args),
        Command::Evaluate(args) => evaluate(&ctx, args),
        Command::Report(args) => report_cmd(&ctx, args),
    }
}

fn generate(ctx: &Ctx, args: GenerateArgs) -> Result<()> {
    if !(args.duration > 0.0) {
        return Err(Error::Config(format!("--duration must be positive, got {}", args.duration)).into());
    }
    let spec = match &args.regimes {
        Some(p) => {
            let text = ctx.read_text(p)?;
            let parsed = if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str::<RegimeSpec>(&text).map_err(|e| e.to_string())
            } else {
                toml::from_str::<RegimeSpec>(&text).map_err(|e| e.to_string())
            };
            parsed.map_err(|e| Error::Config(format!("regimes file {}: {e}", p.display())))?
        }
        None => RegimeSpec::default(),
    };
    let profiles = spec.profiles(args.users)?;
    let seed = args.seed.unwrap_or(ctx.config.seeds.simulator);
    let duration_ms = (args.duration * 3_600_000.0).round() as i64;
    let sim = Simulator {
        horizon_ms: ctx.config.horizon_s_ms,
        ..Simulator::default()
    };
    let mut out = sim.generate(&profiles, duration_ms, seed)?;
    if args.delay_max_ms != 0 || args.outlier_rate != 0.0 {
        let (events, log) = inject_logging_artifacts(
            &out.events,
            args.delay_max_ms,
            args.outlier_rate,
            ctx.config.seeds.injection,
        )?;
        out.events = events;
        eprintln!(
            "injected {} dwell outliers, delays up to {} ms",
            log.outlier_indices.len(),
            args.delay_max_ms
        );
    }
    let mut w = ctx.create(&args.out)?;
    ebfgate_core::event::write_events(&mut w, &out.events)?;
    ctx.write_json(&args.truth, &out.truth)?;
    println!(
        "generated {} events for {} users over {} ms (seed {seed})",
        out.events.len(),
        profiles.len(),
        duration_ms
    );
    Ok(())
}

fn segment(ctx: &Ctx, args: SegmentArgs) -> Result<()> {
    let events = ctx.read_events(&args.events)?;
    let run = segment_stream(&events, &ctx.config.segmentation())?;
    write_stats_snapshot(ctx.create(&args.stats_out)?, &run.final_stats)?;
    write_assignments(
        ctx.create(&args.segments_out)?,
        run.epochs.iter().flat_map(|e| e.assignments.iter()),
    )?;
    let calibrations: Vec<_> = run.epochs.iter().map(|e| e.calibration.clone()).collect();
    ctx.write_json(&args.calibration_out, &calibrations)?;
    println!("epoch  epsilon     target  achieved  population");
    for c in &calibrations {
        let eps = if c.epsilon.is_finite() {
            format!("{:.6}", c.epsilon)
        } else {
            "inf".to_string()
        };
        println!(
            "{:>5}  {:<10}  {:.4}  {:.4}    {}",
            c.epoch, eps, c.target_active_fraction, c.achieved_active_fraction, c.population_size
        );
    }
    println!(
        "{} users segmented over {} epoch(s)",
        run.final_stats.len(),
        calibrations.len()
    );
    Ok(())
}

fn gate_cmd(ctx: &Ctx, args: GateArgs) -> Result<()> {
    let policy = ctx.configured_policy(args.policy.as_ref())?;
    let events = ctx.read_events(&args.events)?;
    let table = ctx.read_table(&args.segments)?;
    let segments = ctx.segments_for(&events, &table, args.causal);
    let mut ledger = CostLedger::default();
    let mut w = ctx.create(&args.out)?;
    let start = Instant::now();
    for (event, segment) in events.iter().zip(segments) {
        let outcome = gate(event, segment, &policy);
        ledger.account(event, &outcome);
        if let Some(g) = outcome.gated() {
            writeln!(w, "{}", g.to_json_line())?;
        }
    }
    w.flush()?;
    let elapsed = start.elapsed().as_secs_f64();
    ctx.write_json(&args.ledger, &ledger)?;
    let total = ledger.total();
    println!(
        "events {} -> {}, attributes {} -> {} ({:.4})",
        total.events_in,
        total.events_out,
        total.attributes_in,
        total.attributes_out,
        total.attribute_ratio()
    );
    // wall-clock, so informational only and kept out of the ledger file
    println!("gated {:.0} events/s", total.events_in as f64 / elapsed.max(1e-9));
    Ok(())
}

fn truth_labels(truth: &GroundTruth, events: &[Event]) -> Result<Vec<Option<WindowLabel>>> {
    let mut labels = vec![None; events.len()];
    for t in &truth.impressions {
        let event = events
            .get(t.event_index)
            .filter(|e| e.user_id == t.user_id && e.source == t.source);
        let Some(event) = event else {
            return Err(Error::Schema {
                line: 0,
                message: format!("truth entry {} does not match the event stream", t.event_index),
            }
            .into());
        };
        if event.source == ebfgate_core::EventSource::AdImpression {
            labels[t.event_index] = Some(WindowLabel::from_bool(t.label == 1));
        }
    }
    Ok(labels)
}

fn evaluate(ctx: &Ctx, args: EvaluateArgs) -> Result<()> {
    let policy_a = match &args.policy_a {
        Some(p) => ctx.read_policy(p)?,
        None => GatePolicy::default(),
    };
    let policy_b = ctx.configured_policy(args.policy_b.as_ref())?;
    let events = ctx.read_events(&args.events)?;
    let table = ctx.read_table(&args.segments)?;
    let segments = ctx.segments_for(&events, &table, args.causal);
    let labels = match &args.truth {
        Some(p) => {
            let truth: GroundTruth = serde_json::from_str(&ctx.read_text(p)?).map_err(|e| Error::Schema {
                line: e.line(),
                message: format!("truth file {}: {e}", p.display()),
            })?;
            truth_labels(&truth, &events)?
        }
        None => window_labels(&events, ctx.config.horizon_s_ms, ctx.config.buffer_ms)?,
    };
    let eval = ctx.config.eval();
    let report = compare_policies(&events, &labels, &segments, &policy_a, &policy_b, &eval)?;
    ctx.write_json(&args.out, &report)?;
    if let Some(curve_path) = &args.curve_out {
        let mut w = ctx.create(curve_path)?;
        writeln!(w, "samples,ne_baseline,ne_treatment")?;
        let arms = [&policy_a, &policy_b].map(|p| build_arm(&events, &labels, &segments, p));
        let mut curves = Vec::new();
        for arm in arms {
            let arm = arm?;
            let preds = train_predict_online(&arm.examples, &eval.learner, eval.seed)?;
            let y: Vec<bool> = arm.examples.iter().map(|e| e.label).collect();
            curves.push(ne_curve(&y, &preds, (y.len() / 50).max(1))?);
        }
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for (a, b) in curves[0].iter().zip(&curves[1]) {
            writeln!(w, "{},{},{}", a.0, fmt(a.1), fmt(b.1))?;
        }
        w.flush()?;
    }
    println!(
        "NE baseline {:.4}  treatment {:.4}  gain {:+.4}  attribute volume ratio {:.4}  ({} samples, {} replicas)",
        report.ne_baseline,
        report.ne_treatment,
        report.ne_gain,
        report.attr_volume_ratio,
        report.n_samples,
        report.replicas
    );
    Ok(())
}

fn report_cmd(ctx: &Ctx, args: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for p in &args.reports {
        let report = serde_json::from_str(&ctx.read_text(p)?).map_err(|e| Error::Schema {
            line: e.line(),
            message: format!("report {}: {e}", p.display()),
        })?;
        let name = p
            .file_stem()
            .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        rows.push((name, report));
    }
    let table = report::render_table(&rows);
    let mut w = ctx.create(&args.out)?;
    w.write_all(table.as_bytes())?;
    w.flush()?;
    print!("{table}");
    if let Some(events_path) = &args.events {
        let events = ctx.read_events(events_path)?;
        let clean = ebfgate_core::denoise_dwell(&events, ctx.config.denoise());
        let labels = window_labels(&clean, ctx.config.horizon_s_ms, ctx.config.buffer_ms)?;
        let csv = report::dwell_histogram_csv(&clean, &labels, args.bin_width)?;
        let mut w = ctx.create(&args.hist_out)?;
        w.write_all(csv.as_bytes())?;
        w.flush()?;
    }
    Ok(())
}
