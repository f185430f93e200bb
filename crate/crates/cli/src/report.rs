//! Per-frame and end-of-run reports, as JSON lines or text.

use std::io::Write;

use groupfield_core::chain::causal_chain;
use groupfield_core::criticality::Zone;
use groupfield_core::ingest::LineDiagnostic;
use groupfield_core::model::{CalibrationProfile, MicroStateFrame, Scene};
use groupfield_core::pipeline::{FrameBundle, Pipeline, PipelineError, PipelineOptions, RunSummary, SummaryBuilder};
use groupfield_core::scenario::{
    select_intervention, InterventionSpec, ScenarioError, ScenarioInput, ScenarioResult, SurrogateParams,
};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Record<'a> {
    Frame { index: usize, bundle: &'a FrameBundle<f64> },
    FrameFailed { index: usize, timestamp: f64, error: String },
    Scenario { index: usize, timestamp: f64, result: &'a ScenarioResult },
    ScenarioFailed { index: usize, timestamp: f64, error: String },
    Summary { summary: &'a RunSummary, diagnostics: &'a [LineDiagnostic] },
}

/// Scenario analysis run every `cadence` seconds of stream time.
pub struct Cadence {
    pub candidates: Vec<InterventionSpec>,
    pub params: SurrogateParams,
    pub cadence: f64,
}

pub struct Reporter<W: Write> {
    out: W,
    format: Format,
    cal: CalibrationProfile<f64>,
    scene: Scene<f64>,
    pipeline: Pipeline<f64>,
    summary: SummaryBuilder,
    scenario: Option<Cadence>,
    last_analysis: Option<f64>,
    scenario_failures: usize,
    last: Option<FrameBundle<f64>>,
    index: usize,
}

fn zone(z: Zone) -> &'static str {
    match z {
        Zone::Green => "green",
        Zone::Amber => "amber",
        Zone::Red => "red",
    }
}

fn opt(v: Option<f64>, unit: &str) -> String {
    v.map_or("-".into(), |x| format!("{x:.1}{unit}"))
}

pub fn frame_line(b: &FrameBundle<f64>) -> String {
    let c = &b.criticality;
    format!(
        "#{:<5} t={:>8.2}s  n={:<3} T_mean={:>6.2}  lambda={:>6.3}  St={:>7.3}  R={:.3} {:<5}{}",
        b.sequence,
        b.timestamp,
        b.frame.len(),
        b.fields.tension_mean,
        b.spectral.lambda_max,
        b.spectral.stability_margin,
        c.r_index,
        zone(c.zone),
        if c.st_red_flag { "  ST-RED-FLAG" } else { "" }
    )
}

/// The scenario comparison table, one row per candidate in rank order.
pub fn scenario_table(r: &ScenarioResult) -> Vec<String> {
    let mut out = vec![format!(
        "  {:<6} {:>8} {:>8} {:>9} {:>7} {:>6} {:>7}",
        "u", "R(h)", "St(h)", "tau", "P(esc)", "cost", "J"
    )];
    for o in &r.outcomes {
        out.push(format!(
            "  {:<6} {:>8.3} {:>8.3} {:>9} {:>7.2} {:>6.2} {:>7.3}{}",
            o.spec.id,
            o.stats.r_horizon_mean,
            o.stats.st_horizon_mean,
            opt(o.stats.tau, " s"),
            o.stats.escalation_probability,
            o.spec.structural_cost,
            o.cost_j,
            if o.recommended { " *" } else { "" }
        ));
    }
    if let Some(f) = &r.follow_up {
        out.push(format!("  recommended {}, follow-up {f}", r.recommended));
    } else {
        out.push(format!("  recommended {}", r.recommended));
    }
    if !r.rejected.is_empty() {
        out.push(format!("  rejected (diverged): {}", r.rejected.join(", ")));
    }
    out
}

pub fn matrix_lines(b: &FrameBundle<f64>) -> Vec<String> {
    let m = &b.matrix;
    let mut out = vec![format!(
        "  {:>6}{}",
        "W",
        m.agent_order.iter().map(|a| format!("{:>8}", a.as_str())).collect::<String>()
    )];
    for i in 0..m.n {
        let row: String = (0..m.n).map(|j| format!("{:>8.3}", m.get(i, j))).collect();
        out.push(format!("  {:>6}{row}", m.agent_order[i].as_str()));
    }
    out
}

/// Largest group printed as a full matrix in text reports.
const MATRIX_PRINT_MAX: usize = 12;

impl<W: Write> Reporter<W> {
    pub fn new(
        out: W,
        format: Format,
        cal: CalibrationProfile<f64>,
        scene: Scene<f64>,
        options: PipelineOptions,
        scenario: Option<Cadence>,
    ) -> Result<Self, PipelineError> {
        let pipeline = Pipeline::new(cal.clone(), scene.clone(), options)?;
        Ok(Reporter {
            out,
            format,
            cal,
            scene,
            pipeline,
            summary: SummaryBuilder::new(),
            scenario,
            last_analysis: None,
            scenario_failures: 0,
            last: None,
            index: 0,
        })
    }

    fn json(&mut self, r: &Record<'_>) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n")
    }

    pub fn frame(&mut self, frame: &MicroStateFrame<f64>) -> std::io::Result<()> {
        let index = self.index;
        self.index += 1;
        let outcome = self.pipeline.process(frame);
        self.summary.record(index, &outcome);
        match &outcome {
            Ok(b) => match self.format {
                Format::Json => self.json(&Record::Frame { index, bundle: b })?,
                Format::Text => writeln!(self.out, "{}", frame_line(b))?,
            },
            Err(e) => match self.format {
                Format::Json => {
                    self.json(&Record::FrameFailed { index, timestamp: frame.timestamp, error: e.to_string() })?
                }
                Format::Text => writeln!(self.out, "#{index:<5} t={:>8.2}s  FAILED: {e}", frame.timestamp)?,
            },
        }
        self.out.flush()?;
        if let Ok(b) = outcome {
            self.maybe_analyse(index, &b)?;
            self.last = Some(b);
        }
        Ok(())
    }

    fn maybe_analyse(&mut self, index: usize, b: &FrameBundle<f64>) -> std::io::Result<()> {
        let Some(c) = &self.scenario else { return Ok(()) };
        if self.last_analysis.is_some_and(|t| b.timestamp - t < c.cadence) {
            return Ok(());
        }
        self.last_analysis = Some(b.timestamp);
        let history: Vec<_> = self
            .pipeline
            .history()
            .filter(|s| s.timestamp < b.timestamp && b.timestamp - s.timestamp <= self.cal.ews_window)
            .copied()
            .collect();
        let input = ScenarioInput { frame: b.frame.clone(), scene: self.scene.clone(), history };
        let result = select_intervention(&c.candidates, &input, &self.cal, &c.params);
        self.scenario_record(index, b.timestamp, result)
    }

    fn scenario_record(
        &mut self,
        index: usize,
        timestamp: f64,
        result: Result<ScenarioResult, ScenarioError>,
    ) -> std::io::Result<()> {
        match (&result, self.format) {
            (Ok(r), Format::Json) => self.json(&Record::Scenario { index, timestamp, result: r })?,
            (Ok(r), Format::Text) => {
                writeln!(self.out, "scenario at t={timestamp:.2}s:")?;
                for l in scenario_table(r).into_iter().chain(r.causal_chain.render().into_iter().map(|l| format!("  {l}"))) {
                    writeln!(self.out, "{l}")?;
                }
            }
            (Err(e), _) => {
                self.scenario_failures += 1;
                match self.format {
                    Format::Json => self.json(&Record::ScenarioFailed { index, timestamp, error: e.to_string() })?,
                    Format::Text => writeln!(self.out, "scenario at t={timestamp:.2}s FAILED: {e}")?,
                }
            }
        }
        self.out.flush()
    }

    /// Write the summary. Returns true when every frame and analysis succeeded.
    pub fn finish(mut self, diagnostics: &[LineDiagnostic]) -> std::io::Result<bool> {
        let summary = std::mem::take(&mut self.summary).finish();
        let clean = summary.frames_failed == 0 && self.scenario_failures == 0;
        match self.format {
            Format::Json => self.json(&Record::Summary { summary: &summary, diagnostics })?,
            Format::Text => {
                let o = &mut self.out;
                let z = &summary.zone_occupancy;
                writeln!(o, "summary:")?;
                writeln!(o, "  frames {} ok, {} failed", summary.frames_ok, summary.frames_failed)?;
                writeln!(
                    o,
                    "  zones green {} / amber {} / red {} ({:.1}% green)",
                    z.green,
                    z.amber,
                    z.red,
                    100.0 * z.green_fraction()
                )?;
                writeln!(
                    o,
                    "  St min {} max {}; red flag on {} frames; R max {}",
                    opt(summary.st_min, ""),
                    opt(summary.st_max, ""),
                    summary.st_red_flag_frames,
                    summary.r_max.map_or("-".into(), |r| format!("{r:.3}"))
                )?;
                for e in &summary.ews_episodes {
                    writeln!(o, "  early warning {}: {:.2}-{:.2} s ({} frames)", e.component, e.start, e.end, e.frames)?;
                }
                for f in &summary.failures {
                    writeln!(o, "  failed frame {}: {}", f.index, f.error)?;
                }
                for d in diagnostics {
                    writeln!(o, "  skipped {d}")?;
                }
                if let Some(b) = &self.last {
                    if b.matrix.n <= MATRIX_PRINT_MAX {
                        writeln!(o, "interaction matrix at t={:.2}s (row = receiver):", b.timestamp)?;
                        for l in matrix_lines(b) {
                            writeln!(o, "{l}")?;
                        }
                    }
                    writeln!(o, "causal chain at t={:.2}s:", b.timestamp)?;
                    for l in causal_chain(b, &self.cal, None).render() {
                        writeln!(o, "  {l}")?;
                    }
                }
            }
        }
        self.out.flush()?;
        Ok(clean)
    }
}
