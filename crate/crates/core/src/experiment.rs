//! Ablation experiments over flag cells and the CSV reports derived from
//! tuning traces.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{resnet50_stages, ConvConfig};
use crate::error::{Error, Result};
use crate::explorer::{exhaustive_best, tune, ExplorerConfig, TuneTrace};
use crate::layout::{coalescing_report, LayoutKind};
use crate::schedule::{KnobSpace, MachineModel, OptFlags};
use crate::workload::Workload;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedConv {
    pub name: String,
    pub conv: ConvConfig,
}

pub fn resnet50_presets() -> Vec<NamedConv> {
    resnet50_stages()
        .into_iter()
        .map(|(name, conv)| NamedConv { name, conv })
        .collect()
}

/// Every combination of the three optimization flags, baseline first.
pub fn full_matrix() -> Vec<OptFlags> {
    let mut out = Vec::new();
    for duplicate_aware in [false, true] {
        for register_packing in [false, true] {
            for layout in [LayoutKind::Nhwc, LayoutKind::Nhwcnc] {
                out.push(OptFlags {
                    duplicate_aware,
                    register_packing,
                    layout,
                });
            }
        }
    }
    out
}

/// Order in which the optimizations are switched on for the accumulated
/// speedup table.
pub fn accumulation_sequence() -> [OptFlags; 4] {
    let none = OptFlags::none();
    let dup = OptFlags {
        duplicate_aware: true,
        ..none
    };
    let pack = OptFlags {
        register_packing: true,
        ..dup
    };
    [none, dup, pack, OptFlags::all()]
}

fn step_name(i: usize) -> &'static str {
    ["baseline", "duplicate_aware", "register_packing", "layout"][i]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "resnet50_presets")]
    pub convs: Vec<NamedConv>,
    /// Machine description file; defaults to the T4 model matching each
    /// convolution's activation width.
    #[serde(default)]
    pub machine: Option<PathBuf>,
    /// Knob space file; flags in it are overridden per cell.
    #[serde(default)]
    pub space: Option<PathBuf>,
    #[serde(default)]
    pub explorer: ExplorerConfig,
    #[serde(default = "full_matrix")]
    pub cells: Vec<OptFlags>,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            convs: resnet50_presets(),
            machine: None,
            space: None,
            explorer: ExplorerConfig::default(),
            cells: full_matrix(),
            noise_sigma: 0.0,
        }
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })
}

impl ExperimentSpec {
    /// Reads a spec; relative machine and space paths resolve against the
    /// spec's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec: Self = read_json(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut spec.machine, &mut spec.space].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs.is_empty() || self.cells.is_empty() {
            return Err(Error::Config(
                "an experiment needs at least one convolution and one cell".into(),
            ));
        }
        let mut names: Vec<&str> = self.convs.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("convolution names must be unique".into()));
        }
        if names
            .iter()
            .any(|n| n.is_empty() || n.contains(['/', '\\']))
        {
            return Err(Error::Config(
                "convolution names must be non-empty file-name safe strings".into(),
            ));
        }
        for c in &self.convs {
            c.conv.validate()?;
        }
        self.explorer.validate()
    }

    fn machine_for(&self, conv: &ConvConfig) -> Result<MachineModel> {
        match &self.machine {
            Some(p) => read_json(p),
            None => Ok(MachineModel::t4_for(conv.act_bits)),
        }
    }

    fn base_space(&self) -> Result<KnobSpace> {
        match &self.space {
            Some(p) => read_json(p),
            None => Ok(KnobSpace::default()),
        }
    }
}

/// Tuned and exhaustive results of one (convolution, cell) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub conv: String,
    pub cell: OptFlags,
    pub trials: usize,
    pub best_runtime: f64,
    /// Noise-free estimate of the best measured schedule.
    pub tuned_cycles: f64,
    pub tuned_schedule: String,
    pub exhaustive_cycles: f64,
    pub exhaustive_schedule: String,
    pub trace_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulatedRow {
    pub conv: String,
    pub step: String,
    pub cell: String,
    pub cycles: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalRow {
    pub conv: String,
    pub flag: String,
    pub before: f64,
    pub after: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub results: Vec<CellResult>,
    pub accumulated: Vec<AccumulatedRow>,
    pub marginal: Vec<MarginalRow>,
}

impl ExperimentReport {
    pub fn marginal_of(&self, conv: &str, flag: &str) -> Option<f64> {
        self.marginal
            .iter()
            .find(|r| r.conv == conv && r.flag == flag)
            .map(|r| r.speedup)
    }
}

fn trace_name(conv: &str, cell: &OptFlags) -> String {
    format!("{conv}__{}.jsonl", cell.label())
}

/// Tunes every (convolution, cell) pair and derives the speedup tables.
/// Traces and CSVs go to `out_dir` when given. Runs are spread over `jobs`
/// threads (0 lets rayon decide); results do not depend on it.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out_dir: Option<&Path>,
    jobs: usize,
) -> Result<ExperimentReport> {
    spec.validate()?;
    let space = spec.base_space()?;
    space.validate()?;
    let runs: Vec<(usize, OptFlags)> = (0..spec.convs.len())
        .flat_map(|c| spec.cells.iter().map(move |f| (c, *f)))
        .collect();
    let workloads = spec
        .convs
        .iter()
        .map(|c| Workload::new(c.conv, spec.machine_for(&c.conv)?))
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let traces: Vec<(TuneTrace, CellResult)> = pool.install(|| {
        runs.par_iter()
            .map(|&(c, cell)| {
                let w = &workloads[c];
                let cell_space = space.clone().with_flags(cell);
                let trace = tune(w, &cell_space, &spec.explorer, spec.noise_sigma, 1)?;
                let best = trace
                    .best()
                    .ok_or_else(|| Error::Config("tuning produced no trials".into()))?;
                let opt = exhaustive_best(w, &cell_space)?;
                let name = &spec.convs[c].name;
                let result = CellResult {
                    conv: name.clone(),
                    cell,
                    trials: trace.len(),
                    best_runtime: best.runtime,
                    tuned_cycles: best.cost.estimated_cycles,
                    tuned_schedule: best.schedule.to_string(),
                    exhaustive_cycles: opt.cost.estimated_cycles,
                    exhaustive_schedule: opt.schedule.to_string(),
                    trace_file: format!("traces/{}", trace_name(name, &cell)),
                };
                Ok((trace, result))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let results: Vec<CellResult> = traces.iter().map(|(_, r)| r.clone()).collect();
    let (accumulated, marginal) = speedup_tables(spec, &results);
    let report = ExperimentReport {
        results,
        accumulated,
        marginal,
    };
    if let Some(dir) = out_dir {
        let tdir = dir.join("traces");
        std::fs::create_dir_all(&tdir).map_err(|e| Error::Io {
            path: tdir.display().to_string(),
            source: e,
        })?;
        for (trace, r) in &traces {
            trace.write_jsonl(&dir.join(&r.trace_file))?;
        }
        write_text(&dir.join("results.csv"), &results_csv(&report.results)?)?;
        write_text(
            &dir.join("accumulated.csv"),
            &accumulated_csv(&report.accumulated)?,
        )?;
        write_text(&dir.join("marginal.csv"), &marginal_csv(&report.marginal)?)?;
    }
    Ok(report)
}

/// Accumulated speedups are relative to the flag-free cell when it was run,
/// otherwise to the first cell of each convolution.
fn speedup_tables(
    spec: &ExperimentSpec,
    results: &[CellResult],
) -> (Vec<AccumulatedRow>, Vec<MarginalRow>) {
    let mut acc = Vec::new();
    let mut marg = Vec::new();
    for c in &spec.convs {
        let mine: Vec<&CellResult> = results.iter().filter(|r| r.conv == c.name).collect();
        let find = |f: &OptFlags| mine.iter().find(|r| r.cell == *f).copied();
        let reference = find(&OptFlags::none()).unwrap_or(mine[0]).tuned_cycles;
        let seq = accumulation_sequence();
        let mut steps: Vec<(usize, &CellResult)> = seq
            .iter()
            .enumerate()
            .filter_map(|(i, f)| find(f).map(|r| (i, r)))
            .collect();
        if steps.is_empty() {
            steps.push((usize::MAX, mine[0]));
        }
        for (i, r) in &steps {
            acc.push(AccumulatedRow {
                conv: c.name.clone(),
                step: if *i == usize::MAX {
                    "reference"
                } else {
                    step_name(*i)
                }
                .to_string(),
                cell: r.cell.label(),
                cycles: r.tuned_cycles,
                speedup: reference / r.tuned_cycles,
            });
        }
        for pair in steps.windows(2) {
            let ((_, a), (i, b)) = (pair[0], pair[1]);
            marg.push(MarginalRow {
                conv: c.name.clone(),
                flag: step_name(i).to_string(),
                before: a.tuned_cycles,
                after: b.tuned_cycles,
                speedup: a.tuned_cycles / b.tuned_cycles,
            });
        }
    }
    (acc, marg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn csv_string(rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r)
            .map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(format!("csv: {e}")))
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

fn layout_name(l: LayoutKind) -> &'static str {
    match l {
        LayoutKind::Nhwc => "nhwc",
        LayoutKind::Nhwcnc => "nhwcnc",
    }
}

pub fn results_csv(results: &[CellResult]) -> Result<String> {
    let mut rows = vec![header(&[
        "conv",
        "cell",
        "duplicate_aware",
        "register_packing",
        "layout",
        "trials",
        "best_runtime",
        "tuned_cycles",
        "tuned_schedule",
        "exhaustive_cycles",
        "exhaustive_schedule",
        "trace",
    ])];
    for r in results {
        rows.push(vec![
            r.conv.clone(),
            r.cell.label(),
            r.cell.duplicate_aware.to_string(),
            r.cell.register_packing.to_string(),
            layout_name(r.cell.layout).to_string(),
            r.trials.to_string(),
            format!("{:.3}", r.best_runtime),
            format!("{:.3}", r.tuned_cycles),
            r.tuned_schedule.clone(),
            format!("{:.3}", r.exhaustive_cycles),
            r.exhaustive_schedule.clone(),
            r.trace_file.clone(),
        ]);
    }
    csv_string(rows)
}

pub fn accumulated_csv(rows: &[AccumulatedRow]) -> Result<String> {
    let mut out = vec![header(&["conv", "step", "cell", "cycles", "speedup"])];
    for r in rows {
        out.push(vec![
            r.conv.clone(),
            r.step.clone(),
            r.cell.clone(),
            format!("{:.3}", r.cycles),
            format!("{:.4}", r.speedup),
        ]);
    }
    csv_string(out)
}

pub fn marginal_csv(rows: &[MarginalRow]) -> Result<String> {
    let mut out = vec![header(&[
        "conv",
        "flag",
        "before_cycles",
        "after_cycles",
        "speedup",
    ])];
    for r in rows {
        out.push(vec![
            r.conv.clone(),
            r.flag.clone(),
            format!("{:.3}", r.before),
            format!("{:.3}", r.after),
            format!("{:.4}", r.speedup),
        ]);
    }
    csv_string(out)
}

/// One row per trial: trial index, schedule, runtime, noise-free cycles and
/// the best runtime so far.
pub fn best_so_far_csv(trace: &TuneTrace) -> Result<String> {
    let mut rows = vec![header(&[
        "trial",
        "schedule",
        "runtime",
        "estimated_cycles",
        "best_so_far",
    ])];
    let mut best = f64::INFINITY;
    for (i, m) in trace.trials().enumerate() {
        best = best.min(m.runtime);
        rows.push(vec![
            i.to_string(),
            m.schedule.to_string(),
            format!("{:.3}", m.runtime),
            format!("{:.3}", m.cost.estimated_cycles),
            format!("{:.3}", best),
        ]);
    }
    csv_string(rows)
}

pub fn coalescing_csv(conv: &ConvConfig, machine: &MachineModel) -> Result<String> {
    let mut rows = vec![header(&[
        "layout",
        "tile",
        "transactions",
        "useful_bytes",
        "fetched_bytes",
        "efficiency",
    ])];
    for r in coalescing_report(conv, machine)? {
        rows.push(vec![
            layout_name(r.layout).to_string(),
            r.tile,
            r.transactions.to_string(),
            r.useful_bytes.to_string(),
            r.fetched_bytes.to_string(),
            format!("{:.4}", r.efficiency),
        ]);
    }
    csv_string(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(cells: Vec<OptFlags>) -> ExperimentSpec {
        ExperimentSpec {
            convs: vec![NamedConv {
                name: "small".into(),
                conv: ConvConfig::square(2, 8, 32, 32, 3, 1, 1),
            }],
            cells,
            explorer: ExplorerConfig {
                trial_budget: 64,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn presets_share_ops() {
        let p = resnet50_presets();
        assert_eq!(p.len(), 4);
        for c in &p {
            assert_eq!(c.conv.ops_count().unwrap(), 1_849_688_064);
        }
    }

    #[test]
    fn matrix_and_sequence() {
        let m = full_matrix();
        assert_eq!(m.len(), 8);
        assert_eq!(m[0], OptFlags::none());
        assert_eq!(m[7], OptFlags::all());
        let s = accumulation_sequence();
        assert!(s.iter().all(|f| m.contains(f)));
    }

    #[test]
    fn single_cell_is_its_own_reference() {
        let r = run_experiment(&small_spec(vec![OptFlags::all()]), None, 1).unwrap();
        assert_eq!(r.results.len(), 1);
        assert_eq!(r.accumulated.len(), 1);
        assert_eq!(r.accumulated[0].speedup, 1.0);
        assert!(r.marginal.is_empty());
    }

    #[test]
    fn tables_follow_the_sequence() {
        let spec = small_spec(accumulation_sequence().to_vec());
        let r = run_experiment(&spec, None, 2).unwrap();
        assert_eq!(r.accumulated.len(), 4);
        assert_eq!(r.marginal.len(), 3);
        let mut product = 1.0;
        for m in &r.marginal {
            product *= m.speedup;
        }
        assert!((product - r.accumulated[3].speedup).abs() < 1e-9);
        for a in &r.accumulated {
            let res = r.results.iter().find(|x| x.cell.label() == a.cell).unwrap();
            assert_eq!(a.cycles, res.tuned_cycles);
        }
    }

    #[test]
    fn csv_rows_match_traces() {
        let dir = std::env::temp_dir().join(format!("mmasched-exp-{}", std::process::id()));
        let spec = small_spec(vec![OptFlags::none(), OptFlags::all()]);
        let r = run_experiment(&spec, Some(&dir), 1).unwrap();
        for res in &r.results {
            let t = TuneTrace::read_jsonl(&dir.join(&res.trace_file)).unwrap();
            let best = t.best().unwrap();
            assert_eq!(best.cost.estimated_cycles, res.tuned_cycles);
            assert_eq!(t.len(), res.trials);
        }
        let csv = std::fs::read_to_string(dir.join("results.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn spec_defaults_and_errors() {
        let s: ExperimentSpec = serde_json::from_str("{}").unwrap();
        assert_eq!(s.convs.len(), 4);
        assert_eq!(s.cells.len(), 8);
        let dir = std::env::temp_dir().join(format!("mmasched-spec-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.json");
        std::fs::write(&p, "{\n  \"cells\": 3\n}").unwrap();
        let e = ExperimentSpec::load(&p).unwrap_err();
        assert!(
            e.to_string().contains("bad.json") && e.to_string().contains("line 2"),
            "{e}"
        );
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn coalescing_table_has_both_layouts() {
        let conv = ConvConfig::square(8, 56, 64, 64, 3, 1, 1);
        let csv = coalescing_csv(&conv, &MachineModel::t4()).unwrap();
        assert!(csv.contains("nhwcnc") && csv.lines().count() == 7);
    }
}
