//! Command-line verbs. Every command writes plain files (CSV, JSON, model
//! binaries) and a short summary on stdout.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{gen_clusters, load_csv, save_csv, split_views, train_test_split, Dataset};
use crate::engine::{
    distill_student, evaluate, linear_probe, linear_probe_features, student_init_seed, train_teacher, DistillConfig,
    Objective, TrainConfig, TrainReport, REPORT_HEADER,
};
use crate::error::{Error, Result};
use crate::nets::{MlpSpec, Model};
use crate::ot::{exact_assignment_cost, solve_transport, uniform, CostMatrix, CostMetric, Epsilon, SinkhornConfig};
use crate::tensor::Tensor;

pub const SEED_ENV: &str = "WCORD_SEED";

/// Bundled 5x5 cosine cost matrix for `sinkhorn --fixture`.
pub const SINKHORN_FIXTURE: &str = include_str!("../fixtures/sinkhorn_5x5.csv");

impl Error {
    /// 0 success, 2 usage or config, 3 divergence, 4 solver underflow, 1
    /// anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Divergence { .. } => 3,
            Error::SolverUnderflow(_) => 4,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "wcord", version, about = "Wasserstein contrastive representation distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a Gaussian-cluster dataset as train.csv and test.csv.
    GenData(GenDataArgs),
    /// Train a teacher network from a run config.
    TrainTeacher(RunArgs),
    /// Distill a student from a run config.
    Distill(RunArgs),
    /// Run a parameter grid over several seeds.
    Sweep(SweepArgs),
    /// Accuracy of a saved model on a CSV dataset.
    Eval(EvalArgs),
    /// Linear-probe accuracy on a saved model's embeddings (or raw features).
    Probe(ProbeArgs),
    /// Solve a transport problem given as a CSV cost matrix.
    Sinkhorn(SinkhornArgs),
    /// Aggregate run directories into a comparison table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 200)]
    n_per: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0.15)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write wall-clock seconds into report.csv instead of zeros.
    #[arg(long)]
    timing: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    Lambda1,
    Lambda2,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value = "lambda2")]
    param: SweepParam,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.01, 0.03, 0.05, 0.08, 0.1, 0.2])]
    values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    /// Probe the raw features when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SinkhornArgs {
    /// Cost matrix CSV, one row per line, no header.
    #[arg(long, required_unless_present = "fixture", conflicts_with = "fixture")]
    cost: Option<PathBuf>,
    /// Use the bundled 5x5 instance and also print its exact assignment cost.
    #[arg(long)]
    fixture: bool,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    /// Treat --epsilon as an absolute weight rather than a multiple of the
    /// mean cost.
    #[arg(long)]
    absolute: bool,
    #[arg(long, default_value_t = 50)]
    outer: usize,
    #[arg(long, default_value_t = 25)]
    inner: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Row marginal (comma or newline separated); uniform by default.
    #[arg(long)]
    mu: Option<PathBuf>,
    #[arg(long)]
    nu: Option<PathBuf>,
    #[arg(long)]
    plan_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub k: usize,
    pub n_per: usize,
    pub dim: usize,
    pub spread: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { k: 10, n_per: 200, dim: 16, spread: 0.15 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generated when no `train` path is given.
    pub generate: Option<GenConfig>,
    pub train: Option<PathBuf>,
    /// Split off `train` when absent.
    pub test: Option<PathBuf>,
    pub test_fraction: f64,
    /// Two-view mode: the teacher sees the first `view_split` columns and the
    /// student the rest.
    pub view_split: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            generate: Some(GenConfig::default()),
            train: None,
            test: None,
            test_fraction: 0.25,
            view_split: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// Load this frozen teacher instead of training one.
    pub model: Option<PathBuf>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            hidden: vec![128, 128, 128, 64],
            train: TrainConfig { epochs: 30, ..Default::default() },
            model: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub hidden: Vec<usize>,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig { hidden: vec![32, 16] }
    }
}

/// Everything one run needs. The top-level `seed` is copied into every
/// nested seed when the config is resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub objective: Objective,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub distill: DistillConfig,
    pub probe: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            objective: Objective::Wcord,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            distill: DistillConfig::default(),
            probe: TrainConfig { epochs: 50, lr: 0.1, batch_size: 64, seed: 0 },
        }
    }
}

fn config_err(pointer: &str, detail: impl Into<String>) -> Error {
    Error::Config { pointer: pointer.into(), detail: detail.into() }
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } | Segment::Enum { variant: key } => out.push_str(key),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

impl RunConfig {
    /// Parses JSON, rejecting unknown keys; errors carry the JSON pointer of
    /// the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(e.path());
            config_err(&pointer, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err("/", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies the seed override, propagates the master seed and validates.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self> {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        self.teacher.train.seed = self.seed;
        self.distill.seed = self.seed;
        self.probe.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(config_err("/data/test_fraction", format!("must lie in (0, 1), got {}", d.test_fraction)));
        }
        match (&d.generate, &d.train) {
            (None, None) => return Err(config_err("/data", "set either generate or train")),
            (Some(_), Some(_)) => return Err(config_err("/data/generate", "generate and train are exclusive")),
            (Some(g), None) => {
                if g.k < 2 || g.dim < 2 || g.n_per < 2 {
                    return Err(config_err("/data/generate", "need k >= 2, dim >= 2, n_per >= 2"));
                }
                if !(g.spread >= 0.0 && g.spread.is_finite()) {
                    return Err(config_err("/data/generate/spread", "must be finite and non-negative"));
                }
            }
            (None, Some(_)) => {}
        }
        if d.test.is_some() && d.train.is_none() {
            return Err(config_err("/data/test", "test data given without train data"));
        }
        for (ptr, hidden) in [("/teacher/hidden", &self.teacher.hidden), ("/student/hidden", &self.student.hidden)] {
            if hidden.len() < 2 || hidden.contains(&0) {
                return Err(config_err(ptr, "need at least two positive hidden widths"));
            }
        }
        for (ptr, t) in [("/teacher/train", &self.teacher.train), ("/probe", &self.probe)] {
            t.validate().map_err(|e| config_err(ptr, e.to_string()))?;
        }
        self.distill.validate().map_err(|e| match e {
            Error::Config { pointer, detail } => config_err(&format!("/distill{pointer}"), detail),
            other => other,
        })
    }

    fn out_dir(&self, out: Option<&PathBuf>) -> PathBuf {
        out.cloned().unwrap_or_else(|| self.out_dir.clone())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Train/test data for one run. In two-view mode the teacher features are
/// a separate column block of the same rows.
pub struct RunData {
    pub train: Dataset,
    pub test: Dataset,
    pub teacher_train: Dataset,
    pub teacher_test: Dataset,
    pub two_view: bool,
}

pub fn load_data(cfg: &RunConfig) -> Result<RunData> {
    let d = &cfg.data;
    let (train, test) = match (&d.generate, &d.train, &d.test) {
        (Some(g), _, _) => {
            let ds = gen_clusters(g.k, g.n_per, g.dim, g.spread, cfg.seed)?;
            train_test_split(&ds, d.test_fraction, cfg.seed)?
        }
        (None, Some(tr), Some(te)) => (load_csv(tr)?, load_csv(te)?),
        (None, Some(tr), None) => train_test_split(&load_csv(tr)?, d.test_fraction, cfg.seed)?,
        (None, None, _) => return Err(config_err("/data", "set either generate or train")),
    };
    if train.dim() != test.dim() {
        return Err(config_err("/data/test", format!("train has {} features, test has {}", train.dim(), test.dim())));
    }
    match d.view_split {
        None => Ok(RunData {
            teacher_train: train.clone(),
            teacher_test: test.clone(),
            train,
            test,
            two_view: false,
        }),
        Some(split) => {
            let a = split_views(&train, split).map_err(|e| config_err("/data/view_split", e.to_string()))?;
            let b = split_views(&test, split)?;
            Ok(RunData {
                train: a.view_b,
                test: b.view_b,
                teacher_train: a.view_a,
                teacher_test: b.view_a,
                two_view: true,
            })
        }
    }
}

fn widths(input: usize, hidden: &[usize], classes: usize) -> Result<MlpSpec> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(classes);
    MlpSpec::new(w)
}

fn classes(data: &RunData) -> usize {
    data.train.classes.max(data.test.classes)
}

pub fn teacher_spec(cfg: &RunConfig, data: &RunData) -> Result<MlpSpec> {
    widths(data.teacher_train.dim(), &cfg.teacher.hidden, classes(data))
}

pub fn student_spec(cfg: &RunConfig, data: &RunData) -> Result<MlpSpec> {
    widths(data.train.dim(), &cfg.student.hidden, classes(data))
}

/// Loads the configured teacher or trains one. Returns the frozen model and
/// its training report when it was trained here.
pub fn obtain_teacher(cfg: &RunConfig, data: &RunData) -> Result<(Model, Option<TrainReport>)> {
    let spec = teacher_spec(cfg, data)?;
    if let Some(path) = &cfg.teacher.model {
        let mut m = Model::load(path)?;
        if m.spec().input() != spec.input() || m.spec().classes() != spec.classes() {
            return Err(config_err(
                "/teacher/model",
                format!("model widths {:?} do not fit the data ({} -> {})", m.spec().widths(), spec.input(), spec.classes()),
            ));
        }
        m.freeze();
        return Ok((m, None));
    }
    if cfg.objective == Objective::CeOnly {
        // Never consulted by ce_only; skip the training cost.
        let mut m = Model::init(spec, 0);
        m.freeze();
        return Ok((m, None));
    }
    let (m, r) = train_teacher(&data.teacher_train, &data.teacher_test, spec, &cfg.teacher.train)?;
    Ok((m, Some(r)))
}

/// Results of one distillation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub objective: String,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub final_test_acc: f64,
    pub teacher_test_acc: Option<f64>,
    /// Two-view runs: probe accuracy on the distilled student's embeddings
    /// and on a same-seed untrained student's.
    pub probe_acc: Option<f64>,
    pub scratch_probe_acc: Option<f64>,
}

pub struct RunOutcome {
    pub student: Model,
    pub report: TrainReport,
    pub summary: RunSummary,
}

pub fn run_distill(cfg: &RunConfig, data: &RunData, teacher: &Model) -> Result<RunOutcome> {
    let spec = student_spec(cfg, data)?;
    let teacher_x = data.two_view.then_some(&data.teacher_train.x);
    let (mut student, report) =
        distill_student(&data.train, teacher_x, &data.test, teacher, spec.clone(), &cfg.distill, cfg.objective)?;
    student.freeze();
    let (probe_acc, scratch_probe_acc) = if data.two_view {
        let mut scratch = Model::init(spec, student_init_seed(cfg.seed));
        scratch.freeze();
        (
            Some(linear_probe(&student, &data.train, &data.test, &cfg.probe)?),
            Some(linear_probe(&scratch, &data.train, &data.test, &cfg.probe)?),
        )
    } else {
        (None, None)
    };
    let teacher_test_acc = if cfg.objective == Objective::CeOnly && cfg.teacher.model.is_none() {
        None
    } else {
        Some(evaluate(teacher, &data.teacher_test)?)
    };
    let summary = RunSummary {
        objective: cfg.objective.name().into(),
        seed: cfg.seed,
        lambda1: cfg.distill.lambda1,
        lambda2: cfg.distill.lambda2,
        final_test_acc: report.final_test_acc,
        teacher_test_acc,
        probe_acc,
        scratch_probe_acc,
    };
    Ok(RunOutcome { student, report, summary })
}

fn write_run_files(dir: &Path, cfg: &RunConfig, report: &TrainReport, timing: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("effective-config.json"), cfg.to_json())?;
    fs::write(dir.join("report.csv"), report.to_csv(timing))?;
    fs::write(dir.join("timing.csv"), report.timing_csv())?;
    Ok(())
}

fn write_summary(dir: &Path, summary: &RunSummary) -> Result<()> {
    let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
    s.push('\n');
    fs::write(dir.join("summary.json"), s)?;
    Ok(())
}

fn fmt_acc(a: f64) -> String {
    format!("{:.4}", a)
}

fn cmd_gen_data(a: &GenDataArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let ds = gen_clusters(a.k, a.n_per, a.dim, a.spread, seed)?;
    let (train, test) = train_test_split(&ds, a.test_fraction, seed)?;
    fs::create_dir_all(&a.out)?;
    save_csv(&train, &a.out.join("train.csv"))?;
    save_csv(&test, &a.out.join("test.csv"))?;
    writeln!(
        out,
        "wrote {} train and {} test rows ({} classes, {} features, seed {seed}) to {}",
        train.len(),
        test.len(),
        a.k,
        a.dim,
        a.out.display()
    )?;
    Ok(())
}

fn cmd_train_teacher(a: &RunArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?.resolve(seed)?;
    let dir = cfg.out_dir(a.out.as_ref());
    let data = load_data(&cfg)?;
    let spec = teacher_spec(&cfg, &data)?;
    let (model, report) = train_teacher(&data.teacher_train, &data.teacher_test, spec, &cfg.teacher.train)?;
    write_run_files(&dir, &cfg, &report, a.timing)?;
    model.save(&dir.join("teacher.bin"))?;
    writeln!(out, "teacher test_acc={} epochs={} out={}", fmt_acc(report.final_test_acc), report.epochs.len(), dir.display())?;
    Ok(())
}

fn cmd_distill(a: &RunArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?.resolve(seed)?;
    let dir = cfg.out_dir(a.out.as_ref());
    let data = load_data(&cfg)?;
    let (teacher, teacher_report) = obtain_teacher(&cfg, &data)?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("effective-config.json"), cfg.to_json())?;
    if let Some(r) = &teacher_report {
        teacher.save(&dir.join("teacher.bin"))?;
        fs::write(dir.join("teacher-report.csv"), r.to_csv(a.timing))?;
    }
    let run = run_distill(&cfg, &data, &teacher)?;
    write_run_files(&dir, &cfg, &run.report, a.timing)?;
    run.student.save(&dir.join("student.bin"))?;
    write_summary(&dir, &run.summary)?;
    let mut line = format!("{} seed={} test_acc={}", cfg.objective, cfg.seed, fmt_acc(run.summary.final_test_acc));
    if let (Some(p), Some(s)) = (run.summary.probe_acc, run.summary.scratch_probe_acc) {
        let _ = write!(line, " probe_acc={} scratch_probe_acc={}", fmt_acc(p), fmt_acc(s));
    }
    writeln!(out, "{line} out={}", dir.display())?;
    Ok(())
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One grid cell: the swept value and the metric per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub value: f64,
    pub accs: Vec<f64>,
}

fn sweep_label(p: SweepParam) -> &'static str {
    match p {
        SweepParam::Lambda1 => "lambda1",
        SweepParam::Lambda2 => "lambda2",
    }
}

/// Runs `cfg` for every (value, seed) pair, training one teacher per seed.
/// The metric is test accuracy, or probe accuracy in two-view mode.
pub fn run_sweep(
    base: &RunConfig,
    lambda2: bool,
    values: &[f64],
    seeds: &[u64],
    mut on_run: impl FnMut(&RunConfig, &RunOutcome) -> Result<()>,
) -> Result<Vec<SweepCell>> {
    let mut cells: Vec<SweepCell> = values.iter().map(|&value| SweepCell { value, accs: Vec::new() }).collect();
    for &seed in seeds {
        let cfg = base.clone().resolve(Some(seed))?;
        let data = load_data(&cfg)?;
        let (teacher, _) = obtain_teacher(&cfg, &data)?;
        for cell in cells.iter_mut() {
            let mut c = cfg.clone();
            if lambda2 {
                c.distill.lambda2 = cell.value;
            } else {
                c.distill.lambda1 = cell.value;
            }
            let c = c.resolve(None)?;
            let run = run_distill(&c, &data, &teacher)?;
            cell.accs.push(run.summary.probe_acc.unwrap_or(run.summary.final_test_acc));
            on_run(&c, &run)?;
        }
    }
    Ok(cells)
}

pub fn sweep_table(param: &str, cells: &[SweepCell]) -> String {
    let mut s = format!("| {param} | runs | mean | std |\n|---|---|---|---|\n");
    for c in cells {
        let (m, sd) = mean_std(&c.accs);
        let _ = writeln!(s, "| {} | {} | {} | {} |", c.value, c.accs.len(), fmt_acc(m), fmt_acc(sd));
    }
    s
}

fn cmd_sweep(a: &SweepArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let base = RunConfig::load(&a.config)?;
    base.clone().resolve(seed)?;
    if a.values.is_empty() || a.seeds.is_empty() {
        return Err(config_err("/", "sweep needs at least one value and one seed"));
    }
    let dir = base.out_dir(a.out.as_ref());
    let label = sweep_label(a.param);
    let seeds = match seed {
        Some(s) => vec![s],
        None => a.seeds.clone(),
    };
    let mut rows = format!("{label},seed,acc\n");
    let cells = run_sweep(&base, a.param == SweepParam::Lambda2, &a.values, &seeds, |c, run| {
        let v = if a.param == SweepParam::Lambda2 { c.distill.lambda2 } else { c.distill.lambda1 };
        let run_dir = dir.join(format!("{label}_{v}")).join(format!("seed_{}", c.seed));
        write_run_files(&run_dir, c, &run.report, a.timing)?;
        write_summary(&run_dir, &run.summary)?;
        let _ = writeln!(rows, "{v},{},{}", c.seed, run.summary.probe_acc.unwrap_or(run.summary.final_test_acc));
        Ok(())
    })?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("sweep.csv"), rows)?;
    let mut summary = format!("{label},runs,mean,std\n");
    for c in &cells {
        let (m, sd) = mean_std(&c.accs);
        let _ = writeln!(summary, "{},{},{m},{sd}", c.value, c.accs.len());
    }
    fs::write(dir.join("sweep_summary.csv"), summary)?;
    write!(out, "{}", sweep_table(label, &cells))?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let model = Model::load(&a.model)?;
    let ds = load_csv(&a.data)?;
    if ds.dim() != model.spec().input() {
        return Err(Error::Contract(format!("model expects {} features, data has {}", model.spec().input(), ds.dim())));
    }
    writeln!(out, "accuracy={} rows={}", fmt_acc(evaluate(&model, &ds)?), ds.len())?;
    Ok(())
}

fn cmd_probe(a: &ProbeArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let cfg = TrainConfig { lr: a.lr, epochs: a.epochs, batch_size: a.batch_size, seed: seed.unwrap_or(a.seed) };
    let train = load_csv(&a.train)?;
    let test = load_csv(&a.test)?;
    let acc = match &a.model {
        Some(p) => {
            let mut m = Model::load(p)?;
            if train.dim() != m.spec().input() {
                return Err(Error::Contract(format!("model expects {} features, data has {}", m.spec().input(), train.dim())));
            }
            m.freeze();
            linear_probe(&m, &train, &test, &cfg)?
        }
        None => linear_probe_features(&train, &test, &cfg)?,
    };
    writeln!(out, "probe_accuracy={}", fmt_acc(acc))?;
    Ok(())
}

/// Numeric CSV without a header.
pub fn parse_matrix(text: &str) -> Result<Tensor> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { line: i + 1, detail: e.to_string() })?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Parse { line: i + 1, detail: "ragged row".into() });
        }
        for cell in rec.iter() {
            data.push(cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                line: i + 1,
                detail: format!("{cell:?} is not a number"),
            })?);
        }
        rows += 1;
    }
    match cols {
        Some(c) if c > 0 => Ok(Tensor::matrix(rows, c, data)),
        _ => Err(Error::Parse { line: 1, detail: "empty matrix".into() }),
    }
}

pub fn format_matrix(t: &Tensor) -> String {
    let mut s = String::new();
    for i in 0..t.rows() {
        let row: Vec<String> = t.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn read_weights(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Error::Parse { line: 0, detail: format!("{s:?} is not a number") }))
        .collect()
}

fn cmd_sinkhorn(a: &SinkhornArgs, out: &mut dyn Write) -> Result<()> {
    let values = match &a.cost {
        Some(p) => parse_matrix(&fs::read_to_string(p)?)?,
        None => parse_matrix(SINKHORN_FIXTURE)?,
    };
    let cost = CostMatrix::new(values, CostMetric::Given)?;
    let epsilon = if a.absolute || cost.mean() == 0.0 {
        // An all-zero cost matrix has no scale to be relative to.
        Epsilon::Absolute(a.epsilon)
    } else {
        Epsilon::RelativeToMeanCost(a.epsilon)
    };
    let cfg = SinkhornConfig { epsilon, outer_iters: a.outer, inner_iters: a.inner, marginal_tol: a.tol };
    let mu = match &a.mu {
        Some(p) => read_weights(p)?,
        None => uniform(cost.rows()),
    };
    let nu = match &a.nu {
        Some(p) => read_weights(p)?,
        None => uniform(cost.cols()),
    };
    let (plan, w) = solve_transport(&cost, &mu, &nu, &cfg)?;
    writeln!(out, "W={w}")?;
    writeln!(out, "row_residual={:e} col_residual={:e}", plan.row_residual, plan.col_residual)?;
    writeln!(
        out,
        "outer_iters={} inner_sweeps_total={} epsilon={} converged={}",
        plan.outer_iters_used, plan.inner_iters_used, plan.epsilon, plan.converged
    )?;
    if a.fixture {
        writeln!(out, "exact={}", exact_assignment_cost(&cost)?)?;
    }
    if let Some(p) = &a.plan_out {
        fs::write(p, format_matrix(&plan.pi))?;
    }
    Ok(())
}

/// A run directory as read back by `report`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub dir: PathBuf,
    pub label: String,
    pub rank: usize,
    pub acc: Option<f64>,
}

fn final_acc_from_report(text: &str) -> Option<f64> {
    let mut lines = text.lines();
    if lines.next()? != REPORT_HEADER {
        return None;
    }
    let last = lines.rfind(|l| !l.trim().is_empty())?;
    last.split(',').nth(5)?.parse().ok()
}

pub fn read_run(dir: &Path) -> RunRow {
    let cfg = fs::read_to_string(dir.join("effective-config.json")).ok().and_then(|t| RunConfig::from_json(&t).ok());
    let summary: Option<RunSummary> =
        fs::read_to_string(dir.join("summary.json")).ok().and_then(|t| serde_json::from_str(&t).ok());
    let (label, rank) = match &cfg {
        Some(c) => {
            let defaults = DistillConfig::default();
            let mut label = c.objective.name().to_string();
            let w = c.objective.weights(&c.distill);
            if w.critic > 0.0 && c.distill.lambda1 != defaults.lambda1 {
                let _ = write!(label, " lambda1={}", c.distill.lambda1);
            }
            if w.transport > 0.0 && c.distill.lambda2 != defaults.lambda2 {
                let _ = write!(label, " lambda2={}", c.distill.lambda2);
            }
            let rank = Objective::ALL.iter().position(|o| *o == c.objective).unwrap_or(usize::MAX);
            (label, rank)
        }
        None => (dir.display().to_string(), usize::MAX),
    };
    let acc = fs::read_to_string(dir.join("report.csv"))
        .ok()
        .and_then(|t| final_acc_from_report(&t))
        .map(|a| summary.as_ref().and_then(|s| s.probe_acc).unwrap_or(a));
    RunRow { dir: dir.to_path_buf(), label, rank, acc }
}

/// Markdown and CSV tables: one row per label with mean and std over runs,
/// plus one row per unreadable run.
pub fn report_tables(rows: &[RunRow]) -> (String, String) {
    let mut groups: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    let mut failed: Vec<&RunRow> = Vec::new();
    for r in rows {
        match r.acc {
            Some(a) => groups.entry((r.rank, r.label.clone())).or_default().push(a),
            None => failed.push(r),
        }
    }
    let mut md = String::from("| run | n | acc mean | acc std |\n|---|---|---|---|\n");
    let mut csv = String::from("run,n,mean,std,status\n");
    for ((_, label), accs) in &groups {
        let (m, s) = mean_std(accs);
        let _ = writeln!(md, "| {label} | {} | {} | {} |", accs.len(), fmt_acc(m), fmt_acc(s));
        let _ = writeln!(csv, "{label},{},{m},{s},ok", accs.len());
    }
    for r in failed {
        let _ = writeln!(md, "| {} | 0 | failed | failed |", r.dir.display());
        let _ = writeln!(csv, "{},0,,,failed", r.dir.display());
    }
    (md, csv)
}

fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    let rows: Vec<RunRow> = a.runs.iter().map(|d| read_run(d)).collect();
    let (md, csv) = report_tables(&rows);
    write!(out, "{md}")?;
    if let Some(p) = &a.csv {
        fs::write(p, csv)?;
    }
    Ok(())
}

fn seed_override(env: Option<&str>) -> Result<Option<u64>> {
    env.map(|s| {
        s.trim()
            .parse::<u64>()
            .map_err(|_| config_err("/seed", format!("{SEED_ENV}={s:?} is not an unsigned integer")))
    })
    .transpose()
}

/// Parses `args` (including the program name) and runs the command. Returns
/// the process exit code.
pub fn run<I, T>(args: I, env_seed: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = seed_override(env_seed).and_then(|seed| match &cli.command {
        Command::GenData(a) => cmd_gen_data(a, seed.unwrap_or(a.seed), out),
        Command::TrainTeacher(a) => cmd_train_teacher(a, seed, out),
        Command::Distill(a) => cmd_distill(a, seed, out),
        Command::Sweep(a) => cmd_sweep(a, seed, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Probe(a) => cmd_probe(a, seed, out),
        Command::Sinkhorn(a) => cmd_sinkhorn(a, out),
        Command::Report(a) => cmd_report(a, out),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if let Error::Divergence { last_finite_epoch, .. } = &e {
                let last = last_finite_epoch.map_or("none".to_string(), |ep| ep.to_string());
                let _ = writeln!(err, "last finite epoch: {last}");
            }
            e.exit_code()
        }
    }
}
