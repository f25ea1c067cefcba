use std::fmt::Write as _;
use std::fs;

use noisecp::calibrate::{
    invert_noise_matrix, nacp_general_at, nacp_uniform_at, standard_cp, BreakpointMode,
    ScoreTable,
};
use noisecp::guarantees::{
    adjust_level, delta_acnl, delta_crcp, delta_nacp, ClassMarginals, CorrectionMethod,
    CorrectionTerm,
};
use noisecp::harness::{run_experiment, EvalMethod, ExperimentConfig, Pool, TRIVIAL_Q};
use noisecp::scores::prediction_set_for_sample;
use noisecp::synth::{accuracy, flip_rate, SynthConfig};
use noisecp::{LabeledSet, NoiseModel, ScoreParams};
use serde::{Deserialize, Serialize};

use crate::args::{
    CalibrateArgs, CalibrateMethod, EvaluateArgs, Format, GuaranteeArgs, NoiseArgs, PredictArgs,
    SimulateArgs, SynthArgs,
};
use crate::error::{CliError, Result};
use crate::io;

/// Exit status of a calibration whose target level forces full prediction sets.
pub const EXIT_TRIVIAL: u8 = 3;

fn noise_model(args: &NoiseArgs) -> Result<Option<NoiseModel>> {
    match (&args.epsilon, &args.noise_matrix) {
        (Some(eps), None) => Ok(Some(NoiseModel::uniform(*eps)?)),
        (None, Some(path)) => Ok(Some(NoiseModel::general(io::read_matrix(path)?)?)),
        (None, None) => Ok(None),
        (Some(_), Some(_)) => Err(CliError::Usage(
            "--epsilon and --noise-matrix are mutually exclusive".into(),
        )),
    }
}

fn require_noise(args: &NoiseArgs) -> Result<NoiseModel> {
    noise_model(args)?.ok_or_else(|| CliError::Usage("one of --epsilon or --noise-matrix is required".into()))
}

fn synth_config(args: &SynthArgs, seed: u64) -> SynthConfig {
    SynthConfig {
        class_prior: args.class_prior.clone(),
        signal_mu: args.signal_mu,
        logit_sigma: args.logit_sigma,
        ..SynthConfig::new(args.k, args.n, seed)
    }
}

fn marginals(prior: Option<&[f64]>, p: &nalgebra::DMatrix<f64>) -> Result<ClassMarginals> {
    Ok(match prior {
        Some(rho) => ClassMarginals::from_prior(rho.to_vec(), p)?,
        None => ClassMarginals::uniform(p)?,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.6}"))
}

#[derive(Debug, Serialize)]
struct SimulateSummary {
    n: usize,
    k: usize,
    seed: u64,
    epsilon: Option<f64>,
    accuracy: f64,
    flip_rate: f64,
    files: Vec<String>,
}

pub fn simulate(args: &SimulateArgs, format: Option<Format>) -> Result<u8> {
    let noise = noise_model(&args.noise)?.unwrap_or(NoiseModel::Uniform { epsilon: 0.0 });
    let config = synth_config(&args.synth, args.seed);
    let pool = Pool::synthetic(&config, &noise)?;
    fs::create_dir_all(&args.out_dir).map_err(|source| CliError::Io {
        path: args.out_dir.clone(),
        source,
    })?;
    let probs = args.out_dir.join("probs.csv");
    let clean = args.out_dir.join("clean_labels.csv");
    let noisy = args.out_dir.join("noisy_labels.csv");
    io::write_probabilities(&probs, pool.probs())?;
    io::write_labels(&clean, pool.clean())?;
    io::write_labels(&noisy, pool.noisy())?;

    let clean_set = LabeledSet::new(pool.probs().clone(), pool.clean().to_vec())?;
    let summary = SimulateSummary {
        n: pool.len(),
        k: pool.n_classes(),
        seed: args.seed,
        epsilon: noise.uniform_epsilon(),
        accuracy: accuracy(&clean_set),
        flip_rate: flip_rate(pool.clean(), pool.noisy()),
        files: [probs, clean, noisy].iter().map(|p| p.display().to_string()).collect(),
    };
    let text = match format.unwrap_or(Format::Text) {
        Format::Json => io::to_json(&summary) + "\n",
        Format::Text => format!(
            "n = {}\nk = {}\naccuracy = {:.6}\nflip_rate = {:.6}\nwrote {}\n",
            summary.n,
            summary.k,
            summary.accuracy,
            summary.flip_rate,
            summary.files.join(", ")
        ),
    };
    io::emit(None, &text)?;
    Ok(0)
}

/// Result of `calibrate`, also accepted by `predict --report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub method: String,
    pub estimator: String,
    /// `f64::MAX` when every prediction set must hold all classes.
    pub q: f64,
    pub q1: Option<f64>,
    pub q2: Option<f64>,
    pub achieved_fc: Option<f64>,
    pub target_level: f64,
    pub delta: Option<f64>,
    pub correction: Option<CorrectionTerm>,
    pub breakpoint_count: Option<usize>,
    pub breakpoint_mode: Option<BreakpointMode>,
    pub search_extended: bool,
    pub trivial_set: bool,
    pub alpha: f64,
    pub delta_conf: f64,
    pub epsilon: Option<f64>,
    pub score: ScoreParams,
    pub n: usize,
    pub k: usize,
}

impl CalibrationReport {
    fn text(&self) -> String {
        let mut out = String::new();
        let mut line = |key: &str, value: String| writeln!(out, "{key} = {value}").unwrap();
        line("method", self.method.clone());
        line("estimator", self.estimator.clone());
        line("q", if self.trivial_set { "inf".into() } else { format!("{}", self.q) });
        line("target_level", format!("{}", self.target_level));
        line("delta", fmt_opt(self.delta));
        line("q1", fmt_opt(self.q1));
        line("q2", fmt_opt(self.q2));
        line("achieved_fc", fmt_opt(self.achieved_fc));
        line("search_extended", self.search_extended.to_string());
        line("trivial_set", self.trivial_set.to_string());
        line("n", self.n.to_string());
        line("k", self.k.to_string());
        out
    }
}

fn correction(
    args: &CalibrateArgs,
    noise: &NoiseModel,
    calib: &LabeledSet,
) -> Result<CorrectionTerm> {
    let (n, k) = (calib.len(), calib.n_classes());
    let p = noise.matrix(k)?;
    let prior = args.class_prior.as_deref();
    Ok(match args.method {
        CalibrateMethod::Standard => unreachable!("standard CP has no correction"),
        CalibrateMethod::Nacp => {
            let eps = noise.uniform_epsilon().ok_or_else(|| {
                CliError::Usage("the nacp correction needs uniform noise (--epsilon)".into())
            })?;
            delta_nacp(n, eps, args.delta)?
        }
        CalibrateMethod::Acnl => {
            let mut counts = vec![0; k];
            for &y in calib.labels() {
                counts[y] += 1;
            }
            let m = marginals(prior, &p)?.with_counts(counts)?;
            delta_acnl(n, k, &p, &m, args.mc_samples, args.seed)?
        }
        CalibrateMethod::Crcp => delta_crcp(n, k, &p, &marginals(prior, &p)?)?,
    })
}

fn method_name(m: CalibrateMethod) -> &'static str {
    match m {
        CalibrateMethod::Standard => "standard",
        CalibrateMethod::Nacp => "nacp",
        CalibrateMethod::Acnl => "acnl",
        CalibrateMethod::Crcp => "crcp",
    }
}

pub fn calibrate(args: &CalibrateArgs, format: Option<Format>) -> Result<u8> {
    let params = args.score.params();
    params.validate()?;
    let probs = io::read_probabilities(&args.probs)?;
    let calib = LabeledSet::new(probs, io::read_labels(&args.labels)?)?;
    let (n, k) = (calib.len(), calib.n_classes());
    let options = args.search.options();
    let noise = noise_model(&args.noise)?;

    let mut report = CalibrationReport {
        method: method_name(args.method).into(),
        estimator: "standard_cp".into(),
        q: TRIVIAL_Q,
        q1: None,
        q2: None,
        achieved_fc: None,
        target_level: 1.0 - args.alpha,
        delta: None,
        correction: None,
        breakpoint_count: None,
        breakpoint_mode: None,
        search_extended: false,
        trivial_set: false,
        alpha: args.alpha,
        delta_conf: args.delta,
        epsilon: noise.as_ref().and_then(NoiseModel::uniform_epsilon),
        score: params,
        n,
        k,
    };

    if args.method == CalibrateMethod::Standard {
        if args.with_delta {
            return Err(CliError::Usage("--with-delta does not apply to standard CP".into()));
        }
        let table = ScoreTable::new(calib.probs(), &params)?;
        let rows: Vec<usize> = (0..n).collect();
        let r = standard_cp(&table.label_scores(&rows, calib.labels()), args.alpha)?;
        report.q = r.q;
        report.target_level = r.target_level;
        report.breakpoint_count = Some(r.breakpoint_count);
    } else {
        let noise = noise.ok_or_else(|| {
            CliError::Usage(format!(
                "--method {} needs --epsilon or --noise-matrix",
                report.method
            ))
        })?;
        if args.with_delta {
            let term = correction(args, &noise, &calib)?;
            let adjusted = adjust_level(args.alpha, term.delta_value);
            report.delta = Some(term.delta_value);
            report.target_level = adjusted.level;
            report.trivial_set = adjusted.trivial_set;
            report.correction = Some(term);
        }
        if !report.trivial_set {
            let r = match &noise {
                NoiseModel::Uniform { epsilon } => {
                    nacp_uniform_at(&calib, *epsilon, report.target_level, &params, &options)?
                }
                NoiseModel::General { matrix } => {
                    if let Err(e) = invert_noise_matrix(matrix)?.check_conditioning() {
                        eprintln!("warning: {e}");
                    }
                    nacp_general_at(&calib, matrix, report.target_level, &params, &options)?
                }
            };
            report.estimator = match &noise {
                NoiseModel::Uniform { .. } => "nacp_uniform".into(),
                NoiseModel::General { .. } => "nacp_general".into(),
            };
            report.q = r.q;
            report.q1 = Some(r.q1);
            report.q2 = Some(r.q2);
            report.achieved_fc = Some(r.achieved_fc);
            report.breakpoint_count = Some(r.breakpoint_count);
            report.breakpoint_mode = Some(options.breakpoints.mode_for(n, k));
            report.search_extended = r.search_extended;
        } else {
            report.estimator = "trivial".into();
        }
    }

    let json = io::to_json(&report) + "\n";
    if let Some(out) = &args.out {
        io::emit(Some(out), &json)?;
    }
    let text = match format.unwrap_or(Format::Json) {
        Format::Json => json,
        Format::Text => report.text(),
    };
    io::emit(None, &text)?;
    if report.trivial_set {
        eprintln!(
            "target level {} is at least 1: prediction sets hold every class",
            report.target_level
        );
        return Ok(EXIT_TRIVIAL);
    }
    Ok(0)
}

pub fn predict(args: &PredictArgs) -> Result<u8> {
    let (q, params) = match (&args.report, args.q) {
        (Some(path), _) => {
            let report: CalibrationReport = io::read_json(path)?;
            (report.q, report.score)
        }
        (None, Some(q)) => (q, args.score.params()),
        (None, None) => return Err(CliError::Usage("one of --q or --report is required".into())),
    };
    params.validate()?;
    let probs = io::read_probabilities(&args.probs)?;
    let mut out = String::with_capacity(probs.n_rows() * 4);
    for (i, row) in probs.rows().enumerate() {
        let set = prediction_set_for_sample(row, i as u64, q, &params)?;
        let mut first = true;
        for class in set {
            if !first {
                out.push(',');
            }
            first = false;
            write!(out, "{class}").unwrap();
        }
        out.push('\n');
    }
    io::emit(args.out.as_deref(), &out)?;
    Ok(0)
}

#[derive(Debug, Serialize)]
struct SplitRow {
    split: usize,
    method: String,
    q: f64,
    target_level: f64,
    delta: Option<f64>,
    coverage: f64,
    size: f64,
    noisy_coverage: f64,
    trivial_set: bool,
}

fn parse_methods(names: &[String]) -> Result<Vec<EvalMethod>> {
    Ok(names
        .iter()
        .map(|s| s.parse::<EvalMethod>())
        .collect::<noisecp::Result<Vec<_>>>()?)
}

pub fn evaluate(args: &EvaluateArgs, format: Option<Format>) -> Result<u8> {
    let noise = require_noise(&args.noise)?;
    let params = args.score.params();
    params.validate()?;
    let pool = match (&args.probs, args.k, args.n) {
        (Some(probs), _, _) => {
            let clean = args.clean_labels.as_ref().expect("clap requires clean labels");
            let noisy = args.noisy_labels.as_ref().expect("clap requires noisy labels");
            Pool::new(
                io::read_probabilities(probs)?,
                io::read_labels(clean)?,
                io::read_labels(noisy)?,
            )?
        }
        (None, Some(k), Some(n)) => {
            let synth = SynthArgs {
                k,
                n,
                signal_mu: args.signal_mu,
                logit_sigma: args.logit_sigma,
                class_prior: args.class_prior.clone(),
            };
            Pool::synthetic(&synth_config(&synth, args.seed), &noise)?
        }
        _ => {
            return Err(CliError::Usage(
                "give --probs with --clean-labels and --noisy-labels, or --k and --n".into(),
            ))
        }
    };

    let methods = match &args.methods {
        Some(names) => parse_methods(names)?,
        None => EvalMethod::ALL
            .into_iter()
            .filter(|&m| m != EvalMethod::Nacp || noise.uniform_epsilon().is_some())
            .collect(),
    };
    let config = ExperimentConfig {
        methods,
        score: params,
        alpha: args.alpha,
        delta_conf: args.delta,
        split_fraction: args.split_fraction,
        n_splits: args.splits,
        seed: args.seed,
        search: args.search.options(),
        mc_samples: args.mc_samples,
        class_prior: args.class_prior.clone(),
        ..ExperimentConfig::new(noise)
    };
    let report = run_experiment(&pool, &config)?;

    let json = io::to_json(&report) + "\n";
    if let Some(out) = &args.out {
        io::emit(Some(out), &json)?;
    }
    if let Some(path) = &args.splits_csv {
        let rows = report.splits.iter().flat_map(|s| {
            s.outcomes.iter().map(move |o| SplitRow {
                split: s.split,
                method: o.method.name().into(),
                q: o.q,
                target_level: o.target_level,
                delta: o.delta,
                coverage: o.coverage,
                size: o.size,
                noisy_coverage: o.noisy_coverage,
                trivial_set: o.trivial_set,
            })
        });
        io::write_records(path, rows)?;
    }
    let text = match format.unwrap_or(Format::Text) {
        Format::Json => json,
        Format::Text => report.text_table(),
    };
    io::emit(None, &text)?;
    Ok(0)
}

#[derive(Debug, Serialize)]
struct GuaranteeRow {
    method: CorrectionMethod,
    n: usize,
    k: usize,
    epsilon: Option<f64>,
    delta_conf: f64,
    delta: f64,
    target_level: f64,
    trivial_set: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    c_n: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_star: Option<usize>,
}

fn parse_correction(name: &str) -> Result<CorrectionMethod> {
    match name.trim().to_ascii_lowercase().as_str() {
        "nacp" => Ok(CorrectionMethod::Nacp),
        "acnl" => Ok(CorrectionMethod::Acnl),
        "crcp" => Ok(CorrectionMethod::Crcp),
        other => Err(CliError::Usage(format!(
            "unknown correction {other:?}; expected nacp, acnl or crcp"
        ))),
    }
}

pub fn guarantee(args: &GuaranteeArgs, format: Option<Format>) -> Result<u8> {
    let noise = require_noise(&args.noise)?;
    let p = noise.matrix(args.k)?;
    let m = marginals(args.class_prior.as_deref(), &p)?;
    let methods = match &args.methods {
        Some(names) => names.iter().map(|s| parse_correction(s)).collect::<Result<Vec<_>>>()?,
        None => {
            let mut all = vec![CorrectionMethod::Acnl, CorrectionMethod::Crcp];
            if noise.uniform_epsilon().is_some() {
                all.insert(0, CorrectionMethod::Nacp);
            }
            all
        }
    };

    let mut rows = Vec::new();
    for &n in &args.n {
        for &method in &methods {
            let term = match method {
                CorrectionMethod::Nacp => {
                    let eps = noise.uniform_epsilon().ok_or_else(|| {
                        CliError::Usage("the nacp correction needs uniform noise (--epsilon)".into())
                    })?;
                    delta_nacp(n, eps, args.delta)?
                }
                CorrectionMethod::Acnl => delta_acnl(n, args.k, &p, &m, args.mc_samples, args.seed)?,
                CorrectionMethod::Crcp => delta_crcp(n, args.k, &p, &m)?,
            };
            let adjusted = adjust_level(args.alpha, term.delta_value);
            rows.push(GuaranteeRow {
                method,
                n,
                k: args.k,
                epsilon: noise.uniform_epsilon(),
                delta_conf: args.delta,
                delta: term.delta_value,
                target_level: adjusted.level,
                trivial_set: adjusted.trivial_set,
                c_n: term.c_n,
                n_star: term.n_star,
            });
        }
    }

    let text = match format.unwrap_or(Format::Text) {
        Format::Json => io::to_json(&rows) + "\n",
        Format::Text => {
            let mut out = format!(
                "{:<6} {:>9} {:>7} {:>10} {:>10} {:>8}\n",
                "method", "n", "k", "delta", "level", "trivial"
            );
            for r in &rows {
                let name = match r.method {
                    CorrectionMethod::Nacp => "nacp",
                    CorrectionMethod::Acnl => "acnl",
                    CorrectionMethod::Crcp => "crcp",
                };
                writeln!(
                    out,
                    "{:<6} {:>9} {:>7} {:>10.6} {:>10.6} {:>8}",
                    name, r.n, r.k, r.delta, r.target_level, r.trivial_set
                )
                .unwrap();
            }
            out
        }
    };
    io::emit(None, &text)?;
    Ok(0)
}
