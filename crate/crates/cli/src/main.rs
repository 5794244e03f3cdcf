//! `pacmix`: generate instances, learn mixtures, and evaluate divergences.

mod gen;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pacmix::candidates::{candidates_from_moments, CandidateWMV};
use pacmix::convert::convert;
use pacmix::divergence::{kl_closed_form, kl_monte_carlo, kl_quadrature};
use pacmix::io::{
    load_json, load_model, load_samples, read_jsonl, save_json, save_samples, write_jsonl, write_scores_csv,
};
use pacmix::mlselect::select_ml;
use pacmix::model::{tail_threshold, theta_for};
use pacmix::pipeline::{learn, parameter_schedule, GridBudget, LearnConfig, Target};
use pacmix::sampling::{draw_mixture, estimate_moment_table_with, MomentOptions, SampleUse};
use pacmix::wam::PruneConfig;
use pacmix::{Bounds, Error, MixtureModel, SampleSet};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "pacmix", version, about = "PAC learning of axis-aligned Gaussian mixtures")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for output files.
    #[arg(long, global = true, env = "PACMIX_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a model JSON and sample CSV from an instance config.
    Gen { config: PathBuf },
    /// Learn a mixture from a sample CSV.
    Learn {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        bounds: BoundsArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        budget: BudgetArgs,
        /// Planted model, for accuracy and KL diagnostics in the report.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// KL(p || q) between two model files.
    Kl(KlArgs),
    /// Candidate lists only: moments, both WAM runs and their cross product.
    Wam {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        bounds: BoundsArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        budget: BudgetArgs,
    },
    /// Clamp candidates (JSON-lines) into bounded mixtures.
    Convert {
        #[arg(long)]
        candidates: PathBuf,
        #[command(flatten)]
        bounds: BoundsArgs,
        /// Weight floor; defaults to the schedule value for --eps.
        #[arg(long)]
        eps_wts: Option<f64>,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
    },
    /// Maximum-likelihood choice among hypotheses (JSON-lines models).
    Select {
        #[arg(long)]
        hypotheses: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        /// Keep only rows inside [-M, M]^n.
        #[arg(long, conflicts_with = "eps")]
        m_box: Option<f64>,
        /// Derive M from the tail policy at this eps.
        #[arg(long)]
        eps: Option<f64>,
    },
}

#[derive(Args, Debug)]
struct KlArgs {
    #[arg(long)]
    p: PathBuf,
    #[arg(long)]
    q: PathBuf,
    #[arg(long, value_enum, default_value = "monte_carlo")]
    method: Method,
    #[arg(long, default_value_t = 1_000_000)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Quadrature box half-width; defaults to mu_max + 10 sigma_max.
    #[arg(long)]
    half_width: Option<f64>,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Method {
    #[value(name = "closed_form")]
    ClosedForm,
    #[value(name = "monte_carlo")]
    MonteCarlo,
    #[value(name = "quadrature")]
    Quadrature,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    #[arg(long)]
    mu_max: f64,
    #[arg(long)]
    sigma2_min: f64,
    #[arg(long)]
    sigma2_max: f64,
}

impl BoundsArgs {
    fn bounds(&self) -> pacmix::Result<Bounds> {
        Bounds::new(self.mu_max, self.sigma2_min, self.sigma2_max)
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tail mass for the truncation box; defaults to the eps-based policy.
    #[arg(long)]
    theta: Option<f64>,
}

#[derive(Args, Debug)]
struct BudgetArgs {
    #[arg(long)]
    budget_weight_step: Option<f64>,
    #[arg(long)]
    budget_mean_step: Option<f64>,
    #[arg(long)]
    budget_second_step: Option<f64>,
    #[arg(long)]
    budget_max_list: Option<usize>,
    #[arg(long)]
    budget_max_work: Option<u64>,
    #[arg(long)]
    budget_max_hypotheses: Option<usize>,
    #[arg(long)]
    budget_ml_samples: Option<usize>,
    #[arg(long)]
    budget_ml_fraction: Option<f64>,
    #[arg(long)]
    budget_kl_samples: Option<usize>,
    /// Disable residual pruning in the WAM search.
    #[arg(long)]
    budget_no_prune: bool,
    #[arg(long)]
    budget_prune_z: Option<f64>,
    #[arg(long)]
    budget_prune_slack: Option<f64>,
    #[arg(long)]
    budget_cond_threshold: Option<f64>,
    /// Keep every grid survivor instead of the best --budget-max-list.
    #[arg(long)]
    budget_unlimited_list: bool,
}

impl BudgetArgs {
    fn budget(&self) -> GridBudget {
        let mut b = GridBudget::default();
        macro_rules! set {
            ($field:ident, $flag:ident) => {
                if let Some(v) = self.$flag {
                    b.$field = v;
                }
            };
        }
        set!(weight_step, budget_weight_step);
        set!(mean_step, budget_mean_step);
        set!(second_moment_step, budget_second_step);
        set!(max_ml_samples, budget_ml_samples);
        set!(ml_fraction, budget_ml_fraction);
        set!(kl_samples, budget_kl_samples);
        if let Some(v) = self.budget_max_list {
            b.max_list = Some(v);
        }
        if self.budget_unlimited_list {
            b.max_list = None;
        }
        if let Some(v) = self.budget_max_work {
            b.max_work = Some(v);
        }
        if let Some(v) = self.budget_max_hypotheses {
            b.max_hypotheses = Some(v);
        }
        b.cond_threshold = self.budget_cond_threshold;
        let mut p = PruneConfig::default();
        if let Some(z) = self.budget_prune_z {
            p.z = z;
        }
        if let Some(s) = self.budget_prune_slack {
            p.slack = s;
        }
        b.prune = (!self.budget_no_prune).then_some(p);
        b
    }
}

/// The command line that produced an output file.
#[derive(Debug, Clone, Serialize)]
struct Invocation {
    program: &'static str,
    version: &'static str,
    args: Vec<String>,
}

impl Invocation {
    fn current() -> Self {
        Invocation {
            program: "pacmix",
            version: env!("CARGO_PKG_VERSION"),
            args: std::env::args().skip(1).collect(),
        }
    }
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    #[serde(flatten)]
    body: &'a T,
    invocation: &'a Invocation,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    file: String,
    description: &'a str,
    invocation: &'a Invocation,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::BudgetExhausted { .. } => 2,
            e if e.is_estimation_failure() => 3,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

struct Out<'a> {
    dir: &'a Path,
    inv: &'a Invocation,
}

impl Out<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        let p = self.path(name);
        save_json(
            &Stamped {
                body: value,
                invocation: self.inv,
            },
            &p,
        )?;
        Ok(p)
    }

    /// CSV and JSON-lines files carry their invocation in `<name>.provenance.json`.
    fn sidecar(&self, name: &str, description: &str) -> CliResult<()> {
        let s = Sidecar {
            file: name.to_string(),
            description,
            invocation: self.inv,
        };
        save_json(&s, &self.path(&format!("{name}.provenance.json")))?;
        Ok(())
    }

    fn jsonl<T: Serialize>(&self, name: &str, items: &[T], description: &str) -> CliResult<()> {
        let f = File::create(self.path(name)).map_err(Error::from)?;
        write_jsonl(items, BufWriter::new(f))?;
        self.sidecar(name, description)
    }
}

fn open_samples(path: &Path) -> CliResult<SampleSet> {
    load_samples(path).map_err(|e| Failure {
        code: 1,
        message: format!("cannot read samples {}: {e}", path.display()),
    })
}

fn open_model(path: &Path) -> CliResult<MixtureModel> {
    load_model(path).map_err(|e| Failure {
        code: 1,
        message: format!("cannot read model {}: {e}", path.display()),
    })
}

fn open_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let f = File::open(path).map_err(|e| Failure {
        code: 1,
        message: format!("cannot open {}: {e}", path.display()),
    })?;
    Ok(read_jsonl(BufReader::new(f))?)
}

fn cmd_gen(config: &Path, out: &Out) -> CliResult<()> {
    let cfg: gen::GenConfig = load_json(config).map_err(|e| Failure {
        code: 1,
        message: format!("cannot read config {}: {e}", config.display()),
    })?;
    let model = cfg.build()?;
    let samples = draw_mixture(&model, cfg.m, cfg.seed)?;
    out.json("model.json", &model)?;
    save_samples(&samples, &out.path("samples.csv"))?;
    out.sidecar("samples.csv", &samples.source_desc)?;
    let b = model.bounds();
    println!("k = {}, n = {}, m = {}", model.k(), model.n(), samples.rows());
    println!("L = {:.6}", b.l());
    match gen::separation(&model) {
        Some(s) => println!("separation = {s:.4} sigma"),
        None => println!("separation = n/a (single component)"),
    }
    Ok(())
}

fn cmd_learn(
    samples: &Path,
    k: usize,
    bounds: &BoundsArgs,
    run: &RunArgs,
    budget: &BudgetArgs,
    truth: Option<&Path>,
    out: &Out,
) -> CliResult<()> {
    let samples = open_samples(samples)?;
    let truth = truth.map(open_model).transpose()?;
    let b = bounds.bounds()?;
    let mut cfg = LearnConfig::new(k, run.eps, run.delta, run.seed);
    cfg.theta = run.theta;
    cfg.budget = budget.budget();
    match learn(Target::Samples(&samples), &b, &cfg, truth.as_ref()) {
        Ok((model, report)) => {
            out.json("learned.json", &model)?;
            out.json("report.json", &report)?;
            if let Some(kl) = &report.kl_to_truth {
                println!("KL(truth || learned) = {:.6} +- {:.6}", kl.value, kl.std_error);
            }
            println!(
                "selected hypothesis {:?} of {:?}",
                report.selected_index, report.hypotheses
            );
            Ok(())
        }
        Err(f) => {
            out.json("report.json", &*f.partial)?;
            let mut fail = Failure::from(f.error);
            fail.message = format!(
                "{}; partial report in {}",
                fail.message,
                out.path("report.json").display()
            );
            Err(fail)
        }
    }
}

fn cmd_kl(a: &KlArgs, out: &Out) -> CliResult<()> {
    let (p, q) = (open_model(&a.p)?, open_model(&a.q)?);
    let est = match a.method {
        Method::ClosedForm => kl_closed_form(&p, &q)?,
        Method::MonteCarlo => kl_monte_carlo(&p, &q, a.m, a.seed)?,
        Method::Quadrature => {
            let b = p.bounds();
            let hw = a.half_width.unwrap_or(b.mu_max() + 10.0 * b.sigma_max());
            kl_quadrature(&p, &q, hw, a.tol)?
        }
    };
    let s = serde_json::to_string_pretty(&Stamped {
        body: &est,
        invocation: out.inv,
    })
    .map_err(Error::from)?;
    println!("{s}");
    Ok(())
}

#[derive(Serialize)]
struct WamSummary<'a> {
    raw_config: &'a pacmix::wam::WamConfig,
    squared_config: &'a pacmix::wam::WamConfig,
    raw_stats: pacmix::wam::WamStats,
    squared_stats: pacmix::wam::WamStats,
    means_list: usize,
    second_moment_list: usize,
    products: usize,
}

fn cmd_wam(
    samples: &Path,
    k: usize,
    bounds: &BoundsArgs,
    run: &RunArgs,
    budget: &BudgetArgs,
    out: &Out,
) -> CliResult<()> {
    let samples = open_samples(samples)?;
    let b = bounds.bounds()?;
    let budget = budget.budget();
    budget.validate()?;
    let theta = run.theta.unwrap_or_else(|| theta_for(run.eps, &b, samples.n()));
    let table = estimate_moment_table_with(
        &samples,
        &b,
        &MomentOptions {
            eps: run.eps,
            delta: run.delta,
            sample_use: SampleUse::AllRows,
            theta: Some(theta),
        },
    )?;
    let (raw, sq) = budget.wam_configs(&b, k, pacmix::rng::derive_seed(run.seed, pacmix::pipeline::stage::WAM));
    let set = candidates_from_moments(&table, &raw, &sq, budget.max_hypotheses)?;
    out.json("moments.json", &table)?;
    out.jsonl("means_list.jsonl", &set.means_list, "WAM candidates on raw moments")?;
    out.jsonl(
        "second_moment_list.jsonl",
        &set.second_moment_list,
        "WAM candidates on squared moments",
    )?;
    out.jsonl(
        "candidates.jsonl",
        &set.products,
        "cross product with parent indices and grid indices",
    )?;
    out.json(
        "wam_report.json",
        &WamSummary {
            raw_config: &set.raw_config,
            squared_config: &set.squared_config,
            raw_stats: set.raw_stats,
            squared_stats: set.squared_stats,
            means_list: set.means_list.len(),
            second_moment_list: set.second_moment_list.len(),
            products: set.products.len(),
        },
    )?;
    println!(
        "{} mean candidates, {} second-moment candidates, {} products",
        set.means_list.len(),
        set.second_moment_list.len(),
        set.products.len()
    );
    Ok(())
}

fn cmd_convert(candidates: &Path, bounds: &BoundsArgs, eps_wts: Option<f64>, eps: f64, out: &Out) -> CliResult<()> {
    let cands: Vec<CandidateWMV> = open_jsonl(candidates)?;
    let first = cands.first().ok_or_else(|| Failure {
        code: 1,
        message: format!("{} holds no candidates", candidates.display()),
    })?;
    let b = bounds.bounds()?;
    let eps_wts = match eps_wts {
        Some(e) => e,
        None => parameter_schedule(eps, &b, first.n(), first.k())?.eps_wts,
    };
    let models = cands
        .iter()
        .map(|c| convert(c, &b, eps_wts))
        .collect::<pacmix::Result<Vec<_>>>()?;
    out.jsonl(
        "hypotheses.jsonl",
        &models,
        &format!("converted with eps_wts = {eps_wts:e}"),
    )?;
    println!("{} hypotheses", models.len());
    Ok(())
}

#[derive(Serialize)]
struct Selection<'a> {
    index: usize,
    log_likelihood: f64,
    m_box: Option<f64>,
    rows_used: usize,
    rows_supplied: usize,
    model: &'a MixtureModel,
}

fn cmd_select(hypotheses: &Path, samples: &Path, m_box: Option<f64>, eps: Option<f64>, out: &Out) -> CliResult<()> {
    let hyps: Vec<MixtureModel> = open_jsonl(hypotheses)?;
    let samples = open_samples(samples)?;
    let m_box = match (m_box, eps, hyps.first()) {
        (Some(m), _, _) => Some(m),
        (None, Some(e), Some(h)) => Some(tail_threshold(h.bounds(), theta_for(e, h.bounds(), samples.n()))?),
        _ => None,
    };
    let used = match m_box {
        Some(m) => {
            let rows: Vec<f64> = samples
                .iter_rows()
                .filter(|r| r.iter().all(|v| v.abs() <= m))
                .flatten()
                .copied()
                .collect();
            SampleSet::new(
                rows,
                samples.n(),
                samples.seed,
                format!("{}; truncated to M={m}", samples.source_desc),
            )?
        }
        None => samples.clone(),
    };
    let sel = select_ml(&hyps, &used)?;
    let f = File::create(out.path("scores.csv")).map_err(Error::from)?;
    write_scores_csv(&sel.log_likelihoods, BufWriter::new(f))?;
    out.sidecar("scores.csv", "total log-likelihood per hypothesis")?;
    out.json(
        "selected.json",
        &Selection {
            index: sel.index,
            log_likelihood: sel.log_likelihoods[sel.index],
            m_box,
            rows_used: used.rows(),
            rows_supplied: samples.rows(),
            model: &hyps[sel.index],
        },
    )?;
    println!("selected hypothesis {} of {}", sel.index, hyps.len());
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure {
                code: 1,
                message: format!("cannot start {t} threads: {e}"),
            })?;
    }
    std::fs::create_dir_all(&cli.out_dir).map_err(Error::from)?;
    let inv = Invocation::current();
    let out = Out {
        dir: &cli.out_dir,
        inv: &inv,
    };
    match &cli.cmd {
        Command::Gen { config } => cmd_gen(config, &out),
        Command::Learn {
            samples,
            k,
            bounds,
            run,
            budget,
            truth,
        } => cmd_learn(samples, *k, bounds, run, budget, truth.as_deref(), &out),
        Command::Kl(a) => cmd_kl(a, &out),
        Command::Wam {
            samples,
            k,
            bounds,
            run,
            budget,
        } => cmd_wam(samples, *k, bounds, run, budget, &out),
        Command::Convert {
            candidates,
            bounds,
            eps_wts,
            eps,
        } => cmd_convert(candidates, bounds, *eps_wts, *eps, &out),
        Command::Select {
            hypotheses,
            samples,
            m_box,
            eps,
        } => cmd_select(hypotheses, samples, *m_box, *eps, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("pacmix: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let budget = Error::BudgetExhausted {
            stage: "wam".into(),
            used: 2,
            limit: 1,
        };
        assert_eq!(Failure::from(budget).code, 2);
        assert_eq!(Failure::from(Error::AcceptanceRate { rate: 0.1, cap: 2.0 }).code, 3);
        let short = Error::InsufficientSamples {
            what: "moments".into(),
            required: 10,
            available: 1,
        };
        assert_eq!(Failure::from(short).code, 3);
        assert_eq!(Failure::from(Error::InvalidInput("x".into())).code, 1);
    }

    #[test]
    fn budget_flags_override_defaults() {
        let cli = Cli::try_parse_from([
            "pacmix",
            "wam",
            "--samples",
            "s.csv",
            "--k",
            "2",
            "--mu-max",
            "1",
            "--sigma2-min",
            "1",
            "--sigma2-max",
            "1",
            "--budget-mean-step",
            "0.1",
            "--budget-no-prune",
            "--budget-unlimited-list",
        ])
        .unwrap();
        let Command::Wam { budget, .. } = cli.cmd else { panic!() };
        let b = budget.budget();
        assert_eq!(b.mean_step, 0.1);
        assert_eq!(b.weight_step, GridBudget::default().weight_step);
        assert!(b.prune.is_none() && b.max_list.is_none());
    }
}
