//! `discgrade` command-line front end.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use discgrade::adjudication::{MedianPolicy, ResolveMode};
use discgrade::agreement::{DistanceMetric, GradeSource};
use discgrade::io::read_cohort_spec;
use discgrade::logistic::FitOptions;
use discgrade::pipeline::{
    run_pipeline, AdjudicateArgs, AgreementArgs, Command, CompareArgs, FeatureArgs, MetricsArgs, PreprocessArgs,
    RunConfig, ScoresArgs, SimulateArgs, TuningInputs,
};
use discgrade::roc::{ComparisonMode, McNemarPairing, OperatingPointKind};
use discgrade::scores::{EyePolicy, ScoreMode};
use discgrade::stats::{CiMethod, McNemarVariant};
use discgrade::synth::CohortSpec;

#[derive(Parser, Debug)]
#[command(name = "discgrade", version, about = "Grading, adjudication and screening-score analysis for optic disc photographs")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Seed for every random draw (bootstrap, simulation, augmentation).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Bootstrap resamples.
    #[arg(long, global = true, default_value_t = 2000)]
    bootstrap_n: usize,

    /// Confidence level for every interval.
    #[arg(long, global = true, default_value_t = 0.95)]
    ci_level: f64,

    #[arg(long, global = true, value_enum, default_value_t = CiArg::Bca)]
    ci_method: CiArg,

    /// Tuning-set sensitivity required by the high-sensitivity point.
    #[arg(long, global = true, default_value_t = 0.90)]
    sens_target: f64,

    /// Tuning-set specificity required by the high-specificity point.
    #[arg(long, global = true, default_value_t = 0.95)]
    spec_target: f64,

    /// How grader-ungradable images enter the grader comparison.
    #[arg(long, global = true, value_enum, default_value_t = ModeArg::UngradableAsRefer)]
    mode: ModeArg,

    #[arg(long, global = true, value_enum, default_value_t = PairingArg::ByClass)]
    pairing: PairingArg,

    #[arg(long, global = true, value_enum, default_value_t = McNemarArg::Exact)]
    mcnemar: McNemarArg,

    /// Referable score: summed high-risk + likely mass, or a 0/1 argmax call.
    #[arg(long, global = true, value_enum, default_value_t = ScoreArg::ReferableMass)]
    score_mode: ScoreArg,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic cohort with known ground truth.
    Simulate(SimulateCli),
    /// Resolve a grade log into a reference standard.
    Adjudicate(AdjudicateCli),
    /// Inter-grader agreement per question.
    Agreement(AgreementCli),
    /// AUC with bootstrap CI, ROC curve and operating points.
    Metrics(MetricsCli),
    /// Grader sensitivity/specificity against the algorithm.
    CompareGraders(CompareCli),
    /// Logistic-regression odds ratios for the disc features.
    FeatureImportance(FeatureCli),
    /// Image- and patient-level referable scores.
    Scores(ScoresCli),
    /// Detect the fundus mask and rescale images to a fixed diameter.
    Preprocess(PreprocessCli),
}

#[derive(Args, Debug)]
struct SimulateCli {
    /// JSON cohort spec; omitted fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long)]
    n_tuning: Option<usize>,
    #[arg(long)]
    prevalence: Option<f64>,
}

#[derive(Args, Debug)]
struct AdjudicateCli {
    #[arg(long)]
    grades: PathBuf,
    /// Resolve from round-1 grades alone (majority vote / median).
    #[arg(long)]
    single_round: bool,
    /// Treat a three-way split on the circumlinear item as an error.
    #[arg(long)]
    unordered_circumlinear: bool,
}

#[derive(Args, Debug)]
struct AgreementCli {
    #[arg(long)]
    grades: PathBuf,
    #[arg(long, value_enum, default_value_t = MetricArg::Absolute)]
    metric: MetricArg,
    /// Which grades form the round-2 column.
    #[arg(long, value_enum, default_value_t = Round2Arg::Latest)]
    round2: Round2Arg,
}

#[derive(Args, Debug)]
struct TuningCli {
    /// Model outputs on the tuning set.
    #[arg(long)]
    tuning_scores: Option<PathBuf>,
    /// Tuning labels (reference or truth table).
    #[arg(long)]
    tuning_labels: Option<PathBuf>,
    /// Tuning grade log, resolved by round-1 median.
    #[arg(long)]
    tuning_grades: Option<PathBuf>,
}

impl TuningCli {
    fn into_inputs(self) -> TuningInputs {
        TuningInputs {
            scores: self.tuning_scores,
            labels: self.tuning_labels,
            grades: self.tuning_grades,
        }
    }
}

#[derive(Args, Debug)]
struct MetricsCli {
    #[arg(long)]
    scores: PathBuf,
    /// Reference standard, truth table, or plain image_id,refer table.
    #[arg(long)]
    labels: PathBuf,
    #[command(flatten)]
    tuning: TuningCli,
}

#[derive(Args, Debug)]
struct CompareCli {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Grade log of the readers being compared.
    #[arg(long)]
    readers: PathBuf,
    /// Fixed algorithm threshold instead of a tuning-set operating point.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum, default_value_t = PointArg::Balanced)]
    operating_point: PointArg,
    #[command(flatten)]
    tuning: TuningCli,
}

#[derive(Args, Debug)]
struct FeatureCli {
    /// Reference standard (reference-standard preset and referral rates).
    #[arg(long)]
    references: Option<PathBuf>,
    /// Panel grade log for the round-1 median preset.
    #[arg(long)]
    grades: Option<PathBuf>,
    /// Model outputs for the algorithm preset.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    training_grades: Option<PathBuf>,
    #[arg(long)]
    tuning_grades: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    algo_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    head_threshold: f64,
}

#[derive(Args, Debug)]
struct ScoresCli {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    patients: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EyeArg::Highest)]
    eye_policy: EyeArg,
}

#[derive(Args, Debug)]
struct PreprocessCli {
    /// Directory of png/ppm images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    reject_log: Option<PathBuf>,
    /// Apply one seeded random augmentation per image.
    #[arg(long)]
    augment: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CiArg {
    Bca,
    Percentile,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    UngradableAsRefer,
    ExcludeUngradable,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PairingArg {
    ByClass,
    FullSet,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum McNemarArg {
    Exact,
    ChiSquare,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ScoreArg {
    ReferableMass,
    Argmax,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MetricArg {
    Absolute,
    Squared,
    Nominal,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Round2Arg {
    Latest,
    Only,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PointArg {
    Balanced,
    HighSensitivity,
    HighSpecificity,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum EyeArg {
    Highest,
    Random,
}

fn command(cmd: Cmd, seed: u64) -> discgrade::Result<Command> {
    Ok(match cmd {
        Cmd::Simulate(a) => {
            let mut spec = match &a.spec {
                Some(p) => read_cohort_spec(p)?,
                None => CohortSpec::default(),
            };
            if let Some(n) = a.n_images {
                spec.n_images = n;
            }
            if let Some(n) = a.n_tuning {
                spec.n_tuning = n;
            }
            if let Some(p) = a.prevalence {
                spec.prevalence = p;
            }
            Command::Simulate(SimulateArgs { spec })
        }
        Cmd::Adjudicate(a) => Command::Adjudicate(AdjudicateArgs {
            grades: a.grades,
            mode: if a.single_round {
                ResolveMode::SingleRound
            } else {
                ResolveMode::TwoRound
            },
            policy: MedianPolicy {
                circumlinear_ordered: !a.unordered_circumlinear,
            },
        }),
        Cmd::Agreement(a) => Command::Agreement(AgreementArgs {
            grades: a.grades,
            metric: match a.metric {
                MetricArg::Absolute => DistanceMetric::Absolute,
                MetricArg::Squared => DistanceMetric::Squared,
                MetricArg::Nominal => DistanceMetric::Nominal,
            },
            round2: match a.round2 {
                Round2Arg::Latest => GradeSource::Round2Latest,
                Round2Arg::Only => GradeSource::Round2Only,
            },
        }),
        Cmd::Metrics(a) => Command::Metrics(MetricsArgs {
            scores: a.scores,
            labels: a.labels,
            tuning: a.tuning.into_inputs(),
        }),
        Cmd::CompareGraders(a) => Command::CompareGraders(CompareArgs {
            scores: a.scores,
            labels: a.labels,
            readers: a.readers,
            threshold: a.threshold,
            operating_point: match a.operating_point {
                PointArg::Balanced => OperatingPointKind::Balanced,
                PointArg::HighSensitivity => OperatingPointKind::HighSensitivity,
                PointArg::HighSpecificity => OperatingPointKind::HighSpecificity,
            },
            tuning: a.tuning.into_inputs(),
        }),
        Cmd::FeatureImportance(a) => Command::FeatureImportance(FeatureArgs {
            references: a.references,
            grades: a.grades,
            scores: a.scores,
            training_grades: a.training_grades,
            tuning_grades: a.tuning_grades,
            algo_threshold: a.algo_threshold,
            head_threshold: a.head_threshold,
            fit: FitOptions::default(),
        }),
        Cmd::Scores(a) => Command::Scores(ScoresArgs {
            scores: a.scores,
            patients: a.patients,
            eye_policy: match a.eye_policy {
                EyeArg::Highest => EyePolicy::HighestScore,
                EyeArg::Random => EyePolicy::SeededRandom { seed },
            },
        }),
        Cmd::Preprocess(a) => Command::Preprocess(PreprocessArgs {
            input: a.input,
            reject_log: a.reject_log,
            augment: a.augment,
        }),
    })
}

fn config(cli: Cli) -> discgrade::Result<RunConfig> {
    let mut cfg = RunConfig::new(command(cli.command, cli.seed)?, cli.out);
    cfg.seed = cli.seed;
    cfg.bootstrap_n = cli.bootstrap_n;
    cfg.ci_level = cli.ci_level;
    cfg.ci_method = match cli.ci_method {
        CiArg::Bca => CiMethod::Bca,
        CiArg::Percentile => CiMethod::Percentile,
    };
    cfg.sens_target = cli.sens_target;
    cfg.spec_target = cli.spec_target;
    cfg.mode = match cli.mode {
        ModeArg::UngradableAsRefer => ComparisonMode::UngradableAsRefer,
        ModeArg::ExcludeUngradable => ComparisonMode::ExcludeUngradablePerGrader,
    };
    cfg.pairing = match cli.pairing {
        PairingArg::ByClass => McNemarPairing::ByClass,
        PairingArg::FullSet => McNemarPairing::FullSetAccuracy,
    };
    cfg.mcnemar_variant = match cli.mcnemar {
        McNemarArg::Exact => McNemarVariant::Exact,
        McNemarArg::ChiSquare => McNemarVariant::ChiSquareCorrected,
    };
    cfg.score_mode = match cli.score_mode {
        ScoreArg::ReferableMass => ScoreMode::ReferableMass,
        ScoreArg::Argmax => ScoreMode::Argmax,
    };
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = config(cli).and_then(|cfg| run_pipeline(&cfg));
    match result {
        Ok(summary) => {
            for f in &summary.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
