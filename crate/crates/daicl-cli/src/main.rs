//! `daicl`: domain-adaptive in-context learning from the command line.
//!
//! Pipeline: `ingest` raw corpora → `index` the target datastore →
//! `retrieve`/`prompts` to inspect → `train`/`eval` a single run →
//! `matrix` for the full variant comparison. `gradcheck` verifies every
//! loss gradient against finite differences, and `synth` generates the
//! bundled domain-shift benchmark.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use daicl_core::embed::Metric;
use daicl_core::eval::SyntheticShiftSpec;
use daicl_core::prompt::{InferMode, Task};

use daicl_cli::commands;
use daicl_cli::config::{MatrixSpec, RunSpec};
use daicl_cli::formats;

#[derive(Parser)]
#[command(name = "daicl", version, about = "Retrieval-augmented domain adaptation at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert raw corpus files into normalized JSON lines.
    Ingest {
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Input format: conll, reviews, or normalized.
        #[arg(long)]
        format: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Discard labels (target-datastore form).
        #[arg(long)]
        drop_labels: bool,
        /// Keep entity types instead of stripping to B/I/O.
        #[arg(long)]
        keep_types: bool,
    },
    /// Build a retrieval index over unlabeled text.
    Index {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        #[arg(long, value_enum, default_value = "cosine")]
        metric: MetricArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k retrieval for every query sentence.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(short, long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render encoder instances, decoder prompts or inference prompts.
    Prompts {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, value_enum)]
        mode: commands::PromptMode,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Demonstration mode for inference prompts.
        #[arg(long, value_enum, default_value = "none")]
        demo_mode: InferArg,
        #[arg(short, long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Apply context masking at this rate (encoder mode).
        #[arg(long)]
        mask_rate: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Record separator line for the prompt dump.
        #[arg(long, default_value = "----")]
        delim: String,
        /// Also dump instances as JSON lines (ids, regions, masks).
        #[arg(long)]
        instances_out: Option<PathBuf>,
    },
    /// Train one variant per the JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Evaluate a checkpoint, or run inference-only evaluation against a
    /// completion endpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "target_test")]
        split: String,
        /// Enables inference-only evaluation with this demonstration mode.
        #[arg(long, value_enum)]
        inference_mode: Option<InferArg>,
        #[arg(long)]
        endpoint_url: Option<String>,
        #[arg(long, default_value = "stub-model")]
        endpoint_model: String,
        #[arg(long, default_value_t = 2)]
        concurrency: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the variant × scenario × seed comparison matrix.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify every loss gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Coordinates sampled per tensor.
        #[arg(long, default_value_t = 4)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        threshold: f64,
    },
    /// Generate the synthetic domain-shift benchmark corpora.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out/synth")]
        out: PathBuf,
        #[arg(long)]
        source_train: Option<usize>,
        #[arg(long)]
        source_dev: Option<usize>,
        #[arg(long)]
        target_unlabeled: Option<usize>,
        #[arg(long)]
        target_test: Option<usize>,
        #[arg(long)]
        label_noise: Option<f64>,
    },
    /// Serve canned chat completions on loopback (offline testing).
    StubServe {
        #[arg(long, default_value_t = 0)]
        port: u16,
        /// File with one canned response per line (cycled); defaults to a
        /// single "None." response.
        #[arg(long)]
        responses: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TaskArg {
    Ner,
    Sa,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Ner => Task::Ner,
            TaskArg::Sa => Task::Sa,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MetricArg {
    Cosine,
    TokenMatch,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Metric {
        match m {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::TokenMatch => Metric::TokenMatch,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum InferArg {
    None,
    Random,
    Retrieved,
}

impl From<InferArg> for InferMode {
    fn from(m: InferArg) -> InferMode {
        match m {
            InferArg::None => InferMode::None,
            InferArg::Random => InferMode::Random,
            InferArg::Retrieved => InferMode::Retrieved,
        }
    }
}

/// Exit policy: 0 success, 1 validation errors, 2 runtime failures.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

fn validation(e: anyhow::Error) -> Failure {
    Failure::Validation(e)
}

fn runtime(e: anyhow::Error) -> Failure {
    Failure::Runtime(e)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Ingest {
            task,
            format,
            input,
            out,
            drop_labels,
            keep_types,
        } => commands::ingest(task.into(), &format, &input, &out, drop_labels, keep_types)
            .map_err(runtime),
        Cmd::Index {
            input,
            dim,
            seed,
            metric,
            out,
        } => commands::index_cmd(&input, dim, seed, metric.into(), &out).map_err(runtime),
        Cmd::Retrieve {
            index,
            queries,
            k,
            out,
        } => commands::retrieve(&index, &queries, k, &out).map_err(runtime),
        Cmd::Prompts {
            task,
            mode,
            input,
            index,
            demo_mode,
            k,
            seed,
            mask_rate,
            out,
            delim,
            instances_out,
        } => commands::prompts(
            task.into(),
            mode,
            &input,
            index.as_deref(),
            demo_mode.into(),
            k,
            seed,
            mask_rate,
            &out,
            &delim,
            instances_out.as_deref(),
        )
        .map_err(runtime),
        Cmd::Train {
            config,
            out,
            seed,
            variant,
            k,
            lambda,
        } => {
            let mut spec = RunSpec::load(&config).map_err(validation)?;
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            if let Some(name) = variant {
                match daicl_core::trainer::Variant::parse(&name) {
                    Some(v) => spec.variant = v,
                    None => {
                        return Err(validation(anyhow::anyhow!("unknown variant {name:?}")))
                    }
                }
            }
            if let Some(k) = k {
                spec.k = k;
            }
            if let Some(lambda) = lambda {
                spec.train.lambda = Some(lambda);
            }
            spec.validate().map_err(validation)?;
            commands::train_cmd(&spec, out.as_deref()).map_err(runtime)
        }
        Cmd::Eval {
            config,
            checkpoint,
            split,
            inference_mode,
            endpoint_url,
            endpoint_model,
            concurrency,
            out,
        } => {
            let spec = RunSpec::load(&config).map_err(validation)?;
            commands::eval_cmd(
                &spec,
                checkpoint.as_deref(),
                &split,
                inference_mode.map(Into::into),
                endpoint_url.as_deref(),
                &endpoint_model,
                concurrency,
                out.as_deref(),
            )
            .map_err(runtime)
        }
        Cmd::Matrix { config, out } => {
            let spec = MatrixSpec::load(&config).map_err(validation)?;
            commands::matrix_cmd(&spec, out.as_deref()).map_err(runtime)
        }
        Cmd::Gradcheck {
            eps,
            coords,
            threshold,
        } => {
            let all_pass = commands::gradcheck_cmd(eps, coords, threshold).map_err(runtime)?;
            if all_pass {
                Ok(())
            } else {
                Err(Failure::Runtime(anyhow::anyhow!(
                    "one or more gradient checks exceeded the threshold"
                )))
            }
        }
        Cmd::Synth {
            seed,
            out,
            source_train,
            source_dev,
            target_unlabeled,
            target_test,
            label_noise,
        } => {
            let mut spec = SyntheticShiftSpec {
                seed,
                ..SyntheticShiftSpec::default()
            };
            if let Some(n) = source_train {
                spec.source_train = n;
            }
            if let Some(n) = source_dev {
                spec.source_dev = n;
            }
            if let Some(n) = target_unlabeled {
                spec.target_unlabeled = n;
            }
            if let Some(n) = target_test {
                spec.target_test = n;
            }
            if let Some(x) = label_noise {
                spec.label_noise = x;
            }
            commands::synth_cmd(&spec, &out).map_err(runtime)
        }
        Cmd::StubServe { port, responses } => {
            let canned = match responses {
                Some(path) => formats::read_lines(&path)
                    .map_err(validation)?
                    .into_iter()
                    .filter(|l| !l.trim().is_empty())
                    .collect(),
                None => vec!["None.".to_string()],
            };
            commands::stub_serve(port, canned).map_err(runtime)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
