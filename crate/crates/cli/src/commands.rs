use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use umbc::encoder::ChunkAttentionEncoder;
use umbc::estimator::oracle::unbiasedness_oracle;
use umbc::estimator::{make_partition, masked_forward};
use umbc::harness::experiment::eval_sample;
use umbc::harness::{held_out_tasks, scenario_table};
use umbc::mog::{decode_mixture, mixture_nll_tape, sample_task};
use umbc::{encoding_variance, finite_diff_check, run_experiment, ExperimentConfig, GradPlan, Matrix, MixtureNll, Model, SetEncoder};

use crate::input::PointChunks;
use crate::{CheckArgs, Cli, Command, EncodeArgs, EncodeOutput, GradcheckArgs, MogBenchArgs, VarianceArgs};

const BUILTIN_CONFIG: &str = include_str!("../../../configs/tiny.json");

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn input(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: error.into(),
        }
    }
}

impl From<umbc::Error> for Failure {
    fn from(e: umbc::Error) -> Self {
        let code = match e {
            umbc::Error::Config(_) | umbc::Error::Io(_) | umbc::Error::Json(_) => 2,
            _ => 1,
        };
        Self { code, error: e.into() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self::input(e)
    }
}

type Outcome = Result<bool, Failure>;

pub fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Train => train(cli),
        Command::Encode(a) => encode(cli, a),
        Command::Variance(a) => variance(cli, a),
        Command::CheckUnbiased(a) => check_unbiased(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
        Command::MogBench(a) => mog_bench(cli, a),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    Ok(match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::from_json(BUILTIN_CONFIG)?,
    })
}

/// The config's model at its training seed, optionally overwritten by a checkpoint.
fn load_model(config: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Model, Failure> {
    let mut model = Model::new(&config.model, config.training.seed)?;
    if let Some(path) = checkpoint {
        model
            .store
            .load_json(path)
            .map_err(|e| Failure::input(anyhow!("checkpoint {}: {e}", path.display())))?;
    }
    Ok(model)
}

/// Writes to `--out` when given, stdout otherwise.
fn emit(cli: &Cli, text: &str) -> Result<(), Failure> {
    match &cli.out {
        Some(path) => std::fs::write(path, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// `n` i.i.d. points from a random clustering task of the config.
fn task_points(config: &ExperimentConfig, n: usize, seed: u64) -> Result<Matrix, Failure> {
    if n == 0 {
        return Err(Failure::input(anyhow!("set size must be positive")));
    }
    let task = sample_task(&mut ChaCha8Rng::seed_from_u64(seed), config.task.components, 2 * n)?;
    Ok(task.points.select_rows(&(0..n).collect::<Vec<_>>())?)
}

fn train(cli: &Cli) -> Outcome {
    let Some(path) = &cli.config else {
        return Err(Failure::input(anyhow!("train needs --config")));
    };
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.training.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| {
        let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        PathBuf::from("runs").join(format!("{stem}-seed{}", config.training.seed))
    });
    let summary = run_experiment(&config, &out)?;
    for r in &summary.regimes {
        println!("{:<9} final NLL {:.4} +- {:.4} after {} steps", r.regime.name(), r.final_nll, r.final_nll_sem, r.steps);
    }
    println!("artifacts in {}", out.display());
    Ok(true)
}

fn matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn encode(cli: &Cli, args: &EncodeArgs) -> Outcome {
    if args.chunk_size == 0 {
        return Err(Failure::input(anyhow!("chunk size must be positive")));
    }
    let config = load_config(cli)?;
    let model = load_model(&config, Some(&args.checkpoint))?;
    let sample = eval_sample(&model, cli.seed.unwrap_or(config.eval.seed));
    let reader: Box<dyn BufRead> = if args.data == "-" {
        Box::new(io::stdin().lock())
    } else {
        let file = File::open(&args.data).map_err(|e| Failure::input(anyhow!("{}: {e}", args.data)))?;
        Box::new(BufReader::new(file))
    };
    let mut stream = model.stack.stream(&model.store, &sample)?;
    let mut chunks = 0;
    for chunk in PointChunks::new(reader, args.chunk_size, model.stack.input_dim()) {
        stream.push(&chunk.map_err(Failure::input)?)?;
        chunks += 1;
    }
    if stream.count() == 0 {
        return Err(Failure::input(anyhow!("no points read")));
    }
    eprintln!("encoded {} points in {chunks} chunks", stream.count());
    let text = match args.output {
        EncodeOutput::Encoding => matrix_csv(&stream.encoding()?),
        EncodeOutput::Head => matrix_csv(&stream.output()?),
        EncodeOutput::Mixture => {
            let p = decode_mixture(&stream.output()?)?;
            let d = p.means.cols();
            let mut header = vec!["weight".to_string()];
            header.extend((0..d).map(|j| format!("mean{j}")));
            header.extend((0..d).map(|j| format!("var{j}")));
            let mut text = header.join(",") + "\n";
            for k in 0..p.components() {
                let mut row = vec![p.weights[k]];
                row.extend_from_slice(p.means.row(k));
                row.extend_from_slice(p.variances.row(k));
                text.push_str(&matrix_csv(&Matrix::row_vector(&row)));
            }
            text
        }
    };
    emit(cli, &text)?;
    Ok(true)
}

fn variance(cli: &Cli, args: &VarianceArgs) -> Outcome {
    let config = load_config(cli)?;
    let seed = cli.seed.unwrap_or(0);
    let encoder: Box<dyn SetEncoder> = if args.witness {
        Box::new(ChunkAttentionEncoder::new(&config.model.phi, config.training.seed)?)
    } else {
        Box::new(load_model(&config, args.checkpoint.as_deref())?)
    };
    if args.chunks.iter().any(|&c| c == 0 || c > args.set_size) {
        return Err(Failure::input(anyhow!("chunk counts must lie in 1..={}", args.set_size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::random_normal(args.set_size, config.model.phi.input_dim, 1.5, &mut rng);
    let report = encoding_variance(encoder.as_ref(), &x, args.partitions, &args.chunks, &mut rng)?;
    emit(cli, &report.to_csv())?;
    let worst = report.max_mean();
    if !encoder.is_mbc() {
        eprintln!("largest mean variance {worst:.3e} (not a consistent encoder; no check)");
        return Ok(true);
    }
    let pass = worst <= args.tolerance;
    eprintln!("largest mean variance {worst:.3e} (tolerance {:.0e}): {}", args.tolerance, verdict(pass));
    Ok(pass)
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "ok"
    } else {
        "FAILED"
    }
}

fn check_unbiased(cli: &Cli, args: &CheckArgs) -> Outcome {
    let config = load_config(cli)?;
    let model = load_model(&config, None)?;
    let seed = cli.seed.unwrap_or(0);
    let x = task_points(&config, args.set_size, seed)?;
    let partition = make_partition(args.set_size, config.training.chunk_size, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let m = config.training.grad_subsets.min(partition.len());
    let sample = eval_sample(&model, config.eval.seed);
    let c = unbiasedness_oracle(&model.stack, &model.store, &x, &MixtureNll, &partition, m, &sample)?;
    let theta_ok = c.theta_max_abs_diff <= args.tolerance;
    let lambda_ok = c.lambda_max_abs_diff <= args.tolerance;
    let mut text = format!(
        "set size {}, {} cells, {m} live per draw, {} draws\n",
        args.set_size,
        partition.len(),
        c.draws
    );
    text.push_str(&format!(
        "encoder  max |E[grad] - full grad| = {:.3e} (|full| up to {:.3e}) {}\n",
        c.theta_max_abs_diff,
        c.theta_full_max_abs,
        verdict(theta_ok)
    ));
    text.push_str(&format!(
        "decoder  max |E[grad] - full grad| = {:.3e} (|full| up to {:.3e}) {}\n",
        c.lambda_max_abs_diff,
        c.lambda_full_max_abs,
        verdict(lambda_ok)
    ));
    emit(cli, &text)?;
    Ok(theta_ok && lambda_ok)
}

fn gradcheck(cli: &Cli, args: &GradcheckArgs) -> Outcome {
    let config = load_config(cli)?;
    let mut model = load_model(&config, None)?;
    let x = task_points(&config, args.set_size, cli.seed.unwrap_or(0))?;
    let sample = eval_sample(&model, config.eval.seed);
    let stack = model.stack.clone();
    let all = GradPlan::full(make_partition(x.rows(), x.rows(), &mut ChaCha8Rng::seed_from_u64(0))?);
    let r = finite_diff_check(&mut model.store, args.eps, |store, tape| {
        let pooled = masked_forward(&stack, store, tape, &x, &all, &sample)?;
        let out = stack.decode_tape(tape, store, pooled)?;
        mixture_nll_tape(tape, out, &x)
    })?;
    let pass = r.max_rel_error <= args.tolerance;
    let worst = r.worst.map_or("-".to_string(), |(name, i)| format!("{name}[{i}]"));
    emit(
        cli,
        &format!(
            "{} coordinates, max relative error {:.3e}, max absolute error {:.3e}, worst at {worst}: {}\n",
            r.coordinates,
            r.max_rel_error,
            r.max_abs_error,
            verdict(pass)
        ),
    )?;
    Ok(pass)
}

fn mog_bench(cli: &Cli, args: &MogBenchArgs) -> Outcome {
    let config = load_config(cli)?;
    let model = load_model(&config, args.checkpoint.as_deref())?;
    let seed = cli.seed.unwrap_or(config.eval.seed);
    let tasks = held_out_tasks(&config, seed, 1, args.tasks)?;
    if tasks.is_empty() {
        return Err(Failure::input(anyhow!("need at least one task")));
    }
    let rows = scenario_table(&model, &tasks, &eval_sample(&model, config.eval.seed), seed)?;
    let mut text = String::from("scenario,nll,max_abs_diff\n");
    for r in &rows {
        text.push_str(&format!("{},{:.16e},{:.16e}\n", r.scenario, r.nll, r.max_abs_diff));
    }
    emit(cli, &text)?;
    let worst = rows.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
    let pass = worst <= args.tolerance;
    eprintln!("largest streaming change {worst:.3e} (tolerance {:.0e}): {}", args.tolerance, verdict(pass));
    Ok(pass)
}
