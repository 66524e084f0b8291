use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ncdeon::config::Settings;
use ncdeon::evaluation::{error_report, resolution_experiment};
use ncdeon::operator::{ModelConfig, OperatorModel};
use ncdeon::pde_data::{build_dataset, OperatorDataset};
use ncdeon::training::train_with;
use ncdeon::{Error, Result};

#[derive(Parser)]
#[command(name = "ncdeon", version, about = "Neural CDE operator learning on transient Poisson data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test datasets.
    Generate(Flags),
    /// Train a model and write its checkpoint.
    Train(Flags),
    /// Relative L2 report of a checkpoint on a dataset.
    Eval(Flags),
    /// Input resampling experiment.
    Resample(Flags),
}

#[derive(Args, Debug, Clone, Default)]
struct Flags {
    /// `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset file, directory, or path without the `.ds` suffix.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_init: Option<f64>,
    #[arg(long)]
    lr_final: Option<f64>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    atol: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// euler, rk4 or tsit5.
    #[arg(long)]
    solver: Option<String>,
    /// tape or adjoint.
    #[arg(long)]
    grad: Option<String>,
    /// ncde or gru.
    #[arg(long)]
    model: Option<String>,
    /// spacetime or spatial.
    #[arg(long)]
    trunk: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    /// Print reports as JSON.
    #[arg(long)]
    json: bool,
}

impl Flags {
    fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(p) => Settings::from_file(p)?,
            None => Settings::default(),
        };
        let pairs: [(&str, Option<String>); 13] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("lr_init", self.lr_init.map(|v| v.to_string())),
            ("lr_final", self.lr_final.map(|v| v.to_string())),
            ("rtol", self.rtol.map(|v| v.to_string())),
            ("atol", self.atol.map(|v| v.to_string())),
            ("max_steps", self.max_steps.map(|v| v.to_string())),
            ("solver", self.solver.clone()),
            ("grad", self.grad.clone()),
            ("model", self.model.clone()),
            ("trunk", self.trunk.clone()),
            ("threads", self.threads.map(|v| v.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                s.apply(k, &v)?;
            }
        }
        s.validate()?;
        Ok(s)
    }

    fn require<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
        value
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("--{flag} is required")))
    }
}

fn init_threads(n: usize) -> Result<()> {
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// A file as given, `<dir>/<default>` for a directory, or the path with
/// `.ds` appended.
fn resolve_data(path: &Path, default: &str) -> Option<PathBuf> {
    if path.is_file() {
        return Some(path.to_path_buf());
    }
    if path.is_dir() {
        let p = path.join(default);
        return p.is_file().then_some(p);
    }
    let mut s = path.as_os_str().to_os_string();
    s.push(".ds");
    let p = PathBuf::from(s);
    p.is_file().then_some(p)
}

fn load_data(path: &Path, default: &str) -> Result<OperatorDataset> {
    let file = resolve_data(path, default).ok_or_else(|| {
        Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no dataset file found"),
        )
    })?;
    OperatorDataset::read(&file)
}

fn summary_text(mean: f64, median: f64) -> String {
    format!("mean_relative_l2 = {mean:.17e}\nmedian_relative_l2 = {median:.17e}\n")
}

fn generate(f: &Flags) -> Result<()> {
    let s = f.settings()?;
    init_threads(s.threads)?;
    let out = f.require(&f.out, "out")?;
    create_dir(out)?;
    let (train, test) = build_dataset(s.n_train, s.n_test, &s.signal, &s.poisson, s.seed)?;
    train.write(&out.join("train.ds"))?;
    test.write(&out.join("test.ds"))?;
    println!(
        "wrote {} training and {} test samples to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn train(f: &Flags) -> Result<()> {
    let s = f.settings()?;
    init_threads(s.threads)?;
    let data_arg = f.require(&f.data, "data")?;
    let out = f.require(&f.out, "out")?;
    let data = load_data(data_arg, "train.ds")?;
    let test = if data_arg.is_dir() && data_arg.join("test.ds").is_file() {
        Some(OperatorDataset::read(&data_arg.join("test.ds"))?)
    } else {
        None
    };
    create_dir(out)?;
    let cfg = ModelConfig {
        input_channels: data.input_channels(),
        spatial_dims: data.spatial_dims(),
        output_channels: data.output_channels(),
        ..s.model
    };
    let times = data.query_times.iter().map(|t| t / data.norm.time_scale).collect();
    let mut model = OperatorModel::new(cfg, data.norm.clone(), s.solver, times, s.seed)?;
    let epochs = s.train.epochs;
    let report = train_with(&mut model, &data, &s.train, &mut |e| {
        eprintln!("epoch {}/{} loss {:.6e} lr {:.3e}", e.epoch, epochs, e.mean_loss, e.lr);
    })?;
    model.save(&out.join("model.ckpt"))?;
    write_file(&out.join("config.txt"), &s.to_text())?;
    let mut loss = String::from("step\tlr\tloss\n");
    for (i, (l, lr)) in report.losses.iter().zip(&report.lrs).enumerate() {
        let _ = writeln!(loss, "{}\t{lr:.17e}\t{l:.17e}", i + 1);
    }
    write_file(&out.join("loss.txt"), &loss)?;
    if let Some(test) = test {
        let r = error_report(&model, &test)?;
        write_file(&out.join("validation.txt"), &r.to_text())?;
        write_file(&out.join("validation.json"), &r.to_json())?;
        if f.json {
            println!("{}", r.to_json());
        } else {
            print!("{}", summary_text(r.mean, r.median));
        }
    }
    Ok(())
}

/// Loads a checkpoint and applies any solver flags given on the command
/// line or in a config file.
fn load_model(f: &Flags) -> Result<OperatorModel> {
    let mut model = OperatorModel::load(f.require(&f.ckpt, "ckpt")?)?;
    let overridden = f.config.is_some() || f.rtol.is_some() || f.atol.is_some() || f.max_steps.is_some() || f.solver.is_some();
    if overridden {
        let mut s = f.settings()?;
        if f.config.is_none() {
            s.solver = model.solver;
            for (k, v) in [
                ("rtol", f.rtol.map(|v| v.to_string())),
                ("atol", f.atol.map(|v| v.to_string())),
                ("max_steps", f.max_steps.map(|v| v.to_string())),
                ("solver", f.solver.clone()),
            ] {
                if let Some(v) = v {
                    s.apply(k, &v)?;
                }
            }
        }
        s.solver.validate()?;
        model.solver = s.solver;
    }
    Ok(model)
}

fn eval(f: &Flags) -> Result<()> {
    init_threads(f.threads.unwrap_or(0))?;
    let model = load_model(f)?;
    let data = load_data(f.require(&f.data, "data")?, "test.ds")?;
    let r = error_report(&model, &data)?;
    if let Some(out) = &f.out {
        create_dir(out)?;
        write_file(&out.join("eval.txt"), &r.to_text())?;
        write_file(&out.join("eval.json"), &r.to_json())?;
    }
    if f.json {
        println!("{}", r.to_json());
    } else {
        print!("{}", summary_text(r.mean, r.median));
    }
    Ok(())
}

fn resample(f: &Flags) -> Result<()> {
    init_threads(f.threads.unwrap_or(0))?;
    let model = load_model(f)?;
    let data = load_data(f.require(&f.data, "data")?, "test.ds")?;
    let r = resolution_experiment(&model, &data, &[1.0, 0.5, 2.0])?;
    if let Some(out) = &f.out {
        create_dir(out)?;
        write_file(&out.join("resample.txt"), &r.to_text())?;
        write_file(&out.join("resample.json"), &r.to_json())?;
    }
    if f.json {
        println!("{}", r.to_json());
    } else {
        for (k, factor) in r.factors.iter().enumerate() {
            let d = &r.discrepancy[k];
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            println!(
                "factor {factor} knots {} mean_discrepancy = {mean:.17e} within_5e-2 = {:.4}",
                r.knot_counts[k],
                r.fraction_within(k, 5e-2)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(f) => generate(f),
        Command::Train(f) => train(f),
        Command::Eval(f) => eval(f),
        Command::Resample(f) => resample(f),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
