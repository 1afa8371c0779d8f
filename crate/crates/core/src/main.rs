use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use semadv::data::{synthetic_digits, Dataset, NUM_DIGITS};
use semadv::ebm_train::train_single_image_ebm;
use semadv::io::{self, RunConfig};
use semadv::models::{accuracy, adv_train, train_classifier, ClassifierParams, EnergyNetParams, Network, Norm, TrainOptions};
use semadv::pipeline::{
    pgd_baseline_grid, run_attack, run_grid, sample_distribution, surrogate_success_rate, GridSource, Models,
    SampleRecord,
};
use semadv::samplers::DistanceKind;
use semadv::selftest;
use semadv::tensor::Tensor;

type AnyError = Box<dyn std::error::Error>;

#[derive(Parser)]
#[command(name = "semadv", version, about = "Semantics-aware adversarial examples by Langevin sampling")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SourceArgs {
    /// First test image of this digit.
    #[arg(long, conflicts_with = "index")]
    digit: Option<usize>,
    /// Test image at this index.
    #[arg(long)]
    index: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier with minibatch Adam.
    TrainClassifier {
        /// Train on transformed copies drawn from the configured family.
        #[arg(long)]
        augment: bool,
        #[arg(long, default_value = "classifier")]
        name: String,
    },
    /// Train a classifier on PGD adversarial examples.
    AdvTrain {
        #[arg(long, default_value = "robust")]
        name: String,
    },
    /// Train the single-image energy network for one source image.
    TrainEbm {
        #[command(flatten)]
        source: SourceArgs,
        /// Checkpoint name; defaults to ebm_<label>.
        #[arg(long)]
        name: Option<String>,
    },
    /// Draw samples from the victim expert alone.
    SampleVictim {
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        target: usize,
        #[arg(long, default_value_t = 36)]
        count: usize,
    },
    /// Rejection sampling and refinement for one source/target pair.
    Attack {
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        aux: PathBuf,
        #[arg(long)]
        ebm: Option<PathBuf>,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        target: usize,
    },
    /// Every source digit against every other target, scored by a surrogate.
    Grid {
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        aux: PathBuf,
        #[arg(long)]
        surrogate: PathBuf,
        /// Directory holding ebm_<digit>.ckpt for each source digit.
        #[arg(long)]
        ebm_dir: Option<PathBuf>,
        /// Source digits (default: all).
        #[arg(long, value_delimiter = ',')]
        sources: Option<Vec<usize>>,
        /// Target digits (default: all others).
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<usize>>,
    },
    /// Targeted PGD from the first test image of each digit toward every class.
    PgdBaseline {
        #[arg(long)]
        victim: PathBuf,
        #[arg(long, default_value = "linf")]
        norm: Norm,
    },
    /// Surrogate success rate of saved samples.
    Eval {
        #[arg(long)]
        surrogate: PathBuf,
        /// SAET tensor of shape [n, c, h, w].
        #[arg(long)]
        samples: PathBuf,
        /// Class a human would still assign to the samples.
        #[arg(long)]
        label: usize,
    },
    /// Analytic sampler, warp and gradient checks.
    Selftest,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, AnyError> {
        let p = self.path(name);
        io::write_output(&p, bytes)?;
        Ok(p)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, AnyError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn grid(&self, name: &str, images: &[Tensor<f32>], flags: &[bool]) -> Result<(), AnyError> {
        if images.is_empty() {
            return Ok(());
        }
        fs::create_dir_all(&self.out)?;
        io::emit_grid(images, 10.min(images.len()), flags, &self.path(name))?;
        Ok(())
    }

    fn train_data(&self) -> Result<Dataset, AnyError> {
        let d = &self.cfg.data;
        if d.train_images.is_empty() {
            Ok(synthetic_digits(d.synthetic_train, d.synthetic_seed))
        } else {
            Ok(io::load_idx(Path::new(&d.train_images), Path::new(&d.train_labels))?)
        }
    }

    fn test_data(&self) -> Result<Dataset, AnyError> {
        let d = &self.cfg.data;
        if d.test_images.is_empty() {
            Ok(synthetic_digits(d.synthetic_test, d.synthetic_seed.wrapping_add(1)))
        } else {
            Ok(io::load_idx(Path::new(&d.test_images), Path::new(&d.test_labels))?)
        }
    }

    fn source(&self, sel: &SourceArgs) -> Result<(Tensor<f32>, usize), AnyError> {
        let test = self.test_data()?;
        let idx = match (sel.digit, sel.index) {
            (Some(d), _) => test.first_of_class(d).ok_or_else(|| format!("no test image of digit {d}"))?,
            (None, Some(i)) if i < test.len() => i,
            (None, Some(i)) => return Err(format!("index {i} outside test set of {}", test.len()).into()),
            (None, None) => return Err("pass --digit or --index".into()),
        };
        Ok((test.image(idx), test.labels[idx]))
    }

    fn victim(&self, path: &Path) -> Result<ClassifierParams<f32>, AnyError> {
        Ok(io::load_classifier(path, None)?)
    }
}

fn flags_for(victim: &ClassifierParams<f32>, batch: &Tensor<f32>, target: usize) -> Result<Vec<bool>, AnyError> {
    Ok(victim.predict(batch)?.into_iter().map(|p| p == target).collect())
}

fn record_images(records: &[SampleRecord]) -> Vec<Tensor<f32>> {
    records.iter().map(|r| r.image.clone()).collect()
}

fn write_loss_csv(ctx: &Ctx, name: &str, losses: &[f64]) -> Result<(), AnyError> {
    let mut text = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    ctx.write(name, text.as_bytes())?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool, AnyError> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.classifier.train.seed = seed;
        cfg.ebm.seed = seed;
        cfg.attack.sampler.seed = seed;
    }
    let ctx = Ctx { cfg, out: cli.common.out };
    let cfg = &ctx.cfg;

    match cli.command {
        Command::TrainClassifier { augment, name } => {
            let opts = TrainOptions {
                augment: augment.then_some(cfg.family.clone()),
                adversary: None,
            };
            let (net, log) = train_classifier(cfg.classifier.arch, &ctx.train_data()?, &cfg.classifier.train, &opts)?;
            io::save_classifier(&ctx.path(&format!("{name}.ckpt")), &net)?;
            write_loss_csv(&ctx, &format!("{name}_loss.csv"), &log.losses)?;
            println!("test accuracy {:.4}", accuracy(&net, &ctx.test_data()?)?);
        }
        Command::AdvTrain { name } => {
            let net = adv_train(cfg.classifier.arch, &ctx.train_data()?, &cfg.classifier.train, &cfg.classifier.pgd)?;
            fs::create_dir_all(&ctx.out)?;
            io::save_classifier(&ctx.path(&format!("{name}.ckpt")), &net.0)?;
            write_loss_csv(&ctx, &format!("{name}_loss.csv"), &net.1.losses)?;
            println!("test accuracy {:.4}", accuracy(&net.0, &ctx.test_data()?)?);
        }
        Command::TrainEbm { source, name } => {
            let (x_ori, label) = ctx.source(&source)?;
            let (net, log) = train_single_image_ebm(&x_ori, &cfg.family, &cfg.ebm)?;
            let name = name.unwrap_or_else(|| format!("ebm_{label}"));
            fs::create_dir_all(&ctx.out)?;
            io::save_energy(&ctx.path(&format!("{name}.ckpt")), &net)?;
            let mut csv = Vec::new();
            log.write_csv(&mut csv)?;
            ctx.write(&format!("{name}.csv"), &csv)?;
            println!("tail positive-gap rate {:.3}", log.tail_positive_gap_rate(0.2));
        }
        Command::SampleVictim { victim, target, count } => {
            let victim = ctx.victim(&victim)?;
            let mut spec = cfg.attack.energy;
            spec.c1 = 0.0;
            spec.distance = DistanceKind::L2sq;
            let reference = Tensor::zeros(&victim.input_shape());
            let x = sample_distribution(&victim, None, &reference, target, &spec, &cfg.attack.sampler, count)?;
            let flags = flags_for(&victim, &x, target)?;
            fs::create_dir_all(&ctx.out)?;
            io::save_tensor(&ctx.path("victim_samples.saet"), &x)?;
            let images: Vec<Tensor<f32>> = (0..x.rows()).map(|i| x.index_row(i)).collect::<Result<_, _>>()?;
            ctx.grid("victim_samples.ppm", &images, &flags)?;
            let rate = flags.iter().filter(|&&f| f).count() as f64 / flags.len().max(1) as f64;
            println!("victim predicts target on {rate:.4} of samples");
        }
        Command::Attack { victim, aux, ebm, source, target } => {
            let victim = ctx.victim(&victim)?;
            let aux = ctx.victim(&aux)?;
            let ebm = ebm.map(|p| io::load_energy(&p, None)).transpose()?;
            let (x_ori, y_ori) = ctx.source(&source)?;
            let models = Models {
                victim: &victim,
                aux: &aux,
                ebm: ebm.as_ref(),
            };
            let res = run_attack(&x_ori, y_ori, target, &cfg.attack, models)?;
            ctx.write_json("attack_report.json", &res.report)?;
            ctx.write_json("attack_records.json", &res.refined)?;
            let images = record_images(&res.refined);
            if !images.is_empty() {
                io::save_tensor(&ctx.path("attack_samples.saet"), &Tensor::stack(&images)?)?;
            }
            ctx.grid("attack.ppm", &images, &vec![true; images.len()])?;
            println!(
                "accepted {}/{}; kept {}",
                res.report.accepted, res.report.m, res.report.refined
            );
        }
        Command::Grid { victim, aux, surrogate, ebm_dir, sources, targets } => {
            let victim = ctx.victim(&victim)?;
            let aux = ctx.victim(&aux)?;
            let surrogate = ctx.victim(&surrogate)?;
            let test = ctx.test_data()?;
            let digits = sources.unwrap_or_else(|| (0..NUM_DIGITS).collect());
            let semantic = cfg.attack.energy.distance == DistanceKind::Semantic;
            let mut ebms: Vec<Option<EnergyNetParams<f32>>> = Vec::new();
            for &d in &digits {
                ebms.push(match (&ebm_dir, semantic) {
                    (Some(dir), true) => Some(io::load_energy(&dir.join(format!("ebm_{d}.ckpt")), None)?),
                    (None, true) => return Err("semantic distance needs --ebm-dir".into()),
                    _ => None,
                });
            }
            let mut grid_sources = Vec::new();
            for (&d, ebm) in digits.iter().zip(&ebms) {
                let idx = test.first_of_class(d).ok_or_else(|| format!("no test image of digit {d}"))?;
                let wanted: Vec<usize> = match &targets {
                    Some(t) => t.iter().copied().filter(|&t| t != d).collect(),
                    None => (0..NUM_DIGITS).filter(|&t| t != d).collect(),
                };
                grid_sources.push(GridSource {
                    x_ori: test.image(idx),
                    y_ori: d,
                    targets: wanted,
                    ebm: ebm.as_ref(),
                });
            }
            let result = run_grid(&grid_sources, &cfg.attack, &victim, &aux, &surrogate)?;
            let mut csv = Vec::new();
            result.write_matrix_csv(&mut csv)?;
            ctx.write("success.csv", &csv)?;
            let mut jsonl = Vec::new();
            result.write_reports_jsonl(&mut jsonl)?;
            ctx.write("reports.jsonl", &jsonl)?;
            for row in &result.rows {
                for cell in &row.cells {
                    let images = record_images(&cell.refined);
                    let flags = if images.is_empty() {
                        Vec::new()
                    } else {
                        let preds = surrogate.predict(&Tensor::stack(&images)?)?;
                        preds.iter().map(|&p| p == row.y_ori).collect()
                    };
                    ctx.grid(&format!("grid_{}_{}.ppm", row.y_ori, cell.report.y_tar), &images, &flags)?;
                }
            }
            print!("{}", String::from_utf8(csv)?);
        }
        Command::PgdBaseline { victim, norm } => {
            let victim = ctx.victim(&victim)?;
            let test = ctx.test_data()?;
            let mut sources = Vec::new();
            for d in 0..NUM_DIGITS {
                if let Some(i) = test.first_of_class(d) {
                    sources.push((test.image(i), d));
                }
            }
            let targets: Vec<usize> = (0..NUM_DIGITS).collect();
            let settings = match norm {
                Norm::Linf => cfg.baseline.linf,
                Norm::L2 => cfg.baseline.l2,
            };
            let grid = pgd_baseline_grid(&victim, &sources, &targets, &settings)?;
            fs::create_dir_all(&ctx.out)?;
            io::emit_grid(&grid.images, grid.cols, &grid.deceives, &ctx.path(&format!("baseline_{norm}.ppm")))?;
            println!("deceived {}/{}", grid.deceive_count(), grid.rows * (grid.cols - 1));
        }
        Command::Eval { surrogate, samples, label } => {
            let surrogate = ctx.victim(&surrogate)?;
            let x: Tensor<f32> = io::load_tensor(&samples)?;
            let records: Vec<SampleRecord> = (0..x.rows())
                .map(|i| {
                    Ok(SampleRecord {
                        chain: i,
                        image: x.index_row(i)?,
                        logits: Vec::new(),
                        deceives: true,
                        energy: 0.0,
                        aux_score: 0.0,
                    })
                })
                .collect::<Result<_, semadv::tensor::TensorError>>()?;
            let rate = surrogate_success_rate(&records, label, &surrogate)?;
            ctx.write_json("eval.json", &serde_json::json!({ "label": label, "count": records.len(), "success_rate": rate }))?;
            println!("success rate {rate:.4}");
        }
        Command::Selftest => {
            let results = selftest::run_all(cli.common.seed.unwrap_or(0));
            for r in &results {
                println!("{r}");
            }
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
