use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tempr::aggregate::AggKind;
use tempr::dataio::{generate_synthetic, read_dataset, write_dataset, SynthConfig};
use tempr::encoder::EncoderKind;
use tempr::model::ModelConfig;
use tempr::scales::Strategy;
use tempr::tower::TowerKind;
use tempr::trainer::{
    self, ablate, evaluate, load_checkpoint, report, AblationAxis, MetricsRecord, RunConfig, SplitSel, TrainRho,
};
use tempr::{Error, Result};

#[derive(Parser)]
#[command(name = "tempr", version, about = "Multi-scale attention towers for early action prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic moving-shape dataset.
    Synth(SynthArgs),
    /// Train a model and evaluate it per observation ratio.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Sweep one configuration axis over several seeds.
    Ablate(AblateArgs),
    /// Merge metrics files into CSV and JSON tables.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

fn parse_with<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse::<T>().map_err(|e| e.to_string())
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    clips_per_class: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output TPRV file; the manifest is written next to it as `<out>.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Start from the full-size configuration instead of the desk defaults.
    #[arg(long)]
    paper_config: bool,
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long, value_parser = parse_with::<Strategy>)]
    strategy: Option<Strategy>,
    /// Frames sampled per scale.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads_cross: Option<usize>,
    #[arg(long)]
    heads_self: Option<usize>,
    #[arg(long, value_enum)]
    share_latent: Option<Switch>,
    #[arg(long, value_enum)]
    share_classifier: Option<Switch>,
    #[arg(long, value_enum)]
    share_towers: Option<Switch>,
    #[arg(long, value_parser = parse_with::<TowerKind>)]
    tower: Option<TowerKind>,
    #[arg(long)]
    pe_bands: Option<usize>,
    #[arg(long)]
    enc_channels: Option<usize>,
    #[arg(long, value_parser = parse_with::<EncoderKind>)]
    enc_kind: Option<EncoderKind>,
    /// Pooled feature grid as `t,h,w`.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_with::<AggKind>)]
    agg: Option<AggKind>,
    #[arg(long)]
    gate_theta: Option<f64>,
}

impl ModelArgs {
    fn build(&self) -> Result<ModelConfig> {
        let mut m = if self.paper_config {
            ModelConfig::paper(2, 1)
        } else {
            ModelConfig::desk(2, 1)
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(m.scales, self.scales);
        set!(m.strategy, self.strategy);
        set!(m.frames, self.frames);
        set!(m.tower.latent_dim, self.latent_dim);
        set!(m.tower.layers, self.layers);
        set!(m.tower.heads_cross, self.heads_cross);
        set!(m.tower.heads_self, self.heads_self);
        set!(m.tower.share_latent, self.share_latent.map(Switch::on));
        set!(m.tower.share_classifier, self.share_classifier.map(Switch::on));
        set!(m.tower.share_towers, self.share_towers.map(Switch::on));
        set!(m.tower.kind, self.tower);
        set!(m.tower.pe_bands, self.pe_bands);
        set!(m.enc_channels, self.enc_channels);
        set!(m.enc_kind, self.enc_kind);
        set!(m.agg, self.agg);
        set!(m.gate_theta, self.gate_theta);
        if let Some(g) = &self.grid {
            m.grid = g
                .as_slice()
                .try_into()
                .map_err(|_| Error::Config(format!("grid needs three values t,h,w, got {g:?}")))?;
        }
        Ok(m)
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Dataset TPRV file.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Observation ratios, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    rho: Vec<f64>,
    /// `grid` or `fixed:<v>`.
    #[arg(long, default_value = "grid", value_parser = parse_with::<TrainRho>)]
    train_rho: TrainRho,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    beta_lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value = "train", value_parser = parse_with::<SplitSel>)]
    train_split: SplitSel,
    #[arg(long, default_value = "val", value_parser = parse_with::<SplitSel>)]
    eval_split: SplitSel,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RunArgs {
    fn build(&self, out: Option<PathBuf>) -> Result<RunConfig> {
        let cfg = RunConfig {
            dataset: Some(self.data.clone()),
            rhos: self.rho.clone(),
            train_rho: self.train_rho,
            model: self.model.build()?,
            epochs: self.epochs,
            base_lr: self.lr,
            beta_lr: self.beta_lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
            batch_size: self.batch_size,
            train_split: self.train_split,
            eval_split: self.eval_split,
            out_dir: out,
            ..RunConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output directory for checkpoint.bin, metrics.json and results.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    rho: Vec<f64>,
    #[arg(long, default_value = "val", value_parser = parse_with::<SplitSel>)]
    split: SplitSel,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional JSON file for the per-ρ table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_parser = parse_with::<AblationAxis>)]
    axis: AblationAxis,
    /// Axis values, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// metrics.json files written by `train`.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Row labels, one per input; defaults to each input's parent directory name.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn print_table(results: &[trainer::RhoResult]) {
    let n = results.first().map_or(0, |r| r.tower_top1.len());
    let towers: String = (1..=n).map(|i| format!("  tower_{i}")).collect();
    println!("rho   agg_top1{towers}");
    for r in results {
        let cells: String = r.tower_top1.iter().map(|a| format!("  {a:7.4}")).collect();
        println!("{:<4}  {:8.4}{cells}", r.rho, r.agg_top1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let mut cfg = SynthConfig::new(a.classes, a.clips_per_class, a.frames, a.height, a.width, a.seed);
            cfg.channels = a.channels;
            let ds = generate_synthetic(&cfg)?;
            write_dataset(&ds, &a.out)?;
            println!("wrote {} clips ({} classes) to {}", ds.clips.len(), ds.num_classes(), a.out.display());
        }
        Command::Train(a) => {
            let cfg = a.run.build(Some(a.out.clone()))?;
            let ds = read_dataset(&a.run.data)?;
            let rec = trainer::train(&cfg, &ds, &mut |e| {
                println!(
                    "epoch {:3}  loss {:.4}  acc {:.4}  beta {:.4}  lr {:.1e}",
                    e.epoch, e.train_loss, e.train_acc, e.beta, e.lr
                );
            })?;
            print_table(&rec.evals);
            println!("artifacts in {}", a.out.display());
        }
        Command::Eval(a) => {
            let model = load_checkpoint(&a.checkpoint)?;
            let ds = read_dataset(&a.data)?;
            let results = evaluate(&model, &ds, &a.split.indices(&ds), &a.rho, a.seed)?;
            print_table(&results);
            if let Some(out) = a.out {
                std::fs::write(out, serde_json::to_string_pretty(&results)?)?;
            }
        }
        Command::Ablate(a) => {
            let cfg = a.run.build(None)?;
            let ds = read_dataset(&a.run.data)?;
            let result = ablate(a.axis, &a.values, &cfg, &ds, &a.seeds)?;
            std::fs::create_dir_all(&a.out)?;
            result.write(&a.out)?;
            let rho = cfg.rhos[cfg.rhos.len() / 2];
            println!("{} at rho={rho}:", a.axis);
            for v in &a.values {
                let params = result.runs.iter().find(|r| &r.axis_value == v).map_or(0, |r| r.param_count);
                println!("  {v:<16} agg_top1 {:.4}  params {params}", result.mean_agg(v, rho).unwrap_or(f64::NAN));
            }
            println!("artifacts in {}", a.out.display());
        }
        Command::Report(a) => {
            if !a.labels.is_empty() && a.labels.len() != a.inputs.len() {
                return Err(Error::Config(format!(
                    "{} labels for {} inputs",
                    a.labels.len(),
                    a.inputs.len()
                )));
            }
            let records = a
                .inputs
                .iter()
                .enumerate()
                .map(|(i, path)| {
                    let rec: MetricsRecord = serde_json::from_str(&std::fs::read_to_string(path)?)?;
                    let label = a.labels.get(i).cloned().unwrap_or_else(|| {
                        path.parent()
                            .and_then(|p| p.file_name())
                            .map_or_else(|| format!("run{i}"), |n| n.to_string_lossy().into_owned())
                    });
                    Ok((label, rec))
                })
                .collect::<Result<Vec<_>>>()?;
            let (csv, json) = report(&records, &a.out)?;
            println!("wrote {} and {}", csv.display(), json.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
