use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use kan_watermark::attacks::{AttackKind, AttackSpec};
use kan_watermark::cli::{self, ModelKind};
use kan_watermark::config::ExperimentConfig;
use kan_watermark::{Error, Result};

#[derive(Parser)]
#[command(name = "kanwm", version, about = "KAN activation watermarking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints and the report.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Finetune,
    Prune,
    Retrain,
}

impl From<KindArg> for AttackKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Finetune => AttackKind::Finetune,
            KindArg::Prune => AttackKind::Prune,
            KindArg::Retrain => AttackKind::RetrainAfterPrune,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a clean model.
    TrainClean {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "kan")]
        model: ModelKind,
    },
    /// Embed the watermark and train the detector.
    Embed {
        #[command(flatten)]
        common: Common,
        /// Clean KAN checkpoint; defaults to `<out>/clean_kan.json`.
        #[arg(long)]
        clean: Option<PathBuf>,
    },
    /// Run a removal attack on a watermarked model.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Watermarked checkpoint; defaults to `<out>/watermarked.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Attack preset; without it every attack listed in the config runs.
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Check a suspect model for the watermark.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Detector checkpoint; defaults to `<out>/detector.json`.
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        suspect: PathBuf,
        /// Decision threshold on the detection rate; defaults to the config value.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Accuracy of matched KAN and MLP models under increasing pruning.
    PruneSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
    },
    /// Print the report of an output directory.
    Report {
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainClean { common, model } => {
            let path = cli::cmd_train_clean(&common.load()?, model, &common.out)?;
            println!("wrote {}", path.display());
        }
        Command::Embed { common, clean } => {
            let cfg = common.load()?;
            let clean = clean.unwrap_or_else(|| common.out.join(cli::clean_file(ModelKind::Kan)));
            let (wm, det) = cli::cmd_embed(&cfg, &clean, &common.out)?;
            println!("wrote {}\nwrote {}", wm.display(), det.display());
        }
        Command::Attack {
            common,
            checkpoint,
            kind,
            lr,
            epochs,
            ratio,
        } => {
            let cfg = common.load()?;
            let seed = cfg.seeds().attack;
            let specs: Vec<AttackSpec> = match kind {
                Some(k) => {
                    let mut spec = AttackSpec::preset(k.into(), seed);
                    if let Some(lr) = lr {
                        spec.lr = lr;
                    }
                    if let Some(e) = epochs {
                        spec.epochs = e;
                    }
                    if ratio.is_some() {
                        spec.prune_ratio = ratio;
                    }
                    vec![spec]
                }
                None if cfg.attacks.is_empty() => {
                    return Err(Error::Config(
                        "no --kind given and the config lists no attacks".into(),
                    ))
                }
                None => cfg.attacks.iter().map(|a| a.to_spec(seed)).collect(),
            };
            let wm = checkpoint.unwrap_or_else(|| common.out.join(cli::WATERMARKED_FILE));
            for spec in &specs {
                let path = cli::cmd_attack(&cfg, &wm, spec, &common.out)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Verify {
            common,
            detector,
            suspect,
            tau,
        } => {
            let cfg = common.load()?;
            let detector = detector.unwrap_or_else(|| common.out.join(cli::DETECTOR_FILE));
            let v = cli::cmd_verify(
                &cfg,
                &detector,
                &suspect,
                tau.unwrap_or(cfg.threshold),
                &common.out,
            )?;
            println!(
                "detection_rate {:.2}% threshold {:.2} decision {}",
                100.0 * v.detection_rate,
                100.0 * v.threshold,
                if v.decision {
                    "watermarked"
                } else {
                    "not watermarked"
                }
            );
        }
        Command::PruneSweep { common, step } => {
            let report = cli::cmd_prune_sweep(&common.load()?, step, &common.out)?;
            print!("{}", report.render());
        }
        Command::Report { out } => print!("{}", cli::cmd_report(&out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use std::fs;
    use std::path::Path;

    use kan_watermark::checkpoint::{Checkpoint, Stage};
    use kan_watermark::report::MetricsReport;

    use super::*;

    const TINY: &str = r#"{
      "format_version": 1,
      "task": "regression",
      "dataset": {"source": "feynman", "formula": "III.10.19", "train": 200, "test": 60},
      "kan_widths": [2, 4, 1],
      "training": {"epochs": 2, "lr_main": 0.01, "batch_size": 50},
      "watermark": {"lr_wm": 0.001},
      "detector": {"hidden": [8], "epochs": 2, "lr": 0.001, "batch_size": 32, "n_shuffles": 2, "samples": 50},
      "attacks": [{"kind": "finetune", "lr": 0.001, "epochs": 1}],
      "seed": 5
    }"#;

    struct Sandbox {
        dir: tempfile::TempDir,
    }

    impl Sandbox {
        fn new(config: &str) -> Self {
            let dir = tempfile::tempdir().unwrap();
            fs::write(dir.path().join("config.json"), config).unwrap();
            Sandbox { dir }
        }

        fn out(&self) -> std::path::PathBuf {
            self.dir.path().join("runs")
        }

        fn path(&self, name: &str) -> String {
            self.out().join(name).to_string_lossy().into_owned()
        }

        fn exec(&self, args: &[&str]) -> Result<()> {
            let cfg = self.dir.path().join("config.json");
            let out = self.out();
            let mut argv = vec!["kanwm".to_string()];
            argv.extend(args.iter().map(|a| a.to_string()));
            argv.extend(["--config".into(), cfg.to_string_lossy().into_owned()]);
            argv.extend(["--out".into(), out.to_string_lossy().into_owned()]);
            run(Cli::try_parse_from(argv).expect("valid arguments").command)
        }

        fn code(&self, args: &[&str]) -> i32 {
            self.exec(args).err().map_or(0, |e| e.exit_code())
        }
    }

    fn provenance(path: &Path) -> kan_watermark::checkpoint::Provenance {
        Checkpoint::load(path).unwrap().provenance
    }

    #[test]
    fn full_pipeline() {
        let s = Sandbox::new(TINY);
        s.exec(&["train-clean"]).unwrap();
        s.exec(&["train-clean", "--model", "mlp"]).unwrap();
        s.exec(&["embed"]).unwrap();
        s.exec(&["attack"]).unwrap();
        for kind in ["finetune", "prune", "retrain"] {
            s.exec(&["attack", "--kind", kind]).unwrap();
        }
        s.exec(&["verify", "--tau", "0", "--suspect", &s.path("watermarked.json")])
            .unwrap();
        s.exec(&["prune-sweep", "--step", "0.5"]).unwrap();

        let report = MetricsReport::load(&s.out().join("report.json")).unwrap();
        let stages: Vec<&str> = report.rows.iter().map(|r| r.stage.as_str()).collect();
        assert_eq!(
            stages,
            [
                "clean",
                "clean",
                "watermarked",
                "attacked:finetune-lr0.001-e1",
                "attacked:finetune-lr0.001-e8",
                "attacked:prune-r0.6",
                "attacked:retrain-r0.6-lr0.001-e8",
                "verify"
            ]
        );
        assert!(report
            .rows
            .iter()
            .all(|r| r.metric_name == "rmse" && r.main_metric.is_some()));
        assert_eq!(report.rows.last().unwrap().decision, Some(true));

        let printed = cli::cmd_report(&s.out()).unwrap();
        assert!(printed.contains("attacked:prune-r0.6") && printed.contains("100%"));
        assert!(run(Cli::try_parse_from(["kanwm", "report", "--out", &s.path("")])
            .unwrap()
            .command)
        .is_ok());
    }

    #[test]
    fn attack_presets_recorded_in_provenance() {
        let s = Sandbox::new(TINY);
        s.exec(&["train-clean"]).unwrap();
        s.exec(&["embed"]).unwrap();
        s.exec(&["attack", "--kind", "finetune"]).unwrap();
        s.exec(&["attack", "--kind", "prune"]).unwrap();
        s.exec(&["attack", "--kind", "retrain"]).unwrap();
        s.exec(&["attack", "--kind", "finetune", "--lr", "0.01", "--epochs", "1"])
            .unwrap();

        let load = |name: &str| provenance(&s.out().join(name));
        let ft = load("attacked_finetune-lr0.001-e8.json");
        assert_eq!(ft.stage, Stage::Attacked);
        let spec = ft.attack.unwrap();
        assert_eq!(
            (spec.kind, spec.lr, spec.epochs, spec.prune_ratio),
            (AttackKind::Finetune, 0.001, 8, None)
        );
        let spec = load("attacked_prune-r0.6.json").attack.unwrap();
        assert_eq!((spec.kind, spec.prune_ratio), (AttackKind::Prune, Some(0.6)));
        let spec = load("attacked_retrain-r0.6-lr0.001-e8.json").attack.unwrap();
        assert_eq!(
            (spec.kind, spec.prune_ratio, spec.lr),
            (AttackKind::RetrainAfterPrune, Some(0.6), 0.001)
        );
        let spec = load("attacked_finetune-lr0.01-e1.json").attack.unwrap();
        assert_eq!((spec.lr, spec.epochs), (0.01, 1));

        let wm = load("watermarked.json");
        assert_eq!(wm.stage, Stage::Watermarked);
        assert!(wm.signal.is_some());
    }

    #[test]
    fn seed_flag_overrides_config() {
        let s = Sandbox::new(TINY);
        s.exec(&["train-clean", "--seed", "77"]).unwrap();
        assert_eq!(provenance(&s.out().join("clean_kan.json")).seeds.master, 77);
    }

    #[test]
    fn config_errors_exit_2() {
        assert_eq!(Sandbox::new("{ not json").code(&["train-clean"]), 2);
        let negative = TINY.replace("\"lr_main\": 0.01", "\"lr_main\": -1.0");
        assert_eq!(Sandbox::new(&negative).code(&["train-clean"]), 2);
        assert_eq!(
            Sandbox::new(&TINY.replace("III.10.19", "X.99.99")).code(&["train-clean"]),
            2
        );
        let s = Sandbox::new(TINY);
        assert_eq!(s.code(&["attack", "--kind", "prune", "--ratio", "1.5"]), 2);
        assert!(Cli::try_parse_from(["kanwm", "attack", "--config", "c", "--kind", "shrink"]).is_err());
    }

    #[test]
    fn data_errors_exit_3() {
        let s = Sandbox::new(TINY);
        assert_eq!(s.code(&["embed", "--clean", &s.path("nowhere.json")]), 3);
        let report = Cli::try_parse_from(["kanwm", "report", "--out", &s.path("")]).unwrap();
        assert_eq!(run(report.command).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn shape_errors_exit_4() {
        let s = Sandbox::new(TINY);
        s.exec(&["train-clean"]).unwrap();
        s.exec(&["train-clean", "--model", "mlp"]).unwrap();

        // Dataset arity does not match the first width.
        assert_eq!(
            Sandbox::new(&TINY.replace("[2, 4, 1]", "[3, 4, 1]")).code(&["train-clean"]),
            4
        );

        // A clean checkpoint of another architecture.
        let other = Sandbox::new(&TINY.replace("[2, 4, 1]", "[2, 3, 1]"));
        assert_eq!(other.code(&["embed", "--clean", &s.path("clean_kan.json")]), 4);

        // An MLP checkpoint where a KAN is expected.
        let mlp = s.path("clean_mlp.json");
        assert_eq!(s.code(&["verify", "--detector", &mlp, "--suspect", &mlp]), 4);
    }
}
