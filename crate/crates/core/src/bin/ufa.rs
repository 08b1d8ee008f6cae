use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ufa::depsafety::{self, DependencyEdge, Semantics, Verdict};
use ufa::fleet::{generate_fleet, FleetGenConfig, RegionId, ServiceId};
use ufa::harness::{self, HarnessError, MetricsReport, OutputFormat, ScenarioConfig};
use ufa::orchestrator::{run_blackhole_drill, DrillKind, DrillSpec, Trigger, TriggerAction};
use ufa::placement::OvercommitParams;
use ufa::SimTime;

const EXIT_CONFIG: u8 = 2;
const EXIT_GATE: u8 = 3;

#[derive(Parser)]
#[command(name = "ufa", version, about = "Deterministic regional failover simulator")]
struct Cli {
    /// Overrides the scenario seed.
    #[arg(long, global = true, env = "UFA_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
    Csv,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => OutputFormat::Json,
            Format::Table => OutputFormat::Table,
            Format::Csv => OutputFormat::Csv,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Directory for report.json, events.jsonl and CSV sidecars.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario.
    Run(RunArgs),
    /// Blackhole or failover-certification drills.
    #[command(subcommand)]
    Drill(DrillCmd),
    /// Run a scenario with failback triggered at the given time.
    Failback {
        #[arg(long, value_parser = SimTime::parse)]
        at: SimTime,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Dependency classification and the canary gate.
    #[command(subcommand)]
    Deps(DepsCmd),
    /// Capacity planning.
    #[command(subcommand)]
    Plan(PlanCmd),
    /// Re-render a stored report.
    Report {
        path: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Run every scenario in a directory.
    Sweep { dir: PathBuf },
    /// Fleet generation.
    #[command(subcommand)]
    Fleet(FleetCmd),
}

#[derive(Subcommand)]
enum DrillCmd {
    Blackhole {
        scenario: PathBuf,
        /// Service ids; defaults to every restore-later and terminate service.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.25,0.5,0.75,1")]
        ramp: Vec<f64>,
        #[arg(long, default_value_t = 0.999)]
        floor: f64,
    },
    Failover {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        region: u8,
        /// Require the failover to happen under peak load.
        #[arg(long)]
        peak: bool,
        #[arg(long, default_value_t = 0.999)]
        floor: f64,
    },
}

#[derive(Subcommand)]
enum DepsCmd {
    /// Classify edges from a JSONL trace, or probe the scenario fleet.
    Analyze {
        scenario: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Gate a deployment that adds edges `caller:callee:fail_close|fail_open`.
    Canary {
        scenario: PathBuf,
        #[arg(long = "edge", value_parser = parse_edge, required = true)]
        edges: Vec<DependencyEdge>,
    },
}

#[derive(Subcommand)]
enum PlanCmd {
    Overcommit {
        scenario: PathBuf,
        #[arg(long, default_value_t = 8.0)]
        m_h: f64,
        #[arg(long, default_value_t = 4.0)]
        m_s: f64,
        #[arg(long, default_value_t = 0.75)]
        alpha_m: f64,
        #[arg(long, default_value_t = 0.9)]
        alpha_c: f64,
        #[arg(long, default_value_t = 0.9)]
        usable: f64,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
}

#[derive(Subcommand)]
enum FleetCmd {
    Generate {
        /// Generator config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_edge(s: &str) -> Result<DependencyEdge, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, sem] = parts[..] else {
        return Err(format!("expected caller:callee:semantics, got {s:?}"));
    };
    let id = |x: &str| x.parse::<u32>().map(ServiceId).map_err(|e| format!("{x:?}: {e}"));
    let sem = match sem {
        "fail_close" => Semantics::FailClose,
        "fail_open" => Semantics::FailOpen,
        other => return Err(format!("unknown semantics {other:?}")),
    };
    Ok(DependencyEdge::between(id(a)?, id(b)?, sem))
}

enum Failure {
    Config(String),
    Gate(String),
    Other(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Other(e.to_string())
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, Failure> {
    let mut cfg = ScenarioConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn run(cfg: &ScenarioConfig, args: &RunArgs) -> Result<(), Failure> {
    let outcome = harness::run_scenario(cfg)?;
    if let Some(dir) = &args.out {
        harness::write_run_dir(&outcome, dir)?;
    }
    print!("{}", harness::render(&outcome.report, args.format.into()));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Run(args) => run(&load(&args.scenario, cli.seed)?, &args),
        Cmd::Failback { at, run: args } => {
            let mut cfg = load(&args.scenario, cli.seed)?;
            cfg.triggers.retain(|t| t.action != TriggerAction::Failback);
            cfg.triggers.push(Trigger { at, action: TriggerAction::Failback });
            cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
            run(&cfg, &args)
        }
        Cmd::Drill(DrillCmd::Blackhole { scenario, targets, ramp, floor }) => {
            let cfg = load(&scenario, cli.seed)?;
            let fleet = harness::build_fleet(&cfg)?;
            let spec = DrillSpec::blackhole(targets.into_iter().map(ServiceId).collect(), ramp, floor);
            let report = run_blackhole_drill(&fleet, &spec).map_err(|e| Failure::Config(e.to_string()))?;
            println!("{}", json(&report));
            if report.certified {
                Ok(())
            } else {
                Err(Failure::Gate(format!("blackhole drill failed at step {:?}", report.first_failing_step)))
            }
        }
        Cmd::Drill(DrillCmd::Failover { scenario, region, peak, floor }) => {
            let cfg = load(&scenario, cli.seed)?;
            let spec = DrillSpec {
                kind: DrillKind::FailoverCertification,
                targets: Vec::new(),
                region: Some(RegionId(region)),
                ramp: vec![0.0, 1.0],
                peak_condition: peak,
                floor,
            };
            let (report, _) = harness::run_failover_certification(&cfg, &spec)?;
            println!("{}", json(&report));
            if report.certified {
                Ok(())
            } else {
                Err(Failure::Gate("failover drill not certified".into()))
            }
        }
        Cmd::Deps(DepsCmd::Analyze { scenario, trace }) => {
            let cfg = load(&scenario, cli.seed)?;
            let mut fleet = harness::build_fleet(&cfg)?;
            match trace {
                Some(path) => {
                    let file = std::fs::File::open(&path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
                    let records = depsafety::read_trace(std::io::BufReader::new(file)).map_err(|e| Failure::Config(e.to_string()))?;
                    let classified = depsafety::analyze_trace(&records, &cfg.depsafety.classifier);
                    let semantics = depsafety::semantics_of(&classified);
                    let (mut violations, offboarded) = depsafety::harden(&fleet, &semantics, depsafety::Detector::Runtime);
                    depsafety::attach_evidence(&mut violations, &classified);
                    println!("{}", json(&serde_json::json!({ "violations": violations, "offboarded": offboarded })));
                }
                None => println!("{}", json(&harness::analyze(&mut fleet, &cfg)?)),
            }
            Ok(())
        }
        Cmd::Deps(DepsCmd::Canary { scenario, edges }) => {
            let cfg = load(&scenario, cli.seed)?;
            let mut fleet = harness::build_fleet(&cfg)?;
            let offboarded: BTreeSet<ServiceId> = harness::analyze(&mut fleet, &cfg)?.offboarded;
            let canary = &cfg.depsafety.canary;
            let err = |e: depsafety::DepSafetyError| Failure::Other(e.to_string());
            let baseline = depsafety::canary_window(&fleet, &fleet.dependencies, &offboarded, canary).map_err(err)?;
            let report = depsafety::canary_gate(&fleet, &edges, &offboarded, Some(&baseline), canary).map_err(err)?;
            println!("{}", json(&report));
            match report.verdict {
                Verdict::Pass => Ok(()),
                Verdict::Rollback => Err(Failure::Gate(format!("rollback: {} regressions", report.regressions.len()))),
            }
        }
        Cmd::Plan(PlanCmd::Overcommit { scenario, m_h, m_s, alpha_m, alpha_c, usable, format }) => {
            let cfg = load(&scenario, cli.seed)?;
            let fleet = harness::build_fleet(&cfg)?;
            let params = OvercommitParams { m_h, m_s, alpha_m, alpha_c };
            let plan = harness::plan_overcommit(&fleet, &params, usable).map_err(|e| Failure::Config(e.to_string()))?;
            match format {
                Format::Json => println!("{}", json(&plan)),
                Format::Table | Format::Csv => {
                    println!("max factor {:.4}  usable {:.2}", plan.max_factor, plan.usable_fraction);
                    for r in &plan.regions {
                        let k = r.min_safe_factor.map_or("unsatisfiable".into(), |k| format!("{k:.2}"));
                        println!(
                            "{}  hosts {}  physical {}  stateless {}  overcommit {}  min safe factor {k}",
                            r.region, r.hosts, r.physical_cores, r.stateless_cores, r.overcommit_cores
                        );
                    }
                    let c = &plan.capacity_ratio;
                    println!("capacity ratio  legacy {:.4}  phase1 {:.4}  phase2 {:.4}", c.legacy, c.phase1, c.phase2);
                }
            }
            Ok(())
        }
        Cmd::Report { path, format } => {
            let text = std::fs::read_to_string(&path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            let report: MetricsReport = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            if report.schema_version != harness::REPORT_SCHEMA_VERSION {
                return Err(Failure::Config(format!("unsupported report schema version {}", report.schema_version)));
            }
            print!("{}", harness::render(&report, format.into()));
            Ok(())
        }
        Cmd::Sweep { dir } => {
            let entries = harness::sweep(&dir)?;
            println!("{}", json(&entries));
            if entries.iter().all(|e| e.ok) {
                Ok(())
            } else {
                Err(Failure::Gate("some scenarios failed".into()))
            }
        }
        Cmd::Fleet(FleetCmd::Generate { config, out }) => {
            let mut gen = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
                    serde_json::from_str::<FleetGenConfig>(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
                }
                None => FleetGenConfig::default(),
            };
            if let Some(s) = cli.seed {
                gen.seed = s;
            }
            let fleet = generate_fleet(&gen).map_err(|e| Failure::Config(e.to_string()))?;
            match out {
                Some(p) => std::fs::write(&p, fleet.to_json()).map_err(|e| Failure::Other(format!("{}: {e}", p.display())))?,
                None => println!("{}", fleet.to_json()),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Gate(m)) => {
            eprintln!("gate failed: {m}");
            ExitCode::from(EXIT_GATE)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::FAILURE
        }
    }
}
