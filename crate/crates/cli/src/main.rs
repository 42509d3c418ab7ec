//! `edgeai` command line.

mod run;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use edgeai::config::RunConfig;
use edgeai::data::{load_dataset, save_dataset, Dataset};
use edgeai::deploy::{compare_report, comparison_csv, plan_layer_split, plan_nonn, plan_single, simulate, CostReport, Profile};
use edgeai::distill::{evaluate, train_kd, KdHyper};
use edgeai::dream::DreamMetadata;
use edgeai::experiments as ex;
use edgeai::fan::{balance_partitions, detect_communities, FilterGraph, Partition};
use edgeai::nonn::{build_nonn, equal_param_student, evaluate_nonn, load_nonn, save_nonn, taint_check, train_nonn, NoNNModel};
use edgeai::zoo::{read_model, write_model, Model};
use serde::{Deserialize, Serialize};

use run::{Failure, Outcome, RunDir};

#[derive(Parser)]
#[command(name = "edgeai", version, about = "Data-free distillation, NoNN students and distributed-inference costs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent of the `runs/` directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Accept inputs produced under a different config hash.
    #[arg(long)]
    force: bool,
    /// Run directories holding upstream artifacts (searched in order).
    #[arg(long = "from")]
    from: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlanKind {
    Single,
    Split,
    Nonn,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchKind {
    Teacher,
    Student,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and test shape datasets.
    GenData(Common),
    /// Train the teacher with labels.
    TrainTeacher(Common),
    /// Distil the teacher into the configured student on real images.
    Distill(Common),
    /// Summarise the teacher's pooled features into cluster metadata.
    ExtractMetadata(Common),
    /// Synthesise images from metadata and distil a student on them.
    Dream(Common),
    /// Build the filter activation network of the teacher.
    BuildFan(Common),
    /// Detect communities and balance them over the devices.
    Partition(Common),
    /// Train a NoNN student over the partition.
    TrainNonn(Common),
    /// Cost of one deployment plan.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "nonn")]
        plan: PlanKind,
        /// Network for single/split plans, built from the config.
        #[arg(long, value_enum, default_value = "student")]
        arch: ArchKind,
        /// Devices for a split plan; defaults to the fan's device count.
        #[arg(long)]
        devices: Option<usize>,
        /// Device/link profile JSON; defaults to the config's.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Label stored in the report.
        #[arg(long)]
        name: Option<String>,
    },
    /// Tabulate reports against a baseline.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        baseline: String,
    },
    /// Four students from random, dream, alternate and real transfer sets.
    ReproduceFig2d(Common),
    /// Analytic parameter, FLOP and memory checks.
    ReproduceTable1Counts(Common),
}

#[derive(Serialize, Deserialize)]
struct NamedReport {
    name: String,
    report: CostReport,
}

fn load_config(c: &Common) -> Outcome<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open(c: &Common, command: &str) -> Outcome<(RunConfig, RunDir)> {
    let cfg = load_config(c)?;
    let run = RunDir::create(&c.out, &cfg, command, c.force, c.from.clone())?;
    Ok((cfg, run))
}

fn json<T: Serialize>(v: &T) -> Outcome<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn load_teacher(run: &RunDir) -> Outcome<Model> {
    Ok(read_model(run.input("teacher.edpm")?)?)
}

fn load_split(run: &RunDir, name: &str) -> Outcome<Dataset> {
    Ok(load_dataset(run.input(name)?)?)
}

fn save_model(run: &RunDir, m: &Model, name: &str) -> Outcome {
    let p = run.path(name);
    write_model(m, &p)?;
    run.stamp(&p, "model")
}

fn save_data(run: &RunDir, d: &Dataset, name: &str) -> Outcome {
    let p = run.path(name);
    save_dataset(d, &p)?;
    run.stamp(&p, "dataset")
}

fn execute(cmd: Command) -> Outcome<PathBuf> {
    let run = match cmd {
        Command::GenData(c) => {
            let (cfg, run) = open(&c, "gen-data")?;
            let (train, test) = ex::desk_datasets(&cfg)?;
            save_data(&run, &train, "train.edai")?;
            save_data(&run, &test, "test.edai")?;
            let info = BTreeMap::from([
                ("class_names", serde_json::to_value(cfg.dataset.shapes(cfg.seed, false).class_names())?),
                ("train_images", train.len().into()),
                ("test_images", test.len().into()),
            ]);
            run.write_text("dataset.json", "dataset-info", &json(&info)?)?;
            run
        }
        Command::TrainTeacher(c) => {
            let (cfg, run) = open(&c, "train-teacher")?;
            let (train, test) = (load_split(&run, "train.edai")?, load_split(&run, "test.edai")?);
            let (m, hist) = ex::train_teacher(&cfg, &train, &test)?;
            save_model(&run, &m, "teacher.edpm")?;
            run.write_text("teacher_history.csv", "history", &hist.to_csv())?;
            let acc = evaluate(&m, &test, 256)?.1;
            run.log(format!("teacher test accuracy {acc:.4}"));
            run.write_text("teacher_metrics.json", "metrics", &json(&BTreeMap::from([("test_accuracy", acc)]))?)?;
            run
        }
        Command::Distill(c) => {
            let (cfg, run) = open(&c, "distill")?;
            let teacher = load_teacher(&run)?;
            let (train, test) = (load_split(&run, "train.edai")?, load_split(&run, "test.edai")?);
            let h = cfg.seeded(&cfg.student.train, 2);
            let mut s = Model::build(&cfg.student_spec()?, h.seed)?;
            let hist = train_kd(&mut s, &teacher, &train.images, Some(&train.labels), &h, &cfg.kd, Some(&test))?;
            save_model(&run, &s, "student.edpm")?;
            run.write_text("distill_history.csv", "history", &hist.to_csv())?;
            let acc = evaluate(&s, &test, 256)?.1;
            run.log(format!("student test accuracy {acc:.4}"));
            run.write_text("distill_metrics.json", "metrics", &json(&BTreeMap::from([("test_accuracy", acc)]))?)?;
            run
        }
        Command::ExtractMetadata(c) => {
            let (cfg, run) = open(&c, "extract-metadata")?;
            let teacher = load_teacher(&run)?;
            let train = load_split(&run, "train.edai")?;
            let meta = ex::dream_metadata(&cfg, &teacher, &train)?;
            run.log(format!("{} clusters, {} stored scalars", meta.clusters.len(), meta.stored_scalars()));
            run.write_text("metadata.json", "dream-metadata", &meta.to_json()?)?;
            run
        }
        Command::Dream(c) => {
            let (cfg, run) = open(&c, "dream")?;
            let teacher = load_teacher(&run)?;
            let meta = DreamMetadata::from_json(&std::fs::read_to_string(run.input("metadata.json")?)?)?;
            if meta.teacher_fingerprint != teacher.fingerprint() {
                return Err(Failure::Precondition("metadata.json was extracted from a different teacher".into()));
            }
            let test = load_split(&run, "test.edai")?;
            let syn = ex::dream_images(&cfg, &teacher, &meta)?;
            run.log(format!("{} synthetic images, {} failed", syn.data.len(), syn.failed.iter().filter(|&&f| f).count()));
            save_data(&run, &syn.data, "synthetic.edai")?;
            run.write_text("synthetic_provenance.json", "provenance", &syn.provenance_json()?)?;
            let h = cfg.seeded(&cfg.student.train, 2);
            let mut s = Model::build(&cfg.student_spec()?, h.seed)?;
            let kd = KdHyper { alpha: 1.0, ..cfg.kd };
            let hist = train_kd(&mut s, &teacher, &syn.data.images, None, &h, &kd, None)?;
            save_model(&run, &s, "dream_student.edpm")?;
            run.write_text("dream_history.csv", "history", &hist.to_csv())?;
            let acc = evaluate(&s, &test, 256)?.1;
            run.log(format!("dream student test accuracy {acc:.4}"));
            run.write_text("dream_metrics.json", "metrics", &json(&BTreeMap::from([("test_accuracy", acc)]))?)?;
            run
        }
        Command::BuildFan(c) => {
            let (_, run) = open(&c, "build-fan")?;
            let teacher = load_teacher(&run)?;
            let train = load_split(&run, "train.edai")?;
            let g = edgeai::fan::build_fan(&teacher, &train)?;
            run.log(format!("{} live filters, {} dead", g.len(), g.dead.len()));
            run.write_text("fan.json", "filter-graph", &g.to_json()?)?;
            run.write_text("fan_edges.txt", "edge-list", &g.edge_list())?;
            run
        }
        Command::Partition(c) => {
            let (cfg, run) = open(&c, "partition")?;
            let g: FilterGraph = serde_json::from_str(&std::fs::read_to_string(run.input("fan.json")?)?)?;
            let raw = detect_communities(&g, cfg.fan.resolution, cfg.seed)?;
            let k = cfg.fan.k_devices;
            let budget = cfg.fan.budget_filters.unwrap_or_else(|| g.len().div_ceil(k));
            let bal = balance_partitions(&g, &raw, k, budget)?;
            run.log(format!("{} communities (Q {:.4}) -> sizes {:?} (Q {:.4})", raw.k, raw.modularity, bal.sizes(), bal.modularity));
            run.write_text("partition_raw.json", "partition", &raw.to_json()?)?;
            run.write_text("partition.json", "partition", &bal.to_json()?)?;
            run
        }
        Command::TrainNonn(c) => {
            let (cfg, run) = open(&c, "train-nonn")?;
            let teacher = load_teacher(&run)?;
            let part = Partition::from_json(&std::fs::read_to_string(run.input("partition.json")?)?)?;
            let (train, test) = (load_split(&run, "train.edai")?, load_split(&run, "test.edai")?);
            let mut h = cfg.nonn.clone();
            h.train = cfg.seeded(&cfg.nonn.train, 3);
            let mut nonn = build_nonn(&teacher, &part, &h)?;
            let taint = taint_check(&nonn)?;
            if !taint.isolated() {
                return Err(Failure::Other(format!("trunk isolation check failed: {taint:?}")));
            }
            let hist = train_nonn(&teacher, &mut nonn, &train.images, Some(&train.labels), &h, Some(&test))?;
            let dir = run.path("nonn");
            save_nonn(&nonn, &dir, &BTreeMap::from([("config_hash".to_string(), run.hash.clone())]))?;
            run.stamp(&dir.join("manifest.json"), "nonn-manifest")?;
            run.write_text("nonn_history.csv", "history", &hist.to_csv())?;
            let acc = evaluate_nonn(&nonn, &test, 256)?.1;
            run.log(format!("NoNN widths {:?}, {} params, test accuracy {acc:.4}", nonn.widths(), nonn.num_params()));
            run.write_text("nonn_metrics.json", "metrics", &json(&BTreeMap::from([("test_accuracy", acc)]))?)?;
            run
        }
        Command::Simulate { common, plan, arch, devices, profile, name } => {
            let (cfg, run) = open(&common, "simulate")?;
            let profile = match profile {
                Some(p) => Profile::from_json(&std::fs::read_to_string(&p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?)?,
                None => cfg.devices.clone(),
            };
            let spec = || match arch {
                ArchKind::Teacher => cfg.teacher_spec(),
                ArchKind::Student => cfg.student_spec(),
            };
            let arch_name = match arch {
                ArchKind::Teacher => "teacher",
                ArchKind::Student => "student",
            };
            let (default_name, p) = match plan {
                PlanKind::Single => (format!("{arch_name}_single"), plan_single(&spec()?)?),
                PlanKind::Split => {
                    let d = devices.unwrap_or(cfg.fan.k_devices);
                    (format!("{arch_name}_split{d}"), plan_layer_split(&spec()?, d, &profile)?)
                }
                PlanKind::Nonn => {
                    let (nonn, _): (NoNNModel, _) = load_nonn(run.input("nonn/manifest.json")?.parent().expect("manifest has a parent"))?;
                    if let Some(d) = devices {
                        let mono = equal_param_student(nonn.num_params(), nonn.input(), nonn.classes());
                        let r = simulate(&plan_layer_split(&mono, d, &profile)?, &profile)?;
                        let named = NamedReport { name: format!("equal_param_split{d}"), report: r };
                        run.write_text(&format!("report_{}.json", named.name), "cost-report", &json(&named)?)?;
                    }
                    ("nonn".to_string(), plan_nonn(&nonn, &profile, 0)?)
                }
            };
            let report = simulate(&p, &profile)?;
            let named = NamedReport { name: name.unwrap_or(default_name), report };
            run.log(format!(
                "{}: latency {:.6} s, traffic {} B, feasible {}",
                named.name, named.report.latency_s, named.report.traffic_bytes, named.report.feasible
            ));
            run.write_text(&format!("report_{}.json", named.name), "cost-report", &json(&named)?)?;
            run
        }
        Command::Compare { common, reports, baseline } => {
            let (_, run) = open(&common, "compare")?;
            let mut named = Vec::new();
            for p in &reports {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::Precondition(format!("{}: {e}", p.display())))?;
                run.check(p)?;
                let r: NamedReport = serde_json::from_str(&text)?;
                named.push((r.name, r.report));
            }
            let rows = compare_report(&named, &baseline)?;
            run.write_text("comparison.csv", "comparison", &comparison_csv(&rows))?;
            run.write_text("comparison.json", "comparison", &json(&rows)?)?;
            run
        }
        Command::ReproduceFig2d(c) => {
            let (cfg, run) = open(&c, "reproduce-fig2d")?;
            let (train, test) = ex::desk_datasets(&cfg)?;
            let (teacher, hist) = ex::train_teacher(&cfg, &train, &test)?;
            save_model(&run, &teacher, "teacher.edpm")?;
            run.write_text("teacher_history.csv", "history", &hist.to_csv())?;
            let report = ex::reproduce_fig2d(&cfg, &teacher, &train, &test)?;
            for r in &report.rows {
                run.log(format!("{:>9}: {:.4}", r.source, r.accuracy));
            }
            run.log(format!("ordering verdict: {}", if report.verdict.pass { "pass" } else { "FAIL" }));
            run.write_text("fig2d.csv", "fig2d", &report.to_csv())?;
            run.write_text("fig2d.json", "fig2d", &json(&report)?)?;
            run
        }
        Command::ReproduceTable1Counts(c) => {
            let (cfg, run) = open(&c, "reproduce-table1-counts")?;
            let rows = ex::reproduce_table1_counts()?;
            for r in &rows {
                run.log(format!("{}: {} vs {} ({})", r.item, r.measured, r.reference, if r.pass { "pass" } else { "FAIL" }));
            }
            run.write_text("table1_counts.csv", "counts", &ex::counts_csv(&rows))?;
            let mem = ex::memory_feasibility(&cfg.devices)?;
            let mut csv = String::from("item,params,bytes,budget,fits\n");
            for m in &mem {
                csv.push_str(&format!("{},{},{},{},{}\n", m.item, m.params, m.bytes, m.budget, m.fits));
            }
            run.write_text("memory.csv", "memory", &csv)?;
            run
        }
    };
    Ok(run.dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("edgeai: {f}");
            ExitCode::from(f.code() as u8)
        }
    }
}
