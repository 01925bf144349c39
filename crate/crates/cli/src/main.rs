use std::path::PathBuf;
use std::process::ExitCode;

use catart::art;
use catart::pipeline::{self, Ablation, Layout, PipelineConfig, CONFIG_KEYS};
use catart::{Error, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use log::error;

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("key = value configuration file (command-line flags take precedence)")];
    for (key, help) in CONFIG_KEYS {
        args.push(Arg::new(*key).long(flag(key)).value_name("VALUE").help(*help));
    }
    args
}

fn cli() -> Command {
    let stage = |name: &'static str, about: &'static str| Command::new(name).about(about).args(config_args());
    Command::new("catart")
        .about("Multi-target cross-domain recommendation: per-domain MF, contrastive autoencoder, attention transfer")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg(
            Arg::new("verbose")
                .short('v')
                .long("verbose")
                .action(ArgAction::Count)
                .global(true)
                .help("more logging (-v info, -vv debug)"),
        )
        .subcommand(stage("synth", "generate a synthetic world and write it as interaction files").arg(
            Arg::new("to")
                .long("to")
                .value_name("DIR")
                .help("target directory (default: <out-dir>/world)"),
        ))
        .subcommand(stage("stage1", "split the data and train one MF model per domain"))
        .subcommand(stage("stage2", "train the contrastive autoencoder on stage-1 user embeddings"))
        .subcommand(stage("stage3", "train attention transfer per domain and write test reports"))
        .subcommand(stage("run-all", "all stages, every seed and ablation, plus aggregation and manifest"))
        .subcommand(stage("eval", "recompute test reports from checkpoints and aggregate them"))
        .subcommand(
            stage("report-attention", "print the mean attention matrix of one run")
                .arg(Arg::new("run").long("run").value_name("R").default_value("0").help("run index"))
                .arg(
                    Arg::new("variant")
                        .long("variant")
                        .value_name("ABLATION")
                        .default_value("+art")
                        .allow_hyphen_values(true)
                        .help("+art or -attention"),
                ),
        )
}

fn resolve(m: &ArgMatches) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        config.apply_file(&PathBuf::from(path))?;
    }
    for (key, _) in CONFIG_KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            config.set(key, v).map_err(|e| Error::config(format!("--{}: {e}", flag(key))))?;
        }
    }
    config.validate()?;
    Ok(config)
}

fn print_table(config: &PipelineConfig) -> Result<()> {
    let (aggregates, flags) = pipeline::aggregate(config)?;
    for agg in &aggregates {
        println!("{}", agg.to_table());
    }
    for run in &flags {
        let headline = pipeline::ndcg10_flags(&run.flags);
        if !headline.is_empty() {
            let names: Vec<String> = headline.iter().map(|f| f.domain.to_string()).collect();
            println!(
                "negative transfer ({} run {}): NDCG@10 below SMF in domain(s) {}",
                run.ablation.name(),
                run.run,
                names.join(", ")
            );
        }
    }
    Ok(())
}

fn run(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let config = resolve(sub)?;
    match name {
        "synth" => {
            let dir = sub
                .get_one::<String>("to")
                .map_or_else(|| config.out_dir.join("world"), PathBuf::from);
            let world = pipeline::generate_world(&config)?;
            for p in world.write(&dir)? {
                println!("{}", p.display());
            }
            for (d, density) in world.truth.densities.iter().enumerate() {
                println!("domain {d} ({}): density {density:.4}", world.spec.domains[d].name);
            }
        }
        "stage1" => {
            for r in pipeline::run_stage1(&config)? {
                println!("{}", r.to_tsv());
            }
        }
        "stage2" => {
            let variants = pipeline::stage2_variants(&config);
            if variants.is_empty() {
                return Err(Error::config("the selected ablations need no stage-2 model"));
            }
            for v in variants {
                pipeline::run_stage2(&config, v)?;
            }
        }
        "stage3" => {
            for &a in &config.ablations {
                for r in pipeline::run_stage3(&config, a)? {
                    println!("{}", r.to_tsv());
                }
            }
        }
        "run-all" => {
            let manifest = pipeline::run_all(&config)?;
            print_table(&config)?;
            println!(
                "{} checkpoints hashed, {:.1}s, manifest at {}",
                manifest.checkpoints.len(),
                manifest.wall_time_secs,
                Layout::new(&config.out_dir).manifest().display()
            );
        }
        "eval" => {
            let mut ablations = vec![Ablation::Smf];
            ablations.extend(config.ablations.iter().copied().filter(|a| *a != Ablation::Smf));
            let layout = Layout::new(&config.out_dir);
            for a in ablations {
                for r in 0..config.seeds {
                    let fresh = pipeline::evaluate_run(&config, r, a)?;
                    let stored = pipeline::load_report(&layout, r, a).ok();
                    if stored.as_ref().is_some_and(|s| s != &fresh) {
                        log::warn!("run {r} {}: stored report differs from recomputed one", a.name());
                    }
                    std::fs::write(layout.report(r, a), serde_json::to_string_pretty(&fresh)?)?;
                    std::fs::write(layout.report(r, a).with_extension("tsv"), fresh.to_tsv())?;
                }
            }
            print_table(&config)?;
        }
        "report-attention" => {
            let r: usize = sub
                .get_one::<String>("run")
                .expect("default")
                .parse()
                .map_err(|_| Error::config("--run must be an index"))?;
            let variant = Ablation::parse(sub.get_one::<String>("variant").expect("default"))?;
            if !matches!(variant, Ablation::Art | Ablation::NoAttention) {
                return Err(Error::config("attention exists only for +art and -attention"));
            }
            let layout = Layout::new(&config.out_dir);
            let state = pipeline::load_run(&layout, r, variant)?;
            let models = pipeline::load_art_models(&layout, r, variant, state.store.n_domains())?;
            let names: Vec<String> = state.store.domains().iter().map(|d| d.name.clone()).collect();
            print!("{}", art::attention_matrix_tsv(&names, &pipeline::attention_rows(&state, &models)?));
        }
        _ => unreachable!("clap rejects unknown subcommands"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let m = cli().get_matches();
    let level = match m.get_count("verbose") {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&m) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_config_key_is_a_flag() {
        let cmd = cli();
        let stage1 = cmd.find_subcommand("stage1").unwrap();
        for (key, _) in CONFIG_KEYS {
            assert!(stage1.get_arguments().any(|a| a.get_id() == *key), "{key}");
        }
        cli().debug_assert();
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        std::fs::write(&cfg, "tau = 0.3\nseeds = 2\n").unwrap();
        let m = cli().get_matches_from(["catart", "stage1", "--config", cfg.to_str().unwrap(), "--seeds", "5"]);
        let c = resolve(m.subcommand().unwrap().1).unwrap();
        assert_eq!(c.stage2.tau, 0.3);
        assert_eq!(c.seeds, 5);
    }
}
