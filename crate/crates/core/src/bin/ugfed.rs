use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ugfed::config::RunConfig;
use ugfed::data::{assign_share_policy, synth_dataset, SplitDataset};
use ugfed::federation::{evaluate_model, prepare_split, run_training};
use ugfed::mending::mend;
use ugfed::metrics::{self, ModelSnapshot};
use ugfed::server::build_server_graph;
use ugfed::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "ugfed", version, about = "Federated graph recommendation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a full training and write metrics and snapshots.
    Train(RunArgs),
    /// Re-score a finished run from its snapshots.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Which held-out split to score: test or val.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also dump per-user metrics here.
        #[arg(long)]
        per_user: Option<PathBuf>,
    },
    /// Mend the shared graph only and dump predicted links.
    Mend {
        #[command(flatten)]
        run: RunArgs,
        /// Output TSV; defaults to `<out>/mended_links.tsv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a clustered synthetic interaction file.
    Synth {
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 300)]
        items: usize,
        #[arg(long, default_value_t = 4)]
        clusters: usize,
        #[arg(long, default_value_t = 0.3)]
        density: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train every combination of the listed values.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        threshold: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        tau: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        clients: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
    },
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// TOML file of flat keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets the data, policy and training seeds together.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    policy_seed: Option<u64>,
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    /// File values, then `--set`, then dedicated flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let mut errors: Vec<String> = self
            .set
            .iter()
            .filter_map(|kv| cfg.set_override(kv).err())
            .collect();
        if !errors.is_empty() {
            errors.extend(cfg.violations());
            return Err(Error::Config(errors));
        }
        if let Some(s) = self.seed {
            cfg.data_seed = s;
            cfg.policy_seed = s;
            cfg.train_seed = s;
        }
        cfg.data_seed = self.data_seed.unwrap_or(cfg.data_seed);
        cfg.policy_seed = self.policy_seed.unwrap_or(cfg.policy_seed);
        cfg.train_seed = self.train_seed.unwrap_or(cfg.train_seed);
        if let Some(o) = &self.out {
            cfg.out_dir = o.to_string_lossy().into_owned();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn train(cfg: &RunConfig) -> Result<()> {
    let out = run_training(cfg)?;
    let dir = cfg.out_dir();
    metrics::write_run(&dir, cfg, &out)?;
    let best = out.best_record();
    println!(
        "best round {}: recall@{k} {:.5} ndcg@{k} {:.5} ({} rounds) -> {}",
        best.round,
        best.test.recall,
        best.test.ndcg,
        out.rounds.len(),
        dir.display(),
        k = best.test.k,
    );
    Ok(())
}

fn eval(run: &Path, which: &str, per_user: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::from_file(&run.join(metrics::CONFIG_FILE))?;
    let split = SplitDataset::load(&run.join(metrics::DATASET_DIR))?;
    let snap = ModelSnapshot::load(&run.join(metrics::MODEL_FILE))?;
    let relevant = match which {
        "test" => &split.test,
        "val" => &split.val,
        other => return Err(Error::Config(vec![format!("unknown split {other:?}, expected test or val")])),
    };
    let res = evaluate_model(&snap.personal, &snap.global, &split.train, relevant, &cfg.hyper);
    if let Some(p) = per_user {
        res.write_tsv(p)?;
    }
    println!(
        "{{\"round\":{},\"split\":\"{which}\",\"recall@{k}\":{},\"ndcg@{k}\":{}}}",
        snap.round,
        res.recall,
        res.ndcg,
        k = res.k
    );
    Ok(())
}

fn mend_only(cfg: &RunConfig, output: Option<PathBuf>) -> Result<()> {
    let split = prepare_split(cfg)?;
    let policy = assign_share_policy(&split, cfg.share(), cfg.policy_seed);
    let shared = build_server_graph(&policy, split.n_users(), split.n_items())?;
    let art = mend(&shared, &cfg.hyper, cfg.train_seed)?;
    let path = output.unwrap_or_else(|| cfg.out_dir().join(metrics::MENDED_FILE));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    art.write_tsv(&path)?;
    println!(
        "shared links {}, hidden {}, predicted {} -> {}",
        shared.n_edges(),
        art.removed_links.len(),
        art.predicted_links.len(),
        path.display()
    );
    Ok(())
}

fn synth(users: usize, items: usize, clusters: usize, density: f64, seed: u64, output: &Path) -> Result<()> {
    let ds = synth_dataset(users, items, clusters, density, seed)?;
    let file = fs::File::create(output).map_err(|e| Error::io(output, e))?;
    let mut w = BufWriter::new(file);
    for &(u, i) in &ds.interactions {
        writeln!(w, "{}\t{}", ds.user_ids[u as usize], ds.item_ids[i as usize]).map_err(|e| Error::io(output, e))?;
    }
    w.flush().map_err(|e| Error::io(output, e))?;
    println!("{} interactions -> {}", ds.interactions.len(), output.display());
    Ok(())
}

fn sweep(base: &RunConfig, threshold: &[f64], tau: &[f64], clients: &[usize], layers: &[usize]) -> Result<()> {
    let or = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
    let ou = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
    let h = &base.hyper;
    let root = base.out_dir();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut rows = Vec::new();
    for t in or(threshold, h.threshold) {
        for ta in or(tau, h.tau) {
            for c in ou(clients, h.clients_per_round) {
                for l in ou(layers, h.server_layers) {
                    let mut cfg = base.clone();
                    cfg.hyper.threshold = t;
                    cfg.hyper.tau = ta;
                    cfg.hyper.clients_per_round = c;
                    cfg.hyper.server_layers = l;
                    cfg.hyper.server_alpha.clear();
                    let name = format!("t{t}_tau{ta}_c{c}_l{l}");
                    cfg.out_dir = root.join(&name).to_string_lossy().into_owned();
                    cfg.validate()?;
                    let out = run_training(&cfg)?;
                    metrics::write_run(&cfg.out_dir(), &cfg, &out)?;
                    let best = out.best_record();
                    println!("{name}: recall {:.5} ndcg {:.5}", best.test.recall, best.test.ndcg);
                    rows.push(serde_json::json!({
                        "threshold": t,
                        "tau": ta,
                        "clients_per_round": c,
                        "server_layers": l,
                        "best_round": best.round,
                        "recall": best.test.recall,
                        "ndcg": best.test.ndcg,
                    }));
                }
            }
        }
    }
    metrics::write_jsonl(&root.join("sweep.jsonl"), rows)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(run) => train(&run.resolve()?),
        Command::Eval { run, split, per_user } => eval(&run, &split, per_user.as_deref()),
        Command::Mend { run, output } => mend_only(&run.resolve()?, output),
        Command::Synth {
            users,
            items,
            clusters,
            density,
            seed,
            output,
        } => synth(users, items, clusters, density, seed, &output),
        Command::Sweep {
            run,
            threshold,
            tau,
            clients,
            layers,
        } => sweep(&run.resolve()?, &threshold, &tau, &clients, &layers),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
