use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use rld_core::analysis::{
    triple_distribution_report, write_coverage_csv, CostParams, CoverageIndex, Metrics, Strategy, total_cost,
};
use rld_core::baselines::{build_global_repository, evaluate_repository, pooled_samples, train_central, train_single, UnknownPolicy};
use rld_core::fedlearn::{evaluate, run_fl, write_history_csv, write_history_jsonl};
use rld_core::ledger::{ContentStore, KeyRing, Ledger, AUTHORITY};
use rld_core::neuralnet::{sha256, ModelParams};
use rld_core::topology::{AsGraph, Asn};
use rld_core::tripledata::{assign_group_clients_from_graph, dataset_distribution, write_samples, ClientDataset};
use serde::Serialize;

use crate::config::{ExperimentConfig, TopologySource};
use crate::error::CliError;

/// Which detector `train` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Fl,
    Central,
    /// 1-based position among the clients sorted by id.
    Single(usize),
    Repository(UnknownPolicy),
    All,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "fl" => Mode::Fl,
            "central" | "cl" => Mode::Central,
            "all" => Mode::All,
            _ => {
                if let Some(k) = s.strip_prefix("single:") {
                    let k: usize = k.parse().map_err(|_| CliError::Usage(format!("bad client index in {s:?}")))?;
                    if k == 0 {
                        return Err(CliError::Usage("single:<k> is 1-based".into()));
                    }
                    Mode::Single(k)
                } else if let Some(p) = UnknownPolicy::parse(s) {
                    Mode::Repository(p)
                } else {
                    return Err(CliError::Usage(format!(
                        "--mode must be fl, central, single:<k>, ml-random, ml-0, ml-1 or all, got {s:?}"
                    )));
                }
            }
        })
    }
}

pub fn parse_strategies(s: &str) -> Result<Vec<Strategy>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| Strategy::parse(p).ok_or_else(|| CliError::Usage(format!("unknown strategy {p:?}"))))
        .collect()
}

pub fn parse_rates(s: &str) -> Result<Vec<f64>, CliError> {
    let rates: Vec<f64> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().map_err(|_| CliError::Usage(format!("bad rate {p:?}"))))
        .collect::<Result<_, _>>()?;
    if rates.is_empty() || rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(CliError::Usage("rates must be non-empty and within [0, 1]".into()));
    }
    Ok(rates)
}

#[derive(Serialize)]
struct Inputs {
    topology: TopologySource,
    topology_digest: String,
    nodes: usize,
    links: usize,
}

fn graph_digest(graph: &AsGraph) -> String {
    hex::encode(sha256(graph.to_as_rel_string().as_bytes()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Creates the run directory and records the configuration and inputs.
fn prepare_run(dir: &Path, cfg: &ExperimentConfig, graph: &AsGraph) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    let inputs = Inputs {
        topology: cfg.topology.clone(),
        topology_digest: graph_digest(graph),
        nodes: graph.node_count(),
        links: graph.link_count(),
    };
    fs::write(dir.join("inputs.json"), serde_json::to_string_pretty(&inputs)?)?;
    Ok(())
}

fn finish(dir: &Path, summary: &str) -> Result<(), CliError> {
    fs::write(dir.join("summary.txt"), summary)?;
    print!("{summary}");
    println!("run directory: {}", dir.display());
    Ok(())
}

pub fn ingest(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(), CliError> {
    let graph = cfg.topology.load()?;
    let s = graph.summary();
    println!(
        "{} ASes, {} links ({} p2c, {} p2p), {} connected components",
        s.nodes, s.links, s.p2c_links, s.p2p_links, s.components
    );
    for line in &s.provenance {
        println!("{line}");
    }
    println!("digest {}", graph_digest(&graph));
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("topology.json"), serde_json::to_string_pretty(&s)?)?;
        graph.write_as_rel(create(&dir.join("topology.as-rel"))?)?;
    }
    Ok(())
}

fn group_clients(cfg: &ExperimentConfig, graph: &AsGraph) -> Result<Vec<ClientDataset>, CliError> {
    let preset = cfg.preset()?;
    let mut clients = assign_group_clients_from_graph(graph, &preset, cfg.seed, cfg.max_client_samples)?;
    clients.sort_by_key(|c| c.id);
    Ok(clients)
}

pub fn gen_triples(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let graph = cfg.topology.load()?;
    prepare_run(dir, cfg, &graph)?;
    let clients = group_clients(cfg, &graph)?;
    let clients_dir = dir.join("clients");
    fs::create_dir_all(&clients_dir)?;
    for c in &clients {
        let mut w = create(&clients_dir.join(format!("AS{}.csv", c.id.0)))?;
        write_samples(&mut w, &c.samples)?;
        w.flush()?;
    }
    let report = dataset_distribution(&clients);
    report.write_csv(create(&dir.join("distribution.csv"))?)?;

    let network = triple_distribution_report(&graph, cfg.fl.execution)?;
    network.write_csv(create(&dir.join("network_distribution.csv"))?)?;
    network.write_cdf_csv(create(&dir.join("inference_cdf.csv"))?)?;

    let mut summary = String::new();
    summary.push_str(&format!("group G{}: {} clients, {} samples\n", cfg.group, clients.len(), report.total));
    for c in &report.clients {
        summary.push_str(&format!(
            "  AS{}: {} samples, {:.2}% malicious, {:.2}% regular\n",
            c.id.0, c.total, c.malicious_pct, c.regular_pct
        ));
    }
    summary.push_str(&format!(
        "network: {} triples, malicious share {:.4}, median inference fraction {}\n",
        network.total,
        network.malicious_share,
        network.median_inference_fraction().map_or("n/a".into(), |m| format!("{m:.4}"))
    ));
    finish(dir, &summary)
}

fn save_model(path: &Path, params: &ModelParams) -> Result<(), CliError> {
    let mut w = create(path)?;
    params.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, mode: Mode, dir: &Path) -> Result<(), CliError> {
    let graph = cfg.topology.load()?;
    prepare_run(dir, cfg, &graph)?;
    let clients = group_clients(cfg, &graph)?;
    dataset_distribution(&clients).write_csv(create(&dir.join("distribution.csv"))?)?;
    let eval = pooled_samples(&clients);
    let exec = cfg.fl.execution;
    let epochs = cfg.fl.global_epochs * cfg.fl.local_epochs;
    let mut rows: Vec<(String, Metrics)> = Vec::new();

    if matches!(mode, Mode::Fl | Mode::All) {
        info!("federated training over {} clients", clients.len());
        let ids: Vec<Asn> = clients.iter().map(|c| c.id).collect();
        let keys = KeyRing::derive(cfg.seed, &ids);
        let mut ledger = Ledger::new(keys.registry(), cfg.clock);
        let outcome = run_fl(&clients, &cfg.model, &cfg.fl, &mut ledger, &keys, Some(&eval))?;
        save_model(&dir.join("model_fl.bin"), &outcome.params)?;
        write_history_csv(create(&dir.join("history.csv"))?, &outcome.history)?;
        write_history_jsonl(create(&dir.join("history.jsonl"))?, &outcome.history)?;
        ledger.write_chain(create(&dir.join("chain.bin"))?)?;
        ledger.store().save_dir(dir.join("store"))?;
        check_ledger(&ledger, &outcome.params)?;
        let m = outcome
            .history
            .last()
            .and_then(|r| r.metrics)
            .map_or_else(|| evaluate(&outcome.params, &eval, exec), Ok)?;
        rows.push(("fl".into(), m));
    }
    if matches!(mode, Mode::Central | Mode::All) {
        info!("central training for {epochs} epochs");
        let p = train_central(&clients, &cfg.model, epochs, cfg.seed)?;
        save_model(&dir.join("model_central.bin"), &p)?;
        rows.push(("central".into(), evaluate(&p, &eval, exec)?));
    }
    let singles: Vec<usize> = match mode {
        Mode::Single(k) => {
            if k > clients.len() {
                return Err(CliError::Usage(format!("single:{k} but the group has {} clients", clients.len())));
            }
            vec![k]
        }
        Mode::All => (1..=clients.len()).collect(),
        _ => vec![],
    };
    for k in singles {
        let c = &clients[k - 1];
        info!("single-client training on AS{}", c.id.0);
        let p = train_single(c, &cfg.model, epochs, cfg.seed)?;
        save_model(&dir.join(format!("model_single_AS{}.bin", c.id.0)), &p)?;
        rows.push((format!("single:AS{}", c.id.0), evaluate(&p, &eval, exec)?));
    }
    let policies: Vec<UnknownPolicy> = match mode {
        Mode::Repository(p) => vec![p],
        Mode::All => UnknownPolicy::ALL.to_vec(),
        _ => vec![],
    };
    if !policies.is_empty() {
        let ids: Vec<Asn> = clients.iter().map(|c| c.id).collect();
        let repo = build_global_repository(&graph, &ids)?;
        for p in policies {
            rows.push((p.name().into(), evaluate_repository(&repo, &eval, p, cfg.seed)?));
        }
    }

    let mut w = create(&dir.join("comparison.csv"))?;
    writeln!(w, "method,{}", Metrics::CSV_HEADER)?;
    for (name, m) in &rows {
        writeln!(w, "{name},{}", m.csv_row())?;
    }
    w.flush()?;

    let mut summary = format!("{} clients, {} evaluation samples\n", clients.len(), eval.len());
    for (name, m) in &rows {
        summary.push_str(&format!(
            "{name:<14} accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}\n",
            m.accuracy, m.precision, m.recall, m.f1
        ));
    }
    finish(dir, &summary)
}

/// Verifies the chain and checks that replaying it reproduces `params`.
fn check_ledger(ledger: &Ledger, params: &ModelParams) -> Result<(), CliError> {
    let report = ledger.verify_chain();
    if !report.valid {
        return Err(CliError::Invariant(format!("ledger failed verification: {:?}", report.first_failure)));
    }
    let replayed = ledger.replay()?;
    if replayed.values() != params.values() {
        return Err(CliError::Invariant("ledger replay does not reproduce the trained model".into()));
    }
    Ok(())
}

pub fn audit(run: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(&run.join("config.json"))?;
    let chain = fs::read(run.join("chain.bin")).map_err(|e| CliError::data(format!("{}/chain.bin: {e}", run.display())))?;
    let store = ContentStore::load_dir(run.join("store"))?;
    // Membership comes from the genesis block; keys are re-derived from the seed.
    let unverified = Ledger::read_chain(&chain[..], Default::default(), cfg.clock, ContentStore::new())?;
    let participants = unverified
        .participants()
        .ok_or_else(|| CliError::data("chain has no genesis block"))?
        .to_vec();
    let keys = KeyRing::derive(cfg.seed, &participants);
    debug_assert!(keys.registry().contains(AUTHORITY));
    let ledger = Ledger::read_chain(&chain[..], keys.registry(), cfg.clock, store)?;
    let report = ledger.verify_chain();
    println!("{} blocks, {} participants", ledger.len(), participants.len());
    if !report.valid {
        for f in &report.failures {
            println!("block {}: {:?}", f.index, f.kind);
        }
        return Err(CliError::Invariant(format!("{} chain failures", report.failures.len())));
    }
    let replayed = ledger.replay()?;
    let model_path = run.join("model_fl.bin");
    if model_path.exists() {
        let saved = ModelParams::read_from(File::open(&model_path)?)?;
        if saved.values() != replayed.values() {
            return Err(CliError::Invariant("replayed model differs from model_fl.bin".into()));
        }
        println!("replay matches model_fl.bin");
    }
    println!("chain valid, replayed model digest {}", hex::encode(replayed.digest()));
    Ok(())
}

pub fn deploy(cfg: &ExperimentConfig, strategies: &[Strategy], rates: &[f64], dir: &Path) -> Result<(), CliError> {
    let graph = cfg.topology.load()?;
    prepare_run(dir, cfg, &graph)?;
    let index = CoverageIndex::build(&graph, cfg.fl.execution)?;
    let curves = strategies
        .iter()
        .map(|&s| index.curve(&graph, s, rates))
        .collect::<Result<Vec<_>, _>>()?;
    write_coverage_csv(create(&dir.join("coverage.csv"))?, &curves)?;
    let mut summary = format!("{} malicious triples in the network\n", index.total_malicious());
    for c in &curves {
        for p in &c.points {
            summary.push_str(&format!(
                "{:<9} rate {:<5} deployed {:>6} coverage {:.4}\n",
                c.strategy.as_str(),
                p.rate,
                p.deployed,
                p.coverage
            ));
        }
    }
    finish(dir, &summary)
}

pub fn cost(params: &Path, per_round: bool, out: Option<&Path>) -> Result<(), CliError> {
    let text = fs::read_to_string(params).map_err(|e| CliError::data(format!("{}: {e}", params.display())))?;
    let mut p: CostParams = serde_json::from_str(&text)?;
    p.per_round |= per_round;
    let b = total_cost(&p)?;
    println!("local computation {}", b.local_computation);
    println!("exchange          {}", b.exchange);
    println!("consensus         {}", b.consensus);
    println!("storage           {}", b.storage);
    println!("total             {}", b.total);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("cost.json"), serde_json::to_string_pretty(&b)?)?;
    }
    Ok(())
}
