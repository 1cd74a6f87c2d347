use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use planeval::gp::MinimizeOptions;
use planeval::kb::EmbeddingMeta;
use planeval::synth::{generate, SynthConfig};
use planeval::{
    build_kb, evaluate_system, load_kb, predict, save_kb, tune_retrieval, Embedder, IndexedKb,
    PlanRecord, ProtocolSpec, RetrievalConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::config::{AppConfig, BackendKind, ProviderKind};
use crate::files::{self, read_json, write_json, PLANS_DIR, PROTOCOLS_DIR};
use crate::server::{self, AppState};
use crate::{report, service, CliError, EXIT_DISAGREEMENT, EXIT_VIOLATIONS};

#[derive(Debug, Parser)]
#[command(name = "planeval", version)]
#[command(about = "Score, retrieve, check and explain radiotherapy treatment plans")]
pub struct Cli {
    /// Application config file (JSON)
    #[arg(long, global = true, env = "PLANEVAL_CONFIG")]
    pub app_config: Option<PathBuf>,

    /// Text embedding provider
    #[arg(long, global = true, value_enum)]
    pub embedding: Option<ProviderKind>,

    /// Remote embedding service URL
    #[arg(long, global = true)]
    pub embedding_url: Option<String>,

    /// Print JSON instead of tables
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Nine protocols, 607 plans; a 0.1 split holds out 62
    Study,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    /// Text similarity weight
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Normalized-metric similarity weight
    #[arg(long)]
    pub beta_norm: Option<f64>,
    /// Raw-metric similarity weight
    #[arg(long)]
    pub beta_raw: Option<f64>,
    /// Number of gm-nearest candidates
    #[arg(short = 'k', long)]
    pub k: Option<usize>,
}

impl RetrievalArgs {
    fn resolve(&self, base: RetrievalConfig) -> planeval::Result<RetrievalConfig> {
        RetrievalConfig {
            alpha: self.alpha.unwrap_or(base.alpha),
            beta_norm: self.beta_norm.unwrap_or(base.beta_norm),
            beta_raw: self.beta_raw.unwrap_or(base.beta_raw),
            k: self.k.unwrap_or(base.k),
        }
        .validated()
    }
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Chat backend driving explain sessions
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Remote chat service URL
    #[arg(long)]
    pub chat_url: Option<String>,
    /// Model identifier sent to the remote chat service
    #[arg(long)]
    pub chat_model: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic protocols and plans
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        /// Number of protocols
        #[arg(long, default_value_t = 9)]
        protocols: usize,
        #[arg(long, default_value_t = 68)]
        plans_per_protocol: usize,
        #[arg(long, default_value_t = 0.1)]
        violation_rate: f64,
        /// Log-space standard deviation of plan values
        #[arg(long, default_value_t = 0.25)]
        spread: f64,
        /// Use a fixed layout instead of --protocols/--plans-per-protocol
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Output directory; receives protocols/ and plans/
        #[arg(long)]
        out: PathBuf,
    },
    /// Knowledge-base operations
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Normalize a plan and compute its gm score and percentile
    Score {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Retrieve similar plans and predict the percentile
    Retrieve {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[command(flatten)]
        retrieval: RetrievalArgs,
    },
    /// Check a plan against its protocol constraints (exit 3 on violations)
    Check {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Tune retrieval weights and k by GP minimization
    Tune {
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Held-out directory written by `kb build`
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 50)]
        calls: usize,
        /// Uniform random evaluations before the GP takes over
        #[arg(long, default_value_t = 10)]
        init: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the full trace
        #[arg(long, default_value = "tune_trace.json")]
        trace: PathBuf,
        /// Rows in the printed table
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Evaluate a retrieval config on a held-out set
    Evaluate {
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        /// Retrieval config or tune trace (its best config is used)
        #[arg(long = "config")]
        retrieval_config: Option<PathBuf>,
    },
    /// Run a tool-augmented session and verify its summary
    Explain {
        /// Plan file, or a directory of plans for batch mode
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
    },
    /// Serve the read-only HTTP API
    Serve {
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[command(flatten)]
        backend: BackendArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum KbCommand {
    /// Score plans, split off a held-out set and write the knowledge base
    Build {
        #[arg(long)]
        plans: PathBuf,
        #[arg(long)]
        protocols: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        split: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Held-out directory [default: <out>.heldout]
        #[arg(long)]
        held_out: Option<PathBuf>,
    },
}

struct Ctx {
    config: AppConfig,
    json: bool,
}

impl Ctx {
    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce(&T) -> String) -> Result<()> {
        if self.json {
            println!("{}", serde_json::to_string_pretty(value)?);
        } else {
            print!("{}", text(value));
        }
        Ok(())
    }

    fn kb_path(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        flag.or_else(|| self.config.kb.clone()).ok_or_else(|| {
            CliError::Usage("no knowledge base given (--kb or `kb` in the config file)".into())
                .into()
        })
    }

    fn embedder(&self) -> Result<Arc<dyn Embedder>> {
        Ok(self.config.embedder()?)
    }

    fn load_indexed(&self, flag: Option<PathBuf>, embedder: &dyn Embedder) -> Result<IndexedKb> {
        let path = self.kb_path(flag)?;
        let kb = load_kb(&path)?;
        if let Some(meta) = &kb.embedding {
            if meta.provider != embedder.provider_id() {
                eprintln!(
                    "warning: knowledge base was built with `{}`, querying with `{}`",
                    meta.provider,
                    embedder.provider_id()
                );
            }
        }
        Ok(IndexedKb::build(kb, embedder)?)
    }

    fn apply_backend(&mut self, args: &BackendArgs) {
        if let Some(b) = args.backend {
            self.config.chat_backend = b;
        }
        if let Some(url) = &args.chat_url {
            self.config.chat_url = Some(url.clone());
        }
        if let Some(m) = &args.chat_model {
            self.config.chat_model = m.clone();
        }
    }
}

/// Resolves the spec for `plan`: an explicit protocol file, else the
/// knowledge base's protocol of the same name.
fn resolve_protocol(
    ctx: &Ctx,
    plan: &PlanRecord,
    protocol: Option<&Path>,
    kb: Option<PathBuf>,
) -> Result<ProtocolSpec> {
    if let Some(p) = protocol {
        return Ok(read_json(p)?);
    }
    let kb = load_kb(ctx.kb_path(kb)?)?;
    Ok(service::kb_protocol(&kb, plan)?.clone())
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let mut config = AppConfig::load(cli.app_config.as_deref())?;
    if let Some(e) = cli.embedding {
        config.embedding_provider = e;
    }
    if let Some(url) = cli.embedding_url {
        config.embedding_url = Some(url);
    }
    config.validate()?;
    let mut ctx = Ctx {
        config,
        json: cli.json,
    };

    match cli.command {
        Command::Synth {
            seed,
            protocols,
            plans_per_protocol,
            violation_rate,
            spread,
            preset,
            out,
        } => {
            let seed = seed.unwrap_or(ctx.config.seed);
            let mut cfg = match preset {
                Some(Preset::Study) => SynthConfig::study_like(seed),
                None => SynthConfig::uniform(seed, protocols, plans_per_protocol, violation_rate),
            };
            cfg.violation_rate = violation_rate;
            cfg.spread = spread;
            let data = generate(&cfg)?;
            for spec in &data.protocols {
                let file = out.join(PROTOCOLS_DIR).join(format!("{}.json", files::slug(&spec.name)));
                write_json(&file, spec)?;
            }
            for plan in &data.plans {
                let file = out.join(PLANS_DIR).join(format!("{}.json", files::slug(&plan.plan_id)));
                write_json(&file, plan)?;
            }
            let summary = json!({
                "seed": seed,
                "protocols": data.protocols.len(),
                "plans": data.plans.len(),
                "out": out,
            });
            ctx.emit(&summary, |_| {
                format!(
                    "wrote {} protocols and {} plans to {}\n",
                    data.protocols.len(),
                    data.plans.len(),
                    out.display()
                )
            })?;
        }

        Command::Kb {
            command:
                KbCommand::Build {
                    plans,
                    protocols,
                    split,
                    seed,
                    out,
                    held_out,
                },
        } => {
            let seed = seed.unwrap_or(ctx.config.seed);
            let plan_list = files::read_plans(&plans)?;
            let specs = files::read_protocols(&protocols)?;
            let (mut kb, held) = build_kb(&plan_list, &specs, split, seed)?;
            let embedder = ctx.embedder()?;
            let ikb = IndexedKb::build(kb.clone(), embedder.as_ref())?;
            let dimension = ikb
                .indexes
                .values()
                .find_map(|i| i.text_vectors.first().map(|v| v.dimension()))
                .unwrap_or(ctx.config.embedding_dimension);
            kb.embedding = Some(EmbeddingMeta {
                provider: embedder.provider_id(),
                dimension,
            });
            save_kb(&kb, &out)?;
            let held_dir = held_out.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".heldout");
                PathBuf::from(p)
            });
            files::write_held_out(&held_dir, &held, split, seed)?;
            let per_protocol: serde_json::Map<String, serde_json::Value> = kb
                .entries
                .iter()
                .map(|(name, entries)| {
                    let h = held.iter().filter(|h| &h.plan.protocol_name == name).count();
                    (name.clone(), json!({ "entries": entries.len(), "held_out": h }))
                })
                .collect();
            let summary = json!({
                "kb": out,
                "held_out_dir": held_dir,
                "entries": kb.len(),
                "held_out": held.len(),
                "protocols": per_protocol,
            });
            ctx.emit(&summary, |s| {
                let mut text = format!(
                    "knowledge base {}: {} entries; {} held out in {}\n",
                    out.display(),
                    kb.len(),
                    held.len(),
                    held_dir.display()
                );
                for (name, v) in s["protocols"].as_object().into_iter().flatten() {
                    text += &format!("  {name}: {} entries, {} held out\n", v["entries"], v["held_out"]);
                }
                text
            })?;
        }

        Command::Score { plan, protocol, kb } => {
            let plan: PlanRecord = read_json(&plan)?;
            let loaded = match &kb {
                Some(path) => Some(load_kb(path)?),
                None => None,
            };
            let spec = match (&protocol, &loaded) {
                (Some(p), _) => read_json(p)?,
                (None, Some(kb)) => service::kb_protocol(kb, &plan)?.clone(),
                (None, None) => resolve_protocol(&ctx, &plan, None, None)?,
            };
            let result = service::score(&plan, &spec, loaded.as_ref())?;
            ctx.emit(&result, report::score)?;
        }

        Command::Retrieve { plan, kb, retrieval } => {
            let plan: PlanRecord = read_json(&plan)?;
            let config = retrieval.resolve(ctx.config.retrieval)?;
            let embedder = ctx.embedder()?;
            let ikb = ctx.load_indexed(kb, embedder.as_ref())?;
            let result = predict(&plan, &ikb, &config, embedder.as_ref())?;
            ctx.emit(&result, report::prediction)?;
        }

        Command::Check { plan, protocol, kb } => {
            let plan: PlanRecord = read_json(&plan)?;
            let spec = resolve_protocol(&ctx, &plan, protocol.as_deref(), kb)?;
            let result = service::check(&plan, &spec)?;
            ctx.emit(&result, report::violations)?;
            if !result.is_empty() {
                return Ok(ExitCode::from(EXIT_VIOLATIONS));
            }
        }

        Command::Tune {
            kb,
            test,
            calls,
            init,
            seed,
            trace,
            top,
        } => {
            let embedder = ctx.embedder()?;
            let ikb = ctx.load_indexed(kb, embedder.as_ref())?;
            let test_set = files::read_held_out(&test)?;
            let opts = MinimizeOptions {
                n_calls: calls,
                n_init: init,
                seed: seed.unwrap_or(ctx.config.seed),
                ..MinimizeOptions::default()
            };
            match tune_retrieval(&ikb, &test_set, embedder.as_ref(), &opts) {
                Ok(result) => {
                    write_json(&trace, &result)?;
                    ctx.emit(&result, |r| {
                        format!("{}\ntrace written to {}\n", report::tune(r, top), trace.display())
                    })?;
                }
                Err(aborted) => {
                    write_json(
                        &trace,
                        &json!({
                            "aborted": aborted.error.to_string(),
                            "completed": aborted.completed,
                            "entries": aborted.partial,
                        }),
                    )?;
                    return Err(anyhow::Error::new(aborted)
                        .context(format!("partial trace written to {}", trace.display())));
                }
            }
        }

        Command::Evaluate {
            kb,
            test,
            retrieval_config,
        } => {
            let config = match &retrieval_config {
                Some(path) => read_retrieval_config(path)?,
                None => ctx.config.retrieval,
            };
            let embedder = ctx.embedder()?;
            let ikb = ctx.load_indexed(kb, embedder.as_ref())?;
            let test_set = files::read_held_out(&test)?;
            let result = evaluate_system(&ikb, &test_set, &config, embedder.as_ref())?;
            ctx.emit(&result, report::evaluation)?;
        }

        Command::Explain {
            plan,
            kb,
            backend,
            retrieval,
        } => {
            ctx.apply_backend(&backend);
            let chat = ctx.config.backend()?;
            let config = retrieval.resolve(ctx.config.retrieval)?;
            let embedder = ctx.embedder()?;
            let ikb = ctx.load_indexed(kb, embedder.as_ref())?;
            let plans = if plan.is_dir() {
                files::read_plans(&plan)?
            } else {
                vec![read_json(&plan)?]
            };
            if plans.is_empty() {
                return Err(CliError::Usage(format!("no plans in {}", plan.display())).into());
            }
            let results = plans
                .iter()
                .map(|p| {
                    service::explain(p, &ikb, &config, embedder.as_ref(), chat.as_ref())
                        .with_context(|| format!("plan {}", p.plan_id))
                })
                .collect::<Result<Vec<_>>>()?;
            let agreed = results.iter().filter(|r| r.agreement.overall).count();
            let total = results.len();
            let body = json!({ "agreed": agreed, "total": total, "results": results });
            ctx.emit(&body, |_| {
                let mut text: String = results.iter().map(report::explanation).collect::<Vec<_>>().join("\n");
                text += &format!("\nagreement {agreed}/{total}\n");
                text
            })?;
            if agreed != total {
                return Ok(ExitCode::from(EXIT_DISAGREEMENT));
            }
        }

        Command::Serve { kb, addr, backend } => {
            ctx.apply_backend(&backend);
            let chat = ctx.config.backend()?;
            let embedder = ctx.embedder()?;
            let ikb = ctx.load_indexed(kb, embedder.as_ref())?;
            let state = Arc::new(AppState {
                ikb,
                embedder,
                backend: chat,
                retrieval: ctx.config.retrieval.validated()?,
            });
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                eprintln!("listening on {}", listener.local_addr()?);
                server::serve(state, listener).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// A retrieval config file, or a tune trace whose best config is taken.
fn read_retrieval_config(path: &Path) -> Result<RetrievalConfig> {
    let value: serde_json::Value = read_json(path)?;
    let config = value.get("best_config").unwrap_or(&value).clone();
    let config: RetrievalConfig = serde_json::from_value(config).map_err(|e| {
        planeval::Error::CorruptFile(format!("{}: not a retrieval config: {e}", path.display()))
    })?;
    Ok(config.validated()?)
}
