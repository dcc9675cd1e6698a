//! Command-line driver. Tables and models persist in a data directory as a
//! journal of successful commands that is replayed on start-up.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use relinfer::bench::{self, BenchOptions, Suite};
use relinfer::cache::{CacheConfig, CacheMode};
use relinfer::linalg::BlockSize;
use relinfer::relational::RowRelation;
use relinfer::sql::IngestOptions;
use relinfer::{Engine, EngineConfig};
use serde::{Deserialize, Serialize};

const JOURNAL: &str = "journal.json";

#[derive(Parser, Debug)]
#[command(name = "relinfer", version, about = "Run inference queries over relational data")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Operators whose estimated footprint exceeds this run relation-centric.
    #[arg(long, global = true, env = "RELINFER_MEMORY_THRESHOLD", default_value_t = 2_147_483_648)]
    memory_threshold: u64,
    #[arg(long, global = true, env = "RELINFER_BUFFER_POOL", default_value_t = 1 << 30)]
    buffer_pool: u64,
    /// Block shape as ROWSxCOLS.
    #[arg(long, global = true, env = "RELINFER_BLOCK_SIZE", default_value = "1000x1000", value_parser = parse_block)]
    block_size: BlockSize,
    #[arg(long, global = true, env = "RELINFER_SPILL_DIR")]
    spill_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "RELINFER_WORKERS", default_value_t = 1)]
    workers: usize,
    /// off, exact or approx:TAU.
    #[arg(long, global = true, env = "RELINFER_CACHE", default_value = "off", value_parser = parse_cache)]
    cache: CacheMode,
    #[arg(long, global = true, env = "RELINFER_SEED", default_value_t = 42)]
    seed: u64,
    /// Where tables and models are kept between invocations.
    #[arg(long, global = true, env = "RELINFER_DATA_DIR", default_value = ".relinfer")]
    data_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a CSV file into a table.
    Ingest {
        #[arg(long)]
        table: String,
        #[arg(long)]
        csv: PathBuf,
        /// Type overrides as name:type,name:type.
        #[arg(long)]
        schema: Option<String>,
        /// Comma-separated key columns.
        #[arg(long, value_delimiter = ',')]
        keys: Vec<String>,
    },
    /// Register a model from its metadata alone (inline JSON or a file).
    CreateModel {
        #[arg(long)]
        name: String,
        #[arg(long)]
        meta: String,
    },
    /// Load a model with weights from a manifest file.
    LoadModel {
        #[arg(long)]
        name: String,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run a query and print its rows as CSV; the report goes to stderr.
    Query {
        sql: String,
        /// Print the physical plan instead of running the query.
        #[arg(long)]
        explain: bool,
    },
    /// Run a benchmark suite (or `all`) and write a JSON-lines report.
    Bench {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
enum Entry {
    Ingest {
        table: String,
        csv: PathBuf,
        schema: Option<String>,
        keys: Vec<String>,
    },
    CreateModel {
        name: String,
        meta: String,
    },
    LoadModel {
        name: String,
        manifest: PathBuf,
    },
}

fn parse_block(s: &str) -> Result<BlockSize, String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("`{s}` is not ROWSxCOLS"))?;
    let dim = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok(BlockSize::new(dim(r)?, dim(c)?))
}

fn parse_cache(s: &str) -> Result<CacheMode, String> {
    s.parse().map_err(|e: relinfer::Error| e.to_string())
}

impl Global {
    fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            memory_threshold_bytes: self.memory_threshold,
            buffer_pool_bytes: self.buffer_pool,
            block: self.block_size,
            spill_dir: self.spill_dir.clone(),
            workers: self.workers,
            cache: CacheConfig {
                mode: self.cache,
                ..CacheConfig::default()
            },
            seed: self.seed,
            ..EngineConfig::default()
        }
    }
}

struct Store {
    dir: PathBuf,
    entries: Vec<Entry>,
}

impl Store {
    fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(JOURNAL);
        let entries = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).with_context(|| format!("reading {}", path.display()))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
        };
        Ok(Store {
            dir: dir.to_path_buf(),
            entries,
        })
    }

    fn replay(&self, engine: &Engine) -> Result<()> {
        for entry in &self.entries {
            apply(engine, entry).context("replaying stored catalog")?;
        }
        Ok(())
    }

    /// Appends an entry after it has been applied, via a rename so a crash
    /// never leaves a half-written journal.
    fn append(&mut self, entry: Entry) -> Result<()> {
        self.entries.push(entry);
        let tmp = self.dir.join(format!("{JOURNAL}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(&self.entries)?)?;
        fs::rename(&tmp, self.dir.join(JOURNAL))?;
        Ok(())
    }
}

fn apply(engine: &Engine, entry: &Entry) -> Result<()> {
    match entry {
        Entry::Ingest { table, csv, schema, keys } => {
            let opts = IngestOptions {
                schema: match schema {
                    Some(s) => IngestOptions::parse_schema(s)?,
                    None => Vec::new(),
                },
                keys: keys.clone(),
            };
            engine.ingest_csv(table, csv, &opts)?;
        }
        Entry::CreateModel { name, meta } => {
            engine.create_model(name, meta)?;
        }
        Entry::LoadModel { name, manifest } => {
            engine.load_model(name, manifest)?;
        }
    }
    Ok(())
}

fn write_csv(out: impl Write, rows: &RowRelation) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let schema = rows.schema();
    w.write_record((0..schema.len()).map(|i| schema.field(i).name.as_str()))?;
    for i in 0..rows.len() {
        w.write_record(rows.row(i).iter().map(ToString::to_string))?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    if let Command::Bench { suite, out } = &cli.command {
        let suites = if suite == "all" {
            Suite::ALL.to_vec()
        } else {
            vec![suite.parse::<Suite>()?]
        };
        // Fail on an unwritable path before spending minutes on the run.
        fs::File::create(out).with_context(|| format!("cannot write {}", out.display()))?;
        let opts = BenchOptions {
            seed: g.seed,
            workers: g.workers,
            work_dir: g.spill_dir.clone(),
        };
        let report = bench::run_suites(&suites, &opts)?;
        report.write(out).with_context(|| format!("cannot write {}", out.display()))?;
        let failures = report.failures();
        for f in &failures {
            eprintln!("FAIL {f}");
        }
        println!(
            "{}: {} records, {} failed verdicts, report {}",
            suite,
            report.records.len(),
            failures.len(),
            out.display()
        );
        return Ok(failures.is_empty());
    }

    let config = g.engine_config();
    for w in config.warnings() {
        eprintln!("warning: {w}");
    }
    let engine = Engine::new(config)?;
    fs::create_dir_all(&g.data_dir).with_context(|| format!("cannot create {}", g.data_dir.display()))?;
    let mut store = Store::open(&g.data_dir)?;
    store.replay(&engine)?;

    match cli.command {
        Command::Ingest { table, csv, schema, keys } => {
            let stored = g.data_dir.join("tables").join(format!("{table}.csv"));
            let entry = Entry::Ingest {
                table: table.clone(),
                csv: csv.clone(),
                schema,
                keys,
            };
            apply(&engine, &entry)?;
            fs::create_dir_all(stored.parent().expect("has parent"))?;
            fs::copy(&csv, &stored).with_context(|| format!("copying {}", csv.display()))?;
            let rows = engine.catalog().table(&table)?.row_count();
            store.append(match entry {
                Entry::Ingest { table, schema, keys, .. } => Entry::Ingest {
                    table,
                    csv: stored,
                    schema,
                    keys,
                },
                other => other,
            })?;
            println!("ingested {rows} rows into {table}");
        }
        Command::CreateModel { name, meta } => {
            let meta = match Path::new(&meta).is_file() {
                true => fs::read_to_string(&meta)?,
                false => meta,
            };
            let entry = Entry::CreateModel { name: name.clone(), meta };
            apply(&engine, &entry)?;
            store.append(entry)?;
            println!("created model {name}");
        }
        Command::LoadModel { name, manifest } => {
            let model = engine.load_model(&name, &manifest)?;
            let saved = model.save(&g.data_dir.join("models").join(&name))?;
            store.append(Entry::LoadModel {
                name: name.clone(),
                manifest: saved,
            })?;
            println!("loaded model {name}");
        }
        Command::Query { sql, explain } => {
            if explain {
                print!("{}", engine.explain(&sql)?);
            } else {
                let result = engine.run_query(&sql)?;
                write_csv(io::stdout().lock(), &result.rows)?;
                eprint!("{}", result.report.to_lines());
            }
        }
        Command::Bench { .. } => bail!("unreachable"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
