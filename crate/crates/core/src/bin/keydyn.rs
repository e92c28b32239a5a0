use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use keydyn::anomaly::ThresholdMode;
use keydyn::engine::{Engine, EngineConfig, SystemClock};
use keydyn::harness::{self, HttpTarget, InProcessTarget, ReplayTarget, TypistModel};
use keydyn::mfa::MemoryOutbox;
use keydyn::service::{self, ServiceConfig};
use keydyn::session::{self, Dimension, LoginSession, SessionContext};
use keydyn::store::{HashParams, ProfileStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Result<T> = std::result::Result<T, Box<dyn std::error::Error + Send + Sync>>;

#[derive(Parser)]
#[command(
    name = "keydyn",
    version,
    about = "Keystroke-dynamics login risk scoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enroll a user from session files or a synthetic typist.
    Train(TrainArgs),
    /// Replay a labeled scenario and report FPR/FNR/GAR.
    Replay(ReplayArgs),
    /// Write elbow and scatter CSVs for a trained user.
    Export(ExportArgs),
    /// Generate synthetic session files or scenarios.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args, Clone)]
struct EngineArgs {
    #[arg(long, env = "KEYDYN_STORE", default_value = "keydyn-store.json")]
    store: PathBuf,
    #[arg(long, env = "KEYDYN_MIN_HISTORY", default_value_t = 10)]
    min_history: usize,
    #[arg(long, env = "KEYDYN_RADIUS_FACTOR", default_value_t = 2.0)]
    radius_factor: f64,
    /// radius-factor or mean-three-sigma
    #[arg(long, env = "KEYDYN_THRESHOLD_MODE", default_value = "radius-factor")]
    threshold_mode: ThresholdMode,
    #[arg(long, env = "KEYDYN_OTP_TTL_MS", default_value_t = keydyn::mfa::DEFAULT_TTL_MS)]
    otp_ttl_ms: i64,
    /// Seeds every random choice; omit for OS randomness in secrets and salts.
    #[arg(long, env = "KEYDYN_SEED")]
    seed: Option<u64>,
    /// Clamp attempts into the training ranges instead of extrapolating.
    #[arg(long, env = "KEYDYN_CLAMP_ATTEMPTS")]
    clamp_attempts: bool,
    /// Cheap password hashing, for demos and tests only.
    #[arg(long)]
    light_hash: bool,
}

impl EngineArgs {
    fn config(&self) -> EngineConfig {
        let mut c = EngineConfig {
            otp_ttl_ms: self.otp_ttl_ms,
            seed: self.seed,
            hash_params: if self.light_hash {
                HashParams::light()
            } else {
                HashParams::default()
            },
            ..Default::default()
        };
        c.anomaly.min_history = self.min_history;
        c.anomaly.radius_factor = self.radius_factor;
        c.anomaly.threshold_mode = self.threshold_mode;
        c.anomaly.clamp_attempts = self.clamp_attempts;
        c
    }
}

#[derive(Args)]
struct TypistArgs {
    /// fast, moderate or slow
    #[arg(long, default_value = "moderate")]
    model: String,
    /// JSON typist model; overrides --model.
    #[arg(long)]
    model_file: Option<PathBuf>,
}

impl TypistArgs {
    fn load(&self) -> Result<TypistModel> {
        let model = match &self.model_file {
            Some(p) => serde_json::from_slice(&fs::read(p)?)?,
            None => TypistModel::preset(&self.model)
                .ok_or_else(|| format!("unknown model {:?}", self.model))?,
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    user: String,
    #[arg(long)]
    password: String,
    /// Session files or directories of them; synthetic sessions when empty.
    sessions: Vec<PathBuf>,
    #[command(flatten)]
    typist: TypistArgs,
    /// Number of synthetic sessions.
    #[arg(short, default_value_t = 20)]
    n: usize,
    #[arg(long)]
    geo: Option<String>,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    scenario: PathBuf,
    /// Replay against a running service instead of in process.
    #[arg(long)]
    url: Option<String>,
    /// Outbox file of the running service.
    #[arg(long, default_value = "outbox.log")]
    outbox: PathBuf,
    /// Write the per-attempt log as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Save learning from the replay back to the store.
    #[arg(long)]
    persist: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    user: String,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Session file plotted as the attempt.
    #[arg(long)]
    attempt: Option<PathBuf>,
    #[arg(long, default_value = "session_time")]
    x: String,
    #[arg(long, default_value = "typing_rate")]
    y: String,
}

#[derive(Subcommand)]
enum GenCommand {
    /// Session files for one typist.
    Sessions {
        #[arg(long)]
        user: String,
        #[arg(long)]
        password: String,
        #[command(flatten)]
        typist: TypistArgs,
        #[arg(short, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value = "sessions")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        geo: Option<String>,
    },
    /// A stolen-credential scenario: the owner's attempts then imposters'.
    Scenario {
        #[arg(long)]
        user: String,
        #[arg(long)]
        password: String,
        #[command(flatten)]
        typist: TypistArgs,
        #[arg(long, default_value_t = 10)]
        legit: usize,
        #[arg(long, default_value_t = 10)]
        imposters: usize,
        /// Imposter shift in per-key standard deviations.
        #[arg(long, default_value_t = 3.0)]
        sigmas: f64,
        #[arg(long, default_value = "scenario.json")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        geo: Option<String>,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, env = "KEYDYN_PORT", default_value_t = service::DEFAULT_PORT)]
    port: u16,
    #[arg(long, env = "KEYDYN_HOST", default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = "KEYDYN_OUTBOX", default_value = "outbox.log")]
    outbox: PathBuf,
    /// Prefix of out-of-band approval links; defaults to the listen address.
    #[arg(long, env = "KEYDYN_BASE_URL")]
    base_url: Option<String>,
}

fn context(geo: &Option<String>) -> SessionContext {
    SessionContext {
        geo: geo.clone().unwrap_or_default(),
        ..Default::default()
    }
}

fn read_sessions(paths: &[PathBuf]) -> Result<Vec<LoginSession>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            inner.sort();
            files.extend(inner);
        } else {
            files.push(p.clone());
        }
    }
    files
        .iter()
        .map(|f| {
            session::parse_session(&fs::read(f)?)
                .map_err(|e| format!("{}: {e}", f.display()).into())
        })
        .collect()
}

fn memory_engine(args: &EngineArgs, store: ProfileStore, outbox: &MemoryOutbox) -> Engine {
    Engine::new(
        store,
        args.config(),
        Arc::new(outbox.clone()),
        Arc::new(SystemClock),
    )
}

fn train(a: TrainArgs) -> Result<()> {
    let sessions = if a.sessions.is_empty() {
        let model = a.typist.load()?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.engine.seed.unwrap_or(model.seed));
        let mut s = harness::training_sessions(&model, &a.user, &a.password, a.n, &mut rng)?;
        s.iter_mut().for_each(|s| s.context = context(&a.geo));
        s
    } else {
        read_sessions(&a.sessions)?
    };
    let store = ProfileStore::load(&a.engine.store)?;
    let engine =
        memory_engine(&a.engine, store, &MemoryOutbox::new()).with_store_path(&a.engine.store);
    let trained = engine.enroll(
        &a.user,
        &a.password,
        &sessions,
        a.geo.as_ref().map(|_| context(&a.geo)),
    )?;
    println!("trained {} on {trained} sessions", a.user);
    let export = engine.cluster_export(&a.user)?;
    print!("{}", export.elbow.to_csv());
    println!("chosen k = {}", export.k);
    Ok(())
}

fn replay(a: ReplayArgs) -> Result<()> {
    let attempts = harness::read_scenario(&fs::read(&a.scenario)?)?;
    let (report, logs) = match &a.url {
        Some(url) => harness::replay(
            &mut HttpTarget::new(url.clone(), a.outbox.clone()),
            &attempts,
        )?,
        None => {
            let store = ProfileStore::load(&a.engine.store)?;
            let outbox = MemoryOutbox::new();
            let mut engine = memory_engine(&a.engine, store, &outbox);
            if a.persist {
                engine = engine.with_store_path(&a.engine.store);
            }
            let mut target = InProcessTarget {
                engine: Arc::new(engine),
                outbox,
            };
            harness::replay(&mut target as &mut dyn ReplayTarget, &attempts)?
        }
    };
    if let Some(path) = &a.log {
        let lines: Vec<String> = logs
            .iter()
            .map(serde_json::to_string)
            .collect::<std::result::Result<_, _>>()?;
        fs::write(path, lines.join("\n") + "\n")?;
    }
    for log in logs.iter().filter(|l| !l.granted) {
        eprintln!(
            "attempt {} ({:?}) denied: degree {:?}, {}",
            log.index,
            log.truth,
            log.degree,
            log.reason.as_deref().unwrap_or("-")
        );
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn dimension(name: &str) -> Result<Dimension> {
    serde_json::from_value(serde_json::Value::String(name.into()))
        .map_err(|_| format!("unknown dimension {name:?}").into())
}

fn export(a: ExportArgs) -> Result<()> {
    let store = ProfileStore::load(&a.engine.store)?;
    let profile = store
        .get(&a.user)
        .ok_or_else(|| format!("unknown user {:?}", a.user))?;
    let attempt = a
        .attempt
        .as_deref()
        .map(|p| read_sessions(&[p.to_path_buf()]))
        .transpose()?;
    let attempt = attempt.as_ref().and_then(|v| v.first());
    let export = harness::export_profile(
        profile,
        &a.engine.config().anomaly,
        attempt,
        dimension(&a.x)?,
        dimension(&a.y)?,
    )?;
    fs::create_dir_all(&a.out_dir)?;
    let write = |name: &str, body: &str| -> Result<()> {
        let path = a.out_dir.join(name);
        fs::write(&path, body)?;
        println!("wrote {}", path.display());
        Ok(())
    };
    write("elbow.csv", &export.elbow.to_csv())?;
    write("scatter.csv", &export.scatter_csv)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn gen(cmd: GenCommand) -> Result<()> {
    match cmd {
        GenCommand::Sessions {
            user,
            password,
            typist,
            n,
            out_dir,
            seed,
            geo,
        } => {
            let model = typist.load()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (i, mut s) in harness::training_sessions(&model, &user, &password, n, &mut rng)?
                .into_iter()
                .enumerate()
            {
                s.context = context(&geo);
                write_json(&out_dir.join(format!("{user}-{i:03}.json")), &s)?;
            }
            println!("wrote {n} sessions to {}", out_dir.display());
        }
        GenCommand::Scenario {
            user,
            password,
            typist,
            legit,
            imposters,
            sigmas,
            out,
            seed,
            geo,
        } => {
            let model = typist.load()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let imposter_models = harness::imposter_models(&model, imposters, sigmas, seed);
            let mut attempts = harness::stolen_credential_scenario(
                &model,
                &imposter_models,
                &user,
                &password,
                legit,
                &mut rng,
            )?;
            attempts
                .iter_mut()
                .for_each(|a| a.session.context = context(&geo));
            write_json(&out, &attempts)?;
            println!("wrote {} attempts to {}", attempts.len(), out.display());
        }
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut engine = a.engine.config();
    engine.base_url = a
        .base_url
        .clone()
        .unwrap_or_else(|| format!("http://{}:{}", a.host, a.port));
    let config = ServiceConfig {
        host: a.host,
        port: a.port,
        store_path: a.engine.store.clone(),
        outbox_path: a.outbox,
        engine,
    };
    tokio::runtime::Runtime::new()?.block_on(service::serve(config))
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Replay(a) => replay(a),
        Command::Export(a) => export(a),
        Command::Gen(g) => gen(g),
        Command::Serve(a) => serve(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
