use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use kmpadapt::eval::run_corpus;
use kmpadapt::fixture::{self, FixtureConfig};
use kmpadapt::gmm::{build_reference_distribution, LearnConfig};
use kmpadapt::io::{
    load_corpus, load_demonstrations, load_environment, save_json, summarize_prediction, write_demonstration,
    write_file, ModelFile, PlotData, SdfSlice,
};
use kmpadapt::kmp::predict_mean;
use kmpadapt::llm::{Backend, HttpBackend, MockBackend, API_KEY_VAR};
use kmpadapt::registry::REPULSION_TOOL;
use kmpadapt::session::{run_turn, SessionConfig, SessionState};
use kmpadapt::tools::Sdf;
use kmpadapt::trajectory::EnvironmentModel;

use crate::args::{AdaptArgs, BackendArgs, Command, EvalArgs, FixtureArgs, LearnArgs, LearnOptions, LlmKind, ServeArgs};
use crate::service::{self, AppState};
use crate::CliError;

/// Rules used by the mock backend when `--rules` is not given.
pub const BUNDLED_RULES: &str = include_str!("../../../data/mock_rules.json");

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Learn(a) => learn(&a),
        Command::Adapt(a) => adapt(&a),
        Command::Eval(a) => eval(&a),
        Command::Serve(a) => serve(&a),
        Command::Fixture(a) => write_fixture(&a),
    }
}

pub fn learn_config(o: &LearnOptions) -> Result<LearnConfig, CliError> {
    if o.components == 0 || o.grid < 2 || o.horizon < 2 {
        return Err(CliError::input("--components must be positive, --grid and --horizon at least 2"));
    }
    Ok(LearnConfig {
        components: o.components,
        reference_points: o.grid,
        resample_points: o.horizon,
        seed: o.seed,
        ..LearnConfig::default()
    })
}

pub fn backend(args: &BackendArgs) -> Result<Arc<dyn Backend>, CliError> {
    match args.llm {
        LlmKind::Mock => {
            let mock = match &args.rules {
                Some(path) => MockBackend::load(path),
                None => MockBackend::from_json(BUNDLED_RULES),
            };
            Ok(Arc::new(mock.map_err(|e| CliError::input(e.to_string()))?))
        }
        LlmKind::Http => {
            if !(args.timeout > 0.0) {
                return Err(CliError::input("--timeout must be positive"));
            }
            let key = std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty());
            let http = HttpBackend::new(&args.base_url, &args.model_name, Duration::from_secs_f64(args.timeout), key)
                .map_err(|e| CliError::input(e.to_string()))?;
            Ok(Arc::new(http))
        }
    }
}

pub fn session_config(args: &BackendArgs) -> Result<SessionConfig, CliError> {
    let Some(path) = &args.config else { return Ok(SessionConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn learn(a: &LearnArgs) -> Result<(), CliError> {
    let config = learn_config(&a.learn)?;
    let loaded = load_demonstrations(&a.demos)?;
    let (checksums, demos): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
    let model = build_reference_distribution(&demos, &config).map_err(|e| CliError::runtime(e.to_string()))?;
    ModelFile::from_learned(&model, &config, checksums).save(&a.out)?;
    println!(
        "learned {} demonstration(s): K={} N={} H={} log-likelihood={:.6} duration={:.3} s",
        demos.len(),
        config.components,
        model.reference.len(),
        config.resample_points,
        model.gmm.final_log_likelihood(),
        model.reference.profile().total_duration()
    );
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn load_session(model: &Path, env: EnvironmentModel, args: &BackendArgs) -> Result<(ModelFile, SessionState), CliError> {
    let file = ModelFile::load(model)?;
    let reference = file.reference()?;
    let state = SessionState::new(reference, env, session_config(args)?).map_err(|e| CliError::input(e.to_string()))?;
    Ok((file, state))
}

fn adapt(a: &AdaptArgs) -> Result<(), CliError> {
    let env = load_environment(&a.env)?;
    let (file, state) = load_session(&a.model, env, &a.backend)?;
    let backend = backend(&a.backend)?;
    let trace_path = a.trace.clone().unwrap_or_else(|| with_suffix(&a.out, ".trace.json"));
    let plot_path = a.plot.clone().unwrap_or_else(|| with_suffix(&a.out, ".plot.json"));
    let (next, outcome) =
        run_turn(&state, &a.instruction, backend.as_ref()).map_err(|e| CliError::input(e.to_string()))?;
    save_json(&trace_path, &next.trace)?;
    println!("{}", outcome.feedback);
    if !outcome.ok {
        return Err(CliError::runtime("adaptation failed; see the trace for details"));
    }
    file.with_reference(&next.reference).save(&a.out)?;
    let obstacles = next
        .trace
        .events
        .last()
        .into_iter()
        .flat_map(|e| e.applied())
        .filter(|c| c.call.name == REPULSION_TOOL)
        .filter_map(|c| {
            let sdf: Sdf = serde_json::from_value(c.resolved.get("obstacle")?.clone()).ok()?;
            let label = c.resolved.get("label").and_then(|l| l.as_str()).unwrap_or("obstacle").to_string();
            Some(SdfSlice::new(&label, &sdf, 0.3, 60))
        })
        .collect();
    let summary = |s: &SessionState| {
        let full = predict_mean(&s.reference, s.reference.execution_grid())?;
        summarize_prediction(&s.reference, &full, usize::MAX)
    };
    let plot = PlotData {
        before: summary(&state).map_err(|e| CliError::runtime(e.to_string()))?,
        after: summary(&next).map_err(|e| CliError::runtime(e.to_string()))?,
        obstacles,
    };
    save_json(&plot_path, &plot)?;
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    if a.runs == 0 {
        return Err(CliError::input("--runs must be at least 1"));
    }
    let fallback = a.env.as_deref().map(load_environment).transpose()?;
    let cases = load_corpus(&a.corpus, fallback.as_ref())?;
    let env = fallback.or_else(|| cases.first().map(|c| c.1.clone())).unwrap_or_default();
    let (_, pristine) = load_session(&a.model, env, &a.backend)?;
    let backend = backend(&a.backend)?;
    let report = run_corpus(&pristine, &cases, a.runs, backend.as_ref());
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::runtime(format!("{}: {e}", a.out_dir.display())))?;
    save_json(&a.out_dir.join("report.json"), &report)?;
    let table = report.render_table();
    write_file(&a.out_dir.join("report.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let env = load_environment(&a.env)?;
    let (_, pristine) = load_session(&a.model, env, &a.backend)?;
    // Built outside the runtime: the blocking HTTP client must not be
    // created or dropped on an async worker.
    let backend = backend(&a.backend)?;
    let app = AppState::new(pristine, backend.clone()).map_err(|e| CliError::runtime(e.to_string()))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::runtime(e.to_string()))?;
    let result = runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .map_err(|e| CliError::input(format!("cannot bind {}:{}: {e}", a.host, a.port)))?;
        let addr = listener.local_addr().map_err(|e| CliError::runtime(e.to_string()))?;
        eprintln!("listening on http://{addr}");
        service::serve(listener, Arc::new(app), async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::runtime(e.to_string()))
    });
    drop(runtime);
    drop(backend);
    result
}

fn write_fixture(a: &FixtureArgs) -> Result<(), CliError> {
    let learn = learn_config(&a.learn)?;
    if a.demos == 0 {
        return Err(CliError::input("--demos must be positive"));
    }
    let cfg = FixtureConfig { demos: a.demos, seed: a.fixture_seed, ..FixtureConfig::default() };
    let demo_dir = a.out.join("demos");
    fs::create_dir_all(&demo_dir).map_err(|e| CliError::runtime(format!("{}: {e}", demo_dir.display())))?;
    for (i, demo) in fixture::demonstrations(&cfg).iter().enumerate() {
        write_demonstration(&demo_dir.join(format!("demo_{i:02}.csv")), demo)?;
    }
    // learn from the files as written so the environment matches what
    // `learn` produces from them
    let (checksums, demos): (Vec<_>, Vec<_>) = load_demonstrations(&demo_dir)?.into_iter().unzip();
    let model = build_reference_distribution(&demos, &learn).map_err(|e| CliError::runtime(e.to_string()))?;
    let env = fixture::environment(&model).map_err(|e| CliError::runtime(e.to_string()))?;
    save_json(&a.out.join("bearing_ring_env.json"), &env)?;
    if let Some(path) = &a.model {
        ModelFile::from_learned(&model, &learn, checksums).save(path)?;
    }
    println!("wrote {} demonstration(s) and the environment to {}", demos.len(), a.out.display());
    Ok(())
}
