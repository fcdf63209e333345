use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use cowrite::agents::PresetCatalog;
use cowrite::clock::SystemClock;
use cowrite::config::Config;
use cowrite::gateway::{Gateway, MockScript};
use cowrite::hub::{Hub, HubOptions, JobMode};
use cowrite_server::live::{LiveClient, LiveSettings};
use cowrite_server::{router, AppState};
use tracing_subscriber::EnvFilter;

fn env(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

fn fail(msg: String) -> ! {
    eprintln!("cowrite-server: {msg}");
    std::process::exit(2)
}

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt().with_env_filter(EnvFilter::from_default_env()).init();

    let mut config = match env("COWRITE_CONFIG") {
        Some(path) => Config::load(&PathBuf::from(path)).unwrap_or_else(|e| fail(e)),
        None => Config::default(),
    };
    for assignment in std::env::args().skip(1).filter_map(|a| a.strip_prefix("--set=").map(str::to_owned)) {
        config.set(&assignment).unwrap_or_else(|e| fail(e));
    }
    let catalog = match env("PRESETS_FILE") {
        Some(path) => PresetCatalog::load(&PathBuf::from(path)).unwrap_or_else(|e| fail(e)),
        None => PresetCatalog::builtin(),
    };

    let gateway = if let Some(path) = env("MOCK_SCRIPT") {
        let script = MockScript::load(&PathBuf::from(&path)).unwrap_or_else(|e| fail(e.to_string()));
        tracing::info!(script = %path, "using scripted model");
        Gateway::mock(script)
    } else if let Some(settings) = LiveSettings::from_env() {
        let client = LiveClient::new(settings).unwrap_or_else(|e| fail(e));
        let model = client.model().to_owned();
        Gateway::new(Arc::new(client), model, config.gateway)
    } else {
        fail("set MODEL_ENDPOINT and MODEL_NAME, or MOCK_SCRIPT".into())
    };

    let options = HubOptions {
        data_dir: Some(PathBuf::from(env("DATA_DIR").unwrap_or_else(|| "data".into()))),
        config,
        catalog: Arc::new(catalog),
        seed: env("JOIN_SEED").and_then(|s| s.parse().ok()).unwrap_or(0),
        job_mode: JobMode::Background,
    };
    let hub = Hub::open(options, Arc::new(gateway), Arc::new(SystemClock)).unwrap_or_else(|e| fail(e.to_string()));

    let ticker = Arc::clone(&hub);
    tokio::spawn(async move {
        let mut every = tokio::time::interval(Duration::from_secs(1));
        loop {
            every.tick().await;
            let h = Arc::clone(&ticker);
            let _ = tokio::task::spawn_blocking(move || h.tick_all()).await;
        }
    });

    let state = AppState { hub: Arc::clone(&hub), admin_token: env("ADMIN_TOKEN") };
    let bind = env("BIND").unwrap_or_else(|| "127.0.0.1:8080".into());
    let listener = tokio::net::TcpListener::bind(&bind).await.unwrap_or_else(|e| fail(format!("{bind}: {e}")));
    tracing::info!(%bind, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .unwrap_or_else(|e| fail(e.to_string()));
    for doc in hub.doc_ids() {
        if let Err(e) = hub.flush(&doc) {
            tracing::error!(doc = %doc, error = %e, "final checkpoint failed");
        }
    }
}
