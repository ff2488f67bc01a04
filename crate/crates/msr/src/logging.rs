use std::io::Write;

/// Installs the stderr logger; `MSR_LOG` picks the level (default `info`).
pub fn init() {
    let level = std::env::var("MSR_LOG").unwrap_or_else(|_| "info".into());
    let _ = env_logger::Builder::new()
        .parse_filters(&level)
        .format(|buf, record| writeln!(buf, "[{}] {}", record.level().as_str().to_lowercase(), record.args()))
        .target(env_logger::Target::Stderr)
        .try_init();
}
