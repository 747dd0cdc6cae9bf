//! Library-side CLI invocation: runs a small stage from an inline config and prints the manifest summary.

use nashflex::cli::config::CommandKind;
use nashflex::cli::{run, Invocation};

fn main() {
    let out = std::env::temp_dir().join("nashflex_cli_run");
    let config = r#"{"grid": {"resolution": 96}, "stage": {"lambda": 80, "tau": 1.5}, "export": {"mesh": false}}"#;
    let inv = Invocation { config_text: Some(config.into()), out: Some(out.clone()), seed: Some(1), ..Invocation::new(CommandKind::Stage) };
    let res = run(&inv);
    println!("exit {} -> {}", res.exit_code, out.display());
    if let Some(m) = res.manifest {
        println!("config sha256 {}", m.config_sha256);
        for p in &m.preconditions {
            println!("  [{:?}] {} measured {:.3e} bound {:.3e}", p.outcome, p.name, p.measured, p.bound);
        }
        for a in &m.artifacts {
            println!("  {} ({} bytes)", a.path, a.bytes);
        }
    }
    // A misspelled key is a config error and creates nothing.
    let bad = Invocation { config_text: Some(r#"{"stage": {"lamda": 80}}"#.into()), out: Some(out.join("bad")), ..Invocation::new(CommandKind::Stage) };
    let res = run(&bad);
    println!("misspelled key: exit {}, {}", res.exit_code, res.message.unwrap_or_default());
}
