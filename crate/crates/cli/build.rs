use std::process::Command;

// Build id in `git describe` style; falls back to the crate version.
fn main() {
    println!("cargo:rerun-if-changed=../../.git/HEAD");
    println!("cargo:rerun-if-changed=../../.git/refs");
    println!("cargo:rerun-if-env-changed=MPATCH_BUILD_ID");
    let version = env!("CARGO_PKG_VERSION");
    let id = std::env::var("MPATCH_BUILD_ID").ok().or_else(|| describe(version)).unwrap_or_else(|| format!("v{version}"));
    println!("cargo:rustc-env=MPATCH_BUILD_ID={id}");
}

fn describe(version: &str) -> Option<String> {
    let run = |args: &[&str]| -> Option<String> {
        let out = Command::new("git").args(args).output().ok()?;
        out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
    };
    if let Some(d) = run(&["describe", "--tags", "--dirty"]) {
        return Some(d);
    }
    let hash = run(&["rev-parse", "--short", "HEAD"])?;
    let dirty = run(&["status", "--porcelain", "--untracked-files=no"]).is_some_and(|s| !s.is_empty());
    Some(format!("v{version}-g{hash}{}", if dirty { "-dirty" } else { "" }))
}
