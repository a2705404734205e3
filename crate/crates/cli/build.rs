use std::process::Command;

fn main() {
    let describe = std::env::var("GWWALK_GIT_DESCRIBE").ok().or_else(|| {
        let out = Command::new("git")
            .args(["describe", "--always", "--dirty", "--tags"])
            .output()
            .ok()?;
        out.status
            .success()
            .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
            .filter(|s| !s.is_empty())
    });
    println!("cargo:rustc-env=GWWALK_GIT_DESCRIBE={}", describe.unwrap_or_else(|| "unknown".into()));
    println!("cargo:rerun-if-env-changed=GWWALK_GIT_DESCRIBE");
    println!("cargo:rerun-if-changed=../../.git/HEAD");
    println!("cargo:rerun-if-changed=../../.git/index");
}
