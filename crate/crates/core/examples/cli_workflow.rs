//! Drives the command-line surface in-process: gen, pretrain, run, verify.
//! Everything is written under a temporary directory.

use iprompt::cli::run_from_args;

fn main() {
    let out = std::env::temp_dir().join(format!("iprompt-cli-{}", std::process::id()));
    let out_s = out.to_str().expect("utf-8 temp path").to_string();
    let config = out.join("small.txt");
    std::fs::create_dir_all(&out).expect("temp dir");
    std::fs::write(
        &config,
        "version = 1\n[training]\nepochs = 3\n[pretrain]\nepochs = 3\n[data]\npretrain_classes = 12\ntest_per_class = 10\n",
    )
    .expect("write config");
    let cfg = config.to_str().expect("utf-8 path").to_string();
    for cmd in ["gen", "pretrain", "run", "verify"] {
        let code = run_from_args(["iprompt", "--config", &cfg, "--out", &out_s, cmd]);
        println!("`iprompt {cmd}` exited with {code}");
    }
    let _ = std::fs::remove_dir_all(&out);
}
