mod common;

use common::config_path;
use masters::config::{load_config, ARTIFACT_ROOT_ENV};

// Kept in its own test binary: it mutates the process environment.
#[test]
fn environment_sets_the_artifact_root_and_explicit_overrides_win() {
    unsafe { std::env::set_var(ARTIFACT_ROOT_ENV, "/tmp/from-env") };
    let c = load_config(&config_path("smoke.toml"), &[]).unwrap();
    assert_eq!(c.paths.root.to_str(), Some("/tmp/from-env"));
    let c = load_config(&config_path("smoke.toml"), &["paths.root=\"/tmp/explicit\"".to_string()]).unwrap();
    assert_eq!(c.paths.root.to_str(), Some("/tmp/explicit"));
    unsafe { std::env::remove_var(ARTIFACT_ROOT_ENV) };
}
