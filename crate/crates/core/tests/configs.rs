use std::path::Path;

use noble::harness::{RunConfig, TaskKind};

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            if cfg.task.kind == TaskKind::CharLm {
                let t = cfg.transformer(cfg.noble_spec(), cfg.task.corpus.vocab_size);
                assert!(t.count_params(true).total() <= 2_000_000);
            }
            n += 1;
        }
    }
    assert_eq!(n, 3);
}
