//! `cargo run -p xray-xplain-cli --example make_fixture -- <dir> [images] [seed]`

use std::path::PathBuf;

use xray_xplain_cli::fixture::{write_fixture, FixtureOptions};

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "fixture".into()));
    let mut opts = FixtureOptions::default();
    if let Some(n) = args.next() {
        opts.images = n.parse().expect("image count");
    }
    if let Some(s) = args.next() {
        opts.seed = s.parse().expect("seed");
    }
    std::fs::create_dir_all(&dir).expect("create fixture directory");
    match write_fixture(&dir, &opts) {
        Ok(cfg) => println!("{}", cfg.display()),
        Err(e) => {
            eprintln!("make_fixture: {e}");
            std::process::exit(2);
        }
    }
}
