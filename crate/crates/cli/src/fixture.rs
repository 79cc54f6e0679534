//! Writes a small synthetic dataset (PNG images, manifest, run config) for
//! smoke tests and demos.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use xplain_core::io::Manifest;
use xplain_core::synth::{synth_dataset, SynthConfig, LABELS};

use crate::{runtime, CliError};

#[derive(Clone, Debug)]
pub struct FixtureOptions {
    pub images: usize,
    pub side: usize,
    pub seed: u64,
    pub epochs: usize,
    pub cycles: usize,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        Self { images: 300, side: 32, seed: 0, epochs: 40, cycles: 4 }
    }
}

pub const FIXTURE_LAYERS: &str = "conv(8,3,1,1) relu maxpool(2) conv(16,3,1,1) relu gap dense(3) softmax";

/// Creates `dir/images/<label>/*.png`, `dir/manifest.csv` and
/// `dir/config.ini`; returns the config path.
pub fn write_fixture(dir: &Path, opts: &FixtureOptions) -> Result<PathBuf, CliError> {
    let synth = SynthConfig { side: opts.side, ..SynthConfig::default() };
    let (images, labels) = synth_dataset(opts.images, &synth, opts.seed);
    let mut manifest = Manifest::default();
    for (i, (img, &label)) in images.iter().zip(&labels).enumerate() {
        let rel = format!("images/{}/img_{i:04}.png", LABELS[label]);
        let path = dir.join(&rel);
        std::fs::create_dir_all(path.parent().expect("image paths have a directory")).map_err(runtime)?;
        let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, img.to_levels())
            .ok_or_else(|| runtime("image buffer has the wrong size"))?;
        buf.save(&path).map_err(runtime)?;
        manifest.push(&rel, LABELS[label], None).map_err(runtime)?;
    }
    let mut csv = Vec::new();
    manifest.write(&mut csv).map_err(runtime)?;
    std::fs::write(dir.join("manifest.csv"), csv).map_err(runtime)?;
    let config = dir.join("config.ini");
    std::fs::write(&config, fixture_config(opts)).map_err(runtime)?;
    Ok(config)
}

pub fn fixture_config(opts: &FixtureOptions) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# synthetic three-class fixture");
    let _ = writeln!(s, "[data]\nmanifest = manifest.csv\ntest_fraction = 0.2\nseed = {}\n", opts.seed);
    let _ = writeln!(s, "[preprocess]\nside = {}\nmax_rotation_deg = 0\n", opts.side);
    let _ = writeln!(s, "[model]\nlayers = {FIXTURE_LAYERS}\nseed = {}\n", opts.seed);
    let _ = writeln!(
        s,
        "[train]\nalpha0 = 0.5\nepochs = {}\ncycles = {}\nbatch_size = 32\nseed = {}\n",
        opts.epochs, opts.cycles, opts.seed
    );
    let _ = writeln!(s, "[select]\ntop_k = {}\n", opts.cycles.min(2));
    let _ = writeln!(s, "[ensemble]\nmethod = scpa\n");
    let _ = writeln!(s, "[explain]\nmethod = gradcam++\nlayer = last\nbeta = 0.5");
    s
}
