//! Shared run plumbing: config resolution, dataset access, manifests.

use std::path::{Path, PathBuf};

use dfwd_core::data;
use dfwd_core::{Dataset, DatasetKind, Result, RunConfig};

use crate::CommonArgs;

/// Everything a subcommand needs beyond its own flags.
pub struct RunContext {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub dataset_root: PathBuf,
}

/// Resolve defaults → config file → `--set` overrides → `--seed`, in that
/// order, and make sure the output directory exists.
pub fn resolve(common: &CommonArgs) -> Result<RunContext> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        cfg.set_kv(kv)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.threads != 1 {
        eprintln!(
            "note: compute runs single-threaded in this build; --threads {} has no effect",
            common.threads
        );
    }
    let dataset_root = common
        .dataset_root
        .clone()
        .or_else(|| std::env::var_os("DFWD_DATA").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    std::fs::create_dir_all(&common.out)?;
    Ok(RunContext { cfg, out: common.out.clone(), dataset_root })
}

impl RunContext {
    /// Load the configured dataset, apply split limits, and normalize if
    /// asked. Returns the dataset together with the normalization note for
    /// the manifest.
    pub fn load_dataset(&self) -> Result<(Dataset<f32>, String)> {
        let kind = DatasetKind::parse(&self.cfg.dataset)?;
        let mut ds = data::load::<f32>(kind, &self.dataset_root)?;
        if self.cfg.train_limit > 0 {
            ds.train = ds.train.take(self.cfg.train_limit);
        }
        if self.cfg.test_limit > 0 {
            ds.test = ds.test.take(self.cfg.test_limit);
        }
        let norm_note = if self.cfg.normalize {
            let norm = data::standardize(&mut ds)?;
            format!("per-channel standardized (mean {:?}, std {:?})", norm.mean, norm.std)
        } else {
            "raw [0,1] pixels".to_string()
        };
        Ok((ds, norm_note))
    }

    /// Like [`load_dataset`](Self::load_dataset) but leaves every split in
    /// raw [0,1] pixels, returning the normalizer (fitted on the raw
    /// training split) for the caller to apply after input corruption.
    pub fn load_dataset_raw(&self) -> Result<(Dataset<f32>, Option<data::Normalizer>)> {
        let kind = DatasetKind::parse(&self.cfg.dataset)?;
        let mut ds = data::load::<f32>(kind, &self.dataset_root)?;
        if self.cfg.train_limit > 0 {
            ds.train = ds.train.take(self.cfg.train_limit);
        }
        if self.cfg.test_limit > 0 {
            ds.test = ds.test.take(self.cfg.test_limit);
        }
        let norm = if self.cfg.normalize {
            Some(data::Normalizer::fit(&ds.train.images)?)
        } else {
            None
        };
        Ok((ds, norm))
    }

    /// Write `manifest.txt`: the subcommand, the full resolved config, and
    /// one line per artifact (checkpoints listed with their content hash).
    /// This is the file a rerun is reconstructed from.
    pub fn write_manifest(&self, command: &str, extra: &[(String, String)]) -> Result<PathBuf> {
        let mut text = String::new();
        text.push_str(&format!("command = {command}\n"));
        text.push_str(&format!("dataset_root = {}\n", self.dataset_root.display()));
        for (k, v) in extra {
            text.push_str(&format!("{k} = {v}\n"));
        }
        text.push_str("\n[config]\n");
        text.push_str(&self.cfg.render());
        let path = self.out.join("manifest.txt");
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

/// `path` relative to the output directory, as a manifest-friendly string.
pub fn rel_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| {
        path.display().to_string()
    })
}
