//! Config resolution, run manifests and the training driver shared by
//! `train` and `sweep`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use samb::config::{render_train, train_config, KeyValues};
use samb::data::DomainData;
use samb::model::VisionTransformer;
use samb::tensor::checkpoint;
use samb::trainer::{MetricLog, MetricRecord, TrainConfig, Trainer};
use samb::{Error, Result};
use sha2::{Digest, Sha256};

use crate::Overrides;

pub const MANIFEST: &str = "manifest.txt";
pub const MANIFEST_HASH: &str = "manifest.sha256";
pub const DATA_SPEC: &str = "spec.txt";
pub const METRICS: &str = "metrics.csv";
pub const LAST_GOOD: &str = "last_good.ckpt";

pub fn stage_checkpoint(stage: u8) -> String {
    format!("stage{stage}.ckpt")
}

/// A training config with the dataset it runs on.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: TrainConfig,
    pub data_dir: PathBuf,
}

/// Config file, then named overrides, then `extra` pairs; `data` beats any
/// `data_dir` key.
pub fn resolve(
    config: Option<&Path>,
    data: Option<&Path>,
    overrides: &Overrides,
    extra: &[(&str, &str)],
) -> Result<Resolved> {
    let mut file = match config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::parse("", "<defaults>")?,
    };
    let mut data_dir = file.remove("data_dir").map(PathBuf::from);
    let cfg = train_config(&file, &TrainConfig::default())?;

    let mut text = String::new();
    let mut put = |k: &str, v: &dyn std::fmt::Display| writeln!(text, "{k} = {v}").unwrap();
    if let Some(v) = &overrides.scheme {
        put("scheme", v);
    }
    if let Some(v) = &overrides.mode {
        put("mode", v);
    }
    if let Some(v) = overrides.iterations_1 {
        put("iterations_1", &v);
    }
    if let Some(v) = overrides.iterations_2 {
        put("iterations_2", &v);
    }
    if let Some(v) = overrides.seed {
        put("seed", &v);
    }
    if let Some(v) = overrides.lr {
        put("lr", &v);
    }
    for (k, v) in extra {
        put(k, v);
    }
    for kv in &overrides.set {
        writeln!(text, "{kv}").unwrap();
    }
    let mut cli = KeyValues::parse(&text, "<command line>")?;
    if let Some(d) = cli.remove("data_dir") {
        data_dir = Some(PathBuf::from(d));
    }
    let config = train_config(&cli, &cfg)?;
    let data_dir = data
        .map(Path::to_path_buf)
        .or(data_dir)
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data_dir".into()))?;
    Ok(Resolved { config, data_dir })
}

/// The manifest is itself a loadable config: the resolved training keys
/// plus `data_dir`.
pub fn render_manifest(r: &Resolved) -> String {
    format!("{}data_dir = {}\n", render_train(&r.config), r.data_dir.display())
}

/// SHA-256 over a git-style blob header and the content.
pub fn content_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(config: &TrainConfig, checkpoint_path: &Path) -> Result<VisionTransformer> {
    VisionTransformer::from_checkpoint(config.model.clone(), &checkpoint::load(checkpoint_path)?)
}

#[derive(Clone, Debug)]
pub struct Summary {
    pub acc_src: Option<f64>,
    pub acc_tgt: Option<f64>,
    pub warnings: Vec<String>,
}

/// Trains into `out`: manifest first, then per-stage checkpoints and the
/// metric log. A numeric failure leaves `last_good.ckpt` and the rows
/// logged so far.
pub fn execute(r: &Resolved, out: &Path) -> Result<Summary> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = DomainData::load(&r.data_dir)?;

    let manifest = render_manifest(r);
    write(&out.join(MANIFEST), &manifest)?;
    let mut hashes = format!("{}  config\n", content_hash(render_train(&r.config).as_bytes()));
    let spec_path = r.data_dir.join(DATA_SPEC);
    if let Ok(spec) = fs::read(&spec_path) {
        writeln!(hashes, "{}  data spec", content_hash(&spec)).unwrap();
        write(&out.join(DATA_SPEC), spec)?;
    }
    write(&out.join(MANIFEST_HASH), hashes)?;

    let mut trainer = Trainer::new(r.config.clone(), data)?;
    let mut rows: Vec<MetricRecord> = Vec::new();
    let result = trainer.run(
        &mut |stage, t| checkpoint::save(&out.join(stage_checkpoint(stage)), &t.checkpoint_entries()),
        &mut |rec| rows.push(rec.clone()),
    );
    let log = MetricLog { records: rows };
    write(&out.join(METRICS), log.to_csv())?;
    match result {
        Ok(outcome) => Ok(Summary {
            acc_src: outcome.log.final_source_accuracy(),
            acc_tgt: outcome.log.final_target_accuracy(),
            warnings: outcome.warnings,
        }),
        Err(e @ Error::Numeric(_)) => {
            checkpoint::save(&out.join(LAST_GOOD), &trainer.checkpoint_entries())?;
            Err(Error::Numeric(format!(
                "{}; stopped after {} iterations, parameters saved to {}",
                e.to_string().trim_start_matches("numeric error: "),
                trainer.iteration(),
                out.join(LAST_GOOD).display()
            )))
        }
        Err(e) => Err(e),
    }
}
