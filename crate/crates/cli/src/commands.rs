use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use samb::attention::MessagePassingMode;
use samb::config::{render_spec, synthetic_spec, KeyValues};
use samb::data::{write_splits, Dataset, DomainData, Split, SyntheticSpec};
use samb::trainer::{evaluate, pseudo_labels, Scheme};
use samb::{Error, Result};

use crate::run::{self, execute, load_model, resolve, DATA_SPEC};
use crate::{Axis, Overrides, SplitArg};

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn gen_data(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec = match spec {
        Some(p) => synthetic_spec(&KeyValues::load(p)?, &SyntheticSpec::default())?,
        None => SyntheticSpec::default(),
    };
    create_dir(out)?;
    for path in write_splits(&spec, out)? {
        println!("wrote {}", path.display());
    }
    write(&out.join(DATA_SPEC), render_spec(&spec))
}

fn report(summary: &run::Summary) {
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    let fmt = |a: Option<f64>| a.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!("acc_src={} acc_tgt={}", fmt(summary.acc_src), fmt(summary.acc_tgt));
}

pub fn train(config: Option<&Path>, data: Option<&Path>, out: &Path, overrides: &Overrides) -> Result<()> {
    let r = resolve(config, data, overrides, &[])?;
    report(&execute(&r, out)?);
    Ok(())
}

pub fn eval(config: &Path, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let r = resolve(Some(config), data, &Overrides::default(), &[])?;
    let model = load_model(&r.config, checkpoint)?;
    let data = DomainData::load(&r.data_dir)?;
    println!(
        "acc_src={:.4} acc_tgt={:.4}",
        evaluate(&model, &data.source_eval)?,
        evaluate(&model, &data.target_eval)?
    );
    Ok(())
}

/// The config key an axis varies, and what `all` expands to.
fn axis_key(axis: Axis) -> (&'static str, Vec<String>) {
    match axis {
        Axis::Tokens => ("num_group_tokens", ["1", "2", "4", "8"].map(String::from).to_vec()),
        Axis::Scheme => ("scheme", Scheme::ALL.iter().map(|s| s.name().to_string()).collect()),
        Axis::Mode => (
            "mode",
            MessagePassingMode::ALL.iter().map(|m| m.name().to_string()).collect(),
        ),
    }
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::Tokens => "tokens",
        Axis::Scheme => "scheme",
        Axis::Mode => "mode",
    }
}

pub const SWEEP_HEADER: &str = "axis,value,status,acc_src,acc_tgt,message";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
    } else {
        s.to_string()
    }
}

pub fn sweep(
    axis: Axis,
    values: &[String],
    config: Option<&Path>,
    data: Option<&Path>,
    out: &Path,
    overrides: &Overrides,
) -> Result<()> {
    let (key, all) = axis_key(axis);
    let values: Vec<String> = if values.iter().any(|v| v == "all") {
        all
    } else {
        values.iter().map(|v| v.trim().to_string()).collect()
    };
    create_dir(out)?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    let mut failures = 0;
    for value in &values {
        let dir = out.join(format!("{}-{}", axis_name(axis), value));
        let result = resolve(config, data, overrides, &[(key, value)]).and_then(|r| execute(&r, &dir));
        let fmt = |a: Option<f64>| a.map_or(String::new(), |x| x.to_string());
        match result {
            Ok(s) => {
                writeln!(
                    csv,
                    "{},{},ok,{},{},",
                    axis_name(axis),
                    csv_field(value),
                    fmt(s.acc_src),
                    fmt(s.acc_tgt)
                )
                .unwrap();
                println!(
                    "{} {value}: acc_src={} acc_tgt={}",
                    axis_name(axis),
                    fmt(s.acc_src),
                    fmt(s.acc_tgt)
                );
            }
            Err(e) => {
                failures += 1;
                eprintln!("{} {value}: {e}", axis_name(axis));
                writeln!(
                    csv,
                    "{},{},failed,,,{}",
                    axis_name(axis),
                    csv_field(value),
                    csv_field(&e.to_string())
                )
                .unwrap();
            }
        }
        // rows land on disk as they finish
        write(&out.join("sweep.csv"), &csv)?;
    }
    if failures > 0 {
        eprintln!("{failures} of {} runs failed; see sweep.csv", values.len());
    }
    Ok(())
}

pub fn pseudo_label(config: &Path, checkpoint: &Path, data: Option<&Path>, out: &Path) -> Result<()> {
    let r = resolve(Some(config), data, &Overrides::default(), &[])?;
    let model = load_model(&r.config, checkpoint)?;
    let data = DomainData::load(&r.data_dir)?;
    let table = pseudo_labels(&model, data.target_train.dataset(), r.config.metric)?;
    write(out, table.to_csv())?;
    let mut counts = vec![0usize; table.classes];
    for &y in &table.refined {
        counts[y] += 1;
    }
    println!("refined label counts {counts:?}");
    if !table.empty_classes.is_empty() {
        eprintln!("warning: empty classes {:?}", table.empty_classes);
    }
    Ok(())
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::SourceTrain => Split::SourceTrain,
        SplitArg::SourceEval => Split::SourceEval,
        SplitArg::TargetTrain => Split::TargetTrain,
        SplitArg::TargetEval => Split::TargetEval,
    }
}

const EXPORT_BATCH: usize = 64;

pub fn export_attn(
    config: &Path,
    checkpoint: &Path,
    data: Option<&Path>,
    out: &Path,
    split: SplitArg,
    limit: Option<usize>,
) -> Result<()> {
    let r = resolve(Some(config), data, &Overrides::default(), &[])?;
    let mode = r.config.model.mode;
    if !mode.is_dynamic() {
        let dynamic: Vec<&str> = MessagePassingMode::ALL
            .iter()
            .filter(|m| m.is_dynamic())
            .map(|m| m.name())
            .collect();
        return Err(Error::Contract(format!(
            "mode {mode} has no group assignments; only dynamic modes ({}) assign tokens to groups",
            dynamic.join(", ")
        )));
    }
    if r.config.model.masked_depth == 0 {
        return Err(Error::Contract(
            "masked_depth is 0, so no block assigns tokens to groups".into(),
        ));
    }
    let model = load_model(&r.config, checkpoint)?;
    let path = r.data_dir.join(split_of(split).file_name());
    let ds = Dataset::load(&path)?;
    let count = limit.map_or(ds.len(), |l| l.min(ds.len()));
    let depth = r.config.model.depth;
    let mut per_layer: Vec<Option<Vec<usize>>> = vec![None; depth];
    let ids: Vec<u32> = (0..count as u32).collect();
    for chunk in ids.chunks(EXPORT_BATCH) {
        for (l, a) in model.eval_assignments(&ds.gather(chunk))?.into_iter().enumerate() {
            if let Some(hard) = a {
                per_layer[l].get_or_insert_with(Vec::new).extend(hard);
            }
        }
    }
    create_dir(out)?;
    let g = r.config.model.grid();
    for (l, hard) in per_layer.iter().enumerate() {
        let Some(hard) = hard else { continue };
        let mut csv = String::from("image,row,col,group\n");
        let mut txt = String::new();
        for img in 0..count {
            writeln!(txt, "image {img}").unwrap();
            for row in 0..g {
                let cells: Vec<String> = (0..g)
                    .map(|col| {
                        let grp = hard[img * g * g + row * g + col];
                        writeln!(csv, "{img},{row},{col},{grp}").unwrap();
                        grp.to_string()
                    })
                    .collect();
                writeln!(txt, "{}", cells.join(" ")).unwrap();
            }
            txt.push('\n');
        }
        write(&out.join(format!("layer{l}.csv")), csv)?;
        write(&out.join(format!("layer{l}.txt")), txt)?;
        println!("layer {l}: {count} images, {g}x{g} grid");
    }
    Ok(())
}
