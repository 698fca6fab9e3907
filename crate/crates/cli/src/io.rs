use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pivsem::{Anchor, DataTable, MomentFile, MomentInput, VariableKind};

/// Read a headed CSV. `NA` and empty fields are missing.
pub fn read_csv(path: &Path) -> Result<DataTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open data file {}", path.display()))?;
    let names: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if names.is_empty() || names.iter().any(String::is_empty) {
        bail!(
            "{}: header row is missing or has an empty column name",
            path.display()
        );
    }
    let mut columns = vec![Vec::new(); names.len()];
    for (r, record) in reader.records().enumerate() {
        let record =
            record.with_context(|| format!("{}: malformed row {}", path.display(), r + 2))?;
        for (j, field) in record.iter().enumerate() {
            let v = if field.is_empty() || field == "NA" {
                f64::NAN
            } else {
                field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .with_context(|| {
                        format!(
                            "{}: row {}, column `{}`: `{field}` is not a number",
                            path.display(),
                            r + 2,
                            names[j]
                        )
                    })?
            };
            columns[j].push(v);
        }
    }
    Ok(DataTable::new(names, columns)?)
}

/// `name=ordinal,name=continuous,...`, repeatable.
pub fn parse_types(specs: &[String]) -> Result<BTreeMap<String, VariableKind>> {
    let mut out = BTreeMap::new();
    for item in specs
        .iter()
        .flat_map(|s| s.split(','))
        .map(str::trim)
        .filter(|s| !s.is_empty())
    {
        let (name, kind) = item
            .split_once('=')
            .with_context(|| format!("type declaration `{item}` must look like name=ordinal"))?;
        let kind = match kind.trim() {
            "ordinal" | "o" => VariableKind::Ordinal,
            "continuous" | "c" => VariableKind::Continuous,
            other => bail!("unknown variable type `{other}` for `{name}`"),
        };
        out.insert(name.trim().to_string(), kind);
    }
    Ok(out)
}

pub fn ordinal_names(types: &BTreeMap<String, VariableKind>) -> Vec<String> {
    types
        .iter()
        .filter(|(_, k)| **k == VariableKind::Ordinal)
        .map(|(n, _)| n.clone())
        .collect()
}

/// `var=t1:12,t3:16`, repeatable. Thresholds are numbered from 1.
pub fn parse_anchors(specs: &[String]) -> Result<BTreeMap<String, Anchor>> {
    let mut out = BTreeMap::new();
    for spec in specs {
        let (name, rest) = spec
            .split_once('=')
            .with_context(|| format!("anchor `{spec}` must look like var=t1:12,t3:16"))?;
        let mut fixed = Vec::new();
        for part in rest.split(',').map(str::trim) {
            let (t, v) = part
                .split_once(':')
                .with_context(|| format!("anchor `{part}` must look like t1:12"))?;
            let k: usize = t
                .trim()
                .trim_start_matches('t')
                .parse()
                .ok()
                .filter(|&k| k >= 1)
                .with_context(|| format!("bad threshold `{t}` in anchor for `{name}`"))?;
            let v: f64 = v
                .trim()
                .parse()
                .with_context(|| format!("bad anchor value `{v}` for `{name}`"))?;
            fixed.push((k - 1, v));
        }
        fixed.sort_by_key(|f| f.0);
        let anchor = match fixed[..] {
            [(index, value)] => Anchor::MeanOnly { index, value },
            [(a, va), (b, vb)] if a != b => Anchor::MeanVariance { a, b, va, vb },
            _ => bail!("`{name}`: give one or two distinct thresholds"),
        };
        if out.insert(name.trim().to_string(), anchor).is_some() {
            bail!("anchors for `{name}` given twice");
        }
    }
    Ok(out)
}

pub fn read_moments(path: &Path) -> Result<MomentInput> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read moment file {}", path.display()))?;
    let file: MomentFile = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a moment file", path.display()))?;
    Ok(MomentInput::from_file(&file)?)
}

pub fn write_moments(path: &Path, input: &MomentInput) -> Result<()> {
    let text = serde_json::to_string_pretty(&input.to_file())?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_text(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {what} {}", path.display()))
}
