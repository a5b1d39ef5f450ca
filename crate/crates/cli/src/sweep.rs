//! Sweep files and the comparison table they produce.
//!
//! A sweep file is a config file whose leading keys are shared by every
//! variant, followed by `[name]` sections holding each variant's own keys:
//!
//! ```text
//! train.epochs = 5
//! data.dataset = mnist_sample
//!
//! [1H/MLP/unchanged]
//!
//! [1H/NoMLP/Wqk]
//! model.mlp = false
//! model.qk_mode = collapsed
//! ```

use std::fmt::Write as _;
use std::io::{Read, Write};

use minformer::config::KeyValues;
use minformer::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub keys: KeyValues,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub shared: KeyValues,
    /// In declaration order.
    pub variants: Vec<Variant>,
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut shared = String::new();
        let mut sections: Vec<(String, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let t = line.trim();
            if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                let name = name.trim();
                if name.is_empty() {
                    return Err(Error::Config(format!("line {}: empty variant name", lineno + 1)));
                }
                if sections.iter().any(|(n, _)| n == name) {
                    return Err(Error::Config(format!("duplicate variant name '{name}'")));
                }
                sections.push((name.to_string(), String::new()));
                continue;
            }
            let body = match sections.last_mut() {
                Some((_, body)) => body,
                None => &mut shared,
            };
            body.push_str(line);
            body.push('\n');
        }
        if sections.is_empty() {
            return Err(Error::Config("sweep declares no variants".into()));
        }
        let variants = sections
            .into_iter()
            .map(|(name, body)| {
                KeyValues::parse(&body)
                    .map(|keys| Variant { name: name.clone(), keys })
                    .map_err(|e| Error::Config(format!("variant '{name}': {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(SweepSpec {
            shared: KeyValues::parse(&shared)?,
            variants,
        })
    }

    /// Shared keys with the variant's keys layered on top.
    pub fn variant_kv(&self, v: &Variant) -> KeyValues {
        let mut kv = self.shared.clone();
        kv.extend(&v.keys);
        kv
    }
}

/// Final metrics of one finished run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub name: String,
    pub heads: usize,
    pub mlp: bool,
    pub modification: String,
    pub params: usize,
    pub q: f64,
    /// `Err` holds the failure message.
    pub outcome: std::result::Result<Metrics, String>,
}

pub const TABLE_HEADER: [&str; 11] = [
    "name",
    "heads",
    "mlp",
    "modification",
    "params",
    "q",
    "train_loss",
    "val_loss",
    "train_acc",
    "val_acc",
    "status",
];

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Data(format!("table csv: {e}"))
}

pub fn write_table_csv<W: Write>(out: W, rows: &[TableRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TABLE_HEADER).map_err(csv_err)?;
    for r in rows {
        let (metrics, status) = match &r.outcome {
            Ok(m) => (
                [m.train_loss, m.val_loss, m.train_acc, m.val_acc].map(|v| v.to_string()),
                "ok".to_string(),
            ),
            Err(msg) => (Default::default(), format!("failed: {msg}")),
        };
        let mut rec = vec![
            r.name.clone(),
            r.heads.to_string(),
            if r.mlp { "yes" } else { "no" }.to_string(),
            r.modification.clone(),
            r.params.to_string(),
            r.q.to_string(),
        ];
        rec.extend(metrics);
        rec.push(status);
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

pub fn read_table_csv<R: Read>(input: R) -> Result<Vec<TableRow>> {
    let mut rd = csv::Reader::from_reader(input);
    if rd.headers().map_err(csv_err)?.iter().ne(TABLE_HEADER) {
        return Err(csv_err("unexpected header"));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| rec[i].parse::<f64>().map_err(csv_err);
        let outcome = match rec[10].strip_prefix("failed: ") {
            Some(msg) => Err(msg.to_string()),
            None => Ok(Metrics {
                train_loss: num(6)?,
                val_loss: num(7)?,
                train_acc: num(8)?,
                val_acc: num(9)?,
            }),
        };
        rows.push(TableRow {
            name: rec[0].to_string(),
            heads: rec[1].parse().map_err(csv_err)?,
            mlp: &rec[2] == "yes",
            modification: rec[3].to_string(),
            params: rec[4].parse().map_err(csv_err)?,
            q: num(5)?,
            outcome,
        });
    }
    Ok(rows)
}

/// Column-aligned text rendering; accuracies in percent.
pub fn render_table(rows: &[TableRow]) -> String {
    let head = [
        "Name", "Heads", "MLP?", "Modification", "Params", "Q", "Train loss", "Val loss", "Train acc %", "Val acc %",
    ];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut c = vec![
                r.name.clone(),
                r.heads.to_string(),
                if r.mlp { "yes" } else { "no" }.into(),
                r.modification.clone(),
                r.params.to_string(),
                format!("{:.2}", r.q),
            ];
            match &r.outcome {
                Ok(m) => c.extend([
                    format!("{:.4}", m.train_loss),
                    format!("{:.4}", m.val_loss),
                    format!("{:.2}", 100.0 * m.train_acc),
                    format!("{:.2}", 100.0 * m.val_acc),
                ]),
                Err(_) => c.extend(["failed".into(), "-".into(), "-".into(), "-".into()]),
            }
            c
        })
        .collect();
    let widths: Vec<usize> = (0..head.len())
        .map(|i| cells.iter().map(|r| r[i].len()).chain([head[i].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, row: &[String]| {
        let parts: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 || i == 3 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &head.map(String::from));
    let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    for r in &cells {
        line(&mut out, r);
    }
    out
}
