use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Report files held in memory until the whole command has succeeded.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, String)>,
}

impl Outputs {
    pub fn add(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    /// Adds `name.csv` together with an aligned `name.txt` rendering.
    pub fn add_table(&mut self, name: &str, csv: String) {
        let text = aligned(&csv);
        self.add(&format!("{name}.csv"), csv);
        self.add(&format!("{name}.txt"), text);
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        self.files
            .iter()
            .map(|(name, contents)| {
                let path = dir.join(name);
                std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
                Ok(path)
            })
            .collect()
    }
}

/// Pads CSV cells into columns: the first left-aligned, the rest right-aligned.
/// Numeric cells are shown with four decimals.
pub fn aligned(csv: &str) -> String {
    let rows: Vec<Vec<String>> = csv
        .lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(r, line)| {
            line.split(',')
                .map(|cell| match cell.parse::<f64>() {
                    Ok(v) if r > 0 && (cell.contains('.') || cell.contains('e')) => {
                        let text = format!("{v:.4}");
                        if text.trim_start_matches('-').bytes().all(|b| b == b'0' || b == b'.') {
                            text.trim_start_matches('-').to_string()
                        } else {
                            text
                        }
                    }
                    _ => cell.to_string(),
                })
                .collect()
        })
        .collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(line, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}
