//! Renders captured attention and routing traces to disk: one headerless
//! CSV plus one grayscale PGM per attention map (each row scaled so its
//! maximum lands at 255), and per-router CSVs for score heatmaps, expert
//! assignment counts, and ranked per-token picks. Floats are written with
//! `Display`, whose shortest-round-trip form re-parses to the same bits.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::pgm::{self, Gray};
use crate::error::Result;
use crate::session::{AttnTrace, RoutingTrace};

fn file_stem(scope: &str) -> String {
    scope.replace('.', "_")
}

/// Writes `<scope>_h<head>.csv` and `<scope>_h<head>.pgm` for each trace
/// (dots in the scope become underscores) and returns every path written.
pub fn emit_attention(dir: &Path, traces: &[AttnTrace]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for t in traces {
        let stem = format!("{}_h{}", file_stem(&t.scope), t.head);

        let mut csv = String::new();
        for r in 0..t.rows {
            let row = &t.weights[r * t.cols..(r + 1) * t.cols];
            for (c, v) in row.iter().enumerate() {
                if c > 0 {
                    csv.push(',');
                }
                write!(csv, "{v}").unwrap();
            }
            csv.push('\n');
        }
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, csv)?;
        written.push(csv_path);

        // each row is scaled independently so its maximum renders at 255;
        // an all-zero row stays black
        let mut pixels = vec![0u8; t.rows * t.cols];
        for r in 0..t.rows {
            let row = &t.weights[r * t.cols..(r + 1) * t.cols];
            let max = row.iter().cloned().fold(0.0_f64, f64::max);
            if max > 0.0 {
                for (c, &v) in row.iter().enumerate() {
                    pixels[r * t.cols + c] = (v / max * 255.0).round() as u8;
                }
            }
        }
        let pgm_path = dir.join(format!("{stem}.pgm"));
        pgm::write(&pgm_path, &Gray { width: t.cols, height: t.rows, pixels })?;
        written.push(pgm_path);
    }
    Ok(written)
}

/// Writes three CSVs per router site: `<scope>_heatmap.csv` (header
/// `token,e0,...`), `<scope>_counts.csv` (`expert,count`), and
/// `<scope>_picks.csv` (`token,pick0,...` in descending-score order).
pub fn emit_routing(dir: &Path, traces: &[RoutingTrace]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for t in traces {
        let stem = file_stem(&t.scope);
        let tokens = t.selected.len();

        let mut heat = String::from("token");
        for e in 0..t.experts {
            write!(heat, ",e{e}").unwrap();
        }
        heat.push('\n');
        for tok in 0..tokens {
            write!(heat, "{tok}").unwrap();
            for e in 0..t.experts {
                write!(heat, ",{}", t.scores[tok * t.experts + e]).unwrap();
            }
            heat.push('\n');
        }
        let heat_path = dir.join(format!("{stem}_heatmap.csv"));
        std::fs::write(&heat_path, heat)?;
        written.push(heat_path);

        let mut counts = vec![0usize; t.experts];
        for picks in &t.selected {
            for &e in picks {
                counts[e] += 1;
            }
        }
        let mut counts_csv = String::from("expert,count\n");
        for (e, n) in counts.iter().enumerate() {
            writeln!(counts_csv, "{e},{n}").unwrap();
        }
        let counts_path = dir.join(format!("{stem}_counts.csv"));
        std::fs::write(&counts_path, counts_csv)?;
        written.push(counts_path);

        let k = t.selected.first().map_or(0, Vec::len);
        let mut picks_csv = String::from("token");
        for rank in 0..k {
            write!(picks_csv, ",pick{rank}").unwrap();
        }
        picks_csv.push('\n');
        for (tok, picks) in t.selected.iter().enumerate() {
            write!(picks_csv, "{tok}").unwrap();
            for &e in picks {
                write!(picks_csv, ",{e}").unwrap();
            }
            picks_csv.push('\n');
        }
        let picks_path = dir.join(format!("{stem}_picks.csv"));
        std::fs::write(&picks_path, picks_csv)?;
        written.push(picks_path);
    }
    Ok(written)
}
