//! Run manifests, output paths and the shared `x,y,series` layout.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Value};
use student_rmt::ensemble::{spectrum_histogram, Spectrum};

use crate::CliError;

/// Directory used for outputs when `--out` is not given.
pub const OUT_DIR_ENV: &str = "STUDENT_RMT_OUT_DIR";

/// Everything needed to regenerate an output file.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: Value,
    pub seed: Option<u64>,
}

impl RunManifest {
    pub fn new(command: &'static str, config: &impl Serialize, seed: Option<u64>) -> Result<Self, CliError> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            config: serde_json::to_value(config).map_err(|e| CliError::Failure(e.to_string()))?,
            seed,
        })
    }

    /// Header lines (without the leading `# `) that open every output file.
    pub fn header(&self) -> Vec<String> {
        let mut lines = vec![
            format!("{} {}", self.tool, self.version),
            format!("command: {}", self.command),
            format!("config: {}", self.config),
        ];
        if let Some(seed) = self.seed {
            lines.push(format!("seed: {seed}"));
        }
        lines
    }
}

pub fn resolve_out(out: Option<PathBuf>, default_name: &str) -> PathBuf {
    out.unwrap_or_else(|| match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) => PathBuf::from(dir).join(default_name),
        None => PathBuf::from(default_name),
    })
}

/// Path next to `path` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes the JSON sidecar `<out>.run.json`: the manifest plus wall time,
/// thread count and command-specific results.
pub fn write_sidecar(path: &Path, manifest: &RunManifest, elapsed: Duration, results: Value) -> Result<PathBuf, CliError> {
    let side = sibling(path, ".run.json");
    let doc = json!({
        "manifest": manifest,
        "output": path.display().to_string(),
        "elapsed_seconds": elapsed.as_secs_f64(),
        "threads": rayon::current_num_threads(),
        "results": results,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Failure(e.to_string()))?;
    write_file(&side, text.as_bytes())?;
    Ok(side)
}

pub fn header_block(lines: &[String]) -> String {
    lines.iter().map(|l| format!("# {l}\n")).collect()
}

/// Density histogram of `pooled` on `bins` equal bins over `[0, hi]`,
/// normalized by the full sample so that mass beyond `hi` is not
/// redistributed. Returns bin centers and densities.
pub fn density_histogram(pooled: Vec<f64>, bins: usize, hi: f64) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let total = pooled.len();
    let inside = pooled.iter().filter(|&&x| x <= hi).count();
    let edges: Vec<f64> = (0..=bins).map(|i| hi * i as f64 / bins as f64).collect();
    let density = spectrum_histogram(&[Spectrum::new(pooled)?], &edges)?;
    let scale = inside as f64 / total as f64;
    let centers = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    Ok((centers, density.into_iter().map(|d| d * scale).collect()))
}

/// Value below which a fraction `p` of the sorted sample lies.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let k = ((sorted.len() as f64 * p).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

/// Rows `x,y,series` for each named series.
pub fn series_csv(header: &[String], series: &[(&str, &[f64], &[f64])]) -> String {
    let mut out = header_block(header);
    out.push_str("x,y,series\n");
    for (name, xs, ys) in series {
        for (x, y) in xs.iter().zip(ys.iter()) {
            out.push_str(&format!("{x:e},{y:e},{name}\n"));
        }
    }
    out
}
