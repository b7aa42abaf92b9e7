//! Experiment options: command-line flags merged over an optional JSON
//! config, resolved defaults and up-front validation.

use std::path::{Path, PathBuf};

use clap::Args;
use cocycle_lab::analysis::CoordinateChange;
use cocycle_lab::cocycle::presets;
use cocycle_lab::torus::{DcMode, SampleScheme, DEFAULT_ETA};
use cocycle_lab::{FourierCocycle, Frequency, LabError, Sampler};
use serde::{Deserialize, Serialize};

/// Flags shared by every subcommand. A `--config` JSON file may supply any
/// of them under the same names; flags given on the command line win.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Options {
    /// Cocycle preset: const-diag[:d], rotation[:d], diag-cos[:d], schrodinger:L[,E].
    #[arg(long)]
    pub preset: Option<String>,
    /// Cocycle JSON file.
    #[arg(long)]
    pub cocycle: Option<PathBuf>,
    /// Frequency preset (golden, sqrt2, cbrt2-pair) or comma-separated components.
    #[arg(long)]
    pub freq: Option<String>,
    /// Scales, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Number of torus samples.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Sampling scheme: random or lattice.
    #[arg(long)]
    pub scheme: Option<String>,
    /// Seed of the ChaCha sampler.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON config with the same keys as the flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Worker threads; overrides COCYCLE_LAB_THREADS.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Deviation thresholds, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Measure level at which the deviation size is read off.
    #[arg(long)]
    pub target: Option<f64>,
    /// Fit record output for `ldt`; standard error when absent.
    #[arg(long = "fit-out")]
    #[serde(rename = "fit-out")]
    pub fit_out: Option<PathBuf>,
    /// Initial scale of the multiscale refinement.
    #[arg(long)]
    pub n0: Option<usize>,
    /// Target scale of the multiscale refinement.
    #[arg(long)]
    pub n1: Option<usize>,
    /// Lattice box size for the Diophantine scan.
    #[arg(long = "Kmax")]
    #[serde(rename = "Kmax")]
    pub k_max: Option<u64>,
    /// Diophantine mode: standard or strong.
    #[arg(long)]
    pub mode: Option<String>,
    /// Exponent excess for the standard Diophantine scan.
    #[arg(long)]
    pub delta0: Option<f64>,
    /// Exponent for the strong Diophantine scan.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Smallest sublevel threshold exponent: t runs over 2^tmin..=1.
    #[arg(long, allow_hyphen_values = true)]
    pub tmin: Option<i32>,
    /// Dimension of the coordinate matrix M_d.
    #[arg(long)]
    pub d: Option<usize>,
    /// Integer matrix as JSON rows, replacing M_d.
    #[arg(long)]
    pub matrix: Option<String>,
    /// Output file for the changed cocycle.
    #[arg(long = "cocycle-out")]
    #[serde(rename = "cocycle-out")]
    pub cocycle_out: Option<PathBuf>,
    /// Largest Fourier mode for `harm`.
    #[arg(long = "K")]
    #[serde(rename = "K")]
    pub k: Option<usize>,
    /// Dyadic depth of the BMO norm.
    #[arg(long)]
    pub depth: Option<u32>,
}

macro_rules! merge_fields {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f; } )*
    };
}

impl Options {
    /// Fills every unset flag from `other`.
    pub fn merge(mut self, other: Options) -> Options {
        merge_fields!(self, other; preset, cocycle, freq, n, samples, scheme, seed, out, threads, eps, target,
            fit_out, n0, n1, k_max, mode, delta0, eta, tmin, d, matrix, cocycle_out, k, depth);
        self
    }

    /// Reads `--config` if present and merges it under the flags.
    pub fn with_config(self) -> Result<Options, Diagnostic> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Diagnostic::malformed(format!("cannot read config {}: {e}", path.display()))
        })?;
        let file: Options = serde_json::from_str(&text)
            .map_err(|e| Diagnostic::malformed(format!("config {}: {e}", path.display())))?;
        Ok(self.merge(file))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    /// Missing or unparsable input.
    Malformed,
    /// Well-formed input violating a mathematical precondition.
    Precondition,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub kind: Severity,
    pub message: String,
}

impl Diagnostic {
    pub fn malformed(message: impl Into<String>) -> Self {
        Diagnostic {
            kind: Severity::Malformed,
            message: message.into(),
        }
    }

    pub fn precondition(message: impl Into<String>) -> Self {
        Diagnostic {
            kind: Severity::Precondition,
            message: message.into(),
        }
    }

    pub fn from_lab(err: &LabError) -> Self {
        if err.is_malformed() {
            Diagnostic::malformed(err.to_string())
        } else {
            Diagnostic::precondition(err.to_string())
        }
    }
}

pub const COMMANDS: [&str; 8] = [
    "le", "ldt", "ap", "dioph", "loja", "coord", "harm", "report",
];

pub const DEFAULT_SAMPLES: usize = 1000;
pub const DEFAULT_HARM_SAMPLES: usize = 4096;
pub const DEFAULT_LDT_SAMPLES: usize = 10_000;
pub const DEFAULT_DELTA0: f64 = 0.5;

/// Options with defaults applied and inputs parsed.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cocycle: Option<FourierCocycle>,
    pub freq: Frequency,
    pub ns: Vec<usize>,
    pub samples: usize,
    pub scheme: SampleScheme,
    pub seed: u64,
    pub eps: Vec<f64>,
    pub target: f64,
    pub n0: usize,
    pub n1: usize,
    pub k_max: u64,
    pub mode: DcMode,
    pub exponent: f64,
    pub tmin: i32,
    pub change: Option<CoordinateChange>,
    pub k: usize,
    pub depth: u32,
    pub out: Option<PathBuf>,
    pub fit_out: Option<PathBuf>,
    pub cocycle_out: Option<PathBuf>,
}

impl Experiment {
    pub fn cocycle(&self) -> &FourierCocycle {
        self.cocycle.as_ref().expect("validated cocycle source")
    }

    pub fn sampler(&self) -> Sampler {
        let d = self
            .cocycle
            .as_ref()
            .map_or(self.freq.dim(), FourierCocycle::dim);
        Sampler {
            d,
            n: self.samples,
            scheme: self.scheme,
            seed: self.seed,
        }
    }
}

fn needs_cocycle(command: &str) -> bool {
    !matches!(command, "dioph" | "coord")
}

fn check_writable(path: &Option<PathBuf>, flag: &str, diags: &mut Vec<Diagnostic>) {
    if let Some(p) = path {
        let parent = p
            .parent()
            .filter(|q| !q.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        if !parent.is_dir() {
            diags.push(Diagnostic::malformed(format!(
                "--{flag}: directory {} does not exist",
                parent.display()
            )));
        }
    }
}

/// Resolves the options for `command`, collecting every problem found.
pub fn resolve(command: &str, opts: &Options) -> Result<Experiment, Vec<Diagnostic>> {
    let mut diags = Vec::new();
    if !COMMANDS.contains(&command) {
        return Err(vec![Diagnostic::malformed(format!(
            "unknown command {command:?}"
        ))]);
    }

    let cocycle = match (&opts.preset, &opts.cocycle) {
        (Some(_), Some(_)) => {
            diags.push(Diagnostic::malformed(
                "give either --preset or --cocycle, not both",
            ));
            None
        }
        (Some(p), None) => presets::parse(p)
            .map_err(|e| diags.push(Diagnostic::from_lab(&e)))
            .ok(),
        (None, Some(path)) => match std::fs::read_to_string(path) {
            Ok(text) => FourierCocycle::from_json(&text)
                .map_err(|e| diags.push(Diagnostic::from_lab(&e)))
                .ok(),
            Err(e) => {
                diags.push(Diagnostic::malformed(format!(
                    "cannot read cocycle {}: {e}",
                    path.display()
                )));
                None
            }
        },
        (None, None) => {
            if needs_cocycle(command) {
                diags.push(Diagnostic::malformed(
                    "missing cocycle source (--preset or --cocycle)",
                ));
            }
            None
        }
    };

    let freq = match &opts.freq {
        Some(s) => s
            .parse::<Frequency>()
            .map_err(|e| diags.push(Diagnostic::from_lab(&e)))
            .ok(),
        None => Some(Frequency::golden()),
    };
    if let (Some(a), Some(w)) = (&cocycle, &freq) {
        if a.dim() != w.dim() {
            diags.push(Diagnostic::malformed(format!(
                "cocycle lives on T^{} but the frequency has {} components",
                a.dim(),
                w.dim()
            )));
        }
    }

    let default_ns: &[usize] = if command == "ldt" {
        &[50, 100, 200, 400]
    } else {
        &[50, 100, 200]
    };
    let ns = opts.n.clone().unwrap_or_else(|| default_ns.to_vec());
    if ns.is_empty() || ns.contains(&0) {
        diags.push(Diagnostic::precondition(
            "scales --n must be a nonempty list of positive integers",
        ));
    }
    let default_samples = match command {
        "harm" => DEFAULT_HARM_SAMPLES,
        "ldt" => DEFAULT_LDT_SAMPLES,
        _ => DEFAULT_SAMPLES,
    };
    let samples = opts.samples.unwrap_or(default_samples);
    if samples == 0 {
        diags.push(Diagnostic::precondition("--samples must be at least 1"));
    }
    let scheme = match opts
        .scheme
        .as_deref()
        .unwrap_or("random")
        .parse::<SampleScheme>()
    {
        Ok(s) => s,
        Err(e) => {
            diags.push(Diagnostic::from_lab(&e));
            SampleScheme::Random
        }
    };
    if opts.threads == Some(0) {
        diags.push(Diagnostic::precondition("--threads must be at least 1"));
    }

    let eps = opts.eps.clone().unwrap_or_else(|| vec![0.05]);
    if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0)) {
        diags.push(Diagnostic::precondition(
            "thresholds --eps must be positive",
        ));
    }
    let target = opts
        .target
        .unwrap_or(cocycle_lab::deviations::DEFAULT_FIT_TARGET);
    if !(target > 0.0 && target < 1.0) {
        diags.push(Diagnostic::precondition("--target must lie in (0, 1)"));
    }

    let n0 = opts.n0.unwrap_or(20);
    let n1 = opts.n1.unwrap_or(400);
    if matches!(command, "ap" | "report") {
        if n0 == 0 {
            diags.push(Diagnostic::precondition("--n0 must be at least 1"));
        } else if n1 < 5 * n0 {
            diags.push(Diagnostic::precondition(format!(
                "block partition needs n1 >= 5*n0 (n0 = {n0}, n1 = {n1})"
            )));
        }
        if cocycle.as_ref().is_some_and(|a| a.size() < 2) {
            diags.push(Diagnostic::precondition(
                "multiscale refinement needs matrices of size >= 2",
            ));
        }
    }

    let k_max = opts.k_max.unwrap_or(1000);
    if k_max == 0 {
        diags.push(Diagnostic::precondition("--Kmax must be at least 1"));
    }
    let mode = match opts.mode.as_deref().unwrap_or("standard") {
        "standard" => DcMode::Standard,
        "strong" => DcMode::Strong,
        other => {
            diags.push(Diagnostic::malformed(format!(
                "unknown Diophantine mode {other:?}"
            )));
            DcMode::Standard
        }
    };
    let exponent = match mode {
        DcMode::Standard => opts.delta0.unwrap_or(DEFAULT_DELTA0),
        DcMode::Strong => opts.eta.unwrap_or(DEFAULT_ETA),
    };
    if matches!(command, "dioph" | "report") {
        if !(exponent >= 0.0) || (mode == DcMode::Strong && exponent <= 0.0) {
            diags.push(Diagnostic::precondition(
                "Diophantine exponent must be positive",
            ));
        }
        if let Some(w) = &freq {
            if mode == DcMode::Strong && w.dim() > 1 {
                diags.push(Diagnostic::precondition(
                    "strong Diophantine mode needs d = 1",
                ));
            }
        }
    }

    let tmin = opts.tmin.unwrap_or(-20);
    if tmin >= 0 {
        diags.push(Diagnostic::precondition("--tmin must be negative"));
    }

    let mut change = None;
    if command == "coord" || (command == "report" && cocycle.as_ref().is_some_and(|a| a.dim() >= 2))
    {
        let explicit_freq = opts.freq.as_ref().and(freq.as_ref());
        let d = opts
            .d
            .or(cocycle.as_ref().map(FourierCocycle::dim))
            .or(explicit_freq.map(Frequency::dim));
        let built = match (&opts.matrix, d) {
            (Some(text), _) => match serde_json::from_str::<Vec<Vec<i64>>>(text) {
                Ok(m) => CoordinateChange::from_matrix(m).map_err(|e| Diagnostic::from_lab(&e)),
                Err(e) => Err(Diagnostic::malformed(format!("--matrix: {e}"))),
            },
            (None, Some(d)) if d >= 2 => {
                cocycle_lab::analysis::coordinate_matrix(d).map_err(|e| Diagnostic::from_lab(&e))
            }
            (None, Some(d)) => Err(Diagnostic::precondition(format!(
                "coordinate changes need d >= 2 (got {d})"
            ))),
            (None, None) => Err(Diagnostic::malformed(
                "coord needs --d, --matrix or a cocycle source",
            )),
        };
        match built {
            Ok(c) => {
                if let Some(a) = &cocycle {
                    if a.dim() != c.d {
                        diags.push(Diagnostic::malformed(format!(
                            "matrix is {}x{} but the cocycle lives on T^{}",
                            c.d,
                            c.d,
                            a.dim()
                        )));
                    }
                }
                change = Some(c);
            }
            Err(d) => diags.push(d),
        }
    }

    let k = opts.k.unwrap_or(64);
    let depth = opts.depth.unwrap_or(10);
    if matches!(command, "harm" | "report") {
        let harm_active = command == "harm" || cocycle.as_ref().is_some_and(|a| a.dim() == 1);
        if command == "harm" && cocycle.as_ref().is_some_and(|a| a.dim() != 1) {
            diags.push(Diagnostic::precondition(
                "harmonic diagnostics need a cocycle on T^1",
            ));
        }
        if harm_active {
            let harm_samples = if command == "harm" {
                samples
            } else {
                DEFAULT_HARM_SAMPLES
            };
            if k == 0 || harm_samples < 4 * k {
                diags.push(Diagnostic::precondition(format!(
                    "Fourier profile needs samples >= 4K and K >= 1 (samples = {harm_samples}, K = {k})"
                )));
            }
            if depth >= usize::BITS || harm_samples < 1usize << depth {
                diags.push(Diagnostic::precondition(format!(
                    "BMO depth {depth} needs at least 2^{depth} samples (got {harm_samples})"
                )));
            }
        }
    }

    check_writable(&opts.out, "out", &mut diags);
    check_writable(&opts.fit_out, "fit-out", &mut diags);
    check_writable(&opts.cocycle_out, "cocycle-out", &mut diags);

    if !diags.is_empty() {
        return Err(diags);
    }
    Ok(Experiment {
        cocycle,
        freq: freq.expect("checked above"),
        ns,
        samples,
        scheme,
        seed: opts.seed.unwrap_or(0),
        eps,
        target,
        n0,
        n1,
        k_max,
        mode,
        exponent,
        tmin,
        change,
        k,
        depth,
        out: opts.out.clone(),
        fit_out: opts.fit_out.clone(),
        cocycle_out: opts.cocycle_out.clone(),
    })
}
