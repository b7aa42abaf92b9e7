//! Subcommand implementations. Each returns the text to emit; numeric
//! work is delegated to the library and output assembly stays sequential.

use std::fmt::Write as _;
use std::path::Path;

use cocycle_lab::analysis::{
    change_coordinates, dyadic_grid, loja_fit, CoordinateChange, LojaOutcome,
};
use cocycle_lab::avalanche::{multiscale_refine, MultiscaleReport};
use cocycle_lab::cocycle::determinant_function;
use cocycle_lab::deviations::{
    deviation_curve, ldt_fit_with_target, u_values, DeviationRow, LdtFit,
};
use cocycle_lab::harmonic::{
    bmo_norm, fourier_decay_profile, jn_boost_check, weak_epsilon, FourierProfile, JnReport,
};
use cocycle_lab::lyapunov::{finite_scale_spectrum, FiniteScaleSpectrum};
use cocycle_lab::torus::{diophantine_scan, DiophantineReport};
use cocycle_lab::{LabError, Sampler};
use serde::Serialize;
use serde_json::{json, Value};

use crate::options::Experiment;

/// Process exit statuses.
pub mod exit {
    pub const SUCCESS: u8 = 0;
    pub const PRECONDITION: u8 = 2;
    pub const GUARD: u8 = 3;
    pub const UNKNOWN_COMMAND: u8 = 64;
    pub const MALFORMED: u8 = 65;
}

/// A failed run: exit status plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn malformed(message: impl Into<String>) -> Self {
        Failure {
            code: exit::MALFORMED,
            message: message.into(),
        }
    }
}

impl From<LabError> for Failure {
    fn from(err: LabError) -> Self {
        let code = if err.is_malformed() {
            exit::MALFORMED
        } else if err.is_guard() {
            exit::GUARD
        } else {
            exit::PRECONDITION
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

pub type Outcome = Result<(), Failure>;

fn csv_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serializable report");
    text.push('\n');
    text
}

pub fn emit(path: Option<&Path>, text: &str) -> Outcome {
    match path {
        Some(p) => std::fs::write(p, text)
            .map_err(|e| Failure::malformed(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn spectra(exp: &Experiment) -> Result<Vec<FiniteScaleSpectrum>, LabError> {
    let sampler = exp.sampler();
    exp.ns
        .iter()
        .map(|&n| finite_scale_spectrum(exp.cocycle(), &exp.freq, n, &sampler))
        .collect()
}

pub fn le_csv(spectra: &[FiniteScaleSpectrum]) -> String {
    let mut out = String::from("n,j,L_j,stderr,samples\n");
    for s in spectra {
        for (j, (l, se)) in s.les.iter().zip(&s.std_errors).enumerate() {
            writeln!(
                out,
                "{},{},{},{},{}",
                s.n,
                j + 1,
                csv_num(*l),
                csv_num(*se),
                s.sample_count
            )
            .expect("string");
        }
    }
    out
}

pub fn le(exp: &Experiment) -> Outcome {
    emit(exp.out.as_deref(), &le_csv(&spectra(exp)?))
}

fn deviation_rows(exp: &Experiment) -> Result<Vec<DeviationRow>, LabError> {
    deviation_curve(exp.cocycle(), &exp.freq, &exp.ns, &exp.eps, &exp.sampler())
}

pub fn ldt_csv(rows: &[DeviationRow]) -> String {
    let mut out = String::from("n,epsilon,measure,samples\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.n,
            csv_num(r.epsilon),
            csv_num(r.measure),
            r.samples
        )
        .expect("string");
    }
    out
}

pub fn ldt(exp: &Experiment) -> Outcome {
    let rows = deviation_rows(exp)?;
    emit(exp.out.as_deref(), &ldt_csv(&rows))?;
    let fit = ldt_fit_with_target(&rows, exp.target)?;
    let text = to_json(&fit);
    match &exp.fit_out {
        Some(p) => emit(Some(p), &text),
        None => {
            eprint!("{text}");
            Ok(())
        }
    }
}

fn refine(exp: &Experiment) -> Result<MultiscaleReport, LabError> {
    multiscale_refine(exp.cocycle(), &exp.freq, exp.n0, exp.n1, &exp.sampler())
}

pub fn ap(exp: &Experiment) -> Outcome {
    emit(exp.out.as_deref(), &to_json(&refine(exp)?))
}

fn scan(exp: &Experiment) -> Result<DiophantineReport, LabError> {
    diophantine_scan(&exp.freq, exp.mode, exp.exponent, exp.k_max)
}

pub fn dioph(exp: &Experiment) -> Outcome {
    emit(exp.out.as_deref(), &to_json(&scan(exp)?))
}

/// Sublevel sets of `|det A|`.
fn loja_report(exp: &Experiment) -> Result<LojaOutcome, LabError> {
    let det = determinant_function(exp.cocycle());
    let grid = dyadic_grid(exp.tmin, 0);
    loja_fit(
        |p| det.eval(p).map_or(f64::NAN, f64::abs),
        &exp.sampler(),
        &grid,
    )
}

pub fn loja(exp: &Experiment) -> Outcome {
    emit(exp.out.as_deref(), &to_json(&loja_report(exp)?))
}

#[derive(Serialize)]
struct CoordReport<'a> {
    change: &'a CoordinateChange,
    #[serde(skip_serializing_if = "Option::is_none")]
    frequency: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cocycle: Option<Value>,
}

fn coord_value(exp: &Experiment) -> Result<Value, Failure> {
    let change = exp.change.as_ref().expect("validated coordinate change");
    let mut report = CoordReport {
        change,
        frequency: None,
        cocycle: None,
    };
    if let Some(a) = &exp.cocycle {
        let (b, w) = change_coordinates(a, &exp.freq, change)?;
        report.frequency = Some(w.components().to_vec());
        match &exp.cocycle_out {
            Some(p) => emit(Some(p), &b.to_json())?,
            None => {
                report.cocycle =
                    Some(serde_json::to_value(b.to_file()).expect("serializable cocycle"))
            }
        }
    }
    Ok(serde_json::to_value(&report).expect("serializable report"))
}

pub fn coord(exp: &Experiment) -> Outcome {
    emit(exp.out.as_deref(), &to_json(&coord_value(exp)?))
}

#[derive(Serialize)]
struct HarmReport {
    n: usize,
    samples: usize,
    profile: FourierProfile,
    bmo: f64,
    bmo_depth: u32,
    weak_eps0: Option<f64>,
    jn: Option<JnReport>,
}

/// Harmonic diagnostics of `u_n` on the uniform grid of `samples` points.
fn harm_report(exp: &Experiment, samples: usize) -> Result<HarmReport, LabError> {
    let n = *exp.ns.last().expect("validated scales");
    let points = Sampler::lattice(1, samples).points()?;
    let u = u_values(exp.cocycle(), &exp.freq, &points, n)?;
    let profile = fourier_decay_profile(&u, exp.k)?;
    let bmo = bmo_norm(&u, exp.depth)?;
    let weak_eps0 = weak_epsilon(&u)?;
    let jn = match weak_eps0 {
        Some(e) => Some(jn_boost_check(&u, e, e.powi(4), profile.decay_constant)?),
        None => None,
    };
    Ok(HarmReport {
        n,
        samples,
        profile,
        bmo,
        bmo_depth: exp.depth,
        weak_eps0,
        jn,
    })
}

pub fn harm(exp: &Experiment) -> Outcome {
    emit(
        exp.out.as_deref(),
        &to_json(&harm_report(exp, exp.samples)?),
    )
}

#[derive(Serialize)]
struct LdtSection {
    rows: Vec<DeviationRow>,
    fit: LdtFit,
}

fn section<T: Serialize>(
    result: Result<T, impl Into<Failure>>,
    first_failure: &mut Option<u8>,
) -> Value {
    match result {
        Ok(v) => serde_json::to_value(v).expect("serializable section"),
        Err(e) => {
            let f: Failure = e.into();
            first_failure.get_or_insert(f.code);
            json!({ "error": f.message, "exit_code": f.code })
        }
    }
}

/// Runs every analysis on one configuration; failed sections carry their
/// error and the exit status of the first failure.
pub fn report(exp: &Experiment) -> Outcome {
    let mut failed = None;
    let mut doc = serde_json::Map::new();
    doc.insert("seed".into(), json!(exp.seed));
    doc.insert("samples".into(), json!(exp.samples));
    doc.insert("frequency".into(), json!(exp.freq.components()));
    doc.insert(
        "cocycle".into(),
        serde_json::to_value(exp.cocycle().to_file()).expect("serializable cocycle"),
    );
    doc.insert("le".into(), section(spectra(exp), &mut failed));
    let ldt = deviation_rows(exp).and_then(|rows| {
        let fit = ldt_fit_with_target(&rows, exp.target)?;
        Ok(LdtSection { rows, fit })
    });
    doc.insert("ldt".into(), section(ldt, &mut failed));
    doc.insert("ap".into(), section(refine(exp), &mut failed));
    doc.insert("dioph".into(), section(scan(exp), &mut failed));
    doc.insert("loja".into(), section(loja_report(exp), &mut failed));
    if exp.cocycle().dim() == 1 {
        doc.insert(
            "harm".into(),
            section(
                harm_report(exp, crate::options::DEFAULT_HARM_SAMPLES),
                &mut failed,
            ),
        );
    }
    if exp.change.is_some() {
        doc.insert("coord".into(), section(coord_value(exp), &mut failed));
    }
    emit(exp.out.as_deref(), &to_json(&Value::Object(doc)))?;
    match failed {
        Some(code) => Err(Failure {
            code,
            message: "some report sections failed".into(),
        }),
        None => Ok(()),
    }
}
