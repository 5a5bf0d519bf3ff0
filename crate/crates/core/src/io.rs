//! File formats: labeled datasets, fitted models, trajectories, context
//! libraries and run outputs.
//!
//! Datasets are CSV with header `y_0,…,y_{s-1},context,provenance,delta_mmd`
//! where provenance is `gt` or `id` and `delta_mmd` is empty for `gt` rows.
//! Trajectories are CSV with header `x_0,…,x_{l-1}` plus a JSON sidecar
//! (`<file>.json`) carrying `dt` and the optional true context.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cme::{ClassifierModel, ContextId, LabeledObservation, Provenance};
use crate::error::{Error, Result};
use crate::identify::{ContextLibrary, Trajectory};
use crate::kernel::KernelSpec;

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::input(format!("cannot parse {what} value {field:?}")))
}

pub fn write_dataset_csv(path: &Path, data: &[LabeledObservation]) -> Result<()> {
    let dim = data.first().map_or(0, |o| o.y.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dim).map(|i| format!("y_{i}")).collect();
    header.extend(["context", "provenance", "delta_mmd"].map(String::from));
    w.write_record(&header)?;
    for o in data {
        if o.y.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: o.y.len(),
            });
        }
        let mut row: Vec<String> = o.y.iter().map(|v| v.to_string()).collect();
        row.push(o.context.to_string());
        match o.provenance {
            Provenance::GroundTruth => row.extend(["gt".to_string(), String::new()]),
            Provenance::Identified { delta_mmd } => {
                row.extend(["id".to_string(), delta_mmd.to_string()])
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<Vec<LabeledObservation>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let n = header.len();
    if n < 3
        || &header[n - 3] != "context"
        || &header[n - 2] != "provenance"
        || &header[n - 1] != "delta_mmd"
    {
        return Err(Error::input(
            "dataset header must end with context,provenance,delta_mmd",
        ));
    }
    let dim = n - 3;
    for (i, h) in header.iter().take(dim).enumerate() {
        if h != format!("y_{i}") {
            return Err(Error::input(format!("unexpected dataset column {h:?}")));
        }
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let y = (0..dim)
            .map(|i| parse_f64(&rec[i], "feature"))
            .collect::<Result<Vec<_>>>()?;
        let context: ContextId = rec[dim]
            .trim()
            .parse()
            .map_err(|_| Error::input(format!("bad context id {:?}", &rec[dim])))?;
        let obs = match rec[dim + 1].trim() {
            "gt" => LabeledObservation::ground_truth(y, context),
            "id" => {
                LabeledObservation::identified(y, context, parse_f64(&rec[dim + 2], "delta_mmd")?)
            }
            other => return Err(Error::input(format!("unknown provenance {other:?}"))),
        };
        out.push(obs);
    }
    Ok(out)
}

/// Serialized classifier: hyperparameters plus training data; refit on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub kernel: KernelSpec,
    pub lam: f64,
    pub gamma: f64,
    pub observations: Vec<LabeledObservation>,
}

pub fn save_model(path: &Path, model: &ClassifierModel) -> Result<()> {
    let file = ModelFile {
        kernel: *model.kernel(),
        lam: model.lam(),
        gamma: model.gamma(),
        observations: model.observations(),
    };
    write_json(path, &file)
}

pub fn load_model(path: &Path) -> Result<ClassifierModel> {
    let file: ModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    ClassifierModel::fit(&file.observations, file.kernel, file.lam, file.gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct TrajectoryMeta {
    dt: f64,
    context_truth: Option<ContextId>,
}

/// Path of the JSON sidecar next to a trajectory CSV.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    write_rows(path, "x", &traj.samples)?;
    write_json(
        &sidecar_path(path),
        &TrajectoryMeta {
            dt: traj.dt,
            context_truth: traj.context_truth,
        },
    )
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let samples = read_rows(path, "x")?;
    let meta: TrajectoryMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    Trajectory::new(samples, meta.dt, meta.context_truth)
}

fn write_rows(path: &Path, prefix: &str, rows: &[Vec<f64>]) -> Result<()> {
    let dim = rows.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..dim).map(|i| format!("{prefix}_{i}")))?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows(path: &Path, prefix: &str) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    for (i, h) in header.iter().enumerate() {
        if h != format!("{prefix}_{i}") {
            return Err(Error::input(format!("unexpected column {h:?}")));
        }
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            rec.iter().map(|f| parse_f64(f, "sample")).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LibraryEntry {
    id: ContextId,
    file: String,
    truth: Option<ContextId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LibraryManifest {
    kernel: KernelSpec,
    k_bound: f64,
    shift: usize,
    contexts: Vec<LibraryEntry>,
}

const MANIFEST: &str = "manifest.json";

/// Writes one CSV per context plus `manifest.json` into `dir`.
pub fn save_library(dir: &Path, lib: &ContextLibrary) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut contexts = Vec::new();
    for id in lib.ids() {
        let file = format!("context_{id}.csv");
        write_rows(&dir.join(&file), "x", lib.get(id).expect("listed id"))?;
        contexts.push(LibraryEntry {
            id,
            file,
            truth: lib.truth_of(id),
        });
    }
    write_json(
        &dir.join(MANIFEST),
        &LibraryManifest {
            kernel: lib.kernel,
            k_bound: lib.k_bound,
            shift: lib.shift,
            contexts,
        },
    )
}

pub fn load_library(dir: &Path) -> Result<ContextLibrary> {
    let manifest: LibraryManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let mut lib = ContextLibrary::new(manifest.kernel, manifest.shift)?;
    if !(manifest.k_bound >= lib.k_bound) {
        return Err(Error::input(
            "library kernel bound is below the kernel's maximum",
        ));
    }
    lib.k_bound = manifest.k_bound;
    for e in manifest.contexts {
        lib.insert_with_id(e.id, read_rows(&dir.join(&e.file), "x")?, e.truth)?;
    }
    Ok(lib)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Writes serializable records as CSV with a header from the field names.
pub fn write_records<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
