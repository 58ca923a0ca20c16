//! On-disk run store.
//!
//! ```text
//! <root>/manifest.json
//! <root>/design.json
//! <root>/data.json
//! <root>/runs/<id>/summary.json
//! <root>/runs/<id>/draws.csv
//! <root>/emulators/<output>.json
//! <root>/reports/<name>.json | <name>.csv
//! ```
//!
//! One writer at a time holds `<root>/.lock`; readers never lock.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gp::Emulator;
use crate::mcmc::{ChainResult, FeatureSummary, McmcConfig};
use crate::space::{Design, SpecSpace};
use crate::targets::{Dataset, Model};

pub const STORE_FORMAT_VERSION: u32 = 1;
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub id: String,
    pub x: Vec<f64>,
    pub created: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: Option<Model>,
    pub space: SpecSpace,
    pub created: u64,
    #[serde(default)]
    pub design: Option<String>,
    #[serde(default)]
    pub data: Option<String>,
    #[serde(default)]
    pub runs: Vec<RunEntry>,
    /// Output name to relative path.
    #[serde(default)]
    pub emulators: BTreeMap<String, String>,
    #[serde(default)]
    pub reports: Vec<String>,
}

impl Manifest {
    fn files(&self) -> Vec<String> {
        let mut v: Vec<String> = self.design.iter().chain(&self.data).cloned().collect();
        v.extend(self.runs.iter().map(|r| format!("runs/{}/summary.json", r.id)));
        v.extend(self.emulators.values().cloned());
        v.extend(self.reports.iter().cloned());
        v
    }
}

/// A stored MCMC evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub x: Vec<f64>,
    pub config: McmcConfig,
    pub summary: FeatureSummary,
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub struct RunStore {
    root: PathBuf,
    manifest: Manifest,
    lock: Option<LockGuard>,
}

fn now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Write via a temporary file and rename, so readers never see partial files.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// First 12 hex characters of the SHA-256 of the run's defining content.
pub fn run_id(x: &[f64], config: &McmcConfig, features: &[String]) -> Result<String> {
    #[derive(Serialize)]
    struct Key<'a> {
        x: &'a [f64],
        config: &'a McmcConfig,
        seed: u64,
        features: &'a [String],
    }
    let bytes = serde_json::to_vec(&Key {
        x,
        config,
        seed: config.seed,
        features,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes))[..12].to_string())
}

impl RunStore {
    /// Creates a new store at `root` (which must not already hold one) and
    /// takes the writer lock.
    pub fn create(root: impl AsRef<Path>, model: Option<Model>, space: SpecSpace) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let lock = Self::acquire(&root)?;
        if root.join("manifest.json").exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("a store already exists at {}", root.display()),
            )));
        }
        let store = RunStore {
            root,
            manifest: Manifest {
                format_version: STORE_FORMAT_VERSION,
                model,
                space,
                created: now(),
                design: None,
                data: None,
                runs: Vec::new(),
                emulators: BTreeMap::new(),
                reports: Vec::new(),
            },
            lock: Some(lock),
        };
        store.write_manifest()?;
        Ok(store)
    }

    /// Opens an existing store read-only.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest: Manifest = read_json(&root.join("manifest.json"))?;
        if manifest.format_version != STORE_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: manifest.format_version,
                expected: STORE_FORMAT_VERSION,
            });
        }
        for f in manifest.files() {
            let p = root.join(&f);
            if !p.exists() {
                return Err(Error::MissingFile(p));
            }
        }
        Ok(RunStore {
            root,
            manifest,
            lock: None,
        })
    }

    /// Opens an existing store and takes the writer lock.
    pub fn open_writer(root: impl AsRef<Path>) -> Result<Self> {
        let lock = Self::acquire(root.as_ref())?;
        let mut s = Self::open(root)?;
        s.lock = Some(lock);
        Ok(s)
    }

    fn acquire(root: &Path) -> Result<LockGuard> {
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::StoreLocked(root.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }

    fn require_writer(&self) -> Result<()> {
        if self.lock.is_none() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::PermissionDenied,
                "store opened read-only",
            )));
        }
        Ok(())
    }

    fn write_manifest(&self) -> Result<()> {
        write_json(&self.root.join("manifest.json"), &self.manifest)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn space(&self) -> &SpecSpace {
        &self.manifest.space
    }

    pub fn model(&self) -> Option<Model> {
        self.manifest.model
    }

    pub fn save_design(&mut self, design: &Design) -> Result<()> {
        self.require_writer()?;
        if design.space != self.manifest.space {
            return Err(Error::SpaceMismatch("design space differs from the store's".into()));
        }
        write_json(&self.root.join("design.json"), design)?;
        self.manifest.design = Some("design.json".into());
        self.write_manifest()
    }

    pub fn load_design(&self) -> Result<Design> {
        let rel = self
            .manifest
            .design
            .as_ref()
            .ok_or_else(|| Error::MissingFile(self.root.join("design.json")))?;
        read_json(&self.root.join(rel))
    }

    pub fn save_dataset(&mut self, data: &Dataset) -> Result<()> {
        self.require_writer()?;
        write_json(&self.root.join("data.json"), data)?;
        self.manifest.data = Some("data.json".into());
        self.write_manifest()
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let rel = self
            .manifest
            .data
            .as_ref()
            .ok_or_else(|| Error::MissingFile(self.root.join("data.json")))?;
        read_json(&self.root.join(rel))
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        let space = &self.manifest.space;
        space.check_dim(x).map_err(|e| Error::SpaceMismatch(e.to_string()))?;
        if let Err(e) = space.check(x) {
            // manual rows recorded as out of range in the design are accepted
            let allowed = self
                .load_design()
                .map(|d| d.out_of_range.iter().any(|&i| d.points[i] == x))
                .unwrap_or(false);
            if !allowed {
                return Err(Error::SpaceMismatch(e.to_string()));
            }
        }
        Ok(())
    }

    /// Stores one evaluation; identical content maps to the same id.
    pub fn save_run(&mut self, x: &[f64], config: &McmcConfig, summary: &FeatureSummary, chain: Option<&ChainResult>) -> Result<String> {
        self.require_writer()?;
        self.check_point(x)?;
        let id = run_id(x, config, &summary.names)?;
        let record = RunRecord {
            id: id.clone(),
            x: x.to_vec(),
            config: config.clone(),
            summary: summary.clone(),
        };
        let dir = self.root.join("runs").join(&id);
        write_json(&dir.join("summary.json"), &record)?;
        if let Some(c) = chain {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record((0..c.dim).map(|k| format!("p{k}")))?;
            for i in 0..c.n_kept() {
                w.serialize(c.row(i))?;
            }
            write_atomic(&dir.join("draws.csv"), &w.into_inner().map_err(|e| e.into_error())?)?;
        }
        if !self.manifest.runs.iter().any(|r| r.id == id) {
            self.manifest.runs.push(RunEntry {
                id: id.clone(),
                x: x.to_vec(),
                created: now(),
            });
            self.write_manifest()?;
        }
        Ok(id)
    }

    pub fn has_run(&self, id: &str) -> bool {
        self.manifest.runs.iter().any(|r| r.id == id)
    }

    pub fn load_run(&self, id: &str) -> Result<RunRecord> {
        read_json(&self.root.join("runs").join(id).join("summary.json"))
    }

    /// All runs in insertion order.
    pub fn load_runs(&self) -> Result<Vec<RunRecord>> {
        self.manifest.runs.iter().map(|r| self.load_run(&r.id)).collect()
    }

    pub fn export_emulator(&mut self, em: &Emulator) -> Result<PathBuf> {
        self.require_writer()?;
        if em.space() != &self.manifest.space {
            return Err(Error::SpaceMismatch(format!("emulator `{}` has a different space", em.output_name())));
        }
        let rel = format!("emulators/{}.json", em.output_name());
        let path = self.root.join(&rel);
        write_atomic(&path, (em.to_json()? + "\n").as_bytes())?;
        self.manifest.emulators.insert(em.output_name().to_string(), rel);
        self.write_manifest()?;
        Ok(path)
    }

    pub fn import_emulator(&self, output: &str) -> Result<Emulator> {
        let rel = self
            .manifest
            .emulators
            .get(output)
            .ok_or_else(|| Error::UnknownOutput(output.to_string()))?;
        let path = self.root.join(rel);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        Emulator::from_json(&fs::read_to_string(path)?)
    }

    /// Emulators in manifest (output-name) order.
    pub fn import_emulators(&self) -> Result<Vec<Emulator>> {
        self.manifest.emulators.keys().map(|k| self.import_emulator(k)).collect()
    }

    fn add_report(&mut self, rel: String, bytes: &[u8]) -> Result<PathBuf> {
        self.require_writer()?;
        let path = self.root.join(&rel);
        write_atomic(&path, bytes)?;
        if !self.manifest.reports.contains(&rel) {
            self.manifest.reports.push(rel);
            self.write_manifest()?;
        }
        Ok(path)
    }

    pub fn save_report_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.add_report(format!("reports/{name}.json"), s.as_bytes())
    }

    pub fn save_report_csv(&mut self, name: &str, csv: &str) -> Result<PathBuf> {
        self.add_report(format!("reports/{name}.csv"), csv.as_bytes())
    }

    pub fn load_report_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        read_json(&self.root.join(format!("reports/{name}.json")))
    }
}

/// Reads an annual flow series from a CSV file or a USGS RDB
/// (tab-delimited) file. The flow column is `flow_cfs` (or the USGS
/// `mean_va`); `year` (or `year_nu`) is optional. Rows are numbered from 1
/// after the header (and RDB type row).
pub fn ingest_timeseries_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let body: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .collect();
    let header = body.first().ok_or(Error::MissingColumn("flow_cfs".into()))?;
    let delimiter = if header.contains('\t') { b'\t' } else { b',' };
    let joined = body.join("\n");
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(joined.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |names: &[&str]| headers.iter().position(|h| names.contains(&h));
    let flow = col(&["flow_cfs", "mean_va"]).ok_or(Error::MissingColumn("flow_cfs".into()))?;
    let year = col(&["year", "year_nu"]);
    let is_type_cell = |s: &str| {
        let s = s.trim();
        !s.is_empty() && s[..s.len() - 1].chars().all(|c| c.is_ascii_digit()) && s.ends_with(['s', 'n', 'd', 't'])
    };
    let mut z = Vec::new();
    let mut years = Vec::new();
    let mut row = 0;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if k == 0 && delimiter == b'\t' && rec.iter().all(is_type_cell) {
            continue;
        }
        row += 1;
        let cell = rec.get(flow).ok_or_else(|| Error::Parse {
            row,
            reason: "missing flow value".into(),
        })?;
        let v: f64 = cell.parse().map_err(|_| Error::Parse {
            row,
            reason: format!("flow `{cell}` is not a number"),
        })?;
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Parse {
                row,
                reason: format!("flow must be positive, got {v}"),
            });
        }
        z.push(v);
        if let Some(yc) = year {
            let cell = rec.get(yc).unwrap_or("");
            years.push(cell.parse::<i64>().map_err(|_| Error::Parse {
                row,
                reason: format!("year `{cell}` is not an integer"),
            })?);
        }
    }
    let name = path.file_stem().map_or("series".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(z, name, "ft3/s")?.with_years(years)
}
