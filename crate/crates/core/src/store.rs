//! Run persistence: one JSON document per run, replaced atomically, plus an
//! append-only JSON-lines event log. Also the CSV/JSON exports.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ideation::{IdeationRun, RunEvent, TreeNode, SCHEMA_VERSION};
use crate::{Error, Result};

const DOCUMENT: &str = "run.json";
const EVENTS: &str = "events.jsonl";

#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

pub fn validate_run_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(format!("invalid run id {id:?}")))
    }
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, id: &str) -> Result<PathBuf> {
        validate_run_id(id)?;
        Ok(self.root.join(id))
    }

    pub fn exists(&self, id: &str) -> bool {
        self.run_dir(id).map(|d| d.join(DOCUMENT).is_file()).unwrap_or(false)
    }

    /// Writes the document to a temporary file and renames it over the old
    /// one, so readers only ever see complete documents.
    pub fn save(&self, run: &IdeationRun) -> Result<()> {
        let dir = self.run_dir(&run.run_id)?;
        fs::create_dir_all(&dir)?;
        let tmp = dir.join(format!("{DOCUMENT}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            serde_json::to_writer(&mut f, run)?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, dir.join(DOCUMENT))?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<IdeationRun> {
        let path = self.run_dir(id)?.join(DOCUMENT);
        if !path.is_file() {
            return Err(Error::NotFound(format!("run {id}")));
        }
        let run: IdeationRun = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if run.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidData(format!(
                "run {id} has schema version {}, expected {SCHEMA_VERSION}",
                run.schema_version
            )));
        }
        Ok(run)
    }

    /// Ids of all stored runs, sorted.
    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if validate_run_id(&name).is_ok() && entry.path().join(DOCUMENT).is_file() {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn append_event(&self, id: &str, event: &RunEvent) -> Result<()> {
        let dir = self.run_dir(id)?;
        fs::create_dir_all(&dir)?;
        let mut f = OpenOptions::new().create(true).append(true).open(dir.join(EVENTS))?;
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        f.write_all(line.as_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn events(&self, id: &str) -> Result<Vec<RunEvent>> {
        let path = self.run_dir(id)?.join(EVENTS);
        if !path.is_file() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportWhat {
    PredictionMap,
    Archive,
    Tree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Document,
}

impl std::str::FromStr for ExportWhat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prediction_map" => Ok(Self::PredictionMap),
            "archive" => Ok(Self::Archive),
            "tree" => Ok(Self::Tree),
            _ => Err(Error::Validation(format!("unknown export {s}; expected prediction_map, archive or tree"))),
        }
    }
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "document" | "json" => Ok(Self::Document),
            _ => Err(Error::Validation(format!("unknown format {s}; expected csv or document"))),
        }
    }
}

/// Serialises part of a run. The prediction map defaults to the latest
/// iteration's.
pub fn export(run: &IdeationRun, what: ExportWhat, format: ExportFormat, iteration: Option<usize>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    match (what, format) {
        (ExportWhat::PredictionMap, _) => {
            let rec = match iteration {
                Some(i) => run.iteration(i)?,
                None => run.latest().ok_or_else(|| Error::NotFound("no iteration has run yet".into()))?,
            };
            match format {
                ExportFormat::Csv => rec.prediction_map.write_csv(&mut out)?,
                ExportFormat::Document => serde_json::to_writer(&mut out, &rec.prediction_map)?,
            }
        }
        (ExportWhat::Archive, ExportFormat::Csv) => write_archive_csv(run, &mut out)?,
        (ExportWhat::Archive, ExportFormat::Document) => serde_json::to_writer(&mut out, &run.archive)?,
        (ExportWhat::Tree, ExportFormat::Csv) => write_tree_csv(&run.tree, &mut out)?,
        (ExportWhat::Tree, ExportFormat::Document) => serde_json::to_writer(&mut out, &run.tree)?,
    }
    Ok(out)
}

fn write_archive_csv<W: Write>(run: &IdeationRun, out: W) -> Result<()> {
    let dim = run.archive.first().map_or(0, |a| a.genome.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["iteration", "fitness", "feature_1", "feature_2"].iter().map(|s| s.to_string()).collect();
    header.extend((0..dim).map(|i| format!("genome_{i}")));
    w.write_record(&header)?;
    for a in &run.archive {
        let mut row = vec![
            a.iteration.to_string(),
            a.fitness.to_string(),
            a.features[0].to_string(),
            a.features[1].to_string(),
        ];
        row.extend(a.genome.iter().map(|g| g.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

const TREE_COLUMNS: [&str; 6] = ["node_id", "parent_id", "iteration", "class", "class_size", "selected"];

pub fn write_tree_csv<W: Write>(tree: &[TreeNode], out: W) -> Result<()> {
    let dim = tree.first().map_or(0, |n| n.genome.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = TREE_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..dim).map(|i| format!("genome_{i}")));
    w.write_record(&header)?;
    for n in tree {
        let mut row = vec![
            n.node_id.to_string(),
            n.parent_id.map_or(String::new(), |p| p.to_string()),
            n.iteration.to_string(),
            n.class.to_string(),
            n.class_size.to_string(),
            n.selected.to_string(),
        ];
        row.extend(n.genome.iter().map(|g| g.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_tree_csv(bytes: &[u8]) -> Result<Vec<TreeNode>> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers()?.clone();
    if headers.len() < TREE_COLUMNS.len() || TREE_COLUMNS.iter().zip(headers.iter()).any(|(a, b)| *a != b) {
        return Err(Error::InvalidData("unexpected tree CSV header".into()));
    }
    let bad = |what: &str| Error::InvalidData(format!("bad {what} in tree CSV"));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize, what: &str| rec[i].parse::<usize>().map_err(|_| bad(what));
        out.push(TreeNode {
            node_id: num(0, "node_id")?,
            parent_id: if rec[1].is_empty() { None } else { Some(num(1, "parent_id")?) },
            iteration: num(2, "iteration")?,
            class: num(3, "class")?,
            class_size: num(4, "class_size")?,
            selected: rec[5].parse().map_err(|_| bad("selected"))?,
            genome: rec.iter().skip(TREE_COLUMNS.len()).map(|v| v.parse().map_err(|_| bad("genome"))).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}
