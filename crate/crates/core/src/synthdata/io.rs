//! On-disk layout:
//!
//! ```text
//! root/index.tsv      id  image  question  answer  qtype  scene_id
//! root/scenes.tsv     scene_id  grid  urban_label
//! root/splits.tsv     scene_id  split
//! root/checksums.tsv  path  sha256
//! root/images/NNNNN.ppm
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::image::RgbImage;

use super::scene::{Category, Scene};
use super::{DataError, Dataset, Result, Split, Triplet};

const INDEX_HEADER: &str = "id\timage\tquestion\tanswer\tqtype\tscene_id";
const SCENES_HEADER: &str = "scene_id\tgrid\turban_label";
const SPLITS_HEADER: &str = "scene_id\tsplit";
const CHECKSUMS_HEADER: &str = "path\tsha256";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        write!(out, "{b:02x}").expect("writing to a String cannot fail");
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes `data` under `root`, creating the directory tree as needed.
pub fn write_dataset(data: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root.join("images")).map_err(io_err(root))?;
    let mut checksums: Vec<(String, String)> = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        write_file(&root.join(name), bytes)?;
        checksums.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    };

    let mut index = format!("{INDEX_HEADER}\n");
    for t in &data.triplets {
        if t.question.contains(['\t', '\n']) || t.answer.contains(['\t', '\n']) {
            return Err(DataError::InvalidConfig(format!("triplet {} contains a tab or newline", t.id)));
        }
        writeln!(index, "{}\t{}\t{}\t{}\t{}\t{}", t.id, t.image, t.question, t.answer, t.qtype, t.scene_id).unwrap();
    }
    put("index.tsv", index.as_bytes())?;

    let mut scenes = format!("{SCENES_HEADER}\n");
    for s in &data.scenes {
        writeln!(scenes, "{}\t{}\t{}", s.id, s.grid_codes(), if s.urban { "urban" } else { "rural" }).unwrap();
    }
    put("scenes.tsv", scenes.as_bytes())?;

    let mut splits = format!("{SPLITS_HEADER}\n");
    for (id, split) in &data.splits {
        writeln!(splits, "{id}\t{}", split.as_str()).unwrap();
    }
    put("splits.tsv", splits.as_bytes())?;

    for (path, img) in &data.images {
        put(path, &img.to_ppm_bytes())?;
    }

    let mut sums = format!("{CHECKSUMS_HEADER}\n");
    for (path, hash) in &checksums {
        writeln!(sums, "{path}\t{hash}").unwrap();
    }
    write_file(&root.join("checksums.tsv"), sums.as_bytes())
}

struct Table<'a> {
    file: &'a str,
    rows: Vec<(usize, Vec<&'a str>)>,
}

fn parse_table<'a>(file: &'a str, text: &'a str, header: &str) -> Result<Table<'a>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == header => {}
        Some((_, h)) => {
            return Err(DataError::MalformedLine { file: file.into(), line: 1, reason: format!("header {h:?}, expected {header:?}") })
        }
        None => return Err(DataError::MalformedLine { file: file.into(), line: 1, reason: "missing header".into() }),
    }
    let width = header.split('\t').count();
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != width {
            return Err(DataError::MalformedLine {
                file: file.into(),
                line: i + 1,
                reason: format!("{} fields, expected {width}", fields.len()),
            });
        }
        rows.push((i + 1, fields));
    }
    Ok(Table { file, rows })
}

impl Table<'_> {
    fn bad(&self, line: usize, reason: impl Into<String>) -> DataError {
        DataError::MalformedLine { file: self.file.into(), line, reason: reason.into() }
    }

    fn parse<T: std::str::FromStr>(&self, line: usize, value: &str, what: &str) -> Result<T> {
        value.parse().map_err(|_| self.bad(line, format!("invalid {what} {value:?}")))
    }
}

fn read_text(root: &Path, name: &str) -> Result<String> {
    let path = root.join(name);
    fs::read_to_string(&path).map_err(io_err(&path))
}

/// Reads a dataset written by [`write_dataset`], validating every image and,
/// when `checksums.tsv` is present, every file hash.
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let index_text = read_text(root, "index.tsv")?;
    let index = parse_table("index.tsv", &index_text, INDEX_HEADER)?;
    let mut triplets = Vec::with_capacity(index.rows.len());
    for (line, f) in &index.rows {
        triplets.push(Triplet {
            id: index.parse(*line, f[0], "id")?,
            image: f[1].to_string(),
            question: f[2].to_string(),
            answer: f[3].to_string(),
            qtype: f[4].parse().map_err(|e: String| index.bad(*line, e))?,
            scene_id: index.parse(*line, f[5], "scene_id")?,
        });
    }

    let scenes_text = read_text(root, "scenes.tsv")?;
    let table = parse_table("scenes.tsv", &scenes_text, SCENES_HEADER)?;
    let mut scenes = Vec::with_capacity(table.rows.len());
    for (line, f) in &table.rows {
        let id = table.parse(*line, f[0], "scene_id")?;
        let cells = f[1]
            .chars()
            .map(|c| Category::from_code(c).ok_or_else(|| table.bad(*line, format!("unknown cell code {c:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let grid = (cells.len() as f64).sqrt().round() as usize;
        if grid * grid != cells.len() || grid == 0 {
            return Err(table.bad(*line, format!("{} cells do not form a square grid", cells.len())));
        }
        let urban = match f[2] {
            "urban" => true,
            "rural" => false,
            other => return Err(table.bad(*line, format!("invalid urban_label {other:?}"))),
        };
        scenes.push(Scene { id, grid, cells, urban });
    }

    let splits_text = read_text(root, "splits.tsv")?;
    let table = parse_table("splits.tsv", &splits_text, SPLITS_HEADER)?;
    let mut splits = BTreeMap::new();
    for (line, f) in &table.rows {
        let id: usize = table.parse(*line, f[0], "scene_id")?;
        let split: Split = f[1].parse().map_err(|e: String| table.bad(*line, e))?;
        splits.insert(id, split);
    }

    let mut raw: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut images = BTreeMap::new();
    for t in &triplets {
        if images.contains_key(&t.image) {
            continue;
        }
        let path = root.join(&t.image);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(DataError::MissingImage { id: t.id, path: t.image.clone() })
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        let img = RgbImage::from_ppm_bytes(&bytes).map_err(|source| DataError::Image { path: t.image.clone(), source })?;
        images.insert(t.image.clone(), img);
        raw.insert(t.image.clone(), bytes);
    }

    let sums_path = root.join("checksums.tsv");
    if sums_path.exists() {
        let sums_text = read_text(root, "checksums.tsv")?;
        let table = parse_table("checksums.tsv", &sums_text, CHECKSUMS_HEADER)?;
        let tables = [("index.tsv", &index_text), ("scenes.tsv", &scenes_text), ("splits.tsv", &splits_text)];
        for (_, f) in &table.rows {
            let name = f[0];
            let actual = match tables.iter().find(|(n, _)| *n == name) {
                Some((_, text)) => sha256_hex(text.as_bytes()),
                None => match raw.get(name) {
                    Some(bytes) => sha256_hex(bytes),
                    // images not referenced by any triplet are not loaded
                    None => continue,
                },
            };
            if actual != f[1] {
                return Err(DataError::ChecksumMismatch { path: name.to_string() });
            }
        }
    }

    Ok(Dataset { scenes, images, triplets, splits })
}
