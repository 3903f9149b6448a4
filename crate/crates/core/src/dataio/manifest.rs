//! Pair manifests: tab-separated `pair_id, image_row, text_row, group_id,
//! split`, one record per line. A first line starting with `pair_id` is
//! treated as a header; lines starting with `#` are comments.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::embeddings::read_embeddings;
use crate::error::{GroveError, Result};
use crate::gplvm::{Modality, PairedEmbeddings};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = GroveError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(GroveError::InvalidConfig(format!("split: expected train, val or test, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub image_row: usize,
    pub text_row: usize,
    pub group_id: String,
    pub split: Split,
}

/// All records sharing one `group_id` (e.g. the captions of one image).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub id: String,
    pub image_row: usize,
    /// Record indices, in manifest order.
    pub records: Vec<usize>,
}

/// Record-level checks shared by the text parser and in-memory construction.
struct Validator<'a> {
    path: &'a Path,
    n_image: usize,
    n_text: usize,
    seen_ids: HashMap<String, u64>,
    group_rows: HashMap<String, usize>,
}

impl<'a> Validator<'a> {
    fn new(path: &'a Path, n_image: usize, n_text: usize) -> Self {
        Validator {
            path,
            n_image,
            n_text,
            seen_ids: HashMap::new(),
            group_rows: HashMap::new(),
        }
    }

    fn path(&self) -> std::path::PathBuf {
        self.path.to_path_buf()
    }

    fn check(&mut self, r: &PairRecord, line: u64) -> Result<()> {
        for (what, index, len) in [("image_row", r.image_row, self.n_image), ("text_row", r.text_row, self.n_text)] {
            if index >= len {
                return Err(GroveError::IndexOutOfRange {
                    path: self.path(),
                    line,
                    what,
                    index: index as u64,
                    len,
                });
            }
        }
        if r.pair_id.is_empty() {
            return Err(GroveError::MalformedRecord {
                path: self.path(),
                line,
                reason: "empty pair_id".into(),
            });
        }
        if let Some(first) = self.seen_ids.insert(r.pair_id.clone(), line) {
            return Err(GroveError::MalformedRecord {
                path: self.path(),
                line,
                reason: format!("pair_id {:?} already used on line {first}", r.pair_id),
            });
        }
        match self.group_rows.get(&r.group_id) {
            Some(&first) if first != r.image_row => Err(GroveError::InconsistentGroup {
                path: self.path(),
                line,
                group: r.group_id.clone(),
                first,
                second: r.image_row,
            }),
            Some(_) => Ok(()),
            None => {
                self.group_rows.insert(r.group_id.clone(), r.image_row);
                Ok(())
            }
        }
    }
}

/// Parses and validates manifest text against embedding row counts. Errors
/// carry the 1-based line number.
pub fn parse_manifest(text: &str, path: &Path, n_image: usize, n_text: usize) -> Result<Vec<PairRecord>> {
    let path_s = || path.to_path_buf();
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .comment(Some(b'#'))
        .quoting(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut validator = Validator::new(path, n_image, n_text);
    let mut records = Vec::new();
    for (k, row) in reader.records().enumerate() {
        let row = row.map_err(|e| GroveError::MalformedRecord {
            path: path_s(),
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if k == 0 && row.get(0) == Some("pair_id") {
            continue;
        }
        if row.len() != 5 {
            return Err(GroveError::MalformedRecord {
                path: path_s(),
                line,
                reason: format!("expected 5 tab-separated fields, found {}", row.len()),
            });
        }
        let index = |field: usize, what: &str| -> Result<usize> {
            let raw = row[field].trim();
            raw.parse().map_err(|_| GroveError::MalformedRecord {
                path: path_s(),
                line,
                reason: format!("{what} is not a row index: {raw:?}"),
            })
        };
        let image_row = index(1, "image_row")?;
        let text_row = index(2, "text_row")?;
        let label = row[4].trim();
        let split = label.parse().map_err(|_| GroveError::BadSplitLabel {
            path: path_s(),
            line,
            label: label.to_string(),
        })?;
        let record = PairRecord {
            pair_id: row[0].trim().to_string(),
            image_row,
            text_row,
            group_id: row[3].trim().to_string(),
            split,
        };
        validator.check(&record, line)?;
        records.push(record);
    }
    Ok(records)
}

pub fn format_manifest(records: &[PairRecord]) -> String {
    let mut s = String::from("pair_id\timage_row\ttext_row\tgroup_id\tsplit\n");
    for r in records {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.pair_id, r.image_row, r.text_row, r.group_id, r.split
        ));
    }
    s
}

pub fn write_manifest(records: &[PairRecord], path: &Path) -> Result<()> {
    fs::write(path, format_manifest(records)).map_err(|e| GroveError::io(path, e))
}

/// Retrieval direction: which modality supplies the queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "i2t")]
    ImageToText,
    #[serde(rename = "t2i")]
    TextToImage,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::ImageToText => "i2t",
            Direction::TextToImage => "t2i",
        }
    }

    pub fn query_modality(self) -> Modality {
        match self {
            Direction::ImageToText => Modality::Image,
            Direction::TextToImage => Modality::Text,
        }
    }

    pub fn gallery_modality(self) -> Modality {
        match self {
            Direction::ImageToText => Modality::Text,
            Direction::TextToImage => Modality::Image,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = GroveError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2t" => Ok(Direction::ImageToText),
            "t2i" => Ok(Direction::TextToImage),
            other => Err(GroveError::InvalidConfig(format!("direction: expected i2t or t2i, got {other:?}"))),
        }
    }
}

/// Rows of the query and gallery embedding matrices with, per query, the
/// gallery positions that count as a correct match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalTask {
    pub direction: Direction,
    pub query_rows: Vec<usize>,
    pub gallery_rows: Vec<usize>,
    pub truth: Vec<Vec<usize>>,
}

/// Embedding matrices plus a validated manifest.
#[derive(Debug, Clone)]
pub struct EmbeddingDataset {
    pub image: Matrix,
    pub text: Matrix,
    pub records: Vec<PairRecord>,
    pub groups: Vec<Group>,
}

impl EmbeddingDataset {
    /// Validates `records` against the matrices. Error line numbers are
    /// 1-based record positions.
    pub fn new(image: Matrix, text: Matrix, records: Vec<PairRecord>) -> Result<Self> {
        let path = Path::new("<records>");
        let mut validator = Validator::new(path, image.rows(), text.rows());
        for (i, r) in records.iter().enumerate() {
            validator.check(r, i as u64 + 1)?;
        }
        Ok(Self::from_validated(image, text, records))
    }

    fn from_validated(image: Matrix, text: Matrix, records: Vec<PairRecord>) -> Self {
        let mut groups: Vec<Group> = Vec::new();
        let mut pos: HashMap<&str, usize> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            match pos.get(r.group_id.as_str()) {
                Some(&g) => groups[g].records.push(i),
                None => {
                    pos.insert(&r.group_id, groups.len());
                    groups.push(Group {
                        id: r.group_id.clone(),
                        image_row: r.image_row,
                        records: vec![i],
                    });
                }
            }
        }
        EmbeddingDataset {
            image,
            text,
            records,
            groups,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices in `split`, manifest order.
    pub fn split_records(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    /// Image/text rows of the given records as aligned pairs.
    pub fn paired(&self, records: &[usize]) -> PairedEmbeddings {
        let img: Vec<usize> = records.iter().map(|&i| self.records[i].image_row).collect();
        let txt: Vec<usize> = records.iter().map(|&i| self.records[i].text_row).collect();
        PairedEmbeddings {
            image: self.image.select_rows(&img),
            text: self.text.select_rows(&txt),
        }
    }

    pub fn modality(&self, m: Modality) -> &Matrix {
        match m {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    /// Builds the retrieval problem over one split. Images and texts are each
    /// listed once (by row, in order of first appearance); a query's correct
    /// matches are every item it is paired with in that split.
    pub fn retrieval_task(&self, split: Split, direction: Direction) -> Result<RetrievalTask> {
        let recs = self.split_records(split);
        if recs.is_empty() {
            return Err(GroveError::EmptyDataset(format!("split {split} has no records")));
        }
        fn position(rows: &mut Vec<usize>, index: &mut HashMap<usize, usize>, row: usize) -> usize {
            *index.entry(row).or_insert_with(|| {
                rows.push(row);
                rows.len() - 1
            })
        }
        let (mut image_rows, mut image_pos) = (Vec::new(), HashMap::new());
        let (mut text_rows, mut text_pos) = (Vec::new(), HashMap::new());
        let mut links = Vec::with_capacity(recs.len());
        for &i in &recs {
            let r = &self.records[i];
            let a = position(&mut image_rows, &mut image_pos, r.image_row);
            let b = position(&mut text_rows, &mut text_pos, r.text_row);
            links.push((a, b));
        }
        let (query_rows, gallery_rows, mut truth) = match direction {
            Direction::ImageToText => {
                let mut truth = vec![Vec::new(); image_rows.len()];
                for &(a, b) in &links {
                    truth[a].push(b);
                }
                (image_rows, text_rows, truth)
            }
            Direction::TextToImage => {
                let mut truth = vec![Vec::new(); text_rows.len()];
                for &(a, b) in &links {
                    truth[b].push(a);
                }
                (text_rows, image_rows, truth)
            }
        };
        for t in &mut truth {
            t.sort_unstable();
            t.dedup();
        }
        Ok(RetrievalTask {
            direction,
            query_rows,
            gallery_rows,
            truth,
        })
    }
}

/// Reads both embedding files and the manifest, validating every index.
pub fn read_manifest(path: &Path, image_file: &Path, text_file: &Path) -> Result<EmbeddingDataset> {
    let (image, _) = read_embeddings(image_file)?;
    let (text, _) = read_embeddings(text_file)?;
    let raw = fs::read_to_string(path).map_err(|e| GroveError::io(path, e))?;
    let records = parse_manifest(&raw, path, image.rows(), text.rows())?;
    Ok(EmbeddingDataset::from_validated(image, text, records))
}
