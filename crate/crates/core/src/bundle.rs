//! Dataset bundle: a directory holding `manifest.txt`, `patches.bin` and an
//! optional `labels.csv`.
//!
//! `patches.bin` is `count × height × width` little-endian `f32` in row-major
//! order. The manifest is UTF-8 `key = value` lines.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::patch::{AirwayLabel, Patch};

pub const MANIFEST: &str = "manifest.txt";
pub const PATCHES: &str = "patches.bin";
pub const LABELS: &str = "labels.csv";
pub const LABEL_HEADER: [&str; 9] = [
    "id", "R_A", "R_B", "W_A", "W_B", "C_x", "C_y", "theta", "has_adjacent",
];

/// Ordered `key = value` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Data(format!("manifest missing key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Data(format!("manifest key `{key}` has bad value `{raw}`")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Data(format!("manifest line {}: expected `key = value`", lineno + 1))
            })?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// In-memory bundle contents.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub manifest: Manifest,
    pub spacing_mm: f64,
    pub patches: Vec<Array2<f32>>,
    pub labels: Option<Vec<AirwayLabel>>,
}

impl Bundle {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch(&self, i: usize) -> Patch {
        Patch {
            pixels: self.patches[i].clone(),
            spacing_mm: self.spacing_mm,
            label: self.labels.as_ref().map(|l| l[i]),
        }
    }
}

pub fn write_f32_le(path: &Path, images: &[&Array2<f32>]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for img in images {
        for v in img.iter() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_f32_le(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expected * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Write patches (all the same size and spacing) to `dir`. Labels are written
/// when every patch carries one; a mix of labelled and unlabelled patches is rejected.
pub fn write_bundle(dir: &Path, patches: &[Patch], extra: &[(&str, String)]) -> Result<()> {
    let first = patches
        .first()
        .ok_or_else(|| Error::Argument("cannot write an empty bundle".into()))?;
    let (h, w) = first.pixels.dim();
    for p in patches {
        if p.pixels.dim() != (h, w) || p.spacing_mm != first.spacing_mm {
            return Err(Error::Shape("bundle patches must share size and spacing".into()));
        }
    }
    let labelled = patches.iter().filter(|p| p.label.is_some()).count();
    if labelled != 0 && labelled != patches.len() {
        return Err(Error::Data("either all or no patches must carry labels".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut m = Manifest::new();
    m.set("count", patches.len());
    m.set("height", h);
    m.set("width", w);
    m.set("pixel_spacing_mm", first.spacing_mm);
    m.set("dtype", "float32-le");
    m.set("order", "row-major");
    if labelled > 0 {
        m.set("label_units", "mm,radians");
    }
    for (k, v) in extra {
        m.set(k, v);
    }
    m.write(&dir.join(MANIFEST))?;

    let imgs: Vec<&Array2<f32>> = patches.iter().map(|p| &p.pixels).collect();
    write_f32_le(&dir.join(PATCHES), &imgs)?;

    if labelled > 0 {
        let labels: Vec<AirwayLabel> = patches.iter().map(|p| p.label.unwrap()).collect();
        write_labels_csv(&dir.join(LABELS), &labels, &[])?;
    }
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let manifest = Manifest::read(&dir.join(MANIFEST))?;
    let count: usize = manifest.require("count")?;
    let h: usize = manifest.require("height")?;
    let w: usize = manifest.require("width")?;
    let spacing_mm: f64 = manifest.require("pixel_spacing_mm")?;
    if let Some(dt) = manifest.get("dtype") {
        if dt != "float32-le" {
            return Err(Error::Data(format!("unsupported dtype `{dt}`")));
        }
    }
    if let Some(order) = manifest.get("order") {
        if order != "row-major" {
            return Err(Error::Data(format!("unsupported order `{order}`")));
        }
    }
    let raw = read_f32_le(&dir.join(PATCHES), count * h * w)?;
    let patches = raw
        .chunks_exact(h * w)
        .map(|c| Array2::from_shape_vec((h, w), c.to_vec()).expect("chunk size"))
        .collect::<Vec<_>>();
    let labels_path = dir.join(LABELS);
    let labels = if labels_path.exists() {
        let (ids, labels) = read_labels_csv(&labels_path)?;
        if labels.len() != count {
            return Err(Error::Data(format!(
                "labels.csv has {} rows but manifest declares {count}",
                labels.len()
            )));
        }
        if ids.iter().enumerate().any(|(i, &id)| id != i) {
            return Err(Error::Data("labels.csv ids must be 0..count in order".into()));
        }
        Some(labels)
    } else {
        None
    };
    Ok(Bundle {
        manifest,
        spacing_mm,
        patches,
        labels,
    })
}

/// Label rows `id,R_A,…,has_adjacent` followed by optional extra columns.
pub fn write_labels_csv(
    path: &Path,
    labels: &[AirwayLabel],
    extra: &[(&str, Vec<String>)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header: Vec<&str> = LABEL_HEADER.to_vec();
    header.extend(extra.iter().map(|(k, _)| *k));
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for (i, l) in labels.iter().enumerate() {
        let mut row = vec![
            i.to_string(),
            l.r_a.to_string(),
            l.r_b.to_string(),
            l.w_a.to_string(),
            l.w_b.to_string(),
            l.c_x.to_string(),
            l.c_y.to_string(),
            l.theta.to_string(),
            (l.has_adjacent as u8).to_string(),
        ];
        row.extend(extra.iter().map(|(_, col)| col[i].clone()));
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels_csv(path: &Path) -> Result<(Vec<usize>, Vec<AirwayLabel>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    for (i, name) in LABEL_HEADER.iter().enumerate() {
        if headers.get(i) != Some(name) {
            return Err(Error::Data(format!(
                "{}: expected column {i} to be `{name}`",
                path.display()
            )));
        }
    }
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: bad value in column {i}", path.display())))
        };
        let adj = match rec.get(8).map(str::trim) {
            Some("1") | Some("true") => true,
            Some("0") | Some("false") => false,
            other => {
                return Err(Error::Data(format!(
                    "{}: bad has_adjacent value {other:?}",
                    path.display()
                )))
            }
        };
        ids.push(f(0)? as usize);
        labels.push(AirwayLabel {
            r_a: f(1)?,
            r_b: f(2)?,
            w_a: f(3)?,
            w_b: f(4)?,
            c_x: f(5)?,
            c_y: f(6)?,
            theta: f(7)?,
            has_adjacent: adj,
        });
    }
    Ok((ids, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let text = "count = 3\n# comment\nheight=80\n";
        let m = Manifest::parse(text).unwrap();
        assert_eq!(m.require::<usize>("count").unwrap(), 3);
        assert_eq!(m.require::<usize>("height").unwrap(), 80);
        assert!(m.require::<usize>("width").is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let patches: Vec<Patch> = (0..3)
            .map(|i| {
                Patch::new(Array2::from_elem((4, 6), i as f32 - 0.25), 0.5)
                    .with_label(AirwayLabel::circle(1.0 + i as f64, 0.5))
            })
            .collect();
        write_bundle(dir.path(), &patches, &[]).unwrap();
        let b = read_bundle(dir.path()).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.patch(2), patches[2]);
        let size = fs::metadata(dir.path().join(PATCHES)).unwrap().len();
        assert_eq!(size, 3 * 4 * 6 * 4);
    }

    #[test]
    fn mixed_labels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = Patch::new(Array2::zeros((2, 2)), 0.5);
        let b = a.clone().with_label(AirwayLabel::circle(1.0, 0.5));
        assert!(write_bundle(dir.path(), &[a, b], &[]).is_err());
    }
}
