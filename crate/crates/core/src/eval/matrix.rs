use std::fs;
use std::io::Cursor;
use std::path::Path;

use anl_nn::checkpoint::write_atomic;
use serde::{Deserialize, Serialize};

use crate::data::Protocol;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub train_generator: String,
    pub test_generator: String,
    pub acc: f64,
    pub ap: f64,
    pub n_real: usize,
    pub n_fake: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Acc,
    Ap,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Acc => "acc",
            Metric::Ap => "ap",
        }
    }

    fn of(self, c: &EvalCell) -> f64 {
        match self {
            Metric::Acc => c.acc,
            Metric::Ap => c.ap,
        }
    }
}

/// Train-generator × test-generator grid. Absent cells (no test fakes) are
/// `None` and excluded from the averages, which cover fake-generator cells
/// only; real-set accuracy is reported per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub protocol: Protocol,
    pub train_generators: Vec<String>,
    pub test_generators: Vec<String>,
    /// Row-major, `train_generators.len() × test_generators.len()`.
    pub cells: Vec<Option<EvalCell>>,
    /// Accuracy on the held-out reals, per row.
    pub real_acc: Vec<Option<f64>>,
    pub mean_acc: Option<f64>,
    pub mean_ap: Option<f64>,
}

impl EvalMatrix {
    pub fn new(
        protocol: Protocol,
        train_generators: Vec<String>,
        test_generators: Vec<String>,
        cells: Vec<Option<EvalCell>>,
        real_acc: Vec<Option<f64>>,
    ) -> Result<Self> {
        if cells.len() != train_generators.len() * test_generators.len() || real_acc.len() != train_generators.len() {
            return Err(Error::InvalidArgument("matrix dimensions disagree".into()));
        }
        let mut m = Self {
            protocol,
            train_generators,
            test_generators,
            cells,
            real_acc,
            mean_acc: None,
            mean_ap: None,
        };
        m.mean_acc = m.mean_of(Metric::Acc);
        m.mean_ap = m.mean_of(Metric::Ap);
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.train_generators.len()
    }

    pub fn cols(&self) -> usize {
        self.test_generators.len()
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&EvalCell> {
        self.cells[row * self.cols() + col].as_ref()
    }

    /// Arithmetic mean of a metric over present cells.
    pub fn mean_of(&self, metric: Metric) -> Option<f64> {
        let present: Vec<f64> = self.cells.iter().flatten().map(|c| metric.of(c)).collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn values(&self, metric: Metric) -> Vec<Option<f64>> {
        self.cells.iter().map(|c| c.as_ref().map(|c| metric.of(c))).collect()
    }

    /// One metric as CSV: a header of test generators, then one row per
    /// train generator. Absent cells are empty; values use the shortest
    /// representation that parses back to the same `f64`.
    pub fn to_csv(&self, metric: Metric) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![format!("train\\test ({})", metric.name())];
        header.extend(self.test_generators.iter().cloned());
        w.write_record(&header)?;
        for (r, name) in self.train_generators.iter().enumerate() {
            let mut rec = vec![name.clone()];
            for c in 0..self.cols() {
                rec.push(self.cell(r, c).map(|x| metric.of(x).to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.cells.len() != m.rows() * m.cols() || m.real_acc.len() != m.rows() {
            return Err(Error::InvalidArgument("matrix dimensions disagree".into()));
        }
        Ok(m)
    }

    /// Writes `matrix.json`, `acc.csv`, `ap.csv` and `acc_heatmap.png`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        let put = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            write_atomic(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        put("matrix.json", self.to_json()?.as_bytes())?;
        put("acc.csv", self.to_csv(Metric::Acc)?.as_bytes())?;
        put("ap.csv", self.to_csv(Metric::Ap)?.as_bytes())?;
        put("acc_heatmap.png", &self.heatmap_png(Metric::Acc)?)
    }

    /// Grayscale grid, darker = better, 16 px per cell; absent cells are
    /// hatched. The full matrix is embedded as JSON in an iTXt chunk so the
    /// file decodes back to exact values.
    pub fn heatmap_png(&self, metric: Metric) -> Result<Vec<u8>> {
        const CELL: usize = 16;
        let (w, h) = (self.cols().max(1) * CELL, self.rows().max(1) * CELL);
        let mut px = vec![255u8; w * h];
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                let shade = self
                    .cell(r, c)
                    .map(|x| ((1.0 - metric.of(x)).clamp(0.0, 1.0) * 255.0).round() as u8);
                for y in 0..CELL {
                    for x in 0..CELL {
                        px[(r * CELL + y) * w + c * CELL + x] = match shade {
                            Some(s) => s,
                            None if (x + y) % 4 == 0 => 96,
                            None => 255,
                        };
                    }
                }
            }
        }
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Image {
            path: "<heatmap>".into(),
            reason: e.to_string(),
        };
        enc.add_itxt_chunk(HEATMAP_KEY.into(), serde_json::to_string(self)?)
            .map_err(png_err)?;
        enc.add_itxt_chunk("metric".into(), metric.name().into())
            .map_err(png_err)?;
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&px).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
        Ok(out)
    }

    /// Recovers the matrix embedded by [`EvalMatrix::heatmap_png`].
    pub fn from_heatmap_png(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Image {
            path: "<heatmap>".into(),
            reason,
        };
        let mut reader = png::Decoder::new(Cursor::new(bytes))
            .read_info()
            .map_err(|e| bad(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
        reader.finish().map_err(|e| bad(e.to_string()))?;
        let chunk = reader
            .info()
            .utf8_text
            .iter()
            .find(|c| c.keyword == HEATMAP_KEY)
            .ok_or_else(|| bad("no embedded matrix".into()))?;
        let text = chunk.get_text().map_err(|e| bad(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn read_heatmap(path: &Path) -> Result<Self> {
        Self::from_heatmap_png(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

const HEATMAP_KEY: &str = "anl-eval-matrix";

/// Row names, column names and row-major values of a matrix CSV.
pub type MatrixCsv = (Vec<String>, Vec<String>, Vec<Option<f64>>);

/// Parses a CSV written by [`EvalMatrix::to_csv`] into
/// `(row names, column names, row-major values)`.
pub fn parse_matrix_csv(text: &str) -> Result<MatrixCsv> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let cols: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(rec.get(0).unwrap_or_default().to_string());
        for field in rec.iter().skip(1) {
            values.push(if field.is_empty() {
                None
            } else {
                Some(
                    field
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidArgument(format!("{field:?}: {e}")))?,
                )
            });
        }
    }
    Ok((rows, cols, values))
}
