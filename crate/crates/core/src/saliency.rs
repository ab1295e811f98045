//! Input-gradient saliency: per-iteration aggregates of `|∂L/∂x|` split by
//! sequence and by slice offset, with running cumulative sums.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusenet::{BnMode, FusionModel, ModelError, CE_EPS};
use crate::nn::{Tape, Tensor};
use crate::preprocess::{SequencePresence, SliceSample};

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("saliency gradient is not finite")]
    NonFinite,
    #[error("gradient has {got} channels, ledger expects {expected}")]
    Shape { got: usize, expected: usize },
    #[error("ledger is empty")]
    Empty,
    #[error("{path}: {msg}")]
    File { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRow {
    pub iteration: u64,
    pub by_sequence: Vec<f64>,
    pub by_offset: Vec<f64>,
    pub cumulative_sequence: Vec<f64>,
    pub cumulative_offset: Vec<f64>,
}

impl SaliencyRow {
    pub fn total(&self) -> f64 {
        self.by_sequence.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyLedger {
    sequence_names: Vec<String>,
    n_slices: usize,
    rows: Vec<SaliencyRow>,
}

impl SaliencyLedger {
    pub fn new(sequence_names: Vec<String>, n_slices: usize) -> Self {
        Self {
            sequence_names,
            n_slices,
            rows: Vec::new(),
        }
    }

    pub fn sequence_names(&self) -> &[String] {
        &self.sequence_names
    }

    pub fn n_slices(&self) -> usize {
        self.n_slices
    }

    pub fn rows(&self) -> &[SaliencyRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&SaliencyRow> {
        self.rows.last()
    }

    /// Signed slice offsets, e.g. `[-2, -1, 0, 1, 2]`.
    pub fn offsets(&self) -> Vec<i64> {
        let k = (self.n_slices / 2) as i64;
        (-k..=k).collect()
    }

    /// Adds one row from a gradient of shape (N, C, H, W) or (C, H, W),
    /// summing over the batch. Channel `s·n_slices + o` belongs to sequence
    /// `s` and offset `o`.
    pub fn accumulate(&mut self, iteration: u64, grad: &Tensor) -> Result<(), SaliencyError> {
        let n_seq = self.sequence_names.len();
        let expected = n_seq * self.n_slices;
        let shape = grad.shape();
        let (n, c) = match shape.len() {
            3 => (1, shape[0]),
            4 => (shape[0], shape[1]),
            _ => return Err(SaliencyError::Shape { got: 0, expected }),
        };
        if c != expected {
            return Err(SaliencyError::Shape { got: c, expected });
        }
        let plane = grad.len() / (n * c);
        let mut by_sequence = vec![0.0; n_seq];
        let mut by_offset = vec![0.0; self.n_slices];
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * plane;
                let s: f64 = grad.data()[start..start + plane].iter().map(|v| v.abs()).sum();
                if !s.is_finite() {
                    return Err(SaliencyError::NonFinite);
                }
                by_sequence[ch / self.n_slices] += s;
                by_offset[ch % self.n_slices] += s;
            }
        }
        let (cumulative_sequence, cumulative_offset) = match self.rows.last() {
            Some(prev) => (
                prev.cumulative_sequence.iter().zip(&by_sequence).map(|(a, b)| a + b).collect(),
                prev.cumulative_offset.iter().zip(&by_offset).map(|(a, b)| a + b).collect(),
            ),
            None => (by_sequence.clone(), by_offset.clone()),
        };
        self.rows.push(SaliencyRow {
            iteration,
            by_sequence,
            by_offset,
            cumulative_sequence,
            cumulative_offset,
        });
        Ok(())
    }

    fn header(&self) -> Vec<String> {
        let seq: Vec<String> = self.sequence_names.iter().map(|s| format!("seq_{s}")).collect();
        let off: Vec<String> = self.offsets().iter().map(|k| format!("offset_{k}")).collect();
        let mut h = vec!["iteration".to_string()];
        h.extend(seq.iter().cloned());
        h.extend(off.iter().cloned());
        h.extend(seq.iter().map(|s| format!("cumulative_{s}")));
        h.extend(off.iter().map(|s| format!("cumulative_{s}")));
        h
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), SaliencyError> {
        let err = |e: csv::Error| SaliencyError::File {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(self.header()).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![r.iteration.to_string()];
            for v in r
                .by_sequence
                .iter()
                .chain(&r.by_offset)
                .chain(&r.cumulative_sequence)
                .chain(&r.cumulative_offset)
            {
                rec.push(v.to_string());
            }
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| SaliencyError::File {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self, SaliencyError> {
        let bad = |msg: String| SaliencyError::File {
            path: path.to_path_buf(),
            msg,
        };
        let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
        let header: Vec<String> = r.headers().map_err(|e| bad(e.to_string()))?.iter().map(str::to_string).collect();
        let names: Vec<String> = header
            .iter()
            .filter_map(|h| h.strip_prefix("seq_").map(str::to_string))
            .collect();
        let n_slices = header.iter().filter(|h| h.starts_with("offset_")).count();
        let ledger = Self::new(names.clone(), n_slices);
        if ledger.header() != header {
            return Err(bad("unexpected saliency header".into()));
        }
        let (s, k) = (names.len(), n_slices);
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let iteration = rec[0].parse().map_err(|e| bad(format!("iteration: {e}")))?;
            let vals: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| bad(format!("{v}: {e}"))))
                .collect::<Result<_, _>>()?;
            rows.push(SaliencyRow {
                iteration,
                by_sequence: vals[..s].to_vec(),
                by_offset: vals[s..s + k].to_vec(),
                cumulative_sequence: vals[s + k..2 * s + k].to_vec(),
                cumulative_offset: vals[2 * s + k..].to_vec(),
            });
        }
        Ok(Self { rows, ..ledger })
    }

    /// Cumulative series as plotted: `(by sequence, by offset)`, each a list
    /// of curves over the rows.
    pub fn plot_series(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let curves = |n: usize, get: &dyn Fn(&SaliencyRow) -> &[f64]| -> Vec<Vec<f64>> {
            (0..n).map(|i| self.rows.iter().map(|r| get(r)[i]).collect()).collect()
        };
        (
            curves(self.sequence_names.len(), &|r| &r.cumulative_sequence),
            curves(self.n_slices, &|r| &r.cumulative_offset),
        )
    }
}

/// `∂L/∂x` of one sample at its pre-dropout input. Channels of sequences
/// absent from `presence` receive exactly zero gradient.
pub fn saliency_image(
    model: &FusionModel,
    sample: &SliceSample,
    presence: &SequencePresence,
) -> Result<Tensor, SaliencyError> {
    let (h, w) = sample.hw();
    let c = sample.stack.shape()[0];
    let x = sample.stack.clone().reshape(&[1, c, h, w]);
    let factors = presence.channel_factors(sample.n_slices);
    let mut tape = Tape::new();
    let f = model.forward_tape(&mut tape, &x, Some(&factors), BnMode::Eval, true)?;
    let target = sample.target_f64();
    let loss = match f.logits {
        Some(l) => tape.bce_logits(l, &target),
        None => tape.bce_prob(f.prob, &target, CE_EPS),
    };
    let grads = tape.backward(loss);
    let g = f
        .input_gradient(&tape, &grads)
        .expect("inputs require grad")
        .reshape(&[c, h, w]);
    if g.data().iter().any(|v| !v.is_finite()) {
        return Err(SaliencyError::NonFinite);
    }
    Ok(g)
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for (ox, oy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let (px, py) = (x + ox, y + oy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, c);
            }
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line chart of several series against `xs`; the legend is one coloured
/// swatch per series, in series order, along the top edge.
fn render_chart(xs: &[f64], series: &[Vec<f64>]) -> RgbImage {
    let (w, h, m) = (640u32, 400u32, 40i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    let (left, right, top, bottom) = (m, w as i64 - m / 2, m, h as i64 - m);
    draw_line(&mut img, (left, bottom), (right, bottom), black);
    draw_line(&mut img, (left, bottom), (left, top), black);
    let xmin = xs.first().copied().unwrap_or(0.0);
    let xmax = xs.last().copied().unwrap_or(1.0);
    let ymax = series.iter().flatten().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let px = |x: f64| {
        if xmax > xmin {
            left + ((x - xmin) / (xmax - xmin) * (right - left) as f64).round() as i64
        } else {
            (left + right) / 2
        }
    };
    let py = |y: f64| bottom - (y / ymax * (bottom - top) as f64).round() as i64;
    for (i, s) in series.iter().enumerate() {
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        let pts: Vec<(i64, i64)> = xs.iter().zip(s).map(|(&x, &y)| (px(x), py(y))).collect();
        for p in pts.windows(2) {
            draw_line(&mut img, p[0], p[1], c);
        }
        if let Some(&(x, y)) = pts.first() {
            for d in -2..=2 {
                draw_line(&mut img, (x - 2, y + d), (x + 2, y + d), c);
            }
        }
        let lx = left + 10 + 24 * i as i64;
        for d in 0..10 {
            draw_line(&mut img, (lx, 8 + d), (lx + 14, 8 + d), c);
        }
    }
    img
}

/// Writes `saliency.csv`, `saliency_by_sequence.png` and
/// `saliency_by_offset.png` into `dir`.
pub fn plot_ledger(ledger: &SaliencyLedger, dir: &Path) -> Result<Vec<PathBuf>, SaliencyError> {
    if ledger.is_empty() {
        return Err(SaliencyError::Empty);
    }
    std::fs::create_dir_all(dir).map_err(|e| SaliencyError::File {
        path: dir.to_path_buf(),
        msg: e.to_string(),
    })?;
    let xs: Vec<f64> = ledger.rows().iter().map(|r| r.iteration as f64).collect();
    let (by_seq, by_off) = ledger.plot_series();
    let csv = dir.join("saliency.csv");
    ledger.write_csv(&csv)?;
    let mut out = vec![csv];
    for (name, series) in [("saliency_by_sequence.png", by_seq), ("saliency_by_offset.png", by_off)] {
        let path = dir.join(name);
        render_chart(&xs, &series).save(&path).map_err(|e| SaliencyError::File {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        out.push(path);
    }
    Ok(out)
}
