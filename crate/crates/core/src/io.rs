//! Report writers: CSV tables, binary field and matrix frames, run manifests
//! and self-contained SVG line charts.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asep::{FieldPath, ScalingParams};
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// A CSV table held in memory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn push_f64(&mut self, row: &[f64]) {
        self.push(row.iter().map(|&v| fmt_f64(v)).collect());
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k].as_str()).collect())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Inconsistent(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Inconsistent(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec.map_err(csv_err)?.iter().map(String::from).collect());
        }
        Ok(Self { header, rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse { line, msg: e.to_string() }
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// `path.csv`: one row per (time, site) with columns `t_macro, x_macro, Z, h, eta`.
///
/// Paths without particle data (SHE solutions) leave `h` and `eta` empty.
pub fn path_table(path: &FieldPath) -> Table {
    let mut t = Table::new(&["t_macro", "x_macro", "Z", "h", "eta"]);
    let nf = path.n as f64;
    for (k, &time) in path.times.iter().enumerate() {
        for x in 0..path.n {
            t.push(vec![
                fmt_f64(time),
                fmt_f64(x as f64 / nf),
                fmt_f64(path.z[k][x]),
                path.h.get(k).map_or(String::new(), |h| h[x].to_string()),
                path.eta.get(k).map_or(String::new(), |e| e[x].to_string()),
            ]);
        }
    }
    t
}

/// `kernel.csv`: columns `t, x, x_tilde, value` for each matrix in `frames`.
pub fn kernel_table(frames: &[(f64, &Mat)]) -> Table {
    let mut t = Table::new(&["t", "x", "x_tilde", "value"]);
    for &(time, k) in frames {
        for x in 0..k.nrows() {
            for y in 0..k.ncols() {
                t.push(vec![fmt_f64(time), x.to_string(), y.to_string(), fmt_f64(k[(x, y)])]);
            }
        }
    }
    t
}

const FIELD_MAGIC: &[u8; 4] = b"ZFLD";
const MATRIX_MAGIC: &[u8; 4] = b"KMAT";
const FORMAT_VERSION: u32 = 1;

/// Write a path as little-endian frames.
///
/// Header: magic, version, `N`, seed, flags (scaling, heights, occupations),
/// environment id, frame count. Each frame holds the time followed by `Z`,
/// then `h` and `η` when present, all as `f64`.
pub fn write_field_frames<W: Write>(mut w: W, path: &FieldPath) -> Result<()> {
    let frames = path.times.len();
    if path.z.len() != frames
        || (!path.h.is_empty() && path.h.len() != frames)
        || (!path.eta.is_empty() && path.eta.len() != frames)
    {
        return Err(Error::Inconsistent("field arrays do not match the number of times".into()));
    }
    w.write_all(FIELD_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(path.n as u64).to_le_bytes())?;
    w.write_all(&path.seed.to_le_bytes())?;
    let flags = u8::from(path.scaling.is_some()) | u8::from(!path.h.is_empty()) << 1 | u8::from(!path.eta.is_empty()) << 2;
    w.write_all(&[flags])?;
    w.write_all(&(path.env_id.len() as u32).to_le_bytes())?;
    w.write_all(path.env_id.as_bytes())?;
    w.write_all(&(frames as u64).to_le_bytes())?;
    for k in 0..frames {
        w.write_all(&path.times[k].to_le_bytes())?;
        for &v in &path.z[k] {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(h) = path.h.get(k) {
            for &v in h {
                w.write_all(&(v as f64).to_le_bytes())?;
            }
        }
        if let Some(e) = path.eta.get(k) {
            for &v in e {
                w.write_all(&f64::from(v).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_field_frames<R: Read>(mut r: R) -> Result<FieldPath> {
    read_magic(&mut r, FIELD_MAGIC)?;
    let n = read_u64(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    let mut flags = [0u8];
    r.read_exact(&mut flags)?;
    let id_len = read_u32(&mut r)? as usize;
    let mut id = vec![0u8; id_len];
    r.read_exact(&mut id)?;
    let env_id = String::from_utf8(id).map_err(|e| Error::Inconsistent(e.to_string()))?;
    let frames = read_u64(&mut r)? as usize;
    let scaling = if flags[0] & 1 != 0 { Some(ScalingParams::new(n)?) } else { None };
    let mut path = FieldPath { n, seed, scaling, env_id, times: Vec::new(), z: Vec::new(), h: Vec::new(), eta: Vec::new() };
    for _ in 0..frames {
        path.times.push(read_f64(&mut r)?);
        path.z.push(read_f64s(&mut r, n)?);
        if flags[0] & 2 != 0 {
            path.h.push(read_f64s(&mut r, n)?.into_iter().map(|v| v as i64).collect());
        }
        if flags[0] & 4 != 0 {
            path.eta.push(read_f64s(&mut r, n)?.into_iter().map(|v| v as u8).collect());
        }
    }
    Ok(path)
}

/// Square matrices at a list of times, row-major little-endian `f64`.
pub fn write_matrix_frames<W: Write>(mut w: W, frames: &[(f64, &Mat)]) -> Result<()> {
    let n = frames.first().map_or(0, |(_, m)| m.nrows());
    if frames.iter().any(|(_, m)| m.nrows() != n || m.ncols() != n) {
        return Err(Error::Inconsistent("matrix frames must share one square size".into()));
    }
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(n as u64).to_le_bytes())?;
    w.write_all(&(frames.len() as u64).to_le_bytes())?;
    for (t, m) in frames {
        w.write_all(&t.to_le_bytes())?;
        for x in 0..n {
            for y in 0..n {
                w.write_all(&m[(x, y)].to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_matrix_frames<R: Read>(mut r: R) -> Result<Vec<(f64, Mat)>> {
    read_magic(&mut r, MATRIX_MAGIC)?;
    let n = read_u64(&mut r)? as usize;
    let count = read_u64(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let t = read_f64(&mut r)?;
        let vals = read_f64s(&mut r, n * n)?;
        out.push((t, Mat::from_row_slice(n, n, &vals)));
    }
    Ok(out)
}

fn read_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(Error::Inconsistent(format!("bad magic {buf:?}")));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Inconsistent(format!("unsupported format version {version}")));
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}

/// Git-style content hash: SHA-256 of `"blob {len}\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(content_hash(&fs::read(path)?))
}

/// Everything needed to re-run a command: its configuration, seeds and the
/// hashes of the files it read and wrote.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value, seeds: Vec<u64>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            seeds,
            ..Default::default()
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    /// Hash `dir/name` and list it under its relative name.
    pub fn record_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.outputs.insert(name.into(), file_hash(&dir.join(name))?);
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?)
    }
}

/// One named polyline.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Minimal line chart rendered to standalone SVG.
#[derive(Clone, Debug, Default)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

impl LineChart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self { title: title.into(), x_label: x_label.into(), y_label: y_label.into(), ..Default::default() }
    }

    pub fn add(&mut self, name: &str, points: Vec<(f64, f64)>) -> &mut Self {
        self.series.push(Series { name: name.into(), points });
        self
    }

    pub fn to_svg(&self) -> String {
        let (w, h) = (640.0, 400.0);
        let (left, right, top, bottom) = (70.0, 150.0, 40.0, 50.0);
        let tx = |v: f64| if self.log_x { v.log10() } else { v };
        let ty = |v: f64| if self.log_y { v.log10() } else { v };
        let pts: Vec<Vec<(f64, f64)>> = self
            .series
            .iter()
            .map(|s| s.points.iter().map(|&(x, y)| (tx(x), ty(y))).filter(|(x, y)| x.is_finite() && y.is_finite()).collect())
            .collect();
        let all = pts.iter().flatten();
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in all {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 == x0 {
            x1 = x0 + 1.0;
        }
        if y1 == y0 {
            y1 = y0 + 1.0;
        }
        let pw = w - left - right;
        let ph = h - top - bottom;
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        );
        s += &format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n");
        s += &format!("<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n", left + pw / 2.0, escape(&self.title));
        s += &format!("<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>\n");
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let xl = if self.log_x { format!("1e{xv:.1}") } else { format!("{xv:.3}") };
            let yl = if self.log_y { format!("1e{yv:.1}") } else { format!("{yv:.3}") };
            s += &format!("<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xl}</text>\n", sx(xv), top + ph + 16.0);
            s += &format!("<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{yl}</text>\n", left - 6.0, sy(yv) + 4.0);
        }
        s += &format!("<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n", left + pw / 2.0, h - 10.0, escape(&self.x_label));
        s += &format!(
            "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
            top + ph / 2.0,
            top + ph / 2.0,
            escape(&self.y_label)
        );
        for (k, (series, p)) in self.series.iter().zip(&pts).enumerate() {
            let colour = PALETTE[k % PALETTE.len()];
            let d: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            s += &format!("<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>\n", d.join(" "));
            let ly = top + 14.0 + 18.0 * k as f64;
            s += &format!("<line x1=\"{0}\" y1=\"{ly}\" x2=\"{1}\" y2=\"{ly}\" stroke=\"{colour}\" stroke-width=\"2\"/>\n", w - right + 10.0, w - right + 30.0);
            s += &format!("<text x=\"{}\" y=\"{}\">{}</text>\n", w - right + 36.0, ly + 4.0, escape(&series.name));
        }
        s += "</svg>\n";
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_svg())?;
        Ok(())
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
