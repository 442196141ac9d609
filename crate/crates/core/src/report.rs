//! Offline rendering of run artifacts: loss curves, IoU bars, label overlays
//! and a static HTML index.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::Rgb;
pub use image::RgbImage;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::scalar::Scalar;
use crate::types::{Image, LabelMap, IGNORE_LABEL};

/// Colour and name per class index.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub entries: Vec<([u8; 3], String)>,
}

const IGNORE_COLOR: [u8; 3] = [0, 0, 0];

impl Palette {
    /// ISPRS Potsdam/Vaihingen legend colours, in the benchmark's column order.
    pub fn isprs() -> Self {
        let e = |c: [u8; 3], n: &str| (c, n.to_string());
        Self {
            entries: vec![
                e([255, 0, 0], "clutter"),
                e([255, 255, 0], "car"),
                e([0, 255, 0], "tree"),
                e([0, 255, 255], "low vegetation"),
                e([0, 0, 255], "building"),
                e([255, 255, 255], "impervious surfaces"),
            ],
        }
    }

    /// Lines of `index r g b name`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<([u8; 3], String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: &str| Error::Parse { location: format!("palette line {}", lineno + 1), reason: reason.into() };
            let mut parts = line.split_whitespace();
            let idx: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("expected a class index"))?;
            if idx != entries.len() {
                return Err(err("class indices must be consecutive from 0"));
            }
            let mut rgb = [0u8; 3];
            for c in &mut rgb {
                *c = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("expected three 0-255 components"))?;
            }
            entries.push((rgb, parts.collect::<Vec<_>>().join(" ")));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# index r g b name\n");
        for (i, (c, n)) in self.entries.iter().enumerate() {
            let _ = writeln!(out, "{i} {} {} {} {n}", c[0], c[1], c[2]);
        }
        out
    }

    /// Classes beyond the table get a fixed grey ramp; ignored pixels are black.
    pub fn color(&self, class: u8) -> [u8; 3] {
        if class == IGNORE_LABEL {
            return IGNORE_COLOR;
        }
        self.entries.get(class as usize).map_or_else(
            || {
                let v = 64 + (class as u16 * 37 % 160) as u8;
                [v, v, v]
            },
            |e| e.0,
        )
    }
}

/// Label map painted with the palette.
pub fn colorize(label: &LabelMap, palette: &Palette) -> RgbImage {
    RgbImage::from_fn(label.width as u32, label.height as u32, |x, y| Rgb(palette.color(label.get(y as usize, x as usize))))
}

/// `alpha * colors + (1 - alpha) * image`; `alpha = 1` is the plain colour map.
pub fn overlay<T: Scalar>(image: &Image<T>, label: &LabelMap, palette: &Palette, alpha: f64) -> Result<RgbImage> {
    if (image.height, image.width) != (label.height, label.width) {
        return Err(Error::Shape("overlay image and label differ in size".into()));
    }
    let colors = colorize(label, palette);
    if alpha >= 1.0 {
        return Ok(colors);
    }
    let base = |c: usize, y: usize, x: usize| -> f64 {
        let c = if image.channels >= 3 { c } else { 0 };
        image.get(c, y, x).to_f64_lossy().clamp(0.0, 1.0) * 255.0
    };
    Ok(RgbImage::from_fn(label.width as u32, label.height as u32, |x, y| {
        let p = colors.get_pixel(x, y).0;
        let mut out = [0u8; 3];
        for c in 0..3 {
            out[c] = (alpha * f64::from(p[c]) + (1.0 - alpha) * base(c, y as usize, x as usize)).round() as u8;
        }
        Rgb(out)
    }))
}

/// One parsed metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsLog {
    pub columns: Vec<String>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let Some(header) = lines.next() else {
            return Ok(Self { columns: Vec::new(), rows: Vec::new() });
        };
        let columns: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let err = |reason: String| Error::Parse { location: format!("metrics row {}", i + 1), reason };
            let mut f = line.split(',');
            let step = f.next().unwrap_or("").trim().parse().map_err(|e| err(format!("step: {e}")))?;
            let values = f.map(|v| v.trim().parse::<f64>().map_err(|e| err(e.to_string()))).collect::<Result<Vec<_>>>()?;
            if values.len() != columns.len() {
                return Err(err(format!("{} values for {} columns", values.len(), columns.len())));
            }
            rows.push(MetricsRow { step, values });
        }
        Ok(Self { columns, rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn column(&self, name: &str) -> Option<Vec<(u64, f64)>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| (r.step, r.values[i])).collect())
    }
}

pub const CURVE_COLORS: [[u8; 3]; 4] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40]];
pub const LOSS_SERIES: [&str; 4] = ["L_S", "L_T", "L_CLR", "L_total"];

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 360;
const MARGIN: u32 = 24;

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
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

fn blank_plot() -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let (l, b) = (MARGIN as i64, (PLOT_H - MARGIN) as i64);
    draw_line(&mut img, (l, MARGIN as i64), (l, b), [0, 0, 0]);
    draw_line(&mut img, (l, b), ((PLOT_W - MARGIN) as i64, b), [0, 0, 0]);
    img
}

/// Loss series on shared axes, colours from [`CURVE_COLORS`] in [`LOSS_SERIES`] order.
pub fn loss_curve(log: &MetricsLog) -> Option<RgbImage> {
    let series: Vec<Vec<(u64, f64)>> = LOSS_SERIES.iter().filter_map(|s| log.column(s)).collect();
    let points = series.iter().flatten().filter(|p| p.1.is_finite());
    let (mut smin, mut smax, mut vmin, mut vmax) = (u64::MAX, 0u64, f64::INFINITY, f64::NEG_INFINITY);
    let mut any = false;
    for &(s, v) in points {
        any = true;
        smin = smin.min(s);
        smax = smax.max(s);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    if !any {
        return None;
    }
    if vmax - vmin < 1e-12 {
        vmax = vmin + 1.0;
    }
    let mut img = blank_plot();
    let (w, h) = ((PLOT_W - 2 * MARGIN) as f64, (PLOT_H - 2 * MARGIN) as f64);
    let to_px = |s: u64, v: f64| -> (i64, i64) {
        let fx = if smax > smin { (s - smin) as f64 / (smax - smin) as f64 } else { 0.5 };
        let fy = (v - vmin) / (vmax - vmin);
        ((MARGIN as f64 + fx * w).round() as i64, (MARGIN as f64 + (1.0 - fy) * h).round() as i64)
    };
    for (k, pts) in series.iter().enumerate() {
        let color = CURVE_COLORS[k % CURVE_COLORS.len()];
        let pts: Vec<_> = pts.iter().filter(|p| p.1.is_finite()).map(|&(s, v)| to_px(s, v)).collect();
        if pts.len() == 1 {
            draw_line(&mut img, pts[0], pts[0], color);
        }
        for pair in pts.windows(2) {
            draw_line(&mut img, pair[0], pair[1], color);
        }
    }
    Some(img)
}

/// One bar per class, height proportional to IoU, coloured by the palette.
pub fn iou_bars(report: &MetricReport, palette: &Palette) -> Option<RgbImage> {
    let n = report.per_class_iou.len();
    if n == 0 {
        return None;
    }
    let mut img = blank_plot();
    let slot = (PLOT_W - 2 * MARGIN) / n as u32;
    let h = (PLOT_H - 2 * MARGIN) as f64;
    for (i, v) in report.per_class_iou.iter().enumerate() {
        let Some(v) = v else { continue };
        let top = PLOT_H - MARGIN - (v.clamp(0.0, 1.0) * h).round() as u32;
        let x0 = MARGIN + 1 + i as u32 * slot + slot / 8;
        let x1 = MARGIN + (i as u32 + 1) * slot - slot / 8;
        let mut color = palette.color(i as u8);
        if color == [255, 255, 255] {
            color = [200, 200, 200];
        }
        for y in top..PLOT_H - MARGIN {
            for x in x0..x1.max(x0 + 1) {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
    Some(img)
}

/// Rendered outputs and the index page written by [`write_report`].
#[derive(Clone, Debug, Default)]
pub struct ReportInputs {
    pub metrics: Option<MetricsLog>,
    /// `(label, report)` pairs, e.g. per evaluation step.
    pub evals: Vec<(String, MetricReport)>,
    /// `(caption, rgb)` overlays.
    pub overlays: Vec<(String, RgbImage)>,
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::CorruptRaster { path: path.to_path_buf(), reason: e.to_string() })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub const NO_DATA: &str = "no data";

/// Writes PNGs and `index.html` into `out`; returns every file written.
pub fn write_report(inputs: &ReportInputs, palette: &Palette, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();
    let mut html = String::from(
        "<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title>Training report</title>\n\
         <style>body{font-family:sans-serif;margin:2em}.no-data{color:#888;font-style:italic}\
         table{border-collapse:collapse}td,th{border:1px solid #ccc;padding:2px 8px;text-align:right}\
         .swatch{display:inline-block;width:1em;height:1em;border:1px solid #333;vertical-align:middle}</style>\n\
         </head>\n<body>\n<h1>Training report</h1>\n",
    );

    html.push_str("<h2>Losses</h2>\n");
    match inputs.metrics.as_ref().and_then(loss_curve) {
        Some(img) => {
            let p = out.join("loss_curves.png");
            save_png(&img, &p)?;
            files.push(p);
            html.push_str("<img src=\"loss_curves.png\" alt=\"loss curves\">\n<p>");
            for (name, c) in LOSS_SERIES.iter().zip(CURVE_COLORS) {
                let _ = write!(html, "<span class=\"swatch\" style=\"background:rgb({},{},{})\"></span> {name} ", c[0], c[1], c[2]);
            }
            html.push_str("</p>\n");
        }
        None => {
            let _ = writeln!(html, "<p class=\"no-data\">{NO_DATA}</p>");
        }
    }

    html.push_str("<h2>Per-class IoU</h2>\n");
    match inputs.evals.last() {
        Some((label, report)) => {
            if let Some(img) = iou_bars(report, palette) {
                let p = out.join("iou_bars.png");
                save_png(&img, &p)?;
                files.push(p);
                let _ = writeln!(html, "<p>{}</p>\n<img src=\"iou_bars.png\" alt=\"per-class IoU\">", escape(label));
            }
            html.push_str("<table>\n<tr><th>report</th>");
            for n in &report.class_names {
                let _ = write!(html, "<th>{}</th>", escape(n));
            }
            html.push_str("<th>mIoU</th><th>mF1</th></tr>\n");
            for (label, r) in &inputs.evals {
                let _ = write!(html, "<tr><td>{}</td>", escape(label));
                let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
                for v in &r.per_class_iou {
                    let _ = write!(html, "<td>{}</td>", pct(*v));
                }
                let _ = writeln!(html, "<td>{}</td><td>{}</td></tr>", pct(r.mean_iou), pct(r.mean_f1));
            }
            html.push_str("</table>\n");
        }
        None => {
            let _ = writeln!(html, "<p class=\"no-data\">{NO_DATA}</p>");
        }
    }

    html.push_str("<h2>Predictions</h2>\n");
    if inputs.overlays.is_empty() {
        let _ = writeln!(html, "<p class=\"no-data\">{NO_DATA}</p>");
    } else {
        html.push_str("<p>");
        for (i, (c, n)) in palette.entries.iter().enumerate() {
            let _ = write!(html, "<span class=\"swatch\" style=\"background:rgb({},{},{})\"></span> {i} {} ", c[0], c[1], c[2], escape(n));
        }
        html.push_str("</p>\n");
        for (i, (caption, img)) in inputs.overlays.iter().enumerate() {
            let name = format!("overlay_{i:03}.png");
            let p = out.join(&name);
            save_png(img, &p)?;
            files.push(p);
            let _ = writeln!(html, "<figure><img src=\"{name}\" alt=\"overlay\"><figcaption>{}</figcaption></figure>", escape(caption));
        }
    }
    html.push_str("</body>\n</html>\n");
    let index = out.join("index.html");
    fs::write(&index, html).map_err(|e| Error::io(&index, e))?;
    files.push(index);
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{summarize, ConfusionMatrix};

    #[test]
    fn palette_text_round_trip() {
        let p = Palette::isprs();
        assert_eq!(Palette::parse(&p.to_text()).unwrap(), p);
        assert!(Palette::parse("1 0 0 0 x\n").is_err());
        assert!(Palette::parse("0 0 0\n").is_err());
    }

    #[test]
    fn colorize_maps_every_pixel() {
        let p = Palette::isprs();
        let label = LabelMap::new(2, 3, vec![0, 1, 2, 3, IGNORE_LABEL, 9]).unwrap();
        let img = colorize(&label, &p);
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(img.get_pixel(x, y).0, p.color(label.get(y as usize, x as usize)));
            }
        }
        assert_eq!(img.get_pixel(1, 1).0, IGNORE_COLOR);
        let image = Image::<f64>::filled(3, 2, 3, 0.5);
        assert_eq!(overlay(&image, &label, &p, 1.0).unwrap(), img);
        let half = overlay(&image, &label, &p, 0.5).unwrap();
        assert_eq!(half.get_pixel(0, 0).0, [191, 64, 64]);
    }

    #[test]
    fn metrics_log_parsing() {
        let log = MetricsLog::parse("step,L_S,L_T,L_CLR,L_total,q_mean,lr\n0,1,2,3,6,0.5,0.1\n1,0.5,1,-0.5,1,0.5,0.1\n").unwrap();
        assert_eq!(log.rows.len(), 2);
        assert_eq!(log.column("L_total").unwrap(), vec![(0, 6.0), (1, 1.0)]);
        assert!(MetricsLog::parse("").unwrap().rows.is_empty());
        assert!(MetricsLog::parse("step,a\n0,x\n").is_err());
        assert!(loss_curve(&MetricsLog::parse("step,L_S\n").unwrap()).is_none());
        assert!(loss_curve(&log).is_some());
    }

    #[test]
    fn empty_inputs_give_placeholders() {
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(&ReportInputs::default(), &Palette::isprs(), dir.path()).unwrap();
        assert_eq!(files, vec![dir.path().join("index.html")]);
        let html = fs::read_to_string(&files[0]).unwrap();
        assert_eq!(html.matches(NO_DATA).count(), 3);
    }

    #[test]
    fn full_inputs_render_images() {
        let dir = tempfile::tempdir().unwrap();
        let mut cm = ConfusionMatrix::new(2);
        let l = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        cm.update(&l, &l).unwrap();
        let inputs = ReportInputs {
            metrics: Some(MetricsLog::parse("step,L_S,L_T,L_CLR,L_total,q_mean,lr\n0,1,2,3,6,0,0\n1,2,1,0,3,0,0\n").unwrap()),
            evals: vec![("step 1".into(), summarize(&cm))],
            overlays: vec![("a".into(), colorize(&l, &Palette::isprs()))],
        };
        let files = write_report(&inputs, &Palette::isprs(), dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        for f in &files {
            assert!(fs::metadata(f).unwrap().len() > 0);
        }
        assert!(!fs::read_to_string(dir.path().join("index.html")).unwrap().contains(NO_DATA));
    }
}
