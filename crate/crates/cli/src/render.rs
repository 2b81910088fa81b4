//! PNG previews of class maps and SVG line plots.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use progseg::raster::{IrrigationClass, LabelMask};

use crate::error::CliError;

/// RGBA per class code: OTHER transparent, FLOOD red, SPRINKLER yellow.
pub const PALETTE: [[u8; 4]; 3] = [[0, 0, 0, 0], [255, 0, 0, 255], [255, 255, 0, 255]];

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| CliError::data(e.to_string()))?;
    writer.write_image_data(data).map_err(|e| CliError::data(e.to_string()))?;
    writer.finish().map_err(|e| CliError::data(e.to_string()))
}

/// Single-band 8-bit raster of class codes.
pub fn write_mask_png(path: &Path, mask: &LabelMask) -> Result<(), CliError> {
    let data: Vec<u8> = mask.data().iter().copied().collect();
    write_png(path, mask.width(), mask.height(), png::ColorType::Grayscale, &data)
}

pub fn write_preview_png(path: &Path, mask: &LabelMask) -> Result<(), CliError> {
    let data: Vec<u8> = mask.data().iter().flat_map(|&k| PALETTE[k as usize]).collect();
    write_png(path, mask.width(), mask.height(), png::ColorType::Rgba, &data)
}

/// Reads a mask written by [`write_mask_png`].
pub fn read_mask_png(path: &Path) -> Result<LabelMask, CliError> {
    let file = File::open(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(|e| CliError::data(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| CliError::data(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(CliError::data(format!("{}: not an 8-bit class mask", path.display())));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = ndarray::Array2::from_shape_vec((h, w), buf[..w * h].to_vec()).expect("frame size");
    Ok(LabelMask::new(data)?)
}

pub fn class_legend() -> String {
    format!(
        "{}=red, {}=yellow, {}=transparent",
        IrrigationClass::Flood.name(),
        IrrigationClass::Sprinkler.name(),
        IrrigationClass::Other.name()
    )
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// x positions where a new stage begins.
    pub breaks: Vec<f64>,
}

const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot with y in [0, 1] and dashed stage boundaries.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let x_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(1.0f64, f64::max);
    let px = |x: f64| m + x / x_max * (w - 2.0 * m);
    let py = |y: f64| h - m - y.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#,
        h - m,
        w - m,
        h - m,
        h - m
    );
    for i in 0..=4 {
        let y = i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y:.2}</text>"#, m - 5.0, py(y) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#, h / 2.0, h / 2.0, escape(y_label));
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for &b in &ser.breaks {
            let _ = writeln!(s, r#"<line x1="{0}" y1="{m}" x2="{0}" y2="{1}" stroke="{color}" stroke-dasharray="4 3" stroke-opacity="0.5"/>"#, px(b), h - m);
        }
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{}</text>"#, w - m - 150.0, m + 15.0 * i as f64, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}
