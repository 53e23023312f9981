//! Image and plot output: PNG for inspection, binary PPM for bit-exact golden
//! comparisons, and small self-contained SVG line charts.

use std::path::Path;

use crate::autodiff::Array;
use crate::error::{Error, Result};

/// Quantize a (3,H,W) image in [0,1] to interleaved 8-bit RGB.
pub fn to_rgb8(img: &Array) -> (usize, usize, Vec<u8>) {
    assert_eq!(img.shape.len(), 3, "expected (3,H,W) image, got {:?}", img.shape);
    assert_eq!(img.shape[0], 3, "expected (3,H,W) image, got {:?}", img.shape);
    let (h, w) = (img.shape[1], img.shape[2]);
    let plane = h * w;
    let mut out = vec![0u8; plane * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = img.data[c * plane + y * w + x];
                out[(y * w + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    (h, w, out)
}

pub fn write_png(path: &Path, img: &Array) -> Result<()> {
    let (h, w, rgb) = to_rgb8(img);
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, rgb).expect("buffer size mismatch");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// Binary P6 PPM; byte-for-byte deterministic for identical inputs.
pub fn write_ppm(path: &Path, img: &Array) -> Result<()> {
    let (h, w, rgb) = to_rgb8(img);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    std::fs::write(path, out)?;
    Ok(())
}

/// Grayscale (1,H,W) or (H,W) map replicated into an RGB image.
pub fn gray_to_rgb(map: &Array) -> Array {
    let (h, w) = match map.shape.as_slice() {
        [1, h, w] | [h, w] => (*h, *w),
        other => panic!("expected (1,H,W) or (H,W) map, got {other:?}"),
    };
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(&map.data[..h * w]);
    }
    Array::from_vec(&[3, h, w], data)
}

/// One labelled series of an SVG line chart.
pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Minimal SVG polyline chart, deterministic output.
pub fn write_svg_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 56.0; // margin
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !x_min.is_finite() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if (x_max - x_min).abs() < 1e-12 {
        x_max = x_min + 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_max = y_min + 1.0;
    }
    let sx = |x: f64| M + (x - x_min) / (x_max - x_min) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y_min) / (y_max - y_min) * (H - 2.0 * M);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str(&format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        title
    ));
    svg.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - M,
        W - M,
        H - M
    ));
    svg.push_str(&format!("<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n", H - M));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
        W / 2.0,
        H - 12.0,
        x_label
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        H / 2.0,
        H / 2.0,
        y_label
    ));
    svg.push_str(&format!(
        "<text x=\"{M}\" y=\"{}\" font-size=\"10\">{:.3}</text>\n",
        H - M + 14.0,
        x_min
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{:.3}</text>\n",
        W - M,
        H - M + 14.0,
        x_max
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{:.3}</text>\n",
        M - 4.0,
        H - M,
        y_min
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{:.3}</text>\n",
        M - 4.0,
        M + 4.0,
        y_max
    ));

    for (i, s) in series.iter().enumerate() {
        let color = palette[i % palette.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            W - M + 4.0,
            M + 16.0 * i as f64,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_quantization_clamps_and_rounds() {
        let img = Array::from_vec(&[3, 1, 2], vec![0.0, 1.2, 0.5, -0.1, 1.0, 0.25]);
        let (h, w, rgb) = to_rgb8(&img);
        assert_eq!((h, w), (1, 2));
        // pixel 0: channels (0.0, 0.5, 1.0); pixel 1: (1.2->255, -0.1->0, 0.25)
        assert_eq!(rgb, vec![0, 128, 255, 255, 0, 64]);
    }

    #[test]
    fn ppm_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array::from_vec(&[3, 2, 2], (0..12).map(|i| i as f64 / 12.0).collect());
        let p1 = dir.path().join("a.ppm");
        let p2 = dir.path().join("b.ppm");
        write_ppm(&p1, &img).unwrap();
        write_ppm(&p2, &img).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}
