//! Frame rendering for `detect --render`: detections in blue, ground truth in
//! yellow, one `class: score` caption per detected box.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

use openmixer::data::{frame_path, AnnotationRecord, DetectionRow, VideoFrames};

const SCALE: u32 = 4;
const BLUE: Rgb<u8> = Rgb([40, 90, 255]);
const YELLOW: Rgb<u8> = Rgb([255, 220, 0]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

pub fn caption(row: &DetectionRow) -> String {
    format!("{}: {:.2}", row.class, row.score)
}

/// Best-scoring class of each detected box, per frame.
pub fn frame_labels(rows: &[DetectionRow]) -> BTreeMap<usize, Vec<&DetectionRow>> {
    let mut best: BTreeMap<(usize, [u64; 4]), &DetectionRow> = BTreeMap::new();
    for r in rows {
        let key = (r.frame_index, [r.x1.to_bits(), r.y1.to_bits(), r.x2.to_bits(), r.y2.to_bits()]);
        let slot = best.entry(key).or_insert(r);
        if r.score > slot.score {
            *slot = r;
        }
    }
    let mut out: BTreeMap<usize, Vec<&DetectionRow>> = BTreeMap::new();
    for ((frame, _), r) in best {
        out.entry(frame).or_default().push(r);
    }
    out
}

/// Writes one upscaled PNG per frame and returns the captions drawn on each.
pub fn render_video(dir: &Path, video: &VideoFrames, rows: &[DetectionRow], gt: Option<&AnnotationRecord>) -> Result<Vec<Vec<String>>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let labels = frame_labels(rows);
    let mut captions = Vec::with_capacity(video.len());
    for (i, frame) in video.frames.iter().enumerate() {
        let src = RgbImage::from_raw(video.width as u32, video.height as u32, frame.clone()).context("frame buffer size")?;
        let mut img = image::imageops::resize(&src, src.width() * SCALE, src.height() * SCALE, image::imageops::FilterType::Nearest);
        if let Some(record) = gt {
            for tube in &record.tubes {
                for b in tube.boxes.iter().filter(|b| b.frame == i) {
                    draw_rect(&mut img, [b.rect.x1, b.rect.y1, b.rect.x2, b.rect.y2], YELLOW);
                }
            }
        }
        let mut drawn = Vec::new();
        for r in labels.get(&i).map(Vec::as_slice).unwrap_or_default() {
            draw_rect(&mut img, [r.x1, r.y1, r.x2, r.y2], BLUE);
            let text = caption(r);
            let x = (r.x1 * SCALE as f64).max(0.0) as u32 + 2;
            let y = (r.y1 * SCALE as f64).max(0.0) as u32 + 2;
            draw_text(&mut img, x, y, &text, WHITE);
            drawn.push(text);
        }
        let path = frame_path(dir, i);
        img.save(&path).with_context(|| format!("writing {}", path.display()))?;
        captions.push(drawn);
    }
    Ok(captions)
}

fn draw_rect(img: &mut RgbImage, r: [f64; 4], color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let px = |v: f64, max: i64| ((v * SCALE as f64).round() as i64).clamp(0, max - 1);
    let (x1, y1, x2, y2) = (px(r[0], w), px(r[1], h), px(r[2], w), px(r[3], h));
    for x in x1..=x2 {
        img.put_pixel(x as u32, y1 as u32, color);
        img.put_pixel(x as u32, y2 as u32, color);
    }
    for y in y1..=y2 {
        img.put_pixel(x1 as u32, y as u32, color);
        img.put_pixel(x2 as u32, y as u32, color);
    }
}

// 3×5 glyphs, one row per byte, high bit on the left.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_lowercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        'a' => [2, 5, 7, 5, 5],
        'b' => [6, 5, 6, 5, 6],
        'c' => [3, 4, 4, 4, 3],
        'd' => [6, 5, 5, 5, 6],
        'e' => [7, 4, 6, 4, 7],
        'f' => [7, 4, 6, 4, 4],
        'g' => [3, 4, 5, 5, 3],
        'h' => [5, 5, 7, 5, 5],
        'i' => [7, 2, 2, 2, 7],
        'j' => [1, 1, 1, 5, 2],
        'k' => [5, 5, 6, 5, 5],
        'l' => [4, 4, 4, 4, 7],
        'm' => [5, 7, 7, 5, 5],
        'n' => [6, 5, 5, 5, 5],
        'o' => [2, 5, 5, 5, 2],
        'p' => [6, 5, 6, 4, 4],
        'q' => [2, 5, 5, 6, 3],
        'r' => [6, 5, 6, 5, 5],
        's' => [3, 4, 2, 1, 6],
        't' => [7, 2, 2, 2, 2],
        'u' => [5, 5, 5, 5, 7],
        'v' => [5, 5, 5, 5, 2],
        'w' => [5, 5, 7, 7, 5],
        'x' => [5, 5, 2, 5, 5],
        'y' => [5, 5, 2, 2, 2],
        'z' => [7, 1, 2, 4, 7],
        ':' => [0, 2, 0, 2, 0],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        '_' => [0, 0, 0, 0, 7],
        ' ' => [0; 5],
        _ => [7, 1, 2, 0, 2],
    }
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str, color: Rgb<u8>) {
    const PX: u32 = 2;
    for (k, c) in text.chars().enumerate() {
        let rows = glyph(c);
        for (dy, bits) in rows.iter().enumerate() {
            for dx in 0..3u32 {
                if bits & (4 >> dx) == 0 {
                    continue;
                }
                for sy in 0..PX {
                    for sx in 0..PX {
                        let x = x0 + (k as u32 * 4 + dx) * PX + sx;
                        let y = y0 + dy as u32 * PX + sy;
                        if x < img.width() && y < img.height() {
                            img.put_pixel(x, y, color);
                        }
                    }
                }
            }
        }
    }
}
