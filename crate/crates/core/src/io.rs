//! PNG storage for pixel videos.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::codec::PixelVideo;
use crate::error::{Error, Result};

fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn write_rgb16(path: &Path, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let bytes: Vec<u8> = pixels
        .iter()
        .flat_map(|v| to_u16(*v).to_be_bytes())
        .collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    Ok(())
}

fn read_rgb16(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let dec = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match (info.color_type, info.bit_depth) {
        (png::ColorType::Rgb, png::BitDepth::Sixteen) => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
            .collect(),
        (png::ColorType::Rgb, png::BitDepth::Eight) => buf[..info.buffer_size()]
            .iter()
            .map(|b| *b as f32 / 255.0)
            .collect(),
        other => return Err(Error::Format(format!("unsupported png layout {other:?}"))),
    };
    Ok((w, h, data))
}

/// All frames stacked vertically in one 16-bit RGB image.
pub fn write_strip(path: &Path, v: &PixelVideo) -> Result<()> {
    write_rgb16(path, v.width(), v.height() * v.frames(), v.data())
}

pub fn read_strip(path: &Path, frame_height: usize) -> Result<PixelVideo> {
    let (w, h, data) = read_rgb16(path)?;
    if frame_height == 0 || h % frame_height != 0 {
        return Err(Error::Format(format!(
            "strip height {h} is not a multiple of {frame_height}"
        )));
    }
    PixelVideo::new(h / frame_height, frame_height, w, data)
}

/// One `frame_NNNNN.png` per frame.
pub fn write_frame_dir(dir: &Path, v: &PixelVideo) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(v.frames());
    for t in 0..v.frames() {
        let name = format!("frame_{t:05}.png");
        write_rgb16(&dir.join(&name), v.width(), v.height(), v.frame(t))?;
        names.push(name);
    }
    Ok(names)
}

pub fn read_frame_dir(dir: &Path) -> Result<PixelVideo> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("frame_") && n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Empty(format!("no frames in {}", dir.display())));
    }
    let mut data = Vec::new();
    let mut dims = None;
    for n in &names {
        let (w, h, d) = read_rgb16(&dir.join(n))?;
        if *dims.get_or_insert((w, h)) != (w, h) {
            return Err(Error::Format(format!("{n} has a different size")));
        }
        data.extend(d);
    }
    let (w, h) = dims.unwrap_or_default();
    PixelVideo::new(names.len(), h, w, data)
}

/// Single-frame image, e.g. a reference picture.
pub fn read_image(path: &Path) -> Result<PixelVideo> {
    let (w, h, data) = read_rgb16(path)?;
    PixelVideo::new(1, h, w, data)
}

pub fn write_image(path: &Path, v: &PixelVideo) -> Result<()> {
    write_rgb16(path, v.width(), v.height(), v.frame(0))
}
