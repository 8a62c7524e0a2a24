//! 8-bit RGB PNG reading and writing.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::corpus::Image;
use crate::error::{Error, IoContext, Result};

/// Encodes a channel-major `Image` as interleaved RGB8 PNG bytes.
pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let n = image.size();
    encode_rgb(n, n, &interleave(image))
}

pub fn encode_rgb(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(rgb)?;
    }
    Ok(bytes)
}

fn interleave(image: &Image) -> Vec<u8> {
    let planar = image.to_u8();
    let n = image.size() * image.size();
    let mut rgb = Vec::with_capacity(3 * n);
    for i in 0..n {
        rgb.extend_from_slice(&[planar[i], planar[n + i], planar[2 * n + i]]);
    }
    rgb
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes).at(path)
}

/// Writes interleaved RGB8 pixels.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).at(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(rgb)?;
    Ok(())
}

/// Reads a square RGB8 PNG into planar 8-bit storage (channel-major).
pub fn read_png_planar(path: &Path) -> Result<(usize, Vec<u8>)> {
    let file = File::open(path).at(path)?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::ShapeMismatch(format!(
            "{}: expected 8-bit RGB PNG, found {:?}/{:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    if info.width != info.height {
        return Err(Error::ShapeMismatch(format!(
            "{}: expected a square image, found {}x{}",
            path.display(),
            info.width,
            info.height
        )));
    }
    let n = info.width as usize;
    let rgb = &buf[..3 * n * n];
    let mut planar = vec![0u8; 3 * n * n];
    for i in 0..n * n {
        for c in 0..3 {
            planar[c * n * n + i] = rgb[3 * i + c];
        }
    }
    Ok((n, planar))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let (n, planar) = read_png_planar(path)?;
    Ok(Image::from_u8(n, &planar))
}

/// Tiles equally sized images into a grid, row-major, with a 1-pixel gray gutter.
pub fn contact_sheet(rows: &[Vec<Image>]) -> (usize, usize, Vec<u8>) {
    let n = rows
        .iter()
        .flatten()
        .next()
        .map(|im| im.size())
        .unwrap_or(1);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gutter = 1;
    let width = cols * (n + gutter) + gutter;
    let height = rows.len() * (n + gutter) + gutter;
    let mut rgb = vec![128u8; width * height * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, im) in row.iter().enumerate() {
            let px = interleave(im);
            let (ox, oy) = (gutter + c * (n + gutter), gutter + r * (n + gutter));
            for y in 0..n {
                let dst = ((oy + y) * width + ox) * 3;
                rgb[dst..dst + 3 * n].copy_from_slice(&px[y * n * 3..(y + 1) * n * 3]);
            }
        }
    }
    (width, height, rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{render_scene, SceneSpec};

    #[test]
    fn png_round_trip_preserves_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let img = render_scene(&SceneSpec::random(3, 32)).unwrap();
        let path = dir.path().join("a.png");
        write_png(&path, &img).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
    }

    #[test]
    fn encoding_is_deterministic() {
        let img = render_scene(&SceneSpec::random(4, 32)).unwrap();
        assert_eq!(encode_png(&img).unwrap(), encode_png(&img).unwrap());
    }
}
