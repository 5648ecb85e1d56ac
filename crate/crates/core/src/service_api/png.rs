use crate::error::{Error, Result};
use crate::input_saliency::PixelSaliencyMap;
use crate::tensor::Tensor;

fn encode(width: usize, height: usize, color: ::png::ColorType, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = ::png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(::png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(format!("png header: {e}")))?;
    writer.write_image_data(bytes).map_err(|e| Error::format(format!("png data: {e}")))?;
    writer.finish().map_err(|e| Error::format(format!("png finish: {e}")))?;
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[C, H, W]` image with values in `[0, 1]` (clamped) as 8-bit grayscale
/// (one channel) or RGB (three channels).
pub fn encode_image_png(image: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("encode_image_png", format!("{:?} is not [C, H, W]", image.shape())));
    };
    let color = match c {
        1 => ::png::ColorType::Grayscale,
        3 => ::png::ColorType::Rgb,
        _ => return Err(Error::invalid(format!("cannot encode {c} channels as png"))),
    };
    let d = image.data();
    let mut bytes = Vec::with_capacity(c * h * w);
    for p in 0..h * w {
        for ch in 0..c {
            bytes.push(to_byte(d[ch * h * w + p]));
        }
    }
    encode(w, h, color, &bytes)
}

/// Single-hue RGBA overlay: red with opacity proportional to the map value, transparent at 0.
pub fn encode_heatmap_png(map: &PixelSaliencyMap) -> Result<Vec<u8>> {
    let max = map.max();
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut bytes = Vec::with_capacity(4 * map.values.len());
    for &v in &map.values {
        bytes.extend_from_slice(&[255, 0, 0, to_byte(v * scale)]);
    }
    encode(map.width, map.height, ::png::ColorType::Rgba, &bytes)
}
