//! Minimal grayscale PNG files with pseudo-random pixels.

use rand::RngCore;

/// Encodes a `width` x `height` 8-bit grayscale image whose pixels come
/// from `rng`. Stored (uncompressed) deflate blocks keep the file size
/// close to `width * height` bytes.
pub fn random_png(width: u32, height: u32, rng: &mut impl RngCore) -> Vec<u8> {
    let mut pixels = vec![0u8; width as usize * height as usize];
    rng.fill_bytes(&mut pixels);
    encode_gray(width, height, &pixels)
}

/// Encodes row-major 8-bit grayscale `pixels`.
pub fn encode_gray(width: u32, height: u32, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width as usize * height as usize);
    let mut out = Vec::with_capacity(pixels.len() + pixels.len() / 100 + 128);
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::NoCompression);
        enc.set_filter(png::Filter::NoFilter);
        let mut writer = enc.write_header().expect("in-memory png header");
        writer.write_image_data(pixels).expect("in-memory png data");
        writer.finish().expect("in-memory png end");
    }
    out
}

/// Height giving roughly `target_bytes` for a grayscale image of `width`.
pub fn height_for(target_bytes: u64, width: u32) -> u32 {
    (target_bytes / u64::from(width).max(1)).clamp(1, u32::MAX as u64) as u32
}
