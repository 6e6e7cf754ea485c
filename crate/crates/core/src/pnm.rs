//! Binary netpbm images: P6 (RGB) and P5 (grayscale), 8 bits per sample.

use std::fs;
use std::io;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for grayscale, 3 for RGB.
    pub channels: usize,
    /// Interleaved, row-major.
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn rgb(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height * 3, "rgb buffer size");
        Self {
            width,
            height,
            channels: 3,
            pixels,
        }
    }

    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height, "gray buffer size");
        Self {
            width,
            height,
            channels: 1,
            pixels,
        }
    }

    /// Builds an interleaved RGB image from planar `[3, H, W]` data.
    pub fn from_planar_rgb(width: usize, height: usize, planar: &[u8]) -> Self {
        let n = width * height;
        assert_eq!(planar.len(), 3 * n, "planar buffer size");
        let pixels = (0..n)
            .flat_map(|i| [planar[i], planar[n + i], planar[2 * n + i]])
            .collect();
        Self::rgb(width, height, pixels)
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.encode())
    }

    pub fn decode(bytes: &[u8]) -> io::Result<Self> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let channels = match bytes.get(..2) {
            Some(b"P6") => 3,
            Some(b"P5") => 1,
            _ => return Err(bad("not a binary PPM/PGM")),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            // Whitespace and `#` comments may separate header fields.
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("malformed header"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(bad("only 8-bit images are supported"));
        }
        pos += 1;
        let n = width * height * channels;
        let pixels = bytes
            .get(pos..pos + n)
            .ok_or_else(|| bad("truncated pixel data"))?
            .to_vec();
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
