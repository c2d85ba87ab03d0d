//! Binary PGM (P5, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use super::{LabelMap, SarImage};
use crate::error::{Error, Result};

/// Raw 8-bit raster as stored in a P5 file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayRaster {
    pub width: usize,
    pub height: usize,
    pub bytes: Vec<u8>,
}

struct HeaderReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.buf.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.buf.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(match self.buf.get(self.pos) {
                None => self.err(format!("unexpected end of header while reading {what}")),
                Some(&b) => self.err(format!("expected {what}, found byte 0x{b:02x}")),
            });
        }
        let text = std::str::from_utf8(&self.buf[start..self.pos]).expect("ascii digits");
        text.parse::<usize>().map_err(|_| Error::Parse {
            offset: start,
            message: format!("{what} {text} is out of range"),
        })
    }
}

pub fn parse_pgm(buf: &[u8]) -> Result<GrayRaster> {
    let mut r = HeaderReader { buf, pos: 0 };
    if buf.len() < 2 || &buf[..2] != b"P5" {
        return Err(r.err("missing P5 magic"));
    }
    r.pos = 2;
    if !buf.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(r.err("magic must be followed by whitespace"));
    }
    let width = r.read_uint("width")?;
    let height = r.read_uint("height")?;
    r.skip_whitespace_and_comments();
    let maxval_at = r.pos;
    let maxval = r.read_uint("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Parse {
            offset: maxval_at,
            message: format!("zero-sized image {width}x{height}"),
        });
    }
    if maxval != 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            message: format!("maxval {maxval} unsupported, only 255"),
        });
    }
    match buf.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        Some(_) => return Err(r.err("maxval must be followed by a single whitespace byte")),
        None => return Err(r.err("header ends before pixel data")),
    }
    let need = width
        .checked_mul(height)
        .ok_or_else(|| r.err("image dims overflow"))?;
    let available = buf.len() - r.pos;
    if available < need {
        return Err(Error::Parse {
            offset: buf.len(),
            message: format!("truncated payload: need {need} bytes, found {available}"),
        });
    }
    Ok(GrayRaster {
        width,
        height,
        bytes: buf[r.pos..r.pos + need].to_vec(),
    })
}

pub fn write_pgm_bytes(raster: &GrayRaster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.bytes);
    out
}

fn read_file(path: &Path) -> Result<GrayRaster> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&buf)
}

fn write_file(path: &Path, raster: &GrayRaster) -> Result<()> {
    fs::write(path, write_pgm_bytes(raster)).map_err(|e| Error::io(path, e))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<SarImage> {
    let raster = read_file(path.as_ref())?;
    let pixels = raster.bytes.iter().map(|&b| b as f64 / 255.0).collect();
    SarImage::new(raster.height, raster.width, pixels)
}

pub fn save_pgm(path: impl AsRef<Path>, image: &SarImage) -> Result<()> {
    write_file(
        path.as_ref(),
        &GrayRaster {
            width: image.width(),
            height: image.height(),
            bytes: image.to_bytes(),
        },
    )
}

/// Loads a P5 file whose bytes are raw class indices.
pub fn load_mask(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelMap> {
    let raster = read_file(path.as_ref())?;
    LabelMap::new(raster.height, raster.width, num_classes, raster.bytes)
}

pub fn save_mask(path: impl AsRef<Path>, mask: &LabelMap) -> Result<()> {
    write_file(
        path.as_ref(),
        &GrayRaster {
            width: mask.width(),
            height: mask.height(),
            bytes: mask.labels().to_vec(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p5(w: usize, h: usize, bytes: &[u8]) -> Vec<u8> {
        write_pgm_bytes(&GrayRaster {
            width: w,
            height: h,
            bytes: bytes.to_vec(),
        })
    }

    #[test]
    fn loads_pixel_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        fs::write(&path, p5(1, 1, &[255])).unwrap();
        assert_eq!(load_pgm(&path).unwrap().pixels(), &[1.0]);
        fs::write(&path, p5(1, 1, &[0])).unwrap();
        assert_eq!(load_pgm(&path).unwrap().pixels(), &[0.0]);
        fs::write(&path, p5(2, 2, &[0, 51, 102, 255])).unwrap();
        let img = load_pgm(&path).unwrap();
        assert_eq!(img.pixels(), &[0.0, 0.2, 0.4, 1.0]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let buf = b"P5 # made by hand\n3 # width\n1\n255\n\x01\x02\x03";
        let r = parse_pgm(buf).unwrap();
        assert_eq!((r.width, r.height), (3, 1));
        assert_eq!(r.bytes, vec![1, 2, 3]);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        match parse_pgm(b"P2\n1 1\n255\n0") {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_pgm(b"P5\n1 x\n255\n0") {
            Err(Error::Parse { offset: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_pgm(b"P5\n1 1\n65535\n00") {
            Err(Error::Parse { offset: 7, message }) => assert!(message.contains("maxval")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut buf = p5(3, 2, &[1, 2, 3, 4, 5, 6]);
        buf.truncate(buf.len() - 2);
        let len = buf.len();
        match parse_pgm(&buf) {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, len);
                assert!(message.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mask_class_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        fs::write(&path, p5(2, 1, &[0, 0])).unwrap();
        assert!(load_mask(&path, 2).unwrap().labels().iter().all(|&l| l == 0));
        fs::write(&path, p5(2, 1, &[0, 4])).unwrap();
        assert_eq!(load_mask(&path, 5).unwrap().get(0, 1), 4);
        fs::write(&path, p5(2, 1, &[0, 5])).unwrap();
        match load_mask(&path, 5) {
            Err(Error::Validation(msg)) => assert!(msg.contains("(0, 1)"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    fn raster() -> impl Strategy<Value = (usize, usize, Vec<u8>)> {
        (1usize..12, 1usize..12)
            .prop_flat_map(|(w, h)| (Just(w), Just(h), proptest::collection::vec(any::<u8>(), w * h)))
    }

    proptest! {
        #[test]
        fn canonical_files_round_trip((w, h, bytes) in raster()) {
            let file = p5(w, h, &bytes);
            let dir = tempfile::tempdir().unwrap();
            let src = dir.path().join("src.pgm");
            let dst = dir.path().join("dst.pgm");
            fs::write(&src, &file).unwrap();
            save_pgm(&dst, &load_pgm(&src).unwrap()).unwrap();
            prop_assert_eq!(fs::read(&dst).unwrap(), file);
        }
    }
}
