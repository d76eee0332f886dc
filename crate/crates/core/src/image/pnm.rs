//! Binary netpbm (P5 / P6) with 8-bit samples.

use super::plane::{rgb_to_luma, ImagePlane};
use crate::error::{Error, Result};

/// A decoded netpbm image.
#[derive(Clone, Debug, PartialEq)]
pub enum Pnm {
    Gray(ImagePlane),
    Rgb([ImagePlane; 3]),
}

impl Pnm {
    /// Luminance view; RGB goes through [`rgb_to_luma`].
    pub fn into_luma(self) -> Result<ImagePlane> {
        match self {
            Pnm::Gray(p) => Ok(p),
            Pnm::Rgb([r, g, b]) => rgb_to_luma(&r, &g, &b),
        }
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    payload_offset: usize,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_ws_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, format!("{what} out of range")))
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'5' | b'6') {
        return Err(parse_err(0, "expected magic P5 or P6"));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_ws_and_comments();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(2, format!("zero-sized image {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(parse_err(maxval_at, format!("unsupported maxval {maxval}")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(parse_err(cur.pos, "missing whitespace before raster")),
    }
    Ok(Header {
        magic: [bytes[0], bytes[1]],
        width,
        height,
        payload_offset: cur.pos + 1,
    })
}

/// Decodes a P5 or P6 file.
pub fn read_pnm(bytes: &[u8]) -> Result<Pnm> {
    let h = parse_header(bytes)?;
    let channels = if h.magic[1] == b'5' { 1 } else { 3 };
    let n = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| parse_err(2, "image dimensions overflow"))?;
    let payload = &bytes[h.payload_offset..];
    if payload.len() < n {
        return Err(parse_err(
            h.payload_offset + payload.len(),
            format!("truncated raster: {} of {n} bytes", payload.len()),
        ));
    }
    let payload = &payload[..n];
    if channels == 1 {
        let data = payload.iter().map(|&b| f64::from(b)).collect();
        return Ok(Pnm::Gray(ImagePlane::new(h.width, h.height, data)?));
    }
    let plane = |c: usize| {
        let data = payload.iter().skip(c).step_by(3).map(|&b| f64::from(b)).collect();
        ImagePlane::new(h.width, h.height, data)
    };
    Ok(Pnm::Rgb([plane(0)?, plane(1)?, plane(2)?]))
}

/// Decodes a binary PGM (P5).
pub fn read_pgm(bytes: &[u8]) -> Result<ImagePlane> {
    match read_pnm(bytes)? {
        Pnm::Gray(p) => Ok(p),
        Pnm::Rgb(_) => Err(parse_err(0, "expected magic P5, found P6")),
    }
}

/// Decodes a binary PPM (P6) into its three channel planes.
pub fn read_ppm(bytes: &[u8]) -> Result<[ImagePlane; 3]> {
    match read_pnm(bytes)? {
        Pnm::Rgb(p) => Ok(p),
        Pnm::Gray(_) => Err(parse_err(0, "expected magic P6, found P5")),
    }
}

/// Encodes as P5 with maxval 255, clamping to `[0, 255]` and rounding half
/// away from zero.
pub fn write_pgm(img: &ImagePlane) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + img.len());
    out.extend_from_slice(header.as_bytes());
    out.extend(img.data().iter().map(|&v| v.clamp(0.0, 255.0).round() as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::strategy::Strategy;

    fn file(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut v = header.as_bytes().to_vec();
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn minimal_header() {
        let img = read_pgm(&file("P5 2 1 255 ", &[0, 255])).unwrap();
        assert_eq!(img.dims(), (2, 1));
        assert_eq!(img.data(), &[0.0, 255.0]);
    }

    #[test]
    fn comment_is_skipped() {
        let img = read_pgm(&file("P5 # c\n2 2 255\n", &[1, 2, 3, 4])).unwrap();
        assert_eq!(img.dims(), (2, 2));
        assert_eq!(img.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn truncated_payload() {
        let err = read_pgm(&file("P5 2 2 255\n", &[1, 2, 3])).unwrap_err();
        match err {
            Error::Parse { offset, message } => {
                assert_eq!(offset, 14);
                assert!(message.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_errors_name_offsets() {
        assert!(matches!(
            read_pgm(b"P2 1 1 255 \x00"),
            Err(Error::Parse { offset: 0, .. })
        ));
        assert!(matches!(
            read_pgm(b"P5 1 1 65535 \x00\x00"),
            Err(Error::Parse { offset: 7, .. })
        ));
        assert!(matches!(read_pgm(b"P5 x"), Err(Error::Parse { offset: 3, .. })));
    }

    #[test]
    fn write_clamps_and_rounds() {
        let img = ImagePlane::new(3, 1, vec![-3.0, 12.4, 300.0]).unwrap();
        let bytes = write_pgm(&img);
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 12, 255]);
        let half = ImagePlane::new(2, 1, vec![12.5, 0.49]).unwrap();
        let bytes = write_pgm(&half);
        assert_eq!(&bytes[bytes.len() - 2..], &[13, 0]);
    }

    #[test]
    fn payload_size_for_1080p() {
        let img = ImagePlane::filled(1920, 1080, 7.0);
        let bytes = write_pgm(&img);
        let header_len = "P5\n1920 1080\n255\n".len();
        assert_eq!(bytes.len() - header_len, 2_073_600);
    }

    #[test]
    fn ppm_channels_and_luma() {
        let bytes = file("P6\n1 2\n255\n", &[255, 0, 0, 0, 0, 255]);
        let [r, g, b] = read_ppm(&bytes).unwrap();
        assert_eq!(r.data(), &[255.0, 0.0]);
        assert_eq!(g.data(), &[0.0, 0.0]);
        assert_eq!(b.data(), &[0.0, 255.0]);
        let y = read_pnm(&bytes).unwrap().into_luma().unwrap();
        assert!((y.data()[0] - 76.245).abs() < 1e-12);
        assert!((y.data()[1] - 29.07).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn integer_planes_round_trip(
            (w, h, data) in (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
                (proptest::strategy::Just(w), proptest::strategy::Just(h),
                 proptest::collection::vec(0u8..=255, w * h))
            })
        ) {
            let img = ImagePlane::new(w, h, data.iter().map(|&b| f64::from(b)).collect()).unwrap();
            let back = read_pgm(&write_pgm(&img)).unwrap();
            proptest::prop_assert_eq!(back, img);
        }

        #[test]
        fn real_planes_quantize(data in proptest::collection::vec(-50.0..400.0f64, 6)) {
            let img = ImagePlane::new(3, 2, data.clone()).unwrap();
            let back = read_pgm(&write_pgm(&img)).unwrap();
            for (b, v) in back.data().iter().zip(&data) {
                proptest::prop_assert_eq!(*b, v.clamp(0.0, 255.0).round());
            }
        }
    }
}
