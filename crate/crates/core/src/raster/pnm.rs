//! Binary PPM (P6) / PGM (P5) with maxval 255, and probability-map files.

use std::fs;
use std::path::Path;

use super::{ImageTensor, LabelMap, ProbMap};
use crate::error::{Error, Result};
use crate::tensor::{io as tensor_io, Tensor};

/// First line of a probability-map file; a TNSR blob of dims `[H, W, N]` follows.
const PROB_TAG: &[u8] = b"PROB\n";

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    let err = |offset: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(err(0, format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err(pos, "truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, format!("expected header field {}", i + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| err(start, "header value out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(err(pos, format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(err(pos, "zero image dimension".into()));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected whitespace after maxval".into())),
    }
    Ok(Header {
        width,
        height,
        data_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, samples: usize, path: &Path) -> Result<&'a [u8]> {
    let need = header.width * header.height * samples;
    let end = header.data_start + need;
    if bytes.len() < end {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len(),
            msg: format!("truncated raster, expected {need} bytes of samples"),
        });
    }
    Ok(&bytes[header.data_start..end])
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_ppm(image: &ImageTensor) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::Invalid(format!("PPM needs 3 channels, image has {}", image.channels())));
    }
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    for r in 0..image.height() {
        for c in 0..image.width() {
            for ch in 0..3 {
                out.push(to_byte(image.get(r, c, ch)));
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<ImageTensor> {
    let header = parse_header(bytes, b"P6", path)?;
    let raw = payload(bytes, &header, 3, path)?;
    let (h, w) = (header.height, header.width);
    let mut image = ImageTensor::zeros(h, w, 3);
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for (ch, &b) in px.iter().enumerate() {
            image.set(i / w, i % w, ch, b as f64 / 255.0);
        }
    }
    Ok(image)
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend_from_slice(labels.data());
    out
}

/// Decodes a label PGM, validating labels against `num_classes` when given.
pub fn decode_pgm(bytes: &[u8], path: &Path, num_classes: Option<usize>) -> Result<LabelMap> {
    let header = parse_header(bytes, b"P5", path)?;
    let raw = payload(bytes, &header, 1, path)?;
    let labels = LabelMap::new(header.height, header.width, raw.to_vec())?;
    if let Some(n) = num_classes {
        labels.validate(n)?;
    }
    Ok(labels)
}

pub fn write_ppm(path: &Path, image: &ImageTensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    fs::write(path, encode_pgm(labels)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path, num_classes: Option<usize>) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path, num_classes)
}

pub fn encode_prob(map: &ProbMap) -> Vec<u8> {
    let (h, w, n) = (map.height(), map.width(), map.classes());
    let mut interleaved = Vec::with_capacity(h * w * n);
    for r in 0..h {
        for c in 0..w {
            for k in 0..n {
                interleaved.push(map.get(r, c, k));
            }
        }
    }
    let tensor = Tensor::new(vec![h, w, n], interleaved).expect("prob map dims are positive");
    let mut out = PROB_TAG.to_vec();
    out.extend(tensor_io::encode(&tensor));
    out
}

pub fn decode_prob(bytes: &[u8], path: &Path) -> Result<ProbMap> {
    if !bytes.starts_with(PROB_TAG) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            msg: "missing PROB tag".into(),
        });
    }
    let tensor = tensor_io::decode(&bytes[PROB_TAG.len()..], path)?;
    let [h, w, n] = tensor.shape()[..] else {
        return Err(Error::Format(format!("prob map must be rank 3, got {:?}", tensor.shape())));
    };
    let src = tensor.data();
    let mut planar = vec![0.0; h * w * n];
    for r in 0..h {
        for c in 0..w {
            for k in 0..n {
                planar[(k * h + r) * w + c] = src[(r * w + c) * n + k];
            }
        }
    }
    ProbMap::from_planar(h, w, n, planar)
}

pub fn write_prob(path: &Path, map: &ProbMap) -> Result<()> {
    fs::write(path, encode_prob(map)).map_err(|e| Error::io(path, e))
}

pub fn read_prob(path: &Path) -> Result<ProbMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_prob(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn label_maps_round_trip(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let data = (0..h * w).map(|i| ((seed >> (i % 60)) & 3) as u8).collect();
            let labels = LabelMap::new(h, w, data).unwrap();
            let back = decode_pgm(&encode_pgm(&labels), Path::new("mem"), Some(4)).unwrap();
            prop_assert_eq!(back, labels);
        }

        #[test]
        fn eight_bit_images_round_trip(bytes in prop::collection::vec(any::<u8>(), 3 * 6)) {
            let mut ppm = b"P6\n3 2\n255\n".to_vec();
            ppm.extend_from_slice(&bytes);
            let img = decode_ppm(&ppm, Path::new("mem")).unwrap();
            prop_assert_eq!(encode_ppm(&img).unwrap(), ppm);
        }
    }

    #[test]
    fn byte_255_maps_to_one() {
        let ppm = b"P6\n1 1\n255\n\xff\x00\x80".to_vec();
        let img = decode_ppm(&ppm, Path::new("mem")).unwrap();
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(0, 0, 1), 0.0);
        assert_eq!(img.get(0, 0, 2), 128.0 / 255.0);
    }

    #[test]
    fn header_comments_are_skipped() {
        let pgm = b"P5\n# made by hand\n2 1\n255\n\x01\x00".to_vec();
        let l = decode_pgm(&pgm, Path::new("mem"), None).unwrap();
        assert_eq!(l.data(), &[1, 0]);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let pgm = b"P5\n4 4\n255\n\x00\x01".to_vec();
        match decode_pgm(&pgm, Path::new("t.pgm"), None) {
            Err(Error::Parse { offset, msg, .. }) => {
                assert_eq!(offset, pgm.len());
                assert!(msg.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_maxval_are_rejected() {
        assert!(decode_pgm(b"P2\n1 1\n255\n\x00", Path::new("m"), None).is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00", Path::new("m"), None).is_err());
    }

    #[test]
    fn label_range_is_validated_at_load() {
        let pgm = encode_pgm(&LabelMap::new(1, 2, vec![0, 2]).unwrap());
        assert!(matches!(
            decode_pgm(&pgm, Path::new("m"), Some(2)),
            Err(Error::ClassRange { class_id: 2, .. })
        ));
    }

    #[test]
    fn prob_map_round_trip_is_bit_exact() {
        let p = ProbMap::from_planar(2, 1, 2, vec![0.25, 0.9, 0.75, 0.1]).unwrap();
        let back = decode_prob(&encode_prob(&p), Path::new("m")).unwrap();
        assert!(back.bit_eq(&p));
    }
}
