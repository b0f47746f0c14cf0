//! Language-driven segmentation contract: class-name text in, binary
//! class-presence mask out.
//!
//! Backends: `stub` (reads the planted-region metadata the toy generator
//! emits — exact ground truth for tests), `empty` (always detects nothing),
//! and `remote` (a service speaking the framed protocol documented in
//! `docs/segmentation-api.md`).

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::ImageView;

/// Binary class-presence mask for one image.
#[derive(Debug, Clone)]
pub struct SegmentationMask {
    pub mask: Array2<bool>,
    pub prompt: String,
    /// Confidence of each detection that contributed to the mask.
    pub confidences: Vec<f64>,
}

impl SegmentationMask {
    pub fn empty(height: usize, width: usize, prompt: &str) -> Self {
        SegmentationMask {
            mask: Array2::from_elem((height, width), false),
            prompt: prompt.to_string(),
            confidences: vec![],
        }
    }

    pub fn true_count(&self) -> usize {
        self.mask.iter().filter(|v| **v).count()
    }
}

fn default_backend() -> String {
    "stub".to_string()
}
fn default_threshold() -> f64 {
    0.35
}

/// Segmenter selection and thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    /// Backend id: `stub`, `empty` or `remote`.
    pub backend: String,
    /// Detections below this confidence are discarded before the union.
    pub box_confidence_threshold: f64,
    /// Address of the remote service (`host:port`), `remote` backend only.
    pub remote_addr: Option<String>,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            backend: default_backend(),
            box_confidence_threshold: default_threshold(),
            remote_addr: None,
        }
    }
}

/// Text-prompted segmentation backend. Stateless per call.
pub trait Segmenter: Send + Sync {
    fn id(&self) -> &str;

    /// Union of detection masks above the confidence threshold; an all-false
    /// mask means the prompted concept was not found.
    fn segment(&self, image: ImageView<'_>, prompt: &str) -> Result<SegmentationMask>;
}

fn validate_inputs(image: &ImageView<'_>, prompt: &str) -> Result<(usize, usize)> {
    if prompt.trim().is_empty() {
        return Err(Error::Contract("segmentation prompt must be nonempty".into()));
    }
    let shape = image.pixels.shape();
    let (h, w) = (shape[1], shape[2]);
    if h == 0 || w == 0 {
        return Err(Error::Contract("cannot segment an empty image".into()));
    }
    if !image.pixels.iter().all(|v| v.is_finite()) {
        return Err(Error::Contract("cannot segment an image with non-finite pixels".into()));
    }
    Ok((h, w))
}

/// Oracle backend over planted-region metadata.
pub struct StubSegmenter {
    pub threshold: f64,
}

impl Segmenter for StubSegmenter {
    fn id(&self) -> &str {
        "stub"
    }

    fn segment(&self, image: ImageView<'_>, prompt: &str) -> Result<SegmentationMask> {
        let (h, w) = validate_inputs(&image, prompt)?;
        let mut out = SegmentationMask::empty(h, w, prompt);
        for region in image.regions {
            if region.concept == prompt && region.confidence >= self.threshold {
                if region.mask.dim() != (h, w) {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{h}x{w} region mask"),
                        got: format!("{:?}", region.mask.dim()),
                    });
                }
                out.confidences.push(region.confidence);
                for (o, r) in out.mask.iter_mut().zip(region.mask.iter()) {
                    *o = *o || *r;
                }
            }
        }
        Ok(out)
    }
}

/// Backend that never detects anything; used to ablate the discovery loop.
pub struct EmptySegmenter;

impl Segmenter for EmptySegmenter {
    fn id(&self) -> &str {
        "empty"
    }

    fn segment(&self, image: ImageView<'_>, prompt: &str) -> Result<SegmentationMask> {
        let (h, w) = validate_inputs(&image, prompt)?;
        Ok(SegmentationMask::empty(h, w, prompt))
    }
}

/// Client for a remote text-prompted segmentation service.
pub struct RemoteSegmenter {
    pub addr: String,
    pub threshold: f64,
}

impl Segmenter for RemoteSegmenter {
    fn id(&self) -> &str {
        "remote"
    }

    fn segment(&self, image: ImageView<'_>, prompt: &str) -> Result<SegmentationMask> {
        let (h, w) = validate_inputs(&image, prompt)?;
        let request = encode_request(image, prompt);
        let mut stream = TcpStream::connect(&self.addr)
            .map_err(|e| Error::SegmenterUnavailable(format!("connect {}: {e}", self.addr)))?;
        stream
            .write_all(&request)
            .and_then(|_| stream.flush())
            .map_err(|e| Error::SegmenterUnavailable(format!("send: {e}")))?;
        let mut response = Vec::new();
        stream
            .read_to_end(&mut response)
            .map_err(|e| Error::SegmenterUnavailable(format!("receive: {e}")))?;
        let detections = decode_response(&response, h, w)?;
        let mut out = SegmentationMask::empty(h, w, prompt);
        for det in detections {
            if det.confidence >= self.threshold {
                out.confidences.push(det.confidence);
                for (o, r) in out.mask.iter_mut().zip(det.mask.iter()) {
                    *o = *o || *r;
                }
            }
        }
        Ok(out)
    }
}

/// Build a segmenter from config. Unknown or unreachable backends fail
/// explicitly; nothing falls back to an empty mask silently.
pub fn build_segmenter(cfg: &SegmenterConfig) -> Result<Arc<dyn Segmenter>> {
    match cfg.backend.as_str() {
        "stub" => Ok(Arc::new(StubSegmenter { threshold: cfg.box_confidence_threshold })),
        "empty" => Ok(Arc::new(EmptySegmenter)),
        "remote" => {
            let addr = cfg.remote_addr.clone().ok_or_else(|| {
                Error::Config("remote segmenter requires remote_addr (host:port)".into())
            })?;
            Ok(Arc::new(RemoteSegmenter { addr, threshold: cfg.box_confidence_threshold }))
        }
        other => Err(Error::SegmenterUnavailable(format!(
            "unknown segmenter backend {other:?}; available: stub, empty, remote"
        ))),
    }
}

// ---- wire protocol (see docs/segmentation-api.md) -----------------------

pub const PROTOCOL_MAGIC: &[u8; 4] = b"PSEG";
pub const PROTOCOL_VERSION: u16 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Schema("segmentation frame truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// One detection parsed from a response frame.
pub struct Detection {
    pub confidence: f64,
    pub mask: Array2<bool>,
}

/// Encode a request frame: magic, version, prompt, dimensions, RGB8 pixels
/// (row-major, channel-interleaved), all little-endian.
pub fn encode_request(image: ImageView<'_>, prompt: &str) -> Vec<u8> {
    let shape = image.pixels.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut buf = Vec::with_capacity(16 + prompt.len() + h * w * 3);
    buf.extend_from_slice(PROTOCOL_MAGIC);
    buf.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    let pb = prompt.as_bytes();
    buf.extend_from_slice(&(pb.len() as u16).to_le_bytes());
    buf.extend_from_slice(pb);
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.push(3);
    buf.push(0); // pixel format 0: RGB8
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = if ch < c { image.pixels[[ch, y, x]] } else { 0.0 };
                buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    buf
}

/// Decode a response frame into detections; validates magic, version,
/// status, dimensions and RLE totals.
pub fn decode_response(buf: &[u8], expect_h: usize, expect_w: usize) -> Result<Vec<Detection>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4)?;
    if magic != PROTOCOL_MAGIC {
        return Err(Error::Schema("segmentation response: bad magic".into()));
    }
    let version = r.u16()?;
    if version != PROTOCOL_VERSION {
        return Err(Error::Schema(format!("segmentation response: unsupported version {version}")));
    }
    let status = r.u8()?;
    if status != 0 {
        let len = r.u16()? as usize;
        let msg = String::from_utf8_lossy(r.take(len)?).to_string();
        return Err(Error::SegmenterUnavailable(format!("service error: {msg}")));
    }
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    if (h, w) != (expect_h, expect_w) {
        return Err(Error::ShapeMismatch {
            expected: format!("{expect_h}x{expect_w} mask"),
            got: format!("{h}x{w}"),
        });
    }
    let boxes = r.u16()? as usize;
    let mut out = Vec::with_capacity(boxes);
    for _ in 0..boxes {
        let confidence = f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64;
        let runs = r.u32()? as usize;
        let mut rle = Vec::with_capacity(runs);
        for _ in 0..runs {
            rle.push(r.u32()?);
        }
        let mask = rle_decode(&rle, h, w)?;
        out.push(Detection { confidence, mask });
    }
    Ok(out)
}

/// Encode a server response carrying the given detections.
pub fn encode_response(detections: &[(f32, &Array2<bool>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PROTOCOL_MAGIC);
    buf.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    buf.push(0);
    let (h, w) = detections
        .first()
        .map(|(_, m)| m.dim())
        .unwrap_or((0, 0));
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(detections.len() as u16).to_le_bytes());
    for (conf, mask) in detections {
        buf.extend_from_slice(&conf.to_le_bytes());
        let rle = rle_encode(mask);
        buf.extend_from_slice(&(rle.len() as u32).to_le_bytes());
        for run in rle {
            buf.extend_from_slice(&run.to_le_bytes());
        }
    }
    buf
}

/// Encode a server error response.
pub fn encode_error_response(message: &str) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PROTOCOL_MAGIC);
    buf.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    buf.push(1);
    let mb = message.as_bytes();
    buf.extend_from_slice(&(mb.len() as u16).to_le_bytes());
    buf.extend_from_slice(mb);
    buf
}

/// Parse a request frame; returns `(prompt, height, width, rgb8 pixels)`.
/// Provided for test servers and service implementations.
pub fn decode_request(buf: &[u8]) -> Result<(String, usize, usize, Vec<u8>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != PROTOCOL_MAGIC {
        return Err(Error::Schema("segmentation request: bad magic".into()));
    }
    if r.u16()? != PROTOCOL_VERSION {
        return Err(Error::Schema("segmentation request: unsupported version".into()));
    }
    let plen = r.u16()? as usize;
    let prompt = String::from_utf8_lossy(r.take(plen)?).to_string();
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let channels = r.u8()?;
    let format = r.u8()?;
    if channels != 3 || format != 0 {
        return Err(Error::Schema("segmentation request: expected RGB8".into()));
    }
    let pixels = r.take(h * w * 3)?.to_vec();
    Ok((prompt, h, w, pixels))
}

/// Row-major RLE: alternating run lengths starting with a false-run (which
/// may be zero); runs sum to `h * w`.
pub fn rle_encode(mask: &Array2<bool>) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut count: u32 = 0;
    for v in mask.iter() {
        if *v == current {
            count += 1;
        } else {
            runs.push(count);
            current = *v;
            count = 1;
        }
    }
    runs.push(count);
    runs
}

pub fn rle_decode(runs: &[u32], h: usize, w: usize) -> Result<Array2<bool>> {
    let total: u64 = runs.iter().map(|r| *r as u64).sum();
    if total != (h * w) as u64 {
        return Err(Error::Schema(format!(
            "RLE runs sum to {total}, mask has {} pixels",
            h * w
        )));
    }
    let mut flat = Vec::with_capacity(h * w);
    let mut value = false;
    for run in runs {
        for _ in 0..*run {
            flat.push(value);
        }
        value = !value;
    }
    Ok(Array2::from_shape_vec((h, w), flat).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::PlantedRegion;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn patch_mask(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Array2<bool> {
        let mut m = Array2::from_elem((h, w), false);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m[[y, x]] = true;
            }
        }
        m
    }

    fn image_with(regions: Vec<PlantedRegion>) -> (Array3<f64>, Vec<PlantedRegion>) {
        (Array3::from_elem((3, 64, 64), 0.5), regions)
    }

    #[test]
    fn stub_returns_exactly_the_planted_patch() {
        let patch = Arc::new(patch_mask(64, 64, 8, 8, 16));
        let (pixels, regions) = image_with(vec![PlantedRegion {
            concept: "circle".into(),
            mask: patch.clone(),
            confidence: 0.9,
        }]);
        let seg = StubSegmenter { threshold: 0.35 };
        let out = seg
            .segment(ImageView { pixels: &pixels, regions: &regions }, "circle")
            .unwrap();
        assert_eq!(out.mask, *patch);
        assert_eq!(out.true_count(), 256);
        assert_eq!(out.confidences, vec![0.9]);
    }

    #[test]
    fn stub_non_matching_prompt_is_all_false() {
        let patch = Arc::new(patch_mask(64, 64, 8, 8, 16));
        let (pixels, regions) = image_with(vec![PlantedRegion {
            concept: "circle".into(),
            mask: patch,
            confidence: 0.9,
        }]);
        let seg = StubSegmenter { threshold: 0.35 };
        let out = seg
            .segment(ImageView { pixels: &pixels, regions: &regions }, "square")
            .unwrap();
        assert_eq!(out.true_count(), 0);
    }

    #[test]
    fn union_of_disjoint_boxes_sums_areas() {
        // pixel-count oracle: areas of disjoint patches add
        let a = Arc::new(patch_mask(64, 64, 0, 0, 10));
        let b = Arc::new(patch_mask(64, 64, 30, 30, 12));
        let (pixels, regions) = image_with(vec![
            PlantedRegion { concept: "circle".into(), mask: a, confidence: 0.8 },
            PlantedRegion { concept: "circle".into(), mask: b, confidence: 0.6 },
        ]);
        let seg = StubSegmenter { threshold: 0.35 };
        let out = seg
            .segment(ImageView { pixels: &pixels, regions: &regions }, "circle")
            .unwrap();
        assert_eq!(out.true_count(), 100 + 144);
        assert_eq!(out.confidences.len(), 2);
    }

    #[test]
    fn below_threshold_detections_are_dropped() {
        let patch = Arc::new(patch_mask(64, 64, 8, 8, 16));
        let (pixels, regions) = image_with(vec![PlantedRegion {
            concept: "circle".into(),
            mask: patch,
            confidence: 0.2,
        }]);
        let seg = StubSegmenter { threshold: 0.35 };
        let out = seg
            .segment(ImageView { pixels: &pixels, regions: &regions }, "circle")
            .unwrap();
        assert_eq!(out.true_count(), 0);
    }

    #[test]
    fn stub_is_idempotent_and_shape_stable() {
        let patch = Arc::new(patch_mask(64, 64, 4, 4, 8));
        let (pixels, regions) = image_with(vec![PlantedRegion {
            concept: "dots".into(),
            mask: patch,
            confidence: 0.5,
        }]);
        let seg = StubSegmenter { threshold: 0.35 };
        let a = seg.segment(ImageView { pixels: &pixels, regions: &regions }, "dots").unwrap();
        let b = seg.segment(ImageView { pixels: &pixels, regions: &regions }, "dots").unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.mask.dim(), (64, 64));
    }

    #[test]
    fn empty_prompt_rejected() {
        let (pixels, regions) = image_with(vec![]);
        let seg = StubSegmenter { threshold: 0.35 };
        assert!(seg
            .segment(ImageView { pixels: &pixels, regions: &regions }, "  ")
            .is_err());
    }

    #[test]
    fn unknown_backend_fails_explicitly() {
        let cfg = SegmenterConfig { backend: "imaginary".into(), ..Default::default() };
        match build_segmenter(&cfg) {
            Ok(_) => panic!("unknown backend must fail"),
            Err(e) => assert!(matches!(e, Error::SegmenterUnavailable(_))),
        }
    }

    #[test]
    fn remote_without_address_is_a_config_error() {
        let cfg = SegmenterConfig { backend: "remote".into(), ..Default::default() };
        match build_segmenter(&cfg) {
            Ok(_) => panic!("remote backend without address must fail"),
            Err(e) => assert!(matches!(e, Error::Config(_))),
        }
    }

    #[test]
    fn remote_round_trip_against_loopback_service() {
        use std::net::TcpListener;
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            // read until the request is complete (fixed-size image payload)
            let mut chunk = [0u8; 4096];
            loop {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                if let Ok((prompt, h, w, _)) = decode_request(&buf) {
                    let response = if prompt == "circle" {
                        let mask = patch_mask(h, w, 2, 2, 5);
                        encode_response(&[(0.9, &mask), (0.2, &patch_mask(h, w, 20, 20, 3))])
                    } else {
                        encode_response(&[])
                    };
                    stream.write_all(&response).unwrap();
                    break;
                }
                if n == 0 {
                    break;
                }
            }
        });

        let (pixels, regions) = image_with(vec![]);
        let seg = RemoteSegmenter { addr, threshold: 0.35 };
        let out = seg
            .segment(ImageView { pixels: &pixels, regions: &regions }, "circle")
            .unwrap();
        server.join().unwrap();
        // only the 0.9-confidence detection survives the threshold
        assert_eq!(out.true_count(), 25);
        assert_eq!(out.confidences.len(), 1);
        assert!((out.confidences[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn remote_unreachable_is_explicit_failure() {
        let (pixels, regions) = image_with(vec![]);
        let seg = RemoteSegmenter { addr: "127.0.0.1:1".into(), threshold: 0.35 };
        let err = seg
            .segment(ImageView { pixels: &pixels, regions: &regions }, "circle")
            .unwrap_err();
        assert!(matches!(err, Error::SegmenterUnavailable(_)));
    }

    proptest! {
        #[test]
        fn rle_round_trips(bits in proptest::collection::vec(any::<bool>(), 1..256)) {
            let w = 16usize;
            let h = bits.len().div_ceil(w);
            let mut flat = bits.clone();
            flat.resize(h * w, false);
            let mask = Array2::from_shape_vec((h, w), flat).unwrap();
            let rle = rle_encode(&mask);
            let back = rle_decode(&rle, h, w).unwrap();
            prop_assert_eq!(mask, back);
        }
    }
}
