//! HTTP clients implementing the rollout engine's [`Policy`] and [`Tracker`]
//! traits against external model servers.
//!
//! Both speak JSON over HTTP: the policy server answers `POST /generate`,
//! the tracker answers `POST /propagate`. Images travel as base64 PNG.

use std::io::Cursor;
use std::path::Path;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::imageops::FilterType;
use image::ImageFormat;
use reqwest::blocking::Client;
use segchain_core::rng::StreamRng;
use segchain_core::rollout::{
    AdapterError, ImageRef, Policy, PolicyRequest, TrackRequest, Tracker,
};
use segchain_core::{FrameSize, MaskSequence};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub mod wire;

use wire::{
    FramesPayload, GenerateRequest, GenerateResponse, ManifestRef, PropagateRequest,
    PropagateResponse,
};

pub const POLICY_URL_ENV: &str = "SEGCHAIN_POLICY_URL";
pub const TRACKER_URL_ENV: &str = "SEGCHAIN_TRACKER_URL";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_RETRIES: u32 = 2;

/// Load an image file, resize it (ignoring aspect ratio) if `resize_to` is
/// given, and return it as base64 PNG.
pub fn encode_png_base64(
    path: &Path,
    resize_to: Option<FrameSize>,
) -> Result<String, AdapterError> {
    let mut img = image::open(path)
        .map_err(|e| AdapterError::Unavailable(format!("cannot load {}: {e}", path.display())))?;
    if let Some(size) = resize_to {
        if (img.width(), img.height()) != (size.width(), size.height()) {
            img = img.resize_exact(size.width(), size.height(), FilterType::Triangle);
        }
    }
    let mut png = Vec::new();
    img.write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
        .map_err(|e| AdapterError::Protocol(format!("PNG encoding failed: {e}")))?;
    Ok(STANDARD.encode(png))
}

fn encode_image(image: &ImageRef) -> Result<String, AdapterError> {
    let path = image.frame.path.as_ref().ok_or_else(|| {
        AdapterError::Unavailable(format!(
            "frame {} has no image file",
            image.frame.source_index
        ))
    })?;
    encode_png_base64(path, Some(image.resize_to))
}

/// Shared POST-with-retries logic.
#[derive(Debug, Clone)]
struct JsonEndpoint {
    url: String,
    client: Client,
    retries: u32,
    timeout: Duration,
}

impl JsonEndpoint {
    fn new(base: &str, route: &str, timeout: Duration, retries: u32) -> Result<Self, AdapterError> {
        let base = base.trim_end_matches('/');
        if base.is_empty() {
            return Err(AdapterError::Unavailable("endpoint URL is empty".into()));
        }
        let url = if base.ends_with(route) {
            base.to_owned()
        } else {
            format!("{base}{route}")
        };
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| AdapterError::Transport(e.to_string()))?;
        Ok(Self {
            url,
            client,
            retries,
            timeout,
        })
    }

    fn attempt<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        body: &Req,
    ) -> Result<Resp, AdapterError> {
        let response = self.client.post(&self.url).json(body).send().map_err(|e| {
            if e.is_timeout() {
                AdapterError::Timeout(self.timeout.as_millis() as u64)
            } else {
                AdapterError::Transport(e.to_string())
            }
        })?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| AdapterError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(AdapterError::Http {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| {
            AdapterError::Protocol(format!(
                "{e}: {}",
                text.chars().take(200).collect::<String>()
            ))
        })
    }

    /// Client errors (4xx) and malformed bodies are final; anything else is
    /// retried up to `retries` times.
    fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        body: &Req,
    ) -> Result<Resp, AdapterError> {
        let mut tries = 0;
        loop {
            match self.attempt(body) {
                Ok(r) => return Ok(r),
                Err(e) => {
                    let retryable = match &e {
                        AdapterError::Http { status, .. } => *status >= 500,
                        AdapterError::Transport(_) | AdapterError::Timeout(_) => true,
                        AdapterError::Protocol(_) | AdapterError::Unavailable(_) => false,
                    };
                    if !retryable || tries >= self.retries {
                        return Err(e);
                    }
                    tries += 1;
                    log::warn!("{} failed ({e}); retry {tries}/{}", self.url, self.retries);
                    thread::sleep(Duration::from_millis(100 * tries as u64));
                }
            }
        }
    }
}

/// A policy served over HTTP.
#[derive(Debug, Clone)]
pub struct HttpPolicy {
    endpoint: JsonEndpoint,
}

impl HttpPolicy {
    pub fn new(base_url: &str) -> Result<Self, AdapterError> {
        Self::with_options(base_url, DEFAULT_TIMEOUT, DEFAULT_RETRIES)
    }

    pub fn with_options(
        base_url: &str,
        timeout: Duration,
        retries: u32,
    ) -> Result<Self, AdapterError> {
        Ok(Self {
            endpoint: JsonEndpoint::new(base_url, "/generate", timeout, retries)?,
        })
    }

    /// From `SEGCHAIN_POLICY_URL`.
    pub fn from_env() -> Result<Self, AdapterError> {
        let url = std::env::var(POLICY_URL_ENV)
            .map_err(|_| AdapterError::Unavailable(format!("{POLICY_URL_ENV} is not set")))?;
        Self::new(&url)
    }

    pub fn url(&self) -> &str {
        &self.endpoint.url
    }

    pub fn wire_request(request: &PolicyRequest) -> Result<GenerateRequest, AdapterError> {
        Ok(GenerateRequest {
            round: request.round,
            prompt: request.prompt.clone(),
            images: request
                .images
                .iter()
                .map(encode_image)
                .collect::<Result<_, _>>()?,
            history: request.history.clone(),
        })
    }
}

impl Policy for HttpPolicy {
    /// Sampling happens server side; `rng` is unused.
    fn generate(
        &self,
        request: &PolicyRequest,
        _rng: &mut StreamRng,
    ) -> Result<String, AdapterError> {
        let body = Self::wire_request(request)?;
        let response: GenerateResponse = self.endpoint.post(&body)?;
        Ok(response.text)
    }
}

/// A mask tracker served over HTTP. Frames are sent inline when the video
/// lists image files, otherwise by reference.
#[derive(Debug, Clone)]
pub struct HttpTracker {
    endpoint: JsonEndpoint,
}

impl HttpTracker {
    pub fn new(base_url: &str) -> Result<Self, AdapterError> {
        Self::with_options(base_url, DEFAULT_TIMEOUT, DEFAULT_RETRIES)
    }

    pub fn with_options(
        base_url: &str,
        timeout: Duration,
        retries: u32,
    ) -> Result<Self, AdapterError> {
        Ok(Self {
            endpoint: JsonEndpoint::new(base_url, "/propagate", timeout, retries)?,
        })
    }

    /// From `SEGCHAIN_TRACKER_URL`.
    pub fn from_env() -> Result<Self, AdapterError> {
        let url = std::env::var(TRACKER_URL_ENV)
            .map_err(|_| AdapterError::Unavailable(format!("{TRACKER_URL_ENV} is not set")))?;
        Self::new(&url)
    }

    pub fn url(&self) -> &str {
        &self.endpoint.url
    }

    pub fn wire_request(request: &TrackRequest<'_>) -> Result<PropagateRequest, AdapterError> {
        let frames = match &request.video.frame_paths {
            Some(paths) => FramesPayload::Images(
                paths
                    .iter()
                    .map(|p| encode_png_base64(p, None))
                    .collect::<Result<_, _>>()?,
            ),
            None => FramesPayload::Reference {
                manifest_ref: ManifestRef {
                    video_id: request.video.id.clone(),
                    query_index: request.query_index,
                },
            },
        };
        Ok(PropagateRequest {
            frames,
            keyframe: request.keyframe,
            bbox: request.bbox.coords(),
        })
    }
}

impl Tracker for HttpTracker {
    fn propagate(&self, request: &TrackRequest<'_>) -> Result<MaskSequence, AdapterError> {
        let body = Self::wire_request(request)?;
        let response: PropagateResponse = self.endpoint.post(&body)?;
        if response.masks.len() != request.video.frame_count {
            return Err(AdapterError::Protocol(format!(
                "{} masks for {} frames",
                response.masks.len(),
                request.video.frame_count
            )));
        }
        let frames = response
            .masks
            .iter()
            .enumerate()
            .map(|(t, rle)| {
                let mask = rle
                    .decode()
                    .map_err(|e| AdapterError::Protocol(format!("mask {t}: {e}")))?;
                if mask.size() != request.video.size {
                    return Err(AdapterError::Protocol(format!(
                        "mask {t} is {}, video is {}",
                        mask.size(),
                        request.video.size
                    )));
                }
                Ok(mask)
            })
            .collect::<Result<Vec<_>, _>>()?;
        MaskSequence::new(frames).map_err(|e| AdapterError::Protocol(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routes_are_appended_once() {
        let p = HttpPolicy::new("http://localhost:9/").unwrap();
        assert_eq!(p.url(), "http://localhost:9/generate");
        let p = HttpPolicy::new("http://localhost:9/generate").unwrap();
        assert_eq!(p.url(), "http://localhost:9/generate");
        let t = HttpTracker::new("http://localhost:9").unwrap();
        assert_eq!(t.url(), "http://localhost:9/propagate");
        assert!(HttpPolicy::new("").is_err());
    }

    #[test]
    fn png_encoding_resizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        image::RgbImage::from_pixel(30, 20, image::Rgb([10, 20, 30]))
            .save(&path)
            .unwrap();
        let b64 = encode_png_base64(&path, Some(FrameSize::new(8, 8).unwrap())).unwrap();
        let bytes = STANDARD.decode(b64).unwrap();
        let img = image::load_from_memory(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (8, 8));
        assert!(encode_png_base64(&dir.path().join("missing.png"), None).is_err());
    }
}
