//! HTTP adapter to a remote noise-prediction service.
//!
//! Wire format (JSON):
//!
//! ```text
//! request  { "z": Array, "t": int, "context": Array, "guidance_scale": float, "lora_scale"?: float }
//! response { "eps": Array }
//! Array    { "shape": [int], "data": base64(row-major little-endian f32) }
//! ```

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{text, Backend, Codec, Conditioning, CrossAttentionHook};
use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::schedule::{Latent, NoiseSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireArray {
    pub shape: Vec<usize>,
    pub data: String,
}

impl WireArray {
    pub fn encode(a: &ArrayD<f64>) -> Self {
        let mut bytes = Vec::with_capacity(a.len() * 4);
        for v in a.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        Self {
            shape: a.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Self::encode(&m.clone().into_dyn())
    }

    pub fn decode(&self) -> Result<ArrayD<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Parameter(format!("array payload is not base64: {e}")))?;
        let expected: usize = self.shape.iter().product();
        if bytes.len() != expected * 4 {
            return Err(Error::Parameter(format!(
                "array payload has {} bytes, shape {:?} needs {}",
                bytes.len(),
                self.shape,
                expected * 4
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        ArrayD::from_shape_vec(IxDyn(&self.shape), values).map_err(|e| Error::Parameter(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsRequest {
    pub z: WireArray,
    pub t: usize,
    pub context: WireArray,
    pub guidance_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_scale: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsResponse {
    pub eps: WireArray,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Full URL of the noise-prediction endpoint.
    pub url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Passed through to the server untouched.
    #[serde(default)]
    pub lora_scale: Option<f64>,
    #[serde(default = "default_codec")]
    pub codec: Codec,
    #[serde(default = "default_tokens")]
    pub n_tokens: usize,
    #[serde(default = "default_context_dim")]
    pub context_dim: usize,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_in_flight() -> usize {
    4
}
fn default_codec() -> Codec {
    Codec::Identity
}
fn default_tokens() -> usize {
    8
}
fn default_context_dim() -> usize {
    16
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_max_in_flight(),
            lora_scale: None,
            codec: default_codec(),
            n_tokens: default_tokens(),
            context_dim: default_context_dim(),
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Stateless per call; the local side only owns the codec and text encoder.
pub struct RemoteBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    permits: Permits,
    schedule: NoiseSchedule,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend").field("config", &self.config).finish()
    }
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig, schedule: NoiseSchedule) -> Result<Self> {
        if config.max_in_flight == 0 {
            return Err(Error::Config("remote max_in_flight must be at least 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            permits: Permits {
                free: Mutex::new(config.max_in_flight),
                cv: Condvar::new(),
            },
            config,
            client,
            schedule,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }
}

/// Sends one request and validates the response shape.
pub fn remote_predict_eps(
    client: &reqwest::blocking::Client,
    config: &RemoteConfig,
    z: &Latent,
    t: usize,
    cond: &Conditioning,
) -> Result<Latent> {
    let request = EpsRequest {
        z: WireArray::encode(z),
        t,
        context: WireArray::from_matrix(&cond.context),
        guidance_scale: cond.guidance_scale,
        lora_scale: config.lora_scale,
    };
    let response = client.post(&config.url).json(&request).send().map_err(|e| Error::Backend {
        message: format!("request to {} failed: {e}", config.url),
        retryable: e.is_timeout() || e.is_connect(),
    })?;
    let status = response.status();
    if !status.is_success() {
        return Err(Error::Backend {
            message: format!("remote returned {status}"),
            retryable: status.is_server_error(),
        });
    }
    let body: EpsResponse = response.json().map_err(|e| Error::Backend {
        message: format!("malformed response: {e}"),
        retryable: e.is_timeout(),
    })?;
    let eps = body.eps.decode()?;
    if eps.shape() != z.shape() {
        return Err(Error::shape(z.shape(), eps.shape()));
    }
    Ok(eps)
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        "remote"
    }

    fn latent_shape(&self, height: usize, width: usize) -> Vec<usize> {
        self.config.codec.latent_shape(height, width)
    }

    fn encode(&self, image: &RasterImage) -> Result<Latent> {
        self.config.codec.encode(image)
    }

    fn decode(&self, latent: &Latent) -> Result<RasterImage> {
        self.config.codec.decode(latent)
    }

    fn codec_tolerance(&self) -> f64 {
        self.config.codec.tolerance()
    }

    fn codec(&self) -> Option<Codec> {
        Some(self.config.codec)
    }

    fn encode_text(&self, prompt: &str) -> Result<Conditioning> {
        text::toy_text_encode(prompt, self.config.n_tokens, self.config.context_dim)
    }

    fn predict_eps(
        &self,
        z: &Latent,
        t: usize,
        cond: &Conditioning,
        hook: Option<&dyn CrossAttentionHook>,
    ) -> Result<Latent> {
        if hook.is_some() {
            return Err(Error::Unsupported("remote".into()));
        }
        self.schedule.check_timestep(t)?;
        let _permit = self.permits.acquire();
        remote_predict_eps(&self.client, &self.config, z, t, cond)
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn wire_arrays_round_trip_through_f32(values in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
            let n = values.len();
            let a = ArrayD::from_shape_vec(IxDyn(&[n]), values.clone()).unwrap();
            let back = WireArray::encode(&a).decode().unwrap();
            prop_assert_eq!(back.shape(), &[n]);
            for (x, y) in back.iter().zip(values.iter()) {
                prop_assert_eq!(*x, (*y as f32) as f64);
            }
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let w = WireArray {
            shape: vec![2, 2],
            data: STANDARD.encode([0u8; 12]),
        };
        assert!(w.decode().is_err());
    }
}
