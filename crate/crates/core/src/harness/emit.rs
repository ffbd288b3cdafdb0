//! Artifact writers: binary PPM images and canonical JSON manifests.
//!
//! Canonical JSON sorts object keys, prints every float as `{:.16e}`
//! (17 significant digits), uses no insignificant whitespace and ends
//! with a newline, so parse → serialize is byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::grid::Raster;
use crate::harness::metrics::SeedMetrics;
use crate::harness::HarnessConfig;

/// P6 bytes: values clamped to `[0, 1]`, scaled by 255 and rounded.
/// One channel is replicated to gray; three are written as RGB; other
/// counts use the channel mean.
pub fn ppm_bytes(img: &Raster) -> Vec<u8> {
    let (h, w, c) = img.shape();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..h {
        for x in 0..w {
            if c == 3 {
                out.extend((0..3).map(|ch| byte(img.get(y, x, ch))));
            } else {
                let v = (0..c).map(|ch| img.get(y, x, ch)).sum::<f64>() / c as f64;
                out.extend([byte(v); 3]);
            }
        }
    }
    out
}

pub fn write_ppm(img: &Raster, path: &Path) -> Result<()> {
    std::fs::write(path, ppm_bytes(img)).map_err(|e| Error::io(path, e))
}

fn write_value(out: &mut String, v: &Value) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_u64() {
                write!(out, "{i}").unwrap();
            } else if let Some(i) = n.as_i64() {
                write!(out, "{i}").unwrap();
            } else {
                write!(out, "{:.16e}", n.as_f64().unwrap_or(f64::NAN)).unwrap();
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, item);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_value(out, &map[k]);
            }
            out.push('}');
        }
    }
}

/// Canonical text of any serializable value.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = String::new();
    write_value(&mut out, &v);
    out.push('\n');
    Ok(out)
}

/// One run inside a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunEntry {
    pub metrics: SeedMetrics,
    /// Artifact paths relative to the manifest.
    pub images: Vec<String>,
}

/// Training loss curve of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossCurve {
    pub role: String,
    /// Mean loss over each consecutive window of `window` steps.
    pub window: usize,
    pub losses: Vec<f64>,
    pub parameters: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: HarnessConfig,
    pub runs: Vec<RunEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub training: Vec<LossCurve>,
    /// Wall-clock seconds; recorded only on request since it breaks byte reproducibility.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_secs: Option<f64>,
}

impl RunManifest {
    pub fn new(config: HarnessConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            runs: Vec::new(),
            training: Vec::new(),
            duration_secs: None,
        }
    }

    pub fn to_canonical(&self) -> Result<String> {
        to_canonical_json(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_canonical()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::metrics::Localization;
    use crate::world::{GlyphKind, SceneKind};

    #[test]
    fn single_pixel_payloads() {
        let header = b"P6\n1 1\n255\n";
        for (v, b) in [(1.0, 255u8), (0.0, 0), (2.0, 255), (-1.0, 0), (0.5, 128)] {
            let bytes = ppm_bytes(&Raster::filled(1, 1, 1, v));
            assert_eq!(&bytes[..header.len()], header);
            assert_eq!(&bytes[header.len()..], &[b, b, b]);
        }
    }

    #[test]
    fn ppm_layout_is_row_major() {
        let img = Raster::from_fn(2, 3, 1, |y, x, _| (y * 3 + x) as f64 / 5.0);
        let bytes = ppm_bytes(&img);
        let payload = &bytes[b"P6\n3 2\n255\n".len()..];
        let expect: Vec<u8> = (0..6)
            .flat_map(|i| [(i as f64 / 5.0 * 255.0).round() as u8; 3])
            .collect();
        assert_eq!(payload, &expect[..]);
    }

    #[test]
    fn writing_twice_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let img = Raster::from_fn(5, 4, 1, |y, x, _| ((y * 7 + x * 3) % 11) as f64 / 10.0);
        let (a, b) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"));
        write_ppm(&img, &a).unwrap();
        write_ppm(&img, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        assert!(write_ppm(&img, &dir.path().join("missing/x.ppm")).is_err());
    }

    #[test]
    fn canonical_json_formats() {
        let v = serde_json::json!({"b": [1, -2, 0.1, true, null], "a": {"z": "q\"", "y": 1e-300}});
        let text = to_canonical_json(&v).unwrap();
        assert_eq!(
            text,
            "{\"a\":{\"y\":1.0000000000000000e-300,\"z\":\"q\\\"\"},\"b\":[1,-2,1.0000000000000001e-1,true,null]}\n"
        );
    }

    fn sample() -> RunManifest {
        let mut m = RunManifest::new(HarnessConfig::default());
        m.runs.push(RunEntry {
            metrics: SeedMetrics {
                seed: 3,
                scene: SceneKind::Checkerboard,
                subject: GlyphKind::Cross,
                subject_fidelity: 0.987654321,
                scene_consistency: 1.0 / 3.0,
                localization: Some(Localization {
                    subject_ratio: 2.5,
                    scene_ratio: 0.1,
                }),
            },
            images: vec!["image.ppm".into()],
        });
        m.training.push(LossCurve {
            role: "scene".into(),
            window: 100,
            losses: vec![0.3, 0.2],
            parameters: "scene.params".into(),
        });
        m
    }

    #[test]
    fn manifest_round_trip_is_byte_identical() {
        for m in [RunManifest::new(HarnessConfig::default()), sample()] {
            let text = m.to_canonical().unwrap();
            assert!(text.ends_with('\n'));
            let back = RunManifest::parse(&text).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_canonical().unwrap(), text);
        }
        let empty = RunManifest::new(HarnessConfig::default()).to_canonical().unwrap();
        assert!(empty.contains("\"runs\":[]"));
    }

    #[test]
    fn manifest_file_io() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = sample();
        m.write(&path).unwrap();
        assert_eq!(RunManifest::read(&path).unwrap(), m);
        assert!(RunManifest::read(&dir.path().join("nope.json")).is_err());
        std::fs::write(&path, "{}").unwrap();
        assert!(matches!(RunManifest::read(&path), Err(Error::Format(_))));
    }
}
