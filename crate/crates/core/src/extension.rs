//! Training-free context extension: NTK-aware RoPE base adjustment (static or
//! chunk-quantized dynamic), LogN attention-logit scaling, and layer-wise windowed
//! attention.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{AttentionMask, ModelConfig, RopeTable};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ExtensionError {
    #[error("{0}")]
    Domain(String),
    #[error("invalid extension setting `{input}`: {msg}")]
    Parse { input: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum NtkMode {
    #[default]
    Off,
    Static {
        scale: f64,
    },
    /// `chunk` of `None` means one training context per chunk.
    Dynamic {
        #[serde(default)]
        chunk: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowSchedule {
    /// One window per layer, non-decreasing from layer 0.
    Explicit(Vec<usize>),
    /// Geometric interpolation from `min` at layer 0 to `max` at the top layer.
    Auto { min: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtensionConfig {
    #[serde(default)]
    pub ntk: NtkMode,
    #[serde(default)]
    pub logn: bool,
    #[serde(default)]
    pub windows: Option<WindowSchedule>,
}

impl ExtensionConfig {
    /// Every technique disabled.
    pub fn off() -> Self {
        Self::default()
    }

    pub fn validate(&self, n_layers: usize) -> Result<(), ExtensionError> {
        match self.ntk {
            NtkMode::Static { scale } if !(scale >= 1.0 && scale.is_finite()) => {
                return Err(ExtensionError::Domain(format!("NTK scale {scale} must be >= 1")))
            }
            NtkMode::Dynamic { chunk: Some(0) } => {
                return Err(ExtensionError::Domain("dynamic NTK chunk must be >= 1".into()))
            }
            _ => {}
        }
        match &self.windows {
            Some(WindowSchedule::Explicit(ws)) => {
                if ws.len() != n_layers {
                    return Err(ExtensionError::Domain(format!(
                        "{} windows given for {n_layers} layers",
                        ws.len()
                    )));
                }
                if ws.contains(&0) {
                    return Err(ExtensionError::Domain("window sizes must be >= 1".into()));
                }
                if ws.windows(2).any(|p| p[1] < p[0]) {
                    return Err(ExtensionError::Domain(
                        "window sizes must be non-decreasing from the bottom layer".into(),
                    ));
                }
            }
            Some(WindowSchedule::Auto { min, max }) if *min == 0 || max < min => {
                return Err(ExtensionError::Domain(format!("bad auto window range {min}..{max}")))
            }
            _ => {}
        }
        Ok(())
    }

    /// Short label used in reports, e.g. `dynamic_ntk+logn+window`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        match self.ntk {
            NtkMode::Off => {}
            NtkMode::Static { scale } => parts.push(format!("static_ntk({scale})")),
            NtkMode::Dynamic { .. } => parts.push("dynamic_ntk".to_string()),
        }
        if self.logn {
            parts.push("logn".into());
        }
        if self.windows.is_some() {
            parts.push("window".into());
        }
        if parts.is_empty() {
            "off".into()
        } else {
            parts.join("+")
        }
    }

    /// Builds a technique set from `+`-joined names: `off`, `ntk`/`dynamic_ntk`,
    /// `static_ntk:S`, `logn`, `window`/`window_attn`. Windows use the auto schedule
    /// around `train_context`.
    pub fn from_label(label: &str, train_context: usize) -> Result<Self, ExtensionError> {
        let mut ext = Self::off();
        for part in label.split('+').map(str::trim) {
            match part {
                "off" | "vanilla" => {}
                "ntk" | "dynamic_ntk" => ext.ntk = NtkMode::Dynamic { chunk: None },
                "logn" => ext.logn = true,
                "window" | "window_attn" => ext.windows = Some(default_auto_windows(train_context)),
                p if p.starts_with("static_ntk:") => ext.ntk = parse_ntk(&p.replacen("static_ntk", "static", 1))?,
                other => {
                    return Err(ExtensionError::Parse {
                        input: label.into(),
                        msg: format!("unknown technique `{other}`"),
                    })
                }
            }
        }
        Ok(ext)
    }
}

/// Parses `off`, `static:S` or `dynamic:CHUNK` (`dynamic` alone uses the training context).
pub fn parse_ntk(s: &str) -> Result<NtkMode, ExtensionError> {
    let err = |msg: &str| ExtensionError::Parse {
        input: s.into(),
        msg: msg.into(),
    };
    let (kind, arg) = match s.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (s, None),
    };
    match (kind, arg) {
        ("off", None) => Ok(NtkMode::Off),
        ("static", Some(a)) => {
            let scale: f64 = a.parse().map_err(|_| err("scale is not a number"))?;
            if !(scale >= 1.0 && scale.is_finite()) {
                return Err(err("scale must be >= 1"));
            }
            Ok(NtkMode::Static { scale })
        }
        ("dynamic", None) => Ok(NtkMode::Dynamic { chunk: None }),
        ("dynamic", Some(a)) => {
            let chunk: usize = a.parse().map_err(|_| err("chunk is not an integer"))?;
            if chunk == 0 {
                return Err(err("chunk must be >= 1"));
            }
            Ok(NtkMode::Dynamic { chunk: Some(chunk) })
        }
        _ => Err(err("expected off, static:S or dynamic:CHUNK")),
    }
}

/// Parses `w0,w1,...` or `auto:MIN:MAX`.
pub fn parse_windows(s: &str) -> Result<WindowSchedule, ExtensionError> {
    let err = |msg: &str| ExtensionError::Parse {
        input: s.into(),
        msg: msg.into(),
    };
    if let Some(rest) = s.strip_prefix("auto:") {
        let (a, b) = rest.split_once(':').ok_or_else(|| err("expected auto:MIN:MAX"))?;
        let min = a.parse().map_err(|_| err("MIN is not an integer"))?;
        let max = b.parse().map_err(|_| err("MAX is not an integer"))?;
        return Ok(WindowSchedule::Auto { min, max });
    }
    let ws = s
        .split(',')
        .map(|w| w.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| err("expected comma-separated integers"))?;
    Ok(WindowSchedule::Explicit(ws))
}

impl fmt::Display for NtkMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NtkMode::Off => write!(f, "off"),
            NtkMode::Static { scale } => write!(f, "static:{scale}"),
            NtkMode::Dynamic { chunk: None } => write!(f, "dynamic"),
            NtkMode::Dynamic { chunk: Some(c) } => write!(f, "dynamic:{c}"),
        }
    }
}

impl FromStr for NtkMode {
    type Err = ExtensionError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_ntk(s)
    }
}

/// `base · s^(head_dim/(head_dim-2))`.
pub fn ntk_adjusted_base(base: f64, scale: f64, head_dim: usize) -> Result<f64, ExtensionError> {
    if head_dim <= 2 {
        return Err(ExtensionError::Domain(format!(
            "NTK base adjustment needs head_dim > 2, got {head_dim}"
        )));
    }
    if scale.is_nan() || scale < 1.0 {
        return Err(ExtensionError::Domain(format!("NTK scale {scale} must be >= 1")));
    }
    Ok(base * scale.powf(head_dim as f64 / (head_dim as f64 - 2.0)))
}

/// `max(1, ceil_to_chunk(m)/L)`: piecewise constant with period `chunk`.
pub fn dynamic_scale(current_len: usize, train_context: usize, chunk: usize) -> f64 {
    assert!(train_context >= 1 && chunk >= 1);
    let quantized = current_len.div_ceil(chunk) * chunk;
    (quantized as f64 / train_context as f64).max(1.0)
}

/// `max(1, ln m / ln N)`.
pub fn logn_scale(current_len: usize, train_context: usize) -> Result<f64, ExtensionError> {
    if train_context <= 1 {
        return Err(ExtensionError::Domain(format!(
            "LogN scaling needs a training length above 1, got {train_context}"
        )));
    }
    if current_len <= train_context {
        return Ok(1.0);
    }
    Ok((current_len as f64).ln() / (train_context as f64).ln())
}

/// Default auto schedule: half the training context at the bottom layer, four times it
/// at the top.
pub fn default_auto_windows(train_context: usize) -> WindowSchedule {
    WindowSchedule::Auto {
        min: (train_context / 2).max(1),
        max: 4 * train_context,
    }
}

/// Per-layer window sizes. Auto schedules interpolate geometrically and round to a
/// multiple of 64 once the window reaches 64.
pub fn layer_windows(schedule: &WindowSchedule, n_layers: usize) -> Vec<usize> {
    match schedule {
        WindowSchedule::Explicit(ws) => ws.clone(),
        WindowSchedule::Auto { min, max } => {
            let (lo, hi) = (*min as f64, *max as f64);
            let mut out: Vec<usize> = (0..n_layers)
                .map(|i| {
                    let t = if n_layers == 1 {
                        1.0
                    } else {
                        i as f64 / (n_layers - 1) as f64
                    };
                    let w = lo * (hi / lo).powf(t);
                    if w >= 64.0 {
                        ((w / 64.0).round() as usize).max(1) * 64
                    } else {
                        w.round().max(1.0) as usize
                    }
                })
                .collect();
            for i in 1..out.len() {
                out[i] = out[i].max(out[i - 1]);
            }
            out
        }
    }
}

/// Attention mask for one layer.
pub fn window_mask(layer_index: usize, n_layers: usize, schedule: Option<&WindowSchedule>) -> AttentionMask {
    assert!(layer_index < n_layers);
    match schedule {
        Some(s) => AttentionMask::windowed(layer_windows(s, n_layers)[layer_index]),
        None => AttentionMask::causal(),
    }
}

/// Everything a forward pass at context length `m` needs from the extension config.
#[derive(Debug, Clone, PartialEq)]
pub struct InferencePlan {
    pub rope: RopeTable,
    pub ntk_scale: f64,
    /// LogN multiplier at length `m` (1 when disabled).
    pub logn: f64,
    /// Training length for per-position LogN scaling; `None` when disabled.
    pub logn_train_context: Option<usize>,
    pub masks: Vec<AttentionMask>,
}

impl InferencePlan {
    /// Logit multiplier for a query at absolute position `pos` (0-based).
    pub fn logit_scale(&self, pos: usize) -> f64 {
        match self.logn_train_context {
            Some(n) => logn_scale(pos + 1, n).expect("validated at plan construction"),
            None => 1.0,
        }
    }
}

/// Resolves the extension config against the model at current length `m`.
pub fn configure_inference(
    cfg: &ModelConfig,
    ext: &ExtensionConfig,
    m: usize,
) -> Result<InferencePlan, ExtensionError> {
    ext.validate(cfg.n_layers)?;
    let scale = match ext.ntk {
        NtkMode::Off => 1.0,
        NtkMode::Static { scale } => scale,
        NtkMode::Dynamic { chunk } => dynamic_scale(m.max(1), cfg.train_context, chunk.unwrap_or(cfg.train_context)),
    };
    let base = if scale == 1.0 {
        cfg.rope_base
    } else {
        ntk_adjusted_base(cfg.rope_base, scale, cfg.head_dim())?
    };
    let (logn, logn_train_context) = if ext.logn {
        (logn_scale(m.max(1), cfg.train_context)?, Some(cfg.train_context))
    } else {
        (1.0, None)
    };
    let masks = (0..cfg.n_layers)
        .map(|l| window_mask(l, cfg.n_layers, ext.windows.as_ref()))
        .collect();
    Ok(InferencePlan {
        rope: RopeTable::new(cfg.head_dim(), base),
        ntk_scale: scale,
        logn,
        logn_train_context,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ntk_identity_and_known_value() {
        assert_eq!(ntk_adjusted_base(10_000.0, 1.0, 128).unwrap(), 10_000.0);
        let b = ntk_adjusted_base(10_000.0, 2.0, 128).unwrap();
        // 2^(128/126) = 2^(64/63), evaluated independently via exp/ln.
        let want = 10_000.0 * (std::f64::consts::LN_2 * 64.0 / 63.0).exp();
        assert!((b - want).abs() < 1e-9);
        // 30-digit reference: 20221.2616897379122...
        assert!((b - 20_221.261_689_737_912).abs() < 1e-8, "{b}");
        assert!(ntk_adjusted_base(10_000.0, 2.0, 2).is_err());
    }

    #[test]
    fn ntk_first_angle_ratio() {
        // i = 1 is the first rotating pair whose frequency depends on the base.
        for hd in [8usize, 32, 128] {
            let s = 3.0;
            let adjusted = RopeTable::new(hd, ntk_adjusted_base(10_000.0, s, hd).unwrap());
            let plain = RopeTable::new(hd, 10_000.0);
            assert_eq!(adjusted.inv_freq[0], 1.0);
            let ratio = adjusted.inv_freq[1] / plain.inv_freq[1];
            let want = s.powf(-2.0 / (hd as f64 - 2.0));
            assert!((ratio - want).abs() < 1e-12, "{ratio} vs {want}");
            // Lowest frequency is compressed by exactly 1/s.
            let last = hd / 2 - 1;
            assert!((adjusted.inv_freq[last] / plain.inv_freq[last] - 1.0 / s).abs() < 1e-12);
        }
    }

    #[test]
    fn dynamic_scale_values() {
        assert_eq!(dynamic_scale(100, 2048, 512), 1.0);
        assert_eq!(dynamic_scale(2048, 2048, 512), 1.0);
        assert_eq!(dynamic_scale(4096, 2048, 512), 2.0);
        assert_eq!(dynamic_scale(4097, 2048, 512), 2.25);
    }

    #[test]
    fn dynamic_scale_monotone_sweep() {
        let (l, chunk) = (64, 16);
        let mut prev = dynamic_scale(1, l, chunk);
        for m in 2..=16 * l {
            let s = dynamic_scale(m, l, chunk);
            assert!(s >= prev);
            if (m - 1) % chunk != 0 {
                assert_eq!(s, prev, "scale changed inside a chunk at m={m}");
            }
            prev = s;
        }
    }

    #[test]
    fn logn_values() {
        assert_eq!(logn_scale(2048, 2048).unwrap(), 1.0);
        assert_eq!(logn_scale(100, 2048).unwrap(), 1.0);
        let v = logn_scale(16384, 2048).unwrap();
        assert!((v - 14.0 / 11.0).abs() < 1e-12);
        assert!(logn_scale(10, 1).is_err());
    }

    #[test]
    fn auto_windows_grow() {
        let ws = layer_windows(&WindowSchedule::Auto { min: 128, max: 1024 }, 4);
        assert_eq!(ws, vec![128, 256, 512, 1024]);
        let ws = layer_windows(&default_auto_windows(2048), 32);
        assert_eq!(ws[0], 1024);
        assert_eq!(ws[31], 8192);
        assert!(ws.windows(2).all(|p| p[0] <= p[1]));
        assert!(ws.iter().all(|w| w % 64 == 0));
        assert_eq!(
            layer_windows(&WindowSchedule::Auto { min: 3, max: 12 }, 3),
            vec![3, 6, 12]
        );
    }

    #[test]
    fn parse_cli_forms() {
        assert_eq!(parse_ntk("off").unwrap(), NtkMode::Off);
        assert_eq!(parse_ntk("static:2.5").unwrap(), NtkMode::Static { scale: 2.5 });
        assert_eq!(parse_ntk("dynamic:512").unwrap(), NtkMode::Dynamic { chunk: Some(512) });
        assert!(parse_ntk("static:0.5").is_err());
        assert!(parse_ntk("bogus").is_err());
        assert_eq!(parse_windows("1,2,4").unwrap(), WindowSchedule::Explicit(vec![1, 2, 4]));
        assert_eq!(
            parse_windows("auto:64:512").unwrap(),
            WindowSchedule::Auto { min: 64, max: 512 }
        );
        assert!(parse_windows("1,x").is_err());
        let ext = ExtensionConfig::from_label("ntk+logn+window", 256).unwrap();
        assert_eq!(ext.label(), "dynamic_ntk+logn+window");
        assert_eq!(ExtensionConfig::from_label("off", 256).unwrap(), ExtensionConfig::off());
        assert!(ExtensionConfig::from_label("ntk+yarn", 256).is_err());
    }

    #[test]
    fn validation_rejects_bad_schedules() {
        let mut ext = ExtensionConfig::off();
        ext.windows = Some(WindowSchedule::Explicit(vec![4, 2]));
        assert!(ext.validate(2).is_err());
        ext.windows = Some(WindowSchedule::Explicit(vec![2, 4, 8]));
        assert!(ext.validate(2).is_err());
        ext.windows = Some(WindowSchedule::Explicit(vec![2, 4]));
        assert!(ext.validate(2).is_ok());
        ext.ntk = NtkMode::Dynamic { chunk: Some(0) };
        assert!(ext.validate(2).is_err());
    }

    #[test]
    fn plan_identity_parameters() {
        let cfg = ModelConfig::new(10, 32, 2, 3, 64);
        let off = configure_inference(&cfg, &ExtensionConfig::off(), 500).unwrap();
        let s1 = configure_inference(
            &cfg,
            &ExtensionConfig {
                ntk: NtkMode::Static { scale: 1.0 },
                ..Default::default()
            },
            500,
        )
        .unwrap();
        assert_eq!(off.rope, s1.rope);
        assert_eq!(off.masks, vec![AttentionMask::causal(); 3]);
        let dynamic = configure_inference(
            &cfg,
            &ExtensionConfig {
                ntk: NtkMode::Dynamic { chunk: None },
                ..Default::default()
            },
            3 * 64,
        )
        .unwrap();
        let static3 = configure_inference(
            &cfg,
            &ExtensionConfig {
                ntk: NtkMode::Static { scale: 3.0 },
                ..Default::default()
            },
            3 * 64,
        )
        .unwrap();
        assert_eq!(dynamic.rope, static3.rope);
    }

    proptest! {
        #[test]
        fn dynamic_scale_is_monotone(l in 1usize..512, chunk in 1usize..256, m in 1usize..8192) {
            prop_assert!(dynamic_scale(m + 1, l, chunk) >= dynamic_scale(m, l, chunk));
            prop_assert!(dynamic_scale(m, l, chunk) >= 1.0);
        }

        #[test]
        fn ntk_base_increasing(s in 1.0f64..64.0, ds in 0.01f64..8.0, hd in 2usize..64) {
            let hd = 2 * hd;
            prop_assert!(ntk_adjusted_base(10_000.0, s + ds, hd).unwrap() > ntk_adjusted_base(10_000.0, s, hd).unwrap());
        }

        #[test]
        fn window_masks_are_causal_submasks(w in 1usize..40, len in 1usize..40) {
            let dense = AttentionMask::windowed(w).dense(len);
            let causal = AttentionMask::causal().dense(len);
            for q in 0..len {
                prop_assert!(dense[q * len + q]);
                for k in 0..len {
                    prop_assert!(!dense[q * len + k] || causal[q * len + k]);
                }
            }
        }
    }
}
